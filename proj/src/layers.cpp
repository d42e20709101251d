#include "modfuse/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kernels.hpp"
#include "modfuse/error.hpp"

namespace modfuse {

using detail::round_up_lane;

Param::Param(std::string id_, Tensor value_) : id(std::move(id_)), value(std::move(value_)), grad(value.shape(), 0.0)
{
}

const char* to_string(LayerKind kind) noexcept
{
    switch (kind) {
    case LayerKind::Conv3d: return "conv3d";
    case LayerKind::ConvTranspose3d: return "conv_transpose3d";
    case LayerKind::InstanceNorm: return "instance_norm";
    case LayerKind::LeakyRelu: return "leaky_relu";
    case LayerKind::SoftmaxChannels: return "softmax_channels";
    case LayerKind::ConcatChannels: return "concat_channels";
    case LayerKind::Add: return "add";
    }
    return "unknown";
}

void LayerSpec::validate() const
{
    if (in_channels < 1 || out_channels < 1) {
        throw Error(ErrorCode::ConfigInvalid, std::string(to_string(kind)) + ": channel counts must be >= 1");
    }
    if (kind == LayerKind::Conv3d) {
        for (std::size_t a = 0; a < 3; ++a) {
            if (kernel[a] % 2 == 0) {
                throw Error(ErrorCode::ConfigInvalid, "conv3d kernel extent on axis " + std::to_string(a) + " is even");
            }
        }
    }
    if (kind == LayerKind::Conv3d || kind == LayerKind::ConvTranspose3d) {
        if (stride != 1 && stride != 2) {
            throw Error(ErrorCode::ConfigInvalid, "stride must be 1 or 2, got " + std::to_string(stride));
        }
    }
    if (kind == LayerKind::ConvTranspose3d && (stride != 2 || kernel != std::array<std::size_t, 3>{2, 2, 2})) {
        throw Error(ErrorCode::ConfigInvalid, "conv_transpose3d supports kernel 2, stride 2 only");
    }
    if (kind == LayerKind::LeakyRelu && !(negative_slope >= 0.0 && negative_slope < 1.0)) {
        throw Error(ErrorCode::ConfigInvalid, "negative_slope must lie in [0,1)");
    }
}

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride, std::size_t pad)
{
    const std::size_t padded = extent + 2 * pad;
    if (padded < kernel || stride == 0) return 0;
    return (padded - kernel) / stride + 1;
}

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what)
{
    if (t.rank() != rank) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + " must have rank " + std::to_string(rank) +
                                                  ", got " + shape_string(t.shape()));
    }
}

struct ConvGeometry {
    std::size_t cin, cout, d, h, w;
    std::size_t kd, kh, kw;
    std::size_t stride, pad;
    std::size_t dp, hp, wp;
    std::size_t od, oh, ow;

    std::size_t plane() const { return dp * hp * wp; }
    std::size_t taps() const { return kd * kh * kw; }
    std::size_t tap_offset(std::size_t t) const
    {
        const std::size_t z = t / (kh * kw), y = (t / kw) % kh, x = t % kw;
        return z * hp * wp + y * wp + x;
    }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad)
{
    require_rank(x, 4, "conv3d input");
    require_rank(w, 5, "conv3d weight");
    if (stride == 0) throw Error(ErrorCode::InvalidArgument, "conv3d stride must be >= 1");
    if (w.dim(1) != x.dim(0)) {
        throw Error(ErrorCode::ShapeMismatch, "conv3d axis 1 (input channels): weight has " +
                                                  std::to_string(w.dim(1)) + ", input has " +
                                                  std::to_string(x.dim(0)));
    }
    ConvGeometry g{};
    g.cin = x.dim(0);
    g.cout = w.dim(0);
    g.d = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.kd = w.dim(2);
    g.kh = w.dim(3);
    g.kw = w.dim(4);
    g.stride = stride;
    g.pad = pad;
    g.dp = g.d + 2 * pad;
    g.hp = g.h + 2 * pad;
    g.wp = g.w + 2 * pad;
    g.od = conv_output_extent(g.d, g.kd, stride, pad);
    g.oh = conv_output_extent(g.h, g.kh, stride, pad);
    g.ow = conv_output_extent(g.w, g.kw, stride, pad);
    const std::size_t out[3] = {g.od, g.oh, g.ow};
    for (std::size_t a = 0; a < 3; ++a) {
        if (out[a] == 0) {
            throw Error(ErrorCode::ShapeMismatch, "conv3d spatial axis " + std::to_string(a + 1) +
                                                      ": kernel larger than padded input");
        }
    }
    return g;
}

// Zero-padded copy of x with `lane` doubles of tail slack.
std::vector<double> pad_input(const Tensor& x, const ConvGeometry& g)
{
    std::vector<double> xp(g.cin * g.plane() + detail::lane, 0.0);
    const double* src = x.ptr();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t z = 0; z < g.d; ++z)
            for (std::size_t y = 0; y < g.h; ++y) {
                const double* row = src + ((c * g.d + z) * g.h + y) * g.w;
                double* dst = xp.data() + c * g.plane() + ((z + g.pad) * g.hp + (y + g.pad)) * g.wp + g.pad;
                std::copy(row, row + g.w, dst);
            }
    return xp;
}

// Output positions of a stride-1 convolution, laid out on the padded grid.
std::size_t stride1_span(const ConvGeometry& g)
{
    return (g.od - 1) * g.hp * g.wp + (g.oh - 1) * g.wp + g.ow;
}

std::vector<double> im2col(const std::vector<double>& xp, const ConvGeometry& g, std::size_t cols_stride)
{
    const std::size_t taps = g.taps();
    std::vector<double> cols(g.cin * taps * cols_stride, 0.0);
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t t = 0; t < taps; ++t) {
            const std::size_t off = c * g.plane() + g.tap_offset(t);
            double* row = cols.data() + (c * taps + t) * cols_stride;
            std::size_t o = 0;
            for (std::size_t z = 0; z < g.od; ++z)
                for (std::size_t y = 0; y < g.oh; ++y) {
                    const double* s = xp.data() + off + (z * g.stride * g.hp + y * g.stride) * g.wp;
                    for (std::size_t x = 0; x < g.ow; ++x) row[o++] = s[x * g.stride];
                }
        }
    return cols;
}

}  // namespace

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad)
{
    const ConvGeometry g = conv_geometry(x, w, stride, pad);
    require_rank(b, 1, "conv3d bias");
    if (b.dim(0) != g.cout) throw Error(ErrorCode::ShapeMismatch, "conv3d bias length differs from output channels");

    const std::size_t taps = g.taps();
    const std::size_t k_count = g.cin * taps;
    const std::vector<double> xp = pad_input(x, g);
    Tensor out({g.cout, g.od, g.oh, g.ow});
    const std::size_t n_out = g.od * g.oh * g.ow;

    // Transposed weights: wt[k * cout + co] with k = ci * taps + t.
    std::vector<double> wt(k_count * g.cout);
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t k = 0; k < k_count; ++k) wt[k * g.cout + co] = w[co * k_count + k];

    if (g.stride == 1) {
        const std::size_t span = round_up_lane(stride1_span(g));
        std::vector<double> buf(g.cout * span);
        std::vector<double*> rows(g.cout);
        for (std::size_t co = 0; co < g.cout; ++co) {
            rows[co] = buf.data() + co * span;
            std::fill(rows[co], rows[co] + span, b[co]);
        }
        std::vector<const double*> src(k_count);
        for (std::size_t c = 0; c < g.cin; ++c)
            for (std::size_t t = 0; t < taps; ++t) src[c * taps + t] = xp.data() + c * g.plane() + g.tap_offset(t);
        detail::shifted_gemm(rows, wt.data(), g.cout, src, span);
        double* o = out.ptr();
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t z = 0; z < g.od; ++z)
                for (std::size_t y = 0; y < g.oh; ++y) {
                    const double* s = rows[co] + z * g.hp * g.wp + y * g.wp;
                    o = std::copy(s, s + g.ow, o);
                }
        return out;
    }

    const std::size_t cols_stride = round_up_lane(n_out);
    const std::vector<double> cols = im2col(xp, g, cols_stride);
    std::vector<double> buf(g.cout * cols_stride);
    std::vector<double*> rows(g.cout);
    for (std::size_t co = 0; co < g.cout; ++co) {
        rows[co] = buf.data() + co * cols_stride;
        std::fill(rows[co], rows[co] + cols_stride, b[co]);
    }
    std::vector<const double*> src(k_count);
    for (std::size_t k = 0; k < k_count; ++k) src[k] = cols.data() + k * cols_stride;
    detail::shifted_gemm(rows, wt.data(), g.cout, src, cols_stride);
    for (std::size_t co = 0; co < g.cout; ++co) std::copy(rows[co], rows[co] + n_out, out.ptr() + co * n_out);
    return out;
}

ConvGrads conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad)
{
    const ConvGeometry g = conv_geometry(x, w, stride, pad);
    const Shape expected{g.cout, g.od, g.oh, g.ow};
    if (grad_out.shape() != expected) {
        throw Error(ErrorCode::ShapeMismatch, "conv3d grad_out " + shape_string(grad_out.shape()) +
                                                  " differs from forward output " + shape_string(expected));
    }
    const std::size_t taps = g.taps();
    const std::size_t k_count = g.cin * taps;
    const std::size_t n_out = g.od * g.oh * g.ow;
    const std::vector<double> xp = pad_input(x, g);

    ConvGrads grads{Tensor(x.shape()), Tensor(w.shape()), Tensor({g.cout})};
    for (std::size_t co = 0; co < g.cout; ++co) {
        double s = 0.0;
        for (std::size_t i = 0; i < n_out; ++i) s += grad_out[co * n_out + i];
        grads.grad_bias[co] = s;
    }

    std::vector<double> gxp(g.cin * round_up_lane(g.plane()) + detail::lane, 0.0);
    const std::size_t gx_stride = round_up_lane(g.plane());

    if (g.stride == 1) {
        const std::size_t span_len = stride1_span(g);
        const std::size_t span = round_up_lane(span_len);
        std::size_t max_off = g.tap_offset(taps - 1);
        // Grad on the padded output grid, preceded by max_off zeros so the input
        // gradient becomes a shifted product as well.
        const std::size_t g_stride = max_off + gx_stride + detail::lane;
        std::vector<double> gext(g.cout * g_stride, 0.0);
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t z = 0; z < g.od; ++z)
                for (std::size_t y = 0; y < g.oh; ++y) {
                    const double* s = grad_out.ptr() + ((co * g.od + z) * g.oh + y) * g.ow;
                    std::copy(s, s + g.ow, gext.data() + co * g_stride + max_off + z * g.hp * g.wp + y * g.wp);
                }

        std::vector<const double*> a(g.cout);
        for (std::size_t co = 0; co < g.cout; ++co) a[co] = gext.data() + co * g_stride + max_off;
        std::vector<const double*> src(k_count);
        for (std::size_t c = 0; c < g.cin; ++c)
            for (std::size_t t = 0; t < taps; ++t) src[c * taps + t] = xp.data() + c * g.plane() + g.tap_offset(t);
        detail::row_dots(a, src, span, grads.grad_weight.ptr(), k_count);

        // gxp[ci][j] = sum_{co,t} w[co][ci][t] * gext[co][max_off + j - off_t]
        std::vector<double> wt(g.cout * taps * g.cin);
        std::vector<const double*> gsrc(g.cout * taps);
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t t = 0; t < taps; ++t) {
                gsrc[co * taps + t] = gext.data() + co * g_stride + (max_off - g.tap_offset(t));
                for (std::size_t c = 0; c < g.cin; ++c) wt[(co * taps + t) * g.cin + c] = w[(co * g.cin + c) * taps + t];
            }
        std::vector<double*> rows(g.cin);
        for (std::size_t c = 0; c < g.cin; ++c) rows[c] = gxp.data() + c * gx_stride;
        detail::shifted_gemm(rows, wt.data(), g.cin, gsrc, gx_stride);
    } else {
        const std::size_t cols_stride = round_up_lane(n_out);
        const std::vector<double> cols = im2col(xp, g, cols_stride);
        std::vector<double> gpad(g.cout * cols_stride, 0.0);
        for (std::size_t co = 0; co < g.cout; ++co)
            std::copy(grad_out.ptr() + co * n_out, grad_out.ptr() + (co + 1) * n_out, gpad.data() + co * cols_stride);

        std::vector<const double*> a(g.cout);
        for (std::size_t co = 0; co < g.cout; ++co) a[co] = gpad.data() + co * cols_stride;
        std::vector<const double*> bcols(k_count);
        for (std::size_t k = 0; k < k_count; ++k) bcols[k] = cols.data() + k * cols_stride;
        detail::row_dots(a, bcols, n_out, grads.grad_weight.ptr(), k_count);

        // gcol[k][o] = sum_co w[co][k] * g[co][o]; w is already laid out as wt[co * k_count + k].
        std::vector<double> gcol(k_count * cols_stride, 0.0);
        std::vector<double*> rows(k_count);
        for (std::size_t k = 0; k < k_count; ++k) rows[k] = gcol.data() + k * cols_stride;
        detail::shifted_gemm(rows, w.ptr(), k_count, a, cols_stride);

        for (std::size_t c = 0; c < g.cin; ++c)
            for (std::size_t t = 0; t < taps; ++t) {
                const double* row = rows[c * taps + t];
                double* base = gxp.data() + c * gx_stride + g.tap_offset(t);
                std::size_t o = 0;
                for (std::size_t z = 0; z < g.od; ++z)
                    for (std::size_t y = 0; y < g.oh; ++y) {
                        double* dst = base + (z * g.stride * g.hp + y * g.stride) * g.wp;
                        for (std::size_t xx = 0; xx < g.ow; ++xx) dst[xx * g.stride] += row[o++];
                    }
            }
    }

    double* gx = grads.grad_input.ptr();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t z = 0; z < g.d; ++z)
            for (std::size_t y = 0; y < g.h; ++y) {
                const double* s = gxp.data() + c * gx_stride + ((z + g.pad) * g.hp + (y + g.pad)) * g.wp + g.pad;
                gx = std::copy(s, s + g.w, gx);
            }
    return grads;
}

namespace {

struct TransposeGeometry {
    std::size_t cin, cout, d, h, w;
    std::size_t n() const { return d * h * w; }
};

TransposeGeometry transpose_geometry(const Tensor& x, const Tensor& w)
{
    require_rank(x, 4, "conv_transpose3d input");
    require_rank(w, 5, "conv_transpose3d weight");
    if (w.dim(0) != x.dim(0)) {
        throw Error(ErrorCode::ShapeMismatch, "conv_transpose3d axis 0 (input channels): weight has " +
                                                  std::to_string(w.dim(0)) + ", input has " +
                                                  std::to_string(x.dim(0)));
    }
    for (std::size_t a = 2; a < 5; ++a) {
        if (w.dim(a) != 2) {
            throw Error(ErrorCode::ShapeMismatch, "conv_transpose3d kernel axis " + std::to_string(a) + " must be 2");
        }
    }
    return {x.dim(0), w.dim(1), x.dim(1), x.dim(2), x.dim(3)};
}

}  // namespace

Tensor conv_transpose3d_forward(const Tensor& x, const Tensor& w, const Tensor& b)
{
    const TransposeGeometry g = transpose_geometry(x, w);
    require_rank(b, 1, "conv_transpose3d bias");
    if (b.dim(0) != g.cout) {
        throw Error(ErrorCode::ShapeMismatch, "conv_transpose3d bias length differs from output channels");
    }
    const std::size_t n = g.n();
    const std::size_t stride = round_up_lane(n);
    std::vector<double> xpad(g.cin * stride, 0.0);
    std::vector<const double*> src(g.cin);
    for (std::size_t c = 0; c < g.cin; ++c) {
        std::copy(x.ptr() + c * n, x.ptr() + (c + 1) * n, xpad.data() + c * stride);
        src[c] = xpad.data() + c * stride;
    }
    // Row (co, tap) of the product; w flattened as [ci][co * 8 + tap] is the weight layout.
    const std::size_t rows_n = g.cout * 8;
    std::vector<double> buf(rows_n * stride, 0.0);
    std::vector<double*> rows(rows_n);
    for (std::size_t r = 0; r < rows_n; ++r) rows[r] = buf.data() + r * stride;
    detail::shifted_gemm(rows, w.ptr(), rows_n, src, stride);

    const std::size_t od = 2 * g.d, oh = 2 * g.h, ow = 2 * g.w;
    Tensor out({g.cout, od, oh, ow});
    double* o = out.ptr();
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t t = 0; t < 8; ++t) {
            const std::size_t a = t >> 2, bb = (t >> 1) & 1, c = t & 1;
            const double* row = rows[co * 8 + t];
            std::size_t i = 0;
            for (std::size_t z = 0; z < g.d; ++z)
                for (std::size_t y = 0; y < g.h; ++y) {
                    double* dst = o + ((co * od + 2 * z + a) * oh + 2 * y + bb) * ow + c;
                    for (std::size_t xx = 0; xx < g.w; ++xx) dst[2 * xx] = row[i++] + b[co];
                }
        }
    return out;
}

ConvGrads conv_transpose3d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out)
{
    const TransposeGeometry g = transpose_geometry(x, w);
    const std::size_t od = 2 * g.d, oh = 2 * g.h, ow = 2 * g.w;
    const Shape expected{g.cout, od, oh, ow};
    if (grad_out.shape() != expected) {
        throw Error(ErrorCode::ShapeMismatch, "conv_transpose3d grad_out " + shape_string(grad_out.shape()) +
                                                  " differs from forward output " + shape_string(expected));
    }
    const std::size_t n = g.n();
    const std::size_t stride = round_up_lane(n);
    const std::size_t rows_n = g.cout * 8;

    ConvGrads grads{Tensor(x.shape()), Tensor(w.shape()), Tensor({g.cout})};
    const std::size_t n_out = od * oh * ow;
    for (std::size_t co = 0; co < g.cout; ++co) {
        double s = 0.0;
        for (std::size_t i = 0; i < n_out; ++i) s += grad_out[co * n_out + i];
        grads.grad_bias[co] = s;
    }

    std::vector<double> gg(rows_n * stride, 0.0);
    std::vector<const double*> grows(rows_n);
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t t = 0; t < 8; ++t) {
            const std::size_t a = t >> 2, bb = (t >> 1) & 1, c = t & 1;
            double* row = gg.data() + (co * 8 + t) * stride;
            grows[co * 8 + t] = row;
            std::size_t i = 0;
            for (std::size_t z = 0; z < g.d; ++z)
                for (std::size_t y = 0; y < g.h; ++y) {
                    const double* s = grad_out.ptr() + ((co * od + 2 * z + a) * oh + 2 * y + bb) * ow + c;
                    for (std::size_t xx = 0; xx < g.w; ++xx) row[i++] = s[2 * xx];
                }
        }

    std::vector<double> xpad(g.cin * stride, 0.0);
    std::vector<const double*> xrows(g.cin);
    for (std::size_t c = 0; c < g.cin; ++c) {
        std::copy(x.ptr() + c * n, x.ptr() + (c + 1) * n, xpad.data() + c * stride);
        xrows[c] = xpad.data() + c * stride;
    }
    detail::row_dots(xrows, grows, n, grads.grad_weight.ptr(), rows_n);

    std::vector<double> wt(rows_n * g.cin);
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t r = 0; r < rows_n; ++r) wt[r * g.cin + c] = w[c * rows_n + r];
    std::vector<double> gx(g.cin * stride, 0.0);
    std::vector<double*> outs(g.cin);
    for (std::size_t c = 0; c < g.cin; ++c) outs[c] = gx.data() + c * stride;
    detail::shifted_gemm(outs, wt.data(), g.cin, grows, stride);
    for (std::size_t c = 0; c < g.cin; ++c) std::copy(outs[c], outs[c] + n, grads.grad_input.ptr() + c * n);
    return grads;
}

Tensor instance_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& shift, InstanceNormCache* cache)
{
    if (x.rank() < 2) throw Error(ErrorCode::ShapeMismatch, "instance_norm input needs a channel axis");
    const std::size_t channels = x.dim(0);
    const std::size_t n = x.inner_size();
    if (gain.size() != channels || shift.size() != channels) {
        throw Error(ErrorCode::ShapeMismatch, "instance_norm gain/shift length differs from channel count");
    }
    if (n < 2) throw Error(ErrorCode::ShapeMismatch, "instance_norm needs at least 2 spatial voxels");
    Tensor out(x.shape());
    Tensor normalized(x.shape());
    std::vector<double> inv_std(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const double* xs = x.ptr() + c * n;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += xs[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (xs[i] - mean) * (xs[i] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + instance_norm_eps);
        inv_std[c] = is;
        double* nh = normalized.ptr() + c * n;
        double* o = out.ptr() + c * n;
        for (std::size_t i = 0; i < n; ++i) {
            nh[i] = (xs[i] - mean) * is;
            o[i] = gain[c] * nh[i] + shift[c];
        }
    }
    if (cache) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

InstanceNormGrads instance_norm_backward(const InstanceNormCache& cache, const Tensor& gain, const Tensor& grad_out)
{
    if (!cache.normalized.same_shape(grad_out)) {
        throw Error(ErrorCode::ShapeMismatch, "instance_norm grad_out shape differs from cached forward");
    }
    const std::size_t channels = grad_out.dim(0);
    const std::size_t n = grad_out.inner_size();
    InstanceNormGrads grads{Tensor(grad_out.shape()), Tensor({channels}), Tensor({channels})};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t c = 0; c < channels; ++c) {
        const double* g = grad_out.ptr() + c * n;
        const double* nh = cache.normalized.ptr() + c * n;
        double sum_g = 0.0, sum_gn = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sum_g += g[i];
            sum_gn += g[i] * nh[i];
        }
        grads.grad_shift[c] = sum_g;
        grads.grad_gain[c] = sum_gn;
        const double scale = gain[c] * cache.inv_std[c];
        const double mean_g = sum_g * inv_n, mean_gn = sum_gn * inv_n;
        double* gx = grads.grad_input.ptr() + c * n;
        for (std::size_t i = 0; i < n; ++i) gx[i] = scale * (g[i] - mean_g - nh[i] * mean_gn);
    }
    return grads;
}

Tensor leaky_relu_forward(const Tensor& x, double negative_slope)
{
    Tensor y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : negative_slope * v;
    return y;
}

Tensor leaky_relu_backward(const Tensor& x, const Tensor& grad_out, double negative_slope)
{
    if (!x.same_shape(grad_out)) throw Error(ErrorCode::ShapeMismatch, "leaky_relu grad_out shape");
    Tensor gx = grad_out;
    for (std::size_t i = 0; i < gx.size(); ++i)
        if (!(x[i] > 0.0)) gx[i] *= negative_slope;
    return gx;
}

Tensor softmax_channels_forward(const Tensor& x)
{
    if (x.rank() < 1) throw Error(ErrorCode::ShapeMismatch, "softmax needs a channel axis");
    const std::size_t channels = x.dim(0);
    const std::size_t n = x.inner_size();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        double m = x[i];
        for (std::size_t c = 1; c < channels; ++c) m = std::max(m, x[c * n + i]);
        double z = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            const double e = std::exp(x[c * n + i] - m);
            y[c * n + i] = e;
            z += e;
        }
        for (std::size_t c = 0; c < channels; ++c) y[c * n + i] /= z;
    }
    return y;
}

Tensor softmax_channels_backward(const Tensor& y, const Tensor& grad_out)
{
    if (!y.same_shape(grad_out)) throw Error(ErrorCode::ShapeMismatch, "softmax grad_out shape");
    const std::size_t channels = y.dim(0);
    const std::size_t n = y.inner_size();
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < channels; ++c) s += y[c * n + i] * grad_out[c * n + i];
        for (std::size_t c = 0; c < channels; ++c) gx[c * n + i] = y[c * n + i] * (grad_out[c * n + i] - s);
    }
    return gx;
}

Tensor concat_channels(std::span<const Tensor> parts)
{
    if (parts.empty()) throw Error(ErrorCode::InvalidArgument, "concat of zero tensors");
    Shape shape = parts[0].shape();
    std::size_t channels = 0;
    for (const auto& p : parts) {
        if (p.rank() != shape.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
            throw Error(ErrorCode::ShapeMismatch, "concat_channels spatial shapes differ: " +
                                                      shape_string(p.shape()) + " vs " + shape_string(shape));
        }
        channels += p.dim(0);
    }
    shape[0] = channels;
    std::vector<double> data;
    data.reserve(shape_product(shape));
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
    return Tensor(std::move(shape), std::move(data));
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> channels)
{
    std::size_t total = 0;
    for (auto c : channels) total += c;
    if (total != x.dim(0)) throw Error(ErrorCode::ShapeMismatch, "split_channels counts do not sum to channel axis");
    const std::size_t n = x.inner_size();
    std::vector<Tensor> parts;
    std::size_t offset = 0;
    for (auto c : channels) {
        Shape shape = x.shape();
        shape[0] = c;
        parts.emplace_back(shape, std::vector<double>(x.ptr() + offset * n, x.ptr() + (offset + c) * n));
        offset += c;
    }
    return parts;
}

Tensor global_avg_pool_forward(const Tensor& x)
{
    require_rank(x, 4, "global_avg_pool input");
    const std::size_t channels = x.dim(0);
    const std::size_t n = x.inner_size();
    Tensor out({channels, 1, 1, 1});
    for (std::size_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[c * n + i];
        out[c] = s / static_cast<double>(n);
    }
    return out;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out)
{
    Tensor gx(input_shape);
    const std::size_t channels = input_shape[0];
    if (grad_out.size() != channels) throw Error(ErrorCode::ShapeMismatch, "global_avg_pool grad_out length");
    const std::size_t n = gx.inner_size();
    for (std::size_t c = 0; c < channels; ++c) {
        const double v = grad_out[c] / static_cast<double>(n);
        std::fill(gx.ptr() + c * n, gx.ptr() + (c + 1) * n, v);
    }
    return gx;
}

Tensor he_init(const Shape& shape, SeededRng& rng)
{
    if (shape.size() < 2) throw Error(ErrorCode::InvalidArgument, "he_init needs a weight shape of rank >= 2");
    std::size_t fan_in = 1;
    for (std::size_t a = 1; a < shape.size(); ++a) fan_in *= shape[a];
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor t(shape);
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

}  // namespace modfuse
