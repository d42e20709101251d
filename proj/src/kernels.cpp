#include "kernels.hpp"

#include <algorithm>

#include "modfuse/parallel.hpp"

namespace modfuse::detail {

namespace {

constexpr std::size_t row_tile = 4;
constexpr std::size_t dot_tile_width = 4;

typedef double vec8 __attribute__((vector_size(64)));

inline vec8 load8(const double* p)
{
    vec8 v;
    __builtin_memcpy(&v, p, sizeof(v));
    return v;
}

inline void store8(double* p, vec8 v)
{
    __builtin_memcpy(p, &v, sizeof(v));
}

template <std::size_t R>
void shifted_tile(double* const* out, const double* wt, std::size_t ldw, const double* const* src, std::size_t k_count,
                  std::size_t len)
{
    static_assert(lane == 16);
    for (std::size_t i0 = 0; i0 < len; i0 += lane) {
        vec8 lo[R], hi[R];
        for (std::size_t r = 0; r < R; ++r) {
            lo[r] = load8(out[r] + i0);
            hi[r] = load8(out[r] + i0 + 8);
        }
        for (std::size_t k = 0; k < k_count; ++k) {
            const double* s = src[k] + i0;
            const vec8 slo = load8(s), shi = load8(s + 8);
            const double* w = wt + k * ldw;
            for (std::size_t r = 0; r < R; ++r) {
                const double wr = w[r];
                lo[r] += wr * slo;
                hi[r] += wr * shi;
            }
        }
        for (std::size_t r = 0; r < R; ++r) {
            store8(out[r] + i0, lo[r]);
            store8(out[r] + i0 + 8, hi[r]);
        }
    }
}

template <std::size_t Q>
void dot_tile(const double* a, const double* const* b, std::size_t len, double* out)
{
    vec8 lo[Q], hi[Q];
    for (std::size_t q = 0; q < Q; ++q) lo[q] = hi[q] = vec8{};
    const std::size_t body = len / lane * lane;
    for (std::size_t i0 = 0; i0 < body; i0 += lane) {
        const vec8 alo = load8(a + i0), ahi = load8(a + i0 + 8);
        for (std::size_t q = 0; q < Q; ++q) {
            lo[q] += alo * load8(b[q] + i0);
            hi[q] += ahi * load8(b[q] + i0 + 8);
        }
    }
    for (std::size_t q = 0; q < Q; ++q) {
        const vec8 v = lo[q] + hi[q];
        double s = ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]));
        for (std::size_t i = body; i < len; ++i) s += a[i] * b[q][i];
        out[q] += s;
    }
}

}  // namespace

void shifted_gemm(std::span<double* const> out, const double* wt, std::size_t ldw,
                  std::span<const double* const> src, std::size_t len)
{
    const std::size_t rows = out.size();
    const std::size_t tiles = (rows + row_tile - 1) / row_tile;
    parallel_for(tiles, [&](std::size_t tile) {
        const std::size_t r0 = tile * row_tile;
        const std::size_t r = std::min(row_tile, rows - r0);
        double* const* o = out.data() + r0;
        const double* w = wt + r0;
        switch (r) {
        case 4: shifted_tile<4>(o, w, ldw, src.data(), src.size(), len); break;
        case 3: shifted_tile<3>(o, w, ldw, src.data(), src.size(), len); break;
        case 2: shifted_tile<2>(o, w, ldw, src.data(), src.size(), len); break;
        default: shifted_tile<1>(o, w, ldw, src.data(), src.size(), len); break;
        }
    });
}

void row_dots(std::span<const double* const> a, std::span<const double* const> b, std::size_t len, double* out,
              std::size_t ldo)
{
    parallel_for(a.size(), [&](std::size_t r) {
        double* o = out + r * ldo;
        std::size_t k = 0;
        for (; k + dot_tile_width <= b.size(); k += dot_tile_width) dot_tile<dot_tile_width>(a[r], b.data() + k, len, o + k);
        for (; k < b.size(); ++k) dot_tile<1>(a[r], b.data() + k, len, o + k);
    });
}

}  // namespace modfuse::detail
