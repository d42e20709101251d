#include "modfuse/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "modfuse/error.hpp"

namespace modfuse {

int bits_per_voxel(NiftiDatatype dt)
{
    switch (dt) {
    case NiftiDatatype::Int16: return 16;
    case NiftiDatatype::Float32: return 32;
    case NiftiDatatype::Float64: return 64;
    }
    return 0;
}

namespace {

// Header field offsets.
constexpr std::size_t off_sizeof_hdr = 0;
constexpr std::size_t off_regular = 38;
constexpr std::size_t off_dim = 40;
constexpr std::size_t off_datatype = 70;
constexpr std::size_t off_bitpix = 72;
constexpr std::size_t off_pixdim = 76;
constexpr std::size_t off_vox_offset = 108;
constexpr std::size_t off_scl_slope = 112;
constexpr std::size_t off_scl_inter = 116;
constexpr std::size_t off_xyzt_units = 123;
constexpr std::size_t off_magic = 344;

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, bool swap) : bytes_(bytes), swap_(swap) {}

    template <typename T>
    T get(std::size_t offset) const
    {
        std::array<std::uint8_t, sizeof(T)> raw;
        std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
        // Files are little-endian unless swapped; this host is assumed little-endian.
        static_assert(std::endian::native == std::endian::little);
        if (swap_) std::reverse(raw.begin(), raw.end());
        T value;
        std::memcpy(&value, raw.data(), sizeof(T));
        return value;
    }

private:
    std::span<const std::uint8_t> bytes_;
    bool swap_;
};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, std::size_t offset, T value)
{
    static_assert(std::endian::native == std::endian::little);
    std::memcpy(out.data() + offset, &value, sizeof(T));
}

bool dim0_valid(std::int16_t d)
{
    return d >= 1 && d <= 7;
}

}  // namespace

NiftiImage read_nifti(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < nifti_data_offset) {
        throw Error(ErrorCode::TruncatedData, "file of " + std::to_string(bytes.size()) +
                                                  " bytes is shorter than the 352-byte header block");
    }
    bool swap = false;
    if (!dim0_valid(ByteReader(bytes, false).get<std::int16_t>(off_dim))) {
        if (!dim0_valid(ByteReader(bytes, true).get<std::int16_t>(off_dim))) {
            throw Error(ErrorCode::BadHeader, "dim[0] at offset 40 is outside [1,7] in both byte orders");
        }
        swap = true;
    }
    const ByteReader r(bytes, swap);
    NiftiImage img;
    NiftiHeader& h = img.header;
    h.byte_swapped = swap;
    h.sizeof_hdr = r.get<std::int32_t>(off_sizeof_hdr);
    if (h.sizeof_hdr != 348) {
        throw Error(ErrorCode::BadHeader, "sizeof_hdr at offset 0 is " + std::to_string(h.sizeof_hdr) + ", expected 348");
    }
    std::memcpy(h.magic.data(), bytes.data() + off_magic, 4);
    if (h.magic != std::array<char, 4>{'n', '+', '1', '\0'}) {
        throw Error(ErrorCode::BadMagic, "magic at offset 344 is not \"n+1\\0\" (single-file NIfTI-1 only)");
    }
    for (std::size_t i = 0; i < 8; ++i) h.dim[i] = r.get<std::int16_t>(off_dim + 2 * i);
    for (std::size_t i = 0; i < 8; ++i) h.pixdim[i] = r.get<float>(off_pixdim + 4 * i);
    h.datatype = r.get<std::int16_t>(off_datatype);
    h.bitpix = r.get<std::int16_t>(off_bitpix);
    h.vox_offset = r.get<float>(off_vox_offset);
    h.scl_slope = r.get<float>(off_scl_slope);
    h.scl_inter = r.get<float>(off_scl_inter);

    const auto dt = static_cast<NiftiDatatype>(h.datatype);
    if (dt != NiftiDatatype::Int16 && dt != NiftiDatatype::Float32 && dt != NiftiDatatype::Float64) {
        throw Error(ErrorCode::UnsupportedDatatype, "datatype at offset 70 is " + std::to_string(h.datatype) +
                                                        " (supported: 4, 16, 64)");
    }
    if (h.bitpix != bits_per_voxel(dt)) {
        throw Error(ErrorCode::BadHeader, "bitpix at offset 72 is " + std::to_string(h.bitpix) + ", datatype " +
                                              std::to_string(h.datatype) + " needs " +
                                              std::to_string(bits_per_voxel(dt)));
    }
    const int rank = h.dim[0];
    std::size_t extents[3] = {1, 1, 1};  // (W, H, D)
    for (int i = 1; i <= rank; ++i) {
        if (h.dim[i] < 1) {
            throw Error(ErrorCode::BadHeader, "dim[" + std::to_string(i) + "] at offset " + std::to_string(off_dim + 2 * i) +
                                                  " is " + std::to_string(h.dim[i]));
        }
        if (i <= 3) {
            extents[i - 1] = static_cast<std::size_t>(h.dim[i]);
        } else if (h.dim[i] != 1) {
            throw Error(ErrorCode::BadHeader, "dim[" + std::to_string(i) + "] = " + std::to_string(h.dim[i]) +
                                                  ": only single 3-D volumes are supported");
        }
    }
    if (!std::isfinite(h.vox_offset) || h.vox_offset < 352.0f || h.vox_offset != std::floor(h.vox_offset)) {
        throw Error(ErrorCode::BadHeader, "vox_offset at offset 108 must be an integer >= 352");
    }
    const std::size_t data_start = static_cast<std::size_t>(h.vox_offset);
    const std::size_t count = extents[0] * extents[1] * extents[2];
    const std::size_t bytes_per = static_cast<std::size_t>(h.bitpix) / 8;
    const std::size_t needed = data_start + count * bytes_per;
    if (bytes.size() < needed) {
        throw Error(ErrorCode::TruncatedData, "voxel data needs " + std::to_string(needed) + " bytes, file has " +
                                                  std::to_string(bytes.size()));
    }
    if (bytes.size() != needed) {
        throw Error(ErrorCode::BadHeader, "data length: file has " + std::to_string(bytes.size() - needed) +
                                              " bytes beyond the voxel data implied by dim[]");
    }

    const double slope = h.scl_slope;
    const double inter = h.scl_inter;
    const bool scaled = slope != 0.0 && std::isfinite(slope);
    img.grid = Tensor({extents[2], extents[1], extents[0]});
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t at = data_start + i * bytes_per;
        double v = 0.0;
        switch (dt) {
        case NiftiDatatype::Int16: v = r.get<std::int16_t>(at); break;
        case NiftiDatatype::Float32: v = r.get<float>(at); break;
        case NiftiDatatype::Float64: v = r.get<double>(at); break;
        }
        img.grid[i] = scaled ? v * slope + inter : v;
    }
    for (std::size_t a = 0; a < 3; ++a) {
        const double p = std::abs(static_cast<double>(h.pixdim[3 - a]));
        img.spacing_mm[a] = (std::isfinite(p) && p > 0.0) ? p : 1.0;
    }
    return img;
}

std::vector<std::uint8_t> write_nifti(const Tensor& grid, const std::array<double, 3>& spacing_mm,
                                      NiftiDatatype datatype)
{
    if (grid.rank() != 3 || grid.empty()) {
        throw Error(ErrorCode::ShapeMismatch, "write_nifti expects a non-empty rank-3 grid, got " + shape_string(grid.shape()));
    }
    for (std::size_t a = 0; a < 3; ++a) {
        if (grid.dim(a) > 32767) throw Error(ErrorCode::ShapeMismatch, "extent exceeds the int16 dim[] range");
    }
    const std::size_t bytes_per = static_cast<std::size_t>(bits_per_voxel(datatype)) / 8;
    std::vector<std::uint8_t> out(nifti_data_offset + grid.size() * bytes_per, 0);
    put_le<std::int32_t>(out, off_sizeof_hdr, 348);
    out[off_regular] = 'r';
    // dim[4..7] lie beyond dim[0] and are ignored on read; writing 0 there
    // means a dim[0] damaged into 4..7 exposes an invalid extent.
    const std::int16_t dims[8] = {3,
                                  static_cast<std::int16_t>(grid.dim(2)),
                                  static_cast<std::int16_t>(grid.dim(1)),
                                  static_cast<std::int16_t>(grid.dim(0)),
                                  0,
                                  0,
                                  0,
                                  0};
    for (std::size_t i = 0; i < 8; ++i) put_le<std::int16_t>(out, off_dim + 2 * i, dims[i]);
    put_le<std::int16_t>(out, off_datatype, static_cast<std::int16_t>(datatype));
    put_le<std::int16_t>(out, off_bitpix, static_cast<std::int16_t>(bits_per_voxel(datatype)));
    const float pix[8] = {1.0f,
                          static_cast<float>(spacing_mm[2]),
                          static_cast<float>(spacing_mm[1]),
                          static_cast<float>(spacing_mm[0]),
                          0.0f,
                          0.0f,
                          0.0f,
                          0.0f};
    for (std::size_t i = 0; i < 8; ++i) put_le<float>(out, off_pixdim + 4 * i, pix[i]);
    put_le<float>(out, off_vox_offset, static_cast<float>(nifti_data_offset));
    put_le<float>(out, off_scl_slope, 1.0f);
    put_le<float>(out, off_scl_inter, 0.0f);
    out[off_xyzt_units] = 2;  // millimetres
    std::memcpy(out.data() + off_magic, "n+1\0", 4);

    for (std::size_t i = 0; i < grid.size(); ++i) {
        const std::size_t at = nifti_data_offset + i * bytes_per;
        switch (datatype) {
        case NiftiDatatype::Int16: {
            const double v = std::round(grid[i]);
            if (v < -32768.0 || v > 32767.0) throw Error(ErrorCode::InvalidArgument, "value outside int16 range");
            put_le<std::int16_t>(out, at, static_cast<std::int16_t>(v));
            break;
        }
        case NiftiDatatype::Float32: put_le<float>(out, at, static_cast<float>(grid[i])); break;
        case NiftiDatatype::Float64: put_le<double>(out, at, grid[i]); break;
        }
    }
    return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

NiftiImage read_nifti_file(const std::filesystem::path& path)
{
    const auto bytes = read_file_bytes(path);
    try {
        return read_nifti(bytes);
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

void write_nifti_file(const std::filesystem::path& path, const Tensor& grid, const std::array<double, 3>& spacing_mm,
                      NiftiDatatype datatype)
{
    write_file_bytes(path, write_nifti(grid, spacing_mm, datatype));
}

std::size_t CaseManifest::num_modalities() const
{
    return entries.empty() ? 0 : entries.front().modality_paths.size();
}

std::filesystem::path CaseManifest::resolve(const std::string& path) const
{
    const std::filesystem::path p(path);
    return p.is_absolute() ? p : base_dir / p;
}

namespace {

std::string trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_fields(std::string_view line)
{
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        fields.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return fields;
}

}  // namespace

CaseManifest load_manifest(std::string_view text, std::size_t num_modalities)
{
    CaseManifest manifest;
    std::set<std::string> seen;
    std::size_t width = 0;  // field count of the first data row when M is not declared
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty()) continue;
        if (line.front() == '#') {
            // "# modalities = N" declares M when the caller did not.
            const auto key = line.find("modalities");
            const auto eq = line.find('=');
            if (num_modalities == 0 && key != std::string::npos && eq != std::string::npos && eq > key) {
                try {
                    num_modalities = std::stoul(line.substr(eq + 1));
                } catch (const std::exception&) {
                    throw Error(ErrorCode::InconsistentModalityCount, "line " + std::to_string(line_no) +
                                                                          ": unparsable modalities directive");
                }
            }
            continue;
        }
        auto fields = split_fields(line);
        for (const auto& f : fields) {
            if (f.empty()) {
                throw Error(ErrorCode::InconsistentModalityCount, "line " + std::to_string(line_no) + ": empty field");
            }
        }
        if (fields.size() < 2) {
            throw Error(ErrorCode::InconsistentModalityCount, "line " + std::to_string(line_no) +
                                                                  ": a case needs an id and at least one modality");
        }
        ManifestEntry entry;
        entry.case_id = fields[0];
        const std::size_t paths = fields.size() - 1;
        if (num_modalities > 0) {
            if (paths != num_modalities && paths != num_modalities + 1) {
                throw Error(ErrorCode::InconsistentModalityCount,
                            "line " + std::to_string(line_no) + ": " + std::to_string(paths) + " paths, expected " +
                                std::to_string(num_modalities) + " modalities plus an optional mask");
            }
            entry.modality_paths.assign(fields.begin() + 1, fields.begin() + 1 + static_cast<long>(num_modalities));
            if (paths == num_modalities + 1) entry.mask_path = fields.back();
        } else {
            if (width == 0) width = fields.size();
            if (fields.size() != width) {
                throw Error(ErrorCode::InconsistentModalityCount, "line " + std::to_string(line_no) + ": " +
                                                                      std::to_string(paths) + " modalities, expected " +
                                                                      std::to_string(width - 1));
            }
            entry.modality_paths.assign(fields.begin() + 1, fields.end());
        }
        if (!seen.insert(entry.case_id).second) {
            throw Error(ErrorCode::DuplicateCaseId, "line " + std::to_string(line_no) + ": case id '" + entry.case_id +
                                                        "' already listed");
        }
        manifest.entries.push_back(std::move(entry));
    }
    return manifest;
}

CaseManifest load_manifest_file(const std::filesystem::path& path, std::size_t num_modalities)
{
    const auto bytes = read_file_bytes(path);
    CaseManifest m = load_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                                   num_modalities);
    m.base_dir = path.parent_path();
    return m;
}

std::string format_manifest(const CaseManifest& manifest)
{
    std::ostringstream out;
    out << "# modalities = " << manifest.num_modalities() << '\n';
    for (const auto& e : manifest.entries) {
        out << e.case_id;
        for (const auto& p : e.modality_paths) out << ',' << p;
        if (e.mask_path) out << ',' << *e.mask_path;
        out << '\n';
    }
    return out.str();
}

}  // namespace modfuse
