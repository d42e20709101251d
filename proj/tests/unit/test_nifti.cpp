#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "modfuse/error.hpp"
#include "modfuse/nifti.hpp"
#include "nifti_fuzz.hpp"
#include "oracles.hpp"

using namespace modfuse;

TEST_CASE("writer layout")
{
    const auto bytes = write_nifti(Tensor({2, 2, 2}, 1.5), {1, 1, 1});
    CHECK(bytes.size() == 384);
    CHECK(std::memcmp(bytes.data() + 344, "n+1\0", 4) == 0);
    const auto img = read_nifti(bytes);
    CHECK(img.header.dim[0] == 3);
    const auto g = write_nifti(Tensor({3, 4, 5}), {1, 1, 1});
    const auto h = read_nifti(g).header;
    CHECK(h.dim[1] == 5);  // W
    CHECK(h.dim[2] == 4);  // H
    CHECK(h.dim[3] == 3);  // D
}

TEST_CASE("round trip per datatype with spacing")
{
    SeededRng rng(0);
    Tensor t = oracle::random_tensor({3, 4, 5}, rng, -100, 100);
    for (auto& v : t.data()) v = std::round(v);
    for (auto dt : {NiftiDatatype::Int16, NiftiDatatype::Float32, NiftiDatatype::Float64}) {
        const auto img = read_nifti(write_nifti(t, {2.5, 1.0, 0.75}, dt));
        CHECK(img.grid == t);
        CHECK(img.spacing_mm == std::array<double, 3>{2.5, 1.0, 0.75});
        CHECK(img.header.datatype == static_cast<std::int16_t>(dt));
    }
    Tensor f = oracle::random_tensor({2, 2, 2}, rng);
    CHECK(read_nifti(write_nifti(f, {1, 1, 1}, NiftiDatatype::Float64)).grid == f);
    CHECK_THROWS_AS(write_nifti(Tensor({2, 2}), {1, 1, 1}), Error);
    CHECK_THROWS_AS(write_nifti(Tensor({1, 1, 1}, 40000.0), {1, 1, 1}, NiftiDatatype::Int16), Error);
}

TEST_CASE("scaling is applied on read")
{
    auto bytes = write_nifti(Tensor({1, 1, 1}, 3.0), {1, 1, 1}, NiftiDatatype::Int16);
    const float slope = 2.0f, inter = 1.0f;
    std::memcpy(bytes.data() + 112, &slope, 4);
    std::memcpy(bytes.data() + 116, &inter, 4);
    CHECK(read_nifti(bytes).grid[0] == 7.0);
}

TEST_CASE("byte-swapped files parse identically")
{
    SeededRng rng(3);
    const Tensor t = oracle::random_tensor({4, 3, 2}, rng);
    for (auto dt : {NiftiDatatype::Int16, NiftiDatatype::Float32, NiftiDatatype::Float64}) {
        const auto native = write_nifti(t, {1, 2, 3}, dt);
        const auto swapped = fuzz::byte_swap(native);
        std::int32_t raw;
        std::memcpy(&raw, swapped.data(), 4);
        CHECK(raw == 0x5C010000);  // 348 read with the wrong byte order
        const auto a = read_nifti(native), b = read_nifti(swapped);
        CHECK(b.header.byte_swapped);
        CHECK(a.grid == b.grid);
        CHECK(a.spacing_mm == b.spacing_mm);
    }
}

TEST_CASE("truncated and oversized files")
{
    auto bytes = write_nifti(Tensor({2, 2, 2}), {1, 1, 1});
    CHECK_THROWS_AS(read_nifti(std::span(bytes).first(100)), Error);
    try {
        read_nifti(std::span(bytes).first(bytes.size() - 1));
        FAIL("accepted truncated data");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::TruncatedData);
    }
    bytes.push_back(0);
    CHECK_THROWS_AS(read_nifti(bytes), Error);
}

TEST_CASE("every single-field header corruption is rejected")
{
    SeededRng rng(21);
    const auto good = write_nifti(oracle::random_tensor({3, 4, 5}, rng), {1, 1, 1});
    const auto report = fuzz::corrupt_every_field(good, rng, 200);
    CHECK(report.attempts > 1000);
    for (const auto& miss : report.accepted) FAIL_CHECK("accepted corruption: " << miss);
}

TEST_CASE("manifest parsing")
{
    auto m = load_manifest("c1,a.nii,b.nii,m.nii\n", 2);
    REQUIRE(m.entries.size() == 1);
    CHECK(m.entries[0].mask_path == std::optional<std::string>("m.nii"));
    CHECK(m.entries[0].modality_paths == std::vector<std::string>{"a.nii", "b.nii"});

    try {
        load_manifest("c1,a.nii,b.nii\nc2,a.nii,b.nii,c.nii\n");
        FAIL("ragged manifest accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InconsistentModalityCount);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(load_manifest("c1,a\nc1,b\n"), Error);
    CHECK_THROWS_AS(load_manifest("c1,,b\n"), Error);
    CHECK_THROWS_AS(load_manifest("c1,a,b,c,d\n", 2), Error);

    const auto d = load_manifest("# modalities = 2\nx,a,b\ny,a,b,mask\n");
    CHECK(!d.entries[0].mask_path);
    CHECK(d.entries[1].mask_path);
}

TEST_CASE("manifest round trip keeps order")
{
    CaseManifest m;
    for (int i = 0; i < 100; ++i) {
        ManifestEntry e;
        e.case_id = "case" + std::to_string((i * 37) % 100);
        e.modality_paths = {"a" + std::to_string(i), "b" + std::to_string(i)};
        if (i % 2) e.mask_path = "m" + std::to_string(i);
        m.entries.push_back(e);
    }
    const auto back = load_manifest(format_manifest(m));
    REQUIRE(back.entries.size() == 100);
    for (std::size_t i = 0; i < 100; ++i) CHECK(back.entries[i] == m.entries[i]);
}

TEST_CASE("file io errors name the path")
{
    try {
        read_nifti_file("/nonexistent/x.nii");
        FAIL("no error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::IoError);
        CHECK(std::string(e.what()).find("/nonexistent/x.nii") != std::string::npos);
    }
}
