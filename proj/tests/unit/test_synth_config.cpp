#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "modfuse/config.hpp"
#include "modfuse/error.hpp"
#include "modfuse/nifti.hpp"
#include "modfuse/synth.hpp"

using namespace modfuse;
namespace fs = std::filesystem;

namespace {

PhantomSpec small_spec(double sigma)
{
    PhantomSpec s;
    s.extent = {24, 24, 24};
    s.noise_sigma = sigma;
    return s;
}

// Lattice points within distance r of an integer centre.
std::size_t ball_points(double r)
{
    const int R = int(std::floor(r));
    std::size_t n = 0;
    for (int z = -R; z <= R; ++z)
        for (int y = -R; y <= R; ++y)
            for (int x = -R; x <= R; ++x)
                if (z * z + y * y + x * x <= r * r) ++n;
    return n;
}

std::vector<std::uint8_t> slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("noiseless phantom voxels equal their tissue means")
{
    const PhantomSpec s = small_spec(0.0);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto pc = generate_case_detailed(s, seed);
        const auto& mask = *pc.volume.mask;
        for (std::size_t m = 0; m < s.num_modalities; ++m) {
            const Tensor& t = pc.volume.modalities[m];
            for (std::size_t z = 0; z < 24; ++z)
                for (std::size_t y = 0; y < 24; ++y)
                    for (std::size_t x = 0; x < 24; ++x) {
                        const std::size_t i = (z * 24 + y) * 24 + x;
                        const double band = double(y * s.anatomy_layers / 24) * s.anatomy_step;
                        const int label = mask.labels[i];
                        // Background shows its band; a lesion voxel shows either
                        // its sub-region mean or, when hidden, the band.
                        if (label == 0) CHECK(t[i] == band);
                        else CHECK((t[i] == band || t[i] == s.lesion_mean[std::size_t(label - 1)][m]));
                        CHECK(t[i] == s.tissue_mean(pc.appearance[m][i], m));
                    }
        }
    }
}

TEST_CASE("phantom determinism and noise-independent masks")
{
    const auto a = generate_case(small_spec(0.1), 3), b = generate_case(small_spec(0.1), 3);
    CHECK(a.modalities == b.modalities);
    CHECK(*a.mask == *b.mask);
    CHECK(*generate_case(small_spec(0.0), 3).mask == *a.mask);
    CHECK(*generate_case(small_spec(0.15), 3).mask == *a.mask);
    CHECK(generate_case(small_spec(0.1), 4).modalities != a.modalities);
}

TEST_CASE("lesion voxel counts lie within the lattice bounds of the phantom radii")
{
    // Every lesion contains the ball of radius radius_min around its integer
    // centre and lies inside the ball of radius radius_max.
    PhantomSpec s;
    s.noise_sigma = 0.0;
    const std::size_t lo = ball_points(s.radius_min);
    const std::size_t hi = s.lesions_max * ball_points(s.radius_max);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto v = generate_case(s, seed);
        std::size_t n = 0;
        for (auto l : v.mask->labels) n += l != 0;
        CHECK(n >= lo);
        CHECK(n <= hi);
    }
}

TEST_CASE("sub-regions are complementary across modalities")
{
    // Label 1 is hidden in modality 1 and label 2 in modality 0. Residuals
    // against the band mean of each voxel are compared with those of
    // background voxels.
    const PhantomSpec s;
    const double sigma = s.noise_sigma;
    for (std::size_t label = 1; label <= 2; ++label) {
        for (std::size_t m = 0; m < 2; ++m) {
            double sum_l = 0, sum_b = 0;
            std::size_t n_l = 0, n_b = 0;
            for (std::uint64_t seed = 0; n_l < 500 || seed < 10; ++seed) {
                const auto v = generate_case(s, seed);
                const Tensor& t = v.modalities[m];
                for (std::size_t i = 0; i < t.size(); ++i) {
                    const std::size_t y = (i / 32) % 32;
                    const double r = t[i] - double(y * s.anatomy_layers / 32) * s.anatomy_step;
                    if (v.mask->labels[i] == int(label)) {
                        sum_l += r;
                        ++n_l;
                    } else if (v.mask->labels[i] == 0) {
                        sum_b += r;
                        ++n_b;
                    }
                }
            }
            const double diff = std::abs(sum_l / double(n_l) - sum_b / double(n_b));
            const bool hidden = s.hidden[label - 1][m] == 1.0;
            CAPTURE(label);
            CAPTURE(m);
            if (hidden) CHECK(diff < sigma / 2);
            else CHECK(diff >= 3 * sigma);
        }
    }
}

TEST_CASE("phantom spec validation")
{
    PhantomSpec s;
    s.radius_max = 20;
    CHECK_THROWS_AS(generate_case(s, 0), Error);
    PhantomSpec t;
    t.noise_sigma = 0.5;  // band means 0.5 apart are closer than 3 sigma
    CHECK_THROWS_AS(t.validate(), Error);
    PhantomSpec u;
    u.num_labels = 4;
    CHECK_THROWS_AS(u.validate(), Error);
}

TEST_CASE("dataset files, manifest and regeneration")
{
    const fs::path root = fs::temp_directory_path() / "modfuse_unit_synth";
    fs::remove_all(root);
    PhantomSpec s;
    s.extent = {16, 16, 16};
    s.radius_max = 5;
    const auto m = generate_dataset(s, 5, root / "a", 100);
    generate_dataset(s, 5, root / "b", 100);
    REQUIRE(m.entries.size() == 5);
    std::set<std::string> ids;
    for (const auto& e : m.entries) ids.insert(e.case_id);
    CHECK(ids.size() == 5);

    std::size_t files = 0;
    for (const auto& f : fs::directory_iterator(root / "a")) {
        if (f.path().extension() == ".nii") {
            ++files;
            CHECK(slurp(f.path()) == slurp(root / "b" / f.path().filename()));
            CHECK(read_nifti_file(f.path()).grid.shape() == Shape{16, 16, 16});
        }
    }
    CHECK(files == 5 * (s.num_modalities + 1));
    CHECK(slurp(root / "a" / "manifest.csv") == slurp(root / "b" / "manifest.csv"));
    CHECK(generate_case(s, 102).modalities[0].size() == 4096);
    fs::remove_all(root);
}

TEST_CASE("config text round trip and errors")
{
    Config c;
    c.seed = 17;
    c.train.epochs = 12;
    c.train.optim.kind = OptimizerKind::AdamW;
    c.model.fusion = FusionMode::Mean;
    c.patch.size = {8, 16, 16};
    c.ssl.temperature = 0.15;
    c.regions = "a:1;b:2";
    const Config back = load_config(format_config(c));
    CHECK(back.to_map() == c.to_map());
    CHECK(back.to_map().at("ssl.temperature") == "0.15");

    try {
        load_config("train.epoch = 3\n");
        FAIL("accepted unknown key");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ConfigInvalid);
        CHECK(std::string(e.what()).find("train.epoch") != std::string::npos);
    }
    CHECK_THROWS_AS(load_config("run.seed = 1\nrun.seed = 2\n"), Error);
    CHECK_THROWS_AS(load_config("train.epochs = many\n"), Error);
    CHECK_THROWS_AS(load_config("model.fusion = sum\n"), Error);
    CHECK_THROWS_AS(load_config("patch.size = 10,16,16\n"), Error);  // not divisible by 4
    const Config comments = load_config("# a comment\n\nrun.seed = 5   \n");
    CHECK(comments.seed == 5);
    CHECK(key_help().find("train.epochs") != std::string::npos);
}
