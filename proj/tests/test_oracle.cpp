#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "xmap/metrics.hpp"
#include "xmap/oracle.hpp"
#include "xmap/rng.hpp"

using namespace xmap;
using oracle::GroundTruthMap;
using oracle::OracleConfig;

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
    double na = 0.0, nb = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] * a[i];
        nb += b[i] * b[i];
        dot += a[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

} // namespace

TEST_CASE("ground-truth rotation is orthogonal and norm preserving") {
    GroundTruthMap map = GroundTruthMap::random(16, 5);
    for (int i = 0; i < 16; ++i) {
        for (int j = 0; j < 16; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 16; ++k) dot += map.rotation.at(k, i) * map.rotation.at(k, j);
            CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-10);
        }
    }

    rng::Stream rng(6);
    std::vector<double> v(16);
    for (double& x : v) x = rng.normal();
    double norm_in = io::l2_norm(v);
    std::vector<double> rotated(16, 0.0);
    for (int i = 0; i < 16; ++i) {
        for (int j = 0; j < 16; ++j) rotated[static_cast<std::size_t>(i)] += map.rotation.at(i, j) * v[static_cast<std::size_t>(j)];
    }
    CHECK(std::abs(io::l2_norm(rotated) - norm_in) < 1e-10);
}

TEST_CASE("oracle_map closed cases") {
    GroundTruthMap id = GroundTruthMap::identity(4);
    std::vector<double> v{3.0, 0.0, 4.0, 0.0};
    auto mapped = oracle::oracle_map(v, id);
    CHECK(mapped[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(mapped[2] == doctest::Approx(0.8).epsilon(1e-12));

    // zero-offset rotations preserve pairwise cosines
    GroundTruthMap rot = GroundTruthMap::random(12, 9);
    rot.offset.assign(12, 0.0);
    rng::Stream rng(10);
    std::vector<double> a(12), b(12);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    double before = cosine(a, b);
    double after = cosine(oracle::oracle_map(a, rot), oracle::oracle_map(b, rot));
    CHECK(std::abs(before - after) < 1e-8);
}

TEST_CASE("zero frame jitter makes all aggregators agree") {
    OracleConfig cfg;
    cfg.dim = 12;
    cfg.count = 24;
    cfg.clusters = 3;
    cfg.min_frames = 2;
    cfg.max_frames = 4;
    cfg.sigma_frames = 0.0;
    cfg.seed = 31;
    oracle::OracleDataset data = oracle::gen_paired(cfg);

    for (const auto& s : data.dataset.samples) {
        io::Aggregator avg{io::AggregatorKind::Average, 1, 0};
        io::Aggregator mid{io::AggregatorKind::Middle, 1, 0};
        io::Aggregator rnd{io::AggregatorKind::Random, 1, 0};
        auto a = io::aggregate(s, avg);
        auto m = io::aggregate(s, mid);
        auto r = io::aggregate(s, rnd);
        for (std::size_t j = 0; j < a.size(); ++j) {
            CHECK(a[j] == doctest::Approx(m[j]).epsilon(1e-12));
            CHECK(a[j] == doctest::Approx(r[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("noiseless targets equal the oracle map of the aggregated visual") {
    OracleConfig cfg;
    cfg.dim = 16;
    cfg.count = 64;
    cfg.clusters = 4;
    cfg.sigma_frames = 0.0;
    cfg.sigma_audio = 0.0;
    cfg.seed = 17;
    oracle::OracleDataset data = oracle::gen_paired(cfg);

    io::Aggregator avg{io::AggregatorKind::Average, cfg.seed, 0};
    for (const auto& s : data.dataset.samples) {
        auto visual = io::aggregate(s, avg);
        auto want = oracle::oracle_map(visual, data.map);
        CHECK(cosine(want, s.audio) > 0.999999);
    }
}

TEST_CASE("datasets are byte-identical across runs with one seed") {
    testutil::TempDir dir_a("oracle-a");
    testutil::TempDir dir_b("oracle-b");
    OracleConfig cfg;
    cfg.dim = 8;
    cfg.count = 32;
    cfg.clusters = 4;
    cfg.sigma_frames = 0.1;
    cfg.sigma_audio = 0.05;
    cfg.seed = 77;

    oracle::write_oracle_dataset(oracle::gen_paired(cfg), dir_a.path(), 8);
    oracle::write_oracle_dataset(oracle::gen_paired(cfg), dir_b.path(), 8);

    for (const char* name : {"frames.ems", "audio.emb", "visual.emb", "manifest.json",
                             "holdout_manifest.json", "visual_holdout.emb", "audio_holdout.emb",
                             "map.json"}) {
        INFO("file: ", name);
        CHECK(testutil::same_bytes(dir_a / name, dir_b / name));
    }

    // the manifests reload into consistent datasets
    io::PairedDataset train = io::read_paired_dataset(dir_a / "manifest.json");
    io::PairedDataset hold = io::read_paired_dataset(dir_a / "holdout_manifest.json");
    CHECK(train.samples.size() == 24);
    CHECK(hold.samples.size() == 8);
    CHECK(train.dim == 8);

    oracle::LoadedMap loaded = oracle::load_map(dir_a / "map.json");
    CHECK(loaded.sigma_audio == cfg.sigma_audio);
    for (std::size_t i = 0; i < loaded.map.rotation.size(); ++i) {
        CHECK(loaded.map.rotation[i] == oracle::gen_paired(cfg).map.rotation[i]);
    }
}

TEST_CASE("initial paired cosine gap is near zero for a random map") {
    OracleConfig cfg;
    cfg.dim = 32;
    cfg.count = 512;
    cfg.clusters = 8;
    cfg.seed = 41;
    oracle::OracleDataset data = oracle::gen_paired(cfg);

    io::Aggregator avg{io::AggregatorKind::Average, cfg.seed, 0};
    io::EmbeddingSet visual, audio;
    visual.dim = audio.dim = cfg.dim;
    for (const auto& s : data.dataset.samples) {
        visual.append(io::aggregate(s, avg));
        audio.append(s.audio);
    }
    metrics::GapReport gap = metrics::gap_report(visual, audio, 20);
    CHECK(std::abs(gap.mean) < 0.2);
}

TEST_CASE("conditional spread statistics") {
    GroundTruthMap map = GroundTruthMap::random(16, 3);
    rng::Stream rng(4);
    std::vector<double> cond(16);
    for (double& x : cond) x = rng.normal();
    cond = io::l2_normalize(cond);

    // a deterministic mapper: every sample identical -> zero spread
    io::EmbeddingSet constant;
    constant.dim = 16;
    auto fixed = oracle::oracle_map(cond, map);
    for (int i = 0; i < 64; ++i) constant.append(fixed);

    oracle::SpreadStats s0 = oracle::conditional_spread(map, 0.15, cond, constant, 4096, 1);
    CHECK(s0.mapper_spread < 1e-20);
    CHECK(s0.oracle_spread > 0.0);

    // zero audio noise collapses the oracle spread
    oracle::SpreadStats s1 = oracle::conditional_spread(map, 0.0, cond, constant, 64, 2);
    CHECK(s1.oracle_spread < 1e-20);
}

TEST_CASE("config validation") {
    OracleConfig cfg;
    cfg.min_frames = 3;
    cfg.max_frames = 2;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = OracleConfig{};
    cfg.clusters = 0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = OracleConfig{};
    cfg.map = GroundTruthMap::identity(5); // mismatched with dim 32
    CHECK_THROWS_AS(cfg.validate(), ContractError);
}
