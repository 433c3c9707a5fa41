#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "test_util.hpp"
#include "xmap/embedding_io.hpp"
#include "xmap/rng.hpp"

using namespace xmap;
using io::EmbeddingSet;
using io::PairedSample;

namespace {

EmbeddingSet random_set(int n, int d, rng::Stream& rng) {
    EmbeddingSet s;
    s.dim = d;
    s.values.resize(static_cast<std::size_t>(n) * d);
    // values representable in float32 so roundtrips are exact
    for (double& v : s.values) v = static_cast<double>(static_cast<float>(rng.uniform(-3.0, 3.0)));
    return s;
}

PairedSample make_sample(const std::string& id, std::vector<std::vector<double>> frames,
                         std::vector<double> audio) {
    PairedSample s;
    s.id = id;
    s.dim = static_cast<int>(audio.size());
    s.frame_count = static_cast<int>(frames.size());
    for (auto& f : frames) s.frames.insert(s.frames.end(), f.begin(), f.end());
    s.audio = std::move(audio);
    return s;
}

} // namespace

TEST_CASE("embedding set roundtrip is byte identical") {
    testutil::TempDir dir("emb-roundtrip");
    rng::Stream rng(1);
    EmbeddingSet s = random_set(5, 8, rng);
    auto p1 = dir / "a.emb";
    auto p2 = dir / "b.emb";
    io::write_embedding_set(s, p1);
    EmbeddingSet loaded = io::read_embedding_set(p1);
    io::write_embedding_set(loaded, p2);
    CHECK(testutil::same_bytes(p1, p2));
    CHECK(loaded.dim == 8);
    CHECK(loaded.count() == 5);
    CHECK(loaded.values == s.values);
}

TEST_CASE("embedding set roundtrip property over random shapes") {
    testutil::TempDir dir("emb-prop");
    rng::Stream rng(2);
    for (int trial = 0; trial < 12; ++trial) {
        int n = static_cast<int>(rng.uniform_int(1, 24));
        int d = static_cast<int>(rng.uniform_int(1, 48));
        EmbeddingSet s = random_set(n, d, rng);
        auto p1 = dir / ("t" + std::to_string(trial) + ".emb");
        auto p2 = dir / ("t" + std::to_string(trial) + "b.emb");
        io::write_embedding_set(s, p1);
        io::write_embedding_set(io::read_embedding_set(p1), p2);
        CHECK(testutil::same_bytes(p1, p2));
    }
}

TEST_CASE("embedding set format errors") {
    testutil::TempDir dir("emb-errors");

    auto bad_magic = dir / "bad.emb";
    {
        std::ofstream out(bad_magic, std::ios::binary);
        out << "XXXX" << std::string(12, '\0');
    }
    CHECK_THROWS_WITH_AS(io::read_embedding_set(bad_magic),
                         doctest::Contains("format error"), FormatError);

    // header claims 10 rows, payload holds 9
    rng::Stream rng(3);
    EmbeddingSet s = random_set(10, 4, rng);
    auto truncated = dir / "short.emb";
    io::write_embedding_set(s, truncated);
    {
        auto bytes = testutil::read_bytes(truncated);
        bytes.resize(bytes.size() - 4 * 4);
        std::ofstream out(truncated, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_WITH_AS(io::read_embedding_set(truncated),
                         doctest::Contains("length error"), FormatError);

    auto zero_dim = dir / "zerod.emb";
    {
        EmbeddingSet z;
        z.dim = 0;
        io::write_embedding_set(z, zero_dim);
    }
    CHECK_THROWS_WITH_AS(io::read_embedding_set(zero_dim),
                         doctest::Contains("header error"), FormatError);

    CHECK_THROWS_AS(io::read_embedding_set(dir / "missing.emb"), IoError);
}

TEST_CASE("frame sequence roundtrip") {
    testutil::TempDir dir("ems-roundtrip");
    rng::Stream rng(4);
    io::FrameSequenceSet set;
    set.dim = 6;
    for (int i = 0; i < 4; ++i) {
        io::FrameSequence seq;
        seq.frame_count = static_cast<int>(rng.uniform_int(1, 5));
        seq.values.resize(static_cast<std::size_t>(seq.frame_count) * set.dim);
        for (double& v : seq.values) v = static_cast<double>(static_cast<float>(rng.normal()));
        set.sequences.push_back(std::move(seq));
    }
    auto p1 = dir / "a.ems";
    auto p2 = dir / "b.ems";
    io::write_frame_sequences(set, p1);
    io::FrameSequenceSet loaded = io::read_frame_sequences(p1);
    io::write_frame_sequences(loaded, p2);
    CHECK(testutil::same_bytes(p1, p2));
    CHECK(loaded.sequences.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(loaded.sequences[i].values == set.sequences[i].values);
    }
}

TEST_CASE("l2_normalize") {
    std::vector<double> v{3.0, 4.0};
    auto n = io::l2_normalize(v);
    CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-12));

    auto again = io::l2_normalize(n);
    CHECK(std::abs(io::l2_norm(again) - 1.0) < 1e-6);
    CHECK(again[0] == doctest::Approx(n[0]).epsilon(1e-12));

    std::vector<double> zero{0.0, 0.0};
    CHECK_THROWS_AS(io::l2_normalize(zero), ContractError);
}

TEST_CASE("aggregate: average, middle, random") {
    PairedSample s = make_sample("s0", {{1.0, 0.0}, {0.0, 1.0}}, {1.0, 0.0});

    io::Aggregator avg{io::AggregatorKind::Average, 0, 0};
    auto a = io::aggregate(s, avg);
    CHECK(a == std::vector<double>{0.5, 0.5});

    PairedSample s3 = make_sample("s1", {{1.0, 0.0}, {2.0, 0.0}, {3.0, 0.0}}, {1.0, 0.0});
    io::Aggregator mid{io::AggregatorKind::Middle, 0, 0};
    CHECK(io::aggregate(s3, mid) == std::vector<double>{2.0, 0.0});

    io::Aggregator rnd{io::AggregatorKind::Random, 42, 0};
    auto r1 = io::aggregate(s3, rnd);
    auto r2 = io::aggregate(s3, rnd);
    CHECK(r1 == r2);

    PairedSample empty;
    empty.id = "empty";
    empty.dim = 2;
    CHECK_THROWS_AS(io::aggregate(empty, avg), ContractError);
}

TEST_CASE("aggregate: average is permutation invariant, middle and random are not") {
    std::vector<std::vector<double>> frames{{1.0, 2.0}, {5.0, -1.0}, {0.5, 0.25}};
    PairedSample fwd = make_sample("perm", frames, {0.0, 1.0});
    std::reverse(frames.begin(), frames.end());
    PairedSample rev = make_sample("perm", frames, {0.0, 1.0});

    io::Aggregator avg{io::AggregatorKind::Average, 0, 0};
    auto a1 = io::aggregate(fwd, avg);
    auto a2 = io::aggregate(rev, avg);
    for (std::size_t i = 0; i < a1.size(); ++i) CHECK(a1[i] == doctest::Approx(a2[i]).epsilon(1e-12));

    io::Aggregator mid{io::AggregatorKind::Middle, 0, 0};
    CHECK(io::aggregate(fwd, mid) == io::aggregate(rev, mid)); // middle of 3 is index 1 both ways
    PairedSample fwd4 = make_sample("p4", {{1, 1}, {2, 2}, {3, 3}, {4, 4}}, {0.0, 1.0});
    PairedSample rev4 = make_sample("p4", {{4, 4}, {3, 3}, {2, 2}, {1, 1}}, {0.0, 1.0});
    CHECK(io::aggregate(fwd4, mid) != io::aggregate(rev4, mid));

    // even length: middle is floor(n/2), 0-based
    CHECK(io::aggregate(fwd4, mid) == std::vector<double>{3.0, 3.0});

    io::Aggregator rnd{io::AggregatorKind::Random, 9, 0};
    // a frame choice that differs under reversal exists for some seed/sample
    bool any_diff = false;
    for (std::uint64_t seed = 0; seed < 16 && !any_diff; ++seed) {
        io::Aggregator r{io::AggregatorKind::Random, seed, 0};
        any_diff = io::aggregate(fwd4, r) != io::aggregate(rev4, r);
    }
    CHECK(any_diff);

    // output dimension always matches the frame dimension
    CHECK(io::aggregate(fwd, avg).size() == 2);
    CHECK(io::aggregate(fwd, rnd).size() == 2);
}

TEST_CASE("paired dataset manifest loading") {
    testutil::TempDir dir("manifest");
    rng::Stream rng(5);

    io::FrameSequenceSet frames;
    frames.dim = 4;
    for (int i = 0; i < 2; ++i) {
        io::FrameSequence seq;
        seq.frame_count = 2;
        seq.values.resize(8);
        for (double& v : seq.values) v = static_cast<double>(static_cast<float>(rng.normal()));
        frames.sequences.push_back(std::move(seq));
    }
    io::write_frame_sequences(frames, dir / "frames.ems");

    EmbeddingSet audio = random_set(2, 4, rng);
    io::write_embedding_set(audio, dir / "audio.emb");

    std::vector<io::ManifestEntry> entries{
        {"first", "frames.ems", 0, "audio.emb", 0},
        {"second", "frames.ems", 1, "audio.emb", 1},
    };
    io::write_manifest(4, entries, dir / "manifest.json");

    io::PairedDataset ds = io::read_paired_dataset(dir / "manifest.json", false);
    CHECK(ds.dim == 4);
    REQUIRE(ds.samples.size() == 2);
    CHECK(ds.samples[0].id == "first");
    CHECK(ds.samples[1].id == "second");
    CHECK(ds.samples[1].audio == std::vector<double>(audio.row(1).begin(), audio.row(1).end()));

    io::PairedDataset normalized = io::read_paired_dataset(dir / "manifest.json", true);
    for (const auto& s : normalized.samples) {
        CHECK(std::abs(io::l2_norm(s.audio) - 1.0) < 1e-9);
        for (int j = 0; j < s.frame_count; ++j) CHECK(std::abs(io::l2_norm(s.frame(j)) - 1.0) < 1e-9);
    }
}

TEST_CASE("paired dataset error paths") {
    testutil::TempDir dir("manifest-errors");
    rng::Stream rng(6);

    io::FrameSequenceSet frames;
    frames.dim = 4;
    io::FrameSequence seq;
    seq.frame_count = 1;
    seq.values = {1.0, 0.0, 0.0, 0.0};
    frames.sequences.push_back(seq);
    io::write_frame_sequences(frames, dir / "frames.ems");

    EmbeddingSet audio = random_set(1, 2, rng); // wrong dim on purpose
    io::write_embedding_set(audio, dir / "audio2.emb");

    std::vector<io::ManifestEntry> entries{{"s", "frames.ems", 0, "audio2.emb", 0}};
    io::write_manifest(4, entries, dir / "mismatch.json");
    CHECK_THROWS_WITH_AS(io::read_paired_dataset(dir / "mismatch.json"),
                         doctest::Contains("consistency error"), ContractError);

    std::vector<io::ManifestEntry> missing{{"s", "frames.ems", 0, "absent.emb", 0}};
    io::write_manifest(4, missing, dir / "missing.json");
    CHECK_THROWS_WITH_AS(io::read_paired_dataset(dir / "missing.json"),
                         doctest::Contains("absent.emb"), IoError);
}
