#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "xmap/metrics.hpp"
#include "xmap/rng.hpp"

using namespace xmap;
using io::EmbeddingSet;

namespace {

EmbeddingSet gaussian_samples(const std::vector<double>& mean, const ad::Tensor& chol_like,
                              int n, rng::Stream& rng) {
    // x = mean + A g, so cov = A A^T
    const int d = static_cast<int>(mean.size());
    EmbeddingSet s;
    s.dim = d;
    s.values.reserve(static_cast<std::size_t>(n) * d);
    std::vector<double> g(static_cast<std::size_t>(d));
    for (int i = 0; i < n; ++i) {
        for (double& v : g) v = rng.normal();
        for (int a = 0; a < d; ++a) {
            double x = mean[static_cast<std::size_t>(a)];
            for (int b = 0; b < d; ++b) x += chol_like.at(a, b) * g[static_cast<std::size_t>(b)];
            s.values.push_back(x);
        }
    }
    return s;
}

ad::Tensor random_orthogonal(int d, rng::Stream& rng) {
    // modified Gram-Schmidt on a random Gaussian matrix
    ad::Tensor q(d, d);
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = rng.normal();
    for (int c = 0; c < d; ++c) {
        for (int prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (int r = 0; r < d; ++r) dot += q.at(r, c) * q.at(r, prev);
            for (int r = 0; r < d; ++r) q.at(r, c) -= dot * q.at(r, prev);
        }
        double norm = 0.0;
        for (int r = 0; r < d; ++r) norm += q.at(r, c) * q.at(r, c);
        norm = std::sqrt(norm);
        for (int r = 0; r < d; ++r) q.at(r, c) /= norm;
    }
    return q;
}

EmbeddingSet rotate(const EmbeddingSet& s, const ad::Tensor& q) {
    EmbeddingSet out;
    out.dim = s.dim;
    out.values.resize(s.values.size());
    for (int i = 0; i < s.count(); ++i) {
        auto r = s.row(i);
        for (int a = 0; a < s.dim; ++a) {
            double x = 0.0;
            for (int b = 0; b < s.dim; ++b) x += q.at(a, b) * r[static_cast<std::size_t>(b)];
            out.values[static_cast<std::size_t>(i) * s.dim + a] = x;
        }
    }
    return out;
}

} // namespace

TEST_CASE("matrix_sqrt_psd closed cases and reconstruction") {
    ad::Tensor diag(2, 2, {4, 0, 0, 9});
    ad::Tensor r = metrics::matrix_sqrt_psd(diag);
    CHECK(r.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r.at(1, 1) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(std::abs(r.at(0, 1)) < 1e-12);

    ad::Tensor eye = ad::Tensor::identity(3);
    ad::Tensor re = metrics::matrix_sqrt_psd(eye);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) CHECK(re.at(i, j) == doctest::Approx(eye.at(i, j)).epsilon(1e-12));
    }

    rng::Stream rng(3);
    ad::Tensor a = testutil::random_tensor(5, 5, rng);
    ad::Tensor s(5, 5);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) {
            double v = 0.0;
            for (int k = 0; k < 5; ++k) v += a.at(k, i) * a.at(k, j);
            s.at(i, j) = v;
        }
    }
    ad::Tensor root = metrics::matrix_sqrt_psd(s);
    double err = 0.0, scale = 0.0;
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) {
            double rr = 0.0;
            for (int k = 0; k < 5; ++k) rr += root.at(i, k) * root.at(k, j);
            err += (rr - s.at(i, j)) * (rr - s.at(i, j));
            scale += s.at(i, j) * s.at(i, j);
        }
    }
    CHECK(std::sqrt(err / scale) < 1e-8);

    ad::Tensor asym(2, 2, {1, 2, 3, 4});
    CHECK_THROWS_AS(metrics::matrix_sqrt_psd(asym), ContractError);
}

TEST_CASE("frechet_gaussian analytic cases") {
    std::vector<double> zero2{0.0, 0.0};
    ad::Tensor eye2 = ad::Tensor::identity(2);

    CHECK(std::abs(metrics::frechet_gaussian(zero2, eye2, zero2, eye2)) < 1e-10);

    std::vector<double> mu2{3.0, 4.0};
    CHECK(metrics::frechet_gaussian(zero2, eye2, mu2, eye2) == doctest::Approx(25.0).epsilon(1e-10));

    ad::Tensor four = ad::Tensor(2, 2, {4, 0, 0, 4});
    CHECK(metrics::frechet_gaussian(zero2, four, zero2, eye2) == doctest::Approx(2.0).epsilon(1e-10));

    // symmetry in the arguments
    rng::Stream rng(7);
    ad::Tensor a = testutil::random_tensor(3, 3, rng);
    ad::Tensor s1(3, 3), s2(3, 3);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double v1 = 0.0, v2 = 0.0;
            for (int k = 0; k < 3; ++k) {
                v1 += a.at(k, i) * a.at(k, j);
                v2 += a.at(i, k) * a.at(j, k);
            }
            s1.at(i, j) = v1;
            s2.at(i, j) = v2 + (i == j ? 0.5 : 0.0);
        }
    }
    std::vector<double> m1{0.1, -0.4, 0.9};
    std::vector<double> m2{1.0, 0.0, -0.2};
    double fd_ab = metrics::frechet_gaussian(m1, s1, m2, s2);
    double fd_ba = metrics::frechet_gaussian(m2, s2, m1, s1);
    CHECK(std::abs(fd_ab - fd_ba) < 1e-10);

    std::vector<double> m3{1.0, 2.0, 3.0, 4.0};
    CHECK_THROWS_AS(metrics::frechet_gaussian(m1, s1, m3, s2), ContractError);
}

TEST_CASE("frechet_from_samples identities and analytic oracle") {
    rng::Stream rng(11);
    ad::Tensor a(3, 3);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    EmbeddingSet x = gaussian_samples({0.5, -1.0, 0.25}, a, 500, rng);

    CHECK(std::abs(metrics::frechet_from_samples(x, x)) < 1e-8);

    EmbeddingSet shifted = x;
    std::vector<double> c{0.7, -0.2, 1.1};
    for (int i = 0; i < shifted.count(); ++i) {
        for (int j = 0; j < 3; ++j) shifted.row(i)[static_cast<std::size_t>(j)] += c[static_cast<std::size_t>(j)];
    }
    double want = 0.7 * 0.7 + 0.2 * 0.2 + 1.1 * 1.1;
    CHECK(metrics::frechet_from_samples(x, shifted) == doctest::Approx(want).epsilon(1e-8));

    // 1e4 samples of two known 8-d Gaussians vs the analytic value
    const int d = 8;
    rng::Stream rng2(13);
    ad::Tensor a1(d, d), a2(d, d);
    for (std::size_t i = 0; i < a1.size(); ++i) a1[i] = 0.4 * rng2.normal();
    for (std::size_t i = 0; i < a2.size(); ++i) a2[i] = 0.3 * rng2.normal();
    for (int i = 0; i < d; ++i) {
        a1.at(i, i) += 1.0;
        a2.at(i, i) += 0.8;
    }
    std::vector<double> mu1(d, 0.0), mu2(d, 0.0);
    for (int i = 0; i < d; ++i) {
        mu1[static_cast<std::size_t>(i)] = 0.2 * i;
        mu2[static_cast<std::size_t>(i)] = 0.1 * (d - i);
    }
    auto cov_of = [&](const ad::Tensor& f) {
        ad::Tensor cv(d, d);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) {
                double v = 0.0;
                for (int k = 0; k < d; ++k) v += f.at(i, k) * f.at(j, k);
                cv.at(i, j) = v;
            }
        }
        return cv;
    };
    double analytic = metrics::frechet_gaussian(mu1, cov_of(a1), mu2, cov_of(a2));
    EmbeddingSet s1 = gaussian_samples(mu1, a1, 10000, rng2);
    EmbeddingSet s2 = gaussian_samples(mu2, a2, 10000, rng2);
    double sampled = metrics::frechet_from_samples(s1, s2);
    CHECK(std::abs(sampled - analytic) / analytic < 0.05);
}

TEST_CASE("frechet is invariant under a common rotation") {
    rng::Stream rng(17);
    ad::Tensor a(4, 4);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    EmbeddingSet x = gaussian_samples({1.0, 0.0, -1.0, 0.5}, a, 600, rng);
    ad::Tensor b(4, 4);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.7 * rng.normal();
    EmbeddingSet y = gaussian_samples({0.0, 0.3, 0.3, -0.2}, b, 600, rng);

    double fd = metrics::frechet_from_samples(x, y);
    ad::Tensor q = random_orthogonal(4, rng);
    double fd_rot = metrics::frechet_from_samples(rotate(x, q), rotate(y, q));
    CHECK(std::abs(fd - fd_rot) < 1e-6 * std::max(1.0, fd));
}

TEST_CASE("cosine score closed cases and invariances") {
    EmbeddingSet a;
    a.dim = 2;
    a.values = {1.0, 0.0, 0.5, 0.5};
    CHECK(metrics::cosine_score(a, a).value == doctest::Approx(100.0).epsilon(1e-12));

    EmbeddingSet orth;
    orth.dim = 2;
    orth.values = {0.0, 1.0, 0.5, -0.5};
    CHECK(metrics::cosine_score(a, orth).value == doctest::Approx(0.0).epsilon(1e-12));

    EmbeddingSet anti;
    anti.dim = 2;
    anti.values = {-2.0, 0.0, -0.25, -0.25};
    CHECK(metrics::cosine_score(a, anti).value == doctest::Approx(-100.0).epsilon(1e-12));

    // positive per-row scaling changes nothing
    EmbeddingSet scaled = a;
    scaled.values[0] *= 7.0;
    scaled.values[1] *= 7.0;
    scaled.values[2] *= 0.01;
    scaled.values[3] *= 0.01;
    CHECK(metrics::cosine_score(scaled, anti).value ==
          doctest::Approx(metrics::cosine_score(a, anti).value).epsilon(1e-12));

    CHECK(metrics::cosine_score(a, a, true).value == doctest::Approx(1.0).epsilon(1e-12));

    EmbeddingSet with_zero = a;
    with_zero.values[2] = 0.0;
    with_zero.values[3] = 0.0;
    auto sc = metrics::cosine_score(with_zero, anti);
    CHECK(sc.skipped == 1);

    EmbeddingSet three;
    three.dim = 2;
    three.values = {1, 0, 0, 1, 1, 1};
    CHECK_THROWS_AS(metrics::cosine_score(a, three), ContractError);
}

TEST_CASE("pca_2d: rank structure, orthonormality, translation invariance") {
    // collinear cloud: second coordinate carries no variance
    EmbeddingSet line;
    line.dim = 3;
    for (int i = 0; i < 12; ++i) {
        double t = 0.5 * i - 3.0;
        line.values.push_back(2.0 * t);
        line.values.push_back(-t);
        line.values.push_back(0.5 * t);
    }
    metrics::Pca2d pl = metrics::pca_2d(line);
    CHECK(pl.coords.rows() == 12);
    CHECK(pl.coords.cols() == 2);
    double var2 = 0.0;
    for (int i = 0; i < 12; ++i) var2 += pl.coords.at(i, 1) * pl.coords.at(i, 1);
    CHECK(var2 / 12.0 < 1e-10);

    // orthonormal components
    double n0 = 0.0, n1 = 0.0, dot = 0.0;
    for (int j = 0; j < 3; ++j) {
        n0 += pl.components.at(0, j) * pl.components.at(0, j);
        n1 += pl.components.at(1, j) * pl.components.at(1, j);
        dot += pl.components.at(0, j) * pl.components.at(1, j);
    }
    CHECK(std::abs(n0 - 1.0) < 1e-8);
    CHECK(std::abs(n1 - 1.0) < 1e-8);
    CHECK(std::abs(dot) < 1e-8);

    // planted rank-2 data reconstructs exactly from two components
    rng::Stream rng(23);
    ad::Tensor basis = random_orthogonal(5, rng);
    EmbeddingSet flat;
    flat.dim = 5;
    std::vector<std::vector<double>> latent;
    for (int i = 0; i < 40; ++i) {
        double u = rng.normal(), v = 0.3 * rng.normal();
        latent.push_back({u, v});
        for (int j = 0; j < 5; ++j) flat.values.push_back(u * basis.at(j, 0) + v * basis.at(j, 1));
    }
    metrics::Pca2d pf = metrics::pca_2d(flat);
    for (int i = 0; i < 40; ++i) {
        for (int j = 0; j < 5; ++j) {
            double rec = pf.coords.at(i, 0) * pf.components.at(0, j) +
                         pf.coords.at(i, 1) * pf.components.at(1, j);
            // means are ~0 only in expectation; compare against centered data
            double centered = flat.values[static_cast<std::size_t>(i) * 5 + j];
            double mean = 0.0;
            for (int k = 0; k < 40; ++k) mean += flat.values[static_cast<std::size_t>(k) * 5 + j];
            mean /= 40.0;
            CHECK(std::abs(rec - (centered - mean)) < 1e-8);
        }
    }

    // translation moves coordinates not at all (up to sign convention)
    EmbeddingSet moved = flat;
    for (int i = 0; i < moved.count(); ++i) {
        for (int j = 0; j < 5; ++j) moved.row(i)[static_cast<std::size_t>(j)] += 3.0 * (j + 1);
    }
    metrics::Pca2d pm = metrics::pca_2d(moved);
    for (int k = 0; k < 2; ++k) {
        double flip = 0.0;
        for (int j = 0; j < 5; ++j) flip += pm.components.at(k, j) * pf.components.at(k, j);
        double sign = flip >= 0.0 ? 1.0 : -1.0;
        for (int i = 0; i < 40; ++i) {
            CHECK(pm.coords.at(i, k) == doctest::Approx(sign * pf.coords.at(i, k)).epsilon(1e-6));
        }
    }

    EmbeddingSet tiny;
    tiny.dim = 3;
    tiny.values = {1, 2, 3};
    CHECK_THROWS_AS(metrics::pca_2d(tiny), ContractError);
}

TEST_CASE("gap report: identical sets, sphere baseline, exact mean") {
    rng::Stream rng(29);
    EmbeddingSet x;
    x.dim = 16;
    for (int i = 0; i < 64; ++i) {
        std::vector<double> v(16);
        for (double& e : v) e = rng.normal();
        v = io::l2_normalize(v);
        x.values.insert(x.values.end(), v.begin(), v.end());
    }

    metrics::GapReport same = metrics::gap_report(x, x, 10);
    CHECK(same.mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(same.counts.back() == 64);
    long total = 0;
    for (long c : same.counts) total += c;
    CHECK(total == 64);

    // independent directions in d=512 have near-zero mean cosine
    EmbeddingSet hx, hy;
    hx.dim = hy.dim = 512;
    for (int i = 0; i < 2000; ++i) {
        std::vector<double> a(512), b(512);
        for (double& e : a) e = rng.normal();
        for (double& e : b) e = rng.normal();
        a = io::l2_normalize(a);
        b = io::l2_normalize(b);
        hx.values.insert(hx.values.end(), a.begin(), a.end());
        hy.values.insert(hy.values.end(), b.begin(), b.end());
    }
    metrics::GapReport sphere = metrics::gap_report(hx, hy, 40);
    CHECK(std::abs(sphere.mean) < 0.05);

    double manual = 0.0;
    for (double c : sphere.cosines) manual += c;
    manual /= static_cast<double>(sphere.cosines.size());
    CHECK(sphere.mean == manual);
    CHECK(sphere.coords_x.rows() == 2000);
    CHECK(sphere.coords_y.rows() == 2000);
}

TEST_CASE("lerp and interpolate_path") {
    std::vector<double> a{0.0, 0.0};
    std::vector<double> b{2.0, 2.0};
    CHECK(metrics::lerp(a, b, 0.0) == a);
    CHECK(metrics::lerp(a, b, 1.0) == b);
    CHECK(metrics::lerp(a, b, 0.5) == std::vector<double>{1.0, 1.0});
    CHECK_THROWS_AS(metrics::lerp(a, b, 1.5), ContractError);
    CHECK_THROWS_AS(metrics::lerp(a, b, -0.1), ContractError);

    auto path = metrics::interpolate_path(a, b, 3);
    REQUIRE(path.size() == 3);
    CHECK(path[0] == a);
    CHECK(path[1] == std::vector<double>{1.0, 1.0});
    CHECK(path[2] == b);

    auto two = metrics::interpolate_path(a, b, 2);
    REQUIRE(two.size() == 2);
    CHECK(two[0] == a);
    CHECK(two[1] == b);

    std::vector<double> u{1.0, 0.0};
    std::vector<double> v{0.0, 1.0};
    auto arc = metrics::interpolate_path(u, v, 5, true);
    for (const auto& p : arc) {
        CHECK(std::abs(io::l2_norm(p) - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(metrics::interpolate_path(a, b, 1), ContractError);
}
