#include "xmap/metrics.hpp"

#include <cmath>
#include <iostream>

#include <Eigen/Dense>

namespace xmap::metrics {

namespace {

Eigen::MatrixXd to_eigen(const ad::Tensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (int i = 0; i < t.rows(); ++i) {
        for (int j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
    }
    return m;
}

ad::Tensor from_eigen(const Eigen::MatrixXd& m) {
    ad::Tensor t(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
    for (int i = 0; i < t.rows(); ++i) {
        for (int j = 0; j < t.cols(); ++j) t.at(i, j) = m(i, j);
    }
    return t;
}

Eigen::MatrixXd sqrt_psd_eigen(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(s);
    if (solver.info() != Eigen::Success) {
        throw ContractError("matrix_sqrt_psd: eigendecomposition failed");
    }
    Eigen::VectorXd vals = solver.eigenvalues();
    for (int i = 0; i < vals.size(); ++i) vals(i) = std::sqrt(std::max(0.0, vals(i)));
    return solver.eigenvectors() * vals.asDiagonal() * solver.eigenvectors().transpose();
}

void check_symmetric(const Eigen::MatrixXd& s, const char* who) {
    if (s.rows() != s.cols()) {
        throw ContractError(std::string(who) + ": matrix is " + std::to_string(s.rows()) + "x" +
                            std::to_string(s.cols()) + ", expected square");
    }
    double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
    double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-8 * scale) {
        throw ContractError(std::string(who) + ": input asymmetric beyond tolerance (" +
                            std::to_string(asym) + ")");
    }
}

double frechet_core(const Eigen::VectorXd& dmu, const Eigen::MatrixXd& c1,
                    const Eigen::MatrixXd& c2) {
    Eigen::MatrixXd s1h = sqrt_psd_eigen(c1);
    Eigen::MatrixXd inner = s1h * c2 * s1h;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::MatrixXd cross = sqrt_psd_eigen(inner);
    return dmu.squaredNorm() + c1.trace() + c2.trace() - 2.0 * cross.trace();
}

double pair_cosine(std::span<const double> a, std::span<const double> b, bool& valid) {
    double na = 0.0, nb = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] * a[i];
        nb += b[i] * b[i];
        dot += a[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        valid = false;
        return 0.0;
    }
    valid = true;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace

GaussianFit fit_gaussian(const io::EmbeddingSet& set) {
    const int n = set.count();
    const int d = set.dim;
    if (n < 2) {
        throw ContractError("fit_gaussian: insufficient data, need at least 2 rows, got " +
                            std::to_string(n));
    }
    GaussianFit fit;
    fit.count = n;
    fit.mean.assign(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i) {
        auto r = set.row(i);
        for (int j = 0; j < d; ++j) fit.mean[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
    }
    for (double& m : fit.mean) m /= n;

    fit.cov = ad::Tensor(d, d);
    for (int i = 0; i < n; ++i) {
        auto r = set.row(i);
        for (int a = 0; a < d; ++a) {
            double da = r[static_cast<std::size_t>(a)] - fit.mean[static_cast<std::size_t>(a)];
            double* covrow = fit.cov.row_ptr(a);
            for (int b = a; b < d; ++b) {
                covrow[b] += da * (r[static_cast<std::size_t>(b)] - fit.mean[static_cast<std::size_t>(b)]);
            }
        }
    }
    for (int a = 0; a < d; ++a) {
        for (int b = a; b < d; ++b) {
            double v = fit.cov.at(a, b) / (n - 1);
            fit.cov.at(a, b) = v;
            fit.cov.at(b, a) = v;
        }
    }
    return fit;
}

ad::Tensor matrix_sqrt_psd(const ad::Tensor& s) {
    Eigen::MatrixXd m = to_eigen(s);
    check_symmetric(m, "matrix_sqrt_psd");
    return from_eigen(sqrt_psd_eigen(m));
}

double frechet_gaussian(const std::vector<double>& mean1, const ad::Tensor& cov1,
                        const std::vector<double>& mean2, const ad::Tensor& cov2) {
    const int d = static_cast<int>(mean1.size());
    if (static_cast<int>(mean2.size()) != d || cov1.rows() != d || cov1.cols() != d ||
        cov2.rows() != d || cov2.cols() != d) {
        throw ContractError("frechet_gaussian: dimension mismatch between means and covariances");
    }
    Eigen::VectorXd dmu(d);
    for (int i = 0; i < d; ++i) dmu(i) = mean1[static_cast<std::size_t>(i)] - mean2[static_cast<std::size_t>(i)];
    Eigen::MatrixXd c1 = to_eigen(cov1);
    Eigen::MatrixXd c2 = to_eigen(cov2);
    check_symmetric(c1, "frechet_gaussian");
    check_symmetric(c2, "frechet_gaussian");

    double fd = frechet_core(dmu, c1, c2);
    if (!std::isfinite(fd)) {
        // jitter retry for numerically defective covariances
        Eigen::MatrixXd j = 1e-6 * Eigen::MatrixXd::Identity(d, d);
        fd = frechet_core(dmu, c1 + j, c2 + j);
    }
    return fd;
}

double frechet_from_samples(const io::EmbeddingSet& x, const io::EmbeddingSet& y) {
    if (x.dim != y.dim) {
        throw ContractError("frechet_from_samples: dims differ, " + std::to_string(x.dim) +
                            " vs " + std::to_string(y.dim));
    }
    if (x.count() < x.dim + 1 || y.count() < y.dim + 1) {
        std::cerr << "warning: frechet_from_samples with fewer than d+1 rows ("
                  << x.count() << ", " << y.count() << " of dim " << x.dim
                  << "); covariance estimates are rank deficient\n";
    }
    GaussianFit fx = fit_gaussian(x);
    GaussianFit fy = fit_gaussian(y);
    return frechet_gaussian(fx.mean, fx.cov, fy.mean, fy.cov);
}

CosineScore cosine_score(const io::EmbeddingSet& a, const io::EmbeddingSet& b, bool raw_cosine) {
    if (a.dim != b.dim || a.count() != b.count()) {
        throw ContractError("cosine_score: paired sets must match, got " + std::to_string(a.count()) +
                            "x" + std::to_string(a.dim) + " vs " + std::to_string(b.count()) + "x" +
                            std::to_string(b.dim));
    }
    if (a.count() < 1) throw ContractError("cosine_score: empty sets");
    CosineScore score;
    double sum = 0.0;
    int used = 0;
    for (int i = 0; i < a.count(); ++i) {
        bool valid = false;
        double c = pair_cosine(a.row(i), b.row(i), valid);
        if (!valid) {
            ++score.skipped;
            continue;
        }
        sum += c;
        ++used;
    }
    if (used == 0) throw ContractError("cosine_score: every pair contained a zero vector");
    if (score.skipped > 0) {
        std::cerr << "warning: cosine_score skipped " << score.skipped << " zero-vector pairs\n";
    }
    score.value = (sum / used) * (raw_cosine ? 1.0 : 100.0);
    return score;
}

Pca2d pca_2d(const io::EmbeddingSet& z) {
    const int n = z.count();
    const int d = z.dim;
    if (n < 2) {
        throw ContractError("pca_2d: insufficient data, need at least 2 rows, got " + std::to_string(n));
    }
    if (d < 2) throw ContractError("pca_2d: need dimension >= 2, got " + std::to_string(d));

    Eigen::MatrixXd m(n, d);
    for (int i = 0; i < n; ++i) {
        auto r = z.row(i);
        for (int j = 0; j < d; ++j) m(i, j) = r[static_cast<std::size_t>(j)];
    }
    Eigen::RowVectorXd mean = m.colwise().mean();
    m.rowwise() -= mean;
    Eigen::MatrixXd cov = (m.transpose() * m) / std::max(1, n - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw ContractError("pca_2d: eigendecomposition failed");

    Pca2d out;
    out.components = ad::Tensor(2, d);
    // eigenvalues ascend; the top two components are the last two columns
    for (int k = 0; k < 2; ++k) {
        Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - k);
        // deterministic sign: largest-magnitude entry is positive
        int arg = 0;
        for (int j = 1; j < d; ++j) {
            if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
        }
        if (v(arg) < 0.0) v = -v;
        for (int j = 0; j < d; ++j) out.components.at(k, j) = v(j);
    }

    out.coords = ad::Tensor(n, 2);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 2; ++k) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += m(i, j) * out.components.at(k, j);
            out.coords.at(i, k) = dot;
        }
    }
    return out;
}

GapReport gap_report(const io::EmbeddingSet& x, const io::EmbeddingSet& y, int bins) {
    if (bins < 1) throw ContractError("gap_report: bins must be >= 1");
    if (x.dim != y.dim || x.count() != y.count()) {
        throw ContractError("gap_report: paired sets must match, got " + std::to_string(x.count()) +
                            "x" + std::to_string(x.dim) + " vs " + std::to_string(y.count()) + "x" +
                            std::to_string(y.dim));
    }
    if (x.count() < 1) throw ContractError("gap_report: empty sets");

    GapReport report;
    for (int i = 0; i < x.count(); ++i) {
        bool valid = false;
        double c = pair_cosine(x.row(i), y.row(i), valid);
        if (!valid) {
            ++report.skipped;
            continue;
        }
        report.cosines.push_back(c);
    }
    if (report.cosines.empty()) {
        throw ContractError("gap_report: every pair contained a zero vector");
    }
    if (report.skipped > 0) {
        std::cerr << "warning: gap_report skipped " << report.skipped << " zero-vector pairs\n";
    }

    report.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b) {
        report.bin_edges[static_cast<std::size_t>(b)] = -1.0 + 2.0 * b / bins;
    }
    report.counts.assign(static_cast<std::size_t>(bins), 0);
    double sum = 0.0;
    for (double c : report.cosines) {
        int b = static_cast<int>(std::floor((c + 1.0) / 2.0 * bins));
        b = std::min(std::max(b, 0), bins - 1);
        ++report.counts[static_cast<std::size_t>(b)];
        sum += c;
    }
    report.mean = sum / static_cast<double>(report.cosines.size());
    double var = 0.0;
    for (double c : report.cosines) var += (c - report.mean) * (c - report.mean);
    report.stddev = std::sqrt(var / static_cast<double>(report.cosines.size()));

    // shared projection of both clouds
    io::EmbeddingSet stacked;
    stacked.dim = x.dim;
    stacked.values = x.values;
    stacked.values.insert(stacked.values.end(), y.values.begin(), y.values.end());
    Pca2d pca = pca_2d(stacked);
    report.coords_x = ad::Tensor(x.count(), 2);
    report.coords_y = ad::Tensor(y.count(), 2);
    for (int i = 0; i < x.count(); ++i) {
        report.coords_x.at(i, 0) = pca.coords.at(i, 0);
        report.coords_x.at(i, 1) = pca.coords.at(i, 1);
    }
    for (int i = 0; i < y.count(); ++i) {
        report.coords_y.at(i, 0) = pca.coords.at(x.count() + i, 0);
        report.coords_y.at(i, 1) = pca.coords.at(x.count() + i, 1);
    }
    return report;
}

std::vector<double> lerp(std::span<const double> a, std::span<const double> b, double alpha) {
    if (a.size() != b.size()) {
        throw ContractError("lerp: endpoint dims differ, " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
    }
    if (alpha < 0.0 || alpha > 1.0) {
        throw ContractError("lerp: alpha " + std::to_string(alpha) + " outside [0, 1]");
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - alpha) * a[i] + alpha * b[i];
    return out;
}

std::vector<std::vector<double>> interpolate_path(std::span<const double> a,
                                                  std::span<const double> b, int steps,
                                                  bool renormalize) {
    if (steps < 2) throw ContractError("interpolate_path: steps must be >= 2");
    std::vector<std::vector<double>> path;
    path.reserve(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        double alpha = static_cast<double>(i) / (steps - 1);
        std::vector<double> p = lerp(a, b, alpha);
        if (renormalize) p = io::l2_normalize(p);
        path.push_back(std::move(p));
    }
    return path;
}

} // namespace xmap::metrics
