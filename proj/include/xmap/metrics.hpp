#pragma once

#include <span>
#include <vector>

#include "xmap/embedding_io.hpp"
#include "xmap/tensor.hpp"

namespace xmap::metrics {

struct GaussianFit {
    std::vector<double> mean;
    ad::Tensor cov; // d x d symmetric, unbiased (N-1) normalization
    long count = 0;
};

// Unbiased mean/covariance fit; needs at least two rows.
GaussianFit fit_gaussian(const io::EmbeddingSet& set);

// Principal square root of a symmetric PSD matrix via eigendecomposition;
// negative eigenvalues are clamped to zero. Inputs asymmetric beyond
// tolerance are rejected.
ad::Tensor matrix_sqrt_psd(const ad::Tensor& s);

// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), with a 1e-6
// diagonal jitter retry if the square roots fail numerically.
double frechet_gaussian(const std::vector<double>& mean1, const ad::Tensor& cov1,
                        const std::vector<double>& mean2, const ad::Tensor& cov2);

// Gaussian fits of both sets, then frechet_gaussian. Warns on stderr when a
// set has fewer than d+1 rows; errors below 2.
double frechet_from_samples(const io::EmbeddingSet& x, const io::EmbeddingSet& y);

struct CosineScore {
    double value = 0.0; // 100 x mean pairwise cosine unless raw_cosine
    int skipped = 0;    // pairs containing a zero vector
};

CosineScore cosine_score(const io::EmbeddingSet& a, const io::EmbeddingSet& b,
                         bool raw_cosine = false);

struct Pca2d {
    ad::Tensor coords;     // N x 2
    ad::Tensor components; // 2 x d, orthonormal rows, sign-fixed
};

Pca2d pca_2d(const io::EmbeddingSet& z);

struct GapReport {
    std::vector<double> cosines;   // one per pair, order preserved
    std::vector<double> bin_edges; // bins+1 equal-width edges over [-1, 1]
    std::vector<long> counts;      // bins entries, sum == cosines.size()
    double mean = 0.0;
    double stddev = 0.0;           // population
    int skipped = 0;
    ad::Tensor coords_x;           // shared 2d projection of X
    ad::Tensor coords_y;           // and of Y
};

GapReport gap_report(const io::EmbeddingSet& x, const io::EmbeddingSet& y, int bins);

std::vector<double> lerp(std::span<const double> a, std::span<const double> b, double alpha);

// `steps` evenly spaced points including both endpoints; steps >= 2.
std::vector<std::vector<double>> interpolate_path(std::span<const double> a,
                                                  std::span<const double> b, int steps,
                                                  bool renormalize = false);

} // namespace xmap::metrics
