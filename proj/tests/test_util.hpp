#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "xmap/rng.hpp"
#include "xmap/tensor.hpp"

namespace testutil {

inline xmap::ad::Tensor random_tensor(int rows, int cols, xmap::rng::Stream& rng,
                                      double lo = -2.0, double hi = 2.0) {
    xmap::ad::Tensor t(rows, cols);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline bool approx_eq(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// RAII scratch directory under the system temp dir
class TempDir {
public:
    explicit TempDir(const std::string& label) {
        auto base = std::filesystem::temp_directory_path();
        for (int k = 0; k < 10000; ++k) {
            auto candidate = base / (label + "-" + std::to_string(::getpid()) + "-" + std::to_string(k));
            std::error_code ec;
            if (std::filesystem::create_directories(candidate, ec)) {
                path_ = candidate;
                return;
            }
        }
        throw std::runtime_error("TempDir: could not create scratch directory");
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b) {
    return read_bytes(a) == read_bytes(b);
}

} // namespace testutil
