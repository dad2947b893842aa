#pragma once

// Shared fixtures and independent reference oracles for the test suites.
// Everything here is deliberately naive (plain loops over std::vector) so it
// cannot share a code path with the library it checks.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "c2fa/rng.hpp"
#include "c2fa/tensor.hpp"

namespace testutil {

// Scratch directory under the system temp root, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static std::atomic<uint64_t> counter{0};
        const auto stamp =
            std::chrono::steady_clock::now().time_since_epoch().count();
        path = std::filesystem::temp_directory_path() /
               ("c2fa_test_" + std::to_string(stamp) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

inline c2fa::Tensor random_tensor(size_t rows, size_t cols, c2fa::Rng& rng,
                                  bool requires_grad = false, double scale = 1.0) {
    std::vector<double> d(rows * cols);
    for (auto& x : d) x = scale * rng.next_gaussian();
    return c2fa::Tensor::from_data(rows, cols, std::move(d), requires_grad);
}

// Reduces a tensor to a scalar with fixed weights so finite-difference probes
// see general (non-uniform) output gradients.
inline c2fa::Tensor weighted_sum(const c2fa::Tensor& out, const c2fa::Tensor& weights) {
    return c2fa::sum_all(c2fa::mul(out, weights));
}

// Exponential normalization done the obvious way, no max subtraction.
inline std::vector<double> naive_softmax(const std::vector<double>& row, double temperature) {
    std::vector<double> out(row.size());
    double sum = 0.0;
    for (size_t i = 0; i < row.size(); ++i) {
        out[i] = std::exp(row[i] / temperature);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

inline double naive_cross_entropy_row(const std::vector<double>& y, const std::vector<double>& p) {
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i)
        if (y[i] != 0.0) s -= y[i] * std::log(p[i] + 1e-12);
    return s;
}

inline double naive_kl_row(const std::vector<double>& q, const std::vector<double>& p) {
    double s = 0.0;
    for (size_t i = 0; i < q.size(); ++i)
        s += q[i] * std::log((q[i] + 1e-12) / (p[i] + 1e-12));
    return s;
}

inline std::vector<double> naive_matmul(const std::vector<double>& a, size_t m, size_t k,
                                        const std::vector<double>& b, size_t p) {
    std::vector<double> c(m * p, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < p; ++j)
            for (size_t kk = 0; kk < k; ++kk) c[i * p + j] += a[i * k + kk] * b[kk * p + j];
    return c;
}

// Random row vector normalized to a distribution, for loss-input fixtures.
inline std::vector<double> random_distribution(size_t k, c2fa::Rng& rng) {
    std::vector<double> v(k);
    double sum = 0.0;
    for (auto& x : v) {
        x = 0.05 + rng.next_double();
        sum += x;
    }
    for (auto& x : v) x /= sum;
    return v;
}

}  // namespace testutil
