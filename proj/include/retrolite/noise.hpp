#pragma once

// Embedding-matrix regularizers: Gaussian noise with relative standard
// deviation lambda (sigma = lambda * mean|M|), the uniform variant with
// amplitude alpha / sqrt(L * d), and the inference-time noisy-retrieval
// simulation. Magnitude zero is always the exact identity.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "retrolite/common.hpp"

namespace retrolite {

enum class NoiseKind { None, Gaussian, Uniform };
enum class NoisePlacement { Sequence, Neighbors, Both };

struct RegularizerSpec {
    NoiseKind kind = NoiseKind::None;
    double lambda_t = 0.0;  // Gaussian relative std
    double alpha = 0.0;     // uniform amplitude parameter
    NoisePlacement placement = NoisePlacement::Neighbors;
};

struct InferenceNoiseSpec {
    double lambda_i = 0.0;
};

// sigma = lambda * mean of elementwise |M|
template <typename T>
double noise_sigma(std::span<const T> m, double lambda) {
    if (m.empty()) fail("noise_sigma: empty matrix");
    if (lambda < 0.0) fail("noise_sigma: lambda must be >= 0");
    double sum_abs = 0.0;
    for (T x : m) sum_abs += std::fabs(double(x));
    return lambda * (sum_abs / double(m.size()));
}

// M += N(0, sigma) elementwise, fresh draw per call
template <typename T>
void apply_gaussian(std::span<T> m, double lambda, Rng& rng) {
    if (lambda == 0.0) return;  // exact identity, no draws consumed
    const double sigma = noise_sigma(std::span<const T>(m.data(), m.size()), lambda);
    if (sigma == 0.0) return;
    for (T& x : m) x = T(double(x) + sigma * rng.gauss());
}

// M += U(-1,1) * alpha / sqrt(n_rows * n_cols) elementwise; M holds
// n_rows token positions of dimension n_cols.
template <typename T>
void apply_uniform(std::span<T> m, size_t n_rows, size_t n_cols, double alpha, Rng& rng) {
    if (alpha < 0.0) fail("apply_uniform: alpha must be >= 0");
    if (alpha == 0.0) return;
    if (n_rows * n_cols != m.size())
        fail("apply_uniform: shape ", n_rows, "x", n_cols, " != size ", m.size());
    const double amp = alpha / std::sqrt(double(n_rows) * double(n_cols));
    for (T& x : m) x = T(double(x) + amp * rng.uniform(-1.0, 1.0));
}

// Gaussian noisy-retrieval model applied to the neighbor-embedding tensor
// at evaluation time; lambda_i = 0 is ideal retrieval.
template <typename T>
void apply_inference_noise(std::span<T> neighbor_embeddings, double lambda_i, Rng& rng) {
    apply_gaussian(neighbor_embeddings, lambda_i, rng);
}

// mean(M^2) / mean(E^2) over one fresh draw of the given noise; infinity
// when the draw is exactly zero.
template <typename T, typename NoiseFn>
double measure_snr(std::span<const T> m, NoiseFn&& noise_fn) {
    std::vector<T> noised(m.begin(), m.end());
    noise_fn(std::span<T>(noised));
    double signal = 0.0, noise = 0.0;
    for (size_t i = 0; i < m.size(); ++i) {
        signal += double(m[i]) * double(m[i]);
        const double e = double(noised[i]) - double(m[i]);
        noise += e * e;
    }
    if (noise == 0.0) return std::numeric_limits<double>::infinity();
    return signal / noise;
}

NoiseKind parse_noise_kind(const std::string& s);
NoisePlacement parse_noise_placement(const std::string& s);
std::string to_string(NoiseKind k);
std::string to_string(NoisePlacement p);
std::string regularizer_label(const RegularizerSpec& spec);

}  // namespace retrolite
