#pragma once

#include <span>
#include <utility>
#include <vector>

#include "gradflow/tensor.hpp"

namespace gradflow {

inline constexpr double kLn2Pi = 1.8378770664093454836;

// Elementwise Gaussian log-density in nats: -((z-mean)^2/var + ln(2*pi*var))/2.
double gaussian_log_pdf(double z, double mean, double variance);
Tensor gaussian_log_pdf(const Tensor& z, double mean, double variance);

enum class VarianceConvention { population, sample };

struct Moments {
    double mean = 0.0;
    double variance = 0.0;
};

// Single-pass (Welford) mean and variance. Population (divide-by-N)
// convention by default; requires at least two values.
Moments moments(std::span<const double> values,
                VarianceConvention convention = VarianceConvention::population);

struct LogitResult {
    Tensor y;
    std::vector<double> per_sample_logdet; // nats, one entry per leading-dim sample
};

// y = logit(alpha + (1-2*alpha)*x) applied to x in [0,1]; first shape
// dimension is the sample dimension. The log-det makes the flow density
// over x exact when added to the latent log-density.
LogitResult logit_preprocess(const Tensor& x, double alpha);

// Inverse of logit_preprocess; output clamped to [0,1].
Tensor logit_inverse(const Tensor& y, double alpha);

} // namespace gradflow
