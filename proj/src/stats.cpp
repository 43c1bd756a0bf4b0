#include "gradflow/stats.hpp"

#include <cmath>

namespace gradflow {

double gaussian_log_pdf(double z, double mean, double variance) {
    check(variance > 0.0, ErrorKind::invalid_argument,
          "gaussian_log_pdf: variance must be positive, got " + std::to_string(variance));
    const double d = z - mean;
    return -0.5 * (d * d / variance + std::log(variance) + kLn2Pi);
}

Tensor gaussian_log_pdf(const Tensor& z, double mean, double variance) {
    check(variance > 0.0, ErrorKind::invalid_argument,
          "gaussian_log_pdf: variance must be positive, got " + std::to_string(variance));
    Tensor out = Tensor::zeros(z.shape, z.prec);
    const double log_norm = -0.5 * (std::log(variance) + kLn2Pi);
    const double inv2v = 0.5 / variance;
    for (size_t i = 0; i < z.size(); ++i) {
        const double d = z[i] - mean;
        out[i] = log_norm - d * d * inv2v;
    }
    return out;
}

Moments moments(std::span<const double> values, VarianceConvention convention) {
    check(values.size() >= 2, ErrorKind::insufficient_data,
          "moments: need at least 2 values, got " + std::to_string(values.size()));
    double mean = 0.0;
    double m2 = 0.0;
    size_t n = 0;
    for (double v : values) {
        ++n;
        const double d = v - mean;
        mean += d / double(n);
        m2 += d * (v - mean);
    }
    const double denom =
        convention == VarianceConvention::population ? double(n) : double(n - 1);
    return {mean, m2 / denom};
}

LogitResult logit_preprocess(const Tensor& x, double alpha) {
    check(alpha > 0.0 && alpha < 0.5, ErrorKind::invalid_argument,
          "logit_preprocess: alpha must lie in (0, 0.5)");
    check(!x.shape.empty(), ErrorKind::shape, "logit_preprocess: rank-0 input");

    const size_t n = x.shape[0];
    const size_t dims = n == 0 ? 0 : x.size() / n;
    const double a = alpha;
    const double w = 1.0 - 2.0 * a;
    const double log_w = std::log(w);

    LogitResult r;
    r.y = Tensor::zeros(x.shape, x.prec);
    r.per_sample_logdet.assign(n, 0.0);
    for (size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        if (!(v >= 0.0 && v <= 1.0))
            fail(ErrorKind::domain,
                 "logit_preprocess: input outside [0,1]: " + std::to_string(v));
        const double s = a + w * v;
        r.y[i] = std::log(s) - std::log1p(-s);
        r.per_sample_logdet[i / dims] += log_w - std::log(s) - std::log1p(-s);
    }
    return r;
}

Tensor logit_inverse(const Tensor& y, double alpha) {
    check(alpha > 0.0 && alpha < 0.5, ErrorKind::invalid_argument,
          "logit_inverse: alpha must lie in (0, 0.5)");
    const double w = 1.0 - 2.0 * alpha;
    Tensor x = Tensor::zeros(y.shape, y.prec);
    for (size_t i = 0; i < y.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-y[i]));
        double v = (s - alpha) / w;
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
        x[i] = v;
    }
    return x;
}

} // namespace gradflow
