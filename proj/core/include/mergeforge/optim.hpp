#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mergeforge {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over one flat buffer. The caller passes the same parameter layout to
// every step; moments are kept per coordinate.
class Adam {
public:
    Adam(AdamConfig config, size_t n);

    void step(std::span<double> params, std::span<const double> grads);
    int64_t steps_taken() const { return t_; }

private:
    AdamConfig config_;
    std::vector<double> m_;
    std::vector<double> v_;
    int64_t t_ = 0;
};

}  // namespace mergeforge
