#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mergeforge {

// Dense row-major tensor of 64-bit reals. Rank 0..2 is all the model needs;
// rank-1 tensors act as row vectors where a matrix is expected.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);  // zero-filled
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor full(std::vector<int64_t> shape, double v);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }
    int rank() const { return static_cast<int>(shape_.size()); }

    // 2-D accessors; rank-1 tensors are viewed as [1 x n].
    int64_t rows() const;
    int64_t cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }
    std::span<const double> span() const { return {data_.data(), data_.size()}; }

    double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);

}  // namespace mergeforge
