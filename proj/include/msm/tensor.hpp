#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "msm/errors.hpp"

namespace msm {

// Dense row-major array of doubles. Everything in the model is 64-bit for
// test determinism; speed is a non-goal at this scale.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
    }

    Tensor(std::vector<std::int64_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != static_cast<std::int64_t>(data_.size()))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str());
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }

    std::int64_t rows() const {
        require_2d();
        return shape_[0];
    }
    std::int64_t cols() const {
        require_2d();
        return shape_[1];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

    static std::int64_t count(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto d : shape) {
            if (d < 0) throw ShapeError("negative extent in tensor shape");
            n *= d;
        }
        return n;
    }

  private:
    void require_2d() const {
        if (shape_.size() != 2) throw ShapeError("expected 2-d tensor, got " + shape_str());
    }

    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

}  // namespace msm
