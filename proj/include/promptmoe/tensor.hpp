#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pmoe {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Dimensions are always positive.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor vector(std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // 2-D helpers; a rank-1 tensor is treated as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    Tensor reshaped(Shape shape) const;
    Tensor row(std::size_t r) const;

    void fill(double v);
    bool all_finite() const noexcept;
    // Throws EvaluationError naming `where` when a NaN/Inf is present.
    void check_finite(std::string_view where) const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

// Plain (non-differentiable) kernels shared by the frozen encoders and the
// differentiable ops.
Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// aᵀ · b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Softmax along `axis` of x / temperature. Max-shifted, so invariant to
// adding a constant along the axis.
Tensor softmax(const Tensor& x, std::size_t axis, double temperature = 1.0);

struct TopK {
    std::vector<std::size_t> indices;
    Tensor gates;  // softmax over the selected logits, in `indices` order
};

// Stable selection of the k largest logits: ties resolve to the lower index.
TopK topk_select(const Tensor& logits, std::size_t k);
std::vector<std::size_t> topk_indices(std::span<const double> logits, std::size_t k);

double max_abs_diff(const Tensor& a, const Tensor& b);

// Seeded source of initial values; std::mt19937_64 is specified bit-exactly so
// the stream is reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0);
    double normal(double mean = 0.0, double stddev = 1.0);
    std::size_t index(std::size_t n);  // uniform in [0, n)
    std::uint64_t next() { return engine_(); }
    std::mt19937_64& engine() noexcept { return engine_; }

    Tensor normal_tensor(Shape shape, double stddev);
    Tensor uniform_tensor(Shape shape, double lo, double hi);

private:
    std::mt19937_64 engine_;
};

// Mixes a base seed with a stream tag so independent components draw from
// decorrelated streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

}  // namespace pmoe
