#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "optimus/common.hpp"

namespace optimus {

template <typename T>
struct dtype_name;
template <>
struct dtype_name<float> {
    static constexpr const char* value = "f32";
};
template <>
struct dtype_name<double> {
    static constexpr const char* value = "f64";
};
template <>
struct dtype_name<int64_t> {
    static constexpr const char* value = "i64";
};

// Dense row-major tensor, rank 1..3. Element access is assert-bounds-checked;
// kernels that need speed use raw data() pointers.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign((size_t)numel_of(shape_), T(0));
    }

    Tensor(std::vector<int64_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check((int64_t)data_.size() == numel_of(shape_),
              strcat_("tensor: data size ", data_.size(), " does not match shape numel ",
                      numel_of(shape_)));
    }

    static Tensor full(std::vector<int64_t> shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    int64_t numel() const { return (int64_t)data_.size(); }
    int rank() const { return (int)shape_.size(); }
    int64_t dim(int i) const {
        assert(i >= 0 && i < rank());
        return shape_[(size_t)i];
    }
    const std::vector<int64_t>& shape() const { return shape_; }
    size_t bytes() const { return data_.size() * sizeof(T); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator()(int64_t i) {
        assert(rank() == 1 && i >= 0 && i < shape_[0]);
        return data_[(size_t)i];
    }
    T operator()(int64_t i) const {
        assert(rank() == 1 && i >= 0 && i < shape_[0]);
        return data_[(size_t)i];
    }
    T& operator()(int64_t i, int64_t j) {
        assert(rank() == 2 && i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1]);
        return data_[(size_t)(i * shape_[1] + j)];
    }
    T operator()(int64_t i, int64_t j) const {
        assert(rank() == 2 && i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1]);
        return data_[(size_t)(i * shape_[1] + j)];
    }
    T& operator()(int64_t i, int64_t j, int64_t k) {
        assert(rank() == 3 && i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1] && k >= 0 &&
               k < shape_[2]);
        return data_[(size_t)((i * shape_[1] + j) * shape_[2] + k)];
    }
    T operator()(int64_t i, int64_t j, int64_t k) const {
        assert(rank() == 3 && i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1] && k >= 0 &&
               k < shape_[2]);
        return data_[(size_t)((i * shape_[1] + j) * shape_[2] + k)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

  private:
    static int64_t numel_of(const std::vector<int64_t>& shape) {
        check(!shape.empty(), "tensor: rank-0 shapes are not supported");
        int64_t n = 1;
        for (int64_t d : shape) {
            check(d >= 0, "tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorI = Tensor<int64_t>;

}  // namespace optimus
