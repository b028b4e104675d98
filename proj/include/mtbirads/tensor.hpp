#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtbr {

// Dense n-dimensional array of doubles, row-major.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_size(shape_) != data_.size())
            throw std::invalid_argument("Tensor: shape/data size mismatch");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // 1-3D element access.
    double& at(int i) { return data_[static_cast<size_t>(i)]; }
    double at(int i) const { return data_[static_cast<size_t>(i)]; }
    double& at(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    double at(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const;

    // Sum of all entries.
    double sum() const;

    std::string shape_str() const;

private:
    static size_t checked_size(const std::vector<int>& shape);

    std::vector<int> shape_;
    std::vector<double> data_;
};

// Deterministic uniform/normal stream. mt19937_64 bits are mapped to doubles
// directly so sequences are identical across standard libraries.
class RandomStream {
public:
    explicit RandomStream(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {
        // splitmix64 warm-up so nearby seeds decorrelate
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; one draw per call, spare cached.
    double normal();

    // Derive an independent stream for a subtask.
    RandomStream fork(uint64_t salt) {
        RandomStream r(next_u64() ^ (salt * 0x9e3779b97f4a7c15ULL));
        return r;
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mtbr
