#include "mtbirads/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mtbr {

size_t Tensor::checked_size(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
}

double RandomStream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

}  // namespace mtbr
