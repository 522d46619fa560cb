#pragma once

#include <cmath>
#include <cstddef>

namespace polyboltz {

/// Neumaier compensated accumulator. Sequential accumulation in a fixed
/// order keeps reductions bit-stable regardless of the thread count used
/// to produce the summands.
class NeumaierSum {
public:
    void add(double x) {
        double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline double compensated_sum(const double* x, std::size_t n) {
    NeumaierSum s;
    for (std::size_t i = 0; i < n; ++i) s.add(x[i]);
    return s.value();
}

} // namespace polyboltz
