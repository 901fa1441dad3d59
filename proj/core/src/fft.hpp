#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace tokstd::detail {

/// Real-to-complex transform of a fixed length backed by FFTW. Planning is
/// serialised internally; execute() may run concurrently on distinct objects.
class RealFft {
public:
    explicit RealFft(std::size_t n);
    ~RealFft();
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    std::size_t size() const noexcept { return n_; }

    /// Input is zero-padded (or truncated) to size(); returns n/2+1 bins.
    void forward(std::span<const double> input, std::vector<std::complex<double>>& out);

private:
    std::size_t n_;
    double* in_ = nullptr;
    void* out_ = nullptr;
    void* plan_ = nullptr;
};

/// Full linear convolution, length a.size() + b.size() - 1.
std::vector<double> convolve(std::span<const double> a, std::span<const double> b);

} // namespace tokstd::detail
