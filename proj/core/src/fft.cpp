#include "fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <mutex>

namespace tokstd::detail {

namespace {

std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) {
        p <<= 1U;
    }
    return p;
}

} // namespace

RealFft::RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(planner_mutex());
    in_ = fftw_alloc_real(n_);
    auto* out = fftw_alloc_complex(n_ / 2 + 1);
    out_ = out;
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n_), in_, out, FFTW_ESTIMATE);
}

RealFft::~RealFft() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(static_cast<fftw_plan>(plan_));
    fftw_free(in_);
    fftw_free(out_);
}

void RealFft::forward(std::span<const double> input, std::vector<std::complex<double>>& out) {
    const std::size_t m = std::min(input.size(), n_);
    std::copy_n(input.begin(), m, in_);
    std::fill(in_ + m, in_ + n_, 0.0);
    fftw_execute(static_cast<fftw_plan>(plan_));
    const auto* bins = static_cast<const fftw_complex*>(out_);
    out.resize(n_ / 2 + 1);
    for (std::size_t k = 0; k < out.size(); ++k) {
        out[k] = {bins[k][0], bins[k][1]};
    }
}

std::vector<double> convolve(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) {
        return {};
    }
    const std::size_t len = a.size() + b.size() - 1;
    std::vector<double> out(len, 0.0);
    if (std::min(a.size(), b.size()) <= 64) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            for (std::size_t j = 0; j < b.size(); ++j) {
                out[i + j] += a[i] * b[j];
            }
        }
        return out;
    }

    const std::size_t n = next_pow2(len);
    double* buf_a;
    double* buf_b;
    fftw_complex* spec_a;
    fftw_complex* spec_b;
    fftw_plan pa;
    fftw_plan pb;
    fftw_plan inv;
    {
        std::lock_guard lock(planner_mutex());
        buf_a = fftw_alloc_real(n);
        buf_b = fftw_alloc_real(n);
        spec_a = fftw_alloc_complex(n / 2 + 1);
        spec_b = fftw_alloc_complex(n / 2 + 1);
        pa = fftw_plan_dft_r2c_1d(static_cast<int>(n), buf_a, spec_a, FFTW_ESTIMATE);
        pb = fftw_plan_dft_r2c_1d(static_cast<int>(n), buf_b, spec_b, FFTW_ESTIMATE);
        inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec_a, buf_a, FFTW_ESTIMATE);
    }
    std::fill(buf_a, buf_a + n, 0.0);
    std::fill(buf_b, buf_b + n, 0.0);
    std::copy(a.begin(), a.end(), buf_a);
    std::copy(b.begin(), b.end(), buf_b);
    fftw_execute(pa);
    fftw_execute(pb);
    for (std::size_t k = 0; k < n / 2 + 1; ++k) {
        const double re = spec_a[k][0] * spec_b[k][0] - spec_a[k][1] * spec_b[k][1];
        const double im = spec_a[k][0] * spec_b[k][1] + spec_a[k][1] * spec_b[k][0];
        spec_a[k][0] = re;
        spec_a[k][1] = im;
    }
    fftw_execute(inv);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < len; ++i) {
        out[i] = buf_a[i] * scale;
    }
    {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(pa);
        fftw_destroy_plan(pb);
        fftw_destroy_plan(inv);
        fftw_free(buf_a);
        fftw_free(buf_b);
        fftw_free(spec_a);
        fftw_free(spec_b);
    }
    return out;
}

} // namespace tokstd::detail
