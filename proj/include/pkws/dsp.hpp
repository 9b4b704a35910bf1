#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "pkws/errors.hpp"

namespace pkws {

inline constexpr double kPi = 3.14159265358979323846;

/// Iterative radix-2 complex FFT. Size must be a power of two. Twiddles and
/// the bit-reversal table are cached per plan.
class Fft {
public:
    explicit Fft(std::size_t n) : n_(n) {
        if (n == 0 || (n & (n - 1)) != 0) throw ShapeError("Fft: size must be a power of two");
        rev_.resize(n);
        std::size_t bits = 0;
        while ((std::size_t{1} << bits) < n) ++bits;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t r = 0;
            for (std::size_t b = 0; b < bits; ++b)
                if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
            rev_[i] = r;
        }
        tw_.resize(n / 2);
        for (std::size_t i = 0; i < n / 2; ++i) {
            const double ang = -2.0 * kPi * static_cast<double>(i) / static_cast<double>(n);
            tw_[i] = {std::cos(ang), std::sin(ang)};
        }
    }

    std::size_t size() const { return n_; }

    /// In-place transform of n complex points.
    void run(std::complex<double>* a) const {
        for (std::size_t i = 0; i < n_; ++i) {
            if (i < rev_[i]) std::swap(a[i], a[rev_[i]]);
        }
        for (std::size_t len = 2; len <= n_; len <<= 1) {
            const std::size_t step = n_ / len;
            for (std::size_t i = 0; i < n_; i += len) {
                for (std::size_t j = 0; j < len / 2; ++j) {
                    const std::complex<double> u = a[i + j];
                    const std::complex<double> v = a[i + j + len / 2] * tw_[j * step];
                    a[i + j] = u + v;
                    a[i + j + len / 2] = u - v;
                }
            }
        }
    }

    /// Magnitude spectrum of a real frame (zero-padded to the FFT size):
    /// returns n/2+1 bins.
    void magnitude(const double* frame, std::size_t frame_len, std::vector<double>& out) const {
        if (frame_len > n_) throw ShapeError("Fft::magnitude: frame longer than FFT size");
        buf_.assign(n_, {0.0, 0.0});
        for (std::size_t i = 0; i < frame_len; ++i) buf_[i] = {frame[i], 0.0};
        run(buf_.data());
        out.resize(n_ / 2 + 1);
        for (std::size_t k = 0; k <= n_ / 2; ++k) out[k] = std::abs(buf_[k]);
    }

    /// Two real frames per complex transform: a in the real part, b in the
    /// imaginary part, separated afterwards by conjugate symmetry.
    void magnitude_pair(const double* a, const double* b, std::size_t frame_len,
                        std::vector<double>& out_a, std::vector<double>& out_b) const {
        if (frame_len > n_) throw ShapeError("Fft::magnitude_pair: frame longer than FFT size");
        buf_.assign(n_, {0.0, 0.0});
        for (std::size_t i = 0; i < frame_len; ++i) buf_[i] = {a[i], b[i]};
        run(buf_.data());
        out_a.resize(n_ / 2 + 1);
        out_b.resize(n_ / 2 + 1);
        for (std::size_t k = 0; k <= n_ / 2; ++k) {
            const std::complex<double> zk = buf_[k];
            const std::complex<double> zn = buf_[(n_ - k) & (n_ - 1)];
            const double ar = 0.5 * (zk.real() + zn.real());
            const double ai = 0.5 * (zk.imag() - zn.imag());
            const double br = 0.5 * (zk.imag() + zn.imag());
            const double bi = 0.5 * (zn.real() - zk.real());
            out_a[k] = std::sqrt(ar * ar + ai * ai);
            out_b[k] = std::sqrt(br * br + bi * bi);
        }
    }

private:
    std::size_t n_;
    std::vector<std::size_t> rev_;
    std::vector<std::complex<double>> tw_;
    mutable std::vector<std::complex<double>> buf_;
};

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n)));
    }
    return w;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank over FFT magnitude bins. Each triangle only
/// touches its own bin range, so application iterates the nonzero span.
struct MelFilterbank {
    std::size_t n_mels;
    std::size_t n_bins;  // fft/2 + 1
    std::vector<double> center_hz;
    std::vector<double> weights;        // [n_mels][n_bins], row-major
    std::vector<std::size_t> span_lo;   // first nonzero bin per mel
    std::vector<std::size_t> span_hi;   // one past the last nonzero bin

    MelFilterbank(std::size_t mels, std::size_t fft_size, double sample_rate, double fmin,
                  double fmax)
        : n_mels(mels), n_bins(fft_size / 2 + 1) {
        if (fmin < 0 || fmax <= fmin || mels == 0) throw ShapeError("MelFilterbank: bad band spec");
        std::vector<double> pts(mels + 2);
        const double mlo = hz_to_mel(fmin);
        const double mhi = hz_to_mel(fmax);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            pts[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) /
                                         static_cast<double>(mels + 1));
        }
        center_hz.assign(pts.begin() + 1, pts.end() - 1);
        weights.assign(n_mels * n_bins, 0.0);
        span_lo.assign(n_mels, 0);
        span_hi.assign(n_mels, 0);
        const double hz_per_bin = sample_rate / static_cast<double>(fft_size);
        for (std::size_t m = 0; m < mels; ++m) {
            const double lo = pts[m], mid = pts[m + 1], hi = pts[m + 2];
            bool any = false;
            for (std::size_t k = 0; k < n_bins; ++k) {
                const double f = hz_per_bin * static_cast<double>(k);
                double w = 0.0;
                if (f > lo && f < mid) w = (f - lo) / (mid - lo);
                else if (f >= mid && f < hi) w = (hi - f) / (hi - mid);
                weights[m * n_bins + k] = w;
                if (w > 0.0) {
                    if (!any) span_lo[m] = k;
                    span_hi[m] = k + 1;
                    any = true;
                }
            }
            if (!any) span_lo[m] = span_hi[m] = 0;
        }
    }

    /// energies[m] = sum_k weights[m][k] * mag[k]
    void apply(const std::vector<double>& mag, std::vector<double>& energies) const {
        energies.assign(n_mels, 0.0);
        for (std::size_t m = 0; m < n_mels; ++m) {
            const double* w = weights.data() + m * n_bins;
            double acc = 0.0;
            for (std::size_t k = span_lo[m]; k < span_hi[m]; ++k) acc += w[k] * mag[k];
            energies[m] = acc;
        }
    }
};

/// Direct-form biquad section (RBJ cookbook coefficients).
struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

    static Biquad lowpass(double f0, double q, double fs) {
        const double w0 = 2.0 * kPi * f0 / fs, cw = std::cos(w0), sw = std::sin(w0);
        const double alpha = sw / (2.0 * q);
        const double a0 = 1 + alpha;
        return {(1 - cw) / 2 / a0, (1 - cw) / a0, (1 - cw) / 2 / a0, -2 * cw / a0, (1 - alpha) / a0};
    }

    static Biquad highpass(double f0, double q, double fs) {
        const double w0 = 2.0 * kPi * f0 / fs, cw = std::cos(w0), sw = std::sin(w0);
        const double alpha = sw / (2.0 * q);
        const double a0 = 1 + alpha;
        return {(1 + cw) / 2 / a0, -(1 + cw) / a0, (1 + cw) / 2 / a0, -2 * cw / a0, (1 - alpha) / a0};
    }

    static Biquad peaking(double f0, double q, double gain_db, double fs) {
        const double A = std::pow(10.0, gain_db / 40.0);
        const double w0 = 2.0 * kPi * f0 / fs, cw = std::cos(w0), sw = std::sin(w0);
        const double alpha = sw / (2.0 * q);
        const double a0 = 1 + alpha / A;
        return {(1 + alpha * A) / a0, -2 * cw / a0, (1 - alpha * A) / a0, -2 * cw / a0,
                (1 - alpha / A) / a0};
    }

    // shelves use RBJ coefficients with S = 1
    static Biquad high_shelf(double f0, double gain_db, double fs) {
        const double A = std::pow(10.0, gain_db / 40.0);
        const double w0 = 2.0 * kPi * f0 / fs, cw = std::cos(w0), sw = std::sin(w0);
        const double sq = 2 * std::sqrt(A) * (sw / 2.0) * std::sqrt(2.0);
        const double A0 = (A + 1) - (A - 1) * cw + sq;
        return {A * ((A + 1) + (A - 1) * cw + sq) / A0,
                -2 * A * ((A - 1) + (A + 1) * cw) / A0,
                A * ((A + 1) + (A - 1) * cw - sq) / A0,
                2 * ((A - 1) - (A + 1) * cw) / A0,
                ((A + 1) - (A - 1) * cw - sq) / A0};
    }

    static Biquad low_shelf(double f0, double gain_db, double fs) {
        const double A = std::pow(10.0, gain_db / 40.0);
        const double w0 = 2.0 * kPi * f0 / fs, cw = std::cos(w0), sw = std::sin(w0);
        const double sq = 2 * std::sqrt(A) * (sw / 2.0) * std::sqrt(2.0);
        const double A0 = (A + 1) + (A - 1) * cw + sq;
        return {A * ((A + 1) - (A - 1) * cw + sq) / A0,
                2 * A * ((A - 1) - (A + 1) * cw) / A0,
                A * ((A + 1) - (A - 1) * cw - sq) / A0,
                -2 * ((A - 1) + (A + 1) * cw) / A0,
                ((A + 1) + (A - 1) * cw - sq) / A0};
    }

    void apply(std::vector<double>& x) const {
        double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
        for (double& v : x) {
            const double y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            v = y;
        }
    }
};

}  // namespace pkws
