#pragma once

// Reconstruction losses and evaluation metrics on RGB buffers in [0, 1].
// SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at every
// position where the window fits inside the image ("valid" filtering).

#include "mirage/core.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <vector>

namespace mirage {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr double kPsnrCap = 100.0;
inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

struct MetricReport {
    double psnr = 0.0;
    double ms_ssim = 0.0;
    double l1 = 0.0;
};

inline nlohmann::json to_json(const MetricReport &r) {
    return {{"psnr", r.psnr}, {"ms_ssim", r.ms_ssim}, {"l1", r.l1}};
}

// ---------------------------------------------------------------------------
// L1

/// Mean absolute error over all channels. When `grad` is given it receives
/// the subgradient sign(a - b) / (3WH), zero where a == b.
inline double l1(const ImageBuffer &a, const ImageBuffer &b, ImageBuffer *grad = nullptr) {
    require_same_shape(a, b, "l1");
    const std::size_t n = a.size();
    if (grad) *grad = ImageBuffer(a.width(), a.height());
    if (n == 0) return 0.0;
    double sum = 0.0;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.data()[i] - b.data()[i];
        sum += std::abs(d);
        if (grad) grad->data()[i] = d > 0 ? inv : (d < 0 ? -inv : 0.0);
    }
    return sum * inv;
}

inline double mse(const ImageBuffer &a, const ImageBuffer &b) {
    require_same_shape(a, b, "mse");
    if (a.size() == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        sum += d * d;
    }
    return sum / static_cast<double>(a.size());
}

/// 10 log10(1 / MSE), capped at 100 dB once MSE < 1e-10.
inline double psnr(const ImageBuffer &a, const ImageBuffer &b) {
    const double m = mse(a, b);
    if (m < 1e-10) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

// ---------------------------------------------------------------------------
// SSIM

namespace detail {

inline const std::array<double, kSsimWindow> &ssim_kernel() {
    static const std::array<double, kSsimWindow> k = [] {
        std::array<double, kSsimWindow> w{};
        double sum = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double x = i - kSsimWindow / 2;
            w[i] = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
            sum += w[i];
        }
        for (double &v : w) v /= sum;
        return w;
    }();
    return k;
}

/// Single-channel plane.
struct Plane {
    int w = 0;
    int h = 0;
    std::vector<double> v;

    Plane() = default;
    Plane(int w_, int h_, double fill = 0.0) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, fill) {}
    double &operator()(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
    double operator()(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline Plane channel(const ImageBuffer &img, int c) {
    Plane p(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) p(x, y) = img.at(x, y, c);
    return p;
}

/// Separable Gaussian filter, output size (w-10) x (h-10).
inline Plane filter_valid(const Plane &in) {
    const auto &k = ssim_kernel();
    const int ow = in.w - kSsimWindow + 1, oh = in.h - kSsimWindow + 1;
    Plane tmp(ow, in.h);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[i] * in(x + i, y);
            tmp(x, y) = s;
        }
    Plane out(ow, oh);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[i] * tmp(x, y + i);
            out(x, y) = s;
        }
    return out;
}

/// Adjoint of filter_valid: scatters a (w-10) x (h-10) map back to w x h.
inline Plane filter_valid_adjoint(const Plane &in, int w, int h) {
    const auto &k = ssim_kernel();
    Plane tmp(in.w, h);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
            const double v = in(x, y);
            for (int i = 0; i < kSsimWindow; ++i) tmp(x, y + i) += k[i] * v;
        }
    Plane out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < in.w; ++x) {
            const double v = tmp(x, y);
            for (int i = 0; i < kSsimWindow; ++i) out(x + i, y) += k[i] * v;
        }
    return out;
}

inline Plane product(const Plane &a, const Plane &b) {
    Plane out(a.w, a.h);
    for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
    return out;
}

struct SsimStats {
    double ssim = 0.0; // mean of the full SSIM map
    double cs = 0.0;   // mean of the contrast-structure map
};

/// SSIM of one channel; accumulates d(mean ssim)/da * scale into grad_a.
inline SsimStats ssim_plane(const Plane &a, const Plane &b, Plane *grad_a, double scale) {
    const Plane mu_a = filter_valid(a);
    const Plane mu_b = filter_valid(b);
    const Plane m_aa = filter_valid(product(a, a));
    const Plane m_bb = filter_valid(product(b, b));
    const Plane m_ab = filter_valid(product(a, b));
    const std::size_t n = mu_a.v.size();
    const double inv_n = 1.0 / static_cast<double>(n);

    Plane d_mu, d_aa, d_ab;
    if (grad_a) {
        d_mu = Plane(mu_a.w, mu_a.h);
        d_aa = Plane(mu_a.w, mu_a.h);
        d_ab = Plane(mu_a.w, mu_a.h);
    }
    SsimStats st;
    for (std::size_t i = 0; i < n; ++i) {
        const double ma = mu_a.v[i], mb = mu_b.v[i];
        const double saa = m_aa.v[i] - ma * ma;
        const double sbb = m_bb.v[i] - mb * mb;
        const double sab = m_ab.v[i] - ma * mb;
        const double a1 = 2.0 * ma * mb + kSsimC1;
        const double a2 = 2.0 * sab + kSsimC2;
        const double b1 = ma * ma + mb * mb + kSsimC1;
        const double b2 = saa + sbb + kSsimC2;
        const double s = (a1 * a2) / (b1 * b2);
        st.ssim += s;
        st.cs += a2 / b2;
        if (grad_a) {
            const double ds_dmu = 2.0 * mb * a2 / (b1 * b2) - s * 2.0 * ma / b1;
            const double ds_dsab = 2.0 * a1 / (b1 * b2);
            const double ds_dsaa = -s / b2;
            const double w = scale * inv_n;
            d_mu.v[i] = w * (ds_dmu - 2.0 * ma * ds_dsaa - mb * ds_dsab);
            d_aa.v[i] = w * ds_dsaa;
            d_ab.v[i] = w * ds_dsab;
        }
    }
    st.ssim *= inv_n;
    st.cs *= inv_n;
    if (grad_a) {
        const Plane g_mu = filter_valid_adjoint(d_mu, a.w, a.h);
        const Plane g_aa = filter_valid_adjoint(d_aa, a.w, a.h);
        const Plane g_ab = filter_valid_adjoint(d_ab, a.w, a.h);
        for (std::size_t i = 0; i < a.v.size(); ++i)
            grad_a->v[i] += g_mu.v[i] + 2.0 * a.v[i] * g_aa.v[i] + b.v[i] * g_ab.v[i];
    }
    return st;
}

/// Area-weighted 2x reduction to floor(n/2); symmetric under flips.
inline Plane downsample(const Plane &in) {
    auto weights = [](int n) {
        const int m = n / 2;
        const double r = static_cast<double>(n) / m;
        std::vector<std::vector<std::pair<int, double>>> taps(m);
        for (int o = 0; o < m; ++o) {
            const double lo = o * r, hi = (o + 1) * r;
            for (int i = static_cast<int>(std::floor(lo)); i < n && i < hi; ++i) {
                const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
                if (overlap > 1e-12) taps[o].emplace_back(i, overlap / r);
            }
        }
        return taps;
    };
    const auto tx = weights(in.w);
    const auto ty = weights(in.h);
    Plane tmp(static_cast<int>(tx.size()), in.h);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < tmp.w; ++x) {
            double s = 0.0;
            for (auto [i, wgt] : tx[x]) s += wgt * in(i, y);
            tmp(x, y) = s;
        }
    Plane out(tmp.w, static_cast<int>(ty.size()));
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            double s = 0.0;
            for (auto [i, wgt] : ty[y]) s += wgt * tmp(x, i);
            out(x, y) = s;
        }
    return out;
}

} // namespace detail

/// Mean SSIM over channels; `grad` receives d ssim / d a.
inline double ssim(const ImageBuffer &a, const ImageBuffer &b, ImageBuffer *grad = nullptr) {
    require_same_shape(a, b, "ssim");
    if (a.width() < kSsimWindow || a.height() < kSsimWindow)
        throw ShapeError("ssim: image smaller than the 11x11 window");
    if (grad) *grad = ImageBuffer(a.width(), a.height());
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const detail::Plane pa = detail::channel(a, c);
        const detail::Plane pb = detail::channel(b, c);
        detail::Plane g;
        if (grad) g = detail::Plane(a.width(), a.height());
        total += detail::ssim_plane(pa, pb, grad ? &g : nullptr, 1.0 / 3.0).ssim;
        if (grad)
            for (int y = 0; y < a.height(); ++y)
                for (int x = 0; x < a.width(); ++x) grad->at(x, y, c) = g(x, y);
    }
    return total / 3.0;
}

/// (1 - ssim) / 2
inline double dssim(const ImageBuffer &a, const ImageBuffer &b, ImageBuffer *grad = nullptr) {
    const double s = ssim(a, b, grad);
    if (grad)
        for (double &v : grad->data()) v *= -0.5;
    return 0.5 * (1.0 - s);
}

/// Number of dyadic scales for which the smallest side stays >= 11 px (max 5).
inline int ms_ssim_scales(int width, int height) {
    int side = std::min(width, height);
    int n = 0;
    while (n < static_cast<int>(kMsSsimWeights.size()) && side >= kSsimWindow) {
        ++n;
        side /= 2;
    }
    return n;
}

/// Multi-scale SSIM. Images too small for all five scales use the finest
/// scales that fit, with weights renormalized to sum to one. Negative
/// per-scale terms are clamped to zero so the result lies in [0, 1].
inline double ms_ssim(const ImageBuffer &a, const ImageBuffer &b) {
    require_same_shape(a, b, "ms_ssim");
    const int scales = ms_ssim_scales(a.width(), a.height());
    if (scales == 0) throw ShapeError("ms_ssim: image smaller than the 11x11 window");
    double wsum = 0.0;
    for (int s = 0; s < scales; ++s) wsum += kMsSsimWeights[s];

    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        detail::Plane pa = detail::channel(a, c);
        detail::Plane pb = detail::channel(b, c);
        double value = 1.0;
        for (int s = 0; s < scales; ++s) {
            const detail::SsimStats st = detail::ssim_plane(pa, pb, nullptr, 0.0);
            const double w = kMsSsimWeights[s] / wsum;
            const double term = (s == scales - 1) ? st.ssim : st.cs;
            value *= std::pow(std::max(0.0, term), w);
            if (s + 1 < scales) {
                pa = detail::downsample(pa);
                pb = detail::downsample(pb);
            }
        }
        total += value;
    }
    return std::clamp(total / 3.0, 0.0, 1.0);
}

inline MetricReport evaluate(const ImageBuffer &rendered, const ImageBuffer &target) {
    MetricReport r;
    r.psnr = psnr(rendered, target);
    r.ms_ssim = ms_ssim(rendered, target);
    r.l1 = l1(rendered, target);
    return r;
}

} // namespace mirage
