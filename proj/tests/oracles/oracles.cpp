#include "oracles.hpp"

#include <cmath>
#include <numbers>

namespace rmx::oracle {

void direct_dft2(const Vec& x, std::int64_t planes, std::int64_t h, std::int64_t w, Vec& re, Vec& im) {
  re.assign(x.size(), 0.0);
  im.assign(x.size(), 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t u = 0; u < h; ++u)
      for (std::int64_t v = 0; v < w; ++v) {
        double sr = 0.0, si = 0.0;
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t xx = 0; xx < w; ++xx) {
            const double ang = -two_pi * (static_cast<double>(u * y) / static_cast<double>(h) +
                                          static_cast<double>(v * xx) / static_cast<double>(w));
            const double val = x[static_cast<std::size_t>((p * h + y) * w + xx)];
            sr += val * std::cos(ang);
            si += val * std::sin(ang);
          }
        re[static_cast<std::size_t>((p * h + u) * w + v)] = sr;
        im[static_cast<std::size_t>((p * h + u) * w + v)] = si;
      }
}

Vec direct_conv2d(const Vec& x, const Vec& wt, const Vec* bias, std::int64_t n, std::int64_t ci, std::int64_t h,
                  std::int64_t w, std::int64_t co, int k, int stride, int pad) {
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  Vec out(static_cast<std::size_t>(n * co * ho * wo), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t y = 0; y < ho; ++y)
        for (std::int64_t xx = 0; xx < wo; ++xx) {
          double s = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
          for (std::int64_t i = 0; i < ci; ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const std::int64_t sy = y * stride + ky - pad, sx = xx * stride + kx - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                s += x[static_cast<std::size_t>(((b * ci + i) * h + sy) * w + sx)] *
                     wt[static_cast<std::size_t>(((o * ci + i) * k + ky) * k + kx)];
              }
          out[static_cast<std::size_t>(((b * co + o) * ho + y) * wo + xx)] = s;
        }
  return out;
}

Vec naive_attention(const Vec& q, const Vec& k, const Vec& v, std::int64_t b, std::int64_t t, std::int64_t c,
                    std::int64_t heads) {
  const std::int64_t d = c / heads;
  Vec out(q.size(), 0.0);
  auto at = [&](const Vec& m, std::int64_t bb, std::int64_t tt, std::int64_t cc) {
    return m[static_cast<std::size_t>((bb * t + tt) * c + cc)];
  };
  for (std::int64_t bb = 0; bb < b; ++bb)
    for (std::int64_t hd = 0; hd < heads; ++hd)
      for (std::int64_t i = 0; i < t; ++i) {
        Vec s(static_cast<std::size_t>(t));
        double mx = -1e300;
        for (std::int64_t j = 0; j < t; ++j) {
          double dot = 0.0;
          for (std::int64_t e = 0; e < d; ++e) dot += at(q, bb, i, hd * d + e) * at(k, bb, j, hd * d + e);
          s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, s[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::int64_t e = 0; e < d; ++e) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < t; ++j) acc += s[static_cast<std::size_t>(j)] / z * at(v, bb, j, hd * d + e);
          out[static_cast<std::size_t>((bb * t + i) * c + hd * d + e)] = acc;
        }
      }
  return out;
}

Vec lti_recurrence(const Vec& x, const Vec& a_bar, const Vec& b_bar, const Vec& cmat, std::int64_t len,
                   std::int64_t ch, std::int64_t n) {
  Vec y(static_cast<std::size_t>(len * ch), 0.0);
  for (std::int64_t c = 0; c < ch; ++c) {
    Vec h(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t t = 0; t < len; ++t) {
      double acc = 0.0;
      for (std::int64_t s = 0; s < n; ++s) {
        const auto i = static_cast<std::size_t>(c * n + s);
        h[static_cast<std::size_t>(s)] =
            a_bar[i] * h[static_cast<std::size_t>(s)] + b_bar[i] * x[static_cast<std::size_t>(t * ch + c)];
        acc += cmat[i] * h[static_cast<std::size_t>(s)];
      }
      y[static_cast<std::size_t>(t * ch + c)] = acc;
    }
  }
  return y;
}

Vec selective_recurrence(const Vec& u, const Vec& delta, const Vec& a, const Vec& b, const Vec& c, const Vec& d,
                         std::int64_t ch, std::int64_t len, std::int64_t n) {
  Vec y(static_cast<std::size_t>(ch * len), 0.0);
  for (std::int64_t k = 0; k < ch; ++k) {
    Vec h(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t t = 0; t < len; ++t) {
      const double dt = delta[static_cast<std::size_t>(k * len + t)], ut = u[static_cast<std::size_t>(k * len + t)];
      double acc = d[static_cast<std::size_t>(k)] * ut;
      for (std::int64_t s = 0; s < n; ++s) {
        auto& hs = h[static_cast<std::size_t>(s)];
        hs = std::exp(dt * a[static_cast<std::size_t>(k * n + s)]) * hs + dt * b[static_cast<std::size_t>(s * len + t)] * ut;
        acc += c[static_cast<std::size_t>(s * len + t)] * hs;
      }
      y[static_cast<std::size_t>(k * len + t)] = acc;
    }
  }
  return y;
}

Vec adam_scalar(double p0, const Vec& grads, double lr, double b1, double b2, double eps) {
  Vec trace;
  double p = p0, m = 0.0, v = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const double g = grads[i];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, static_cast<double>(i + 1)));
    const double vh = v / (1 - std::pow(b2, static_cast<double>(i + 1)));
    p -= lr * mh / (std::sqrt(vh) + eps);
    trace.push_back(p);
  }
  return trace;
}

double mean_abs_diff(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace rmx::oracle

namespace rmx::oracle {

double direct_ssim(const Vec& x, const Vec& y, std::int64_t h, std::int64_t w, std::int64_t win, double sigma,
                   double c1, double c2) {
  Vec k(static_cast<std::size_t>(win * win));
  double ks = 0.0;
  for (std::int64_t i = 0; i < win; ++i)
    for (std::int64_t j = 0; j < win; ++j) {
      const double di = static_cast<double>(i - win / 2), dj = static_cast<double>(j - win / 2);
      k[i * win + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      ks += k[i * win + j];
    }
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t r = 0; r + win <= h; ++r)
    for (std::int64_t c = 0; c + win <= w; ++c) {
      double mx = 0, my = 0;
      for (std::int64_t i = 0; i < win; ++i)
        for (std::int64_t j = 0; j < win; ++j) {
          const double wt = k[i * win + j] / ks;
          mx += wt * x[(r + i) * w + c + j];
          my += wt * y[(r + i) * w + c + j];
        }
      double vx = 0, vy = 0, cxy = 0;
      for (std::int64_t i = 0; i < win; ++i)
        for (std::int64_t j = 0; j < win; ++j) {
          const double wt = k[i * win + j] / ks;
          const double dx = x[(r + i) * w + c + j] - mx, dy = y[(r + i) * w + c + j] - my;
          vx += wt * dx * dx;
          vy += wt * dy * dy;
          cxy += wt * dx * dy;
        }
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace rmx::oracle
