#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "freeatm/errors.hpp"
#include "freeatm/grid.hpp"
#include "freeatm/rng.hpp"

// Minimal CPU layers with hand-written backward passes for the toy encoder.
namespace freeatm::nn {

struct Param {
  std::vector<double> value;
  std::vector<double> grad;

  explicit Param(std::size_t n = 0) : value(n, 0.0), grad(n, 0.0) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

inline void he_init(Param& p, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : p.value) v = rng.normal() * stddev;
}

// 3x3 convolution, zero padding 1. Weights are laid out [ky][kx][in][out].
class Conv3x3 {
 public:
  Conv3x3(std::size_t in_channels, std::size_t out_channels, std::size_t stride, Rng& rng)
      : in_(in_channels), out_(out_channels), stride_(stride),
        weight_(9 * in_channels * out_channels), bias_(out_channels) {
    he_init(weight_, 9 * in_channels, rng);
  }

  std::size_t out_size(std::size_t n) const { return (n - 1) / stride_ + 1; }

  Grid<double> forward(const Grid<double>& x) const {
    require<ShapeError>(x.depth() == in_, "conv input has " + std::to_string(x.depth()) +
                                              " channels, expected " + std::to_string(in_));
    const std::size_t ho = out_size(x.height());
    const std::size_t wo = out_size(x.width());
    Grid<double> y(ho, wo, out_);
    const double* w = weight_.value.data();
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double* acc = y.pixel(oy, ox).data();
        for (std::size_t o = 0; o < out_; ++o) acc[o] = bias_.value[o];
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const long iy = static_cast<long>(oy * stride_ + ky) - 1;
          if (iy < 0 || iy >= static_cast<long>(x.height())) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const long ix = static_cast<long>(ox * stride_ + kx) - 1;
            if (ix < 0 || ix >= static_cast<long>(x.width())) continue;
            const double* in = x.pixel(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)).data();
            const double* wk = w + (ky * 3 + kx) * in_ * out_;
            for (std::size_t i = 0; i < in_; ++i) {
              const double v = in[i];
              if (v == 0.0) continue;
              const double* wi = wk + i * out_;
              for (std::size_t o = 0; o < out_; ++o) acc[o] += v * wi[o];
            }
          }
        }
      }
    }
    return y;
  }

  // Accumulates parameter gradients; returns d loss / d x.
  Grid<double> backward(const Grid<double>& x, const Grid<double>& dy) {
    Grid<double> dx(x.height(), x.width(), in_);
    const double* w = weight_.value.data();
    double* gw = weight_.grad.data();
    for (std::size_t oy = 0; oy < dy.height(); ++oy) {
      for (std::size_t ox = 0; ox < dy.width(); ++ox) {
        const double* g = dy.pixel(oy, ox).data();
        for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += g[o];
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const long iy = static_cast<long>(oy * stride_ + ky) - 1;
          if (iy < 0 || iy >= static_cast<long>(x.height())) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const long ix = static_cast<long>(ox * stride_ + kx) - 1;
            if (ix < 0 || ix >= static_cast<long>(x.width())) continue;
            const auto uy = static_cast<std::size_t>(iy);
            const auto ux = static_cast<std::size_t>(ix);
            const double* in = x.pixel(uy, ux).data();
            double* din = dx.pixel(uy, ux).data();
            const std::size_t base = (ky * 3 + kx) * in_ * out_;
            for (std::size_t i = 0; i < in_; ++i) {
              const double* wi = w + base + i * out_;
              double* gwi = gw + base + i * out_;
              const double v = in[i];
              double s = 0.0;
              for (std::size_t o = 0; o < out_; ++o) {
                gwi[o] += v * g[o];
                s += wi[o] * g[o];
              }
              din[i] += s;
            }
          }
        }
      }
    }
    return dx;
  }

  std::vector<Param*> params() { return {&weight_, &bias_}; }
  std::vector<const Param*> params() const { return {&weight_, &bias_}; }

 private:
  std::size_t in_, out_, stride_;
  Param weight_;
  Param bias_;
};

inline void relu_inplace(Grid<double>& g) {
  for (double& v : g.storage()) v = v > 0.0 ? v : 0.0;
}

// Zeroes gradient entries where the forward activation was clipped.
inline void relu_backward(const Grid<double>& activated, Grid<double>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (activated.storage()[i] <= 0.0) grad.storage()[i] = 0.0;
}

class Linear {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng) : in_(in), out_(out), weight_(in * out), bias_(out) {
    he_init(weight_, in, rng);
  }

  std::vector<double> forward(std::span<const double> x) const {
    require<ShapeError>(x.size() == in_, "linear input size mismatch");
    std::vector<double> y(bias_.value);
    for (std::size_t o = 0; o < out_; ++o) {
      const double* w = weight_.value.data() + o * in_;
      double s = 0.0;
      for (std::size_t i = 0; i < in_; ++i) s += w[i] * x[i];
      y[o] += s;
    }
    return y;
  }

  std::vector<double> backward(std::span<const double> x, std::span<const double> dy) {
    std::vector<double> dx(in_, 0.0);
    for (std::size_t o = 0; o < out_; ++o) {
      bias_.grad[o] += dy[o];
      const double* w = weight_.value.data() + o * in_;
      double* gw = weight_.grad.data() + o * in_;
      for (std::size_t i = 0; i < in_; ++i) {
        gw[i] += dy[o] * x[i];
        dx[i] += dy[o] * w[i];
      }
    }
    return dx;
  }

  std::vector<Param*> params() { return {&weight_, &bias_}; }
  std::vector<const Param*> params() const { return {&weight_, &bias_}; }

 private:
  std::size_t in_, out_;
  Param weight_;
  Param bias_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Param*>& params) {
    if (m_.empty()) {
      for (const Param* p : params) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Param& p = *params[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
        p.value[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace freeatm::nn
