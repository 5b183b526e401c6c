// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// A small differentiable classifier: stacked Conv2d layers (stride 1, valid
// padding) followed by Dense layers, elementwise activations, and softmax
// cross-entropy. Besides the usual parameter gradient, this module implements
// the reverse pass *through* that gradient, i.e. the input gradient of a
// cosine gradient-matching loss.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gradshield/error.hpp"
#include "gradshield/linalg.hpp"

namespace gradshield {

enum class Activation { none, relu, tanh, sigmoid };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation parse_activation(const std::string& name) {
  if (name == "none") return Activation::none;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ContractViolation("unknown activation '" + name + "'");
}

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::none;
};

/// Square kernel, stride 1, no padding. Its weight is stored already reshaped
/// to out_channels × (in_channels·kernel·kernel).
struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  Activation activation = Activation::none;
};

using LayerSpec = std::variant<Dense, Conv2d>;

struct InputShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t size() const noexcept { return channels * height * width; }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

/// Shape of one parameter tensor viewed as a matrix. Bias vectors are (len × 1).
struct TensorShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
  bool is_matrix() const noexcept { return rows > 1 && cols > 1; }
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

// ---------------------------------------------------------------------------
// Per-layer linear operator

/// Geometry of a resolved layer plus the linear map z = op(W, a) it applies.
struct LayerOp {
  bool conv = false;
  Activation activation = Activation::none;
  std::size_t in_c = 0, in_h = 1, in_w = 1;
  std::size_t out_c = 0, out_h = 1, out_w = 1;
  std::size_t kernel = 1;

  std::size_t in_size() const noexcept { return in_c * in_h * in_w; }
  std::size_t out_size() const noexcept { return out_c * out_h * out_w; }
  std::size_t fan_in() const noexcept { return conv ? in_c * kernel * kernel : in_c; }
  TensorShape weight_shape() const noexcept { return {out_c, fan_in()}; }
  TensorShape bias_shape() const noexcept { return {out_c, 1}; }

  /// z = W ⊛ a (no bias).
  Vector apply(const Matrix& w, std::span<const double> a) const {
    Vector z(out_size(), 0.0);
    if (!conv) {
      for (std::size_t o = 0; o < out_c; ++o) z[o] = dot(w.row(o), a);
      return z;
    }
    const std::size_t plane = out_h * out_w;
    for (std::size_t o = 0; o < out_c; ++o) {
      for (std::size_t c = 0; c < in_c; ++c)
        for (std::size_t u = 0; u < kernel; ++u)
          for (std::size_t v = 0; v < kernel; ++v) {
            const double wv = w(o, (c * kernel + u) * kernel + v);
            if (wv == 0.0) continue;
            for (std::size_t i = 0; i < out_h; ++i) {
              const double* arow = &a[(c * in_h + i + u) * in_w + v];
              double* zrow = &z[o * plane + i * out_w];
              for (std::size_t j = 0; j < out_w; ++j) zrow[j] += wv * arow[j];
            }
          }
    }
    return z;
  }

  /// Wᵀ ⊛ δ, the adjoint of apply() with respect to its input.
  Vector apply_transpose(const Matrix& w, std::span<const double> delta) const {
    Vector g(in_size(), 0.0);
    if (!conv) {
      for (std::size_t o = 0; o < out_c; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        auto wrow = w.row(o);
        for (std::size_t i = 0; i < in_c; ++i) g[i] += wrow[i] * d;
      }
      return g;
    }
    const std::size_t plane = out_h * out_w;
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t c = 0; c < in_c; ++c)
        for (std::size_t u = 0; u < kernel; ++u)
          for (std::size_t v = 0; v < kernel; ++v) {
            const double wv = w(o, (c * kernel + u) * kernel + v);
            if (wv == 0.0) continue;
            for (std::size_t i = 0; i < out_h; ++i) {
              double* grow = &g[(c * in_h + i + u) * in_w + v];
              const double* drow = &delta[o * plane + i * out_w];
              for (std::size_t j = 0; j < out_w; ++j) grow[j] += wv * drow[j];
            }
          }
    return g;
  }

  /// gw += scale · ∂⟨δ, apply(W, a)⟩/∂W.
  void accumulate_weight_grad(std::span<const double> delta, std::span<const double> a, double scale,
                              Matrix& gw) const {
    if (!conv) {
      for (std::size_t o = 0; o < out_c; ++o) {
        const double d = scale * delta[o];
        if (d == 0.0) continue;
        auto grow = gw.row(o);
        for (std::size_t i = 0; i < in_c; ++i) grow[i] += d * a[i];
      }
      return;
    }
    const std::size_t plane = out_h * out_w;
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t c = 0; c < in_c; ++c)
        for (std::size_t u = 0; u < kernel; ++u)
          for (std::size_t v = 0; v < kernel; ++v) {
            double s = 0.0;
            for (std::size_t i = 0; i < out_h; ++i) {
              const double* arow = &a[(c * in_h + i + u) * in_w + v];
              const double* drow = &delta[o * plane + i * out_w];
              for (std::size_t j = 0; j < out_w; ++j) s += drow[j] * arow[j];
            }
            gw(o, (c * kernel + u) * kernel + v) += scale * s;
          }
  }

  /// z += broadcast(b) over spatial positions.
  void add_bias(std::span<const double> b, std::span<double> z) const {
    const std::size_t plane = out_h * out_w;
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t p = 0; p < plane; ++p) z[o * plane + p] += b[o];
  }

  /// gb += scale · Σ_spatial δ.
  void accumulate_bias_grad(std::span<const double> delta, double scale, std::span<double> gb) const {
    const std::size_t plane = out_h * out_w;
    for (std::size_t o = 0; o < out_c; ++o) {
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += delta[o * plane + p];
      gb[o] += scale * s;
    }
  }
};

// ---------------------------------------------------------------------------
// Network description

struct NetworkSpec {
  InputShape input;
  std::vector<LayerSpec> layers;
  std::size_t classes = 0;

  /// Resolves layer geometry, validating that consecutive layers fit together.
  std::vector<LayerOp> resolve() const {
    require(!layers.empty(), "NetworkSpec: at least one layer required");
    require(input.size() > 0, "NetworkSpec: empty input shape");
    std::vector<LayerOp> ops;
    std::size_t c = input.channels, h = input.height, w = input.width;
    bool flattened = false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      LayerOp op;
      if (const auto* conv = std::get_if<Conv2d>(&layers[l])) {
        require(!flattened, "NetworkSpec: Conv2d cannot follow a Dense layer");
        require(conv->in_channels == c, "NetworkSpec: layer " + std::to_string(l) + " expects " +
                                            std::to_string(conv->in_channels) + " channels, got " +
                                            std::to_string(c));
        require(conv->kernel >= 1 && conv->kernel <= h && conv->kernel <= w,
                "NetworkSpec: kernel does not fit layer " + std::to_string(l));
        require(conv->out_channels >= 1, "NetworkSpec: Conv2d needs >= 1 output channel");
        op.conv = true;
        op.activation = conv->activation;
        op.in_c = c, op.in_h = h, op.in_w = w;
        op.kernel = conv->kernel;
        op.out_c = conv->out_channels;
        op.out_h = h - conv->kernel + 1;
        op.out_w = w - conv->kernel + 1;
        c = op.out_c, h = op.out_h, w = op.out_w;
      } else {
        const auto& dense = std::get<Dense>(layers[l]);
        const std::size_t flat = c * h * w;
        require(dense.in == flat, "NetworkSpec: layer " + std::to_string(l) + " expects " +
                                      std::to_string(dense.in) + " inputs, got " + std::to_string(flat));
        require(dense.out >= 1, "NetworkSpec: Dense needs >= 1 output");
        flattened = true;
        op.activation = dense.activation;
        op.in_c = flat;
        op.out_c = dense.out;
        c = dense.out, h = 1, w = 1;
      }
      ops.push_back(op);
    }
    require(c * h * w == classes, "NetworkSpec: final layer width " + std::to_string(c * h * w) +
                                      " differs from class count " + std::to_string(classes));
    return ops;
  }

  /// Parameter tensor shapes in flatten order: weight then bias, layer by layer.
  std::vector<TensorShape> param_shapes() const {
    std::vector<TensorShape> shapes;
    for (const auto& op : resolve()) {
      shapes.push_back(op.weight_shape());
      shapes.push_back(op.bias_shape());
    }
    return shapes;
  }

  /// Dense stack in → hidden… → classes. Hidden layers use `activation`, the output none.
  static NetworkSpec mlp(InputShape input, std::vector<std::size_t> hidden, std::size_t classes,
                         Activation activation) {
    NetworkSpec spec{input, {}, classes};
    std::size_t prev = input.size();
    for (std::size_t width : hidden) {
      spec.layers.push_back(Dense{prev, width, activation});
      prev = width;
    }
    spec.layers.push_back(Dense{prev, classes, Activation::none});
    return spec;
  }

  /// One convolution (channels × kernel) flattened into a dense classifier.
  static NetworkSpec conv(InputShape input, std::size_t channels, std::size_t kernel, std::size_t classes,
                          Activation activation) {
    NetworkSpec spec{input, {}, classes};
    spec.layers.push_back(Conv2d{input.channels, channels, kernel, activation});
    const std::size_t flat = channels * (input.height - kernel + 1) * (input.width - kernel + 1);
    spec.layers.push_back(Dense{flat, classes, Activation::none});
    return spec;
  }
};

// ---------------------------------------------------------------------------
// Parameters and gradients

struct LayerTensors {
  Matrix weight;
  Vector bias;
  friend bool operator==(const LayerTensors&, const LayerTensors&) = default;
};

/// Per-layer (weight, bias) pairs with a fixed flatten order.
struct TensorList {
  std::vector<LayerTensors> layers;

  std::size_t dim() const noexcept {
    std::size_t d = 0;
    for (const auto& l : layers) d += l.weight.size() + l.bias.size();
    return d;
  }
  std::vector<TensorShape> shapes() const {
    std::vector<TensorShape> out;
    for (const auto& l : layers) {
      out.push_back({l.weight.rows(), l.weight.cols()});
      out.push_back({l.bias.size(), 1});
    }
    return out;
  }
  friend bool operator==(const TensorList&, const TensorList&) = default;
};

struct ParamSet : TensorList {};
struct GradientBuffer : TensorList {};

template <class T>
T zeros_like_shapes(std::span<const TensorShape> shapes) {
  require(shapes.size() % 2 == 0, "tensor shape list must hold (weight, bias) pairs");
  T out;
  for (std::size_t i = 0; i < shapes.size(); i += 2)
    out.layers.push_back({Matrix(shapes[i].rows, shapes[i].cols), Vector(shapes[i + 1].size(), 0.0)});
  return out;
}

inline Vector flatten(const TensorList& t) {
  Vector out;
  out.reserve(t.dim());
  for (const auto& l : t.layers) {
    out.insert(out.end(), l.weight.values().begin(), l.weight.values().end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

template <class T = GradientBuffer>
T unflatten(std::span<const double> v, std::span<const TensorShape> shapes) {
  std::size_t total = 0;
  for (const auto& s : shapes) total += s.size();
  if (total != v.size())
    throw ContractViolation("unflatten: vector has " + std::to_string(v.size()) + " entries, shapes need " +
                            std::to_string(total));
  T out = zeros_like_shapes<T>(shapes);
  std::size_t pos = 0;
  for (auto& l : out.layers) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(pos), l.weight.size(), l.weight.values().begin());
    pos += l.weight.size();
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(pos), l.bias.size(), l.bias.begin());
    pos += l.bias.size();
  }
  return out;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
inline ParamSet init_params(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet p;
  for (const auto& op : spec.resolve()) {
    const double bound = std::sqrt(1.0 / static_cast<double>(op.fan_in()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    LayerTensors l{Matrix(op.out_c, op.fan_in()), Vector(op.out_c)};
    for (double& w : l.weight.values()) w = dist(rng);
    for (double& b : l.bias) b = dist(rng);
    p.layers.push_back(std::move(l));
  }
  return p;
}

struct Example {
  Vector x;  // channels × height × width, values in [0, 1]
  std::size_t y = 0;
  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  InputShape shape;
  std::size_t classes = 0;
  std::vector<Example> examples;
  std::size_t size() const noexcept { return examples.size(); }
};

// ---------------------------------------------------------------------------
// Activations

namespace detail {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::none: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
  }
  return z;
}

// First derivative expressed through the pre-activation z and output y = φ(z).
// relu uses subgradient 0 at the kink.
inline double activate_d1(Activation a, double z, double y) {
  switch (a) {
    case Activation::none: return 1.0;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::sigmoid: return y * (1.0 - y);
  }
  return 1.0;
}

inline double activate_d2(Activation a, double /*z*/, double y) {
  switch (a) {
    case Activation::none:
    case Activation::relu: return 0.0;
    case Activation::tanh: return -2.0 * y * (1.0 - y * y);
    case Activation::sigmoid: return y * (1.0 - y) * (1.0 - 2.0 * y);
  }
  return 0.0;
}

inline Vector softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

// Activations of one forward pass: inputs[l] feeds layer l, pre[l] = z_l, post[l] = φ(z_l).
struct ForwardTrace {
  std::vector<Vector> inputs;
  std::vector<Vector> pre;
  std::vector<Vector> post;
  const Vector& logits() const { return post.back(); }
};

inline ForwardTrace forward_trace(const std::vector<LayerOp>& ops, const ParamSet& params,
                                  std::span<const double> x) {
  require(params.layers.size() == ops.size(), "forward: parameter set does not match network");
  ForwardTrace t;
  Vector a(x.begin(), x.end());
  for (std::size_t l = 0; l < ops.size(); ++l) {
    const auto& op = ops[l];
    const auto& lp = params.layers[l];
    require(lp.weight.rows() == op.out_c && lp.weight.cols() == op.fan_in() && lp.bias.size() == op.out_c,
            "forward: parameter shape mismatch at layer " + std::to_string(l));
    Vector z = op.apply(lp.weight, a);
    op.add_bias(lp.bias, z);
    Vector y(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) y[i] = activate(op.activation, z[i]);
    t.inputs.push_back(std::move(a));
    t.pre.push_back(std::move(z));
    a = y;
    t.post.push_back(std::move(y));
  }
  return t;
}

// Reverse pass of one example. Returns δ_l (= ∂L/∂z_l) and g_out[l] (= ∂L/∂φ(z_l)).
struct BackwardTrace {
  std::vector<Vector> delta;
  std::vector<Vector> grad_out;
};

inline BackwardTrace backward_trace(const std::vector<LayerOp>& ops, const ParamSet& params,
                                    const ForwardTrace& fwd, std::size_t label) {
  const std::size_t L = ops.size();
  BackwardTrace b;
  b.delta.resize(L);
  b.grad_out.resize(L);
  Vector g = softmax(fwd.logits());
  g[label] -= 1.0;
  for (std::size_t l = L; l-- > 0;) {
    const auto& op = ops[l];
    Vector d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      d[i] = activate_d1(op.activation, fwd.pre[l][i], fwd.post[l][i]) * g[i];
    b.grad_out[l] = std::move(g);
    if (l > 0) g = op.apply_transpose(params.layers[l].weight, d);
    b.delta[l] = std::move(d);
  }
  return b;
}

inline void check_input(const NetworkSpec& spec, std::span<const double> x) {
  if (x.size() != spec.input.size())
    throw ContractViolation("input has " + std::to_string(x.size()) + " values, network expects " +
                            std::to_string(spec.input.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

inline Vector forward(const NetworkSpec& spec, const ParamSet& params, std::span<const double> x) {
  detail::check_input(spec, x);
  return detail::forward_trace(spec.resolve(), params, x).logits();
}

/// Softmax cross-entropy −log softmax(logits)[y], stabilized by max subtraction.
inline double loss(std::span<const double> logits, std::size_t y) {
  require(y < logits.size(), "loss: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  return mx + std::log(s) - logits[y];
}

inline Vector softmax(std::span<const double> logits) { return detail::softmax(logits); }

/// Mean over the batch of ∂L/∂θ.
inline GradientBuffer param_gradient(const NetworkSpec& spec, const ParamSet& params,
                                     std::span<const Example> batch, double* mean_loss = nullptr) {
  require(!batch.empty(), "param_gradient: empty batch");
  const auto ops = spec.resolve();
  GradientBuffer g = zeros_like_shapes<GradientBuffer>(spec.param_shapes());
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total_loss = 0.0;
  for (const auto& ex : batch) {
    detail::check_input(spec, ex.x);
    require(ex.y < spec.classes, "param_gradient: label out of range");
    const auto fwd = detail::forward_trace(ops, params, ex.x);
    total_loss += loss(fwd.logits(), ex.y);
    const auto bwd = detail::backward_trace(ops, params, fwd, ex.y);
    for (std::size_t l = 0; l < ops.size(); ++l) {
      ops[l].accumulate_weight_grad(bwd.delta[l], fwd.inputs[l], scale, g.layers[l].weight);
      ops[l].accumulate_bias_grad(bwd.delta[l], scale, g.layers[l].bias);
    }
  }
  if (mean_loss) *mean_loss = total_loss * scale;
  return g;
}

// ---------------------------------------------------------------------------
// Gradient matching

/// Orthogonal projection applied to a candidate gradient before it is compared
/// with the target. Used by the compression-aware attack variant; an empty
/// projection means identity.
struct GradientProjection {
  /// Per-tensor (flatten order) left projector basis: n × r with orthonormal
  /// columns, applied as P Pᵀ M. An empty matrix leaves the tensor unchanged.
  std::vector<Matrix> left_bases;
  /// Per-tensor coordinate mask; empty means keep all entries.
  std::vector<std::vector<std::uint8_t>> masks;

  bool empty() const noexcept { return left_bases.empty() && masks.empty(); }

  /// Applies in place to a flattened gradient laid out by `shapes`.
  void apply(std::span<double> g, std::span<const TensorShape> shapes) const {
    std::size_t pos = 0;
    for (std::size_t t = 0; t < shapes.size(); ++t) {
      const auto& s = shapes[t];
      std::span<double> block = g.subspan(pos, s.size());
      if (t < masks.size() && !masks[t].empty())
        for (std::size_t i = 0; i < block.size(); ++i)
          if (!masks[t][i]) block[i] = 0.0;
      if (t < left_bases.size() && left_bases[t].size() > 0) {
        const Matrix m(s.rows, s.cols, Vector(block.begin(), block.end()));
        const Matrix& p = left_bases[t];
        const Matrix proj = matmul(p, matmul_at_b(p, m));
        std::copy(proj.values().begin(), proj.values().end(), block.begin());
      }
      pos += s.size();
    }
  }
};

struct ReconEvaluation {
  double loss = 0.0;
  double cosine = 0.0;
  /// One entry per candidate input; empty unless gradients were requested.
  std::vector<Vector> input_gradients;
};

/// 1 − cos(∇θ L(xs, ys), target) for a candidate batch, optionally with the
/// exact gradient with respect to every candidate input (second-order reverse pass).
inline ReconEvaluation evaluate_recon(const NetworkSpec& spec, const ParamSet& params,
                                      std::span<const Vector> xs, std::span<const std::size_t> ys,
                                      std::span<const double> target, bool want_gradient,
                                      const GradientProjection* projection = nullptr) {
  require(!xs.empty() && xs.size() == ys.size(), "recon: candidate/label count mismatch");
  const auto ops = spec.resolve();
  const auto shapes = spec.param_shapes();
  std::size_t d = 0;
  for (const auto& s : shapes) d += s.size();
  require(target.size() == d, "recon: target gradient dimension " + std::to_string(target.size()) +
                                  " differs from parameter count " + std::to_string(d));
  const double target_norm = norm(target);
  require(target_norm > 0.0, "recon: target gradient is zero");

  const std::size_t L = ops.size();
  const std::size_t B = xs.size();
  const double scale = 1.0 / static_cast<double>(B);

  std::vector<detail::ForwardTrace> fwd;
  std::vector<detail::BackwardTrace> bwd;
  fwd.reserve(B);
  bwd.reserve(B);
  GradientBuffer g = zeros_like_shapes<GradientBuffer>(shapes);
  for (std::size_t b = 0; b < B; ++b) {
    detail::check_input(spec, xs[b]);
    require(ys[b] < spec.classes, "recon: label out of range");
    fwd.push_back(detail::forward_trace(ops, params, xs[b]));
    bwd.push_back(detail::backward_trace(ops, params, fwd.back(), ys[b]));
    for (std::size_t l = 0; l < L; ++l) {
      ops[l].accumulate_weight_grad(bwd[b].delta[l], fwd[b].inputs[l], scale, g.layers[l].weight);
      ops[l].accumulate_bias_grad(bwd[b].delta[l], scale, g.layers[l].bias);
    }
  }
  Vector flat = flatten(g);
  if (projection && !projection->empty()) projection->apply(flat, shapes);
  const double gnorm = norm(flat);
  if (gnorm == 0.0) throw UndefinedSimilarity("recon: candidate gradient is zero");
  const double inner = dot(flat, target);
  const double cosine = inner / (gnorm * target_norm);

  ReconEvaluation result;
  result.cosine = cosine;
  result.loss = 1.0 - cosine;
  if (!want_gradient) return result;

  // ∂R/∂G for R = 1 − <G,T>/(|G||T|).
  Vector gbar(d);
  for (std::size_t i = 0; i < d; ++i)
    gbar[i] = -(target[i] / (gnorm * target_norm) - cosine * flat[i] / (gnorm * gnorm));
  if (projection && !projection->empty()) projection->apply(gbar, shapes);
  const GradientBuffer gb = unflatten<GradientBuffer>(gbar, shapes);

  result.input_gradients.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& F = fwd[b];
    const auto& K = bwd[b];
    std::vector<Vector> abar(L + 1);  // adjoint of inputs[l] (abar[L] = adjoint of logits)
    std::vector<Vector> zbar(L);
    for (std::size_t l = 0; l <= L; ++l) abar[l].assign(l < L ? F.inputs[l].size() : F.logits().size(), 0.0);
    for (std::size_t l = 0; l < L; ++l) zbar[l].assign(F.pre[l].size(), 0.0);

    // Reverse through the gradient computation, layer 0 upward.
    Vector grad_out_bar;  // adjoint of grad_out[l-1], produced by layer l-1
    for (std::size_t l = 0; l < L; ++l) {
      const auto& op = ops[l];
      const auto& W = params.layers[l].weight;
      // δ_l feeds gW_l, gb_l and (for l > 0) grad_out[l-1] = Wᵀ δ_l.
      Vector dbar = op.apply(gb.layers[l].weight, F.inputs[l]);
      for (double& v : dbar) v *= scale;
      Vector bias_bar(gb.layers[l].bias);
      for (double& v : bias_bar) v *= scale;
      op.add_bias(bias_bar, dbar);
      if (l > 0) {
        const Vector back = op.apply(W, grad_out_bar);
        for (std::size_t i = 0; i < dbar.size(); ++i) dbar[i] += back[i];
      }
      const Vector in_bar = op.apply_transpose(gb.layers[l].weight, K.delta[l]);
      for (std::size_t i = 0; i < in_bar.size(); ++i) abar[l][i] += scale * in_bar[i];
      // δ_l = φ'(z_l) ⊙ grad_out[l].
      grad_out_bar.assign(dbar.size(), 0.0);
      for (std::size_t i = 0; i < dbar.size(); ++i) {
        const double z = F.pre[l][i], y = F.post[l][i];
        grad_out_bar[i] = detail::activate_d1(op.activation, z, y) * dbar[i];
        zbar[l][i] += detail::activate_d2(op.activation, z, y) * K.grad_out[l][i] * dbar[i];
      }
    }
    // grad_out[L-1] = softmax(logits) − onehot(y).
    {
      const Vector p = detail::softmax(F.logits());
      const double pg = dot(p, grad_out_bar);
      for (std::size_t i = 0; i < p.size(); ++i) abar[L][i] += p[i] * (grad_out_bar[i] - pg);
    }
    // Reverse through the forward pass.
    for (std::size_t l = L; l-- > 0;) {
      const auto& op = ops[l];
      for (std::size_t i = 0; i < zbar[l].size(); ++i)
        zbar[l][i] += detail::activate_d1(op.activation, F.pre[l][i], F.post[l][i]) * abar[l + 1][i];
      const Vector back = op.apply_transpose(params.layers[l].weight, zbar[l]);
      for (std::size_t i = 0; i < back.size(); ++i) abar[l][i] += back[i];
    }
    result.input_gradients.push_back(std::move(abar[0]));
  }
  return result;
}

/// 1 − cos(∇θ L(x, y; θ), g_target), in [0, 2].
inline double recon_loss(const NetworkSpec& spec, const ParamSet& params, std::span<const double> x,
                         std::size_t y, std::span<const double> g_target) {
  const Vector xs[1] = {Vector(x.begin(), x.end())};
  const std::size_t ys[1] = {y};
  return evaluate_recon(spec, params, xs, ys, g_target, false).loss;
}

/// ∂/∂x of recon_loss, computed by reverse-mode differentiation through the
/// parameter-gradient computation. relu contributes subgradient 0 at its kink.
inline Vector recon_loss_input_gradient(const NetworkSpec& spec, const ParamSet& params,
                                        std::span<const double> x, std::size_t y,
                                        std::span<const double> g_target) {
  const Vector xs[1] = {Vector(x.begin(), x.end())};
  const std::size_t ys[1] = {y};
  return std::move(evaluate_recon(spec, params, xs, ys, g_target, true).input_gradients.front());
}

}  // namespace gradshield
