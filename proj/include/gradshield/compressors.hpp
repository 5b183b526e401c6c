// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// Gradient compressors with error feedback: PowerSGD (rank-r power iteration
// with warm-started Q), Top-K magnitude sparsification, and the uncompressed
// identity baseline. Each worker owns one CompressorState.
//
// Wire format of a CompressedGradient (little-endian):
//   kind tag u8 (0 identity, 1 powersgd, 2 topk) | tensor count u32 |
//   per tensor: rows u32, cols u32, payload tag u8, payload
//     dense   (0): rows·cols f64
//     lowrank (1): rank u32, P rows·rank f64, Q cols·rank f64   (M̂ = P Qᵀ)
//     sparse  (2): nnz u32, nnz u32 indices, nnz f64 values

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gradshield/binary_io.hpp"
#include "gradshield/error.hpp"
#include "gradshield/linalg.hpp"
#include "gradshield/model.hpp"

namespace gradshield {

struct Identity {
  friend bool operator==(const Identity&, const Identity&) = default;
};

struct PowerSgd {
  std::size_t rank = 1;
  std::size_t power_iterations = 1;
  friend bool operator==(const PowerSgd&, const PowerSgd&) = default;
};

enum class TopKScope { global, per_layer };

struct TopK {
  double ratio = 1.0;
  TopKScope scope = TopKScope::global;
  friend bool operator==(const TopK&, const TopK&) = default;
};

using CompressorKind = std::variant<Identity, PowerSgd, TopK>;

inline void validate(const CompressorKind& kind) {
  if (const auto* p = std::get_if<PowerSgd>(&kind)) {
    require(p->rank >= 1, "PowerSgd: rank must be >= 1");
    require(p->power_iterations >= 1, "PowerSgd: power_iterations must be >= 1");
  } else if (const auto* t = std::get_if<TopK>(&kind)) {
    require(t->ratio > 0.0 && t->ratio <= 1.0, "TopK: ratio must lie in (0, 1]");
  }
}

inline std::string describe(const CompressorKind& kind) {
  char buf[96];
  if (std::holds_alternative<Identity>(kind)) return "identity";
  if (const auto* p = std::get_if<PowerSgd>(&kind)) {
    std::snprintf(buf, sizeof buf, "powersgd(rank=%zu,iters=%zu)", p->rank, p->power_iterations);
    return buf;
  }
  const auto& t = std::get<TopK>(kind);
  std::snprintf(buf, sizeof buf, "topk(ratio=%.9g,%s)", t.ratio, t.scope == TopKScope::global ? "global" : "per_layer");
  return buf;
}

inline std::uint8_t kind_tag(const CompressorKind& kind) { return static_cast<std::uint8_t>(kind.index()); }

// ---------------------------------------------------------------------------
// Payloads

struct DensePayload {
  Vector values;
  friend bool operator==(const DensePayload&, const DensePayload&) = default;
};
struct LowRankPayload {
  Matrix p;  // rows × r, orthonormal columns
  Matrix q;  // cols × r
  friend bool operator==(const LowRankPayload&, const LowRankPayload&) = default;
};
struct SparsePayload {
  SparseVector entries;  // indices local to the tensor, row-major
  friend bool operator==(const SparsePayload&, const SparsePayload&) = default;
};
using Payload = std::variant<DensePayload, LowRankPayload, SparsePayload>;

struct CompressedGradient {
  std::uint8_t kind = 0;
  std::vector<TensorShape> shapes;  // flatten order, (weight, bias) per layer
  std::vector<Payload> tensors;
  /// Diagnostics such as rank clamping. Not part of the wire format.
  std::vector<std::string> warnings;

  std::size_t dim() const noexcept {
    std::size_t d = 0;
    for (const auto& s : shapes) d += s.size();
    return d;
  }
  std::size_t transmitted_elements() const noexcept {
    std::size_t n = 0;
    for (const auto& t : tensors) {
      if (const auto* d = std::get_if<DensePayload>(&t)) n += d->values.size();
      else if (const auto* l = std::get_if<LowRankPayload>(&t)) n += l->p.size() + l->q.size();
      else n += std::get<SparsePayload>(t).entries.indices.size();
    }
    return n;
  }
  /// Rank used for each low-rank tensor, 0 for others.
  std::vector<std::size_t> effective_ranks() const {
    std::vector<std::size_t> out;
    for (const auto& t : tensors)
      out.push_back(std::holds_alternative<LowRankPayload>(t) ? std::get<LowRankPayload>(t).p.cols() : 0);
    return out;
  }
  friend bool operator==(const CompressedGradient& a, const CompressedGradient& b) {
    return a.kind == b.kind && a.shapes == b.shapes && a.tensors == b.tensors;
  }
};

// ---------------------------------------------------------------------------
// State

struct CompressorState {
  GradientBuffer memory;       // error-feedback accumulator e
  std::vector<Matrix> warm_q;  // per tensor; empty where the tensor is sent dense
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::size_t clamp_rank(std::size_t rank, const TensorShape& s) { return std::min({rank, s.rows, s.cols}); }

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Zero error memory; for PowerSGD, a Gaussian warm Q per matrix tensor, orthonormalized.
inline CompressorState make_state(const CompressorKind& kind, std::span<const TensorShape> shapes,
                                  std::uint64_t seed) {
  validate(kind);
  CompressorState st;
  st.memory = zeros_like_shapes<GradientBuffer>(shapes);
  st.seed = seed;
  st.warm_q.resize(shapes.size());
  if (const auto* p = std::get_if<PowerSgd>(&kind)) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t t = 0; t < shapes.size(); ++t) {
      if (!shapes[t].is_matrix()) continue;
      Matrix q(shapes[t].cols, detail::clamp_rank(p->rank, shapes[t]));
      for (double& v : q.values()) v = gauss(rng);
      st.warm_q[t] = orthonormalize(q, detail::mix_seed(seed, t)).q;
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Decompression

inline Vector decompress_flat(const CompressedGradient& c) {
  require(c.shapes.size() == c.tensors.size(), "decompress: payload count differs from shape count");
  Vector out;
  out.reserve(c.dim());
  for (std::size_t t = 0; t < c.tensors.size(); ++t) {
    const auto& s = c.shapes[t];
    if (const auto* d = std::get_if<DensePayload>(&c.tensors[t])) {
      require(d->values.size() == s.size(), "decompress: dense payload size mismatch");
      out.insert(out.end(), d->values.begin(), d->values.end());
    } else if (const auto* l = std::get_if<LowRankPayload>(&c.tensors[t])) {
      require(l->p.rows() == s.rows && l->q.rows() == s.cols && l->p.cols() == l->q.cols(),
              "decompress: low-rank factor shape mismatch");
      const Matrix m = matmul_a_bt(l->p, l->q);
      out.insert(out.end(), m.values().begin(), m.values().end());
    } else {
      const auto& sp = std::get<SparsePayload>(c.tensors[t]).entries;
      require(sp.dim == s.size(), "decompress: sparse payload dimension mismatch");
      const Vector dense = sp.to_dense();
      out.insert(out.end(), dense.begin(), dense.end());
    }
  }
  return out;
}

inline GradientBuffer decompress(const CompressedGradient& c) {
  return unflatten<GradientBuffer>(decompress_flat(c), c.shapes);
}

// ---------------------------------------------------------------------------
// Compression

namespace detail {

inline LowRankPayload power_iteration(const Matrix& a, Matrix q, std::size_t iterations, std::uint64_t reseed) {
  Matrix p_hat;
  for (std::size_t it = 0; it < iterations; ++it) {
    p_hat = orthonormalize(matmul(a, q), mix_seed(reseed, it)).q;
    q = matmul_at_b(a, p_hat);
  }
  return {std::move(p_hat), std::move(q)};
}

}  // namespace detail

/// Compresses grad + e, updates the error memory to (grad + e) − decompress(result)
/// and, for PowerSGD, carries Q to the next call.
inline CompressedGradient compress(const CompressorKind& kind, CompressorState& state, const GradientBuffer& grad) {
  validate(kind);
  const auto shapes = grad.shapes();
  require(state.memory.shapes() == shapes, "compress: state shapes differ from gradient shapes");
  require(state.warm_q.size() == shapes.size(), "compress: warm-start factors missing");

  Vector acc = flatten(grad);
  {
    const Vector e = flatten(state.memory);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e[i];
  }

  CompressedGradient c;
  c.kind = kind_tag(kind);
  c.shapes = shapes;

  if (std::holds_alternative<Identity>(kind)) {
    std::size_t pos = 0;
    for (const auto& s : shapes) {
      c.tensors.push_back(DensePayload{Vector(acc.begin() + static_cast<std::ptrdiff_t>(pos),
                                              acc.begin() + static_cast<std::ptrdiff_t>(pos + s.size()))});
      pos += s.size();
    }
  } else if (const auto* ps = std::get_if<PowerSgd>(&kind)) {
    std::size_t pos = 0;
    for (std::size_t t = 0; t < shapes.size(); ++t) {
      const auto& s = shapes[t];
      Vector block(acc.begin() + static_cast<std::ptrdiff_t>(pos), acc.begin() + static_cast<std::ptrdiff_t>(pos + s.size()));
      pos += s.size();
      if (!s.is_matrix()) {
        c.tensors.push_back(DensePayload{std::move(block)});
        continue;
      }
      const std::size_t r = detail::clamp_rank(ps->rank, s);
      if (r < ps->rank)
        c.warnings.push_back("tensor " + std::to_string(t) + ": rank " + std::to_string(ps->rank) +
                             " clamped to " + std::to_string(r));
      const Matrix a(s.rows, s.cols, std::move(block));
      Matrix& q = state.warm_q[t];
      require(q.rows() == s.cols && q.cols() == r, "compress: warm Q has wrong shape");
      auto lr = detail::power_iteration(a, q, ps->power_iterations,
                                        detail::mix_seed(state.seed, state.step * 1000003ull + t));
      q = lr.q;
      c.tensors.push_back(std::move(lr));
    }
  } else {
    const auto& tk = std::get<TopK>(kind);
    if (tk.scope == TopKScope::global) {
      const std::size_t d = acc.size();
      const auto k = std::min<std::size_t>(d, std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(tk.ratio * static_cast<double>(d)))));
      const SparseVector kept = top_k_select(acc, k);
      std::size_t pos = 0, cursor = 0;
      for (const auto& s : shapes) {
        SparseVector local{s.size(), {}, {}};
        while (cursor < kept.indices.size() && kept.indices[cursor] < pos + s.size()) {
          local.indices.push_back(kept.indices[cursor] - pos);
          local.values.push_back(kept.values[cursor]);
          ++cursor;
        }
        c.tensors.push_back(SparsePayload{std::move(local)});
        pos += s.size();
      }
    } else {
      std::size_t pos = 0;
      for (const auto& s : shapes) {
        const auto k = std::min<std::size_t>(s.size(), std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(tk.ratio * static_cast<double>(s.size())))));
        c.tensors.push_back(SparsePayload{top_k_select(std::span<const double>(acc).subspan(pos, s.size()), k)});
        pos += s.size();
      }
    }
  }

  const Vector sent = decompress_flat(c);
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] -= sent[i];
  state.memory = unflatten<GradientBuffer>(acc, shapes);
  ++state.step;
  return c;
}

// ---------------------------------------------------------------------------
// Factor-space aggregation (reference PowerSGD all-reduce)

struct AllReduceResult {
  GradientBuffer aggregate;                 // P̂ Q̄ᵀ per matrix tensor, mean of dense tensors
  std::vector<CompressedGradient> local;    // what each worker transmitted: {P̂, Q_w}
};

/// PowerSGD with factors averaged across workers before decompression:
/// P_w = A_w Q, P̂ = orth(mean P_w), Q_w = A_wᵀ P̂, Q̄ = mean Q_w, update = P̂ Q̄ᵀ.
/// Every worker's memory becomes A_w − P̂ Q̄ᵀ and every warm Q becomes Q̄.
inline AllReduceResult powersgd_allreduce(const PowerSgd& kind, std::span<CompressorState* const> states,
                                          std::span<const GradientBuffer> grads) {
  validate(kind);
  require(!states.empty() && states.size() == grads.size(), "powersgd_allreduce: worker count mismatch");
  const std::size_t N = states.size();
  const auto shapes = grads[0].shapes();
  const double inv = 1.0 / static_cast<double>(N);

  std::vector<Vector> acc(N);
  for (std::size_t w = 0; w < N; ++w) {
    require(grads[w].shapes() == shapes && states[w]->memory.shapes() == shapes, "powersgd_allreduce: shape mismatch");
    acc[w] = flatten(grads[w]);
    const Vector e = flatten(states[w]->memory);
    for (std::size_t i = 0; i < acc[w].size(); ++i) acc[w][i] += e[i];
  }

  AllReduceResult out;
  out.local.resize(N);
  for (auto& c : out.local) {
    c.kind = kind_tag(CompressorKind{kind});
    c.shapes = shapes;
  }
  Vector aggregate;
  aggregate.reserve(acc[0].size());
  std::size_t pos = 0;
  for (std::size_t t = 0; t < shapes.size(); ++t) {
    const auto& s = shapes[t];
    auto block = [&](std::size_t w) {
      return Vector(acc[w].begin() + static_cast<std::ptrdiff_t>(pos), acc[w].begin() + static_cast<std::ptrdiff_t>(pos + s.size()));
    };
    if (!s.is_matrix()) {
      Vector mean(s.size(), 0.0);
      for (std::size_t w = 0; w < N; ++w) {
        const Vector b = block(w);
        for (std::size_t i = 0; i < s.size(); ++i) mean[i] += b[i];
        out.local[w].tensors.push_back(DensePayload{b});
      }
      for (double& v : mean) v *= inv;
      aggregate.insert(aggregate.end(), mean.begin(), mean.end());
      pos += s.size();
      continue;
    }
    const std::size_t r = detail::clamp_rank(kind.rank, s);
    std::vector<Matrix> a;
    for (std::size_t w = 0; w < N; ++w) a.emplace_back(s.rows, s.cols, block(w));
    Matrix q = states[0]->warm_q[t];
    require(q.rows() == s.cols && q.cols() == r, "powersgd_allreduce: warm Q has wrong shape");
    Matrix p_hat;
    std::vector<Matrix> q_local(N);
    for (std::size_t it = 0; it < kind.power_iterations; ++it) {
      Matrix p_mean(s.rows, r);
      for (std::size_t w = 0; w < N; ++w) p_mean += matmul(a[w], q);
      for (double& v : p_mean.values()) v *= inv;
      p_hat = orthonormalize(p_mean, detail::mix_seed(states[0]->seed, states[0]->step * 1000003ull + t + it)).q;
      Matrix q_mean(s.cols, r);
      for (std::size_t w = 0; w < N; ++w) {
        q_local[w] = matmul_at_b(a[w], p_hat);
        q_mean += q_local[w];
      }
      for (double& v : q_mean.values()) v *= inv;
      q = std::move(q_mean);
    }
    const Matrix approx = matmul_a_bt(p_hat, q);
    aggregate.insert(aggregate.end(), approx.values().begin(), approx.values().end());
    for (std::size_t w = 0; w < N; ++w) {
      Matrix residual = a[w] - approx;
      std::copy(residual.values().begin(), residual.values().end(), acc[w].begin() + static_cast<std::ptrdiff_t>(pos));
      states[w]->warm_q[t] = q;
      out.local[w].tensors.push_back(LowRankPayload{p_hat, q_local[w]});
    }
    pos += s.size();
  }
  // Dense tensors carry no residual.
  pos = 0;
  for (const auto& s : shapes) {
    if (!s.is_matrix())
      for (std::size_t w = 0; w < N; ++w) std::fill_n(acc[w].begin() + static_cast<std::ptrdiff_t>(pos), s.size(), 0.0);
    pos += s.size();
  }
  for (std::size_t w = 0; w < N; ++w) {
    states[w]->memory = unflatten<GradientBuffer>(acc[w], shapes);
    ++states[w]->step;
  }
  out.aggregate = unflatten<GradientBuffer>(aggregate, shapes);
  return out;
}

// ---------------------------------------------------------------------------
// Ratios

/// Transmitted element count divided by d for one compression of a model with these tensor shapes.
inline double compression_ratio(const CompressorKind& kind, std::span<const TensorShape> shapes) {
  validate(kind);
  std::size_t d = 0;
  for (const auto& s : shapes) d += s.size();
  require(d > 0, "compression_ratio: empty shape list");
  if (std::holds_alternative<Identity>(kind)) return 1.0;
  std::size_t sent = 0;
  if (const auto* p = std::get_if<PowerSgd>(&kind)) {
    for (const auto& s : shapes)
      sent += s.is_matrix() ? detail::clamp_rank(p->rank, s) * (s.rows + s.cols) : s.size();
  } else {
    const auto& t = std::get<TopK>(kind);
    auto keep = [&](std::size_t n) {
      return std::min<std::size_t>(n, std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(t.ratio * static_cast<double>(n)))));
    };
    if (t.scope == TopKScope::global) sent = keep(d);
    else
      for (const auto& s : shapes) sent += keep(s.size());
  }
  return static_cast<double>(sent) / static_cast<double>(d);
}

/// Top-K ratio transmitting as many elements as PowerSGD at `rank` (clamped ranks,
/// 1-D tensors counted dense), capped at 1.
inline double rank_equivalent_ratio(std::span<const TensorShape> shapes, std::size_t rank) {
  require(rank >= 1, "rank_equivalent_ratio: rank must be >= 1");
  return std::min(1.0, compression_ratio(PowerSgd{rank, 1}, shapes));
}

// ---------------------------------------------------------------------------
// Wire format

inline void write_compressed(io::ByteWriter& w, const CompressedGradient& c) {
  w.u8(c.kind);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (std::size_t t = 0; t < c.tensors.size(); ++t) {
    w.u32(static_cast<std::uint32_t>(c.shapes[t].rows));
    w.u32(static_cast<std::uint32_t>(c.shapes[t].cols));
    const auto& payload = c.tensors[t];
    w.u8(static_cast<std::uint8_t>(payload.index()));
    if (const auto* d = std::get_if<DensePayload>(&payload)) {
      w.f64s(d->values);
    } else if (const auto* l = std::get_if<LowRankPayload>(&payload)) {
      w.u32(static_cast<std::uint32_t>(l->p.cols()));
      w.f64s(l->p.data());
      w.f64s(l->q.data());
    } else {
      const auto& sp = std::get<SparsePayload>(payload).entries;
      w.u32(static_cast<std::uint32_t>(sp.indices.size()));
      for (auto i : sp.indices) w.u32(static_cast<std::uint32_t>(i));
      w.f64s(sp.values);
    }
  }
}

inline CompressedGradient read_compressed(io::ByteReader& r) {
  CompressedGradient c;
  std::size_t at = r.offset();
  c.kind = r.u8("kind tag");
  if (c.kind > 2) throw ParseError("unknown compressor kind tag " + std::to_string(c.kind), at);
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    TensorShape s;
    s.rows = r.u32("rows");
    s.cols = r.u32("cols");
    at = r.offset();
    const std::uint8_t tag = r.u8("payload tag");
    if (tag == 0) {
      c.tensors.push_back(DensePayload{r.f64s(s.size(), "dense payload")});
    } else if (tag == 1) {
      const std::uint32_t rank = r.u32("rank");
      Matrix p(s.rows, rank, r.f64s(s.rows * rank, "P factor"));
      Matrix q(s.cols, rank, r.f64s(s.cols * rank, "Q factor"));
      c.tensors.push_back(LowRankPayload{std::move(p), std::move(q)});
    } else if (tag == 2) {
      const std::uint32_t nnz = r.u32("nnz");
      SparseVector sp{s.size(), {}, {}};
      for (std::uint32_t i = 0; i < nnz; ++i) {
        const std::size_t idx_at = r.offset();
        const std::uint32_t idx = r.u32("sparse index");
        if (idx >= s.size() || (!sp.indices.empty() && idx <= sp.indices.back()))
          throw ParseError("sparse index out of order or range", idx_at);
        sp.indices.push_back(idx);
      }
      sp.values = r.f64s(nnz, "sparse values");
      c.tensors.push_back(SparsePayload{std::move(sp)});
    } else {
      throw ParseError("unknown payload tag " + std::to_string(tag), at);
    }
    c.shapes.push_back(s);
  }
  return c;
}

inline std::vector<std::uint8_t> encode_compressed(const CompressedGradient& c) {
  io::ByteWriter w;
  write_compressed(w, c);
  return w.take();
}

inline CompressedGradient decode_compressed(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  CompressedGradient c = read_compressed(r);
  if (!r.done()) throw ParseError("trailing bytes after compressed gradient", r.offset());
  return c;
}

}  // namespace gradshield
