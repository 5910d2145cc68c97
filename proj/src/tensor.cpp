#include "clipdesk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "clipdesk/errors.hpp"
#include "clipdesk/rng.hpp"
#include "clipdesk/simd/kernels.hpp"

namespace clipdesk {

namespace {

constexpr double kNormEpsilon = 1e-12;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) throw ContractError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (std::size_t dim : shape) {
    if (dim == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (data.size() != product(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_string(shape));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1, 1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const noexcept {
  return shape.size() >= 2 ? shape[0] : 1;
}

std::size_t Tensor::cols() const noexcept {
  if (shape.empty()) return 0;
  return shape.size() >= 2 ? data.size() / shape[0] : shape[0];
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

void zero_grads(std::span<Tensor* const> tensors) {
  for (Tensor* t : tensors) t->zero_grad();
}

// ---------------------------------------------------------------------------
// Tape bookkeeping

Var Tape::leaf(Tensor& tensor) {
  Slot slot;
  slot.view = &tensor;
  slot.target = &tensor;
  slot.needs_grad = tensor.requires_grad;
  slots_.push_back(std::move(slot));
  return Var{this, static_cast<std::uint32_t>(slots_.size() - 1)};
}

Var Tape::input(const Tensor& tensor) {
  Slot slot;
  slot.view = &tensor;
  slots_.push_back(std::move(slot));
  return Var{this, static_cast<std::uint32_t>(slots_.size() - 1)};
}

Var Tape::constant(Tensor tensor) {
  tensor.requires_grad = false;
  tensor.grad.clear();
  Slot slot;
  slot.owned = std::move(tensor);
  slots_.push_back(std::move(slot));
  return Var{this, static_cast<std::uint32_t>(slots_.size() - 1)};
}

std::uint32_t Tape::check(Var v) const {
  if (v.tape != this) throw TapeError("value is not recorded on this tape");
  if (v.id >= slots_.size()) throw TapeError("stale tape handle");
  return v.id;
}

const Tensor& Tape::at(std::uint32_t id) const {
  const Slot& s = slots_[id];
  return s.view ? *s.view : s.owned;
}

const Tensor& Tape::value(Var v) const { return at(check(v)); }

Var Tape::record(Op op, Tensor out, std::uint32_t in0, std::uint32_t in1,
                 std::vector<std::size_t> aux, double factor) {
  if (consumed_) throw TapeError("tape already ran backward");
  Slot slot;
  slot.owned = std::move(out);
  slot.needs_grad = slots_[in0].needs_grad || slots_[in1].needs_grad;
  slots_.push_back(std::move(slot));
  const auto out_id = static_cast<std::uint32_t>(slots_.size() - 1);
  nodes_.push_back(Node{op, in0, in1, out_id, std::move(aux), factor, {}});
  return Var{this, out_id};
}

// ---------------------------------------------------------------------------
// Forward rules

Var Tape::matmul(Var va, Var vb) {
  const auto ia = check(va), ib = check(vb);
  const Tensor& a = at(ia);
  const Tensor& b = at(ib);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (k != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(a.shape) + " and " +
                     shape_string(b.shape));
  }
  Tensor c = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.row(i);
    const double* arow = a.row(i);
    for (std::size_t kk = 0; kk < k; ++kk) simd::axpy(arow[kk], b.row(kk), crow, n);
  }
  return record(Op::kMatmul, std::move(c), ia, ib);
}

Var Tape::transpose(Var vx) {
  const auto ix = check(vx);
  const Tensor& x = at(ix);
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
  }
  return record(Op::kTranspose, std::move(out), ix, ix);
}

Var Tape::relu(Var vx) {
  const auto ix = check(vx);
  Tensor out = at(ix);
  out.grad.clear();
  out.requires_grad = false;
  for (double& v : out.data) v = v < 0.0 ? 0.0 : v;  // NaN passes through
  return record(Op::kRelu, std::move(out), ix, ix);
}

Var Tape::exp(Var vx) {
  const auto ix = check(vx);
  Tensor out = at(ix);
  out.grad.clear();
  out.requires_grad = false;
  for (double& v : out.data) v = std::exp(v);
  return record(Op::kExp, std::move(out), ix, ix);
}

Var Tape::add(Var va, Var vb) {
  const auto ia = check(va), ib = check(vb);
  const Tensor& a = at(ia);
  const Tensor& b = at(ib);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add: shapes differ, " + shape_string(a.shape) + " vs " +
                     shape_string(b.shape));
  }
  Tensor out = Tensor::zeros({a.rows(), a.cols()});
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return record(Op::kAdd, std::move(out), ia, ib);
}

Var Tape::add_row_broadcast(Var vx, Var vrow) {
  const auto ix = check(vx), ir = check(vrow);
  const Tensor& x = at(ix);
  const Tensor& r = at(ir);
  if (r.rows() != 1 || r.cols() != x.cols()) {
    throw ShapeError("add_row_broadcast: cannot broadcast " + shape_string(r.shape) + " over " +
                     shape_string(x.shape));
  }
  Tensor out = Tensor::zeros({x.rows(), x.cols()});
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + r.data[j];
  }
  return record(Op::kAddRow, std::move(out), ix, ir);
}

Var Tape::mean_pool_rows(Var vx) {
  const std::size_t m = value(vx).rows();
  return segment_mean_rows(vx, {m});
}

Var Tape::segment_mean_rows(Var vx, std::vector<std::size_t> lengths) {
  const auto ix = check(vx);
  const Tensor& x = at(ix);
  std::size_t total = 0;
  for (std::size_t len : lengths) {
    if (len == 0) throw ShapeError("segment_mean_rows: empty segment");
    total += len;
  }
  if (lengths.empty() || total != x.rows()) {
    throw ShapeError("segment_mean_rows: segment lengths sum to " + std::to_string(total) +
                     " but input is " + shape_string(x.shape));
  }
  const std::size_t n = x.cols();
  Tensor out = Tensor::zeros({lengths.size(), n});
  std::size_t r = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    double* orow = out.row(s);
    for (std::size_t k = 0; k < lengths[s]; ++k, ++r) {
      const double* xrow = x.row(r);
      for (std::size_t j = 0; j < n; ++j) orow[j] += xrow[j];
    }
    const double len = static_cast<double>(lengths[s]);
    for (std::size_t j = 0; j < n; ++j) orow[j] /= len;
  }
  return record(Op::kSegmentMean, std::move(out), ix, ix, std::move(lengths));
}

Var Tape::scale_by_scalar_param(Var vx, Var vs) {
  const auto ix = check(vx), is = check(vs);
  const Tensor& x = at(ix);
  const Tensor& s = at(is);
  if (s.size() != 1) {
    throw ShapeError("scale_by_scalar_param: scale must be 1x1, got " + shape_string(s.shape));
  }
  Tensor out = Tensor::zeros({x.rows(), x.cols()});
  const double f = s.data[0];
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] * f;
  return record(Op::kScaleParam, std::move(out), ix, is);
}

Var Tape::scale(Var vx, double factor) {
  const auto ix = check(vx);
  const Tensor& x = at(ix);
  Tensor out = Tensor::zeros({x.rows(), x.cols()});
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] * factor;
  return record(Op::kScale, std::move(out), ix, ix, {}, factor);
}

Var Tape::embedding_lookup(Var vtable, std::vector<std::size_t> ids) {
  const auto it = check(vtable);
  const Tensor& table = at(it);
  if (ids.empty()) throw EmptyInputError("embedding_lookup: no ids");
  const std::size_t vocab = table.rows(), d = table.cols();
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw OutOfRangeError("embedding_lookup: id " + std::to_string(ids[i]) +
                                " outside table of " + std::to_string(vocab) + " rows",
                            static_cast<std::int64_t>(ids[i]));
    }
    std::copy_n(table.row(ids[i]), d, out.row(i));
  }
  return record(Op::kLookup, std::move(out), it, it, std::move(ids));
}

Var Tape::l2_normalize_rows(Var vx) {
  const auto ix = check(vx);
  const Tensor& x = at(ix);
  const std::size_t n = x.cols();
  Tensor out = Tensor::zeros({x.rows(), n});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double norm = std::sqrt(simd::dot(x.row(i), x.row(i), n));
    if (!(norm > kNormEpsilon)) {
      throw DegenerateVectorError("l2_normalize_rows: row " + std::to_string(i) +
                                      " has norm " + std::to_string(norm),
                                  i);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) / norm;
  }
  return record(Op::kNormalize, std::move(out), ix, ix);
}

Var Tape::log_softmax_rows(Var vx) {
  const auto ix = check(vx);
  const Tensor& x = at(ix);
  require_finite(x, "log_softmax_rows");
  const std::size_t n = x.cols();
  Tensor out = Tensor::zeros({x.rows(), n});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xrow = x.row(i);
    const double peak = *std::max_element(xrow, xrow + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(xrow[j] - peak);
    const double log_total = std::log(total);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = xrow[j] - peak - log_total;
  }
  return record(Op::kLogSoftmax, std::move(out), ix, ix);
}

Var Tape::mean_nll(Var vlp, std::vector<std::size_t> targets) {
  const auto ix = check(vlp);
  const Tensor& lp = at(ix);
  if (targets.size() != lp.rows()) {
    throw ShapeError("mean_nll: " + std::to_string(targets.size()) + " targets for " +
                     shape_string(lp.shape));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= lp.cols()) {
      throw OutOfRangeError("mean_nll: target " + std::to_string(targets[i]) + " out of range",
                            static_cast<std::int64_t>(targets[i]));
    }
    total += lp.at(i, targets[i]);
  }
  const double m = static_cast<double>(targets.size());
  return record(Op::kMeanNll, Tensor::scalar(-total / m), ix, ix, std::move(targets));
}

Var Tape::weighted_nll(Var vlp, std::vector<std::size_t> targets, std::vector<double> weights) {
  const auto ix = check(vlp);
  const Tensor& lp = at(ix);
  if (targets.size() != lp.rows() || weights.size() != lp.rows()) {
    throw ShapeError("weighted_nll: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(weights.size()) + " weights for " + shape_string(lp.shape));
  }
  double wsum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= lp.cols()) {
      throw OutOfRangeError("weighted_nll: target " + std::to_string(targets[i]) + " out of range",
                            static_cast<std::int64_t>(targets[i]));
    }
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) {
      throw ContractError("weighted_nll: weights must be finite and non-negative");
    }
    wsum += weights[i];
  }
  if (!(wsum > 0.0)) throw ContractError("weighted_nll: weights sum to zero");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    weights[i] /= wsum;
    total += weights[i] * lp.at(i, targets[i]);
  }
  const Var out = record(Op::kWeightedNll, Tensor::scalar(-total), ix, ix, std::move(targets));
  nodes_.back().coef = std::move(weights);
  return out;
}

Var Tape::sum(Var vx) {
  const auto ix = check(vx);
  const Tensor& x = at(ix);
  double total = 0.0;
  for (double v : x.data) total += v;
  return record(Op::kSum, Tensor::scalar(total), ix, ix);
}

Var Tape::sum_squares(Var vx) {
  const auto ix = check(vx);
  const Tensor& x = at(ix);
  double total = 0.0;
  for (double v : x.data) total += v * v;
  return record(Op::kSumSquares, Tensor::scalar(total), ix, ix);
}

// ---------------------------------------------------------------------------
// Backward

void Tape::backward(Var loss) {
  const auto il = check(loss);
  if (consumed_) throw TapeError("backward already ran on this tape; record a new tape");
  if (at(il).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(at(il).shape));
  }
  consumed_ = true;

  std::vector<std::vector<double>> grads(slots_.size());
  grads[il].assign(1, 1.0);
  for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
    if (node->out > il || grads[node->out].empty()) continue;
    if (!slots_[node->out].needs_grad) continue;
    backprop(*node, grads);
  }

  for (std::size_t id = 0; id < slots_.size(); ++id) {
    Slot& s = slots_[id];
    if (!s.target || !s.target->requires_grad) continue;
    Tensor& leaf = *s.target;
    if (leaf.grad.size() != leaf.data.size()) leaf.grad.assign(leaf.data.size(), 0.0);
    if (grads[id].empty()) continue;
    for (std::size_t i = 0; i < leaf.grad.size(); ++i) leaf.grad[i] += grads[id][i];
  }
}

void Tape::backprop(const Node& node, std::vector<std::vector<double>>& grads) {
  const std::vector<double>& g = grads[node.out];
  const Tensor& out = at(node.out);
  const Tensor& x = at(node.in0);
  const Tensor& y = at(node.in1);

  auto wants = [&](std::uint32_t id) { return slots_[id].needs_grad; };
  auto sink = [&](std::uint32_t id) -> std::vector<double>& {
    auto& buf = grads[id];
    if (buf.empty()) buf.assign(at(id).size(), 0.0);
    return buf;
  };

  switch (node.op) {
    case Op::kMatmul: {
      const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
      if (wants(node.in0)) {
        auto& da = sink(node.in0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            da[i * k + kk] += simd::dot(g.data() + i * n, y.row(kk), n);
          }
        }
      }
      if (wants(node.in1)) {
        auto& db = sink(node.in1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            simd::axpy(x.at(i, kk), g.data() + i * n, db.data() + kk * n, n);
          }
        }
      }
      break;
    }
    case Op::kTranspose: {
      auto& dx = sink(node.in0);
      const std::size_t m = x.rows(), n = x.cols();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[j * m + i];
      }
      break;
    }
    case Op::kRelu: {
      auto& dx = sink(node.in0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x.data[i] > 0.0) dx[i] += g[i];
      }
      break;
    }
    case Op::kExp: {
      auto& dx = sink(node.in0);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * out.data[i];
      break;
    }
    case Op::kAdd: {
      for (std::uint32_t id : {node.in0, node.in1}) {
        if (!wants(id)) continue;
        auto& d = sink(id);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      break;
    }
    case Op::kAddRow: {
      const std::size_t n = x.cols();
      if (wants(node.in0)) {
        auto& dx = sink(node.in0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (wants(node.in1)) {
        auto& dr = sink(node.in1);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          for (std::size_t j = 0; j < n; ++j) dr[j] += g[i * n + j];
        }
      }
      break;
    }
    case Op::kSegmentMean: {
      auto& dx = sink(node.in0);
      const std::size_t n = x.cols();
      std::size_t r = 0;
      for (std::size_t s = 0; s < node.aux.size(); ++s) {
        const double share = 1.0 / static_cast<double>(node.aux[s]);
        for (std::size_t k = 0; k < node.aux[s]; ++k, ++r) {
          for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += g[s * n + j] * share;
        }
      }
      break;
    }
    case Op::kScaleParam: {
      const double f = y.data[0];
      if (wants(node.in0)) {
        auto& dx = sink(node.in0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * f;
      }
      if (wants(node.in1)) {
        double total = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) total += x.data[i] * g[i];
        sink(node.in1)[0] += total;
      }
      break;
    }
    case Op::kScale: {
      auto& dx = sink(node.in0);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * node.factor;
      break;
    }
    case Op::kLookup: {
      auto& dt = sink(node.in0);
      const std::size_t d = x.cols();
      for (std::size_t i = 0; i < node.aux.size(); ++i) {
        const std::size_t base = node.aux[i] * d;
        for (std::size_t j = 0; j < d; ++j) dt[base + j] += g[i * d + j];
      }
      break;
    }
    case Op::kNormalize: {
      // d/dx of x/|x| applied to g: (g - u (u.g)) / |x|
      auto& dx = sink(node.in0);
      const std::size_t n = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double norm = std::sqrt(simd::dot(x.row(i), x.row(i), n));
        const double* u = out.row(i);
        const double* gi = g.data() + i * n;
        const double ug = simd::dot(u, gi, n);
        for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += (gi[j] - u[j] * ug) / norm;
      }
      break;
    }
    case Op::kLogSoftmax: {
      auto& dx = sink(node.in0);
      const std::size_t n = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* gi = g.data() + i * n;
        double gsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) gsum += gi[j];
        for (std::size_t j = 0; j < n; ++j) {
          dx[i * n + j] += gi[j] - std::exp(out.at(i, j)) * gsum;
        }
      }
      break;
    }
    case Op::kMeanNll: {
      auto& dx = sink(node.in0);
      const double share = -g[0] / static_cast<double>(node.aux.size());
      for (std::size_t i = 0; i < node.aux.size(); ++i) dx[i * x.cols() + node.aux[i]] += share;
      break;
    }
    case Op::kWeightedNll: {
      auto& dx = sink(node.in0);
      for (std::size_t i = 0; i < node.aux.size(); ++i) {
        dx[i * x.cols() + node.aux[i]] -= g[0] * node.coef[i];
      }
      break;
    }
    case Op::kSum: {
      auto& dx = sink(node.in0);
      for (double& v : dx) v += g[0];
      break;
    }
    case Op::kSumSquares: {
      auto& dx = sink(node.in0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0 * x.data[i] * g[0];
      break;
    }
  }
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(Tape&)>& f, std::span<Tensor* const> params, double h,
                  std::size_t samples, std::uint64_t seed) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw ConfigError("grad_check: step " + std::to_string(h) + " outside [1e-7, 1e-3]");
  }
  std::vector<bool> saved_flags;
  for (Tensor* p : params) {
    saved_flags.push_back(p->requires_grad);
    p->requires_grad = true;
    p->zero_grad();
  }
  auto evaluate = [&] {
    Tape tape;
    return tape.value(f(tape)).data.at(0);
  };

  double base = 0.0;
  {
    Tape tape;
    Var loss = f(tape);
    base = tape.value(loss).data.at(0);
    tape.backward(loss);
  }
  if (evaluate() != base) {
    throw DeterminismError("grad_check: two forward passes disagree");
  }

  Rng rng(seed);
  double worst = 0.0;
  for (Tensor* p : params) {
    std::vector<std::size_t> coords(p->size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > samples) {
      rng.shuffle(std::span(coords));
      coords.resize(samples);
    }
    for (std::size_t c : coords) {
      const double original = p->data[c];
      p->data[c] = original + h;
      const double plus = evaluate();
      p->data[c] = original - h;
      const double minus = evaluate();
      p->data[c] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double analytic = p->grad[c];
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->requires_grad = saved_flags[i];
  return worst;
}

}  // namespace clipdesk
