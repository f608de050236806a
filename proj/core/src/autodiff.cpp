#include "lucid/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>

namespace lucid {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

constexpr double kDegenerateVariance = 1e-12;

template <typename T>
BasicTape<T>* same_tape(std::initializer_list<const BasicVar<T>*> vars, const char* op) {
  BasicTape<T>* tape = nullptr;
  for (const auto* v : vars) {
    if (!v->valid()) throw InvalidArgument(std::string(op) + ": unbound input variable");
    if (tape && v->tape() != tape) throw InvalidArgument(std::string(op) + ": inputs live on different tapes");
    tape = v->tape();
  }
  return tape;
}

std::string op_error(const char* op, const std::string& what) { return std::string(op) + ": " + what; }

template <typename T>
void require_rank(const BasicTensor<T>& t, int rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(op_error(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                                      shape_str(t.shape())));
  }
}

}  // namespace

// ---- parameters / gradients -------------------------------------------------

template <typename T>
bool BasicParameter<T>::all_frozen() const {
  return std::all_of(frozen.begin(), frozen.end(), [](std::uint8_t f) { return f != 0; });
}

template <typename T>
bool BasicParameter<T>::any_frozen() const {
  return std::any_of(frozen.begin(), frozen.end(), [](std::uint8_t f) { return f != 0; });
}

template <typename T>
bool BasicGradients<T>::has_row(const std::string& name, int row) const {
  auto it = params.find(name);
  return it != params.end() && it->second.trainable.at(static_cast<std::size_t>(row)) != 0;
}

template <typename T>
const BasicTensor<T>& BasicGradients<T>::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw NotFound("no gradient for parameter '" + name + "'");
  return it->second.grad;
}

template <typename T>
const BasicTensor<T>& BasicGradients<T>::input(const std::string& name) const {
  auto it = inputs.find(name);
  if (it == inputs.end()) throw NotFound("no gradient for input '" + name + "'");
  return it->second;
}

// ---- tape -------------------------------------------------------------------

template <typename T>
BasicVar<T> BasicTape<T>::input(std::string name, TensorT value, bool requires_grad) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.input_name = std::move(name);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
BasicVar<T> BasicTape<T>::param(const BasicParameter<T>& p) {
  Node n;
  n.op = "param";
  n.value = p.value;
  n.requires_grad = !p.all_frozen();
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
BasicVar<T> BasicTape<T>::constant(TensorT value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
BasicVar<T> BasicTape<T>::push(std::string op, std::vector<Var> inputs, TensorT value, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  for (const auto& v : inputs) {
    if (v.tape() != this) throw InvalidArgument(n.op + ": input from another tape");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || node(v.id()).requires_grad;
  }
  if (!value.all_finite()) throw NumericError(n.op + ": non-finite forward value");
  n.value = std::move(value);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
BasicTensor<T>& BasicTape<T>::grad_of(int id) {
  auto& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.grad.empty()) n.grad = TensorT(n.value.shape());
  return n.grad;
}

template <typename T>
BasicGradients<T> BasicTape<T>::backward(const Var& loss) {
  if (!loss.valid()) throw InvalidArgument("backward: loss is not bound to a tape");
  if (loss.tape() != this) throw InvalidArgument("backward: loss belongs to another tape");
  const auto& ln = node(loss.id());
  if (ln.value.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(ln.value.shape()));

  for (auto& n : nodes_) n.grad = TensorT();
  grad_of(loss.id())[0] = T(1);
  for (int id = loss.id(); id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }

  BasicGradients<T> out;
  for (std::size_t id = 0; id < nodes_.size() && id <= static_cast<std::size_t>(loss.id()); ++id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) continue;
    if (n.param) {
      const auto& p = *n.param;
      TensorT g = n.grad.empty() ? TensorT(n.value.shape()) : n.grad;
      const std::size_t rs = p.row_size();
      for (int r = 0; r < p.rows(); ++r) {
        if (!p.row_frozen(r)) continue;
        std::fill_n(g.ptr() + static_cast<std::size_t>(r) * rs, rs, T(0));
      }
      auto it = out.params.find(p.name);
      if (it == out.params.end()) {
        typename BasicGradients<T>::Entry e;
        e.grad = std::move(g);
        e.trainable.resize(p.frozen.size());
        for (std::size_t r = 0; r < p.frozen.size(); ++r) e.trainable[r] = p.frozen[r] ? 0 : 1;
        out.params.emplace(p.name, std::move(e));
      } else {
        for (std::size_t k = 0; k < g.size(); ++k) it->second.grad[k] += g[k];
      }
    } else if (n.op == "input") {
      out.inputs[n.input_name] = n.grad.empty() ? TensorT(n.value.shape()) : n.grad;
    }
  }
  return out;
}

// ---- ops --------------------------------------------------------------------

template <typename T>
BasicVar<T> identity(const BasicVar<T>& x) {
  auto* tape = same_tape<T>({&x}, "identity");
  const int xi = x.id();
  return tape->push("identity", {x}, x.value(), [xi](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
  });
}

template <typename T>
BasicVar<T> relu(const BasicVar<T>& x) {
  auto* tape = same_tape<T>({&x}, "relu");
  BasicTensor<T> y = x.value();
  for (auto& v : y.data()) v = v > T(0) ? v : T(0);
  const int xi = x.id();
  return tape->push("relu", {x}, std::move(y), [xi](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.node(xi).value;
    auto& gx = t.grad_of(xi);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (xv[k] > T(0)) gx[k] += g[k];
  });
}

template <typename T>
BasicVar<T> conv2d(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& b, int stride) {
  constexpr const char* kOp = "conv2d";
  auto* tape = same_tape<T>({&x, &w, &b}, kOp);
  const auto& X = x.value();
  const auto& W = w.value();
  const auto& B = b.value();
  require_rank(X, 4, kOp, "input");
  require_rank(W, 4, kOp, "weight");
  require_rank(B, 1, kOp, "bias");
  const int n_batch = X.dim(0), chans = X.dim(1), height = X.dim(2), width = X.dim(3);
  const int out_ch = W.dim(0), ksize = W.dim(2);
  if (W.dim(1) != chans) {
    throw ShapeError(op_error(kOp, "input has " + std::to_string(chans) + " channels but weight expects " +
                                       std::to_string(W.dim(1))));
  }
  if (W.dim(3) != ksize) throw ShapeError(op_error(kOp, "kernel must be square, got " + shape_str(W.shape())));
  if (B.dim(0) != out_ch) throw ShapeError(op_error(kOp, "bias length does not match output channels"));
  if (stride < 1) throw ShapeError(op_error(kOp, "stride must be >= 1"));
  if (height < ksize || width < ksize) {
    throw ShapeError(op_error(kOp, "input " + shape_str(X.shape()) + " smaller than kernel " +
                                       std::to_string(ksize)));
  }
  const int oh = (height - ksize) / stride + 1;
  const int ow = (width - ksize) / stride + 1;
  const int pix = oh * ow;
  const int rows = chans * ksize * ksize;
  const Eigen::Index cols_n = static_cast<Eigen::Index>(n_batch) * pix;

  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols_n));
  for (int c = 0; c < chans; ++c)
    for (int ki = 0; ki < ksize; ++ki)
      for (int kj = 0; kj < ksize; ++kj) {
        T* dst = cols->data() + static_cast<std::size_t>((c * ksize + ki) * ksize + kj) * cols_n;
        for (int n = 0; n < n_batch; ++n) {
          const T* src = X.ptr() + (static_cast<std::size_t>(n) * chans + c) * height * width;
          T* d = dst + static_cast<std::size_t>(n) * pix;
          for (int i = 0; i < oh; ++i) {
            const T* srow = src + static_cast<std::size_t>(i * stride + ki) * width + kj;
            for (int j = 0; j < ow; ++j) d[i * ow + j] = srow[j * stride];
          }
        }
      }

  RowMat<T> out = CMapMat<T>(W.ptr(), out_ch, rows) * CMapMat<T>(cols->data(), rows, cols_n);
  BasicTensor<T> y({n_batch, out_ch, oh, ow});
  for (int n = 0; n < n_batch; ++n)
    for (int k = 0; k < out_ch; ++k) {
      T* dst = y.ptr() + (static_cast<std::size_t>(n) * out_ch + k) * pix;
      const T* src = out.data() + static_cast<std::size_t>(k) * cols_n + static_cast<std::size_t>(n) * pix;
      for (int p = 0; p < pix; ++p) dst[p] = src[p] + B[static_cast<std::size_t>(k)];
    }

  const int xi = x.id(), wi = w.id(), bi = b.id();
  return tape->push(kOp, {x, w, b}, std::move(y), [=](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    RowMat<T> dout(out_ch, cols_n);
    for (int n = 0; n < n_batch; ++n)
      for (int k = 0; k < out_ch; ++k) {
        const T* src = g.ptr() + (static_cast<std::size_t>(n) * out_ch + k) * pix;
        T* dst = dout.data() + static_cast<std::size_t>(k) * cols_n + static_cast<std::size_t>(n) * pix;
        std::copy_n(src, pix, dst);
      }
    if (t.node(wi).requires_grad) {
      auto& gw = t.grad_of(wi);
      MapMat<T>(gw.ptr(), out_ch, rows).noalias() += dout * CMapMat<T>(cols->data(), rows, cols_n).transpose();
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.grad_of(bi);
      for (int k = 0; k < out_ch; ++k) gb[static_cast<std::size_t>(k)] += dout.row(k).sum();
    }
    if (t.node(xi).requires_grad) {
      RowMat<T> dcols = CMapMat<T>(t.node(wi).value.ptr(), out_ch, rows).transpose() * dout;
      auto& gx = t.grad_of(xi);
      for (int c = 0; c < chans; ++c)
        for (int ki = 0; ki < ksize; ++ki)
          for (int kj = 0; kj < ksize; ++kj) {
            const T* src = dcols.data() + static_cast<std::size_t>((c * ksize + ki) * ksize + kj) * cols_n;
            for (int n = 0; n < n_batch; ++n) {
              T* dst = gx.ptr() + (static_cast<std::size_t>(n) * chans + c) * height * width;
              const T* s = src + static_cast<std::size_t>(n) * pix;
              for (int i = 0; i < oh; ++i) {
                T* drow = dst + static_cast<std::size_t>(i * stride + ki) * width + kj;
                for (int j = 0; j < ow; ++j) drow[j * stride] += s[i * ow + j];
              }
            }
          }
    }
  });
}

template <typename T>
BasicVar<T> maxpool2x2(const BasicVar<T>& x) {
  constexpr const char* kOp = "maxpool2x2";
  auto* tape = same_tape<T>({&x}, kOp);
  const auto& X = x.value();
  require_rank(X, 4, kOp, "input");
  const int n_batch = X.dim(0), chans = X.dim(1), height = X.dim(2), width = X.dim(3);
  if (height < 2 || width < 2) throw ShapeError(op_error(kOp, "input smaller than window: " + shape_str(X.shape())));
  const int oh = height / 2, ow = width / 2;
  BasicTensor<T> y({n_batch, chans, oh, ow});
  auto arg = std::make_shared<std::vector<std::uint32_t>>(y.size());
  std::size_t o = 0;
  for (int nc = 0; nc < n_batch * chans; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * height * width;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * i) * width + 2 * j;
        const std::size_t cand[3] = {best + 1, best + static_cast<std::size_t>(width),
                                     best + static_cast<std::size_t>(width) + 1};
        for (std::size_t c : cand)
          if (X[c] > X[best]) best = c;
        y[o] = X[best];
        (*arg)[o] = static_cast<std::uint32_t>(best);
      }
  }
  const int xi = x.id();
  return tape->push(kOp, {x}, std::move(y), [xi, arg](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[(*arg)[k]] += g[k];
  });
}

template <typename T>
BasicVar<T> flatten(const BasicVar<T>& x) {
  auto* tape = same_tape<T>({&x}, "flatten");
  const auto& X = x.value();
  if (X.rank() < 2) throw ShapeError(op_error("flatten", "input rank must be >= 2"));
  const int n = X.dim(0);
  const int d = static_cast<int>(X.size() / static_cast<std::size_t>(n));
  const int xi = x.id();
  return tape->push("flatten", {x}, X.reshaped({n, d}), [xi](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
  });
}

template <typename T>
BasicVar<T> linear(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& b) {
  constexpr const char* kOp = "linear";
  auto* tape = same_tape<T>({&x, &w, &b}, kOp);
  const auto& X = x.value();
  const auto& W = w.value();
  const auto& B = b.value();
  require_rank(X, 2, kOp, "input");
  require_rank(W, 2, kOp, "weight");
  require_rank(B, 1, kOp, "bias");
  const int n = X.dim(0), d = X.dim(1), o = W.dim(0);
  if (W.dim(1) != d) {
    throw ShapeError(op_error(kOp, "input width " + std::to_string(d) + " does not match weight " +
                                       shape_str(W.shape())));
  }
  if (B.dim(0) != o) throw ShapeError(op_error(kOp, "bias length does not match outputs"));
  BasicTensor<T> y({n, o});
  MapMat<T> ym(y.ptr(), n, o);
  ym.noalias() = CMapMat<T>(X.ptr(), n, d) * CMapMat<T>(W.ptr(), o, d).transpose();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < o; ++c) ym(r, c) += B[static_cast<std::size_t>(c)];
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return tape->push(kOp, {x, w, b}, std::move(y), [=](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    CMapMat<T> gm(g.ptr(), n, o);
    if (t.node(xi).requires_grad) {
      auto& gx = t.grad_of(xi);
      MapMat<T>(gx.ptr(), n, d).noalias() += gm * CMapMat<T>(t.node(wi).value.ptr(), o, d);
    }
    if (t.node(wi).requires_grad) {
      auto& gw = t.grad_of(wi);
      MapMat<T>(gw.ptr(), o, d).noalias() += gm.transpose() * CMapMat<T>(t.node(xi).value.ptr(), n, d);
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.grad_of(bi);
      for (int c = 0; c < o; ++c) gb[static_cast<std::size_t>(c)] += gm.col(c).sum();
    }
  });
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits) {
  require_rank(logits, 2, "softmax", "logits");
  BasicTensor<T> p = logits;
  const int n = logits.dim(0), o = logits.dim(1);
  for (int r = 0; r < n; ++r) {
    T* row = p.ptr() + static_cast<std::size_t>(r) * o;
    const T mx = *std::max_element(row, row + o);
    T total = T(0);
    for (int c = 0; c < o; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (int c = 0; c < o; ++c) row[c] /= total;
  }
  return p;
}

namespace {

void check_labels(std::span<const int> labels, int n, int o, const char* op) {
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError(op_error(op, std::to_string(labels.size()) + " labels for batch of " + std::to_string(n)));
  }
  for (int y : labels)
    if (y < 0 || y >= o) throw InvalidArgument(op_error(op, "label " + std::to_string(y) + " out of range"));
}

}  // namespace

template <typename T>
BasicVar<T> softmax_cross_entropy(const BasicVar<T>& logits, std::span<const int> labels, Reduction reduction) {
  constexpr const char* kOp = "softmax_cross_entropy";
  auto* tape = same_tape<T>({&logits}, kOp);
  const auto& Z = logits.value();
  require_rank(Z, 2, kOp, "logits");
  const int n = Z.dim(0), o = Z.dim(1);
  check_labels(labels, n, o, kOp);
  auto probs = std::make_shared<BasicTensor<T>>(softmax_rows(Z));
  auto ys = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  T total = T(0);
  for (int r = 0; r < n; ++r) {
    const T* row = Z.ptr() + static_cast<std::size_t>(r) * o;
    const T mx = *std::max_element(row, row + o);
    T lse = T(0);
    for (int c = 0; c < o; ++c) lse += std::exp(row[c] - mx);
    total += std::log(lse) + mx - row[(*ys)[static_cast<std::size_t>(r)]];
  }
  const T norm = reduction == Reduction::kMean ? T(1) / T(n) : T(1);
  const int zi = logits.id();
  return tape->push(kOp, {logits}, BasicTensor<T>::scalar(total * norm), [=](BasicTape<T>& t, int self) {
    const T g = t.node(self).grad[0] * norm;
    auto& gz = t.grad_of(zi);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < o; ++c) {
        const std::size_t k = static_cast<std::size_t>(r) * o + c;
        gz[k] += g * ((*probs)[k] - (c == (*ys)[static_cast<std::size_t>(r)] ? T(1) : T(0)));
      }
  });
}

template <typename T>
BasicVar<T> cw_margin(const BasicVar<T>& logits, std::span<const int> labels, T kappa) {
  constexpr const char* kOp = "cw_margin";
  auto* tape = same_tape<T>({&logits}, kOp);
  const auto& Z = logits.value();
  require_rank(Z, 2, kOp, "logits");
  const int n = Z.dim(0), o = Z.dim(1);
  if (o < 2) throw ShapeError(op_error(kOp, "needs at least two classes"));
  check_labels(labels, n, o, kOp);
  // Per row: (true label, strongest other label, active flag).
  auto rows = std::make_shared<std::vector<std::array<int, 3>>>(static_cast<std::size_t>(n));
  T total = T(0);
  for (int r = 0; r < n; ++r) {
    const T* row = Z.ptr() + static_cast<std::size_t>(r) * o;
    const int y = labels[static_cast<std::size_t>(r)];
    int other = -1;
    for (int c = 0; c < o; ++c)
      if (c != y && (other < 0 || row[c] > row[other])) other = c;
    const T f = row[y] - row[other];
    const bool active = f > -kappa;
    total += active ? f : -kappa;
    (*rows)[static_cast<std::size_t>(r)] = {y, other, active ? 1 : 0};
  }
  const int zi = logits.id();
  return tape->push(kOp, {logits}, BasicTensor<T>::scalar(total), [=](BasicTape<T>& t, int self) {
    const T g = t.node(self).grad[0];
    auto& gz = t.grad_of(zi);
    for (int r = 0; r < n; ++r) {
      const auto& [y, other, active] = (*rows)[static_cast<std::size_t>(r)];
      if (!active) continue;
      gz[static_cast<std::size_t>(r) * o + y] += g;
      gz[static_cast<std::size_t>(r) * o + other] -= g;
    }
  });
}

template <typename T>
BasicVar<T> mse(const BasicVar<T>& a, const BasicVar<T>& b) {
  auto* tape = same_tape<T>({&a, &b}, "mse");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) {
    throw ShapeError(op_error("mse", "shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape())));
  }
  T total = T(0);
  for (std::size_t k = 0; k < A.size(); ++k) total += (A[k] - B[k]) * (A[k] - B[k]);
  const T inv = T(1) / T(A.size());
  const int ai = a.id(), bi = b.id();
  return tape->push("mse", {a, b}, BasicTensor<T>::scalar(total * inv), [=](BasicTape<T>& t, int self) {
    const T g = t.node(self).grad[0] * inv * T(2);
    const auto& av = t.node(ai).value;
    const auto& bv = t.node(bi).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.grad_of(ai);
      for (std::size_t k = 0; k < av.size(); ++k) ga[k] += g * (av[k] - bv[k]);
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.grad_of(bi);
      for (std::size_t k = 0; k < av.size(); ++k) gb[k] -= g * (av[k] - bv[k]);
    }
  });
}

template <typename T>
BasicVar<T> l1_channels(const BasicVar<T>& x, std::span<const int> channels) {
  constexpr const char* kOp = "l1_channels";
  auto* tape = same_tape<T>({&x}, kOp);
  const auto& X = x.value();
  if (X.rank() < 2) throw ShapeError(op_error(kOp, "input rank must be >= 2"));
  const int n = X.dim(0), c_total = X.dim(1);
  const std::size_t plane = X.size() / (static_cast<std::size_t>(n) * c_total);
  auto chans = std::make_shared<std::vector<int>>(channels.begin(), channels.end());
  for (int c : *chans)
    if (c < 0 || c >= c_total) throw InvalidArgument(op_error(kOp, "channel " + std::to_string(c) + " out of range"));
  T total = T(0);
  for (int s = 0; s < n; ++s)
    for (int c : *chans) {
      const T* p = X.ptr() + (static_cast<std::size_t>(s) * c_total + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) total += std::abs(p[k]);
    }
  const int xi = x.id();
  return tape->push(kOp, {x}, BasicTensor<T>::scalar(total), [=](BasicTape<T>& t, int self) {
    const T g = t.node(self).grad[0];
    const auto& xv = t.node(xi).value;
    auto& gx = t.grad_of(xi);
    for (int s = 0; s < n; ++s)
      for (int c : *chans) {
        const std::size_t base = (static_cast<std::size_t>(s) * c_total + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const T v = xv[base + k];
          gx[base + k] += v > T(0) ? g : (v < T(0) ? -g : T(0));
        }
      }
  });
}

template <typename T>
BasicVar<T> spatial_mean(const BasicVar<T>& x) {
  constexpr const char* kOp = "spatial_mean";
  auto* tape = same_tape<T>({&x}, kOp);
  const auto& X = x.value();
  require_rank(X, 4, kOp, "input");
  const int n = X.dim(0), c = X.dim(1);
  const std::size_t plane = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  BasicTensor<T> y({n, c});
  for (std::size_t k = 0; k < y.size(); ++k) {
    T s = T(0);
    const T* p = X.ptr() + k * plane;
    for (std::size_t q = 0; q < plane; ++q) s += p[q];
    y[k] = s / T(plane);
  }
  const int xi = x.id();
  return tape->push(kOp, {x}, std::move(y), [xi, plane](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(xi);
    const T inv = T(1) / T(plane);
    for (std::size_t k = 0; k < g.size(); ++k)
      for (std::size_t q = 0; q < plane; ++q) gx[k * plane + q] += g[k] * inv;
  });
}

template <typename T>
BasicVar<T> column(const BasicVar<T>& x, int c) {
  constexpr const char* kOp = "column";
  auto* tape = same_tape<T>({&x}, kOp);
  const auto& X = x.value();
  require_rank(X, 2, kOp, "input");
  const int n = X.dim(0), cols = X.dim(1);
  if (c < 0 || c >= cols) throw InvalidArgument(op_error(kOp, "column " + std::to_string(c) + " out of range"));
  BasicTensor<T> y({n});
  for (int r = 0; r < n; ++r) y[static_cast<std::size_t>(r)] = X[static_cast<std::size_t>(r) * cols + c];
  const int xi = x.id();
  return tape->push(kOp, {x}, std::move(y), [=](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(xi);
    for (int r = 0; r < n; ++r) gx[static_cast<std::size_t>(r) * cols + c] += g[static_cast<std::size_t>(r)];
  });
}

template <typename T>
BasicVar<T> pearson_corr(const BasicVar<T>& a, const BasicVar<T>& b) {
  constexpr const char* kOp = "pearson_corr";
  auto* tape = same_tape<T>({&a, &b}, kOp);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.size() != B.size()) throw ShapeError(op_error(kOp, "length mismatch"));
  const std::size_t m = A.size();
  if (m < 2) throw InvalidArgument(op_error(kOp, "needs at least 2 samples"));
  T ma = T(0), mb = T(0);
  for (std::size_t k = 0; k < m; ++k) {
    ma += A[k];
    mb += B[k];
  }
  ma /= T(m);
  mb /= T(m);
  auto ca = std::make_shared<std::vector<T>>(m);
  auto cb = std::make_shared<std::vector<T>>(m);
  T saa = T(0), sbb = T(0), sab = T(0);
  for (std::size_t k = 0; k < m; ++k) {
    (*ca)[k] = A[k] - ma;
    (*cb)[k] = B[k] - mb;
    saa += (*ca)[k] * (*ca)[k];
    sbb += (*cb)[k] * (*cb)[k];
    sab += (*ca)[k] * (*cb)[k];
  }
  const bool degenerate = saa / T(m) < T(kDegenerateVariance) || sbb / T(m) < T(kDegenerateVariance);
  T r = T(0);
  if (!degenerate) r = std::clamp(sab / std::sqrt(saa * sbb), T(-1), T(1));
  const int ai = a.id(), bi = b.id();
  return tape->push(kOp, {a, b}, BasicTensor<T>::scalar(r), [=](BasicTape<T>& t, int self) {
    if (degenerate) return;
    const T g = t.node(self).grad[0];
    const T denom = std::sqrt(saa * sbb);
    if (t.node(ai).requires_grad) {
      auto& ga = t.grad_of(ai);
      for (std::size_t k = 0; k < m; ++k) ga[k] += g * ((*cb)[k] / denom - r * (*ca)[k] / saa);
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.grad_of(bi);
      for (std::size_t k = 0; k < m; ++k) gb[k] += g * ((*ca)[k] / denom - r * (*cb)[k] / sbb);
    }
  });
}

template <typename T>
BasicVar<T> abs(const BasicVar<T>& x) {
  auto* tape = same_tape<T>({&x}, "abs");
  BasicTensor<T> y = x.value();
  for (auto& v : y.data()) v = std::abs(v);
  const int xi = x.id();
  return tape->push("abs", {x}, std::move(y), [xi](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.node(xi).value;
    auto& gx = t.grad_of(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += xv[k] > T(0) ? g[k] : (xv[k] < T(0) ? -g[k] : T(0));
  });
}

template <typename T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
  auto* tape = same_tape<T>({&a, &b}, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError(op_error("add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape())));
  }
  BasicTensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += bv[k];
  const int ai = a.id(), bi = b.id();
  return tape->push("add", {a, b}, std::move(y), [ai, bi](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    for (int id : {ai, bi}) {
      if (!t.node(id).requires_grad) continue;
      auto& gx = t.grad_of(id);
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
    }
  });
}

template <typename T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b) {
  auto* tape = same_tape<T>({&a, &b}, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError(op_error("mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape())));
  }
  BasicTensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t k = 0; k < y.size(); ++k) y[k] *= bv[k];
  const int ai = a.id(), bi = b.id();
  return tape->push("mul", {a, b}, std::move(y), [ai, bi](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    const auto& av = t.node(ai).value;
    const auto& bv = t.node(bi).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.grad_of(ai);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * bv[k];
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.grad_of(bi);
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * av[k];
    }
  });
}

template <typename T>
BasicVar<T> scale(const BasicVar<T>& x, T s) {
  auto* tape = same_tape<T>({&x}, "scale");
  BasicTensor<T> y = x.value();
  for (auto& v : y.data()) v *= s;
  const int xi = x.id();
  return tape->push("scale", {x}, std::move(y), [xi, s](BasicTape<T>& t, int self) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad_of(xi);
    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * s;
  });
}

template <typename T>
BasicVar<T> sum(const BasicVar<T>& x) {
  auto* tape = same_tape<T>({&x}, "sum");
  T total = T(0);
  for (T v : x.value().data()) total += v;
  const int xi = x.id();
  return tape->push("sum", {x}, BasicTensor<T>::scalar(total), [xi](BasicTape<T>& t, int self) {
    const T g = t.node(self).grad[0];
    auto& gx = t.grad_of(xi);
    for (auto& v : gx.data()) v += g;
  });
}

double pearson(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("pearson: length mismatch");
  const std::size_t m = a.size();
  if (m < 2) throw InvalidArgument("pearson: needs at least 2 samples");
  double ma = 0, mb = 0;
  for (std::size_t k = 0; k < m; ++k) {
    ma += a[k];
    mb += b[k];
  }
  ma /= static_cast<double>(m);
  mb /= static_cast<double>(m);
  double saa = 0, sbb = 0, sab = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const double da = a[k] - ma, db = b[k] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa / static_cast<double>(m) < kDegenerateVariance || sbb / static_cast<double>(m) < kDegenerateVariance) {
    return 0.0;
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// ---- Adam -------------------------------------------------------------------

void Adam::step(std::vector<Parameter>& params, const Gradients& grads, float lr) {
  if (!(lr > 0.0f)) throw InvalidArgument("adam: learning rate must be positive");
  for (const auto& [name, entry] : grads.params) {
    if (!entry.grad.all_finite()) throw NumericError("adam: non-finite gradient for '" + name + "'; step aborted");
  }
  for (const auto& p : params) {
    auto it = grads.params.find(p.name);
    if (it != grads.params.end() && it->second.grad.shape() != p.value.shape()) {
      throw ShapeError("adam: gradient shape mismatch for '" + p.name + "'");
    }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float eps = static_cast<float>(cfg_.eps);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  for (auto& p : params) {
    auto it = grads.params.find(p.name);
    if (it == grads.params.end()) continue;
    const auto& entry = it->second;
    auto& mom = moments_[p.name];
    if (mom.m.empty()) {
      mom.m = Tensor(p.value.shape());
      mom.v = Tensor(p.value.shape());
    }
    const std::size_t rs = p.row_size();
    for (int r = 0; r < p.rows(); ++r) {
      if (p.row_frozen(r) || !entry.trainable[static_cast<std::size_t>(r)]) continue;
      for (std::size_t k = static_cast<std::size_t>(r) * rs; k < static_cast<std::size_t>(r + 1) * rs; ++k) {
        const float g = entry.grad[k];
        mom.m[k] = b1 * mom.m[k] + (1.0f - b1) * g;
        mom.v[k] = b2 * mom.v[k] + (1.0f - b2) * g * g;
        p.value[k] -= step_size * mom.m[k] / (std::sqrt(mom.v[k]) * inv_sqrt_bc2 + eps);
      }
    }
  }
}

const Tensor* Adam::first_moment(const std::string& name) const {
  auto it = moments_.find(name);
  return it == moments_.end() ? nullptr : &it->second.m;
}

const Tensor* Adam::second_moment(const std::string& name) const {
  auto it = moments_.find(name);
  return it == moments_.end() ? nullptr : &it->second.v;
}

double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
  return std::abs(analytic - numeric) / denom;
}

// ---- explicit instantiations -------------------------------------------------

#define LUCID_INSTANTIATE(T)                                                                              \
  template struct BasicParameter<T>;                                                                      \
  template struct BasicGradients<T>;                                                                      \
  template class BasicTape<T>;                                                                            \
  template BasicVar<T> identity(const BasicVar<T>&);                                                      \
  template BasicVar<T> relu(const BasicVar<T>&);                                                          \
  template BasicVar<T> conv2d(const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&, int);           \
  template BasicVar<T> maxpool2x2(const BasicVar<T>&);                                                    \
  template BasicVar<T> flatten(const BasicVar<T>&);                                                       \
  template BasicVar<T> linear(const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&);                \
  template BasicVar<T> softmax_cross_entropy(const BasicVar<T>&, std::span<const int>, Reduction);        \
  template BasicVar<T> cw_margin(const BasicVar<T>&, std::span<const int>, T);                            \
  template BasicVar<T> mse(const BasicVar<T>&, const BasicVar<T>&);                                       \
  template BasicVar<T> l1_channels(const BasicVar<T>&, std::span<const int>);                             \
  template BasicVar<T> spatial_mean(const BasicVar<T>&);                                                  \
  template BasicVar<T> column(const BasicVar<T>&, int);                                                   \
  template BasicVar<T> pearson_corr(const BasicVar<T>&, const BasicVar<T>&);                              \
  template BasicVar<T> abs(const BasicVar<T>&);                                                           \
  template BasicVar<T> add(const BasicVar<T>&, const BasicVar<T>&);                                       \
  template BasicVar<T> mul(const BasicVar<T>&, const BasicVar<T>&);                                       \
  template BasicVar<T> scale(const BasicVar<T>&, T);                                                      \
  template BasicVar<T> sum(const BasicVar<T>&);                                                           \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);

LUCID_INSTANTIATE(float)
LUCID_INSTANTIATE(double)

#undef LUCID_INSTANTIATE

}  // namespace lucid
