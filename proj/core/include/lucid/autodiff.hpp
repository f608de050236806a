#pragma once

// Minimal reverse-mode differentiation over dense tensors. Graphs are built
// define-by-run on a tape: every op appends a node holding its forward value
// and a closure that pushes its output gradient to its inputs. The op set is
// exactly what the conv/relu/pool/FC classifiers and their regularizers use.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lucid/tensor.hpp"

namespace lucid {

// A named trainable tensor with one freeze flag per row of its leading
// dimension (a conv output channel, an FC output unit, a bias element).
template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  std::vector<std::uint8_t> frozen;

  BasicParameter() = default;
  BasicParameter(std::string n, BasicTensor<T> v)
      : name(std::move(n)), value(std::move(v)), frozen(static_cast<std::size_t>(value.dim(0)), 0) {}

  int rows() const { return value.dim(0); }
  std::size_t row_size() const { return value.size() / static_cast<std::size_t>(rows()); }
  bool row_frozen(int r) const { return frozen.at(static_cast<std::size_t>(r)) != 0; }
  bool all_frozen() const;
  bool any_frozen() const;
  void set_row_frozen(int r, bool f) { frozen.at(static_cast<std::size_t>(r)) = f ? 1 : 0; }
  void set_all_frozen(bool f) { std::fill(frozen.begin(), frozen.end(), f ? 1 : 0); }

  template <typename U>
  BasicParameter<U> cast() const {
    BasicParameter<U> p(name, value.template cast<U>());
    p.frozen = frozen;
    return p;
  }
};

using Parameter = BasicParameter<float>;

template <typename T>
struct BasicGradients {
  struct Entry {
    BasicTensor<T> grad;
    std::vector<std::uint8_t> trainable;  // per row; frozen rows hold zeros
  };
  std::map<std::string, Entry> params;
  std::map<std::string, BasicTensor<T>> inputs;

  bool has(const std::string& name) const { return params.count(name) != 0; }
  bool has_row(const std::string& name, int row) const;
  const BasicTensor<T>& param(const std::string& name) const;
  const BasicTensor<T>& input(const std::string& name) const;
};

using Gradients = BasicGradients<float>;

template <typename T>
class BasicTape;

// Handle to a tape node. Cheap to copy; valid while its tape lives.
template <typename T>
class BasicVar {
 public:
  BasicVar() = default;
  BasicVar(BasicTape<T>* tape, int id) : tape_(tape), id_(id) {}

  BasicTape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  BasicTape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class BasicTape {
 public:
  using Var = BasicVar<T>;
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(BasicTape&, int self)>;

  struct Node {
    std::string op;
    std::vector<int> inputs;
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
    const BasicParameter<T>* param = nullptr;
    std::string input_name;
  };

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var input(std::string name, TensorT value, bool requires_grad = false);
  // The parameter must outlive backward(); its value is copied onto the tape.
  Var param(const BasicParameter<T>& p);
  Var constant(TensorT value);

  Var push(std::string op, std::vector<Var> inputs, TensorT value, BackwardFn backward);

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  bool requires_grad(const Var& v) const { return node(v.id()).requires_grad; }

  // Accumulation target for a node's gradient, zero-initialized on first use.
  TensorT& grad_of(int id);

  // Gradients of a scalar node w.r.t. every trainable parameter row and every
  // input declared with requires_grad. Frozen rows get no entry.
  BasicGradients<T> backward(const Var& loss);

 private:
  std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

template <typename T>
const BasicTensor<T>& BasicVar<T>::value() const {
  if (!valid()) throw InvalidArgument("use of an unbound tape variable");
  return tape_->node(id_).value;
}

// ---- ops -------------------------------------------------------------------

template <typename T>
BasicVar<T> identity(const BasicVar<T>& x);

template <typename T>
BasicVar<T> relu(const BasicVar<T>& x);

// x [N,C,H,W], w [K,C,k,k], b [K]; valid padding.
template <typename T>
BasicVar<T> conv2d(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& b, int stride);

// 2x2 window, stride 2, floor on odd sizes. Ties route to the first maximum
// in row-major window order.
template <typename T>
BasicVar<T> maxpool2x2(const BasicVar<T>& x);

// [N, ...] -> [N, prod(...)]
template <typename T>
BasicVar<T> flatten(const BasicVar<T>& x);

// x [N,D], w [O,D], b [O] -> [N,O]
template <typename T>
BasicVar<T> linear(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& b);

enum class Reduction { kMean, kSum };

// Softmax cross-entropy of logits [N,O] against integer labels.
template <typename T>
BasicVar<T> softmax_cross_entropy(const BasicVar<T>& logits, std::span<const int> labels,
                                  Reduction reduction = Reduction::kMean);

// Carlini-Wagner margin max(Z_y - max_{t!=y} Z_t, -kappa), summed over the batch.
// Minimizing it pushes each sample toward misclassification with confidence kappa.
template <typename T>
BasicVar<T> cw_margin(const BasicVar<T>& logits, std::span<const int> labels, T kappa);

// Mean squared error over all elements.
template <typename T>
BasicVar<T> mse(const BasicVar<T>& a, const BasicVar<T>& b);

// Sum of |x| over the listed channels (axis 1) of x [N,C,...].
template <typename T>
BasicVar<T> l1_channels(const BasicVar<T>& x, std::span<const int> channels);

// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
BasicVar<T> spatial_mean(const BasicVar<T>& x);

// [N,C] -> [N], column c.
template <typename T>
BasicVar<T> column(const BasicVar<T>& x, int c);

// Pearson correlation of two length-M vectors (M >= 2). Either vector with
// population variance below 1e-12 yields 0 with zero gradient.
template <typename T>
BasicVar<T> pearson_corr(const BasicVar<T>& a, const BasicVar<T>& b);

template <typename T>
BasicVar<T> abs(const BasicVar<T>& x);

template <typename T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b);

template <typename T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b);

template <typename T>
BasicVar<T> scale(const BasicVar<T>& x, T s);

// Sum of all elements -> scalar [1].
template <typename T>
BasicVar<T> sum(const BasicVar<T>& x);

// Row-wise softmax, value only.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& logits);

// Plain Pearson correlation with the same degenerate-variance rule as the op.
double pearson(std::span<const float> a, std::span<const float> b);

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One update of every parameter that has a gradient entry. Frozen rows are
  // untouched (values and moments). Throws NumericError before modifying
  // anything when a gradient is non-finite.
  void step(std::vector<Parameter>& params, const Gradients& grads, float lr);

  std::int64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const Tensor* first_moment(const std::string& name) const;
  const Tensor* second_moment(const std::string& name) const;

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

// ---- gradient check ----------------------------------------------------------

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Relative error used by gradcheck: |a - n| / max(|a|, |n|, 1e-2). Below 1e-3 this is
// the usual rtol=1e-3, atol=1e-5 acceptance; tiny gradients are judged absolutely.
double grad_rel_error(double analytic, double numeric);

// Compares float32 backward() gradients against double-precision central
// differences of the same graph. `build(tape, params)` must return a scalar
// loss and be callable for both BasicTape<float> and BasicTape<double>.
template <typename Build>
GradcheckReport gradcheck(Build&& build, const std::vector<BasicParameter<double>>& point, double h) {
  if (!(h > 0)) throw InvalidArgument("gradcheck step must be positive");

  std::vector<BasicParameter<float>> fparams;
  for (const auto& p : point) fparams.push_back(p.template cast<float>());
  Gradients analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : fparams) vars.push_back(tape.param(p));
    analytic = tape.backward(build(tape, vars));
  }

  auto eval = [&](const std::vector<BasicParameter<double>>& ps) {
    BasicTape<double> tape;
    std::vector<BasicVar<double>> vars;
    for (const auto& p : ps) vars.push_back(tape.param(p));
    return build(tape, vars).value().item();
  };

  GradcheckReport report;
  std::vector<BasicParameter<double>> probe = point;
  for (std::size_t pi = 0; pi < probe.size(); ++pi) {
    auto& p = probe[pi];
    const std::size_t row_size = p.row_size();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const int row = static_cast<int>(k / row_size);
      if (p.row_frozen(row)) continue;
      const double orig = p.value[k];
      p.value[k] = orig + h;
      const double up = eval(probe);
      p.value[k] = orig - h;
      const double down = eval(probe);
      p.value[k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.has(p.name) ? static_cast<double>(analytic.param(p.name)[k]) : 0.0;
      const double err = grad_rel_error(a, numeric);
      ++report.checked;
      if (report.worst_param.empty() || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p.name;
        report.worst_index = k;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace lucid
