#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "saner/rng.hpp"
#include "saner/tensor.hpp"

namespace saner::ad {

class Tape;

// Handle to a node on a tape. Plain index; nodes are recorded in evaluation
// order, so the vector itself is a topological order.
using Var = int;

// Named trainable tensors plus their Adam state. Insertion order is kept so
// that checkpoints and iteration are deterministic.
class ParameterStore {
 public:
  Tensor& create(const std::string& name, Tensor init);
  bool has(const std::string& name) const;
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  const Tensor& grad(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  // Gradient accumulation interface used by Tape::backward.
  void accumulate_grad(const std::string& name, const Tensor& g);
  void mark_all_grads_present();
  void zero_grads();
  bool grads_present() const { return grads_present_; }

  // One Adam update with bias correction over every parameter; gradients are
  // cleared afterwards. Throws StateError when no backward pass populated
  // gradients since the last step.
  void adam_step(double lr, double beta1, double beta2, double eps);

  std::uint64_t step_count(const std::string& name) const;
  const Tensor& adam_m(const std::string& name) const;
  const Tensor& adam_v(const std::string& name) const;

  // Checkpoint payload: magic "SANERCKPT", u32 version, named tensors
  // (name, shape, f64 payload), per-parameter optimizer state, then a
  // length-prefixed metadata blob (JSON text supplied by the caller).
  void save(const std::string& path) const;
  static ParameterStore load(const std::string& path);
  void set_metadata(std::string blob) { metadata_ = std::move(blob); }
  const std::string& metadata() const { return metadata_; }

 private:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor m;
    Tensor v;
    std::uint64_t step = 0;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
  std::string metadata_;
  bool grads_present_ = false;
};

// Reverse-mode tape over Tensors. Record ops forward, then call backward()
// once on a scalar node. A tape is single-threaded and single-use.
class Tape {
 public:
  explicit Tape(ParameterStore* store = nullptr) : store_(store) {}

  // Leaves.
  Var leaf(Tensor value, bool requires_grad = false);
  Var param(const std::string& name);  // bound to the store

  // Elementwise / shape ops.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var add_rowvec(Var m, Var v);  // m[i][j] + v[j]
  Var add_colvec(Var m, Var v);  // m[i][j] + v[i]
  Var transpose(Var a);
  Var concat(const std::vector<Var>& parts);  // along last axis
  Var slice_cols(Var a, std::size_t c0, std::size_t c1);
  Var row(Var m, std::size_t i);
  Var stack_rows(const std::vector<Var>& rows);
  Var row_select(Var m, const std::vector<std::size_t>& rows);
  Var gather(Var vec, const std::vector<std::size_t>& idx);
  Var gather_nd(Var m, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols);
  // out[i][j] = m[i][(i - j) + n - 1]; m is n x (2n-1). Used to align a
  // query-by-offset score table onto query-by-key positions.
  Var rel_gather(Var m);

  // Linear algebra.
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a · b^T
  Var matvec(Var m, Var x);
  Var vecmat(Var x, Var m);  // x^T · m

  // Nonlinearities and reductions.
  Var softmax(Var a);    // over last axis
  Var sigmoid(Var a);
  Var relu(Var a);
  Var logsumexp(Var a);  // over last axis; rank drops by one
  Var sum(Var a);        // full reduction to scalar
  Var mean(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

  // Inverted dropout. rate 0 or training=false is the identity (no node).
  Var dropout(Var a, double rate, bool training, Rng& rng);

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
  const Tensor& grad(Var v) const;
  double scalar_value(Var v) const;

  // Reverse sweep from a scalar loss. Accumulates parameter gradients into
  // the bound store (marking every parameter, zeros for non-participants).
  // Calling twice on one tape is a state error.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&, const Tensor&)> back;  // pulls grad into parents
    bool requires_grad = false;
    int param_slot = -1;  // index into param_names_ for param leaves
  };

  Var push(Tensor value, bool requires_grad,
           std::function<void(Tape&, const Tensor&)> back, int param_slot = -1);
  void add_grad(Var v, const Tensor& g);
  Tensor& grad_mut(Var v);
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].requires_grad; }

  std::vector<Node> nodes_;
  std::vector<std::string> param_names_;
  ParameterStore* store_ = nullptr;
  bool backward_done_ = false;
};

// Sinusoidal encoding of signed offsets -(n-1)..(n-1), one row per offset,
// laid out with sin at even and cos at odd columns. sin is odd in the offset,
// so r(+t) != r(-t): the table distinguishes direction.
Tensor relative_position_table(std::size_t n, std::size_t dim);

}  // namespace saner::ad
