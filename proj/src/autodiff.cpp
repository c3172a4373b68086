#include "saner/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "saner/binio.hpp"

namespace saner::ad {

namespace {

void check(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

Tensor& ParameterStore::create(const std::string& name, Tensor init) {
  if (entries_.count(name)) throw StateError("parameter already exists: " + name);
  Entry e;
  e.grad = Tensor::zeros(init.shape);
  e.m = Tensor::zeros(init.shape);
  e.v = Tensor::zeros(init.shape);
  e.value = std::move(init);
  order_.push_back(name);
  return entries_.emplace(name, std::move(e)).first->second.value;
}

bool ParameterStore::has(const std::string& name) const { return entries_.count(name) > 0; }

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw StateError("unknown parameter: " + name);
  return it->second;
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw StateError("unknown parameter: " + name);
  return it->second;
}

Tensor& ParameterStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParameterStore::value(const std::string& name) const { return entry(name).value; }
const Tensor& ParameterStore::grad(const std::string& name) const { return entry(name).grad; }
std::uint64_t ParameterStore::step_count(const std::string& name) const { return entry(name).step; }
const Tensor& ParameterStore::adam_m(const std::string& name) const { return entry(name).m; }
const Tensor& ParameterStore::adam_v(const std::string& name) const { return entry(name).v; }

void ParameterStore::accumulate_grad(const std::string& name, const Tensor& g) {
  Entry& e = entry(name);
  if (!e.grad.same_shape(g)) throw ShapeError("gradient shape mismatch for " + name);
  for (std::size_t i = 0; i < g.size(); ++i) e.grad.v[i] += g.v[i];
}

void ParameterStore::mark_all_grads_present() { grads_present_ = true; }

void ParameterStore::zero_grads() {
  for (auto& [name, e] : entries_) std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
  grads_present_ = false;
}

void ParameterStore::adam_step(double lr, double beta1, double beta2, double eps) {
  if (!grads_present_)
    throw StateError("adam_step: gradients missing; run backward before stepping");
  for (const std::string& name : order_) {
    Entry& e = entries_.at(name);
    e.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(e.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(e.step));
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad.v[i];
      e.m.v[i] = beta1 * e.m.v[i] + (1.0 - beta1) * g;
      e.v.v[i] = beta2 * e.v.v[i] + (1.0 - beta2) * g * g;
      const double mhat = e.m.v[i] / bc1;
      const double vhat = e.v.v[i] / bc2;
      e.value.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  zero_grads();
}

namespace {
constexpr char kCkptMagic[] = "SANERCKPT";
constexpr std::uint32_t kCkptVersion = 1;

void put_tensor(std::ostream& os, const Tensor& t) {
  binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape) binio::put_u64(os, d);
  for (double x : t.v) binio::put_f64(os, x);
}

Tensor get_tensor(std::istream& is) {
  std::uint32_t rank = binio::get_u32(is, "tensor rank");
  if (rank > 2) throw FormatError("checkpoint: unsupported tensor rank");
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = binio::get_u64(is, "tensor dim");
  Tensor t = Tensor::zeros(shape);
  for (auto& x : t.v) x = binio::get_f64(is, "tensor payload");
  return t;
}
}  // namespace

void ParameterStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kCkptMagic, 9);
  binio::put_u32(os, kCkptVersion);
  binio::put_u64(os, order_.size());
  for (const std::string& name : order_) {
    const Entry& e = entries_.at(name);
    binio::put_string(os, name);
    put_tensor(os, e.value);
  }
  for (const std::string& name : order_) {
    const Entry& e = entries_.at(name);
    binio::put_u64(os, e.step);
    put_tensor(os, e.m);
    put_tensor(os, e.v);
  }
  binio::put_string(os, metadata_);
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

ParameterStore ParameterStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[9];
  if (!is.read(magic, 9) || std::string(magic, 9) != kCkptMagic)
    throw FormatError("not a checkpoint file: " + path);
  std::uint32_t version = binio::get_u32(is, "version");
  if (version != kCkptVersion)
    throw FormatError("checkpoint version mismatch: " + std::to_string(version));
  std::uint64_t n = binio::get_u64(is, "parameter count");
  ParameterStore store;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = binio::get_string(is, "parameter name");
    store.create(name, get_tensor(is));
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    Entry& e = store.entries_.at(store.order_[i]);
    e.step = binio::get_u64(is, "adam step");
    e.m = get_tensor(is);
    e.v = get_tensor(is);
    if (!e.m.same_shape(e.value) || !e.v.same_shape(e.value))
      throw FormatError("checkpoint: optimizer state shape mismatch");
  }
  store.metadata_ = binio::get_string(is, "metadata");
  return store;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Tensor value, bool requires_grad,
               std::function<void(Tape&, const Tensor&)> back, int param_slot) {
  Node n;
  n.value = std::move(value);
  n.back = std::move(back);
  n.requires_grad = requires_grad;
  n.param_slot = param_slot;
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

Tensor& Tape::grad_mut(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v)];
  if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Tensor::zeros(n.value.shape);
  if (n.grad.shape != n.value.shape) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v)];
  return n.grad;
}

double Tape::scalar_value(Var v) const {
  const Tensor& t = value(v);
  if (t.size() != 1) throw ShapeError("scalar_value: node is not a scalar");
  return t.v[0];
}

void Tape::add_grad(Var v, const Tensor& g) {
  if (!needs_grad(v)) return;
  Tensor& dst = grad_mut(v);
  if (!dst.same_shape(g)) throw ShapeError("backward: gradient shape mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) dst.v[i] += g.v[i];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

Var Tape::param(const std::string& name) {
  if (!store_) throw StateError("tape has no parameter store bound");
  int slot = static_cast<int>(param_names_.size());
  param_names_.push_back(name);
  return push(store_->value(name), true, nullptr, slot);
}

void Tape::backward(Var loss) {
  if (backward_done_) throw StateError("backward already ran on this tape; re-record the graph");
  backward_done_ = true;
  const Node& ln = nodes_[static_cast<std::size_t>(loss)];
  if (ln.value.size() != 1) throw ShapeError("backward: loss must be scalar");
  grad_mut(loss).v[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this, n.grad);
  }
  if (store_) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.param_slot < 0) continue;
      if (n.grad.size() != 0)
        store_->accumulate_grad(param_names_[static_cast<std::size_t>(n.param_slot)], n.grad);
    }
    store_->mark_all_grads_present();
  }
}

// --- elementwise / shape ops ------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.same_shape(tb), "add", ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += tb.v[i];
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](Tape& t, const Tensor& g) {
    t.add_grad(a, g);
    t.add_grad(b, g);
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.same_shape(tb), "sub", ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] -= tb.v[i];
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](Tape& t, const Tensor& g) {
    t.add_grad(a, g);
    Tensor neg = g;
    for (auto& x : neg.v) x = -x;
    t.add_grad(b, neg);
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.same_shape(tb), "mul", ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= tb.v[i];
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor da = g;
      const Tensor& tb2 = t.value(b);
      for (std::size_t i = 0; i < da.size(); ++i) da.v[i] *= tb2.v[i];
      t.add_grad(a, da);
    }
    if (t.needs_grad(b)) {
      Tensor db = g;
      const Tensor& ta2 = t.value(a);
      for (std::size_t i = 0; i < db.size(); ++i) db.v[i] *= ta2.v[i];
      t.add_grad(b, db);
    }
  });
}

Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (auto& x : out.v) x *= c;
  return push(std::move(out), needs_grad(a), [a, c](Tape& t, const Tensor& g) {
    Tensor da = g;
    for (auto& x : da.v) x *= c;
    t.add_grad(a, da);
  });
}

Var Tape::add_const(Var a, double c) {
  Tensor out = value(a);
  for (auto& x : out.v) x += c;
  return push(std::move(out), needs_grad(a),
              [a](Tape& t, const Tensor& g) { t.add_grad(a, g); });
}

Var Tape::add_rowvec(Var m, Var v) {
  const Tensor& tm = value(m);
  const Tensor& tv = value(v);
  check(tm.rank() == 2 && tv.rank() == 1 && tm.shape[1] == tv.shape[0], "add_rowvec",
        tm.shape_str() + " vs " + tv.shape_str());
  Tensor out = tm;
  for (std::size_t i = 0; i < tm.shape[0]; ++i)
    for (std::size_t j = 0; j < tm.shape[1]; ++j) out.at(i, j) += tv.v[j];
  bool rg = needs_grad(m) || needs_grad(v);
  return push(std::move(out), rg, [m, v](Tape& t, const Tensor& g) {
    t.add_grad(m, g);
    if (t.needs_grad(v)) {
      Tensor dv = Tensor::zeros(t.value(v).shape);
      for (std::size_t i = 0; i < g.shape[0]; ++i)
        for (std::size_t j = 0; j < g.shape[1]; ++j) dv.v[j] += g.at(i, j);
      t.add_grad(v, dv);
    }
  });
}

Var Tape::add_colvec(Var m, Var v) {
  const Tensor& tm = value(m);
  const Tensor& tv = value(v);
  check(tm.rank() == 2 && tv.rank() == 1 && tm.shape[0] == tv.shape[0], "add_colvec",
        tm.shape_str() + " vs " + tv.shape_str());
  Tensor out = tm;
  for (std::size_t i = 0; i < tm.shape[0]; ++i)
    for (std::size_t j = 0; j < tm.shape[1]; ++j) out.at(i, j) += tv.v[i];
  bool rg = needs_grad(m) || needs_grad(v);
  return push(std::move(out), rg, [m, v](Tape& t, const Tensor& g) {
    t.add_grad(m, g);
    if (t.needs_grad(v)) {
      Tensor dv = Tensor::zeros(t.value(v).shape);
      for (std::size_t i = 0; i < g.shape[0]; ++i)
        for (std::size_t j = 0; j < g.shape[1]; ++j) dv.v[i] += g.at(i, j);
      t.add_grad(v, dv);
    }
  });
}

Var Tape::transpose(Var a) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2, "transpose", ta.shape_str());
  Tensor out = Tensor::zeros({ta.shape[1], ta.shape[0]});
  for (std::size_t i = 0; i < ta.shape[0]; ++i)
    for (std::size_t j = 0; j < ta.shape[1]; ++j) out.at(j, i) = ta.at(i, j);
  return push(std::move(out), needs_grad(a), [a](Tape& t, const Tensor& g) {
    Tensor da = Tensor::zeros(t.value(a).shape);
    for (std::size_t i = 0; i < g.shape[0]; ++i)
      for (std::size_t j = 0; j < g.shape[1]; ++j) da.at(j, i) = g.at(i, j);
    t.add_grad(a, da);
  });
}

Var Tape::concat(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat", "no inputs");
  const std::size_t rank = value(parts[0]).rank();
  check(rank == 1 || rank == 2, "concat", "rank must be 1 or 2");
  bool rg = false;
  if (rank == 1) {
    std::size_t total = 0;
    for (Var p : parts) {
      check(value(p).rank() == 1, "concat", "mixed ranks");
      total += value(p).shape[0];
      rg = rg || needs_grad(p);
    }
    Tensor out = Tensor::zeros({total});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor& tp = value(p);
      std::copy(tp.v.begin(), tp.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(off));
      off += tp.size();
    }
    std::vector<Var> ps = parts;
    return push(std::move(out), rg, [ps](Tape& t, const Tensor& g) {
      std::size_t off = 0;
      for (Var p : ps) {
        const Tensor& tp = t.value(p);
        if (t.needs_grad(p)) {
          Tensor dp = Tensor::zeros(tp.shape);
          std::copy(g.v.begin() + static_cast<std::ptrdiff_t>(off),
                    g.v.begin() + static_cast<std::ptrdiff_t>(off + tp.size()), dp.v.begin());
          t.add_grad(p, dp);
        }
        off += tp.size();
      }
    });
  }
  const std::size_t n = value(parts[0]).shape[0];
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor& tp = value(p);
    check(tp.rank() == 2 && tp.shape[0] == n, "concat", "row count mismatch");
    total += tp.shape[1];
    rg = rg || needs_grad(p);
  }
  Tensor out = Tensor::zeros({n, total});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& tp = value(p);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < tp.shape[1]; ++j) out.at(i, off + j) = tp.at(i, j);
    off += tp.shape[1];
  }
  std::vector<Var> ps = parts;
  return push(std::move(out), rg, [ps, n](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (Var p : ps) {
      const Tensor& tp = t.value(p);
      if (t.needs_grad(p)) {
        Tensor dp = Tensor::zeros(tp.shape);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < tp.shape[1]; ++j) dp.at(i, j) = g.at(i, off + j);
        t.add_grad(p, dp);
      }
      off += tp.shape[1];
    }
  });
}

Var Tape::slice_cols(Var a, std::size_t c0, std::size_t c1) {
  const Tensor& ta = value(a);
  check(ta.rank() == 2 && c0 < c1 && c1 <= ta.shape[1], "slice_cols", ta.shape_str());
  Tensor out = Tensor::zeros({ta.shape[0], c1 - c0});
  for (std::size_t i = 0; i < ta.shape[0]; ++i)
    for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = ta.at(i, j);
  return push(std::move(out), needs_grad(a), [a, c0](Tape& t, const Tensor& g) {
    Tensor da = Tensor::zeros(t.value(a).shape);
    for (std::size_t i = 0; i < g.shape[0]; ++i)
      for (std::size_t j = 0; j < g.shape[1]; ++j) da.at(i, c0 + j) = g.at(i, j);
    t.add_grad(a, da);
  });
}

Var Tape::row(Var m, std::size_t i) {
  const Tensor& tm = value(m);
  check(tm.rank() == 2 && i < tm.shape[0], "row", tm.shape_str());
  Tensor out = Tensor::zeros({tm.shape[1]});
  for (std::size_t j = 0; j < tm.shape[1]; ++j) out.v[j] = tm.at(i, j);
  return push(std::move(out), needs_grad(m), [m, i](Tape& t, const Tensor& g) {
    Tensor dm = Tensor::zeros(t.value(m).shape);
    for (std::size_t j = 0; j < g.size(); ++j) dm.at(i, j) = g.v[j];
    t.add_grad(m, dm);
  });
}

Var Tape::stack_rows(const std::vector<Var>& rows) {
  check(!rows.empty(), "stack_rows", "no inputs");
  const std::size_t d = value(rows[0]).shape[0];
  bool rg = false;
  for (Var r : rows) {
    check(value(r).rank() == 1 && value(r).shape[0] == d, "stack_rows", "row dim mismatch");
    rg = rg || needs_grad(r);
  }
  Tensor out = Tensor::zeros({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = value(rows[i]).v[j];
  std::vector<Var> rs = rows;
  return push(std::move(out), rg, [rs, d](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (!t.needs_grad(rs[i])) continue;
      Tensor dr = Tensor::zeros({d});
      for (std::size_t j = 0; j < d; ++j) dr.v[j] = g.at(i, j);
      t.add_grad(rs[i], dr);
    }
  });
}

Var Tape::row_select(Var m, const std::vector<std::size_t>& rows) {
  const Tensor& tm = value(m);
  check(tm.rank() == 2, "row_select", tm.shape_str());
  for (auto r : rows) check(r < tm.shape[0], "row_select", "row index out of range");
  Tensor out = Tensor::zeros({rows.size(), tm.shape[1]});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < tm.shape[1]; ++j) out.at(i, j) = tm.at(rows[i], j);
  std::vector<std::size_t> rs = rows;
  return push(std::move(out), needs_grad(m), [m, rs](Tape& t, const Tensor& g) {
    Tensor dm = Tensor::zeros(t.value(m).shape);
    for (std::size_t i = 0; i < rs.size(); ++i)
      for (std::size_t j = 0; j < g.shape[1]; ++j) dm.at(rs[i], j) += g.at(i, j);
    t.add_grad(m, dm);
  });
}

Var Tape::gather(Var vec, const std::vector<std::size_t>& idx) {
  const Tensor& tv = value(vec);
  check(tv.rank() == 1, "gather", tv.shape_str());
  for (auto i : idx) check(i < tv.shape[0], "gather", "index out of range");
  Tensor out = Tensor::zeros({idx.size()});
  for (std::size_t k = 0; k < idx.size(); ++k) out.v[k] = tv.v[idx[k]];
  std::vector<std::size_t> is = idx;
  return push(std::move(out), needs_grad(vec), [vec, is](Tape& t, const Tensor& g) {
    Tensor dv = Tensor::zeros(t.value(vec).shape);
    for (std::size_t k = 0; k < is.size(); ++k) dv.v[is[k]] += g.v[k];
    t.add_grad(vec, dv);
  });
}

Var Tape::gather_nd(Var m, const std::vector<std::size_t>& rows,
                    const std::vector<std::size_t>& cols) {
  const Tensor& tm = value(m);
  check(tm.rank() == 2 && rows.size() == cols.size(), "gather_nd", tm.shape_str());
  for (std::size_t k = 0; k < rows.size(); ++k)
    check(rows[k] < tm.shape[0] && cols[k] < tm.shape[1], "gather_nd", "index out of range");
  Tensor out = Tensor::zeros({rows.size()});
  for (std::size_t k = 0; k < rows.size(); ++k) out.v[k] = tm.at(rows[k], cols[k]);
  std::vector<std::size_t> rs = rows, cs = cols;
  return push(std::move(out), needs_grad(m), [m, rs, cs](Tape& t, const Tensor& g) {
    Tensor dm = Tensor::zeros(t.value(m).shape);
    for (std::size_t k = 0; k < rs.size(); ++k) dm.at(rs[k], cs[k]) += g.v[k];
    t.add_grad(m, dm);
  });
}

Var Tape::rel_gather(Var m) {
  const Tensor& tm = value(m);
  check(tm.rank() == 2 && tm.shape[1] == 2 * tm.shape[0] - 1, "rel_gather",
        tm.shape_str() + " is not n x (2n-1)");
  const std::size_t n = tm.shape[0];
  Tensor out = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = tm.at(i, i - j + n - 1);
  return push(std::move(out), needs_grad(m), [m, n](Tape& t, const Tensor& g) {
    Tensor dm = Tensor::zeros(t.value(m).shape);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) dm.at(i, i - j + n - 1) += g.at(i, j);
    t.add_grad(m, dm);
  });
}

// --- linear algebra ----------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.rank() == 2 && tb.rank() == 2 && ta.shape[1] == tb.shape[0], "matmul",
        ta.shape_str() + " x " + tb.shape_str());
  const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ta.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * tb.at(p, j);
    }
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](Tape& t, const Tensor& g) {
    const Tensor& ta2 = t.value(a);
    const Tensor& tb2 = t.value(b);
    const std::size_t m = ta2.shape[0], k = ta2.shape[1], n = tb2.shape[1];
    if (t.needs_grad(a)) {
      Tensor da = Tensor::zeros(ta2.shape);  // g · b^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g.at(i, j);
          for (std::size_t p = 0; p < k; ++p) da.at(i, p) += gij * tb2.at(p, j);
        }
      t.add_grad(a, da);
    }
    if (t.needs_grad(b)) {
      Tensor db = Tensor::zeros(tb2.shape);  // a^T · g
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = ta2.at(i, p);
          for (std::size_t j = 0; j < n; ++j) db.at(p, j) += aip * g.at(i, j);
        }
      t.add_grad(b, db);
    }
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.rank() == 2 && tb.rank() == 2 && ta.shape[1] == tb.shape[1], "matmul_nt",
        ta.shape_str() + " x " + tb.shape_str() + "^T");
  const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ta.at(i, p) * tb.at(j, p);
      out.at(i, j) = s;
    }
  bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](Tape& t, const Tensor& g) {
    const Tensor& ta2 = t.value(a);
    const Tensor& tb2 = t.value(b);
    const std::size_t m = ta2.shape[0], k = ta2.shape[1], n = tb2.shape[0];
    if (t.needs_grad(a)) {
      Tensor da = Tensor::zeros(ta2.shape);  // g · b
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g.at(i, j);
          for (std::size_t p = 0; p < k; ++p) da.at(i, p) += gij * tb2.at(j, p);
        }
      t.add_grad(a, da);
    }
    if (t.needs_grad(b)) {
      Tensor db = Tensor::zeros(tb2.shape);  // g^T · a
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g.at(i, j);
          for (std::size_t p = 0; p < k; ++p) db.at(j, p) += gij * ta2.at(i, p);
        }
      t.add_grad(b, db);
    }
  });
}

Var Tape::matvec(Var m, Var x) {
  const Tensor& tm = value(m);
  const Tensor& tx = value(x);
  check(tm.rank() == 2 && tx.rank() == 1 && tm.shape[1] == tx.shape[0], "matvec",
        tm.shape_str() + " x " + tx.shape_str());
  Tensor out = Tensor::zeros({tm.shape[0]});
  for (std::size_t i = 0; i < tm.shape[0]; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < tm.shape[1]; ++j) s += tm.at(i, j) * tx.v[j];
    out.v[i] = s;
  }
  bool rg = needs_grad(m) || needs_grad(x);
  return push(std::move(out), rg, [m, x](Tape& t, const Tensor& g) {
    const Tensor& tm2 = t.value(m);
    const Tensor& tx2 = t.value(x);
    if (t.needs_grad(m)) {
      Tensor dm = Tensor::zeros(tm2.shape);
      for (std::size_t i = 0; i < tm2.shape[0]; ++i)
        for (std::size_t j = 0; j < tm2.shape[1]; ++j) dm.at(i, j) = g.v[i] * tx2.v[j];
      t.add_grad(m, dm);
    }
    if (t.needs_grad(x)) {
      Tensor dx = Tensor::zeros(tx2.shape);
      for (std::size_t i = 0; i < tm2.shape[0]; ++i)
        for (std::size_t j = 0; j < tm2.shape[1]; ++j) dx.v[j] += tm2.at(i, j) * g.v[i];
      t.add_grad(x, dx);
    }
  });
}

Var Tape::vecmat(Var x, Var m) {
  const Tensor& tx = value(x);
  const Tensor& tm = value(m);
  check(tm.rank() == 2 && tx.rank() == 1 && tm.shape[0] == tx.shape[0], "vecmat",
        tx.shape_str() + " x " + tm.shape_str());
  Tensor out = Tensor::zeros({tm.shape[1]});
  for (std::size_t i = 0; i < tm.shape[0]; ++i) {
    const double xi = tx.v[i];
    for (std::size_t j = 0; j < tm.shape[1]; ++j) out.v[j] += xi * tm.at(i, j);
  }
  bool rg = needs_grad(m) || needs_grad(x);
  return push(std::move(out), rg, [x, m](Tape& t, const Tensor& g) {
    const Tensor& tx2 = t.value(x);
    const Tensor& tm2 = t.value(m);
    if (t.needs_grad(x)) {
      Tensor dx = Tensor::zeros(tx2.shape);
      for (std::size_t i = 0; i < tm2.shape[0]; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < tm2.shape[1]; ++j) s += tm2.at(i, j) * g.v[j];
        dx.v[i] = s;
      }
      t.add_grad(x, dx);
    }
    if (t.needs_grad(m)) {
      Tensor dm = Tensor::zeros(tm2.shape);
      for (std::size_t i = 0; i < tm2.shape[0]; ++i)
        for (std::size_t j = 0; j < tm2.shape[1]; ++j) dm.at(i, j) = tx2.v[i] * g.v[j];
      t.add_grad(m, dm);
    }
  });
}

// --- nonlinearities and reductions -------------------------------------------

namespace {
// softmax over a contiguous stretch, numerically stable
void softmax_span(const double* x, double* y, std::size_t n) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= z;
}
}  // namespace

Var Tape::softmax(Var a) {
  const Tensor& ta = value(a);
  check(ta.rank() >= 1 && ta.shape.back() > 0, "softmax", ta.shape_str());
  Tensor out = ta;
  const std::size_t d = ta.shape.back();
  for (std::size_t off = 0; off < ta.size(); off += d)
    softmax_span(ta.v.data() + off, out.v.data() + off, d);
  Var self = push(std::move(out), needs_grad(a), nullptr);
  nodes_[static_cast<std::size_t>(self)].back = [a, self, d](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(self);
    Tensor da = Tensor::zeros(y.shape);
    for (std::size_t off = 0; off < y.size(); off += d) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += g.v[off + i] * y.v[off + i];
      for (std::size_t i = 0; i < d; ++i)
        da.v[off + i] = y.v[off + i] * (g.v[off + i] - dot);
    }
    t.add_grad(a, da);
  };
  return self;
}

Var Tape::sigmoid(Var a) {
  const Tensor& ta = value(a);
  Tensor out = ta;
  for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
  Var self = push(std::move(out), needs_grad(a), nullptr);
  nodes_[static_cast<std::size_t>(self)].back = [a, self](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(self);
    Tensor da = g;
    for (std::size_t i = 0; i < da.size(); ++i) da.v[i] *= y.v[i] * (1.0 - y.v[i]);
    t.add_grad(a, da);
  };
  return self;
}

Var Tape::relu(Var a) {
  const Tensor& ta = value(a);
  Tensor out = ta;
  for (auto& x : out.v) x = x > 0 ? x : 0.0;
  return push(std::move(out), needs_grad(a), [a](Tape& t, const Tensor& g) {
    const Tensor& tin = t.value(a);
    Tensor da = g;
    for (std::size_t i = 0; i < da.size(); ++i)
      if (tin.v[i] <= 0) da.v[i] = 0;
    t.add_grad(a, da);
  });
}

Var Tape::logsumexp(Var a) {
  const Tensor& ta = value(a);
  check(ta.rank() >= 1 && ta.shape.back() > 0, "logsumexp", ta.shape_str());
  const std::size_t d = ta.shape.back();
  std::vector<std::size_t> out_shape(ta.shape.begin(), ta.shape.end() - 1);
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* x = ta.v.data() + r * d;
    double mx = x[0];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double z = 0;
    for (std::size_t i = 0; i < d; ++i) z += std::exp(x[i] - mx);
    out.v[r] = mx + std::log(z);
  }
  return push(std::move(out), needs_grad(a), [a, d](Tape& t, const Tensor& g) {
    const Tensor& tin = t.value(a);
    Tensor da = Tensor::zeros(tin.shape);
    for (std::size_t r = 0; r < g.size(); ++r) {
      softmax_span(tin.v.data() + r * d, da.v.data() + r * d, d);
      for (std::size_t i = 0; i < d; ++i) da.v[r * d + i] *= g.v[r];
    }
    t.add_grad(a, da);
  });
}

Var Tape::sum(Var a) {
  const Tensor& ta = value(a);
  double s = 0;
  for (double x : ta.v) s += x;
  return push(Tensor::scalar(s), needs_grad(a), [a](Tape& t, const Tensor& g) {
    Tensor da = Tensor::full(t.value(a).shape, g.v[0]);
    t.add_grad(a, da);
  });
}

Var Tape::mean(Var a) {
  const Tensor& ta = value(a);
  check(ta.size() > 0, "mean", "empty tensor");
  double s = 0;
  for (double x : ta.v) s += x;
  const double inv = 1.0 / static_cast<double>(ta.size());
  return push(Tensor::scalar(s * inv), needs_grad(a), [a, inv](Tape& t, const Tensor& g) {
    Tensor da = Tensor::full(t.value(a).shape, g.v[0] * inv);
    t.add_grad(a, da);
  });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& tx = value(x);
  const Tensor& tg = value(gamma);
  const Tensor& tb = value(beta);
  check(tx.rank() == 2 && tg.rank() == 1 && tb.rank() == 1 && tg.shape[0] == tx.shape[1] &&
            tb.shape[0] == tx.shape[1],
        "layer_norm", tx.shape_str());
  const std::size_t n = tx.shape[0], d = tx.shape[1];
  Tensor out = Tensor::zeros(tx.shape);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += tx.at(i, j);
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = tx.at(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      out.at(i, j) = (tx.at(i, j) - mu) * inv * tg.v[j] + tb.v[j];
  }
  bool rg = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  return push(std::move(out), rg, [x, gamma, beta, eps](Tape& t, const Tensor& g) {
    const Tensor& tx2 = t.value(x);
    const Tensor& tg2 = t.value(gamma);
    const std::size_t n = tx2.shape[0], d = tx2.shape[1];
    Tensor dx = Tensor::zeros(tx2.shape);
    Tensor dgamma = Tensor::zeros(tg2.shape);
    Tensor dbeta = Tensor::zeros(tg2.shape);
    for (std::size_t i = 0; i < n; ++i) {
      double mu = 0;
      for (std::size_t j = 0; j < d; ++j) mu += tx2.at(i, j);
      mu /= static_cast<double>(d);
      double var = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = tx2.at(i, j) - mu;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      // xhat_j, dxhat_j = g_j * gamma_j
      double mean_dxhat = 0, mean_dxhat_xhat = 0;
      std::vector<double> xhat(d), dxhat(d);
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (tx2.at(i, j) - mu) * inv;
        dxhat[j] = g.at(i, j) * tg2.v[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
        dgamma.v[j] += g.at(i, j) * xhat[j];
        dbeta.v[j] += g.at(i, j);
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j)
        dx.at(i, j) = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv;
    }
    t.add_grad(x, dx);
    t.add_grad(gamma, dgamma);
    t.add_grad(beta, dbeta);
  });
}

Var Tape::dropout(Var a, double rate, bool training, Rng& rng) {
  if (!training || rate == 0.0) return a;
  check(rate > 0.0 && rate < 1.0, "dropout", "rate must be in [0,1)");
  const Tensor& ta = value(a);
  const double keep = 1.0 - rate;
  Tensor mask = Tensor::zeros(ta.shape);
  for (auto& m : mask.v) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= mask.v[i];
  return push(std::move(out), needs_grad(a),
              [a, mask = std::move(mask)](Tape& t, const Tensor& g) {
                Tensor da = g;
                for (std::size_t i = 0; i < da.size(); ++i) da.v[i] *= mask.v[i];
                t.add_grad(a, da);
              });
}

Tensor relative_position_table(std::size_t n, std::size_t dim) {
  Tensor table = Tensor::zeros({2 * n - 1, dim});
  for (std::size_t r = 0; r < 2 * n - 1; ++r) {
    const double t = static_cast<double>(static_cast<long long>(r) -
                                         static_cast<long long>(n - 1));
    for (std::size_t j = 0; j < dim; ++j) {
      const std::size_t pair = j / 2;
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(dim));
      table.at(r, j) = (j % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
    }
  }
  return table;
}

}  // namespace saner::ad
