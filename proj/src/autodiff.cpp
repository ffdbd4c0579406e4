#include "moe/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "moe/error.hpp"
#include "moe/gating.hpp"

namespace moe {

const Tensor& Var::value() const {
  require(tape_ != nullptr, ErrorKind::InvalidArgument, "use of an unbound Var");
  return tape_->value(*this);
}

Var GradientTape::parameter(const std::string& name, const Tensor& value) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var(this, it->second);
  Node node;
  node.ref = &value;
  node.requires_grad = !(frozen_ && frozen_(name));
  nodes_.push_back(std::move(node));
  param_ids_.emplace(name, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var GradientTape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var GradientTape::record(Tensor value, std::span<const Var> inputs, Backward backward,
                         std::string_view op) {
  check_finite(value, op);
  Node node;
  node.owned = std::move(value);
  for (const Var& in : inputs) {
    require(in.tape_ == this, ErrorKind::InvalidArgument,
            std::string(op) + ": input recorded on a different tape");
    node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& GradientTape::value(Var v) const { return nodes_.at(v.id_).value(); }

bool GradientTape::requires_grad(Var v) const { return nodes_.at(v.id_).requires_grad; }

Tensor& GradientTape::grad(Var v) {
  Node& node = nodes_.at(v.id_);
  if (!node.has_grad) {
    node.grad = Tensor(node.value().shape());
    node.has_grad = true;
  }
  return node.grad;
}

void GradientTape::backward(Var loss) {
  require(loss.tape_ == this, ErrorKind::InvalidArgument, "backward: loss is from another tape");
  require(value(loss).size() == 1, ErrorKind::ShapeMismatch,
          "backward: loss must be a scalar, got " + shape_string(value(loss).shape()));
  require(requires_grad(loss), ErrorKind::InvalidArgument,
          "backward: loss is not connected to any parameter on the tape");
  grad(loss)[0] = 1.0f;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    node.backward(*this, node.grad);
  }
  gradients_.clear();
  for (const auto& [name, id] : param_ids_) {
    Node& node = nodes_[id];
    if (!node.requires_grad) continue;
    gradients_.emplace(name, node.has_grad ? std::move(node.grad) : Tensor(node.value().shape()));
    node.has_grad = false;
  }
}

const Tensor& GradientTape::gradient(std::string_view name) const {
  auto it = gradients_.find(name);
  require(it != gradients_.end(), ErrorKind::InvalidArgument,
          "no gradient recorded for parameter '" + std::string(name) + "'");
  return it->second;
}

namespace ad {
namespace {

GradientTape& tape_of(Var v) {
  require(v.valid(), ErrorKind::InvalidArgument, "use of an unbound Var");
  return *v.tape();
}

void require_matrix(const Tensor& t, std::string_view op) {
  require(t.rank() == 2, ErrorKind::ShapeMismatch,
          std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch,
          std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
              shape_string(b.shape()) + " differ");
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  require(av.dim(1) == bv.dim(0), ErrorKind::ShapeMismatch,
          "matmul: cannot multiply " + shape_string(av.shape()) + " by " +
              shape_string(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  kernels::matmul(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const Var inputs[] = {a, b};
  return tape_of(a).record(
      std::move(out), inputs,
      [a, b, m, k, n](GradientTape& tape, const Tensor& g) {
        const Tensor& av = tape.value(a);
        const Tensor& bv = tape.value(b);
        if (tape.requires_grad(a)) {
          float* da = tape.grad(a).data().data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              da[i * k + p] += kernels::dot(g.row(i), bv.row(p), n);
            }
          }
        }
        if (tape.requires_grad(b)) {
          kernels::matmul_at_acc(av.data().data(), g.data().data(), tape.grad(b).data().data(),
                                 m, k, n);
        }
      },
      "matmul");
}

Var linear(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_matrix(xv, "linear");
  require_matrix(wv, "linear");
  require(xv.dim(1) == wv.dim(1), ErrorKind::ShapeMismatch,
          "linear: input " + shape_string(xv.shape()) + " vs weight " +
              shape_string(wv.shape()));
  const std::size_t t = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  Tensor out({t, out_dim});
  kernels::matmul_bt(xv.data().data(), wv.data().data(), out.data().data(), t, in, out_dim);
  const Var inputs[] = {x, w};
  return tape_of(x).record(
      std::move(out), inputs,
      [x, w, t, in, out_dim](GradientTape& tape, const Tensor& g) {
        if (tape.requires_grad(x)) {
          kernels::matmul_acc(g.data().data(), tape.value(w).data().data(),
                              tape.grad(x).data().data(), t, out_dim, in);
        }
        if (tape.requires_grad(w)) {
          kernels::matmul_at_acc(g.data().data(), tape.value(x).data().data(),
                                 tape.grad(w).data().data(), t, out_dim, in);
        }
      },
      "linear");
}

Var linear(Var x, Var w, Var bias) {
  Var y = linear(x, w);
  const Tensor& yv = y.value();
  const Tensor& bv = bias.value();
  require(bv.size() == yv.cols(), ErrorKind::ShapeMismatch,
          "linear: bias " + shape_string(bv.shape()) + " vs output " + shape_string(yv.shape()));
  Tensor out = yv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    float* o = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) o[c] += bv[c];
  }
  const Var inputs[] = {y, bias};
  return tape_of(x).record(
      std::move(out), inputs,
      [y, bias](GradientTape& tape, const Tensor& g) {
        if (tape.requires_grad(y)) {
          auto dy = tape.grad(y).data();
          for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += g[i];
        }
        if (tape.requires_grad(bias)) {
          Tensor& db = tape.grad(bias);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const float* gr = g.row(r);
            for (std::size_t c = 0; c < g.cols(); ++c) db[c] += gr[c];
          }
        }
      },
      "linear_bias");
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const Var inputs[] = {a, b};
  return tape_of(a).record(
      std::move(out), inputs,
      [a, b](GradientTape& tape, const Tensor& g) {
        for (Var v : {a, b}) {
          if (!tape.requires_grad(v)) continue;
          auto d = tape.grad(v).data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
      },
      "add");
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const Var inputs[] = {a, b};
  return tape_of(a).record(
      std::move(out), inputs,
      [a, b](GradientTape& tape, const Tensor& g) {
        const Tensor& av = tape.value(a);
        const Tensor& bv = tape.value(b);
        if (tape.requires_grad(a)) {
          auto d = tape.grad(a).data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
        }
        if (tape.requires_grad(b)) {
          auto d = tape.grad(b).data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
        }
      },
      "mul");
}

Var scale(Var a, float factor) {
  Tensor out = a.value();
  for (float& v : out.data()) v *= factor;
  const Var inputs[] = {a};
  return tape_of(a).record(
      std::move(out), inputs,
      [a, factor](GradientTape& tape, const Tensor& g) {
        auto d = tape.grad(a).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor;
      },
      "scale");
}

Var sum(Var a) {
  double total = 0.0;
  for (float v : a.value().data()) total += v;
  const Var inputs[] = {a};
  return tape_of(a).record(
      Tensor::scalar(static_cast<float>(total)), inputs,
      [a](GradientTape& tape, const Tensor& g) {
        for (float& d : tape.grad(a).data()) d += g[0];
      },
      "sum");
}

Var softmax(Var x) {
  auto out = std::make_shared<Tensor>(x.value());
  for (std::size_t r = 0; r < out->rows(); ++r) kernels::softmax_inplace(out->row(r), out->cols());
  const Var inputs[] = {x};
  Tensor value = *out;
  return tape_of(x).record(
      std::move(value), inputs,
      [x, y = std::shared_ptr<const Tensor>(out)](GradientTape& tape, const Tensor& g) {
        Tensor& dx = tape.grad(x);
        for (std::size_t r = 0; r < y->rows(); ++r) {
          const float* yr = y->row(r);
          const float* gr = g.row(r);
          double inner = 0.0;
          for (std::size_t c = 0; c < y->cols(); ++c) inner += static_cast<double>(gr[c]) * yr[c];
          float* d = dx.row(r);
          for (std::size_t c = 0; c < y->cols(); ++c) {
            d[c] += yr[c] * (gr[c] - static_cast<float>(inner));
          }
        }
      },
      "softmax");
}

Var rms_norm(Var x, Var gain) {
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  require(gv.size() == xv.cols(), ErrorKind::ShapeMismatch,
          "rms_norm: gain " + shape_string(gv.shape()) + " vs input " + shape_string(xv.shape()));
  Tensor out(xv.shape());
  auto inv = std::make_shared<std::vector<float>>(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    (*inv)[r] = kernels::rms_norm_row(xv.row(r), gv.data().data(), out.row(r), xv.cols());
  }
  const Var inputs[] = {x, gain};
  return tape_of(x).record(
      std::move(out), inputs,
      [x, gain, inv](GradientTape& tape, const Tensor& g) {
        const Tensor& xv = tape.value(x);
        const Tensor& gv = tape.value(gain);
        const std::size_t n = xv.cols();
        const bool want_x = tape.requires_grad(x);
        const bool want_gain = tape.requires_grad(gain);
        Tensor* dx = want_x ? &tape.grad(x) : nullptr;
        Tensor* dgain = want_gain ? &tape.grad(gain) : nullptr;
        std::vector<float> dxhat(n);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const float* xr = xv.row(r);
          const float* gr = g.row(r);
          const float s = (*inv)[r];
          if (want_gain) {
            for (std::size_t c = 0; c < n; ++c) (*dgain)[c] += gr[c] * xr[c] * s;
          }
          if (want_x) {
            double inner = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              dxhat[c] = gr[c] * gv[c];
              inner += static_cast<double>(dxhat[c]) * xr[c] * s;
            }
            const float mean = static_cast<float>(inner / static_cast<double>(n));
            float* d = dx->row(r);
            for (std::size_t c = 0; c < n; ++c) d[c] += s * (dxhat[c] - xr[c] * s * mean);
          }
        }
      },
      "rms_norm");
}

Var embedding(Var table, std::span<const Token> tokens) {
  const Tensor& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  Tensor out({tokens.size(), d});
  std::vector<Token> ids(tokens.begin(), tokens.end());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && static_cast<std::size_t>(ids[r]) < vocab, ErrorKind::InvalidArgument,
            "embedding: token " + std::to_string(ids[r]) + " outside vocabulary of " +
                std::to_string(vocab));
    std::copy_n(tv.row(static_cast<std::size_t>(ids[r])), d, out.row(r));
  }
  const Var inputs[] = {table};
  return tape_of(table).record(
      std::move(out), inputs,
      [table, ids = std::move(ids), d](GradientTape& tape, const Tensor& g) {
        Tensor& dt = tape.grad(table);
        for (std::size_t r = 0; r < ids.size(); ++r) {
          float* row = dt.row(static_cast<std::size_t>(ids[r]));
          const float* gr = g.row(r);
          for (std::size_t c = 0; c < d; ++c) row[c] += gr[c];
        }
      },
      "embedding");
}

namespace {

struct RotaryTable {
  std::vector<float> cos, sin;  // [t x half]
  std::size_t half = 0;
};

std::shared_ptr<RotaryTable> rotary_table(std::size_t t, std::size_t head_dim, float base) {
  auto table = std::make_shared<RotaryTable>();
  table->half = head_dim / 2;
  table->cos.resize(t * table->half);
  table->sin.resize(t * table->half);
  for (std::size_t p = 0; p < t; ++p) {
    for (std::size_t i = 0; i < table->half; ++i) {
      const double freq =
          std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / head_dim);
      const double angle = static_cast<double>(p) * freq;
      table->cos[p * table->half + i] = static_cast<float>(std::cos(angle));
      table->sin[p * table->half + i] = static_cast<float>(std::sin(angle));
    }
  }
  return table;
}

}  // namespace

Var rope(Var x, std::size_t n_heads, float base) {
  const Tensor& xv = x.value();
  require_matrix(xv, "rope");
  const std::size_t t = xv.dim(0), d = xv.dim(1);
  require(n_heads >= 1 && d % n_heads == 0 && (d / n_heads) % 2 == 0,
          ErrorKind::ShapeMismatch,
          "rope: width " + std::to_string(d) + " is not divisible into even heads");
  const std::size_t head_dim = d / n_heads;
  auto table = rotary_table(t, head_dim, base);
  const std::size_t half = table->half;
  Tensor out(xv.shape());
  for (std::size_t p = 0; p < t; ++p) {
    const float* xr = xv.row(p);
    float* o = out.row(p);
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t c0 = h * head_dim + 2 * i;
        const float cs = table->cos[p * half + i], sn = table->sin[p * half + i];
        o[c0] = xr[c0] * cs - xr[c0 + 1] * sn;
        o[c0 + 1] = xr[c0] * sn + xr[c0 + 1] * cs;
      }
    }
  }
  const Var inputs[] = {x};
  return tape_of(x).record(
      std::move(out), inputs,
      [x, table, n_heads, head_dim](GradientTape& tape, const Tensor& g) {
        Tensor& dx = tape.grad(x);
        const std::size_t half = table->half;
        for (std::size_t p = 0; p < g.rows(); ++p) {
          const float* gr = g.row(p);
          float* d = dx.row(p);
          for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < half; ++i) {
              const std::size_t c0 = h * head_dim + 2 * i;
              const float cs = table->cos[p * half + i], sn = table->sin[p * half + i];
              d[c0] += gr[c0] * cs + gr[c0 + 1] * sn;
              d[c0 + 1] += -gr[c0] * sn + gr[c0 + 1] * cs;
            }
          }
        }
      },
      "rope");
}

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix(qv, "attention");
  require_same_shape(qv, kv, "attention");
  require_same_shape(qv, vv, "attention");
  const std::size_t t = qv.dim(0), d = qv.dim(1);
  require(n_heads >= 1 && d % n_heads == 0, ErrorKind::ShapeMismatch,
          "attention: width " + std::to_string(d) + " not divisible by " +
              std::to_string(n_heads) + " heads");
  const std::size_t hd = d / n_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  // probs[h][i][j] for j <= i.
  auto probs = std::make_shared<std::vector<float>>(n_heads * t * t, 0.0f);
  Tensor out({t, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      float* p = probs->data() + (h * t + i) * t;
      const float* qi = qv.row(i) + h * hd;
      for (std::size_t j = 0; j <= i; ++j) p[j] = kernels::dot(qi, kv.row(j) + h * hd, hd) * scale;
      kernels::softmax_inplace(p, i + 1);
      float* o = out.row(i) + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        const float* vj = vv.row(j) + h * hd;
        for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * vj[c];
      }
    }
  }
  const Var inputs[] = {q, k, v};
  return tape_of(q).record(
      std::move(out), inputs,
      [q, k, v, probs, n_heads, hd, t, scale](GradientTape& tape, const Tensor& g) {
        const Tensor& qv = tape.value(q);
        const Tensor& kv = tape.value(k);
        const Tensor& vv = tape.value(v);
        const bool want_q = tape.requires_grad(q);
        const bool want_k = tape.requires_grad(k);
        const bool want_v = tape.requires_grad(v);
        Tensor* dq = want_q ? &tape.grad(q) : nullptr;
        Tensor* dk = want_k ? &tape.grad(k) : nullptr;
        Tensor* dv = want_v ? &tape.grad(v) : nullptr;
        std::vector<float> dp(t);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t i = 0; i < t; ++i) {
            const float* p = probs->data() + (h * t + i) * t;
            const float* gi = g.row(i) + h * hd;
            double inner = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              dp[j] = kernels::dot(gi, vv.row(j) + h * hd, hd);
              inner += static_cast<double>(dp[j]) * p[j];
              if (want_v) {
                float* dvj = dv->row(j) + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[j] * gi[c];
              }
            }
            const float inner_f = static_cast<float>(inner);
            for (std::size_t j = 0; j <= i; ++j) {
              const float ds = p[j] * (dp[j] - inner_f) * scale;
              if (ds == 0.0f) continue;
              if (want_q) {
                float* dqi = dq->row(i) + h * hd;
                const float* kj = kv.row(j) + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
              }
              if (want_k) {
                float* dkj = dk->row(j) + h * hd;
                const float* qi = qv.row(i) + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      },
      "causal_attention");
}

Var swiglu(Var gate, Var up) {
  const Tensor& gv = gate.value();
  const Tensor& uv = up.value();
  require_same_shape(gv, uv, "swiglu");
  Tensor out(gv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float a = gv[i];
    out[i] = a / (1.0f + std::exp(-a)) * uv[i];
  }
  const Var inputs[] = {gate, up};
  return tape_of(gate).record(
      std::move(out), inputs,
      [gate, up](GradientTape& tape, const Tensor& g) {
        const Tensor& gv = tape.value(gate);
        const Tensor& uv = tape.value(up);
        const bool want_gate = tape.requires_grad(gate);
        const bool want_up = tape.requires_grad(up);
        Tensor* dgate = want_gate ? &tape.grad(gate) : nullptr;
        Tensor* dup = want_up ? &tape.grad(up) : nullptr;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float a = gv[i];
          const float sig = 1.0f / (1.0f + std::exp(-a));
          if (want_gate) (*dgate)[i] += g[i] * uv[i] * sig * (1.0f + a * (1.0f - sig));
          if (want_up) (*dup)[i] += g[i] * a * sig;
        }
      },
      "swiglu");
}

Var cross_entropy(Var logits, std::span<const Token> targets) {
  const Tensor& lv = logits.value();
  const float loss = moe::cross_entropy(lv, targets);
  std::vector<Token> ids(targets.begin(), targets.end());
  const Var inputs[] = {logits};
  return tape_of(logits).record(
      Tensor::scalar(loss), inputs,
      [logits, ids = std::move(ids)](GradientTape& tape, const Tensor& g) {
        const Tensor& lv = tape.value(logits);
        Tensor& dl = tape.grad(logits);
        const std::size_t vocab = lv.cols();
        const float coeff = g[0] / static_cast<float>(ids.size());
        std::vector<float> p(vocab);
        for (std::size_t r = 0; r < ids.size(); ++r) {
          std::copy_n(lv.row(r), vocab, p.data());
          kernels::softmax_inplace(p.data(), vocab);
          p[static_cast<std::size_t>(ids[r])] -= 1.0f;
          float* d = dl.row(r);
          for (std::size_t c = 0; c < vocab; ++c) d[c] += coeff * p[c];
        }
      },
      "cross_entropy");
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
  const Tensor& xv = x.value();
  require_matrix(xv, "gather_rows");
  const std::size_t d = xv.dim(1);
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < xv.dim(0), ErrorKind::InvalidArgument, "gather_rows: row out of range");
    std::copy_n(xv.row(rows[r]), d, out.row(r));
  }
  const Var inputs[] = {x};
  return tape_of(x).record(
      std::move(out), inputs,
      [x, rows = std::move(rows), d](GradientTape& tape, const Tensor& g) {
        Tensor& dx = tape.grad(x);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          float* o = dx.row(rows[r]);
          const float* gr = g.row(r);
          for (std::size_t c = 0; c < d; ++c) o[c] += gr[c];
        }
      },
      "gather_rows");
}

Var scatter_gated(Var y, std::vector<std::size_t> rows, Var gates, std::size_t column,
                  std::size_t out_rows) {
  const Tensor& yv = y.value();
  const Tensor& gv = gates.value();
  require_matrix(yv, "scatter_gated");
  require_matrix(gv, "scatter_gated");
  require(yv.dim(0) == rows.size() && gv.dim(0) == out_rows && column < gv.dim(1),
          ErrorKind::ShapeMismatch, "scatter_gated: inconsistent shapes");
  const std::size_t d = yv.dim(1);
  Tensor out({out_rows, d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < out_rows, ErrorKind::InvalidArgument, "scatter_gated: row out of range");
    const float w = gv.at(rows[r], column);
    const float* yr = yv.row(r);
    float* o = out.row(rows[r]);
    for (std::size_t c = 0; c < d; ++c) o[c] = yr[c] * w;
  }
  const Var inputs[] = {y, gates};
  return tape_of(y).record(
      std::move(out), inputs,
      [y, gates, rows = std::move(rows), column, d](GradientTape& tape, const Tensor& g) {
        const Tensor& yv = tape.value(y);
        const Tensor& gv = tape.value(gates);
        const bool want_y = tape.requires_grad(y);
        const bool want_gates = tape.requires_grad(gates);
        Tensor* dy = want_y ? &tape.grad(y) : nullptr;
        Tensor* dgates = want_gates ? &tape.grad(gates) : nullptr;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const float* gr = g.row(rows[r]);
          if (want_y) {
            const float w = gv.at(rows[r], column);
            float* o = dy->row(r);
            for (std::size_t c = 0; c < d; ++c) o[c] += gr[c] * w;
          }
          if (want_gates) dgates->at(rows[r], column) += kernels::dot(gr, yv.row(r), d);
        }
      },
      "scatter_gated");
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  require_matrix(xv, "mean_rows");
  const std::size_t t = xv.dim(0), d = xv.dim(1);
  require(t >= 1, ErrorKind::InvalidArgument, "mean_rows: no rows");
  Tensor out({1, d});
  for (std::size_t c = 0; c < d; ++c) {
    double total = 0.0;
    for (std::size_t r = 0; r < t; ++r) total += xv.at(r, c);
    out[c] = static_cast<float>(total / static_cast<double>(t));
  }
  const Var inputs[] = {x};
  return tape_of(x).record(
      std::move(out), inputs,
      [x, t, d](GradientTape& tape, const Tensor& g) {
        Tensor& dx = tape.grad(x);
        const float inv = 1.0f / static_cast<float>(t);
        for (std::size_t r = 0; r < t; ++r) {
          float* o = dx.row(r);
          for (std::size_t c = 0; c < d; ++c) o[c] += g[c] * inv;
        }
      },
      "mean_rows");
}

Var scale_by(Var y, Var weights, std::size_t index) {
  const Tensor& yv = y.value();
  const Tensor& wv = weights.value();
  require(index < wv.size(), ErrorKind::InvalidArgument, "scale_by: weight index out of range");
  const float w = wv[index];
  Tensor out = yv;
  for (float& v : out.data()) v *= w;
  const Var inputs[] = {y, weights};
  return tape_of(y).record(
      std::move(out), inputs,
      [y, weights, index](GradientTape& tape, const Tensor& g) {
        const float w = tape.value(weights)[index];
        if (tape.requires_grad(y)) {
          auto d = tape.grad(y).data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * w;
        }
        if (tape.requires_grad(weights)) {
          const Tensor& yv = tape.value(y);
          double inner = 0.0;
          for (std::size_t i = 0; i < yv.size(); ++i) inner += static_cast<double>(g[i]) * yv[i];
          tape.grad(weights)[index] += static_cast<float>(inner);
        }
      },
      "scale_by");
}

Var top_k_softmax(Var scores, std::size_t k) {
  const Tensor& sv = scores.value();
  auto out = std::make_shared<Tensor>(sv.shape());
  for (std::size_t r = 0; r < sv.rows(); ++r) {
    const auto w = moe::top_k_softmax(std::span<const float>(sv.row(r), sv.cols()), k);
    std::copy(w.begin(), w.end(), out->row(r));
  }
  const Var inputs[] = {scores};
  Tensor value = *out;
  return tape_of(scores).record(
      std::move(value), inputs,
      [scores, y = std::shared_ptr<const Tensor>(out)](GradientTape& tape, const Tensor& g) {
        Tensor& ds = tape.grad(scores);
        for (std::size_t r = 0; r < y->rows(); ++r) {
          const float* yr = y->row(r);
          const float* gr = g.row(r);
          double inner = 0.0;
          for (std::size_t c = 0; c < y->cols(); ++c) inner += static_cast<double>(gr[c]) * yr[c];
          float* d = ds.row(r);
          for (std::size_t c = 0; c < y->cols(); ++c) {
            if (yr[c] != 0.0f) d[c] += yr[c] * (gr[c] - static_cast<float>(inner));
          }
        }
      },
      "top_k_softmax");
}

}  // namespace ad
}  // namespace moe
