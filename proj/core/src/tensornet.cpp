#include "rishgen/tensornet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

namespace rishgen::tn {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ArgumentError("shape with non-positive dim " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

bool& grad_enabled() {
  static bool enabled = true;
  return enabled;
}

namespace {

std::shared_ptr<Node> make_value_node(Shape s, std::vector<double> values) {
  auto n = std::make_shared<Node>();
  if (shape_numel(s) != values.size()) {
    throw ArgumentError("tensor data length does not match shape " + shape_str(s));
  }
  n->shape = std::move(s);
  n->value = std::move(values);
  return n;
}

// Wires parents/backward only when recording is on and some parent needs
// gradients; otherwise the result is a plain value node.
Tensor make_op(Shape s, std::vector<double> values,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backward_fn) {
  auto n = make_value_node(std::move(s), std::move(values));
  if (grad_enabled()) {
    bool needs = false;
    for (auto& p : parents) needs = needs || p->requires_grad;
    if (needs) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ArgumentError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  }
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Tensor Tensor::zeros(Shape s) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_numel(s), 0.0);
  n->shape = std::move(s);
  return Tensor(n);
}

Tensor Tensor::full(Shape s, double fill) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_numel(s), fill);
  n->shape = std::move(s);
  return Tensor(n);
}

Tensor Tensor::from_data(Shape s, std::vector<double> values) {
  return Tensor(make_value_node(std::move(s), std::move(values)));
}

Tensor Tensor::leaf(Shape s, std::vector<double> values) {
  auto n = make_value_node(std::move(s), std::move(values));
  n->requires_grad = true;
  return Tensor(n);
}

double Tensor::scalar() const {
  if (numel() != 1) {
    throw ArgumentError("scalar() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ArgumentError("backward: loss must be a scalar, got shape " +
                        shape_str(loss.shape()));
  }
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS for a deterministic topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  // Interior grads die with the tape; only leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.clear();
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
    for (int p = 0; p < 2; ++p) {
      if (!n.parents[p]->requires_grad) continue;
      auto& g = n.parents[p]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  return make_op(a.shape(), std::move(out), {a.node()}, [s](Node& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
  });
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x.values()[i] * sigmoid(x.values()[i]);
  }
  return make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    const auto& xv = n.parents[0]->value;
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double s = sigmoid(xv[i]);
      g[i] += n.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.values()[i]);
  return make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    const auto& xv = n.parents[0]->value;
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) g[i] += n.grad[i];
    }
  });
}

Tensor softplus(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = x.values()[i];
    out[i] = v > 30.0 ? v : std::log1p(std::exp(v));
  }
  return make_op(x.shape(), std::move(out), {x.node()}, [](Node& n) {
    const auto& xv = n.parents[0]->value;
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * sigmoid(xv[i]);
  });
}

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel()) {
    throw ArgumentError("reshape: element count mismatch " + shape_str(x.shape()) +
                        " -> " + shape_str(s));
  }
  return make_op(std::move(s), x.values(), {x.node()}, [](Node& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Tensor detach(const Tensor& x) { return Tensor::from_data(x.shape(), x.values()); }

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_op({1}, {acc}, {x.node()}, [](Node& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_op({1}, {acc * inv}, {x.node()}, [inv](Node& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv;
  });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double d = a.values()[i] - b.values()[i];
    acc += d * d;
  }
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_op({1}, {acc * inv}, {a.node(), b.node()}, [inv](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    const double c = 2.0 * inv * n.grad[0];
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * (av[i] - bv[i]);
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= c * (av[i] - bv[i]);
    }
  });
}

Tensor mae_loss(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mae_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    acc += std::abs(a.values()[i] - b.values()[i]);
  }
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_op({1}, {acc * inv}, {a.node(), b.node()}, [inv](Node& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    const double c = inv * n.grad[0];
    for (int p = 0; p < 2; ++p) {
      if (!n.parents[p]->requires_grad) continue;
      auto& g = n.parents[p]->ensure_grad();
      const double sgn = p == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        double d = av[i] - bv[i];
        if (d > 0) g[i] += sgn * c;
        else if (d < 0) g[i] -= sgn * c;
      }
    }
  });
}

// ------------------------------------------------------------- dense algebra

namespace {

void check_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.shape().size() != rank) {
    throw ArgumentError(std::string(what) + ": expected rank " + std::to_string(rank) +
                        ", got shape " + shape_str(t.shape()));
  }
}

// c[n,m] += a[n,k] b[k,m]
void gemm_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(i) * k + p];
      const double* brow = b + static_cast<std::size_t>(p) * m;
      double* crow = c + static_cast<std::size_t>(i) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ArgumentError("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), n, k, m);
  return make_op({n, m}, std::move(out), {a.node(), b.node()}, [n, k, m](Node& nd) {
    const double* g = nd.grad.data();
    const double* av = nd.parents[0]->value.data();
    const double* bv = nd.parents[1]->value.data();
    if (nd.parents[0]->requires_grad) {
      double* ga = nd.parents[0]->ensure_grad().data();
      for (int i = 0; i < n; ++i) {
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g + static_cast<std::size_t>(i) * m;
          const double* brow = bv + static_cast<std::size_t>(p) * m;
          for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga[static_cast<std::size_t>(i) * k + p] += acc;
        }
      }
    }
    if (nd.parents[1]->requires_grad) {
      double* gb = nd.parents[1]->ensure_grad().data();
      for (int p = 0; p < k; ++p) {
        for (int i = 0; i < n; ++i) {
          const double avv = av[static_cast<std::size_t>(i) * k + p];
          const double* grow = g + static_cast<std::size_t>(i) * m;
          double* gbrow = gb + static_cast<std::size_t>(p) * m;
          for (int j = 0; j < m; ++j) gbrow[j] += avv * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  check_rank(a, 2, "transpose");
  const int n = a.shape()[0], m = a.shape()[1];
  std::vector<double> out(a.numel());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out[static_cast<std::size_t>(j) * n + i] = a.values()[static_cast<std::size_t>(i) * m + j];
  return make_op({m, n}, std::move(out), {a.node()}, [n, m](Node& nd) {
    auto& g = nd.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        g[static_cast<std::size_t>(i) * m + j] += nd.grad[static_cast<std::size_t>(j) * n + i];
  });
}

Tensor softmax_rows(const Tensor& a) {
  check_rank(a, 2, "softmax_rows");
  const int n = a.shape()[0], m = a.shape()[1];
  std::vector<double> out(a.numel());
  for (int i = 0; i < n; ++i) {
    const double* row = a.values().data() + static_cast<std::size_t>(i) * m;
    double* orow = out.data() + static_cast<std::size_t>(i) * m;
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < m; ++j) sum += (orow[j] = std::exp(row[j] - mx));
    for (int j = 0; j < m; ++j) orow[j] /= sum;
  }
  return make_op({n, m}, std::move(out), {a.node()}, [n, m](Node& nd) {
    auto& g = nd.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* y = nd.value.data() + static_cast<std::size_t>(i) * m;
      const double* go = nd.grad.data() + static_cast<std::size_t>(i) * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += go[j] * y[j];
      double* gi = g.data() + static_cast<std::size_t>(i) * m;
      for (int j = 0; j < m; ++j) gi[j] += y[j] * (go[j] - dot);
    }
  });
}

Tensor slice_cols(const Tensor& a, int offset, int count) {
  check_rank(a, 2, "slice_cols");
  const int n = a.shape()[0], m = a.shape()[1];
  if (offset < 0 || count <= 0 || offset + count > m) {
    throw ArgumentError("slice_cols: bad range");
  }
  std::vector<double> out(static_cast<std::size_t>(n) * count);
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data() + static_cast<std::size_t>(i) * count,
                a.values().data() + static_cast<std::size_t>(i) * m + offset,
                sizeof(double) * count);
  return make_op({n, count}, std::move(out), {a.node()}, [n, m, offset, count](Node& nd) {
    auto& g = nd.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      double* dst = g.data() + static_cast<std::size_t>(i) * m + offset;
      const double* src = nd.grad.data() + static_cast<std::size_t>(i) * count;
      for (int j = 0; j < count; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "concat_cols");
  check_rank(b, 2, "concat_cols");
  const int n = a.shape()[0], ma = a.shape()[1], mb = b.shape()[1];
  if (b.shape()[0] != n) throw ArgumentError("concat_cols: row count mismatch");
  std::vector<double> out(static_cast<std::size_t>(n) * (ma + mb));
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<std::size_t>(i) * (ma + mb),
                a.values().data() + static_cast<std::size_t>(i) * ma, sizeof(double) * ma);
    std::memcpy(out.data() + static_cast<std::size_t>(i) * (ma + mb) + ma,
                b.values().data() + static_cast<std::size_t>(i) * mb, sizeof(double) * mb);
  }
  return make_op({n, ma + mb}, std::move(out), {a.node(), b.node()}, [n, ma, mb](Node& nd) {
    for (int i = 0; i < n; ++i) {
      const double* src = nd.grad.data() + static_cast<std::size_t>(i) * (ma + mb);
      if (nd.parents[0]->requires_grad) {
        double* ga = nd.parents[0]->ensure_grad().data() + static_cast<std::size_t>(i) * ma;
        for (int j = 0; j < ma; ++j) ga[j] += src[j];
      }
      if (nd.parents[1]->requires_grad) {
        double* gb = nd.parents[1]->ensure_grad().data() + static_cast<std::size_t>(i) * mb;
        for (int j = 0; j < mb; ++j) gb[j] += src[ma + j];
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_rank(x, 2, "linear");
  check_rank(w, 2, "linear");
  const int n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in) {
    throw ArgumentError("linear: weight shape " + shape_str(w.shape()) +
                        " does not accept input " + shape_str(x.shape()));
  }
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != out_dim)) {
    throw ArgumentError("linear: bias shape mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(n) * out_dim);
  for (int i = 0; i < n; ++i) {
    const double* xrow = x.values().data() + static_cast<std::size_t>(i) * in;
    double* orow = out.data() + static_cast<std::size_t>(i) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const double* wrow = w.values().data() + static_cast<std::size_t>(o) * in;
      double acc = b.defined() ? b.values()[o] : 0.0;
      for (int j = 0; j < in; ++j) acc += xrow[j] * wrow[j];
      orow[o] = acc;
    }
  }
  std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  return make_op({n, out_dim}, std::move(out), std::move(parents),
                 [n, in, out_dim](Node& nd) {
                   const double* g = nd.grad.data();
                   const double* xv = nd.parents[0]->value.data();
                   const double* wv = nd.parents[1]->value.data();
                   if (nd.parents[0]->requires_grad) {
                     double* gx = nd.parents[0]->ensure_grad().data();
                     for (int i = 0; i < n; ++i) {
                       for (int o = 0; o < out_dim; ++o) {
                         const double gv = g[static_cast<std::size_t>(i) * out_dim + o];
                         const double* wrow = wv + static_cast<std::size_t>(o) * in;
                         double* gxrow = gx + static_cast<std::size_t>(i) * in;
                         for (int j = 0; j < in; ++j) gxrow[j] += gv * wrow[j];
                       }
                     }
                   }
                   if (nd.parents[1]->requires_grad) {
                     double* gw = nd.parents[1]->ensure_grad().data();
                     for (int i = 0; i < n; ++i) {
                       const double* xrow = xv + static_cast<std::size_t>(i) * in;
                       for (int o = 0; o < out_dim; ++o) {
                         const double gv = g[static_cast<std::size_t>(i) * out_dim + o];
                         double* gwrow = gw + static_cast<std::size_t>(o) * in;
                         for (int j = 0; j < in; ++j) gwrow[j] += gv * xrow[j];
                       }
                     }
                   }
                   if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
                     double* gb = nd.parents[2]->ensure_grad().data();
                     for (int i = 0; i < n; ++i)
                       for (int o = 0; o < out_dim; ++o)
                         gb[o] += g[static_cast<std::size_t>(i) * out_dim + o];
                   }
                 });
}

Tensor embedding_lookup(const Tensor& table, int row) {
  check_rank(table, 2, "embedding_lookup");
  const int rows = table.shape()[0], dim = table.shape()[1];
  if (row < 0 || row >= rows) {
    throw ArgumentError("embedding_lookup: row " + std::to_string(row) + " out of " +
                        std::to_string(rows));
  }
  std::vector<double> out(table.values().begin() + static_cast<std::ptrdiff_t>(row) * dim,
                          table.values().begin() + static_cast<std::ptrdiff_t>(row + 1) * dim);
  return make_op({1, dim}, std::move(out), {table.node()}, [row, dim](Node& nd) {
    double* g = nd.parents[0]->ensure_grad().data() + static_cast<std::size_t>(row) * dim;
    for (int j = 0; j < dim; ++j) g[j] += nd.grad[j];
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& rows) {
  check_rank(table, 2, "gather_rows");
  const int nrows = table.shape()[0], dim = table.shape()[1];
  std::vector<double> out(rows.size() * static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= nrows) throw ArgumentError("gather_rows: index out of range");
    std::memcpy(out.data() + i * dim,
                table.values().data() + static_cast<std::size_t>(rows[i]) * dim,
                sizeof(double) * static_cast<std::size_t>(dim));
  }
  auto rows_copy = rows;
  return make_op({static_cast<int>(rows.size()), dim}, std::move(out), {table.node()},
                 [rows_copy, dim](Node& nd) {
                   double* g = nd.parents[0]->ensure_grad().data();
                   for (std::size_t i = 0; i < rows_copy.size(); ++i) {
                     double* dst = g + static_cast<std::size_t>(rows_copy[i]) * dim;
                     const double* src = nd.grad.data() + i * dim;
                     for (int j = 0; j < dim; ++j) dst[j] += src[j];
                   }
                 });
}

// --------------------------------------------------------- volumetric layers

namespace {

struct ConvDims {
  int ci, d, h, w, co, k, pad, od, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt, int stride) {
  check_rank(x, 4, "conv3d input");
  check_rank(wt, 5, "conv3d weight");
  ConvDims c;
  c.ci = x.shape()[0];
  c.d = x.shape()[1];
  c.h = x.shape()[2];
  c.w = x.shape()[3];
  c.co = wt.shape()[0];
  c.k = wt.shape()[2];
  if (wt.shape()[1] != c.ci) {
    throw ArgumentError("conv3d: weight expects " + std::to_string(wt.shape()[1]) +
                        " input channels, input has " + std::to_string(c.ci));
  }
  if (wt.shape()[3] != c.k || wt.shape()[4] != c.k || (c.k != 1 && c.k != 3)) {
    throw ArgumentError("conv3d: kernel must be cubic with size 1 or 3");
  }
  if (stride != 1 && stride != 2) throw ArgumentError("conv3d: stride must be 1 or 2");
  c.pad = c.k / 2;
  c.od = (c.d + 2 * c.pad - c.k) / stride + 1;
  c.oh = (c.h + 2 * c.pad - c.k) / stride + 1;
  c.ow = (c.w + 2 * c.pad - c.k) / stride + 1;
  return c;
}

}  // namespace

namespace {

// One output row accumulating the three x-taps of one input row in a single
// pass; the hot output row stays in cache and each loaded input element feeds
// three fused multiply-adds.
inline void conv_taps_row(double* out_row, const double* in_row, const double* w3, int w,
                          int ow, int stride) {
  const double w0 = w3[0], w1 = w3[1], w2 = w3[2];
  if (stride == 1) {
    if (ow == 1) {
      out_row[0] += w1 * in_row[0];
      return;
    }
    // ix = ox + kx - 1
    out_row[0] += w1 * in_row[0] + w2 * in_row[1];
    for (int ox = 1; ox < ow - 1; ++ox) {
      out_row[ox] += w0 * in_row[ox - 1] + w1 * in_row[ox] + w2 * in_row[ox + 1];
    }
    out_row[ow - 1] += w0 * in_row[ow - 2] + w1 * in_row[ow - 1];
  } else {
    for (int ox = 0; ox < ow; ++ox) {
      const int ix = 2 * ox - 1;
      double acc = 0.0;
      if (ix >= 0) acc += w0 * in_row[ix];
      acc += w1 * in_row[ix + 1];
      if (ix + 2 < w) acc += w2 * in_row[ix + 2];
      out_row[ox] += acc;
    }
  }
}

// Adjoint of conv_taps_row written in gather form (flipped stencil), so the
// inner loop has no overlapping writes and vectorizes.
inline void conv_taps_row_scatter(double* gin_row, const double* g_row, const double* w3,
                                  int w, int ow, int stride) {
  const double w0 = w3[0], w1 = w3[1], w2 = w3[2];
  if (stride == 1) {
    // gin[ix] += w2 g[ix-1] + w1 g[ix] + w0 g[ix+1], edges clipped (ow == w).
    if (w == 1) {
      gin_row[0] += w1 * g_row[0];
      return;
    }
    gin_row[0] += w1 * g_row[0] + w0 * g_row[1];
    for (int ix = 1; ix < w - 1; ++ix) {
      gin_row[ix] += w2 * g_row[ix - 1] + w1 * g_row[ix] + w0 * g_row[ix + 1];
    }
    gin_row[w - 1] += w2 * g_row[w - 2] + w1 * g_row[w - 1];
  } else {
    // Even input positions take the center tap, odd ones the two side taps.
    for (int m = 0; m < ow; ++m) gin_row[2 * m] += w1 * g_row[m];
    for (int m = 0; 2 * m + 1 < w; ++m) {
      double acc = w2 * g_row[m];
      if (m + 1 < ow) acc += w0 * g_row[m + 1];
      gin_row[2 * m + 1] += acc;
    }
  }
}

// Per-tap row dot products for the weight gradient (three accumulators per
// input-row pass).
inline void conv_taps_row_dot(double acc[3], const double* g_row, const double* in_row,
                              int w, int ow, int stride) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0;
  if (stride == 1) {
    if (ow == 1) {
      acc[1] += g_row[0] * in_row[0];
      return;
    }
    a1 += g_row[0] * in_row[0];
    a2 += g_row[0] * in_row[1];
    for (int ox = 1; ox < ow - 1; ++ox) {
      const double g = g_row[ox];
      a0 += g * in_row[ox - 1];
      a1 += g * in_row[ox];
      a2 += g * in_row[ox + 1];
    }
    const double g = g_row[ow - 1];
    a0 += g * in_row[ow - 2];
    a1 += g * in_row[ow - 1];
  } else {
    for (int ox = 0; ox < ow; ++ox) {
      const int ix = 2 * ox - 1;
      const double g = g_row[ox];
      if (ix >= 0) a0 += g * in_row[ix];
      a1 += g * in_row[ix + 1];
      if (ix + 2 < w) a2 += g * in_row[ix + 2];
    }
  }
  acc[0] += a0;
  acc[1] += a1;
  acc[2] += a2;
}

// 1x1x1 kernels are a pure channel mix.
void conv1_forward(const ConvDims& c, int stride, const double* xv, const double* wv,
                   std::vector<double>& out) {
  const std::size_t in_sp = static_cast<std::size_t>(c.d) * c.h * c.w;
  const std::size_t out_sp = static_cast<std::size_t>(c.od) * c.oh * c.ow;
  for (int co = 0; co < c.co; ++co) {
    double* outc = out.data() + co * out_sp;
    for (int ci = 0; ci < c.ci; ++ci) {
      const double w = wv[static_cast<std::size_t>(co) * c.ci + ci];
      const double* xin = xv + ci * in_sp;
      if (stride == 1) {
        for (std::size_t i = 0; i < out_sp; ++i) outc[i] += w * xin[i];
      } else {
        std::size_t o = 0;
        for (int oz = 0; oz < c.od; ++oz)
          for (int oy = 0; oy < c.oh; ++oy)
            for (int ox = 0; ox < c.ow; ++ox, ++o)
              outc[o] += w * xin[(static_cast<std::size_t>(2 * oz) * c.h + 2 * oy) * c.w +
                                 2 * ox];
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& wt, const Tensor& bias, int stride) {
  const ConvDims c = conv_dims(x, wt, stride);
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != c.co)) {
    throw ArgumentError("conv3d: bias shape mismatch");
  }
  const std::size_t in_sp = static_cast<std::size_t>(c.d) * c.h * c.w;
  const std::size_t out_sp = static_cast<std::size_t>(c.od) * c.oh * c.ow;
  std::vector<double> out(static_cast<std::size_t>(c.co) * out_sp);

  const double* xv = x.values().data();
  const double* wv = wt.values().data();
  if (bias.defined()) {
    for (int co = 0; co < c.co; ++co) {
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(co * out_sp), out_sp,
                  bias.values()[co]);
    }
  }
  if (c.k == 1) {
    conv1_forward(c, stride, xv, wv, out);
  } else {
    // Output rows for every co stay hot in one buffer while each input row is
    // loaded once and fanned out across all output channels.
    std::vector<double> rowbuf(static_cast<std::size_t>(c.co) * c.ow);
    for (int oz = 0; oz < c.od; ++oz) {
      for (int oy = 0; oy < c.oh; ++oy) {
        for (int co = 0; co < c.co; ++co) {
          const double* src =
              out.data() + co * out_sp + (static_cast<std::size_t>(oz) * c.oh + oy) * c.ow;
          std::copy(src, src + c.ow, rowbuf.begin() + static_cast<std::ptrdiff_t>(co) * c.ow);
        }
        for (int ci = 0; ci < c.ci; ++ci) {
          const double* xin = xv + ci * in_sp;
          for (int kz = 0; kz < 3; ++kz) {
            const int iz = oz * stride + kz - 1;
            if (iz < 0 || iz >= c.d) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * stride + ky - 1;
              if (iy < 0 || iy >= c.h) continue;
              const double* xrow = xin + (static_cast<std::size_t>(iz) * c.h + iy) * c.w;
              for (int co = 0; co < c.co; ++co) {
                conv_taps_row(rowbuf.data() + static_cast<std::size_t>(co) * c.ow, xrow,
                              wv + ((static_cast<std::size_t>(co) * c.ci + ci) * 9 +
                                    kz * 3 + ky) * 3,
                              c.w, c.ow, stride);
              }
            }
          }
        }
        for (int co = 0; co < c.co; ++co) {
          double* dst =
              out.data() + co * out_sp + (static_cast<std::size_t>(oz) * c.oh + oy) * c.ow;
          std::copy(rowbuf.begin() + static_cast<std::ptrdiff_t>(co) * c.ow,
                    rowbuf.begin() + static_cast<std::ptrdiff_t>(co + 1) * c.ow, dst);
        }
      }
    }
  }

  std::vector<std::shared_ptr<Node>> parents{x.node(), wt.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return make_op(
      {c.co, c.od, c.oh, c.ow}, std::move(out), std::move(parents), [c, stride](Node& nd) {
        const std::size_t in_sp = static_cast<std::size_t>(c.d) * c.h * c.w;
        const std::size_t out_sp = static_cast<std::size_t>(c.od) * c.oh * c.ow;
        const double* g = nd.grad.data();
        const double* xv = nd.parents[0]->value.data();
        const double* wv = nd.parents[1]->value.data();

        if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
          double* gb = nd.parents[2]->ensure_grad().data();
          for (int co = 0; co < c.co; ++co) {
            const double* gc = g + co * out_sp;
            double acc = 0.0;
            for (std::size_t i = 0; i < out_sp; ++i) acc += gc[i];
            gb[co] += acc;
          }
        }

        if (nd.parents[1]->requires_grad) {
          double* gw = nd.parents[1]->ensure_grad().data();
          if (c.k == 1) {
            for (int co = 0; co < c.co; ++co) {
              const double* gc = g + co * out_sp;
              for (int ci = 0; ci < c.ci; ++ci) {
                const double* xin = xv + ci * in_sp;
                double acc = 0.0;
                if (stride == 1) {
                  for (std::size_t i = 0; i < out_sp; ++i) acc += gc[i] * xin[i];
                } else {
                  std::size_t o = 0;
                  for (int oz = 0; oz < c.od; ++oz)
                    for (int oy = 0; oy < c.oh; ++oy)
                      for (int ox = 0; ox < c.ow; ++ox, ++o)
                        acc += gc[o] *
                               xin[(static_cast<std::size_t>(2 * oz) * c.h + 2 * oy) * c.w +
                                   2 * ox];
                }
                gw[static_cast<std::size_t>(co) * c.ci + ci] += acc;
              }
            }
          } else {
            // x rows stay hot while the co loop streams the gradient rows.
            for (int oz = 0; oz < c.od; ++oz) {
              for (int oy = 0; oy < c.oh; ++oy) {
                for (int ci = 0; ci < c.ci; ++ci) {
                  const double* xin = xv + ci * in_sp;
                  for (int kz = 0; kz < 3; ++kz) {
                    const int iz = oz * stride + kz - 1;
                    if (iz < 0 || iz >= c.d) continue;
                    for (int ky = 0; ky < 3; ++ky) {
                      const int iy = oy * stride + ky - 1;
                      if (iy < 0 || iy >= c.h) continue;
                      const double* xrow =
                          xin + (static_cast<std::size_t>(iz) * c.h + iy) * c.w;
                      for (int co = 0; co < c.co; ++co) {
                        conv_taps_row_dot(
                            gw + ((static_cast<std::size_t>(co) * c.ci + ci) * 9 +
                                  kz * 3 + ky) * 3,
                            g + co * out_sp +
                                (static_cast<std::size_t>(oz) * c.oh + oy) * c.ow,
                            xrow, c.w, c.ow, stride);
                      }
                    }
                  }
                }
              }
            }
          }
        }

        if (nd.parents[0]->requires_grad) {
          double* gx = nd.parents[0]->ensure_grad().data();
          if (c.k == 1) {
            for (int co = 0; co < c.co; ++co) {
              const double* gc = g + co * out_sp;
              for (int ci = 0; ci < c.ci; ++ci) {
                const double w = wv[static_cast<std::size_t>(co) * c.ci + ci];
                double* gxin = gx + ci * in_sp;
                if (stride == 1) {
                  for (std::size_t i = 0; i < out_sp; ++i) gxin[i] += w * gc[i];
                } else {
                  std::size_t o = 0;
                  for (int oz = 0; oz < c.od; ++oz)
                    for (int oy = 0; oy < c.oh; ++oy)
                      for (int ox = 0; ox < c.ow; ++ox, ++o)
                        gxin[(static_cast<std::size_t>(2 * oz) * c.h + 2 * oy) * c.w +
                             2 * ox] += w * gc[o];
                }
              }
            }
          } else {
            // Input-row-driven scatter: every input-gradient row is buffered
            // per channel while the contributing gradient rows stream by.
            std::vector<double> ginbuf(static_cast<std::size_t>(c.ci) * c.w);
            for (int iz = 0; iz < c.d; ++iz) {
              for (int iy = 0; iy < c.h; ++iy) {
                for (int ci = 0; ci < c.ci; ++ci) {
                  const double* src =
                      gx + ci * in_sp + (static_cast<std::size_t>(iz) * c.h + iy) * c.w;
                  std::copy(src, src + c.w,
                            ginbuf.begin() + static_cast<std::ptrdiff_t>(ci) * c.w);
                }
                for (int co = 0; co < c.co; ++co) {
                  const double* gc = g + co * out_sp;
                  for (int kz = 0; kz < 3; ++kz) {
                    const int oz_num = iz + 1 - kz;
                    if (oz_num < 0 || oz_num % stride) continue;
                    const int oz = oz_num / stride;
                    if (oz >= c.od) continue;
                    for (int ky = 0; ky < 3; ++ky) {
                      const int oy_num = iy + 1 - ky;
                      if (oy_num < 0 || oy_num % stride) continue;
                      const int oy = oy_num / stride;
                      if (oy >= c.oh) continue;
                      const double* grow =
                          gc + (static_cast<std::size_t>(oz) * c.oh + oy) * c.ow;
                      for (int ci = 0; ci < c.ci; ++ci) {
                        conv_taps_row_scatter(
                            ginbuf.data() + static_cast<std::size_t>(ci) * c.w, grow,
                            wv + ((static_cast<std::size_t>(co) * c.ci + ci) * 9 +
                                  kz * 3 + ky) * 3,
                            c.w, c.ow, stride);
                      }
                    }
                  }
                }
                for (int ci = 0; ci < c.ci; ++ci) {
                  double* dst =
                      gx + ci * in_sp + (static_cast<std::size_t>(iz) * c.h + iy) * c.w;
                  std::copy(ginbuf.begin() + static_cast<std::ptrdiff_t>(ci) * c.w,
                            ginbuf.begin() + static_cast<std::ptrdiff_t>(ci + 1) * c.w, dst);
                }
              }
            }
          }
        }
      });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
  check_rank(x, 4, "group_norm");
  const int ch = x.shape()[0];
  const std::size_t sp = x.numel() / static_cast<std::size_t>(ch);
  if (groups <= 0 || ch % groups != 0) {
    throw ArgumentError("group_norm: channels " + std::to_string(ch) +
                        " not divisible into " + std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch}) {
    throw ArgumentError("group_norm: gamma/beta must have shape (channels)");
  }
  const int cg = ch / groups;
  const std::size_t group_n = static_cast<std::size_t>(cg) * sp;

  std::vector<double> mu(groups), istd(groups);
  std::vector<double> out(x.numel());
  const double* xv = x.values().data();
  for (int gidx = 0; gidx < groups; ++gidx) {
    const double* xg = xv + static_cast<std::size_t>(gidx) * group_n;
    double mean = 0.0;
    for (std::size_t i = 0; i < group_n; ++i) mean += xg[i];
    mean /= static_cast<double>(group_n);
    double var = 0.0;
    for (std::size_t i = 0; i < group_n; ++i) {
      const double d = xg[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(group_n);
    mu[gidx] = mean;
    istd[gidx] = 1.0 / std::sqrt(var + eps);
  }
  for (int cidx = 0; cidx < ch; ++cidx) {
    const int gidx = cidx / cg;
    const double gmm = gamma.values()[cidx], bt = beta.values()[cidx];
    const double* xc = xv + static_cast<std::size_t>(cidx) * sp;
    double* oc = out.data() + static_cast<std::size_t>(cidx) * sp;
    for (std::size_t i = 0; i < sp; ++i) {
      oc[i] = gmm * (xc[i] - mu[gidx]) * istd[gidx] + bt;
    }
  }

  return make_op(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [ch, sp, cg, groups, group_n, mu, istd](Node& nd) {
        const double* xv = nd.parents[0]->value.data();
        const double* gammav = nd.parents[1]->value.data();
        const double* g = nd.grad.data();

        if (nd.parents[1]->requires_grad || nd.parents[2]->requires_grad) {
          double* ggamma = nd.parents[1]->ensure_grad().data();
          double* gbeta = nd.parents[2]->ensure_grad().data();
          for (int cidx = 0; cidx < ch; ++cidx) {
            const int gidx = cidx / cg;
            const double* xc = xv + static_cast<std::size_t>(cidx) * sp;
            const double* gc = g + static_cast<std::size_t>(cidx) * sp;
            double acc_g = 0.0, acc_b = 0.0;
            for (std::size_t i = 0; i < sp; ++i) {
              acc_g += gc[i] * (xc[i] - mu[gidx]) * istd[gidx];
              acc_b += gc[i];
            }
            ggamma[cidx] += acc_g;
            gbeta[cidx] += acc_b;
          }
        }

        if (nd.parents[0]->requires_grad) {
          double* gx = nd.parents[0]->ensure_grad().data();
          for (int gidx = 0; gidx < groups; ++gidx) {
            double sum_gh = 0.0, sum_ghx = 0.0;
            for (int cc = 0; cc < cg; ++cc) {
              const int cidx = gidx * cg + cc;
              const double* xc = xv + static_cast<std::size_t>(cidx) * sp;
              const double* gc = g + static_cast<std::size_t>(cidx) * sp;
              const double gmm = gammav[cidx];
              for (std::size_t i = 0; i < sp; ++i) {
                const double gh = gc[i] * gmm;
                sum_gh += gh;
                sum_ghx += gh * (xc[i] - mu[gidx]) * istd[gidx];
              }
            }
            const double m1 = sum_gh / static_cast<double>(group_n);
            const double m2 = sum_ghx / static_cast<double>(group_n);
            for (int cc = 0; cc < cg; ++cc) {
              const int cidx = gidx * cg + cc;
              const double* xc = xv + static_cast<std::size_t>(cidx) * sp;
              const double* gc = g + static_cast<std::size_t>(cidx) * sp;
              double* gxc = gx + static_cast<std::size_t>(cidx) * sp;
              const double gmm = gammav[cidx];
              for (std::size_t i = 0; i < sp; ++i) {
                const double xh = (xc[i] - mu[gidx]) * istd[gidx];
                gxc[i] += istd[gidx] * (gc[i] * gmm - m1 - xh * m2);
              }
            }
          }
        }
      });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  check_rank(x, 4, "add_channel_bias");
  const int ch = x.shape()[0];
  if (bias.shape() != Shape{ch}) {
    throw ArgumentError("add_channel_bias: bias must have shape (channels)");
  }
  const std::size_t sp = x.numel() / static_cast<std::size_t>(ch);
  std::vector<double> out(x.numel());
  for (int cidx = 0; cidx < ch; ++cidx) {
    const double b = bias.values()[cidx];
    const double* xc = x.values().data() + static_cast<std::size_t>(cidx) * sp;
    double* oc = out.data() + static_cast<std::size_t>(cidx) * sp;
    for (std::size_t i = 0; i < sp; ++i) oc[i] = xc[i] + b;
  }
  return make_op(x.shape(), std::move(out), {x.node(), bias.node()}, [ch, sp](Node& nd) {
    if (nd.parents[0]->requires_grad) {
      auto& g = nd.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
    if (nd.parents[1]->requires_grad) {
      double* gb = nd.parents[1]->ensure_grad().data();
      for (int cidx = 0; cidx < ch; ++cidx) {
        const double* gc = nd.grad.data() + static_cast<std::size_t>(cidx) * sp;
        double acc = 0.0;
        for (std::size_t i = 0; i < sp; ++i) acc += gc[i];
        gb[cidx] += acc;
      }
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_rank(a, 4, "concat_channels");
  check_rank(b, 4, "concat_channels");
  for (int i = 1; i < 4; ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw ArgumentError("concat_channels: spatial dims mismatch");
    }
  }
  const int ca = a.shape()[0], cb = b.shape()[0];
  std::vector<double> out(a.numel() + b.numel());
  std::memcpy(out.data(), a.values().data(), a.numel() * sizeof(double));
  std::memcpy(out.data() + a.numel(), b.values().data(), b.numel() * sizeof(double));
  Shape s = a.shape();
  s[0] = ca + cb;
  const std::size_t na = a.numel();
  return make_op(std::move(s), std::move(out), {a.node(), b.node()}, [na](Node& nd) {
    if (nd.parents[0]->requires_grad) {
      auto& g = nd.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
    if (nd.parents[1]->requires_grad) {
      auto& g = nd.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[na + i];
    }
  });
}

Tensor nearest_upsample2(const Tensor& x) {
  check_rank(x, 4, "nearest_upsample2");
  const int ch = x.shape()[0], d = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  std::vector<double> out(static_cast<std::size_t>(ch) * 8 * d * h * w);
  const int od = 2 * d, oh = 2 * h, ow = 2 * w;
  for (int cidx = 0; cidx < ch; ++cidx) {
    for (int z = 0; z < od; ++z) {
      for (int y = 0; y < oh; ++y) {
        const double* src = x.values().data() +
                            ((static_cast<std::size_t>(cidx) * d + z / 2) * h + y / 2) * w;
        double* dst = out.data() +
                      ((static_cast<std::size_t>(cidx) * od + z) * oh + y) * ow;
        for (int xx = 0; xx < ow; ++xx) dst[xx] = src[xx / 2];
      }
    }
  }
  return make_op({ch, od, oh, ow}, std::move(out), {x.node()}, [ch, d, h, w](Node& nd) {
    double* g = nd.parents[0]->ensure_grad().data();
    const int od = 2 * d, oh = 2 * h, ow = 2 * w;
    for (int cidx = 0; cidx < ch; ++cidx) {
      for (int z = 0; z < od; ++z) {
        for (int y = 0; y < oh; ++y) {
          double* dst = g + ((static_cast<std::size_t>(cidx) * d + z / 2) * h + y / 2) * w;
          const double* src =
              nd.grad.data() + ((static_cast<std::size_t>(cidx) * od + z) * oh + y) * ow;
          for (int xx = 0; xx < ow; ++xx) dst[xx / 2] += src[xx];
        }
      }
    }
  });
}

Tensor straight_through(const Tensor& z, std::vector<double> replaced) {
  if (replaced.size() != z.numel()) {
    throw ArgumentError("straight_through: replacement size mismatch");
  }
  return make_op(z.shape(), std::move(replaced), {z.node()}, [](Node& nd) {
    auto& g = nd.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
  });
}

Tensor cross_attention(const Tensor& x, const Tensor& context, const AttentionWeights& w) {
  check_rank(x, 4, "cross_attention");
  check_rank(context, 2, "cross_attention context");
  const int ch = x.shape()[0];
  const std::size_t sp = x.numel() / static_cast<std::size_t>(ch);
  const int tokens = static_cast<int>(sp);
  if (w.heads <= 0 || w.dk <= 0) throw ArgumentError("cross_attention: bad head config");
  const int hd = w.heads * w.dk;
  if (w.wq.shape() != Shape{hd, ch}) {
    throw ArgumentError("cross_attention: wq shape " + shape_str(w.wq.shape()) +
                        " incompatible with channels " + std::to_string(ch));
  }

  // (C, spatial) -> (tokens, C)
  Tensor seq = transpose(reshape(x, {ch, tokens}));
  Tensor q = linear(seq, w.wq, Tensor());
  Tensor k = linear(context, w.wk, Tensor());
  Tensor v = linear(context, w.wv, Tensor());

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(w.dk));
  Tensor heads_out;
  for (int h = 0; h < w.heads; ++h) {
    Tensor qh = slice_cols(q, h * w.dk, w.dk);
    Tensor kh = slice_cols(k, h * w.dk, w.dk);
    Tensor vh = slice_cols(v, h * w.dk, w.dk);
    Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
    Tensor oh = matmul(attn, vh);
    heads_out = h == 0 ? oh : concat_cols(heads_out, oh);
  }
  Tensor projected = linear(heads_out, w.wo, Tensor());
  return reshape(transpose(projected), x.shape());
}

// ----------------------------------------------------------------- optimizer

Parameter::Parameter(Tensor leaf_tensor) : value(std::move(leaf_tensor)) {
  m.assign(value.numel(), 0.0);
  v.assign(value.numel(), 0.0);
}

void Parameter::zero_grad() {
  auto& g = value.grad();
  std::fill(g.begin(), g.end(), 0.0);
}

void adamw_step(const std::vector<Parameter*>& params, const AdamWConfig& cfg) {
  for (Parameter* p : params) {
    p->step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step));
    auto& w = p->value.values();
    auto& g = p->value.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p->m[i] = cfg.beta1 * p->m[i] + (1.0 - cfg.beta1) * g[i];
      p->v[i] = cfg.beta2 * p->v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = p->m[i] / bc1;
      const double vhat = p->v[i] / bc2;
      w[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[i]);
    }
  }
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kCkptMagic[4] = {'R', 'G', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

void write_str(std::ofstream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct CkptReader {
  std::ifstream in;
  std::uint64_t offset = 0;
  explicit CkptReader(const std::filesystem::path& p) : in(p, std::ios::binary) {
    if (!in) throw DependencyError("cannot open checkpoint: " + p.string());
  }
  void bytes(void* p, std::size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw FormatError(std::string("truncated checkpoint reading ") + what, offset);
    }
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    bytes(&v, 8, what);
    return v;
  }
  std::string str(const char* what) {
    std::uint32_t n = u32(what);
    if (n > (1u << 20)) throw FormatError("implausible string length", offset - 4);
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamMap& params,
                     const std::map<std::string, std::string>& meta,
                     bool include_optimizer_state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot open checkpoint for writing: " + path.string());
  out.write(kCkptMagic, 4);
  write_u32(out, kCkptVersion);
  write_u32(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    write_str(out, k);
    write_str(out, v);
  }
  write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    write_str(out, name);
    out.put(include_optimizer_state ? 1 : 0);
    const Shape& s = p->value.shape();
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    for (int d : s) write_u32(out, static_cast<std::uint32_t>(d));
    const auto& w = p->value.values();
    out.write(reinterpret_cast<const char*>(w.data()),
              static_cast<std::streamsize>(w.size() * 8));
    if (include_optimizer_state) {
      out.write(reinterpret_cast<const char*>(p->m.data()),
                static_cast<std::streamsize>(p->m.size() * 8));
      out.write(reinterpret_cast<const char*>(p->v.data()),
                static_cast<std::streamsize>(p->v.size() * 8));
      write_u64(out, static_cast<std::uint64_t>(p->step));
    }
  }
  if (!out) throw ArgumentError("checkpoint write failed: " + path.string());
}

std::map<std::string, std::string> load_checkpoint(const std::filesystem::path& path,
                                                   const ParamMap& params) {
  CkptReader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  if (std::uint32_t v = r.u32("version"); v != kCkptVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), 4);
  }
  std::map<std::string, std::string> meta;
  const std::uint32_t nmeta = r.u32("meta count");
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str("meta key");
    meta[k] = r.str("meta value");
  }

  std::unordered_map<std::string, Parameter*> lookup;
  for (const auto& [name, p] : params) lookup[name] = p;
  std::unordered_set<std::string> seen;

  const std::uint32_t nparams = r.u32("param count");
  for (std::uint32_t i = 0; i < nparams; ++i) {
    std::string name = r.str("param name");
    char has_opt;
    r.bytes(&has_opt, 1, "optimizer flag");
    const std::uint32_t rank = r.u32("param rank");
    if (rank > 8) throw FormatError("implausible parameter rank", r.offset - 4);
    Shape s(rank);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      s[d] = static_cast<int>(r.u32("param dim"));
      n *= static_cast<std::size_t>(s[d]);
    }
    auto it = lookup.find(name);
    if (it == lookup.end()) {
      throw ArgumentError("checkpoint parameter '" + name + "' unknown to this model");
    }
    Parameter* p = it->second;
    if (p->value.shape() != s) {
      throw ArgumentError("checkpoint parameter '" + name + "' has shape " + shape_str(s) +
                          ", model expects " + shape_str(p->value.shape()));
    }
    r.bytes(p->value.values().data(), n * 8, "param payload");
    if (has_opt) {
      r.bytes(p->m.data(), n * 8, "adam m");
      r.bytes(p->v.data(), n * 8, "adam v");
      p->step = static_cast<std::int64_t>(r.u64("adam step"));
    }
    seen.insert(name);
  }
  if (seen.size() != params.size()) {
    for (const auto& [name, p] : params) {
      if (!seen.count(name)) {
        throw ArgumentError("checkpoint is missing parameter '" + name + "'");
      }
    }
  }
  return meta;
}

std::map<std::string, std::string> read_checkpoint_meta(const std::filesystem::path& path) {
  CkptReader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  if (std::uint32_t v = r.u32("version"); v != kCkptVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), 4);
  }
  std::map<std::string, std::string> meta;
  const std::uint32_t nmeta = r.u32("meta count");
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str("meta key");
    meta[k] = r.str("meta value");
  }
  return meta;
}

// --------------------------------------------------------------------- init

Tensor he_normal(Shape s, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  return normal_init(std::move(s), stddev, rng);
}

Tensor normal_init(Shape s, double stddev, Rng& rng) {
  std::vector<double> values(shape_numel(s));
  for (double& v : values) v = stddev * rng.normal();
  return Tensor::leaf(std::move(s), std::move(values));
}

}  // namespace rishgen::tn
