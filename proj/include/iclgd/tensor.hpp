#pragma once

// Dense 64-bit tensors on a define-by-run tape with reverse-mode backward.
// The tape is rebuilt for every forward pass; completed tensors are immutable
// value types. A node flagged stop-gradient propagates nothing to its inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iclgd/prng.hpp"

namespace iclgd {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  int node = -1;  // tape handle, -1 when not recorded

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != data.size()) {
      throw std::invalid_argument("Tensor: shape/data size mismatch");
    }
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = count(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> s, double v) {
    std::size_t n = count(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// Gaussian tensor with i.i.d. N(0, sigma^2) entries, deterministic per stream.
inline Tensor gaussian_sample(Prng& prng, std::vector<std::size_t> shape,
                              double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("gaussian_sample: sigma < 0");
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data) v = prng.normal(sigma);
  return t;
}

// Visibility mask for softmax_rows: 1 = visible, 0 = masked.
using Mask = std::vector<std::uint8_t>;

class Tape {
 public:
  struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<int> inputs;
    std::function<void(Tape&, const Node&)> backward;
    std::vector<double> grad;
    bool stop = false;        // severs backward flow through this node
    std::string leaf_name;    // nonempty for named parameter leaves
  };

  // --- leaves -------------------------------------------------------------

  Tensor leaf(const Tensor& t, std::string name) {
    Tensor out = t;
    out.node = push(t.shape, t.data, {}, nullptr);
    nodes_[out.node].leaf_name = std::move(name);
    return out;
  }

  // Unnamed leaf treated as a constant: it can receive gradient but nothing
  // is reported for it and nothing flows past it.
  Tensor constant(const Tensor& t) {
    Tensor out = t;
    out.node = push(t.shape, t.data, {}, nullptr);
    return out;
  }

  // --- ops ----------------------------------------------------------------

  Tensor stop_gradient(const Tensor& a) {
    Tensor out = a;
    out.node = push(a.shape, a.data, {require(a)}, nullptr);
    nodes_[out.node].stop = true;
    return out;
  }

  Tensor add(const Tensor& a, const Tensor& b) {
    check_same(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
    out.node = push(out.shape, out.data, {require(a), require(b)},
                    [](Tape& t, const Node& n) {
                      t.accumulate(n.inputs[0], n.grad);
                      t.accumulate(n.inputs[1], n.grad);
                    });
    return out;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    check_same(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data[i];
    out.node = push(out.shape, out.data, {require(a), require(b)},
                    [](Tape& t, const Node& n) {
                      t.accumulate(n.inputs[0], n.grad);
                      std::vector<double> g = n.grad;
                      for (auto& v : g) v = -v;
                      t.accumulate(n.inputs[1], g);
                    });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    check_same(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data[i];
    out.node = push(out.shape, out.data, {require(a), require(b)},
                    [](Tape& t, const Node& n) {
                      const auto& av = t.nodes_[n.inputs[0]].value;
                      const auto& bv = t.nodes_[n.inputs[1]].value;
                      std::vector<double> ga(n.grad.size()), gb(n.grad.size());
                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        ga[i] = n.grad[i] * bv[i];
                        gb[i] = n.grad[i] * av[i];
                      }
                      t.accumulate(n.inputs[0], ga);
                      t.accumulate(n.inputs[1], gb);
                    });
    return out;
  }

  Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (auto& v : out.data) v *= c;
    out.node = push(out.shape, out.data, {require(a)},
                    [c](Tape& t, const Node& n) {
                      std::vector<double> g = n.grad;
                      for (auto& v : g) v *= c;
                      t.accumulate(n.inputs[0], g);
                    });
    return out;
  }

  // a [m x n] + row vector b [n], broadcast over rows.
  Tensor add_row(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.size() != a.shape[1]) {
      throw std::invalid_argument("add_row: shape mismatch");
    }
    Tensor out = a;
    std::size_t m = a.shape[0], n = a.shape[1];
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += b.data[c];
    out.node = push(out.shape, out.data, {require(a), require(b)},
                    [m, n](Tape& t, const Node& nd) {
                      t.accumulate(nd.inputs[0], nd.grad);
                      std::vector<double> gb(n, 0.0);
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < n; ++c)
                          gb[c] += nd.grad[r * n + c];
                      t.accumulate(nd.inputs[1], gb);
                    });
    return out;
  }

  // A [m x k] * B [k x n].
  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
      throw std::invalid_argument("matmul: incompatible shapes");
    }
    std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = Tensor::zeros({m, n});
    gemm(a.data.data(), b.data.data(), out.data.data(), m, k, n);
    out.node = push(out.shape, out.data, {require(a), require(b)},
                    [m, k, n](Tape& t, const Node& nd) {
                      const auto& av = t.nodes_[nd.inputs[0]].value;
                      const auto& bv = t.nodes_[nd.inputs[1]].value;
                      // dA = dC * B^T
                      std::vector<double> ga(m * k, 0.0);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                          double g = nd.grad[i * n + j];
                          const double* brow = &bv[j];
                          for (std::size_t p = 0; p < k; ++p)
                            ga[i * k + p] += g * brow[p * n];
                        }
                      // dB = A^T * dC
                      std::vector<double> gb(k * n, 0.0);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          double av_ip = av[i * k + p];
                          for (std::size_t j = 0; j < n; ++j)
                            gb[p * n + j] += av_ip * nd.grad[i * n + j];
                        }
                      t.accumulate(nd.inputs[0], ga);
                      t.accumulate(nd.inputs[1], gb);
                    });
    return out;
  }

  // A [m x k] * B^T where B is [n x k].
  Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1]) {
      throw std::invalid_argument("matmul_nt: incompatible shapes");
    }
    std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        const double* ar = &a.data[i * k];
        const double* br = &b.data[j * k];
        for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
        out.data[i * n + j] = s;
      }
    out.node = push(out.shape, out.data, {require(a), require(b)},
                    [m, k, n](Tape& t, const Node& nd) {
                      const auto& av = t.nodes_[nd.inputs[0]].value;
                      const auto& bv = t.nodes_[nd.inputs[1]].value;
                      std::vector<double> ga(m * k, 0.0);  // dA = dC * B
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                          double g = nd.grad[i * n + j];
                          for (std::size_t p = 0; p < k; ++p)
                            ga[i * k + p] += g * bv[j * k + p];
                        }
                      std::vector<double> gb(n * k, 0.0);  // dB = dC^T * A
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                          double g = nd.grad[i * n + j];
                          for (std::size_t p = 0; p < k; ++p)
                            gb[j * k + p] += g * av[i * k + p];
                        }
                      t.accumulate(nd.inputs[0], ga);
                      t.accumulate(nd.inputs[1], gb);
                    });
    return out;
  }

  // Row-wise softmax with optional visibility mask (1 = visible). Masked
  // entries come out exactly 0; a fully-masked row is an error.
  Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr) {
    if (x.shape.size() != 2) {
      throw std::invalid_argument("softmax_rows: expects a matrix");
    }
    std::size_t m = x.shape[0], n = x.shape[1];
    if (mask && mask->size() != m * n) {
      throw std::invalid_argument("softmax_rows: mask shape mismatch");
    }
    Tensor out = Tensor::zeros({m, n});
    Mask mk = mask ? *mask : Mask(m * n, 1);
    for (std::size_t r = 0; r < m; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t c = 0; c < n; ++c)
        if (mk[r * n + c]) {
          any = true;
          mx = std::max(mx, x.data[r * n + c]);
        }
      if (!any) throw std::runtime_error("degenerate attention row");
      double z = 0.0;
      for (std::size_t c = 0; c < n; ++c)
        if (mk[r * n + c]) {
          double e = std::exp(x.data[r * n + c] - mx);
          out.data[r * n + c] = e;
          z += e;
        }
      for (std::size_t c = 0; c < n; ++c)
        if (mk[r * n + c]) out.data[r * n + c] /= z;
    }
    out.node = push(out.shape, out.data, {require(x)},
                    [m, n, mk](Tape& t, const Node& nd) {
                      std::vector<double> gx(m * n, 0.0);
                      for (std::size_t r = 0; r < m; ++r) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < n; ++c)
                          if (mk[r * n + c])
                            dot += nd.grad[r * n + c] * nd.value[r * n + c];
                        for (std::size_t c = 0; c < n; ++c)
                          if (mk[r * n + c])
                            gx[r * n + c] =
                                nd.value[r * n + c] * (nd.grad[r * n + c] - dot);
                      }
                      t.accumulate(nd.inputs[0], gx);
                    });
    return out;
  }

  // Row-wise layer norm: gain * (x - mean) / sqrt(var + eps) + bias.
  Tensor layer_norm_rows(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
    std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n) {
      throw std::invalid_argument("layer_norm: gain/bias length mismatch");
    }
    Tensor out = Tensor::zeros(x.shape);
    std::vector<double> inv_sigma(m), xhat(m * n);
    for (std::size_t r = 0; r < m; ++r) {
      double mu = 0.0;
      for (std::size_t c = 0; c < n; ++c) mu += x.data[r * n + c];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        double d = x.data[r * n + c] - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[r] = is;
      for (std::size_t c = 0; c < n; ++c) {
        double h = (x.data[r * n + c] - mu) * is;
        xhat[r * n + c] = h;
        out.data[r * n + c] = gain.data[c] * h + bias.data[c];
      }
    }
    out.node =
        push(out.shape, out.data, {require(x), require(gain), require(bias)},
             [m, n, inv_sigma, xhat](Tape& t, const Node& nd) {
               const auto& gv = t.nodes_[nd.inputs[1]].value;
               std::vector<double> gx(m * n, 0.0), gg(n, 0.0), gb(n, 0.0);
               for (std::size_t r = 0; r < m; ++r) {
                 double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                 for (std::size_t c = 0; c < n; ++c) {
                   double dxh = nd.grad[r * n + c] * gv[c];
                   mean_dxhat += dxh;
                   mean_dxhat_xhat += dxh * xhat[r * n + c];
                   gg[c] += nd.grad[r * n + c] * xhat[r * n + c];
                   gb[c] += nd.grad[r * n + c];
                 }
                 mean_dxhat /= static_cast<double>(n);
                 mean_dxhat_xhat /= static_cast<double>(n);
                 for (std::size_t c = 0; c < n; ++c) {
                   double dxh = nd.grad[r * n + c] * gv[c];
                   gx[r * n + c] = inv_sigma[r] * (dxh - mean_dxhat -
                                                   xhat[r * n + c] *
                                                       mean_dxhat_xhat);
                 }
               }
               t.accumulate(nd.inputs[0], gx);
               t.accumulate(nd.inputs[1], gg);
               t.accumulate(nd.inputs[2], gb);
             });
    return out;
  }

  Tensor gelu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.data) {
      v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    }
    out.node = push(out.shape, out.data, {require(x)},
                    [](Tape& t, const Node& nd) {
                      const auto& xv = t.nodes_[nd.inputs[0]].value;
                      std::vector<double> gx(nd.grad.size());
                      constexpr double inv_sqrt_2pi = 0.3989422804014327;
                      for (std::size_t i = 0; i < gx.size(); ++i) {
                        double x = xv[i];
                        double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                        double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                        gx[i] = nd.grad[i] * (cdf + x * pdf);
                      }
                      t.accumulate(nd.inputs[0], gx);
                    });
    return out;
  }

  // Embedding lookup: rows of emb [V x d] selected by ids.
  Tensor gather_rows(const Tensor& emb, const std::vector<int>& ids) {
    if (emb.shape.size() != 2) {
      throw std::invalid_argument("gather_rows: expects a matrix");
    }
    std::size_t v = emb.shape[0], d = emb.shape[1];
    Tensor out = Tensor::zeros({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
        throw std::out_of_range("gather_rows: id out of range");
      }
      std::copy_n(&emb.data[static_cast<std::size_t>(ids[i]) * d], d,
                  &out.data[i * d]);
    }
    out.node = push(out.shape, out.data, {require(emb)},
                    [ids, v, d](Tape& t, const Node& nd) {
                      std::vector<double> g(v * d, 0.0);
                      for (std::size_t i = 0; i < ids.size(); ++i)
                        for (std::size_t c = 0; c < d; ++c)
                          g[static_cast<std::size_t>(ids[i]) * d + c] +=
                              nd.grad[i * d + c];
                      t.accumulate(nd.inputs[0], g);
                    });
    return out;
  }

  Tensor rows(const Tensor& x, std::size_t start, std::size_t len) {
    std::size_t m = x.rows(), n = x.cols();
    if (start + len > m) throw std::out_of_range("rows: slice out of range");
    Tensor out = Tensor::zeros({len, n});
    std::copy_n(&x.data[start * n], len * n, out.data.data());
    out.node = push(out.shape, out.data, {require(x)},
                    [m, n, start, len](Tape& t, const Node& nd) {
                      std::vector<double> g(m * n, 0.0);
                      std::copy_n(nd.grad.data(), len * n, &g[start * n]);
                      t.accumulate(nd.inputs[0], g);
                    });
    return out;
  }

  Tensor cols(const Tensor& x, std::size_t start, std::size_t len) {
    std::size_t m = x.rows(), n = x.cols();
    if (start + len > n) throw std::out_of_range("cols: slice out of range");
    Tensor out = Tensor::zeros({m, len});
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(&x.data[r * n + start], len, &out.data[r * len]);
    out.node = push(out.shape, out.data, {require(x)},
                    [m, n, start, len](Tape& t, const Node& nd) {
                      std::vector<double> g(m * n, 0.0);
                      for (std::size_t r = 0; r < m; ++r)
                        std::copy_n(&nd.grad[r * len], len, &g[r * n + start]);
                      t.accumulate(nd.inputs[0], g);
                    });
    return out;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    std::size_t m = parts[0].rows(), n = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      if (p.rows() != m) {
        throw std::invalid_argument("concat_cols: row mismatch");
      }
      ids.push_back(require(p));
      widths.push_back(p.cols());
      n += p.cols();
    }
    Tensor out = Tensor::zeros({m, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
      for (std::size_t r = 0; r < m; ++r)
        std::copy_n(&p.data[r * p.cols()], p.cols(), &out.data[r * n + off]);
      off += p.cols();
    }
    out.node = push(out.shape, out.data, ids,
                    [m, n, widths](Tape& t, const Node& nd) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
                        std::size_t w = widths[k];
                        std::vector<double> g(m * w);
                        for (std::size_t r = 0; r < m; ++r)
                          std::copy_n(&nd.grad[r * n + off], w, &g[r * w]);
                        t.accumulate(nd.inputs[k], g);
                        off += w;
                      }
                    });
    return out;
  }

  Tensor sum_all(const Tensor& x) {
    double s = std::accumulate(x.data.begin(), x.data.end(), 0.0);
    Tensor out = Tensor::scalar(s);
    std::size_t n = x.size();
    out.node = push(out.shape, out.data, {require(x)},
                    [n](Tape& t, const Node& nd) {
                      t.accumulate(nd.inputs[0],
                                   std::vector<double>(n, nd.grad[0]));
                    });
    return out;
  }

  // Mean (or sum) of -log softmax(logits[row])[target] over (row, target)
  // pairs. logits is [m x V].
  Tensor cross_entropy(const Tensor& logits,
                       const std::vector<std::pair<std::size_t, int>>& items,
                       bool mean = true) {
    if (logits.shape.size() != 2) {
      throw std::invalid_argument("cross_entropy: logits must be a matrix");
    }
    if (items.empty()) throw std::invalid_argument("cross_entropy: no items");
    std::size_t m = logits.shape[0], v = logits.shape[1];
    std::vector<double> probs(items.size() * v);
    double total = 0.0;
    for (std::size_t k = 0; k < items.size(); ++k) {
      auto [r, tgt] = items[k];
      if (r >= m || tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
        throw std::out_of_range("cross_entropy: target out of range");
      }
      const double* row = &logits.data[r * v];
      double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t c = 0; c < v; ++c) {
        double e = std::exp(row[c] - mx);
        probs[k * v + c] = e;
        z += e;
      }
      for (std::size_t c = 0; c < v; ++c) probs[k * v + c] /= z;
      total += -(row[static_cast<std::size_t>(tgt)] - mx - std::log(z));
    }
    double denom = mean ? static_cast<double>(items.size()) : 1.0;
    Tensor out = Tensor::scalar(total / denom);
    out.node = push(out.shape, out.data, {require(logits)},
                    [m, v, items, probs, denom](Tape& t, const Node& nd) {
                      std::vector<double> g(m * v, 0.0);
                      double s = nd.grad[0] / denom;
                      for (std::size_t k = 0; k < items.size(); ++k) {
                        auto [r, tgt] = items[k];
                        for (std::size_t c = 0; c < v; ++c)
                          g[r * v + c] += s * probs[k * v + c];
                        g[r * v + static_cast<std::size_t>(tgt)] -= s;
                      }
                      t.accumulate(nd.inputs[0], g);
                    });
    return out;
  }

  // --- backward -----------------------------------------------------------

  // Reverse sweep from a scalar loss. Returns gradients for every named leaf;
  // named leaves the sweep never reaches map to zero tensors.
  std::map<std::string, Tensor> backward(const Tensor& loss) {
    if (loss.node < 0) throw std::invalid_argument("backward: loss not taped");
    if (Tensor::count(nodes_[loss.node].shape) != 1) {
      throw std::invalid_argument("backward: loss must be a scalar");
    }
    for (auto& n : nodes_) n.grad.clear();
    nodes_[loss.node].grad.assign(1, 1.0);
    for (int id = loss.node; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty() || n.stop || !n.backward) continue;
      n.backward(*this, n);
    }
    std::map<std::string, Tensor> grads;
    for (auto& n : nodes_) {
      if (n.leaf_name.empty()) continue;
      Tensor g = Tensor::zeros(n.shape);
      if (!n.grad.empty()) g.data = n.grad;
      grads.emplace(n.leaf_name, std::move(g));
    }
    return grads;
  }

  const Node& node(int id) const { return nodes_[id]; }

 private:
  friend struct Node;

  static void gemm(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double a_ip = a[i * k + p];
        const double* brow = &b[p * n];
        double* crow = &c[i * n];
        for (std::size_t j = 0; j < n; ++j) crow[j] += a_ip * brow[j];
      }
  }

  int require(const Tensor& t) {
    if (t.node < 0) {
      throw std::invalid_argument("tensor not recorded on this tape");
    }
    return t.node;
  }

  static void check_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
  }

  int push(std::vector<std::size_t> shape, std::vector<double> value,
           std::vector<int> inputs,
           std::function<void(Tape&, const Node&)> bwd) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void accumulate(int id, const std::vector<double>& g) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(Tensor::count(n.shape), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  std::vector<Node> nodes_;
};

// Standalone cross-entropy over a single logits vector (no tape).
inline double cross_entropy_logits(const std::vector<double>& logits,
                                   int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw std::out_of_range("cross_entropy_logits: target out of range");
  }
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return -(logits[static_cast<std::size_t>(target)] - mx - std::log(z));
}

}  // namespace iclgd
