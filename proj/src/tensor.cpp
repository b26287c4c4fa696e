#include "tsd/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace tsd {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t p = 1;
  for (auto d : shape) p *= d;
  return p;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data,
               bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw std::invalid_argument("tensor: zero dimension");
  if (product(shape) != data.size())
    throw std::invalid_argument("tensor: shape/data size mismatch");
  n_ = std::make_shared<Node>();
  n_->shape = std::move(shape);
  n_->value = std::move(data);
  n_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::vector<double> d(product(shape), 0.0);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor({1}, {v}, requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::logic_error("rows(): tensor is not rank-2");
  return n_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return n_->shape[0];
  if (rank() != 2) throw std::logic_error("cols(): tensor is not rank-1/2");
  return n_->shape[1];
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
  return n_->value[0];
}

std::span<const double> Tensor::grad() const {
  if (n_->grad.empty()) throw std::logic_error("grad(): no gradient present");
  return n_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (n_->grad.empty()) throw std::logic_error("grad(): no gradient present");
  return n_->grad;
}

void Tensor::ensure_grad() {
  if (n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
}

void Tensor::zero_grad() { n_->grad.clear(); }

void Tensor::accumulate_grad(std::span<const double> g) {
  ensure_grad();
  if (g.size() != n_->grad.size())
    throw std::logic_error("accumulate_grad: size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) n_->grad[i] += g[i];
}

bool Tensor::all_finite() const {
  return std::all_of(n_->value.begin(), n_->value.end(),
                     [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < n_->shape.size(); ++i)
    os << (i ? "x" : "") << n_->shape[i];
  os << "]";
  return os.str();
}

Tensor Tensor::clone() const {
  return Tensor(n_->shape, n_->value, n_->requires_grad);
}

// ---------------------------------------------------------------------------
// forward kernels

Tensor matmul_value(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 tensors");
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                a.shape_str() + " vs " + b.shape_str());
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* brow = pb + l * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t m = logits.rows(), k = logits.cols();
  Tensor out = Tensor::zeros({m, k});
  const double* p = logits.data().data();
  double* q = out.mutable_data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = p[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, p[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      q[i * k + j] = std::exp(p[i * k + j] - mx);
      z += q[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) q[i * k + j] /= z;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph

Tensor Graph::track(Tensor t) {
  interior_.push_back(t.id());
  return t;
}

bool Graph::tracked(const Tensor& t) const {
  return std::find(interior_.begin(), interior_.end(), t.id()) != interior_.end();
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  Tensor out = track(matmul_value(a, b));
  Tensor ac = a, bc = b;
  const bool ga = wants_grad(a), gb = wants_grad(b);
  tape_.push_back([this, ac, bc, out, ga, gb]() mutable {
    const std::size_t m = ac.rows(), k = ac.cols(), n = bc.cols();
    auto g = out.grad();
    if (ga) {
      ac.ensure_grad();
      auto da = ac.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            acc += g[i * n + j] * bc.at(l, j);
          da[i * k + l] += acc;
        }
    }
    if (gb) {
      bc.ensure_grad();
      auto db = bc.mutable_grad();
      for (std::size_t l = 0; l < k; ++l)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i)
            acc += ac.at(i, l) * g[i * n + j];
          db[l * n + j] += acc;
        }
    }
  });
  return out;
}

Tensor Graph::add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.size() != x.cols())
    throw std::invalid_argument("add_bias: shape mismatch " + x.shape_str() +
                                " + " + b.shape_str());
  Tensor out = Tensor::zeros({x.rows(), x.cols()});
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.mutable_data()[i * n + j] = x.at(i, j) + b.at(j);
  out = track(out);
  Tensor xc = x, bc = b;
  const bool gx = wants_grad(x), gb = wants_grad(b);
  tape_.push_back([xc, bc, out, gx, gb, m, n]() mutable {
    auto g = out.grad();
    if (gx) xc.accumulate_grad(g);
    if (gb) {
      bc.ensure_grad();
      auto db = bc.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
    }
  });
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("add: shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.mutable_data()[i] = a.at(i) + b.at(i);
  out = track(out);
  Tensor ac = a, bc = b;
  const bool ga = wants_grad(a), gb = wants_grad(b);
  tape_.push_back([ac, bc, out, ga, gb]() mutable {
    auto g = out.grad();
    if (ga) ac.accumulate_grad(g);
    if (gb) bc.accumulate_grad(g);
  });
  return out;
}

Tensor Graph::relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.mutable_data()[i] = x.at(i) > 0.0 ? x.at(i) : 0.0;
  out = track(out);
  Tensor xc = x;
  const bool gx = wants_grad(x);
  tape_.push_back([xc, out, gx]() mutable {
    if (!gx) return;
    auto g = out.grad();
    xc.ensure_grad();
    auto dx = xc.mutable_grad();
    // subgradient at exactly 0 is 0
    for (std::size_t i = 0; i < xc.size(); ++i)
      if (xc.at(i) > 0.0) dx[i] += g[i];
  });
  return out;
}

Tensor Graph::batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        BatchNormState& state, Mode mode) {
  if (x.rank() != 2)
    throw std::invalid_argument("batchnorm: expects [batch x features]");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n)
    throw std::invalid_argument("batchnorm: gamma/beta width mismatch");
  if (mode == Mode::train && m < 2)
    throw std::invalid_argument("batchnorm: train mode needs batch >= 2");

  std::vector<double> mean(n), inv_std(n);
  if (mode == Mode::train) {
    std::vector<double> var(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += x.at(i, j);
      mean[j] = s / double(m);
    }
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = x.at(i, j) - mean[j];
        s += d * d;
      }
      var[j] = s / double(m);
      inv_std[j] = 1.0 / std::sqrt(var[j] + state.eps);
    }
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t j = 0; j < n; ++j) {
      rm[j] = state.momentum * rm[j] + (1.0 - state.momentum) * mean[j];
      rv[j] = state.momentum * rv[j] + (1.0 - state.momentum) * var[j];
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      mean[j] = state.running_mean.at(j);
      inv_std[j] = 1.0 / std::sqrt(state.running_var.at(j) + state.eps);
    }
  }

  Tensor xhat = Tensor::zeros({m, n});
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (x.at(i, j) - mean[j]) * inv_std[j];
      xhat.mutable_data()[i * n + j] = h;
      out.mutable_data()[i * n + j] = gamma.at(j) * h + beta.at(j);
    }
  out = track(out);
  Tensor xc = x, gc = gamma, bc = beta;
  const bool gx = wants_grad(x), gg = wants_grad(gamma), gb = wants_grad(beta);
  const bool train = (mode == Mode::train);
  tape_.push_back([xc, gc, bc, out, xhat, inv_std, gx, gg, gb, train, m, n]() mutable {
    auto g = out.grad();
    if (gg) {
      gc.ensure_grad();
      auto dg = gc.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          dg[j] += g[i * n + j] * xhat.at(i, j);
    }
    if (gb) {
      bc.ensure_grad();
      auto db = bc.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
    }
    if (!gx) return;
    xc.ensure_grad();
    auto dx = xc.mutable_grad();
    if (!train) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          dx[i * n + j] += g[i * n + j] * gc.at(j) * inv_std[j];
      return;
    }
    // full train-mode gradient including the mean/variance terms
    for (std::size_t j = 0; j < n; ++j) {
      double sum_g = 0.0, sum_gh = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        sum_g += g[i * n + j];
        sum_gh += g[i * n + j] * xhat.at(i, j);
      }
      const double c = gc.at(j) * inv_std[j] / double(m);
      for (std::size_t i = 0; i < m; ++i) {
        dx[i * n + j] += c * (double(m) * g[i * n + j] - sum_g -
                              xhat.at(i, j) * sum_gh);
      }
    }
  });
  return out;
}

Tensor Graph::softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw std::invalid_argument("softmax_cross_entropy: expects [batch x K]");
  const std::size_t m = logits.rows(), k = logits.cols();
  if (labels.size() != m)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || std::size_t(y) >= k)
      throw std::invalid_argument("softmax_cross_entropy: label " +
                                  std::to_string(y) + " out of range [0," +
                                  std::to_string(k) + ")");
  // stabilized log-softmax
  Tensor probs = softmax_rows(logits);
  double loss = 0.0;
  const double* p = logits.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = p[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, p[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(p[i * k + j] - mx);
    loss -= (p[i * k + std::size_t(labels[i])] - mx - std::log(z));
  }
  Tensor out = track(Tensor::scalar(loss / double(m)));
  Tensor lc = logits;
  const bool gl = wants_grad(logits);
  tape_.push_back([lc, out, probs, labels, gl, m, k]() mutable {
    if (!gl) return;
    const double g = out.grad()[0];
    lc.ensure_grad();
    auto dl = lc.mutable_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        double d = probs.at(i, j);
        if (j == std::size_t(labels[i])) d -= 1.0;
        dl[i * k + j] += g * d / double(m);
      }
  });
  return out;
}

Tensor Graph::mse(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target))
    throw std::invalid_argument("mse: shape mismatch " + pred.shape_str() +
                                " vs " + target.shape_str());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.at(i) - target.at(i);
    s += d * d;
  }
  Tensor out = track(Tensor::scalar(s / double(pred.size())));
  Tensor pc = pred, tc = target;
  const bool gp = wants_grad(pred), gt = wants_grad(target);
  tape_.push_back([pc, tc, out, gp, gt]() mutable {
    const double g = out.grad()[0];
    const double n = double(pc.size());
    if (gp) {
      pc.ensure_grad();
      auto dp = pc.mutable_grad();
      for (std::size_t i = 0; i < pc.size(); ++i)
        dp[i] += g * 2.0 * (pc.at(i) - tc.at(i)) / n;
    }
    if (gt) {
      tc.ensure_grad();
      auto dt = tc.mutable_grad();
      for (std::size_t i = 0; i < tc.size(); ++i)
        dt[i] -= g * 2.0 * (pc.at(i) - tc.at(i)) / n;
    }
  });
  return out;
}

Tensor Graph::concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw std::invalid_argument("concat: batch mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  Tensor out = Tensor::zeros({m, p + q});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j)
      out.mutable_data()[i * (p + q) + j] = a.at(i, j);
    for (std::size_t j = 0; j < q; ++j)
      out.mutable_data()[i * (p + q) + p + j] = b.at(i, j);
  }
  out = track(out);
  Tensor ac = a, bc = b;
  const bool ga = wants_grad(a), gb = wants_grad(b);
  tape_.push_back([ac, bc, out, ga, gb, m, p, q]() mutable {
    auto g = out.grad();
    if (ga) {
      ac.ensure_grad();
      auto da = ac.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) da[i * p + j] += g[i * (p + q) + j];
    }
    if (gb) {
      bc.ensure_grad();
      auto db = bc.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j)
          db[i * q + j] += g[i * (p + q) + p + j];
    }
  });
  return out;
}

Tensor Graph::sum(const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
  Tensor out = track(Tensor::scalar(s));
  Tensor xc = x;
  const bool gx = wants_grad(x);
  tape_.push_back([xc, out, gx]() mutable {
    if (!gx) return;
    const double g = out.grad()[0];
    xc.ensure_grad();
    auto dx = xc.mutable_grad();
    for (std::size_t i = 0; i < xc.size(); ++i) dx[i] += g;
  });
  return out;
}

Tensor Graph::axpy(const Tensor& a, double c, const Tensor& b) {
  if (a.size() != 1 || b.size() != 1)
    throw std::invalid_argument("axpy: expects scalar tensors");
  Tensor out = track(Tensor::scalar(a.item() + c * b.item()));
  Tensor ac = a, bc = b;
  const bool ga = wants_grad(a), gb = wants_grad(b);
  tape_.push_back([ac, bc, out, c, ga, gb]() mutable {
    const double g = out.grad()[0];
    if (ga) {
      ac.ensure_grad();
      ac.mutable_grad()[0] += g;
    }
    if (gb) {
      bc.ensure_grad();
      bc.mutable_grad()[0] += g * c;
    }
  });
  return out;
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward: graph already consumed");
  if (loss.size() != 1) throw std::invalid_argument("backward: loss is not scalar");
  if (!tracked(loss))
    throw std::logic_error("backward: loss was not produced by this graph");
  consumed_ = true;
  Tensor l = loss;
  l.ensure_grad();
  l.mutable_grad()[0] = 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------

double grad_check(std::vector<Tensor> params,
                  const std::function<Tensor(Graph&)>& f, double h) {
  // analytic pass
  for (auto& p : params) p.zero_grad();
  {
    Graph g;
    Tensor loss = f(g);
    if (!std::isfinite(loss.item()))
      throw std::runtime_error("grad_check: non-finite loss at base point");
    g.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.size(), 0.0);
  }

  auto eval = [&]() {
    Graph g;
    Tensor loss = f(g);
    const double v = loss.item();
    if (!std::isfinite(v))
      throw std::runtime_error("grad_check: non-finite loss at probe point");
    return v;
  };

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto d = params[pi].mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double orig = d[i];
      d[i] = orig + h;
      const double fp = eval();
      d[i] = orig - h;
      const double fm = eval();
      d[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace tsd
