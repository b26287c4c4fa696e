#include "tsd/probes.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "tsd/two_step.hpp"

namespace tsd {

// ---------------------------------------------------------------------------
// PCA

PcaModel pca_fit(const Tensor& X, std::size_t k) {
  const std::size_t n = X.rows(), d = X.cols();
  if (n < 2) throw std::invalid_argument("pca_fit: need at least 2 samples");
  if (k > d) throw std::invalid_argument("pca_fit: k exceeds dimension");

  PcaModel model;
  model.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) model.mean[j] += X.at(i, j);
  for (auto& m : model.mean) m /= double(n);

  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(Eigen::Index(d), Eigen::Index(d));
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd row = Eigen::VectorXd::Zero(Eigen::Index(d));
    for (std::size_t j = 0; j < d; ++j) row[Eigen::Index(j)] = X.at(i, j) - model.mean[j];
    C += row * row.transpose();
  }
  C /= double(n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(C);
  const auto& vals = solver.eigenvalues();    // ascending
  const auto& vecs = solver.eigenvectors();
  const double total = std::max(0.0, C.trace());

  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Index col = Eigen::Index(d - 1 - c);
    Eigen::VectorXd v = vecs.col(col);
    // deterministic sign: largest-magnitude coordinate is positive
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v[imax] < 0) v = -v;
    model.components.emplace_back(v.data(), v.data() + v.size());
    const double ev = std::max(0.0, vals[col]);
    model.explained.push_back(total > 0 ? ev / total : 0.0);
  }
  return model;
}

Tensor pca_project(const PcaModel& model, const Tensor& X) {
  const std::size_t n = X.rows(), d = X.cols(), k = model.components.size();
  if (d != model.mean.size())
    throw std::invalid_argument("pca_project: dimension mismatch");
  Tensor out = Tensor::zeros({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        s += (X.at(i, j) - model.mean[j]) * model.components[c][j];
      out.mutable_data()[i * k + c] = s;
    }
  return out;
}

// ---------------------------------------------------------------------------
// logistic regression (multinomial, full-batch gradient descent)

namespace {

// loss and gradient at W for standardized features Xs (n x (d+1), bias col)
double logreg_loss_grad(const std::vector<double>& Xs, std::size_t n, std::size_t d1,
                        const std::vector<int>& y, std::size_t k, double l2,
                        const std::vector<double>& W, std::vector<double>* grad) {
  if (grad) grad->assign(W.size(), 0.0);
  double loss = 0.0;
  std::vector<double> logits(k), probs(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d1; ++j) s += W[c * d1 + j] * Xs[i * d1 + j];
      logits[c] = s;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      probs[c] = std::exp(logits[c] - mx);
      z += probs[c];
    }
    for (auto& p : probs) p /= z;
    loss -= std::log(std::max(probs[std::size_t(y[i])], 1e-300));
    if (grad)
      for (std::size_t c = 0; c < k; ++c) {
        const double delta =
            (probs[c] - (c == std::size_t(y[i]) ? 1.0 : 0.0)) / double(n);
        for (std::size_t j = 0; j < d1; ++j)
          (*grad)[c * d1 + j] += delta * Xs[i * d1 + j];
      }
  }
  loss /= double(n);
  // L2 on weights, bias excluded
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j + 1 < d1; ++j) {
      loss += 0.5 * l2 * W[c * d1 + j] * W[c * d1 + j];
      if (grad) (*grad)[c * d1 + j] += l2 * W[c * d1 + j];
    }
  return loss;
}

std::vector<double> standardize(const Tensor& X, const LogRegModel& m) {
  const std::size_t n = X.rows(), d = X.cols(), d1 = d + 1;
  std::vector<double> Xs(n * d1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j)
      Xs[i * d1 + j] = (X.at(i, j) - m.feature_mean[j]) / m.feature_sd[j];
    Xs[i * d1 + d] = 1.0;
  }
  return Xs;
}

}  // namespace

LogRegModel logreg_fit(const Tensor& X, const std::vector<int>& y,
                       const LogRegConfig& cfg) {
  const std::size_t n = X.rows(), d = X.cols();
  if (y.size() != n) throw std::invalid_argument("logreg_fit: label count mismatch");
  std::set<int> classes(y.begin(), y.end());
  if (classes.size() < 2)
    throw std::invalid_argument("logreg_fit: need at least 2 classes in training data");
  const std::size_t k = std::size_t(*classes.rbegin()) + 1;

  LogRegModel m;
  m.dim = d;
  m.k = k;
  m.feature_mean.assign(d, 0.0);
  m.feature_sd.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m.feature_mean[j] += X.at(i, j);
  for (auto& v : m.feature_mean) v /= double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = X.at(i, j) - m.feature_mean[j];
      m.feature_sd[j] += c * c;
    }
  for (auto& v : m.feature_sd) {
    v = std::sqrt(v / double(n));
    if (v == 0.0) v = 1.0;
  }

  const std::size_t d1 = d + 1;
  const std::vector<double> Xs = standardize(X, m);
  m.W.assign(k * d1, 0.0);

  std::vector<double> grad, trialW;
  double lr = 1.0;
  double loss = logreg_loss_grad(Xs, n, d1, y, k, cfg.l2, m.W, &grad);
  for (std::size_t it = 0; it < cfg.max_iter; ++it) {
    double gmax = 0.0;
    for (double g : grad) gmax = std::max(gmax, std::abs(g));
    if (gmax <= cfg.tol) break;
    // backtracking step
    for (;;) {
      trialW = m.W;
      for (std::size_t i = 0; i < trialW.size(); ++i) trialW[i] -= lr * grad[i];
      const double trial = logreg_loss_grad(Xs, n, d1, y, k, cfg.l2, trialW, nullptr);
      if (trial <= loss || lr < 1e-12) {
        m.W = trialW;
        loss = trial;
        lr *= 1.1;
        break;
      }
      lr *= 0.5;
    }
    loss = logreg_loss_grad(Xs, n, d1, y, k, cfg.l2, m.W, &grad);
  }
  return m;
}

std::vector<int> logreg_predict(const LogRegModel& m, const Tensor& X) {
  if (X.cols() != m.dim) throw std::invalid_argument("logreg: dimension mismatch");
  const std::size_t n = X.rows(), d1 = m.dim + 1;
  const std::vector<double> Xs = standardize(X, m);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -1e300;
    int arg = 0;
    for (std::size_t c = 0; c < m.k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d1; ++j) s += m.W[c * d1 + j] * Xs[i * d1 + j];
      if (s > best) {
        best = s;
        arg = int(c);
      }
    }
    out[i] = arg;
  }
  return out;
}

double logreg_eval(const LogRegModel& m, const Tensor& X, const std::vector<int>& y) {
  const auto pred = logreg_predict(m, X);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == y[i]) ++hits;
  return double(hits) / double(pred.size());
}

// ---------------------------------------------------------------------------
// neural classification score

ProbeReport classification_score(const Tensor& codes, const std::vector<int>& labels,
                                 const NetworkSpec& probe, const ScoreConfig& cfg,
                                 const std::string& space, const std::string& target) {
  const std::size_t d = codes.cols();
  std::size_t n = codes.rows();
  if (labels.size() != n)
    throw std::invalid_argument("classification_score: label count mismatch");

  // tile tiny exhaustive populations so split accuracies are not quantized;
  // for such populations the score is a population accuracy (every distinct
  // sample is seen), which is the right reading when the dataset enumerates
  // the whole world
  SampleSet data;
  data.dim = d;
  const std::size_t reps = n < cfg.tile_to ? (cfg.tile_to + n - 1) / n : 1;
  for (std::size_t r = 0; r < reps; ++r) {
    data.X.insert(data.X.end(), codes.data().begin(), codes.data().end());
    data.y.insert(data.y.end(), labels.begin(), labels.end());
  }
  n = data.n();

  // stratified split
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[data.y[i]].push_back(i);
  std::mt19937_64 rng(cfg.seed * 7919 + 3);
  std::vector<std::size_t> train_idx, test_idx;
  for (auto& [cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n_test = std::size_t(double(idx.size()) * cfg.test_fraction);
    for (std::size_t i = 0; i < idx.size(); ++i)
      (i < n_test ? test_idx : train_idx).push_back(idx[i]);
  }

  SampleSet train, test;
  train.dim = test.dim = d;
  for (auto i : train_idx) {
    train.X.insert(train.X.end(), data.row(i), data.row(i) + d);
    train.y.push_back(data.y[i]);
  }
  for (auto i : test_idx) {
    test.X.insert(test.X.end(), data.row(i), data.row(i) + d);
    test.y.push_back(data.y[i]);
  }

  TrainConfig tc;
  tc.batch_size = cfg.batch_size;
  tc.stage1_epochs = cfg.epochs;
  tc.seed = cfg.seed;
  tc.adam_lr = cfg.adam_lr;
  tc.log_every = 1u << 30;
  // probe nets are dense -> batchnorm stacks; reuse the stage-1 trainer with
  // an identity "encoder" front
  NetworkSpec identity;
  identity.input_width = d;
  identity.layers = {LayerSpec::dense(d)};
  Stage1Result r = train_stage1(train, identity, probe, tc);

  Tensor test_logits = encode(r.s_classifier, encode(r.enc_s, test));
  const double acc = accuracy(test_logits, test.y);

  ProbeReport rep;
  rep.probe = "classification_score";
  rep.space = space;
  rep.target = target;
  rep.accuracy = acc;
  rep.error_rate = 1.0 - acc;
  std::set<int> classes(labels.begin(), labels.end());
  rep.chance = 1.0 / double(classes.size());
  rep.n_train = train.n();
  rep.n_test = test.n();
  std::ostringstream cfg_echo;
  cfg_echo << "epochs=" << cfg.epochs << ",batch=" << cfg.batch_size
           << ",seed=" << cfg.seed << ",test_fraction=" << cfg.test_fraction
           << ",tile_to=" << cfg.tile_to;
  rep.config = cfg_echo.str();
  return rep;
}

// ---------------------------------------------------------------------------
// histograms

Histograms z_histograms(const Tensor& codes, const std::vector<int>& latent,
                        std::size_t bins) {
  const std::size_t n = codes.rows(), d = codes.cols();
  if (latent.size() != n)
    throw std::invalid_argument("z_histograms: latent meta missing");
  Histograms h;
  h.bins = bins;
  std::set<int> groups(latent.begin(), latent.end());
  h.groups.assign(groups.begin(), groups.end());
  h.lo.resize(d);
  h.hi.resize(d);
  h.counts.assign(d, std::vector<std::vector<std::size_t>>(
                         h.groups.size(), std::vector<std::size_t>(bins, 0)));
  for (std::size_t c = 0; c < d; ++c) {
    double lo = codes.at(0, c), hi = lo;
    for (std::size_t i = 0; i < n; ++i) {
      lo = std::min(lo, codes.at(i, c));
      hi = std::max(hi, codes.at(i, c));
    }
    h.lo[c] = lo;
    h.hi[c] = hi;
    const double w = hi > lo ? (hi - lo) / double(bins) : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t b = std::size_t((codes.at(i, c) - lo) / w);
      if (b >= bins) b = bins - 1;
      const std::size_t g = std::size_t(
          std::find(h.groups.begin(), h.groups.end(), latent[i]) - h.groups.begin());
      ++h.counts[c][g][b];
    }
  }
  return h;
}

void write_histograms_csv(const Histograms& h, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "component,group,bin_left,bin_right,count\n";
  for (std::size_t c = 0; c < h.counts.size(); ++c) {
    const double w = h.hi[c] > h.lo[c] ? (h.hi[c] - h.lo[c]) / double(h.bins) : 1.0;
    for (std::size_t g = 0; g < h.groups.size(); ++g)
      for (std::size_t b = 0; b < h.bins; ++b)
        os << c << "," << h.groups[g] << "," << h.lo[c] + double(b) * w << ","
           << h.lo[c] + double(b + 1) * w << "," << h.counts[c][g][b] << "\n";
  }
}

int separating_component(const Tensor& codes, const std::vector<int>& latent) {
  const std::size_t n = codes.rows(), d = codes.cols();
  std::set<int> gset(latent.begin(), latent.end());
  std::vector<int> groups(gset.begin(), gset.end());
  for (std::size_t c = 0; c < d; ++c) {
    struct Interval {
      double lo = 1e300, hi = -1e300;
    };
    std::vector<Interval> iv(groups.size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t g = std::size_t(
          std::find(groups.begin(), groups.end(), latent[i]) - groups.begin());
      iv[g].lo = std::min(iv[g].lo, codes.at(i, c));
      iv[g].hi = std::max(iv[g].hi, codes.at(i, c));
    }
    double max_within = 0.0;
    for (const auto& v : iv) max_within = std::max(max_within, v.hi - v.lo);
    std::sort(iv.begin(), iv.end(),
              [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
    double min_gap = 1e300;
    bool disjoint = true;
    for (std::size_t g = 1; g < iv.size(); ++g) {
      const double gap = iv[g].lo - iv[g - 1].hi;
      if (gap <= 0) disjoint = false;
      min_gap = std::min(min_gap, gap);
    }
    if (disjoint && min_gap > max_within) return int(c);
  }
  return -1;
}

// ---------------------------------------------------------------------------
// generation-based measures

Tensor swap(Network& decoder, const Tensor& s_from, const Tensor& z_from) {
  if (s_from.rows() != z_from.rows())
    throw std::invalid_argument("swap: batch mismatch");
  if (s_from.cols() + z_from.cols() != decoder.spec().input_width)
    throw std::invalid_argument("swap: code dims do not match decoder input");
  const std::size_t n = s_from.rows(), p = s_from.cols(), q = z_from.cols();
  std::vector<double> joint(n * (p + q));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(s_from.data().begin() + i * p, p, joint.begin() + i * (p + q));
    std::copy_n(z_from.data().begin() + i * q, q, joint.begin() + i * (p + q) + p);
  }
  return decoder.forward(nullptr, Tensor::matrix(n, p + q, std::move(joint)),
                         Mode::eval);
}

Tensor interpolate(Network& decoder, const Tensor& s1, const Tensor& z1,
                   const Tensor& s2, const Tensor& z2, std::size_t steps) {
  if (steps < 2) throw std::invalid_argument("interpolate: steps must be >= 2");
  const std::size_t p = s1.size(), q = z1.size();
  if (s2.size() != p || z2.size() != q)
    throw std::invalid_argument("interpolate: endpoint dims disagree");
  std::vector<double> s_grid(steps * steps * p), z_grid(steps * steps * q);
  for (std::size_t i = 0; i < steps; ++i) {
    const double ai = double(i) / double(steps - 1);
    for (std::size_t j = 0; j < steps; ++j) {
      const double aj = double(j) / double(steps - 1);
      const std::size_t r = i * steps + j;
      for (std::size_t t = 0; t < p; ++t)
        s_grid[r * p + t] = (1.0 - ai) * s1.at(t) + ai * s2.at(t);
      for (std::size_t t = 0; t < q; ++t)
        z_grid[r * q + t] = (1.0 - aj) * z1.at(t) + aj * z2.at(t);
    }
  }
  return swap(decoder, Tensor::matrix(steps * steps, p, std::move(s_grid)),
              Tensor::matrix(steps * steps, q, std::move(z_grid)));
}

std::vector<std::size_t> retrieve(const Tensor& codes, std::size_t query,
                                  std::size_t k) {
  const std::size_t n = codes.rows(), d = codes.cols();
  if (query >= n) throw std::invalid_argument("retrieve: query out of range");
  if (k >= n) throw std::invalid_argument("retrieve: k out of range");
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (i == query) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = codes.at(i, j) - codes.at(query, j);
      s += diff * diff;
    }
    dist.emplace_back(s, i);
  }
  std::sort(dist.begin(), dist.end());  // ties resolved by lower index
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(dist[i].second);
  return out;
}

double market_correlation(const Tensor& s_codes, const std::vector<int>& period_ids,
                          const std::vector<double>& market_mean_per_period) {
  if (period_ids.size() != s_codes.rows())
    throw std::invalid_argument("market_correlation: period ids misaligned");
  const std::size_t n_periods = market_mean_per_period.size();
  if (n_periods < 3)
    throw std::invalid_argument("market_correlation: need at least 3 periods");

  PcaModel pca = pca_fit(s_codes, 1);
  Tensor scores = pca_project(pca, s_codes);
  std::vector<double> mean_score(n_periods, 0.0);
  std::vector<std::size_t> count(n_periods, 0);
  for (std::size_t i = 0; i < period_ids.size(); ++i) {
    const std::size_t p = std::size_t(period_ids[i]);
    if (p >= n_periods)
      throw std::invalid_argument("market_correlation: period id out of range");
    mean_score[p] += scores.at(i, 0);
    ++count[p];
  }
  for (std::size_t p = 0; p < n_periods; ++p) {
    if (count[p] == 0)
      throw std::invalid_argument("market_correlation: empty period " +
                                  std::to_string(p));
    mean_score[p] /= double(count[p]);
  }

  const double mx = std::accumulate(mean_score.begin(), mean_score.end(), 0.0) /
                    double(n_periods);
  const double my =
      std::accumulate(market_mean_per_period.begin(), market_mean_per_period.end(),
                      0.0) /
      double(n_periods);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t p = 0; p < n_periods; ++p) {
    const double dx = mean_score[p] - mx;
    const double dy = market_mean_per_period[p] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::abs(sxy / std::sqrt(sxx * syy));
}

}  // namespace tsd
