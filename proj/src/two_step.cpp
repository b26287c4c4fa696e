#include "tsd/two_step.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace tsd {

void TrainConfig::validate() const {
  if (lambda < 0) throw std::invalid_argument("train config: negative lambda");
  if (batch_size == 0) throw std::invalid_argument("train config: zero batch size");
  if (encdec_batches_per_iter != 1)
    throw std::invalid_argument("train config: encdec batches per iter must be 1");
  if (adversary_batches_per_iter == 0)
    throw std::invalid_argument("train config: zero adversary batches");
}

void TrainHistory::append(HistoryRecord r) {
  if (!std::isfinite(r.l_rec) || !std::isfinite(r.l_adv))
    throw std::runtime_error("history: non-finite loss at iter " +
                             std::to_string(r.iter));
  records.push_back(std::move(r));
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "iter,phase,l_rec,l_adv,adv_acc\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g,%.17g,%.17g\n", r.iter,
                  r.phase.c_str(), r.l_rec, r.l_adv, r.adv_acc);
    os << buf;
  }
}

std::size_t TrainHistory::count_phase(const std::string& phase) const {
  return std::size_t(std::count_if(records.begin(), records.end(),
                                   [&](const auto& r) { return r.phase == phase; }));
}

Batch make_batch(const SampleSet& data, const std::vector<std::size_t>& idx) {
  Batch b;
  std::vector<double> x(idx.size() * data.dim);
  b.y.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(data.row(idx[i]), data.dim, x.begin() + i * data.dim);
    b.y.push_back(data.y[idx[i]]);
  }
  b.x = Tensor::matrix(idx.size(), data.dim, std::move(x));
  return b;
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_(std::min(batch_size, n)), order_(n), rng_(seed * 2654435761u + 17) {
  std::iota(order_.begin(), order_.end(), 0);
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  if (cursor_ + batch_ > n_) reshuffle();
  std::vector<std::size_t> idx(order_.begin() + std::ptrdiff_t(cursor_),
                               order_.begin() + std::ptrdiff_t(cursor_ + batch_));
  cursor_ += batch_;
  return idx;
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t m = logits.rows(), k = logits.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (int(best) == labels[i]) ++hits;
  }
  return double(hits) / double(m);
}

Tensor encode(Network& enc, const Tensor& x) {
  const std::size_t n = x.rows(), chunk = 1024;
  const std::size_t out_w = enc.spec().output_width();
  Tensor out = Tensor::zeros({n, out_w});
  for (std::size_t lo = 0; lo < n; lo += chunk) {
    const std::size_t m = std::min(chunk, n - lo);
    std::vector<double> part(m * x.cols());
    std::copy_n(x.data().begin() + lo * x.cols(), part.size(), part.begin());
    Tensor h = enc.forward(nullptr, Tensor::matrix(m, x.cols(), std::move(part)),
                           Mode::eval);
    std::copy_n(h.data().begin(), m * out_w, out.mutable_data().begin() + lo * out_w);
  }
  return out;
}

Tensor encode(Network& enc, const SampleSet& data) {
  return encode(enc, data.as_tensor());
}

// ---------------------------------------------------------------------------

Stage1Result train_stage1(const SampleSet& data, const NetworkSpec& enc_spec,
                          const NetworkSpec& clf_spec, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  const std::size_t k = clf_spec.output_width();
  std::vector<std::size_t> per_class(k, 0);
  for (int y : data.y) {
    if (std::size_t(y) >= k)
      throw std::invalid_argument("stage1: label out of range");
    ++per_class[std::size_t(y)];
  }
  if (std::all_of(per_class.begin(), per_class.end(),
                  [](std::size_t c) { return c == 0; }))
    throw std::invalid_argument("stage1: no training data");

  Stage1Result res;
  res.enc_s = Network::build(enc_spec, cfg.seed * 6364136223846793005ull + 1);
  res.s_classifier = Network::build(clf_spec, cfg.seed * 6364136223846793005ull + 2);
  Optimizer opt = Optimizer::adam(cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
  std::vector<Tensor> params = res.enc_s.parameters();
  for (auto& p : res.s_classifier.parameters()) params.push_back(p);

  BatchSampler sampler(data.n(), cfg.batch_size, cfg.seed);
  const std::size_t steps_per_epoch =
      std::max<std::size_t>(1, data.n() / std::min(cfg.batch_size, data.n()));
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++iter) {
      Batch b = make_batch(data, sampler.next());
      for (auto& p : params) p.zero_grad();
      Graph g;
      Tensor feats = res.enc_s.forward(&g, b.x, Mode::train);
      Tensor logits = res.s_classifier.forward(&g, feats, Mode::train);
      Tensor loss = g.softmax_cross_entropy(logits, b.y);
      if (!std::isfinite(loss.item()))
        throw std::runtime_error("stage1: non-finite loss at iter " +
                                 std::to_string(iter));
      g.backward(loss);
      opt.step(params);
      if (iter % cfg.log_every == 0)
        res.history.append(
            {iter, "stage1", loss.item(), 0.0, accuracy(logits, b.y)});
    }
  }

  // full-set eval-mode training accuracy
  Tensor feats = encode(res.enc_s, data);
  Tensor logits = encode(res.s_classifier, feats);
  res.train_accuracy = accuracy(logits, data.y);
  return res;
}

EncDecStats encdec_update(ModelBundle& bundle, const Batch& batch,
                          const TrainConfig& cfg, Optimizer& opt) {
  // frozen S: no-grad eval forward
  Tensor s = bundle.enc_s.forward(nullptr, batch.x, Mode::eval);
  Graph g;
  Tensor z = bundle.enc_z.forward(&g, batch.x, Mode::train);
  Tensor xhat = bundle.decoder.forward(&g, g.concat(s, z), Mode::train);
  Tensor l_rec = g.mse(xhat, batch.x);
  // With batch statistics (see TrainConfig::adversary_batch_stats) the
  // adversary's parameters and running stats still must not change during
  // this step, so the stats touched by the train-mode forward are restored
  // below.
  auto adv_named = bundle.adversary.named_tensors();
  std::vector<std::vector<double>> saved;
  saved.reserve(adv_named.size());
  for (auto& [name, t] : adv_named)
    saved.emplace_back(t.data().begin(), t.data().end());
  Tensor adv_logits = bundle.adversary.forward(
      &g, z, cfg.adversary_batch_stats ? Mode::train : Mode::eval);
  Tensor l_adv = g.softmax_cross_entropy(adv_logits, batch.y);
  Tensor total = g.axpy(l_rec, -cfg.lambda, l_adv);
  if (!std::isfinite(total.item()))
    throw std::runtime_error("encdec_update: non-finite combined loss");

  std::vector<Tensor> params = bundle.enc_z.parameters();
  for (auto& p : bundle.decoder.parameters()) params.push_back(p);
  for (auto& p : params) p.zero_grad();
  bundle.adversary.zero_grads();  // computed below, discarded
  g.backward(total);
  opt.step(params);
  bundle.adversary.zero_grads();
  for (std::size_t i = 0; i < adv_named.size(); ++i)
    std::copy(saved[i].begin(), saved[i].end(),
              adv_named[i].second.mutable_data().begin());
  return {l_rec.item(), l_adv.item()};
}

AdversaryStats adversary_update(ModelBundle& bundle, const Batch& batch,
                                Optimizer& opt) {
  // detached Z, eval-mode encoder
  Tensor z = bundle.enc_z.forward(nullptr, batch.x, Mode::eval);
  Graph g;
  Tensor logits = bundle.adversary.forward(&g, z, Mode::train);
  Tensor loss = g.softmax_cross_entropy(logits, batch.y);
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("adversary_update: non-finite loss");
  std::vector<Tensor> params = bundle.adversary.parameters();
  for (auto& p : params) p.zero_grad();
  g.backward(loss);
  opt.step(params);
  return {loss.item(), accuracy(logits, batch.y)};
}

Stage2Result train_stage2(ModelBundle& bundle, const SampleSet& data,
                          const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  const std::uint64_t frozen_hash = bundle.enc_s.param_hash();
  Optimizer opt_encdec = Optimizer::adam(cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
  Optimizer opt_adv = Optimizer::sgd(cfg.adversary_sgd_lr);

  BatchSampler sampler(data.n(), cfg.batch_size, cfg.seed * 31 + 7);
  Stage2Result res;
  for (std::size_t it = 0; it < cfg.stage2_iterations; ++it) {
    Batch b = make_batch(data, sampler.next());
    EncDecStats es = encdec_update(bundle, b, cfg, opt_encdec);
    res.history.append({it, "encdec", es.l_rec, es.l_adv, 0.0});
    for (std::size_t a = 0; a < cfg.adversary_batches_per_iter; ++a) {
      Batch ab = make_batch(data, sampler.next());  // fresh mini-batches
      AdversaryStats as = adversary_update(bundle, ab, opt_adv);
      res.history.append({it, "adversary", 0.0, as.l_adv, as.acc});
    }
    if (bundle.enc_s.param_hash() != frozen_hash)
      throw std::logic_error("stage2: frozen S parameters changed");
  }
  return res;
}

}  // namespace tsd
