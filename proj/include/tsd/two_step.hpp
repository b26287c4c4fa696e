#pragma once

// Two-stage adversarial disentanglement training: classification training of
// the S encoder, then alternating enc-dec / adversary updates with S frozen.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "tsd/datagen.hpp"
#include "tsd/nets.hpp"

namespace tsd {

struct TrainConfig {
  double lambda = 1.0;  // adversarial weight; 0 only for ablation runs
  std::size_t batch_size = 128;
  std::size_t stage1_epochs = 30;
  std::size_t stage2_iterations = 3000;
  std::size_t encdec_batches_per_iter = 1;
  std::size_t adversary_batches_per_iter = 3;
  std::uint64_t seed = 0;
  double adam_lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adversary_sgd_lr = 1e-3;
  // Statistics used when the adversary is *evaluated* inside the enc-dec
  // update (its parameters and running stats stay untouched either way).
  // true: batch statistics, like in its own update — makes the evaluation
  // scale-invariant, so the encoder cannot cheat by inflating ||z|| against
  // stale normalization. false: frozen running statistics.
  bool adversary_batch_stats = true;
  std::size_t log_every = 50;  // history granularity for stage 1 epochs

  bool ablation() const { return lambda == 0.0; }
  void validate() const;
};

struct HistoryRecord {
  std::size_t iter = 0;
  std::string phase;  // "stage1" | "encdec" | "adversary"
  double l_rec = 0.0;
  double l_adv = 0.0;
  double adv_acc = 0.0;  // adversary accuracy; S-classifier accuracy in stage 1
};

struct TrainHistory {
  std::vector<HistoryRecord> records;
  void append(HistoryRecord r);
  void write_csv(const std::filesystem::path& path) const;
  std::size_t count_phase(const std::string& phase) const;
};

struct Batch {
  Tensor x;  // [batch x dim]
  std::vector<int> y;
};

Batch make_batch(const SampleSet& data, const std::vector<std::size_t>& idx);

// Epoch-style batch sampler: without replacement, reshuffled every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::size_t n_, batch_;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  void reshuffle();
};

// ---------------------------------------------------------------------------

struct Stage1Result {
  Network enc_s;
  Network s_classifier;
  TrainHistory history;
  double train_accuracy = 0.0;
};

Stage1Result train_stage1(const SampleSet& data, const NetworkSpec& enc_spec,
                          const NetworkSpec& clf_spec, const TrainConfig& cfg);

// Eval-mode forward over arbitrarily many rows (batched internally).
Tensor encode(Network& enc, const Tensor& x);
Tensor encode(Network& enc, const SampleSet& data);

double accuracy(const Tensor& logits, const std::vector<int>& labels);

struct EncDecStats {
  double l_rec = 0.0;
  double l_adv = 0.0;
};

// One Adam step on (enc_z, decoder) minimizing L_rec - lambda * L_adv.
// enc_s stays frozen; adversary gradients are computed and discarded.
EncDecStats encdec_update(ModelBundle& bundle, const Batch& batch,
                          const TrainConfig& cfg, Optimizer& opt);

struct AdversaryStats {
  double l_adv = 0.0;
  double acc = 0.0;
};

// One SGD step on the adversary against detached, eval-mode Z.
AdversaryStats adversary_update(ModelBundle& bundle, const Batch& batch,
                                Optimizer& opt);

struct Stage2Result {
  TrainHistory history;  // trained nets live in the bundle passed in
};

// bundle.enc_s must already be trained; asserts its hash every iteration.
Stage2Result train_stage2(ModelBundle& bundle, const SampleSet& data,
                          const TrainConfig& cfg);

}  // namespace tsd
