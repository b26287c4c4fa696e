#pragma once

// Disentanglement diagnostics: PCA, logistic-regression and neural probes,
// component histograms, swapping / interpolation / retrieval, and the
// S-vs-market correlation check.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsd/nets.hpp"
#include "tsd/tensor.hpp"

namespace tsd {

struct ProbeReport {
  std::string probe;
  std::string space;   // "S" | "Z" | "X"
  std::string target;
  double accuracy = 0.0;
  double error_rate = 0.0;
  double chance = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::string config;  // echo of the probe configuration
};

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  std::vector<double> mean;
  std::vector<std::vector<double>> components;  // k unit vectors
  std::vector<double> explained;                // nonincreasing ratios
};

PcaModel pca_fit(const Tensor& X, std::size_t k);
Tensor pca_project(const PcaModel& model, const Tensor& X);  // [n x k] scores

// ---------------------------------------------------------------------------
// logistic regression

struct LogRegConfig {
  double l2 = 1e-4;
  double tol = 1e-6;       // gradient inf-norm stopping tolerance
  std::size_t max_iter = 10000;
};

struct LogRegModel {
  std::size_t dim = 0;
  std::size_t k = 0;
  std::vector<double> W;  // k x (dim + 1), bias last
  std::vector<double> feature_mean, feature_sd;  // internal standardization
};

LogRegModel logreg_fit(const Tensor& X, const std::vector<int>& y,
                       const LogRegConfig& cfg = {});
std::vector<int> logreg_predict(const LogRegModel& m, const Tensor& X);
double logreg_eval(const LogRegModel& m, const Tensor& X, const std::vector<int>& y);

// ---------------------------------------------------------------------------
// neural classification score

struct ScoreConfig {
  std::size_t epochs = 400;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;   // stratified
  std::size_t tile_to = 1000;   // replicate tiny (exhaustive) sets up to this
  double adam_lr = 1e-3;
};

ProbeReport classification_score(const Tensor& codes, const std::vector<int>& labels,
                                 const NetworkSpec& probe, const ScoreConfig& cfg,
                                 const std::string& space = "",
                                 const std::string& target = "");

// ---------------------------------------------------------------------------
// histograms

struct Histograms {
  std::size_t bins = 0;
  std::vector<int> groups;                       // distinct latent values
  std::vector<double> lo, hi;                    // per component
  // counts[component][group_index][bin]
  std::vector<std::vector<std::vector<std::size_t>>> counts;
};

Histograms z_histograms(const Tensor& codes, const std::vector<int>& latent,
                        std::size_t bins);
void write_histograms_csv(const Histograms& h, const std::filesystem::path& path);

// Bimodality criterion: between-group gap exceeds the within-group range.
// Returns the separating component index, or -1 if none qualifies.
int separating_component(const Tensor& codes, const std::vector<int>& latent);

// ---------------------------------------------------------------------------
// generation-based measures

Tensor swap(Network& decoder, const Tensor& s_from, const Tensor& z_from);
// grid[i*steps+j] = Dec((1-a_i) s1 + a_i s2, (1-a_j) z1 + a_j z2)
Tensor interpolate(Network& decoder, const Tensor& s1, const Tensor& z1,
                   const Tensor& s2, const Tensor& z2, std::size_t steps);

std::vector<std::size_t> retrieve(const Tensor& codes, std::size_t query,
                                  std::size_t k);

// |Pearson r| between the first PCA component of S (averaged per period) and
// the per-period mean market return.
double market_correlation(const Tensor& s_codes, const std::vector<int>& period_ids,
                          const std::vector<double>& market_mean_per_period);

}  // namespace tsd
