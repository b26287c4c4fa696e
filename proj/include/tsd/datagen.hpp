#pragma once

// Synthetic image sets, CAPM market simulation, and return-panel windowing.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsd/tensor.hpp"

namespace tsd {

struct SampleMeta {
  int latent = -1;   // synth background code (Synth1: 0/1, Synth2: 0..3)
  int period = -1;   // CAPM / panel period id
  int asset = -1;
  double beta = 0.0;
};

struct SampleSet {
  std::size_t dim = 0;
  std::vector<double> X;  // n x dim, row-major
  std::vector<int> y;
  std::vector<SampleMeta> meta;  // empty, or one record per row

  std::size_t n() const { return y.size(); }
  const double* row(std::size_t i) const { return X.data() + i * dim; }
  Tensor as_tensor() const { return Tensor::matrix(n(), dim, X); }
  std::size_t n_classes() const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// synthetic images (32x32 gray rectangle on black/white background)

struct SynthGeometry {
  std::size_t image_size = 32;
  std::size_t rect_height = 3;
  std::size_t rect_width = 20;
  std::size_t first_row = 2;
  std::size_t row_stride = 3;
  std::size_t n_positions = 10;
  void validate() const;  // throws if positions collide or leave the image
};

SampleSet gen_synth1(const SynthGeometry& geom, std::uint64_t seed);
SampleSet gen_synth2(const SynthGeometry& geom, std::uint64_t seed);

// ---------------------------------------------------------------------------
// CAPM simulation

struct CapmConfig {
  std::size_t n_periods = 150;
  std::size_t days = 50;
  std::size_t n_assets = 1500;
  double rf_low = 0.0025;
  double rf_high = 0.03;
  double erm_noise = 0.04 / 50.0;   // E[R_m] = R_f/days + erm_noise*N(0,1)
  double market_noise = 0.0005;     // daily R_m around E[R_m]
  double idio_noise = 0.0005;       // per-asset epsilon
  double beta_low = -1.0;
  double beta_high = 3.0;
  double sample_scale = 10000.0;    // raw daily returns are O(1e-3); scaled so
                                    // window entries are O(1) .. O(10) and the
                                    // relu encoders actually leave the linear
                                    // regime (swept 1e2..1e4)
  double augment_sigma = 5.0;       // generalization noise on emitted samples
                                    // (idio sigma x sample_scale)
  void validate() const;
};

struct MarketPanel {
  std::size_t days_per_period = 50;
  struct Period {
    double rf = 0.0;
    double e_rm = 0.0;
    std::vector<double> rm;  // daily market returns
  };
  struct Asset {
    double beta = 0.0;
    std::vector<double> returns;  // daily returns for this period
  };
  std::vector<Period> periods;
  std::vector<std::vector<Asset>> assets;  // [period][asset]

  std::size_t n_periods() const { return periods.size(); }
  std::size_t n_assets() const { return assets.empty() ? 0 : assets[0].size(); }
  // full-length concatenated series
  std::vector<double> market_series() const;
  std::vector<double> asset_series(std::size_t asset) const;
};

struct CapmData {
  MarketPanel panel;
  SampleSet samples;  // asset returns ++ market returns, label = period index
};
CapmData gen_capm(const CapmConfig& cfg, std::uint64_t seed);

SampleSet augment_noise(const SampleSet& in, double sigma, std::uint64_t seed);

// ---------------------------------------------------------------------------
// raw return panels (CSV ingestion and windowing)

struct RawPanel {
  std::vector<std::string> dates;  // sorted ISO-8601 market dates
  std::vector<double> market;      // aligned with dates
  // per ticker: aligned series; missing days are NaN
  std::map<std::string, std::vector<double>> tickers;
  std::map<std::string, std::size_t> missing_days;

  std::size_t date_index(const std::string& date) const;
};

RawPanel load_returns_csv(const std::filesystem::path& returns_path,
                          const std::filesystem::path& market_path);
// serialize (synthetic weekday calendar starting 2000-01-03 for simulated data)
void save_panel_csv(const MarketPanel& panel,
                    const std::filesystem::path& returns_path,
                    const std::filesystem::path& market_path);

struct QuarterConfig {
  int train_start_year = 1976;
  int train_end_year = 2009;
  int test_start_year = 2010;
  int test_end_year = 2016;
  std::size_t days_per_quarter = 50;  // first N trading days of each quarter
};

struct WindowedQuarters {
  SampleSet train;  // labels: global quarter index within the training span
  SampleSet test;   // labels: quarter index within the test span
  std::size_t n_train_labels = 0;
  std::map<std::string, std::size_t> skipped;  // ticker -> skipped quarters
  std::vector<std::string> short_quarters;     // skipped (< N trading days)
};
WindowedQuarters window_quarters(const RawPanel& panel, const QuarterConfig& cfg);

// ---------------------------------------------------------------------------
// stock measures

struct StockMeasures {
  // per asset, evaluated at a reference day over a trailing window
  std::vector<double> beta_hat;
  std::vector<double> rho_hat;
  std::vector<double> vol_next_1;  // |next-day return|
  std::vector<double> vol_next_5;  // sd of the next 5 returns
};

// series: per-asset daily returns (each aligned with `market`);
// t: reference day index; window: trailing days used for beta/rho
StockMeasures compute_measures(const std::vector<std::vector<double>>& series,
                               const std::vector<double>& market, std::size_t t,
                               std::size_t window = 252);

// equiprobable k-class edges from a training distribution
std::vector<double> quantile_edges(std::vector<double> values, std::size_t k);
int discretize(double v, const std::vector<double>& edges);
std::vector<int> discretize_all(const std::vector<double>& values,
                                const std::vector<double>& edges);

// ---------------------------------------------------------------------------
// CSV io for sample sets

void save_samples_csv(const SampleSet& s, const std::filesystem::path& data_path,
                      const std::filesystem::path& meta_path);
SampleSet load_samples_csv(const std::filesystem::path& data_path,
                           const std::filesystem::path& meta_path);

}  // namespace tsd
