#pragma once

// Black-Scholes pricing and the market-neutral straddle backtest driven by a
// volatility classifier.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tsd {

enum class OptionKind { call, put };

double norm_cdf(double x);
double bs_price(OptionKind kind, double spot, double strike, double r, double sigma,
                double T);
// CRR binomial tree reference (test oracle and CLI cross-check)
double binomial_price(OptionKind kind, double spot, double strike, double r,
                      double sigma, double T, std::size_t steps);

// annualized trailing volatility; nullopt when history is shorter than window
std::optional<double> estimate_vol(const std::vector<double>& returns,
                                   std::size_t end /*exclusive*/,
                                   std::size_t window = 50);

// ---------------------------------------------------------------------------

struct StraddlePosition {
  std::size_t asset = 0;
  bool is_long = false;
  std::size_t entry_day = 0;
  double spot = 0.0;
  double strike = 0.0;
  double expiry_days = 0.0;
  double entry_call = 0.0;  // transaction values at the prevailing estimate
  double entry_put = 0.0;
  double mark_call = 0.0;   // informational values at the predicted vol
  double mark_put = 0.0;
  double exit_call = 0.0;
  double exit_put = 0.0;
  double pnl = 0.0;
  bool marked_intrinsic = false;
};

struct TradeSelection {
  std::vector<std::size_t> longs;   // 10, highest predicted - measured
  std::vector<std::size_t> shorts;  // 10, lowest
};

// diff[i] paired with ids[i]; requires >= 2*n_side eligible entries
TradeSelection select_trades(const std::vector<double>& diff,
                             const std::vector<std::size_t>& ids,
                             std::size_t n_side = 10);

struct BacktestConfig {
  std::size_t warmup = 50;       // trailing-vol window
  double strike_mult = 1.05;
  double long_expiry_days = 60;
  double short_expiry_days = 5;
  double r = 0.0;                // pricing rate
  double days_per_year = 252.0;
  std::size_t n_side = 10;
};

struct DailyRecord {
  std::size_t day = 0;
  std::size_t n_long = 0;
  std::size_t n_short = 0;
  double pnl = 0.0;      // net P&L / gross entry premium
  bool skipped = false;  // < 2*n_side eligible assets
};

struct BacktestReport {
  std::vector<DailyRecord> daily;
  std::vector<StraddlePosition> positions;
  double mean = 0.0;
  double sd = 0.0;
  double pct_positive = 0.0;
  std::size_t traded_days = 0;

  void recompute_summary();
  void write_csv(const std::filesystem::path& path) const;
};

// classifier(asset, day) -> predicted volatility class in [0, n_vol_classes),
// or -1 when no prediction is available for that asset/day.
using VolClassifier = std::function<int(std::size_t asset, std::size_t day)>;

// returns[asset][day]; class_to_vol maps class id -> annualized volatility
BacktestReport run_backtest(const std::vector<std::vector<double>>& returns,
                            const VolClassifier& classifier,
                            const std::vector<double>& class_to_vol,
                            const BacktestConfig& cfg);

/// class -> vol mapping from the training distribution of measured vols:
// midpoints of the quartile intervals (12.5/37.5/62.5/87.5th percentiles)
std::vector<double> class_vol_midpoints(std::vector<double> training_vols,
                                        std::size_t k = 4);

/// Oracle classifier: discretized true vol of the next `horizon` returns.
VolClassifier oracle_classifier(const std::vector<std::vector<double>>& returns,
                                const std::vector<double>& edges,
                                std::size_t horizon, double days_per_year = 252.0);
VolClassifier random_classifier(std::uint64_t seed, std::size_t k = 4);

}  // namespace tsd
