#include "tsd/options_bt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace tsd {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double bs_price(OptionKind kind, double spot, double strike, double r, double sigma,
                double T) {
  if (spot <= 0 || strike <= 0)
    throw std::invalid_argument("bs_price: spot and strike must be positive");
  if (T <= 0) throw std::invalid_argument("bs_price: T must be positive");
  if (sigma < 0) throw std::invalid_argument("bs_price: negative volatility");
  const double disc = std::exp(-r * T);
  if (sigma == 0.0) {
    const double fwd_intrinsic = spot - strike * disc;
    return kind == OptionKind::call ? std::max(fwd_intrinsic, 0.0)
                                    : std::max(-fwd_intrinsic, 0.0);
  }
  const double st = sigma * std::sqrt(T);
  const double d1 = (std::log(spot / strike) + (r + 0.5 * sigma * sigma) * T) / st;
  const double d2 = d1 - st;
  const double call = spot * norm_cdf(d1) - strike * disc * norm_cdf(d2);
  if (kind == OptionKind::call) return call;
  return call - spot + strike * disc;  // parity
}

double binomial_price(OptionKind kind, double spot, double strike, double r,
                      double sigma, double T, std::size_t steps) {
  if (spot <= 0 || strike <= 0 || T <= 0 || steps == 0)
    throw std::invalid_argument("binomial_price: invalid parameters");
  const double dt = T / double(steps);
  const double u = std::exp(sigma * std::sqrt(dt));
  const double d = 1.0 / u;
  const double growth = std::exp(r * dt);
  const double p = (growth - d) / (u - d);
  std::vector<double> values(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) {
    const double s = spot * std::pow(u, double(i)) * std::pow(d, double(steps - i));
    values[i] = kind == OptionKind::call ? std::max(s - strike, 0.0)
                                         : std::max(strike - s, 0.0);
  }
  const double df = std::exp(-r * dt);
  for (std::size_t step = steps; step > 0; --step)
    for (std::size_t i = 0; i < step; ++i)
      values[i] = df * (p * values[i + 1] + (1.0 - p) * values[i]);
  return values[0];
}

std::optional<double> estimate_vol(const std::vector<double>& returns,
                                   std::size_t end, std::size_t window) {
  if (end > returns.size() || end < window) return std::nullopt;
  double mean = 0.0;
  for (std::size_t i = end - window; i < end; ++i) mean += returns[i];
  mean /= double(window);
  double s = 0.0;
  for (std::size_t i = end - window; i < end; ++i)
    s += (returns[i] - mean) * (returns[i] - mean);
  return std::sqrt(s / double(window - 1)) * std::sqrt(252.0);
}

TradeSelection select_trades(const std::vector<double>& diff,
                             const std::vector<std::size_t>& ids,
                             std::size_t n_side) {
  if (diff.size() != ids.size())
    throw std::invalid_argument("select_trades: diff/id size mismatch");
  if (ids.size() < 2 * n_side)
    throw std::invalid_argument("select_trades: fewer than " +
                                std::to_string(2 * n_side) + " eligible assets");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  // longs: highest diff first, ties to the lower asset id
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (diff[a] != diff[b]) return diff[a] > diff[b];
    return ids[a] < ids[b];
  });
  TradeSelection sel;
  for (std::size_t i = 0; i < n_side; ++i) sel.longs.push_back(ids[order[i]]);
  // shorts: reverse order, so ties go to the higher asset id
  for (std::size_t i = 0; i < n_side; ++i)
    sel.shorts.push_back(ids[order[order.size() - 1 - i]]);
  return sel;
}

void BacktestReport::recompute_summary() {
  mean = sd = pct_positive = 0.0;
  traded_days = 0;
  std::vector<double> rets;
  for (const auto& d : daily)
    if (!d.skipped) rets.push_back(d.pnl);
  traded_days = rets.size();
  if (rets.empty()) return;
  mean = std::accumulate(rets.begin(), rets.end(), 0.0) / double(rets.size());
  if (rets.size() > 1) {
    double s = 0.0;
    for (double r : rets) s += (r - mean) * (r - mean);
    sd = std::sqrt(s / double(rets.size() - 1));
  }
  std::size_t pos = 0;
  for (double r : rets)
    if (r > 0) ++pos;
  pct_positive = double(pos) / double(rets.size());
}

void BacktestReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "date,n_long,n_short,pnl\n";
  char buf[96];
  for (const auto& d : daily) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%.17g\n", d.day, d.n_long,
                  d.n_short, d.pnl);
    os << buf;
  }
}

BacktestReport run_backtest(const std::vector<std::vector<double>>& returns,
                            const VolClassifier& classifier,
                            const std::vector<double>& class_to_vol,
                            const BacktestConfig& cfg) {
  if (returns.empty()) throw std::invalid_argument("run_backtest: empty panel");
  const std::size_t n_assets = returns.size();
  const std::size_t n_days = returns[0].size();
  if (n_days < cfg.warmup + 2)
    throw std::invalid_argument("run_backtest: panel shorter than warm-up + 1 day");

  // price paths from returns
  std::vector<std::vector<double>> price(n_assets, std::vector<double>(n_days + 1));
  for (std::size_t a = 0; a < n_assets; ++a) {
    if (returns[a].size() != n_days)
      throw std::invalid_argument("run_backtest: ragged panel");
    price[a][0] = 100.0;
    for (std::size_t t = 0; t < n_days; ++t)
      price[a][t + 1] = price[a][t] * (1.0 + returns[a][t]);
  }
  // price[a][t+1] is the price after day t's return; trade at that close

  BacktestReport report;
  const double dy = cfg.days_per_year;
  for (std::size_t t = cfg.warmup; t + 1 < n_days; ++t) {
    std::vector<double> diff, measured, predicted;
    std::vector<std::size_t> ids;
    for (std::size_t a = 0; a < n_assets; ++a) {
      const auto vol = estimate_vol(returns[a], t + 1, cfg.warmup);
      if (!vol) continue;
      const int cls = classifier(a, t);
      if (cls < 0 || std::size_t(cls) >= class_to_vol.size()) continue;
      ids.push_back(a);
      measured.push_back(*vol);
      predicted.push_back(class_to_vol[std::size_t(cls)]);
      diff.push_back(predicted.back() - measured.back());
    }
    DailyRecord day;
    day.day = t;
    if (ids.size() < 2 * cfg.n_side) {
      day.skipped = true;
      report.daily.push_back(day);
      continue;
    }
    const TradeSelection sel = select_trades(diff, ids, cfg.n_side);

    auto index_of = [&ids](std::size_t asset) {
      return std::size_t(std::find(ids.begin(), ids.end(), asset) - ids.begin());
    };
    double net = 0.0, gross = 0.0;
    auto open = [&](std::size_t asset, bool is_long) {
      const std::size_t i = index_of(asset);
      StraddlePosition pos;
      pos.asset = asset;
      pos.is_long = is_long;
      pos.entry_day = t;
      pos.spot = price[asset][t + 1];
      pos.strike = cfg.strike_mult * pos.spot;
      pos.expiry_days = is_long ? cfg.long_expiry_days : cfg.short_expiry_days;
      const double T = pos.expiry_days / dy;
      pos.entry_call =
          bs_price(OptionKind::call, pos.spot, pos.strike, cfg.r, measured[i], T);
      pos.entry_put =
          bs_price(OptionKind::put, pos.spot, pos.strike, cfg.r, measured[i], T);
      pos.mark_call =
          bs_price(OptionKind::call, pos.spot, pos.strike, cfg.r, predicted[i], T);
      pos.mark_put =
          bs_price(OptionKind::put, pos.spot, pos.strike, cfg.r, predicted[i], T);
      // clear next day at the fresh trailing estimate
      const double spot_exit = price[asset][t + 2];
      const double t_exit = (pos.expiry_days - 1.0) / dy;
      if (!std::isfinite(spot_exit)) {
        pos.exit_call = std::max(pos.spot - pos.strike, 0.0);
        pos.exit_put = std::max(pos.strike - pos.spot, 0.0);
        pos.marked_intrinsic = true;
      } else {
        const auto vol_exit = estimate_vol(returns[asset], t + 2, cfg.warmup);
        const double sigma_exit = vol_exit ? *vol_exit : measured[i];
        pos.exit_call =
            bs_price(OptionKind::call, spot_exit, pos.strike, cfg.r, sigma_exit, t_exit);
        pos.exit_put =
            bs_price(OptionKind::put, spot_exit, pos.strike, cfg.r, sigma_exit, t_exit);
      }
      const double entry = pos.entry_call + pos.entry_put;
      const double exit = pos.exit_call + pos.exit_put;
      pos.pnl = is_long ? exit - entry : entry - exit;
      net += pos.pnl;
      gross += entry;
      report.positions.push_back(pos);
    };
    for (auto a : sel.longs) open(a, true);
    for (auto a : sel.shorts) open(a, false);

    day.n_long = sel.longs.size();
    day.n_short = sel.shorts.size();
    day.pnl = gross > 0 ? net / gross : 0.0;
    if (!std::isfinite(day.pnl))
      throw std::runtime_error("run_backtest: non-finite daily P&L");
    report.daily.push_back(day);
  }
  report.recompute_summary();
  return report;
}

std::vector<double> class_vol_midpoints(std::vector<double> training_vols,
                                        std::size_t k) {
  if (training_vols.empty())
    throw std::invalid_argument("class_vol_midpoints: empty training vols");
  std::sort(training_vols.begin(), training_vols.end());
  const std::size_t n = training_vols.size();
  std::vector<double> out;
  for (std::size_t c = 0; c < k; ++c) {
    const double q = (double(c) + 0.5) / double(k);  // interval midpoint
    std::size_t idx = std::size_t(q * double(n));
    if (idx >= n) idx = n - 1;
    out.push_back(training_vols[idx]);
  }
  return out;
}

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

VolClassifier oracle_classifier(const std::vector<std::vector<double>>& returns,
                                const std::vector<double>& edges,
                                std::size_t horizon, double days_per_year) {
  return [&returns, edges, horizon, days_per_year](std::size_t asset,
                                                   std::size_t day) -> int {
    const auto& r = returns[asset];
    if (day + 1 + horizon > r.size() || horizon < 2) return -1;
    double mean = 0.0;
    for (std::size_t i = day + 1; i < day + 1 + horizon; ++i) mean += r[i];
    mean /= double(horizon);
    double s = 0.0;
    for (std::size_t i = day + 1; i < day + 1 + horizon; ++i)
      s += (r[i] - mean) * (r[i] - mean);
    const double vol = std::sqrt(s / double(horizon - 1)) * std::sqrt(days_per_year);
    int cls = 0;
    for (double e : edges)
      if (vol > e) ++cls;
    return cls;
  };
}

VolClassifier random_classifier(std::uint64_t seed, std::size_t k) {
  return [seed, k](std::size_t asset, std::size_t day) -> int {
    return int(mix64(seed ^ mix64(asset * 0x9e3779b97f4a7c15ull + day)) % k);
  };
}

}  // namespace tsd
