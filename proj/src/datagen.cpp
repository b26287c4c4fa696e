#include "tsd/datagen.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace tsd {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// independent stream per (seed, a, b); parallel and serial generation agree
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ a * 0x9e3779b97f4a7c15ull) ^ b));
}

void format_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

std::size_t SampleSet::n_classes() const {
  int mx = -1;
  for (int v : y) mx = std::max(mx, v);
  return std::size_t(mx + 1);
}

void SampleSet::validate() const {
  if (X.size() != n() * dim)
    throw std::logic_error("sample set: X size does not match n x dim");
  if (!meta.empty() && meta.size() != n())
    throw std::logic_error("sample set: meta size does not match n");
  for (double v : X)
    if (!std::isfinite(v)) throw std::logic_error("sample set: non-finite entry");
  for (int v : y)
    if (v < 0) throw std::logic_error("sample set: negative label");
}

// ---------------------------------------------------------------------------
// synthetic images

void SynthGeometry::validate() const {
  if (row_stride == 0)
    throw std::invalid_argument("synth geometry: rectangle positions coincide");
  if (first_row + row_stride * (n_positions - 1) + rect_height > image_size)
    throw std::invalid_argument("synth geometry: positions leave the image");
  if (rect_width > image_size)
    throw std::invalid_argument("synth geometry: rectangle wider than image");
}

namespace {

std::vector<double> render(const SynthGeometry& g, std::size_t pos,
                           double upper_bg, double lower_bg) {
  const std::size_t n = g.image_size;
  std::vector<double> img(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      img[r * n + c] = (r < n / 2) ? upper_bg : lower_bg;
  const std::size_t top = g.first_row + g.row_stride * pos;
  const std::size_t left = (n - g.rect_width) / 2;
  for (std::size_t r = top; r < top + g.rect_height; ++r)
    for (std::size_t c = left; c < left + g.rect_width; ++c)
      img[r * n + c] = 0.5;
  return img;
}

void shuffle_rows(SampleSet& s, std::uint64_t seed) {
  std::vector<std::size_t> order(s.n());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(splitmix64(seed));
  std::shuffle(order.begin(), order.end(), rng);
  SampleSet out;
  out.dim = s.dim;
  out.X.resize(s.X.size());
  out.y.resize(s.n());
  out.meta.resize(s.meta.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::copy_n(s.row(order[i]), s.dim, out.X.begin() + i * s.dim);
    out.y[i] = s.y[order[i]];
    if (!s.meta.empty()) out.meta[i] = s.meta[order[i]];
  }
  s = std::move(out);
}

}  // namespace

SampleSet gen_synth1(const SynthGeometry& geom, std::uint64_t seed) {
  geom.validate();
  SampleSet s;
  s.dim = geom.image_size * geom.image_size;
  for (std::size_t pos = 0; pos < geom.n_positions; ++pos)
    for (int bg = 0; bg < 2; ++bg) {
      const double c = bg ? 1.0 : 0.0;
      auto img = render(geom, pos, c, c);
      s.X.insert(s.X.end(), img.begin(), img.end());
      s.y.push_back(int(pos));
      SampleMeta m;
      m.latent = bg;
      s.meta.push_back(m);
    }
  shuffle_rows(s, seed);
  return s;
}

SampleSet gen_synth2(const SynthGeometry& geom, std::uint64_t seed) {
  geom.validate();
  SampleSet s;
  s.dim = geom.image_size * geom.image_size;
  for (std::size_t pos = 0; pos < geom.n_positions; ++pos)
    for (int code = 0; code < 4; ++code) {
      const double upper = (code & 1) ? 1.0 : 0.0;
      const double lower = (code & 2) ? 1.0 : 0.0;
      auto img = render(geom, pos, upper, lower);
      s.X.insert(s.X.end(), img.begin(), img.end());
      s.y.push_back(int(pos));
      SampleMeta m;
      m.latent = code;
      s.meta.push_back(m);
    }
  shuffle_rows(s, seed);
  return s;
}

// ---------------------------------------------------------------------------
// CAPM simulation

void CapmConfig::validate() const {
  if (n_periods == 0 || days == 0 || n_assets == 0)
    throw std::invalid_argument("capm config: zero counts");
  if (rf_low >= rf_high)
    throw std::invalid_argument("capm config: rf_low must be < rf_high");
  if (market_noise < 0 || idio_noise < 0 || erm_noise < 0 || augment_sigma < 0)
    throw std::invalid_argument("capm config: negative noise");
  if (beta_low >= beta_high)
    throw std::invalid_argument("capm config: beta_low must be < beta_high");
}

std::vector<double> MarketPanel::market_series() const {
  std::vector<double> out;
  for (const auto& p : periods) out.insert(out.end(), p.rm.begin(), p.rm.end());
  return out;
}

std::vector<double> MarketPanel::asset_series(std::size_t asset) const {
  std::vector<double> out;
  for (const auto& per : assets) {
    const auto& r = per[asset].returns;
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

CapmData gen_capm(const CapmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CapmData out;
  auto& panel = out.panel;
  panel.days_per_period = cfg.days;
  panel.periods.resize(cfg.n_periods);
  panel.assets.resize(cfg.n_periods);

  const double days = double(cfg.days);
  for (std::size_t p = 0; p < cfg.n_periods; ++p) {
    auto rng = stream(seed, p, 0xfffffffffffffffful);
    std::uniform_real_distribution<double> urf(cfg.rf_low, cfg.rf_high);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto& per = panel.periods[p];
    per.rf = urf(rng);
    per.e_rm = per.rf / days + cfg.erm_noise * gauss(rng);
    per.rm.resize(cfg.days);
    for (auto& r : per.rm) r = per.e_rm + cfg.market_noise * gauss(rng);

    panel.assets[p].resize(cfg.n_assets);
    for (std::size_t a = 0; a < cfg.n_assets; ++a) {
      auto arng = stream(seed, p, a);
      std::uniform_real_distribution<double> ubeta(cfg.beta_low, cfg.beta_high);
      std::normal_distribution<double> agauss(0.0, 1.0);
      auto& asset = panel.assets[p][a];
      asset.beta = ubeta(arng);
      asset.returns.resize(cfg.days);
      const double rf_d = per.rf / days;
      for (std::size_t d = 0; d < cfg.days; ++d)
        asset.returns[d] = rf_d + asset.beta * (per.rm[d] - rf_d) +
                           cfg.idio_noise * agauss(arng);
    }
  }

  auto& s = out.samples;
  s.dim = 2 * cfg.days;
  s.X.reserve(cfg.n_periods * cfg.n_assets * s.dim);
  for (std::size_t p = 0; p < cfg.n_periods; ++p)
    for (std::size_t a = 0; a < cfg.n_assets; ++a) {
      const auto& asset = panel.assets[p][a];
      // percent units: raw daily returns are O(1e-3) and too small to train on
      for (double r : asset.returns) s.X.push_back(cfg.sample_scale * r);
      for (double r : panel.periods[p].rm) s.X.push_back(cfg.sample_scale * r);
      s.y.push_back(int(p));
      SampleMeta m;
      m.beta = asset.beta;
      m.period = int(p);
      m.asset = int(a);
      s.meta.push_back(m);
    }
  if (cfg.augment_sigma > 0)
    s = augment_noise(s, cfg.augment_sigma, splitmix64(seed ^ 0xa06));
  return out;
}

SampleSet augment_noise(const SampleSet& in, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw std::invalid_argument("augment_noise: negative sigma");
  SampleSet out = in;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> gauss(0.0, sigma);
  for (auto& v : out.X) v += gauss(rng);
  return out;
}

// ---------------------------------------------------------------------------
// CSV panels

namespace {

bool looks_like_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return true;
}

double parse_return(const std::string& s, const std::string& file, std::size_t line) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error(file + ":" + std::to_string(line) +
                             ": unparseable return '" + s + "'");
  }
  if (pos != s.size())
    throw std::runtime_error(file + ":" + std::to_string(line) +
                             ": unparseable return '" + s + "'");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

std::string weekday_calendar_date(std::size_t index) {
  using namespace std::chrono;
  // 2000-01-03 is a Monday; emit Mon-Fri only
  sys_days base = sys_days(year{2000} / January / 3);
  sys_days d = base + std::chrono::days(index / 5 * 7 + index % 5);
  year_month_day ymd(d);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", int(ymd.year()),
                unsigned(ymd.month()), unsigned(ymd.day()));
  return buf;
}

}  // namespace

std::size_t RawPanel::date_index(const std::string& date) const {
  auto it = std::lower_bound(dates.begin(), dates.end(), date);
  if (it == dates.end() || *it != date)
    throw std::runtime_error("panel: unknown date " + date);
  return std::size_t(it - dates.begin());
}

RawPanel load_returns_csv(const std::filesystem::path& returns_path,
                          const std::filesystem::path& market_path) {
  RawPanel panel;
  {
    std::ifstream is(market_path);
    if (!is)
      throw std::runtime_error("cannot open market file " + market_path.string());
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::pair<std::string, double>> rows;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto f = split_csv(line);
      if (lineno == 1 && !f.empty() && !looks_like_date(f[0])) continue;  // header
      if (f.size() != 2 || !looks_like_date(f[0]))
        throw std::runtime_error(market_path.string() + ":" +
                                 std::to_string(lineno) + ": malformed row");
      rows.emplace_back(f[0], parse_return(f[1], market_path.string(), lineno));
    }
    std::sort(rows.begin(), rows.end());
    for (auto& [d, r] : rows) {
      if (!panel.dates.empty() && panel.dates.back() == d)
        throw std::runtime_error(market_path.string() + ": duplicate date " + d);
      panel.dates.push_back(d);
      panel.market.push_back(r);
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  {
    std::ifstream is(returns_path);
    if (!is)
      throw std::runtime_error("cannot open returns file " + returns_path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto f = split_csv(line);
      if (lineno == 1 && !f.empty() && !looks_like_date(f[0])) continue;  // header
      if (f.size() != 3 || !looks_like_date(f[0]))
        throw std::runtime_error(returns_path.string() + ":" +
                                 std::to_string(lineno) + ": malformed row");
      const double r = parse_return(f[2], returns_path.string(), lineno);
      auto it = std::lower_bound(panel.dates.begin(), panel.dates.end(), f[0]);
      if (it == panel.dates.end() || *it != f[0])
        throw std::runtime_error(returns_path.string() + ":" +
                                 std::to_string(lineno) + ": date " + f[0] +
                                 " not present in market series");
      auto& series = panel.tickers[f[1]];
      if (series.empty()) series.assign(panel.dates.size(), nan);
      series[std::size_t(it - panel.dates.begin())] = r;
    }
  }
  for (auto& [ticker, series] : panel.tickers) {
    std::size_t missing = 0;
    for (double v : series)
      if (std::isnan(v)) ++missing;
    panel.missing_days[ticker] = missing;
  }
  return panel;
}

void save_panel_csv(const MarketPanel& panel,
                    const std::filesystem::path& returns_path,
                    const std::filesystem::path& market_path) {
  const auto market = panel.market_series();
  std::vector<std::string> dates(market.size());
  for (std::size_t i = 0; i < dates.size(); ++i) dates[i] = weekday_calendar_date(i);
  {
    std::ofstream os(market_path);
    if (!os)
      throw std::runtime_error("cannot write market file " + market_path.string());
    os << "date,ret\n";
    std::string buf;
    for (std::size_t i = 0; i < market.size(); ++i) {
      buf.clear();
      buf += dates[i];
      buf += ',';
      format_double(buf, market[i]);
      buf += '\n';
      os << buf;
    }
  }
  {
    std::ofstream os(returns_path);
    if (!os)
      throw std::runtime_error("cannot write returns file " + returns_path.string());
    os << "date,ticker,ret\n";
    std::string buf;
    for (std::size_t a = 0; a < panel.n_assets(); ++a) {
      char ticker[16];
      std::snprintf(ticker, sizeof(ticker), "A%05zu", a);
      const auto series = panel.asset_series(a);
      for (std::size_t i = 0; i < series.size(); ++i) {
        buf.clear();
        buf += dates[i];
        buf += ',';
        buf += ticker;
        buf += ',';
        format_double(buf, series[i]);
        buf += '\n';
        os << buf;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// quarter windowing

WindowedQuarters window_quarters(const RawPanel& panel, const QuarterConfig& cfg) {
  if (panel.dates.empty()) throw std::invalid_argument("window_quarters: empty panel");
  struct Quarter {
    int year, q;
    std::vector<std::size_t> days;
  };
  std::vector<Quarter> quarters;
  for (std::size_t i = 0; i < panel.dates.size(); ++i) {
    const int year = std::stoi(panel.dates[i].substr(0, 4));
    const int month = std::stoi(panel.dates[i].substr(5, 2));
    const int q = (month - 1) / 3;
    if (quarters.empty() || quarters.back().year != year || quarters.back().q != q)
      quarters.push_back({year, q, {}});
    quarters.back().days.push_back(i);
  }

  WindowedQuarters out;
  const std::size_t w = cfg.days_per_quarter;
  out.train.dim = out.test.dim = 2 * w;

  auto emit = [&](SampleSet& dst, const Quarter& quarter, int label) {
    const std::size_t n = dst.dim;
    int asset_id = 0;
    for (const auto& [ticker, series] : panel.tickers) {
      bool complete = true;
      for (std::size_t k = 0; k < w; ++k)
        if (std::isnan(series[quarter.days[k]])) {
          complete = false;
          break;
        }
      if (!complete) {
        ++out.skipped[ticker];
        ++asset_id;
        continue;
      }
      const std::size_t base = dst.X.size();
      dst.X.resize(base + n);
      for (std::size_t k = 0; k < w; ++k) {
        dst.X[base + k] = series[quarter.days[k]];
        dst.X[base + w + k] = panel.market[quarter.days[k]];
      }
      dst.y.push_back(label);
      SampleMeta m;
      m.period = label;
      m.asset = asset_id++;
      dst.meta.push_back(m);
    }
  };

  int train_label = 0, test_label = 0;
  for (const auto& quarter : quarters) {
    const bool in_train =
        quarter.year >= cfg.train_start_year && quarter.year <= cfg.train_end_year;
    const bool in_test =
        quarter.year >= cfg.test_start_year && quarter.year <= cfg.test_end_year;
    if (!in_train && !in_test) continue;
    if (quarter.days.size() < w) {
      out.short_quarters.push_back(std::to_string(quarter.year) + "Q" +
                                   std::to_string(quarter.q + 1));
      continue;
    }
    if (in_train)
      emit(out.train, quarter, train_label++);
    else
      emit(out.test, quarter, test_label++);
  }
  out.n_train_labels = std::size_t(train_label);
  return out;
}

// ---------------------------------------------------------------------------
// stock measures

namespace {

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

double sd_of(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

}  // namespace

StockMeasures compute_measures(const std::vector<std::vector<double>>& series,
                               const std::vector<double>& market, std::size_t t,
                               std::size_t window) {
  if (t + 1 < window || t + 5 >= market.size())
    throw std::invalid_argument("compute_measures: window outside data span");
  const std::size_t lo = t + 1 - window;
  double mm = 0.0;
  for (std::size_t i = lo; i <= t; ++i) mm += market[i];
  mm /= double(window);
  double var_m = 0.0;
  for (std::size_t i = lo; i <= t; ++i)
    var_m += (market[i] - mm) * (market[i] - mm);
  var_m /= double(window);
  if (var_m == 0.0)
    throw std::runtime_error("compute_measures: market variance is zero");

  StockMeasures out;
  for (const auto& r : series) {
    if (r.size() != market.size())
      throw std::invalid_argument("compute_measures: series length mismatch");
    double ma = 0.0;
    for (std::size_t i = lo; i <= t; ++i) ma += r[i];
    ma /= double(window);
    double cov = 0.0, var_a = 0.0;
    for (std::size_t i = lo; i <= t; ++i) {
      cov += (r[i] - ma) * (market[i] - mm);
      var_a += (r[i] - ma) * (r[i] - ma);
    }
    cov /= double(window);
    var_a /= double(window);
    out.beta_hat.push_back(cov / var_m);
    out.rho_hat.push_back(var_a > 0 ? cov / std::sqrt(var_a * var_m) : 0.0);
    out.vol_next_1.push_back(std::abs(r[t + 1]));
    out.vol_next_5.push_back(sd_of(std::span<const double>(r).subspan(t + 1, 5)));
  }
  return out;
}

std::vector<double> quantile_edges(std::vector<double> values, std::size_t k) {
  if (values.empty())
    throw std::invalid_argument("quantile_edges: empty training values");
  if (k < 2) throw std::invalid_argument("quantile_edges: k must be >= 2");
  std::sort(values.begin(), values.end());
  std::vector<double> edges;
  const std::size_t n = values.size();
  for (std::size_t j = 1; j < k; ++j) {
    std::size_t idx = n * j / k;
    edges.push_back(values[idx == 0 ? 0 : idx - 1]);
  }
  return edges;
}

int discretize(double v, const std::vector<double>& edges) {
  int c = 0;
  for (double e : edges)
    if (v > e) ++c;
  return c;
}

std::vector<int> discretize_all(const std::vector<double>& values,
                                const std::vector<double>& edges) {
  std::vector<int> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(discretize(v, edges));
  return out;
}

// ---------------------------------------------------------------------------
// sample-set CSV

void save_samples_csv(const SampleSet& s, const std::filesystem::path& data_path,
                      const std::filesystem::path& meta_path) {
  {
    std::ofstream os(data_path);
    if (!os) throw std::runtime_error("cannot write " + data_path.string());
    os << "sample_id,label";
    for (std::size_t j = 0; j < s.dim; ++j) os << ",x_" << j;
    os << "\n";
    std::string buf;
    for (std::size_t i = 0; i < s.n(); ++i) {
      buf.clear();
      buf += std::to_string(i);
      buf += ',';
      buf += std::to_string(s.y[i]);
      for (std::size_t j = 0; j < s.dim; ++j) {
        buf += ',';
        format_double(buf, s.row(i)[j]);
      }
      buf += '\n';
      os << buf;
    }
  }
  {
    std::ofstream os(meta_path);
    if (!os) throw std::runtime_error("cannot write " + meta_path.string());
    os << "sample_id,latent,period,asset,beta\n";
    std::string buf;
    for (std::size_t i = 0; i < s.n(); ++i) {
      SampleMeta m = s.meta.empty() ? SampleMeta{} : s.meta[i];
      buf.clear();
      buf += std::to_string(i);
      buf += ',';
      buf += std::to_string(m.latent);
      buf += ',';
      buf += std::to_string(m.period);
      buf += ',';
      buf += std::to_string(m.asset);
      buf += ',';
      format_double(buf, m.beta);
      buf += '\n';
      os << buf;
    }
  }
}

SampleSet load_samples_csv(const std::filesystem::path& data_path,
                           const std::filesystem::path& meta_path) {
  SampleSet s;
  {
    std::ifstream is(data_path);
    if (!is) throw std::runtime_error("cannot open " + data_path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto f = split_csv(line);
      if (lineno == 1) {
        if (f.size() < 3)
          throw std::runtime_error(data_path.string() + ": malformed header");
        s.dim = f.size() - 2;
        continue;
      }
      if (f.size() != s.dim + 2)
        throw std::runtime_error(data_path.string() + ":" +
                                 std::to_string(lineno) + ": wrong field count");
      s.y.push_back(int(parse_return(f[1], data_path.string(), lineno)));
      for (std::size_t j = 0; j < s.dim; ++j)
        s.X.push_back(parse_return(f[2 + j], data_path.string(), lineno));
    }
  }
  if (std::filesystem::exists(meta_path)) {
    std::ifstream is(meta_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (lineno == 1 || line.empty()) continue;
      auto f = split_csv(line);
      if (f.size() != 5)
        throw std::runtime_error(meta_path.string() + ":" +
                                 std::to_string(lineno) + ": wrong field count");
      SampleMeta m;
      m.latent = std::stoi(f[1]);
      m.period = std::stoi(f[2]);
      m.asset = std::stoi(f[3]);
      m.beta = parse_return(f[4], meta_path.string(), lineno);
      s.meta.push_back(m);
    }
    if (!s.meta.empty() && s.meta.size() != s.n())
      throw std::runtime_error(meta_path.string() + ": row count mismatch");
  }
  s.validate();
  return s;
}

}  // namespace tsd
