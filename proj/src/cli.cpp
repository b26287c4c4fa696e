#include "tsd/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "tsd/datagen.hpp"
#include "tsd/nets.hpp"
#include "tsd/options_bt.hpp"
#include "tsd/probes.hpp"
#include "tsd/two_step.hpp"

namespace tsd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// minimal TOML subset: `key = value` lines, # comments, flat tables ignored
std::map<std::string, std::string> read_toml(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("config file not found: " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config: malformed line '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    out[key] = value;
  }
  return out;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

json read_metrics(const fs::path& path) {
  if (!fs::exists(path)) return json::object();
  std::ifstream is(path);
  json j;
  is >> j;
  return j;
}

// -------------------------------------------------------------------------
// shared run configuration

struct RunConfig {
  std::string kind = "synth1";  // synth1 | synth2 | capm | panel
  std::uint64_t seed = 0;
  double lambda = -1.0;  // <0: per-kind default
  std::size_t batch_size = 0;        // 0: per-kind default
  std::size_t stage1_epochs = 0;     // 0: per-kind default
  std::size_t stage2_iterations = 0; // 0: per-kind default
  double adam_lr = 1e-3;
  double adversary_sgd_lr = -1.0;  // <0: per-kind default
  int adversary_batch_stats = -1;  // <0: per-kind default, else 0/1
  // capm generation
  std::size_t periods = 150;
  std::size_t days = 50;
  std::size_t assets = 1500;
  double augment_sigma = -1.0;  // <0: generator default
  double market_noise = -1.0;   // <0: generator default
  double erm_noise = -1.0;      // <0: generator default
  double idio_noise = -1.0;     // <0: generator default

  TrainConfig train_config(const SampleSet& data) const {
    TrainConfig tc;
    tc.seed = seed;
    tc.adam_lr = adam_lr;

    const bool synth = kind == "synth1" || kind == "synth2";
    // both families need a heavy adversarial weight and a fast adversary: the
    // market-level component of the stock windows is worth little adversary
    // cross-entropy (periods with similar E[R_m] stay confusable) yet is the
    // top principal component of Z unless the scrub is strong enough for the
    // reconstruction to reroute it through S
    tc.lambda = lambda >= 0 ? lambda : (synth ? 5.0 : 4.0);
    tc.adversary_sgd_lr =
        adversary_sgd_lr > 0 ? adversary_sgd_lr : (synth ? 0.02 : 0.25);
    // full-batch training on the tiny synth sets only reaches the scrubbed
    // equilibrium when the enc-dec step sees the adversary through its frozen
    // running statistics; the wide stock data needs the scale-invariant
    // batch-statistics evaluation (see TrainConfig::adversary_batch_stats)
    tc.adversary_batch_stats =
        adversary_batch_stats >= 0 ? adversary_batch_stats != 0 : !synth;
    tc.batch_size = batch_size ? batch_size : (synth ? data.n() : 128);
    tc.stage1_epochs = stage1_epochs ? stage1_epochs : (synth ? 2000 : 30);
    tc.stage2_iterations =
        stage2_iterations ? stage2_iterations : (synth ? 3000 : 7000);
    return tc;
  }

  json echo() const {
    json j;
    j["kind"] = kind;
    j["seed"] = seed;
    j["lambda"] = lambda;
    j["batch_size"] = batch_size;
    j["stage1_epochs"] = stage1_epochs;
    j["stage2_iterations"] = stage2_iterations;
    j["adam_lr"] = adam_lr;
    j["adversary_sgd_lr"] = adversary_sgd_lr;
    j["adversary_batch_stats"] = adversary_batch_stats;
    j["periods"] = periods;
    j["days"] = days;
    j["assets"] = assets;
    j["augment_sigma"] = augment_sigma;
    j["market_noise"] = market_noise;
    j["erm_noise"] = erm_noise;
    j["idio_noise"] = idio_noise;
    return j;
  }
};

void apply_config_file(RunConfig& rc, const fs::path& path) {
  const auto kv = read_toml(path);
  auto get = [&kv](const char* key, auto& slot) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    std::istringstream ss(it->second);
    ss >> slot;
    if (ss.fail()) throw UsageError(std::string("config: bad value for ") + key);
  };
  auto it = kv.find("kind");
  if (it != kv.end()) rc.kind = it->second;
  get("seed", rc.seed);
  get("lambda", rc.lambda);
  get("batch_size", rc.batch_size);
  get("stage1_epochs", rc.stage1_epochs);
  get("stage2_iterations", rc.stage2_iterations);
  get("adam_lr", rc.adam_lr);
  get("adversary_sgd_lr", rc.adversary_sgd_lr);
  get("adversary_batch_stats", rc.adversary_batch_stats);
  get("periods", rc.periods);
  get("days", rc.days);
  get("assets", rc.assets);
  get("augment_sigma", rc.augment_sigma);
  get("market_noise", rc.market_noise);
  get("erm_noise", rc.erm_noise);
  get("idio_noise", rc.idio_noise);
}

BundleSpecs specs_for(const std::string& kind, const SampleSet& data) {
  const std::size_t k = data.n_classes();
  if (kind == "synth1" || kind == "synth2") return synth_specs(data.dim, k);
  if (kind == "capm" || kind == "panel") {
    if (data.dim != 100)
      throw UsageError("stocks preset expects 100-dim samples, got " +
                       std::to_string(data.dim));
    return stocks_specs(k);
  }
  throw UsageError("unknown experiment kind '" + kind + "'");
}

SampleSet load_dataset(const fs::path& dir) {
  const fs::path data = dir / "dataset.csv";
  if (!fs::exists(data))
    throw UsageError("dataset not found: " + data.string());
  return load_samples_csv(data, dir / "meta.csv");
}

// -------------------------------------------------------------------------
// gen

int cmd_gen(const std::string& kind, const RunConfig& rc, const fs::path& out) {
  fs::create_directories(out);
  SampleSet data;
  if (kind == "synth1") {
    data = gen_synth1(SynthGeometry{}, rc.seed);
  } else if (kind == "synth2") {
    data = gen_synth2(SynthGeometry{}, rc.seed);
  } else if (kind == "capm") {
    CapmConfig cfg;
    cfg.n_periods = rc.periods;
    cfg.days = rc.days;
    cfg.n_assets = rc.assets;
    if (rc.augment_sigma >= 0) cfg.augment_sigma = rc.augment_sigma;
    if (rc.market_noise >= 0) cfg.market_noise = rc.market_noise;
    if (rc.erm_noise >= 0) cfg.erm_noise = rc.erm_noise;
    if (rc.idio_noise >= 0) cfg.idio_noise = rc.idio_noise;
    CapmData cd = gen_capm(cfg, rc.seed);
    data = std::move(cd.samples);
    save_panel_csv(cd.panel, out / "returns.csv", out / "market.csv");
    // per-period summary used by probes (E[R_m], R_f)
    std::ofstream os(out / "periods.csv");
    os << "period,rf,e_rm\n";
    char buf[96];
    for (std::size_t p = 0; p < cd.panel.n_periods(); ++p) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", p,
                    cd.panel.periods[p].rf, cd.panel.periods[p].e_rm);
      os << buf;
    }
  } else {
    throw UsageError("gen: unknown kind '" + kind + "'");
  }
  save_samples_csv(data, out / "dataset.csv", out / "meta.csv");
  json echo = rc.echo();
  echo["command"] = "gen";
  echo["gen_kind"] = kind;
  write_json(echo, out / "config.echo.json");
  std::cout << "wrote " << data.n() << " samples of width " << data.dim << " to "
            << out.string() << "\n";
  return 0;
}

// -------------------------------------------------------------------------
// train

int cmd_train(const RunConfig& rc, const fs::path& data_dir, const fs::path& out) {
  SampleSet data = load_dataset(data_dir);
  fs::create_directories(out);
  const BundleSpecs specs = specs_for(rc.kind, data);
  const TrainConfig tc = rc.train_config(data);

  Stage1Result s1 = train_stage1(data, specs.enc_s, specs.s_classifier, tc);
  std::cout << "stage 1 done: train accuracy " << s1.train_accuracy << "\n";

  ModelBundle bundle = build_bundle(specs, tc.seed);
  bundle.enc_s = s1.enc_s;
  bundle.s_classifier = s1.s_classifier;
  Stage2Result s2 = train_stage2(bundle, data, tc);

  save_checkpoint(bundle, out / "checkpoint.tsd");
  TrainHistory all = s1.history;
  for (auto& r : s2.history.records) all.records.push_back(r);
  all.write_csv(out / "history.csv");

  double last_rec = 0.0, last_adv = 0.0, last_acc = 0.0;
  std::size_t n_rec = 0, n_adv = 0;
  const std::size_t tail = 50;
  for (auto it = s2.history.records.rbegin();
       it != s2.history.records.rend() && (n_rec < tail || n_adv < tail); ++it) {
    if (it->phase == "encdec" && n_rec < tail) {
      last_rec += it->l_rec;
      ++n_rec;
    } else if (it->phase == "adversary" && n_adv < tail) {
      last_adv += it->l_adv;
      last_acc += it->adv_acc;
      ++n_adv;
    }
  }
  json metrics;
  metrics["stage1_train_accuracy"] = s1.train_accuracy;
  metrics["final_l_rec"] = n_rec ? last_rec / double(n_rec) : 0.0;
  metrics["final_l_adv"] = n_adv ? last_adv / double(n_adv) : 0.0;
  metrics["final_adversary_accuracy"] = n_adv ? last_acc / double(n_adv) : 0.0;
  metrics["ablation"] = tc.ablation();
  write_json(metrics, out / "metrics.json");

  json echo = rc.echo();
  echo["command"] = "train";
  echo["effective_batch_size"] = tc.batch_size;
  echo["effective_stage1_epochs"] = tc.stage1_epochs;
  echo["effective_stage2_iterations"] = tc.stage2_iterations;
  echo["effective_adversary_sgd_lr"] = tc.adversary_sgd_lr;
  echo["effective_adversary_batch_stats"] = tc.adversary_batch_stats;
  echo["data"] = data_dir.string();
  write_json(echo, out / "config.echo.json");
  std::cout << "stage 2 done: final L_rec " << metrics["final_l_rec"]
            << ", adversary accuracy " << metrics["final_adversary_accuracy"]
            << "\n";
  return 0;
}

// -------------------------------------------------------------------------
// probe

Tensor codes_for_space(ModelBundle& bundle, const SampleSet& data,
                       const std::string& space) {
  if (space == "S") return encode(bundle.enc_s, data);
  if (space == "Z") return encode(bundle.enc_z, data);
  if (space == "X") return data.as_tensor();
  throw UsageError("unknown space '" + space + "' (expected S, Z or X)");
}

std::vector<int> probe_targets(const SampleSet& data, const std::string& target,
                               std::size_t& n_classes_out,
                               const fs::path& data_dir) {
  if (target == "label") {
    n_classes_out = data.n_classes();
    return data.y;
  }
  if (data.meta.empty()) throw UsageError("probe: dataset has no metadata");
  if (target == "latent") {
    std::vector<int> out;
    std::set<int> distinct;
    for (const auto& m : data.meta) {
      out.push_back(m.latent);
      distinct.insert(m.latent);
    }
    n_classes_out = distinct.size();
    return out;
  }
  if (target == "beta") {  // four beta groups from the training distribution
    std::vector<double> betas;
    for (const auto& m : data.meta) betas.push_back(m.beta);
    const auto edges = quantile_edges(betas, 4);
    n_classes_out = 4;
    return discretize_all(betas, edges);
  }
  if (target == "erm") {  // per-period E[R_m] terciles
    const fs::path periods = data_dir / "periods.csv";
    if (!fs::exists(periods))
      throw UsageError("probe: periods.csv required for target erm");
    std::ifstream is(periods);
    std::string line;
    std::vector<double> erm;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto c1 = line.find(','), c2 = line.rfind(',');
      erm.push_back(std::stod(line.substr(c2 + 1)));
      (void)c1;
    }
    const auto edges = quantile_edges(erm, 3);
    n_classes_out = 3;
    std::vector<int> out;
    for (const auto& m : data.meta) {
      if (m.period < 0 || std::size_t(m.period) >= erm.size())
        throw UsageError("probe: sample period out of range for erm target");
      out.push_back(discretize(erm[std::size_t(m.period)], edges));
    }
    return out;
  }
  throw UsageError("unknown target '" + target + "'");
}

int cmd_probe(const std::string& name, const fs::path& checkpoint,
              const fs::path& data_dir, const fs::path& out,
              const std::string& space, const std::string& target, std::size_t k,
              bool pca2, std::uint64_t seed) {
  const std::set<std::string> valid = {"pca",  "logreg", "score",    "hist",
                                       "swap", "interp", "retrieve", "market-corr"};
  if (!valid.count(name)) {
    std::ostringstream os;
    os << "unknown probe '" << name << "'; valid probes:";
    for (const auto& v : valid) os << " " << v;
    throw UsageError(os.str());
  }
  SampleSet data = load_dataset(data_dir);
  ModelBundle bundle = load_checkpoint(checkpoint);
  if (bundle.dims.input_dim != data.dim)
    throw std::runtime_error("probe: checkpoint input dim " +
                             std::to_string(bundle.dims.input_dim) +
                             " does not match dataset dim " +
                             std::to_string(data.dim));
  fs::create_directories(out);
  json metrics = read_metrics(out / "metrics.json");
  const std::string key = name + "_" + space + "_" + target;

  if (name == "pca") {
    Tensor codes = codes_for_space(bundle, data, space);
    PcaModel m = pca_fit(codes, std::min(k, codes.cols()));
    metrics[key]["explained"] = m.explained;
  } else if (name == "logreg" || name == "score") {
    Tensor codes = codes_for_space(bundle, data, space);
    std::size_t n_classes = 0;
    const std::vector<int> y = probe_targets(data, target, n_classes, data_dir);
    if (pca2) {
      PcaModel m = pca_fit(codes, 2);
      codes = pca_project(m, codes);
    }
    ProbeReport rep;
    if (name == "logreg") {
      // 80/20 split, fixed seed
      std::mt19937_64 rng(seed * 7919 + 3);
      std::vector<std::size_t> idx(data.n());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      const std::size_t n_test = data.n() / 5;
      std::vector<double> xtr, xte;
      std::vector<int> ytr, yte;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const bool te = i < n_test;
        auto& xv = te ? xte : xtr;
        auto& yv = te ? yte : ytr;
        const double* row = codes.data().data() + idx[i] * codes.cols();
        xv.insert(xv.end(), row, row + codes.cols());
        yv.push_back(y[idx[i]]);
      }
      LogRegModel m = logreg_fit(
          Tensor::matrix(ytr.size(), codes.cols(), std::move(xtr)), ytr);
      rep.probe = "logreg";
      rep.space = space;
      rep.target = target;
      rep.accuracy = logreg_eval(
          m, Tensor::matrix(yte.size(), codes.cols(), std::move(xte)), yte);
      rep.error_rate = 1.0 - rep.accuracy;
      rep.chance = 1.0 / double(n_classes);
      rep.n_train = ytr.size();
      rep.n_test = yte.size();
      rep.config = pca2 ? "pca2" : "direct";
    } else {
      ScoreConfig sc;
      sc.seed = seed;
      // narrow codes need extra probe width to carve many classes
      const std::size_t width = std::max<std::size_t>(codes.cols(), 32);
      rep = classification_score(codes, y,
                                 probe_spec(codes.cols(), n_classes, width), sc,
                                 space, target);
    }
    metrics[key] = {{"accuracy", rep.accuracy},   {"error_rate", rep.error_rate},
                    {"chance", rep.chance},       {"n_train", rep.n_train},
                    {"n_test", rep.n_test},       {"config", rep.config}};
  } else if (name == "hist") {
    Tensor codes = codes_for_space(bundle, data, space);
    std::vector<int> latent;
    for (const auto& m : data.meta) latent.push_back(m.latent);
    if (latent.empty()) throw UsageError("hist: dataset has no latent metadata");
    Histograms h = z_histograms(codes, latent, 32);
    write_histograms_csv(h, out / "histograms.csv");
    metrics[key]["separating_component"] = separating_component(codes, latent);
  } else if (name == "swap" || name == "interp") {
    Tensor s = encode(bundle.enc_s, data);
    Tensor z = encode(bundle.enc_z, data);
    const std::size_t n_src = std::min<std::size_t>(k ? k : 4, data.n());
    Tensor grid;
    if (name == "swap") {
      // k x k grid: S from row source, Z from column source
      std::vector<double> sg, zg;
      for (std::size_t i = 0; i < n_src; ++i)
        for (std::size_t j = 0; j < n_src; ++j) {
          const double* sr = s.data().data() + i * s.cols();
          const double* zr = z.data().data() + j * z.cols();
          sg.insert(sg.end(), sr, sr + s.cols());
          zg.insert(zg.end(), zr, zr + z.cols());
        }
      grid = swap(bundle.decoder,
                  Tensor::matrix(n_src * n_src, s.cols(), std::move(sg)),
                  Tensor::matrix(n_src * n_src, z.cols(), std::move(zg)));
    } else {
      auto row = [](const Tensor& t, std::size_t i) {
        std::vector<double> v(t.data().begin() + i * t.cols(),
                              t.data().begin() + (i + 1) * t.cols());
        return Tensor({t.cols()}, std::move(v));
      };
      if (data.n() < 2) throw UsageError("interp: need at least 2 samples");
      grid = interpolate(bundle.decoder, row(s, 0), row(z, 0), row(s, 1), row(z, 1),
                         n_src < 2 ? 2 : n_src);
    }
    std::ofstream os(out / (name + "_grid.csv"));
    char buf[32];
    for (std::size_t i = 0; i < grid.rows(); ++i) {
      for (std::size_t j = 0; j < grid.cols(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", grid.at(i, j));
        os << (j ? "," : "") << buf;
      }
      os << "\n";
    }
    metrics[key]["rows"] = grid.rows();
  } else if (name == "retrieve") {
    Tensor codes = codes_for_space(bundle, data, space);
    const std::size_t kk = k ? k : 5;
    std::ofstream os(out / "retrieval.csv");
    os << "query,rank,neighbor\n";
    for (std::size_t q = 0; q < data.n(); ++q) {
      const auto nn = retrieve(codes, q, std::min(kk, data.n() - 1));
      for (std::size_t r = 0; r < nn.size(); ++r)
        os << q << "," << r << "," << nn[r] << "\n";
    }
    metrics[key]["k"] = kk;
  } else if (name == "market-corr") {
    Tensor s = encode(bundle.enc_s, data);
    std::vector<int> periods;
    int max_p = -1;
    for (const auto& m : data.meta) {
      periods.push_back(m.period);
      max_p = std::max(max_p, m.period);
    }
    if (max_p < 0) throw UsageError("market-corr: dataset has no period metadata");
    // per-period mean market return from the market half of each sample
    std::vector<double> market(std::size_t(max_p) + 1, 0.0);
    std::vector<std::size_t> count(std::size_t(max_p) + 1, 0);
    const std::size_t w = data.dim / 2;
    for (std::size_t i = 0; i < data.n(); ++i) {
      double m = 0.0;
      for (std::size_t j = w; j < data.dim; ++j) m += data.row(i)[j];
      market[std::size_t(periods[i])] += m / double(w);
      ++count[std::size_t(periods[i])];
    }
    for (std::size_t p = 0; p < market.size(); ++p)
      if (count[p]) market[p] /= double(count[p]);
    metrics[key]["abs_r"] = market_correlation(s, periods, market);
  }

  write_json(metrics, out / "metrics.json");
  json echo;
  echo["command"] = "probe";
  echo["probe"] = name;
  echo["space"] = space;
  echo["target"] = target;
  echo["k"] = k;
  echo["pca2"] = pca2;
  echo["seed"] = seed;
  echo["checkpoint"] = checkpoint.string();
  echo["data"] = data_dir.string();
  write_json(echo, out / "config.echo.json");
  std::cout << "probe " << key << " written to " << (out / "metrics.json").string()
            << "\n";
  return 0;
}

// -------------------------------------------------------------------------
// backtest

int cmd_backtest(const std::string& classifier_kind, const fs::path& checkpoint,
                 const fs::path& data_dir, const fs::path& out,
                 std::uint64_t seed) {
  RawPanel panel = load_returns_csv(data_dir / "returns.csv",
                                    data_dir / "market.csv");
  const std::size_t n_days = panel.dates.size();
  std::vector<std::vector<double>> returns;
  for (auto& [ticker, series] : panel.tickers) returns.push_back(series);
  if (returns.empty()) throw UsageError("backtest: panel has no assets");

  // training portion for vol-class calibration: first 60% of days
  const std::size_t train_end = n_days * 3 / 5;
  const std::size_t window = 50;
  if (train_end < window + 6)
    throw UsageError("backtest: insufficient history before the trading span");
  std::vector<double> train_vols;
  for (const auto& r : returns)
    for (std::size_t t = window; t + 5 < train_end; t += 5)
      if (auto v = estimate_vol(r, t, window)) train_vols.push_back(*v);
  const auto edges = quantile_edges(train_vols, 4);
  const auto class_vols = class_vol_midpoints(train_vols, 4);

  VolClassifier clf;
  if (classifier_kind == "oracle") {
    clf = oracle_classifier(returns, edges, 5);
  } else if (classifier_kind == "random") {
    clf = random_classifier(seed, 4);
  } else if (classifier_kind == "z" || classifier_kind == "x") {
    if (checkpoint.empty())
      throw UsageError("backtest: --classifier " + classifier_kind +
                       " requires --checkpoint");
    auto bundle = std::make_shared<ModelBundle>(load_checkpoint(checkpoint));
    if (bundle->dims.input_dim != 2 * window)
      throw std::runtime_error("backtest: checkpoint expects input dim " +
                               std::to_string(bundle->dims.input_dim));
    const bool use_z = classifier_kind == "z";
    auto features = [&, bundle](std::size_t a, std::size_t t) {
      // last `window` asset returns ++ market returns ending at day t,
      // scaled to match the training windows emitted by `gen capm`
      const double scale = CapmConfig{}.sample_scale;
      std::vector<double> f(2 * window);
      for (std::size_t j = 0; j < window; ++j) {
        f[j] = scale * returns[a][t + 1 - window + j];
        f[window + j] = scale * panel.market[t + 1 - window + j];
      }
      return f;
    };
    // train a logistic model on the calibration span: features -> class of
    // the realized vol over the next 5 days
    std::vector<double> fx;
    std::vector<int> fy;
    auto fwd_oracle = oracle_classifier(returns, edges, 5);
    for (std::size_t a = 0; a < returns.size(); ++a)
      for (std::size_t t = window; t + 6 < train_end; t += 5) {
        const int cls = fwd_oracle(a, t);
        if (cls < 0) continue;
        auto f = features(a, t);
        fx.insert(fx.end(), f.begin(), f.end());
        fy.push_back(cls);
      }
    if (fy.empty()) throw UsageError("backtest: no training windows available");
    Tensor raw = Tensor::matrix(fy.size(), 2 * window, std::move(fx));
    Tensor train_feats = use_z ? encode(bundle->enc_z, raw) : raw;
    auto model = std::make_shared<LogRegModel>(logreg_fit(train_feats, fy));
    clf = [&, bundle, model, use_z, features](std::size_t a, std::size_t t) -> int {
      if (t + 1 < 2 * window) return -1;
      auto f = features(a, t);
      Tensor x = Tensor::matrix(1, f.size(), std::move(f));
      Tensor feats = use_z ? encode(bundle->enc_z, x) : x;
      return logreg_predict(*model, feats)[0];
    };
  } else {
    throw UsageError("unknown classifier '" + classifier_kind +
                     "' (expected z, x, oracle or random)");
  }

  BacktestConfig cfg;
  BacktestReport report = run_backtest(returns, clf, class_vols, cfg);
  fs::create_directories(out);
  report.write_csv(out / "backtest.csv");
  json metrics = read_metrics(out / "metrics.json");
  metrics["backtest"] = {{"mean", report.mean},
                         {"sd", report.sd},
                         {"pct_positive", report.pct_positive},
                         {"traded_days", report.traded_days},
                         {"classifier", classifier_kind}};
  write_json(metrics, out / "metrics.json");
  json echo;
  echo["command"] = "backtest";
  echo["classifier"] = classifier_kind;
  echo["seed"] = seed;
  echo["data"] = data_dir.string();
  echo["checkpoint"] = checkpoint.string();
  write_json(echo, out / "config.echo.json");
  std::cout << "backtest: " << report.traded_days << " traded days, mean "
            << report.mean << ", sd " << report.sd << ", positive "
            << report.pct_positive << "\n";
  return 0;
}

// -------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto randt = [&](std::vector<std::size_t> shape, bool rg) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) {
      do {
        x = gauss(rng);
      } while (std::abs(x) < 1e-4);  // keep clear of the ReLU kink
    }
    return Tensor(std::move(shape), std::move(v), rg);
  };

  double worst = 0.0;
  auto check = [&](const char* name, double err, double bound) {
    std::cout << "gradcheck " << name << ": max rel err " << err << "\n";
    worst = std::max(worst, err / bound);
  };

  for (int rep = 0; rep < 3; ++rep) {
    Tensor a = randt({3, 4}, true), b = randt({4, 5}, true);
    check("matmul",
          grad_check({a, b}, [&](Graph& g) { return g.sum(g.matmul(a, b)); }),
          1e-5);
    Tensor x = randt({4, 6}, true);
    check("relu", grad_check({x}, [&](Graph& g) { return g.sum(g.relu(x)); }),
          1e-5);
    Tensor gm = randt({6}, true), bt = randt({6}, true);
    Tensor bn_target = randt({4, 6}, false);
    check("batchnorm", grad_check({x, gm, bt}, [&](Graph& g) {
            BatchNormState st;
            st.running_mean = Tensor::zeros({6});
            st.running_var = Tensor({6}, std::vector<double>(6, 1.0));
            return g.mse(g.batchnorm(x, gm, bt, st, Mode::train), bn_target);
          }),
          1e-4);
    Tensor logits = randt({4, 3}, true);
    check("softmax_ce", grad_check({logits}, [&](Graph& g) {
            return g.softmax_cross_entropy(logits, {0, 2, 1, 0});
          }),
          1e-5);
    Tensor p = randt({3, 3}, true), t = randt({3, 3}, false);
    check("mse", grad_check({p}, [&](Graph& g) { return g.mse(p, t); }), 1e-5);
  }

  // composite: full stock architecture forward + combined loss
  BundleSpecs specs = stocks_specs(5);
  ModelBundle bundle = build_bundle(specs, seed + 1);
  Tensor x = randt({6, 100}, false);
  std::vector<int> y = {0, 1, 2, 3, 4, 0};
  std::vector<Tensor> params = bundle.enc_z.parameters();
  for (auto& p : bundle.decoder.parameters()) params.push_back(p);
  for (auto& p : bundle.enc_s.parameters()) params.push_back(p);
  for (auto& p : bundle.s_classifier.parameters()) params.push_back(p);
  const double err = grad_check(params, [&](Graph& g) {
    Tensor s = bundle.enc_s.forward(&g, x, Mode::eval);
    Tensor z = bundle.enc_z.forward(&g, x, Mode::eval);
    Tensor xhat = bundle.decoder.forward(&g, g.concat(s, z), Mode::eval);
    Tensor l_rec = g.mse(xhat, x);
    Tensor logits = bundle.s_classifier.forward(&g, s, Mode::eval);
    Tensor l_cls = g.softmax_cross_entropy(logits, y);
    return g.axpy(l_rec, 0.5, l_cls);
  });
  check("stock_composite", err, 1e-4);

  if (worst <= 1.0) {
    std::cout << "gradcheck: all checks within tolerance\n";
    return 0;
  }
  std::cerr << "gradcheck: tolerance exceeded\n";
  return 1;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
  CLI::App app{"two-step adversarial disentanglement toolkit"};
  app.require_subcommand(1);

  std::string config_path, kind, out = "run", data_dir = ".", space = "Z",
              target = "label", classifier = "random", checkpoint, probe_name;
  std::uint64_t seed = 0;
  double lambda = -1.0;
  std::size_t k = 0;
  bool pca2 = false;
  RunConfig rc;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "TOML config file");
    cmd->add_option("--seed", seed, "random seed");
    cmd->add_option("--out", out, "output directory");
  };

  auto* gen = app.add_subcommand("gen", "generate a dataset");
  gen->add_option("kind", kind, "synth1 | synth2 | capm")->required();
  add_common(gen);
  gen->add_option("--periods", rc.periods, "CAPM periods");
  gen->add_option("--days", rc.days, "days per period");
  gen->add_option("--assets", rc.assets, "assets per period");
  gen->add_option("--noise", rc.augment_sigma, "augmentation noise sigma");
  gen->add_option("--market-noise", rc.market_noise, "daily market return sigma");
  gen->add_option("--erm-noise", rc.erm_noise, "per-period expected market return sigma");
  gen->add_option("--idio-noise", rc.idio_noise, "daily idiosyncratic sigma");

  auto* train = app.add_subcommand("train", "run two-stage training");
  add_common(train);
  train->add_option("--kind", rc.kind, "synth1 | synth2 | capm | panel");
  train->add_option("--data", data_dir, "dataset directory");
  train->add_option("--lambda", lambda, "adversarial weight");
  train->add_option("--batch", rc.batch_size, "mini-batch size");
  train->add_option("--stage1-epochs", rc.stage1_epochs, "stage 1 epochs");
  train->add_option("--stage2-iters", rc.stage2_iterations, "stage 2 iterations");
  train->add_option("--adam-lr", rc.adam_lr, "Adam learning rate");
  train->add_option("--adv-lr", rc.adversary_sgd_lr, "adversary SGD learning rate");
  train->add_option("--adv-batch-stats", rc.adversary_batch_stats,
                    "adversary evaluation in the enc-dec step: 1 batch "
                    "statistics, 0 frozen running statistics");

  auto* probe = app.add_subcommand("probe", "run a probe on a checkpoint");
  probe->add_option("name", probe_name,
                    "pca | logreg | score | hist | swap | interp | retrieve | "
                    "market-corr")
      ->required();
  add_common(probe);
  probe->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  probe->add_option("--data", data_dir, "dataset directory");
  probe->add_option("--space", space, "S | Z | X");
  probe->add_option("--target", target, "label | latent | beta | erm");
  probe->add_option("--k", k, "components / neighbors / grid size");
  probe->add_flag("--pca2", pca2, "apply 2-component PCA before logreg");

  auto* backtest = app.add_subcommand("backtest", "run the straddle backtest");
  add_common(backtest);
  backtest->add_option("--classifier", classifier, "z | x | oracle | random");
  backtest->add_option("--checkpoint", checkpoint, "checkpoint (for z/x)");
  backtest->add_option("--data", data_dir, "panel directory");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks");
  gradcheck->add_option("--seed", seed, "random seed");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int rc_parse = app.exit(e);
    return rc_parse == 0 ? 0 : 2;
  }

  try {
    if (!config_path.empty()) apply_config_file(rc, config_path);
    rc.seed = seed;
    if (lambda >= 0) rc.lambda = lambda;
    if (gen->parsed()) return cmd_gen(kind, rc, out);
    if (train->parsed()) return cmd_train(rc, data_dir, out);
    if (probe->parsed())
      return cmd_probe(probe_name, checkpoint, data_dir, out, space, target, k,
                       pca2, seed);
    if (backtest->parsed())
      return cmd_backtest(classifier, checkpoint, data_dir, out, seed);
    if (gradcheck->parsed()) return cmd_gradcheck(seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace tsd
