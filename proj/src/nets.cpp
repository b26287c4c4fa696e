#include "tsd/nets.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <random>

namespace tsd {

std::size_t NetworkSpec::output_width() const {
  std::size_t w = input_width;
  for (const auto& l : layers)
    if (l.kind != LayerSpec::Kind::batchnorm) w = l.width;
  return w;
}

void NetworkSpec::validate() const {
  if (input_width == 0) throw std::invalid_argument("spec: zero input width");
  if (layers.empty()) throw std::invalid_argument("spec: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.kind != LayerSpec::Kind::batchnorm && l.width == 0)
      throw std::invalid_argument("spec: layer " + std::to_string(i) +
                                  " has zero width");
    if (l.kind == LayerSpec::Kind::softmax_head && i + 1 != layers.size())
      throw std::invalid_argument("spec: softmax head must be terminal");
  }
}

Network Network::build(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec_ = spec;
  std::mt19937_64 rng(seed);
  std::size_t w = spec.input_width;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::dense:
      case LayerSpec::Kind::softmax_head: {
        const std::size_t out = l.width;
        const double bound = std::sqrt(6.0 / double(w));  // He-uniform
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> wdata(w * out);
        for (auto& v : wdata) v = dist(rng);
        Dense d;
        d.W = Tensor::matrix(w, out, std::move(wdata), true);
        d.b = Tensor::zeros({out}, true);
        d.act = (l.kind == LayerSpec::Kind::dense) ? l.act : Act::none;
        net.layers_.emplace_back(std::move(d));
        w = out;
        break;
      }
      case LayerSpec::Kind::batchnorm: {
        BatchNorm bn;
        bn.gamma = Tensor({w}, std::vector<double>(w, 1.0), true);
        bn.beta = Tensor::zeros({w}, true);
        bn.state.running_mean = Tensor::zeros({w});
        bn.state.running_var = Tensor({w}, std::vector<double>(w, 1.0));
        bn.act = l.act;
        net.layers_.emplace_back(std::move(bn));
        break;
      }
    }
  }
  return net;
}

Tensor Network::forward(Graph* g, const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.cols() != spec_.input_width)
    throw std::invalid_argument("forward: input width " + x.shape_str() +
                                " does not match spec input " +
                                std::to_string(spec_.input_width));
  Graph local;  // used when detached; discarded together with its tape
  Graph& gr = g ? *g : local;
  Tensor h = x;
  for (auto& layer : layers_) {
    if (auto* d = std::get_if<Dense>(&layer)) {
      h = gr.add_bias(gr.matmul(h, d->W), d->b);
      if (d->act == Act::relu) h = gr.relu(h);
    } else {
      auto& bn = std::get<BatchNorm>(layer);
      h = gr.batchnorm(h, bn.gamma, bn.beta, bn.state, mode);
      if (bn.act == Act::relu) h = gr.relu(h);
    }
  }
  if (!g) h = h.clone();  // detach from the discarded local tape
  return h;
}

std::vector<Tensor> Network::parameters() {
  std::vector<Tensor> out;
  for (auto& layer : layers_) {
    if (auto* d = std::get_if<Dense>(&layer)) {
      out.push_back(d->W);
      out.push_back(d->b);
    } else {
      auto& bn = std::get<BatchNorm>(layer);
      out.push_back(bn.gamma);
      out.push_back(bn.beta);
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Network::named_tensors() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "L" + std::to_string(i) + "/";
    if (auto* d = std::get_if<Dense>(&layers_[i])) {
      out.emplace_back(p + "W", d->W);
      out.emplace_back(p + "b", d->b);
    } else {
      auto& bn = std::get<BatchNorm>(layers_[i]);
      out.emplace_back(p + "gamma", bn.gamma);
      out.emplace_back(p + "beta", bn.beta);
      out.emplace_back(p + "running_mean", bn.state.running_mean);
      out.emplace_back(p + "running_var", bn.state.running_var);
    }
  }
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) {
    if (const auto* d = std::get_if<Dense>(&layer))
      n += d->W.size() + d->b.size();
    else {
      const auto& bn = std::get<BatchNorm>(layer);
      n += bn.gamma.size() + bn.beta.size();
    }
  }
  return n;
}

void Network::zero_grads() {
  for (auto& p : parameters()) p.zero_grad();
}

std::uint64_t Network::param_hash() const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&h](const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (auto& p : const_cast<Network*>(this)->parameters()) mix(p);
  return h;
}

// ---------------------------------------------------------------------------
// optimizers

Optimizer Optimizer::adam(double lr, double beta1, double beta2, double eps) {
  Optimizer o;
  o.kind = Kind::adam;
  o.lr = lr;
  o.beta1 = beta1;
  o.beta2 = beta2;
  o.eps = eps;
  return o;
}

Optimizer Optimizer::sgd(double lr) {
  Optimizer o;
  o.kind = Kind::sgd;
  o.lr = lr;
  return o;
}

void Optimizer::step(std::vector<Tensor>& params) {
  // validate before mutating anything
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad())
      if (!std::isfinite(g))
        throw NonFiniteGradient("optimizer: non-finite gradient, update aborted");
  }
  if (kind == Kind::sgd) {
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto d = p.mutable_data();
      auto g = p.grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
    }
    ++step_count;
    return;
  }
  if (m.size() != params.size()) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].size(), 0.0);
      v[i].assign(params[i].size(), 0.0);
    }
  }
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, double(step_count));
  const double bc2 = 1.0 - std::pow(beta2, double(step_count));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double g = p.has_grad() ? p.grad()[i] : 0.0;
      m[pi][i] = beta1 * m[pi][i] + (1.0 - beta1) * g;
      v[pi][i] = beta2 * v[pi][i] + (1.0 - beta2) * g * g;
      const double mhat = m[pi][i] / bc1;
      const double vhat = v[pi][i] / bc2;
      d[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// presets

BundleSpecs stocks_specs(std::size_t n_classes) {
  BundleSpecs s;
  s.dims = {100, 20, 50, n_classes};
  auto encoder = [](std::size_t code) {
    NetworkSpec n;
    n.input_width = 100;
    n.layers = {LayerSpec::dense(100, Act::relu), LayerSpec::dense(66, Act::relu),
                LayerSpec::dense(66, Act::relu), LayerSpec::dense(code)};
    return n;
  };
  s.enc_s = encoder(20);
  s.enc_z = encoder(50);
  s.s_classifier.input_width = 20;
  s.s_classifier.layers = {
      LayerSpec::dense(50), LayerSpec::batchnorm(Act::relu),
      LayerSpec::dense(50), LayerSpec::batchnorm(Act::relu),
      LayerSpec::softmax_head(n_classes)};
  s.decoder.input_width = 70;
  s.decoder.layers = {LayerSpec::dense(70, Act::relu),
                      LayerSpec::dense(66, Act::relu),
                      LayerSpec::dense(66, Act::relu), LayerSpec::dense(100)};
  s.adversary.input_width = 50;
  s.adversary.layers = {
      LayerSpec::dense(50), LayerSpec::batchnorm(Act::relu),
      LayerSpec::dense(50), LayerSpec::batchnorm(Act::relu),
      LayerSpec::dense(50), LayerSpec::batchnorm(Act::relu),
      LayerSpec::softmax_head(n_classes)};
  return s;
}

BundleSpecs synth_specs(std::size_t input_dim, std::size_t n_classes) {
  BundleSpecs s;
  s.dims = {input_dim, 4, 4, n_classes};
  auto encoder = [input_dim](std::size_t code) {
    NetworkSpec n;
    n.input_width = input_dim;
    n.layers = {LayerSpec::dense(64, Act::relu), LayerSpec::dense(64, Act::relu),
                LayerSpec::dense(64, Act::relu), LayerSpec::dense(code)};
    return n;
  };
  s.enc_s = encoder(s.dims.s_dim);
  s.enc_z = encoder(s.dims.z_dim);
  auto classifier = [](std::size_t in, std::size_t k) {
    NetworkSpec n;
    n.input_width = in;
    n.layers = {LayerSpec::dense(32), LayerSpec::batchnorm(Act::relu),
                LayerSpec::dense(32), LayerSpec::batchnorm(Act::relu),
                LayerSpec::dense(32), LayerSpec::batchnorm(Act::relu),
                LayerSpec::softmax_head(k)};
    return n;
  };
  s.s_classifier = classifier(s.dims.s_dim, n_classes);
  s.adversary = classifier(s.dims.z_dim, n_classes);
  s.decoder.input_width = s.dims.s_dim + s.dims.z_dim;
  s.decoder.layers = {LayerSpec::dense(64, Act::relu),
                      LayerSpec::dense(64, Act::relu),
                      LayerSpec::dense(64, Act::relu),
                      LayerSpec::dense(input_dim)};
  return s;
}

NetworkSpec probe_spec(std::size_t code_dim, std::size_t n_classes,
                       std::size_t width) {
  const std::size_t w = width ? width : code_dim;
  NetworkSpec n;
  n.input_width = code_dim;
  n.layers = {LayerSpec::dense(w), LayerSpec::batchnorm(Act::relu),
              LayerSpec::dense(w), LayerSpec::batchnorm(Act::relu),
              LayerSpec::dense(w), LayerSpec::batchnorm(Act::relu),
              LayerSpec::softmax_head(n_classes)};
  return n;
}

ModelBundle build_bundle(const BundleSpecs& specs, std::uint64_t seed) {
  ModelBundle b;
  b.dims = specs.dims;
  // distinct streams per network
  b.enc_s = Network::build(specs.enc_s, seed * 6364136223846793005ull + 1);
  b.s_classifier = Network::build(specs.s_classifier, seed * 6364136223846793005ull + 2);
  b.enc_z = Network::build(specs.enc_z, seed * 6364136223846793005ull + 3);
  b.decoder = Network::build(specs.decoder, seed * 6364136223846793005ull + 4);
  b.adversary = Network::build(specs.adversary, seed * 6364136223846793005ull + 5);
  if (b.decoder.spec().input_width != b.dims.s_dim + b.dims.z_dim)
    throw std::invalid_argument("bundle: decoder input != s_dim + z_dim");
  if (b.decoder.spec().output_width() != b.dims.input_dim)
    throw std::invalid_argument("bundle: decoder output != input_dim");
  return b;
}

// ---------------------------------------------------------------------------
// checkpoint format: magic "TSD1", u32 LE version, then named entries:
// u16 name length, UTF-8 name, u8 rank, rank x u32 dims, raw f64 LE values.

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
  os.write(reinterpret_cast<char*>(b), 2);
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<char*>(b), 4);
}

void write_entry(std::ostream& os, const std::string& name,
                 const std::vector<std::size_t>& shape,
                 std::span<const double> data) {
  write_u16(os, std::uint16_t(name.size()));
  os.write(name.data(), std::streamsize(name.size()));
  os.put(char(shape.size()));
  for (auto d : shape) write_u32(os, std::uint32_t(d));
  os.write(reinterpret_cast<const char*>(data.data()),
           std::streamsize(data.size() * sizeof(double)));
}

struct Entry {
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

bool read_u16(std::istream& is, std::uint16_t& v) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) return false;
  v = std::uint16_t(b[0] | (b[1] << 8));
  return true;
}

bool read_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return true;
}

std::vector<double> encode_spec(const NetworkSpec& s) {
  std::vector<double> v;
  v.push_back(double(s.input_width));
  v.push_back(double(s.layers.size()));
  for (const auto& l : s.layers) {
    v.push_back(double(int(l.kind)));
    v.push_back(double(l.width));
    v.push_back(double(int(l.act)));
  }
  return v;
}

NetworkSpec decode_spec(const std::vector<double>& v) {
  if (v.size() < 2) throw std::runtime_error("checkpoint: malformed spec entry");
  NetworkSpec s;
  s.input_width = std::size_t(v[0]);
  const std::size_t n = std::size_t(v[1]);
  if (v.size() != 2 + 3 * n)
    throw std::runtime_error("checkpoint: malformed spec entry");
  for (std::size_t i = 0; i < n; ++i) {
    LayerSpec l;
    l.kind = LayerSpec::Kind(int(v[2 + 3 * i]));
    l.width = std::size_t(v[3 + 3 * i]);
    l.act = Act(int(v[4 + 3 * i]));
    s.layers.push_back(l);
  }
  return s;
}

}  // namespace

void save_checkpoint(ModelBundle& bundle, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string());
  os.write("TSD1", 4);
  write_u32(os, kCheckpointVersion);
  const std::vector<double> dims = {
      double(bundle.dims.input_dim), double(bundle.dims.s_dim),
      double(bundle.dims.z_dim), double(bundle.dims.n_classes)};
  write_entry(os, "__dims__", {4}, dims);
  const std::pair<std::string, Network*> nets[] = {
      {"enc_s", &bundle.enc_s},         {"s_classifier", &bundle.s_classifier},
      {"enc_z", &bundle.enc_z},         {"decoder", &bundle.decoder},
      {"adversary", &bundle.adversary}};
  for (auto& [name, net] : nets) {
    const auto spec_enc = encode_spec(net->spec());
    write_entry(os, name + "/__spec__", {spec_enc.size()}, spec_enc);
    for (auto& [tname, t] : net->named_tensors())
      write_entry(os, name + "/" + tname, t.shape(), t.data());
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TSD1", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  std::uint32_t version;
  if (!read_u32(is, version) || version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path.string());

  std::map<std::string, Entry> entries;
  for (;;) {
    std::uint16_t nlen;
    if (!read_u16(is, nlen)) {
      if (is.eof()) break;
      throw std::runtime_error("checkpoint: truncated entry header");
    }
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen))
      throw std::runtime_error("checkpoint: truncated entry name");
    int rank = is.get();
    if (rank < 0) throw std::runtime_error("checkpoint: truncated rank for " + name);
    Entry e;
    std::size_t count = 1;
    for (int i = 0; i < rank; ++i) {
      std::uint32_t d;
      if (!read_u32(is, d))
        throw std::runtime_error("checkpoint: truncated dims for " + name);
      e.shape.push_back(d);
      count *= d;
    }
    e.data.resize(count);
    if (!is.read(reinterpret_cast<char*>(e.data.data()),
                 std::streamsize(count * sizeof(double))))
      throw std::runtime_error("checkpoint: truncated data for " + name);
    entries.emplace(std::move(name), std::move(e));
  }

  auto get = [&entries](const std::string& name) -> Entry& {
    auto it = entries.find(name);
    if (it == entries.end())
      throw std::runtime_error("checkpoint: missing entry " + name);
    return it->second;
  };

  ModelBundle b;
  {
    const auto& d = get("__dims__").data;
    if (d.size() != 4) throw std::runtime_error("checkpoint: malformed __dims__");
    b.dims = {std::size_t(d[0]), std::size_t(d[1]), std::size_t(d[2]),
              std::size_t(d[3])};
  }
  const std::pair<std::string, Network*> nets[] = {
      {"enc_s", &b.enc_s},     {"s_classifier", &b.s_classifier},
      {"enc_z", &b.enc_z},     {"decoder", &b.decoder},
      {"adversary", &b.adversary}};
  for (auto& [name, net] : nets) {
    NetworkSpec spec = decode_spec(get(name + "/__spec__").data);
    *net = Network::build(spec, 0);
    for (auto& [tname, t] : net->named_tensors()) {
      Entry& e = get(name + "/" + tname);
      if (e.shape != t.shape())
        throw std::runtime_error("checkpoint: shape mismatch for " + name + "/" +
                                 tname);
      std::copy(e.data.begin(), e.data.end(), t.mutable_data().begin());
    }
  }
  return b;
}

}  // namespace tsd
