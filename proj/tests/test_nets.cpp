#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "tsd/nets.hpp"

using namespace tsd;
namespace fs = std::filesystem;

namespace {

NetworkSpec tiny_spec() {
  NetworkSpec s;
  s.input_width = 4;
  s.layers = {LayerSpec::dense(3, Act::relu), LayerSpec::batchnorm(Act::relu),
              LayerSpec::softmax_head(2)};
  return s;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("nets_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("spec validation") {
  NetworkSpec s = tiny_spec();
  CHECK(s.output_width() == 2);
  s.validate();

  NetworkSpec empty;
  CHECK_THROWS(empty.validate());

  NetworkSpec leading_bn;
  leading_bn.input_width = 4;
  leading_bn.layers = {LayerSpec::batchnorm()};
  leading_bn.validate();  // batch-norm straight on the input is allowed

  NetworkSpec zero_width;
  zero_width.input_width = 4;
  zero_width.layers = {LayerSpec::dense(0)};
  CHECK_THROWS(zero_width.validate());
}

TEST_CASE("stocks preset parameter count") {
  // encoders 100->100,66,66->code; classifier 2x[50+bn]+head;
  // decoder 70->70,66,66->100; adversary 3x[50+bn]+head
  BundleSpecs specs = stocks_specs(10);
  ModelBundle b = build_bundle(specs, 0);

  auto count = [](Network& n) { return n.parameter_count(); };
  // enc_s: 100*100+100 + 100*66+66 + 66*66+66 + 66*20+20
  CHECK(count(b.enc_s) == 22528);
  // enc_z: same trunk, 50-wide code: 21188 + 66*50+50
  CHECK(count(b.enc_z) == 24538);
  // s_classifier: 20*50+50 + 2*50 + 50*50+50 + 2*50 + 50*10+10
  CHECK(count(b.s_classifier) == 4310);
  // decoder: 70*70+70 + 70*66+66 + 66*66+66 + 66*100+100
  CHECK(count(b.decoder) == 20778);
  // adversary: 3 x (50-wide dense + bn) + 10-way head
  CHECK(count(b.adversary) == 3 * (50 * 50 + 50 + 100) + 50 * 10 + 10);
  CHECK(b.dims.s_dim == 20);
  CHECK(b.dims.z_dim == 50);
  CHECK(b.dims.input_dim == 100);
}

TEST_CASE("initialization bounds and determinism") {
  NetworkSpec s = tiny_spec();
  Network a = Network::build(s, 7);
  Network b = Network::build(s, 7);
  Network c = Network::build(s, 8);

  auto na = a.named_tensors(), nb = b.named_tensors(), nc = c.named_tensors();
  REQUIRE(na.size() == nb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].first == nb[i].first);
    for (std::size_t j = 0; j < na[i].second.size(); ++j) {
      CHECK(na[i].second.at(j) == nb[i].second.at(j));  // same seed, same init
      if (na[i].second.at(j) != nc[i].second.at(j)) any_diff = true;
    }
  }
  CHECK(any_diff);  // different seed differs somewhere

  // He-uniform bound sqrt(6/fan_in) on the first weight matrix
  const double bound = std::sqrt(6.0 / 4.0);
  for (auto& [name, t] : na)
    if (name == "L0/W")
      for (std::size_t j = 0; j < t.size(); ++j) {
        CHECK(std::abs(t.at(j)) <= bound);
      }
}

TEST_CASE("biases and batch-norm start at identity") {
  Network n = Network::build(tiny_spec(), 3);
  for (auto& [name, t] : n.named_tensors()) {
    if (name.ends_with("/b") || name.ends_with("/beta") ||
        name.ends_with("/running_mean"))
      for (std::size_t j = 0; j < t.size(); ++j) CHECK(t.at(j) == 0.0);
    if (name.ends_with("/gamma") || name.ends_with("/running_var"))
      for (std::size_t j = 0; j < t.size(); ++j) CHECK(t.at(j) == 1.0);
  }
}

TEST_CASE("forward shapes and detached mode") {
  Network n = Network::build(tiny_spec(), 1);
  Tensor x = Tensor::matrix(5, 4, std::vector<double>(20, 0.3));
  Graph g;
  Tensor out = n.forward(&g, x, Mode::train);
  CHECK(out.rows() == 5);
  CHECK(out.cols() == 2);

  Tensor detached = n.forward(nullptr, x, Mode::eval);
  CHECK(detached.rows() == 5);
  CHECK_FALSE(detached.requires_grad());
}

TEST_CASE("adam first step has magnitude lr") {
  // with fresh moments, |update| = lr * g/sqrt(g^2) modulo eps
  Tensor p = Tensor::matrix(1, 3, {1.0, 2.0, 3.0}, true);
  p.ensure_grad();
  p.mutable_grad()[0] = 0.5;
  p.mutable_grad()[1] = -2.0;
  p.mutable_grad()[2] = 1e-3;
  Optimizer opt = Optimizer::adam(1e-3);
  std::vector<Tensor> params = {p};
  opt.step(params);
  CHECK(p.at(0) == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
  CHECK(p.at(1) == doctest::Approx(2.0 + 1e-3).epsilon(1e-6));
  CHECK(p.at(2) < 3.0);
}

TEST_CASE("adam matches a reference recurrence") {
  // hand-rolled adam on f(w) = w^2/2, grad = w
  double w = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor p = Tensor::scalar(1.0, true);
  Optimizer opt = Optimizer::adam(lr, b1, b2, eps);
  std::vector<Tensor> params = {p};
  for (int t = 1; t <= 25; ++t) {
    const double g = w;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);

    p.zero_grad();
    p.ensure_grad();
    p.mutable_grad()[0] = p.at(0);
    opt.step(params);
    CHECK(p.at(0) == doctest::Approx(w).epsilon(1e-12));
  }
}

TEST_CASE("sgd recurrence") {
  Tensor p = Tensor::scalar(2.0, true);
  Optimizer opt = Optimizer::sgd(0.5);
  std::vector<Tensor> params = {p};
  p.ensure_grad();
  p.mutable_grad()[0] = 1.0;
  opt.step(params);
  CHECK(p.at(0) == doctest::Approx(1.5).epsilon(1e-15));
  p.zero_grad();
  p.ensure_grad();
  p.mutable_grad()[0] = -2.0;
  opt.step(params);
  CHECK(p.at(0) == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("non-finite gradients abort the update untouched") {
  Tensor p = Tensor::matrix(1, 2, {1.0, 2.0}, true);
  Tensor q = Tensor::matrix(1, 2, {3.0, 4.0}, true);
  p.ensure_grad();
  q.ensure_grad();
  p.mutable_grad()[0] = 1.0;
  q.mutable_grad()[1] = std::nan("");
  Optimizer opt = Optimizer::adam(1e-3);
  std::vector<Tensor> params = {p, q};
  CHECK_THROWS_AS(opt.step(params), NonFiniteGradient);
  CHECK(p.at(0) == 1.0);  // no partial update
  CHECK(p.at(1) == 2.0);
  CHECK(q.at(0) == 3.0);
  CHECK(q.at(1) == 4.0);
  CHECK(opt.step_count == 0);
}

TEST_CASE("param_hash tracks parameter bytes") {
  Network a = Network::build(tiny_spec(), 5);
  Network b = Network::build(tiny_spec(), 5);
  CHECK(a.param_hash() == b.param_hash());
  auto params = a.parameters();
  params[0].mutable_data()[0] += 1e-12;
  CHECK(a.param_hash() != b.param_hash());
}

TEST_CASE("checkpoint round trip is exact") {
  TempDir tmp;
  BundleSpecs specs = synth_specs(64, 5);
  ModelBundle b = build_bundle(specs, 11);

  // dirty the running stats so they get exercised too
  Tensor x = Tensor::matrix(8, 64, std::vector<double>(8 * 64, 0.25));
  Graph g;
  b.enc_s.forward(&g, x, Mode::train);

  const fs::path file = tmp.path / "model.tsd";
  save_checkpoint(b, file);
  ModelBundle r = load_checkpoint(file);

  CHECK(r.dims.input_dim == b.dims.input_dim);
  CHECK(r.dims.s_dim == b.dims.s_dim);
  CHECK(r.dims.z_dim == b.dims.z_dim);
  CHECK(r.dims.n_classes == b.dims.n_classes);

  std::vector<std::pair<Network*, Network*>> pairs = {
      {&b.enc_s, &r.enc_s},   {&b.s_classifier, &r.s_classifier},
      {&b.enc_z, &r.enc_z},   {&b.decoder, &r.decoder},
      {&b.adversary, &r.adversary}};
  for (auto [orig, loaded] : pairs) {
    auto no = orig->named_tensors(), nl = loaded->named_tensors();
    REQUIRE(no.size() == nl.size());
    for (std::size_t i = 0; i < no.size(); ++i) {
      CHECK(no[i].first == nl[i].first);
      REQUIRE(no[i].second.size() == nl[i].second.size());
      for (std::size_t j = 0; j < no[i].second.size(); ++j)
        CHECK(no[i].second.at(j) == nl[i].second.at(j));  // bit exact
    }
    CHECK(orig->param_hash() == loaded->param_hash());
  }
}

TEST_CASE("checkpoint bytes start with magic and are deterministic") {
  TempDir tmp;
  ModelBundle b = build_bundle(synth_specs(16, 3), 2);
  const fs::path f1 = tmp.path / "a.tsd", f2 = tmp.path / "b.tsd";
  save_checkpoint(b, f1);
  save_checkpoint(b, f2);

  std::ifstream i1(f1, std::ios::binary), i2(f2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(i1)), {});
  std::string s2((std::istreambuf_iterator<char>(i2)), {});
  CHECK(s1 == s2);
  REQUIRE(s1.size() > 8);
  CHECK(s1.substr(0, 4) == "TSD1");
}

TEST_CASE("truncated checkpoint is rejected") {
  TempDir tmp;
  ModelBundle b = build_bundle(synth_specs(16, 3), 2);
  const fs::path full = tmp.path / "full.tsd";
  save_checkpoint(b, full);
  std::ifstream in(full, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});

  for (std::size_t cut : {std::size_t(2), std::size_t(7), bytes.size() / 2,
                          bytes.size() - 3}) {
    const fs::path part = tmp.path / "part.tsd";
    std::ofstream out(part, std::ios::binary);
    out.write(bytes.data(), std::streamsize(cut));
    out.close();
    CHECK_THROWS(load_checkpoint(part));
  }

  // corrupt magic
  std::string bad = bytes;
  bad[0] = 'X';
  const fs::path badf = tmp.path / "bad.tsd";
  std::ofstream(badf, std::ios::binary).write(bad.data(), std::streamsize(bad.size()));
  CHECK_THROWS(load_checkpoint(badf));
}

TEST_CASE("probe spec shape") {
  NetworkSpec s = probe_spec(50, 4);
  s.validate();
  CHECK(s.input_width == 50);
  CHECK(s.output_width() == 4);
  // 3 x (dense + bn) + head
  CHECK(s.layers.size() == 7);
}
