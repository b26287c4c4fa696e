#pragma once

// Network construction, initialization, optimizers and checkpoint IO.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tsd/tensor.hpp"

namespace tsd {

enum class Act { none, relu };

struct LayerSpec {
  enum class Kind { dense, batchnorm, softmax_head };
  Kind kind;
  std::size_t width = 0;  // dense output width / softmax class count
  Act act = Act::none;    // applied after dense or after batch-norm

  static LayerSpec dense(std::size_t out, Act a = Act::none) {
    return {Kind::dense, out, a};
  }
  static LayerSpec batchnorm(Act a = Act::none) { return {Kind::batchnorm, 0, a}; }
  static LayerSpec softmax_head(std::size_t k) {
    return {Kind::softmax_head, k, Act::none};
  }
};

struct NetworkSpec {
  std::size_t input_width = 0;
  std::vector<LayerSpec> layers;

  std::size_t output_width() const;
  void validate() const;  // throws on inconsistent widths / empty spec
};

class Network {
 public:
  Network() = default;
  static Network build(const NetworkSpec& spec, std::uint64_t seed);

  // g == nullptr runs forward without recording (detached).
  Tensor forward(Graph* g, const Tensor& x, Mode mode);

  std::vector<Tensor> parameters();                     // trainable only
  std::vector<std::pair<std::string, Tensor>> named_tensors();  // + running stats
  std::size_t parameter_count() const;
  void zero_grads();
  const NetworkSpec& spec() const { return spec_; }

  // FNV-1a over raw parameter bytes; frozen-weight assertion helper.
  std::uint64_t param_hash() const;

 private:
  struct Dense {
    Tensor W, b;
    Act act;
  };
  struct BatchNorm {
    Tensor gamma, beta;
    BatchNormState state;
    Act act;
  };
  using Layer = std::variant<Dense, BatchNorm>;

  NetworkSpec spec_;
  std::vector<Layer> layers_;
};

// --------------------------------------------------------------------------
// optimizers

struct NonFiniteGradient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Optimizer {
  enum class Kind { adam, sgd };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> m, v;  // adam moments, lazily sized

  static Optimizer adam(double lr = 1e-3, double beta1 = 0.9,
                        double beta2 = 0.999, double eps = 1e-8);
  static Optimizer sgd(double lr = 1e-3);

  // applies one update using each tensor's populated gradient;
  // throws NonFiniteGradient (leaving parameters untouched) on bad input
  void step(std::vector<Tensor>& params);
};

// --------------------------------------------------------------------------
// model bundle + checkpoints

struct Dims {
  std::size_t input_dim = 0;
  std::size_t s_dim = 0;
  std::size_t z_dim = 0;
  std::size_t n_classes = 0;
};

struct ModelBundle {
  Network enc_s, s_classifier, enc_z, decoder, adversary;
  Dims dims;
};

// Presets per the stocks / synthetic-image experiments.
struct BundleSpecs {
  NetworkSpec enc_s, s_classifier, enc_z, decoder, adversary;
  Dims dims;
};
BundleSpecs stocks_specs(std::size_t n_classes);
BundleSpecs synth_specs(std::size_t input_dim = 1024, std::size_t n_classes = 10);
// probe: 3 dense layers with batch-norm + ReLU and a softmax head;
// width defaults to the code dimension (0)
NetworkSpec probe_spec(std::size_t code_dim, std::size_t n_classes,
                       std::size_t width = 0);

ModelBundle build_bundle(const BundleSpecs& specs, std::uint64_t seed);

void save_checkpoint(ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace tsd
