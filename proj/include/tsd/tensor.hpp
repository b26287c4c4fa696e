#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
// Tensors are handles to shared storage; a Graph records executed ops on a
// tape and replays it backward once.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsd {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data,
         bool requires_grad = false);

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  // rank-2 convenience
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return n_->value; }
  std::span<double> mutable_data() { return n_->value; }
  double at(std::size_t i) const { return n_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return n_->value[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }

  bool has_grad() const { return n_ && !n_->grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void ensure_grad();            // allocate zero grad buffer if absent
  void zero_grad();              // drop the grad buffer
  void accumulate_grad(std::span<const double> g);

  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return n_->shape == o.n_->shape; }
  std::string shape_str() const;

  // identity of the underlying storage (for graph bookkeeping)
  const void* id() const { return n_.get(); }

  Tensor clone() const;  // deep copy, no grad

 private:
  struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
  };
  std::shared_ptr<Node> n_;
};

enum class Mode { train, eval };

// Running statistics owned by a batch-norm layer, updated in train mode.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.9;
};

// Tape of differentiable operations. One forward construction, one backward.
class Graph {
 public:
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add_bias(const Tensor& x, const Tensor& b);  // [batch x n] + [n]
  Tensor add(const Tensor& a, const Tensor& b);       // same shape
  Tensor relu(const Tensor& x);
  Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode);
  Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
  Tensor mse(const Tensor& pred, const Tensor& target);
  Tensor concat(const Tensor& a, const Tensor& b);    // column-wise
  Tensor sum(const Tensor& x);
  // a + c*b for scalar tensors; used to form L_rec - lambda*L_adv
  Tensor axpy(const Tensor& a, double c, const Tensor& b);

  void backward(const Tensor& loss);

 private:
  Tensor track(Tensor t);  // mark tensor as graph-internal
  bool tracked(const Tensor& t) const;
  bool wants_grad(const Tensor& t) const { return t.requires_grad() || tracked(t); }

  std::vector<std::function<void()>> tape_;
  std::vector<const void*> interior_;  // ids of op outputs
  bool consumed_ = false;
};

// Forward-only helpers (no tape), shared by ops and probes.
Tensor matmul_value(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& logits);

// Central-difference gradient check. `f` rebuilds the computation in the
// supplied graph and returns a scalar loss; params are the tensors whose
// gradients are checked. Returns max relative error over all coordinates.
double grad_check(std::vector<Tensor> params,
                  const std::function<Tensor(Graph&)>& f, double h = 1e-5);

}  // namespace tsd
