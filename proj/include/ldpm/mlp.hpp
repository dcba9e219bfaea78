#pragma once

#include <Eigen/Dense>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ldpm/random.hpp"

namespace ldpm {

enum class Activation { Identity, Relu, Sigmoid };

std::string to_string(Activation activation);
Activation parse_activation(const std::string& name);

struct LayerShape {
  int in = 0;
  int out = 0;
  Activation activation = Activation::Relu;

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

/// Dense feedforward network a_l = act_l(W_l a_{l-1} + g_l).
///
/// All parameters live in one flat vector (per layer: column-major weight,
/// then bias) so optimizers, gradient checks and serialization work on a
/// single contiguous buffer. Batches are column-major: one sample per column.
class FeedForwardNet {
 public:
  using MatrixMap = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;
  using VectorMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

  /// Activations of every layer for one batch; entry 0 is the input.
  struct Cache {
    std::vector<Eigen::MatrixXd> activations;
  };

  FeedForwardNet() = default;
  /// Zero-initialized network with the given layer chain.
  explicit FeedForwardNet(std::vector<LayerShape> layers);

  /// widths = {d_in, h_1, ..., d_out}; activations has widths.size() - 1 entries.
  /// Weights are fan-in scaled uniform (He bound for relu, LeCun bound
  /// otherwise); biases start at zero.
  static FeedForwardNet initialized(std::span<const int> widths, std::span<const Activation> activations, Rng& rng);

  int input_dim() const { return layers_.empty() ? 0 : layers_.front().in; }
  int output_dim() const { return layers_.empty() ? 0 : layers_.back().out; }
  int n_layers() const { return int(layers_.size()); }
  Eigen::Index n_params() const { return params_.size(); }
  const std::vector<LayerShape>& layers() const { return layers_; }
  const LayerShape& layer(int l) const { return layers_[std::size_t(l)]; }

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }

  MatrixMap weight(int l);
  ConstMatrixMap weight(int l) const;
  VectorMap bias(int l);
  ConstVectorMap bias(int l) const;
  Eigen::Index weight_offset(int l) const { return offsets_[std::size_t(l)]; }

  Eigen::VectorXd forward(const Eigen::VectorXd& input) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs, Cache& cache) const;

  /// Adds dLoss/dParams to `grad` given dLoss/dOutput for the cached batch.
  /// When `input_grad` is non-null it receives dLoss/dInput.
  void backward(const Cache& cache, const Eigen::MatrixXd& output_grad, Eigen::Ref<Eigen::VectorXd> grad,
                Eigen::MatrixXd* input_grad = nullptr) const;

  /// Reorders and rescales the outputs of layer l only: new unit j computes
  /// scales[j] * (old unit perm[j]). The consumer of those outputs must be
  /// adjusted by the caller.
  void permute_scale_outputs(int layer, std::span<const int> perm, std::span<const double> scales);

  /// Function-preserving permutation/positive-scaling of hidden layer l
  /// (l < n_layers() - 1, relu activation): rows of W_l and g_l move with
  /// the units, columns of W_{l+1} are permuted and divided by the scales.
  void apply_hidden_symmetry(int layer, std::span<const int> perm, std::span<const double> scales);

 private:
  std::vector<LayerShape> layers_;
  std::vector<Eigen::Index> offsets_;
  Eigen::VectorXd params_;
};

void apply_activation(Activation activation, Eigen::MatrixXd& values);

/// Gradient of the activation expressed through its output value.
Eigen::MatrixXd activation_derivative(Activation activation, const Eigen::MatrixXd& output);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive-moment optimizer state with bias correction.
struct OptimizerState {
  AdamOptions options;
  long long step_count = 0;
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;

  OptimizerState() = default;
  OptimizerState(Eigen::Index n_params, AdamOptions opts);
};

void optimizer_step(OptimizerState& state, Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads);

/// Scalar objective of a flat parameter vector; writes the gradient when
/// `grad` is non-null.
using Objective = std::function<double(const Eigen::VectorXd& params, Eigen::VectorXd* grad)>;

/// max_j |analytic_j - central_difference_j| / (|analytic_j| + 1e-8).
double max_relative_gradient_error(const Objective& objective, const Eigen::VectorXd& params, double fd_step = 1e-5);

/// Mean over samples of the squared error ||output - target||^2.
double squared_error_loss(const Eigen::MatrixXd& output, const Eigen::MatrixXd& targets, Eigen::MatrixXd* output_grad);

/// Gradient check of `net` under squared-error loss on one batch.
double grad_check(const FeedForwardNet& net, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                  double fd_step = 1e-5);

struct RegressionOptions {
  int max_epochs = 200;
  int batch_size = 64;
  AdamOptions adam;
  /// Trailing fraction of samples held out for early stopping.
  double validation_fraction = 0.15;
  int patience = 20;
};

struct RegressionReport {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_validation_mse = 0.0;
  std::vector<double> train_loss;
};

/// Mini-batch training of a scalar-output net on (inputs d x n, targets n).
/// The best-validation parameters are restored before returning.
RegressionReport fit_regression(FeedForwardNet& net, const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                                const RegressionOptions& options, Rng& rng);

/// Layer shapes plus row-major weights; doubles print with round-trip precision.
nlohmann::json to_json(const FeedForwardNet& net);
FeedForwardNet net_from_json(const nlohmann::json& j);

}  // namespace ldpm
