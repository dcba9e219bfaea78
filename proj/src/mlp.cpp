#include "ldpm/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldpm/error.hpp"

namespace ldpm {

std::string to_string(Activation activation) {
  switch (activation) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "identity";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::Identity;
  if (name == "relu") return Activation::Relu;
  if (name == "sigmoid") return Activation::Sigmoid;
  throw Error(ErrorKind::Config, "unknown activation '" + name + "' (expected identity, relu or sigmoid)");
}

FeedForwardNet::FeedForwardNet(std::vector<LayerShape> layers) : layers_(std::move(layers)) {
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& shape = layers_[l];
    if (shape.in < 1 || shape.out < 1) throw Error(ErrorKind::DimMismatch, "layer with empty dimension");
    if (l > 0 && layers_[l - 1].out != shape.in) {
      throw Error(ErrorKind::DimMismatch, "layer " + std::to_string(l) + " input " + std::to_string(shape.in) +
                                              " does not match previous output " +
                                              std::to_string(layers_[l - 1].out));
    }
    offsets_.push_back(offset);
    offset += Eigen::Index(shape.out) * shape.in + shape.out;
  }
  params_ = Eigen::VectorXd::Zero(offset);
}

FeedForwardNet FeedForwardNet::initialized(std::span<const int> widths, std::span<const Activation> activations,
                                           Rng& rng) {
  if (widths.size() < 2 || activations.size() + 1 != widths.size()) {
    throw Error(ErrorKind::DimMismatch, "initialized: need one activation per layer");
  }
  std::vector<LayerShape> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) layers.push_back({widths[l], widths[l + 1], activations[l]});
  FeedForwardNet net(std::move(layers));
  for (int l = 0; l < net.n_layers(); ++l) {
    const double fan_in = net.layer(l).in;
    const double bound =
        net.layer(l).activation == Activation::Relu ? std::sqrt(6.0 / fan_in) : std::sqrt(3.0 / fan_in);
    auto w = net.weight(l);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-bound, bound);
  }
  return net;
}

FeedForwardNet::MatrixMap FeedForwardNet::weight(int l) {
  const auto& s = layers_[std::size_t(l)];
  return MatrixMap(params_.data() + offsets_[std::size_t(l)], s.out, s.in);
}

FeedForwardNet::ConstMatrixMap FeedForwardNet::weight(int l) const {
  const auto& s = layers_[std::size_t(l)];
  return ConstMatrixMap(params_.data() + offsets_[std::size_t(l)], s.out, s.in);
}

FeedForwardNet::VectorMap FeedForwardNet::bias(int l) {
  const auto& s = layers_[std::size_t(l)];
  return VectorMap(params_.data() + offsets_[std::size_t(l)] + Eigen::Index(s.out) * s.in, s.out);
}

FeedForwardNet::ConstVectorMap FeedForwardNet::bias(int l) const {
  const auto& s = layers_[std::size_t(l)];
  return ConstVectorMap(params_.data() + offsets_[std::size_t(l)] + Eigen::Index(s.out) * s.in, s.out);
}

void apply_activation(Activation activation, Eigen::MatrixXd& values) {
  switch (activation) {
    case Activation::Identity: break;
    case Activation::Relu: values = values.cwiseMax(0.0); break;
    case Activation::Sigmoid: values = (1.0 + (-values.array()).exp()).inverse().matrix(); break;
  }
}

Eigen::MatrixXd activation_derivative(Activation activation, const Eigen::MatrixXd& output) {
  switch (activation) {
    case Activation::Identity: return Eigen::MatrixXd::Ones(output.rows(), output.cols());
    case Activation::Relu: return (output.array() > 0.0).cast<double>().matrix();
    case Activation::Sigmoid: return (output.array() * (1.0 - output.array())).matrix();
  }
  return {};
}

Eigen::VectorXd FeedForwardNet::forward(const Eigen::VectorXd& input) const {
  return forward_batch(Eigen::MatrixXd(input)).col(0);
}

Eigen::MatrixXd FeedForwardNet::forward_batch(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != input_dim()) {
    throw Error(ErrorKind::DimMismatch, "forward: input dimension " + std::to_string(inputs.rows()) +
                                            ", network expects " + std::to_string(input_dim()));
  }
  Eigen::MatrixXd a = inputs;
  for (int l = 0; l < n_layers(); ++l) {
    Eigen::MatrixXd next = weight(l) * a;
    next.colwise() += bias(l);
    apply_activation(layer(l).activation, next);
    a = std::move(next);
  }
  return a;
}

Eigen::MatrixXd FeedForwardNet::forward_batch(const Eigen::MatrixXd& inputs, Cache& cache) const {
  if (inputs.rows() != input_dim()) {
    throw Error(ErrorKind::DimMismatch, "forward: input dimension " + std::to_string(inputs.rows()) +
                                            ", network expects " + std::to_string(input_dim()));
  }
  cache.activations.resize(std::size_t(n_layers()) + 1);
  cache.activations[0] = inputs;
  for (int l = 0; l < n_layers(); ++l) {
    Eigen::MatrixXd next = weight(l) * cache.activations[std::size_t(l)];
    next.colwise() += bias(l);
    apply_activation(layer(l).activation, next);
    cache.activations[std::size_t(l) + 1] = std::move(next);
  }
  return cache.activations.back();
}

void FeedForwardNet::backward(const Cache& cache, const Eigen::MatrixXd& output_grad, Eigen::Ref<Eigen::VectorXd> grad,
                              Eigen::MatrixXd* input_grad) const {
  Eigen::MatrixXd delta = output_grad;
  for (int l = n_layers() - 1; l >= 0; --l) {
    const auto& out = cache.activations[std::size_t(l) + 1];
    const auto& in = cache.activations[std::size_t(l)];
    delta.array() *= activation_derivative(layer(l).activation, out).array();
    const auto& s = layer(l);
    MatrixMap gw(grad.data() + offsets_[std::size_t(l)], s.out, s.in);
    VectorMap gb(grad.data() + offsets_[std::size_t(l)] + Eigen::Index(s.out) * s.in, s.out);
    gw.noalias() += delta * in.transpose();
    gb += delta.rowwise().sum();
    if (l > 0 || input_grad != nullptr) {
      Eigen::MatrixXd upstream = weight(l).transpose() * delta;
      delta = std::move(upstream);
    }
  }
  if (input_grad != nullptr) *input_grad = std::move(delta);
}

namespace {
void check_permutation(std::span<const int> perm, std::span<const double> scales, int width) {
  if (int(perm.size()) != width || int(scales.size()) != width) {
    throw Error(ErrorKind::DimMismatch, "symmetry: permutation/scales must match layer width");
  }
  std::vector<bool> hit(std::size_t(width), false);
  for (int p : perm) {
    if (p < 0 || p >= width || hit[std::size_t(p)]) throw Error(ErrorKind::DimMismatch, "symmetry: not a permutation");
    hit[std::size_t(p)] = true;
  }
  for (double c : scales)
    if (!(c > 0.0)) throw Error(ErrorKind::BadScale, "symmetry: scales must be strictly positive");
}
}  // namespace

void FeedForwardNet::permute_scale_outputs(int l, std::span<const int> perm, std::span<const double> scales) {
  check_permutation(perm, scales, layer(l).out);
  const Eigen::MatrixXd w = weight(l);
  const Eigen::VectorXd b = bias(l);
  auto wl = weight(l);
  auto bl = bias(l);
  for (int j = 0; j < layer(l).out; ++j) {
    wl.row(j) = scales[std::size_t(j)] * w.row(perm[std::size_t(j)]);
    bl(j) = scales[std::size_t(j)] * b(perm[std::size_t(j)]);
  }
}

void FeedForwardNet::apply_hidden_symmetry(int l, std::span<const int> perm, std::span<const double> scales) {
  if (l < 0 || l + 1 >= n_layers()) throw Error(ErrorKind::DimMismatch, "apply_hidden_symmetry: not a hidden layer");
  const bool unit_scales = std::all_of(scales.begin(), scales.end(), [](double c) { return c == 1.0; });
  if (layer(l).activation != Activation::Relu && !unit_scales) {
    throw Error(ErrorKind::BadScale, "positive scaling commutes only with relu units");
  }
  permute_scale_outputs(l, perm, scales);
  const Eigen::MatrixXd next = weight(l + 1);
  auto wn = weight(l + 1);
  for (int j = 0; j < layer(l).out; ++j) wn.col(j) = next.col(perm[std::size_t(j)]) / scales[std::size_t(j)];
}

OptimizerState::OptimizerState(Eigen::Index n_params, AdamOptions opts)
    : options(opts), first_moment(Eigen::VectorXd::Zero(n_params)), second_moment(Eigen::VectorXd::Zero(n_params)) {}

void optimizer_step(OptimizerState& state, Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size()) {
    throw Error(ErrorKind::DimMismatch, "optimizer_step: parameter/gradient/state sizes differ");
  }
  const auto& o = state.options;
  ++state.step_count;
  state.first_moment = o.beta1 * state.first_moment + (1.0 - o.beta1) * grads;
  state.second_moment = o.beta2 * state.second_moment + (1.0 - o.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(o.beta1, double(state.step_count));
  const double c2 = 1.0 - std::pow(o.beta2, double(state.step_count));
  params.array() -= o.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + o.epsilon);
}

double max_relative_gradient_error(const Objective& objective, const Eigen::VectorXd& params, double fd_step) {
  Eigen::VectorXd analytic = Eigen::VectorXd::Zero(params.size());
  objective(params, &analytic);
  Eigen::VectorXd probe = params;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < params.size(); ++j) {
    probe(j) = params(j) + fd_step;
    const double up = objective(probe, nullptr);
    probe(j) = params(j) - fd_step;
    const double down = objective(probe, nullptr);
    probe(j) = params(j);
    const double numeric = (up - down) / (2.0 * fd_step);
    worst = std::max(worst, std::abs(analytic(j) - numeric) / (std::abs(analytic(j)) + 1e-8));
  }
  return worst;
}

double squared_error_loss(const Eigen::MatrixXd& output, const Eigen::MatrixXd& targets, Eigen::MatrixXd* output_grad) {
  if (output.rows() != targets.rows() || output.cols() != targets.cols()) {
    throw Error(ErrorKind::LengthMismatch, "squared_error_loss: output and target shapes differ");
  }
  const double n = double(output.cols());
  const Eigen::MatrixXd diff = output - targets;
  if (output_grad != nullptr) *output_grad = (2.0 / n) * diff;
  return diff.squaredNorm() / n;
}

double grad_check(const FeedForwardNet& net, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                  double fd_step) {
  FeedForwardNet probe = net;
  Objective objective = [&](const Eigen::VectorXd& params, Eigen::VectorXd* grad) {
    probe.params() = params;
    if (grad == nullptr) return squared_error_loss(probe.forward_batch(inputs), targets, nullptr);
    FeedForwardNet::Cache cache;
    Eigen::MatrixXd out_grad;
    const double loss = squared_error_loss(probe.forward_batch(inputs, cache), targets, &out_grad);
    grad->setZero(params.size());
    probe.backward(cache, out_grad, *grad);
    return loss;
  };
  return max_relative_gradient_error(objective, net.params(), fd_step);
}

RegressionReport fit_regression(FeedForwardNet& net, const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                                const RegressionOptions& options, Rng& rng) {
  if (net.output_dim() != 1) throw Error(ErrorKind::DimMismatch, "fit_regression: scalar-output net required");
  if (inputs.cols() != targets.size()) throw Error(ErrorKind::LengthMismatch, "fit_regression: inputs vs targets");
  const Eigen::Index n = inputs.cols();
  Eigen::Index n_val = Eigen::Index(std::floor(options.validation_fraction * double(n)));
  if (n - n_val < 1) n_val = 0;
  const Eigen::Index n_train = n - n_val;
  if (n_train < 1) throw Error(ErrorKind::InsufficientData, "fit_regression: no training samples");

  RegressionReport report;
  OptimizerState state(net.n_params(), options.adam);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  const Eigen::MatrixXd val_inputs = inputs.rightCols(n_val);
  const Eigen::RowVectorXd val_targets = targets.tail(n_val).transpose();

  auto validation_mse = [&]() {
    if (n_val == 0) return 0.0;
    return (net.forward_batch(val_inputs) - val_targets).squaredNorm() / double(n_val);
  };
  double best = validation_mse();
  Eigen::VectorXd best_params = net.params();
  int since_best = 0;
  Eigen::VectorXd grad(net.n_params());
  FeedForwardNet::Cache cache;
  const Eigen::Index batch = std::max(1, options.batch_size);
  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0.0;
    for (Eigen::Index start = 0; start < n_train; start += batch) {
      const Eigen::Index m = std::min(batch, n_train - start);
      Eigen::MatrixXd xb(inputs.rows(), m);
      Eigen::RowVectorXd yb(m);
      for (Eigen::Index k = 0; k < m; ++k) {
        xb.col(k) = inputs.col(order[std::size_t(start + k)]);
        yb(k) = targets(order[std::size_t(start + k)]);
      }
      Eigen::MatrixXd out_grad;
      const double loss = squared_error_loss(net.forward_batch(xb, cache), yb, &out_grad);
      if (!std::isfinite(loss)) throw Error(ErrorKind::NonFinite, "fit_regression: loss diverged");
      epoch_loss += loss * double(m);
      grad.setZero();
      net.backward(cache, out_grad, grad);
      optimizer_step(state, net.params(), grad);
    }
    report.train_loss.push_back(epoch_loss / double(n_train));
    report.epochs_run = epoch;
    if (n_val == 0) {
      best_params = net.params();
      report.best_epoch = epoch;
      continue;
    }
    const double val = validation_mse();
    if (val < best) {
      best = val;
      best_params = net.params();
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= options.patience) {
      break;
    }
  }
  net.params() = best_params;
  report.best_validation_mse = best;
  return report;
}

nlohmann::json to_json(const FeedForwardNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < net.n_layers(); ++l) {
    const auto& s = net.layer(l);
    std::vector<double> w;
    w.reserve(std::size_t(s.in) * std::size_t(s.out));
    const auto weight = net.weight(l);
    for (int r = 0; r < s.out; ++r)
      for (int c = 0; c < s.in; ++c) w.push_back(weight(r, c));
    const auto b = net.bias(l);
    layers.push_back({{"in", s.in},
                      {"out", s.out},
                      {"activation", to_string(s.activation)},
                      {"weight", w},
                      {"bias", std::vector<double>(b.data(), b.data() + b.size())}});
  }
  return {{"layers", layers}};
}

FeedForwardNet net_from_json(const nlohmann::json& j) {
  std::vector<LayerShape> shapes;
  for (const auto& layer : j.at("layers")) {
    shapes.push_back({layer.at("in").get<int>(), layer.at("out").get<int>(),
                      parse_activation(layer.at("activation").get<std::string>())});
  }
  FeedForwardNet net(shapes);
  int l = 0;
  for (const auto& layer : j.at("layers")) {
    const auto w = layer.at("weight").get<std::vector<double>>();
    const auto b = layer.at("bias").get<std::vector<double>>();
    const auto& s = net.layer(l);
    if (w.size() != std::size_t(s.in) * std::size_t(s.out) || b.size() != std::size_t(s.out)) {
      throw Error(ErrorKind::DimMismatch, "net_from_json: layer " + std::to_string(l) + " has wrong value count");
    }
    auto weight = net.weight(l);
    for (int r = 0; r < s.out; ++r)
      for (int c = 0; c < s.in; ++c) weight(r, c) = w[std::size_t(r) * std::size_t(s.in) + std::size_t(c)];
    for (int r = 0; r < s.out; ++r) net.bias(l)(r) = b[std::size_t(r)];
    ++l;
  }
  return net;
}

}  // namespace ldpm
