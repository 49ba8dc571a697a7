#include "kbo/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace kbo {

Mat apply_activation(Activation act, const Mat& z) {
  switch (act) {
    case Activation::Identity:
      return z;
    case Activation::ReLU:
      return z.cwiseMax(0.0);
    case Activation::Tanh:
      return z.array().tanh().matrix();
  }
  throw std::logic_error("apply_activation: unknown activation");
}

Mat activation_derivative(Activation act, const Mat& z) {
  switch (act) {
    case Activation::Identity:
      return Mat::Ones(z.rows(), z.cols());
    case Activation::ReLU:
      return (z.array() > 0.0).cast<double>().matrix();
    case Activation::Tanh: {
      Mat t = z.array().tanh().matrix();
      return (1.0 - t.array().square()).matrix();
    }
  }
  throw std::logic_error("activation_derivative: unknown activation");
}

Network::Network(std::vector<LinearLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("Network: no layers");
  offsets_.resize(layers_.size());
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& w = layers_[l].weight;
    if (w.rows() < 1 || w.cols() < 1)
      throw std::invalid_argument("Network: layer " + std::to_string(l) +
                                  " has empty weight");
    if (!w.allFinite())
      throw std::invalid_argument("Network: layer " + std::to_string(l) +
                                  " has non-finite weights");
    if (l > 0 && layers_[l - 1].out_dim() != layers_[l].in_dim())
      throw std::invalid_argument(
          "Network: layer " + std::to_string(l) + " input dim " +
          std::to_string(layers_[l].in_dim()) + " != layer " +
          std::to_string(l - 1) + " output dim " +
          std::to_string(layers_[l - 1].out_dim()));
    offsets_[l] = off;
    off += w.size();
  }
  total_dim_ = off;
}

void Network::set_layer_weight(std::size_t l, Mat w) {
  if (l >= layers_.size())
    throw std::invalid_argument("set_layer_weight: layer index out of range");
  if (w.rows() != layers_[l].weight.rows() || w.cols() != layers_[l].weight.cols())
    throw std::invalid_argument("set_layer_weight: shape mismatch at layer " +
                                std::to_string(l));
  layers_[l].weight = std::move(w);
  ++version_;
}

Criterion Criterion::with_weights(Vec w) const {
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (!std::isfinite(w[i]) || w[i] < 0.0)
      throw std::invalid_argument("Criterion: weights must be finite and >= 0");
  Criterion c = *this;
  c.per_example_weights = std::move(w);
  return c;
}

ForwardTrace forward(const Network& net, const Mat& inputs) {
  if (inputs.cols() != net.in_dim())
    throw std::invalid_argument(
        "forward: input dim " + std::to_string(inputs.cols()) +
        " does not match layer 0 input dim " + std::to_string(net.in_dim()));
  ForwardTrace trace;
  trace.net_version = net.version();
  trace.inputs.reserve(net.num_layers());
  trace.preacts.reserve(net.num_layers());
  Mat a = inputs;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    trace.inputs.push_back(a);
    Mat z = a * layer.weight.transpose();
    trace.preacts.push_back(z);
    a = apply_activation(layer.activation, z);
  }
  trace.outputs = std::move(a);
  return trace;
}

namespace {

void check_targets(const Criterion& criterion, const Mat& outputs,
                   const Targets& targets) {
  const Eigen::Index n = outputs.rows();
  const Eigen::Index c = outputs.cols();
  if (criterion.kind == LossKind::SquareLoss) {
    if (targets.values.rows() != n || targets.values.cols() != c)
      throw std::invalid_argument("loss: square-loss target shape mismatch");
  } else {
    if (targets.classes.size() != n)
      throw std::invalid_argument("loss: label count mismatch");
    for (Eigen::Index i = 0; i < n; ++i)
      if (targets.classes[i] < 0 || targets.classes[i] >= c)
        throw std::invalid_argument("loss: class index " +
                                    std::to_string(targets.classes[i]) +
                                    " out of range at example " +
                                    std::to_string(i));
  }
  if (criterion.per_example_weights &&
      criterion.per_example_weights->size() != n)
    throw std::invalid_argument("loss: weight vector length mismatch");
}

}  // namespace

Mat softmax_rows(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

std::pair<double, Mat> loss_and_output_grad(const Criterion& criterion,
                                            const Mat& outputs,
                                            const Targets& targets) {
  check_targets(criterion, outputs, targets);
  const Eigen::Index n = outputs.rows();
  Mat grad(n, outputs.cols());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = criterion.per_example_weights
                         ? (*criterion.per_example_weights)[i]
                         : 1.0;
    double li;
    if (criterion.kind == LossKind::SquareLoss) {
      Vec r = outputs.row(i) - targets.values.row(i);
      li = 0.5 * r.squaredNorm();
      grad.row(i) = w * r.transpose();
    } else {
      const double m = outputs.row(i).maxCoeff();
      Eigen::ArrayXd e = (outputs.row(i).array() - m).exp();
      const double z = e.sum();
      Eigen::ArrayXd p = e / z;
      const int y = targets.classes[i];
      li = -(outputs(i, y) - m - std::log(z));
      Vec g = p.matrix();
      g[y] -= 1.0;
      grad.row(i) = w * g.transpose();
    }
    sum += w * li;
  }
  return {sum / static_cast<double>(n), std::move(grad)};
}

std::vector<Mat> output_hessian(const Criterion& criterion, const Mat& outputs,
                                const Targets& targets) {
  check_targets(criterion, outputs, targets);
  const Eigen::Index n = outputs.rows();
  const Eigen::Index c = outputs.cols();
  std::vector<Mat> out;
  out.reserve(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = criterion.per_example_weights
                         ? (*criterion.per_example_weights)[i]
                         : 1.0;
    if (criterion.kind == LossKind::SquareLoss) {
      out.push_back(w * Mat::Identity(c, c));
    } else {
      Vec p = softmax_rows(outputs.row(i)).row(0).transpose();
      Mat h = p.asDiagonal();
      h.noalias() -= p * p.transpose();
      out.push_back(w * h);
    }
  }
  return out;
}

GradientBundle backward(const Network& net, const ForwardTrace& trace,
                        const Mat& output_grads) {
  if (trace.net_version != net.version())
    throw std::runtime_error(
        "backward: stale trace (network mutated since forward)");
  if (trace.inputs.size() != net.num_layers())
    throw std::invalid_argument("backward: trace layer count mismatch");
  if (output_grads.rows() != trace.batch_size() ||
      output_grads.cols() != net.out_dim())
    throw std::invalid_argument("backward: output gradient shape mismatch");

  const double n = static_cast<double>(trace.batch_size());
  const std::size_t nl = net.num_layers();
  GradientBundle bundle;
  bundle.weight_grads.resize(nl);
  bundle.preact_grads.resize(nl);

  Mat g = output_grads;  // gradient w.r.t. current layer's activation output
  for (std::size_t li = nl; li-- > 0;) {
    const auto& layer = net.layer(li);
    Mat gz = g.cwiseProduct(activation_derivative(layer.activation, trace.preacts[li]));
    bundle.preact_grads[li] = gz;
    bundle.weight_grads[li] = (gz.transpose() * trace.inputs[li]) / n;
    if (li > 0) g = gz * layer.weight;
  }

  bundle.flat.resize(net.param_dim());
  for (std::size_t l = 0; l < nl; ++l) {
    const Mat& wg = bundle.weight_grads[l];
    Eigen::Index off = net.param_offset(l);
    for (Eigen::Index r = 0; r < wg.rows(); ++r)
      for (Eigen::Index c = 0; c < wg.cols(); ++c)
        bundle.flat[off + r * wg.cols() + c] = wg(r, c);
  }
  return bundle;
}

Vec flatten_params(const Network& net) {
  Vec v(net.param_dim());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Mat& w = net.layer(l).weight;
    Eigen::Index off = net.param_offset(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        v[off + r * w.cols() + c] = w(r, c);
  }
  return v;
}

void unflatten_params(Network& net, const Vec& v) {
  if (v.size() != net.param_dim())
    throw std::invalid_argument("unflatten_params: length " +
                                std::to_string(v.size()) + " != param dim " +
                                std::to_string(net.param_dim()));
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    Mat& w = net.layers_[l].weight;
    Eigen::Index off = net.offsets_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        w(r, c) = v[off + r * w.cols() + c];
  }
  ++net.version_;
}

}  // namespace kbo
