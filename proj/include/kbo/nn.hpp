#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace kbo {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using IntVec = Eigen::VectorXi;

enum class Activation { Identity, ReLU, Tanh };

/// Elementwise activation and its derivative evaluated at pre-activations.
/// ReLU derivative at exactly 0 is 0.
Mat apply_activation(Activation act, const Mat& z);
Mat activation_derivative(Activation act, const Mat& z);

/// One fully-connected layer, no bias: z = a W^T with W (out_dim x in_dim).
struct LinearLayer {
  Mat weight;
  Activation activation = Activation::Identity;

  Eigen::Index out_dim() const { return weight.rows(); }
  Eigen::Index in_dim() const { return weight.cols(); }
};

/// Ordered fully-connected layers owning the parameters. Mutation bumps a
/// version counter so stale forward traces can be detected.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<LinearLayer> layers);

  const std::vector<LinearLayer>& layers() const { return layers_; }
  std::size_t num_layers() const { return layers_.size(); }
  const LinearLayer& layer(std::size_t l) const { return layers_[l]; }

  Eigen::Index in_dim() const { return layers_.front().in_dim(); }
  Eigen::Index out_dim() const { return layers_.back().out_dim(); }

  /// Total flat parameter dimension d.
  Eigen::Index param_dim() const { return total_dim_; }
  /// Offset of layer l's block in the flat vector (row-major within a layer).
  Eigen::Index param_offset(std::size_t l) const { return offsets_[l]; }
  Eigen::Index param_count(std::size_t l) const {
    return layers_[l].weight.size();
  }

  std::uint64_t version() const { return version_; }

  /// In-place weight update; bumps the version.
  void set_layer_weight(std::size_t l, Mat w);

 private:
  std::vector<LinearLayer> layers_;
  std::vector<Eigen::Index> offsets_;
  Eigen::Index total_dim_ = 0;
  std::uint64_t version_ = 0;

  friend void unflatten_params(Network& net, const Vec& v);
};

/// Everything captured during one forward pass. Batches are stored one
/// example per row: inputs[l] is N x in_dim(l), preacts[l] is N x out_dim(l).
struct ForwardTrace {
  std::vector<Mat> inputs;
  std::vector<Mat> preacts;
  Mat outputs;  // N x C
  std::uint64_t net_version = 0;

  Eigen::Index batch_size() const { return outputs.rows(); }
};

enum class LossKind { SquareLoss, SoftmaxCrossEntropy };

/// Loss criterion with optional per-example weights sigma_n >= 0. The loss is
/// the batch mean (1/N) sum_n sigma_n * l_n; weights default to 1.
struct Criterion {
  LossKind kind = LossKind::SquareLoss;
  std::optional<Vec> per_example_weights;

  static Criterion square() { return {LossKind::SquareLoss, std::nullopt}; }
  static Criterion cross_entropy() {
    return {LossKind::SoftmaxCrossEntropy, std::nullopt};
  }
  Criterion with_weights(Vec w) const;
};

/// Targets: class indices for cross-entropy, value vectors for square loss.
struct Targets {
  Mat values;       // N x C (square loss)
  IntVec classes;   // N (cross-entropy)

  static Targets regression(Mat y) { return {std::move(y), {}}; }
  static Targets labels(IntVec y) { return {{}, std::move(y)}; }
};

/// Gradients from one backward pass: matrix-shaped per-layer weight
/// gradients (batch-mean), raw per-example pre-activation gradients, and the
/// flat row-major view.
struct GradientBundle {
  std::vector<Mat> weight_grads;   // d1 x d2 per layer, = (1/N) sum g_n a_n^T
  std::vector<Mat> preact_grads;   // N x d1 per layer (per-example, unscaled)
  Vec flat;                        // length d
};

ForwardTrace forward(const Network& net, const Mat& inputs);

/// Mean (weighted) loss and per-example output gradients. Rows of the
/// returned matrix are sigma_n * dl_n/df_n, so backpropagating them yields
/// the gradient of the mean weighted loss.
std::pair<double, Mat> loss_and_output_grad(const Criterion& criterion,
                                            const Mat& outputs,
                                            const Targets& targets);

/// Per-example C x C output Hessians: identity for square loss,
/// diag(p) - p p^T for softmax cross-entropy, scaled by sigma_n if weighted.
std::vector<Mat> output_hessian(const Criterion& criterion, const Mat& outputs,
                                const Targets& targets);

/// Exact reverse-mode pass for the given output gradients. The trace must
/// come from `forward` on the same network state.
GradientBundle backward(const Network& net, const ForwardTrace& trace,
                        const Mat& output_grads);

/// Row-major stacking of all layer weights, layers in order.
Vec flatten_params(const Network& net);
void unflatten_params(Network& net, const Vec& v);

/// Softmax over rows.
Mat softmax_rows(const Mat& logits);

}  // namespace kbo
