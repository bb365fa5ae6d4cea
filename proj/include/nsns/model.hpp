#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nsns/autodiff.hpp"
#include "nsns/tensor.hpp"

namespace nsns {

enum class LayerKind { Conv, Relu, MaxPool, GlobalAvgPool, Flatten, Dense };

struct LayerDesc {
  LayerKind kind;
  int out_channels = 0;  // conv
  int kernel = 0;        // conv
  int stride = 1;        // conv
  int pad = 0;           // conv
  int pool = 0;          // maxpool window
  int out = 0;           // dense

  static LayerDesc conv(int out_channels, int kernel, int stride = 1, int pad = 1);
  static LayerDesc relu() { return {LayerKind::Relu}; }
  static LayerDesc maxpool(int k);
  static LayerDesc global_avg_pool() { return {LayerKind::GlobalAvgPool}; }
  static LayerDesc flatten() { return {LayerKind::Flatten}; }
  static LayerDesc dense(int out);
};

/// Ordered layer graph with canonical names (conv1.., ReLU1.., pool1.., gap1..,
/// flat1.., fc1..). Shape chain from input_shape to [class_count] is validated.
struct ModelSpec {
  std::vector<LayerDesc> layers;
  std::vector<int> input_shape;  // [C,H,W]
  int class_count = 0;
  std::string name_scheme = "vgg";

  std::vector<std::string> layer_names() const;
  /// Output shape (without batch dim) after each layer; throws naming the first
  /// offending layer if the chain is inconsistent.
  std::vector<std::vector<int>> shape_chain() const;
  void validate() const;

  int layer_index(const std::string& name) const;  // -1 when absent
  /// Channel count of a named layer (axis 1 of its output; dense width for fc).
  int channel_count(const std::string& name) const;
  /// Name of the layer whose output feeds the final dense layer.
  std::string penultimate_layer() const;
  /// Name of the final dense layer.
  std::string final_dense_layer() const;

  std::string to_json() const;  // canonical, key-sorted, no whitespace
  static ModelSpec from_json(const std::string& text);

  /// 6 conv [16,16,32,32,64,64] with maxpool after conv2/conv4/conv6,
  /// global-avg-pool, one dense head.
  static ModelSpec vgg_mini(std::vector<int> input_shape, int class_count);
  /// flatten + dense(64) + ReLU + dense head.
  static ModelSpec mlp_small(std::vector<int> input_shape, int class_count);
  static ModelSpec by_name(const std::string& name, std::vector<int> input_shape, int class_count);
};

/// One neuron: a channel of a named layer's output.
struct NeuronRef {
  std::string layer;
  int channel = 0;
  bool operator==(const NeuronRef&) const = default;
  auto operator<=>(const NeuronRef&) const = default;
};

/// Output tensor of every named layer for one forward pass, in spec order.
struct ActivationRecord {
  std::vector<std::pair<std::string, Tensor>> entries;

  const Tensor& at(const std::string& layer) const;
  bool has(const std::string& layer) const;
  int batch_size() const;
};

struct Model {
  ModelSpec spec;
  std::vector<std::pair<std::string, Tensor>> params;    // spec order
  std::map<std::string, std::map<int, double>> suppression;  // layer -> channel -> beta

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  bool has_param(const std::string& name) const;
};

/// Fan-in-scaled uniform init (bound sqrt(6/fan_in)), zero biases.
/// Deterministic for a fixed seed.
Model build_model(const ModelSpec& spec, uint64_t seed);

struct TapedForward {
  Var input;
  std::vector<std::pair<std::string, Var>> param_vars;   // aligned with model.params
  std::vector<std::pair<std::string, Var>> activations;  // every named layer, spec order
  Var logits;

  Var activation(const std::string& layer) const;
  Var param_var(const std::string& name) const;
};

/// Runs the model on a tape so gradients can flow to inputs and parameters.
/// Suppression multipliers are applied to the named layer's output before it is
/// recorded or consumed downstream.
TapedForward forward_on_tape(const Model& model, Tape& tape, const Tensor& batch);

/// Same, but reuses existing parameter leaves so several forward passes (e.g.
/// clean and adversarial batches) can share one tape and one gradient per param.
TapedForward forward_with_params(const Model& model, Tape& tape,
                                 const std::vector<std::pair<std::string, Var>>& param_vars,
                                 const Tensor& batch);

/// Builds the network on top of an input var already living on the tape
/// (shape [N] + input_shape), e.g. for gradient checks against the input.
TapedForward forward_from_var(const Model& model, Tape& tape,
                              const std::vector<std::pair<std::string, Var>>& param_vars,
                              Var input);

/// Value-only forward. Batch may carry a leading batch dim or be a single sample.
Tensor forward(const Model& model, const Tensor& batch);
std::pair<Tensor, ActivationRecord> forward_record(const Model& model, const Tensor& batch);

/// Channel slice of one sample, flattened (dense neurons give 1 element).
Tensor neuron_output(const ActivationRecord& record, const NeuronRef& ref, int sample = 0);

/// Validates refs and returns a copy with the channels' post-activation outputs
/// multiplied by beta. Duplicate refs apply once.
Model apply_suppression(const Model& model, const std::vector<NeuronRef>& neurons, double beta);

std::vector<int> predict_labels(const Model& model, const Tensor& batch);

}  // namespace nsns
