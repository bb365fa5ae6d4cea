#include "nsns/model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "nsns/rng.hpp"

namespace nsns {

LayerDesc LayerDesc::conv(int out_channels, int kernel, int stride, int pad) {
  if (out_channels < 1 || kernel < 1 || stride < 1 || pad < 0)
    throw std::invalid_argument("conv layer: bad descriptor");
  LayerDesc d{LayerKind::Conv};
  d.out_channels = out_channels;
  d.kernel = kernel;
  d.stride = stride;
  d.pad = pad;
  return d;
}

LayerDesc LayerDesc::maxpool(int k) {
  if (k < 1) throw std::invalid_argument("maxpool layer: window must be >= 1");
  LayerDesc d{LayerKind::MaxPool};
  d.pool = k;
  return d;
}

LayerDesc LayerDesc::dense(int out) {
  if (out < 1) throw std::invalid_argument("dense layer: out must be >= 1");
  LayerDesc d{LayerKind::Dense};
  d.out = out;
  return d;
}

std::vector<std::string> ModelSpec::layer_names() const {
  std::vector<std::string> names;
  int conv = 0, relu = 0, pool = 0, gap = 0, flat = 0, fc = 0;
  for (const LayerDesc& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv: names.push_back("conv" + std::to_string(++conv)); break;
      case LayerKind::Relu: names.push_back("ReLU" + std::to_string(++relu)); break;
      case LayerKind::MaxPool: names.push_back("pool" + std::to_string(++pool)); break;
      case LayerKind::GlobalAvgPool: names.push_back("gap" + std::to_string(++gap)); break;
      case LayerKind::Flatten: names.push_back("flat" + std::to_string(++flat)); break;
      case LayerKind::Dense: names.push_back("fc" + std::to_string(++fc)); break;
    }
  }
  return names;
}

std::vector<std::vector<int>> ModelSpec::shape_chain() const {
  if (input_shape.size() != 3)
    throw std::invalid_argument("model spec: input_shape must be [C,H,W], got " +
                                Tensor::shape_str(input_shape));
  for (int e : input_shape)
    if (e < 1) throw std::invalid_argument("model spec: non-positive input extent");
  std::vector<std::string> names = layer_names();
  std::vector<std::vector<int>> chain;
  std::vector<int> cur = input_shape;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerDesc& l = layers[i];
    const std::string& where = names[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        if (cur.size() != 3)
          throw std::invalid_argument("model spec: " + where + " needs a [C,H,W] input, got " +
                                      Tensor::shape_str(cur));
        int oh = (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1;
        int ow = (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1;
        if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel || oh < 1 || ow < 1)
          throw std::invalid_argument("model spec: " + where + " kernel too large for input " +
                                      Tensor::shape_str(cur));
        cur = {l.out_channels, oh, ow};
        break;
      }
      case LayerKind::Relu:
        break;
      case LayerKind::MaxPool: {
        if (cur.size() != 3)
          throw std::invalid_argument("model spec: " + where + " needs a [C,H,W] input, got " +
                                      Tensor::shape_str(cur));
        if (cur[1] < l.pool || cur[2] < l.pool)
          throw std::invalid_argument("model spec: " + where + " window exceeds input " +
                                      Tensor::shape_str(cur));
        cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
        break;
      }
      case LayerKind::GlobalAvgPool: {
        if (cur.size() != 3)
          throw std::invalid_argument("model spec: " + where + " needs a [C,H,W] input, got " +
                                      Tensor::shape_str(cur));
        cur = {cur[0]};
        break;
      }
      case LayerKind::Flatten: {
        int prod = 1;
        for (int e : cur) prod *= e;
        cur = {prod};
        break;
      }
      case LayerKind::Dense: {
        if (cur.size() != 1)
          throw std::invalid_argument("model spec: " + where +
                                      " needs a flat input, got " + Tensor::shape_str(cur) +
                                      " (insert flatten or gap)");
        cur = {l.out};
        break;
      }
    }
    chain.push_back(cur);
  }
  return chain;
}

void ModelSpec::validate() const {
  if (class_count < 2) throw std::invalid_argument("model spec: class_count must be >= 2");
  if (layers.empty()) throw std::invalid_argument("model spec: no layers");
  if (name_scheme != "vgg")
    throw std::invalid_argument("model spec: unsupported name_scheme '" + name_scheme +
                                "' (supported: vgg)");
  std::vector<std::vector<int>> chain = shape_chain();
  if (layers.back().kind != LayerKind::Dense || layers.back().out != class_count)
    throw std::invalid_argument("model spec: " + layer_names().back() +
                                " must be a dense layer with out == class_count (" +
                                std::to_string(class_count) + "), got output " +
                                Tensor::shape_str(chain.back()));
}

int ModelSpec::layer_index(const std::string& name) const {
  std::vector<std::string> names = layer_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

int ModelSpec::channel_count(const std::string& name) const {
  int idx = layer_index(name);
  if (idx < 0) throw std::invalid_argument("model spec: unknown layer '" + name + "'");
  std::vector<int> shape = shape_chain()[static_cast<size_t>(idx)];
  return shape[0];
}

std::string ModelSpec::final_dense_layer() const {
  std::vector<std::string> names = layer_names();
  for (size_t i = layers.size(); i-- > 0;)
    if (layers[i].kind == LayerKind::Dense) return names[i];
  throw std::invalid_argument("model spec: no dense layer");
}

std::string ModelSpec::penultimate_layer() const {
  std::vector<std::string> names = layer_names();
  for (size_t i = layers.size(); i-- > 0;)
    if (layers[i].kind == LayerKind::Dense) {
      if (i == 0) throw std::invalid_argument("model spec: dense layer has no upstream layer");
      return names[i - 1];
    }
  throw std::invalid_argument("model spec: no dense layer");
}

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
  }
  return "?";
}

}  // namespace

std::string ModelSpec::to_json() const {
  nlohmann::json j;
  j["class_count"] = class_count;
  j["input_shape"] = input_shape;
  j["name_scheme"] = name_scheme;
  nlohmann::json arr = nlohmann::json::array();
  for (const LayerDesc& l : layers) {
    nlohmann::json e;
    e["kind"] = kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
        e["out"] = l.out_channels;
        e["kernel"] = l.kernel;
        e["stride"] = l.stride;
        e["pad"] = l.pad;
        break;
      case LayerKind::MaxPool: e["k"] = l.pool; break;
      case LayerKind::Dense: e["out"] = l.out; break;
      default: break;
    }
    arr.push_back(e);
  }
  j["layers"] = arr;
  return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ModelSpec spec;
  spec.class_count = j.at("class_count").get<int>();
  spec.input_shape = j.at("input_shape").get<std::vector<int>>();
  spec.name_scheme = j.at("name_scheme").get<std::string>();
  for (const nlohmann::json& e : j.at("layers")) {
    std::string kind = e.at("kind").get<std::string>();
    if (kind == "conv")
      spec.layers.push_back(LayerDesc::conv(e.at("out").get<int>(), e.at("kernel").get<int>(),
                                            e.at("stride").get<int>(), e.at("pad").get<int>()));
    else if (kind == "relu")
      spec.layers.push_back(LayerDesc::relu());
    else if (kind == "maxpool")
      spec.layers.push_back(LayerDesc::maxpool(e.at("k").get<int>()));
    else if (kind == "gap")
      spec.layers.push_back(LayerDesc::global_avg_pool());
    else if (kind == "flatten")
      spec.layers.push_back(LayerDesc::flatten());
    else if (kind == "dense")
      spec.layers.push_back(LayerDesc::dense(e.at("out").get<int>()));
    else
      throw std::invalid_argument("model spec: unknown layer kind '" + kind + "'");
  }
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::vgg_mini(std::vector<int> input_shape, int class_count) {
  ModelSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.class_count = class_count;
  const int widths[6] = {16, 16, 32, 32, 64, 64};
  for (int i = 0; i < 6; ++i) {
    spec.layers.push_back(LayerDesc::conv(widths[i], 3, 1, 1));
    spec.layers.push_back(LayerDesc::relu());
    if (i % 2 == 1) spec.layers.push_back(LayerDesc::maxpool(2));
  }
  spec.layers.push_back(LayerDesc::global_avg_pool());
  spec.layers.push_back(LayerDesc::dense(class_count));
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::mlp_small(std::vector<int> input_shape, int class_count) {
  ModelSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.class_count = class_count;
  spec.layers.push_back(LayerDesc::flatten());
  spec.layers.push_back(LayerDesc::dense(64));
  spec.layers.push_back(LayerDesc::relu());
  spec.layers.push_back(LayerDesc::dense(class_count));
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::by_name(const std::string& name, std::vector<int> input_shape,
                             int class_count) {
  if (name == "vgg-mini") return vgg_mini(std::move(input_shape), class_count);
  if (name == "mlp-small") return mlp_small(std::move(input_shape), class_count);
  throw std::invalid_argument("unknown model spec '" + name +
                              "' (available: vgg-mini, mlp-small)");
}

const Tensor& ActivationRecord::at(const std::string& layer) const {
  for (const auto& [name, t] : entries)
    if (name == layer) return t;
  throw std::invalid_argument("activation record: unknown layer '" + layer + "'");
}

bool ActivationRecord::has(const std::string& layer) const {
  for (const auto& [name, t] : entries)
    if (name == layer) return true;
  return false;
}

int ActivationRecord::batch_size() const {
  if (entries.empty()) return 0;
  return entries.front().second.dim(0);
}

const Tensor& Model::param(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw std::invalid_argument("model: unknown parameter '" + name + "'");
}

Tensor& Model::param(const std::string& name) {
  for (auto& [n, t] : params)
    if (n == name) return t;
  throw std::invalid_argument("model: unknown parameter '" + name + "'");
}

bool Model::has_param(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return true;
  return false;
}

Model build_model(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  Rng rng(seed);
  std::vector<std::string> names = spec.layer_names();
  std::vector<int> cur = spec.input_shape;
  std::vector<std::vector<int>> chain = spec.shape_chain();
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    if (l.kind == LayerKind::Conv) {
      int fan_in = cur[0] * l.kernel * l.kernel;
      double bound = std::sqrt(6.0 / fan_in);
      Tensor w({l.out_channels, cur[0], l.kernel, l.kernel});
      for (double& v : w.data) v = rng.uniform(-bound, bound);
      m.params.emplace_back(names[i] + ".weight", std::move(w));
      m.params.emplace_back(names[i] + ".bias", Tensor::zeros({l.out_channels}));
    } else if (l.kind == LayerKind::Dense) {
      int fan_in = cur[0];
      double bound = std::sqrt(6.0 / fan_in);
      Tensor w({l.out, fan_in});
      for (double& v : w.data) v = rng.uniform(-bound, bound);
      m.params.emplace_back(names[i] + ".weight", std::move(w));
      m.params.emplace_back(names[i] + ".bias", Tensor::zeros({l.out}));
    }
    cur = chain[i];
  }
  return m;
}

namespace {

Tensor with_batch_dim(const Tensor& batch, const std::vector<int>& input_shape) {
  if (batch.shape == input_shape) {
    std::vector<int> s{1};
    s.insert(s.end(), input_shape.begin(), input_shape.end());
    return Tensor(s, batch.data);
  }
  if (batch.rank() == static_cast<int>(input_shape.size()) + 1 &&
      std::equal(input_shape.begin(), input_shape.end(), batch.shape.begin() + 1))
    return batch;
  throw std::invalid_argument("forward: batch shape " + batch.shape_str() +
                              " does not match model input " + Tensor::shape_str(input_shape));
}

}  // namespace

Var TapedForward::activation(const std::string& layer) const {
  for (const auto& [name, v] : activations)
    if (name == layer) return v;
  throw std::invalid_argument("forward: unknown layer '" + layer + "'");
}

Var TapedForward::param_var(const std::string& name) const {
  for (const auto& [n, v] : param_vars)
    if (n == name) return v;
  throw std::invalid_argument("forward: unknown parameter '" + name + "'");
}

TapedForward forward_on_tape(const Model& model, Tape& tape, const Tensor& batch) {
  std::vector<std::pair<std::string, Var>> param_vars;
  for (const auto& [name, t] : model.params) param_vars.emplace_back(name, tape.leaf(t));
  return forward_with_params(model, tape, param_vars, batch);
}

TapedForward forward_with_params(const Model& model, Tape& tape,
                                 const std::vector<std::pair<std::string, Var>>& param_vars,
                                 const Tensor& batch) {
  Tensor input = with_batch_dim(batch, model.spec.input_shape);
  return forward_from_var(model, tape, param_vars, tape.leaf(std::move(input)));
}

TapedForward forward_from_var(const Model& model, Tape& tape,
                              const std::vector<std::pair<std::string, Var>>& param_vars,
                              Var input) {
  const ModelSpec& spec = model.spec;
  {
    std::vector<int> shape = tape.value(input).shape;  // copy: pushes invalidate references
    if (shape.size() != spec.input_shape.size() + 1 ||
        !std::equal(spec.input_shape.begin(), spec.input_shape.end(), shape.begin() + 1))
      throw std::invalid_argument("forward: input var shape " + Tensor::shape_str(shape) +
                                  " does not match [N] + " +
                                  Tensor::shape_str(spec.input_shape));
  }

  TapedForward tf;
  tf.input = input;
  tf.param_vars = param_vars;

  std::vector<std::string> names = spec.layer_names();
  std::vector<std::vector<int>> chain = spec.shape_chain();
  Var cur = tf.input;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
        cur = tape.conv2d(cur, tf.param_var(names[i] + ".weight"),
                          tf.param_var(names[i] + ".bias"), l.stride, l.pad);
        break;
      case LayerKind::Relu: cur = tape.relu(cur); break;
      case LayerKind::MaxPool: cur = tape.maxpool2d(cur, l.pool); break;
      case LayerKind::GlobalAvgPool: cur = tape.global_avg_pool(cur); break;
      case LayerKind::Flatten: cur = tape.flatten(cur); break;
      case LayerKind::Dense:
        cur = tape.dense(cur, tf.param_var(names[i] + ".weight"),
                         tf.param_var(names[i] + ".bias"));
        break;
    }
    auto it = model.suppression.find(names[i]);
    if (it != model.suppression.end() && !it->second.empty()) {
      std::vector<double> mult(static_cast<size_t>(chain[i][0]), 1.0);
      for (const auto& [channel, beta] : it->second) mult[static_cast<size_t>(channel)] = beta;
      cur = tape.channel_scale(cur, std::move(mult));
    }
    tf.activations.emplace_back(names[i], cur);
  }
  tf.logits = cur;
  return tf;
}

Tensor forward(const Model& model, const Tensor& batch) {
  Tape tape;
  TapedForward tf = forward_on_tape(model, tape, batch);
  return tape.value(tf.logits);
}

std::pair<Tensor, ActivationRecord> forward_record(const Model& model, const Tensor& batch) {
  Tape tape;
  TapedForward tf = forward_on_tape(model, tape, batch);
  ActivationRecord rec;
  for (const auto& [name, v] : tf.activations) rec.entries.emplace_back(name, tape.value(v));
  return {tape.value(tf.logits), std::move(rec)};
}

Tensor neuron_output(const ActivationRecord& record, const NeuronRef& ref, int sample) {
  const Tensor& t = record.at(ref.layer);
  const int batch = t.dim(0);
  if (sample < 0 || sample >= batch)
    throw std::invalid_argument("neuron_output: sample " + std::to_string(sample) +
                                " out of range [0," + std::to_string(batch) + ")");
  const int channels = t.dim(1);
  if (ref.channel < 0 || ref.channel >= channels)
    throw std::invalid_argument("neuron_output: channel " + std::to_string(ref.channel) +
                                " out of range [0," + std::to_string(channels) + ") in layer '" +
                                ref.layer + "'");
  const size_t plane = t.numel() / static_cast<size_t>(batch) / static_cast<size_t>(channels);
  Tensor out({static_cast<int>(plane)});
  const double* src = t.data.data() + (size_t(sample) * channels + ref.channel) * plane;
  std::copy(src, src + plane, out.data.begin());
  return out;
}

Model apply_suppression(const Model& model, const std::vector<NeuronRef>& neurons, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("apply_suppression: beta must be in [0,1], got " +
                                std::to_string(beta));
  Model out = model;
  for (const NeuronRef& ref : neurons) {
    int channels = model.spec.channel_count(ref.layer);  // throws on unknown layer
    if (ref.channel < 0 || ref.channel >= channels)
      throw std::invalid_argument("apply_suppression: channel " + std::to_string(ref.channel) +
                                  " out of range [0," + std::to_string(channels) +
                                  ") in layer '" + ref.layer + "'");
    out.suppression[ref.layer][ref.channel] = beta;
  }
  return out;
}

std::vector<int> predict_labels(const Model& model, const Tensor& batch) {
  Tensor logits = forward(model, batch);
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data.data() + size_t(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    labels[static_cast<size_t>(i)] = best;
  }
  return labels;
}

}  // namespace nsns
