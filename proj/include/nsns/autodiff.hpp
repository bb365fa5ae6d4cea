#pragma once

#include <functional>
#include <span>
#include <vector>

#include "nsns/tensor.hpp"

namespace nsns {

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Records primitive tensor operations for one forward pass and replays their
/// adjoints in reverse order. Ops always append after their inputs, so walking
/// node ids backwards is a reverse topological order. A tape is confined to one
/// thread and consumed by exactly one backward() call.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an input or parameter tensor.
  Var leaf(Tensor value);

  const Tensor& value(Var v) const;
  size_t size() const { return nodes_.size(); }

  // Elementwise. add/sub accept equal shapes or a scalar (numel 1) on either side.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var relu(Var a);
  Var clamp(Var a, double lo, double hi);
  Var sign(Var a);

  /// Multiplies channel c (axis 1) by mult[c]. Rank >= 2.
  Var channel_scale(Var a, std::vector<double> mult);

  // Reductions to a scalar (shape [1]).
  Var sum(Var a);
  Var l1_distance(Var a, Var b);
  Var l2_norm_squared(Var a);

  /// [m,k] x [k,n] -> [m,n].
  Var matmul(Var a, Var b);
  /// x [N,I], w [O,I], b [O] -> [N,O]; fused row-wise bias.
  Var dense(Var x, Var w, Var b);
  /// x [N,C,H,W], w [OC,C,KH,KW], b [OC]; zero padding.
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  /// Non-overlapping k x k max pooling; ties keep the first (lowest index) max.
  Var maxpool2d(Var a, int k);
  /// [N,C,H,W] -> [N,C].
  Var global_avg_pool(Var a);
  /// [N,...] -> [N,M].
  Var flatten(Var a);

  /// Sum over rows of -log softmax(logits)[label]. logits [N,K] or [K].
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

  /// Gradients of a scalar loss w.r.t. each target, in target order. Targets
  /// the loss does not depend on get zero tensors. Consumes the tape.
  std::vector<Tensor> backward(Var loss, std::span<const Var> wrt);
  Tensor backward_one(Var loss, Var wrt);

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    // Accumulates input adjoints: gin[i] is null when input i needs no gradient.
    std::function<void(const Tensor& vout, const std::vector<const Tensor*>& vin,
                       const Tensor& gout, const std::vector<Tensor*>& gin)>
        backward;
  };

  int push(Node n, const char* op);
  const Tensor& val(Var v, const char* op) const;
  void check_open(const char* op) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function of one tensor. `f` must build the function on
/// the tape it is given.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double step);

}  // namespace nsns
