#include "nsns/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace nsns {

namespace {

void ensure_finite(const Tensor& t, const char* op) {
  if (!t.all_finite())
    throw std::runtime_error(std::string(op) + ": non-finite values in result");
}

bool is_scalar(const Tensor& t) { return t.numel() == 1; }

// 3x3 stride-1 pad-1 kernels, the shape every shipped model uses. Fused 3-tap
// row passes keep the inner loops contiguous and vectorizable.

void conv3x3_forward_plane(double* __restrict__ yplane, const double* __restrict__ xc,
                           const double* wc, int h, int w) {
  for (int ky = 0; ky < 3; ++ky) {
    const double w0 = wc[ky * 3 + 0], w1 = wc[ky * 3 + 1], w2 = wc[ky * 3 + 2];
    const int y_lo = std::max(0, 1 - ky), y_hi = std::min(h, h + 1 - ky);
    for (int y0 = y_lo; y0 < y_hi; ++y0) {
      double* __restrict__ yr = yplane + size_t(y0) * w;
      const double* __restrict__ xr = xc + size_t(y0 - 1 + ky) * w;
      yr[0] += w1 * xr[0] + w2 * xr[1];
      for (int x0 = 1; x0 < w - 1; ++x0)
        yr[x0] += w0 * xr[x0 - 1] + w1 * xr[x0] + w2 * xr[x0 + 1];
      yr[w - 1] += w0 * xr[w - 2] + w1 * xr[w - 1];
    }
  }
}

void conv3x3_dx_plane(double* __restrict__ dxc, const double* __restrict__ grow0,
                      const double* wc, int h, int w) {
  for (int ky = 0; ky < 3; ++ky) {
    // correlation with the flipped kernel row
    const double w0 = wc[ky * 3 + 0], w1 = wc[ky * 3 + 1], w2 = wc[ky * 3 + 2];
    const int y_lo = std::max(0, 1 - ky), y_hi = std::min(h, h + 1 - ky);
    for (int y0 = y_lo; y0 < y_hi; ++y0) {
      const double* __restrict__ gr = grow0 + size_t(y0) * w;
      double* __restrict__ dxr = dxc + size_t(y0 - 1 + ky) * w;
      dxr[0] += w1 * gr[0] + w0 * gr[1];
      for (int ix = 1; ix < w - 1; ++ix)
        dxr[ix] += w2 * gr[ix - 1] + w1 * gr[ix] + w0 * gr[ix + 1];
      dxr[w - 1] += w2 * gr[w - 2] + w1 * gr[w - 1];
    }
  }
}

void conv3x3_dw_plane(double* wc, const double* __restrict__ grow0,
                      const double* __restrict__ xc, int h, int w) {
  for (int ky = 0; ky < 3; ++ky) {
    double d0 = 0.0, d1 = 0.0, d2 = 0.0;
    const int y_lo = std::max(0, 1 - ky), y_hi = std::min(h, h + 1 - ky);
    for (int y0 = y_lo; y0 < y_hi; ++y0) {
      const double* __restrict__ gr = grow0 + size_t(y0) * w;
      const double* __restrict__ xr = xc + size_t(y0 - 1 + ky) * w;
      d1 += gr[0] * xr[0];
      d2 += gr[0] * xr[1];
      for (int x0 = 1; x0 < w - 1; ++x0) {
        d0 += gr[x0] * xr[x0 - 1];
        d1 += gr[x0] * xr[x0];
        d2 += gr[x0] * xr[x0 + 1];
      }
      d0 += gr[w - 1] * xr[w - 2];
      d1 += gr[w - 1] * xr[w - 1];
    }
    wc[ky * 3 + 0] += d0;
    wc[ky * 3 + 1] += d1;
    wc[ky * 3 + 2] += d2;
  }
}

}  // namespace

void Tape::check_open(const char* op) const {
  if (consumed_)
    throw std::runtime_error(std::string(op) + ": tape already consumed by backward()");
}

int Tape::push(Node n, const char* op) {
  ensure_finite(n.value, op);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Tape::val(Var v, const char* op) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument(std::string(op) + ": variable not on this tape");
  return nodes_[static_cast<size_t>(v.id)].value;
}

Var Tape::leaf(Tensor value) {
  check_open("leaf");
  Node n;
  n.value = std::move(value);
  return Var{push(std::move(n), "leaf")};
}

const Tensor& Tape::value(Var v) const { return val(v, "value"); }

Var Tape::add(Var a, Var b) {
  check_open("add");
  const Tensor& ta = val(a, "add");
  const Tensor& tb = val(b, "add");
  Node n;
  n.inputs = {a.id, b.id};
  if (ta.same_shape(tb)) {
    n.value = ta;
    for (size_t i = 0; i < tb.numel(); ++i) n.value[i] += tb[i];
    n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                    const std::vector<Tensor*>& gin) {
      for (int s = 0; s < 2; ++s)
        if (gin[s])
          for (size_t i = 0; i < g.numel(); ++i) (*gin[s])[i] += g[i];
    };
  } else if (is_scalar(tb)) {
    n.value = ta;
    for (double& v : n.value.data) v += tb[0];
    n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                    const std::vector<Tensor*>& gin) {
      if (gin[0])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i];
      if (gin[1])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[1])[0] += g[i];
    };
  } else if (is_scalar(ta)) {
    n.value = tb;
    for (double& v : n.value.data) v += ta[0];
    n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                    const std::vector<Tensor*>& gin) {
      if (gin[1])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[1])[i] += g[i];
      if (gin[0])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[0] += g[i];
    };
  } else {
    throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  return Var{push(std::move(n), "add")};
}

Var Tape::sub(Var a, Var b) {
  check_open("sub");
  const Tensor& ta = val(a, "sub");
  const Tensor& tb = val(b, "sub");
  Node n;
  n.inputs = {a.id, b.id};
  if (ta.same_shape(tb)) {
    n.value = ta;
    for (size_t i = 0; i < tb.numel(); ++i) n.value[i] -= tb[i];
    n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                    const std::vector<Tensor*>& gin) {
      if (gin[0])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i];
      if (gin[1])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[1])[i] -= g[i];
    };
  } else if (is_scalar(tb)) {
    n.value = ta;
    for (double& v : n.value.data) v -= tb[0];
    n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                    const std::vector<Tensor*>& gin) {
      if (gin[0])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i];
      if (gin[1])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[1])[0] -= g[i];
    };
  } else if (is_scalar(ta)) {
    n.value = tb;
    for (double& v : n.value.data) v = ta[0] - v;
    n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                    const std::vector<Tensor*>& gin) {
      if (gin[0])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[0] += g[i];
      if (gin[1])
        for (size_t i = 0; i < g.numel(); ++i) (*gin[1])[i] -= g[i];
    };
  } else {
    throw std::invalid_argument("sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  return Var{push(std::move(n), "sub")};
}

Var Tape::scale(Var a, double c) {
  check_open("scale");
  if (!std::isfinite(c)) throw std::invalid_argument("scale: non-finite multiplier");
  Node n;
  n.inputs = {a.id};
  n.value = val(a, "scale");
  for (double& v : n.value.data) v *= c;
  n.backward = [c](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                   const std::vector<Tensor*>& gin) {
    if (gin[0])
      for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += c * g[i];
  };
  return Var{push(std::move(n), "scale")};
}

Var Tape::relu(Var a) {
  check_open("relu");
  Node n;
  n.inputs = {a.id};
  n.value = val(a, "relu");
  for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
  n.backward = [](const Tensor&, const std::vector<const Tensor*>& vin, const Tensor& g,
                  const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& x = *vin[0];
    for (size_t i = 0; i < g.numel(); ++i)
      if (x[i] > 0.0) (*gin[0])[i] += g[i];
  };
  return Var{push(std::move(n), "relu")};
}

Var Tape::clamp(Var a, double lo, double hi) {
  check_open("clamp");
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  Node n;
  n.inputs = {a.id};
  n.value = val(a, "clamp");
  for (double& v : n.value.data) v = std::min(hi, std::max(lo, v));
  n.backward = [lo, hi](const Tensor&, const std::vector<const Tensor*>& vin, const Tensor& g,
                        const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& x = *vin[0];
    for (size_t i = 0; i < g.numel(); ++i)
      if (x[i] >= lo && x[i] <= hi) (*gin[0])[i] += g[i];
  };
  return Var{push(std::move(n), "clamp")};
}

Var Tape::sign(Var a) {
  check_open("sign");
  Node n;
  n.inputs = {a.id};
  n.value = val(a, "sign");
  for (double& v : n.value.data) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  // piecewise constant: zero gradient everywhere
  n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor&,
                  const std::vector<Tensor*>&) {};
  return Var{push(std::move(n), "sign")};
}

Var Tape::channel_scale(Var a, std::vector<double> mult) {
  check_open("channel_scale");
  const Tensor& ta = val(a, "channel_scale");
  if (ta.rank() < 2)
    throw std::invalid_argument("channel_scale: rank must be >= 2, got " + ta.shape_str());
  int channels = ta.dim(1);
  if (static_cast<int>(mult.size()) != channels)
    throw std::invalid_argument("channel_scale: " + std::to_string(mult.size()) +
                                " multipliers for " + std::to_string(channels) + " channels");
  for (double m : mult)
    if (!std::isfinite(m)) throw std::invalid_argument("channel_scale: non-finite multiplier");
  size_t inner = ta.numel() / static_cast<size_t>(ta.dim(0)) / static_cast<size_t>(channels);
  Node n;
  n.inputs = {a.id};
  n.value = ta;
  size_t idx = 0;
  for (int b = 0; b < ta.dim(0); ++b)
    for (int c = 0; c < channels; ++c)
      for (size_t i = 0; i < inner; ++i, ++idx) n.value[idx] *= mult[static_cast<size_t>(c)];
  n.backward = [mult, inner, channels](const Tensor&, const std::vector<const Tensor*>&,
                                       const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    size_t idx = 0;
    int batch = g.dim(0);
    for (int b = 0; b < batch; ++b)
      for (int c = 0; c < channels; ++c)
        for (size_t i = 0; i < inner; ++i, ++idx)
          (*gin[0])[idx] += mult[static_cast<size_t>(c)] * g[idx];
  };
  return Var{push(std::move(n), "channel_scale")};
}

Var Tape::sum(Var a) {
  check_open("sum");
  const Tensor& ta = val(a, "sum");
  double s = 0.0;
  for (double v : ta.data) s += v;
  Node n;
  n.inputs = {a.id};
  n.value = Tensor::scalar(s);
  n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                  const std::vector<Tensor*>& gin) {
    if (gin[0])
      for (double& v : gin[0]->data) v += g[0];
  };
  return Var{push(std::move(n), "sum")};
}

Var Tape::l1_distance(Var a, Var b) {
  check_open("l1_distance");
  const Tensor& ta = val(a, "l1_distance");
  const Tensor& tb = val(b, "l1_distance");
  require_same_shape(ta, tb, "l1_distance");
  double s = 0.0;
  for (size_t i = 0; i < ta.numel(); ++i) s += std::abs(ta[i] - tb[i]);
  Node n;
  n.inputs = {a.id, b.id};
  n.value = Tensor::scalar(s);
  n.backward = [](const Tensor&, const std::vector<const Tensor*>& vin, const Tensor& g,
                  const std::vector<Tensor*>& gin) {
    const Tensor& x = *vin[0];
    const Tensor& y = *vin[1];
    for (size_t i = 0; i < x.numel(); ++i) {
      double d = x[i] - y[i];
      double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (gin[0]) (*gin[0])[i] += g[0] * sgn;
      if (gin[1]) (*gin[1])[i] -= g[0] * sgn;
    }
  };
  return Var{push(std::move(n), "l1_distance")};
}

Var Tape::l2_norm_squared(Var a) {
  check_open("l2_norm_squared");
  const Tensor& ta = val(a, "l2_norm_squared");
  double s = 0.0;
  for (double v : ta.data) s += v * v;
  Node n;
  n.inputs = {a.id};
  n.value = Tensor::scalar(s);
  n.backward = [](const Tensor&, const std::vector<const Tensor*>& vin, const Tensor& g,
                  const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& x = *vin[0];
    for (size_t i = 0; i < x.numel(); ++i) (*gin[0])[i] += 2.0 * x[i] * g[0];
  };
  return Var{push(std::move(n), "l2_norm_squared")};
}

Var Tape::matmul(Var a, Var b) {
  check_open("matmul");
  const Tensor& ta = val(a, "matmul");
  const Tensor& tb = val(b, "matmul");
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + ta.shape_str() + " vs " +
                                tb.shape_str());
  int m = ta.dim(0), k = ta.dim(1), p = tb.dim(1);
  Node n;
  n.inputs = {a.id, b.id};
  n.value = Tensor({m, p});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < p; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += ta[size_t(i) * k + t] * tb[size_t(t) * p + j];
      n.value[size_t(i) * p + j] = acc;
    }
  n.backward = [m, k, p](const Tensor&, const std::vector<const Tensor*>& vin, const Tensor& g,
                         const std::vector<Tensor*>& gin) {
    const Tensor& x = *vin[0];
    const Tensor& y = *vin[1];
    if (gin[0])
      for (int i = 0; i < m; ++i)
        for (int t = 0; t < k; ++t) {
          double acc = 0.0;
          for (int j = 0; j < p; ++j) acc += g[size_t(i) * p + j] * y[size_t(t) * p + j];
          (*gin[0])[size_t(i) * k + t] += acc;
        }
    if (gin[1])
      for (int t = 0; t < k; ++t)
        for (int j = 0; j < p; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += x[size_t(i) * k + t] * g[size_t(i) * p + j];
          (*gin[1])[size_t(t) * p + j] += acc;
        }
  };
  return Var{push(std::move(n), "matmul")};
}

Var Tape::dense(Var x, Var w, Var b) {
  check_open("dense");
  const Tensor& tx = val(x, "dense");
  const Tensor& tw = val(w, "dense");
  const Tensor& tb = val(b, "dense");
  if (tx.rank() != 2 || tw.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tw.dim(1) ||
      tw.dim(0) != tb.dim(0))
    throw std::invalid_argument("dense: incompatible shapes x=" + tx.shape_str() +
                                " w=" + tw.shape_str() + " b=" + tb.shape_str());
  int batch = tx.dim(0), in = tx.dim(1), out = tw.dim(0);
  Node n;
  n.inputs = {x.id, w.id, b.id};
  n.value = Tensor({batch, out});
  for (int i = 0; i < batch; ++i)
    for (int o = 0; o < out; ++o) {
      double acc = tb[size_t(o)];
      const double* xr = tx.data.data() + size_t(i) * in;
      const double* wr = tw.data.data() + size_t(o) * in;
      for (int t = 0; t < in; ++t) acc += xr[t] * wr[t];
      n.value[size_t(i) * out + o] = acc;
    }
  n.backward = [batch, in, out](const Tensor&, const std::vector<const Tensor*>& vin,
                                const Tensor& g, const std::vector<Tensor*>& gin) {
    const Tensor& tx = *vin[0];
    const Tensor& tw = *vin[1];
    if (gin[0])
      for (int i = 0; i < batch; ++i)
        for (int t = 0; t < in; ++t) {
          double acc = 0.0;
          for (int o = 0; o < out; ++o) acc += g[size_t(i) * out + o] * tw[size_t(o) * in + t];
          (*gin[0])[size_t(i) * in + t] += acc;
        }
    if (gin[1])
      for (int o = 0; o < out; ++o)
        for (int t = 0; t < in; ++t) {
          double acc = 0.0;
          for (int i = 0; i < batch; ++i) acc += tx[size_t(i) * in + t] * g[size_t(i) * out + o];
          (*gin[1])[size_t(o) * in + t] += acc;
        }
    if (gin[2])
      for (int o = 0; o < out; ++o) {
        double acc = 0.0;
        for (int i = 0; i < batch; ++i) acc += g[size_t(i) * out + o];
        (*gin[2])[size_t(o)] += acc;
      }
  };
  return Var{push(std::move(n), "dense")};
}

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
  check_open("conv2d");
  const Tensor& tx = val(x, "conv2d");
  const Tensor& tw = val(w, "conv2d");
  const Tensor& tb = val(b, "conv2d");
  if (tx.rank() != 4 || tw.rank() != 4 || tb.rank() != 1)
    throw std::invalid_argument("conv2d: expected x rank 4, w rank 4, b rank 1, got x=" +
                                tx.shape_str() + " w=" + tw.shape_str() + " b=" + tb.shape_str());
  if (tx.dim(1) != tw.dim(1) || tw.dim(0) != tb.dim(0))
    throw std::invalid_argument("conv2d: incompatible shapes x=" + tx.shape_str() +
                                " w=" + tw.shape_str() + " b=" + tb.shape_str());
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >=1, pad >=0");
  const int batch = tx.dim(0), ic = tx.dim(1), h = tx.dim(2), wd = tx.dim(3);
  const int oc = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw std::invalid_argument("conv2d: kernel " + tw.shape_str() + " larger than padded input " +
                                tx.shape_str());
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;

  Node n;
  n.inputs = {x.id, w.id, b.id};
  n.value = Tensor({batch, oc, oh, ow});
  // stride-1 kernels reduce to shifted contiguous row operations; other strides
  // fall back to the plain per-pixel loop
  {
    const double* xp = tx.data.data();
    const double* wp = tw.data.data();
    double* yp = n.value.data.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int ni = 0; ni < batch; ++ni)
      for (int o = 0; o < oc; ++o) {
        double* yplane = yp + (size_t(ni) * oc + o) * oh * ow;
        const double bias = tb[size_t(o)];
        for (int i = 0; i < oh * ow; ++i) yplane[i] = bias;
        if (stride == 1 && kh == 3 && kw == 3 && pad == 1 && h >= 2 && wd >= 2) {
          for (int c = 0; c < ic; ++c)
            conv3x3_forward_plane(yplane, xp + (size_t(ni) * ic + c) * h * wd,
                                  wp + (size_t(o) * ic + c) * 9, h, wd);
        } else if (stride == 1) {
          for (int c = 0; c < ic; ++c) {
            const double* xc = xp + (size_t(ni) * ic + c) * h * wd;
            const double* wc = wp + (size_t(o) * ic + c) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
              const int y_lo = std::max(0, pad - ky);
              const int y_hi = std::min(oh, h + pad - ky);
              for (int kx = 0; kx < kw; ++kx) {
                const double wv = wc[size_t(ky) * kw + kx];
                if (wv == 0.0) continue;
                const int x_lo = std::max(0, pad - kx);
                const int x_hi = std::min(ow, wd + pad - kx);
                for (int y0 = y_lo; y0 < y_hi; ++y0) {
                  double* __restrict__ yrow = yplane + size_t(y0) * ow;
                  const double* __restrict__ xrow = xc + size_t(y0 - pad + ky) * wd + (kx - pad);
                  for (int x0 = x_lo; x0 < x_hi; ++x0) yrow[x0] += wv * xrow[x0];
                }
              }
            }
          }
        } else {
          for (int y0 = 0; y0 < oh; ++y0)
            for (int x0 = 0; x0 < ow; ++x0) {
              double acc = 0.0;
              const int ih0 = y0 * stride - pad;
              const int iw0 = x0 * stride - pad;
              for (int c = 0; c < ic; ++c) {
                const double* xc = xp + (size_t(ni) * ic + c) * h * wd;
                const double* wc = wp + (size_t(o) * ic + c) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = ih0 + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = iw0 + kx;
                    if (ix < 0 || ix >= wd) continue;
                    acc += xc[size_t(iy) * wd + ix] * wc[size_t(ky) * kw + kx];
                  }
                }
              }
              yplane[size_t(y0) * ow + x0] += acc;
            }
        }
      }
  }
  n.backward = [batch, ic, h, wd, oc, kh, kw, oh, ow, stride, pad](
                   const Tensor&, const std::vector<const Tensor*>& vin, const Tensor& g,
                   const std::vector<Tensor*>& gin) {
    const Tensor& tx = *vin[0];
    const Tensor& tw = *vin[1];
    const double* gp = g.data.data();
    if (gin[0]) {
      double* dx = gin[0]->data.data();
      const double* wp = tw.data.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
      for (int ni = 0; ni < batch; ++ni)
        for (int c = 0; c < ic; ++c) {
          double* dxc = dx + (size_t(ni) * ic + c) * h * wd;
          for (int o = 0; o < oc; ++o) {
            const double* grow0 = gp + (size_t(ni) * oc + o) * oh * ow;
            const double* wc = wp + (size_t(o) * ic + c) * kh * kw;
            if (stride == 1 && kh == 3 && kw == 3 && pad == 1 && h >= 2 && wd >= 2) {
              conv3x3_dx_plane(dxc, grow0, wc, h, wd);
            } else if (stride == 1) {
              for (int ky = 0; ky < kh; ++ky) {
                const int y_lo = std::max(0, pad - ky);
                const int y_hi = std::min(oh, h + pad - ky);
                for (int kx = 0; kx < kw; ++kx) {
                  const double wv = wc[size_t(ky) * kw + kx];
                  if (wv == 0.0) continue;
                  const int x_lo = std::max(0, pad - kx);
                  const int x_hi = std::min(ow, wd + pad - kx);
                  for (int y0 = y_lo; y0 < y_hi; ++y0) {
                    const double* __restrict__ grow = grow0 + size_t(y0) * ow;
                    double* __restrict__ dxrow = dxc + size_t(y0 - pad + ky) * wd + (kx - pad);
                    for (int x0 = x_lo; x0 < x_hi; ++x0) dxrow[x0] += wv * grow[x0];
                  }
                }
              }
            } else {
              for (int y0 = 0; y0 < oh; ++y0)
                for (int x0 = 0; x0 < ow; ++x0) {
                  const double gv = grow0[size_t(y0) * ow + x0];
                  if (gv == 0.0) continue;
                  for (int ky = 0; ky < kh; ++ky) {
                    const int iy = y0 * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                      const int ix = x0 * stride - pad + kx;
                      if (ix < 0 || ix >= wd) continue;
                      dxc[size_t(iy) * wd + ix] += gv * wc[size_t(ky) * kw + kx];
                    }
                  }
                }
            }
          }
        }
    }
    if (gin[1]) {
      double* dw = gin[1]->data.data();
      const double* xp = tx.data.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int o = 0; o < oc; ++o)
        for (int ni = 0; ni < batch; ++ni) {
          const double* grow0 = gp + (size_t(ni) * oc + o) * oh * ow;
          for (int c = 0; c < ic; ++c) {
            const double* xc = xp + (size_t(ni) * ic + c) * h * wd;
            double* wc = dw + (size_t(o) * ic + c) * kh * kw;
            if (stride == 1 && kh == 3 && kw == 3 && pad == 1 && h >= 2 && wd >= 2) {
              conv3x3_dw_plane(wc, grow0, xc, h, wd);
            } else if (stride == 1) {
              for (int ky = 0; ky < kh; ++ky) {
                const int y_lo = std::max(0, pad - ky);
                const int y_hi = std::min(oh, h + pad - ky);
                for (int kx = 0; kx < kw; ++kx) {
                  const int x_lo = std::max(0, pad - kx);
                  const int x_hi = std::min(ow, wd + pad - kx);
                  double acc = 0.0;
                  for (int y0 = y_lo; y0 < y_hi; ++y0) {
                    const double* __restrict__ grow = grow0 + size_t(y0) * ow;
                    const double* __restrict__ xrow = xc + size_t(y0 - pad + ky) * wd + (kx - pad);
                    for (int x0 = x_lo; x0 < x_hi; ++x0) acc += grow[x0] * xrow[x0];
                  }
                  wc[size_t(ky) * kw + kx] += acc;
                }
              }
            } else {
              for (int y0 = 0; y0 < oh; ++y0)
                for (int x0 = 0; x0 < ow; ++x0) {
                  const double gv = grow0[size_t(y0) * ow + x0];
                  if (gv == 0.0) continue;
                  for (int ky = 0; ky < kh; ++ky) {
                    const int iy = y0 * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                      const int ix = x0 * stride - pad + kx;
                      if (ix < 0 || ix >= wd) continue;
                      wc[size_t(ky) * kw + kx] += gv * xc[size_t(iy) * wd + ix];
                    }
                  }
                }
            }
          }
        }
    }
    if (gin[2]) {
      double* db = gin[2]->data.data();
      for (int o = 0; o < oc; ++o) {
        double acc = 0.0;
        for (int ni = 0; ni < batch; ++ni) {
          const double* grow = gp + (size_t(ni) * oc + o) * oh * ow;
          for (int i = 0; i < oh * ow; ++i) acc += grow[i];
        }
        db[o] += acc;
      }
    }
  };
  return Var{push(std::move(n), "conv2d")};
}

Var Tape::maxpool2d(Var a, int k) {
  check_open("maxpool2d");
  const Tensor& ta = val(a, "maxpool2d");
  if (ta.rank() != 4)
    throw std::invalid_argument("maxpool2d: expected rank 4, got " + ta.shape_str());
  if (k < 1) throw std::invalid_argument("maxpool2d: window must be >= 1");
  const int batch = ta.dim(0), c = ta.dim(1), h = ta.dim(2), w = ta.dim(3);
  if (h < k || w < k)
    throw std::invalid_argument("maxpool2d: window " + std::to_string(k) + " exceeds input " +
                                ta.shape_str());
  const int oh = h / k, ow = w / k;
  Node n;
  n.inputs = {a.id};
  n.value = Tensor({batch, c, oh, ow});
  std::vector<int64_t> argmax(n.value.numel());
  const double* xp = ta.data.data();
  for (int ni = 0; ni < batch; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const size_t plane = (size_t(ni) * c + ci) * h * w;
      const size_t oplane = (size_t(ni) * c + ci) * oh * ow;
      for (int y0 = 0; y0 < oh; ++y0)
        for (int x0 = 0; x0 < ow; ++x0) {
          double best = -1e300;
          int64_t best_idx = -1;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const size_t idx = plane + size_t(y0 * k + ky) * w + (x0 * k + kx);
              if (xp[idx] > best) {  // strict: first maximal element wins
                best = xp[idx];
                best_idx = static_cast<int64_t>(idx);
              }
            }
          n.value[oplane + size_t(y0) * ow + x0] = best;
          argmax[oplane + size_t(y0) * ow + x0] = best_idx;
        }
    }
  n.backward = [argmax = std::move(argmax)](const Tensor&, const std::vector<const Tensor*>&,
                                            const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[static_cast<size_t>(argmax[i])] += g[i];
  };
  return Var{push(std::move(n), "maxpool2d")};
}

Var Tape::global_avg_pool(Var a) {
  check_open("global_avg_pool");
  const Tensor& ta = val(a, "global_avg_pool");
  if (ta.rank() != 4)
    throw std::invalid_argument("global_avg_pool: expected rank 4, got " + ta.shape_str());
  const int batch = ta.dim(0), c = ta.dim(1);
  const size_t plane = ta.numel() / static_cast<size_t>(batch) / static_cast<size_t>(c);
  Node n;
  n.inputs = {a.id};
  n.value = Tensor({batch, c});
  for (int ni = 0; ni < batch; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* p = ta.data.data() + (size_t(ni) * c + ci) * plane;
      double acc = 0.0;
      for (size_t i = 0; i < plane; ++i) acc += p[i];
      n.value[size_t(ni) * c + ci] = acc / static_cast<double>(plane);
    }
  n.backward = [batch, c, plane](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                                 const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const double inv = 1.0 / static_cast<double>(plane);
    for (int ni = 0; ni < batch; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        double* p = gin[0]->data.data() + (size_t(ni) * c + ci) * plane;
        const double gv = g[size_t(ni) * c + ci] * inv;
        for (size_t i = 0; i < plane; ++i) p[i] += gv;
      }
  };
  return Var{push(std::move(n), "global_avg_pool")};
}

Var Tape::flatten(Var a) {
  check_open("flatten");
  const Tensor& ta = val(a, "flatten");
  if (ta.rank() < 2)
    throw std::invalid_argument("flatten: expected rank >= 2, got " + ta.shape_str());
  const int batch = ta.dim(0);
  const int m = static_cast<int>(ta.numel() / static_cast<size_t>(batch));
  Node n;
  n.inputs = {a.id};
  n.value = Tensor({batch, m}, ta.data);
  n.backward = [](const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                  const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i];
  };
  return Var{push(std::move(n), "flatten")};
}

Var Tape::softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  check_open("softmax_cross_entropy");
  const Tensor& tl = val(logits, "softmax_cross_entropy");
  int batch, classes;
  if (tl.rank() == 1) {
    batch = 1;
    classes = tl.dim(0);
  } else if (tl.rank() == 2) {
    batch = tl.dim(0);
    classes = tl.dim(1);
  } else {
    throw std::invalid_argument("softmax_cross_entropy: expected rank 1 or 2 logits, got " +
                                tl.shape_str());
  }
  if (static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                  " out of range [0," + std::to_string(classes) + ")");
  // stable log-softmax; keep probabilities for the backward pass
  std::vector<double> probs(tl.numel());
  double total = 0.0;
  for (int i = 0; i < batch; ++i) {
    const double* row = tl.data.data() + size_t(i) * classes;
    double m = row[0];
    for (int j = 1; j < classes; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int j = 0; j < classes; ++j) z += std::exp(row[j] - m);
    const double lse = m + std::log(z);
    total += lse - row[labels[size_t(i)]];
    for (int j = 0; j < classes; ++j)
      probs[size_t(i) * classes + j] = std::exp(row[j] - m) / z;
  }
  Node n;
  n.inputs = {logits.id};
  n.value = Tensor::scalar(total);
  n.backward = [probs = std::move(probs), labels, batch, classes](
                   const Tensor&, const std::vector<const Tensor*>&, const Tensor& g,
                   const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (int i = 0; i < batch; ++i)
      for (int j = 0; j < classes; ++j) {
        double d = probs[size_t(i) * classes + j] - (j == labels[size_t(i)] ? 1.0 : 0.0);
        (*gin[0])[size_t(i) * classes + j] += g[0] * d;
      }
  };
  return Var{push(std::move(n), "softmax_cross_entropy")};
}

std::vector<Tensor> Tape::backward(Var loss, std::span<const Var> wrt) {
  if (consumed_) throw std::runtime_error("backward: tape already consumed");
  const Tensor& tl = val(loss, "backward");
  if (tl.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + tl.shape_str());
  for (Var v : wrt) val(v, "backward");  // validates "target not on tape"
  consumed_ = true;

  const size_t count = nodes_.size();
  // a node needs a gradient if some wrt target is reachable below it
  std::vector<char> needs(count, 0);
  for (Var v : wrt) needs[static_cast<size_t>(v.id)] = 1;
  for (size_t i = 0; i < count; ++i) {
    if (needs[i]) continue;
    for (int in : nodes_[i].inputs)
      if (needs[static_cast<size_t>(in)]) {
        needs[i] = 1;
        break;
      }
  }

  std::vector<Tensor> grads(count);
  std::vector<char> has_grad(count, 0);
  auto grad_of = [&](int id) -> Tensor* {
    if (!has_grad[static_cast<size_t>(id)]) {
      grads[static_cast<size_t>(id)] = Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape);
      has_grad[static_cast<size_t>(id)] = 1;
    }
    return &grads[static_cast<size_t>(id)];
  };

  if (needs[static_cast<size_t>(loss.id)]) {
    grad_of(loss.id)->data[0] = 1.0;
    std::vector<const Tensor*> vin;
    std::vector<Tensor*> gin;
    for (int u = loss.id; u >= 0; --u) {
      const Node& node = nodes_[static_cast<size_t>(u)];
      if (!has_grad[static_cast<size_t>(u)] || !node.backward) continue;
      vin.clear();
      gin.clear();
      for (int in : node.inputs) {
        vin.push_back(&nodes_[static_cast<size_t>(in)].value);
        gin.push_back(needs[static_cast<size_t>(in)] ? grad_of(in) : nullptr);
      }
      node.backward(node.value, vin, grads[static_cast<size_t>(u)], gin);
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (Var v : wrt) {
    if (has_grad[static_cast<size_t>(v.id)]) {
      ensure_finite(grads[static_cast<size_t>(v.id)], "backward");
      result.push_back(std::move(grads[static_cast<size_t>(v.id)]));
      has_grad[static_cast<size_t>(v.id)] = 0;  // duplicated targets get fresh zeros + move safety
      grads[static_cast<size_t>(v.id)] = Tensor();
    } else {
      result.push_back(Tensor::zeros(nodes_[static_cast<size_t>(v.id)].value.shape));
    }
  }
  return result;
}

Tensor Tape::backward_one(Var loss, Var wrt) {
  std::vector<Var> targets{wrt};
  return backward(loss, targets)[0];
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var loss = f(tape, x);
    if (tape.value(loss).numel() != 1)
      throw std::invalid_argument("grad_check: function must be scalar-valued");
    analytic = tape.backward_one(loss, x);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Var x = tape.leaf(p);
    Var loss = f(tape, x);
    return tape.value(loss)[0];
  };
  double worst = 0.0;
  Tensor probe = point;
  for (size_t i = 0; i < point.numel(); ++i) {
    probe.data[i] = point[i] + step;
    const double fp = eval(probe);
    probe.data[i] = point[i] - step;
    const double fm = eval(probe);
    probe.data[i] = point[i];
    const double fd = (fp - fm) / (2.0 * step);
    if (!std::isfinite(fd)) throw std::runtime_error("grad_check: non-finite finite difference");
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace nsns
