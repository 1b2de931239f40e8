#include "cascade/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cascade/errors.hpp"
#include "json_internal.hpp"

namespace cascade {

NetworkSpec NetworkSpec::reference() {
  NetworkSpec s;
  s.in_channels = 3;
  s.in_px = 32;
  s.layers = {LayerSpec::conv(16, 5), LayerSpec::relu(),        LayerSpec::maxpool(2, 2),
              LayerSpec::conv(32, 5), LayerSpec::relu(),        LayerSpec::maxpool(2, 2),
              LayerSpec::local(16, 3), LayerSpec::relu(),       LayerSpec::dense(64, true),
              LayerSpec::relu(),       LayerSpec::dense(2),     LayerSpec::softmax()};
  return s;
}

std::vector<std::array<int, 3>> layer_output_shapes(const NetworkSpec& spec) {
  if (spec.in_channels < 1 || spec.in_px < 1) throw ValidationError("network: bad input shape");
  if (spec.layers.empty()) throw ValidationError("network: no layers");
  std::vector<std::array<int, 3>> shapes;
  int c = spec.in_channels, h = spec.in_px, w = spec.in_px;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layers[l];
    const std::string where = "network layer " + std::to_string(l) + ": ";
    switch (layer.kind) {
      case LayerKind::kConv:
      case LayerKind::kLocal:
        if (layer.channels < 1 || layer.kernel < 1) throw ValidationError(where + "bad channels/kernel");
        if (h < layer.kernel || w < layer.kernel) throw ValidationError(where + "kernel exceeds input");
        c = layer.channels;
        h = h - layer.kernel + 1;
        w = w - layer.kernel + 1;
        break;
      case LayerKind::kMaxPool:
        if (layer.kernel < 1 || layer.stride < 1) throw ValidationError(where + "bad pool window");
        if (h < layer.kernel || w < layer.kernel) throw ValidationError(where + "pool exceeds input");
        h = (h - layer.kernel) / layer.stride + 1;
        w = (w - layer.kernel) / layer.stride + 1;
        break;
      case LayerKind::kDense:
        if (layer.units < 1) throw ValidationError(where + "bad unit count");
        c = layer.units;
        h = w = 1;
        break;
      case LayerKind::kRelu:
      case LayerKind::kSoftmax:
        break;
    }
    if (layer.dropconnect && layer.kind != LayerKind::kDense)
      throw ValidationError(where + "DropConnect only applies to dense layers");
    shapes.push_back({c, h, w});
  }
  return shapes;
}

void validate_network(const NetworkSpec& spec) {
  const auto shapes = layer_output_shapes(spec);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const bool last = l + 1 == spec.layers.size();
    if ((spec.layers[l].kind == LayerKind::kSoftmax) != last)
      throw ValidationError("network: softmax must be the final layer and only the final layer");
  }
  const auto& out = shapes.back();
  if (out[0] * out[1] * out[2] != 2) throw ValidationError("network: final layer width must be 2");
}

namespace {

struct LayerParamSizes {
  std::size_t weights = 0, biases = 0;
};

std::vector<LayerParamSizes> param_sizes(const NetworkSpec& spec) {
  const auto shapes = layer_output_shapes(spec);
  std::vector<LayerParamSizes> out(spec.layers.size());
  int c = spec.in_channels, h = spec.in_px, w = spec.in_px;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layers[l];
    const auto& s = shapes[l];
    switch (layer.kind) {
      case LayerKind::kConv:
        out[l].weights = static_cast<std::size_t>(layer.channels) * c * layer.kernel * layer.kernel;
        out[l].biases = static_cast<std::size_t>(layer.channels);
        break;
      case LayerKind::kLocal:
        out[l].weights =
            static_cast<std::size_t>(layer.channels) * s[1] * s[2] * c * layer.kernel * layer.kernel;
        out[l].biases = static_cast<std::size_t>(layer.channels) * s[1] * s[2];
        break;
      case LayerKind::kDense:
        out[l].weights = static_cast<std::size_t>(layer.units) * c * h * w;
        out[l].biases = static_cast<std::size_t>(layer.units);
        break;
      default:
        break;
    }
    c = s[0];
    h = s[1];
    w = s[2];
  }
  return out;
}

template <typename T>
void validate_params(const ModelParamsT<T>& params) {
  validate_network(params.spec);
  const auto sizes = param_sizes(params.spec);
  if (params.weights.size() != sizes.size() || params.biases.size() != sizes.size())
    throw ValidationError("model: layer count mismatch between spec and parameters");
  for (std::size_t l = 0; l < sizes.size(); ++l)
    if (params.weights[l].size() != sizes[l].weights || params.biases[l].size() != sizes[l].biases)
      throw ValidationError("model: parameter sizes do not match layer " + std::to_string(l));
  if (!(params.dropconnect_keep > 0.0 && params.dropconnect_keep <= 1.0))
    throw ValidationError("model: keep probability must be in (0, 1]");
}

// Vectorizable poison scan: x * 0 is 0 for finite x and NaN for Inf/NaN, so
// the accumulator is NaN exactly when some element is non-finite.
template <typename T>
void check_finite(const TensorT<T>& t, std::size_t layer) {
  const T* __restrict p = t.data.data();
  T acc = 0;
  for (std::size_t i = 0; i < t.data.size(); ++i) acc += p[i] * T(0);
  if (std::isnan(acc))
    throw NonFiniteError("non-finite activation after layer " + std::to_string(layer));
}

// ---- layer kernels ------------------------------------------------------
//
// The convolutions run over a bias-initialized scratch plane of the INPUT
// width: out_pad[oy * iw + ox] += w * in[(oy + ky) * iw + (ox + kx)] is one
// contiguous span of length (oh - 1) * iw + ow for each kernel tap, which
// vectorizes fully (per-row loops of width ow ~ 10 do not). The k - 1
// rightmost columns of each scratch row are discarded when compacting to the
// real output. All tap reads stay inside the input plane because
// ow + k - 1 == iw.

template <typename T>
void conv_forward(const T* __restrict in, int ic, int ih, int iw, const T* __restrict w,
                  const T* __restrict b, int oc, int k, T* __restrict out, T* __restrict pad) {
  const int oh = ih - k + 1, ow = iw - k + 1;
  const int span = (oh - 1) * iw + ow;
  for (int o = 0; o < oc; ++o) {
    std::fill(pad, pad + span, b[o]);
    for (int i = 0; i < ic; ++i) {
      const T* plane = in + static_cast<std::size_t>(i) * ih * iw;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T wv = w[((static_cast<std::size_t>(o) * ic + i) * k + ky) * k + kx];
          const T* __restrict src = plane + static_cast<std::size_t>(ky) * iw + kx;
          for (int p = 0; p < span; ++p) pad[p] += wv * src[p];
        }
    }
    T* oplane = out + static_cast<std::size_t>(o) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      std::memcpy(oplane + static_cast<std::size_t>(oy) * ow, pad + static_cast<std::size_t>(oy) * iw,
                  static_cast<std::size_t>(ow) * sizeof(T));
  }
}

template <typename T>
void conv_backward(const T* __restrict in, int ic, int ih, int iw, const T* __restrict w, int oc,
                   int k, const T* __restrict gout, T* __restrict gw, T* __restrict gb,
                   T* __restrict gin, T* __restrict gpad) {
  const int oh = ih - k + 1, ow = iw - k + 1;
  const int span = (oh - 1) * iw + ow;
  for (int o = 0; o < oc; ++o) {
    const T* gplane = gout + static_cast<std::size_t>(o) * oh * ow;
    // Re-pad the output gradient (zeros in the pad columns) so the tap loops
    // below see the same linear layout as the forward pass.
    T acc = 0;
    std::fill(gpad, gpad + span, T(0));
    for (int oy = 0; oy < oh; ++oy) {
      const T* __restrict grow = gplane + static_cast<std::size_t>(oy) * ow;
      T* __restrict prow = gpad + static_cast<std::size_t>(oy) * iw;
      for (int ox = 0; ox < ow; ++ox) {
        prow[ox] = grow[ox];
        acc += grow[ox];
      }
    }
    gb[o] += acc;
    for (int i = 0; i < ic; ++i) {
      const T* plane = in + static_cast<std::size_t>(i) * ih * iw;
      T* dplane = gin != nullptr ? gin + static_cast<std::size_t>(i) * ih * iw : nullptr;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(o) * ic + i) * k + ky) * k + kx;
          const T* __restrict src = plane + static_cast<std::size_t>(ky) * iw + kx;
          T sum = 0;
          // the reduction pragma lets the compiler reassociate this float sum
          // into vector lanes; without openmp-simd it is ignored and the loop
          // stays scalar but correct
#pragma omp simd reduction(+ : sum)
          for (int p = 0; p < span; ++p) sum += gpad[p] * src[p];
          gw[widx] += sum;
          if (dplane != nullptr) {
            const T wv = w[widx];
            T* __restrict dst = dplane + static_cast<std::size_t>(ky) * iw + kx;
            const T* __restrict gp = gpad;
            for (int p = 0; p < span; ++p) dst[p] += wv * gp[p];
          }
        }
    }
  }
}

template <typename T>
void local_forward(const T* __restrict in, int ic, int ih, int iw, const T* __restrict w,
                   const T* __restrict b, int oc, int k, T* __restrict out) {
  const int oh = ih - k + 1, ow = iw - k + 1;
  std::size_t widx = 0;
  std::size_t oidx = 0;
  for (int m = 0; m < oc; ++m)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++oidx) {
        T acc = b[oidx];
        for (int i = 0; i < ic; ++i)
          for (int ky = 0; ky < k; ++ky) {
            const T* __restrict row = in + (static_cast<std::size_t>(i) * ih + oy + ky) * iw + ox;
            for (int kx = 0; kx < k; ++kx) acc += w[widx++] * row[kx];
          }
        out[oidx] = acc;
      }
}

template <typename T>
void local_backward(const T* __restrict in, int ic, int ih, int iw, const T* __restrict w, int oc,
                    int k, const T* __restrict gout, T* __restrict gw, T* __restrict gb,
                    T* __restrict gin) {
  const int oh = ih - k + 1, ow = iw - k + 1;
  std::size_t widx = 0;
  std::size_t oidx = 0;
  for (int m = 0; m < oc; ++m)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++oidx) {
        const T g = gout[oidx];
        gb[oidx] += g;
        for (int i = 0; i < ic; ++i)
          for (int ky = 0; ky < k; ++ky) {
            const std::size_t base = (static_cast<std::size_t>(i) * ih + oy + ky) * iw + ox;
            for (int kx = 0; kx < k; ++kx, ++widx) {
              gw[widx] += g * in[base + kx];
              if (gin != nullptr) gin[base + kx] += g * w[widx];
            }
          }
      }
}

template <typename T>
void pool_forward(const T* __restrict in, int c, int ih, int iw, int k, int stride,
                  T* __restrict out, std::int32_t* __restrict src) {
  const int oh = (ih - k) / stride + 1, ow = (iw - k) / stride + 1;
  std::size_t oidx = 0;
  for (int ch = 0; ch < c; ++ch) {
    const T* __restrict plane = in + static_cast<std::size_t>(ch) * ih * iw;
    const std::size_t plane_base = static_cast<std::size_t>(ch) * ih * iw;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++oidx) {
        int best_y = oy * stride, best_x = ox * stride;
        T best = plane[static_cast<std::size_t>(best_y) * iw + best_x];
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int y = oy * stride + ky, x = ox * stride + kx;
            const T v = plane[static_cast<std::size_t>(y) * iw + x];
            if (v > best) {  // ties keep the first position in scan order
              best = v;
              best_y = y;
              best_x = x;
            }
          }
        out[oidx] = best;
        src[oidx] = static_cast<std::int32_t>(plane_base + static_cast<std::size_t>(best_y) * iw + best_x);
      }
  }
}

template <typename T>
void dense_forward(const T* __restrict x, int in, const T* __restrict w, const T* __restrict b,
                   int units, const std::uint8_t* __restrict mask, T eval_scale, T* __restrict out) {
  for (int u = 0; u < units; ++u) {
    const T* __restrict wrow = w + static_cast<std::size_t>(u) * in;
    T acc = 0;
    if (mask != nullptr) {
      const std::uint8_t* __restrict mrow = mask + static_cast<std::size_t>(u) * in;
#pragma omp simd reduction(+ : acc)
      for (int i = 0; i < in; ++i) acc += static_cast<T>(mrow[i]) * wrow[i] * x[i];
    } else {
#pragma omp simd reduction(+ : acc)
      for (int i = 0; i < in; ++i) acc += wrow[i] * x[i];
      acc *= eval_scale;
    }
    out[u] = acc + b[u];
  }
}

template <typename T>
void dense_backward(const T* __restrict x, int in, const T* __restrict w, int units,
                    const std::uint8_t* __restrict mask, T eval_scale, const T* __restrict gout,
                    T* __restrict gw, T* __restrict gb, T* __restrict gin) {
  if (gin != nullptr) std::fill(gin, gin + in, T(0));
  for (int u = 0; u < units; ++u) {
    const T g = gout[u];
    gb[u] += g;
    const T* __restrict wrow = w + static_cast<std::size_t>(u) * in;
    T* __restrict gwrow = gw + static_cast<std::size_t>(u) * in;
    if (mask != nullptr) {
      const std::uint8_t* __restrict mrow = mask + static_cast<std::size_t>(u) * in;
      if (gin != nullptr) {
        for (int i = 0; i < in; ++i) {
          const T m = static_cast<T>(mrow[i]);
          gwrow[i] += m * g * x[i];
          gin[i] += m * g * wrow[i];
        }
      } else {
        for (int i = 0; i < in; ++i) gwrow[i] += static_cast<T>(mrow[i]) * g * x[i];
      }
    } else {
      for (int i = 0; i < in; ++i) {
        gwrow[i] += g * eval_scale * x[i];
        if (gin != nullptr) gin[i] += g * eval_scale * wrow[i];
      }
    }
  }
}

}  // namespace

template <typename T>
ModelParamsT<T> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  validate_network(spec);
  const auto sizes = param_sizes(spec);
  const auto shapes = layer_output_shapes(spec);

  ModelParamsT<T> params;
  params.spec = spec;
  params.seed = seed;
  params.weights.resize(spec.layers.size());
  params.biases.resize(spec.layers.size());

  Rng rng(seed);
  int c = spec.in_channels, h = spec.in_px, w = spec.in_px;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layers[l];
    std::size_t fan_in = 0;
    if (layer.kind == LayerKind::kConv || layer.kind == LayerKind::kLocal)
      fan_in = static_cast<std::size_t>(c) * layer.kernel * layer.kernel;
    else if (layer.kind == LayerKind::kDense)
      fan_in = static_cast<std::size_t>(c) * h * w;
    params.weights[l].resize(sizes[l].weights);
    params.biases[l].assign(sizes[l].biases, T(0));
    if (fan_in > 0) {
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (T& x : params.weights[l]) x = static_cast<T>(sd * rng.normal());
    }
    c = shapes[l][0];
    h = shapes[l][1];
    w = shapes[l][2];
  }
  return params;
}

template <typename T>
void forward(const ModelParamsT<T>& params, const TensorT<T>& batch, Mode mode, WorkspaceT<T>& ws,
             Rng* rng) {
  validate_params(params);
  const NetworkSpec& spec = params.spec;
  if (batch.n < 1 || batch.c != spec.in_channels || batch.h != spec.in_px || batch.w != spec.in_px)
    throw ValidationError("forward: batch shape does not match the network input");
  if (batch.data.size() != batch.numel()) throw ValidationError("forward: tensor size mismatch");

  const auto shapes = layer_output_shapes(spec);
  const std::size_t L = spec.layers.size();
  ws.acts.resize(L + 1);
  ws.pool_src.resize(L);
  ws.keep_mask.resize(L);
  ws.acts[0] = batch;
  const int B = batch.n;
  std::vector<T> scratch;

  for (std::size_t l = 0; l < L; ++l) {
    const LayerSpec& layer = spec.layers[l];
    const TensorT<T>& in = ws.acts[l];
    TensorT<T>& out = ws.acts[l + 1];
    out.resize(B, shapes[l][0], shapes[l][1], shapes[l][2]);

    switch (layer.kind) {
      case LayerKind::kConv:
        scratch.resize(static_cast<std::size_t>(in.h) * in.w);
        for (int n = 0; n < B; ++n)
          conv_forward(in.example(n), in.c, in.h, in.w, params.weights[l].data(),
                       params.biases[l].data(), layer.channels, layer.kernel, out.example(n),
                       scratch.data());
        break;
      case LayerKind::kLocal:
        for (int n = 0; n < B; ++n)
          local_forward(in.example(n), in.c, in.h, in.w, params.weights[l].data(),
                        params.biases[l].data(), layer.channels, layer.kernel, out.example(n));
        break;
      case LayerKind::kMaxPool: {
        ws.pool_src[l].resize(out.numel());
        const std::size_t per = static_cast<std::size_t>(out.c) * out.h * out.w;
        for (int n = 0; n < B; ++n)
          pool_forward(in.example(n), in.c, in.h, in.w, layer.kernel, layer.stride, out.example(n),
                       ws.pool_src[l].data() + per * n);
        break;
      }
      case LayerKind::kRelu:
        for (std::size_t i = 0; i < in.data.size(); ++i)
          out.data[i] = in.data[i] > T(0) ? in.data[i] : T(0);
        break;
      case LayerKind::kDense: {
        const int in_count = in.c * in.h * in.w;
        const std::uint8_t* mask = nullptr;
        T eval_scale = T(1);
        if (layer.dropconnect) {
          if (mode == Mode::kTrain) {
            auto& m = ws.keep_mask[l];
            const std::size_t need = static_cast<std::size_t>(B) * layer.units * in_count;
            if (rng != nullptr) {
              m.resize(need);
              // Four 16-bit draws per PRNG call; keep = 1 passes every chunk
              // because the threshold 65536 exceeds any 16-bit value.
              const std::uint32_t thr =
                  static_cast<std::uint32_t>(params.dropconnect_keep * 65536.0);
              for (std::size_t i = 0; i < need; i += 4) {
                const std::uint64_t r = rng->next();
                const std::size_t lim = std::min<std::size_t>(4, need - i);
                for (std::size_t j = 0; j < lim; ++j)
                  m[i + j] = static_cast<std::uint32_t>((r >> (16 * j)) & 0xffff) < thr ? 1 : 0;
              }
            } else if (m.size() != need) {
              throw ValidationError("forward: no DropConnect mask to reuse; pass an rng");
            }
            mask = m.data();
          } else {
            eval_scale = static_cast<T>(params.dropconnect_keep);
          }
        }
        for (int n = 0; n < B; ++n)
          dense_forward(in.example(n), in_count, params.weights[l].data(), params.biases[l].data(),
                        layer.units,
                        mask != nullptr ? mask + static_cast<std::size_t>(n) * layer.units * in_count
                                        : nullptr,
                        eval_scale, out.example(n));
        break;
      }
      case LayerKind::kSoftmax: {
        const int width = in.c * in.h * in.w;
        for (int n = 0; n < B; ++n) {
          const T* x = in.example(n);
          T* y = out.example(n);
          T m = x[0];
          for (int i = 1; i < width; ++i) m = std::max(m, x[i]);
          T sum = 0;
          for (int i = 0; i < width; ++i) {
            y[i] = std::exp(x[i] - m);
            sum += y[i];
          }
          for (int i = 0; i < width; ++i) y[i] /= sum;
        }
        break;
      }
    }
    check_finite(out, l);
  }
}

template <typename T>
double mean_cross_entropy(const TensorT<T>& probs, const std::vector<int>& labels) {
  const int width = probs.c * probs.h * probs.w;
  if (probs.n != static_cast<int>(labels.size()))
    throw ValidationError("cross entropy: batch/label count mismatch");
  double loss = 0.0;
  for (int n = 0; n < probs.n; ++n) {
    const int y = labels[n];
    if (y < 0 || y >= width) throw ValidationError("cross entropy: label out of range");
    loss -= std::log(static_cast<double>(probs.example(n)[y]));
  }
  return loss / probs.n;
}

template <typename T>
void backward(const ModelParamsT<T>& params, const std::vector<int>& labels, const WorkspaceT<T>& ws,
              ModelParamsT<T>& grads, bool skip_input_grad) {
  const NetworkSpec& spec = params.spec;
  const std::size_t L = spec.layers.size();
  if (ws.acts.size() != L + 1) throw ValidationError("backward: workspace has no forward pass");
  const int B = ws.acts[0].n;
  if (static_cast<int>(labels.size()) != B) throw ValidationError("backward: label count mismatch");

  const auto sizes = param_sizes(spec);
  grads.spec = spec;
  grads.weights.resize(L);
  grads.biases.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    grads.weights[l].assign(sizes[l].weights, T(0));
    grads.biases[l].assign(sizes[l].biases, T(0));
  }

  // Softmax + mean cross-entropy combine into (p - onehot) / B.
  if (spec.layers.back().kind != LayerKind::kSoftmax)
    throw ValidationError("backward: network must end in softmax");
  const TensorT<T>& probs = ws.acts[L];
  TensorT<T> g = probs;
  const int width = probs.c * probs.h * probs.w;
  for (int n = 0; n < B; ++n) {
    T* row = g.example(n);
    const int y = labels[n];
    if (y < 0 || y >= width) throw ValidationError("backward: label out of range");
    row[y] -= T(1);
    for (int i = 0; i < width; ++i) row[i] /= static_cast<T>(B);
  }

  TensorT<T> gnext;
  std::vector<T> scratch;
  for (int li = static_cast<int>(L) - 2; li >= 0; --li) {
    // g holds the gradient w.r.t. the output of layer li.
    const std::size_t l = static_cast<std::size_t>(li);
    const LayerSpec& layer = spec.layers[l];
    const TensorT<T>& in = ws.acts[l];
    const TensorT<T>& out = ws.acts[l + 1];
    const bool need_input_grad = l > 0 || !skip_input_grad;

    switch (layer.kind) {
      case LayerKind::kConv: {
        gnext.resize(in.n, in.c, in.h, in.w);
        gnext.zero();
        scratch.resize(static_cast<std::size_t>(in.h) * in.w);
        for (int n = 0; n < B; ++n)
          conv_backward(in.example(n), in.c, in.h, in.w, params.weights[l].data(), layer.channels,
                        layer.kernel, g.example(n), grads.weights[l].data(), grads.biases[l].data(),
                        need_input_grad ? gnext.example(n) : nullptr, scratch.data());
        if (need_input_grad) std::swap(g, gnext);
        break;
      }
      case LayerKind::kLocal: {
        gnext.resize(in.n, in.c, in.h, in.w);
        gnext.zero();
        for (int n = 0; n < B; ++n)
          local_backward(in.example(n), in.c, in.h, in.w, params.weights[l].data(), layer.channels,
                         layer.kernel, g.example(n), grads.weights[l].data(), grads.biases[l].data(),
                         need_input_grad ? gnext.example(n) : nullptr);
        if (need_input_grad) std::swap(g, gnext);
        break;
      }
      case LayerKind::kMaxPool: {
        if (need_input_grad) {
          gnext.resize(in.n, in.c, in.h, in.w);
          gnext.zero();
          const std::size_t per = static_cast<std::size_t>(out.c) * out.h * out.w;
          for (int n = 0; n < B; ++n) {
            const std::int32_t* src = ws.pool_src[l].data() + per * n;
            const T* grow = g.example(n);
            T* gin = gnext.example(n);
            for (std::size_t i = 0; i < per; ++i) gin[src[i]] += grow[i];
          }
          std::swap(g, gnext);
        }
        break;
      }
      case LayerKind::kRelu:
        if (need_input_grad)
          for (std::size_t i = 0; i < g.data.size(); ++i)
            g.data[i] = out.data[i] > T(0) ? g.data[i] : T(0);
        break;
      case LayerKind::kDense: {
        const int in_count = in.c * in.h * in.w;
        const std::uint8_t* mask = nullptr;
        T eval_scale = T(1);
        if (layer.dropconnect) {
          const std::size_t need = static_cast<std::size_t>(B) * layer.units * in_count;
          if (ws.keep_mask[l].size() != need)
            throw ValidationError("backward: missing DropConnect mask (run a train-mode forward)");
          mask = ws.keep_mask[l].data();
        }
        gnext.resize(in.n, in.c, in.h, in.w);
        for (int n = 0; n < B; ++n)
          dense_backward(in.example(n), in_count, params.weights[l].data(), layer.units,
                         mask != nullptr ? mask + static_cast<std::size_t>(n) * layer.units * in_count
                                         : nullptr,
                         eval_scale, g.example(n), grads.weights[l].data(), grads.biases[l].data(),
                         need_input_grad ? gnext.example(n) : nullptr);
        if (need_input_grad) std::swap(g, gnext);
        break;
      }
      case LayerKind::kSoftmax:
        throw ValidationError("backward: softmax may only terminate the network");
    }
  }

  T acc = 0;
  for (std::size_t l = 0; l < L; ++l) {
    for (const T x : grads.weights[l]) acc += x * T(0);
    for (const T x : grads.biases[l]) acc += x * T(0);
  }
  if (std::isnan(acc)) throw NonFiniteError("backward: non-finite parameter gradient");
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.learning_rate < 0) throw ValidationError("train config: negative learning rate");
  if (cfg.momentum < 0 || cfg.momentum >= 1) throw ValidationError("train config: momentum must be in [0, 1)");
  if (cfg.weight_decay < 0) throw ValidationError("train config: negative weight decay");
  if (cfg.batch_size < 1) throw ValidationError("train config: batch size must be >= 1");
  if (cfg.epochs < 1) throw ValidationError("train config: epochs must be >= 1");
  if (!(cfg.keep_prob > 0 && cfg.keep_prob <= 1))
    throw ValidationError("train config: keep probability must be in (0, 1]");
  if (!(cfg.lr_decay_factor > 0)) throw ValidationError("train config: decay factor must be positive");
  if (cfg.lr_decay_fraction < 0 || cfg.lr_decay_fraction > 1)
    throw ValidationError("train config: decay fraction must be in [0, 1]");
}

namespace {

// Copies a patch into one example slot, replicating a single stored plane
// across the network's input channels when needed.
void fill_example(Tensor& batch, int slot, const Patch& patch) {
  const std::size_t plane = static_cast<std::size_t>(batch.h) * batch.w;
  float* dst = batch.example(slot);
  if (patch.patch_px != batch.h)
    throw ValidationError("patch resolution does not match the network input");
  if (patch.channels == batch.c) {
    std::memcpy(dst, patch.data.data(), plane * batch.c * sizeof(float));
  } else if (patch.channels == 1) {
    for (int c = 0; c < batch.c; ++c) std::memcpy(dst + plane * c, patch.data.data(), plane * sizeof(float));
  } else {
    throw ValidationError("patch channel count matches neither the network nor 1");
  }
}

}  // namespace

ModelParams train_sgd(const NetworkSpec& spec, const std::vector<Patch>& patches,
                      const std::vector<int>& labels, const std::vector<std::size_t>& sample,
                      const TrainConfig& cfg) {
  validate_network(spec);
  validate_train_config(cfg);
  if (patches.size() != labels.size()) throw ValidationError("train_sgd: patch/label count mismatch");
  if (sample.empty()) throw ValidationError("train_sgd: empty training sample");
  bool has_pos = false, has_neg = false;
  for (const std::size_t i : sample) {
    if (i >= patches.size()) throw ValidationError("train_sgd: sample index out of range");
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("train_sgd: labels must be 0 or 1");
    (labels[i] == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw ValidationError("train_sgd: training sample has a single class");

  ModelParams params = init_params<float>(spec, derive_seed(cfg.seed, "cnn-init"));
  params.dropconnect_keep = cfg.keep_prob;
  params.seed = cfg.seed;

  std::vector<std::vector<float>> vel_w(spec.layers.size()), vel_b(spec.layers.size());
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    vel_w[l].assign(params.weights[l].size(), 0.0f);
    vel_b[l].assign(params.biases[l].size(), 0.0f);
  }

  Rng shuffle_rng(derive_seed(cfg.seed, "cnn-shuffle"));
  Rng mask_rng(derive_seed(cfg.seed, "cnn-dropconnect"));
  std::vector<std::size_t> order(sample);

  const int decay_epoch = static_cast<int>(cfg.lr_decay_fraction * cfg.epochs);
  Tensor batch;
  Workspace ws;
  ModelParams grads;
  std::vector<int> batch_labels;
  double epoch_loss = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = epoch >= decay_epoch ? cfg.learning_rate * cfg.lr_decay_factor : cfg.learning_rate;
    shuffle_rng.shuffle(order);
    epoch_loss = 0.0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const int b = static_cast<int>(std::min<std::size_t>(cfg.batch_size, order.size() - start));
      batch.resize(b, spec.in_channels, spec.in_px, spec.in_px);
      batch_labels.resize(b);
      for (int i = 0; i < b; ++i) {
        fill_example(batch, i, patches[order[start + i]]);
        batch_labels[i] = labels[order[start + i]];
      }

      forward(params, batch, Mode::kTrain, ws, &mask_rng);
      const double loss = mean_cross_entropy(ws.acts.back(), batch_labels);
      if (!std::isfinite(loss)) throw DivergenceError("train_sgd: loss diverged", epoch);
      epoch_loss += loss * b;

      backward(params, batch_labels, ws, grads);
      for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        float* __restrict w = params.weights[l].data();
        float* __restrict vw = vel_w[l].data();
        const float* __restrict gw = grads.weights[l].data();
        const float mom = static_cast<float>(cfg.momentum);
        const float flr = static_cast<float>(lr);
        const float wd = static_cast<float>(cfg.weight_decay);
        for (std::size_t i = 0; i < params.weights[l].size(); ++i) {
          vw[i] = mom * vw[i] - flr * (gw[i] + wd * w[i]);
          w[i] += vw[i];
        }
        float* __restrict bb = params.biases[l].data();
        float* __restrict vb = vel_b[l].data();
        const float* __restrict gb = grads.biases[l].data();
        for (std::size_t i = 0; i < params.biases[l].size(); ++i) {
          vb[i] = mom * vb[i] - flr * gb[i];
          bb[i] += vb[i];
        }
      }
    }
  }

  params.epochs_run = cfg.epochs;
  params.final_loss = epoch_loss / static_cast<double>(order.size());
  return params;
}

double predict_view(const ModelParams& params, const Patch& patch) {
  Tensor batch;
  batch.resize(1, params.spec.in_channels, params.spec.in_px, params.spec.in_px);
  fill_example(batch, 0, patch);
  Workspace ws;
  forward(params, batch, Mode::kEval, ws);
  return static_cast<double>(ws.acts.back().data[1]);
}

namespace {

const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kLocal: return "local";
    case LayerKind::kDense: return "dense";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "?";
}

LayerKind kind_from(const std::string& name) {
  if (name == "conv") return LayerKind::kConv;
  if (name == "relu") return LayerKind::kRelu;
  if (name == "maxpool") return LayerKind::kMaxPool;
  if (name == "local") return LayerKind::kLocal;
  if (name == "dense") return LayerKind::kDense;
  if (name == "softmax") return LayerKind::kSoftmax;
  throw IoError("model: unknown layer kind '" + name + "'");
}

}  // namespace

nlohmann::json network_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["in_channels"] = spec.in_channels;
  j["in_px"] = spec.in_px;
  j["layers"] = nlohmann::json::array();
  for (const auto& layer : spec.layers) {
    nlohmann::json lj;
    lj["kind"] = kind_name(layer.kind);
    switch (layer.kind) {
      case LayerKind::kConv:
      case LayerKind::kLocal:
        lj["channels"] = layer.channels;
        lj["kernel"] = layer.kernel;
        break;
      case LayerKind::kMaxPool:
        lj["kernel"] = layer.kernel;
        lj["stride"] = layer.stride;
        break;
      case LayerKind::kDense:
        lj["units"] = layer.units;
        lj["dropconnect"] = layer.dropconnect;
        break;
      default:
        break;
    }
    j["layers"].push_back(std::move(lj));
  }
  return j;
}

NetworkSpec network_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.in_channels = j.at("in_channels").get<int>();
  spec.in_px = j.at("in_px").get<int>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec layer;
    layer.kind = kind_from(lj.at("kind").get<std::string>());
    switch (layer.kind) {
      case LayerKind::kConv:
      case LayerKind::kLocal:
        layer.channels = lj.at("channels").get<int>();
        layer.kernel = lj.at("kernel").get<int>();
        break;
      case LayerKind::kMaxPool:
        layer.kernel = lj.at("kernel").get<int>();
        layer.stride = lj.at("stride").get<int>();
        break;
      case LayerKind::kDense:
        layer.units = lj.at("units").get<int>();
        layer.dropconnect = lj.at("dropconnect").get<bool>();
        break;
      default:
        break;
    }
    spec.layers.push_back(layer);
  }
  return spec;
}

void save_model(const std::filesystem::path& path, const ModelParams& params) {
  validate_params(params);
  nlohmann::json header;
  header["format"] = "cascade-model-v1";
  header["network"] = network_to_json(params.spec);
  header["dropconnect_keep"] = params.dropconnect_keep;
  header["epochs_run"] = params.epochs_run;
  header["final_loss"] = params.final_loss;
  header["seed"] = params.seed;
  std::size_t count = 0;
  for (std::size_t l = 0; l < params.spec.layers.size(); ++l)
    count += params.weights[l].size() + params.biases[l].size();
  header["param_count"] = count;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << header.dump() << '\n';
  for (std::size_t l = 0; l < params.spec.layers.size(); ++l) {
    out.write(reinterpret_cast<const char*>(params.weights[l].data()),
              static_cast<std::streamsize>(params.weights[l].size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(params.biases[l].data()),
              static_cast<std::streamsize>(params.biases[l].size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

ModelParams load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("model file has no header: " + path.string());

  ModelParams params;
  std::size_t declared = 0;
  try {
    const nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != "cascade-model-v1")
      throw IoError("unsupported model format in " + path.string());
    params.spec = network_from_json(header.at("network"));
    params.dropconnect_keep = header.at("dropconnect_keep").get<double>();
    params.epochs_run = header.at("epochs_run").get<int>();
    params.final_loss = header.at("final_loss").get<double>();
    params.seed = header.at("seed").get<std::uint64_t>();
    declared = header.at("param_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad model header " + path.string() + ": " + e.what());
  }

  validate_network(params.spec);
  const auto sizes = param_sizes(params.spec);
  std::size_t count = 0;
  for (const auto& s : sizes) count += s.weights + s.biases;
  if (count != declared) throw IoError("model param count mismatch: " + path.string());

  params.weights.resize(params.spec.layers.size());
  params.biases.resize(params.spec.layers.size());
  for (std::size_t l = 0; l < params.spec.layers.size(); ++l) {
    params.weights[l].resize(sizes[l].weights);
    params.biases[l].resize(sizes[l].biases);
    in.read(reinterpret_cast<char*>(params.weights[l].data()),
            static_cast<std::streamsize>(sizes[l].weights * sizeof(float)));
    in.read(reinterpret_cast<char*>(params.biases[l].data()),
            static_cast<std::streamsize>(sizes[l].biases * sizeof(float)));
  }
  if (!in) throw IoError("model payload truncated: " + path.string());
  in.peek();
  if (!in.eof()) throw IoError("model payload has trailing bytes: " + path.string());
  return params;
}

template ModelParamsT<float> init_params<float>(const NetworkSpec&, std::uint64_t);
template ModelParamsT<double> init_params<double>(const NetworkSpec&, std::uint64_t);
template void forward<float>(const ModelParamsT<float>&, const TensorT<float>&, Mode, WorkspaceT<float>&, Rng*);
template void forward<double>(const ModelParamsT<double>&, const TensorT<double>&, Mode, WorkspaceT<double>&, Rng*);
template double mean_cross_entropy<float>(const TensorT<float>&, const std::vector<int>&);
template double mean_cross_entropy<double>(const TensorT<double>&, const std::vector<int>&);
template void backward<float>(const ModelParamsT<float>&, const std::vector<int>&, const WorkspaceT<float>&, ModelParamsT<float>&, bool);
template void backward<double>(const ModelParamsT<double>&, const std::vector<int>&, const WorkspaceT<double>&, ModelParamsT<double>&, bool);

}  // namespace cascade
