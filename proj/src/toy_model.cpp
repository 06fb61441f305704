// Copyright 2026 The nullsteer Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "nullsteer/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "nullsteer/activation_store.hpp"
#include "nullsteer/errors.hpp"
#include "nullsteer/kernels.hpp"
#include "transformer_engine.hpp"

namespace nullsteer {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Image / config / layout

ImageTensor ImageTensor::filled(int side, float value) {
  ImageTensor img;
  img.side = side;
  img.pixels.assign(static_cast<std::size_t>(side) * side * 3, value);
  return img;
}

bool ImageTensor::in_range() const {
  return std::all_of(pixels.begin(), pixels.end(),
                     [](float v) { return v >= 0.0f && v <= 1.0f; });
}

void ToyModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (hidden_dim <= 0 || num_layers <= 0 || num_heads <= 0 || vocab_size <= 0 ||
      max_seq <= 0 || image_side <= 0 || patch_side <= 0 ||
      num_image_tokens <= 0) {
    fail("model config values must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    fail("hidden_dim (" + std::to_string(hidden_dim) +
         ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
  }
  if (image_side % patch_side != 0) {
    fail("image_side must be divisible by patch_side");
  }
  if (num_patches() % num_image_tokens != 0) {
    fail("number of patches must be divisible by num_image_tokens");
  }
  if (num_image_tokens >= max_seq) fail("image prefix does not fit in max_seq");
}

std::string ToyModelConfig::model_id() const {
  return "toy-d" + std::to_string(hidden_dim) + "-l" +
         std::to_string(num_layers) + "-h" + std::to_string(num_heads) + "-v" +
         std::to_string(vocab_size) + "-s" + std::to_string(seed);
}

json ToyModelConfig::to_json() const {
  return json{{"hidden_dim", hidden_dim},     {"num_layers", num_layers},
              {"num_heads", num_heads},       {"vocab_size", vocab_size},
              {"max_seq", max_seq},           {"image_side", image_side},
              {"patch_side", patch_side},     {"num_image_tokens", num_image_tokens},
              {"seed", seed}};
}

ToyModelConfig ToyModelConfig::from_json(const json& j) {
  ToyModelConfig c;
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.image_side = j.value("image_side", c.image_side);
  c.patch_side = j.value("patch_side", c.patch_side);
  c.num_image_tokens = j.value("num_image_tokens", c.num_image_tokens);
  c.seed = j.value("seed", c.seed);
  return c;
}

ParamLayout ParamLayout::build(const ToyModelConfig& cfg) {
  ParamLayout lay;
  const int d = cfg.hidden_dim;
  auto add = [&lay](const std::string& name, int rows, int cols) {
    Slot s{lay.total, rows, cols};
    lay.total += s.size();
    lay.manifest.emplace_back(name, s);
    return s;
  };
  lay.patch_w = add("patch_w", cfg.patch_dim(), d);
  lay.patch_b = add("patch_b", 1, d);
  lay.adapter_w = add("adapter_w", d, d);
  lay.adapter_b = add("adapter_b", 1, d);
  lay.tok_emb = add("tok_emb", cfg.vocab_size, d);
  lay.pos_emb = add("pos_emb", cfg.max_seq, d);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockSlots b;
    b.ln1_g = add(p + "ln1_g", 1, d);
    b.ln1_b = add(p + "ln1_b", 1, d);
    b.wq = add(p + "wq", d, d);
    b.wk = add(p + "wk", d, d);
    b.wv = add(p + "wv", d, d);
    b.wo = add(p + "wo", d, d);
    b.ln2_g = add(p + "ln2_g", 1, d);
    b.ln2_b = add(p + "ln2_b", 1, d);
    b.w1 = add(p + "w1", d, cfg.mlp_dim());
    b.b1 = add(p + "b1", 1, cfg.mlp_dim());
    b.w2 = add(p + "w2", cfg.mlp_dim(), d);
    b.b2 = add(p + "b2", 1, d);
    lay.blocks.push_back(b);
  }
  lay.lnf_g = add("lnf_g", 1, d);
  lay.lnf_b = add("lnf_b", 1, d);
  lay.head = add("head", d, cfg.vocab_size);
  return lay;
}

ToyModelParams init_model(const ToyModelConfig& config) {
  config.validate();
  ToyModelParams p;
  p.config = config;
  p.layout = ParamLayout::build(config);
  p.values.assign(p.layout.total, 0.0f);

  std::mt19937_64 rng(config.seed);
  auto uniform = [&rng](std::span<float> out, double scale) {
    for (float& v : out) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0,1)
      v = static_cast<float>((2.0 * u - 1.0) * scale);
    }
  };
  auto fill = [](std::span<float> out, float v) { std::fill(out.begin(), out.end(), v); };

  const double d = config.hidden_dim;
  const double resid = 1.0 / std::sqrt(2.0 * config.num_layers);
  const auto& L = p.layout;
  uniform(p[L.patch_w], 1.0 / std::sqrt(static_cast<double>(config.patch_dim())));
  uniform(p[L.adapter_w], 1.0 / std::sqrt(d));
  uniform(p[L.tok_emb], 1.0);
  uniform(p[L.pos_emb], 0.2);
  for (const auto& b : L.blocks) {
    fill(p[b.ln1_g], 1.0f);
    uniform(p[b.wq], 1.0 / std::sqrt(d));
    uniform(p[b.wk], 1.0 / std::sqrt(d));
    uniform(p[b.wv], 1.0 / std::sqrt(d));
    uniform(p[b.wo], resid / std::sqrt(d));
    fill(p[b.ln2_g], 1.0f);
    uniform(p[b.w1], 1.0 / std::sqrt(d));
    uniform(p[b.w2], resid / std::sqrt(static_cast<double>(config.mlp_dim())));
  }
  fill(p[L.lnf_g], 1.0f);
  uniform(p[L.head], 1.0 / std::sqrt(d));
  return p;
}

// ---------------------------------------------------------------------------
// Engine

namespace detail {
namespace {

constexpr double kLayerNormEps = 1e-5;

template <class T>
void layernorm_forward(const T* x, const T* g, const T* b, T* y, T* mean,
                       T* rstd, int rows, int d) {
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::size_t>(r) * d;
    T* yr = y + static_cast<std::size_t>(r) * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const T rs = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * g[j] + b[j];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

// dx += d/dx; dg, db accumulate when non-null.
template <class T>
void layernorm_backward(const T* dy, const T* x, const T* mean, const T* rstd,
                        const T* g, T* dx, T* dg, T* db, int rows, int d) {
  std::vector<T> xhat(d), dxhat(d);
  for (int r = 0; r < rows; ++r) {
    const T* xr = x + static_cast<std::size_t>(r) * d;
    const T* dyr = dy + static_cast<std::size_t>(r) * d;
    T* dxr = dx + static_cast<std::size_t>(r) * d;
    T m1 = 0, m2 = 0;
    for (int j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean[r]) * rstd[r];
      dxhat[j] = dyr[j] * g[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * xhat[j];
      if (dg != nullptr) {
        dg[j] += dyr[j] * xhat[j];
        db[j] += dyr[j];
      }
    }
    m1 /= d;
    m2 /= d;
    for (int j = 0; j < d; ++j) {
      dxr[j] += rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// tanh through exp; libm's tanhf goes through a much slower expm1f path.
template <class T>
T fast_tanh(T u) {
  return T(1) - T(2) / (T(1) + std::exp(T(2) * u));
}

// Returns gelu(x) and stores the tanh term for the backward pass.
template <class T>
T gelu(T x, T& t) {
  t = fast_tanh(T(kGeluC) * (x + T(kGeluA) * x * x * x));
  return T(0.5) * x * (T(1) + t);
}

template <class T>
T gelu_grad(T x, T t) {
  return T(0.5) * (T(1) + t) +
         T(0.5) * x * (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * x * x);
}

template <class T>
std::span<const T> cspan(const std::vector<T>& v) {
  return {v.data(), v.size()};
}

template <class T>
void add_bias(std::vector<T>& x, std::span<const T> bias, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    T* row = x.data() + static_cast<std::size_t>(r) * cols;
    for (int j = 0; j < cols; ++j) row[j] += bias[j];
  }
}

template <class T>
void apply_plan_entry(const PlanEntry& entry, T* rows_begin, int rows, int d) {
  std::vector<double> h(d);
  for (int r = 0; r < rows; ++r) {
    T* x = rows_begin + static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) h[j] = static_cast<double>(x[j]);
    for (int i = 0; i < d; ++i) {
      const double* m = entry.effective.data() + static_cast<std::size_t>(i) * d;
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += m[j] * h[j];
      x[i] = static_cast<T>(h[i] + entry.lambda * acc);
    }
  }
}

}  // namespace

template <class T>
T log_softmax(std::span<const T> row, std::span<T> out) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : row) mx = std::max(mx, v);
  T sum = 0;
  for (T v : row) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  return lse;
}

template <class T>
void Engine<T>::forward(const float* pixels, std::span<const int> tokens,
                        std::span<const int> logit_rows, ForwardCache<T>& c,
                        const ForwardHooks& hooks) const {
  namespace K = kernels;
  const auto& cfg = w_.config;
  const auto& L = w_.layout;
  const int d = cfg.hidden_dim;
  const int P = pixels != nullptr ? cfg.num_image_tokens : 0;
  const int n = static_cast<int>(tokens.size());
  const int S = P + n;
  if (n == 0) throw LengthError("token sequence must be non-empty");
  if (S > cfg.max_seq) {
    throw LengthError("sequence of " + std::to_string(S) +
                      " positions exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  c.prefix = P;
  c.seq = S;
  std::vector<T> x(static_cast<std::size_t>(S) * d, T(0));

  if (pixels != nullptr) {
    const int NP = cfg.num_patches();
    const int PD = cfg.patch_dim();
    const int ps = cfg.patch_side;
    const int pps = cfg.patches_per_side();
    const int side = cfg.image_side;
    c.patches.assign(static_cast<std::size_t>(NP) * PD, T(0));
    for (int py = 0; py < pps; ++py) {
      for (int px = 0; px < pps; ++px) {
        T* patch = c.patches.data() + static_cast<std::size_t>(py * pps + px) * PD;
        for (int dy = 0; dy < ps; ++dy) {
          for (int dx = 0; dx < ps; ++dx) {
            const std::size_t src =
                (static_cast<std::size_t>(py * ps + dy) * side + (px * ps + dx)) * 3;
            for (int ch = 0; ch < 3; ++ch) {
              patch[(dy * ps + dx) * 3 + ch] = static_cast<T>(pixels[src + ch]);
            }
          }
        }
      }
    }
    std::vector<T> pe(static_cast<std::size_t>(NP) * d);
    K::gemm_nn<T>(cspan(c.patches), w_[L.patch_w], pe, NP, PD, d);
    add_bias(pe, w_[L.patch_b], NP, d);
    const int group = NP / P;
    c.pooled.assign(static_cast<std::size_t>(P) * d, T(0));
    for (int p = 0; p < NP; ++p) {
      T* dst = c.pooled.data() + static_cast<std::size_t>(p / group) * d;
      const T* src = pe.data() + static_cast<std::size_t>(p) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
    for (T& v : c.pooled) v /= T(group);
    K::gemm_nn<T>(cspan(c.pooled), w_[L.adapter_w],
                  std::span<T>(x.data(), static_cast<std::size_t>(P) * d), P, d, d);
    add_bias(x, w_[L.adapter_b], P, d);
  } else {
    c.patches.clear();
    c.pooled.clear();
  }

  const auto tok = w_[L.tok_emb];
  const auto pos = w_[L.pos_emb];
  for (int i = 0; i < n; ++i) {
    const int id = tokens[i];
    if (id < 0 || id >= cfg.vocab_size) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
    }
    T* row = x.data() + static_cast<std::size_t>(P + i) * d;
    for (int j = 0; j < d; ++j) row[j] = tok[static_cast<std::size_t>(id) * d + j];
  }
  for (int r = 0; r < S; ++r) {
    T* row = x.data() + static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) row[j] += pos[static_cast<std::size_t>(r) * d + j];
  }

  const int H = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int M = cfg.mlp_dim();
  const T scale = T(1) / std::sqrt(T(dh));
  const std::size_t Sd = static_cast<std::size_t>(S) * d;
  c.blocks.resize(cfg.num_layers);
  std::vector<T> o(Sd), scores(S);

  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& bs = L.blocks[l];
    auto& b = c.blocks[l];
    b.x_in = x;
    b.ln1.resize(Sd);
    b.ln1_mean.resize(S);
    b.ln1_rstd.resize(S);
    layernorm_forward(x.data(), w_[bs.ln1_g].data(), w_[bs.ln1_b].data(),
                      b.ln1.data(), b.ln1_mean.data(), b.ln1_rstd.data(), S, d);
    b.q.resize(Sd);
    b.k.resize(Sd);
    b.v.resize(Sd);
    K::gemm_nn<T>(cspan(b.ln1), w_[bs.wq], b.q, S, d, d);
    K::gemm_nn<T>(cspan(b.ln1), w_[bs.wk], b.k, S, d, d);
    K::gemm_nn<T>(cspan(b.ln1), w_[bs.wv], b.v, S, d, d);

    b.probs.assign(static_cast<std::size_t>(H) * S * S, T(0));
    b.attn.assign(Sd, T(0));
    for (int h = 0; h < H; ++h) {
      const int off = h * dh;
      for (int i = 0; i < S; ++i) {
        const T* qi = b.q.data() + static_cast<std::size_t>(i) * d + off;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          const T* kj = b.k.data() + static_cast<std::size_t>(j) * d + off;
          T s = 0;
          for (int e = 0; e < dh; ++e) s += qi[e] * kj[e];
          scores[j] = s * scale;
          mx = std::max(mx, scores[j]);
        }
        T sum = 0;
        for (int j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        T* prow = b.probs.data() + (static_cast<std::size_t>(h) * S + i) * S;
        T* ai = b.attn.data() + static_cast<std::size_t>(i) * d + off;
        for (int j = 0; j <= i; ++j) {
          const T p = scores[j] / sum;
          prow[j] = p;
          const T* vj = b.v.data() + static_cast<std::size_t>(j) * d + off;
          for (int e = 0; e < dh; ++e) ai[e] += p * vj[e];
        }
      }
    }
    K::gemm_nn<T>(cspan(b.attn), w_[bs.wo], o, S, d, d);
    b.x_mid.resize(Sd);
    for (std::size_t i = 0; i < Sd; ++i) b.x_mid[i] = x[i] + o[i];

    b.ln2.resize(Sd);
    b.ln2_mean.resize(S);
    b.ln2_rstd.resize(S);
    layernorm_forward(b.x_mid.data(), w_[bs.ln2_g].data(), w_[bs.ln2_b].data(),
                      b.ln2.data(), b.ln2_mean.data(), b.ln2_rstd.data(), S, d);
    b.pre.resize(static_cast<std::size_t>(S) * M);
    K::gemm_nn<T>(cspan(b.ln2), w_[bs.w1], b.pre, S, d, M);
    add_bias(b.pre, w_[bs.b1], S, M);
    b.act.resize(b.pre.size());
    b.gate.resize(b.pre.size());
    for (std::size_t i = 0; i < b.pre.size(); ++i) b.act[i] = gelu(b.pre[i], b.gate[i]);
    K::gemm_nn<T>(cspan(b.act), w_[bs.w2], x, S, M, d);
    add_bias(x, w_[bs.b2], S, d);
    for (std::size_t i = 0; i < Sd; ++i) x[i] += b.x_mid[i];

    if (hooks.captured != nullptr &&
        std::find(hooks.capture_layers.begin(), hooks.capture_layers.end(), l) !=
            hooks.capture_layers.end()) {
      (*hooks.captured)[l].assign(x.begin(), x.end());
    }
    if (hooks.steering != nullptr) {
      const auto it = hooks.steering->entries.find(l);
      if (it != hooks.steering->entries.end() && it->second.lambda != 0.0) {
        if (it->second.dim != d ||
            it->second.effective.size() != static_cast<std::size_t>(d) * d) {
          throw ShapeError("steering operator dimension does not match model");
        }
        const int from = std::clamp(hooks.steer_from, 0, S);
        apply_plan_entry(it->second, x.data() + static_cast<std::size_t>(from) * d,
                         S - from, d);
      }
    }
  }

  c.x_final = x;
  c.lnf.resize(Sd);
  c.lnf_mean.resize(S);
  c.lnf_rstd.resize(S);
  layernorm_forward(x.data(), w_[L.lnf_g].data(), w_[L.lnf_b].data(),
                    c.lnf.data(), c.lnf_mean.data(), c.lnf_rstd.data(), S, d);
  const int V = cfg.vocab_size;
  const int R = static_cast<int>(logit_rows.size());
  c.logit_rows.assign(logit_rows.begin(), logit_rows.end());
  std::vector<T> rows(static_cast<std::size_t>(R) * d);
  for (int r = 0; r < R; ++r) {
    const int at = logit_rows[r];
    std::copy_n(c.lnf.data() + static_cast<std::size_t>(at) * d, d,
                rows.data() + static_cast<std::size_t>(r) * d);
  }
  c.logits.resize(static_cast<std::size_t>(R) * V);
  K::gemm_nn<T>(cspan(rows), w_[L.head], c.logits, R, d, V);
}

template <class T>
void Engine<T>::backward(const ForwardCache<T>& c, std::span<const T> dlogits,
                         std::span<const int> tokens, std::vector<T>* grads,
                         std::vector<T>* dpixels) const {
  namespace K = kernels;
  const auto& cfg = w_.config;
  const auto& L = w_.layout;
  const int d = cfg.hidden_dim;
  const int S = c.seq;
  const int P = c.prefix;
  const int V = cfg.vocab_size;
  const int H = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int M = cfg.mlp_dim();
  const T scale = T(1) / std::sqrt(T(dh));
  const std::size_t Sd = static_cast<std::size_t>(S) * d;
  auto G = [grads](const Slot& s) {
    return std::span<T>(grads->data() + s.offset, s.size());
  };
  const bool want = grads != nullptr;

  // Head and final norm.
  const int R = static_cast<int>(c.logit_rows.size());
  std::vector<T> dlnf(Sd, T(0));
  {
    std::vector<T> drows(static_cast<std::size_t>(R) * d);
    K::gemm_nt<T>(dlogits, w_[L.head], drows, R, V, d);
    for (int r = 0; r < R; ++r) {
      T* dst = dlnf.data() + static_cast<std::size_t>(c.logit_rows[r]) * d;
      const T* src = drows.data() + static_cast<std::size_t>(r) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
    if (want) {
      std::vector<T> rows(static_cast<std::size_t>(R) * d);
      for (int r = 0; r < R; ++r) {
        std::copy_n(c.lnf.data() + static_cast<std::size_t>(c.logit_rows[r]) * d,
                    d, rows.data() + static_cast<std::size_t>(r) * d);
      }
      K::gemm_tn_acc<T>(cspan(rows), dlogits, G(L.head), R, d, V);
    }
  }
  std::vector<T> dx(Sd, T(0));
  layernorm_backward(dlnf.data(), c.x_final.data(), c.lnf_mean.data(),
                     c.lnf_rstd.data(), w_[L.lnf_g].data(), dx.data(),
                     want ? G(L.lnf_g).data() : nullptr,
                     want ? G(L.lnf_b).data() : nullptr, S, d);

  std::vector<T> dact(static_cast<std::size_t>(S) * M), dln(Sd), dmid(Sd),
      dattn(Sd), dq(Sd), dk(Sd), dv(Sd), dp(S);
  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const auto& bs = L.blocks[l];
    const auto& b = c.blocks[l];
    // MLP branch: x_out = x_mid + gelu(ln2 w1 + b1) w2 + b2
    if (want) {
      K::colsum_acc<T>(cspan(dx), G(bs.b2), S, d);
      K::gemm_tn_acc<T>(cspan(b.act), cspan(dx), G(bs.w2), S, M, d);
    }
    K::gemm_nt<T>(cspan(dx), w_[bs.w2], dact, S, d, M);
    for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(b.pre[i], b.gate[i]);
    if (want) {
      K::colsum_acc<T>(cspan(dact), G(bs.b1), S, M);
      K::gemm_tn_acc<T>(cspan(b.ln2), cspan(dact), G(bs.w1), S, d, M);
    }
    K::gemm_nt<T>(cspan(dact), w_[bs.w1], dln, S, M, d);
    dmid = dx;
    layernorm_backward(dln.data(), b.x_mid.data(), b.ln2_mean.data(),
                       b.ln2_rstd.data(), w_[bs.ln2_g].data(), dmid.data(),
                       want ? G(bs.ln2_g).data() : nullptr,
                       want ? G(bs.ln2_b).data() : nullptr, S, d);

    // Attention branch: x_mid = x_in + attn wo
    if (want) K::gemm_tn_acc<T>(cspan(b.attn), cspan(dmid), G(bs.wo), S, d, d);
    K::gemm_nt<T>(cspan(dmid), w_[bs.wo], dattn, S, d, d);
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (int h = 0; h < H; ++h) {
      const int off = h * dh;
      for (int i = 0; i < S; ++i) {
        const T* prow = b.probs.data() + (static_cast<std::size_t>(h) * S + i) * S;
        const T* dai = dattn.data() + static_cast<std::size_t>(i) * d + off;
        T dot = 0;
        for (int j = 0; j <= i; ++j) {
          const T* vj = b.v.data() + static_cast<std::size_t>(j) * d + off;
          T* dvj = dv.data() + static_cast<std::size_t>(j) * d + off;
          T s = 0;
          for (int e = 0; e < dh; ++e) {
            s += dai[e] * vj[e];
            dvj[e] += prow[j] * dai[e];
          }
          dp[j] = s;
          dot += prow[j] * s;
        }
        const T* qi = b.q.data() + static_cast<std::size_t>(i) * d + off;
        T* dqi = dq.data() + static_cast<std::size_t>(i) * d + off;
        for (int j = 0; j <= i; ++j) {
          const T ds = prow[j] * (dp[j] - dot) * scale;
          if (ds == T(0)) continue;
          const T* kj = b.k.data() + static_cast<std::size_t>(j) * d + off;
          T* dkj = dk.data() + static_cast<std::size_t>(j) * d + off;
          for (int e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
    if (want) {
      K::gemm_tn_acc<T>(cspan(b.ln1), cspan(dq), G(bs.wq), S, d, d);
      K::gemm_tn_acc<T>(cspan(b.ln1), cspan(dk), G(bs.wk), S, d, d);
      K::gemm_tn_acc<T>(cspan(b.ln1), cspan(dv), G(bs.wv), S, d, d);
    }
    K::gemm_nt<T>(cspan(dq), w_[bs.wq], dln, S, d, d);
    K::gemm_nt<T>(cspan(dk), w_[bs.wk], dln, S, d, d, true);
    K::gemm_nt<T>(cspan(dv), w_[bs.wv], dln, S, d, d, true);
    dx = dmid;
    layernorm_backward(dln.data(), b.x_in.data(), b.ln1_mean.data(),
                       b.ln1_rstd.data(), w_[bs.ln1_g].data(), dx.data(),
                       want ? G(bs.ln1_g).data() : nullptr,
                       want ? G(bs.ln1_b).data() : nullptr, S, d);
  }

  if (want) {
    auto dpos = G(L.pos_emb);
    auto dtok = G(L.tok_emb);
    for (int r = 0; r < S; ++r) {
      const T* src = dx.data() + static_cast<std::size_t>(r) * d;
      T* pd = dpos.data() + static_cast<std::size_t>(r) * d;
      for (int j = 0; j < d; ++j) pd[j] += src[j];
      if (r >= P) {
        T* td = dtok.data() + static_cast<std::size_t>(tokens[r - P]) * d;
        for (int j = 0; j < d; ++j) td[j] += src[j];
      }
    }
  }
  if (P == 0 || (!want && dpixels == nullptr)) return;

  const int NP = cfg.num_patches();
  const int PD = cfg.patch_dim();
  const int group = NP / P;
  const std::span<const T> dprefix(dx.data(), static_cast<std::size_t>(P) * d);
  if (want) {
    K::colsum_acc<T>(dprefix, G(L.adapter_b), P, d);
    K::gemm_tn_acc<T>(cspan(c.pooled), dprefix, G(L.adapter_w), P, d, d);
  }
  std::vector<T> dpooled(static_cast<std::size_t>(P) * d);
  K::gemm_nt<T>(dprefix, w_[L.adapter_w], dpooled, P, d, d);
  std::vector<T> dpe(static_cast<std::size_t>(NP) * d);
  for (int p = 0; p < NP; ++p) {
    const T* src = dpooled.data() + static_cast<std::size_t>(p / group) * d;
    T* dst = dpe.data() + static_cast<std::size_t>(p) * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j] / T(group);
  }
  if (want) {
    K::colsum_acc<T>(cspan(dpe), G(L.patch_b), NP, d);
    K::gemm_tn_acc<T>(cspan(c.patches), cspan(dpe), G(L.patch_w), NP, PD, d);
  }
  if (dpixels == nullptr) return;
  std::vector<T> dpatch(static_cast<std::size_t>(NP) * PD);
  K::gemm_nt<T>(cspan(dpe), w_[L.patch_w], dpatch, NP, d, PD);
  const int ps = cfg.patch_side;
  const int pps = cfg.patches_per_side();
  const int side = cfg.image_side;
  dpixels->assign(static_cast<std::size_t>(side) * side * 3, T(0));
  for (int py = 0; py < pps; ++py) {
    for (int px = 0; px < pps; ++px) {
      const T* patch = dpatch.data() + static_cast<std::size_t>(py * pps + px) * PD;
      for (int dy = 0; dy < ps; ++dy) {
        for (int dx2 = 0; dx2 < ps; ++dx2) {
          const std::size_t dst =
              (static_cast<std::size_t>(py * ps + dy) * side + (px * ps + dx2)) * 3;
          for (int ch = 0; ch < 3; ++ch) {
            (*dpixels)[dst + ch] = patch[(dy * ps + dx2) * 3 + ch];
          }
        }
      }
    }
  }
}

template class Engine<float>;
template class Engine<double>;
template float log_softmax<float>(std::span<const float>, std::span<float>);
template double log_softmax<double>(std::span<const double>, std::span<double>);

}  // namespace detail

// ---------------------------------------------------------------------------
// Inference entry points

namespace {

void check_image(const ToyModelConfig& cfg, const ImageTensor* image) {
  if (image == nullptr) return;
  if (image->side != cfg.image_side ||
      image->pixels.size() != static_cast<std::size_t>(cfg.image_side) * cfg.image_side * 3) {
    throw ShapeError("image does not match model image_side");
  }
}

void check_layer(const ToyModelConfig& cfg, int layer) {
  if (layer < 0 || layer >= cfg.num_layers) {
    throw RangeError("layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(cfg.num_layers) + ")");
  }
}

std::vector<int> range_rows(int from, int to) {
  std::vector<int> rows;
  for (int r = from; r < to; ++r) rows.push_back(r);
  return rows;
}

template <class T>
void check_targets(std::span<const TokenSequence> targets) {
  if (targets.empty()) throw ValidationError("target corpus must be non-empty");
  for (const auto& t : targets) {
    if (t.empty()) throw ValidationError("target responses must be non-empty");
  }
}

// Sum of target log-likelihoods; optionally the pixel gradient.
template <class T>
double targets_objective(const ModelWeights<T>& params, const ImageTensor& image,
                         const TokenSequence& prompt,
                         std::span<const TokenSequence> targets,
                         std::vector<double>* grad) {
  check_image(params.config, &image);
  check_targets<T>(targets);
  if (prompt.empty()) throw LengthError("prompt must be non-empty");
  detail::Engine<T> engine(params);
  const int V = params.config.vocab_size;
  const int P = params.config.num_image_tokens;
  double total = 0.0;
  if (grad != nullptr) grad->assign(image.pixels.size(), 0.0);
  detail::ForwardCache<T> cache;
  std::vector<T> dpix;
  for (const auto& y : targets) {
    TokenSequence seq = prompt;
    seq.insert(seq.end(), y.begin(), y.end() - 1);
    const int m = static_cast<int>(y.size());
    const int first = P + static_cast<int>(prompt.size()) - 1;
    const auto rows = range_rows(first, first + m);
    engine.forward(image.pixels.data(), seq, rows, cache);
    std::vector<T> dlogits(static_cast<std::size_t>(m) * V);
    std::vector<T> lp(V);
    for (int t = 0; t < m; ++t) {
      const std::span<const T> row(cache.logits.data() + static_cast<std::size_t>(t) * V, V);
      detail::log_softmax<T>(row, lp);
      total += static_cast<double>(lp[y[t]]);
      T* dl = dlogits.data() + static_cast<std::size_t>(t) * V;
      for (int v = 0; v < V; ++v) dl[v] = -std::exp(lp[v]);
      dl[y[t]] += T(1);
    }
    if (grad != nullptr) {
      engine.backward(cache, dlogits, seq, nullptr, &dpix);
      for (std::size_t i = 0; i < dpix.size(); ++i) (*grad)[i] += static_cast<double>(dpix[i]);
    }
  }
  return total;
}

}  // namespace

ForwardRecord forward(const ToyModelParams& params, const ImageTensor* image,
                      const TokenSequence& tokens,
                      std::span<const int> capture_layers,
                      const SteeringPlan* steering) {
  check_image(params.config, image);
  for (int l : capture_layers) check_layer(params.config, l);
  detail::Engine<float> engine(params);
  detail::ForwardCache<float> cache;
  ForwardRecord rec;
  detail::ForwardHooks hooks;
  hooks.capture_layers = capture_layers;
  hooks.captured = &rec.hiddens;
  hooks.steering = steering;
  const int P = image != nullptr ? params.config.num_image_tokens : 0;
  const int S = P + static_cast<int>(tokens.size());
  if (steering != nullptr && steering->scope == SteeringScope::kFromLastPrompt) {
    hooks.steer_from = S - 1;
  }
  const auto rows = range_rows(P, S);
  engine.forward(image != nullptr ? image->pixels.data() : nullptr, tokens, rows,
                 cache, hooks);
  rec.prefix_len = cache.prefix;
  rec.seq_len = cache.seq;
  rec.vocab = params.config.vocab_size;
  rec.logits = std::move(cache.logits);
  return rec;
}

TokenSequence generate(const ToyModelParams& params, const ImageTensor* image,
                       const TokenSequence& prompt, int max_new,
                       const SteeringPlan* steering, int eos_token) {
  if (max_new < 1) throw RangeError("max_new must be >= 1");
  if (prompt.empty()) throw LengthError("prompt must be non-empty");
  check_image(params.config, image);
  const int P = image != nullptr ? params.config.num_image_tokens : 0;
  if (P + static_cast<int>(prompt.size()) + max_new - 1 > params.config.max_seq) {
    throw LengthError("prompt plus max_new exceeds max_seq");
  }
  detail::Engine<float> engine(params);
  detail::ForwardCache<float> cache;
  detail::ForwardHooks hooks;
  hooks.steering = steering;
  if (steering != nullptr && steering->scope == SteeringScope::kFromLastPrompt) {
    hooks.steer_from = P + static_cast<int>(prompt.size()) - 1;
  }
  TokenSequence seq = prompt;
  TokenSequence out;
  const int V = params.config.vocab_size;
  for (int step = 0; step < max_new; ++step) {
    const int S = P + static_cast<int>(seq.size());
    const int last[1] = {S - 1};
    engine.forward(image != nullptr ? image->pixels.data() : nullptr, seq, last,
                   cache, hooks);
    const auto best = std::max_element(cache.logits.begin(), cache.logits.begin() + V);
    const int next = static_cast<int>(best - cache.logits.begin());
    if (next == eos_token) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

std::map<int, std::vector<float>> capture_last_token_activations(
    const ToyModelParams& params, const ImageTensor* image,
    const TokenSequence& prompt, std::span<const int> layers) {
  check_image(params.config, image);
  for (int l : layers) check_layer(params.config, l);
  detail::Engine<float> engine(params);
  detail::ForwardCache<float> cache;
  std::map<int, std::vector<float>> captured;
  detail::ForwardHooks hooks;
  hooks.capture_layers = layers;
  hooks.captured = &captured;
  engine.forward(image != nullptr ? image->pixels.data() : nullptr, prompt, {},
                 cache, hooks);
  const int d = params.config.hidden_dim;
  const std::size_t last = static_cast<std::size_t>(cache.seq - 1) * d;
  std::map<int, std::vector<float>> out;
  for (auto& [layer, rows] : captured) {
    out[layer].assign(rows.begin() + last, rows.begin() + last + d);
  }
  return out;
}

std::vector<float> capture_last_token_activation(const ToyModelParams& params,
                                                 const ImageTensor* image,
                                                 const TokenSequence& prompt,
                                                 int layer) {
  const int layers[1] = {layer};
  return capture_last_token_activations(params, image, prompt, layers).at(layer);
}

double target_log_likelihood(const ModelWeights<double>& params,
                             const ImageTensor& image, const TokenSequence& prompt,
                             std::span<const TokenSequence> targets) {
  return targets_objective(params, image, prompt, targets, nullptr);
}

InputGradient input_gradient(const ModelWeights<double>& params,
                             const ImageTensor& image, const TokenSequence& prompt,
                             std::span<const TokenSequence> targets) {
  InputGradient g;
  g.objective = targets_objective(params, image, prompt, targets, &g.pixels);
  return g;
}

InputGradient input_gradient(const ToyModelParams& params, const ImageTensor& image,
                             const TokenSequence& prompt,
                             std::span<const TokenSequence> targets) {
  return input_gradient(params.cast<double>(), image, prompt, targets);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_model(const std::filesystem::path& path, const ToyModelParams& params,
                const json& extra) {
  json meta = extra.is_object() ? extra : json::object();
  meta["kind"] = "toy_model";
  meta["rows"] = static_cast<long long>(params.values.size());
  meta["cols"] = 1;
  meta["layer"] = -1;
  meta["model_id"] = params.config.model_id();
  meta["token_policy"] = "none";
  meta["dtype"] = "f32le";
  meta["config"] = params.config.to_json();
  json manifest = json::array();
  for (const auto& [name, slot] : params.layout.manifest) {
    manifest.push_back({{"name", name},
                        {"offset", slot.offset},
                        {"rows", slot.rows},
                        {"cols", slot.cols}});
  }
  meta["manifest"] = manifest;
  write_container(path, std::move(meta), params.values);
}

ToyModelParams load_model(const std::filesystem::path& path) {
  TraceFile file = read_container(path);
  if (file.meta.value("kind", "") != "toy_model") {
    throw FormatError(path.string() + ": not a toy_model checkpoint");
  }
  ToyModelParams p;
  p.config = ToyModelConfig::from_json(file.meta.at("config"));
  p.config.validate();
  p.layout = ParamLayout::build(p.config);
  const auto& manifest = file.meta.at("manifest");
  if (manifest.size() != p.layout.manifest.size()) {
    throw FormatError(path.string() + ": manifest does not match config");
  }
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& [name, slot] = p.layout.manifest[i];
    if (manifest[i].at("name") != name || manifest[i].at("offset") != slot.offset ||
        manifest[i].at("rows") != slot.rows || manifest[i].at("cols") != slot.cols) {
      throw FormatError(path.string() + ": manifest entry " + name + " mismatch");
    }
  }
  if (file.payload.size() != p.layout.total) {
    throw CorruptionError(path.string() + ": parameter count mismatch");
  }
  p.values = std::move(file.payload);
  return p;
}

}  // namespace nullsteer
