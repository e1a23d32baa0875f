#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpnav/rng.hpp"
#include "dpnav/tensor.hpp"

namespace dpnav {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::array<int, 4> channels{64, 128, 256, 512};
  std::array<int, 4> depths{2, 2, 2, 2};
  int n_heads = 8;
  int ff_multiplier = 4;
  int kernel_stem = 4;
  int stride_stem = 4;
  int kernel_dw = 7;
  int padding_dw = 3;
  double droppath_rate = 0.1;
  int input_channels = 6;
  int input_length = 200;
  int output_dim = 2;

  void validate() const {
    for (int i = 0; i < 4; ++i) {
      if (channels[static_cast<std::size_t>(i)] < 1 || depths[static_cast<std::size_t>(i)] < 1)
        throw ModelError("config: channels and depths must be positive");
      if (channels[static_cast<std::size_t>(i)] % n_heads != 0)
        throw ModelError("config: every stage channel count must divide by n_heads");
      if (i > 0 && channels[static_cast<std::size_t>(i)] < channels[static_cast<std::size_t>(i - 1)])
        throw ModelError("config: channels must be nondecreasing");
    }
    if (droppath_rate < 0.0 || droppath_rate >= 1.0)
      throw ModelError("config: droppath_rate must be in [0,1)");
  }

  int total_blocks() const { return depths[0] + depths[1] + depths[2] + depths[3]; }

  static ModelConfig preset(const std::string& name) {
    ModelConfig c;
    if (name == "alpha") {
      c.channels = {64, 128, 256, 512};
      c.depths = {2, 2, 2, 2};
    } else if (name == "beta") {
      c.channels = {64, 128, 256, 512};
      c.depths = {3, 3, 3, 3};
    } else if (name == "gamma") {
      c.channels = {72, 144, 288, 576};
      c.depths = {3, 3, 4, 3};
    } else if (name == "delta") {
      c.channels = {96, 192, 384, 768};
      c.depths = {4, 4, 6, 4};
    } else if (name == "nano") {
      c.channels = {8, 16, 32, 64};
      c.depths = {1, 1, 1, 1};
      c.n_heads = 2;
    } else {
      throw ModelError("unknown preset: " + name);
    }
    c.validate();
    return c;
  }
};

enum class ParamKind {
  conv_weight,
  linear_weight,
  bias,
  bn_gamma,
  bn_beta,
  bn_mean,
  bn_var,
  ln_gamma,
  ln_beta,
};

inline bool param_trainable(ParamKind k) {
  return k != ParamKind::bn_mean && k != ParamKind::bn_var;
}

// Enumerates every named tensor of the model in a fixed order. The same walk
// backs parameter counting, initialization and checkpoint verification.
template <class Fn>
void for_each_model_tensor(const ModelConfig& cfg, Fn&& fn) {
  cfg.validate();
  auto bn = [&](const std::string& prefix, int c) {
    fn(prefix + ".gamma", Shape{c}, ParamKind::bn_gamma);
    fn(prefix + ".beta", Shape{c}, ParamKind::bn_beta);
    fn(prefix + ".running_mean", Shape{c}, ParamKind::bn_mean);
    fn(prefix + ".running_var", Shape{c}, ParamKind::bn_var);
  };
  auto ln = [&](const std::string& prefix, int c) {
    fn(prefix + ".gamma", Shape{c}, ParamKind::ln_gamma);
    fn(prefix + ".beta", Shape{c}, ParamKind::ln_beta);
  };
  auto lin = [&](const std::string& prefix, int out, int in) {
    fn(prefix + ".weight", Shape{out, in}, ParamKind::linear_weight);
    fn(prefix + ".bias", Shape{out}, ParamKind::bias);
  };

  fn("stem.conv.weight", Shape{cfg.channels[0], cfg.input_channels, cfg.kernel_stem},
     ParamKind::conv_weight);
  fn("stem.conv.bias", Shape{cfg.channels[0]}, ParamKind::bias);
  bn("stem.bn", cfg.channels[0]);

  int prev = cfg.channels[0];
  for (int s = 0; s < 4; ++s) {
    int C = cfg.channels[static_cast<std::size_t>(s)];
    std::string stage = "stage" + std::to_string(s + 1);
    fn(stage + ".downsample.conv.weight", Shape{C, prev, 2}, ParamKind::conv_weight);
    fn(stage + ".downsample.conv.bias", Shape{C}, ParamKind::bias);
    bn(stage + ".downsample.bn", C);
    for (int b = 0; b < cfg.depths[static_cast<std::size_t>(s)]; ++b) {
      std::string blk = stage + ".block" + std::to_string(b + 1);
      fn(blk + ".dwconv.weight", Shape{C, 1, cfg.kernel_dw}, ParamKind::conv_weight);
      fn(blk + ".dwconv.bias", Shape{C}, ParamKind::bias);
      bn(blk + ".bn1", C);
      lin(blk + ".attn.wq", C, C);
      lin(blk + ".attn.wk", C, C);
      lin(blk + ".attn.wv", C, C);
      lin(blk + ".attn.wo", C, C);
      ln(blk + ".ln1", C);
      lin(blk + ".ffn.fc1", cfg.ff_multiplier * C, C);
      lin(blk + ".ffn.fc2", C, cfg.ff_multiplier * C);
      ln(blk + ".ln2", C);
      fn(blk + ".pw1.weight", Shape{cfg.ff_multiplier * C, C, 1}, ParamKind::conv_weight);
      fn(blk + ".pw1.bias", Shape{cfg.ff_multiplier * C}, ParamKind::bias);
      fn(blk + ".pw2.weight", Shape{C, cfg.ff_multiplier * C, 1}, ParamKind::conv_weight);
      fn(blk + ".pw2.bias", Shape{C}, ParamKind::bias);
      bn(blk + ".bn2", C);
    }
    prev = C;
  }
  lin("head.fc", cfg.output_dim, cfg.channels[3]);
}

inline long long count_params(const ModelConfig& cfg) {
  long long n = 0;
  for_each_model_tensor(cfg, [&](const std::string&, const Shape& s, ParamKind k) {
    if (param_trainable(k)) n += static_cast<long long>(shape_numel(s));
  });
  return n;
}

// Named parameter map; std::map gives deterministic lexicographic iteration.
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& path) {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw ModelError("missing parameter: " + path);
    return it->second;
  }
  const Tensor& at(const std::string& path) const {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw ModelError("missing parameter: " + path);
    return it->second;
  }

  void zero_grads() {
    for (auto& [path, t] : tensors)
      if (t.requires_grad()) t.zero_grad();
  }

  template <class Fn>
  void for_each_trainable(Fn&& fn) {
    for (auto& [path, t] : tensors)
      if (t.requires_grad()) fn(path, t);
  }
};

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams P;
  Rng rng = Rng::substream(seed, "model.init");
  auto trunc_normal = [&](double stddev) {
    double z;
    do {
      z = rng.gaussian();
    } while (std::fabs(z) > 2.0);
    return z * stddev;
  };
  for_each_model_tensor(cfg, [&](const std::string& path, const Shape& s, ParamKind k) {
    Tensor t(s, 0.0, param_trainable(k));
    switch (k) {
      case ParamKind::conv_weight:
      case ParamKind::linear_weight:
        for (double& v : t.values()) v = trunc_normal(0.02);
        break;
      case ParamKind::bn_gamma:
      case ParamKind::ln_gamma:
      case ParamKind::bn_var:
        for (double& v : t.values()) v = 1.0;
        break;
      default:
        break;  // zeros
    }
    P.tensors.emplace(path, std::move(t));
  });
  return P;
}

// Fixed sinusoidal positional encoding, [L, C].
inline Tensor positional_encoding(int L, int C) {
  Tensor pe({L, C});
  for (int pos = 0; pos < L; ++pos)
    for (int i = 0; i < C; ++i) {
      double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(C);
      double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      pe.data()[static_cast<std::size_t>(pos) * C + i] =
          (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

// Scaled dot-product multi-head attention over [B, L, C] with per-head width
// d = C / heads; heads are concatenated and passed through the output
// projection.
inline Tensor multihead_attention(Tape& tape, const Tensor& x, int heads,
                                  const Tensor& wq, const Tensor& bq, const Tensor& wk,
                                  const Tensor& bk, const Tensor& wv, const Tensor& bv,
                                  const Tensor& wo, const Tensor& bo) {
  if (x.ndim() != 3) throw ModelError("attention: expected [B,L,C]");
  int B = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (C % heads != 0) throw ModelError("attention: C not divisible by heads");
  int d = C / heads;

  auto split = [&](const Tensor& t) {
    return permute(tape, reshape(tape, t, {B, L, heads, d}), {0, 2, 1, 3});
  };
  Tensor q = split(linear(tape, x, wq, bq));  // [B,H,L,d]
  Tensor k = split(linear(tape, x, wk, bk));
  Tensor v = split(linear(tape, x, wv, bv));

  Tensor kT = permute(tape, k, {0, 1, 3, 2});                       // [B,H,d,L]
  Tensor scores = scale(tape, matmul(tape, q, kT), 1.0 / std::sqrt(d));
  Tensor att = softmax_lastdim(tape, scores);                       // rows sum to 1
  Tensor ctx = matmul(tape, att, v);                                // [B,H,L,d]
  Tensor merged = reshape(tape, permute(tape, ctx, {0, 2, 1, 3}), {B, L, C});
  return linear(tape, merged, wo, bo);
}

// Convenience overload matching the single-sequence signature [L, C].
inline Tensor multihead_attention(Tape& tape, const Tensor& x2d, int heads,
                                  ModelParams& P, const std::string& prefix) {
  Tensor x = x2d.ndim() == 2
                 ? reshape(tape, x2d, {1, x2d.dim(0), x2d.dim(1)})
                 : x2d;
  Tensor out = multihead_attention(
      tape, x, heads, P.at(prefix + ".wq.weight"), P.at(prefix + ".wq.bias"),
      P.at(prefix + ".wk.weight"), P.at(prefix + ".wk.bias"),
      P.at(prefix + ".wv.weight"), P.at(prefix + ".wv.bias"),
      P.at(prefix + ".wo.weight"), P.at(prefix + ".wo.bias"));
  if (x2d.ndim() == 2) return reshape(tape, out, {x2d.dim(0), x2d.dim(1)});
  return out;
}

// One ConvNeXt block with the embedded Transformer encoder:
//   depthwise conv + BN -> (positional encoding, MHA residual + LN,
//   feed-forward residual + LN) -> inverted bottleneck + BN -> droppath ->
//   residual with the block input.
inline Tensor convnext_block(Tape& tape, ModelParams& P, const ModelConfig& cfg,
                             const std::string& blk, const Tensor& x, bool training,
                             double droppath_rate, Rng& rng) {
  int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  (void)B;

  Tensor h = conv1d(tape, x, P.at(blk + ".dwconv.weight"), P.at(blk + ".dwconv.bias"),
                    1, cfg.padding_dw, C);
  h = batchnorm1d(tape, h, P.at(blk + ".bn1.gamma"), P.at(blk + ".bn1.beta"),
                  P.at(blk + ".bn1.running_mean"), P.at(blk + ".bn1.running_var"),
                  training);

  Tensor t = permute(tape, h, {0, 2, 1});  // [B,L,C]
  t = add_broadcast0(tape, t, positional_encoding(L, C));
  Tensor att = multihead_attention(
      tape, t, cfg.n_heads, P.at(blk + ".attn.wq.weight"), P.at(blk + ".attn.wq.bias"),
      P.at(blk + ".attn.wk.weight"), P.at(blk + ".attn.wk.bias"),
      P.at(blk + ".attn.wv.weight"), P.at(blk + ".attn.wv.bias"),
      P.at(blk + ".attn.wo.weight"), P.at(blk + ".attn.wo.bias"));
  t = layernorm_lastdim(tape, add(tape, t, att), P.at(blk + ".ln1.gamma"),
                        P.at(blk + ".ln1.beta"));
  Tensor ff = linear(tape, t, P.at(blk + ".ffn.fc1.weight"), P.at(blk + ".ffn.fc1.bias"));
  ff = gelu(tape, ff);
  ff = linear(tape, ff, P.at(blk + ".ffn.fc2.weight"), P.at(blk + ".ffn.fc2.bias"));
  t = layernorm_lastdim(tape, add(tape, t, ff), P.at(blk + ".ln2.gamma"),
                        P.at(blk + ".ln2.beta"));
  h = permute(tape, t, {0, 2, 1});  // [B,C,L]

  h = conv1d(tape, h, P.at(blk + ".pw1.weight"), P.at(blk + ".pw1.bias"), 1, 0, 1);
  h = gelu(tape, h);
  h = conv1d(tape, h, P.at(blk + ".pw2.weight"), P.at(blk + ".pw2.bias"), 1, 0, 1);
  h = batchnorm1d(tape, h, P.at(blk + ".bn2.gamma"), P.at(blk + ".bn2.beta"),
                  P.at(blk + ".bn2.running_mean"), P.at(blk + ".bn2.running_var"),
                  training);
  h = droppath(tape, h, droppath_rate, training, rng);
  return add(tape, x, h);
}

struct ForwardTrace {
  Shape stem_shape;
  Shape pre_gap_shape;
};

// Full ConvXformer: stem conv (k=4, s=4) + BN, then four stages of
// downsample conv (k=2, s=2) + BN followed by the stage's blocks, global
// average pooling and the FC head. For input length 200 the spatial sizes
// run 50 -> 25 -> 12 -> 6 -> 3.
inline Tensor convxformer_forward(Tape& tape, ModelParams& P, const ModelConfig& cfg,
                                  const Tensor& features, bool training, Rng& rng,
                                  ForwardTrace* trace = nullptr) {
  cfg.validate();
  if (features.ndim() != 3 || features.dim(1) != cfg.input_channels)
    throw ModelError("forward: expected features [B," +
                     std::to_string(cfg.input_channels) + ",L]");

  Tensor h = conv1d(tape, features, P.at("stem.conv.weight"), P.at("stem.conv.bias"),
                    cfg.stride_stem, 0, 1);
  h = batchnorm1d(tape, h, P.at("stem.bn.gamma"), P.at("stem.bn.beta"),
                  P.at("stem.bn.running_mean"), P.at("stem.bn.running_var"), training);
  if (trace) trace->stem_shape = h.shape();

  // linearly increasing stochastic depth across all blocks
  int nb = cfg.total_blocks();
  int block_index = 0;
  for (int s = 0; s < 4; ++s) {
    std::string stage = "stage" + std::to_string(s + 1);
    h = conv1d(tape, h, P.at(stage + ".downsample.conv.weight"),
               P.at(stage + ".downsample.conv.bias"), 2, 0, 1);
    h = batchnorm1d(tape, h, P.at(stage + ".downsample.bn.gamma"),
                    P.at(stage + ".downsample.bn.beta"),
                    P.at(stage + ".downsample.bn.running_mean"),
                    P.at(stage + ".downsample.bn.running_var"), training);
    for (int b = 0; b < cfg.depths[static_cast<std::size_t>(s)]; ++b) {
      double rate = nb > 1 ? cfg.droppath_rate * block_index / (nb - 1) : 0.0;
      h = convnext_block(tape, P, cfg, stage + ".block" + std::to_string(b + 1), h,
                         training, rate, rng);
      ++block_index;
    }
  }
  if (trace) trace->pre_gap_shape = h.shape();
  Tensor pooled = global_avg_pool(tape, h);
  return linear(tape, pooled, P.at("head.fc.weight"), P.at("head.fc.bias"));
}

// ---------------------------------------------------------------------------
// checkpoint I/O, format DPNAV-CKPT-1 (see README for the byte layout)

inline constexpr char kCheckpointMagic[] = "DPNAV-CKPT-1\n";

inline void save_checkpoint(const std::string& path, const ModelParams& P) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw ModelError("save_checkpoint: cannot open " + path);
  std::fwrite(kCheckpointMagic, 1, std::strlen(kCheckpointMagic), f);
  std::uint64_t n = P.tensors.size();
  std::fwrite(&n, sizeof(n), 1, f);
  for (const auto& [name, t] : P.tensors) {
    std::uint32_t len = static_cast<std::uint32_t>(name.size());
    std::fwrite(&len, sizeof(len), 1, f);
    std::fwrite(name.data(), 1, len, f);
    std::uint8_t rg = t.requires_grad() ? 1 : 0;
    std::fwrite(&rg, sizeof(rg), 1, f);
    std::uint32_t nd = static_cast<std::uint32_t>(t.ndim());
    std::fwrite(&nd, sizeof(nd), 1, f);
    for (int i = 0; i < t.ndim(); ++i) {
      std::int64_t d = t.dim(i);
      std::fwrite(&d, sizeof(d), 1, f);
    }
    std::fwrite(t.data(), sizeof(double), t.size(), f);
  }
  std::fclose(f);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw ModelError("load_checkpoint: cannot open " + path);
  char magic[16] = {0};
  std::size_t mlen = std::strlen(kCheckpointMagic);
  if (std::fread(magic, 1, mlen, f) != mlen ||
      std::memcmp(magic, kCheckpointMagic, mlen) != 0) {
    std::fclose(f);
    throw ModelError("load_checkpoint: bad magic in " + path);
  }
  ModelParams P;
  std::uint64_t n = 0;
  if (std::fread(&n, sizeof(n), 1, f) != 1) {
    std::fclose(f);
    throw ModelError("load_checkpoint: truncated header");
  }
  for (std::uint64_t e = 0; e < n; ++e) {
    std::uint32_t len = 0;
    if (std::fread(&len, sizeof(len), 1, f) != 1) break;
    std::string name(len, '\0');
    std::uint8_t rg = 0;
    std::uint32_t nd = 0;
    if (std::fread(name.data(), 1, len, f) != len ||
        std::fread(&rg, sizeof(rg), 1, f) != 1 ||
        std::fread(&nd, sizeof(nd), 1, f) != 1) {
      std::fclose(f);
      throw ModelError("load_checkpoint: truncated entry");
    }
    Shape shape(nd);
    for (std::uint32_t i = 0; i < nd; ++i) {
      std::int64_t d = 0;
      if (std::fread(&d, sizeof(d), 1, f) != 1) {
        std::fclose(f);
        throw ModelError("load_checkpoint: truncated shape");
      }
      shape[i] = static_cast<int>(d);
    }
    std::vector<double> data(shape_numel(shape));
    if (std::fread(data.data(), sizeof(double), data.size(), f) != data.size()) {
      std::fclose(f);
      throw ModelError("load_checkpoint: truncated data");
    }
    P.tensors.emplace(name, Tensor::from_data(shape, std::move(data), rg != 0));
  }
  std::fclose(f);
  if (P.tensors.size() != n) throw ModelError("load_checkpoint: entry count mismatch");
  return P;
}

}  // namespace dpnav
