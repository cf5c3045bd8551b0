#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lsnet/autodiff.hpp"
#include "lsnet/ops.hpp"
#include "lsnet/tensor.hpp"

namespace lsnet {

inline constexpr std::size_t kColorChannels = 3;

struct RegionGrid {
  std::size_t rows = 2;
  std::size_t cols = 2;
  std::size_t count() const { return rows * cols; }
  friend bool operator==(const RegionGrid&, const RegionGrid&) = default;
};

/// Ablation switches. Each one removes a term of J = I + dx - ox, or the
/// attention block.
struct Ablation {
  bool no_x = false;
  bool no_dx = false;
  bool no_ox = false;
  bool no_topk = false;

  friend bool operator==(const Ablation&, const Ablation&) = default;

  /// Comma-separated flag list, "none" when empty.
  std::string str() const {
    std::string s;
    auto add = [&s](bool on, const char* name) {
      if (!on) return;
      if (!s.empty()) s += ',';
      s += name;
    };
    add(no_x, "no_x");
    add(no_dx, "no_dx");
    add(no_ox, "no_ox");
    add(no_topk, "no_topk");
    return s.empty() ? "none" : s;
  }

  static Ablation parse(std::string_view text) {
    Ablation a;
    std::string token;
    std::istringstream is{std::string(text)};
    while (std::getline(is, token, ',')) {
      token.erase(0, token.find_first_not_of(" \t"));
      token.erase(token.find_last_not_of(" \t") + 1);
      if (token.empty() || token == "none") continue;
      if (token == "no_x" || token == "wo_x") a.no_x = true;
      else if (token == "no_dx" || token == "wo_dx") a.no_dx = true;
      else if (token == "no_ox" || token == "wo_ox") a.no_ox = true;
      else if (token == "no_topk" || token == "wo_topk") a.no_topk = true;
      else throw std::invalid_argument("unknown ablation flag '" + token + "'");
    }
    return a;
  }
};

struct LSNetConfig {
  std::size_t lift_channels = 16;
  RegionGrid grid;
  std::size_t topk = 2;
  /// Keys and values of each region are average-pooled to kv_pool × kv_pool
  /// tokens before fine attention; 0 keeps one token per pixel.
  std::size_t kv_pool = 2;
  Ablation ablation;
  std::size_t input_height = 256;
  std::size_t input_width = 256;

  friend bool operator==(const LSNetConfig&, const LSNetConfig&) = default;

  void validate() const {
    if (lift_channels < 1) throw std::invalid_argument("lift_channels must be at least 1");
    if (grid.rows < 1 || grid.cols < 1) throw std::invalid_argument("region grid must be at least 1x1");
    if (topk < 1 || topk > grid.count())
      throw std::invalid_argument("topk=" + std::to_string(topk) + " outside [1, " +
                                  std::to_string(grid.count()) + "]");
    if (input_height < 1 || input_width < 1) throw std::invalid_argument("input size must be positive");
  }
};

/// Trainable tensors plus batch-norm running statistics, in a fixed order.
template <class T>
struct LSNetParams {
  LSNetConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;
  std::vector<std::string> buffer_names;
  std::vector<Tensor<T>> buffers;

  bool has(std::string_view name) const { return find(names, name) != names.size(); }

  Tensor<T>& get(std::string_view name) { return tensors.at(checked(names, name)); }
  const Tensor<T>& get(std::string_view name) const { return tensors.at(checked(names, name)); }
  Tensor<T>& buffer(std::string_view name) { return buffers.at(checked(buffer_names, name)); }
  const Tensor<T>& buffer(std::string_view name) const { return buffers.at(checked(buffer_names, name)); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <class U>
  LSNetParams<U> cast() const {
    LSNetParams<U> out;
    out.config = config;
    out.names = names;
    out.buffer_names = buffer_names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    for (const auto& t : buffers) out.buffers.push_back(t.template cast<U>());
    return out;
  }

  friend bool operator==(const LSNetParams&, const LSNetParams&) = default;

 private:
  static std::size_t find(const std::vector<std::string>& list, std::string_view name) {
    for (std::size_t i = 0; i < list.size(); ++i)
      if (list[i] == name) return i;
    return list.size();
  }
  static std::size_t checked(const std::vector<std::string>& list, std::string_view name) {
    const std::size_t i = find(list, name);
    if (i == list.size()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return i;
  }
};

inline std::vector<std::string> active_branches(const Ablation& a) {
  std::vector<std::string> out;
  if (!a.no_dx) out.emplace_back("dx");
  if (!a.no_ox) out.emplace_back("ox");
  return out;
}

/// Fan-in-scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))
/// for weights and biases; batch-norm gamma = 1, beta = 0, running mean 0,
/// running variance 1.
template <class T>
LSNetParams<T> init_params(const LSNetConfig& config, std::uint64_t seed) {
  config.validate();
  LSNetParams<T> p;
  p.config = config;
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape s, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(s);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  auto add = [&](std::string name, Tensor<T> t) {
    p.names.push_back(std::move(name));
    p.tensors.push_back(std::move(t));
  };

  const std::size_t L = config.lift_channels;
  const std::size_t C = kColorChannels;
  add("pos_conv.weight", uniform(Shape(C, C, 3, 3), C * 9));
  add("pos_conv.bias", uniform(Shape(1, C, 1, 1), C * 9));
  for (const auto& br : active_branches(config.ablation)) {
    add(br + ".lift.weight", uniform(Shape(L, 1, 1, 1), 1));
    add(br + ".lift.bias", uniform(Shape(1, L, 1, 1), 1));
    std::size_t merge_in = L;
    if (!config.ablation.no_topk) {
      add(br + ".qkv.weight", uniform(Shape(3 * L, L, 1, 1), L));
      add(br + ".qkv.bias", uniform(Shape(1, 3 * L, 1, 1), L));
      add(br + ".qkv_bn.gamma", Tensor<T>(Shape(1, 3 * L, 1, 1), T{1}));
      add(br + ".qkv_bn.beta", Tensor<T>(Shape(1, 3 * L, 1, 1), T{0}));
      p.buffer_names.push_back(br + ".qkv_bn.running_mean");
      p.buffers.emplace_back(Shape(1, 3 * L, 1, 1), T{0});
      p.buffer_names.push_back(br + ".qkv_bn.running_var");
      p.buffers.emplace_back(Shape(1, 3 * L, 1, 1), T{1});
      merge_in = 2 * L;
    }
    // Merge and head weights are held per color channel.
    add(br + ".merge.weight", uniform(Shape(C * L, merge_in, 1, 1), merge_in));
    add(br + ".merge.bias", uniform(Shape(1, C * L, 1, 1), merge_in));
    add(br + ".head.weight", uniform(Shape(C, L, 1, 1), L));
    add(br + ".head.bias", uniform(Shape(1, C, 1, 1), L));
  }
  return p;
}

/// Zeroes both heads so that dx and ox vanish and J = I.
template <class T>
void zero_heads(LSNetParams<T>& p) {
  for (const auto& br : active_branches(p.config.ablation)) {
    p.get(br + ".head.weight").fill(T{0});
    p.get(br + ".head.bias").fill(T{0});
  }
}

struct ParamLedger {
  std::vector<std::pair<std::string, std::size_t>> groups;
  std::size_t total = 0;
};

/// Exact scalar count with a per-group breakdown (group = name minus the
/// trailing ".weight"/".bias"/".gamma"/".beta").
template <class T>
ParamLedger param_count(const LSNetParams<T>& p) {
  ParamLedger ledger;
  for (std::size_t i = 0; i < p.names.size(); ++i) {
    const std::string group = p.names[i].substr(0, p.names[i].rfind('.'));
    if (ledger.groups.empty() || ledger.groups.back().first != group) ledger.groups.emplace_back(group, 0);
    ledger.groups.back().second += p.tensors[i].size();
    ledger.total += p.tensors[i].size();
  }
  return ledger;
}

struct MacLedger {
  std::vector<std::pair<std::string, std::uint64_t>> items;
  std::uint64_t total = 0;
};

/// Analytic multiply-accumulate count of one forward pass on a single
/// height × width image: convolutions, routing affinities and the two
/// attention products. Normalization, activations and softmax are not MACs
/// and are excluded.
inline MacLedger flop_count(const LSNetConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  const std::uint64_t H = (height + cfg.grid.rows - 1) / cfg.grid.rows * cfg.grid.rows;
  const std::uint64_t W = (width + cfg.grid.cols - 1) / cfg.grid.cols * cfg.grid.cols;
  const std::uint64_t P = H * W, C = kColorChannels, L = cfg.lift_channels, R = cfg.grid.count();
  const std::uint64_t maps = C;  // one single-channel map per color
  const std::uint64_t region_px = P / R;
  const std::uint64_t tokens = cfg.kv_pool == 0 ? region_px : cfg.kv_pool * cfg.kv_pool;
  const std::uint64_t keys = cfg.topk * tokens;

  MacLedger m;
  auto put = [&m](std::string name, std::uint64_t v) {
    m.items.emplace_back(std::move(name), v);
    m.total += v;
  };
  put("pos_conv", P * C * C * 9);
  for (const auto& br : active_branches(cfg.ablation)) {
    put(br + ".lift", maps * P * L);
    std::uint64_t merge_in = L;
    if (!cfg.ablation.no_topk) {
      put(br + ".qkv", maps * P * L * 3 * L);
      put(br + ".routing", maps * R * R * L);
      put(br + ".attention", maps * P * keys * L * 2);
      merge_in = 2 * L;
    }
    put(br + ".merge", maps * P * merge_in * L);
    put(br + ".head", maps * P * L);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Parameters placed on a tape as leaves, in LSNetParams order.
template <class T>
struct BoundParams {
  const LSNetParams<T>* source = nullptr;
  std::vector<Var<T>> vars;

  Var<T> operator[](std::string_view name) const {
    for (std::size_t i = 0; i < source->names.size(); ++i)
      if (source->names[i] == name) return vars[i];
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }
};

template <class T>
BoundParams<T> bind_params(Tape<T>& tape, const LSNetParams<T>& p, bool requires_grad) {
  BoundParams<T> b;
  b.source = &p;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) b.vars.push_back(tape.leaf(p.tensors[i], requires_grad, p.names[i]));
  return b;
}

/// Coarse routing result for every (image, color map) group.
template <class T>
struct RoutingIndex {
  Tensor<T> affinity;  // (groups, 1, regions, regions)
  IndexTensor index;   // (groups, 1, regions, k)
};

template <class T>
struct QKV {
  Var<T> q, k, v;
};

template <class T>
struct Decomposition {
  Var<T> output;  // J
  Var<T> dx;
  Var<T> ox;
  std::vector<RoutingIndex<T>> routing;  // one per branch with attention
};

/// 3×3 cross-channel convolution followed by the activation; replaces a
/// learned position embedding. Returns (N, 3, H, W); chunk_channels splits it.
template <class T>
Var<T> positional_encode(const Var<T>& image, const Var<T>& weight, const Var<T>& bias) {
  require_shape(image.shape()[1] == kColorChannels,
                "positional_encode: expected 3 color channels, got " + std::to_string(image.shape()[1]));
  return gelu(conv2d(image, weight, bias));
}

/// Pointwise convolution to 3·C channels, batch norm, activation, split.
template <class T>
QKV<T> qkv_project(const Var<T>& features, const Var<T>& weight, const Var<T>& bias, const Var<T>& gamma,
                   const Var<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode) {
  const std::size_t C = features.shape()[1];
  require_shape(weight.shape()[0] == 3 * C, "qkv_project: weight must produce 3x the input channels");
  Var<T> act = gelu(batch_norm(pointwise_conv(features, weight, bias), gamma, beta, running_mean, running_var, mode));
  return {slice_channels(act, 0, C), slice_channels(act, C, C), slice_channels(act, 2 * C, C)};
}

/// Region means of Q and K, affinity A_r = Q_r K_r^T per group, and the top-k
/// regions for every query region. Inputs are block-batched
/// (groups·regions, C, h, w); routing is detached from the gradient.
template <class T>
RoutingIndex<T> region_route(const Tensor<T>& q, const Tensor<T>& k, std::size_t regions, std::size_t topk) {
  const Shape s = q.shape();
  require_shape(s == k.shape(), "region_route: Q and K shapes differ");
  require_shape(regions >= 1 && s[0] % regions == 0, "region_route: batch not divisible by region count");
  if (topk < 1 || topk > regions)
    throw std::out_of_range("region_route: k=" + std::to_string(topk) + " outside [1, " + std::to_string(regions) + "]");
  const std::size_t G = s[0] / regions, C = s[1], P = s.plane();
  auto means = [&](const Tensor<T>& x) {
    std::vector<double> m(s[0] * C);
    for (std::size_t b = 0; b < s[0]; ++b)
      for (std::size_t c = 0; c < C; ++c) m[b * C + c] = detail::sum(x.plane(b, c).data(), P) / static_cast<double>(P);
    return m;
  };
  const auto qr = means(q);
  const auto kr = means(k);
  RoutingIndex<T> out;
  out.affinity = Tensor<T>(Shape(G, 1, regions, regions));
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t i = 0; i < regions; ++i)
      for (std::size_t j = 0; j < regions; ++j) {
        double a = 0.0;
        for (std::size_t c = 0; c < C; ++c) a += qr[(g * regions + i) * C + c] * kr[(g * regions + j) * C + c];
        out.affinity(g, 0, i, j) = static_cast<T>(a);
      }
  out.index = topk_lastdim(out.affinity, topk);
  return out;
}

/// Scaled dot-product attention of every query pixel over the tokens of the
/// k regions routed to its own region. Softmax runs over the gathered-token
/// axis; no MLP follows. Returns block-batched (groups·regions, C, h, w).
template <class T>
Var<T> fine_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const RoutingIndex<T>& routing,
                      std::size_t regions, std::size_t kv_pool) {
  const Shape s = q.shape();
  require_shape(s == k.shape() && s == v.shape(), "fine_attention: Q, K, V shapes differ");
  Var<T> kp = kv_pool == 0 ? k : adaptive_avg_pool(k, kv_pool, kv_pool);
  Var<T> vp = kv_pool == 0 ? v : adaptive_avg_pool(v, kv_pool, kv_pool);
  Var<T> q_tok = blocks_to_tokens(q, regions);
  Var<T> k_sel = gather_regions(blocks_to_tokens(kp, regions), routing.index);
  Var<T> v_sel = gather_regions(blocks_to_tokens(vp, regions), routing.index);
  const T inv_sqrt_dim = static_cast<T>(1.0 / std::sqrt(static_cast<double>(s[1])));
  Var<T> probs = softmax_lastdim(scale(batched_matmul(q_tok, k_sel, true), inv_sqrt_dim));
  return tokens_to_blocks(batched_matmul(probs, v_sel), s[2], s[3]);
}

namespace detail {

template <class T>
Var<T> run_branch(const std::string& br, const Var<T>& blocks, const BoundParams<T>& bp, LSNetParams<T>& params,
                  Mode mode, std::vector<RoutingIndex<T>>& routing) {
  const auto& cfg = params.config;
  const std::size_t R = cfg.grid.count();
  Var<T> lifted = gelu(pointwise_conv(blocks, bp[br + ".lift.weight"], bp[br + ".lift.bias"]));
  Var<T> merged_in = lifted;
  if (!cfg.ablation.no_topk) {
    QKV<T> qkv = qkv_project(lifted, bp[br + ".qkv.weight"], bp[br + ".qkv.bias"], bp[br + ".qkv_bn.gamma"],
                             bp[br + ".qkv_bn.beta"], params.buffer(br + ".qkv_bn.running_mean"),
                             params.buffer(br + ".qkv_bn.running_var"), mode);
    routing.push_back(region_route(qkv.q.value(), qkv.k.value(), R, cfg.topk));
    merged_in = concat_channels(lifted, fine_attention(qkv.q, qkv.k, qkv.v, routing.back(), R, cfg.kv_pool));
  }
  Var<T> merged =
      gelu(pointwise_conv(merged_in, bp[br + ".merge.weight"], bp[br + ".merge.bias"], kColorChannels, R));
  Var<T> head = pointwise_conv(merged, bp[br + ".head.weight"], bp[br + ".head.bias"], kColorChannels, R);
  return from_batch(head, kColorChannels, cfg.grid.rows, cfg.grid.cols);
}

}  // namespace detail

/// Full forward pass: J = I + dx - ox with ablated terms replaced by zeros.
/// Extents not divisible by the region grid are reflect-padded and the maps
/// cropped back. Train mode updates batch-norm running statistics in params.
template <class T>
Decomposition<T> forward(const Var<T>& image, const BoundParams<T>& bp, LSNetParams<T>& params, Mode mode) {
  const auto& cfg = params.config;
  const Shape s = image.shape();
  require_shape(s[1] == kColorChannels, "forward: expected 3 color channels, got " + std::to_string(s[1]));
  Tape<T>& tape = *image.tape();
  const std::size_t ph = (cfg.grid.rows - s[2] % cfg.grid.rows) % cfg.grid.rows;
  const std::size_t pw = (cfg.grid.cols - s[3] % cfg.grid.cols) % cfg.grid.cols;
  Var<T> x = (ph || pw) ? pad_reflect(image, ph, pw) : image;

  Var<T> pe = positional_encode(x, bp["pos_conv.weight"], bp["pos_conv.bias"]);
  Var<T> blocks = to_batch(pe, cfg.grid.rows, cfg.grid.cols);

  Decomposition<T> d;
  auto branch = [&](const std::string& br, bool disabled) {
    if (disabled) return tape.constant(Tensor<T>(s), br + ".zero");
    Var<T> m = detail::run_branch(br, blocks, bp, params, mode, d.routing);
    return (ph || pw) ? crop(m, s[2], s[3]) : m;
  };
  d.dx = branch("dx", cfg.ablation.no_dx);
  d.ox = branch("ox", cfg.ablation.no_ox);
  Var<T> base = cfg.ablation.no_x ? tape.constant(Tensor<T>(s), "x.zero") : image;
  d.output = sub(add(base, d.dx), d.ox);
  return d;
}

template <class T>
struct DecompositionValues {
  Tensor<T> output;
  Tensor<T> dx;
  Tensor<T> ox;
};

/// Eval-mode forward without gradients.
template <class T>
DecompositionValues<T> infer(const LSNetParams<T>& params, const Tensor<T>& image) {
  LSNetParams<T> local = params;
  Tape<T> tape;
  auto bp = bind_params(tape, local, false);
  auto d = forward(tape.constant(image, "input"), bp, local, Mode::eval);
  return {d.output.value(), d.dx.value(), d.ox.value()};
}

}  // namespace lsnet
