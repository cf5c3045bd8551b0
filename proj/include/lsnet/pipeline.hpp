#pragma once

// Training loop, inference, evaluation, the ablation harness and
// per-channel histogram analysis.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsnet/adam.hpp"
#include "lsnet/checkpoint.hpp"
#include "lsnet/config.hpp"
#include "lsnet/dataset.hpp"
#include "lsnet/metrics.hpp"
#include "lsnet/model.hpp"

namespace lsnet {

// ---------------------------------------------------------------------------
// Inference

struct Enhanced {
  io::Image output;  // J clamped to [0, 1]
  io::Image dx;
  io::Image ox;
};

/// Eval-mode forward pass on one (1, 3, H, W) image.
inline Enhanced enhance_image(const LSNetParams<float>& params, const io::Image& img) {
  auto r = infer(params, img.cast<float>());
  return {physics::clip01(r.output.cast<double>()), r.dx.cast<double>(), r.ox.cast<double>()};
}

/// Signed map to displayable pixels: v -> 0.5 + v / 2, clamped.
inline io::Image visualize_signed(const io::Image& v) {
  io::Image out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp(0.5 + 0.5 * v[i], 0.0, 1.0);
  return out;
}

/// Mean PSNR of enhanced outputs against references over paired samples.
inline double mean_psnr(const LSNetParams<float>& params, const std::vector<Sample>& samples) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (!s.reference) continue;
    total += metrics::psnr(enhance_image(params, s.raw).output, *s.reference);
    ++n;
  }
  if (n == 0) throw DataError("validation needs paired samples");
  return total / static_cast<double>(n);
}

/// Mean PSNR of the unprocessed inputs against their references.
inline double raw_psnr(const std::vector<Sample>& samples) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : samples)
    if (s.reference) total += metrics::psnr(s.raw, *s.reference), ++n;
  if (n == 0) throw DataError("no paired samples");
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training

struct CurvePoint {
  std::size_t epoch = 0;
  double train_l1 = 0;             // sample-weighted mean batch loss over the epoch
  std::optional<double> val_psnr;  // at validation epochs only
};

struct TrainResult {
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;  // highest validation PSNR; final when no validation set
  std::size_t best_epoch = 0;
  std::optional<double> best_val_psnr;
  std::vector<CurvePoint> curve;
};

/// Called after every epoch, e.g. for progress output.
using EpochHook = std::function<void(const CurvePoint&)>;

inline void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& curve) {
  os << "epoch,train_l1,val_psnr\n";
  os.precision(9);
  for (const auto& p : curve) {
    os << p.epoch << ',' << p.train_l1 << ',';
    if (p.val_psnr) os << *p.val_psnr;
    os << '\n';
  }
}

/// Adam + L1 on the paired training split, validating every val_interval
/// epochs and after the last one. Throws NumericError naming the first
/// non-finite tensor if the loss or a gradient stops being finite.
inline TrainResult train(const TrainConfig& cfg, const BatchLoader& data, const std::vector<Sample>* val = nullptr,
                         const EpochHook& hook = {}) {
  cfg.validate();
  LSNetParams<float> params = init_params<float>(cfg.model, cfg.seed);
  AdamState<float> adam(cfg.adam, std::span<const Tensor<float>>(params.tensors));
  const bool validate = val && !val->empty();

  TrainResult result;
  auto snapshot = [&] { return Checkpoint{params, adam.step, adam}; };
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0;
    std::size_t seen = 0;
    for (const auto& idx : data.plan(epoch)) {
      const Batch b = make_batch(data.samples(), idx);
      Tape<float> tape;
      const auto bp = bind_params(tape, params, true);
      const auto d = forward(tape.constant(b.raw, "input"), bp, params, Mode::train);
      const auto loss = l1_loss(d.output, tape.constant(b.reference, "target"));
      const float lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + "; first non-finite tensor: " +
                           tape.first_non_finite().value_or("loss"));
      tape.backward(loss);
      std::vector<Tensor<float>> grads;
      grads.reserve(bp.vars.size());
      for (std::size_t i = 0; i < bp.vars.size(); ++i) {
        grads.push_back(bp.vars[i].grad());
        if (!grads.back().all_finite())
          throw NumericError("non-finite gradient at epoch " + std::to_string(epoch) + " for " + params.names[i]);
      }
      adam_step<float>(params.tensors, grads, adam);
      loss_sum += static_cast<double>(lv) * static_cast<double>(idx.size());
      seen += idx.size();
    }
    CurvePoint pt{epoch, loss_sum / static_cast<double>(seen), std::nullopt};
    if (validate && (epoch % cfg.val_interval == 0 || epoch == cfg.epochs)) {
      pt.val_psnr = mean_psnr(params, *val);
      if (!result.best_val_psnr || *pt.val_psnr > *result.best_val_psnr) {
        result.best_val_psnr = pt.val_psnr;
        result.best_epoch = epoch;
        result.best_checkpoint = snapshot();
      }
    }
    result.curve.push_back(pt);
    if (hook) hook(pt);
  }
  result.final_checkpoint = snapshot();
  if (!validate) {
    result.best_checkpoint = result.final_checkpoint;
    result.best_epoch = cfg.epochs;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  metrics::MetricsReport report;
  std::size_t paired = 0;  // images scored against a reference
  bool mixed() const { return paired != 0 && paired != report.records.size(); }
};

/// Scores enhanced outputs (or the raw inputs when params is null) in sample
/// order. Full-reference columns are filled for paired samples only.
inline EvalResult evaluate(const LSNetParams<float>* params, const std::vector<Sample>& samples) {
  EvalResult r;
  for (const auto& s : samples) {
    const io::Image x = params ? enhance_image(*params, s.raw).output : s.raw;
    r.report.records.push_back(metrics::evaluate(s.name, x, s.reference ? &*s.reference : nullptr));
    if (s.reference) ++r.paired;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  std::string variant;  // full, wo_x, wo_dx, wo_ox, wo_topk
  std::size_t params = 0;
  TrainResult result;
  EvalResult validation;  // final checkpoint on the validation split
};

inline const std::vector<std::pair<std::string, Ablation>>& ablation_variants() {
  static const std::vector<std::pair<std::string, Ablation>> v = {
      {"full", Ablation{}},
      {"wo_x", Ablation{.no_x = true}},
      {"wo_dx", Ablation{.no_dx = true}},
      {"wo_ox", Ablation{.no_ox = true}},
      {"wo_topk", Ablation{.no_topk = true}},
  };
  return v;
}

/// Trains every variant with the same seed, data and schedule. A result for
/// the full model trained under cfg may be passed in to skip retraining it.
inline std::vector<AblationRun> ablate(const TrainConfig& cfg, const BatchLoader& data, const std::vector<Sample>& val,
                                       const TrainResult* full = nullptr,
                                       const std::function<void(const std::string&, const CurvePoint&)>& hook = {}) {
  std::vector<AblationRun> runs;
  for (const auto& [name, flags] : ablation_variants()) {
    TrainConfig c = cfg;
    c.model.ablation = flags;
    AblationRun run;
    run.variant = name;
    if (name == "full" && full) {
      if (!(full->final_checkpoint.params.config == c.model))
        throw std::invalid_argument("ablate: supplied full-model result was trained with another config");
      run.result = *full;
    } else {
      const std::string label = name;
      run.result = train(c, data, &val, hook ? EpochHook([&hook, label](const CurvePoint& p) { hook(label, p); })
                                             : EpochHook{});
    }
    run.params = param_count(run.result.final_checkpoint.params).total;
    run.validation = evaluate(&run.result.final_checkpoint.params, val);
    runs.push_back(std::move(run));
  }
  return runs;
}

/// One row per variant: parameter count, validation PSNR (final and best),
/// final training loss and mean no-reference scores on the validation split.
inline void write_ablation_table(std::ostream& os, const std::vector<AblationRun>& runs) {
  os << "variant,params,final_val_psnr,best_val_psnr,best_epoch,final_train_l1,val_SSIM,val_UIQM,val_UCIQE\n";
  os.precision(9);
  for (const auto& r : runs) {
    const auto m = r.validation.report.mean();
    os << r.variant << ',' << r.params << ',' << r.result.curve.back().val_psnr.value_or(NAN) << ','
       << r.result.best_val_psnr.value_or(NAN) << ',' << r.result.best_epoch << ','
       << r.result.curve.back().train_l1 << ',' << m.ssim.value_or(NAN) << ',' << m.uiqm << ',' << m.uciqe << '\n';
  }
}

/// Validation PSNR, one column per variant and one row per validated epoch.
inline void write_ablation_curves(std::ostream& os, const std::vector<AblationRun>& runs) {
  os << "epoch";
  for (const auto& r : runs) os << ',' << r.variant;
  os << '\n';
  os.precision(9);
  const std::size_t epochs = runs.empty() ? 0 : runs.front().result.curve.size();
  for (std::size_t e = 0; e < epochs; ++e) {
    if (!runs.front().result.curve[e].val_psnr) continue;
    os << e + 1;
    for (const auto& r : runs) {
      os << ',';
      if (e < r.result.curve.size() && r.result.curve[e].val_psnr) os << *r.result.curve[e].val_psnr;
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Histograms

inline constexpr std::size_t kHistogramBins = 256;

struct ChannelHistogram {
  std::array<std::array<std::uint64_t, kHistogramBins>, 3> counts{};

  /// Bin of a value in [0, 1]; 8-bit level k lands in bin k.
  static std::size_t bin(double v) {
    const double b = std::floor(std::clamp(v, 0.0, 1.0) * static_cast<double>(kHistogramBins));
    return std::min(kHistogramBins - 1, static_cast<std::size_t>(b));
  }

  void add(const io::Image& img) {
    require_shape(img.shape()[1] == 3, "histogram needs 3 channels, got " + img.shape().str());
    for (std::size_t n = 0; n < img.shape()[0]; ++n)
      for (std::size_t c = 0; c < 3; ++c)
        for (double v : img.plane(n, c)) ++counts[c][bin(v)];
  }

  std::uint64_t total(std::size_t c) const {
    std::uint64_t s = 0;
    for (auto v : counts[c]) s += v;
    return s;
  }

  /// Mean bin index of one channel.
  double mean_bin(std::size_t c) const {
    double s = 0;
    for (std::size_t b = 0; b < kHistogramBins; ++b) s += static_cast<double>(b) * static_cast<double>(counts[c][b]);
    return s / static_cast<double>(std::max<std::uint64_t>(1, total(c)));
  }
};

/// Raw inputs, and with a model also the enhanced outputs and dx − ox
/// (shifted by 0.5 + v/2 so zero sits mid-range).
struct HistogramReport {
  ChannelHistogram raw;
  std::optional<ChannelHistogram> enhanced;
  std::optional<ChannelHistogram> compensation;
};

inline HistogramReport histogram_report(const std::vector<io::Image>& images,
                                        const LSNetParams<float>* params = nullptr) {
  HistogramReport r;
  if (params) r.enhanced.emplace(), r.compensation.emplace();
  for (const auto& img : images) {
    r.raw.add(img);
    if (!params) continue;
    const Enhanced e = enhance_image(*params, img);
    r.enhanced->add(e.output);
    io::Image diff(e.dx.shape());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = e.dx[i] - e.ox[i];
    r.compensation->add(visualize_signed(diff));
  }
  return r;
}

inline void write_histogram_csv(std::ostream& os, const HistogramReport& r) {
  const char* ch = "rgb";
  os << "bin";
  auto header = [&](const char* prefix) {
    for (std::size_t c = 0; c < 3; ++c) os << ',' << prefix << '_' << ch[c];
  };
  header("raw");
  if (r.enhanced) header("enhanced");
  if (r.compensation) header("dx_minus_ox");
  os << '\n';
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    os << b;
    for (std::size_t c = 0; c < 3; ++c) os << ',' << r.raw.counts[c][b];
    if (r.enhanced)
      for (std::size_t c = 0; c < 3; ++c) os << ',' << r.enhanced->counts[c][b];
    if (r.compensation)
      for (std::size_t c = 0; c < 3; ++c) os << ',' << r.compensation->counts[c][b];
    os << '\n';
  }
}

/// Stacked panels (raw, enhanced, dx − ox), each with the three channels
/// drawn as red, green and blue polylines scaled to the panel maximum.
inline io::Image render_histograms(const HistogramReport& r) {
  std::vector<const ChannelHistogram*> panels{&r.raw};
  if (r.enhanced) panels.push_back(&*r.enhanced);
  if (r.compensation) panels.push_back(&*r.compensation);
  constexpr std::size_t kPanelH = 128, kMargin = 8, kW = kHistogramBins * 2 + 2 * kMargin;
  const std::size_t H = panels.size() * (kPanelH + kMargin) + kMargin;
  io::Image img(Shape(1, 3, H, kW), 1.0);
  auto plot = [&](std::size_t y, std::size_t x, std::size_t c) {
    for (std::size_t k = 0; k < 3; ++k) img(0, k, y, x) = k == c ? 0.85 : 0.1;
  };
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const std::size_t top = kMargin + p * (kPanelH + kMargin), base = top + kPanelH - 1;
    for (std::size_t x = kMargin - 1; x <= kW - kMargin; ++x)
      for (std::size_t k = 0; k < 3; ++k) img(0, k, base + 1, x) = 0.4;  // axis
    std::uint64_t peak = 1;
    for (const auto& ch : panels[p]->counts) peak = std::max(peak, *std::max_element(ch.begin(), ch.end()));
    for (std::size_t c = 0; c < 3; ++c) {
      auto height = [&](std::size_t b) {
        return static_cast<std::size_t>(std::lround(static_cast<double>(panels[p]->counts[c][b]) /
                                                    static_cast<double>(peak) * (kPanelH - 1)));
      };
      for (std::size_t b = 0; b < kHistogramBins; ++b) {
        const std::size_t h0 = height(b), h1 = height(b + 1 < kHistogramBins ? b + 1 : b);
        for (std::size_t dx = 0; dx < 2; ++dx) {
          // Vertical span between consecutive samples keeps the line connected.
          const std::size_t lo = std::min(h0, dx ? h1 : h0), hi = std::max(h0, dx ? h1 : h0);
          for (std::size_t h = lo; h <= hi; ++h) plot(base - h, kMargin + 2 * b + dx, c);
        }
      }
    }
  }
  return img;
}

}  // namespace lsnet
