#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage or configuration
// error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lsnet/checkpoint.hpp"
#include "lsnet/config.hpp"
#include "lsnet/dataset.hpp"
#include "lsnet/image_io.hpp"
#include "lsnet/pipeline.hpp"

namespace lsnet::cli {

namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Options {
  std::optional<std::uint64_t> seed;
  std::string config_file;
  std::string out = "out";
  std::vector<std::string> overrides;  // key=value

  // train / ablate
  std::string manifest;
  std::optional<std::size_t> epochs, batch, resolution, val_interval;
  std::optional<double> lr;
  std::string ablation;

  // enhance / eval / hist / degrade
  std::string checkpoint;
  std::vector<std::string> inputs;
  bool decomposition = false;
  bool native = false;
  std::string split;
  std::optional<std::size_t> count, size;
  bool quiet = false;
};

// Summary line on stdout unless --quiet.
template <class... A>
void note(const Options& o, const char* fmt, A... args) {
  if (o.quiet) return;
  if constexpr (sizeof...(A) == 0)
    std::fputs(fmt, stdout);
  else
    std::printf(fmt, args...);
}

inline Settings resolve_settings(const Options& o) {
  Settings s;
  if (!o.config_file.empty()) {
    std::ifstream in(o.config_file);
    if (!in) throw ConfigError("cannot open config file " + o.config_file);
    s.apply(parse_key_values(in, o.config_file));
  }
  KeyValues kv;
  for (const auto& item : o.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
    kv.set(config_detail::trim(item.substr(0, eq)), config_detail::trim(item.substr(eq + 1)));
  }
  auto num = [](auto v) { return std::to_string(v); };
  if (o.seed) kv.set("seed", num(*o.seed));
  if (o.epochs) kv.set("epochs", num(*o.epochs));
  if (o.batch) kv.set("batch_size", num(*o.batch));
  if (o.resolution) kv.set("resolution", num(*o.resolution));
  if (o.val_interval) kv.set("val_interval", num(*o.val_interval));
  if (o.lr) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", *o.lr);
    kv.set("lr", buf);
  }
  if (!o.ablation.empty()) kv.set("ablation", o.ablation);
  if (o.count) kv.set("synth_count", num(*o.count));
  if (o.size) kv.set("synth_size", num(*o.size));
  s.apply(kv);
  s.validate();
  return s;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw DataError("cannot write " + path.string());
}

template <class F>
void write_stream(const fs::path& path, F&& fn) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  fn(out);
  if (!out) throw DataError("cannot write " + path.string());
}

/// The manifest given on the command line, or a freshly generated synthetic
/// set under <out>/synthetic.
inline DatasetManifest training_manifest(const Options& o, const Settings& s) {
  if (!o.manifest.empty()) return read_manifest(o.manifest);
  const std::size_t size = s.synth.size ? s.synth.size : s.train.height;
  const auto pairs = synthesize(s.synth, size, s.train.seed);
  return read_manifest(write_synthetic(fs::path(o.out) / "synthetic", pairs, s.synth.held_out));
}

inline std::vector<Sample> optional_split(const DatasetManifest& m, const std::string& split, std::size_t h,
                                          std::size_t w) {
  if (m.select(split).empty()) return {};
  return load_samples(m, split, h, w);
}

inline EpochHook progress(const Options& o, const std::string& label = {}) {
  if (o.quiet) return {};
  return [label](const CurvePoint& p) {
    if (!p.val_psnr && p.epoch % 10 != 0) return;
    std::fprintf(stderr, "%sepoch %zu  train_l1 %.6f", label.c_str(), p.epoch, p.train_l1);
    if (p.val_psnr) std::fprintf(stderr, "  val_psnr %.4f", *p.val_psnr);
    std::fputc('\n', stderr);
  };
}

inline int cmd_train(const Options& o) {
  const Settings s = resolve_settings(o);
  const auto m = training_manifest(o, s);
  const auto& t = s.train;
  const BatchLoader data = load_dataset(m, "train", t.height, t.width, t.batch_size, t.seed);
  const auto val = optional_split(m, "val", t.height, t.width);
  const TrainResult r = train(t, data, &val, progress(o));
  const fs::path out = o.out;
  save_checkpoint(out / "checkpoint_final.lsnt", r.final_checkpoint);
  save_checkpoint(out / "checkpoint_best.lsnt", r.best_checkpoint);
  write_stream(out / "curve.csv", [&](std::ostream& os) { write_curve_csv(os, r.curve); });
  write_text(out / "config.txt", s.text());
  note(o, "trained %zu epochs on %zu images; final train_l1 %.6f", t.epochs, data.size(), r.curve.back().train_l1);
  if (r.best_val_psnr) note(o, "; best val_psnr %.4f at epoch %zu", *r.best_val_psnr, r.best_epoch);
  note(o, "\n");
  return kOk;
}

inline int cmd_enhance(const Options& o) {
  const Checkpoint ck = load_checkpoint(fs::path(o.checkpoint));
  const auto& cfg = ck.params.config;
  for (const auto& in : o.inputs) {
    io::Image img = io::read_image(in);
    if (!o.native) img = io::resize_bilinear(img, cfg.input_height, cfg.input_width);
    const Enhanced e = enhance_image(ck.params, img);
    const fs::path stem = fs::path(o.out) / fs::path(in).stem();
    io::write_image(stem.string() + ".png", e.output);
    if (o.decomposition) {
      io::write_image(stem.string() + "_dx.png", visualize_signed(e.dx));
      io::write_image(stem.string() + "_ox.png", visualize_signed(e.ox));
    }
  }
  note(o, "enhanced %zu image(s) into %s\n", o.inputs.size(), o.out.c_str());
  return kOk;
}

inline int cmd_eval(const Options& o) {
  const auto m = read_manifest(o.manifest);
  std::optional<Checkpoint> ck;
  if (!o.checkpoint.empty()) ck = load_checkpoint(fs::path(o.checkpoint));
  const std::size_t res = o.resolution.value_or(0);
  const auto samples = load_samples(m, o.split, res, res);
  const EvalResult r = evaluate(ck ? &ck->params : nullptr, samples);
  if (r.mixed())
    std::fprintf(stderr, "warning: mixed manifest; full-reference columns cover %zu of %zu images\n", r.paired,
                 r.report.records.size());
  write_stream(fs::path(o.out) / "metrics.csv", [&](std::ostream& os) { r.report.write_csv(os); });
  if (!o.quiet) r.report.write_csv(std::cout);
  return kOk;
}

inline int cmd_ablate(const Options& o) {
  const Settings s = resolve_settings(o);
  const auto m = training_manifest(o, s);
  const auto& t = s.train;
  const BatchLoader data = load_dataset(m, "train", t.height, t.width, t.batch_size, t.seed);
  const auto val = load_samples(m, "val", t.height, t.width);
  auto hook = [&o](const std::string& variant, const CurvePoint& p) {
    if (auto h = progress(o, variant + ": ")) h(p);
  };
  const auto runs = ablate(t, data, val, nullptr, hook);
  const fs::path out = o.out;
  for (const auto& r : runs) {
    save_checkpoint(out / r.variant / "checkpoint_final.lsnt", r.result.final_checkpoint);
    write_stream(out / r.variant / "curve.csv", [&](std::ostream& os) { write_curve_csv(os, r.result.curve); });
    write_stream(out / r.variant / "metrics.csv", [&](std::ostream& os) { r.validation.report.write_csv(os); });
  }
  write_stream(out / "ablation.csv", [&](std::ostream& os) { write_ablation_table(os, runs); });
  write_stream(out / "ablation_curves.csv", [&](std::ostream& os) { write_ablation_curves(os, runs); });
  write_text(out / "config.txt", s.text());
  if (!o.quiet) write_ablation_table(std::cout, runs);
  return kOk;
}

inline int cmd_degrade(const Options& o) {
  const Settings s = resolve_settings(o);
  const auto& sy = s.synth;
  if (o.inputs.empty()) {
    const std::size_t size = sy.size ? sy.size : s.train.height;
    const auto manifest = write_synthetic(o.out, synthesize(sy, size, s.train.seed), sy.held_out);
    note(o, "wrote %zu synthetic pairs; manifest %s\n", sy.count, manifest.string().c_str());
    return kOk;
  }
  std::mt19937_64 rng(s.train.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& in : o.inputs) {
    physics::SceneModel scene;
    scene.radiance = io::read_image(in);
    const std::size_t h = scene.radiance.shape()[2], w = scene.radiance.shape()[3];
    if (sy.depth == "ramp")
      scene.depth = physics::depth_ramp(h, w, sy.depth_near, sy.depth_far, 2 * std::numbers::pi * u(rng));
    else if (sy.depth == "radial")
      scene.depth = physics::depth_radial(h, w, sy.depth_near, sy.depth_far, u(rng), u(rng));
    else
      scene.depth = physics::random_depth(h, w, rng, sy.depth_near, sy.depth_far);
    scene.eta = sy.eta;
    scene.ambient = sy.ambient;
    scene.fs_gain = sy.fs_gain;
    const auto c = physics::degrade(scene);
    io::write_image(fs::path(o.out) / (fs::path(in).stem().string() + ".png"), physics::clip01(c.total));
  }
  note(o, "degraded %zu image(s) into %s\n", o.inputs.size(), o.out.c_str());
  return kOk;
}

inline int cmd_hist(const Options& o) {
  std::optional<Checkpoint> ck;
  if (!o.checkpoint.empty()) ck = load_checkpoint(fs::path(o.checkpoint));
  std::vector<io::Image> images;
  for (const auto& in : o.inputs) images.push_back(io::read_image(in));
  const HistogramReport r = histogram_report(images, ck ? &ck->params : nullptr);
  const fs::path out = o.out;
  write_stream(out / "histogram.csv", [&](std::ostream& os) { write_histogram_csv(os, r); });
  io::write_image(out / "histogram.png", render_histograms(r));
  note(o, "mean bin  raw r %.2f g %.2f b %.2f\n", r.raw.mean_bin(0), r.raw.mean_bin(1), r.raw.mean_bin(2));
  if (r.compensation)
    note(o, "mean bin  dx-ox r %.2f g %.2f b %.2f (128 = zero)\n", r.compensation->mean_bin(0),
                r.compensation->mean_bin(1), r.compensation->mean_bin(2));
  return kOk;
}

inline int run(int argc, char** argv) {
  CLI::App app{"Lightweight underwater image enhancement: training, inference and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--seed", o.seed, "Random seed (overrides the config file)");
  app.add_option("--config", o.config_file, "Settings file with 'key = value' lines");
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--set", o.overrides, "Extra setting as key=value (repeatable)")
      ->allow_extra_args(false);
  app.add_flag("--quiet", o.quiet, "Errors only: no progress or summaries");

  auto training_flags = [&o](CLI::App* c, bool with_ablation) {
    c->add_option("--manifest", o.manifest, "Dataset manifest; synthetic data when omitted");
    c->add_option("--epochs", o.epochs, "Training epochs");
    c->add_option("--lr", o.lr, "Adam learning rate");
    c->add_option("--batch", o.batch, "Batch size");
    c->add_option("--resolution", o.resolution, "Square training resolution");
    c->add_option("--val-interval", o.val_interval, "Epochs between validation passes");
    if (with_ablation) c->add_option("--ablation", o.ablation, "Comma list of no_x, no_dx, no_ox, no_topk");
  };
  auto* train_cmd = app.add_subcommand("train", "Train on a manifest (or generated synthetic data)");
  training_flags(train_cmd, true);
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare full, wo_x, wo_dx, wo_ox and wo_topk");
  training_flags(ablate_cmd, false);

  auto* enhance_cmd = app.add_subcommand("enhance", "Enhance images with a checkpoint");
  enhance_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  enhance_cmd->add_option("inputs", o.inputs, "Input images")->required();
  enhance_cmd->add_flag("--decomposition", o.decomposition, "Also write dx and ox maps");
  enhance_cmd->add_flag("--native", o.native, "Keep input size instead of the checkpoint's resolution");

  auto* eval_cmd = app.add_subcommand("eval", "Score a manifest; enhanced outputs with --checkpoint, raw otherwise");
  eval_cmd->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  eval_cmd->add_option("--split", o.split, "Only this split (train, val or test)");
  eval_cmd->add_option("--resolution", o.resolution, "Resize before scoring");

  auto* degrade_cmd = app.add_subcommand("degrade", "Simulate underwater degradation, or generate a synthetic set");
  degrade_cmd->add_option("inputs", o.inputs, "Clean images; generates procedural scenes when omitted");
  degrade_cmd->add_option("--count", o.count, "Synthetic image count");
  degrade_cmd->add_option("--size", o.size, "Synthetic image side length");

  auto* hist_cmd = app.add_subcommand("hist", "Per-channel histograms of images and, with a checkpoint, of outputs");
  hist_cmd->add_option("inputs", o.inputs, "Images")->required();
  hist_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(o);
    if (ablate_cmd->parsed()) return cmd_ablate(o);
    if (enhance_cmd->parsed()) return cmd_enhance(o);
    if (eval_cmd->parsed()) return cmd_eval(o);
    if (degrade_cmd->parsed()) return cmd_degrade(o);
    if (hist_cmd->parsed()) return cmd_hist(o);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}

}  // namespace lsnet::cli
