#include <algorithm>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ptrack/checkpoint.hpp"
#include "ptrack/config.hpp"
#include "ptrack/dataset.hpp"
#include "ptrack/errors.hpp"
#include "ptrack/metrics.hpp"
#include "ptrack/tracker.hpp"
#include "ptrack/training.hpp"

namespace fs = std::filesystem;
using namespace ptrack;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

/// Dataset root: positional argument first, PTRACK_DATA second.
std::string resolve_data_root(const std::string& arg) {
  if (!arg.empty()) return arg;
  if (const char* env = std::getenv("PTRACK_DATA"); env != nullptr && *env != '\0') return env;
  throw CLI::ValidationError("data", "no dataset root: pass it or set PTRACK_DATA");
}

Config load_config_or_default(const std::string& path) {
  if (path.empty()) return Config{};
  return load_config_file(path);
}

StepRule step_rule(const std::string& name) {
  if (name == "adam") return StepRule::adam;
  if (name == "sgd") return StepRule::fixed;
  throw DataError("config: unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::vector<Tracklet> load_nonempty(const std::string& root, const std::string& category) {
  std::vector<Tracklet> tracklets = load_tracklets(root, category);
  if (tracklets.empty())
    throw DataError("no tracklets under " + root +
                    (category.empty() ? "" : " with category " + category));
  return tracklets;
}

double center_dist(const Box7& a, const Box7& b) {
  double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

void print_metrics(std::size_t frames, std::size_t degraded, double success, double precision) {
  std::printf("frames %zu degraded %zu\n", frames, degraded);
  std::printf("Success %.1f Precision %.1f\n", success, precision);
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t tracklets = 4;
  std::size_t frames = 10;
  double clutter = 0.1;
  double dropout = 0.0;
};

/// Car-like box on a 3-waypoint random walk; waypoint yaw faces the next leg.
SynthSpec random_spec(Rng& rng, const SynthArgs& args) {
  SynthSpec spec;
  spec.width = rng.uniform(1.6, 2.0);
  spec.length = rng.uniform(3.6, 4.4);
  spec.height = rng.uniform(1.4, 1.7);
  spec.clutter_density = args.clutter;
  spec.dropout = args.dropout;
  spec.seed = rng.raw();
  double x = rng.uniform(-6.0, 6.0), y = rng.uniform(-6.0, 6.0);
  double heading = rng.uniform(-3.141592653589793, 3.141592653589793);
  std::vector<Waypoint> pts;
  for (int leg = 0; leg < 3; ++leg) {
    pts.push_back({x, y, 0.0, heading});
    double step = rng.uniform(1.5, 3.0);
    heading += rng.uniform(-0.6, 0.6);
    x += step * std::cos(heading);
    y += step * std::sin(heading);
  }
  for (std::size_t i = 0; i + 1 < pts.size(); ++i)
    pts[i].yaw = std::atan2(pts[i + 1].y - pts[i].y, pts[i + 1].x - pts[i].x);
  pts.back().yaw = pts[pts.size() - 2].yaw;
  spec.waypoints = pts;
  return spec;
}

int run_synth(const SynthArgs& args) {
  fs::create_directories(args.out);
  Rng root(args.seed);
  for (std::size_t i = 0; i < args.tracklets; ++i) {
    Rng tr = root.fork(i + 1);
    SynthSpec spec = random_spec(tr, args);
    Tracklet t = generate_synthetic(spec, args.frames);
    char id[16];
    std::snprintf(id, sizeof id, "t%04zu", i);
    t.id = id;
    save_tracklet((fs::path(args.out) / id).string(), t);
  }
  std::printf("wrote %zu tracklets (%zu frames each) under %s\n", args.tracklets, args.frames,
              args.out.c_str());
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string data, config, out = ".", category;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& args) {
  Config cfg = load_config_or_default(args.config);
  if (!args.category.empty()) cfg.category = args.category;
  StepRule rule = step_rule(cfg.optimizer);
  std::vector<Tracklet> tracklets = load_nonempty(resolve_data_root(args.data), cfg.category);

  SampleOptions sample_opts{cfg.n_template, cfg.n_search, cfg.search_margin, cfg.jitter_pos,
                            cfg.jitter_yaw_deg};
  Rng sample_rng(args.seed);
  std::vector<TrainSample> samples = make_training_samples(tracklets, sample_opts, sample_rng);
  if (samples.empty()) throw DataError("no usable training pairs in " + args.data);

  Model<float> model = make_model<float>(model_config(cfg), args.seed);
  TrainOptions opts;
  opts.steps = cfg.steps;
  opts.lr = cfg.lr;
  opts.rule = rule;
  opts.weights = {cfg.w_heatmap, cfg.w_offset, cfg.w_z, cfg.w_yaw};
  opts.seed = args.seed;
  TrainReport report = train(model, samples, opts);

  fs::create_directories(args.out);
  ParamList<float> params = named_parameters(model);
  std::string ckpt = (fs::path(args.out) / "model.ckpt").string();
  save_checkpoint(ckpt, params);
  write_loss_curve((fs::path(args.out) / "loss.txt").string(), report.losses);
  std::printf("trained %zu steps on %zu samples (%zu skipped)\n", report.losses.size(),
              samples.size(), report.skipped);
  std::printf("loss %.6f -> %.6f\n", report.losses.front(), report.losses.back());
  std::printf("checkpoint %s\n", ckpt.c_str());
  return kExitOk;
}

// ---- track ----------------------------------------------------------------

struct TrackArgs {
  std::string data, config, checkpoint, out, category;
  std::uint64_t seed = 0;
};

int run_track(const TrackArgs& args) {
  Config cfg = load_config_or_default(args.config);
  if (!args.category.empty()) cfg.category = args.category;
  std::vector<Tracklet> tracklets = load_nonempty(resolve_data_root(args.data), cfg.category);

  Model<float> model = make_model<float>(model_config(cfg), args.seed);
  if (!args.checkpoint.empty()) {
    ParamList<float> params = named_parameters(model);
    load_checkpoint(args.checkpoint, params);
  } else {
    std::printf("no checkpoint given; tracking with a fresh random init\n");
  }

  fs::create_directories(args.out);
  StageTimes total;
  std::size_t frames = 0, degraded = 0;
  for (const Tracklet& t : tracklets) {
    std::vector<FrameRecord> records = track_tracklet(model, t, args.seed);
    write_results((fs::path(args.out) / (t.id + ".txt")).string(), records);
    std::size_t t_degraded = 0;
    for (const FrameRecord& rec : records) {
      total = total + rec.times;
      if (rec.degraded) ++t_degraded;
    }
    frames += records.size();
    degraded += t_degraded;
    std::printf("tracklet %s frames %zu degraded %zu\n", t.id.c_str(), records.size(), t_degraded);
  }
  std::size_t stepped = frames - tracklets.size();  // record 0 is the GT init
  if (stepped > 0)
    std::printf("mean per frame: backbone %.1f ms correlation %.1f ms head %.1f ms total %.1f ms\n",
                total.backbone / stepped, total.correlation / stepped, total.head / stepped,
                total.total / stepped);
  std::printf("results under %s (%zu/%zu frames degraded)\n", args.out.c_str(), degraded, frames);
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string data, config, checkpoint, results, out, category;
  std::uint64_t seed = 0;
};

EvalReport eval_result_files(const std::string& results) {
  std::vector<std::string> files;
  if (fs::is_directory(results)) {
    for (const fs::directory_entry& e : fs::directory_iterator(results))
      if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(results);
  }
  if (files.empty()) throw DataError("no .txt result files under " + results);

  EvalReport report;
  for (const std::string& file : files) {
    for (const FrameRecord& rec : read_results(file)) {
      if (!rec.gt) continue;
      report.ious.push_back(iou3d(rec.pred, *rec.gt));
      report.dists.push_back(center_dist(rec.pred, *rec.gt));
      if (rec.degraded) ++report.degraded;
    }
  }
  report.frames = report.ious.size();
  report.success = success_metric(report.ious);
  report.precision = precision_metric(report.dists);
  return report;
}

int run_eval(const EvalArgs& args) {
  EvalReport report;
  if (!args.results.empty()) {
    report = eval_result_files(args.results);
  } else {
    Config cfg = load_config_or_default(args.config);
    if (!args.category.empty()) cfg.category = args.category;
    std::vector<Tracklet> tracklets = load_nonempty(resolve_data_root(args.data), cfg.category);
    Model<float> model = make_model<float>(model_config(cfg), args.seed);
    if (!args.checkpoint.empty()) {
      ParamList<float> params = named_parameters(model);
      load_checkpoint(args.checkpoint, params);
    }
    report = one_pass_eval(tracklets, model, args.seed, cfg.category);
  }
  print_metrics(report.frames, report.degraded, report.success, report.precision);
  if (!args.out.empty()) {
    std::ofstream out(args.out, std::ios::trunc);
    if (!out) throw DataError("eval: cannot open " + args.out);
    out << serialize_eval_report(report, true);
  }
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------

struct NamedCheck {
  std::string name;
  std::function<GradCheckReport()> run;
};

int run_gradcheck(std::uint64_t seed) {
  std::vector<NamedCheck> checks;

  checks.push_back({"elementwise-chain", [seed] {
                      Rng rng(mix_seed(seed));
                      ParamList<double> params;
                      params.emplace_back("w", uniform_tensor<double>({3, 4}, -1.0, 1.0, rng));
                      params[0].second.set_requires_grad(true);
                      auto f = [&params] {
                        Tensor<double>& w = params[0].second;
                        return sum_all(mul(sigmoid(w), softplus(square(w))));
                      };
                      return finite_diff_check<double>(f, params, 1e-6, 1e-5);
                    }});

  checks.push_back({"matmul-chain", [seed] {
                      Rng rng(mix_seed(seed) + 1);
                      ParamList<double> params;
                      params.emplace_back("a", uniform_tensor<double>({4, 3}, -1.0, 1.0, rng));
                      params.emplace_back("b", uniform_tensor<double>({3, 5}, -1.0, 1.0, rng));
                      for (auto& [name, t] : params) t.set_requires_grad(true);
                      auto f = [&params] {
                        return sum_all(square(matmul(params[0].second, params[1].second)));
                      };
                      return finite_diff_check<double>(f, params, 1e-6, 1e-5);
                    }});

  checks.push_back({"attention-block", [seed] {
                      Rng rng(mix_seed(seed) + 2);
                      AttentionParams<double> p = make_attention_params<double>(4, 2, true, rng);
                      PosEmbedParams<double> pe = make_pos_embed_params<double>(4, rng);
                      Tensor<double> tokens = uniform_tensor<double>({6, 4}, -1.0, 1.0, rng);
                      Tensor<double> coords = uniform_tensor<double>({6, 3}, -1.0, 1.0, rng);
                      ParamList<double> params;
                      collect_params("attn.", p, params);
                      collect_params("pos.", pe, params);
                      for (auto& [name, t] : params) t.set_requires_grad(true);
                      auto f = [&] {
                        return sum_all(self_attention(tokens, pos_embed(coords, pe), p));
                      };
                      return finite_diff_check<double>(f, params, 1e-6, 1e-5);
                    }});

  checks.push_back({"pipeline-loss", [seed] {
                      ModelConfig cfg;
                      cfg.n_template = 64;
                      cfg.n_search = 64;
                      cfg.backbone.channels = {2, 2, 4};
                      cfg.backbone.out_channels = 4;
                      cfg.backbone.neighbors = {4, 4, 4};
                      cfg.backbone.heads = 2;
                      cfg.correlation_k = 4;
                      cfg.iterations = 1;
                      cfg.head_channels = 2;
                      cfg.grid = {4.8, 4.8, 1.2};
                      Model<double> model = make_model<double>(cfg, seed);
                      Rng rng(mix_seed(seed) + 3);
                      PointCloud scene;
                      for (int i = 0; i < 16; ++i) {
                        scene.coords.push_back(rng.uniform(-1.5, 1.5));
                        scene.coords.push_back(rng.uniform(-1.5, 1.5));
                        scene.coords.push_back(rng.uniform(-0.5, 0.5));
                      }
                      PointCloud tmpl = random_resample(scene, cfg.n_template, rng);
                      PointCloud search = random_resample(scene, cfg.n_search, rng);
                      Box7 gt{0.4, -0.3, 0.1, 1.0, 2.0, 1.0, 0.3};
                      ParamList<double> params = named_parameters(model);
                      auto f = [&, seed] {
                        ForwardResult<double> fwd = forward(model, tmpl, search, seed + 99);
                        return compute_loss(fwd.out, gt, cfg.grid, LossWeights{}).total;
                      };
                      return finite_diff_check<double>(f, params, 1e-5, 1e-4);
                    }});

  bool all_ok = true;
  for (const NamedCheck& check : checks) {
    GradCheckReport report = check.run();
    all_ok = all_ok && report.all_passed;
    std::printf("[%s] %-17s max_rel_err %.3e (%zu parameter tensors)\n",
                report.all_passed ? "PASS" : "FAIL", check.name.c_str(), report.worst,
                report.entries.size());
    if (!report.all_passed)
      for (const GradCheckEntry& e : report.entries)
        if (!e.passed)
          std::printf("  %s: rel err %.3e at element %zu\n", e.name.c_str(), e.max_rel_err,
                      e.worst_index);
  }
  return all_ok ? kExitOk : kExitCheck;
}

// ---- bench ----------------------------------------------------------------

int run_bench(const std::string& config, std::uint64_t seed, std::size_t frames) {
  Config cfg = load_config_or_default(config);
  Model<float> model = make_model<float>(model_config(cfg), seed);

  SynthSpec spec;
  spec.seed = seed;
  spec.waypoints = {{0, 0, 0, 0}, {4, 1, 0, 0.3}};
  Tracklet t = generate_synthetic(spec, frames + 1);

  TrackerState<float> state = init(t.frames[0].cloud, *t.frames[0].gt, model, seed);
  for (std::size_t f = 1; f < t.frames.size(); ++f) step(state, t.frames[f].cloud);

  const double n = static_cast<double>(frames);
  std::printf("frames %zu (template %zu, search %zu, %zu iterations)\n", frames, cfg.n_template,
              cfg.n_search, cfg.iterations);
  std::printf("stage crop        %8.1f ms\n", state.accum.crop / n);
  std::printf("stage backbone    %8.1f ms\n", state.accum.backbone / n);
  std::printf("stage correlation %8.1f ms\n", state.accum.correlation / n);
  std::printf("stage head        %8.1f ms\n", state.accum.head / n);
  std::printf("stage total       %8.1f ms\n", state.accum.total / n);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point-cloud single object tracker"};
  app.require_subcommand(1);

  SynthArgs synth;
  CLI::App* cmd_synth = app.add_subcommand("synth", "generate synthetic tracklets");
  cmd_synth->add_option("--out", synth.out, "output directory")->required();
  cmd_synth->add_option("--seed", synth.seed, "rng seed");
  cmd_synth->add_option("--tracklets", synth.tracklets, "tracklet count");
  cmd_synth->add_option("--frames", synth.frames, "frames per tracklet")->check(CLI::Range(2, 1 << 20));
  cmd_synth->add_option("--clutter", synth.clutter, "clutter points per cubic meter");
  cmd_synth->add_option("--dropout", synth.dropout, "sensor dropout rate in [0, 1)");

  TrainArgs tr;
  CLI::App* cmd_train = app.add_subcommand("train", "train on a tracklet directory");
  cmd_train->add_option("data", tr.data, "dataset root (default: $PTRACK_DATA)");
  cmd_train->add_option("--config", tr.config, "config file")->check(CLI::ExistingFile);
  cmd_train->add_option("--seed", tr.seed, "rng seed");
  cmd_train->add_option("--out", tr.out, "output directory for checkpoint and loss curve");
  cmd_train->add_option("--category", tr.category, "category filter override");

  TrackArgs tk;
  CLI::App* cmd_track = app.add_subcommand("track", "run the tracker, write result files");
  cmd_track->add_option("data", tk.data, "dataset root (default: $PTRACK_DATA)");
  cmd_track->add_option("--config", tk.config, "config file")->check(CLI::ExistingFile);
  cmd_track->add_option("--checkpoint", tk.checkpoint, "trained weights")->check(CLI::ExistingFile);
  cmd_track->add_option("--seed", tk.seed, "rng seed");
  cmd_track->add_option("--out", tk.out, "result directory")->required();
  cmd_track->add_option("--category", tk.category, "category filter override");

  EvalArgs ev;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Success/Precision from results or end-to-end");
  cmd_eval->add_option("data", ev.data, "dataset root (default: $PTRACK_DATA)");
  cmd_eval->add_option("--results", ev.results, "result file or directory (skips tracking)");
  cmd_eval->add_option("--config", ev.config, "config file")->check(CLI::ExistingFile);
  cmd_eval->add_option("--checkpoint", ev.checkpoint, "trained weights")->check(CLI::ExistingFile);
  cmd_eval->add_option("--seed", ev.seed, "rng seed");
  cmd_eval->add_option("--out", ev.out, "write the full report here");
  cmd_eval->add_option("--category", ev.category, "category filter override");

  std::uint64_t gc_seed = 0;
  CLI::App* cmd_gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  cmd_gc->add_option("--seed", gc_seed, "rng seed");

  std::string bench_config;
  std::uint64_t bench_seed = 0;
  std::size_t bench_frames = 2;
  CLI::App* cmd_bench = app.add_subcommand("bench", "per-stage timings at configured sizes");
  cmd_bench->add_option("--config", bench_config, "config file")->check(CLI::ExistingFile);
  cmd_bench->add_option("--seed", bench_seed, "rng seed");
  cmd_bench->add_option("--frames", bench_frames, "tracked frames to average over")
      ->check(CLI::Range(1, 1000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (cmd_synth->parsed()) return run_synth(synth);
    if (cmd_train->parsed()) return run_train(tr);
    if (cmd_track->parsed()) return run_track(tk);
    if (cmd_eval->parsed()) return run_eval(ev);
    if (cmd_gc->parsed()) return run_gradcheck(gc_seed);
    if (cmd_bench->parsed()) return run_bench(bench_config, bench_seed, bench_frames);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
