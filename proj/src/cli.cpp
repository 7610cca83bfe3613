#include "vtrfeat/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "vtrfeat/errors.hpp"
#include "vtrfeat/io.hpp"
#include "vtrfeat/parallel.hpp"
#include "vtrfeat/training.hpp"
#include "vtrfeat/vtr_harness.hpp"

namespace vtrfeat::cli {

namespace fs = std::filesystem;
using io::json;

namespace {

constexpr const char* kVersion = "1.0.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options shared by the subcommands that localize.
struct HarnessOptions {
  std::string mode = "dense";
  std::string disparity = "ground_truth";
  double tau = kDefaultTemperature;
  int ransac_iterations = HarnessParams{}.ransac.iterations;
  double inlier_threshold = HarnessParams{}.ransac.inlier_threshold;
  int failure_threshold = HarnessParams{}.failure_threshold;
  std::uint64_t seed = 0;

  HarnessParams params() const {
    HarnessParams p;
    p.mode = parse_match_mode(mode);
    p.disparity = parse_disparity_source(disparity);
    p.match.tau = tau;
    p.ransac.iterations = ransac_iterations;
    p.ransac.inlier_threshold = inlier_threshold;
    p.ransac.seed = io::derive_seed(seed, 70);
    p.failure_threshold = failure_threshold;
    p.validate();
    return p;
  }

  void add_to(CLI::App* app) {
    app->add_option("--mode", mode, "Matching mode: dense or sparse")->capture_default_str();
    app->add_option("--disparity", disparity, "Disparity source: ground_truth or block_match")->capture_default_str();
    app->add_option("--tau", tau, "Matching temperature")->capture_default_str();
    app->add_option("--ransac-iterations", ransac_iterations)->capture_default_str();
    app->add_option("--inlier-threshold", inlier_threshold, "RANSAC inlier threshold (m)")->capture_default_str();
    app->add_option("--failure-threshold", failure_threshold, "Inliers below this count are a failure")
        ->capture_default_str();
    app->add_option("--seed", seed, "Root seed")->capture_default_str();
  }
};

struct Options {
  std::string config_file;
  int threads = 1;

  // synth
  std::string synth_kind = "dataset";
  std::uint64_t synth_seed = 0;
  int count = 200;
  int val_count = 50;
  int width = 64;
  int height = 48;
  std::vector<std::string> conditions;
  std::uint64_t scene_seed = 1000;
  int frames = 50;
  std::string condition = "noon";
  double spacing = SequenceConfig{}.spacing;
  double lateral_jitter = 0.0;
  double heading_jitter = 0.0;

  // train / eval-grad
  std::string data;
  std::string init;
  double lr = TrainConfig{}.learning_rate;
  int epochs = TrainConfig{}.max_epochs;
  int batch = TrainConfig{}.batch_size;
  int patience = TrainConfig{}.early_stop_patience;
  std::string stop_metric = "pose";
  std::uint64_t train_seed = 0;
  double lambda = LossConfig{}.lambda;
  double keypoint_weight = LossConfig{}.keypoint_weight;
  double gate = LossConfig{}.gate_threshold;
  double train_tau = LossConfig{}.tau;
  int window = NetworkConfig{}.window;
  int index = 0;
  double h = 1e-6;
  double tolerance = 1e-4;

  // teach / repeat / report
  std::string frames_dir;
  std::string map_dir;
  std::string ckpt;
  bool analytic = false;
  HarnessOptions harness;
  std::vector<std::string> inputs;

  std::string out;
};

// The resolved value of every option of `app` (defaults included).
json resolved_config(const CLI::App* app) {
  json j = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    if (opt->get_type_size() == 0) {
      j[name] = opt->count() > 0;
      continue;
    }
    if (opt->get_expected_max() > 1) {
      json a = json::array();
      for (const auto& r : opt->results()) a.push_back(r);
      j[name] = a;
    } else {
      j[name] = opt->count() > 0 ? opt->results().back() : opt->get_default_str();
    }
  }
  return j;
}

// The same settings as a config file that --config accepts.
std::string config_text(const std::string& sub, const json& cfg) {
  std::ostringstream os;
  os << "# resolved settings; rerun with: vtrfeat --config <this file> " << sub << " --out <dir>\n";
  for (const auto& [k, v] : cfg.items()) {
    // unset paths would fail validation on reload; --out is per run
    if (k == "out" || (v.is_string() && v.get<std::string>().empty()) || (v.is_array() && v.empty())) continue;
    os << sub << '.' << k << " = ";
    if (v.is_boolean()) {
      os << (v.get<bool>() ? "true" : "false");
    } else if (v.is_array()) {
      os << '[';
      for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << json(v[i].get<std::string>()).dump();
      os << ']';
    } else {
      os << json(v.get<std::string>()).dump();
    }
    os << '\n';
  }
  return os.str();
}

fs::path resolve_out(const std::string& out, const std::string& sub) {
  if (!out.empty()) return out;
  if (const char* env = std::getenv(kRunDirEnv); env && *env) return fs::path(env) / sub;
  throw UsageError("--out is required (or set " + std::string(kRunDirEnv) + ")");
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_run_manifest(const fs::path& dir, const std::string& sub, const std::vector<std::string>& args,
                        const json& config, const json& seeds, const json& extra) {
  json m = {{"format", "vtrfeat-run"},
            {"version", kVersion},
            {"subcommand", sub},
            {"args", args},
            {"threads", thread_count()},
            {"config", config},
            {"seeds", seeds}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  io::write_json(dir / "run_manifest.json", m);
  io::write_text(dir / "run_config.toml", config_text(sub, config));
}

fs::path checkpoint_dir(const std::string& p) {
  const fs::path dir(p);
  if (fs::exists(dir / "checkpoint" / "manifest.json")) return dir / "checkpoint";
  return dir;
}

Extractor make_extractor(const Options& o) {
  if (o.analytic) return Extractor::analytic(o.window);
  if (o.ckpt.empty()) throw UsageError("one of --ckpt or --analytic is required");
  return Extractor::learned(load_checkpoint(checkpoint_dir(o.ckpt)).weights);
}

LossConfig loss_config(const Options& o) {
  LossConfig lc;
  lc.lambda = o.lambda;
  lc.keypoint_weight = o.keypoint_weight;
  lc.gate_threshold = o.gate;
  lc.tau = o.train_tau;
  lc.validate();
  return lc;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

void print_report(std::ostream& out, const RunReport& r) {
  out << "teach " << r.teach_condition << " repeat " << r.repeat_condition << ": frames " << r.frames.size()
      << ", mean inliers " << fmt(r.mean_inliers) << ", failures " << r.failures << " ("
      << fmt(100.0 * r.failure_fraction) << "%), planar rmse " << fmt(r.planar_rmse) << " m\n";
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns the run-manifest extras.

json cmd_synth(const Options& o, const fs::path& out_dir, json& seeds, std::ostream& out) {
  if (o.synth_kind == "dataset") {
    DatasetConfig c;
    c.seed = o.synth_seed;
    c.train_count = o.count;
    c.val_count = o.val_count;
    c.width = o.width;
    c.height = o.height;
    c.conditions = o.conditions;
    const Dataset d = make_dataset(c, out_dir);
    seeds["dataset"] = c.seed;
    out << "wrote " << d.train.size() << " train / " << d.val.size() << " validation pairs (" << c.width << "x"
        << c.height << ") to " << out_dir.string() << "\n";
    return {{"kind", "dataset"}};
  }
  if (o.synth_kind == "sequence") {
    SequenceConfig c;
    c.scene_seed = o.scene_seed;
    c.seed = o.synth_seed;
    c.frames = o.frames;
    c.width = o.width;
    c.height = o.height;
    c.spacing = o.spacing;
    c.lateral_jitter = o.lateral_jitter;
    c.heading_jitter = o.heading_jitter;
    c.condition = o.condition;
    find_condition(c.condition);
    const Sequence s = generate_sequence(c);
    prepare_dir(out_dir);
    write_sequence(s, out_dir);
    seeds["scene"] = c.scene_seed;
    seeds["sequence"] = c.seed;
    out << "wrote " << s.frames.size() << " frames (" << c.condition << ") to " << out_dir.string() << "\n";
    return {{"kind", "sequence"}};
  }
  throw UsageError("--kind must be dataset or sequence");
}

json cmd_train(const Options& o, const fs::path& out_dir, json& seeds, std::ostream& out) {
  const Dataset d = read_dataset(o.data);
  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.max_epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.early_stop_patience = o.patience;
  tc.stop_metric = parse_stop_metric(o.stop_metric);
  tc.seed = io::derive_seed(o.train_seed, 2);
  tc.validate();
  const LossConfig lc = loss_config(o);

  ExtractorWeights init;
  if (!o.init.empty()) {
    init = load_checkpoint(checkpoint_dir(o.init)).weights;
  } else {
    NetworkConfig nc;
    nc.window = o.window;
    nc.seed = io::derive_seed(o.train_seed, 1);
    init = ExtractorWeights::initialize(nc);
    seeds["network_init"] = nc.seed;
  }
  seeds["shuffle"] = tc.seed;

  prepare_dir(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train(d, init, tc, lc, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << "  train " << fmt(e.train_loss) << "  val " << fmt(e.val_loss) << "  val_pose "
        << fmt(e.val_pose_loss) << "  val_err " << fmt(e.val_pose_err) << " m\n"
        << std::flush;
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(out_dir, r.best, lc.tau);
  io::write_text(out_dir / "loss_curve.csv", loss_curve_csv(r.history));
  out << "best epoch " << r.best_epoch << ", stopped at " << r.stopped_epoch << "; checkpoint in "
      << out_dir.string() << "\n";
  return {{"best_epoch", r.best_epoch}, {"stopped_epoch", r.stopped_epoch}, {"seconds", secs},
          {"parameters", r.best.parameter_count()}};
}

json cmd_eval_grad(const Options& o, const fs::path& out_dir, json& seeds, std::ostream& out, bool& numeric_fail) {
  const Dataset d = read_dataset(o.data);
  if (o.index < 0 || o.index >= static_cast<int>(d.train.size()))
    throw OutOfBounds("eval-grad: --index " + std::to_string(o.index) + " outside the training split");
  ExtractorWeights w;
  if (!o.ckpt.empty()) {
    w = load_checkpoint(checkpoint_dir(o.ckpt)).weights;
  } else {
    NetworkConfig nc;
    nc.window = o.window;
    nc.seed = io::derive_seed(o.train_seed, 1);
    w = ExtractorWeights::initialize(nc);
    seeds["network_init"] = nc.seed;
  }
  const GradientCheck g = check_gradient(training_pair(d.train[static_cast<std::size_t>(o.index)]), w, d.K,
                                         loss_config(o), o.h);
  prepare_dir(out_dir);
  const bool pass = g.rel_error <= o.tolerance;
  json res = {{"loss", g.loss},
              {"rel_error", g.rel_error},
              {"tolerance", o.tolerance},
              {"parameters", g.analytic.size()},
              {"seconds", g.seconds},
              {"pass", pass}};
  io::write_json(out_dir / "grad_check.json", res);
  out << "gradient check over " << g.analytic.size() << " weights: relative error " << fmt(g.rel_error) << " ("
      << (pass ? "pass" : "FAIL") << ", tolerance " << fmt(o.tolerance) << ") in " << fmt(g.seconds) << " s\n";
  numeric_fail = !pass;
  return {{"result", res}};
}

json cmd_teach(const Options& o, const fs::path& out_dir, json& seeds, std::ostream& out) {
  const HarnessParams hp = o.harness.params();
  const Sequence seq = read_sequence(o.frames_dir);
  const Extractor ex = make_extractor(o);
  const Map map = teach(seq, ex, hp);
  prepare_dir(out_dir);
  save_map(map, out_dir);
  seeds["ransac"] = hp.ransac.seed;
  out << "taught " << map.vertices.size() << " vertices (" << map.condition << ", " << map.fingerprint << ") into "
      << out_dir.string() << "\n";
  return {{"fingerprint", map.fingerprint}, {"vertices", map.vertices.size()}};
}

json cmd_repeat(const Options& o, const fs::path& out_dir, json& seeds, std::ostream& out) {
  const HarnessParams hp = o.harness.params();
  const Extractor ex = make_extractor(o);
  const Map map = load_map(o.map_dir, ex, hp);
  const Sequence seq = read_sequence(o.frames_dir);
  const RunReport r = repeat(seq, map, ex, hp);
  emit_report({r}, out_dir);
  seeds["ransac"] = hp.ransac.seed;
  print_report(out, r);
  return {{"mean_inliers", r.mean_inliers}, {"failures", r.failures}, {"failure_fraction", r.failure_fraction}};
}

json cmd_report(const Options& o, const fs::path& out_dir, std::ostream& out) {
  std::vector<RunReport> all;
  for (const auto& in : o.inputs)
    for (RunReport& r : read_report(in)) all.push_back(std::move(r));
  emit_report(all, out_dir);
  for (const auto& r : all) print_report(out, r);
  out << "condition matrix: " << (out_dir / "condition_matrix.csv").string() << "\n";
  return {{"runs", all.size()}};
}

void print_error(std::ostream& err, const std::string& kind, int code, const std::string& message) {
  err << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Differentiable stereo feature learning and teach-and-repeat localization on synthetic scenes",
               "vtrfeat"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "Config file of flat dotted keys (subcommand.option = value); flags override it");
  app.add_option("--threads", o.threads, "Worker threads for parallel loops")->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.require_subcommand(1);

  auto add_out = [&](CLI::App* s) {
    s->add_option("--out", o.out, std::string("Output directory (default $") + kRunDirEnv + "/<subcommand>)");
  };
  auto add_loss = [&](CLI::App* s) {
    s->add_option("--lambda", o.lambda, "Rotation weight in the pose loss")->capture_default_str();
    s->add_option("--keypoint-weight", o.keypoint_weight, "Weight of the keypoint loss")->capture_default_str();
    s->add_option("--gate", o.gate, "Ground-truth outlier gate (m)")->capture_default_str();
    s->add_option("--train-tau", o.train_tau, "Matching temperature during training")->capture_default_str();
    s->add_option("--window", o.window, "Keypoint window for new networks")->capture_default_str();
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate a training dataset or a teach/repeat sequence");
  synth->add_option("--kind", o.synth_kind, "dataset or sequence")->capture_default_str();
  synth->add_option("--seed", o.synth_seed, "Root seed")->capture_default_str();
  synth->add_option("--count", o.count, "Training pairs")->capture_default_str();
  synth->add_option("--val-count", o.val_count, "Validation pairs")->capture_default_str();
  synth->add_option("--width", o.width)->capture_default_str();
  synth->add_option("--height", o.height)->capture_default_str();
  synth->add_option("--conditions", o.conditions, "Lighting conditions to draw from (default: all eight)");
  synth->add_option("--scene-seed", o.scene_seed, "Scene of a sequence")->capture_default_str();
  synth->add_option("--frames", o.frames, "Frames in a sequence")->capture_default_str();
  synth->add_option("--condition", o.condition, "Lighting condition of a sequence")->capture_default_str();
  synth->add_option("--spacing", o.spacing, "Metres between frames")->capture_default_str();
  synth->add_option("--lateral-jitter", o.lateral_jitter, "Path offset amplitude (m)")->capture_default_str();
  synth->add_option("--heading-jitter", o.heading_jitter, "Heading offset amplitude (rad)")->capture_default_str();
  add_out(synth);

  CLI::App* train_cmd = app.add_subcommand("train", "Train the extractor end to end");
  train_cmd->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--init", o.init, "Start from this checkpoint")->check(CLI::ExistingDirectory);
  train_cmd->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--epochs", o.epochs, "Maximum epochs")->capture_default_str();
  train_cmd->add_option("--batch", o.batch, "Batch size")->capture_default_str();
  train_cmd->add_option("--patience", o.patience, "Early-stopping patience (epochs)")->capture_default_str();
  train_cmd->add_option("--stop-metric", o.stop_metric, "Validation metric for early stopping: pose or total")
      ->capture_default_str();
  train_cmd->add_option("--seed", o.train_seed, "Root seed")->capture_default_str();
  add_loss(train_cmd);
  add_out(train_cmd);

  CLI::App* grad = app.add_subcommand("eval-grad", "Check the training gradient against finite differences");
  grad->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  grad->add_option("--ckpt", o.ckpt, "Checkpoint (default: fresh weights from --seed)")
      ->check(CLI::ExistingDirectory);
  grad->add_option("--index", o.index, "Training pair to use")->capture_default_str();
  grad->add_option("--fd-step", o.h, "Relative finite-difference step")->capture_default_str();
  grad->add_option("--tolerance", o.tolerance, "Largest accepted relative error")->capture_default_str();
  grad->add_option("--seed", o.train_seed, "Root seed")->capture_default_str();
  add_loss(grad);
  add_out(grad);

  CLI::App* teach_cmd = app.add_subcommand("teach", "Build a map from a sequence");
  teach_cmd->add_option("--frames", o.frames_dir, "Sequence directory")->required()->check(CLI::ExistingDirectory);
  teach_cmd->add_option("--ckpt", o.ckpt, "Checkpoint or training run")->check(CLI::ExistingDirectory);
  teach_cmd->add_flag("--analytic", o.analytic, "Use the analytic features instead of a network");
  teach_cmd->add_option("--window", o.window, "Keypoint window of the analytic features")->capture_default_str();
  o.harness.add_to(teach_cmd);
  add_out(teach_cmd);

  CLI::App* repeat_cmd = app.add_subcommand("repeat", "Localize a sequence against a map");
  repeat_cmd->add_option("--map", o.map_dir, "Map directory from teach")->required()->check(CLI::ExistingDirectory);
  repeat_cmd->add_option("--frames", o.frames_dir, "Sequence directory")->required()->check(CLI::ExistingDirectory);
  repeat_cmd->add_option("--ckpt", o.ckpt, "Checkpoint or training run")->check(CLI::ExistingDirectory);
  repeat_cmd->add_flag("--analytic", o.analytic, "Use the analytic features instead of a network");
  repeat_cmd->add_option("--window", o.window, "Keypoint window of the analytic features")->capture_default_str();
  o.harness.add_to(repeat_cmd);
  add_out(repeat_cmd);

  CLI::App* report_cmd = app.add_subcommand("report", "Merge repeat reports and build the condition matrix");
  report_cmd->add_option("--in", o.inputs, "Report directories from repeat")->required()
      ->check(CLI::ExistingDirectory);
  add_out(report_cmd);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    print_error(err, "UsageError", kExitUsage, e.what());
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    set_thread_count(o.threads);
    const fs::path out_dir = resolve_out(o.out, name);
    json seeds = json::object();
    json extra;
    bool numeric_fail = false;
    if (name == "synth") extra = cmd_synth(o, out_dir, seeds, out);
    else if (name == "train") extra = cmd_train(o, out_dir, seeds, out);
    else if (name == "eval-grad") extra = cmd_eval_grad(o, out_dir, seeds, out, numeric_fail);
    else if (name == "teach") extra = cmd_teach(o, out_dir, seeds, out);
    else if (name == "repeat") extra = cmd_repeat(o, out_dir, seeds, out);
    else extra = cmd_report(o, out_dir, out);
    write_run_manifest(out_dir, name, args, resolved_config(sub), seeds, extra);
    if (numeric_fail) {
      print_error(err, "GradientMismatch", kExitNumeric, "relative error above tolerance");
      return kExitNumeric;
    }
    return kExitOk;
  } catch (const UsageError& e) {
    print_error(err, "UsageError", kExitUsage, e.what());
    err << sub->help();
    return kExitUsage;
  } catch (const ConfigError& e) {
    print_error(err, e.kind(), kExitUsage, e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    print_error(err, e.kind(), kExitNumeric, e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    print_error(err, e.kind(), kExitData, e.what());
    return kExitData;
  } catch (const std::exception& e) {
    print_error(err, "IoError", kExitData, e.what());
    return kExitData;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace vtrfeat::cli
