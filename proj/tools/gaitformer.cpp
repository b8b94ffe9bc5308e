#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gaitformer/attributes.hpp"
#include "gaitformer/checkpoint.hpp"
#include "gaitformer/config.hpp"
#include "gaitformer/eval.hpp"
#include "gaitformer/experiment.hpp"
#include "gaitformer/pipeline.hpp"
#include "gaitformer/synth.hpp"
#include "gaitformer/train.hpp"
#include "gaitformer/verify.hpp"

namespace fs = std::filesystem;
using namespace gaitformer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string run_dir;
  std::string command_line;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "JSON configuration file");
  sub->add_option("--set", c.sets, "override a configuration key, e.g. --set train.tau=0.1")->take_all();
  sub->add_option("--run-dir", c.run_dir, "output directory (default: <runs root>/<subcommand>)");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_config(c.config);
  for (const auto& s : c.sets) apply_override(cfg, s);
  cfg = cfg.resolved();
  cfg.validate();
  return cfg;
}

fs::path prepare_run(const Common& c, const RunConfig& cfg, const std::string& name) {
  const fs::path dir = c.run_dir.empty() ? runs_root(cfg) / name : fs::path(c.run_dir);
  write_config_snapshot(cfg, dir);
  std::ofstream(dir / "command.txt") << c.command_line << '\n';
  return dir;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing required ") + what);
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : gaitformer::detail::split(s, ',')) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated list of integers, got '" + s + "'");
    }
  }
  return out;
}

void write_loss_csv(const fs::path& path, const std::vector<EpochLog>& logs) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,lr,loss_supcon,loss_appearance,loss_total\n" << std::setprecision(9);
  for (const auto& l : logs)
    out << l.epoch << ',' << l.lr << ',' << l.loss_supcon << ',' << l.loss_appearance << ',' << l.loss_total << '\n';
}

void print_epoch(const EpochLog& l) {
  std::cout << "epoch " << l.epoch << " lr " << l.lr << " supcon " << l.loss_supcon << " appearance "
            << l.loss_appearance << " total " << l.loss_total << std::endl;
}

AttributeMap load_map(const RunConfig& cfg) {
  return load_attribute_map(cfg.paths.attribute_map.empty() ? default_attribute_map_path()
                                                            : fs::path(cfg.paths.attribute_map));
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t ids = 32, takes = 3, frames = 96;
  std::optional<std::uint64_t> seed;
  bool casia = false;
  std::string out;
};

int run_synth(const Common& c, const SynthArgs& a) {
  RunConfig cfg = resolve_config(c);
  if (a.seed) cfg = [&] { auto r = cfg; r.seed = *a.seed; return r.resolved(); }();
  const fs::path dir = prepare_run(c, cfg, "synth-data");
  std::vector<ProcessedTracklet> tracklets;
  if (a.casia) {
    synth::CasiaOptions o;
    o.identities = a.ids;
    o.runs = a.takes;
    o.sequence.frames = a.frames;
    o.seed = cfg.seed;
    tracklets = synth::make_casia_layout(o);
  } else {
    synth::CorpusOptions o;
    o.identities = a.ids;
    o.takes_per_identity = a.takes;
    o.sequence.frames = a.frames;
    o.seed = cfg.seed;
    tracklets = synth::to_tracklets(synth::make_corpus(o));
  }
  const fs::path out = a.out.empty() ? dir / "tracklets.txt" : fs::path(a.out);
  save_tracklet_archive(out, tracklets);
  std::cout << "wrote " << tracklets.size() << " tracklets to " << out.string() << '\n';
  return kExitOk;
}

struct BuildArgs {
  std::string detections;
};

int run_build(const Common& c, const BuildArgs& a) {
  require_file(a.detections, "detection file");
  const RunConfig cfg = resolve_config(c);
  const fs::path dir = prepare_run(c, cfg, "build-dataset");
  const auto input = ingest(fs::path(a.detections), true);
  std::optional<AttributeSourceOptions> attrs;
  AttributeMap map;
  if (!cfg.paths.scores_dir.empty()) {
    if (!fs::is_directory(cfg.paths.scores_dir)) throw ConfigError("paths.scores_dir not found: " + cfg.paths.scores_dir);
    map = load_map(cfg);
    attrs = AttributeSourceOptions{cfg.paths.scores_dir, &map};
  }
  const auto res = build_dataset(input, cfg.pipeline, attrs);
  save_tracklet_archive(dir / "tracklets.txt", res.tracklets);
  {
    std::ofstream crops(dir / "crops.tsv");
    write_crop_manifest(crops, res.crops);
  }
  std::ofstream(dir / "report.txt") << res.report.table();
  std::cout << res.report.table() << "output: " << (dir / "tracklets.txt").string() << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data, checkpoint, regime = "multitask", task = "recognition", labels;
};

int run_pretrain(const Common& c, const TrainArgs& a) {
  require_file(a.data, "tracklet archive");
  const RunConfig cfg = resolve_config(c);
  const Regime regime = parse_regime(a.regime);
  const LabelMode mode = parse_label_mode(a.labels.empty() ? "tracklet" : a.labels);
  const fs::path dir = prepare_run(c, cfg, "pretrain");
  const auto set = make_training_set(load_tracklet_archive(a.data), mode);
  GaitFormer<double> model(cfg.model, cfg.seed);
  const auto logs = pretrain(model, set, regime, cfg.train, cfg.augment, print_epoch);
  write_loss_csv(dir / "loss.csv", logs);
  save_model(model, dir / "model.ckpt", {{"regime", regime_name(regime)}});
  std::cout << "checkpoint: " << (dir / "model.ckpt").string() << '\n';
  return kExitOk;
}

int run_finetune(const Common& c, const TrainArgs& a) {
  require_file(a.data, "tracklet archive");
  require_file(a.checkpoint, "checkpoint");
  const RunConfig cfg = resolve_config(c);
  const FinetuneTask task = parse_task(a.task);
  const LabelMode mode = parse_label_mode(a.labels.empty() ? "prefix" : a.labels);
  const fs::path dir = prepare_run(c, cfg, "finetune");
  const auto set = make_training_set(load_tracklet_archive(a.data), mode);
  auto model = load_model<double>(a.checkpoint);
  const auto logs = finetune(model, set, task, cfg.train, cfg.augment, print_epoch);
  write_loss_csv(dir / "loss.csv", logs);
  save_model(model, dir / "model.ckpt", {{"task", a.task}});
  std::cout << "checkpoint: " << (dir / "model.ckpt").string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string data, checkpoint, labels = "prefix";
  std::size_t period = 0;
  bool casia = false;
};

int run_evaluate(const Common& c, const EvalArgs& a) {
  require_file(a.data, "tracklet archive");
  require_file(a.checkpoint, "checkpoint");
  const RunConfig cfg = resolve_config(c);
  const LabelMode mode = parse_label_mode(a.labels);
  const fs::path dir = prepare_run(c, cfg, "evaluate");
  const auto model = load_model<double>(a.checkpoint);
  const std::size_t period = a.period ? a.period : std::min(cfg.pipeline.T, model.config().max_T);
  const auto report = evaluate_tracklets(model, load_tracklet_archive(a.data), mode, period, a.casia);
  std::ofstream out(dir / "evaluation.csv");
  write_evaluation_csv(out, report);
  write_evaluation_csv(std::cout, report);
  return kExitOk;
}

struct BenchArgs {
  std::string sizes = "SM,MD,XL", periods = "12,24,48,96";
  std::size_t batch = 512, runs = 100, warmup = 3;
};

int run_bench(const Common& c, const BenchArgs& a) {
  const RunConfig cfg = resolve_config(c);
  const fs::path dir = prepare_run(c, cfg, "bench");
  BenchOptions opt;
  opt.sizes = gaitformer::detail::split(a.sizes, ',');
  for (const auto& s : opt.sizes) ModelConfig::named(s);
  opt.period_lengths = parse_size_list(a.periods);
  opt.batch = a.batch;
  opt.runs = a.runs;
  opt.warmup = a.warmup;
  opt.seed = cfg.seed;
  const std::map<std::string, double> published{{"SM", 2.24e6}, {"MD", 4.35e6}, {"XL", 6.46e6}};
  for (const auto& s : opt.sizes) {
    const double ours = static_cast<double>(param_count(ModelConfig::named(s)));
    const auto it = published.find(s == "sm" ? "SM" : s == "md" ? "MD" : s == "xl" ? "XL" : s);
    std::cout << "params " << s << ": " << static_cast<std::size_t>(ours);
    if (it != published.end())
      std::cout << " (published " << it->second / 1e6 << "M, delta " << std::showpos << std::fixed
                << std::setprecision(1) << 100.0 * (ours - it->second) / it->second << "%" << std::noshowpos
                << std::defaultfloat << std::setprecision(6) << ")";
    std::cout << '\n';
  }
  const auto rows = bench_inference<float>(opt, [](const BenchmarkResult& r) {
    std::cout << r.size << " T=" << r.period_length << " batch=" << r.batch << " mean " << r.mean_seconds << " s, std "
              << r.std_seconds << " s" << (r.note.empty() ? "" : " (" + r.note + ")") << std::endl;
  });
  std::ofstream out(dir / "bench.csv");
  write_bench_csv(out, rows);
  return kExitOk;
}

struct GradArgs {
  std::size_t coordinates = 200;
  std::uint64_t seed = 3;
  bool mutate = false;
};

int run_gradcheck(const GradArgs& a) {
  TinyGradCheckOptions opt;
  opt.seed = a.seed;
  opt.check.max_coordinates_per_tensor = a.coordinates;
  GaitFormer<double>::Activation act;
  if (a.mutate) act = [](const ad::Tensor<double>& x) { return gelu_with_corrupted_backward(x); };
  const auto r = tiny_model_gradcheck(opt, act);
  std::cout << "max relative error " << std::scientific << std::setprecision(3) << r.max_relative_error << " over "
            << r.coordinates << " coordinates (worst: " << r.worst_tensor << "[" << r.worst_index << "])\n";
  return r.max_relative_error < 1e-4 ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton-based gait recognition: dataset building, training, evaluation"};
  app.require_subcommand(1);
  Common common;
  for (int i = 0; i < argc; ++i) common.command_line += (i ? " " : "") + std::string(argv[i]);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic gait corpus as a tracklet archive");
  add_common(synth, common);
  synth->add_option("--ids", synth_args.ids, "number of identities");
  synth->add_option("--takes", synth_args.takes, "sequences per identity (runs per cell with --casia)");
  synth->add_option("--frames", synth_args.frames, "frames per sequence");
  synth->add_option("--seed", synth_args.seed, "overrides the configured seed");
  synth->add_flag("--casia", synth_args.casia, "subject x condition x angle layout");
  synth->add_option("-o,--out", synth_args.out, "archive path (default: <run dir>/tracklets.txt)");

  BuildArgs build_args;
  auto* build = app.add_subcommand("build-dataset", "detections -> filtered, normalized tracklets");
  add_common(build, common);
  build->add_option("-d,--detections", build_args.detections, "detection file")->required();

  TrainArgs pre_args;
  auto* pre = app.add_subcommand("pretrain", "contrastive / appearance pretraining");
  add_common(pre, common);
  pre->add_option("--data", pre_args.data, "tracklet archive")->required();
  pre->add_option("--regime", pre_args.regime, "contrastive, attributes or multitask");
  pre->add_option("--labels", pre_args.labels, "tracklet (default) or prefix");

  TrainArgs ft_args;
  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint for recognition or gender");
  add_common(ft, common);
  ft->add_option("--data", ft_args.data, "tracklet archive")->required();
  ft->add_option("--checkpoint", ft_args.checkpoint, "pretrained checkpoint")->required();
  ft->add_option("--task", ft_args.task, "recognition or gender");
  ft->add_option("--labels", ft_args.labels, "prefix (default) or tracklet");

  EvalArgs ev_args;
  auto* ev = app.add_subcommand("evaluate", "rank-1, gender F1 and attribute R^2");
  add_common(ev, common);
  ev->add_option("--data", ev_args.data, "tracklet archive")->required();
  ev->add_option("--checkpoint", ev_args.checkpoint, "model checkpoint")->required();
  ev->add_option("--labels", ev_args.labels, "prefix (default) or tracklet");
  ev->add_option("--period", ev_args.period, "crop length (default: pipeline.T)");
  ev->add_flag("--casia", ev_args.casia, "also run the condition x angle protocol");

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "forward-pass timing per model size and period length");
  add_common(bench, common);
  bench->add_option("--sizes", bench_args.sizes, "comma-separated sizes");
  bench->add_option("--periods", bench_args.periods, "comma-separated period lengths");
  bench->add_option("--batch", bench_args.batch, "batch size");
  bench->add_option("--runs", bench_args.runs, "timed runs per cell");
  bench->add_option("--warmup", bench_args.warmup, "untimed warmup runs");

  GradArgs grad_args;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the tiny model's gradients");
  grad->add_option("--coordinates", grad_args.coordinates, "sampled coordinates per tensor");
  grad->add_option("--seed", grad_args.seed, "model and data seed");
  grad->add_flag("--mutate", grad_args.mutate, "use a corrupted GELU backward rule (expected to fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) return run_synth(common, synth_args);
    if (*build) return run_build(common, build_args);
    if (*pre) return run_pretrain(common, pre_args);
    if (*ft) return run_finetune(common, ft_args);
    if (*ev) return run_evaluate(common, ev_args);
    if (*bench) return run_bench(common, bench_args);
    if (*grad) return run_gradcheck(grad_args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
