#include "dicom/cli.hpp"

#include "dicom/analysis.hpp"
#include "dicom/checkpoint.hpp"
#include "dicom/classification.hpp"
#include "dicom/data/synthetic.hpp"
#include "dicom/error.hpp"
#include "dicom/pretrainer.hpp"
#include "dicom/segmentation.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace dicom {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;

  std::string data;
  std::string ckpt;
  std::string resume;
  bool random_init = false;
  std::string embeddings;

  int classes = 2;
  int per_class = 50;
  std::string size = "64x64";

  std::string curve;
  std::string column = "AUPR";
};

RunConfig base_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : parse_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

void write_report(const json& report, const Options& o, const RunConfig& cfg, std::ostream& out) {
  json full = report;
  full["version"] = version_string();
  full["seed"] = cfg.seed;
  if (o.out.empty()) {
    out << full.dump(2) << '\n';
    return;
  }
  const fs::path path(o.out);
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  write_run_metadata(dir, cfg);
  std::ofstream f(path);
  f << full.dump(2) << '\n';
  if (!f) throw Error("io.write", "cannot write report " + path.string());
}

// Downstream runs take the backbone from the checkpoint (or the config when
// starting from random weights) and everything else from --config.
struct Downstream {
  RunConfig cfg;
  VisionTransformer backbone;
};

Downstream downstream(const Options& o) {
  if (o.ckpt.empty() && !o.random_init) throw Error("cli.usage", "--ckpt is required unless --random-init is given");
  if (!o.ckpt.empty() && o.random_init) throw Error("cli.usage", "--ckpt and --random-init are mutually exclusive");
  if (o.ckpt.empty()) {
    RunConfig cfg = base_config(o);
    cfg.validate();
    Rng rng = derive_rng(cfg.seed, 0xB0B);
    return {cfg, VisionTransformer(cfg.backbone, rng)};
  }
  const Checkpoint ck = read_checkpoint(o.ckpt);
  RunConfig cfg = o.config.empty() ? ck.config() : parse_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  cfg.backbone = ck.config().backbone;
  cfg.validate();
  return {cfg, load_backbone(ck)};
}

Dataset downstream_data(const Options& o, const RunConfig& cfg, bool masks) {
  const std::string manifest = o.data.empty() ? cfg.data.manifest : o.data;
  if (manifest.empty()) throw Error("cli.usage", "--data is required (or set data.manifest in the config)");
  const BackboneConfig& b = cfg.backbone;
  return load_dataset(manifest, {b.image_height, b.image_width, b.patch_size, masks});
}

std::pair<int, int> parse_size(const std::string& s) {
  int h = 0, w = 0;
  char x = 0;
  std::istringstream in(s);
  if (!(in >> h >> x >> w) || (x != 'x' && x != 'X') || !in.eof()) {
    throw Error("cli.usage", "--size expects HxW, got '" + s + "'");
  }
  return {h, w};
}

std::vector<double> read_curve(const fs::path& path, const std::string& column) {
  std::ifstream in(path);
  if (!in) throw Error("data.missing_file", "cannot open curve file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error("analysis.empty", "curve file " + path.string() + " is empty");
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) {
      while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.pop_back();
      cells.push_back(c);
    }
    return cells;
  };
  const auto header = split(line);
  const auto it = std::find(header.begin(), header.end(), column);
  if (it == header.end()) throw Error("analysis.column", "column '" + column + "' not found in " + path.string());
  const auto col = static_cast<std::size_t>(it - header.begin());
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (col >= cells.size()) throw Error("analysis.column", "short row in " + path.string());
    try {
      values.push_back(std::stod(cells[col]));
    } catch (const std::exception&) {
      throw Error("analysis.column", "non-numeric value '" + cells[col] + "' in column " + column);
    }
  }
  return values;
}

int gen_synth(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw Error("cli.usage", "gen-synth needs --out DIR");
  const auto [h, w] = parse_size(o.size);
  SynthSpec spec;
  spec.classes = o.classes;
  spec.per_class = o.per_class;
  spec.height = h;
  spec.width = w;
  spec.seed = o.seed.value_or(0);
  const DatasetManifest m = generate_synthetic(spec, o.out);
  out << json{{"manifest", (fs::path(o.out) / "manifest.csv").string()}, {"images", m.entries.size()}}.dump() << '\n';
  return 0;
}

int run_pretrain(const Options& o, std::ostream& out) {
  RunConfig cfg = base_config(o);
  if (!o.data.empty()) cfg.data.manifest = o.data;
  if (!o.out.empty()) cfg.out_dir = o.out;
  cfg.validate();
  if (cfg.data.manifest.empty()) throw Error("cli.usage", "pretrain needs data.manifest in the config or --data");
  std::optional<fs::path> resume;
  if (!o.resume.empty()) resume = o.resume;
  const PretrainResult r = pretrain(cfg.data.manifest, cfg, cfg.out_dir, resume);
  json summary{{"checkpoint", r.final_checkpoint.string()}, {"loss_curve", r.loss_curve.string()}, {"steps", r.reports.size()}};
  if (!r.reports.empty()) summary["final_loss"] = r.reports.back().losses.total;
  out << summary.dump() << '\n';
  return 0;
}

int run_probe(const Options& o, std::ostream& out) {
  auto d = downstream(o);
  const Dataset data = downstream_data(o, d.cfg, false);
  write_report(to_json(linear_probe(d.backbone, data, d.cfg)), o, d.cfg, out);
  return 0;
}

int run_finetune(const Options& o, std::ostream& out) {
  auto d = downstream(o);
  const Dataset data = downstream_data(o, d.cfg, false);
  json report = to_json(fine_tune(std::move(d.backbone), data, d.cfg));
  report["init"] = o.random_init ? "random" : "checkpoint";
  write_report(report, o, d.cfg, out);
  return 0;
}

int run_segment(const Options& o, std::ostream& out) {
  auto d = downstream(o);
  const Dataset data = downstream_data(o, d.cfg, true);
  json report = to_json(train_segmentation(std::move(d.backbone), data, d.cfg));
  report["init"] = o.random_init ? "random" : "checkpoint";
  write_report(report, o, d.cfg, out);
  return 0;
}

int run_cluster_eval(const Options& o, std::ostream& out) {
  auto d = downstream(o);
  const Dataset data = downstream_data(o, d.cfg, false);
  const EmbeddingSet set = extract_features(d.backbone, data);
  if (!o.embeddings.empty()) export_embeddings(set, o.embeddings);
  json report = to_json(cluster_eval(set, d.cfg.cluster, d.cfg.seed));
  report["mode"] = "cluster-eval";
  write_report(report, o, d.cfg, out);
  return 0;
}

int run_soc(const Options& o, std::ostream& out) {
  if (o.curve.empty()) throw Error("cli.usage", "soc needs --curve FILE");
  const auto values = read_curve(o.curve, o.column);
  const json report{{"mode", "soc"}, {"column", o.column}, {"points", values.size()}, {"SoC", soc(values)}};
  if (o.out.empty()) {
    out << report.dump(2) << '\n';
  } else {
    std::ofstream f(o.out);
    f << report.dump(2) << '\n';
    if (!f) throw Error("io.write", "cannot write report " + o.out);
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DiCoM self-supervised pre-training and evaluation toolkit", "dicom"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Random seed (overrides the config)");
  app.add_option("--config", o.config, "JSON run configuration");
  app.add_option("--out", o.out, "Output directory or report path");
  app.set_version_flag("--version", version_string());

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic chest-like dataset");
  gen->add_option("--classes", o.classes, "Number of classes")->check(CLI::Range(2, 64));
  gen->add_option("--per-class", o.per_class, "Images per class");
  gen->add_option("--size", o.size, "Image size HxW");

  auto* pre = app.add_subcommand("pretrain", "Self-supervised pre-training");
  pre->add_option("--data", o.data, "Dataset manifest (overrides data.manifest)");
  pre->add_option("--resume", o.resume, "Checkpoint directory to resume from");

  std::map<std::string, CLI::App*> downstream_cmds;
  downstream_cmds["probe"] = app.add_subcommand("probe", "Linear probe on a frozen backbone");
  downstream_cmds["finetune"] = app.add_subcommand("finetune", "Fine-tune backbone and classifier");
  downstream_cmds["segment"] = app.add_subcommand("segment", "Train a segmentation decoder on the backbone");
  downstream_cmds["cluster-eval"] = app.add_subcommand("cluster-eval", "Two-cluster Rand index and silhouette of embeddings");
  for (auto& [name, cmd] : downstream_cmds) {
    cmd->add_option("--ckpt", o.ckpt, "Checkpoint directory");
    cmd->add_option("--data", o.data, "Dataset manifest");
    if (name == "finetune" || name == "segment") {
      cmd->add_flag("--random-init", o.random_init, "Start from a randomly initialised backbone");
    }
  }
  downstream_cmds["cluster-eval"]->add_option("--embeddings", o.embeddings, "Also export embeddings to this CSV");

  auto* soc_cmd = app.add_subcommand("soc", "Speed of convergence of a metric curve");
  soc_cmd->add_option("--curve", o.curve, "CSV file with a header row");
  soc_cmd->add_option("--column", o.column, "Column to integrate");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << version_string() << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << app.help() << e.what() << '\n';
    return 2;
  }
  if (seed_opt->count() > 0) o.seed = seed;

  try {
    if (gen->parsed()) return gen_synth(o, out);
    if (pre->parsed()) return run_pretrain(o, out);
    if (downstream_cmds["probe"]->parsed()) return run_probe(o, out);
    if (downstream_cmds["finetune"]->parsed()) return run_finetune(o, out);
    if (downstream_cmds["segment"]->parsed()) return run_segment(o, out);
    if (downstream_cmds["cluster-eval"]->parsed()) return run_cluster_eval(o, out);
    if (soc_cmd->parsed()) return run_soc(o, out);
  } catch (const Error& e) {
    err << json{{"error", {{"code", e.code()}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace dicom
