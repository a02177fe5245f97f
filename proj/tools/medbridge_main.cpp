#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "medbridge/config.hpp"
#include "medbridge/data.hpp"
#include "medbridge/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace medbridge;

namespace {

int exit_code_for(ErrKind k) {
  switch (k) {
    case ErrKind::usage:
    case ErrKind::config:
    case ErrKind::shape:
    case ErrKind::state:
    case ErrKind::precondition:
      return 1;
    case ErrKind::numeric:
      return 3;
    default:
      return 2;  // io, parse, data, geometry, tokenize, metrics, checkpoint
  }
}

std::string run_root() {
  const char* env = std::getenv("MEDBRIDGE_RUN_ROOT");
  return (env != nullptr && *env != '\0') ? env : "runs";
}

std::string timestamp_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  localtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

void make_dirs(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrKind::io, "cannot create '" + dir + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrKind::io, "cannot write '" + path + "'");
  out << text;
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
  json j;
  if (config_path.empty()) {
    j = config_to_json(default_config());
  } else {
    std::ifstream in(config_path);
    if (!in) fail(ErrKind::io, "cannot open config '" + config_path + "'");
    try {
      in >> j;
    } catch (const json::exception& e) {
      fail(ErrKind::config, "config '" + config_path + "': " + e.what());
    }
  }
  for (const std::string& s : sets) apply_override(j, s);
  return config_from_json(j);
}

void print_effective(const json& line) { std::cout << "effective-config: " << line.dump() << "\n"; }

std::vector<double> parse_fractions(const std::string& grid) {
  std::vector<double> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) fail(ErrKind::usage, "empty entry in fraction list");
    try {
      std::size_t pos = 0;
      double v = std::stod(cur, &pos);
      if (pos != cur.size()) throw std::invalid_argument(cur);
      out.push_back(v);
    } catch (const std::exception&) {
      fail(ErrKind::usage, "fraction '" + cur + "' is not a number");
    }
    cur.clear();
  };
  for (char c : grid) {
    if (c == ',')
      flush();
    else
      cur += c;
  }
  flush();
  return out;
}

void print_report_table(const std::vector<std::string>& keys,
                        const std::vector<const MetricsReport*>& reports,
                        const std::string& key_header) {
  std::cout << key_header << "\tmacro_auc\tmacro_f1\tmacro_acc\n";
  char buf[128];
  for (std::size_t i = 0; i < keys.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s\t%.4f\t%.4f\t%.4f\n", keys[i].c_str(),
                  reports[i]->macro_auc, reports[i]->macro_f1, reports[i]->macro_acc);
    std::cout << buf;
  }
}

struct AdaptArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string train_manifest;
  std::string val_manifest;
  std::string init_checkpoint;
  std::string out_dir;
};

int cmd_adapt(const AdaptArgs& args) {
  RunConfig cfg = resolve_config(args.config_path, args.sets);
  std::string run_dir = args.out_dir;
  if (run_dir.empty())
    run_dir = run_root() + "/" + hash_hex(config_hash(cfg)) + "-" + timestamp_now();
  print_effective({{"command", "adapt"},
                   {"train_manifest", args.train_manifest},
                   {"val_manifest", args.val_manifest},
                   {"init_checkpoint", args.init_checkpoint},
                   {"run_dir", run_dir},
                   {"config", config_to_json(cfg)}});
  make_dirs(run_dir);

  Dataset train_ds = read_manifest(args.train_manifest);
  Dataset val_ds = read_manifest(args.val_manifest);
  auto model = build_model(cfg);
  if (!args.init_checkpoint.empty()) init_from_checkpoint(*model, args.init_checkpoint);

  ViewProvider train_views(cfg.focal, std::size_t(2560) * 1024 * 1024);
  ViewProvider val_views(cfg.focal, std::size_t(768) * 1024 * 1024);
  std::ofstream log(run_dir + "/train_log.jsonl", std::ios::binary);
  if (!log) fail(ErrKind::io, "cannot write '" + run_dir + "/train_log.jsonl'");

  TrainResult result = train_adapter(*model, cfg, train_ds, val_ds, train_views, val_views, &log);

  const std::string ckpt_path = run_dir + "/checkpoint.ckpt";
  save_checkpoint(*model, cfg, result, ckpt_path);
  write_text(run_dir + "/effective_config.json", config_to_json(cfg).dump(2) + "\n");
  write_text(run_dir + "/val_report.txt", result.best_val.serialize());

  std::cout << "trainable parameters: " << model->trainable_count() << " of "
            << model->total_count() << "\n";
  std::cout << "best epoch: " << result.best_epoch << " (val macro_auc "
            << result.best_val.macro_auc << ")\n";
  std::cout << "checkpoint: " << ckpt_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-expert adapter for multi-label image diagnosis"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic lesion dataset");
  std::string gen_out = "data";
  std::string gen_split = "train";
  int gen_count = 100;
  SyntheticSpec gen_spec;
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_option("--count", gen_count, "Number of records")->check(CLI::PositiveNumber);
  gen->add_option("--split", gen_split, "Split name (manifest and image subdirectory)");
  gen->add_option("--classes", gen_spec.num_classes, "Number of classes");
  gen->add_option("--image-size", gen_spec.image_size, "Square image size in pixels");
  gen->add_option("--lesion-size", gen_spec.lesion_size, "Lesion patch size in pixels");
  gen->add_option("--prevalence", gen_spec.prevalence, "Per-class positive probability");
  gen->add_option("--shift", gen_spec.shift_knob, "Domain shift knob in [0,1]");
  gen->add_option("--seed", gen_spec.seed, "Generator seed");
  gen->add_option("--period", gen_spec.grating_period, "Lesion grating period in pixels");
  gen->add_option("--amplitude", gen_spec.grating_amp, "Lesion grating amplitude");
  gen->add_option("--noise", gen_spec.noise_sigma, "White-noise sigma");
  gen->add_option("--background-cell", gen_spec.background_cell,
                  "Background value-noise lattice spacing in pixels");

  // adapt
  auto* adapt = app.add_subcommand("adapt", "Train the adapter on a manifest");
  AdaptArgs aa;
  adapt->add_option("--config", aa.config_path, "Run config JSON (defaults when omitted)");
  adapt->add_option("--set", aa.sets, "key=value override, repeatable");
  adapt->add_option("--train", aa.train_manifest, "Training manifest")->required();
  adapt->add_option("--val", aa.val_manifest, "Validation manifest")->required();
  adapt->add_option("--init-checkpoint", aa.init_checkpoint,
                    "Start from this checkpoint's trainable parameters");
  adapt->add_option("--out", aa.out_dir, "Run directory (default: config hash + timestamp)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  std::string ev_ckpt, ev_manifest, ev_out;
  eval->add_option("--checkpoint", ev_ckpt, "Checkpoint path")->required();
  eval->add_option("--manifest", ev_manifest, "Evaluation manifest")->required();
  eval->add_option("--out", ev_out, "Write the report to this file");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Train at several data fractions");
  std::string sw_config, sw_train, sw_val, sw_eval;
  std::vector<std::string> sw_sets;
  std::string sw_fractions = "0.01,0.1,0.5,1.0";
  sw->add_option("--config", sw_config, "Run config JSON");
  sw->add_option("--set", sw_sets, "key=value override, repeatable");
  sw->add_option("--train", sw_train, "Training manifest")->required();
  sw->add_option("--val", sw_val, "Validation manifest")->required();
  sw->add_option("--eval-manifest", sw_eval, "Evaluation manifest (default: --val)");
  sw->add_option("--fractions", sw_fractions, "Comma-separated fractions in (0,1]");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Grid over one config axis");
  std::string ab_config, ab_train, ab_val, ab_eval, ab_axis, ab_grid;
  std::vector<std::string> ab_sets;
  ab->add_option("--config", ab_config, "Run config JSON");
  ab->add_option("--set", ab_sets, "key=value override, repeatable");
  ab->add_option("--train", ab_train, "Training manifest")->required();
  ab->add_option("--val", ab_val, "Validation manifest")->required();
  ab->add_option("--eval-manifest", ab_eval, "Evaluation manifest (default: --val)");
  ab->add_option("--axis", ab_axis, "views | alpha | queries | experts")->required();
  ab->add_option("--grid", ab_grid, "Comma-separated values; experts: 'A;A,B'")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      print_effective({{"command", "generate"},
                       {"out", gen_out},
                       {"count", gen_count},
                       {"split", gen_split},
                       {"classes", gen_spec.num_classes},
                       {"image_size", gen_spec.image_size},
                       {"lesion_size", gen_spec.lesion_size},
                       {"prevalence", gen_spec.prevalence},
                       {"shift", gen_spec.shift_knob},
                       {"seed", gen_spec.seed},
                       {"period", gen_spec.grating_period},
                       {"amplitude", gen_spec.grating_amp},
                       {"noise", gen_spec.noise_sigma},
                       {"background_cell", gen_spec.background_cell}});
      std::string path = generate_synthetic(gen_spec, gen_count, gen_split, gen_out);
      std::cout << "manifest: " << path << "\n";
      return 0;
    }
    if (adapt->parsed()) return cmd_adapt(aa);
    if (eval->parsed()) {
      print_effective(
          {{"command", "eval"}, {"checkpoint", ev_ckpt}, {"manifest", ev_manifest}});
      LoadedCheckpoint lc = load_checkpoint(ev_ckpt);
      Dataset ds = read_manifest(ev_manifest);
      ViewProvider provider(lc.cfg.focal, std::size_t(768) * 1024 * 1024);
      MetricsReport report = evaluate_model(*lc.model, ds, provider, lc.cfg.train.batch_size);
      const std::string text = report.serialize();
      std::cout << text;
      if (!ev_out.empty()) write_text(ev_out, text);
      return 0;
    }
    if (sw->parsed()) {
      RunConfig cfg = resolve_config(sw_config, sw_sets);
      if (sw_eval.empty()) sw_eval = sw_val;
      print_effective({{"command", "sweep"},
                       {"train_manifest", sw_train},
                       {"val_manifest", sw_val},
                       {"eval_manifest", sw_eval},
                       {"fractions", sw_fractions},
                       {"config", config_to_json(cfg)}});
      Dataset train_ds = read_manifest(sw_train);
      Dataset val_ds = read_manifest(sw_val);
      Dataset eval_ds = read_manifest(sw_eval);
      auto rows = sweep(cfg, train_ds, val_ds, eval_ds, parse_fractions(sw_fractions), &std::cerr);
      std::vector<std::string> keys;
      std::vector<const MetricsReport*> reports;
      for (const auto& row : rows) {
        keys.push_back(std::to_string(row.fraction) + " (" + std::to_string(row.train_records) +
                       " records)");
        reports.push_back(&row.report);
      }
      print_report_table(keys, reports, "fraction");
      return 0;
    }
    if (ab->parsed()) {
      RunConfig cfg = resolve_config(ab_config, ab_sets);
      if (ab_eval.empty()) ab_eval = ab_val;
      print_effective({{"command", "ablate"},
                       {"train_manifest", ab_train},
                       {"val_manifest", ab_val},
                       {"eval_manifest", ab_eval},
                       {"axis", ab_axis},
                       {"grid", ab_grid},
                       {"config", config_to_json(cfg)}});
      Dataset train_ds = read_manifest(ab_train);
      Dataset val_ds = read_manifest(ab_val);
      Dataset eval_ds = read_manifest(ab_eval);
      auto rows = ablate(cfg, train_ds, val_ds, eval_ds, ab_axis, ab_grid, &std::cerr);
      std::vector<std::string> keys;
      std::vector<const MetricsReport*> reports;
      for (const auto& row : rows) {
        keys.push_back(row.setting);
        reports.push_back(&row.report);
      }
      print_report_table(keys, reports, ab_axis);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
