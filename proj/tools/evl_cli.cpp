// evl: command-line front end. Every command reports errors on stderr and
// exits nonzero; artifacts are plain text or CSV.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "evl/data/dataset.hpp"
#include "evl/data/synth.hpp"
#include "evl/eval/evaluate.hpp"
#include "evl/model_check.hpp"
#include "evl/param_count.hpp"
#include "evl/run_config.hpp"
#include "evl/train/checkpoint.hpp"

namespace fs = std::filesystem;
using namespace evl;

namespace {

const char *kOverrideHelp = "Any config key can be given as --key value (for example --lora.rank 4). "
                            "--lr, --manifest, --epochs and --folds are short for train.lr, data.manifest, "
                            "train.epochs and data.folds.";

std::string canonical_key(std::string k) {
  if (k == "lr") return "train.lr";
  if (k == "manifest") return "data.manifest";
  if (k == "epochs") return "train.epochs";
  if (k == "folds") return "data.folds";
  return k;
}

/// Turns leftover "--key value" / "--key=value" tokens into config entries.
ConfigEntries parse_overrides(const std::vector<std::string> &extra) {
  ConfigEntries out;
  for (std::size_t i = 0; i < extra.size(); ++i) {
    const std::string &tok = extra[i];
    if (!tok.starts_with("--") || tok.size() == 2) throw UsageError("unexpected argument '" + tok + "'");
    std::string key = tok.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.erase(eq);
    } else {
      if (i + 1 >= extra.size()) throw UsageError("option --" + key + " needs a value");
      value = extra[++i];
    }
    out.push_back({canonical_key(key), value});
  }
  return out;
}

std::string read_text(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig load_run_config(const std::string &config_path, const std::vector<std::string> &extra) {
  std::vector<std::string> errors;
  ConfigEntries entries;
  if (!config_path.empty()) entries = parse_config_text(read_text(config_path), errors, config_path);
  ConfigEntries over;
  try {
    over = parse_overrides(extra);
  } catch (const UsageError &e) {
    errors.push_back(e.what());
  }
  entries.insert(entries.end(), over.begin(), over.end());
  return build_run_config(entries, errors);
}

/// `root/run-YYYYmmdd-HHMMSS-seedN`, with a numeric suffix if taken.
fs::path make_run_dir(const fs::path &root, std::uint64_t seed) {
  fs::create_directories(root);
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string("run-") + stamp + "-seed" + std::to_string(seed);
  for (int i = 0;; ++i) {
    const fs::path dir = root / (i ? base + "-" + std::to_string(i) : base);
    if (fs::create_directory(dir)) return dir;
  }
}

std::vector<Sample> load_samples(const RunConfig &c) {
  if (c.manifest.empty()) throw UsageError("no manifest given (use --manifest or data.manifest)");
  auto samples = load_dataset(c.manifest);
  if (samples.empty()) throw ValidationError("manifest " + c.manifest + " lists no samples");
  for (const auto &s : samples) {
    if (s.image.dim(1) != c.model.image_size || s.image.dim(2) != c.model.image_size) {
      throw ValidationError("sample of subject '" + s.subject + "' is " + std::to_string(s.image.dim(2)) + "x" +
                            std::to_string(s.image.dim(1)) + " but the model expects " +
                            std::to_string(c.model.image_size) + "x" + std::to_string(c.model.image_size));
    }
  }
  if (c.balance) samples = balance_augment(samples, *c.balance, c.seed);
  return samples;
}

std::string split_csv(const SplitPlan &plan) {
  std::string out = "subject_id,partition\n";
  for (const auto &[id, p] : plan.assignment) out += id + "," + std::to_string(p) + "\n";
  return out;
}

void print_epoch(const EpochStats &s) {
  std::printf("epoch %zu  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f\n", s.epoch, s.train_loss,
              s.train_acc, s.val_loss, s.val_acc);
  std::fflush(stdout);
}

/// Fresh model, optionally overwritten by the named tensors of `init`.
template <class T>
std::unique_ptr<Classifier<T>> build_model(const RunConfig &c, std::uint64_t seed, const Checkpoint *init) {
  auto model = make_model<T>(c.model, seed);
  if (init) apply_checkpoint(*init, model->params(), static_cast<Adam<T> *>(nullptr));
  return model;
}

template <class T> void train_run(const RunConfig &c, const fs::path &out_root, const Checkpoint *init) {
  const auto samples = load_samples(c);
  SplitPlan plan;
  plan.mode = SplitMode::holdout;
  plan.train_ratio = c.holdout_ratio;
  plan.seed = c.seed;
  plan = make_split(subjects_of(samples), plan);
  const auto train = select_partitions(samples, plan, {0});
  const auto test = select_partitions(samples, plan, {1});

  const fs::path dir = make_run_dir(out_root, c.seed);
  const std::string cfg_text = run_config_text(c);
  write_text(dir / "config.txt", cfg_text);
  write_text(dir / "split.csv", split_csv(plan));
  std::printf("run directory %s\ntrain %zu samples, test %zu samples\n", dir.c_str(), train.size(), test.size());

  auto model = build_model<T>(c, c.seed, init);
  Trainer<T> trainer(*model, c.train);
  const auto res = trainer.fit(train, test, [](const EpochStats &s) {
    print_epoch(s);
    return true;
  });
  res.history.write_csv(dir / "history.csv");
  const std::uint64_t epochs = res.history.rows.size();
  save_checkpoint(dir / "final.ckpt", model->params(), &trainer.optimizer(), cfg_text, epochs, trainer.rng_state());
  save_checkpoint(dir / "adapter.ckpt", model->params(), &trainer.optimizer(), cfg_text, epochs, trainer.rng_state(),
                  CheckpointScope::trainable);
  const auto final_report = evaluate(*model, test);
  write_text(dir / "confusion.csv", confusion_csv(final_report.cm));

  restore_best(*model, res);
  save_checkpoint(dir / "best.ckpt", model->params(), static_cast<const Adam<T> *>(nullptr), cfg_text,
                  res.best_epoch, trainer.rng_state());
  const auto best_report = evaluate(*model, test);
  write_text(dir / "best_confusion.csv", confusion_csv(best_report.cm));
  write_text(dir / "report.csv", report_csv({{"final", final_report}, {"best", best_report}}));
  std::printf("final  %s\nbest   %s (epoch %zu)\n", format_metrics_row(final_report).c_str(),
              format_metrics_row(best_report).c_str(), res.best_epoch);
}

template <class T> void kfold_run(const RunConfig &c, const fs::path &out_root, const Checkpoint *init) {
  const auto samples = load_samples(c);
  const fs::path dir = make_run_dir(out_root, c.seed);
  write_text(dir / "config.txt", run_config_text(c));
  std::printf("run directory %s\n", dir.c_str());
  const ModelFactory<T> factory = [&c, init](std::uint64_t s) { return build_model<T>(c, s, init); };
  const auto r = kfold_evaluate(factory, samples, c.folds, c.seed, c.train);
  write_text(dir / "split.csv", split_csv(r.plan));
  std::vector<std::pair<std::string, EvalReport>> rows;
  for (std::size_t f = 0; f < r.folds.size(); ++f) {
    rows.push_back({"fold" + std::to_string(f + 1), r.folds[f]});
    r.histories[f].write_csv(dir / ("fold" + std::to_string(f + 1) + "_history.csv"));
    std::printf("fold %zu  %s\n", f + 1, format_metrics_row(r.folds[f]).c_str());
  }
  rows.push_back({"mean", r.mean});
  write_text(dir / "report.csv", report_csv(rows));
  write_text(dir / "confusion.csv", confusion_csv(r.mean.cm));
  std::printf("mean    %s\n", format_metrics_row(r.mean).c_str());
}

/// Rebuilds the model recorded in a checkpoint and loads its tensors.
template <class T> std::unique_ptr<Classifier<T>> model_from_checkpoint(const Checkpoint &ck, const RunConfig &c) {
  auto model = make_model<T>(c.model, c.seed);
  apply_checkpoint(ck, model->params(), static_cast<Adam<T> *>(nullptr));
  return model;
}

template <class T> void evaluate_run(const Checkpoint &ck, const RunConfig &c, const fs::path &out) {
  auto model = model_from_checkpoint<T>(ck, c);
  RunConfig plain = c;
  plain.balance.reset();
  const auto r = evaluate(*model, load_samples(plain));
  fs::create_directories(out);
  write_text(out / "eval_report.csv", report_csv({{"evaluate", r}}));
  write_text(out / "eval_confusion.csv", confusion_csv(r.cm));
  std::printf("n %zu  loss %.6f\n%s\n", r.n, r.loss, format_metrics_row(r).c_str());
  for (const auto &note : r.notes) std::printf("note: %s\n", note.c_str());
}

template <class T>
void export_run(const Checkpoint *ck, const RunConfig &c, FeatureLayer layer, const fs::path &out) {
  auto model = ck ? model_from_checkpoint<T>(*ck, c) : make_model<T>(c.model, c.seed);
  RunConfig plain = c;
  plain.balance.reset();
  write_text(out, export_features(*model, load_samples(plain), layer));
  std::printf("wrote %s\n", out.c_str());
}

template <class F> auto by_precision(const RunConfig &c, F &&f) {
  return c.precision == Precision::f64 ? f(double{}) : f(float{});
}

/// Config stored in a checkpoint, with command-line overrides applied on top.
RunConfig config_of_checkpoint(const Checkpoint &ck, const std::vector<std::string> &extra) {
  std::vector<std::string> errors;
  auto entries = parse_config_text(ck.config, errors, "checkpoint config");
  const auto over = parse_overrides(extra);
  entries.insert(entries.end(), over.begin(), over.end());
  return build_run_config(entries, errors);
}

int cmd_synth(std::size_t n, std::uint64_t seed, std::size_t size, const std::string &out) {
  const auto data = synth_generate(n, seed, size);
  const auto manifest = write_dataset(out, data.samples);
  std::printf("wrote %zu samples to %s\n", data.samples.size(), manifest.c_str());
  return 0;
}

int cmd_extract(const std::string &labels, const std::string &out, std::size_t slices, std::size_t pad) {
  const auto rows = read_manifest(labels);
  const fs::path base = fs::path(labels).parent_path();
  DatasetWriter writer(out);
  std::vector<std::string> failures;
  for (const auto &row : rows) {
    const fs::path p = fs::path(row.path).is_absolute() ? fs::path(row.path) : base / row.path;
    try {
      const Volume v = normalize_volume(pad_volume(load_nifti(p), pad).volume);
      for (const auto &s : extract_slices(v, slices, row.label, row.subject)) writer.add(s);
    } catch (const Error &e) {
      failures.push_back(p.string() + ": " + e.what());
    }
  }
  const auto manifest = writer.finish();
  std::printf("wrote %zu samples from %zu volumes to %s\n", writer.size(), rows.size() - failures.size(),
              manifest.c_str());
  if (failures.empty()) return 0;
  std::fprintf(stderr, "%zu of %zu volumes failed:\n", failures.size(), rows.size());
  for (const auto &f : failures) std::fprintf(stderr, "  %s\n", f.c_str());
  return 1;
}

void print_breakdown(const ModelConfig &m, const std::string &preset) {
  const auto b = count_trainable(m);
  std::printf("model %s (%s preset)\n", to_string(m.kind), preset.c_str());
  std::printf("  lora       %12zu\n  head       %12zu\n  bridge     %12zu\n", b.lora, b.head, b.bridge);
  std::printf("  backbone   %12zu\n  vit        %12zu\n", b.backbone, b.vit);
  std::printf("  trainable  %12zu\n  frozen     %12zu\n", b.total, b.frozen);
}

int cmd_param_count(const RunConfig &c, const std::string &ranks) {
  if (ranks.empty()) {
    print_breakdown(c.model, c.preset);
    return 0;
  }
  std::printf("model %s (%s preset)\n  rank         lora    trainable\n", to_string(c.model.kind), c.preset.c_str());
  std::stringstream ss(ranks);
  for (std::string item; std::getline(ss, item, ',');) {
    ModelConfig m = c.model;
    m.vit.lora.rank = detail::parse_number<std::size_t>(detail::trim(item));
    m.resolve();
    const auto b = count_trainable(m);
    std::printf("  %4zu %12zu %12zu\n", m.vit.lora.rank, b.lora, b.total);
  }
  return 0;
}

int cmd_grad_check(const std::string &model, double tol, bool corrupt, std::size_t max_entries, std::uint64_t seed) {
  const ModelKind kind = parse_model_kind(model);
  if (kind == ModelKind::effnet) throw UsageError("grad-check covers vitlora and hybrid");
  GradCheckOptions opt;
  opt.tolerance = tol;
  opt.max_entries_per_param = max_entries;
  opt.seed = seed;
  auto m = make_model<double>(ModelConfig::toy(kind), seed);
  debug::corrupt_matmul_backward = corrupt;
  const auto r = model_grad_check(*m, opt);
  debug::corrupt_matmul_backward = false;
  for (const auto &p : r.params) {
    std::printf("  %-40s %-10s checked %6zu  rel %.3e\n", p.name.c_str(), to_string(p.status), p.checked,
                p.max_rel_error);
  }
  std::printf("%s: worst %s rel %.3e (tolerance %.1e)\n", r.passed ? "PASS" : "FAIL", r.worst_param.c_str(),
              r.worst_rel_error, tol);
  return r.passed ? 0 : 1;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"ViT/LoRA/EfficientNet hybrid classifier toolkit"};
  app.require_subcommand(1);

  std::size_t n = 300, size = 32;
  std::uint64_t seed = 0;
  std::string out, labels, config, checkpoint, ranks, model = "vitlora", layer = "cls";
  std::size_t slices = 4, pad = 224, max_entries = 0;
  double tolerance = 1e-4;
  bool corrupt = false;

  auto *synth = app.add_subcommand("synth", "Write a synthetic three-class sample set");
  synth->add_option("--n", n, "Samples per class")->capture_default_str();
  synth->add_option("--seed", seed, "Generator seed")->capture_default_str();
  synth->add_option("--size", size, "Image extent")->capture_default_str();
  synth->add_option("--out", out, "Output directory")->required();

  auto *extract = app.add_subcommand("extract", "Turn NIfTI volumes into slice samples");
  extract->add_option("--labels", labels, "CSV with subject_id,label,path")->required()->check(CLI::ExistingFile);
  extract->add_option("--out", out, "Output directory")->required();
  extract->add_option("--slices", slices, "Middle axial slices per volume")->capture_default_str();
  extract->add_option("--pad", pad, "Cube extent to zero-pad to")->capture_default_str();

  auto with_config = [&](CLI::App *sub) {
    sub->add_option("--config", config, "Run configuration file");
    sub->allow_extras();
    sub->footer(kOverrideHelp);
  };
  std::string runs = "runs", init;
  auto *train = app.add_subcommand("train", "Train on a holdout split");
  auto *kfold = app.add_subcommand("kfold", "Subject-level k-fold cross-validation");
  for (auto *sub : {train, kfold}) {
    with_config(sub);
    sub->add_option("--out", runs, "Directory that receives the run directory")->capture_default_str();
    sub->add_option("--init", init, "Checkpoint whose tensors replace the seeded initial weights")
        ->check(CLI::ExistingFile);
  }

  std::string eval_out = ".";
  auto *evalc = app.add_subcommand("evaluate", "Score a checkpoint on a sample set");
  evalc->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  evalc->add_option("--out", eval_out, "Directory for eval_report.csv and eval_confusion.csv")->capture_default_str();
  evalc->allow_extras();
  evalc->footer("The run configuration comes from the checkpoint; --key value pairs override it.");

  auto *pcount = app.add_subcommand("param-count", "Trainable parameter breakdown");
  with_config(pcount);
  pcount->add_option("--ranks", ranks, "Comma-separated LoRA ranks to sweep");

  auto *gcheck = app.add_subcommand("grad-check", "Finite-difference gradient check on a toy model");
  gcheck->add_option("--model", model, "vitlora or hybrid")->capture_default_str();
  gcheck->add_option("--tolerance", tolerance, "Relative error bound")->capture_default_str();
  gcheck->add_option("--max-entries", max_entries, "Entries per parameter (0 = all)")->capture_default_str();
  gcheck->add_option("--seed", seed, "Seed")->capture_default_str();
  gcheck->add_flag("--corrupt", corrupt, "Sabotage the matmul backward rule");

  std::string features_out = "features.csv";
  auto *export_cmd = app.add_subcommand("export-features", "Write per-sample feature vectors as CSV");
  with_config(export_cmd);
  export_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (its config replaces --config)")
      ->check(CLI::ExistingFile);
  export_cmd->add_option("--layer", layer, "cls, tap or bridged")->capture_default_str();
  export_cmd->add_option("--out", features_out, "Output CSV")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(n, seed, size, out);
    if (extract->parsed()) return cmd_extract(labels, out, slices, pad);
    if (train->parsed() || kfold->parsed()) {
      CLI::App *sub = train->parsed() ? train : kfold;
      const RunConfig c = load_run_config(config, sub->remaining());
      std::optional<Checkpoint> start;
      if (!init.empty()) start = load_checkpoint(init);
      const Checkpoint *init_ck = start ? &*start : nullptr;
      by_precision(c, [&](auto t) {
        using T = decltype(t);
        train->parsed() ? train_run<T>(c, runs, init_ck) : kfold_run<T>(c, runs, init_ck);
        return 0;
      });
      return 0;
    }
    if (evalc->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const RunConfig c = config_of_checkpoint(ck, evalc->remaining());
      by_precision(c, [&](auto t) {
        evaluate_run<decltype(t)>(ck, c, eval_out);
        return 0;
      });
      return 0;
    }
    if (pcount->parsed()) return cmd_param_count(load_run_config(config, pcount->remaining()), ranks);
    if (gcheck->parsed()) return cmd_grad_check(model, tolerance, corrupt, max_entries, seed);
    if (export_cmd->parsed()) {
      const FeatureLayer fl = parse_feature_layer(layer);
      std::optional<Checkpoint> ck;
      if (!checkpoint.empty()) ck = load_checkpoint(checkpoint);
      const RunConfig c = ck ? config_of_checkpoint(*ck, export_cmd->remaining())
                             : load_run_config(config, export_cmd->remaining());
      by_precision(c, [&](auto t) {
        export_run<decltype(t)>(ck ? &*ck : nullptr, c, fl, features_out);
        return 0;
      });
      return 0;
    }
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
