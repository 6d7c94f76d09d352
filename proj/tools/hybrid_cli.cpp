// hybrid: synth | train | explain | eval
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
// 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hybrid/hybrid.hpp"

namespace fs = std::filesystem;
using namespace hyb;

namespace {

constexpr int kOk = 0, kUsage = 2, kNumeric = 3;

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_globals(CLI::App* cmd, Globals& g) {
  cmd->add_option("--config", g.config, "Run configuration file");
  cmd->add_option("--set", g.sets, "Override as section.key=value (repeatable)");
  cmd->add_option("--seed", g.seed, "Seed applied to every random stream");
  cmd->add_option("--out", g.out, "Output directory");
}

RunConfig resolve(const Globals& g) {
  RunConfig rc = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) apply_global_seed(rc, *g.seed);
  for (const auto& s : g.sets) apply_override(rc, s);
  if (!g.out.empty()) rc.out_dir = g.out;
  rc.validate();
  return rc;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

Dataset load_data(const RunConfig& rc, std::size_t classes) {
  if (rc.source == DataSource::synth) return synth_dataset(rc.synth);
  return load_dataset_dir(rc.data_path, classes);
}

Dataset load_data_arg(const RunConfig& rc, const std::string& data, std::size_t classes) {
  return data.empty() ? load_data(rc, classes) : load_dataset_dir(data, classes);
}

HybridModel<float>* load_model(const std::string& ckpt_path, std::unique_ptr<HybridModel<float>>& holder, Checkpoint& ck) {
  ck = load_checkpoint(ckpt_path);
  holder = std::make_unique<HybridModel<float>>(ck.config());
  restore(*holder, ck);
  return holder.get();
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int cmd_synth(const Globals& g, bool force) {
  RunConfig rc = resolve(g);
  const fs::path out = rc.out_dir;
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    std::cerr << "error: output directory " << out << " is not empty (use --force)\n";
    return kUsage;
  }
  const Dataset ds = synth_dataset(rc.synth);
  write_dataset_dir(ds, out);
  write_text(out / "config.ini", format_run_config(rc));
  std::vector<std::size_t> hist(ds.classes, 0);
  for (const auto& s : ds.samples) ++hist[s.label];
  std::cout << "wrote " << ds.size() << " images to " << out.string() << "\n";
  for (std::size_t c = 0; c < hist.size(); ++c) std::cout << "  grade " << c << ": " << hist[c] << "\n";
  return kOk;
}

int cmd_train(const Globals& g) {
  RunConfig rc = resolve(g);
  const fs::path out = rc.out_dir;
  fs::create_directories(out);
  write_text(out / "config.ini", format_run_config(rc));
  const Dataset ds = load_data(rc, rc.model.classes);
  const Split split = split_dataset(ds, rc.train.val_fraction, rc.train.test_fraction, rc.train.seed);
  HybridModel<float> model(rc.model);
  std::cout << "parameters: " << model.params().count_scalars() << ", train/val/test: " << split.train.size() << "/"
            << split.val.size() << "/" << split.test.size() << "\n";
  const FitResult fr = fit(model, ds, split, rc.train, [](const EpochRecord& r) {
    std::printf("epoch %zu  lr %.3e  ce %.5f  l1 %.3f  val_acc %.4f\n", r.epoch, r.lr, r.ce, r.l1, r.val_accuracy);
    std::fflush(stdout);
  });
  save_checkpoint(fr.best, out / "checkpoint.fhyb");
  write_history_csv(fr.history, out / "history.csv");
  restore(model, fr.best);
  const EvalResult test = evaluate(model, ds, split.test);
  std::string split_csv = "filename,split\n";
  for (auto [name, idx] : {std::pair{"train", &split.train}, {"val", &split.val}, {"test", &split.test}})
    for (std::size_t i : *idx) split_csv += ds.samples[i].id + "," + name + "\n";
  write_text(out / "split.csv", split_csv);
  write_text(out / "summary.txt", "best_epoch=" + std::to_string(fr.best.epoch) + "\nval_accuracy=" + num(fr.best.val_accuracy) +
                                      "\ntest_accuracy=" + num(test.accuracy()) + "\ntest_mean_abs_evidence=" +
                                      num(test.mean_abs_evidence) + "\n");
  std::cout << "best epoch " << fr.best.epoch << ", test accuracy " << test.accuracy() << "\n";
  return kOk;
}

int cmd_explain(const Globals& g, const std::string& ckpt, const std::string& image_path) {
  std::unique_ptr<HybridModel<float>> holder;
  Checkpoint ck;
  const HybridModel<float>& model = *load_model(ckpt, holder, ck);
  const Image img = read_pnm(image_path);
  const auto& mc = model.config();
  if (img.channels != mc.backbone.in_channels || img.height != mc.backbone.input_size || img.width != mc.backbone.input_size) {
    std::cerr << "error: image is " << img.channels << "x" << img.height << "x" << img.width << " but the model expects "
              << mc.backbone.in_channels << "x" << mc.backbone.input_size << "x" << mc.backbone.input_size << "\n";
    return kUsage;
  }
  const fs::path out = g.out.empty() ? fs::path("explain") : fs::path(g.out);
  fs::create_directories(out / "csv");
  const Explanation<float> ex = explain_once(model, img, image_path);
  const auto& names = ex.evidence.class_names;

  std::string pred;
  for (std::size_t c = 0; c < names.size(); ++c) pred += (c ? "," : "") + names[c];
  pred += "\n";
  for (std::size_t c = 0; c < ex.probabilities.size(); ++c) pred += (c ? "," : "") + num(ex.probabilities[c]);
  write_text(out / "prediction.csv", pred + "\n");

  for (std::size_t c = 0; c < ex.heatmaps.size(); ++c) {
    const Heatmap& h = ex.heatmaps[c];
    write_pgm_bytes(out / ("heatmap_" + names[c] + ".pgm"), h.height, h.width, heatmap_bytes(h));
    std::string grid;
    for (std::size_t y = 0; y < h.height; ++y) {
      for (std::size_t x = 0; x < h.width; ++x) grid += (x ? "," : "") + num(h.at(y, x));
      grid += "\n";
    }
    write_text(out / "csv" / ("heatmap_" + names[c] + ".csv"), grid);
  }
  std::string meta = "source=" + image_path + "\ncheckpoint=" + ckpt + "\ncheckpoint_id=" + model.checkpoint_id +
                     "\npredicted=" + names[ex.predicted] + "\nforward_passes=" + std::to_string(model.forward_count()) +
                     "\nheatmap_bias=included\nheatmap_upsampling=nearest\npgm_encoding=symmetric,zero=128\n";
  for (std::size_t c = 0; c < ex.evidence.bias.size(); ++c) meta += "bias_" + names[c] + "=" + num(ex.evidence.bias[c]) + "\n";
  write_text(out / "metadata.txt", meta);
  std::cout << "predicted " << names[ex.predicted] << " (p=" << ex.probabilities[ex.predicted] << ")\n";
  return kOk;
}

std::vector<std::size_t> select_split(const RunConfig& rc, const Dataset& ds, const std::string& which) {
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  if (which == "all") return all;
  const Split sp = split_dataset(ds, rc.train.val_fraction, rc.train.test_fraction, rc.train.seed);
  if (which == "train") return sp.train;
  if (which == "val") return sp.val;
  if (which == "test") return sp.test;
  throw ConfigError("--split must be all, train, val or test");
}

int cmd_eval(const Globals& g, const std::string& ckpt, const std::string& data, const std::string& metric_flag,
             const std::string& weights_flag, const std::string& which) {
  RunConfig rc = resolve(g);
  if (!metric_flag.empty()) rc.eval.metric = metric_flag;
  if (!weights_flag.empty()) rc.eval.kappa_weights = parse_kappa_weights(weights_flag);
  rc.validate();
  std::unique_ptr<HybridModel<float>> holder;
  Checkpoint ck;
  const HybridModel<float>& model = *load_model(ckpt, holder, ck);
  const Dataset ds = load_data_arg(rc, data, model.config().classes);
  const std::vector<std::size_t> idx = select_split(rc, ds, which);
  const fs::path out = g.out.empty() ? fs::path() : fs::path(g.out);
  if (!out.empty()) fs::create_directories(out);
  const std::string& m = rc.eval.metric;

  if (m == "accuracy" || m == "kappa") {
    const EvalResult r = evaluate(model, ds, idx);
    const PairMetric f = m == "accuracy" ? accuracy_metric() : kappa_metric(ds.classes, rc.eval.kappa_weights);
    const BootstrapCI ci = bootstrap_ci(r.labels, r.predictions, f, rc.eval.seed, rc.eval.resamples);
    const std::string label = m == "kappa" ? "kappa(" + to_string(rc.eval.kappa_weights) + ")" : "accuracy";
    const std::string line = label + "=" + num(ci.estimate) + " ci95=[" + num(ci.lower) + "," + num(ci.upper) +
                             "] ci_length=" + num(ci.length()) + " n=" + std::to_string(r.labels.size()) + "\n";
    std::cout << line;
    if (!out.empty()) write_text(out / ("eval_" + m + ".txt"), line);
    return kOk;
  }
  if (m == "precision") {
    bool any = false;
    for (std::size_t i : idx) any = any || !ds.samples[i].masks.empty();
    if (!any) {
      std::cerr << "error: metric 'precision' needs lesion masks, none found in the dataset\n";
      return kUsage;
    }
    PrecisionOptions po;
    po.protocol = rc.eval.protocol;
    po.patch = rc.eval.patch;
    po.grade = rc.eval.grade;
    po.lesion_types = rc.eval.lesion_types;
    po.diseased_only = rc.eval.diseased_only;
    const PrecisionReport rep = precision_protocol(model, ds, idx, po);
    std::cout << "protocol " << rep.protocol << ": mean precision "
              << (rep.mean ? num(*rep.mean) : std::string("none")) << " over " << rep.rows.size() << " images, "
              << rep.skipped.size() << " skipped\n";
    if (!out.empty()) write_text(out / "precision.csv", format_precision_csv({rep}));
    return kOk;
  }
  // faithfulness
  if (ck.train_mean.empty()) throw FormatError(ckpt + ": checkpoint has no training mean for deletion fill");
  if (idx.empty()) throw ConfigError("eval: no images selected");
  const Image& first = ds.samples[idx[0]].image;
  const std::size_t p = rc.eval.patch ? rc.eval.patch : default_patch_size(std::max(first.height, first.width));
  const std::size_t n_patches = ((first.height + p - 1) / p) * ((first.width + p - 1) / p);
  const FaithfulnessReport rep = faithfulness_comparison(model, ds, idx, ck.train_mean, rc.eval.remove_k, rc.eval.random_repeats,
                                                         rc.eval.seed, p, default_removal_schedule(n_patches));
  std::cout << "faithfulness k=" << rep.k << ": evidence removal beats random in " << num(rep.win_fraction()) << " of "
            << rep.rows.size() << " correctly classified positives\n";
  if (!out.empty()) write_text(out / "faithfulness.csv", format_curve_csv(rep.curves));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interpretable hybrid CNN-transformer classifier"};
  app.require_subcommand(1);
  Globals g;

  auto* synth = app.add_subcommand("synth", "Write a synthetic lesion dataset");
  add_globals(synth, g);
  bool force = false;
  synth->add_flag("--force", force, "Allow writing into a non-empty directory");

  auto* train = app.add_subcommand("train", "Train a model and keep the best validation checkpoint");
  add_globals(train, g);

  auto* explain = app.add_subcommand("explain", "Prediction and class heatmaps for one image");
  add_globals(explain, g);
  std::string ckpt, image, data, metric, weights, which = "all";
  explain->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  explain->add_option("--image", image, "Input image (.ppm/.pgm)")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  add_globals(eval, g);
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Dataset directory (default: the configured data source)");
  eval->add_option("--metric", metric, "accuracy | kappa | precision | faithfulness");
  eval->add_option("--kappa-weights", weights, "none | linear | quadratic");
  eval->add_option("--split", which, "all | train | val | test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*synth) return cmd_synth(g, force);
    if (*train) return cmd_train(g);
    if (*explain) return cmd_explain(g, ckpt, image);
    if (*eval) return cmd_eval(g, ckpt, data, metric, weights, which);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kUsage;
}
