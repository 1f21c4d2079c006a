// milforge: synthetic-MIL training engine with gated-attention pooling,
// transformer layers with 2-D positional encoding, and coarse-to-fine
// self-distillation. Subcommands: prepare, train, eval, export-attention,
// gradcheck.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>

#include "milforge/data.hpp"
#include "milforge/gradcheck_suite.hpp"
#include "milforge/metrics.hpp"
#include "milforge/model.hpp"
#include "milforge/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace milforge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

struct FoldSpec {
  bool holdout = false;
  int k = 5;
  double train_fraction = 0.8;
  std::string raw;
};

FoldSpec parse_folds(const std::string& s) {
  FoldSpec spec;
  spec.raw = s;
  if (s.rfind("kfold:", 0) == 0) {
    spec.k = std::stoi(s.substr(6));
    if (spec.k < 2) throw ConfigError("--folds kfold:N needs N >= 2");
    return spec;
  }
  if (s.rfind("holdout:", 0) == 0) {
    spec.holdout = true;
    spec.train_fraction = std::stod(s.substr(8));
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
      throw ConfigError("--folds holdout:F needs F in (0,1)");
    return spec;
  }
  throw ConfigError("--folds must be kfold:N or holdout:F, got '" + s + "'");
}

void print_class_histogram(const std::vector<Bag>& bags, std::uint32_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& b : bags) counts[b.label]++;
  std::cout << "class histogram:";
  for (std::uint32_t c = 0; c < num_classes; ++c) std::cout << " " << c << ":" << counts[c];
  std::cout << "\n";
}

// ---------------------------------------------------------------- prepare --

int cmd_prepare_mnist(const std::string& images_path, const std::string& labels_path,
                      std::size_t num_bags, int kmin, int kmax, std::uint64_t seed,
                      const std::string& out) {
  IdxImages images;
  IdxLabels labels;
  try {
    images = parse_idx_images(images_path);
    labels = parse_idx_labels(labels_path);
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n"
              << "expected MNIST IDX files at:\n  " << images_path << "\n  " << labels_path << "\n"
              << "point --images/--labels (or MILFORGE_DATA_DIR) at them, or generate a\n"
              << "procedural corpus with `milforge prepare digits-idx`.\n";
    throw;
  }
  auto bags = synth_mnist_bags(images, labels, num_bags, {kmin, kmax}, seed);
  DatasetManifest manifest;
  manifest.num_classes = 4;
  manifest.feature_dim = static_cast<std::uint32_t>(bags.front().d());
  manifest.spatial = false;
  manifest.seed = seed;
  manifest.bag_count = static_cast<std::uint32_t>(bags.size());
  write_bags(out, bags, manifest);
  std::cout << "wrote " << out << ": B=" << bags.size() << " C=4 D=" << manifest.feature_dim << "\n";
  print_class_histogram(bags, 4);
  return kExitOk;
}

int cmd_prepare_spatial(std::size_t num_bags, std::size_t k, std::uint64_t seed, const std::string& out) {
  auto bags = synth_spatial_bags(num_bags, k, seed);
  DatasetManifest manifest;
  manifest.num_classes = 2;
  manifest.feature_dim = 8;
  manifest.spatial = true;
  manifest.seed = seed;
  manifest.bag_count = static_cast<std::uint32_t>(bags.size());
  write_bags(out, bags, manifest);
  std::cout << "wrote " << out << ": B=" << bags.size() << " C=2 D=8 spatial=1\n";
  print_class_histogram(bags, 2);
  return kExitOk;
}

int cmd_prepare_digits(std::size_t count, std::uint64_t seed, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto [images, labels] = make_digit_corpus(count, seed);
  const auto img_path = (fs::path(out_dir) / "train-images-idx3-ubyte").string();
  const auto lab_path = (fs::path(out_dir) / "train-labels-idx1-ubyte").string();
  write_idx_images(img_path, images);
  write_idx_labels(lab_path, labels);
  std::cout << "wrote " << img_path << " and " << lab_path << " (" << count << " digits)\n";
  return kExitOk;
}

// ------------------------------------------------------------------ train --

struct TrainArgs {
  std::string data, out;
  std::string model = "clamsb", pe = "none", cfsd = "off", folds = "holdout:0.8";
  double lr = 2e-4, wd = 1e-2;
  int epochs = 150, patience = 15, accum = 32, warmup = 5, jobs = 1;
  double sigma = 100.0;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& args) {
  const auto [bags, base_manifest] = read_bags(args.data);
  const ModelKind kind = parse_model_kind(args.model);
  const PeMode pe = parse_pe_mode(args.pe);
  const CfsdMode cfsd = parse_cfsd_mode(args.cfsd);
  const FoldSpec folds = parse_folds(args.folds);

  // Flag validation before any training starts.
  if (pe == PeMode::twod && kind != ModelKind::pathmil)
    throw ConfigError("--pe 2d requires --model pathmil");
  if (pe == PeMode::twod && !base_manifest.spatial)
    throw ConfigError("--pe 2d needs a spatial dataset (this one has no coordinates)");
  if (cfsd != CfsdMode::off && (kind == ModelKind::maxpool || kind == ModelKind::meanpool))
    throw ConfigError("--cfsd requires an attention-based model (abmil|clamsb|pathmil)");

  TrainConfig cfg;
  cfg.lr = args.lr;
  cfg.weight_decay = args.wd;
  cfg.max_epochs = args.epochs;
  cfg.patience = args.patience;
  cfg.accumulation = args.accum;
  cfg.warmup = args.warmup;
  cfg.cfsd = cfsd;
  cfg.seed = args.seed;
  cfg.validate();

  ModelConfig mcfg;
  mcfg.kind = kind;
  mcfg.pe = pe;
  mcfg.num_classes = base_manifest.num_classes;
  mcfg.feature_dim = base_manifest.feature_dim;
  mcfg.sigma = static_cast<float>(args.sigma);

  DatasetManifest split = folds.holdout ? holdout_split(bags, folds.train_fraction, args.seed)
                                        : kfold_split(bags, folds.k, args.seed);
  const auto plans = fold_plans(split, folds.holdout);

  fs::create_directories(args.out);
  {
    json snapshot = {
        {"command", "train"},
        {"milforge_version", kVersion},
        {"data", args.data},
        {"data_digest", file_digest(args.data)},
        {"model", args.model},
        {"pe", args.pe},
        {"cfsd", args.cfsd},
        {"folds", args.folds},
        {"lr", args.lr},
        {"weight_decay", args.wd},
        {"epochs", args.epochs},
        {"patience", args.patience},
        {"accumulation", args.accum},
        {"warmup", args.warmup},
        {"sigma", args.sigma},
        {"seed", args.seed},
        {"dataset", {{"num_classes", base_manifest.num_classes},
                     {"feature_dim", base_manifest.feature_dim},
                     {"spatial", base_manifest.spatial},
                     {"bag_count", base_manifest.bag_count},
                     {"generation_seed", base_manifest.seed}}},
    };
    std::ofstream cfg_out(fs::path(args.out) / "config.json");
    cfg_out << snapshot.dump(2) << "\n";
  }

  auto run_one = [&](std::size_t fold_idx) -> FoldResult {
    const fs::path fold_dir = fs::path(args.out) / ("fold" + std::to_string(fold_idx));
    fs::create_directories(fold_dir);
    auto model = MilModel<float>::make(mcfg, Rng::mix(args.seed, fold_idx));
    std::ofstream log(fold_dir / "train.log");
    auto result = fit_fold(model, bags, plans[fold_idx].train, plans[fold_idx].val, cfg, &log);
    std::ofstream hist(fold_dir / "history.csv");
    hist << kHistoryHeader << "\n";
    for (const auto& row : result.history()) hist << history_row(row) << "\n";
    save_checkpoint((fold_dir / "best.milw").string(), model);
    return result;
  };

  std::vector<FoldResult> results(plans.size());
  if (args.jobs > 1 && plans.size() > 1) {
    std::vector<std::future<FoldResult>> futs;
    for (std::size_t f = 0; f < plans.size(); ++f)
      futs.push_back(std::async(std::launch::async, run_one, f));
    for (std::size_t f = 0; f < plans.size(); ++f) results[f] = futs[f].get();
  } else {
    for (std::size_t f = 0; f < plans.size(); ++f) results[f] = run_one(f);
  }

  std::ofstream res(fs::path(args.out) / "results.csv");
  res << EvalReport::csv_header() << "\n";
  for (std::size_t f = 0; f < plans.size(); ++f) {
    res << results[f].final_eval.csv_row(args.out, int(f), "val") << "\n";
    std::cout << "fold " << f << ": val bag AUC " << results[f].final_eval.bag_auc;
    if (results[f].final_eval.has_instance)
      std::cout << ", inst AUC " << results[f].final_eval.inst_auc;
    std::cout << " (phases:";
    for (const auto& ph : results[f].phases)
      std::cout << " " << ph.name << "@" << ph.best_epoch;
    std::cout << ")\n";
  }
  std::cout << "run artifacts in " << args.out << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------- eval --

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& folds_arg,
             std::uint64_t seed, const std::string& split) {
  auto model = load_checkpoint(checkpoint);
  const auto [bags, manifest] = read_bags(data);
  if (model.config.feature_dim != manifest.feature_dim ||
      model.config.num_classes != manifest.num_classes)
    throw DimensionError("eval: checkpoint (C=" + std::to_string(model.config.num_classes) + ",D=" +
                         std::to_string(model.config.feature_dim) + ") does not match dataset (C=" +
                         std::to_string(manifest.num_classes) + ",D=" + std::to_string(manifest.feature_dim) + ")");
  if (model.config.pe == PeMode::twod && !manifest.spatial)
    throw DimensionError("eval: spatial checkpoint on a coordinate-free dataset");

  std::vector<std::size_t> indices;
  if (split == "all") {
    indices.resize(bags.size());
    std::iota(indices.begin(), indices.end(), 0);
  } else {
    const FoldSpec folds = parse_folds(folds_arg);
    if (!folds.holdout) throw ConfigError("eval: --split train/val needs --folds holdout:F");
    auto plan = fold_plans(holdout_split(bags, folds.train_fraction, seed), true)[0];
    indices = split == "train" ? plan.train : plan.val;
  }

  const bool has_truth = std::all_of(indices.begin(), indices.end(),
                                     [&](std::size_t i) { return bags[i].instance_truth.has_value(); });
  auto report = evaluate(model, bags, indices,
                         has_truth && model.config.kind != ModelKind::maxpool &&
                                 model.config.kind != ModelKind::meanpool
                             ? EvalLevel::instance
                             : EvalLevel::bag);
  std::cout << report.text();
  return kExitOk;
}

// -------------------------------------------------------- export-attention --

int cmd_export_attention(const std::string& checkpoint, const std::string& data,
                         const std::string& out_dir, long long only_bag) {
  auto model = load_checkpoint(checkpoint);
  const auto [bags, manifest] = read_bags(data);
  if (model.config.feature_dim != manifest.feature_dim)
    throw DimensionError("export-attention: checkpoint D does not match dataset D");
  if (model.config.kind == ModelKind::maxpool || model.config.kind == ModelKind::meanpool)
    throw ConfigError("export-attention: model has no attention scores");
  fs::create_directories(out_dir);
  const std::size_t C = model.config.num_classes;

  std::size_t written = 0;
  for (const auto& bag : bags) {
    if (only_bag >= 0 && bag.id != static_cast<std::uint32_t>(only_bag)) continue;
    Tape<float> tape;
    const Tensor<float>* coords = bag.coords ? &*bag.coords : nullptr;
    auto f = model.forward(tape, bag.features, coords);
    const auto& s = tape.value(f.scores);
    const auto& a = tape.value(f.alpha);

    std::ofstream csv(fs::path(out_dir) / ("bag_" + std::to_string(bag.id) + ".csv"));
    csv << "instance_index,instance_truth";
    if (bag.coords) csv << ",cx,cy";
    for (std::size_t c = 0; c < C; ++c) csv << ",s_" << c;
    for (std::size_t c = 0; c < C; ++c) csv << ",alpha_" << c;
    csv << "\n";
    for (std::size_t k = 0; k < bag.k(); ++k) {
      csv << k << "," << (bag.instance_truth ? int((*bag.instance_truth)[k]) : -1);
      if (bag.coords) csv << "," << bag.coords->at(k, 0) << "," << bag.coords->at(k, 1);
      for (std::size_t c = 0; c < C; ++c) csv << "," << s.at(k, c);
      for (std::size_t c = 0; c < C; ++c) csv << "," << a.at(k, c);
      csv << "\n";
    }
    ++written;
  }
  if (written == 0) throw ConfigError("export-attention: no matching bag");
  std::cout << "wrote " << written << " attention CSV file(s) to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"milforge: multiple-instance learning engine (gated attention, 2DPE transformer, CFSD)"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "generate datasets");
  prepare->require_subcommand(1);

  std::string p_images = default_data_dir() + "/train-images-idx3-ubyte";
  std::string p_labels = default_data_dir() + "/train-labels-idx1-ubyte";
  std::size_t p_bags = 2000;
  int p_kmin = 6, p_kmax = 12;
  std::uint64_t p_seed = 7;
  std::string p_out = "mnist.milbag";
  auto* prep_mnist = prepare->add_subcommand("mnist-bags", "bags of MNIST digits with rule labels");
  prep_mnist->add_option("--images", p_images, "IDX image file");
  prep_mnist->add_option("--labels", p_labels, "IDX label file");
  prep_mnist->add_option("--bags", p_bags, "number of bags");
  prep_mnist->add_option("--kmin", p_kmin, "min bag size");
  prep_mnist->add_option("--kmax", p_kmax, "max bag size");
  prep_mnist->add_option("--seed", p_seed, "generation seed");
  prep_mnist->add_option("--out", p_out, "output .milbag path");

  std::size_t s_bags = 1000, s_k = 32;
  std::uint64_t s_seed = 7;
  std::string s_out = "spatial.milbag";
  auto* prep_spatial = prepare->add_subcommand("spatial", "spatial marker-pair bags");
  prep_spatial->add_option("--bags", s_bags, "number of bags");
  prep_spatial->add_option("--k", s_k, "instances per bag");
  prep_spatial->add_option("--seed", s_seed, "generation seed");
  prep_spatial->add_option("--out", s_out, "output .milbag path");

  std::size_t d_count = 20000;
  std::uint64_t d_seed = 7;
  std::string d_out = default_data_dir();
  auto* prep_digits = prepare->add_subcommand("digits-idx", "procedural 28x28 digit corpus in IDX format");
  prep_digits->add_option("--count", d_count, "number of digit images");
  prep_digits->add_option("--seed", d_seed, "generation seed");
  prep_digits->add_option("--out", d_out, "output directory");

  // train
  TrainArgs t;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", t.data, "input .milbag")->required();
  train->add_option("--out", t.out, "run directory")->required();
  train->add_option("--model", t.model, "maxpool|meanpool|abmil|clamsb|pathmil");
  train->add_option("--pe", t.pe, "none|2d");
  train->add_option("--cfsd", t.cfsd, "off|parallel|finetune");
  train->add_option("--folds", t.folds, "kfold:N | holdout:F");
  train->add_option("--lr", t.lr, "peak learning rate");
  train->add_option("--wd", t.wd, "weight decay");
  train->add_option("--epochs", t.epochs, "max epochs");
  train->add_option("--patience", t.patience, "early-stop patience");
  train->add_option("--accum", t.accum, "gradient accumulation (bags)");
  train->add_option("--warmup", t.warmup, "epochs before CFSD activates (parallel)");
  train->add_option("--sigma", t.sigma, "2DPE sinusoid input scale");
  train->add_option("--seed", t.seed, "training seed");
  train->add_option("--jobs", t.jobs, "concurrent folds");

  // eval
  std::string e_ckpt, e_data, e_folds = "holdout:0.8", e_split = "all";
  std::uint64_t e_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", e_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--data", e_data, "input .milbag")->required();
  eval_cmd->add_option("--folds", e_folds, "split spec for --split train / val");
  eval_cmd->add_option("--seed", e_seed, "split seed");
  eval_cmd->add_option("--split", e_split, "all|train|val");

  // export-attention
  std::string x_ckpt, x_data, x_out = "attention";
  long long x_bag = -1;
  auto* export_cmd = app.add_subcommand("export-attention", "per-bag attention score CSVs");
  export_cmd->add_option("--checkpoint", x_ckpt, "model checkpoint")->required();
  export_cmd->add_option("--data", x_data, "input .milbag")->required();
  export_cmd->add_option("--out", x_out, "output directory");
  export_cmd->add_option("--bag", x_bag, "export only this bag id");

  // gradcheck
  std::uint64_t g_seed = 7;
  bool g_inject = false;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference validation of all blocks");
  gradcheck_cmd->add_option("--seed", g_seed, "seed");
  gradcheck_cmd->add_flag("--inject-sign-flip", g_inject, "add a deliberately broken block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (prep_mnist->parsed()) return cmd_prepare_mnist(p_images, p_labels, p_bags, p_kmin, p_kmax, p_seed, p_out);
    if (prep_spatial->parsed()) return cmd_prepare_spatial(s_bags, s_k, s_seed, s_out);
    if (prep_digits->parsed()) return cmd_prepare_digits(d_count, d_seed, d_out);
    if (train->parsed()) return cmd_train(t);
    if (eval_cmd->parsed()) return cmd_eval(e_ckpt, e_data, e_folds, e_seed, e_split);
    if (export_cmd->parsed()) return cmd_export_attention(x_ckpt, x_data, x_out, x_bag);
    if (gradcheck_cmd->parsed()) {
      const bool ok = run_gradcheck_suite(std::cout, g_inject, g_seed);
      return ok ? kExitOk : kExitNumerical;
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const MetricError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}
