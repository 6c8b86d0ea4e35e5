// Command-line front end for the source-tracing toolkit: synthetic data
// generation, embedding-network training, embedding extraction, all-pairs
// EER evaluation, linear probing and 2-D projection.
//
// Exit codes: 0 success, 1 usage/configuration error, 2 data error,
// 3 numeric failure (non-finite loss).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "srctrace/srctrace.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

ordered_json default_config() {
  return ordered_json{
      {"seed", 0},
      {"threads", 1},
      {"paths",
       {{"train", ""}, {"dev", ""}, {"input", ""}, {"model", ""}, {"manifest", ""},
        {"out", ""}}},
      {"synth",
       {{"n_classes", 24},
        {"dim", 32},
        {"samples_per_class", 40},
        {"cluster_spread", 0.5},
        {"class_separation", 2.5},
        {"unseen_classes", 5}}},
      {"model",
       {{"hidden", ordered_json::array({64})},
        {"output_dim", 50},
        {"activation", "relu"},
        {"normalize_output", "auto"}}},
      {"sampler",
       {{"mode", "balanced"},
        {"batch_size", 128},
        {"n_classes_per_batch", 4},
        {"per_class", 3},
        {"drop_last", true}}},
      {"train",
       {{"epochs", 100},
        {"peak_lr", 1e-4},
        {"warmup_epochs", 10},
        {"momentum", 0.9},
        {"eval_interval", 25},
        {"loss", "ge2e"}}},
      {"margin", {{"m", 0.3}, {"s", 30.0}}},
      {"probe",
       {{"epochs", 50}, {"lr", 0.1}, {"train_fraction", 0.8}, {"per_class_cap", 300}}},
      {"eval",
       {{"bins", 100000},
        {"exact", false},
        {"block_rows", 1024},
        {"by_condition", false},
        {"split", ""}}},
  };
}

bool leaf_types_compatible(const std::string& key, const ordered_json& base,
                           const ordered_json& user) {
  if (base.is_number() && user.is_number()) return true;
  if (base.type() == user.type()) return true;
  // normalize_output takes "auto" or an explicit boolean
  if (key == "normalize_output" && (user.is_boolean() || user.is_string())) return true;
  return false;
}

// Overlays `user` onto `base`; any key absent from the default skeleton is
// rejected so typos cannot silently fall back to defaults.
void merge_config(ordered_json& base, const ordered_json& user, const std::string& prefix) {
  if (!user.is_object())
    throw srctrace::InvalidSpecError("config: expected an object at " +
                                     (prefix.empty() ? "top level" : prefix));
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key))
      throw srctrace::InvalidSpecError("config: unknown key \"" + path + "\"");
    if (base[key].is_object() && !base[key].empty() && !base[key].is_array()) {
      merge_config(base[key], value, path);
    } else {
      if (!leaf_types_compatible(key, base[key], value))
        throw srctrace::InvalidSpecError("config: wrong type for \"" + path + "\"");
      base[key] = value;
    }
  }
}

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  bool has_seed = false, has_threads = false, has_out = false;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON configuration file");
  cmd->add_option("--seed", flags.seed, "random seed")->each([&](const std::string&) {
    flags.has_seed = true;
  });
  cmd->add_option("--threads", flags.threads, "worker cap for pair scoring")
      ->each([&](const std::string&) { flags.has_threads = true; });
  cmd->add_option("--out", flags.out, "output file or directory")
      ->each([&](const std::string&) { flags.has_out = true; });
}

ordered_json build_config(const CommonFlags& flags) {
  ordered_json cfg = default_config();
  if (!flags.config_path.empty()) {
    std::ifstream f(flags.config_path);
    if (!f) throw srctrace::IoError("cannot open config file " + flags.config_path);
    ordered_json user;
    try {
      user = ordered_json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw srctrace::ParseError(std::string("config: ") + e.what());
    }
    merge_config(cfg, user, "");
  }
  if (flags.has_seed) cfg["seed"] = flags.seed;
  if (flags.has_threads) cfg["threads"] = flags.threads;
  if (flags.has_out) cfg["paths"]["out"] = flags.out;
  return cfg;
}

// The effective configuration goes to stdout for provenance and, when an
// output location exists, to a JSON sidecar that can be fed back via
// --config to reproduce the run.
void echo_config(const ordered_json& cfg, const std::string& out_path) {
  std::cout << "effective-config\t" << cfg.dump() << "\n";
  if (out_path.empty()) return;
  fs::path sidecar;
  if (fs::is_directory(out_path))
    sidecar = fs::path(out_path) / "effective_config.json";
  else
    sidecar = fs::path(out_path + ".config.json");
  std::ofstream f(sidecar);
  if (!f) throw srctrace::IoError("cannot write " + sidecar.string());
  f << cfg.dump(2) << "\n";
}

srctrace::SynthSpec synth_spec_from(const ordered_json& cfg) {
  srctrace::SynthSpec spec;
  const auto& s = cfg.at("synth");
  spec.n_classes = s.at("n_classes").get<std::size_t>();
  spec.dim = s.at("dim").get<std::size_t>();
  spec.samples_per_class = s.at("samples_per_class").get<std::size_t>();
  spec.cluster_spread = s.at("cluster_spread").get<double>();
  spec.class_separation = s.at("class_separation").get<double>();
  spec.unseen_classes = s.at("unseen_classes").get<std::size_t>();
  spec.seed = cfg.at("seed").get<std::uint64_t>();
  return spec;
}

srctrace::SamplerConfig sampler_from(const ordered_json& cfg) {
  srctrace::SamplerConfig sc;
  const auto& s = cfg.at("sampler");
  const std::string mode = s.at("mode").get<std::string>();
  if (mode == "random")
    sc.mode = srctrace::SamplerMode::kRandom;
  else if (mode == "balanced")
    sc.mode = srctrace::SamplerMode::kBalanced;
  else
    throw srctrace::InvalidSpecError("config: sampler.mode must be random|balanced");
  sc.batch_size = s.at("batch_size").get<std::size_t>();
  sc.n_classes_per_batch = s.at("n_classes_per_batch").get<std::size_t>();
  sc.per_class = s.at("per_class").get<std::size_t>();
  sc.drop_last = s.at("drop_last").get<bool>();
  sc.seed = cfg.at("seed").get<std::uint64_t>();
  return sc;
}

srctrace::TrainConfig train_config_from(const ordered_json& cfg) {
  srctrace::TrainConfig tc;
  const auto& t = cfg.at("train");
  tc.epochs = t.at("epochs").get<std::size_t>();
  tc.peak_lr = t.at("peak_lr").get<double>();
  tc.warmup_epochs = t.at("warmup_epochs").get<std::size_t>();
  tc.momentum = t.at("momentum").get<double>();
  tc.eval_interval = t.at("eval_interval").get<std::size_t>();
  tc.loss = srctrace::loss_kind_from_string(t.at("loss").get<std::string>());
  tc.margin.margin = cfg.at("margin").at("m").get<double>();
  tc.margin.scale = cfg.at("margin").at("s").get<double>();
  tc.sampler = sampler_from(cfg);
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  return tc;
}

srctrace::MlpModel model_from(const ordered_json& cfg, std::size_t input_dim,
                              srctrace::LossKind loss) {
  const auto& m = cfg.at("model");
  std::vector<std::size_t> widths{input_dim};
  for (const auto& h : m.at("hidden")) widths.push_back(h.get<std::size_t>());
  widths.push_back(m.at("output_dim").get<std::size_t>());
  const auto activation =
      srctrace::activation_from_string(m.at("activation").get<std::string>());
  bool normalize = loss != srctrace::LossKind::kSoftmax;  // "auto" default
  const auto& no = m.at("normalize_output");
  if (no.is_boolean()) normalize = no.get<bool>();
  return srctrace::init_model(widths, cfg.at("seed").get<std::uint64_t>(), activation,
                              normalize);
}

srctrace::PairScoringOptions scoring_options(const ordered_json& cfg) {
  srctrace::PairScoringOptions opts;
  opts.block_rows = cfg.at("eval").at("block_rows").get<std::size_t>();
  opts.threads = cfg.at("threads").get<std::size_t>();
  return opts;
}

std::string require_path(const ordered_json& cfg, const char* key, const char* what) {
  const std::string p = cfg.at("paths").at(key).get<std::string>();
  if (p.empty())
    throw srctrace::InvalidSpecError(std::string("missing ") + what + " (set --" + key +
                                     " or paths." + key + ")");
  return p;
}

int run_gen_data(ordered_json cfg) {
  const std::string out = require_path(cfg, "out", "output directory");
  fs::create_directories(out);
  echo_config(cfg, out);
  const srctrace::SynthSpec spec = synth_spec_from(cfg);
  const srctrace::SynthDataset data = srctrace::generate(spec);
  const fs::path dir(out);
  srctrace::write_embeddings(data.train, (dir / "train.embf").string());
  srctrace::write_embeddings(data.dev, (dir / "dev.embf").string());
  srctrace::write_manifest(data.manifest, (dir / "manifest.jsonl").string());
  ordered_json summary{{"train_count", data.train.count()},
                       {"dev_count", data.dev.count()},
                       {"dim", spec.dim},
                       {"train_classes", data.train.num_classes()},
                       {"dev_classes", data.dev.num_classes()}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_train(ordered_json cfg) {
  const std::string train_path = require_path(cfg, "train", "training feature file");
  const std::string dev_path = require_path(cfg, "dev", "dev feature file");
  const std::string out = require_path(cfg, "out", "output directory");
  fs::create_directories(out);
  echo_config(cfg, out);

  const srctrace::EmbeddingSet train_set = srctrace::read_embeddings(train_path);
  const srctrace::EmbeddingSet dev_set = srctrace::read_embeddings(dev_path);
  const srctrace::TrainConfig tc = train_config_from(cfg);
  srctrace::MlpModel model = model_from(cfg, train_set.dim(), tc.loss);

  const srctrace::TrainResult result = srctrace::train(std::move(model), train_set, dev_set, tc);

  const fs::path dir(out);
  ordered_json ckpt_cfg{{"sampler", cfg.at("sampler")},
                        {"margin", cfg.at("margin")},
                        {"train", cfg.at("train")},
                        {"seed", cfg.at("seed")}};
  srctrace::save_checkpoint(result.model, (dir / "checkpoint.ckpt").string(), ckpt_cfg);
  {
    std::ofstream hist(dir / "history.jsonl");
    if (!hist) throw srctrace::IoError("cannot write history.jsonl");
    srctrace::write_history(result.history, hist);
  }
  ordered_json summary{{"best_dev_eer", result.best_dev_eer},
                       {"best_epoch", result.best_epoch},
                       {"epochs", result.history.size()},
                       {"checkpoint", (dir / "checkpoint.ckpt").string()}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_embed(ordered_json cfg) {
  const std::string model_path = require_path(cfg, "model", "model checkpoint");
  const std::string input_path = require_path(cfg, "input", "input feature file");
  const std::string out = require_path(cfg, "out", "output embedding file");
  const srctrace::MlpModel model = srctrace::load_checkpoint(model_path);
  const srctrace::EmbeddingSet features = srctrace::read_embeddings(input_path);
  const srctrace::ForwardResult fwd = srctrace::forward(model, features.to_matrix());
  const srctrace::EmbeddingSet embeddings(fwd.embeddings, features.labels(),
                                          features.class_names());
  srctrace::write_embeddings(embeddings, out);
  echo_config(cfg, out);
  ordered_json summary{{"count", embeddings.count()}, {"dim", embeddings.dim()}, {"out", out}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_eval_eer(ordered_json cfg) {
  const std::string input_path = require_path(cfg, "input", "embedding file");
  const srctrace::EmbeddingSet set = srctrace::read_embeddings(input_path);
  const auto opts = scoring_options(cfg);
  const bool exact = cfg.at("eval").at("exact").get<bool>();
  const std::size_t bins = cfg.at("eval").at("bins").get<std::size_t>();

  srctrace::EerResult overall;
  if (exact)
    overall = srctrace::compute_eer_exact(srctrace::score_all_pairs(set, opts));
  else
    overall = srctrace::histogram_eer_all_pairs(set, bins, opts);
  ordered_json report = srctrace::eer_report_json(overall);
  report["mode"] = exact ? "exact" : "histogram";

  if (cfg.at("eval").at("by_condition").get<bool>()) {
    const std::string manifest_path = require_path(cfg, "manifest", "manifest file");
    auto entries = srctrace::read_manifest(manifest_path);
    const std::string split = cfg.at("eval").at("split").get<std::string>();
    if (!split.empty()) {
      std::vector<srctrace::ManifestEntry> filtered;
      for (auto& e : entries)
        if (srctrace::to_string(e.split) == split) filtered.push_back(std::move(e));
      entries = std::move(filtered);
    }
    if (entries.size() != set.count())
      throw srctrace::ShapeMismatchError("manifest rows (" + std::to_string(entries.size()) +
                                         ") do not match embedding rows (" +
                                         std::to_string(set.count()) + ")");
    std::vector<std::string> conditions;
    conditions.reserve(entries.size());
    for (const auto& e : entries) conditions.push_back(srctrace::condition_key(e));
    const auto by_cond = srctrace::eer_by_condition(set, conditions, exact, bins, opts);
    ordered_json cj;
    for (const auto& [key, res] : by_cond) cj[key] = srctrace::eer_report_json(res);
    report["conditions"] = std::move(cj);
  }

  const std::string out = cfg.at("paths").at("out").get<std::string>();
  echo_config(cfg, out);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw srctrace::IoError("cannot write " + out);
    f << report.dump(2) << "\n";
  }
  std::cout << report.dump() << "\n";
  return 0;
}

int run_probe(ordered_json cfg) {
  const std::string input_path = require_path(cfg, "input", "embedding file");
  const srctrace::EmbeddingSet set = srctrace::read_embeddings(input_path);
  srctrace::ProbeConfig pc;
  const auto& p = cfg.at("probe");
  pc.epochs = p.at("epochs").get<std::size_t>();
  pc.lr = p.at("lr").get<double>();
  pc.train_fraction = p.at("train_fraction").get<double>();
  pc.per_class_cap = p.at("per_class_cap").get<std::size_t>();
  pc.seed = cfg.at("seed").get<std::uint64_t>();

  const srctrace::EmbeddingSet reduced = srctrace::undersample(set, pc.per_class_cap, pc.seed);
  const srctrace::ProbeResult result = srctrace::linear_probe(reduced, pc);

  const std::string out = cfg.at("paths").at("out").get<std::string>();
  echo_config(cfg, out);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw srctrace::IoError("cannot write " + out);
    srctrace::write_confusion_csv(result.confusion, reduced.class_names(), f);
  }
  ordered_json summary{{"accuracy", result.accuracy},
                       {"n_train", result.n_train},
                       {"n_heldout", result.n_heldout},
                       {"undersampled_count", reduced.count()}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_project(ordered_json cfg) {
  const std::string input_path = require_path(cfg, "input", "embedding file");
  const srctrace::EmbeddingSet set = srctrace::read_embeddings(input_path);
  const srctrace::Matrix proj = srctrace::project_2d(set);
  const std::string out = cfg.at("paths").at("out").get<std::string>();
  echo_config(cfg, out);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw srctrace::IoError("cannot write " + out);
    srctrace::write_projection_csv(proj, set, f);
  } else {
    srctrace::write_projection_csv(proj, set, std::cout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-tracing toolkit: metric-learning losses, EER evaluation and probing"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string path_train, path_dev, path_input, path_model, path_manifest;
  std::string flag_loss, flag_split;
  std::size_t flag_bins = 0, flag_edim = 0, flag_epochs = 0;
  bool flag_exact = false, flag_by_condition = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic source-tracing dataset");
  add_common_flags(gen, flags);

  auto* train = app.add_subcommand("train", "train the embedding network");
  add_common_flags(train, flags);
  train->add_option("--train", path_train, "training feature file");
  train->add_option("--dev", path_dev, "dev feature file");
  train->add_option("--loss", flag_loss,
                    "objective: softmax|amsoftmax|aamsoftmax|ge2e|angularproto");
  train->add_option("--embedding-dim", flag_edim, "output embedding size C");
  train->add_option("--epochs", flag_epochs, "training epochs");

  auto* embed = app.add_subcommand("embed", "run the network over a feature file");
  add_common_flags(embed, flags);
  embed->add_option("--model", path_model, "checkpoint file");
  embed->add_option("--input", path_input, "input feature file");

  auto* eer = app.add_subcommand("eval-eer", "all-pairs cosine EER of an embedding file");
  add_common_flags(eer, flags);
  eer->add_option("--input", path_input, "embedding file");
  eer->add_option("--manifest", path_manifest, "manifest for the condition breakdown");
  eer->add_option("--bins", flag_bins, "histogram bins (histogram mode)");
  eer->add_flag("--exact", flag_exact, "exact EER instead of histogram");
  eer->add_flag("--by-condition", flag_by_condition, "per-condition breakdown");
  eer->add_option("--split", flag_split, "manifest split to align with the input rows");

  auto* probe = app.add_subcommand("probe", "linear probe with undersampling");
  add_common_flags(probe, flags);
  probe->add_option("--input", path_input, "embedding file");

  auto* project = app.add_subcommand("project", "2-D PCA projection to CSV");
  add_common_flags(project, flags);
  project->add_option("--input", path_input, "embedding file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    ordered_json cfg = build_config(flags);
    if (!path_train.empty()) cfg["paths"]["train"] = path_train;
    if (!path_dev.empty()) cfg["paths"]["dev"] = path_dev;
    if (!path_input.empty()) cfg["paths"]["input"] = path_input;
    if (!path_model.empty()) cfg["paths"]["model"] = path_model;
    if (!path_manifest.empty()) cfg["paths"]["manifest"] = path_manifest;
    if (!flag_loss.empty()) cfg["train"]["loss"] = flag_loss;
    if (flag_edim) cfg["model"]["output_dim"] = flag_edim;
    if (flag_epochs) cfg["train"]["epochs"] = flag_epochs;
    if (flag_bins) cfg["eval"]["bins"] = flag_bins;
    if (flag_exact) cfg["eval"]["exact"] = true;
    if (flag_by_condition) cfg["eval"]["by_condition"] = true;
    if (!flag_split.empty()) cfg["eval"]["split"] = flag_split;

    if (gen->parsed()) return run_gen_data(std::move(cfg));
    if (train->parsed()) return run_train(std::move(cfg));
    if (embed->parsed()) return run_embed(std::move(cfg));
    if (eer->parsed()) return run_eval_eer(std::move(cfg));
    if (probe->parsed()) return run_probe(std::move(cfg));
    if (project->parsed()) return run_project(std::move(cfg));
    std::cerr << "srctrace: no subcommand given\n" << app.help() << "\n";
    return 1;
  } catch (const srctrace::NonFiniteError& e) {
    std::cerr << "srctrace: numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const srctrace::InvalidSpecError& e) {
    std::cerr << "srctrace: " << e.what() << "\n";
    return 1;
  } catch (const srctrace::ConfigConflictError& e) {
    std::cerr << "srctrace: " << e.what() << "\n";
    return 1;
  } catch (const srctrace::Error& e) {
    std::cerr << "srctrace: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "srctrace: " << e.what() << "\n";
    return 2;
  }
}
