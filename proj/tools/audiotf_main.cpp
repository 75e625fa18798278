// Command-line front end: dataset synthesis, training, evaluation,
// checkpoint analysis, parameter accounting.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "audiotf/audiotf.hpp"

namespace fs = std::filesystem;
using namespace audiotf;

// Runtime scalar type. Tests run the same code paths in double.
using Real = float;

namespace {

ModelConfig config_from_flags(const std::string& size, const std::string& variant, int labels) {
  ModelConfig cfg = size == "small" ? ModelConfig::small() : ModelConfig::large();
  cfg.variant = variant_from_name(variant);
  if (labels > 0) cfg.n_labels = labels;
  return cfg;
}

// Loads every manifest row of the given split as a 16 kHz clip.
std::vector<AudioClip> load_split(const Manifest& manifest, const std::string& manifest_dir,
                                  const std::string& split) {
  std::vector<AudioClip> clips;
  for (const auto& row : manifest.rows) {
    if (row.split != split) continue;
    fs::path p(row.path);
    if (p.is_relative()) p = fs::path(manifest_dir) / p;
    WavData wav = decode_wav(p.string());
    AudioClip clip;
    clip.samples = resample(wav.samples, wav.sample_rate, kSampleRate);
    clip.labels = multi_hot(row.label_indices, int(manifest.vocab.size()));
    clip.source_id = row.path;
    clips.push_back(std::move(clip));
  }
  return clips;
}

int cmd_synth_data(const std::string& out_dir, int per_class, std::uint64_t seed) {
  fs::create_directories(out_dir);
  auto items = synth_dataset(per_class, seed);
  std::ofstream manifest(fs::path(out_dir) / "manifest.csv");
  manifest << "path,labels,split\n";
  // fixed 70/15/15-style split by index within each class: last 30% of each
  // class alternates val/eval
  std::map<int, int> per_class_count;
  for (const auto& item : items) {
    const std::string name = item.clip.source_id + ".wav";
    write_wav_f32((fs::path(out_dir) / name).string(), item.clip.samples, kSampleRate);
    const int k = per_class_count[item.cls]++;
    std::string split = "train";
    if (k >= per_class - per_class / 5) split = (k % 2 == 0) ? "val" : "eval";
    manifest << name << "," << synth_class_names()[size_t(item.cls)] << "," << split << "\n";
  }
  std::cout << "wrote " << items.size() << " clips and manifest.csv to " << out_dir << "\n";
  return 0;
}

int cmd_param_count(const std::string& size, const std::string& variant, int labels) {
  AudioTransformer<Real> model(config_from_flags(size, variant, labels), 0);
  std::cout << model.param_count() << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& manifest_format,
              const std::string& out_dir, const std::string& size, const std::string& variant,
              std::uint64_t seed, double lr, int batch, int steps, int eval_every, double delta) {
  fs::create_directories(out_dir);
  const auto format = manifest_format == "fsd50k" ? ManifestFormat::fsd50k : ManifestFormat::simple;
  Manifest manifest = load_manifest((fs::path(data_dir) / "manifest.csv").string(), format);
  auto train_clips = load_split(manifest, data_dir, "train");
  auto val_clips = load_split(manifest, data_dir, "val");
  if (train_clips.empty()) throw ContractError("no clips in the train split");
  std::vector<Example> examples;
  for (const auto& clip : train_clips)
    for (auto& e : chunk_clip(clip)) examples.push_back(std::move(e));

  AudioTransformer<Real> model(config_from_flags(size, variant, int(manifest.vocab.size())), seed);
  TrainRunConfig run;
  run.batch_size = batch;
  run.max_steps = steps;
  run.learning_rate = lr;
  run.seed = seed;
  run.eval_interval = eval_every;
  run.huber_delta = delta;
  std::cout << "training " << size << "/" << variant << " (" << model.param_count()
            << " params) on " << examples.size() << " examples\n";
  TrainResult result = train(model, examples, run, val_clips.empty() ? nullptr : &val_clips);
  std::ofstream log(fs::path(out_dir) / "train_log.csv");
  log << train_log_csv(result.log);
  save_checkpoint(model, (fs::path(out_dir) / "checkpoint.atfm").string());
  std::cout << "steps=" << result.steps_run << " final_loss=" << result.log.back().loss;
  if (result.final_val_map >= 0) std::cout << " val_mAP=" << result.final_val_map;
  std::cout << "\nwrote " << (fs::path(out_dir) / "checkpoint.atfm").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& manifest_format, const std::string& split,
             const std::string& out_path) {
  const auto format = manifest_format == "fsd50k" ? ManifestFormat::fsd50k : ManifestFormat::simple;
  Manifest manifest = load_manifest((fs::path(data_dir) / "manifest.csv").string(), format);
  auto clips = load_split(manifest, data_dir, split);
  if (clips.empty()) throw ContractError("no clips in split '" + split + "'");
  AudioTransformer<Real> model = load_checkpoint<Real>(checkpoint);
  if (model.config().n_labels != int(manifest.vocab.size()))
    throw CheckpointError("checkpoint has " + std::to_string(model.config().n_labels) +
                          " labels but manifest has " + std::to_string(manifest.vocab.size()));
  EvalReport report = evaluate(model, clips);
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    os << report.to_csv(manifest.vocab);
  }
  std::cout << "clips=" << clips.size() << " mAP=" << report.map << "\n";
  return 0;
}

int cmd_analyze(const std::string& checkpoint, const std::string& out_dir) {
  fs::create_directories(out_dir);
  AudioTransformer<Real> model = load_checkpoint<Real>(checkpoint);
  FilterBankView view = sort_by_peak(extract_filters(model));
  export_analysis(view, out_dir);
  std::cout << "wrote filter analysis for " << view.filters.size() << " filters to " << out_dir
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolution-free audio transformer: training and analysis"};
  app.require_subcommand(1);

  std::string out_dir, data_dir = "", checkpoint, split = "eval", report_path;
  std::string size = "small", variant = "baseline", manifest_format = "simple";
  int per_class = 50, batch = 32, steps = 2000, eval_every = 0, labels = 0;
  std::uint64_t seed = 0;
  double lr = 1e-4, delta = 1.0;

  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic 4-class dataset");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--per-class", per_class, "Clips per class");
  synth->add_option("--seed", seed, "RNG seed");

  auto* train_cmd = app.add_subcommand("train", "Train a model from a manifest directory");
  train_cmd->add_option("--data", data_dir, "Dataset directory containing manifest.csv")->required();
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--size", size)->check(CLI::IsMember({"small", "large"}));
  train_cmd->add_option("--variant", variant)
      ->check(CLI::IsMember({"baseline", "pooled", "multiscale"}));
  train_cmd->add_option("--manifest-format", manifest_format)
      ->check(CLI::IsMember({"simple", "fsd50k"}));
  train_cmd->add_option("--seed", seed);
  train_cmd->add_option("--lr", lr);
  train_cmd->add_option("--batch", batch);
  train_cmd->add_option("--steps", steps);
  train_cmd->add_option("--eval-every", eval_every);
  train_cmd->add_option("--delta", delta, "Huber delta");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", data_dir)->required();
  eval_cmd->add_option("--manifest-format", manifest_format)
      ->check(CLI::IsMember({"simple", "fsd50k"}));
  eval_cmd->add_option("--split", split);
  eval_cmd->add_option("--report", report_path, "Write the per-class AP CSV here");

  auto* analyze = app.add_subcommand("analyze", "Export learned front-end filter analysis");
  analyze->add_option("--checkpoint", checkpoint)->required();
  analyze->add_option("--out", out_dir)->required();

  auto* pc = app.add_subcommand("param-count", "Print the trainable parameter count");
  pc->add_option("--size", size)->check(CLI::IsMember({"small", "large"}));
  pc->add_option("--variant", variant)->check(CLI::IsMember({"baseline", "pooled", "multiscale"}));
  pc->add_option("--labels", labels, "Label count (default 200)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(out_dir, per_class, seed);
    if (train_cmd->parsed())
      return cmd_train(data_dir, manifest_format, out_dir, size, variant, seed, lr, batch, steps,
                       eval_every, delta);
    if (eval_cmd->parsed())
      return cmd_eval(checkpoint, data_dir, manifest_format, split, report_path);
    if (analyze->parsed()) return cmd_analyze(checkpoint, out_dir);
    if (pc->parsed()) return cmd_param_count(size, variant, labels);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
