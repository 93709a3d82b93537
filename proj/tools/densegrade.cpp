// densegrade: train, evaluate and explain densely connected fruit-grading
// networks on folder-per-class image datasets.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "densegrade/config.hpp"
#include "densegrade/dataset.hpp"
#include "densegrade/gradcam.hpp"
#include "densegrade/model.hpp"
#include "densegrade/train.hpp"

namespace fs = std::filesystem;
using namespace densegrade;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// DENSEGRADE_OUT_ROOT re-roots relative output paths
fs::path resolve_output(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("DENSEGRADE_OUT_ROOT")) return fs::path(root) / p;
  return p;
}

int thread_count_from_env(int flag_value) {
  int threads = flag_value;
  if (const char* env = std::getenv("DENSEGRADE_THREADS")) {
    try {
      threads = std::stoi(env);
    } catch (...) {
      throw UsageError("DENSEGRADE_THREADS must be a positive integer");
    }
  }
  if (threads < 1) throw UsageError("thread count must be >= 1");
  // execution is serial and bitwise reproducible at any setting; the value
  // is validated so configs stay portable
  return threads;
}

void print_class_counts(const ScanResult& scanned) {
  std::printf("%-24s %8s\n", "class", "samples");
  for (int f = 0; f < 6; ++f)
    for (int q = 0; q < 3; ++q) {
      const std::string name =
          std::string(kFruitNames[f]) + "_" + kQualityNames[q];
      std::printf("%-24s %8zu\n", name.c_str(), scanned.counts[f][q]);
    }
  std::printf("%-24s %8zu\n", "total", scanned.total());
  for (const auto& dir : scanned.unknown_dirs)
    std::fprintf(stderr, "warning: unrecognized directory '%s'\n", dir.c_str());
}

// ---------------------------------------------------------------------------

int cmd_synth(const fs::path& out, int per_class, int resolution, std::uint64_t seed) {
  if (resolution < 8) throw UsageError("--resolution must be >= 8");
  if (per_class < 1) throw UsageError("--per-class must be >= 1");
  const auto root = resolve_output(out);
  auto result = generate_synthetic(root, per_class, resolution, seed);
  std::printf("wrote %zu images under %s\n", result.files_written, root.string().c_str());
  print_class_counts(scan_dataset(root));
  return 0;
}

// ---------------------------------------------------------------------------

RunConfig assemble_run_config(CLI::App* cmd, const std::string& config_path,
                              const std::string& dataset, const std::string& out_dir,
                              const std::string& task, const std::string& preset, int resolution,
                              int epochs, int batch_size, double lr, std::uint64_t seed,
                              bool no_augment, const std::string& monitor) {
  KeyValueConfig kv;
  if (!config_path.empty()) kv = KeyValueConfig::parse_file(config_path);
  RunConfig rc = RunConfig::from_kv(kv);

  // explicit flags override file values
  if (cmd->count("--dataset")) rc.dataset_root = dataset;
  if (cmd->count("--out")) rc.output_dir = out_dir;
  if (cmd->count("--task")) rc.task = TaskMode::parse(task);
  if (cmd->count("--preset")) rc.model_preset = preset;
  if (cmd->count("--resolution")) rc.resolution = resolution;
  if (cmd->count("--epochs")) rc.train.max_epochs = epochs;
  if (cmd->count("--batch-size")) rc.train.batch_size = batch_size;
  if (cmd->count("--lr")) rc.train.learning_rate = lr;
  if (cmd->count("--seed")) rc.seed = seed;
  if (no_augment) rc.augment_enabled = false;
  if (cmd->count("--monitor")) {
    if (monitor == "val_loss")
      rc.train.monitor = TrainConfig::Monitor::ValLoss;
    else if (monitor == "val_accuracy")
      rc.train.monitor = TrainConfig::Monitor::ValAccuracy;
    else
      throw UsageError("--monitor must be val_loss or val_accuracy");
  }
  rc.train.seed = rc.seed;
  rc.train.task = rc.task;
  if (rc.dataset_root.empty()) throw UsageError("a dataset root is required (--dataset or config)");
  return rc;
}

int cmd_train(RunConfig rc, bool resume) {
  if (!fs::exists(rc.dataset_root))
    throw std::runtime_error("dataset root '" + rc.dataset_root.string() + "' does not exist");

  const fs::path run_dir = resolve_output(rc.output_dir);
  fs::create_directories(run_dir);

  auto scanned = scan_dataset(rc.dataset_root);
  auto records = std::move(scanned.records);
  for (const auto& dir : scanned.unknown_dirs)
    std::fprintf(stderr, "warning: unrecognized directory '%s'\n", dir.c_str());
  stratified_split(records, {0.6, 0.2, 0.2}, rc.seed);
  write_split_csv(records, run_dir / "split.csv");

  if (rc.standardize && !rc.has_channel_stats) {
    std::vector<const SampleRecord*> train_recs;
    for (const auto& r : records)
      if (r.split == Split::Train) train_recs.push_back(&r);
    auto [mean, stddev] = compute_channel_stats(train_recs, rc.resolution);
    rc.channel_mean = mean;
    rc.channel_std = stddev;
    rc.has_channel_stats = true;
  }
  rc.to_kv().write_file(run_dir / "config.resolved");

  auto model_cfg = rc.resolved_model();
  Model model = Model::build(model_cfg, rc.seed);
  std::printf("model %s: %zu trainable parameters, task %s (%d classes)\n",
              rc.model_preset.c_str(), model.count_trainable_params(), rc.task.name().c_str(),
              rc.task.num_classes());

  const AugmentationPolicy policy =
      rc.augment_enabled ? rc.augment : AugmentationPolicy::none();
  auto history =
      train(model, records, rc.train, policy, rc.load_options(), run_dir,
            [](const EpochRecord& e) {
              std::printf("epoch %3d  lr %.2e  train %.4f/%.4f  val %.4f/%.4f  %.1fs %s\n",
                          e.epoch, e.lr, e.train_loss, e.train_acc, e.val_loss, e.val_acc,
                          e.seconds, e.event.c_str());
              std::fflush(stdout);
            },
            resume);
  std::printf("stopped: %s (best epoch %d)\n", history.stop_reason.c_str(), history.best_epoch);

  // model now holds the best checkpoint; report on the held-out test split
  auto report = evaluate(model, records, Split::Test, rc.task, rc.load_options(),
                         rc.train.batch_size);
  std::ofstream(run_dir / "metrics.json") << report.to_json_string();
  std::ofstream(run_dir / "metrics.txt") << report.to_text();
  std::printf("\ntest accuracy %.4f\n%s", report.accuracy, report.to_text().c_str());
  std::printf("run directory: %s\n", run_dir.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

// normalization and split parameters travel in config.resolved next to the
// checkpoint directory; fall back to defaults when neither is present
RunConfig eval_config(const std::string& config_path, const fs::path& checkpoint) {
  if (!config_path.empty()) return RunConfig::from_kv(KeyValueConfig::parse_file(config_path));
  const fs::path sibling = checkpoint.parent_path().parent_path() / "config.resolved";
  if (fs::exists(sibling)) return RunConfig::from_kv(KeyValueConfig::parse_file(sibling));
  std::fprintf(stderr,
               "note: no config found near checkpoint; using defaults (no standardization)\n");
  RunConfig rc;
  rc.standardize = false;
  return rc;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw UsageError("--split must be train, val or test");
}

int cmd_eval(const fs::path& checkpoint, const fs::path& dataset, const std::string& task_name,
             const std::string& split_name, const std::string& config_path,
             const std::string& out_path) {
  Model model = Model::load_checkpoint(checkpoint);
  RunConfig rc = eval_config(config_path, checkpoint);

  TaskMode task = task_name.empty()
                      ? (model.config().num_classes == 18   ? TaskMode{TaskMode::Kind::FineGrained18}
                         : model.config().num_classes == 6  ? TaskMode{TaskMode::Kind::Fruit6}
                         : model.config().num_classes == 3
                             ? TaskMode{TaskMode::Kind::Quality3}
                             : throw std::runtime_error(
                                   "cannot infer task from a " +
                                   std::to_string(model.config().num_classes) +
                                   "-class checkpoint; pass --task"))
                      : TaskMode::parse(task_name);
  if (model.config().num_classes != task.num_classes() && model.config().num_classes != 18)
    throw std::runtime_error("checkpoint/task class-count mismatch: checkpoint has " +
                             std::to_string(model.config().num_classes) + " classes, task '" +
                             task.name() + "' needs " + std::to_string(task.num_classes()));

  auto scanned = scan_dataset(dataset);
  auto records = std::move(scanned.records);
  stratified_split(records, {0.6, 0.2, 0.2}, rc.seed);

  LoadOptions opts = rc.load_options();
  opts.resolution = model.config().input_height;  // evaluate at training resolution
  auto report = evaluate(model, records, parse_split(split_name), task, opts,
                         rc.train.batch_size);

  const fs::path out = resolve_output(out_path);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  std::ofstream(out) << report.to_json_string();
  fs::path text_path = out;
  text_path.replace_extension(".txt");
  std::ofstream(text_path) << report.to_text();
  std::printf("%s", report.to_text().c_str());
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_explain(const fs::path& checkpoint, const std::vector<std::string>& inputs,
                const std::string& target, const std::string& signal, const std::string& layer,
                const fs::path& out_dir, const std::string& config_path) {
  Model model = Model::load_checkpoint(checkpoint);
  RunConfig rc = eval_config(config_path, checkpoint);
  LoadOptions opts = rc.load_options();
  opts.resolution = model.config().input_height;

  std::optional<int> target_class;
  if (target != "predicted") {
    try {
      target_class = std::stoi(target);
    } catch (...) {
      throw UsageError("--target must be 'predicted' or a class index");
    }
  }
  CamTarget cam_target;
  if (signal == "logit")
    cam_target = CamTarget::Logit;
  else if (signal == "loss")
    cam_target = CamTarget::Loss;
  else
    throw UsageError("--signal must be logit or loss");

  std::vector<fs::path> files;
  for (const auto& item : inputs) {
    fs::path p(item);
    if (fs::is_directory(p)) {
      for (const auto& entry : fs::recursive_directory_iterator(p))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
          files.push_back(entry.path());
      std::sort(files.begin(), files.end());
    } else {
      files.push_back(p);
    }
  }
  if (files.empty()) throw UsageError("no input images given");

  const fs::path out = resolve_output(out_dir);
  fs::create_directories(out);
  std::ofstream index(out / "index.csv", std::ios::trunc);
  index << "input,predicted_class,target_class,peak_row,peak_col,heatmap,overlay\n";

  const std::string* layer_ptr = layer.empty() ? nullptr : &layer;
  for (const auto& file : files) {
    auto image = load_image_tensor(file, opts);
    // display copy without standardization
    LoadOptions raw = opts;
    raw.standardize = false;
    auto display = load_image_tensor(file, raw);

    int predicted;
    {
      NoGradGuard ng;
      auto batched = Tensor::zeros({1, image.dim(0), image.dim(1), image.dim(2)});
      std::copy(image.data(), image.data() + image.size(), batched.data());
      auto logits = model.forward(batched, false);
      predicted = 0;
      for (std::size_t k = 1; k < logits.dim(1); ++k)
        if (logits.values()[k] > logits.values()[predicted]) predicted = static_cast<int>(k);
    }

    auto heat = explain(model, image, target_class, cam_target, layer_ptr);
    const std::string stem = file.stem().string();
    const fs::path heat_path = out / (stem + "_heatmap.png");
    const fs::path overlay_path = out / (stem + "_overlay.png");
    write_png(heat_path, render_heatmap(heat));
    write_png(overlay_path, render_overlay(display, heat));
    index << file.string() << ',' << predicted << ',' << heat.target_class << ','
          << heat.peak_row << ',' << heat.peak_col << ',' << heat_path.string() << ','
          << overlay_path.string() << '\n';
    if (heat.all_zero)
      std::fprintf(stderr, "warning: identically-zero heatmap for %s\n", file.string().c_str());
  }
  std::printf("wrote %zu heatmap/overlay pairs under %s\n", files.size(), out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_params(const std::string& preset, int classes) {
  if (classes < 1) throw UsageError("--classes must be >= 1");
  DenseNetConfig cfg;
  try {
    cfg = DenseNetConfig::preset(preset);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.num_classes = classes;
  auto model = Model::build(cfg, 0);
  const std::size_t count = model.count_trainable_params();
  std::printf("preset %s, %d classes\n", preset.c_str(), classes);
  std::printf("final feature width: %d\n", model.final_feature_width());
  std::printf("trainable parameters: %zu (%.2fM)\n", count, static_cast<double>(count) / 1e6);
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_augment_preview(const std::vector<std::string>& inputs, const fs::path& out_dir,
                        std::uint64_t seed, bool zero_policy, double rotation, double shift,
                        double shear, double flip_prob) {
  AugmentationPolicy policy;
  policy.rotation_max_deg = rotation;
  policy.width_shift_frac = shift;
  policy.height_shift_frac = shift;
  policy.shear_max_deg = shear;
  policy.hflip_prob = flip_prob;
  policy.vflip_prob = flip_prob;
  if (zero_policy) policy = AugmentationPolicy::none();
  policy.validate();

  if (inputs.empty()) throw UsageError("no input images given");
  const fs::path out = resolve_output(out_dir);
  fs::create_directories(out);

  std::size_t changed = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto img = image_to_tensor<float>(read_png(inputs[i]));
    RngStream rng = keyed_stream(seed, 0, i);
    auto t = sample_transform(policy, rng, img.dim(2), img.dim(1));
    auto after = apply_transform(img, t, policy);
    changed += after.values() != img.values();

    // side-by-side grid: before | after
    const std::size_t h = img.dim(1), w = img.dim(2);
    Image grid;
    grid.height = static_cast<int>(h);
    grid.width = static_cast<int>(2 * w);
    grid.pixels.resize(h * 2 * w * 3);
    auto before_img = tensor_to_image(img);
    auto after_img = tensor_to_image(after);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          grid.pixels[(y * 2 * w + x) * 3 + c] = before_img.pixels[(y * w + x) * 3 + c];
          grid.pixels[(y * 2 * w + w + x) * 3 + c] = after_img.pixels[(y * w + x) * 3 + c];
        }
    const std::string stem = fs::path(inputs[i]).stem().string();
    write_png(out / (stem + "_preview.png"), grid);
  }
  std::printf("wrote %zu previews under %s (%zu samples changed by augmentation)\n",
              inputs.size(), out.string().c_str(), changed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"densely connected CNN engine for fruit-quality grading"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (execution is always deterministic)");

  // synth
  auto* synth = app.add_subcommand("synth", "generate the synthetic 18-class dataset");
  std::string synth_out = "synth_data";
  int per_class = 50, synth_res = 32;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "output dataset root");
  synth->add_option("--per-class", per_class, "images per class");
  synth->add_option("--resolution", synth_res, "image side length");
  synth->add_option("--seed", synth_seed, "generator seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model and report test metrics");
  std::string cfg_path, dataset, out_dir = "densegrade_run", task = "fine18", preset = "tiny";
  std::string monitor = "val_loss";
  int resolution = 256, epochs = 1000, batch_size = 32;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  bool no_augment = false, resume = false;
  train_cmd->add_option("--config", cfg_path, "run configuration file");
  train_cmd->add_option("--dataset", dataset, "dataset root");
  train_cmd->add_option("--out", out_dir, "run directory");
  train_cmd->add_option("--task", task, "fine18 | fruit6 | quality3");
  train_cmd->add_option("--preset", preset, "tiny | densenet201");
  train_cmd->add_option("--resolution", resolution, "input resolution");
  train_cmd->add_option("--epochs", epochs, "maximum epochs");
  train_cmd->add_option("--batch-size", batch_size, "batch size");
  train_cmd->add_option("--lr", lr, "learning rate");
  train_cmd->add_option("--seed", seed, "run seed");
  train_cmd->add_option("--monitor", monitor, "val_loss | val_accuracy");
  train_cmd->add_flag("--no-augment", no_augment, "disable runtime augmentation");
  train_cmd->add_flag("--resume", resume, "resume from the run directory's last checkpoint");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_dataset, eval_task, eval_split = "test", eval_cfg,
              eval_out = "metrics.json";
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--dataset", eval_dataset, "dataset root")->required();
  eval_cmd->add_option("--task", eval_task, "fine18 | fruit6 | quality3 (default: from head)");
  eval_cmd->add_option("--split", eval_split, "train | val | test");
  eval_cmd->add_option("--config", eval_cfg, "run config (default: sibling config.resolved)");
  eval_cmd->add_option("--out", eval_out, "metrics JSON output path");

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "write class-activation heatmaps");
  std::string ex_ckpt, ex_target = "predicted", ex_signal = "logit", ex_layer, ex_cfg;
  std::string ex_out = "explain";
  std::vector<std::string> ex_inputs;
  explain_cmd->add_option("--checkpoint", ex_ckpt, "checkpoint file")->required();
  explain_cmd->add_option("--inputs", ex_inputs, "image files or directories")->required();
  explain_cmd->add_option("--target", ex_target, "'predicted' or a class index");
  explain_cmd->add_option("--signal", ex_signal, "logit | loss");
  explain_cmd->add_option("--layer", ex_layer, "capture layer (default: last 3x3 conv)");
  explain_cmd->add_option("--out", ex_out, "output directory");
  explain_cmd->add_option("--config", ex_cfg, "run config for normalization");

  // params
  auto* params_cmd = app.add_subcommand("params", "print the trainable-parameter count");
  std::string params_preset = "densenet201";
  int params_classes = 18;
  params_cmd->add_option("--preset", params_preset, "tiny | densenet201");
  params_cmd->add_option("--classes", params_classes, "classification head width");

  // augment-preview
  auto* preview_cmd = app.add_subcommand("augment-preview", "write before/after warp grids");
  std::vector<std::string> pv_inputs;
  std::string pv_out = "augment_preview";
  std::uint64_t pv_seed = 0;
  bool pv_zero = false;
  double pv_rotation = 30.0, pv_shift = 0.1, pv_shear = 15.0, pv_flip = 0.5;
  preview_cmd->add_option("--inputs", pv_inputs, "image files")->required();
  preview_cmd->add_option("--out", pv_out, "output directory");
  preview_cmd->add_option("--seed", pv_seed, "sampling seed");
  preview_cmd->add_flag("--zero-policy", pv_zero, "identity policy (before == after)");
  preview_cmd->add_option("--rotation", pv_rotation, "max rotation (degrees)");
  preview_cmd->add_option("--shift", pv_shift, "max shift fraction");
  preview_cmd->add_option("--shear", pv_shear, "max shear (degrees)");
  preview_cmd->add_option("--flip-prob", pv_flip, "h/v flip probability");

  try {
    app.parse(argc, argv);
    thread_count_from_env(threads);
    if (*synth) return cmd_synth(synth_out, per_class, synth_res, synth_seed);
    if (*train_cmd) {
      auto rc = assemble_run_config(train_cmd, cfg_path, dataset, out_dir, task, preset,
                                    resolution, epochs, batch_size, lr, seed, no_augment,
                                    monitor);
      return cmd_train(std::move(rc), resume);
    }
    if (*eval_cmd)
      return cmd_eval(eval_ckpt, eval_dataset, eval_task, eval_split, eval_cfg, eval_out);
    if (*explain_cmd)
      return cmd_explain(ex_ckpt, ex_inputs, ex_target, ex_signal, ex_layer, ex_out, ex_cfg);
    if (*params_cmd) return cmd_params(params_preset, params_classes);
    if (*preview_cmd)
      return cmd_augment_preview(pv_inputs, pv_out, pv_seed, pv_zero, pv_rotation, pv_shift,
                                 pv_shear, pv_flip);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
