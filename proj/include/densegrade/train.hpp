#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "densegrade/augment.hpp"
#include "densegrade/dataset.hpp"
#include "densegrade/metrics.hpp"
#include "densegrade/model.hpp"
#include "densegrade/ops.hpp"

namespace densegrade {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 32;
  int max_epochs = 1000;
  double lr_decay_factor = 0.1;
  int lr_decay_patience = 5;
  int early_stop_patience = 10;
  double min_delta = 1e-4;
  enum class Monitor { ValLoss, ValAccuracy } monitor = Monitor::ValLoss;
  std::uint64_t seed = 0;
  TaskMode task{};

  void validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("train: learning rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("train: max epochs must be >= 1");
    if (lr_decay_factor <= 0 || lr_decay_factor >= 1)
      throw std::invalid_argument("train: lr decay factor must be in (0, 1)");
    if (lr_decay_patience < 1 || early_stop_patience < 1)
      throw std::invalid_argument("train: patiences must be >= 1");
    if (min_delta < 0) throw std::invalid_argument("train: min delta must be >= 0");
  }

  bool maximize_monitor() const { return monitor == Monitor::ValAccuracy; }
};

// ---------------------------------------------------------------------------
// Adam with bias correction
// ---------------------------------------------------------------------------

template <typename S>
class AdamT {
 public:
  explicit AdamT(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void init(const std::vector<typename ModelT<S>::NamedTensor>& params) {
    m_.clear();
    v_.clear();
    for (const auto& [name, t] : params) {
      m_.emplace_back(t.size(), S(0));
      v_.emplace_back(t.size(), S(0));
    }
    step_count_ = 0;
  }

  // One update over all parameters; a missing gradient counts as zero.
  void step(std::vector<typename ModelT<S>::NamedTensor>& params, double lr) {
    if (m_.size() != params.size())
      throw std::logic_error("adam: optimizer not initialized for this parameter set");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      const bool has_grad = t.has_grad();
      const std::size_t n = t.size();
      S* p = t.data();
      const S* g = has_grad ? t.grad().data() : nullptr;
      S* m = m_[i].data();
      S* v = v_[i].data();
      for (std::size_t j = 0; j < n; ++j) {
        const double gj = g ? static_cast<double>(g[j]) : 0.0;
        if (!std::isfinite(gj))
          throw std::runtime_error("adam: non-finite gradient in '" + name + "' at element " +
                                   std::to_string(j));
        const double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
        const double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        p[j] -= static_cast<S>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + epsilon_));
      }
    }
  }

  std::uint64_t step_count() const { return step_count_; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double epsilon() const { return epsilon_; }

  void export_to(const std::vector<typename ModelT<S>::NamedTensor>& params,
                 CheckpointExtras<S>& extras) const {
    extras.adam_step = step_count_;
    extras.beta1 = beta1_;
    extras.beta2 = beta2_;
    extras.epsilon = epsilon_;
    extras.moments.clear();
    for (std::size_t i = 0; i < params.size(); ++i) {
      extras.moments.emplace_back(params[i].first + ".m", m_[i]);
      extras.moments.emplace_back(params[i].first + ".v", v_[i]);
    }
  }

  void restore_from(const std::vector<typename ModelT<S>::NamedTensor>& params,
                    const CheckpointExtras<S>& extras) {
    init(params);
    step_count_ = extras.adam_step;
    beta1_ = extras.beta1;
    beta2_ = extras.beta2;
    epsilon_ = extras.epsilon;
    std::map<std::string, const std::vector<S>*> by_name;
    for (const auto& [name, data] : extras.moments) by_name[name] = &data;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto m_it = by_name.find(params[i].first + ".m");
      auto v_it = by_name.find(params[i].first + ".v");
      if (m_it == by_name.end() || v_it == by_name.end())
        throw std::runtime_error("checkpoint optimizer state missing moments for '" +
                                 params[i].first + "'");
      if (m_it->second->size() != params[i].second.size())
        throw std::runtime_error("checkpoint optimizer moment size mismatch for '" +
                                 params[i].first + "'");
      m_[i] = *m_it->second;
      v_[i] = *v_it->second;
    }
  }

 private:
  double beta1_, beta2_, epsilon_;
  std::uint64_t step_count_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

using Adam = AdamT<float>;

// ---------------------------------------------------------------------------
// plateau scheduler and early stopping
// ---------------------------------------------------------------------------

// Multiplies the learning rate by `factor` after `patience` consecutive
// epochs without a min_delta improvement; the patience counter resets after
// each decay, the best value does not.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor, int patience, double min_delta, bool maximize)
      : factor_(factor), patience_(patience), min_delta_(min_delta), maximize_(maximize) {}

  bool observe(double metric, double& lr) {
    if (improved(metric)) {
      best_ = metric;
      has_best_ = true;
      bad_ = 0;
      return false;
    }
    if (++bad_ >= patience_) {
      lr *= factor_;
      bad_ = 0;
      return true;
    }
    return false;
  }

 private:
  bool improved(double metric) const {
    if (!has_best_) return true;
    return maximize_ ? metric - best_ >= min_delta_ : best_ - metric >= min_delta_;
  }

  double factor_;
  int patience_;
  double min_delta_;
  bool maximize_;
  double best_ = 0.0;
  bool has_best_ = false;
  int bad_ = 0;
};

class EarlyStopper {
 public:
  struct Decision {
    bool improved = false;
    bool stop = false;
  };

  EarlyStopper(int patience, double min_delta, bool maximize)
      : patience_(patience), min_delta_(min_delta), maximize_(maximize) {}

  Decision observe(double metric) {
    ++epoch_;
    Decision d;
    if (improved(metric)) {
      best_ = metric;
      has_best_ = true;
      best_epoch_ = epoch_;
      bad_ = 0;
      d.improved = true;
    } else if (++bad_ >= patience_) {
      d.stop = true;
    }
    return d;
  }

  int best_epoch() const { return best_epoch_; }
  double best_metric() const { return best_; }

 private:
  bool improved(double metric) const {
    if (!has_best_) return true;
    return maximize_ ? metric - best_ >= min_delta_ : best_ - metric >= min_delta_;
  }

  int patience_;
  double min_delta_;
  bool maximize_;
  double best_ = 0.0;
  bool has_best_ = false;
  int bad_ = 0;
  int epoch_ = 0;
  int best_epoch_ = 0;
};

// ---------------------------------------------------------------------------
// history
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0, train_acc = 0.0;
  double val_loss = 0.0, val_acc = 0.0;
  double seconds = 0.0;      // in-memory only
  std::string event;         // "", "lr_decay", "early_stop", "lr_decay;early_stop"
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  std::string stop_reason;  // "early_stop" | "max_epochs"
};

inline void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write history '" + path.string() + "'");
  out << "epoch,lr,train_loss,train_acc,val_loss,val_acc,event\n";
  out.precision(17);
  for (const auto& e : history.epochs)
    out << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ','
        << e.val_loss << ',' << e.val_acc << ',' << e.event << '\n';
}

inline TrainHistory read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read history '" + path.string() + "'");
  TrainHistory history;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord e;
    std::istringstream row(line);
    std::string field;
    std::getline(row, field, ',');
    e.epoch = std::stoi(field);
    std::getline(row, field, ',');
    e.lr = std::stod(field);
    std::getline(row, field, ',');
    e.train_loss = std::stod(field);
    std::getline(row, field, ',');
    e.train_acc = std::stod(field);
    std::getline(row, field, ',');
    e.val_loss = std::stod(field);
    std::getline(row, field, ',');
    e.val_acc = std::stod(field);
    std::getline(row, e.event);
    history.epochs.push_back(std::move(e));
  }
  return history;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<float> softmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<float> probs(n * k);
  const float* z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = z[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, z[i * k + j]);
    double sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = static_cast<float>(std::exp(z[i * k + j] - mx));
      sum += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<float>(probs[i * k + j] / sum);
  }
  return probs;
}

// In-memory image cache keyed by record pointer; avoids re-decoding PNGs
// every epoch on desk-scale runs.
class BatchSource {
 public:
  BatchSource(std::span<const SampleRecord* const> records, const LoadOptions& opts,
              std::size_t budget_bytes = 256ull << 20)
      : opts_(opts) {
    const std::size_t per_image = 3ull * opts.resolution * opts.resolution * sizeof(float);
    cache_enabled_ = records.size() * per_image <= budget_bytes;
  }

  Tensor image(const SampleRecord* rec) {
    if (!cache_enabled_) return load_image_tensor(rec->path, opts_);
    auto it = cache_.find(rec);
    if (it != cache_.end()) return it->second;
    auto t = load_image_tensor(rec->path, opts_);
    cache_.emplace(rec, t);
    return t;
  }

  Tensor gather(std::span<const SampleRecord* const> recs) {
    const auto r = static_cast<std::size_t>(opts_.resolution);
    auto out = Tensor::zeros({recs.size(), 3, r, r});
    const std::size_t sample_size = 3 * r * r;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      auto t = image(recs[i]);
      std::copy(t.data(), t.data() + sample_size, out.data() + i * sample_size);
    }
    return out;
  }

 private:
  LoadOptions opts_;
  bool cache_enabled_;
  std::map<const SampleRecord*, Tensor> cache_;
};

struct LossAcc {
  double loss = 0.0;
  double acc = 0.0;
};

inline LossAcc eval_loss_acc(Model& model, std::span<const SampleRecord* const> records,
                             TaskMode task, BatchSource& source, int batch_size) {
  NoGradGuard no_grad;
  double loss_sum = 0.0;
  std::size_t correct = 0, total = 0;
  const std::size_t k = static_cast<std::size_t>(task.num_classes());
  for (std::size_t start = 0; start < records.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const SampleRecord*> chunk(records.begin() + start, records.begin() + end);
    auto images = source.gather(chunk);
    std::vector<int> labels;
    for (const auto* rec : chunk) labels.push_back(task.label_of(rec->fruit, rec->quality));
    auto logits = model.forward(images, /*training=*/false);
    auto res = softmax_cross_entropy(logits, labels);
    loss_sum += static_cast<double>(res.loss.item()) * static_cast<double>(chunk.size());
    const float* p = res.probabilities.data();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (p[i * k + j] > p[i * k + arg]) arg = j;
      correct += static_cast<int>(arg) == labels[i];
    }
    total += chunk.size();
  }
  return {loss_sum / static_cast<double>(total),
          static_cast<double>(correct) / static_cast<double>(total)};
}

}  // namespace detail

// Eval-mode forward over one split. A model trained on the 18-way task can
// be evaluated under Fruit6/Quality3: predictions and truth are projected,
// class scores are summed over each projected group.
inline MetricsReport evaluate(Model& model, std::span<const SampleRecord> records, Split split,
                              TaskMode task, const LoadOptions& opts, int batch_size = 32) {
  std::vector<const SampleRecord*> chosen;
  for (const auto& r : records)
    if (r.split == split) chosen.push_back(&r);
  if (chosen.empty())
    throw std::runtime_error("evaluate: split '" + to_string(split) + "' is empty");

  const int model_classes = model.config().num_classes;
  const int task_classes = task.num_classes();
  const bool project = model_classes != task_classes;
  if (project && model_classes != 18)
    throw std::runtime_error("evaluate: model with " + std::to_string(model_classes) +
                             " classes cannot serve task '" + task.name() + "' (" +
                             std::to_string(task_classes) + " classes)");

  NoGradGuard no_grad;
  detail::BatchSource source(chosen, opts);
  std::vector<int> truth, predicted;
  std::vector<double> scores;
  scores.reserve(chosen.size() * static_cast<std::size_t>(task_classes));
  const auto mk = static_cast<std::size_t>(model_classes);

  for (std::size_t start = 0; start < chosen.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(chosen.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const SampleRecord*> chunk(chosen.begin() + start, chosen.begin() + end);
    auto images = source.gather(chunk);
    auto logits = model.forward(images, false);
    auto probs = detail::softmax_rows(logits);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < mk; ++j)
        if (probs[i * mk + j] > probs[i * mk + arg]) arg = j;
      truth.push_back(task.label_of(chunk[i]->fruit, chunk[i]->quality));
      predicted.push_back(project ? task.project_fine(static_cast<int>(arg))
                                  : static_cast<int>(arg));
      if (project) {
        std::vector<double> grouped(task_classes, 0.0);
        for (std::size_t j = 0; j < mk; ++j)
          grouped[task.project_fine(static_cast<int>(j))] += probs[i * mk + j];
        scores.insert(scores.end(), grouped.begin(), grouped.end());
      } else {
        for (std::size_t j = 0; j < mk; ++j) scores.push_back(probs[i * mk + j]);
      }
    }
  }

  auto matrix = confusion(truth, predicted, task_classes);
  auto aucs = auc_roc_ovr(scores, static_cast<std::size_t>(task_classes), truth);
  return summarize(task.name(), task.class_names(), matrix, aucs);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

// Epoch loop: keyed shuffle -> runtime augmentation -> forward/loss/backward/
// adam -> validation -> plateau schedule -> early stop. Checkpoints the best
// epoch (by the monitored metric) and the last epoch (with optimizer state,
// for resuming); restores the best checkpoint into `model` before returning.
inline TrainHistory train(Model& model, std::vector<SampleRecord>& records, const TrainConfig& cfg,
                          const AugmentationPolicy& policy, const LoadOptions& load_opts,
                          const std::filesystem::path& run_dir,
                          const std::function<void(const EpochRecord&)>& on_epoch = {},
                          bool resume = false) {
  cfg.validate();
  policy.validate();
  if (model.config().num_classes != cfg.task.num_classes())
    throw std::runtime_error("train: model has " + std::to_string(model.config().num_classes) +
                             " classes but task '" + cfg.task.name() + "' needs " +
                             std::to_string(cfg.task.num_classes()));

  std::vector<const SampleRecord*> train_recs, val_recs;
  for (const auto& r : records) {
    if (r.split == Split::Train) train_recs.push_back(&r);
    if (r.split == Split::Val) val_recs.push_back(&r);
  }
  if (train_recs.empty() || val_recs.empty())
    throw std::runtime_error("train: train/val split is empty (train " +
                             std::to_string(train_recs.size()) + ", val " +
                             std::to_string(val_recs.size()) + ")");

  const auto ckpt_dir = run_dir / "checkpoints";
  std::filesystem::create_directories(ckpt_dir);
  const auto best_path = ckpt_dir / "best.ckpt";
  const auto last_path = ckpt_dir / "last.ckpt";
  const auto history_path = run_dir / "history.csv";

  Adam adam;
  adam.init(model.parameters());
  double lr = cfg.learning_rate;
  PlateauScheduler scheduler(cfg.lr_decay_factor, cfg.lr_decay_patience, cfg.min_delta,
                             cfg.maximize_monitor());
  EarlyStopper stopper(cfg.early_stop_patience, cfg.min_delta, cfg.maximize_monitor());
  TrainHistory history;
  int start_epoch = 1;

  if (resume && std::filesystem::exists(last_path)) {
    CheckpointExtras<float> extras;
    model = Model::load_checkpoint_as(last_path, model.config(), &extras);
    adam.restore_from(model.parameters(), extras);
    history = read_history_csv(history_path);
    // replay the monitored series through fresh scheduler/stopper state
    for (const auto& e : history.epochs) {
      const double monitored =
          cfg.monitor == TrainConfig::Monitor::ValLoss ? e.val_loss : e.val_acc;
      scheduler.observe(monitored, lr);
      stopper.observe(monitored);
    }
    start_epoch = static_cast<int>(extras.completed_epochs) + 1;
  }

  detail::BatchSource source(train_recs, load_opts);
  detail::BatchSource val_source(val_recs, load_opts);
  const bool augment_on = !policy.is_zero();
  std::string stop_reason = "max_epochs";

  for (int epoch = start_epoch; epoch <= cfg.max_epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();

    // canonical train order is the records order; shuffle keyed by (seed, epoch)
    std::vector<std::size_t> order(train_recs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle_rng = keyed_stream(cfg.seed, 0x736875666c65ull,
                                         static_cast<std::uint64_t>(epoch));
    shuffle(order, shuffle_rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    const auto k = static_cast<std::size_t>(cfg.task.num_classes());
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const SampleRecord*> chunk;
      std::vector<std::uint64_t> sample_indices;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        chunk.push_back(train_recs[order[i]]);
        sample_indices.push_back(order[i]);
        labels.push_back(cfg.task.label_of(chunk.back()->fruit, chunk.back()->quality));
      }
      auto images = source.gather(chunk);
      if (augment_on)
        images = augment_batch(images, policy, cfg.seed, static_cast<std::uint64_t>(epoch),
                               sample_indices);

      auto logits = model.forward(images, /*training=*/true);
      auto res = softmax_cross_entropy(logits, labels);
      const double batch_loss = res.loss.item();
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: loss diverged (non-finite) at epoch " +
                                 std::to_string(epoch));
      loss_sum += batch_loss * static_cast<double>(chunk.size());
      const float* p = res.probabilities.data();
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < k; ++j)
          if (p[i * k + j] > p[i * k + arg]) arg = j;
        correct += static_cast<int>(arg) == labels[i];
      }

      model.zero_grad();
      backward(res.loss);
      adam.step(model.parameters(), lr);
    }

    auto val = detail::eval_loss_acc(model, val_recs, cfg.task, val_source, cfg.batch_size);
    const double monitored =
        cfg.monitor == TrainConfig::Monitor::ValLoss ? val.loss : val.acc;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train_recs.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_recs.size());
    rec.val_loss = val.loss;
    rec.val_acc = val.acc;

    const bool decayed = scheduler.observe(monitored, lr);
    const auto decision = stopper.observe(monitored);
    if (decayed) rec.event = "lr_decay";
    if (decision.stop) rec.event += rec.event.empty() ? "early_stop" : ";early_stop";
    if (decision.improved) model.save_checkpoint(best_path);

    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                      .count();
    history.epochs.push_back(rec);
    history.best_epoch = stopper.best_epoch();
    write_history_csv(history, history_path);

    CheckpointExtras<float> extras;
    adam.export_to(model.parameters(), extras);
    extras.completed_epochs = static_cast<std::uint64_t>(epoch);
    extras.current_lr = lr;
    extras.best_metric = stopper.best_metric();
    extras.best_epoch = static_cast<std::uint64_t>(stopper.best_epoch());
    model.save_checkpoint(last_path, &extras);

    if (on_epoch) on_epoch(rec);
    if (decision.stop) {
      stop_reason = "early_stop";
      break;
    }
  }

  history.stop_reason = stop_reason;
  history.best_epoch = stopper.best_epoch();
  // restore the best-epoch weights
  if (std::filesystem::exists(best_path))
    model = Model::load_checkpoint_as(best_path, model.config());
  return history;
}

}  // namespace densegrade
