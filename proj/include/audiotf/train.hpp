#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "audiotf/audio.hpp"
#include "audiotf/model.hpp"

namespace audiotf {

// ---------------------------------------------------------------------------
// Huber loss, mean-reduced over all elements. Gradient is r clipped to
// [-delta, delta], scaled by 1/N.
template <typename T>
Tensor<T> huber_loss(const Tensor<T>& pred, const Tensor<T>& target, T delta) {
  if (pred.shape() != target.shape())
    throw DimensionError("huber_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  if (!(delta > T(0))) throw ContractError("huber delta must be positive");
  const std::int64_t n = pred.size();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T r = pred.values()[i] - target.values()[i];
    const T a = std::abs(r);
    acc += a <= delta ? T(0.5) * r * r : delta * (a - T(0.5) * delta);
  }
  acc /= T(n);
  return Tensor<T>::make_op({1}, {acc}, {pred, target}, [pred, target, delta, n](TensorNode<T>& y) {
    auto pn = pred.node();
    auto tn = target.node();
    const T g = y.grad[0] / T(n);
    if (pn->requires_grad) {
      pn->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        const T r = pn->values[i] - tn->values[i];
        pn->grad[i] += g * std::clamp(r, -delta, delta);
      }
    }
    if (tn->requires_grad) {
      tn->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        const T r = pn->values[i] - tn->values[i];
        tn->grad[i] -= g * std::clamp(r, -delta, delta);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Adam with bias correction.
template <typename T>
class Adam {
 public:
  explicit Adam(NamedParams<T> params, double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t p = 0; p < params_.size(); ++p) {
      auto& tensor = params_[p].second;
      auto& vals = tensor.values();
      const auto& grad = tensor.grad();
      for (std::int64_t i = 0; i < tensor.size(); ++i) {
        const double g = double(grad[i]);
        if (!std::isfinite(g))
          throw Error("non-finite gradient in parameter '" + params_[p].first + "'");
        m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g;
        v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g * g;
        const double mhat = m_[p][i] / bc1;
        const double vhat = v_[p][i] / bc2;
        vals[i] = T(double(vals[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  NamedParams<T> params_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
  double lr_, beta1_, beta2_, eps_;
};

// ---------------------------------------------------------------------------
// Average precision / mAP.

// AP for one class; ties in score break by ascending original index.
// Returns nullopt when the class has no positives (excluded from mAP).
inline std::optional<double> average_precision(const std::vector<double>& scores,
                                               const std::vector<bool>& positives) {
  if (scores.size() != positives.size())
    throw DimensionError("average_precision: score/label length mismatch");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[size_t(a)] > scores[size_t(b)]; });
  int hits = 0;
  double sum_prec = 0.0;
  for (size_t k = 0; k < order.size(); ++k) {
    if (positives[size_t(order[k])]) {
      ++hits;
      sum_prec += double(hits) / double(k + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum_prec / hits;
}

struct EvalReport {
  std::vector<double> per_class_ap;  // -1 marks classes with no positives
  std::vector<int> per_class_positives;
  double map = 0.0;

  std::string to_csv(const std::vector<std::string>& class_names) const {
    std::ostringstream os;
    os << "class_index,class_name,ap,num_positives\n";
    for (size_t c = 0; c < per_class_ap.size(); ++c) {
      os << c << "," << (c < class_names.size() ? class_names[c] : "") << ",";
      if (per_class_ap[c] >= 0)
        os << per_class_ap[c];
      os << "," << per_class_positives[c] << "\n";
    }
    os << "mAP,," << map << ",\n";
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Batch assembly.

template <typename T>
Tensor<T> batch_frames(const std::vector<Example>& examples, const std::vector<int>& idx) {
  const int b = int(idx.size());
  std::vector<T> vals(size_t(b) * kChunkLen);
  for (int i = 0; i < b; ++i) {
    const auto& s = frame(examples[size_t(idx[size_t(i)])].samples);
    for (int j = 0; j < kChunkLen; ++j) vals[size_t(i) * kChunkLen + j] = T(s[size_t(j)]);
  }
  return Tensor<T>::from({b, kNumFrames, kFrameLen}, std::move(vals));
}

template <typename T>
Tensor<T> batch_targets(const std::vector<Example>& examples, const std::vector<int>& idx,
                        int n_labels) {
  const int b = int(idx.size());
  std::vector<T> vals(size_t(b) * n_labels);
  for (int i = 0; i < b; ++i) {
    const auto& t = examples[size_t(idx[size_t(i)])].target;
    if (int(t.size()) != n_labels)
      throw DimensionError("example target length " + std::to_string(t.size()) +
                           " != n_labels " + std::to_string(n_labels));
    for (int j = 0; j < n_labels; ++j) vals[size_t(i) * n_labels + j] = T(t[size_t(j)]);
  }
  return Tensor<T>::from({b, n_labels}, std::move(vals));
}

// ---------------------------------------------------------------------------
// Clip-level evaluation: chunk each clip, average chunk scores, AP per class.

template <typename T>
EvalReport evaluate(const AudioTransformer<T>& model, const std::vector<AudioClip>& clips,
                    int batch_size = 32) {
  const int n_labels = model.config().n_labels;
  std::vector<std::vector<double>> clip_scores;
  clip_scores.reserve(clips.size());
  // flatten chunks, remembering their clip
  std::vector<Example> chunks;
  std::vector<int> chunk_clip_idx;
  for (size_t c = 0; c < clips.size(); ++c) {
    for (auto& e : chunk_clip(clips[c])) {
      chunks.push_back(std::move(e));
      chunk_clip_idx.push_back(int(c));
    }
  }
  std::vector<std::vector<double>> acc(clips.size(), std::vector<double>(size_t(n_labels), 0.0));
  std::vector<int> counts(clips.size(), 0);
  for (int start = 0; start < int(chunks.size()); start += batch_size) {
    const int stop = std::min(start + batch_size, int(chunks.size()));
    std::vector<int> idx(size_t(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor<T> scores = model.forward(batch_frames<T>(chunks, idx));
    for (int i = 0; i < stop - start; ++i) {
      const int clip = chunk_clip_idx[size_t(start + i)];
      for (int l = 0; l < n_labels; ++l)
        acc[size_t(clip)][size_t(l)] += double(scores.values()[size_t(i) * n_labels + l]);
      ++counts[size_t(clip)];
    }
  }
  EvalReport report;
  report.per_class_ap.assign(size_t(n_labels), -1.0);
  report.per_class_positives.assign(size_t(n_labels), 0);
  double map_sum = 0.0;
  int map_classes = 0;
  for (int l = 0; l < n_labels; ++l) {
    std::vector<double> scores(clips.size());
    std::vector<bool> pos(clips.size());
    for (size_t c = 0; c < clips.size(); ++c) {
      scores[c] = acc[c][size_t(l)] / std::max(counts[c], 1);
      pos[c] = clips[c].labels.at(size_t(l)) > 0.5f;
      if (pos[c]) ++report.per_class_positives[size_t(l)];
    }
    if (auto ap = average_precision(scores, pos)) {
      report.per_class_ap[size_t(l)] = *ap;
      map_sum += *ap;
      ++map_classes;
    }
  }
  report.map = map_classes > 0 ? map_sum / map_classes : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainRunConfig {
  int batch_size = 32;
  int max_steps = 2000;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  int eval_interval = 0;  // 0 disables in-loop evaluation
  double huber_delta = 1.0;
  double stop_at_map = -1.0;  // stop early once val mAP reaches this (if > 0)

  void validate() const {
    if (batch_size <= 0 || max_steps <= 0 || learning_rate <= 0 || huber_delta <= 0)
      throw ConfigError("train run config fields must be positive");
  }
};

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double val_map = -1.0;  // -1 = not evaluated this step
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  int steps_run = 0;
  double final_val_map = -1.0;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  os << "step,loss,val_mAP\n";
  os.precision(10);
  for (const auto& r : log) {
    os << r.step << "," << r.loss << ",";
    if (r.val_map >= 0) os << r.val_map;
    os << "\n";
  }
  return os.str();
}

template <typename T>
TrainResult train(AudioTransformer<T>& model, const std::vector<Example>& dataset,
                  const TrainRunConfig& run, const std::vector<AudioClip>* val_clips = nullptr) {
  run.validate();
  if (dataset.empty()) throw ContractError("train: empty dataset");
  const int n_labels = model.config().n_labels;
  Adam<T> opt(model.parameters(), run.learning_rate);
  Rng rng(run.seed);
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  size_t cursor = 0;
  TrainResult result;
  for (int step = 1; step <= run.max_steps; ++step) {
    std::vector<int> idx;
    idx.reserve(size_t(run.batch_size));
    for (int i = 0; i < run.batch_size; ++i) {
      if (cursor >= order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    Tensor<T> frames = batch_frames<T>(dataset, idx);
    Tensor<T> targets = batch_targets<T>(dataset, idx, n_labels);
    Tensor<T> scores = model.forward(frames);
    Tensor<T> loss = huber_loss(scores, targets, T(run.huber_delta));
    const double loss_val = double(loss.item());
    if (!std::isfinite(loss_val)) {
      std::string ids;
      for (int i : idx) ids += dataset[size_t(i)].source_id + " ";
      throw Error("non-finite training loss at step " + std::to_string(step) + "; batch: " + ids);
    }
    loss.backward();
    opt.step();
    model.zero_grads();
    TrainLogRow row;
    row.step = step;
    row.loss = loss_val;
    bool do_eval = run.eval_interval > 0 && val_clips &&
                   (step % run.eval_interval == 0 || step == run.max_steps);
    if (do_eval) {
      row.val_map = evaluate(model, *val_clips).map;
      result.final_val_map = row.val_map;
    }
    result.log.push_back(row);
    result.steps_run = step;
    if (do_eval && run.stop_at_map > 0 && row.val_map >= run.stop_at_map) break;
  }
  return result;
}

}  // namespace audiotf
