#pragma once

#include <cmath>
#include <functional>

#include "mfdet/model.hpp"

namespace mfdet {

template <typename T>
struct AdamW {
  std::vector<Tensor<T>*> params;
  std::vector<std::vector<T>> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  std::int64_t t = 0;

  explicit AdamW(std::vector<Tensor<T>*> ps) : params(std::move(ps)) {
    for (Tensor<T>* p : params) {
      p->set_requires_grad(true);
      m.emplace_back(p->numel(), T(0));
      v.emplace_back(p->numel(), T(0));
    }
  }

  void zero_grad() {
    for (Tensor<T>* p : params) p->zero_grad();
  }

  void step(double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>* p = params[i];
      const std::vector<T>& g = p->grad();
      std::vector<T>& data = p->data();
      for (int j = 0; j < p->numel(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = beta1 * static_cast<double>(m[i][j]) + (1.0 - beta1) * gj;
        const double vj = beta2 * static_cast<double>(v[i][j]) + (1.0 - beta2) * gj * gj;
        m[i][j] = static_cast<T>(mj);
        v[i][j] = static_cast<T>(vj);
        const double upd = (mj / bc1) / (std::sqrt(vj / bc2) + eps) +
                           weight_decay * static_cast<double>(data[j]);
        data[j] = static_cast<T>(static_cast<double>(data[j]) - lr * upd);
      }
    }
  }
};

template <typename T>
double clip_global_norm(const std::vector<Tensor<T>*>& params, double max_norm) {
  double sq = 0;
  for (Tensor<T>* p : params)
    for (const T& g : p->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (Tensor<T>* p : params)
      for (T& g : p->grad()) g *= s;
  }
  return norm;
}

inline double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  const double floor_lr = 0.01 * base;
  if (total <= 1) return base;
  const double u = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  return floor_lr + 0.5 * (base - floor_lr) * (1.0 + std::cos(M_PI * u));
}

inline void shuffle_indices(std::vector<int>& idx, std::mt19937_64& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[i], idx[j]);
  }
}

// Stage 1 trains the single-frame base detector; stage 2 (base_stage = false)
// trains the configured multi-frame model. Single-frame and concat configs use
// their own mode in both stages so every variant sees the same step budget.
inline ModelConfig stage_config(ModelConfig cfg, bool base_stage) {
  if (base_stage && cfg.frame_mode == FrameMode::kFull) cfg.frame_mode = FrameMode::kSingle;
  return cfg;
}

template <typename T>
double evaluate_model(const ModelParams<T>& params, const ModelConfig& cfg,
                      const std::vector<WindowSample>& val, const GtFilter& subset = {},
                      std::vector<EvalSample>* out_samples = nullptr) {
  std::vector<EvalSample> samples;
  for (std::size_t i = 0; i < val.size(); ++i) {
    ModelOutput<T> out = forward_window(val[i].frames, params, cfg,
                                        0x51ED270B8A9C17E5ULL + i);
    EvalSample s;
    s.preds = decode_predictions(out.head, cfg);
    s.gts = val[i].gts;
    samples.push_back(std::move(s));
  }
  const double result = evaluate_map(samples, {0.5, 1.0, 2.0}, cfg.num_classes, subset);
  if (out_samples) *out_samples = std::move(samples);
  return result;
}

struct EpochStats {
  int epoch = 0;
  double l_base = 0, l_aggr = 0, l_total = 0, map = 0;
};

template <typename T>
std::vector<EpochStats> train_stage(
    ModelParams<T>& params, const ModelConfig& model_cfg, bool base_stage,
    const std::vector<WindowSample>& train, const std::vector<WindowSample>& val,
    int epochs, double lr0, std::uint64_t seed, int first_epoch_index = 0,
    double clip_norm = 10.0, double weight_decay = 0.01,
    const std::function<void(const EpochStats&)>& on_epoch = {}) {
  const ModelConfig cfg = stage_config(model_cfg, base_stage);
  std::vector<Tensor<T>*> ps =
      base_stage ? params.base_parameters() : params.parameters(cfg);
  AdamW<T> opt(ps);
  opt.weight_decay = weight_decay;

  std::vector<WindowTargets> targets;
  targets.reserve(train.size());
  for (const WindowSample& s : train) targets.push_back(build_targets(s.gts, cfg));

  const std::int64_t total_steps = static_cast<std::int64_t>(epochs) * train.size();
  std::int64_t step = 0;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0xBF58476D1CE4E5B9ULL);
  std::vector<int> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  std::vector<EpochStats> rows;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle_indices(order, rng);
    double sum_base = 0, sum_aggr = 0, sum_total = 0;
    for (int idx : order) {
      opt.zero_grad();
      GradTape<T> tape;
      TapeScope<T> scope(&tape);
      ModelOutput<T> out = forward_window(
          train[idx].frames, params, cfg,
          seed ^ (0xA24BAED4963EE407ULL * static_cast<std::uint64_t>(step + 1)));
      LossBundle<T> loss = compute_losses(out, targets[idx], train[idx].gts, cfg);
      const double lb = static_cast<double>(loss.base.item());
      const double la = static_cast<double>(loss.aggr.item());
      const double lt = static_cast<double>(loss.total.item());
      if (!std::isfinite(lt))
        throw DivergenceError("training loss is not finite at step " + std::to_string(step));
      backward(loss.total);
      clip_global_norm(ps, clip_norm);
      opt.step(cosine_lr(lr0, step, total_steps));
      sum_base += lb;
      sum_aggr += la;
      sum_total += lt;
      ++step;
    }
    EpochStats row;
    row.epoch = first_epoch_index + epoch;
    const double n = static_cast<double>(train.size());
    row.l_base = sum_base / n;
    row.l_aggr = sum_aggr / n;
    row.l_total = sum_total / n;
    row.map = evaluate_model(params, cfg, val);
    if (on_epoch) on_epoch(row);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mfdet
