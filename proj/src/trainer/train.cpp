#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

#include "davit/optim.hpp"
#include "davit/rng.hpp"
#include "davit/trainer.hpp"

namespace davit {

namespace {

constexpr uint64_t kShuffleStream = 0x5348554646ULL;

int64_t valid_pixels(const IndexMap& gt) {
  int64_t n = 0;
  for (int32_t v : gt.values) n += v != kIgnoreLabel;
  return n;
}

// One optimizer step over a batch whose samples may differ in size: each
// same-size group contributes its mean loss weighted by its valid pixels.
double train_step(Model& m, const std::vector<SampleRecord>& batch, AdamState& state, const AdamParams& adam,
                  ConfusionMatrix& seen) {
  std::map<std::pair<int64_t, int64_t>, std::vector<SampleRecord>> groups;
  for (const auto& r : batch) groups[{r.image.height, r.image.width}].push_back(r);
  struct Part {
    Tensor logits;
    IndexMap gt;
    int64_t valid;
  };
  std::vector<Part> parts;
  int64_t total_valid = 0;
  for (const auto& [size, recs] : groups) {
    IndexMap gt = masks_to_index(recs);
    const int64_t valid = valid_pixels(gt);
    total_valid += valid;
    parts.push_back({forward(m, images_to_tensor(recs)), std::move(gt), valid});
  }
  for (const auto& p : parts) accumulate_confusion(seen, ops::argmax_channels(p.logits), p.gt);
  if (total_valid == 0) return 0.0;
  Tensor loss;
  for (const auto& p : parts) {
    if (p.valid == 0) continue;
    Tensor part = ops::scale(ops::softmax_cross_entropy(p.logits, p.gt),
                             static_cast<double>(p.valid) / static_cast<double>(total_valid));
    loss = loss.defined() ? ops::add(loss, part) : part;
  }
  const double value = loss.item();
  if (!std::isfinite(value)) return value;
  loss.backward();
  auto params = m.parameters();
  adam_step(params, state, adam);
  m.zero_grad();
  return value;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
  if (eval_interval < 0) throw std::invalid_argument("eval_interval must be >= 0");
  if (max_iterations < 0) throw std::invalid_argument("max_iterations must be >= 0");
  if (augment) augment->validate();
}

TrainResult train(const Model& init, const std::vector<SampleRecord>& data, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train needs at least one sample");
  TrainResult result{init.clone(), {}, false};
  Model& m = result.model;
  AdamState state;
  const AdamParams adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  const int per_source = cfg.augment ? cfg.augment->expansion : 1;
  int64_t iteration = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<size_t> order(data.size() * static_cast<size_t>(per_source));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i / static_cast<size_t>(per_source);
    Rng shuffler = Rng::derive(cfg.seed ^ kShuffleStream, static_cast<uint64_t>(epoch));
    shuffler.shuffle(order);

    ConfusionMatrix seen(m.config().num_classes);
    double loss_sum = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      if (hooks.cancel && hooks.cancel->load()) {
        result.cancelled = true;
        return result;
      }
      if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
      std::vector<SampleRecord> batch;
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      for (size_t k = start; k < end; ++k) {
        const SampleRecord& src = data[order[k]];
        if (cfg.augment) batch.push_back(augment(src, Rng::derive(cfg.seed, static_cast<uint64_t>(epoch), k).next_u64(), *cfg.augment));
        else batch.push_back(src);
      }
      const double loss = train_step(m, batch, state, adam, seen);
      ++iteration;
      if (!std::isfinite(loss)) {
        throw DivergenceError("training diverged: loss is " + std::to_string(loss) + " at epoch " +
                              std::to_string(epoch) + ", iteration " + std::to_string(iteration) + " (lr " +
                              std::to_string(cfg.lr) + ")");
      }
      loss_sum += loss;
      ++batches;
      if (hooks.on_iteration) hooks.on_iteration(iteration, loss);
    }
    if (batches == 0) break;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.iterations = iteration;
    rec.loss = loss_sum / batches;
    if (seen.total() > 0) {
      rec.pa = pixel_accuracy(seen);
      rec.miou = mean_iou(seen).miou;
    }
    if (cfg.eval_interval > 0 && hooks.eval_data && !hooks.eval_data->empty() && epoch % cfg.eval_interval == 0) {
      Metrics e = evaluate(m, *hooks.eval_data);
      rec.eval_pa = e.pa;
      rec.eval_miou = e.miou;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.history.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
  }
  return result;
}

int64_t planned_iterations(size_t samples, const TrainConfig& cfg) {
  const int64_t per_epoch_sources = static_cast<int64_t>(samples) * (cfg.augment ? cfg.augment->expansion : 1);
  const int64_t per_epoch = (per_epoch_sources + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total = per_epoch * cfg.epochs;
  return cfg.max_iterations > 0 ? std::min(total, cfg.max_iterations) : total;
}

IndexMap predict(const Model& m, const Image& image) {
  NoGradGuard no_grad;
  return ops::argmax_channels(forward(m, image_to_tensor(image)));
}

Metrics evaluate(const Model& m, const std::vector<SampleRecord>& data, IouMode mode) {
  if (data.empty()) throw std::invalid_argument("evaluate needs at least one sample");
  ConfusionMatrix cm(m.config().num_classes);
  for (const auto& rec : data) {
    std::vector<SampleRecord> one{rec};
    accumulate_confusion(cm, predict(m, rec.image), masks_to_index(one));
  }
  return Metrics::from_confusion(cm, mode);
}

CrossValidationResult cross_validate(const std::vector<SampleRecord>& data, const ModelConfig& model_cfg,
                                     const TrainConfig& train_cfg, uint64_t split_seed,
                                     const std::function<void(int, const EpochRecord&)>& on_epoch) {
  if (data.size() < 5) throw std::invalid_argument("cross-validation needs at least 5 samples");
  CrossValidationResult out;
  out.plan = five_fold_split(data.size(), split_seed);
  for (int fold = 0; fold < 5; ++fold) {
    try {
      std::vector<SampleRecord> train_set, test_set;
      for (size_t i : out.plan.train_indices(fold)) train_set.push_back(data[i]);
      for (size_t i : out.plan.test_indices(fold)) test_set.push_back(data[i]);
      TrainConfig cfg = train_cfg;
      cfg.seed = Rng::derive(train_cfg.seed, static_cast<uint64_t>(fold), 1).next_u64();
      Model fresh = build_model(model_cfg, Rng::derive(train_cfg.seed, static_cast<uint64_t>(fold), 2).next_u64());
      TrainHooks hooks;
      if (on_epoch) hooks.on_epoch = [&](const EpochRecord& r) { on_epoch(fold, r); };
      auto trained = train(fresh, train_set, cfg, hooks);
      out.folds.push_back(evaluate(trained.model, test_set));
    } catch (const std::exception& e) {
      throw FoldError(fold, "fold " + std::to_string(fold) + " failed: " + e.what());
    }
  }
  for (const auto& f : out.folds) {
    out.mean_pa += f.pa;
    out.mean_miou += f.miou;
  }
  out.mean_pa /= 5.0;
  out.mean_miou /= 5.0;
  return out;
}

}  // namespace davit
