#pragma once

// Supervised training: AdamW with decoupled weight decay, cosine schedule,
// global-norm clipping, a two-source batch sampler and a stage runner with a
// divergence guard.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/datagen.hpp"
#include "cmmcot/decoder.hpp"
#include "cmmcot/random.hpp"

namespace cmmcot {

inline constexpr int kReferenceBatchSize = 256;
inline constexpr double kReferenceStage1Lr = 1e-5;
inline constexpr double kReferenceStage2Lr = 1e-6;

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  /// Global gradient norm limit; 0 disables clipping.
  double clip_norm = 1.0;
  /// Also decay 1-row tensors (norm gains and biases).
  bool decay_vectors = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

/// floor + (peak - floor) (1 + cos(pi step / total)) / 2. Throws
/// std::invalid_argument for total <= 0 or step outside [0, total].
double cosine_lr(long step, long total, double peak, double floor = 0.0);

template <class T>
double global_norm(const Weights<T>& grads);

/// Scales `grads` so the global norm is at most `max_norm`; returns the norm
/// before clipping.
template <class T>
double clip_gradients(Weights<T>& grads, double max_norm);

/// One update of a flat parameter block, per element with t >= 1 the
/// update count:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
///   p -= lr (wd p + (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps))
/// where wd p uses the parameter before the update.
template <class T>
void adamw_update(std::span<T> params, std::span<const T> grads, std::span<double> m, std::span<double> v, long t,
                  double lr, double weight_decay, const OptimizerConfig& options);

/// adamw_update over every tensor. Weight decay skips 1-row tensors unless
/// options.decay_vectors is set. Moments are kept in double.
template <class T>
class AdamW {
 public:
  AdamW(const ModelConfig& config, OptimizerConfig options);

  void step(Weights<T>& weights, const Weights<T>& grads, double lr);
  long steps() const { return t_; }
  const OptimizerConfig& options() const { return options_; }

 private:
  OptimizerConfig options_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

// ---------------------------------------------------------------------------
// Data

/// Relative sampling weights of the grounded corpus and the general corpus.
struct DataMix {
  double cmmcot = 1.0;
  double general = 0.0;

  double cmmcot_probability() const { return cmmcot / (cmmcot + general); }
  void validate() const;
};

/// Draws batch slots: the grounded corpus with probability
/// cmmcot / (cmmcot + general), then the next index of that corpus in a
/// per-epoch shuffled order.
class MixedSampler {
 public:
  struct Draw {
    int source = 0;  // 0 grounded, 1 general
    std::size_t index = 0;
  };

  /// Throws std::invalid_argument when a corpus with non-zero weight is
  /// empty.
  MixedSampler(std::size_t cmmcot_size, std::size_t general_size, DataMix mix, std::uint64_t seed);
  Draw next();

 private:
  struct Order {
    std::vector<std::size_t> perm;
    std::size_t pos = 0;
  };
  std::size_t take(Order& order);

  double p_;
  Rng rng_;
  Order orders_[2];
};

struct Dataset {
  std::size_t size = 0;
  std::function<Sample(std::size_t)> sample;
};

/// Prompt (images, question, reasoning prompt) followed by the record's
/// chain and end-of-text.
Sample record_sample(const CorpusRecord& record, const Vocabulary& vocab, const LayoutOptions& layout = {});
/// Text-only prompt followed by "Answer: ..." and end-of-text.
Sample general_sample(const GeneralRecord& record, const Vocabulary& vocab);

/// Datasets that build samples on demand. The records must outlive them.
Dataset corpus_dataset(const std::vector<CorpusRecord>& records, const Vocabulary& vocab,
                       const LayoutOptions& layout = {});
Dataset general_dataset(const std::vector<GeneralRecord>& records, const Vocabulary& vocab);

/// Masked cross-entropy averaged over every unmasked token of the first
/// `limit` samples (all when 0).
double dataset_loss(const Weights<float>& weights, const Dataset& data, std::size_t limit = 0);

// ---------------------------------------------------------------------------
// Stages

struct StagePlan {
  int stage = 1;
  double lr = 1e-3;
  double min_lr = 0.0;
  long steps = 3000;
  int batch_size = 16;
  DataMix mix;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  /// Evaluate dataset_loss on the eval set every this many steps (0: never).
  long eval_every = 0;
  std::size_t eval_limit = 0;
  /// Stop once the evaluated loss falls below this (0: never).
  double target_loss = 0.0;

  static StagePlan stage1();
  static StagePlan stage2();
  void validate() const;
};

void to_json(nlohmann::json& j, const StagePlan& p);
void from_json(const nlohmann::json& j, StagePlan& p);
void to_json(nlohmann::json& j, const DataMix& m);
void from_json(const nlohmann::json& j, DataMix& m);

struct LossPoint {
  long step = 0;
  int stage = 1;
  double lr = 0.0;
  double loss = 0.0;
  friend bool operator==(const LossPoint&, const LossPoint&) = default;
};

struct EvalPoint {
  long step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> trace;
  std::vector<EvalPoint> evals;
  long steps = 0;
  bool reached_target = false;
  double seconds = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, TrainResult partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const TrainResult& partial() const { return partial_; }

 private:
  TrainResult partial_;
};

struct TrainHooks {
  std::function<void(const LossPoint&)> on_step;
  std::function<void(const EvalPoint&)> on_eval;
  /// Replaces the computed gradients before clipping (tests).
  std::function<void(Weights<float>&)> gradient_override;
};

inline constexpr double kDivergenceFactor = 10.0;
inline constexpr int kDivergencePatience = 100;

/// Runs plan.steps updates (fewer when the target loss is reached). Throws
/// DivergenceError when the batch loss stays above 10x the first batch loss
/// (or is not finite) for 100 consecutive steps.
TrainResult train_stage(const StagePlan& plan, Weights<float>& weights, const Dataset& cmmcot,
                        const Dataset& general = {}, const Dataset* eval = nullptr, const TrainHooks& hooks = {});

/// "step,stage,lr,loss" rows.
void write_loss_trace(const std::vector<LossPoint>& trace, const std::filesystem::path& path);
std::vector<LossPoint> read_loss_trace(const std::filesystem::path& path);

}  // namespace cmmcot
