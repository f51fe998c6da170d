#include "cmmcot/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cmmcot/engine.hpp"

namespace cmmcot {

void OptimizerConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("optimizer: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("optimizer: eps must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optimizer: weight decay must be >= 0");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("optimizer: clip norm must be >= 0");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"beta1", c.beta1},         {"beta2", c.beta2},         {"eps", c.eps},
       {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm}, {"decay_vectors", c.decay_vectors}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c = OptimizerConfig{};
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.decay_vectors = j.value("decay_vectors", c.decay_vectors);
}

double cosine_lr(long step, long total, double peak, double floor) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total steps must be positive");
  if (step < 0 || step > total) throw std::invalid_argument("cosine_lr: step outside [0, total]");
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total));
  return floor + (peak - floor) * (1.0 + c) / 2.0;
}

template <class T>
double global_norm(const Weights<T>& grads) {
  double s = 0.0;
  grads.visit([&](const Tensor<T>& t) {
    for (T g : t.data) s += static_cast<double>(g) * static_cast<double>(g);
  });
  return std::sqrt(s);
}

template <class T>
double clip_gradients(Weights<T>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    grads.visit([&](Tensor<T>& t) { t.vec() *= scale; });
  }
  return norm;
}

template double global_norm(const Weights<float>&);
template double global_norm(const Weights<double>&);
template double clip_gradients(Weights<float>&, double);
template double clip_gradients(Weights<double>&, double);

template <class T>
AdamW<T>::AdamW(const ModelConfig& config, OptimizerConfig options) : options_(options) {
  options_.validate();
  Weights<T>::zeros(config).visit([&](const Tensor<T>& t) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  });
}

template <class T>
void adamw_update(std::span<T> params, std::span<const T> grads, std::span<double> m, std::span<double> v, long t,
                  double lr, double weight_decay, const OptimizerConfig& options) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw std::invalid_argument("adamw_update: size mismatch");
  }
  if (t < 1) throw std::invalid_argument("adamw_update: step count starts at 1");
  const double b1 = options.beta1, b2 = options.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double p = static_cast<double>(params[i]);
    const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + options.eps);
    params[i] = static_cast<T>(p - lr * (weight_decay * p + update));
  }
}

template void adamw_update(std::span<float>, std::span<const float>, std::span<double>, std::span<double>, long,
                           double, double, const OptimizerConfig&);
template void adamw_update(std::span<double>, std::span<const double>, std::span<double>, std::span<double>, long,
                           double, double, const OptimizerConfig&);

template <class T>
void AdamW<T>::step(Weights<T>& weights, const Weights<T>& grads, double lr) {
  ++t_;
  std::vector<const Tensor<T>*> gs;
  grads.visit([&](const Tensor<T>& g) { gs.push_back(&g); });
  if (gs.size() != m_.size()) throw std::invalid_argument("AdamW: gradient layout mismatch");
  std::size_t k = 0;
  weights.visit([&](Tensor<T>& p) {
    const Tensor<T>& g = *gs[k];
    const double wd = (p.rows > 1 || options_.decay_vectors) ? options_.weight_decay : 0.0;
    adamw_update<T>(p.data, g.data, m_[k], v_[k], t_, lr, wd, options_);
    ++k;
  });
}

template class AdamW<float>;
template class AdamW<double>;

// ---------------------------------------------------------------------------
// Data

void DataMix::validate() const {
  if (!(cmmcot >= 0.0) || !(general >= 0.0) || !(cmmcot + general > 0.0) || !std::isfinite(cmmcot + general)) {
    throw std::invalid_argument("data mix: weights must be finite, >= 0 and not both zero");
  }
}

void to_json(nlohmann::json& j, const DataMix& m) { j = {{"cmmcot", m.cmmcot}, {"general", m.general}}; }

void from_json(const nlohmann::json& j, DataMix& m) {
  m = DataMix{};
  m.cmmcot = j.value("cmmcot", m.cmmcot);
  m.general = j.value("general", m.general);
}

MixedSampler::MixedSampler(std::size_t cmmcot_size, std::size_t general_size, DataMix mix, std::uint64_t seed)
    : rng_(mix_seed(seed, 0x5a)) {
  mix.validate();
  p_ = mix.cmmcot_probability();
  if (p_ > 0.0 && cmmcot_size == 0) throw std::invalid_argument("mixed sampler: grounded corpus is empty");
  if (p_ < 1.0 && general_size == 0) throw std::invalid_argument("mixed sampler: general corpus is empty");
  for (std::size_t i = 0; i < cmmcot_size; ++i) orders_[0].perm.push_back(i);
  for (std::size_t i = 0; i < general_size; ++i) orders_[1].perm.push_back(i);
  for (Order& o : orders_) o.pos = o.perm.size();
}

std::size_t MixedSampler::take(Order& order) {
  if (order.pos == order.perm.size()) {
    rng_.shuffle(order.perm);
    order.pos = 0;
  }
  return order.perm[order.pos++];
}

MixedSampler::Draw MixedSampler::next() {
  const int source = p_ >= 1.0 ? 0 : (p_ <= 0.0 ? 1 : (rng_.bernoulli(p_) ? 0 : 1));
  return {source, take(orders_[source])};
}

Sample record_sample(const CorpusRecord& record, const Vocabulary& vocab, const LayoutOptions& layout) {
  std::vector<Image> images;
  images.reserve(record.scenes.size());
  for (const SceneSpec& s : record.scenes) images.push_back(synth_scene(s).image);
  InterleavedSequence seq = assemble_prompt(images, record.question, vocab, layout.patch);
  seq.append(record.chain);
  LayoutOptions opts = layout;
  opts.append_eos = true;
  return build_sample(seq, images, vocab, opts);
}

Sample general_sample(const GeneralRecord& record, const Vocabulary& vocab) {
  std::string prompt = record.question;
  if (!prompt.empty() && prompt.back() != ' ') prompt += ' ';
  prompt += kReasoningPrompt;
  InterleavedSequence seq;
  seq.text(vocab.encode(prompt), Role::Prompt).text(vocab.encode(" Answer: " + record.answer), Role::Target);
  return build_sample(seq, {}, vocab, {.append_eos = true});
}

Dataset corpus_dataset(const std::vector<CorpusRecord>& records, const Vocabulary& vocab, const LayoutOptions& layout) {
  return {records.size(), [&records, &vocab, layout](std::size_t i) { return record_sample(records.at(i), vocab, layout); }};
}

Dataset general_dataset(const std::vector<GeneralRecord>& records, const Vocabulary& vocab) {
  return {records.size(), [&records, &vocab](std::size_t i) { return general_sample(records.at(i), vocab); }};
}

double dataset_loss(const Weights<float>& weights, const Dataset& data, std::size_t limit) {
  const std::size_t n = limit == 0 ? data.size : std::min(limit, data.size);
  if (n == 0) throw std::invalid_argument("dataset_loss: empty dataset");
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample s = data.sample(i);
    std::size_t count = 0;
    for (auto m : s.loss_mask) count += m;
    total += compute_loss<float>(s.targets, forward_sequence(weights, s), s.loss_mask) * static_cast<double>(count);
    tokens += count;
  }
  return total / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------
// Stages

StagePlan StagePlan::stage1() { return {}; }

StagePlan StagePlan::stage2() {
  StagePlan p;
  p.stage = 2;
  p.lr = 1e-4;
  p.steps = 1000;
  p.mix = {1.0, 1.0};
  return p;
}

void StagePlan::validate() const {
  if (stage != 1 && stage != 2) throw std::invalid_argument("stage plan: stage must be 1 or 2");
  if (!(lr >= 0.0) || !(min_lr >= 0.0) || min_lr > lr) {
    throw std::invalid_argument("stage plan: need 0 <= min_lr <= lr");
  }
  if (steps <= 0) throw std::invalid_argument("stage plan: steps must be positive");
  if (batch_size <= 0) throw std::invalid_argument("stage plan: batch size must be positive");
  if (eval_every < 0 || target_loss < 0.0) throw std::invalid_argument("stage plan: negative eval settings");
  mix.validate();
  optimizer.validate();
}

void to_json(nlohmann::json& j, const StagePlan& p) {
  j = {{"stage", p.stage},         {"lr", p.lr},
       {"min_lr", p.min_lr},       {"steps", p.steps},
       {"batch_size", p.batch_size}, {"mix", p.mix},
       {"optimizer", p.optimizer}, {"seed", p.seed},
       {"eval_every", p.eval_every}, {"eval_limit", p.eval_limit},
       {"target_loss", p.target_loss}};
}

void from_json(const nlohmann::json& j, StagePlan& p) {
  const int stage = j.value("stage", 1);
  p = stage == 2 ? StagePlan::stage2() : StagePlan::stage1();
  p.stage = stage;
  p.lr = j.value("lr", p.lr);
  p.min_lr = j.value("min_lr", p.min_lr);
  p.steps = j.value("steps", p.steps);
  p.batch_size = j.value("batch_size", p.batch_size);
  if (j.contains("mix")) p.mix = j.at("mix").get<DataMix>();
  if (j.contains("optimizer")) p.optimizer = j.at("optimizer").get<OptimizerConfig>();
  p.seed = j.value("seed", p.seed);
  p.eval_every = j.value("eval_every", p.eval_every);
  p.eval_limit = j.value("eval_limit", p.eval_limit);
  p.target_loss = j.value("target_loss", p.target_loss);
}

TrainResult train_stage(const StagePlan& plan, Weights<float>& weights, const Dataset& cmmcot, const Dataset& general,
                        const Dataset* eval, const TrainHooks& hooks) {
  plan.validate();
  if (plan.eval_every > 0 && eval == nullptr) throw std::invalid_argument("train_stage: eval_every needs an eval set");
  const auto start = std::chrono::steady_clock::now();
  MixedSampler sampler(cmmcot.size, general.size, plan.mix, plan.seed);
  AdamW<float> opt(weights.config, plan.optimizer);
  Weights<float> grads = Weights<float>::zeros(weights.config);
  TrainResult result;
  double initial = 0.0;
  int above = 0;

  for (long step = 1; step <= plan.steps; ++step) {
    grads.visit([](Tensor<float>& t) { t.vec().setZero(); });
    const float scale = 1.0f / static_cast<float>(plan.batch_size);
    double loss = 0.0;
    for (int b = 0; b < plan.batch_size; ++b) {
      const MixedSampler::Draw d = sampler.next();
      const Sample s = (d.source == 0 ? cmmcot : general).sample(d.index);
      loss += loss_and_grad(weights, s, grads, scale);
    }
    loss /= plan.batch_size;
    if (hooks.gradient_override) hooks.gradient_override(grads);
    clip_gradients(grads, plan.optimizer.clip_norm);
    const double lr = cosine_lr(step - 1, plan.steps, plan.lr, plan.min_lr);
    opt.step(weights, grads, lr);

    const LossPoint point{step, plan.stage, lr, loss};
    result.trace.push_back(point);
    result.steps = step;
    if (hooks.on_step) hooks.on_step(point);

    if (step == 1) initial = loss;
    above = (!std::isfinite(loss) || loss > kDivergenceFactor * initial) ? above + 1 : 0;
    if (above >= kDivergencePatience) {
      result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::ostringstream msg;
      msg << "training diverged: loss above " << kDivergenceFactor << "x the initial " << initial << " for "
          << kDivergencePatience << " steps (step " << step << ")";
      throw DivergenceError(msg.str(), std::move(result));
    }

    if (plan.eval_every > 0 && (step % plan.eval_every == 0 || step == plan.steps)) {
      const EvalPoint e{step, dataset_loss(weights, *eval, plan.eval_limit)};
      result.evals.push_back(e);
      if (hooks.on_eval) hooks.on_eval(e);
      if (plan.target_loss > 0.0 && e.loss < plan.target_loss) {
        result.reached_target = true;
        break;
      }
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void write_loss_trace(const std::vector<LossPoint>& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,stage,lr,loss\n";
  out.precision(17);
  for (const LossPoint& p : trace) out << p.step << ',' << p.stage << ',' << p.lr << ',' << p.loss << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<LossPoint> read_loss_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "step,stage,lr,loss") {
    throw std::runtime_error(path.string() + ": missing loss trace header");
  }
  std::vector<LossPoint> trace;
  for (int n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    LossPoint p;
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream ss(line);
    if (!(ss >> p.step >> c1 >> p.stage >> c2 >> p.lr >> c3 >> p.loss) || c1 != ',' || c2 != ',' || c3 != ',') {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": malformed row");
    }
    trace.push_back(p);
  }
  return trace;
}

}  // namespace cmmcot
