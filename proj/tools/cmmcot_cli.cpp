// cmmcot command line: datagen, train, infer, evaluate, ablate, report.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence abort.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/datagen.hpp"
#include "cmmcot/decoder.hpp"
#include "cmmcot/engine.hpp"
#include "cmmcot/grammar.hpp"
#include "cmmcot/harness.hpp"
#include "cmmcot/image.hpp"
#include "cmmcot/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmmcot;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out = "out";
  json config = json::object();

  json section(const char* name) const { return config.contains(name) ? config.at(name) : json::object(); }
  fs::path path(const std::string& name) const { return fs::path(out) / name; }
};

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_json_file(const json& j, const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  // Generated text may hold stray bytes from byte tokens.
  out << j.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
}

template <class T>
T parse_section(const json& j, const char* what) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config ") + what + ": " + e.what());
  }
}

std::vector<int> all_layers(int layers) {
  std::vector<int> out(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) out[static_cast<std::size_t>(l)] = l;
  return out;
}

ModelConfig model_config(const json& j, ModelConfig fallback) {
  ModelConfig c = j.is_null() || j.empty() ? fallback : parse_section<ModelConfig>(j, "model");
  if (c.rifrem_layers.empty()) c.rifrem_layers = all_layers(c.layers);
  c.validate();
  return c;
}

Weights<float> load_model(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

RifremConfig rifrem_for(const ModelConfig& c, bool enabled) {
  RifremConfig r;
  r.layers = c.rifrem_layers.empty() ? all_layers(c.layers) : c.rifrem_layers;
  r.enabled = enabled;
  return r;
}

std::vector<bool> rifrem_modes(const std::string& mode) {
  if (mode == "on") return {true};
  if (mode == "off") return {false};
  if (mode == "both") return {false, true};
  throw UsageError("--rifrem must be on, off or both");
}

/// Scene fields (image_size, cell, coreference_candidates) of an
/// evaluation section.
SceneOptions scene_options(const json& section) { return parse_section<EvalTask>(section, "evaluate").scenes; }

// ---------------------------------------------------------------------------
// datagen

struct DatagenArgs {
  double scale = 2000.0 / 260.0;
  long general = -1;
  bool images = false;
};

int run_datagen(const Globals& g, const DatagenArgs& a) {
  const json sec = g.section("datagen");
  CorpusRequest req;
  if (sec.contains("request")) req = parse_section<CorpusRequest>(sec.at("request"), "datagen.request");
  if (req.counts.empty()) req.counts = scaled_task_mix(a.scale);
  req.seed = g.seed;
  const MockErrorRates rates =
      sec.contains("mock") ? parse_section<MockErrorRates>(sec.at("mock"), "datagen.mock") : MockErrorRates{};
  rates.validate();

  const Vocabulary& vocab = Vocabulary::standard();
  MockAnnotator annotator(g.seed, rates);
  CorpusResult corpus;
  try {
    corpus = assemble_corpus(req, annotator, vocab);
  } catch (const InfeasibleRequest& e) {
    throw DataError(e.what());
  }
  write_corpus(corpus, g.out, vocab, a.images);

  std::size_t general_count = 0;
  for (const auto& [t, n] : req.counts) general_count += static_cast<std::size_t>(n);
  if (a.general >= 0) general_count = static_cast<std::size_t>(a.general);
  write_general(general_corpus(general_count, g.seed, req.scenes), g.path("general.jsonl"));

  write_json_file(json{{"request", req}, {"mock", rates}, {"general", general_count}}, g.path("request.json"));

  std::cout << "records " << corpus.records.size() << "  rejected " << corpus.rejected.size() << "  general "
            << general_count << "\n";
  for (const auto& [o, n] : corpus.outcomes) std::cout << "  " << to_string(o) << " " << n << "\n";
  std::cout << stats_csv(corpus.stats);
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string corpus;
  std::string general;
  std::string init;
  std::vector<int> stages = {1};
  long steps = 0;
  double lr = 0.0;
  int batch = 0;
  double target_loss = -1.0;
  long eval_every = 250;
  std::size_t eval_limit = 200;
};

std::vector<StagePlan> stage_plans(const Globals& g, const TrainArgs& a) {
  const json sec = g.section("train");
  std::vector<StagePlan> plans;
  if (sec.contains("stages")) {
    plans = parse_section<std::vector<StagePlan>>(sec.at("stages"), "train.stages");
  } else {
    for (int s : a.stages) {
      if (s == 1) plans.push_back(StagePlan::stage1());
      else if (s == 2) plans.push_back(StagePlan::stage2());
      else throw UsageError("--stages takes 1 and/or 2");
    }
  }
  if (plans.empty()) throw UsageError("no training stages");
  for (auto& p : plans) {
    if (a.steps > 0) p.steps = a.steps;
    if (a.lr > 0.0) p.lr = a.lr;
    if (a.batch > 0) p.batch_size = a.batch;
    if (a.target_loss >= 0.0) p.target_loss = a.target_loss;
    if (!sec.contains("stages")) {
      p.eval_every = a.eval_every;
      p.eval_limit = a.eval_limit;
      p.seed = g.seed + static_cast<std::uint64_t>(p.stage);
    }
    p.validate();
  }
  return plans;
}

int run_train(const Globals& g, const TrainArgs& a) {
  const std::vector<StagePlan> plans = stage_plans(g, a);
  const Vocabulary& vocab = Vocabulary::standard();

  Weights<float> weights = a.init.empty() ? Weights<float>::init(model_config(g.section("model"), ModelConfig{}), g.seed)
                                          : load_model(a.init);

  const std::string corpus_path = a.corpus.empty() ? g.path("corpus.jsonl").string() : a.corpus;
  std::vector<CorpusRecord> records;
  try {
    records = read_corpus(corpus_path, vocab);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
  if (records.empty()) throw DataError(corpus_path + ": empty corpus");

  const bool needs_general = std::any_of(plans.begin(), plans.end(), [](const StagePlan& p) { return p.mix.general > 0; });
  std::vector<GeneralRecord> general;
  if (needs_general) {
    const std::string general_path = a.general.empty() ? g.path("general.jsonl").string() : a.general;
    try {
      general = read_general(general_path);
    } catch (const std::exception& e) {
      throw DataError(e.what());
    }
  }

  const Dataset cmmcot_data = corpus_dataset(records, vocab);
  const Dataset general_data = general_dataset(general, vocab);
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      (void)cmmcot_data.sample(i);
    } catch (const std::exception& e) {
      throw DataError(records[i].id + ": " + e.what());
    }
  }

  std::vector<LossPoint> trace;
  json stage_log = json::array();
  TrainHooks hooks;
  hooks.on_step = [](const LossPoint& p) {
    if (p.step % 100 == 0)
      std::cerr << "stage " << p.stage << " step " << p.step << " lr " << p.lr << " loss " << p.loss << "\n";
  };
  hooks.on_eval = [](const EvalPoint& p) { std::cerr << "  eval step " << p.step << " loss " << p.loss << "\n"; };

  fs::create_directories(g.out);
  double seconds = 0.0;
  for (const StagePlan& plan : plans) {
    TrainResult r;
    try {
      r = train_stage(plan, weights, cmmcot_data, general_data, &cmmcot_data, hooks);
    } catch (const DivergenceError& e) {
      const auto& part = e.partial().trace;
      trace.insert(trace.end(), part.begin(), part.end());
      write_loss_trace(trace, g.path("loss_trace.csv"));
      std::cerr << "diverged: " << e.what() << "\n";
      return kExitDivergence;
    }
    trace.insert(trace.end(), r.trace.begin(), r.trace.end());
    seconds += r.seconds;
    json evals = json::array();
    for (const auto& e : r.evals) evals.push_back({{"step", e.step}, {"loss", e.loss}});
    stage_log.push_back({{"plan", plan}, {"steps", r.steps}, {"reached_target", r.reached_target},
                         {"seconds", r.seconds}, {"evals", evals}});
  }

  save_checkpoint(weights, g.path("model.ckpt"));
  write_loss_trace(trace, g.path("loss_trace.csv"));
  const double final_loss = dataset_loss(weights, cmmcot_data, a.eval_limit);
  write_json_file(json{{"model", weights.config}, {"stages", stage_log}, {"records", records.size()},
                       {"final_loss", final_loss}, {"seconds", seconds}},
                  g.path("train_summary.json"));
  std::cout << "trained " << trace.size() << " steps in " << std::fixed << std::setprecision(1) << seconds
            << " s, loss on first " << a.eval_limit << " records " << std::setprecision(4) << final_loss << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string model;
  std::string family;
  std::size_t index = 0;
  std::vector<std::string> images;
  std::string question;
  std::string rifrem = "on";
  int budget = kDefaultStepBudget;
  double temperature = 0.0;
};

int run_infer(const Globals& g, const InferArgs& a) {
  const Weights<float> weights = load_model(a.model);
  const Vocabulary& vocab = Vocabulary::standard();
  const auto modes = rifrem_modes(a.rifrem);
  if (modes.size() != 1) throw UsageError("infer takes --rifrem on or off");

  std::vector<Image> images;
  std::string question = a.question;
  std::string gold;
  if (!a.family.empty()) {
    if (!a.images.empty()) throw UsageError("use either --family or --image");
    EvalTask task;
    task.family = eval_family_from_string(a.family);
    task.count = a.index + 1;
    task.seed = g.seed;
    task.scenes = scene_options(g.section("evaluate"));
    const TaskInstance inst = eval_instances(task).back();
    for (const auto& s : inst.scenes) images.push_back(synth_scene(s).image);
    question = inst.question;
    gold = inst.gold_answer;
  } else {
    if (a.images.empty() || question.empty()) throw UsageError("infer needs --family or --image and --question");
    for (const auto& p : a.images) {
      try {
        images.push_back(read_png(p));
      } catch (const std::exception& e) {
        throw DataError(p + ": " + e.what());
      }
    }
  }

  GenerationOptions opts;
  opts.rifrem = rifrem_for(weights.config, modes[0]);
  opts.step_budget = a.budget;
  DecodePolicy policy;
  if (a.temperature > 0.0) {
    policy.kind = DecodePolicy::Kind::Temperature;
    policy.temperature = a.temperature;
    policy.seed = g.seed;
  }
  const auto picker = policy.make_picker();
  const GenerationResult r = generate(weights, vocab, std::move(images), question, *picker, opts);

  json transcript = transcript_json(r, vocab);
  if (!gold.empty()) transcript["gold"] = gold;
  write_json_file(transcript, g.path("transcript.json"));
  write_json_file(r.bank_manifest, g.path("bank_manifest.json"));
  std::cout << "question: " << question << "\n"
            << "chain: " << render_text(r.chain, vocab) << "\n"
            << "answer: " << r.answer << (gold.empty() ? "" : "  (gold " + gold + ")") << "\n"
            << "triggers " << r.triggers.size() << "  tokens " << r.steps.size() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string model;
  std::string family = "all";
  std::size_t count = 100;
  std::string rifrem = "both";
  bool transcripts = false;
};

int run_evaluate(const Globals& g, const EvaluateArgs& a) {
  const Weights<float> weights = load_model(a.model);
  const Vocabulary& vocab = Vocabulary::standard();
  std::vector<EvalFamily> families;
  if (a.family == "all") families.assign(kEvalFamilies.begin(), kEvalFamilies.end());
  else families.push_back(eval_family_from_string(a.family));
  const SceneOptions scenes = scene_options(g.section("evaluate"));

  std::vector<EvalResult> results;
  std::ofstream transcripts;
  if (a.transcripts) {
    fs::create_directories(g.out);
    transcripts.open(g.path("transcripts.jsonl"), std::ios::binary);
  }
  for (EvalFamily f : families) {
    for (bool on : rifrem_modes(a.rifrem)) {
      EvalTask task{f, a.count, g.seed, scenes};
      EvalOptions opts;
      opts.rifrem = rifrem_for(weights.config, on);
      opts.keep_transcripts = a.transcripts;
      EvalResult r = evaluate(weights, vocab, task, opts);
      std::cout << std::left << std::setw(18) << to_string(f) << " rifrem " << (on ? "on " : "off") << "  "
                << r.correct << "/" << r.total << "  " << std::fixed << std::setprecision(3) << r.accuracy << "\n";
      if (a.transcripts) {
        for (auto& item : r.items) {
          transcripts << json{{"family", to_string(f)}, {"rifrem", on}, {"id", item.id}, {"gold", item.gold},
                              {"predicted", item.predicted}, {"correct", item.correct}, {"error", item.error},
                              {"transcript", item.transcript}}
                             .dump(-1, ' ', false, json::error_handler_t::replace)
                      << '\n';
          item.transcript = nullptr;
        }
      }
      results.push_back(std::move(r));
    }
  }
  write_eval_csv(results, g.path("eval.csv"));
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string model;
  std::vector<int> groups = {1, 2, 3, 4, 5};
  int repeats = 5;
  int warmup = 32;
  int min_tokens = 256;
  std::size_t items = 3;
  std::size_t groundings = 3;
  int image_size = 128;
  std::string accuracy_family;
  std::size_t accuracy_count = 50;
};

ModelConfig latency_model() {
  ModelConfig c;
  c.layers = 28;
  c.heads = 4;
  c.dim = 32;
  c.max_positions = 4096;
  return c;
}

int run_ablate(const Globals& g, const AblateArgs& a) {
  const Weights<float> weights = a.model.empty()
                                     ? Weights<float>::init(model_config(g.section("ablate").value("model", json()),
                                                                         latency_model()),
                                                            g.seed)
                                     : load_model(a.model);
  const Vocabulary& vocab = Vocabulary::standard();
  WorkloadSpec spec{a.items, a.groundings, a.image_size, g.seed};
  const auto workload = grounding_workload(spec, vocab);

  AblationOptions opts;
  opts.groups = a.groups;
  opts.repeats = a.repeats;
  opts.warmup_tokens = a.warmup;
  opts.min_tokens = a.min_tokens;
  opts.seed = g.seed;
  if (!a.accuracy_family.empty()) {
    EvalTask t;
    t.family = eval_family_from_string(a.accuracy_family);
    t.count = a.accuracy_count;
    t.scenes = scene_options(g.section("evaluate"));
    opts.accuracy_task = t;
  }
  const AblationReport report = run_ablation(weights, vocab, workload, opts);
  write_ablation_csv(report, g.path("ablation.csv"));
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "group layers median_ms accuracy\n";
  for (const auto& s : report.summary()) {
    std::cout << std::setw(5) << s.group << " " << std::setw(6) << s.active_layers << " " << std::setw(9)
              << std::fixed << std::setprecision(3) << s.median_latency_ms << " ";
    if (s.mean_accuracy) std::cout << *s.mean_accuracy;
    else std::cout << "-";
    std::cout << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report

int run_report(const Globals& g) {
  json rep = json::object();
  bool any = false;
  std::cout << std::fixed;

  if (fs::exists(g.path("stats.csv"))) {
    std::ifstream in(g.path("stats.csv"));
    std::stringstream text;
    text << in.rdbuf();
    json rows = json::array();
    std::cout << "corpus\n";
    for (const auto& r : parse_stats_csv(text.str())) {
      rows.push_back({{"skill", r.skill}, {"source", r.source}, {"instances", r.instances}});
      std::cout << "  " << std::left << std::setw(14) << r.skill << std::right << std::setw(8) << r.instances << "\n";
    }
    rep["corpus"] = rows;
    any = true;
  }
  if (fs::exists(g.path("loss_trace.csv"))) {
    const auto trace = read_loss_trace(g.path("loss_trace.csv"));
    if (!trace.empty()) {
      const std::size_t tail = std::min<std::size_t>(50, trace.size());
      double mean = 0.0;
      for (std::size_t i = trace.size() - tail; i < trace.size(); ++i) mean += trace[i].loss;
      mean /= static_cast<double>(tail);
      rep["training"] = {{"steps", trace.size()}, {"first_loss", trace.front().loss}, {"last_loss", trace.back().loss},
                         {"tail_mean_loss", mean}};
      std::cout << "training\n  steps " << trace.size() << "  first loss " << std::setprecision(4)
                << trace.front().loss << "  mean of last " << tail << " " << mean << "\n";
    }
    any = true;
  }
  if (fs::exists(g.path("eval.csv"))) {
    json rows = json::array();
    std::cout << "evaluation\n";
    for (const auto& r : read_eval_csv(g.path("eval.csv"))) {
      rows.push_back({{"family", to_string(r.family)}, {"rifrem", r.rifrem}, {"seed", r.seed}, {"total", r.total},
                      {"correct", r.correct}, {"accuracy", r.accuracy}});
      std::cout << "  " << std::left << std::setw(18) << to_string(r.family) << std::right << " rifrem "
                << (r.rifrem ? "on " : "off") << "  " << std::setprecision(3) << r.accuracy << "\n";
    }
    rep["evaluation"] = rows;
    any = true;
  }
  if (fs::exists(g.path("ablation.csv"))) {
    json rows = json::array();
    std::cout << "ablation\n";
    for (const auto& s : read_ablation_csv(g.path("ablation.csv")).summary()) {
      json row{{"group", s.group}, {"active_layers", s.active_layers}, {"median_latency_ms", s.median_latency_ms}};
      if (s.mean_accuracy) row["mean_accuracy"] = *s.mean_accuracy;
      rows.push_back(row);
      std::cout << "  group " << s.group << "  layers " << std::setw(2) << s.active_layers << "  median "
                << std::setprecision(3) << s.median_latency_ms << " ms\n";
    }
    rep["ablation"] = rows;
    any = true;
  }
  if (!any) throw DataError("nothing to report in " + g.out);
  write_json_file(rep, g.path("report.json"));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interleaved grounded chain-of-thought toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "Build the grounded corpus and the general corpus");
  datagen->add_option("--scale", dg.scale, "Multiplier on the 50/90/18/102 task mix")->check(CLI::NonNegativeNumber);
  datagen->add_option("--general", dg.general, "General records (default: corpus size)");
  datagen->add_flag("--images", dg.images, "Also write PNG renders of the scenes");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a model on the corpus");
  train->add_option("--corpus", tr.corpus, "corpus.jsonl (default: <out>/corpus.jsonl)");
  train->add_option("--general", tr.general, "general.jsonl (default: <out>/general.jsonl)");
  train->add_option("--init", tr.init, "Start from this checkpoint");
  train->add_option("--stages", tr.stages, "Stages to run")->delimiter(',');
  train->add_option("--steps", tr.steps, "Steps per stage")->check(CLI::PositiveNumber);
  train->add_option("--lr", tr.lr, "Peak learning rate")->check(CLI::PositiveNumber);
  train->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  train->add_option("--target-loss", tr.target_loss, "Stop once the eval loss falls below this");
  train->add_option("--eval-every", tr.eval_every, "Steps between evaluations (0: never)")->check(CLI::NonNegativeNumber);
  train->add_option("--eval-limit", tr.eval_limit, "Records in the eval loss");

  InferArgs in;
  auto* infer = app.add_subcommand("infer", "Generate one grounded chain");
  infer->add_option("--model", in.model, "Checkpoint")->required();
  infer->add_option("--family", in.family, "Synthetic instance family");
  infer->add_option("--index", in.index, "Instance index within the family");
  infer->add_option("--image", in.images, "Input PNG (repeatable)");
  infer->add_option("--question", in.question, "Question text");
  infer->add_option("--rifrem", in.rifrem, "on or off")->capture_default_str();
  infer->add_option("--budget", in.budget, "Step budget")->check(CLI::PositiveNumber);
  infer->add_option("--temperature", in.temperature, "Sampling temperature (0: greedy)");

  EvaluateArgs ev;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Accuracy on synthetic task families");
  evaluate_cmd->add_option("--model", ev.model, "Checkpoint")->required();
  evaluate_cmd->add_option("--family", ev.family, "cross-image-match, counting, comparison or all")
      ->capture_default_str();
  evaluate_cmd->add_option("--count", ev.count, "Instances per family")->check(CLI::PositiveNumber);
  evaluate_cmd->add_option("--rifrem", ev.rifrem, "on, off or both")->capture_default_str();
  evaluate_cmd->add_flag("--transcripts", ev.transcripts, "Write transcripts.jsonl");

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Layer-placement latency ablation");
  ablate->add_option("--model", ab.model, "Checkpoint (default: a fresh 28-layer model)");
  ablate->add_option("--groups", ab.groups, "Groups 0..5 (0: RIFREM off)")->delimiter(',');
  ablate->add_option("--repeats", ab.repeats, "Repeats per group")->check(CLI::PositiveNumber);
  ablate->add_option("--warmup", ab.warmup, "Unmeasured tokens per item")->check(CLI::NonNegativeNumber);
  ablate->add_option("--min-tokens", ab.min_tokens, "Fewest measured tokens per row")->check(CLI::NonNegativeNumber);
  ablate->add_option("--items", ab.items, "Workload items")->check(CLI::PositiveNumber);
  ablate->add_option("--groundings", ab.groundings, "Groundings per item")->check(CLI::PositiveNumber);
  ablate->add_option("--image-size", ab.image_size, "Workload image side")->check(CLI::PositiveNumber);
  ablate->add_option("--accuracy-family", ab.accuracy_family, "Also measure accuracy on this family");
  ablate->add_option("--accuracy-count", ab.accuracy_count, "Accuracy instances")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarize the CSV outputs in --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (!g.config_path.empty()) {
      try {
        g.config = read_json_file(g.config_path);
      } catch (const DataError& e) {
        throw UsageError(e.what());
      }
      if (!g.config.is_object()) throw UsageError("--config must hold a JSON object");
    }
    if (*datagen) return run_datagen(g, dg);
    if (*train) return run_train(g, tr);
    if (*infer) return run_infer(g, in);
    if (*evaluate_cmd) return run_evaluate(g, ev);
    if (*ablate) return run_ablate(g, ab);
    if (*report) return run_report(g);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
