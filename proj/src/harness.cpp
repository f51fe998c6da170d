#include "cmmcot/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace cmmcot {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  return out;
}

// Rows of a CSV file with the given header, each with the header's width.
std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path, std::string_view header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) throw std::runtime_error(path.string() + ": unexpected header");
  const std::size_t width = split_csv(std::string(header)).size();
  std::vector<std::vector<std::string>> rows;
  for (int n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != width) throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": malformed row");
    rows.push_back(std::move(cells));
  }
  return rows;
}

template <class T>
T parse_number(const std::string& s, const std::filesystem::path& path) {
  std::istringstream ss(s);
  T v{};
  if (!(ss >> v) || !ss.eof()) throw std::runtime_error(path.string() + ": bad number '" + s + "'");
  return v;
}

std::vector<Image> render(const std::vector<SceneSpec>& scenes) {
  std::vector<Image> images;
  images.reserve(scenes.size());
  for (const auto& s : scenes) images.push_back(synth_scene(s).image);
  return images;
}

}  // namespace

std::string_view to_string(EvalFamily f) {
  switch (f) {
    case EvalFamily::CrossImageMatch: return "cross-image-match";
    case EvalFamily::Counting: return "counting";
    case EvalFamily::Comparison: return "comparison";
  }
  return "?";
}

EvalFamily eval_family_from_string(std::string_view name) {
  for (EvalFamily f : kEvalFamilies) {
    if (to_string(f) == name) return f;
  }
  throw std::invalid_argument("unknown eval family: " + std::string(name));
}

TaskType task_for(EvalFamily f) {
  switch (f) {
    case EvalFamily::CrossImageMatch: return TaskType::CoReference;
    case EvalFamily::Counting: return TaskType::Reason;
    case EvalFamily::Comparison: return TaskType::Comparison;
  }
  throw std::invalid_argument("bad eval family");
}

void to_json(nlohmann::json& j, const EvalTask& t) {
  j = {{"family", std::string(to_string(t.family))},
       {"count", t.count},
       {"seed", t.seed},
       {"image_size", t.scenes.image_size},
       {"cell", t.scenes.cell},
       {"coreference_candidates", t.scenes.coreference_candidates}};
}

void from_json(const nlohmann::json& j, EvalTask& t) {
  t = EvalTask{};
  if (j.contains("family")) t.family = eval_family_from_string(j.at("family").get<std::string>());
  t.count = j.value("count", t.count);
  t.seed = j.value("seed", t.seed);
  t.scenes.image_size = j.value("image_size", t.scenes.image_size);
  t.scenes.cell = j.value("cell", t.scenes.cell);
  t.scenes.coreference_candidates = j.value("coreference_candidates", t.scenes.coreference_candidates);
}

std::vector<std::string> answer_choices(EvalFamily family, const SceneOptions& scenes) {
  switch (family) {
    case EvalFamily::CrossImageMatch: {
      std::vector<std::string> out;
      for (int k = 1; k <= scenes.coreference_candidates; ++k) out.push_back("image " + std::to_string(k));
      return out;
    }
    case EvalFamily::Counting: return {"zero", "one", "two", "three", "four"};
    case EvalFamily::Comparison: return {"yes", "no"};
  }
  return {};
}

std::vector<TaskInstance> eval_instances(const EvalTask& task) {
  std::vector<TaskInstance> out;
  out.reserve(task.count);
  for (std::size_t i = 0; i < task.count; ++i) out.push_back(make_instance(task_for(task.family), task.seed, i, task.scenes));
  return out;
}

EvalResult evaluate(const Weights<float>& weights, const Vocabulary& vocab, const EvalTask& task,
                    const EvalOptions& options, const PickerFactory& pickers) {
  EvalResult result;
  result.family = task.family;
  result.seed = task.seed;
  result.rifrem = options.rifrem.enabled && !options.rifrem.layers.empty();
  GenerationOptions gen;
  gen.rifrem = options.rifrem;
  gen.step_budget = options.step_budget;
  gen.min_side = options.min_side;
  gen.suppress_trigger = options.suppress_trigger;
  gen.record_timings = false;
  for (const TaskInstance& inst : eval_instances(task)) {
    EvalItem item;
    item.id = inst.id;
    item.gold = inst.gold_answer;
    try {
      std::unique_ptr<TokenPicker> picker = pickers ? pickers(inst) : std::make_unique<GreedyPicker>();
      const GenerationResult r = generate(weights, vocab, render(inst.scenes), inst.question, *picker, gen);
      item.predicted = r.answer;
      item.correct = !r.answer.empty() && r.answer == inst.gold_answer;
      if (options.keep_transcripts) item.transcript = transcript_json(r, vocab);
    } catch (const std::exception& e) {
      item.error = e.what();
    }
    result.correct += item.correct;
    result.items.push_back(std::move(item));
  }
  result.total = result.items.size();
  result.accuracy = result.total == 0 ? 0.0 : static_cast<double>(result.correct) / static_cast<double>(result.total);
  return result;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<TokenId> picker_script(const InterleavedSequence& chain, const Vocabulary& vocab) {
  const TokenId vs = vocab.special(Special::VisionStart), ve = vocab.special(Special::VisionEnd);
  std::vector<TokenId> out;
  bool inside = false;
  for (TokenId t : serialize_sequence(chain, vocab)) {
    if (!inside) out.push_back(t);
    if (t == vs) inside = true;
    if (t == ve) inside = false;
  }
  return out;
}

std::vector<WorkloadItem> grounding_workload(const WorkloadSpec& spec, const Vocabulary& vocab) {
  if (spec.items == 0 || spec.groundings == 0) throw std::invalid_argument("workload: items and groundings must be > 0");
  SceneOptions scenes;
  scenes.image_size = spec.image_size;
  std::vector<WorkloadItem> out;
  for (std::size_t i = 0; i < spec.items; ++i) {
    const TaskInstance inst = make_instance(TaskType::Caption, spec.seed, i, scenes);
    WorkloadItem item;
    item.images = render(inst.scenes);
    item.question = inst.question;
    const PatchGrid grid = patch_grid(spec.image_size, spec.image_size, kDefaultPatch);
    InterleavedSequence chain;
    for (std::size_t g = 0; g < spec.groundings; ++g) {
      chain.text(vocab.encode(g == 0 ? "Image 0 has the whole image" : " and the whole image"))
          .image(0)
          .box({0, 0, 1000, 1000})
          .vision(static_cast<std::uint32_t>(grid.count()));
    }
    chain.text(vocab.encode(". Answer: " + inst.gold_answer));
    item.script = picker_script(chain, vocab);
    out.push_back(std::move(item));
  }
  return out;
}

RifremConfig group_config(int group, int layers, std::string* warning) {
  if (group == 0) return {{}, false, false};
  if (group < 0 || group > 5) throw std::invalid_argument("ablation group must be in 0..5");
  return {select_layer_group(group, layers, warning), true, false};
}

std::vector<GroupSummary> AblationReport::summary() const {
  std::vector<GroupSummary> out;
  for (const AblationRow& r : rows) {
    if (std::none_of(out.begin(), out.end(), [&](const GroupSummary& s) { return s.group == r.group; })) {
      out.push_back({r.group, r.active_layers, 0.0, std::nullopt});
    }
  }
  for (GroupSummary& s : out) {
    std::vector<double> lat;
    double acc = 0.0;
    std::size_t acc_n = 0;
    for (const AblationRow& r : rows) {
      if (r.group != s.group) continue;
      lat.push_back(r.latency_ms);
      if (r.accuracy) {
        acc += *r.accuracy;
        ++acc_n;
      }
    }
    std::sort(lat.begin(), lat.end());
    const std::size_t n = lat.size();
    s.median_latency_ms = n % 2 == 1 ? lat[n / 2] : (lat[n / 2 - 1] + lat[n / 2]) / 2.0;
    if (acc_n > 0) s.mean_accuracy = acc / static_cast<double>(acc_n);
  }
  return out;
}

AblationReport run_ablation(const Weights<float>& weights, const Vocabulary& vocab,
                            const std::vector<WorkloadItem>& workload, const AblationOptions& options) {
  if (options.repeats <= 0) throw std::invalid_argument("ablation: repeats must be positive");
  if (workload.empty()) throw std::invalid_argument("ablation: empty workload");
  if (options.groups.empty()) throw std::invalid_argument("ablation: no groups");
  if (options.warmup_tokens < 0 || options.min_tokens <= 0) throw std::invalid_argument("ablation: bad token counts");
  AblationReport report;
  std::vector<RifremConfig> configs;
  for (int g : options.groups) {
    std::string warning;
    configs.push_back(group_config(g, weights.config.layers, &warning));
    if (!warning.empty()) report.warnings.push_back("group " + std::to_string(g) + ": " + warning);
  }

  // Sessions of all groups advance one token each in turn, so machine noise
  // is shared across groups instead of landing on whichever ran at the time.
  const std::size_t ng = options.groups.size();
  std::vector<AblationRow> rows;
  for (int rep = 0; rep < options.repeats; ++rep) {
    std::vector<std::vector<double>> micros(ng);
    for (const WorkloadItem& item : workload) {
      std::vector<std::unique_ptr<ScriptedPicker>> pickers;
      std::vector<std::unique_ptr<GenerationSession>> sessions;
      for (std::size_t gi = 0; gi < ng; ++gi) {
        GenerationOptions gen;
        gen.rifrem = configs[gi];
        gen.min_side = options.min_side;
        gen.step_budget = static_cast<int>(item.script.size()) + 1;
        gen.record_timings = true;
        pickers.push_back(std::make_unique<ScriptedPicker>(item.script));
        sessions.push_back(
            std::make_unique<GenerationSession>(weights, vocab, item.images, item.question, *pickers.back(), gen));
        sessions.back()->prefill();
      }
      std::vector<bool> live(ng, true);
      for (bool any = true; any;) {
        any = false;
        for (std::size_t gi = 0; gi < ng; ++gi) {
          if (live[gi]) any |= (live[gi] = sessions[gi]->step());
        }
      }
      for (std::size_t gi = 0; gi < ng; ++gi) {
        const GenerationResult r = sessions[gi]->run();
        if (!r.diagnostics.empty()) throw std::runtime_error("ablation workload: " + r.diagnostics.front());
        for (const StepRecord& st : r.steps) micros[gi].push_back(st.micros);
      }
    }
    for (std::size_t gi = 0; gi < ng; ++gi) {
      AblationRow row;
      row.group = options.groups[gi];
      row.active_layers = static_cast<int>(configs[gi].enabled ? configs[gi].layers.size() : 0);
      row.repeat = rep;
      row.seed = options.seed + static_cast<std::uint64_t>(rep);
      const auto& m = micros[gi];
      if (m.size() < static_cast<std::size_t>(options.warmup_tokens + options.min_tokens)) {
        throw std::invalid_argument("ablation: workload has " + std::to_string(m.size()) +
                                    " tokens, need warmup + " + std::to_string(options.min_tokens));
      }
      double total = 0.0;
      for (std::size_t i = static_cast<std::size_t>(options.warmup_tokens); i < m.size(); ++i) total += m[i];
      row.tokens = m.size() - static_cast<std::size_t>(options.warmup_tokens);
      row.latency_ms = total / static_cast<double>(row.tokens) / 1000.0;
      if (options.accuracy_task) {
        EvalTask task = *options.accuracy_task;
        task.seed = row.seed;
        EvalOptions eo;
        eo.rifrem = configs[gi];
        eo.min_side = options.min_side;
        row.accuracy = evaluate(weights, vocab, task, eo).accuracy;
      }
      rows.push_back(row);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [&](const AblationRow& a, const AblationRow& b) {
    const auto ia = std::find(options.groups.begin(), options.groups.end(), a.group);
    const auto ib = std::find(options.groups.begin(), options.groups.end(), b.group);
    return ia != ib ? ia < ib : a.repeat < b.repeat;
  });
  report.rows = std::move(rows);
  return report;
}

// ---------------------------------------------------------------------------
// Reports

namespace {
constexpr std::string_view kAblationHeader = "group,active_layers,repeat,seed,latency_ms,tokens,accuracy";
constexpr std::string_view kEvalHeader = "family,rifrem,seed,total,correct,accuracy";
}  // namespace

void write_ablation_csv(const AblationReport& report, const std::filesystem::path& path) {
  if (report.rows.empty()) throw std::invalid_argument("ablation report is empty");
  std::ofstream out = open_out(path);
  out << kAblationHeader << '\n';
  for (const AblationRow& r : report.rows) {
    out << r.group << ',' << r.active_layers << ',' << r.repeat << ',' << r.seed << ',' << r.latency_ms << ','
        << r.tokens << ',';
    if (r.accuracy) out << *r.accuracy;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

AblationReport read_ablation_csv(const std::filesystem::path& path) {
  AblationReport report;
  for (const auto& c : read_rows(path, kAblationHeader)) {
    AblationRow r;
    r.group = parse_number<int>(c[0], path);
    r.active_layers = parse_number<int>(c[1], path);
    r.repeat = parse_number<int>(c[2], path);
    r.seed = parse_number<std::uint64_t>(c[3], path);
    r.latency_ms = parse_number<double>(c[4], path);
    r.tokens = parse_number<std::size_t>(c[5], path);
    if (!c[6].empty()) r.accuracy = parse_number<double>(c[6], path);
    report.rows.push_back(r);
  }
  return report;
}

void write_eval_csv(const std::vector<EvalResult>& results, const std::filesystem::path& path) {
  if (results.empty()) throw std::invalid_argument("evaluation report is empty");
  std::ofstream out = open_out(path);
  out << kEvalHeader << '\n';
  for (const EvalResult& r : results) {
    out << to_string(r.family) << ',' << (r.rifrem ? "on" : "off") << ',' << r.seed << ',' << r.total << ','
        << r.correct << ',' << r.accuracy << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<EvalResult> read_eval_csv(const std::filesystem::path& path) {
  std::vector<EvalResult> out;
  for (const auto& c : read_rows(path, kEvalHeader)) {
    EvalResult r;
    r.family = eval_family_from_string(c[0]);
    if (c[1] != "on" && c[1] != "off") throw std::runtime_error(path.string() + ": rifrem must be on or off");
    r.rifrem = c[1] == "on";
    r.seed = parse_number<std::uint64_t>(c[2], path);
    r.total = parse_number<std::size_t>(c[3], path);
    r.correct = parse_number<std::size_t>(c[4], path);
    r.accuracy = parse_number<double>(c[5], path);
    out.push_back(r);
  }
  return out;
}

}  // namespace cmmcot
