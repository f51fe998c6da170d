#include "cmmcot/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "cmmcot/random.hpp"

namespace cmmcot {

namespace {

constexpr std::array<std::string_view, 5> kNumberWords = {"zero", "one", "two", "three", "four"};

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Text between `before` and `after` in `s`, or empty.
std::string between(std::string_view s, std::string_view before, std::string_view after) {
  const auto a = s.find(before);
  if (a == std::string_view::npos) return {};
  const auto start = a + before.size();
  const auto b = s.find(after, start);
  if (b == std::string_view::npos) return {};
  return std::string(s.substr(start, b - start));
}

std::string mention(const std::string& entity, std::size_t image) {
  return "the " + entity + " in image " + std::to_string(image);
}

// Shapes in reading order (top to bottom, then left to right).
std::vector<ShapeSpec> reading_order(const SceneSpec& scene) {
  std::vector<ShapeSpec> shapes = scene.shapes;
  std::stable_sort(shapes.begin(), shapes.end(), [](const ShapeSpec& a, const ShapeSpec& b) {
    return std::pair(a.y, a.x) < std::pair(b.y, b.x);
  });
  return shapes;
}

const ShapeSpec* find_kind(const SceneSpec& scene, std::string_view kind) {
  for (const auto& s : scene.shapes)
    if (to_string(s.kind) == kind) return &s;
  return nullptr;
}

std::string normalize_answer(std::string_view s) {
  std::string out;
  for (char c : s) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  while (!out.empty() && (out.back() == ' ' || out.back() == '.')) out.pop_back();
  while (!out.empty() && out.front() == ' ') out.erase(out.begin());
  return out;
}

std::string task_slug(TaskType t) {
  switch (t) {
    case TaskType::Caption: return "caption";
    case TaskType::CoReference: return "coreference";
    case TaskType::Comparison: return "comparison";
    case TaskType::Reason: return "reason";
  }
  return "unknown";
}

}  // namespace

std::string_view to_string(TaskType t) {
  switch (t) {
    case TaskType::Caption: return "Caption";
    case TaskType::CoReference: return "Co-reference";
    case TaskType::Comparison: return "Comparison";
    case TaskType::Reason: return "Reason";
  }
  return "?";
}

TaskType task_type_from_string(std::string_view name) {
  for (TaskType t : kTaskTypes)
    if (to_string(t) == name || task_slug(t) == name) return t;
  throw std::invalid_argument("unknown task type '" + std::string(name) + "'");
}

std::map<TaskType, int> reference_task_mix() {
  return {{TaskType::Caption, 50}, {TaskType::CoReference, 90}, {TaskType::Comparison, 18}, {TaskType::Reason, 102}};
}

std::map<TaskType, int> scaled_task_mix(double scale) {
  if (!(scale >= 0.0)) throw std::invalid_argument("scaled_task_mix: scale must be >= 0");
  std::map<TaskType, int> out;
  for (const auto& [t, n] : reference_task_mix()) out[t] = static_cast<int>(round_half_away(n * scale));
  return out;
}

// ---------------------------------------------------------------------------

double iou(const BoundingBox& a, const BoundingBox& b) {
  auto area = [](const BoundingBox& x) {
    return static_cast<long long>(x.x1 - x.x0) * static_cast<long long>(x.y1 - x.y0);
  };
  const long long iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const long long ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const long long inter = iw * ih;
  const long long uni = area(a) + area(b) - inter;
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BoundingBox fuse_boxes(std::span<const BoundingBox> boxes) {
  if (boxes.empty()) throw std::invalid_argument("fuse_boxes: no boxes");
  BoundingBox out = boxes[0];
  for (const auto& b : boxes.subspan(1)) {
    out.x0 = std::min(out.x0, b.x0);
    out.y0 = std::min(out.y0, b.y0);
    out.x1 = std::max(out.x1, b.x1);
    out.y1 = std::max(out.y1, b.y1);
  }
  return out;
}

std::vector<DetectionCandidate> validate_detections(std::vector<DetectionCandidate> candidates,
                                                    std::span<const BoundingBox> references, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("validate_detections: threshold outside (0, 1]");
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("validate_detections: one reference per candidate is required");
  }
  std::vector<DetectionCandidate> kept;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    candidates[i].iou = iou(candidates[i].box, references[i]);
    if (candidates[i].iou >= threshold) kept.push_back(std::move(candidates[i]));
  }
  return kept;
}

// ---------------------------------------------------------------------------

void MockErrorRates::validate() const {
  for (double r : {wrong_first, wrong_second, failure, bad_detection, extra_detection}) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("mock error rates must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const MockErrorRates& r) {
  j = {{"wrong_first", r.wrong_first},
       {"wrong_second", r.wrong_second},
       {"failure", r.failure},
       {"bad_detection", r.bad_detection},
       {"extra_detection", r.extra_detection}};
}

void from_json(const nlohmann::json& j, MockErrorRates& r) {
  r.wrong_first = j.value("wrong_first", 0.0);
  r.wrong_second = j.value("wrong_second", 0.0);
  r.failure = j.value("failure", 0.0);
  r.bad_detection = j.value("bad_detection", 0.0);
  r.extra_detection = j.value("extra_detection", 0.0);
  r.validate();
}

std::vector<BoundingBox> entity_boxes(const SceneSpec& scene, std::string_view entity) {
  const Scene rendered = synth_scene([&] {
    SceneSpec s = scene;
    s.noise = 0.0f;
    return s;
  }());
  std::vector<BoundingBox> out;
  for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
    if (scene.shapes[i].entity_name() == entity) {
      out.push_back(normalize_box(rendered.boxes[i], scene.width, scene.height));
    }
  }
  return out;
}

namespace {

RationaleDraft caption_rationale(const AnnotationRequest& r, bool corrupt) {
  std::vector<std::string> names;
  for (const auto& s : reading_order(r.scenes.at(0))) names.push_back(s.entity_name());
  if (corrupt) {
    if (names.size() > 1) {
      names.pop_back();
    } else {
      const std::string kind(names[0].substr(names[0].find(' ') + 1));
      names[0] = (names[0].rfind("red", 0) == 0 ? "green " : "red ") + kind;
    }
  }
  std::vector<std::string> mentions;
  for (const auto& n : names) mentions.push_back(mention(n, 0));
  const std::string answer = join(names, " and ");
  return {"Image 0 has " + join(mentions, " and ") + ". Answer: " + answer, answer};
}

RationaleDraft coreference_rationale(const AnnotationRequest& r, bool corrupt) {
  const std::string target = between(r.question, "has the ", " from image 0");
  if (target.empty()) throw AnnotatorError("unrecognized co-reference question");
  std::size_t match = 0;
  for (std::size_t k = 1; k < r.scenes.size(); ++k) {
    for (const auto& s : r.scenes[k].shapes)
      if (s.entity_name() == target && match == 0) match = k;
  }
  if (match == 0) throw AnnotatorError("target absent from the other images");
  if (corrupt) match = match == 1 ? 2 : 1;
  const std::string answer = "image " + std::to_string(match);
  return {"The " + target + " in image 0 matches " + mention(target, match) + ". Answer: " + answer, answer};
}

RationaleDraft comparison_rationale(const AnnotationRequest& r, bool corrupt) {
  const std::string a = between(r.question, "Do the ", " in image 0");
  const std::string b = between(r.question, "and the ", " in image 1");
  const ShapeSpec* sa = find_kind(r.scenes.at(0), a);
  const ShapeSpec* sb = find_kind(r.scenes.at(1), b);
  if (!sa || !sb) throw AnnotatorError("unrecognized comparison question");
  bool same = sa->color == sb->color;
  if (corrupt) same = !same;
  const std::string answer = same ? "yes" : "no";
  return {"The " + sa->entity_name() + " in image 0 and " + mention(sb->entity_name(), 1) +
              (same ? " have the same color" : " have different colors") + ". Answer: " + answer,
          answer};
}

RationaleDraft reason_rationale(const AnnotationRequest& r, bool corrupt) {
  const std::string color = between(r.question, "How many ", " shapes");
  if (color.empty()) throw AnnotatorError("unrecognized counting question");
  std::vector<std::string> mentions;
  for (std::size_t k = 0; k < r.scenes.size(); ++k) {
    for (const auto& s : reading_order(r.scenes[k]))
      if (s.color == color) mentions.push_back(mention(s.entity_name(), k));
  }
  std::size_t count = mentions.size();
  if (corrupt) count = count + 1 < kNumberWords.size() ? count + 1 : count - 1;
  if (count >= kNumberWords.size()) throw AnnotatorError("count out of range");
  const std::string word(kNumberWords[count]);
  const std::string seen = mentions.empty() ? "no " + color + " shapes" : join(mentions, " and ");
  return {"We see " + seen + ", so the total is " + word + ". Answer: " + word, word};
}

RationaleDraft rationale_for(const AnnotationRequest& r, bool corrupt) {
  switch (r.task) {
    case TaskType::Caption: return caption_rationale(r, corrupt);
    case TaskType::CoReference: return coreference_rationale(r, corrupt);
    case TaskType::Comparison: return comparison_rationale(r, corrupt);
    case TaskType::Reason: return reason_rationale(r, corrupt);
  }
  throw AnnotatorError("unknown task");
}

}  // namespace

RationaleDraft reference_rationale(const TaskInstance& instance) { return rationale_for(instance.request(), false); }
RationaleDraft corrupted_rationale(const TaskInstance& instance) { return rationale_for(instance.request(), true); }

MockAnnotator::MockAnnotator(std::uint64_t seed, MockErrorRates rates) : seed_(seed), rates_(rates) {
  rates_.validate();
}

double MockAnnotator::draw(const AnnotationRequest& request, std::string_view what) const {
  Rng rng(mix_seed(seed_, hash_string(what, hash_string(request.id))));
  return rng.uniform();
}

RationaleDraft MockAnnotator::generate_rationale(const AnnotationRequest& request,
                                                 const std::optional<std::string>& gold_answer) {
  ++calls_.rationale;
  const std::string pass = gold_answer ? "second" : "first";
  if (draw(request, "failure/" + pass) < rates_.failure) throw AnnotatorError("mock annotator failure");
  const double wrong = gold_answer ? rates_.wrong_second : rates_.wrong_first;
  return rationale_for(request, draw(request, "wrong/" + pass) < wrong);
}

std::vector<std::string> MockAnnotator::extract_entities(const AnnotationRequest&, std::string_view dialogue) {
  ++calls_.extraction;
  std::vector<std::pair<std::size_t, std::string>> found;
  for (const auto& c : palette()) {
    for (ShapeKind k : {ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle}) {
      const std::string name = std::string(c.name) + " " + std::string(to_string(k));
      for (auto at = dialogue.find(name); at != std::string_view::npos; at = dialogue.find(name, at + 1)) {
        const std::size_t end = at + name.size();
        const bool left_ok = at == 0 || dialogue[at - 1] == ' ';
        const bool right_ok = end == dialogue.size() || !std::isalpha(static_cast<unsigned char>(dialogue[end]));
        if (left_ok && right_ok) found.emplace_back(at, name);
      }
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<std::string> out;
  for (const auto& [pos, name] : found)
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
  return out;
}

std::vector<BoundingBox> MockAnnotator::detect(const AnnotationRequest& request, std::string_view entity,
                                               std::uint32_t image) {
  ++calls_.detection;
  if (image >= request.scenes.size()) throw AnnotatorError("detect: image index out of range");
  std::vector<BoundingBox> out;
  const std::string key = std::string(entity) + "/" + std::to_string(image);
  auto clamp_shift = [](BoundingBox b, int dx, int dy) {
    dx = std::clamp(dx, -b.x0, kCoordMax - b.x1);
    dy = std::clamp(dy, -b.y0, kCoordMax - b.y1);
    return BoundingBox{b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy};
  };
  for (const BoundingBox& b : entity_boxes(request.scenes[image], entity)) {
    const int w = b.x1 - b.x0;
    if (draw(request, "bad/" + key) < rates_.bad_detection) {
      // Displaced by a quarter of its width: IoU 0.6, below any usual gate.
      const int shift = std::max(1, w / 4);
      BoundingBox moved = clamp_shift(b, shift, 0);
      if (moved == b) moved = clamp_shift(b, -shift, 0);
      out.push_back(moved);
    } else {
      out.push_back(b);
    }
    if (draw(request, "extra/" + key) < rates_.extra_detection) {
      const int s = std::max(1, w / 50);
      out.push_back(clamp_shift(b, s, s));
    }
  }
  return out;
}

bool MockAnnotator::judge_answer(std::string_view predicted, std::string_view gold) {
  ++calls_.judge;
  return normalize_answer(predicted) == normalize_answer(gold);
}

// ---------------------------------------------------------------------------

namespace {

struct Entity {
  ShapeKind kind;
  std::string color;
  std::string name() const { return color + " " + std::string(to_string(kind)); }
  bool operator==(const Entity&) const = default;
};

Entity random_entity(Rng& rng, const SceneOptions& o) {
  return {static_cast<ShapeKind>(rng.range(0, 2)), o.colors[rng.index(o.colors.size())]};
}

Entity random_entity_except(Rng& rng, const SceneOptions& o, const std::vector<Entity>& avoid) {
  for (;;) {
    Entity e = random_entity(rng, o);
    if (std::find(avoid.begin(), avoid.end(), e) == avoid.end()) return e;
  }
}

SceneSpec place(Rng& rng, const SceneOptions& o, const std::vector<Entity>& entities) {
  const int per_side = o.image_size / o.cell;
  std::vector<int> cells(static_cast<std::size_t>(per_side * per_side));
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  rng.shuffle(cells);
  if (entities.size() > cells.size()) throw std::invalid_argument("scene too small for its shapes");
  SceneSpec spec;
  spec.width = o.image_size;
  spec.height = o.image_size;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    const int c = cells[i];
    spec.shapes.push_back({entities[i].kind, entities[i].color, (c % per_side) * o.cell, (c / per_side) * o.cell, o.cell});
  }
  return spec;
}

}  // namespace

TaskInstance make_instance(TaskType task, std::uint64_t seed, std::size_t index, const SceneOptions& o) {
  if (o.colors.size() < 2 || o.cell < 1 || o.image_size < o.cell || o.coreference_candidates < 2) {
    throw std::invalid_argument("bad scene options");
  }
  Rng rng(mix_seed(mix_seed(seed, hash_string(task_slug(task))), index));
  std::ostringstream id;
  id << task_slug(task) << "-" << std::setw(6) << std::setfill('0') << index;
  TaskInstance inst;
  inst.id = id.str();
  inst.task = task;
  switch (task) {
    case TaskType::Caption: {
      std::vector<Entity> es{random_entity(rng, o)};
      if (rng.bernoulli(0.5)) es.push_back(random_entity_except(rng, o, es));
      inst.scenes = {place(rng, o, es)};
      inst.question = "Describe image 0.";
      break;
    }
    case TaskType::CoReference: {
      const Entity target = random_entity(rng, o);
      const int candidates = o.coreference_candidates;
      const std::size_t match = static_cast<std::size_t>(rng.range(1, candidates));
      inst.scenes.resize(static_cast<std::size_t>(candidates) + 1);
      for (std::size_t k = 0; k < inst.scenes.size(); ++k) {
        std::vector<Entity> es;
        if (k == 0 || k == match) es.push_back(target);
        const int extra = k == 0 || k == match ? rng.range(0, 1) : rng.range(1, 2);
        for (int e = 0; e < extra; ++e) {
          std::vector<Entity> avoid = es;
          avoid.push_back(target);
          es.push_back(random_entity_except(rng, o, avoid));
        }
        inst.scenes[k] = place(rng, o, es);
      }
      inst.question = "Which image also has the " + target.name() + " from image 0?";
      break;
    }
    case TaskType::Comparison: {
      const auto ka = static_cast<ShapeKind>(rng.range(0, 2));
      const auto kb = static_cast<ShapeKind>(rng.range(0, 2));
      const std::string ca = o.colors[rng.index(o.colors.size())];
      std::string cb = ca;
      if (rng.bernoulli(0.5)) {
        while (cb == ca) cb = o.colors[rng.index(o.colors.size())];
      }
      auto scene_with = [&](ShapeKind kind, const std::string& color) {
        std::vector<Entity> es{{kind, color}};
        if (rng.bernoulli(0.5)) {
          Entity d = random_entity(rng, o);
          while (d.kind == kind) d = random_entity(rng, o);
          es.push_back(d);
        }
        return place(rng, o, es);
      };
      inst.scenes = {scene_with(ka, ca), scene_with(kb, cb)};
      inst.question = "Do the " + std::string(to_string(ka)) + " in image 0 and the " + std::string(to_string(kb)) +
                      " in image 1 have the same color?";
      break;
    }
    case TaskType::Reason: {
      inst.scenes.resize(2);
      std::vector<Entity> all;
      for (auto& scene : inst.scenes) {
        std::vector<Entity> es{random_entity(rng, o)};
        if (rng.bernoulli(0.5)) es.push_back(random_entity_except(rng, o, es));
        all.insert(all.end(), es.begin(), es.end());
        scene = place(rng, o, es);
      }
      const std::string color =
          rng.bernoulli(0.8) ? all[rng.index(all.size())].color : o.colors[rng.index(o.colors.size())];
      inst.question = "How many " + color + " shapes are there in all images?";
      break;
    }
  }
  inst.gold_answer = reference_rationale(inst).answer;
  return inst;
}

std::string_view to_string(BuildOutcome o) {
  switch (o) {
    case BuildOutcome::Retained: return "retained";
    case BuildOutcome::Refined: return "refined";
    case BuildOutcome::Rejected: return "rejected";
    case BuildOutcome::Unprocessed: return "unprocessed";
  }
  return "?";
}

BuildResult build_rationale(const AnnotationRequest& request, const std::string& gold_answer, AnnotatorClient& client) {
  BuildResult out;
  try {
    ++out.client_calls;
    out.draft = client.generate_rationale(request, std::nullopt);
    if (client.judge_answer(out.draft.answer, gold_answer)) {
      out.outcome = BuildOutcome::Retained;
      return out;
    }
    ++out.client_calls;
    out.draft = client.generate_rationale(request, gold_answer);
    if (client.judge_answer(out.draft.answer, gold_answer)) {
      out.outcome = BuildOutcome::Refined;
      return out;
    }
    out.outcome = BuildOutcome::Rejected;
    out.reason = "answer judged incorrect after the gold-guided retry";
  } catch (const AnnotatorError& e) {
    out.outcome = BuildOutcome::Unprocessed;
    out.reason = e.what();
  }
  return out;
}

InterleavedSequence ground_rationale(const TaskInstance& instance, const RationaleDraft& draft,
                                     AnnotatorClient& client, const Vocabulary& vocab,
                                     const GroundingOptions& options, GroundingReport* report) {
  const AnnotationRequest request = instance.request();
  GroundingReport local;
  std::map<std::pair<std::string, std::uint32_t>, BoundingBox> grounded;
  for (const std::string& entity : client.extract_entities(request, draft.text)) {
    for (std::uint32_t k = 0; k < instance.scenes.size(); ++k) {
      const std::vector<BoundingBox> boxes = client.detect(request, entity, k);
      if (boxes.empty()) continue;
      const std::vector<BoundingBox> truth = entity_boxes(instance.scenes[k], entity);
      std::vector<DetectionCandidate> candidates;
      std::vector<BoundingBox> references;
      for (const auto& b : boxes) {
        // Each detection is checked against the closest ground-truth box.
        BoundingBox ref{0, 0, 0, 0};
        double best = -1.0;
        for (const auto& t : truth) {
          const double v = iou(b, t);
          if (v > best) {
            best = v;
            ref = t;
          }
        }
        candidates.push_back({entity, k, b, 0.0});
        references.push_back(ref);
      }
      local.candidates += candidates.size();
      const auto kept = validate_detections(std::move(candidates), references, options.iou_threshold);
      local.retained += kept.size();
      if (kept.empty()) continue;
      std::vector<BoundingBox> kept_boxes;
      for (const auto& c : kept) kept_boxes.push_back(c.box);
      if (kept_boxes.size() > 1) ++local.fused;
      grounded[{entity, k}] = fuse_boxes(kept_boxes);
    }
  }

  // Anchors: "<entity> in image k" phrases with a validated box.
  struct Anchor {
    std::size_t end;
    std::uint32_t image;
    BoundingBox box;
  };
  std::vector<Anchor> anchors;
  for (const auto& [key, box] : grounded) {
    const std::string phrase = key.first + " in image " + std::to_string(key.second);
    const std::string_view text = draft.text;
    for (auto at = text.find(phrase); at != std::string_view::npos; at = text.find(phrase, at + 1)) {
      const std::size_t end = at + phrase.size();
      if (end < text.size() && std::isdigit(static_cast<unsigned char>(text[end]))) continue;
      anchors.push_back({end, key.second, box});
    }
  }
  std::sort(anchors.begin(), anchors.end(), [](const Anchor& a, const Anchor& b) { return a.end < b.end; });

  InterleavedSequence chain;
  std::size_t pos = 0;
  for (const auto& a : anchors) {
    if (a.end > pos) chain.text(vocab.encode(std::string_view(draft.text).substr(pos, a.end - pos)));
    pos = a.end;
    const SceneSpec& scene = instance.scenes[a.image];
    const PixelBox px = denormalize_box(a.box, scene.width, scene.height);
    const auto [h, w] = crop_output_size(px.height(), px.width(), options.min_side);
    const PatchGrid grid = patch_grid(h, w, options.patch);
    chain.image(a.image).box(a.box).vision(static_cast<std::uint32_t>(grid.count()));
    ++local.grounded_mentions;
  }
  if (pos < draft.text.size()) chain.text(vocab.encode(std::string_view(draft.text).substr(pos)));
  validate_sequence(chain, vocab, {.image_count = instance.scenes.size()});
  if (report) *report = local;
  return chain;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const CorpusRequest& r) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [t, n] : r.counts) counts[std::string(to_string(t))] = n;
  j = {{"counts", counts},
       {"seed", r.seed},
       {"image_size", r.scenes.image_size},
       {"cell", r.scenes.cell},
       {"colors", r.scenes.colors},
       {"coreference_candidates", r.scenes.coreference_candidates},
       {"iou_threshold", r.grounding.iou_threshold},
       {"patch", r.grounding.patch},
       {"min_side", r.grounding.min_side},
       {"max_attempts_per_instance", r.max_attempts_per_instance}};
}

void from_json(const nlohmann::json& j, CorpusRequest& r) {
  r = CorpusRequest{};
  if (j.contains("counts")) {
    for (const auto& [name, n] : j.at("counts").items()) r.counts[task_type_from_string(name)] = n.get<int>();
  }
  r.seed = j.value("seed", r.seed);
  r.scenes.image_size = j.value("image_size", r.scenes.image_size);
  r.scenes.cell = j.value("cell", r.scenes.cell);
  r.scenes.colors = j.value("colors", r.scenes.colors);
  r.scenes.coreference_candidates = j.value("coreference_candidates", r.scenes.coreference_candidates);
  r.grounding.iou_threshold = j.value("iou_threshold", r.grounding.iou_threshold);
  r.grounding.patch = j.value("patch", r.grounding.patch);
  r.grounding.min_side = j.value("min_side", r.grounding.min_side);
  r.max_attempts_per_instance = j.value("max_attempts_per_instance", r.max_attempts_per_instance);
}

CorpusResult assemble_corpus(const CorpusRequest& request, AnnotatorClient& client, const Vocabulary& vocab) {
  if (request.max_attempts_per_instance < 1) throw std::invalid_argument("max_attempts_per_instance must be >= 1");
  CorpusResult out;
  for (TaskType task : kTaskTypes) {
    const auto it = request.counts.find(task);
    const int wanted = it == request.counts.end() ? 0 : it->second;
    if (wanted < 0) throw std::invalid_argument("negative instance count");
    const std::size_t budget = static_cast<std::size_t>(wanted) * static_cast<std::size_t>(request.max_attempts_per_instance);
    int produced = 0;
    for (std::size_t index = 0; produced < wanted; ++index) {
      if (index >= budget) {
        throw InfeasibleRequest("could not build " + std::to_string(wanted) + " " + std::string(to_string(task)) +
                                " instances within " + std::to_string(budget) + " attempts");
      }
      const TaskInstance inst = make_instance(task, request.seed, index, request.scenes);
      const BuildResult built = build_rationale(inst.request(), inst.gold_answer, client);
      ++out.outcomes[built.outcome];
      if (built.outcome == BuildOutcome::Rejected || built.outcome == BuildOutcome::Unprocessed) {
        out.rejected.push_back({inst.id, task, built.outcome, built.reason});
        continue;
      }
      GroundingReport report;
      CorpusRecord rec;
      try {
        rec.chain = ground_rationale(inst, built.draft, client, vocab, request.grounding, &report);
      } catch (const AnnotatorError& e) {
        ++out.outcomes[BuildOutcome::Unprocessed];
        out.rejected.push_back({inst.id, task, BuildOutcome::Unprocessed, e.what()});
        continue;
      }
      out.grounding.candidates += report.candidates;
      out.grounding.retained += report.retained;
      out.grounding.fused += report.fused;
      out.grounding.grounded_mentions += report.grounded_mentions;
      rec.id = inst.id;
      rec.task = task;
      rec.scenes = inst.scenes;
      rec.question = inst.question;
      rec.answer = built.draft.answer;
      rec.provenance = {{"pipeline", "synthetic"},
                        {"seed", request.seed},
                        {"attempt", index},
                        {"filter", to_string(built.outcome)},
                        {"client_calls", built.client_calls},
                        {"detections", report.candidates},
                        {"retained_detections", report.retained},
                        {"fused_groups", report.fused},
                        {"grounded_mentions", report.grounded_mentions}};
      out.records.push_back(std::move(rec));
      ++produced;
    }
    out.stats.push_back({std::string(to_string(task)), "synthetic scenes", wanted});
  }
  long long total = 0;
  for (const auto& row : out.stats) total += row.instances;
  out.stats.push_back({"Total", "-", total});
  std::sort(out.records.begin(), out.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::sort(out.rejected.begin(), out.rejected.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

nlohmann::json record_to_json(const CorpusRecord& r, const Vocabulary& vocab) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : r.scenes) images.push_back(s);
  return {{"id", r.id},
          {"task_type", std::string(to_string(r.task))},
          {"images", images},
          {"question", r.question},
          {"chain", render_text(r.chain, vocab)},
          {"answer", r.answer},
          {"provenance", r.provenance}};
}

CorpusRecord record_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
  CorpusRecord r;
  r.id = j.at("id").get<std::string>();
  r.task = task_type_from_string(j.at("task_type").get<std::string>());
  for (const auto& s : j.at("images")) r.scenes.push_back(s.get<SceneSpec>());
  if (r.scenes.empty()) throw std::runtime_error("record " + r.id + " has no images");
  r.question = j.at("question").get<std::string>();
  r.chain = parse_text(j.at("chain").get<std::string>(), vocab, {.image_count = r.scenes.size()});
  r.answer = j.at("answer").get<std::string>();
  r.provenance = j.value("provenance", nlohmann::json::object());
  return r;
}

std::string stats_csv(const std::vector<StatsRow>& rows) {
  std::string out = "skill,source,instances\n";
  for (const auto& r : rows) out += r.skill + "," + r.source + "," + std::to_string(r.instances) + "\n";
  return out;
}

std::vector<StatsRow> parse_stats_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "skill,source,instances") throw std::runtime_error("stats csv: bad header");
  std::vector<StatsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find(',');
    const auto b = line.rfind(',');
    if (a == std::string::npos || a == b) throw std::runtime_error("stats csv: bad row '" + line + "'");
    rows.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1), std::stoll(line.substr(b + 1))});
  }
  return rows;
}

void write_corpus(const CorpusResult& corpus, const std::filesystem::path& dir, const Vocabulary& vocab,
                  bool write_images) {
  std::filesystem::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("corpus.jsonl");
    for (const auto& r : corpus.records) f << record_to_json(r, vocab).dump() << '\n';
  }
  {
    auto f = open("rejected.jsonl");
    for (const auto& r : corpus.rejected) {
      f << nlohmann::json{{"id", r.id},
                          {"task_type", std::string(to_string(r.task))},
                          {"outcome", std::string(to_string(r.outcome))},
                          {"reason", r.reason}}
               .dump()
        << '\n';
    }
  }
  open("stats.csv") << stats_csv(corpus.stats);
  if (write_images) {
    std::filesystem::create_directories(dir / "images");
    for (const auto& r : corpus.records) {
      for (std::size_t k = 0; k < r.scenes.size(); ++k) {
        write_png(synth_scene(r.scenes[k]).image, dir / "images" / (r.id + "_" + std::to_string(k) + ".png"));
      }
    }
  }
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& jsonl, const Vocabulary& vocab) {
  std::ifstream in(jsonl);
  if (!in) throw std::runtime_error("cannot read " + jsonl.string());
  std::vector<CorpusRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line), vocab));
    } catch (const std::exception& e) {
      throw std::runtime_error(jsonl.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<GeneralRecord> general_corpus(std::size_t count, std::uint64_t seed, const SceneOptions& o) {
  std::vector<GeneralRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(mix_seed(seed, hash_string("general")), i));
    std::ostringstream id;
    id << "general-" << std::setw(6) << std::setfill('0') << i;
    GeneralRecord r{id.str(), {}, {}};
    const Entity a = random_entity(rng, o);
    const Entity b = random_entity_except(rng, o, {a});
    if (rng.bernoulli(0.5)) {
      const bool first = rng.bernoulli(0.5);
      r.question = "The " + a.name() + " is in image 0 and the " + b.name() + " is in image 1. Which image has the " +
                   (first ? a : b).name() + "?";
      r.answer = first ? "image 0" : "image 1";
    } else {
      const int n0 = rng.range(0, 2);
      const int n1 = rng.range(0, 2);
      r.question = "Image 0 has " + std::string(kNumberWords[static_cast<std::size_t>(n0)]) + " shapes and image 1 has " +
                   std::string(kNumberWords[static_cast<std::size_t>(n1)]) + " shapes. How many shapes are there in all images?";
      r.answer = std::string(kNumberWords[static_cast<std::size_t>(n0 + n1)]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

void to_json(nlohmann::json& j, const GeneralRecord& r) {
  j = nlohmann::json{{"id", r.id}, {"question", r.question}, {"answer", r.answer}};
}

void from_json(const nlohmann::json& j, GeneralRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
}

void write_general(const std::vector<GeneralRecord>& records, const std::filesystem::path& jsonl) {
  if (jsonl.has_parent_path()) std::filesystem::create_directories(jsonl.parent_path());
  std::ofstream out(jsonl, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + jsonl.string());
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
}

std::vector<GeneralRecord> read_general(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw std::runtime_error("cannot read " + jsonl.string());
  std::vector<GeneralRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<GeneralRecord>());
    } catch (const std::exception& e) {
      throw std::runtime_error(jsonl.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cmmcot
