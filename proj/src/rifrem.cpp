#include "cmmcot/rifrem.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <set>

namespace cmmcot {

void MemoryBank::record(int layer, std::uint32_t image, MatrixF keys, MatrixF values) {
  if (sealed_) throw BankError(BankErrc::Sealed, "memory bank is sealed");
  if (layer < 0 || layer >= layers_) {
    throw BankError(BankErrc::LayerRange, "layer " + std::to_string(layer) + " outside the bank");
  }
  if (keys.rows() != values.rows() || keys.rows() < 1 || keys.cols() != dim_ || values.cols() != dim_) {
    throw BankError(BankErrc::ShapeMismatch, "key/value shapes do not match the bank");
  }
  const auto [it, inserted] = entries_.try_emplace({layer, image}, BankEntry{std::move(keys), std::move(values)});
  if (!inserted) {
    throw BankError(BankErrc::DuplicateEntry,
                    "entry (" + std::to_string(layer) + ", " + std::to_string(image) + ") already recorded");
  }
}

const BankEntry& MemoryBank::get(int layer, std::uint32_t image) const {
  const auto it = entries_.find({layer, image});
  if (it == entries_.end()) {
    throw BankError(BankErrc::MissingEntry,
                    "no entry for (" + std::to_string(layer) + ", " + std::to_string(image) + ")");
  }
  return it->second;
}

std::vector<std::uint32_t> MemoryBank::images() const {
  std::set<std::uint32_t> ids;
  for (const auto& [key, entry] : entries_) ids.insert(key.second);
  return {ids.begin(), ids.end()};
}

std::size_t MemoryBank::image_count() const { return images().size(); }

nlohmann::json MemoryBank::manifest() const {
  nlohmann::json entries = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& [key, e] : entries_) {
    const std::size_t bytes = static_cast<std::size_t>(e.keys.size() + e.values.size()) * sizeof(float);
    total += bytes;
    entries.push_back({{"layer", key.first},
                       {"image", key.second},
                       {"tokens", e.keys.rows()},
                       {"keys_shape", {e.keys.rows(), e.keys.cols()}},
                       {"values_shape", {e.values.rows(), e.values.cols()}},
                       {"bytes", bytes}});
  }
  return {{"layers", layers_}, {"dim", dim_},       {"images", image_count()},
          {"sealed", sealed_}, {"total_bytes", total}, {"entries", std::move(entries)}};
}

void MemoryBank::export_tensors(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto put = [&](const MatrixF& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(m.data()[i]);
      const char bytes[4] = {static_cast<char>(bits), static_cast<char>(bits >> 8), static_cast<char>(bits >> 16),
                             static_cast<char>(bits >> 24)};
      out.write(bytes, 4);
    }
  };
  for (const auto& [key, e] : entries_) {
    put(e.keys);
    put(e.values);
  }
}

// ---------------------------------------------------------------------------

bool RifremConfig::active(int layer) const {
  return enabled && std::find(layers.begin(), layers.end(), layer) != layers.end();
}

void RifremConfig::validate(int model_layers) const {
  for (int l : layers) {
    if (l < 0 || l >= model_layers) {
      throw std::invalid_argument("rifrem layer " + std::to_string(l) + " outside [0, " +
                                  std::to_string(model_layers) + ")");
    }
  }
}

void to_json(nlohmann::json& j, const RifremConfig& c) {
  j = nlohmann::json{{"layers", c.layers}, {"enabled", c.enabled}, {"attend_all", c.attend_all}};
}

void from_json(const nlohmann::json& j, RifremConfig& c) {
  c.layers = j.value("layers", std::vector<int>{});
  c.enabled = j.value("enabled", true);
  c.attend_all = j.value("attend_all", false);
}

namespace {

MatrixF refine_with(const MatrixF& queries, const BankEntry& entry, int heads) {
  if (heads < 1 || queries.cols() != entry.keys.cols() || queries.cols() % heads != 0) {
    throw std::invalid_argument("refine_queries: query width does not match the bank");
  }
  const int hd = static_cast<int>(queries.cols()) / heads;
  MatrixF out(queries.rows(), queries.cols());
  for (int h = 0; h < heads; ++h) {
    out.middleCols(h * hd, hd) =
        attention<float>(queries.middleCols(h * hd, hd), entry.keys.middleCols(h * hd, hd),
                         entry.values.middleCols(h * hd, hd), AttentionMask::None);
  }
  return out;
}

BankEntry concat_entries(const MemoryBank& bank, int layer, const std::vector<std::uint32_t>& images) {
  if (images.empty()) throw std::invalid_argument("refine_queries: no images");
  Eigen::Index rows = 0;
  for (auto i : images) rows += bank.get(layer, i).keys.rows();
  BankEntry merged{MatrixF(rows, bank.dim()), MatrixF(rows, bank.dim())};
  Eigen::Index r = 0;
  for (auto i : images) {
    const auto& e = bank.get(layer, i);
    merged.keys.middleRows(r, e.keys.rows()) = e.keys;
    merged.values.middleRows(r, e.values.rows()) = e.values;
    r += e.keys.rows();
  }
  return merged;
}

}  // namespace

MatrixF refine_queries(const RetrievalRequest& request, const MemoryBank& bank, int layer, int heads) {
  return refine_with(request.queries, bank.get(layer, request.image), heads);
}

MatrixF refine_queries(const MatrixF& queries, const MemoryBank& bank, int layer, int heads,
                       const std::vector<std::uint32_t>& images) {
  return refine_with(queries, concat_entries(bank, layer, images), heads);
}

void inject_refinement(Eigen::Ref<MatrixF> hidden, const MatrixF& refined, const Tensor<float>& wo) {
  if (hidden.rows() != refined.rows() || refined.cols() != wo.rows || hidden.cols() != wo.cols) {
    throw std::invalid_argument("inject_refinement: slice misalignment");
  }
  hidden.noalias() += refined * wo.mat();
}

std::vector<int> select_layer_group(int group, int layers, std::string* warning) {
  if (layers < 2) throw std::invalid_argument("select_layer_group: need at least 2 layers");
  if (group < 1 || group > 5) throw std::invalid_argument("select_layer_group: group must be 1..5");
  int count = group == 5 ? layers : (1 << group);
  if (count > layers) {
    if (warning) {
      *warning = "group " + std::to_string(group) + " asks for " + std::to_string(count) + " layers; clamped to " +
                 std::to_string(layers);
    }
    count = layers;
  }
  std::vector<int> out;
  for (int k = 0; k < count; ++k) {
    out.push_back(static_cast<int>(round_half_away(static_cast<double>(k) * (layers - 1) / (count - 1))));
  }
  return out;
}

// ---------------------------------------------------------------------------

RifremInjector::RifremInjector(const Weights<float>& weights, MemoryBank& bank, RifremConfig config)
    : weights_(weights), bank_(bank), config_(std::move(config)) {
  config_.validate(weights.config.layers);
  if (bank.layers() != weights.config.layers || bank.dim() != weights.config.dim) {
    throw std::invalid_argument("RifremInjector: bank shape does not match the model");
  }
}

void RifremInjector::begin_record(std::uint32_t image) {
  if (recording_ || refining_) throw std::logic_error("RifremInjector: span already open");
  recording_ = image;
  pending_keys_.assign(static_cast<std::size_t>(weights_.config.layers), {});
  pending_values_.assign(static_cast<std::size_t>(weights_.config.layers), {});
}

void RifremInjector::end_record() {
  if (!recording_) throw std::logic_error("RifremInjector: no recording open");
  const int d = weights_.config.dim;
  for (int l = 0; l < weights_.config.layers; ++l) {
    const auto& k = pending_keys_[static_cast<std::size_t>(l)];
    const auto& v = pending_values_[static_cast<std::size_t>(l)];
    const auto rows = static_cast<Eigen::Index>(k.size() / static_cast<std::size_t>(d));
    bank_.record(l, *recording_, Eigen::Map<const MatrixF>(k.data(), rows, d),
                 Eigen::Map<const MatrixF>(v.data(), rows, d));
  }
  ++counters_.recorded_images;
  recording_.reset();
  pending_keys_.clear();
  pending_values_.clear();
}

bool RifremInjector::begin_refine(std::uint32_t image) {
  if (recording_ || refining_) throw std::logic_error("RifremInjector: span already open");
  const int layers = weights_.config.layers;
  retrieved_.assign(static_cast<std::size_t>(layers), nullptr);
  merged_.clear();
  if (!config_.enabled) return false;
  std::vector<std::uint32_t> sources{image};
  if (config_.attend_all) sources = bank_.images();
  for (int l = 0; l < layers; ++l) {
    if (!config_.active(l)) continue;
    for (auto s : sources)
      if (!bank_.contains(l, s)) return false;
  }
  if (config_.attend_all) merged_.reserve(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    if (!config_.active(l)) continue;
    if (config_.attend_all) {
      merged_.push_back(concat_entries(bank_, l, sources));
      retrieved_[static_cast<std::size_t>(l)] = &merged_.back();
    } else {
      retrieved_[static_cast<std::size_t>(l)] = &bank_.get(l, image);
    }
    ++counters_.retrievals;
  }
  refining_ = image;
  ++counters_.refinements;
  return true;
}

void RifremInjector::end_refine() {
  refining_.reset();
  retrieved_.clear();
  merged_.clear();
}

void RifremInjector::on_kv(int layer, std::span<const float> key, std::span<const float> value) {
  if (!recording_) return;
  auto& k = pending_keys_[static_cast<std::size_t>(layer)];
  auto& v = pending_values_[static_cast<std::size_t>(layer)];
  k.insert(k.end(), key.begin(), key.end());
  v.insert(v.end(), value.begin(), value.end());
}

void RifremInjector::after_attention(int layer, std::span<const float> query, std::span<float> hidden) {
  if (!refining_) return;
  const BankEntry* entry = retrieved_[static_cast<std::size_t>(layer)];
  if (!entry) return;
  const int d = weights_.config.dim;
  const MatrixF q = Eigen::Map<const MatrixF>(query.data(), 1, d);
  const MatrixF refined = refine_with(q, *entry, weights_.config.heads);
  Eigen::Map<MatrixF> h(hidden.data(), 1, d);
  inject_refinement(h, refined, weights_.layers[static_cast<std::size_t>(layer)].wo);
  ++counters_.injections;
}

}  // namespace cmmcot
