#pragma once

// Retrieval-based image feature refinement: a memory bank of per-layer image
// keys/values recorded during the prompt pass, and cross-attention of entity
// crop queries against the bank at selected layers.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/decoder.hpp"

namespace cmmcot {

enum class BankErrc { DuplicateEntry, MissingEntry, ShapeMismatch, LayerRange, Sealed };

class BankError : public std::runtime_error {
 public:
  BankError(BankErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  BankErrc code() const { return code_; }

 private:
  BankErrc code_;
};

struct BankEntry {
  MatrixF keys;    // tokens x dim, pre-rotary, heads concatenated
  MatrixF values;  // tokens x dim
};

/// (layer, image) -> (K, V). Write-once: entries cannot be replaced, and
/// after seal() nothing can be added. Concurrent readers are safe once sealed.
class MemoryBank {
 public:
  MemoryBank(int layers, int dim) : layers_(layers), dim_(dim) {}

  void record(int layer, std::uint32_t image, MatrixF keys, MatrixF values);
  const BankEntry& get(int layer, std::uint32_t image) const;
  bool contains(int layer, std::uint32_t image) const { return entries_.count({layer, image}) > 0; }

  void seal() { sealed_ = true; }
  bool sealed() const { return sealed_; }

  int layers() const { return layers_; }
  int dim() const { return dim_; }
  std::size_t entry_count() const { return entries_.size(); }
  /// Number of distinct recorded images (N).
  std::size_t image_count() const;
  std::vector<std::uint32_t> images() const;

  /// Entries, shapes and byte sizes.
  nlohmann::json manifest() const;
  /// Raw little-endian float32 keys then values for each entry, manifest order.
  void export_tensors(const std::filesystem::path& path) const;

 private:
  int layers_;
  int dim_;
  bool sealed_ = false;
  std::map<std::pair<int, std::uint32_t>, BankEntry> entries_;
};

struct RifremConfig {
  std::vector<int> layers;
  bool enabled = true;
  /// Attend to every recorded image instead of only the referenced one.
  bool attend_all = false;

  bool active(int layer) const;
  void validate(int model_layers) const;
};

void to_json(nlohmann::json& j, const RifremConfig& c);
void from_json(const nlohmann::json& j, RifremConfig& c);

struct RetrievalRequest {
  std::uint32_t image = 0;
  MatrixF queries;  // rows x (heads * head_dim), pre-rotary
};

/// Q' = softmax(Q K^T / sqrt(d_k)) V per head, unmasked. Throws BankError for
/// a missing entry and std::invalid_argument for a width mismatch.
MatrixF refine_queries(const RetrievalRequest& request, const MemoryBank& bank, int layer, int heads);

/// Same, over the concatenation of the given images' entries.
MatrixF refine_queries(const MatrixF& queries, const MemoryBank& bank, int layer, int heads,
                       const std::vector<std::uint32_t>& images);

/// hidden += refined * wo, row by row. Throws std::invalid_argument when the
/// slices do not line up.
void inject_refinement(Eigen::Ref<MatrixF> hidden, const MatrixF& refined, const Tensor<float>& wo);

/// Layer sets of the placement ablation: groups 1..5 hold 2, 4, 8, 16 and all
/// layers, spaced by round(k (L - 1) / (n - 1)). A count above L is clamped
/// and reported through `warning`.
std::vector<int> select_layer_group(int group, int layers, std::string* warning = nullptr);

/// Step observer that fills the bank while prompt images stream through the
/// decoder and refines crop tokens at the active layers.
class RifremInjector : public StepObserver {
 public:
  struct Counters {
    std::size_t recorded_images = 0;
    std::size_t refinements = 0;  // crops refined
    std::size_t retrievals = 0;   // bank lookups, one per active layer per crop
    std::size_t injections = 0;   // (token, layer) updates
  };

  RifremInjector(const Weights<float>& weights, MemoryBank& bank, RifremConfig config);

  /// Subsequent steps belong to the vision span of prompt image `image`.
  void begin_record(std::uint32_t image);
  void end_record();
  /// Subsequent steps are crop tokens refined against `image`. Returns false
  /// (and refines nothing) when the bank has no entry for it.
  bool begin_refine(std::uint32_t image);
  void end_refine();

  void on_kv(int layer, std::span<const float> key, std::span<const float> value) override;
  void after_attention(int layer, std::span<const float> query, std::span<float> hidden) override;

  const Counters& counters() const { return counters_; }
  const RifremConfig& config() const { return config_; }

 private:
  const Weights<float>& weights_;
  MemoryBank& bank_;
  RifremConfig config_;
  Counters counters_;
  std::optional<std::uint32_t> recording_;
  std::vector<std::vector<float>> pending_keys_, pending_values_;
  std::optional<std::uint32_t> refining_;
  std::vector<const BankEntry*> retrieved_;  // per layer, null when inactive
  std::vector<BankEntry> merged_;            // attend_all concatenations
};

}  // namespace cmmcot
