#pragma once

// Small decoder-only transformer: pre-norm blocks (RMSNorm, causal multi-head
// attention with rotary positions, GELU MLP), per-layer KV caching, masked
// next-token loss and hand-written backpropagation.
//
// Weights and the full-sequence passes are templated on the scalar type so
// the same code runs in float for training and in double for gradient checks.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/grammar.hpp"
#include "cmmcot/image.hpp"
#include "cmmcot/tensor.hpp"

namespace cmmcot {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int dim = 64;
  int vocab_size = 512;
  int max_positions = 4096;
  int patch = kDefaultPatch;
  int ffn_mult = 4;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  /// Default RIFREM layer set for generation sessions.
  std::vector<int> rifrem_layers;

  int head_dim() const { return dim / heads; }
  int ffn_dim() const { return dim * ffn_mult; }
  int patch_dim() const { return patch * patch * kChannels; }
  /// Throws std::invalid_argument when inconsistent.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct Tensor {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  AlignedVector<T> data;

  Tensor() = default;
  Tensor(std::string n, Eigen::Index r, Eigen::Index c, T fill = T(0))
      : name(std::move(n)), rows(r), cols(c), data(static_cast<std::size_t>(r * c), fill) {}

  Eigen::Map<Matrix<T>> mat() { return {data.data(), rows, cols}; }
  Eigen::Map<const Matrix<T>> mat() const { return {data.data(), rows, cols}; }
  Eigen::Map<Vector<T>> vec() { return {data.data(), rows * cols}; }
  Eigen::Map<const Vector<T>> vec() const { return {data.data(), rows * cols}; }
  std::size_t size() const { return data.size(); }
};

template <class T>
struct LayerWeights {
  Tensor<T> attn_norm, wq, wk, wv, wo, mlp_norm, w1, b1, w2, b2;
};

template <class T>
struct Weights {
  ModelConfig config;
  Tensor<T> tok_emb;     // vocab x dim
  Tensor<T> patch_proj;  // patch_dim x dim
  Tensor<T> patch_bias;  // 1 x dim
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // 1 x dim
  Tensor<T> lm_head;     // dim x vocab

  /// Correctly shaped, all zero except norm gains (zero too if `zero_gains`).
  static Weights zeros(const ModelConfig& config, bool zero_gains = true);
  static Weights init(const ModelConfig& config, std::uint64_t seed);

  /// Visits tensors in declaration order (the checkpoint order).
  template <class F>
  void visit(F&& f) {
    f(tok_emb);
    f(patch_proj);
    f(patch_bias);
    for (auto& l : layers) {
      for (Tensor<T>* t : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w1, &l.b1, &l.w2, &l.b2}) f(*t);
    }
    f(final_norm);
    f(lm_head);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Weights*>(this)->visit([&](Tensor<T>& t) { f(static_cast<const Tensor<T>&>(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  template <class U>
  Weights<U> cast() const;

  PatchProjection projection() const
    requires std::is_same_v<T, float>
  {
    return {patch_proj.mat(), patch_bias.vec()};
  }
};

extern template struct Weights<float>;
extern template struct Weights<double>;

// ---------------------------------------------------------------------------
// Attention

enum class AttentionMask : std::uint8_t { None, Causal };

/// softmax(Q K^T / sqrt(d_k)) V with d_k = Q.cols(). With a causal mask,
/// query i sees keys j <= i + (K.rows() - Q.rows()). Throws
/// std::invalid_argument on shape mismatch.
template <class T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                    AttentionMask mask = AttentionMask::None);

/// The softmax weights of `attention`, rows summing to one.
template <class T>
Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k, AttentionMask mask = AttentionMask::None);

// ---------------------------------------------------------------------------
// Positions

/// Multimodal position id: temporal, height and width channels. Text tokens
/// carry the same value in all three.
struct Pos3 {
  int t = 0;
  int h = 0;
  int w = 0;

  static Pos3 text(int p) { return {p, p, p}; }
  int max() const { return std::max(t, std::max(h, w)); }
  friend bool operator==(const Pos3&, const Pos3&) = default;
};

/// Assigns position ids while walking a sequence. Text advances one step;
/// the tokens of one vision span share a base id and add their patch row and
/// column on the height and width channels.
class PositionTracker {
 public:
  Pos3 next_text() { return Pos3::text(next_++); }
  void begin_span(PatchGrid grid) {
    grid_ = grid;
    base_ = next_;
  }
  Pos3 span_position(int k) const { return {base_, base_ + k / grid_.cols, base_ + k % grid_.cols}; }
  void end_span() { next_ = base_ + std::max(grid_.rows, grid_.cols); }
  int next() const { return next_; }
  void set_next(int next) { next_ = next; }

 private:
  int next_ = 0;
  int base_ = 0;
  PatchGrid grid_;
};

/// Rotary frequency for pair `pair` of a head of `head_dim`, and the position
/// channel that drives it: the first half of the pairs follow the temporal id,
/// the next quarter the height id and the last quarter the width id.
struct RotaryPlan {
  int head_dim = 0;
  std::vector<double> inv_freq;
  std::vector<std::uint8_t> channel;  // 0 = t, 1 = h, 2 = w

  RotaryPlan(int head_dim, double theta);
  double angle(int pair, const Pos3& pos) const;
};

/// Rotates one head vector in place. Throws on odd head dims.
template <class T>
void apply_positional(std::span<T> head, const Pos3& pos, double theta = 10000.0);
template <class T>
void apply_positional(std::span<T> head, int position, double theta = 10000.0) {
  apply_positional(head, Pos3::text(position), theta);
}

// ---------------------------------------------------------------------------
// Training samples

struct LayoutOptions {
  int patch = kDefaultPatch;
  int min_side = kDefaultMinSide;
  bool append_eos = true;
};

/// One packed training/evaluation sequence. Input position i holds token i
/// (or the visual features of that placeholder) and predicts token i + 1.
struct Sample {
  std::vector<TokenId> tokens;  // inputs, length n
  std::vector<TokenId> targets; // next tokens, length n
  std::vector<std::uint8_t> loss_mask;
  std::vector<int> visual_row;  // -1 for text inputs, else a row of `patches`
  MatrixF patches;
  std::vector<Pos3> positions;
  /// Entity-crop inputs: the image whose prompt span they are refined
  /// against, -1 elsewhere.
  std::vector<int> refine_source;
  /// Input positions of each image's prompt vision span (empty if absent).
  std::vector<std::vector<int>> image_rows;

  std::size_t length() const { return tokens.size(); }
};

/// Loss mask rule: a position counts when its target belongs to the target
/// role and is not a loss-masked vision placeholder.
Sample build_sample(const InterleavedSequence& seq, std::span<const Image> images, const Vocabulary& vocab,
                    const LayoutOptions& options = {});

// ---------------------------------------------------------------------------
// Loss and full-sequence passes
//
// At the layers in config.rifrem_layers, entity-crop positions additionally
// attend (without mask, on pre-rotary queries/keys) to the prompt span of
// their source image; the result goes through the layer's Wo and is added to
// the residual stream after self-attention. This is the training-time mirror
// of the memory-bank refinement used during generation.

/// Mean cross-entropy over positions with mask set. Masked positions are
/// never read. Throws std::invalid_argument when nothing is unmasked.
template <class T>
double compute_loss(std::span<const TokenId> targets, const Matrix<T>& logits, std::span<const std::uint8_t> mask);

template <class T>
Matrix<T> forward_sequence(const Weights<T>& weights, const Sample& sample);

struct GradOptions {
  /// Receives d(loss)/d(logits) when set.
  std::function<void(const Matrix<double>&)> dlogits_probe;
};

/// Loss of `sample`; accumulates d(loss)/d(weights) into `grads` scaled by
/// `scale` (for batch averaging).
template <class T>
double loss_and_grad(const Weights<T>& weights, const Sample& sample, Weights<T>& grads, T scale = T(1),
                     const GradOptions& options = {});

// ---------------------------------------------------------------------------
// Incremental decoding

struct KvCache {
  AlignedVector<float> keys;    // rotated, len x dim
  AlignedVector<float> values;  // len x dim
};

struct StepInput {
  TokenId token = 0;
  /// Patch features (patch_dim floats) for visual inputs; empty for text.
  std::span<const float> patch;
  Pos3 position;
};

/// Hooks into a decoding step.
class StepObserver {
 public:
  virtual ~StepObserver() = default;
  /// Pre-rotary key and value of the current input at `layer`.
  virtual void on_kv(int /*layer*/, std::span<const float> /*key*/, std::span<const float> /*value*/) {}
  /// After the self-attention residual. `query` is the pre-rotary query of the
  /// current input; `hidden` is the residual stream and may be modified.
  virtual void after_attention(int /*layer*/, std::span<const float> /*query*/, std::span<float> /*hidden*/) {}
};

class DecoderState {
 public:
  explicit DecoderState(const ModelConfig& config);

  std::size_t length() const { return positions_.size(); }
  const std::vector<Pos3>& positions() const { return positions_; }
  const KvCache& cache(int layer) const { return caches_[static_cast<std::size_t>(layer)]; }
  PositionTracker& tracker() { return tracker_; }
  const PositionTracker& tracker() const { return tracker_; }

 private:
  friend VectorF forward_step(const Weights<float>&, DecoderState&, const StepInput&, StepObserver*);

  int dim_ = 0;
  int max_positions_ = 0;
  std::vector<KvCache> caches_;
  std::vector<Pos3> positions_;
  PositionTracker tracker_;
};

/// Step input for position `i` of a packed sample.
inline StepInput sample_input(const Sample& sample, std::size_t i) {
  StepInput in{sample.tokens[i], {}, sample.positions[i]};
  if (const int r = sample.visual_row[i]; r >= 0) {
    in.patch = {sample.patches.row(r).data(), static_cast<std::size_t>(sample.patches.cols())};
  }
  return in;
}

/// One causal step: appends this input's K/V to every layer cache and
/// returns logits over the vocabulary. Throws std::out_of_range when the
/// position exceeds max_positions.
VectorF forward_step(const Weights<float>& weights, DecoderState& state, const StepInput& input,
                     StepObserver* observer = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints: "CMMCOTCK", u32 version, u32 config length, config JSON,
// u64 parameter count, then little-endian float32 tensors in declaration order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Weights<float>& weights, const std::filesystem::path& path);
Weights<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace cmmcot
