#include "cmmcot/decoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "cmmcot/random.hpp"

namespace cmmcot {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (layers < 1) fail("layers must be >= 1");
  if (heads < 1 || dim < 1 || dim % heads != 0) fail("dim must be a positive multiple of heads");
  if (head_dim() % 2 != 0) fail("head dim must be even");
  if (vocab_size < kSpecialCount + 256) fail("vocab_size too small for the byte tokens");
  if (max_positions < 1) fail("max_positions must be >= 1");
  if (patch < 1) fail("patch must be >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (!(rope_theta > 1.0)) fail("rope_theta must be > 1");
  if (!(norm_eps > 0.0)) fail("norm_eps must be > 0");
  for (int l : rifrem_layers) {
    if (l < 0 || l >= layers) fail("rifrem layer " + std::to_string(l) + " out of range");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},         {"heads", c.heads},
                     {"dim", c.dim},               {"vocab_size", c.vocab_size},
                     {"max_positions", c.max_positions}, {"patch", c.patch},
                     {"ffn_mult", c.ffn_mult},     {"rope_theta", c.rope_theta},
                     {"norm_eps", c.norm_eps},     {"rifrem_layers", c.rifrem_layers}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.dim = j.value("dim", d.dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.patch = j.value("patch", d.patch);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  c.rope_theta = j.value("rope_theta", d.rope_theta);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
  c.rifrem_layers = j.value("rifrem_layers", d.rifrem_layers);
}

// ---------------------------------------------------------------------------
// Weights

template <class T>
Weights<T> Weights<T>::zeros(const ModelConfig& config, bool zero_gains) {
  config.validate();
  const T gain = zero_gains ? T(0) : T(1);
  const auto d = config.dim, f = config.ffn_dim();
  Weights w;
  w.config = config;
  w.tok_emb = Tensor<T>("tok_emb", config.vocab_size, d);
  w.patch_proj = Tensor<T>("patch_proj", config.patch_dim(), d);
  w.patch_bias = Tensor<T>("patch_bias", 1, d);
  for (int i = 0; i < config.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerWeights<T> l;
    l.attn_norm = Tensor<T>(p + "attn_norm", 1, d, gain);
    l.wq = Tensor<T>(p + "wq", d, d);
    l.wk = Tensor<T>(p + "wk", d, d);
    l.wv = Tensor<T>(p + "wv", d, d);
    l.wo = Tensor<T>(p + "wo", d, d);
    l.mlp_norm = Tensor<T>(p + "mlp_norm", 1, d, gain);
    l.w1 = Tensor<T>(p + "w1", d, f);
    l.b1 = Tensor<T>(p + "b1", 1, f);
    l.w2 = Tensor<T>(p + "w2", f, d);
    l.b2 = Tensor<T>(p + "b2", 1, d);
    w.layers.push_back(std::move(l));
  }
  w.final_norm = Tensor<T>("final_norm", 1, d, gain);
  w.lm_head = Tensor<T>("lm_head", d, config.vocab_size);
  return w;
}

template <class T>
Weights<T> Weights<T>::init(const ModelConfig& config, std::uint64_t seed) {
  Weights w = zeros(config, false);
  Rng rng(mix_seed(seed, hash_string("weights")));
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * config.layers);
  auto fill = [&](Tensor<T>& t, double stddev) {
    for (T& v : t.data) v = static_cast<T>(stddev * rng.normal());
  };
  fill(w.tok_emb, base);
  fill(w.patch_proj, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())));
  for (auto& l : w.layers) {
    fill(l.wq, base);
    fill(l.wk, base);
    fill(l.wv, base);
    fill(l.wo, residual);
    fill(l.w1, base);
    fill(l.w2, residual);
  }
  fill(w.lm_head, base);
  return w;
}

template <class T>
template <class U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out = Weights<U>::zeros(config);
  std::vector<const Tensor<T>*> src;
  visit([&](const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit([&](Tensor<U>& t) {
    const auto& s = *src[i++];
    for (std::size_t k = 0; k < t.data.size(); ++k) t.data[k] = static_cast<U>(s.data[k]);
  });
  return out;
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;
template Weights<double> Weights<double>::cast<double>() const;

// ---------------------------------------------------------------------------
// Attention

namespace {

template <class T>
void check_attention_shapes(const Matrix<T>& q, const Matrix<T>& k) {
  if (q.cols() < 1) throw std::invalid_argument("attention: d_k must be >= 1");
  if (k.cols() != q.cols()) throw std::invalid_argument("attention: Q and K widths differ");
  if (k.rows() < 1) throw std::invalid_argument("attention: no keys");
}

constexpr Eigen::Index kUnmasked = std::numeric_limits<Eigen::Index>::max();

// Row-wise softmax. With a causal offset, row i keeps columns <= i + offset
// and the rest are set to exactly zero (exp of -inf would give denormals).
template <class T>
void softmax_rows(Matrix<T>& s, Eigen::Index causal_offset = kUnmasked) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index visible =
        causal_offset == kUnmasked ? s.cols() : std::min<Eigen::Index>(s.cols(), i + causal_offset + 1);
    auto row = s.row(i).head(visible);
    const T m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
    s.row(i).tail(s.cols() - visible).setZero();
  }
}

}  // namespace

template <class T>
Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k, AttentionMask mask) {
  check_attention_shapes(q, k);
  Matrix<T> s = (q * k.transpose()) * static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.cols())));
  if (mask == AttentionMask::Causal) {
    const Eigen::Index offset = k.rows() - q.rows();
    if (offset < 0) throw std::invalid_argument("attention: causal query sees no keys");
    softmax_rows(s, offset);
  } else {
    softmax_rows(s);
  }
  return s;
}

template <class T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, AttentionMask mask) {
  check_attention_shapes(q, k);
  if (v.rows() != k.rows()) throw std::invalid_argument("attention: K and V lengths differ");
  return attention_weights(q, k, mask) * v;
}

template Matrix<float> attention_weights(const Matrix<float>&, const Matrix<float>&, AttentionMask);
template Matrix<double> attention_weights(const Matrix<double>&, const Matrix<double>&, AttentionMask);
template Matrix<float> attention(const Matrix<float>&, const Matrix<float>&, const Matrix<float>&, AttentionMask);
template Matrix<double> attention(const Matrix<double>&, const Matrix<double>&, const Matrix<double>&,
                                  AttentionMask);

// ---------------------------------------------------------------------------
// Rotary positions

RotaryPlan::RotaryPlan(int dim, double theta) : head_dim(dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("rotary: head dim must be even and >= 2");
  const int half = dim / 2;
  const int quarter = half / 4;
  for (int p = 0; p < half; ++p) {
    inv_freq.push_back(std::pow(theta, -2.0 * p / dim));
    channel.push_back(p < half - 2 * quarter ? 0 : (p < half - quarter ? 1 : 2));
  }
}

double RotaryPlan::angle(int pair, const Pos3& pos) const {
  const auto c = channel[static_cast<std::size_t>(pair)];
  const int p = c == 0 ? pos.t : (c == 1 ? pos.h : pos.w);
  return p * inv_freq[static_cast<std::size_t>(pair)];
}

template <class T>
void apply_positional(std::span<T> head, const Pos3& pos, double theta) {
  const RotaryPlan plan(static_cast<int>(head.size()), theta);
  for (int p = 0; p < plan.head_dim / 2; ++p) {
    const double a = plan.angle(p, pos);
    const T c = static_cast<T>(std::cos(a)), s = static_cast<T>(std::sin(a));
    T& x0 = head[2 * static_cast<std::size_t>(p)];
    T& x1 = head[2 * static_cast<std::size_t>(p) + 1];
    const T a0 = x0, a1 = x1;
    x0 = a0 * c - a1 * s;
    x1 = a0 * s + a1 * c;
  }
}

template void apply_positional(std::span<float>, const Pos3&, double);
template void apply_positional(std::span<double>, const Pos3&, double);

namespace {

template <class T>
struct RopeTable {
  Matrix<T> cos;  // n x pairs
  Matrix<T> sin;
};

template <class T>
RopeTable<T> rope_table(const std::vector<Pos3>& positions, const RotaryPlan& plan) {
  const auto n = static_cast<Eigen::Index>(positions.size());
  const int pairs = plan.head_dim / 2;
  RopeTable<T> t{Matrix<T>(n, pairs), Matrix<T>(n, pairs)};
  for (Eigen::Index i = 0; i < n; ++i)
    for (int p = 0; p < pairs; ++p) {
      const double a = plan.angle(p, positions[static_cast<std::size_t>(i)]);
      t.cos(i, p) = static_cast<T>(std::cos(a));
      t.sin(i, p) = static_cast<T>(std::sin(a));
    }
  return t;
}

// Rotates every head of every row; `sign` = -1 applies the inverse rotation.
template <class T>
void rotate_rows(Matrix<T>& m, const RopeTable<T>& r, int heads, int head_dim, T sign) {
  const int pairs = head_dim / 2;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (int h = 0; h < heads; ++h)
      for (int p = 0; p < pairs; ++p) {
        const Eigen::Index c0 = h * head_dim + 2 * p;
        const T c = r.cos(i, p), s = sign * r.sin(i, p);
        const T a0 = m(i, c0), a1 = m(i, c0 + 1);
        m(i, c0) = a0 * c - a1 * s;
        m(i, c0 + 1) = a0 * s + a1 * c;
      }
}

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
void rms_forward(const Matrix<T>& x, const Tensor<T>& gain, double eps, Matrix<T>& y, Vector<T>& inv) {
  const auto d = x.cols();
  y.resize(x.rows(), d);
  inv.resize(x.rows());
  const auto g = gain.mat();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(d);
    inv(i) = T(1) / std::sqrt(ms + static_cast<T>(eps));
    y.row(i) = (x.row(i) * inv(i)).cwiseProduct(g);
  }
}

// Returns dx; accumulates the gain gradient.
template <class T>
Matrix<T> rms_backward(const Matrix<T>& x, const Tensor<T>& gain, const Vector<T>& inv, const Matrix<T>& dy,
                       Tensor<T>& dgain) {
  const auto d = static_cast<T>(x.cols());
  const auto g = gain.mat();
  auto dg = dgain.mat();
  Matrix<T> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowVector<T> xhat = x.row(i) * inv(i);
    dg += dy.row(i).cwiseProduct(xhat);
    const RowVector<T> gdy = dy.row(i).cwiseProduct(g);
    dx.row(i) = inv(i) * (gdy - xhat * (gdy.dot(xhat) / d));
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

// tanh of the GELU argument, elementwise.
template <class T>
Matrix<T> gelu_tanh(const Matrix<T>& u) {
  const auto a = u.array();
  return (static_cast<T>(kGeluC) * (a + static_cast<T>(kGeluA) * a.cube())).tanh().matrix();
}

template <class T>
Matrix<T> gelu(const Matrix<T>& u, const Matrix<T>& th) {
  return (T(0.5) * u.array() * (T(1) + th.array())).matrix();
}

template <class T>
Matrix<T> gelu_grad(const Matrix<T>& u, const Matrix<T>& th) {
  const auto a = u.array();
  const auto t = th.array();
  return (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * static_cast<T>(kGeluC) *
                                    (T(1) + T(3) * static_cast<T>(kGeluA) * a.square()))
      .matrix();
}

template <class T>
void check_sample(const Weights<T>& w, const Sample& s) {
  const auto n = s.tokens.size();
  if (n == 0) throw std::invalid_argument("sample is empty");
  if (s.targets.size() != n || s.loss_mask.size() != n || s.visual_row.size() != n || s.positions.size() != n) {
    throw std::invalid_argument("sample fields have inconsistent lengths");
  }
  if (s.patches.rows() > 0 && s.patches.cols() != w.config.patch_dim()) {
    throw std::invalid_argument("sample patch width does not match the model");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (s.tokens[i] < 0 || s.tokens[i] >= w.config.vocab_size || s.targets[i] < 0 ||
        s.targets[i] >= w.config.vocab_size) {
      throw std::invalid_argument("sample token outside the vocabulary");
    }
    if (s.visual_row[i] >= s.patches.rows()) throw std::invalid_argument("sample visual row out of range");
    if (s.positions[i].max() >= w.config.max_positions) {
      throw std::out_of_range("sample position exceeds max_positions");
    }
  }
  if (!s.refine_source.empty() && s.refine_source.size() != n) {
    throw std::invalid_argument("sample refine_source length mismatch");
  }
  for (const auto& rows : s.image_rows)
    for (int r : rows)
      if (r < 0 || static_cast<std::size_t>(r) >= n) throw std::invalid_argument("sample image row out of range");
}

// Cross-attention of one image's crop positions to its prompt span.
template <class T>
struct RefineCache {
  std::vector<int> query_rows;
  std::vector<int> key_rows;
  Matrix<T> q, k, v;  // gathered pre-rotary rows
  std::vector<Matrix<T>> probs;
  Matrix<T> out;      // concat heads, before Wo
};

template <class T>
struct LayerCache {
  Matrix<T> x_in, a, q, k, v, o, h, b, u, th, gu;
  Matrix<T> q_raw, k_raw;
  Vector<T> inv1, inv2;
  std::vector<Matrix<T>> probs;
  std::vector<RefineCache<T>> refines;
};

template <class T>
Matrix<T> gather_rows(const Matrix<T>& m, const std::vector<int>& rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// Groups crop positions by source image; skips images without a prompt span.
std::vector<std::pair<int, std::vector<int>>> refine_groups(const Sample& s) {
  std::vector<std::pair<int, std::vector<int>>> groups;
  for (std::size_t i = 0; i < s.refine_source.size(); ++i) {
    const int img = s.refine_source[i];
    if (img < 0 || static_cast<std::size_t>(img) >= s.image_rows.size() ||
        s.image_rows[static_cast<std::size_t>(img)].empty()) {
      continue;
    }
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == img; });
    if (it == groups.end()) {
      groups.push_back({img, {}});
      it = groups.end() - 1;
    }
    it->second.push_back(static_cast<int>(i));
  }
  return groups;
}

template <class T>
struct ForwardCache {
  Matrix<T> x0;
  std::vector<LayerCache<T>> layers;
  Matrix<T> x_last, f;
  Vector<T> inv_f;
  Matrix<T> logits;
};

template <class T>
void forward_full(const Weights<T>& w, const Sample& s, ForwardCache<T>& c) {
  check_sample(w, s);
  const auto& cfg = w.config;
  const auto n = static_cast<Eigen::Index>(s.length());
  const int hd = cfg.head_dim();
  const RotaryPlan plan(hd, cfg.rope_theta);
  const RopeTable<T> rope = rope_table<T>(s.positions, plan);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Matrix<T> x(n, cfg.dim);
  Matrix<T> patches;
  if (s.patches.rows() > 0) patches = s.patches.template cast<T>();
  const auto emb = w.tok_emb.mat();
  const auto proj = w.patch_proj.mat();
  const auto pbias = w.patch_bias.mat();
  for (Eigen::Index i = 0; i < n; ++i) {
    const int vr = s.visual_row[static_cast<std::size_t>(i)];
    if (vr >= 0) {
      x.row(i).noalias() = patches.row(vr) * proj;
      x.row(i) += pbias;
    } else {
      x.row(i) = emb.row(s.tokens[static_cast<std::size_t>(i)]);
    }
  }
  c.x0 = x;
  c.layers.resize(static_cast<std::size_t>(cfg.layers));
  std::vector<bool> active(static_cast<std::size_t>(cfg.layers), false);
  for (int l : cfg.rifrem_layers) active[static_cast<std::size_t>(l)] = true;
  const auto groups = refine_groups(s);

  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& lc = c.layers[static_cast<std::size_t>(l)];
    lc.x_in = x;
    rms_forward(x, lw.attn_norm, cfg.norm_eps, lc.a, lc.inv1);
    lc.q.noalias() = lc.a * lw.wq.mat();
    lc.k.noalias() = lc.a * lw.wk.mat();
    lc.v.noalias() = lc.a * lw.wv.mat();
    lc.refines.clear();
    const bool refine = active[static_cast<std::size_t>(l)] && !groups.empty();
    if (refine) {
      lc.q_raw = lc.q;
      lc.k_raw = lc.k;
    }
    rotate_rows(lc.q, rope, cfg.heads, hd, T(1));
    rotate_rows(lc.k, rope, cfg.heads, hd, T(1));
    lc.o.resize(n, cfg.dim);
    lc.probs.resize(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      Matrix<T> sc = lc.q.middleCols(h * hd, hd) * lc.k.middleCols(h * hd, hd).transpose() * scale;
      softmax_rows(sc, 0);
      lc.o.middleCols(h * hd, hd).noalias() = sc * lc.v.middleCols(h * hd, hd);
      lc.probs[static_cast<std::size_t>(h)] = std::move(sc);
    }
    lc.h = x;
    lc.h.noalias() += lc.o * lw.wo.mat();
    if (refine) {
      for (const auto& [img, rows] : groups) {
        RefineCache<T> rc;
        rc.query_rows = rows;
        rc.key_rows = s.image_rows[static_cast<std::size_t>(img)];
        rc.q = gather_rows(lc.q_raw, rc.query_rows);
        rc.k = gather_rows(lc.k_raw, rc.key_rows);
        rc.v = gather_rows(lc.v, rc.key_rows);
        rc.out.resize(rc.q.rows(), cfg.dim);
        for (int h = 0; h < cfg.heads; ++h) {
          Matrix<T> p = attention_weights<T>(rc.q.middleCols(h * hd, hd), rc.k.middleCols(h * hd, hd));
          rc.out.middleCols(h * hd, hd).noalias() = p * rc.v.middleCols(h * hd, hd);
          rc.probs.push_back(std::move(p));
        }
        const Matrix<T> delta = rc.out * lw.wo.mat();
        for (std::size_t r = 0; r < rows.size(); ++r) lc.h.row(rows[r]) += delta.row(static_cast<Eigen::Index>(r));
        lc.refines.push_back(std::move(rc));
      }
    }
    rms_forward(lc.h, lw.mlp_norm, cfg.norm_eps, lc.b, lc.inv2);
    lc.u.noalias() = lc.b * lw.w1.mat();
    lc.u.rowwise() += lw.b1.mat().row(0);
    lc.th = gelu_tanh(lc.u);
    lc.gu = gelu(lc.u, lc.th);
    x = lc.h;
    x.noalias() += lc.gu * lw.w2.mat();
    x.rowwise() += lw.b2.mat().row(0);
  }
  c.x_last = x;
  rms_forward(x, w.final_norm, cfg.norm_eps, c.f, c.inv_f);
  c.logits.noalias() = c.f * w.lm_head.mat();
}

void check_grads_shape(const ModelConfig& a, const ModelConfig& b) {
  if (a.layers != b.layers || a.dim != b.dim || a.vocab_size != b.vocab_size || a.patch != b.patch ||
      a.ffn_mult != b.ffn_mult || a.heads != b.heads) {
    throw std::invalid_argument("gradient buffer shape does not match the model");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss and passes

template <class T>
double compute_loss(std::span<const TokenId> targets, const Matrix<T>& logits, std::span<const std::uint8_t> mask) {
  if (targets.size() != mask.size() || static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("compute_loss: length mismatch");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    if (targets[i] < 0 || targets[i] >= logits.cols()) throw std::invalid_argument("compute_loss: target out of range");
    const double m = static_cast<double>(row.maxCoeff());
    double z = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(static_cast<double>(row(j)) - m);
    total += m + std::log(z) - static_cast<double>(row(targets[i]));
    ++count;
  }
  if (count == 0) throw std::invalid_argument("compute_loss: every position is masked");
  return total / static_cast<double>(count);
}

template double compute_loss(std::span<const TokenId>, const Matrix<float>&, std::span<const std::uint8_t>);
template double compute_loss(std::span<const TokenId>, const Matrix<double>&, std::span<const std::uint8_t>);

template <class T>
Matrix<T> forward_sequence(const Weights<T>& weights, const Sample& sample) {
  ForwardCache<T> c;
  forward_full(weights, sample, c);
  return std::move(c.logits);
}

template Matrix<float> forward_sequence(const Weights<float>&, const Sample&);
template Matrix<double> forward_sequence(const Weights<double>&, const Sample&);

template <class T>
double loss_and_grad(const Weights<T>& w, const Sample& s, Weights<T>& g, T scale, const GradOptions& options) {
  check_grads_shape(w.config, g.config);
  ForwardCache<T> c;
  forward_full(w, s, c);
  const double loss = compute_loss<T>(s.targets, c.logits, s.loss_mask);

  const auto& cfg = w.config;
  const auto n = static_cast<Eigen::Index>(s.length());
  const int hd = cfg.head_dim();
  const RotaryPlan plan(hd, cfg.rope_theta);
  const RopeTable<T> rope = rope_table<T>(s.positions, plan);
  const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  std::size_t count = 0;
  for (auto m : s.loss_mask) count += m ? 1 : 0;
  const T coef = scale / static_cast<T>(count);

  // Masked rows stay exactly zero: they are never written.
  Matrix<T> dlogits = Matrix<T>::Zero(n, cfg.vocab_size);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!s.loss_mask[static_cast<std::size_t>(i)]) continue;
    auto row = c.logits.row(i);
    const T m = row.maxCoeff();
    RowVector<T> p = (row.array() - m).exp();
    p /= p.sum();
    p(s.targets[static_cast<std::size_t>(i)]) -= T(1);
    dlogits.row(i) = p * coef;
  }
  if (options.dlogits_probe) options.dlogits_probe(dlogits.template cast<double>());

  g.lm_head.mat().noalias() += c.f.transpose() * dlogits;
  Matrix<T> df = dlogits * w.lm_head.mat().transpose();
  Matrix<T> dx = rms_backward(c.x_last, w.final_norm, c.inv_f, df, g.final_norm);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& lg = g.layers[static_cast<std::size_t>(l)];
    const auto& lc = c.layers[static_cast<std::size_t>(l)];

    // MLP
    lg.w2.mat().noalias() += lc.gu.transpose() * dx;
    lg.b2.mat() += dx.colwise().sum();
    Matrix<T> du = dx * lw.w2.mat().transpose();
    du.array() *= gelu_grad(lc.u, lc.th).array();
    lg.w1.mat().noalias() += lc.b.transpose() * du;
    lg.b1.mat() += du.colwise().sum();
    Matrix<T> db = du * lw.w1.mat().transpose();
    Matrix<T> dh = dx + rms_backward(lc.h, lw.mlp_norm, lc.inv2, db, lg.mlp_norm);

    // Attention
    lg.wo.mat().noalias() += lc.o.transpose() * dh;
    Matrix<T> dout = dh * lw.wo.mat().transpose();
    Matrix<T> dq(n, cfg.dim), dk(n, cfg.dim), dv(n, cfg.dim);
    Matrix<T> dq_raw, dk_raw, dv_extra;
    if (!lc.refines.empty()) {
      dq_raw = Matrix<T>::Zero(n, cfg.dim);
      dk_raw = Matrix<T>::Zero(n, cfg.dim);
      dv_extra = Matrix<T>::Zero(n, cfg.dim);
    }
    for (const auto& rc : lc.refines) {
      const Matrix<T> dh_r = gather_rows(dh, rc.query_rows);
      lg.wo.mat().noalias() += rc.out.transpose() * dh_r;
      const Matrix<T> dr = dh_r * lw.wo.mat().transpose();
      Matrix<T> gq(rc.q.rows(), cfg.dim), gk(rc.k.rows(), cfg.dim), gv(rc.k.rows(), cfg.dim);
      for (int h = 0; h < cfg.heads; ++h) {
        const auto& p = rc.probs[static_cast<std::size_t>(h)];
        const Matrix<T> drh = dr.middleCols(h * hd, hd);
        const Matrix<T> dp = drh * rc.v.middleCols(h * hd, hd).transpose();
        gv.middleCols(h * hd, hd).noalias() = p.transpose() * drh;
        const Vector<T> rowdot = p.cwiseProduct(dp).rowwise().sum();
        const Matrix<T> ds = p.cwiseProduct(dp.colwise() - rowdot);
        gq.middleCols(h * hd, hd).noalias() = ds * rc.k.middleCols(h * hd, hd) * att_scale;
        gk.middleCols(h * hd, hd).noalias() = ds.transpose() * rc.q.middleCols(h * hd, hd) * att_scale;
      }
      for (std::size_t r = 0; r < rc.query_rows.size(); ++r) dq_raw.row(rc.query_rows[r]) += gq.row(static_cast<Eigen::Index>(r));
      for (std::size_t r = 0; r < rc.key_rows.size(); ++r) {
        dk_raw.row(rc.key_rows[r]) += gk.row(static_cast<Eigen::Index>(r));
        dv_extra.row(rc.key_rows[r]) += gv.row(static_cast<Eigen::Index>(r));
      }
    }
    for (int h = 0; h < cfg.heads; ++h) {
      const auto& p = lc.probs[static_cast<std::size_t>(h)];
      const auto cols = [&](const Matrix<T>& m) { return m.middleCols(h * hd, hd); };
      const Matrix<T> doh = cols(dout);
      Matrix<T> dp = doh * cols(lc.v).transpose();
      dv.middleCols(h * hd, hd).noalias() = p.transpose() * doh;
      const Vector<T> rowdot = p.cwiseProduct(dp).rowwise().sum();
      Matrix<T> ds = p.cwiseProduct(dp.colwise() - rowdot);
      dq.middleCols(h * hd, hd).noalias() = ds * cols(lc.k) * att_scale;
      dk.middleCols(h * hd, hd).noalias() = ds.transpose() * cols(lc.q) * att_scale;
    }
    rotate_rows(dq, rope, cfg.heads, hd, T(-1));
    rotate_rows(dk, rope, cfg.heads, hd, T(-1));
    if (!lc.refines.empty()) {
      dq += dq_raw;
      dk += dk_raw;
      dv += dv_extra;
    }
    lg.wq.mat().noalias() += lc.a.transpose() * dq;
    lg.wk.mat().noalias() += lc.a.transpose() * dk;
    lg.wv.mat().noalias() += lc.a.transpose() * dv;
    Matrix<T> da = dq * lw.wq.mat().transpose();
    da.noalias() += dk * lw.wk.mat().transpose();
    da.noalias() += dv * lw.wv.mat().transpose();
    dx = dh + rms_backward(lc.x_in, lw.attn_norm, lc.inv1, da, lg.attn_norm);
  }

  auto demb = g.tok_emb.mat();
  auto dproj = g.patch_proj.mat();
  auto dbias = g.patch_bias.mat();
  Matrix<T> patches;
  if (s.patches.rows() > 0) patches = s.patches.template cast<T>();
  for (Eigen::Index i = 0; i < n; ++i) {
    const int vr = s.visual_row[static_cast<std::size_t>(i)];
    if (vr >= 0) {
      dproj.noalias() += patches.row(vr).transpose() * dx.row(i);
      dbias += dx.row(i);
    } else {
      demb.row(s.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    }
  }
  return loss;
}

template double loss_and_grad(const Weights<float>&, const Sample&, Weights<float>&, float, const GradOptions&);
template double loss_and_grad(const Weights<double>&, const Sample&, Weights<double>&, double, const GradOptions&);

// ---------------------------------------------------------------------------
// Samples

Sample build_sample(const InterleavedSequence& seq, std::span<const Image> images, const Vocabulary& vocab,
                    const LayoutOptions& options) {
  struct Source {
    std::uint32_t image;
    std::optional<BoundingBox> box;
    std::uint32_t count;
  };
  std::vector<Source> sources;
  for (std::size_t e = 0; e < seq.elements.size(); ++e) {
    const auto* span = std::get_if<VisionSpan>(&seq.elements[e].value);
    if (!span) continue;
    Source src{0, std::nullopt, span->token_count};
    std::size_t k = e;
    if (k > 0) {
      if (const auto* b = std::get_if<BoundingBox>(&seq.elements[k - 1].value)) {
        src.box = *b;
        --k;
      }
    }
    const auto* idx = k > 0 ? std::get_if<ImageIndexRef>(&seq.elements[k - 1].value) : nullptr;
    if (!idx) throw std::invalid_argument("build_sample: vision span without an image index");
    if (idx->index >= images.size()) throw std::invalid_argument("build_sample: image index out of range");
    src.image = idx->index;
    sources.push_back(src);
  }

  std::vector<TokenId> tokens = serialize_sequence(seq, vocab, {.image_count = images.size()});
  std::vector<Role> roles = serialized_roles(seq, vocab);
  if (options.append_eos) {
    bool any_target = false;
    for (Role r : roles) any_target |= r == Role::Target;
    tokens.push_back(vocab.special(Special::EndOfText));
    roles.push_back(any_target ? Role::Target : Role::Prompt);
  }
  if (tokens.size() < 2) throw std::invalid_argument("build_sample: sequence too short");

  // Visual features and positions over the full token list.
  std::vector<MatrixF> feats;
  std::vector<PatchGrid> grids;
  for (const auto& src : sources) {
    const Image& img = images[src.image];
    Image pixels = src.box ? extract_crop(img, *src.box, options.min_side, {src.image}).pixels : img;
    feats.push_back(patch_features(pixels, options.patch));
    grids.push_back(patch_grid(pixels.height(), pixels.width(), options.patch));
    if (feats.back().rows() != static_cast<Eigen::Index>(src.count)) {
      throw std::invalid_argument("build_sample: vision span holds " + std::to_string(src.count) +
                                  " placeholders but its source yields " + std::to_string(feats.back().rows()) +
                                  " patches");
    }
  }

  Sample s;
  const std::size_t n = tokens.size() - 1;
  Eigen::Index total_rows = 0;
  for (const auto& f : feats) total_rows += f.rows();
  s.patches.resize(total_rows, options.patch * options.patch * kChannels);
  {
    Eigen::Index r = 0;
    for (const auto& f : feats) {
      s.patches.middleRows(r, f.rows()) = f;
      r += f.rows();
    }
  }

  PositionTracker tracker;
  const TokenId vstart = vocab.special(Special::VisionStart);
  const TokenId vend = vocab.special(Special::VisionEnd);
  const TokenId pad = vocab.special(Special::ImagePad);
  const TokenId pad_keep = vocab.special(Special::ImagePadUnmasked);
  std::vector<int> refine_source(tokens.size(), -1);
  s.image_rows.assign(images.size(), {});
  std::size_t span = 0;
  int in_span = -1;
  bool first_full_span = false;
  Eigen::Index row_base = 0;
  std::vector<int> visual_row(tokens.size(), -1);
  std::vector<Pos3> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    if (t == pad || t == pad_keep) {
      const Source& src = sources.at(span);
      if (src.box) {
        refine_source[i] = static_cast<int>(src.image);
      } else if (first_full_span) {
        s.image_rows[src.image].push_back(static_cast<int>(i));
      }
      visual_row[i] = static_cast<int>(row_base + in_span);
      positions[i] = tracker.span_position(in_span);
      ++in_span;
      continue;
    }
    if (t == vend && in_span >= 0) {
      tracker.end_span();
      row_base += in_span;
      in_span = -1;
      ++span;
    }
    positions[i] = tracker.next_text();
    if (t == vstart) {
      tracker.begin_span(grids.at(span));
      in_span = 0;
      const Source& src = sources.at(span);
      first_full_span = !src.box && s.image_rows[src.image].empty();
    }
  }

  s.tokens.assign(tokens.begin(), tokens.end() - 1);
  s.targets.assign(tokens.begin() + 1, tokens.end());
  s.visual_row.assign(visual_row.begin(), visual_row.end() - 1);
  s.positions.assign(positions.begin(), positions.end() - 1);
  s.refine_source.assign(refine_source.begin(), refine_source.end() - 1);
  s.loss_mask.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.loss_mask[i] = roles[i + 1] == Role::Target && tokens[i + 1] != pad ? 1 : 0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Incremental decoding

DecoderState::DecoderState(const ModelConfig& config)
    : dim_(config.dim), max_positions_(config.max_positions), caches_(static_cast<std::size_t>(config.layers)) {}

VectorF forward_step(const Weights<float>& w, DecoderState& state, const StepInput& input, StepObserver* observer) {
  const auto& cfg = w.config;
  if (state.dim_ != cfg.dim || state.caches_.size() != static_cast<std::size_t>(cfg.layers)) {
    throw std::invalid_argument("forward_step: state was built for another model");
  }
  if (input.position.t < 0 || input.position.h < 0 || input.position.w < 0 ||
      input.position.max() >= cfg.max_positions || static_cast<int>(state.length()) >= cfg.max_positions) {
    throw std::out_of_range("forward_step: position exceeds max_positions");
  }
  const int hd = cfg.head_dim();
  const int d = cfg.dim;
  const RotaryPlan plan(hd, cfg.rope_theta);
  const RopeTable<float> rope = rope_table<float>({input.position}, plan);
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));

  MatrixF x(1, d);
  if (!input.patch.empty()) {
    if (static_cast<int>(input.patch.size()) != cfg.patch_dim()) {
      throw std::invalid_argument("forward_step: patch width does not match the model");
    }
    const Eigen::Map<const RowVector<float>> feat(input.patch.data(), cfg.patch_dim());
    x.noalias() = feat * w.patch_proj.mat();
    x += w.patch_bias.mat();
  } else {
    if (input.token < 0 || input.token >= cfg.vocab_size) {
      throw std::invalid_argument("forward_step: token outside the vocabulary");
    }
    x = w.tok_emb.mat().row(input.token);
  }

  MatrixF a, q, k, v, o(1, d), b, u;
  VectorF inv;
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& cache = state.caches_[static_cast<std::size_t>(l)];
    rms_forward(x, lw.attn_norm, cfg.norm_eps, a, inv);
    q.noalias() = a * lw.wq.mat();
    k.noalias() = a * lw.wk.mat();
    v.noalias() = a * lw.wv.mat();
    const MatrixF q_raw = q;
    if (observer) observer->on_kv(l, {k.data(), static_cast<std::size_t>(d)}, {v.data(), static_cast<std::size_t>(d)});
    rotate_rows(q, rope, cfg.heads, hd, 1.0f);
    rotate_rows(k, rope, cfg.heads, hd, 1.0f);
    cache.keys.insert(cache.keys.end(), k.data(), k.data() + d);
    cache.values.insert(cache.values.end(), v.data(), v.data() + d);
    const auto len = static_cast<Eigen::Index>(cache.keys.size() / static_cast<std::size_t>(d));
    const Eigen::Map<const MatrixF> keys(cache.keys.data(), len, d);
    const Eigen::Map<const MatrixF> values(cache.values.data(), len, d);
    for (int h = 0; h < cfg.heads; ++h) {
      MatrixF sc = q.middleCols(h * hd, hd) * keys.middleCols(h * hd, hd).transpose() * scale;
      softmax_rows(sc);
      o.middleCols(h * hd, hd).noalias() = sc * values.middleCols(h * hd, hd);
    }
    x.noalias() += o * lw.wo.mat();
    if (observer) {
      observer->after_attention(l, {q_raw.data(), static_cast<std::size_t>(d)}, {x.data(), static_cast<std::size_t>(d)});
    }
    rms_forward(x, lw.mlp_norm, cfg.norm_eps, b, inv);
    u.noalias() = b * lw.w1.mat();
    u += lw.b1.mat();
    u = gelu(u, gelu_tanh(u));
    x.noalias() += u * lw.w2.mat();
    x += lw.b2.mat();
  }
  state.positions_.push_back(input.position);
  rms_forward(x, w.final_norm, cfg.norm_eps, b, inv);
  return (b * w.lm_head.mat()).transpose();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'C', 'M', 'M', 'C', 'O', 'T', 'C', 'K'};

template <class U>
void put_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw std::runtime_error("checkpoint: truncated file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void save_checkpoint(const Weights<float>& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  const std::string config = nlohmann::json(weights.config).dump();
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  put_le<std::uint64_t>(out, weights.parameter_count());
  weights.visit([&](const Tensor<float>& t) {
    for (float v : t.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  });
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Weights<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto config_len = get_le<std::uint32_t>(in);
  std::string config_text(config_len, '\0');
  if (!in.read(config_text.data(), config_len)) throw std::runtime_error("checkpoint: truncated config");
  ModelConfig config;
  try {
    config = nlohmann::json::parse(config_text).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad config block: ") + e.what());
  }
  Weights<float> w = Weights<float>::zeros(config);
  if (get_le<std::uint64_t>(in) != w.parameter_count()) {
    throw std::runtime_error("checkpoint: parameter count does not match the config");
  }
  w.visit([&](Tensor<float>& t) {
    for (float& v : t.data) v = std::bit_cast<float>(get_le<std::uint32_t>(in));
  });
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
  return w;
}

}  // namespace cmmcot
