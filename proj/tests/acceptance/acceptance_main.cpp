// Acceptance run: one PASS/FAIL line per criterion, results in <out>/acceptance.json.
//
//   acceptance --out <dir> [--only 1,2,...]

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "../support/sequence_gen.hpp"
#include "cmmcot/datagen.hpp"
#include "cmmcot/decoder.hpp"
#include "cmmcot/engine.hpp"
#include "cmmcot/grammar.hpp"
#include "cmmcot/harness.hpp"
#include "cmmcot/image.hpp"
#include "cmmcot/random.hpp"
#include "cmmcot/rifrem.hpp"
#include "cmmcot/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmmcot;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
  json data = json::object();
};

const Vocabulary& vocab() { return Vocabulary::standard(); }

std::string fmt(double x, int precision = 3) {
  std::ostringstream s;
  s << std::setprecision(precision) << x;
  return s.str();
}

std::string fixed(double x, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << x;
  return s.str();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------
// 1. Grammar round trip and mutation rejection

Outcome grammar_round_trip() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  int round_trips = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto seq = testing::random_sequence(rng, vocab());
    if (parse_sequence(serialize_sequence(seq, vocab()), vocab()) != seq) {
      return {false, "round trip failed at sequence " + std::to_string(i)};
    }
    ++round_trips;
  }

  const testing::Mutation kinds[] = {testing::Mutation::DropClose,          testing::Mutation::DropOpen,
                                     testing::Mutation::StrayClose,         testing::Mutation::LetterInCoordinate,
                                     testing::Mutation::CoordinateOverflow, testing::Mutation::Truncate};
  int rejected = 0, accepted = 0, unpositioned = 0, attempts = 0;
  std::map<std::string, int> codes;
  while (rejected + accepted < 1000) {
    const auto seq = testing::random_sequence(rng, vocab());
    std::vector<TokenId> bad;
    if (!testing::mutate(rng, vocab(), serialize_sequence(seq, vocab()), kinds[attempts++ % 6], bad)) continue;
    try {
      parse_sequence(bad, vocab());
      ++accepted;
    } catch (const GrammarError& e) {
      ++rejected;
      if (e.offset() > bad.size()) ++unpositioned;
      codes[std::string(to_string(e.code()))]++;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = round_trips == 10000 && rejected == 1000 && unpositioned == 0 && secs < 30.0;
  o.detail = std::to_string(round_trips) + " round trips, " + std::to_string(rejected) +
             "/1000 mutations rejected with positions, " + fixed(secs, 2) + " s (limit 30 s)";
  o.data = {{"round_trips", round_trips}, {"rejected", rejected}, {"accepted", accepted},
            {"unpositioned", unpositioned}, {"error_codes", codes}, {"seconds", secs}};
  return o;
}

// ---------------------------------------------------------------------------
// 2. Attention against dense loop oracles

// Softmax attention from the definition, per head, in double. Query i sees
// keys j <= i + offset when causal.
Matrix<double> oracle_attention(const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v, int heads,
                                bool causal) {
  const Eigen::Index hd = q.cols() / heads;
  const Eigen::Index offset = k.rows() - q.rows();
  Matrix<double> out = Matrix<double>::Zero(q.rows(), v.cols());
  const Eigen::Index vd = v.cols() / heads;
  for (int h = 0; h < heads; ++h) {
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      const Eigen::Index last = causal ? i + offset : k.rows() - 1;
      std::vector<double> s;
      double m = -1e300;
      for (Eigen::Index j = 0; j <= last; ++j) {
        double dot = 0.0;
        for (Eigen::Index c = 0; c < hd; ++c) dot += q(i, h * hd + c) * k(j, h * hd + c);
        s.push_back(dot / std::sqrt(static_cast<double>(hd)));
        m = std::max(m, s.back());
      }
      double z = 0.0;
      for (double& x : s) z += (x = std::exp(x - m));
      for (Eigen::Index j = 0; j <= last; ++j)
        for (Eigen::Index c = 0; c < vd; ++c)
          out(i, h * vd + c) += s[static_cast<std::size_t>(j)] / z * v(j, h * vd + c);
    }
  }
  return out;
}

template <class T>
Matrix<T> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix<T> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<T>(rng.uniform(-scale, scale));
  return m;
}

double rms(const std::vector<double>& x, const double* gain, double eps, std::vector<double>& y) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  y.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gain[i];
  return inv;
}

// Rotates each (2p, 2p+1) pair of a head by pos * theta^(-2p/hd); the pair
// frequencies are split over the (t, h, w) position channels with the last
// two quarters of the pairs going to h and w.
void oracle_rotate(double* head, int hd, const Pos3& pos, double theta) {
  const int half = hd / 2, quarter = half / 4;
  for (int p = 0; p < half; ++p) {
    const int coord = p < half - 2 * quarter ? pos.t : (p < half - quarter ? pos.h : pos.w);
    const double a = coord * std::pow(theta, -2.0 * p / hd);
    const double x0 = head[2 * p], x1 = head[2 * p + 1];
    head[2 * p] = x0 * std::cos(a) - x1 * std::sin(a);
    head[2 * p + 1] = x0 * std::sin(a) + x1 * std::cos(a);
  }
}

// Full decoder forward written with loops: embeddings, pre-norm causal
// self-attention with rotary positions, the crop refinement against the
// source image's prompt span at the configured layers, GELU MLP, final
// norm and output head.
Matrix<double> oracle_forward(const Weights<double>& w, const Sample& s) {
  const auto& cfg = w.config;
  const int n = static_cast<int>(s.length()), d = cfg.dim, hd = cfg.head_dim(), heads = cfg.heads;
  std::vector<std::vector<double>> x(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
  for (int i = 0; i < n; ++i) {
    const int vr = s.visual_row[static_cast<std::size_t>(i)];
    for (int c = 0; c < d; ++c) {
      double v;
      if (vr >= 0) {
        v = w.patch_bias.data[static_cast<std::size_t>(c)];
        for (int f = 0; f < cfg.patch_dim(); ++f) v += double(s.patches(vr, f)) * w.patch_proj.mat()(f, c);
      } else {
        v = w.tok_emb.mat()(s.tokens[static_cast<std::size_t>(i)], c);
      }
      x[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = v;
    }
  }
  auto matvec = [](const std::vector<double>& a, const Tensor<double>& m) {
    std::vector<double> out(static_cast<std::size_t>(m.cols), 0.0);
    for (Eigen::Index c = 0; c < m.cols; ++c)
      for (Eigen::Index r = 0; r < m.rows; ++r) out[static_cast<std::size_t>(c)] += a[static_cast<std::size_t>(r)] * m.mat()(r, c);
    return out;
  };
  const std::set<int> active(cfg.rifrem_layers.begin(), cfg.rifrem_layers.end());

  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    Matrix<double> q(n, d), k(n, d), v(n, d);
    for (int i = 0; i < n; ++i) {
      std::vector<double> a;
      rms(x[static_cast<std::size_t>(i)], lw.attn_norm.data.data(), cfg.norm_eps, a);
      const auto qi = matvec(a, lw.wq), ki = matvec(a, lw.wk), vi = matvec(a, lw.wv);
      for (int c = 0; c < d; ++c) {
        q(i, c) = qi[static_cast<std::size_t>(c)];
        k(i, c) = ki[static_cast<std::size_t>(c)];
        v(i, c) = vi[static_cast<std::size_t>(c)];
      }
    }
    Matrix<double> qr = q, kr = k;
    for (int i = 0; i < n; ++i)
      for (int h = 0; h < heads; ++h) {
        Vector<double> hq = qr.row(i).segment(h * hd, hd).transpose(), hk = kr.row(i).segment(h * hd, hd).transpose();
        oracle_rotate(hq.data(), hd, s.positions[static_cast<std::size_t>(i)], cfg.rope_theta);
        oracle_rotate(hk.data(), hd, s.positions[static_cast<std::size_t>(i)], cfg.rope_theta);
        qr.row(i).segment(h * hd, hd) = hq.transpose();
        kr.row(i).segment(h * hd, hd) = hk.transpose();
      }
    Matrix<double> o = oracle_attention(qr, kr, v, heads, true);
    // Crop rows add attention over their source image's span (no mask,
    // unrotated projections).
    if (active.count(l) && !s.refine_source.empty()) {
      for (int i = 0; i < n; ++i) {
        const int img = s.refine_source[static_cast<std::size_t>(i)];
        if (img < 0 || static_cast<std::size_t>(img) >= s.image_rows.size()) continue;
        const auto& rows = s.image_rows[static_cast<std::size_t>(img)];
        if (rows.empty()) continue;
        Matrix<double> kq(static_cast<Eigen::Index>(rows.size()), d), vq(static_cast<Eigen::Index>(rows.size()), d);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          kq.row(static_cast<Eigen::Index>(r)) = k.row(rows[r]);
          vq.row(static_cast<Eigen::Index>(r)) = v.row(rows[r]);
        }
        o.row(i) += oracle_attention(q.row(i), kq, vq, heads, false).row(0);
      }
    }
    for (int i = 0; i < n; ++i) {
      auto& xi = x[static_cast<std::size_t>(i)];
      std::vector<double> oi(static_cast<std::size_t>(d));
      for (int c = 0; c < d; ++c) oi[static_cast<std::size_t>(c)] = o(i, c);
      const auto proj = matvec(oi, lw.wo);
      for (int c = 0; c < d; ++c) xi[static_cast<std::size_t>(c)] += proj[static_cast<std::size_t>(c)];
      std::vector<double> b;
      rms(xi, lw.mlp_norm.data.data(), cfg.norm_eps, b);
      auto u = matvec(b, lw.w1);
      for (std::size_t c = 0; c < u.size(); ++c) {
        const double z = u[c] + lw.b1.data[c];
        u[c] = 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (z + 0.044715 * z * z * z)));
      }
      const auto m = matvec(u, lw.w2);
      for (int c = 0; c < d; ++c)
        xi[static_cast<std::size_t>(c)] += m[static_cast<std::size_t>(c)] + lw.b2.data[static_cast<std::size_t>(c)];
    }
  }
  Matrix<double> logits(n, cfg.vocab_size);
  for (int i = 0; i < n; ++i) {
    std::vector<double> f;
    rms(x[static_cast<std::size_t>(i)], w.final_norm.data.data(), cfg.norm_eps, f);
    const auto li = matvec(f, w.lm_head);
    for (int c = 0; c < cfg.vocab_size; ++c) logits(i, c) = li[static_cast<std::size_t>(c)];
  }
  return logits;
}

// A random but well-formed sample: text rows, up to two prompt image spans
// and crop rows that refine against them.
Sample random_sample(Rng& rng, const ModelConfig& cfg) {
  Sample s;
  const int images = rng.range(0, 2);
  std::vector<int> kinds;  // -1 text, 0/1 prompt image span, 10/11 crop of image 0/1
  for (int img = 0; img < images; ++img) {
    kinds.push_back(-1);
    for (int r = rng.range(1, 4); r > 0; --r) kinds.push_back(img);
  }
  for (int seg = rng.range(1, 3); seg > 0; --seg) {
    for (int r = rng.range(1, 3); r > 0; --r) kinds.push_back(-1);
    if (images > 0 && rng.bernoulli(0.7)) {
      const int img = rng.range(0, images - 1);
      for (int r = rng.range(1, 3); r > 0; --r) kinds.push_back(10 + img);
    }
  }
  const int n = static_cast<int>(kinds.size());
  s.image_rows.resize(static_cast<std::size_t>(images));
  s.refine_source.assign(static_cast<std::size_t>(n), -1);
  int visual = 0;
  for (int i = 0; i < n; ++i) {
    const int kind = kinds[static_cast<std::size_t>(i)];
    s.tokens.push_back(rng.range(0, cfg.vocab_size - 1));
    s.targets.push_back(rng.range(0, cfg.vocab_size - 1));
    s.loss_mask.push_back(kind == -1 ? 1 : 0);
    s.visual_row.push_back(kind == -1 ? -1 : visual++);
    s.positions.push_back({i + rng.range(0, 2), rng.range(0, 6), rng.range(0, 6)});
    if (kind >= 0 && kind < 10) s.image_rows[static_cast<std::size_t>(kind)].push_back(i);
    if (kind >= 10) s.refine_source[static_cast<std::size_t>(i)] = kind - 10;
  }
  s.patches = random_matrix<float>(rng, visual, cfg.patch_dim());
  return s;
}

Outcome attention_oracle() {
  Rng rng(777);
  double kernel_err = 0.0, refine_err = 0.0, decoder_err = 0.0;
  int kernels = 0, refines = 0, decoders = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    // The attention kernel, float and double, masked and unmasked.
    {
      const int nq = rng.range(1, 12), nk = nq + rng.range(0, 12), dk = rng.range(1, 16), dv = rng.range(1, 16);
      const auto q = random_matrix<double>(rng, nq, dk), k = random_matrix<double>(rng, nk, dk),
                 v = random_matrix<double>(rng, nk, dv);
      for (bool causal : {false, true}) {
        const AttentionMask mask = causal ? AttentionMask::Causal : AttentionMask::None;
        const auto ref = oracle_attention(q, k, v, 1, causal);
        kernel_err = std::max(kernel_err, (attention<double>(q, k, v, mask) - ref).cwiseAbs().maxCoeff());
        const MatrixF f = attention<float>(q.cast<float>(), k.cast<float>(), v.cast<float>(), mask);
        kernel_err = std::max(kernel_err, (f.cast<double>() - oracle_attention(q.cast<float>().cast<double>(),
                                                                                 k.cast<float>().cast<double>(),
                                                                                 v.cast<float>().cast<double>(), 1,
                                                                                 causal))
                                              .cwiseAbs()
                                              .maxCoeff());
        ++kernels;
      }
    }
    // Memory-bank refinement.
    {
      const int heads = rng.range(1, 4), hd = 2 * rng.range(1, 6), layers = rng.range(1, 4);
      MemoryBank bank(layers, heads * hd);
      const int layer = rng.range(0, layers - 1);
      const auto image = static_cast<std::uint32_t>(rng.range(0, 3));
      const MatrixF k = random_matrix<float>(rng, rng.range(1, 20), heads * hd);
      const MatrixF v = random_matrix<float>(rng, k.rows(), heads * hd);
      bank.record(layer, image, k, v);
      if (image > 0) bank.record(layer, image - 1, random_matrix<float>(rng, 3, heads * hd),
                                 random_matrix<float>(rng, 3, heads * hd));
      const MatrixF q = random_matrix<float>(rng, rng.range(1, 8), heads * hd);
      const MatrixF out = refine_queries({image, q}, bank, layer, heads);
      const auto ref = oracle_attention(q.cast<double>(), k.cast<double>(), v.cast<double>(), heads, false);
      refine_err = std::max(refine_err, (out.cast<double>() - ref).cwiseAbs().maxCoeff());
      ++refines;
    }
    // Whole decoder passes (with refinement) on every tenth trial.
    if (trial % 10 == 0) {
      ModelConfig cfg;
      cfg.layers = rng.range(1, 2);
      cfg.heads = rng.range(1, 3);
      const int hds[] = {2, 4, 8, 12, 16};
      cfg.dim = cfg.heads * hds[rng.index(5)];
      cfg.vocab_size = 300;
      cfg.patch = 2;
      cfg.ffn_mult = 2;
      cfg.max_positions = 64;
      for (int l = 0; l < cfg.layers; ++l)
        if (rng.bernoulli(0.6)) cfg.rifrem_layers.push_back(l);
      Weights<double> w = Weights<double>::init(cfg, rng.next());
      w.visit([&](Tensor<double>& t) {
        for (double& x : t.data) x += rng.uniform(-0.3, 0.3);
      });
      const Sample s = random_sample(rng, cfg);
      decoder_err =
          std::max(decoder_err, (forward_sequence(w, s) - oracle_forward(w, s)).cwiseAbs().maxCoeff());
      ++decoders;
    }
  }
  Outcome o;
  o.pass = kernel_err < 1e-6 && refine_err < 1e-6 && decoder_err < 1e-6;
  o.detail = "1000 shapes: kernel max err " + fmt(kernel_err) + ", refine " + fmt(refine_err) + ", decoder " +
             fmt(decoder_err) + " (" + std::to_string(decoders) + " full passes; tol 1e-6)";
  o.data = {{"kernel_checks", kernels},       {"kernel_max_abs_err", kernel_err},   {"refine_checks", refines},
            {"refine_max_abs_err", refine_err}, {"decoder_checks", decoders}, {"decoder_max_abs_err", decoder_err}};
  return o;
}

// ---------------------------------------------------------------------------
// 3. Gradient check

Image tiny_scene(std::uint64_t seed) {
  SceneSpec spec;
  spec.width = 16;
  spec.height = 16;
  spec.shapes = {{ShapeKind::Square, "red", 0, 0, 8}, {ShapeKind::Circle, "blue", 8, 8, 8}};
  spec.noise = 0.05f;
  spec.seed = seed;
  return synth_scene(spec).image;
}

Sample gradient_sample(std::vector<Image>& images) {
  images = {tiny_scene(1), tiny_scene(2)};
  LayoutOptions opts;
  opts.patch = 4;
  opts.min_side = 8;
  InterleavedSequence seq;
  seq.image(0, Role::Prompt).vision(16, true, Role::Prompt);
  seq.image(1, Role::Prompt).vision(16, true, Role::Prompt);
  seq.text(vocab().encode(" which is red?"), Role::Prompt);
  seq.text(vocab().encode(" the red square in image 0"));
  seq.image(0).box({0, 0, 500, 500}).vision(4);
  seq.text(vocab().encode(" Answer: image 0"));
  return build_sample(seq, images, vocab(), opts);
}

Outcome gradient_check() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.dim = 16;
  cfg.vocab_size = 512;
  cfg.patch = 4;
  cfg.ffn_mult = 2;
  cfg.max_positions = 256;
  cfg.rifrem_layers = {0, 1};
  std::vector<Image> images;
  Sample s = gradient_sample(images);

  Weights<double> w = Weights<double>::init(cfg, 5);
  Rng rng(99);
  w.visit([&](Tensor<double>& t) {
    for (double& v : t.data) v += 0.3 * rng.normal();
  });
  Weights<double> g = Weights<double>::zeros(cfg);
  Matrix<double> dlogits;
  loss_and_grad(w, s, g, 1.0, GradOptions{[&](const Matrix<double>& m) { dlogits = m; }});

  std::vector<Tensor<double>*> wt, gt;
  w.visit([&](Tensor<double>& t) { wt.push_back(&t); });
  g.visit([&](Tensor<double>& t) { gt.push_back(&t); });
  const double eps = 1e-5;
  double worst = 0.0, num2 = 0.0, den = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  for (std::size_t ti = 0; ti < wt.size(); ++ti) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t k = 0; k < wt[ti]->data.size(); ++k) {
      double& p = wt[ti]->data[k];
      const double orig = p;
      p = orig + eps;
      const double up = compute_loss<double>(s.targets, forward_sequence(w, s), s.loss_mask);
      p = orig - eps;
      const double down = compute_loss<double>(s.targets, forward_sequence(w, s), s.loss_mask);
      p = orig;
      const double numeric = (up - down) / (2 * eps), analytic = gt[ti]->data[k];
      diff2 += (numeric - analytic) * (numeric - analytic);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++checked;
    }
    const double rel = (a2 + n2) == 0.0 ? 0.0 : std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2));
    if (rel > worst) {
      worst = rel;
      worst_name = wt[ti]->name;
    }
    num2 += diff2;
    den += std::sqrt(a2) + std::sqrt(n2);
  }

  // Masked rows receive no loss gradient, and retargeting them changes no
  // parameter gradient bit.
  bool masked_zero = dlogits.rows() == static_cast<Eigen::Index>(s.length());
  std::size_t masked = 0;
  for (std::size_t i = 0; i < s.length() && masked_zero; ++i) {
    if (s.loss_mask[i]) continue;
    ++masked;
    masked_zero = dlogits.row(static_cast<Eigen::Index>(i)).cwiseAbs().maxCoeff() == 0.0;
  }
  for (std::size_t i = 0; i < s.length(); ++i)
    if (!s.loss_mask[i]) s.targets[i] = (s.targets[i] + 17) % cfg.vocab_size;
  Weights<double> g2 = Weights<double>::zeros(cfg);
  loss_and_grad(w, s, g2);
  bool retarget_identical = true;
  std::vector<const Tensor<double>*> b;
  g2.visit([&](const Tensor<double>& t) { b.push_back(&t); });
  for (std::size_t i = 0; i < b.size(); ++i) retarget_identical = retarget_identical && b[i]->data == gt[i]->data;

  Outcome o;
  o.pass = worst < 1e-4 && masked_zero && retarget_identical && masked > 0;
  o.detail = std::to_string(checked) + " parameters, worst tensor rel err " + fmt(worst) + " (" + worst_name +
             "; tol 1e-4); " + std::to_string(masked) + " masked rows zero: " + (masked_zero ? "yes" : "no") +
             ", retargeting masked rows bitwise neutral: " + (retarget_identical ? "yes" : "no");
  o.data = {{"parameters", checked},         {"worst_tensor_rel_err", worst}, {"worst_tensor", worst_name},
            {"masked_rows", masked},         {"masked_zero", masked_zero},    {"retarget_identical", retarget_identical}};
  return o;
}

// ---------------------------------------------------------------------------
// 4. RIFREM disabled and no triggers: identical to the plain decoder

Outcome disabled_equivalence() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.dim = 16;
  cfg.vocab_size = 512;
  cfg.max_positions = 1024;
  int identical = 0;
  std::size_t tokens = 0;
  std::string first_failure;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Weights<float> w = Weights<float>::init(cfg, seed);
    const TaskInstance inst = make_instance(kTaskTypes[seed % kTaskTypes.size()], seed, 0);
    std::vector<Image> images;
    for (const auto& sc : inst.scenes) images.push_back(synth_scene(sc).image);
    DecodePolicy policy;
    if (seed % 2 == 1) policy = {DecodePolicy::Kind::Temperature, 1.0, seed};
    auto a = policy.make_picker(), b = policy.make_picker();
    GenerationOptions opts;
    opts.rifrem.layers = {0, 1};
    opts.rifrem.enabled = false;
    opts.suppress_trigger = true;
    opts.step_budget = 40;
    const GenerationResult r = generate(w, vocab(), images, inst.question, *a, opts);
    const auto plain = decode_plain(w, vocab(), images, inst.question, *b, 40);
    const bool same = r.generated == plain && r.triggers.empty() && r.counters.injections == 0;
    if (same) ++identical;
    else if (first_failure.empty()) first_failure = "seed " + std::to_string(seed);
    tokens += plain.size();
  }
  Outcome o;
  o.pass = identical == 100;
  o.detail = std::to_string(identical) + "/100 seeded runs identical (" + std::to_string(tokens) +
             " tokens, greedy and sampled)" + (first_failure.empty() ? "" : "; first mismatch " + first_failure);
  o.data = {{"identical", identical}, {"runs", 100}, {"tokens", tokens}};
  return o;
}

// ---------------------------------------------------------------------------
// 5. Geometry

BoundingBox random_box(Rng& rng, int extent) {
  int a = rng.range(0, extent), b = rng.range(0, extent), c = rng.range(0, extent), d = rng.range(0, extent);
  if (a > b) std::swap(a, b);
  if (c > d) std::swap(c, d);
  return {a, c, b, d};
}

// Unit cells [x, x+1) x [y, y+1) inside the box.
bool covers_cell(const BoundingBox& b, int x, int y) { return x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1; }

double grid_iou(const BoundingBox& a, const BoundingBox& b, int extent) {
  long inter = 0, uni = 0;
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x) {
      const bool ia = covers_cell(a, x, y), ib = covers_cell(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Same count over a grid compressed to the boxes' own coordinates, for
// boxes spanning the full coordinate range.
double compressed_grid_iou(const BoundingBox& a, const BoundingBox& b) {
  std::vector<int> xs{a.x0, a.x1, b.x0, b.x1}, ys{a.y0, a.y1, b.y0, b.y1};
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i)
    for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
      const long long area = static_cast<long long>(xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
      if (area == 0) continue;
      const bool ia = covers_cell(a, xs[i], ys[j]), ib = covers_cell(b, xs[i], ys[j]);
      if (ia && ib) inter += area;
      if (ia || ib) uni += area;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Lattice points (closed boxes), so degenerate boxes still count.
BoundingBox lattice_fuse(const std::vector<BoundingBox>& boxes, int extent) {
  BoundingBox f{extent + 1, extent + 1, -1, -1};
  for (int y = 0; y <= extent; ++y)
    for (int x = 0; x <= extent; ++x)
      for (const auto& b : boxes)
        if (x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1) {
          f.x0 = std::min(f.x0, x);
          f.y0 = std::min(f.y0, y);
          f.x1 = std::max(f.x1, x);
          f.y1 = std::max(f.y1, y);
        }
  return f;
}

Outcome geometry() {
  Rng rng(5150);
  double iou_err = 0.0;
  int fuse_mismatch = 0;
  for (int i = 0; i < 10000; ++i) {
    const bool small = i % 2 == 0;
    const int extent = small ? 40 : kCoordMax;
    const BoundingBox a = random_box(rng, extent), b = random_box(rng, extent);
    const double ref = small ? grid_iou(a, b, extent) : compressed_grid_iou(a, b);
    iou_err = std::max(iou_err, std::abs(iou(a, b) - ref));
    if (small) {
      std::vector<BoundingBox> boxes{a, b};
      if (rng.bernoulli(0.5)) boxes.push_back(random_box(rng, extent));
      if (fuse_boxes(boxes) != lattice_fuse(boxes, extent)) ++fuse_mismatch;
    } else {
      const BoundingBox f = fuse_boxes(std::vector<BoundingBox>{a, b});
      const BoundingBox ref_f{std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1), std::max(a.y1, b.y1)};
      if (f != ref_f) ++fuse_mismatch;
    }
  }

  // Gate: detections at exactly IoU 0.9 stay, just below are dropped.
  const BoundingBox ref{0, 0, 100, 100};
  const std::vector<BoundingBox> refs{ref, ref, ref, ref};
  std::vector<DetectionCandidate> c{{"red square", 0, {0, 0, 90, 100}, 0.0},
                                    {"red square", 0, {0, 0, 100, 90}, 0.0},
                                    {"red square", 0, {0, 0, 89, 100}, 0.0},
                                    {"red square", 0, {0, 0, 100, 89}, 0.0}};
  const auto kept = validate_detections(c, refs, 0.9);
  const bool gate = kept.size() == 2 && kept[0].iou == 0.9 && kept[1].iou == 0.9 && iou(ref, {0, 0, 90, 100}) >= 0.9 &&
                    iou(ref, {0, 0, 89, 100}) < 0.9;

  Outcome o;
  o.pass = iou_err < 1e-9 && fuse_mismatch == 0 && gate;
  o.detail = "10000 pairs: iou max err " + fmt(iou_err) + " (tol 1e-9), fusion mismatches " +
             std::to_string(fuse_mismatch) + ", IoU 0.9 retained and 0.89 dropped: " + (gate ? "yes" : "no");
  o.data = {{"pairs", 10000}, {"iou_max_err", iou_err}, {"fuse_mismatches", fuse_mismatch}, {"inclusive_gate", gate}};
  return o;
}

// ---------------------------------------------------------------------------
// 6. Pipeline determinism and filter paths

Outcome pipeline_determinism(const fs::path& out) {
  CorpusRequest req;
  req.counts = scaled_task_mix(0.5);
  req.seed = 42;
  const MockErrorRates rates{.wrong_first = 0.3, .wrong_second = 0.4, .failure = 0.05, .bad_detection = 0.1,
                             .extra_detection = 0.2};
  std::vector<std::string> bytes[2];
  std::map<BuildOutcome, std::size_t> outcomes;
  std::size_t fused = 0;
  for (int run = 0; run < 2; ++run) {
    MockAnnotator annotator(req.seed, rates);
    const CorpusResult corpus = assemble_corpus(req, annotator, vocab());
    const fs::path dir = out / ("datagen_run" + std::to_string(run));
    fs::remove_all(dir);
    write_corpus(corpus, dir, vocab());
    for (const char* f : {"corpus.jsonl", "rejected.jsonl", "stats.csv"}) bytes[run].push_back(read_bytes(dir / f));
    outcomes = corpus.outcomes;
    fused = corpus.grounding.fused;
  }
  const bool identical = bytes[0] == bytes[1] && !bytes[0][0].empty();
  auto count = [&](BuildOutcome o) { return outcomes.count(o) ? outcomes.at(o) : std::size_t{0}; };
  const std::size_t retained = count(BuildOutcome::Retained), refined = count(BuildOutcome::Refined),
                    rejected = count(BuildOutcome::Rejected);
  Outcome o;
  o.pass = identical && retained > 0 && refined > 0 && rejected > 0;
  o.detail = std::string("two runs byte-identical: ") + (identical ? "yes" : "no") + " (" +
             std::to_string(bytes[0][0].size()) + " bytes of JSONL); retained " + std::to_string(retained) +
             ", refined " + std::to_string(refined) + ", rejected " + std::to_string(rejected) + ", unprocessed " +
             std::to_string(count(BuildOutcome::Unprocessed));
  o.data = {{"identical", identical},  {"jsonl_bytes", bytes[0][0].size()}, {"retained", retained},
            {"refined", refined},      {"rejected", rejected}, {"unprocessed", count(BuildOutcome::Unprocessed)},
            {"fused_pairs", fused}};
  return o;
}

// ---------------------------------------------------------------------------
// 7. Toy training, and 8. the ablation trend on the trained model

struct Trained {
  std::optional<Weights<float>> weights;
};

Outcome toy_training(const fs::path& out, Trained& trained) {
  CorpusRequest req;
  req.counts = scaled_task_mix(2000.0 / 260.0);
  req.seed = 7;
  MockAnnotator annotator(req.seed);
  const CorpusResult corpus = assemble_corpus(req, annotator, vocab());
  const Dataset data = corpus_dataset(corpus.records, vocab());

  ModelConfig cfg;
  cfg.layers = 4;
  cfg.heads = 4;
  cfg.dim = 64;
  cfg.max_positions = 1024;
  cfg.rifrem_layers = {0, 1, 2, 3};
  Weights<float> w = Weights<float>::init(cfg, 7);

  // Zero learning rate: bitwise unchanged.
  StagePlan zero = StagePlan::stage1();
  zero.lr = 0.0;
  zero.steps = 20;
  Weights<float> frozen = w;
  train_stage(zero, frozen, data);
  bool unchanged = true;
  {
    std::vector<const Tensor<float>*> a, b;
    w.visit([&](const Tensor<float>& t) { a.push_back(&t); });
    frozen.visit([&](const Tensor<float>& t) { b.push_back(&t); });
    for (std::size_t i = 0; i < a.size(); ++i)
      unchanged = unchanged && std::equal(a[i]->data.begin(), a[i]->data.end(), b[i]->data.begin(), b[i]->data.end(),
                                          [](float x, float y) { return std::bit_cast<std::uint32_t>(x) ==
                                                                        std::bit_cast<std::uint32_t>(y); });
  }

  StagePlan plan = StagePlan::stage1();
  plan.steps = 1500;
  plan.seed = 7;
  plan.eval_every = 100;
  plan.eval_limit = 200;
  const auto t0 = Clock::now();
  std::optional<long> crossed;
  double crossed_at = 0.0;
  TrainHooks hooks;
  hooks.on_eval = [&](const EvalPoint& p) {
    if (!crossed && p.loss < 0.5) {
      crossed = p.step;
      crossed_at = seconds_since(t0);
    }
  };
  const TrainResult r = train_stage(plan, w, data, {}, &data, hooks);
  const double train_secs = seconds_since(t0);
  const double final_loss = dataset_loss(w, data);
  write_loss_trace(r.trace, out / "loss_trace.csv");
  save_checkpoint(w, out / "toy_model.ckpt");
  trained.weights = w;

  json evals = json::array();
  for (const auto& e : r.evals) evals.push_back({{"step", e.step}, {"loss", e.loss}});
  Outcome o;
  o.pass = corpus.records.size() == 2000 && crossed && *crossed <= 3000 && crossed_at < 900.0 && final_loss < 0.5 &&
           unchanged;
  o.detail = "2000 instances, d=64 L=4: CE < 0.5 at step " + (crossed ? std::to_string(*crossed) : "never") + " after " +
             fixed(crossed_at, 1) + " s; after " + std::to_string(r.steps) + " steps full-corpus CE " +
             fixed(final_loss, 4) + " (" + fixed(train_secs, 1) + " s); zero-lr bitwise unchanged: " +
             (unchanged ? "yes" : "no");
  o.data = {{"records", corpus.records.size()},
            {"threshold_step", crossed ? json(*crossed) : json()},
            {"threshold_seconds", crossed_at},
            {"steps", r.steps},
            {"train_seconds", train_secs},
            {"final_corpus_loss", final_loss},
            {"zero_lr_unchanged", unchanged},
            {"evals", evals}};
  return o;
}

Outcome ablation_trend(const fs::path& out, const Trained& trained) {
  // Latency: a 28-layer model so the five placements differ in active layers.
  ModelConfig cfg;
  cfg.layers = 28;
  cfg.heads = 4;
  cfg.dim = 32;
  cfg.max_positions = 4096;
  const Weights<float> big = Weights<float>::init(cfg, 11);
  const auto workload = grounding_workload({3, 3, 128, 11}, vocab());
  AblationOptions opts;
  opts.groups = {0, 1, 2, 3, 4, 5};
  opts.repeats = 5;
  opts.seed = 11;
  const AblationReport report = run_ablation(big, vocab(), workload, opts);
  write_ablation_csv(report, out / "ablation.csv");
  const auto summary = report.summary();
  std::map<int, GroupSummary> by_group;
  for (const auto& s : summary) by_group[s.group] = s;
  bool ordered = true;
  std::string medians;
  for (int g = 1; g <= 5; ++g) {
    medians += (g > 1 ? " <= " : "") + fixed(by_group.at(g).median_latency_ms, 2);
    if (g > 1 && by_group.at(g).median_latency_ms < by_group.at(g - 1).median_latency_ms) ordered = false;
  }

  // Accuracy: the trained toy model with RIFREM on and off.
  std::optional<double> on, off;
  std::vector<EvalResult> results;
  if (trained.weights) {
    const Weights<float>& w = *trained.weights;
    for (bool enabled : {false, true}) {
      EvalTask task{EvalFamily::CrossImageMatch, 300, 9001, {}};
      EvalOptions eo;
      eo.rifrem.layers = w.config.rifrem_layers;
      eo.rifrem.enabled = enabled;
      results.push_back(evaluate(w, vocab(), task, eo));
      (enabled ? on : off) = results.back().accuracy;
    }
    write_eval_csv(results, out / "eval.csv");
  }
  const bool non_inferior = on && off && *on >= *off;

  json groups = json::array();
  for (const auto& s : summary)
    groups.push_back({{"group", s.group}, {"active_layers", s.active_layers}, {"median_latency_ms", s.median_latency_ms}});
  Outcome o;
  o.pass = ordered && non_inferior;
  o.detail = "median ms/token groups 1..5: " + medians + (ordered ? " (ordered)" : " (NOT ordered)") + ", off " +
             fixed(by_group.at(0).median_latency_ms, 2) + "; cross-image-match accuracy on " +
             (on ? fixed(*on) : "n/a") + " vs off " + (off ? fixed(*off) : "n/a") + ", delta " +
             (on && off ? fixed(*on - *off) : "n/a");
  o.data = {{"groups", groups},
            {"latency_ordered", ordered},
            {"warnings", report.warnings},
            {"accuracy_on", on ? json(*on) : json()},
            {"accuracy_off", off ? json(*off) : json()},
            {"accuracy_delta", on && off ? json(*on - *off) : json()}};
  return o;
}

// ---------------------------------------------------------------------------
// 9. Corpus statistics

Outcome corpus_statistics() {
  const std::map<std::string, int> per_mille{{"Caption", 50}, {"Co-reference", 90}, {"Comparison", 18}, {"Reason", 102}};
  bool ok = true;
  std::string shown;
  json runs = json::array();
  for (double scale : {0.1, 0.5, 1.0}) {
    CorpusRequest req;
    req.counts = scaled_task_mix(scale);
    req.seed = 3;
    MockAnnotator annotator(req.seed);
    const CorpusResult corpus = assemble_corpus(req, annotator, vocab());
    const std::string csv = stats_csv(corpus.stats);
    ok = ok && csv.rfind("skill,source,instances\n", 0) == 0;
    const auto rows = parse_stats_csv(csv);
    long long total = 0, expected_total = 0;
    json counts = json::object();
    for (const auto& row : rows) {
      counts[row.skill] = row.instances;
      if (row.skill == "Total") {
        total = row.instances;
        continue;
      }
      const auto it = per_mille.find(row.skill);
      if (it == per_mille.end()) {
        ok = false;
        continue;
      }
      expected_total += row.instances;
      ok = ok && std::abs(static_cast<double>(row.instances) - it->second * scale) <= 0.5;
    }
    std::size_t produced = corpus.records.size();
    ok = ok && rows.size() == 5 && total == expected_total && produced == static_cast<std::size_t>(total);
    runs.push_back({{"scale", scale}, {"counts", counts}});
    if (scale == 0.5) {
      for (const auto& row : rows) shown += (shown.empty() ? "" : ", ") + row.skill + " " + std::to_string(row.instances);
    }
  }
  Outcome o;
  o.pass = ok;
  o.detail = "scales 0.1, 0.5, 1: counts within rounding of 50/90/18/102 x scale; at 0.5: " + shown;
  o.data = {{"runs", runs}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_out";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      for (std::string x; std::getline(s, x, ',');) only.insert(std::stoi(x));
    } else {
      std::cerr << "usage: acceptance --out <dir> [--only 1,2,...]\n";
      return 1;
    }
  }
  fs::create_directories(out);

  Trained trained;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"grammar round trip", grammar_round_trip},
      {"attention oracle", attention_oracle},
      {"gradient check", gradient_check},
      {"disabled RIFREM equals plain decoding", disabled_equivalence},
      {"geometry", geometry},
      {"pipeline determinism", [&] { return pipeline_determinism(out); }},
      {"toy training", [&] { return toy_training(out, trained); }},
      {"ablation trend", [&] { return ablation_trend(out, trained); }},
      {"corpus statistics", corpus_statistics},
  };

  json results = json::array();
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id) && !(id == 7 && only.count(8))) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail << " ["
              << fixed(secs, 1) << " s]" << std::endl;
    results.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail},
                       {"seconds", secs}, {"data", o.data}});
  }
  std::ofstream(out / "acceptance.json") << results.dump(2) << '\n';
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
