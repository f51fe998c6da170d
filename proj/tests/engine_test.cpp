#include <gtest/gtest.h>

#include "cmmcot/engine.hpp"

using namespace cmmcot;

namespace {

const Vocabulary& vocab() { return Vocabulary::standard(); }

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 4;
  c.heads = 2;
  c.dim = 16;
  c.vocab_size = 512;
  c.patch = 4;
  c.ffn_mult = 2;
  c.max_positions = 1024;
  return c;
}

const Weights<float>& model() {
  static const Weights<float> w = Weights<float>::init(small_config(), 17);
  return w;
}

std::vector<Image> scenes() {
  std::vector<Image> out;
  for (std::uint64_t seed : {1u, 2u}) {
    SceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    spec.shapes = {{ShapeKind::Square, "red", 0, 0, 8}, {ShapeKind::Circle, "blue", 8, 8, 8}};
    spec.noise = 0.05f;
    spec.seed = seed;
    out.push_back(synth_scene(spec).image);
  }
  return out;
}

GenerationOptions options_with(std::vector<int> layers) {
  GenerationOptions o;
  o.rifrem.layers = std::move(layers);
  o.min_side = 16;
  o.step_budget = 64;
  return o;
}

std::vector<TokenId> lex(std::string_view s) { return vocab().lex(s); }

std::vector<TokenId> concat(std::initializer_list<std::vector<TokenId>> parts) {
  std::vector<TokenId> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

const TokenId kTrigger = static_cast<TokenId>(Special::VisionStart);

}  // namespace

TEST(Prompt, ImagesThenQuestionAndInstruction) {
  const auto images = scenes();
  const InterleavedSequence p = assemble_prompt(images, "Which shape is red?", vocab(), 4);
  ASSERT_EQ(p.size(), 5u);
  for (const auto& e : p.elements) EXPECT_EQ(e.role, Role::Prompt);
  EXPECT_EQ(std::get<ImageIndexRef>(p.elements[0].value).index, 0u);
  EXPECT_EQ(std::get<VisionSpan>(p.elements[1].value).token_count, 16u);
  EXPECT_EQ(std::get<ImageIndexRef>(p.elements[2].value).index, 1u);
  const auto& text = std::get<TextSpan>(p.elements[4].value);
  EXPECT_EQ(vocab().decode(text.tokens),
            "Which shape is red? Please answer the question with reasoning and identify key objects.");
  EXPECT_NO_THROW(validate_sequence(p, vocab(), {.image_count = 2}));
  EXPECT_THROW(assemble_prompt({}, "q", vocab(), 4), std::invalid_argument);
}

TEST(Trigger, GroundedPairIsDetected) {
  const auto ctx = lex("look at <IMG>1</IMG><|box_start|>(10,10),(20,20)<|box_end|>");
  const TriggerResult r = detect_trigger(kTrigger, ctx, vocab(), 2);
  ASSERT_TRUE(r.grounding.has_value());
  EXPECT_EQ(r.grounding->image.index, 1u);
  EXPECT_EQ(r.grounding->box, (BoundingBox{10, 10, 20, 20}));
  EXPECT_TRUE(r.diagnostic.empty());
}

TEST(Trigger, OnlyTheTriggerTokenAfterABoxCounts) {
  const auto ctx = lex("<IMG>0</IMG><|box_start|>(10,10),(20,20)<|box_end|>");
  EXPECT_FALSE(detect_trigger(vocab().encode(" a")[0], ctx, vocab(), 2).grounding);
  const auto no_box = lex("just text <IMG>0</IMG> more");
  const TriggerResult r = detect_trigger(kTrigger, no_box, vocab(), 2);
  EXPECT_FALSE(r.grounding);
  EXPECT_TRUE(r.diagnostic.empty());
  EXPECT_FALSE(detect_trigger(kTrigger, {}, vocab(), 2).grounding);
}

TEST(Trigger, BadGroundingsAreReported) {
  for (std::string_view s : {"<IMG>2</IMG><|box_start|>(10,10),(20,20)<|box_end|>",
                             "<IMG>0</IMG><|box_start|>(30,10),(20,20)<|box_end|>",
                             "<IMG>0</IMG><|box_start|>(10,10),(10,20)<|box_end|>",
                             "<|box_start|>(10,10),(20,20)<|box_end|>",
                             "<IMG>0</IMG> text <|box_start|>(10,10),(20,20)<|box_end|>"}) {
    const TriggerResult r = detect_trigger(kTrigger, lex(s), vocab(), 2);
    EXPECT_FALSE(r.grounding) << s;
    EXPECT_FALSE(r.diagnostic.empty()) << s;
  }
}

TEST(ChainBuilder, RebuildsWellFormedChains) {
  InterleavedSequence seq;
  seq.text(vocab().encode("the red square is in"));
  seq.image(0).box({0, 0, 500, 500}).vision(16);
  seq.text(vocab().encode(". Answer: red"));
  ChainBuilder b(vocab(), 2);
  for (TokenId t : serialize_sequence(seq, vocab())) b.push(t);
  b.push(static_cast<TokenId>(Special::EndOfText));
  EXPECT_EQ(b.chain(), seq);
  EXPECT_TRUE(b.diagnostics().empty());
}

TEST(ChainBuilder, DropsMalformedGroupsAndStaysValid) {
  ChainBuilder b(vocab(), 2);
  for (TokenId t : lex("a <IMG>0</IMG><|box_start|>(30,0),(20,9)<|box_end|> b <IMG>5</IMG> c <|box_start|>(1,")) b.push(t);
  b.flush();
  EXPECT_EQ(b.diagnostics().size(), 3u);
  ASSERT_EQ(b.chain().size(), 1u);
  EXPECT_EQ(vocab().decode(std::get<TextSpan>(b.chain().elements[0].value).tokens), "a  b  c ");
  EXPECT_NO_THROW(validate_sequence(b.chain(), vocab(), {.image_count = 2}));
}

TEST(Answer, Extraction) {
  EXPECT_EQ(extract_answer("so it is red. Answer: blue circle."), "blue circle");
  EXPECT_EQ(extract_answer("Answer:  1 . Answer: 2"), "1");
  EXPECT_EQ(extract_answer("Answer: image 250)<|box_end|> Answer: zero"), "image 250)");
  EXPECT_EQ(extract_answer("no answer here"), "");
  EXPECT_EQ(extract_answer("Answer: yes<|endoftext|>"), "yes");
}

TEST(Engine, WithoutTriggersMatchesThePlainDecoder) {
  const auto images = scenes();
  for (bool enabled : {true, false}) {
    GreedyPicker a, b;
    GenerationOptions o = options_with({1, 3});
    o.rifrem.enabled = enabled;
    o.suppress_trigger = true;
    o.step_budget = 48;
    const GenerationResult r = generate(model(), vocab(), images, "Which shape is red?", a, o);
    const auto plain = decode_plain(model(), vocab(), images, "Which shape is red?", b, 48);
    EXPECT_EQ(r.generated, plain);
    EXPECT_GT(plain.size(), 10u);
    EXPECT_TRUE(r.triggers.empty());
    EXPECT_EQ(r.counters.injections, 0u);
    EXPECT_EQ(r.counters.recorded_images, enabled ? 2u : 0u);
  }
}

TEST(Engine, GroundedTriggerCropsAndRefinesOnce) {
  const auto images = scenes();
  ScriptedPicker picker(concat({vocab().encode("the red square"),
                                lex("<IMG>0</IMG><|box_start|>(0,0),(500,500)<|box_end|>"),
                                {kTrigger},
                                vocab().encode(" is here. Answer: red")}));
  const GenerationResult r = generate(model(), vocab(), images, "Which shape is red?", picker, options_with({1, 3}));
  EXPECT_TRUE(r.finished);
  EXPECT_FALSE(r.truncated);
  ASSERT_EQ(r.triggers.size(), 1u);
  EXPECT_EQ(r.triggers[0].grounding, (Grounding{{0}, {0, 0, 500, 500}}));
  EXPECT_TRUE(r.triggers[0].refined);
  // An 8x8 box upscaled to the 16 px minimum side gives a 4x4 patch grid.
  EXPECT_EQ(r.triggers[0].crop_tokens, 16);
  EXPECT_EQ(r.crop_extractions, 1u);
  EXPECT_EQ(r.counters.refinements, 1u);
  EXPECT_EQ(r.counters.retrievals, 2u);
  EXPECT_EQ(r.counters.injections, 32u);
  EXPECT_EQ(r.counters.recorded_images, 2u);
  EXPECT_EQ(r.answer, "red");
  EXPECT_TRUE(r.diagnostics.empty());
  EXPECT_NO_THROW(validate_sequence(r.chain, vocab(), {.image_count = 2}));
  ASSERT_EQ(r.chain.size(), 5u);
  EXPECT_EQ(std::get<VisionSpan>(r.chain.elements[3].value).token_count, 16u);
  EXPECT_EQ(r.bank_manifest["entries"].size(), 8u);
}

TEST(Engine, RefinementChangesOnlyWhatFollowsTheCrop) {
  const auto images = scenes();
  const auto script = concat({vocab().encode("the red square"),
                              lex("<IMG>1</IMG><|box_start|>(500,500),(1000,1000)<|box_end|>"),
                              {kTrigger},
                              vocab().encode(" done")});
  ScriptedPicker a(script), b(script);
  GenerationOptions on = options_with({1, 3});
  GenerationOptions off = on;
  off.rifrem.enabled = false;
  GenerationSession s_on(model(), vocab(), images, "q", a, on);
  GenerationSession s_off(model(), vocab(), images, "q", b, off);
  const GenerationResult r_on = s_on.run();
  const GenerationResult r_off = s_off.run();
  ASSERT_EQ(r_off.triggers.size(), 1u);
  EXPECT_FALSE(r_off.triggers[0].refined);
  EXPECT_EQ(r_off.counters.injections, 0u);
  ASSERT_EQ(s_on.state().length(), s_off.state().length());
  const auto first_pad = std::find(r_on.generated.begin(), r_on.generated.end(), static_cast<TokenId>(Special::ImagePad));
  const std::size_t crop_begin = s_on.prompt_tokens().size() + static_cast<std::size_t>(first_pad - r_on.generated.begin());
  const auto& k_on = s_on.state().cache(3).keys;
  const auto& k_off = s_off.state().cache(3).keys;
  const std::size_t d = 16;
  for (std::size_t i = 0; i < s_on.state().length(); ++i) {
    const bool same = std::equal(k_on.begin() + i * d, k_on.begin() + (i + 1) * d, k_off.begin() + i * d);
    // Layer 1 refinement alters the crop and later rows at layer 3.
    EXPECT_EQ(same, i < crop_begin) << i;
  }
}

TEST(Engine, MalformedBoxTakesTheRecoveryPath) {
  const auto images = scenes();
  ScriptedPicker picker(concat({vocab().encode("see"),
                                lex("<IMG>0</IMG><|box_start|>(300,0),(100,500)<|box_end|>"),
                                {kTrigger, kTrigger},
                                vocab().encode(" Answer: red")}));
  const GenerationResult r = generate(model(), vocab(), images, "q", picker, options_with({1, 3}));
  EXPECT_TRUE(r.finished);
  EXPECT_TRUE(r.triggers.empty());
  EXPECT_EQ(r.crop_extractions, 0u);
  EXPECT_EQ(r.counters.refinements, 0u);
  // The second trigger is banned right after the failed one and skipped.
  EXPECT_EQ(std::count(r.generated.begin(), r.generated.end(), kTrigger), 0);
  ASSERT_GE(r.diagnostics.size(), 2u);
  EXPECT_NE(r.diagnostics[0].find("skipped trigger"), std::string::npos);
  EXPECT_EQ(r.answer, "red");
  EXPECT_NO_THROW(validate_sequence(r.chain, vocab(), {.image_count = 2}));
}

TEST(Engine, OutOfRangeIndexAndDegenerateBoxDoNotCrop) {
  const auto images = scenes();
  for (std::string_view g : {"<IMG>7</IMG><|box_start|>(0,0),(500,500)<|box_end|>",
                             "<IMG>0</IMG><|box_start|>(0,0),(0,500)<|box_end|>"}) {
    ScriptedPicker picker(concat({lex(g), {kTrigger}, vocab().encode(" x")}));
    const GenerationResult r = generate(model(), vocab(), images, "q", picker, options_with({1}));
    EXPECT_TRUE(r.triggers.empty()) << g;
    EXPECT_EQ(r.crop_extractions, 0u);
    EXPECT_FALSE(r.diagnostics.empty());
  }
}

TEST(Engine, BudgetTruncates) {
  const auto images = scenes();
  ScriptedPicker picker(vocab().encode("a b c d e f g h i j"));
  GenerationOptions o = options_with({});
  o.step_budget = 3;
  const GenerationResult r = generate(model(), vocab(), images, "q", picker, o);
  EXPECT_TRUE(r.truncated);
  EXPECT_FALSE(r.finished);
  EXPECT_EQ(r.steps.size(), 3u);
  EXPECT_EQ(r.generated.size(), 3u);
}

TEST(Engine, DeterministicPolicies) {
  const auto images = scenes();
  for (auto kind : {DecodePolicy::Kind::Greedy, DecodePolicy::Kind::Temperature}) {
    DecodePolicy policy{kind, 0.8, 123};
    auto p1 = policy.make_picker();
    auto p2 = policy.make_picker();
    const auto a = generate(model(), vocab(), images, "q", *p1, options_with({1, 3}));
    const auto b = generate(model(), vocab(), images, "q", *p2, options_with({1, 3}));
    EXPECT_EQ(a.generated, b.generated);
    for (TokenId t : a.generated) {
      EXPECT_NE(t, static_cast<TokenId>(Special::ImagePad));
      EXPECT_TRUE(vocab().contains(t));
    }
  }
  EXPECT_THROW(TemperaturePicker(0.0, 1), std::invalid_argument);
}

TEST(Engine, PickersRespectBans) {
  VectorF logits = VectorF::Zero(6);
  logits(2) = 5.0f;
  logits(4) = 5.0f;
  std::vector<std::uint8_t> banned(6, 0);
  GreedyPicker g;
  EXPECT_EQ(g.pick(logits, banned), 2);
  banned[2] = 1;
  EXPECT_EQ(g.pick(logits, banned), 4);
  TemperaturePicker t(1.0, 9);
  banned = {1, 1, 1, 0, 1, 1};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(t.pick(logits, banned), 3);
  std::fill(banned.begin(), banned.end(), 1);
  EXPECT_THROW(g.pick(logits, banned), std::logic_error);
}

TEST(Engine, TranscriptJson) {
  const auto images = scenes();
  ScriptedPicker picker(concat({lex("<IMG>0</IMG><|box_start|>(0,0),(500,500)<|box_end|>"), {kTrigger},
                                vocab().encode(" Answer: red")}));
  const GenerationResult r = generate(model(), vocab(), images, "q", picker, options_with({1, 3}));
  const nlohmann::json j = transcript_json(r, vocab());
  EXPECT_EQ(j["answer"], "red");
  EXPECT_EQ(j["triggers"].size(), 1u);
  EXPECT_EQ(j["rifrem"]["refinements"], 1);
  EXPECT_EQ(j["steps"].size(), r.steps.size());
  EXPECT_TRUE(j["bank"]["sealed"].get<bool>());
}
