#include <doctest.h>

#include <cmath>

#include <bofi/kernels.hpp>
#include <bofi/train.hpp>

#include "../helpers.hpp"

using namespace bofi;

namespace {

const BoundingSequence kSeven{{BoxType::NP, 3}, {BoxType::VP, 2}, {BoxType::NP, 2}};

double value(ad::Tape& t, ad::Var v) { return t.value(v)(0, 0); }

Model uniform_filler(int vocab) {
  auto cfg = testing::small_config(vocab);
  Model m(cfg, 5);
  m.param("fill.out.w").value.setZero();
  m.param("fill.out.b").value.setZero();
  return m;
}

std::vector<Example> tiny_set(int n, const ModelConfig& cfg) {
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(testing::tiny_example(static_cast<std::uint64_t>(100 + i), cfg,
                                        i % 2 ? kSeven : BoundingSequence{{BoxType::NP, 2}, {BoxType::VP, 2}}));
    out.back().refs = {{"w4", "w5", "w6"}};
  }
  return out;
}

std::vector<const Example*> pointers(const std::vector<Example>& xs) {
  std::vector<const Example*> p;
  for (const auto& x : xs) p.push_back(&x);
  return p;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("uniform heads give the hand-computed bounding loss") {
    auto cfg = testing::small_config();
    cfg.max_box_len = 16;
    cfg.max_len = 16;
    Model m(cfg, 1);
    for (const char* p : {"bound.type_head.w", "bound.type_head.b", "bound.len_head.w", "bound.len_head.b"})
      m.param(p).value.setZero();
    const auto oracle = testing::load_json("loss_oracle.json");
    ad::Tape t;
    const auto pv = m.bind(t);
    const auto ctx = m.encode(t, pv, testing::random_mat(2, 5, 2));
    const BoundingSequence one{{BoxType::VP, 4}};
    CHECK(value(t, loss_bound(t, pv, m, ctx, one)) == doctest::Approx(oracle["bound_uniform_one_box"].get<double>()).epsilon(1e-12));
    CHECK(value(t, loss_bound(t, pv, m, ctx, kSeven)) ==
          doctest::Approx(3 * (std::log(5.0) + std::log(16.0)) + std::log(5.0)).epsilon(1e-12));
  }

  TEST_CASE("uniform filler gives T ln V for NA, SA and plain") {
    const Model m = uniform_filler(10);
    const auto oracle = testing::load_json("loss_oracle.json");
    const double expected = oracle["token_uniform_v10_t7"].get<double>();
    const auto ex = testing::tiny_example(3, m.config(), kSeven);
    ad::Tape t;
    const auto pv = m.bind(t);
    const auto ctx = m.encode(t, pv, ex.regions);
    CHECK(value(t, loss_na(t, pv, m, ctx, ex.tokens, ex.boxes)) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(value(t, loss_sa(t, pv, m, ctx, ex.tokens, ex.boxes)) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(value(t, loss_plain(t, pv, m, ctx, ex.tokens)) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(value(t, loss_ar(t, pv, m, ctx, ex.tokens)) == doctest::Approx(8 * std::log(10.0)).epsilon(1e-12));
  }

  TEST_CASE("certain filler gives zero loss") {
    Model m = uniform_filler(10);
    m.param("fill.out.b").value(0, 6) = 1e3;
    Example ex = testing::tiny_example(4, m.config(), kSeven);
    ex.tokens.assign(7, 6);
    ad::Tape t;
    const auto pv = m.bind(t);
    const auto ctx = m.encode(t, pv, ex.regions);
    CHECK(value(t, loss_na(t, pv, m, ctx, ex.tokens, ex.boxes)) == doctest::Approx(0.0));
    CHECK(value(t, loss_sa(t, pv, m, ctx, ex.tokens, ex.boxes)) == doctest::Approx(0.0));
  }

  TEST_CASE("SA loss of early boxes ignores later gold tokens") {
    const Model m(testing::small_config(), 6);
    const auto ex = testing::tiny_example(5, m.config(), kSeven);
    const FillCanvas a = sa_canvas(ex.tokens, kSeven);
    auto corrupted = ex.tokens;
    corrupted[5] = corrupted[5] == 4 ? 5 : 4;
    corrupted[6] = corrupted[6] == 4 ? 5 : 4;
    const FillCanvas b = sa_canvas(corrupted, kSeven);
    const Mat ctx = m.encode_regions(ex.regions);
    const auto mask = box_causal_mask(a.tags);
    const Mat pa = m.fill_forward(ctx, a, mask), pb = m.fill_forward(ctx, b, mask);
    CHECK((pa.topRows(5) - pb.topRows(5)).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("NA losses permute with positions inside a box") {
    Model m(testing::small_config(), 7);
    m.param("fill.pos_emb").value.setZero();
    m.param("fill.slot_pos_emb").value.setZero();
    const auto ex = testing::tiny_example(6, m.config(), kSeven);
    const Mat ctx = m.encode_regions(ex.regions);
    const Mat p = m.fill_forward(ctx, na_canvas(kSeven), all_visible_mask(7));
    // Every position of a box sees identical inputs once position tables are zero.
    CHECK((p.row(0) - p.row(2)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((p.row(3) - p.row(4)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("imitation values") {
    const auto oracle = testing::load_json("loss_oracle.json");
    const std::vector<TokenId> target1{1}, target0{0};
    const Mat sa = (Mat(1, 2) << 0.9, 0.1).finished();
    ad::Tape t;
    const auto logits = t.constant(Mat::Zero(1, 2));
    CHECK(value(t, loss_imit(t, logits, sa, target1, ImitMode::Full)) ==
          doctest::Approx(oracle["imit_full_half_vs_9_1"].get<double>()).epsilon(1e-12));
    CHECK(value(t, loss_imit(t, logits, sa, target1, ImitMode::Scalar)) ==
          doctest::Approx(oracle["imit_scalar_half_vs_9_1_target1"].get<double>()).epsilon(1e-12));
    CHECK(value(t, loss_imit(t, logits, sa, target0, ImitMode::Scalar)) ==
          doctest::Approx(oracle["imit_scalar_half_vs_9_1_target0"].get<double>()).epsilon(1e-12));

    Mat p(2, 3), s(2, 3);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) {
        p(r, c) = oracle["imit_full_two_rows_p"][r][c].get<double>();
        s(r, c) = oracle["imit_full_two_rows_s"][r][c].get<double>();
      }
    const std::vector<TokenId> two{0, 1};
    CHECK(value(t, loss_imit(t, t.constant(p.array().log().matrix()), s, two, ImitMode::Full)) ==
          doctest::Approx(oracle["imit_full_two_rows"].get<double>()).epsilon(1e-12));
    for (ImitMode mode : {ImitMode::Full, ImitMode::Scalar})
      CHECK(std::abs(value(t, loss_imit(t, t.constant(p.array().log().matrix()), p, two, mode))) < 1e-12);
  }

  TEST_CASE("full imitation is non-negative") {
    Rng rng(42);
    ad::Tape t(false);
    const std::vector<TokenId> targets{0, 3, 5};
    for (int trial = 0; trial < 1000; ++trial) {
      const Mat logits = testing::random_mat(3, 6, rng.next_u64(), 3.0);
      const Mat s = kernels::softmax_rows(testing::random_mat(3, 6, rng.next_u64(), 3.0));
      CHECK(value(t, loss_imit(t, t.constant(logits), s, targets, ImitMode::Full)) >= -1e-12);
    }
  }

  TEST_CASE("joint total is the component sum") {
    const Model m(testing::small_config(), 8);
    const auto xs = tiny_set(4, m.config());
    const auto batch = pointers(xs);
    for (TrainMode mode : {TrainMode::Joint, TrainMode::SaOnly, TrainMode::NaOnly, TrainMode::Ar, TrainMode::Plain}) {
      ad::Tape t;
      const auto pv = m.bind(t);
      LossBreakdown parts;
      const double total = value(t, batch_loss(t, pv, m, batch, {mode, ImitMode::Full}, &parts));
      CHECK(total == doctest::Approx(parts.total).epsilon(1e-14));
      CHECK(parts.total == doctest::Approx(parts.bound + parts.na + parts.sa + parts.imit + parts.ar).epsilon(1e-14));
      if (mode == TrainMode::Joint) CHECK(parts.imit > 0.0);
      if (mode == TrainMode::Ar) CHECK(parts.bound == 0.0);
    }
  }

  TEST_CASE("joint loss passes the gradient check") {
    Model m(testing::small_config(), 9);
    const auto xs = tiny_set(2, m.config());
    const auto batch = pointers(xs);
    // The SA side of the imitation term is a constant, so it is frozen at the base point.
    const auto targets = sa_targets(m, batch);
    LossOptions frozen;
    frozen.imit_targets = targets;
    {
      ad::Tape t;
      const auto pv = m.bind(t);
      CHECK(value(t, batch_loss(t, pv, m, batch, frozen)) == doctest::Approx(value(t, batch_loss(t, pv, m, batch, {}))).epsilon(1e-12));
    }
    const auto rep = grad_check(
        m, [&](ad::Tape& t, const ParamVars& pv) { return batch_loss(t, pv, m, batch, frozen); }, 1e-4, 1e-5, 10);
    INFO("max rel error " << rep.max_rel_error());
    CHECK(rep.passed());
    const auto imit = grad_check(
        m,
        [&](ad::Tape& t, const ParamVars& pv) {
          const Example& ex = *batch[0];
          const auto ctx = m.encode(t, pv, ex.regions);
          const FillCanvas c = na_canvas(ex.boxes);
          return loss_imit(t, m.fill_logits(t, pv, ctx, c, all_visible_mask(static_cast<int>(c.inputs.size()))),
                           targets[0], ex.tokens, ImitMode::Full);
        },
        1e-4, 1e-5, 10);
    INFO("imitation max rel error " << imit.max_rel_error());
    CHECK(imit.passed());
  }

  TEST_CASE("loss decreases over 50 steps on a 10-record corpus") {
    Model m(testing::small_config(), 10);
    const auto xs = tiny_set(10, m.config());
    TrainOptions o;
    o.batch = 10;
    o.adam.lr = 3e-3;
    Trainer tr(m, o);
    std::vector<double> totals;
    for (int e = 0; e < 50; ++e)
      for (const auto& s : tr.train_epoch(xs)) {
        CHECK(std::isfinite(s.loss.total));
        totals.push_back(s.loss.total);
      }
    REQUIRE(totals.size() == 50);
    CHECK(totals.back() < 0.75 * totals.front());
    CHECK(tr.optimizer().steps() == 50);
  }

  TEST_CASE("training is deterministic") {
    const auto run = [] {
      Model m(testing::small_config(), 11);
      const auto xs = tiny_set(6, m.config());
      TrainOptions o;
      o.batch = 4;
      Trainer tr(m, o);
      tr.train_epoch(xs);
      tr.train_epoch(xs);
      return m.params();
    };
    const auto a = run(), b = run();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].value == b[i].value);
  }

  TEST_CASE("scst advantages") {
    const auto oracle = testing::load_json("loss_oracle.json");
    const std::vector<double> r2{1.0, 0.0};
    CHECK(scst_advantages(r2) == oracle["scst_advantages_1_0"].get<std::vector<double>>());
    const auto r5 = oracle["scst_rewards_5"].get<std::vector<double>>();
    const auto want = oracle["scst_advantages_5"].get<std::vector<double>>();
    const auto got = scst_advantages(r5);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    CHECK(RLConfig{}.M == 5);
  }

  TEST_CASE("equal rewards leave the parameters unchanged") {
    for (Manner manner : {Manner::NA, Manner::SA}) {
      Model m(testing::small_config(), 12);
      const auto before = m.params();
      const auto xs = tiny_set(3, m.config());
      const auto batch = pointers(xs);
      const std::vector<RefSet> refs{{{"w4", "w5"}}, {{"w6"}}};
      const Vocab vocab = Vocab::from_words([] {
        auto w = Vocab().words();
        for (int i = kNumReserved; i < 12; ++i) w.push_back("w" + std::to_string(i));
        return w;
      }());
      const CiderD scorer(refs);
      RLConfig rl;
      rl.manner = manner;
      rl.reward = [](const std::vector<TokenId>&, const Example&) { return 0.7; };
      Adam adam(m, {1e-2});
      Rng rng(3);
      const auto res = scst_step(m, adam, batch, vocab, scorer, rl, rng);
      CHECK(res.mean_reward == doctest::Approx(0.7));
      CHECK(res.pseudo_loss == doctest::Approx(0.0));
      for (std::size_t i = 0; i < before.size(); ++i)
        CHECK((m.params()[i].value - before[i].value).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("unequal rewards move the parameters") {
    Model m(testing::small_config(), 13);
    const auto before = m.params();
    const auto xs = tiny_set(2, m.config());
    const auto batch = pointers(xs);
    const Vocab vocab = Vocab::from_words([] {
      auto w = Vocab().words();
      for (int i = kNumReserved; i < 12; ++i) w.push_back("w" + std::to_string(i));
      return w;
    }());
    const CiderD scorer(std::vector<RefSet>{{{"w4"}}, {{"w5"}}});
    RLConfig rl;
    rl.reward = [](const std::vector<TokenId>& s, const Example&) { return static_cast<double>(s[0] % 3); };
    Adam adam(m, {1e-3});
    Rng rng(4);
    scst_step(m, adam, batch, vocab, scorer, rl, rng);
    double moved = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i)
      moved = std::max(moved, (m.params()[i].value - before[i].value).cwiseAbs().maxCoeff());
    CHECK(moved > 1e-6);
  }

  TEST_CASE("distillation") {
    SynthConfig cfg;
    cfg.n_scenes = 30;
    const auto records = generate_synthetic_corpus(cfg, 8);

    SUBCASE("identity teacher keeps the corpus") {
      const auto out = distill_corpus([](const CaptionRecord& r) { return r.tokens; }, records);
      REQUIRE(out.size() == records.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i].tokens == records[i].tokens);
        CHECK(out[i].tree == records[i].tree);
      }
    }

    SUBCASE("same-length rewrites keep a consistent tree, others are dropped") {
      const auto out = distill_corpus(
          [](const CaptionRecord& r) {
            auto w = r.tokens;
            if (r.id.back() % 2) w.back() = "thing";
            else w.pop_back();
            return w;
          },
          records);
      CHECK(out.size() <= records.size());
      CHECK(!out.empty());
      for (const auto& r : out) {
        CHECK(r.tokens.back() == "thing");
        REQUIRE(r.tree);
        CHECK(leaves(parse_bracketed(*r.tree)) == r.tokens);
      }
    }
  }

  TEST_CASE("make_examples skips records without trees") {
    SynthConfig cfg;
    cfg.n_scenes = 5;
    cfg.d_r = 5;
    auto records = generate_synthetic_corpus(cfg, 9);
    records[2].tree.reset();
    const Vocab vocab = build_vocab(records, 1);
    auto mc = testing::small_config(static_cast<int>(vocab.size()));
    mc.max_len = 16;
    mc.max_box_len = 16;
    mc.max_boxes = 16;
    const auto set = make_examples(records, vocab, kFinestLevel, mc);
    CHECK(set.examples.size() == 4);
    CHECK(set.skipped == 1);
    for (const auto& ex : set.examples) CHECK(total_length(ex.boxes) == static_cast<int>(ex.tokens.size()));
  }

  TEST_CASE("smoke runs on the synthetic corpus") {
    SynthConfig sc;
    sc.n_scenes = 240;
    sc.d_r = 8;
    const auto records = generate_synthetic_corpus(sc, 21);
    const Vocab vocab = build_vocab(records, 1);
    ModelConfig mc = testing::small_config(static_cast<int>(vocab.size()), 16);
    mc.d_r = 8;
    mc.d_ff = 32;
    mc.max_len = 16;
    mc.max_boxes = 16;
    mc.max_box_len = 16;
    mc.init_range = 0.08;
    const auto set = make_examples(records, vocab, kFinestLevel, mc);
    const std::span<const Example> train(set.examples.data(), 200);
    std::vector<const Example*> held;
    for (std::size_t i = 200; i < set.examples.size(); ++i) held.push_back(&set.examples[i]);
    const auto na_loss = [&](const Model& m) {
      ad::Tape t(false);
      const auto pv = m.bind(t);
      LossBreakdown parts;
      batch_loss(t, pv, m, held, {TrainMode::NaOnly}, &parts);
      return parts.na;
    };

    SUBCASE("joint loss falls over 200 steps") {
      Model m(mc, 1);
      TrainOptions o;
      o.batch = 10;
      o.adam.lr = 1e-3;
      Trainer tr(m, o);
      std::vector<double> totals;
      for (int e = 0; e < 10; ++e)
        for (const auto& s : tr.train_epoch(train)) totals.push_back(s.loss.total);
      REQUIRE(totals.size() == 200);
      for (double x : totals) CHECK(std::isfinite(x));
      const auto mean = [&](std::size_t from) {
        double acc = 0.0;
        for (std::size_t i = from; i < from + 20; ++i) acc += totals[i];
        return acc / 20.0;
      };
      CHECK(mean(180) < 0.75 * mean(0));
      CHECK(mean(100) < mean(0));
      CHECK(mean(180) < mean(100));
    }

    SUBCASE("sa-only training leaves the NA path behind") {
      Model sa(mc, 2), na(mc, 2);
      const double before = na_loss(sa);
      TrainOptions o;
      o.batch = 10;
      o.adam.lr = 1e-3;
      o.loss.mode = TrainMode::SaOnly;
      Trainer tsa(sa, o);
      o.loss.mode = TrainMode::NaOnly;
      Trainer tna(na, o);
      for (int e = 0; e < 5; ++e) {
        tsa.train_epoch(train);
        tna.train_epoch(train);
      }
      const double after_sa = na_loss(sa), after_na = na_loss(na);
      MESSAGE("held-out NA loss: init " << before << ", after sa-only " << after_sa << ", after na-only " << after_na);
      CHECK(after_na < before);
      CHECK(after_na < after_sa);
    }
  }
}
