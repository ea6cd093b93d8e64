#include <doctest.h>

#include <algorithm>
#include <numeric>

#include <bofi/decode.hpp>

#include "../helpers.hpp"

using namespace bofi;
using testing::FakeModel;

namespace {

FakeModel fake(std::vector<BoxSpec> boxes, int max_len = 16) {
  FakeModel m;
  m.cfg.max_len = max_len;
  m.cfg.max_box_len = 16;
  m.cfg.max_boxes = 16;
  m.boxes = std::move(boxes);
  return m;
}

const Mat kCtx = Mat::Zero(1, 1);

}  // namespace

TEST_SUITE("decode") {
  TEST_CASE("bounding stops at EOB") {
    const auto m = fake({{BoxType::NP, 2}, {BoxType::VP, 1}, {BoxType::NP, 3}});
    const auto r = decode_bounding(m, kCtx, 16);
    CHECK(r.boxes == BoundingSequence{{BoxType::NP, 2}, {BoxType::VP, 1}, {BoxType::NP, 3}});
    CHECK(r.calls == 4);
    CHECK(r.stopped_by_eob);
  }

  TEST_CASE("bounding clamps to max_len and drops the empty box") {
    const auto m = fake({{BoxType::NP, 8}, {BoxType::VP, 8}, {BoxType::NP, 8}});
    const auto r = decode_bounding(m, kCtx, 16);
    CHECK(r.boxes == BoundingSequence{{BoxType::NP, 8}, {BoxType::VP, 8}});
    CHECK(r.calls == 3);
    CHECK(r.dropped_final);
    const auto t = fake({{BoxType::NP, 8}, {BoxType::VP, 5}, {BoxType::NP, 8}});
    CHECK(decode_bounding(t, kCtx, 16).boxes.back() == BoxSpec{BoxType::NP, 3});
  }

  TEST_CASE("bounding honours max_boxes") {
    const auto m = fake(std::vector<BoxSpec>(10, {BoxType::NP, 1}));
    const auto r = decode_bounding(m, kCtx, 4);
    CHECK(r.boxes.size() == 4);
    CHECK(r.calls == 4);
    CHECK_FALSE(r.stopped_by_eob);
  }

  TEST_CASE("empty bounding throws unless EOB is masked") {
    const auto m = fake({});
    CHECK_THROWS_AS(decode_bounding(m, kCtx, 16), EmptyBoundingError);
    const auto r = decode_bounding(m, kCtx, 16, true);
    CHECK(r.boxes == BoundingSequence{{BoxType::NP, 1}});
    CHECK(r.calls == 2);
  }

  TEST_CASE("generate retries an empty bounding and itemizes the cost") {
    const auto m = fake({});
    const auto t = generate(m, kCtx, {});
    CHECK(t.model_calls.bounding == 3);
    CHECK(t.bounding_overhead == 2);
    CHECK(t.model_calls.filling == 1);
    CHECK(t.tokens.size() == 1);
  }

  TEST_CASE("copy counts examples") {
    CHECK(copy_counts(2, 5) == std::vector<int>{2, 3});
    CHECK(copy_counts(4, 2) == std::vector<int>{0, 0, 1, 1});
    CHECK(copy_counts(3, 3) == std::vector<int>{1, 1, 1});
    const std::vector<TokenId> two{7, 8}, three{5, 6, 7}, four{1, 2, 3, 4};
    CHECK(position_wise_copy(two, 5) == std::vector<TokenId>{7, 7, 8, 8, 8});
    CHECK(position_wise_copy(three, 3) == three);
    CHECK(position_wise_copy(four, 2) == std::vector<TokenId>{3, 4});
    CHECK_THROWS(copy_counts(0, 3));
  }

  TEST_CASE("copy counts over all lengths up to 16") {
    for (int lp = 1; lp <= 16; ++lp) {
      for (int ln = 1; ln <= 16; ++ln) {
        const auto n = copy_counts(lp, ln);
        REQUIRE(n.size() == static_cast<std::size_t>(lp));
        CHECK(std::accumulate(n.begin(), n.end(), 0) == ln);
        const auto [lo, hi] = std::minmax_element(n.begin(), n.end());
        CHECK(*hi - *lo <= 1);
        CHECK(std::is_sorted(n.begin(), n.end()));
      }
    }
  }

  TEST_CASE("NA fills every slot in one call from a masked canvas") {
    const auto m = fake({});
    const BoundingSequence b{{BoxType::NP, 3}, {BoxType::VP, 2}, {BoxType::NP, 2}};
    const auto t = decode_na(m, kCtx, b);
    CHECK(t.model_calls.filling == 1);
    CHECK(t.tokens.size() == 7);
    REQUIRE(m.log->size() == 1);
    CHECK(m.log->front().inputs == std::vector<TokenId>(7, kMask));
    CHECK(m.log->front().tags == slot_tags(b));
    CHECK(*t.boxes_used == b);
  }

  TEST_CASE("SA fills box by box from copied inputs") {
    const auto m = fake({});
    const BoundingSequence b{{BoxType::NP, 2}, {BoxType::VP, 3}, {BoxType::NP, 1}};
    const auto t = decode_sa(m, kCtx, b);
    CHECK(t.model_calls.filling == 3);
    REQUIRE(t.tokens.size() == 6);
    REQUIRE(m.log->size() == 3);
    const auto& log = *m.log;
    CHECK(log[0].inputs == std::vector<TokenId>{kBos, kBos});
    CHECK(log[1].inputs == position_wise_copy(std::span(t.tokens).first(2), 3));
    CHECK(log[2].inputs == position_wise_copy(std::span(t.tokens).subspan(2, 3), 1));
    CHECK(log[1].offset == 2);
    CHECK(log[2].offset == 5);
  }

  TEST_CASE("SA over singleton boxes sees exactly the generated prefix") {
    const auto m = fake({});
    const BoundingSequence b(5, {BoxType::OTHER, 1});
    const auto t = decode_sa(m, kCtx, b);
    const auto& log = *m.log;
    for (std::size_t step = 1; step < log.size(); ++step) {
      CHECK(log[step].offset == static_cast<int>(step));
      CHECK(log[step].inputs == std::vector<TokenId>{t.tokens[step - 1]});
    }
  }

  TEST_CASE("AR greedy stops on EOS") {
    auto m = fake({});
    m.eos_position = 4;
    const auto t = decode_ar(m, kCtx);
    CHECK(t.tokens.size() == 4);
    CHECK(t.model_calls.filling == 5);
    CHECK(t.model_calls.bounding == 0);
    CHECK(t.tokens == std::vector<TokenId>{m.token_at(0), m.token_at(1), m.token_at(2), m.token_at(3)});
    auto never = fake({}, 10);
    const auto capped = decode_ar(never, kCtx);
    CHECK(capped.tokens.size() == 10);
    CHECK(capped.model_calls.filling == 10);
  }

  TEST_CASE("user boxes skip bounding") {
    const auto m = fake({{BoxType::NP, 2}});
    GenerateOptions o;
    o.manner = Manner::SA;
    o.boxes = BoundingSequence{{BoxType::NP, 1}, {BoxType::VP, 2}, {BoxType::NP, 1}, {BoxType::OTHER, 2}};
    const auto t = generate(m, kCtx, o);
    CHECK(t.model_calls.bounding == 0);
    CHECK(t.model_calls.filling == 4);
    CHECK(t.tokens.size() == 6);
    CHECK(m.bounding_calls == 0);
  }

  TEST_CASE("call ratio for T=16 against N=5") {
    auto m = fake({{BoxType::NP, 3}, {BoxType::VP, 3}, {BoxType::NP, 3}, {BoxType::VP, 3}, {BoxType::NP, 4}});
    const auto na = generate(m, kCtx, {});
    CHECK(na.model_calls.total() == 7);
    CHECK(na.bounding_overhead == 1);
    const auto ar = decode_ar(m, kCtx);
    CHECK(ar.model_calls.total() == 16);
    CHECK(static_cast<double>(ar.model_calls.total()) / static_cast<double>(na.model_calls.total()) ==
          doctest::Approx(16.0 / 7.0));
  }

  TEST_CASE("oversized boxes are data errors") {
    const auto m = fake({}, 8);
    CHECK_THROWS_AS(decode_na(m, kCtx, BoundingSequence{{BoxType::NP, 5}, {BoxType::VP, 5}}), DataError);
    CHECK_THROWS_AS(decode_sa(m, kCtx, BoundingSequence{}), DataError);
  }

  TEST_CASE("argmax skips excluded ids and prefers the lowest on ties") {
    const std::vector<double> p{0.4, 0.1, 0.4, 0.1};
    const int ex0[] = {0};
    CHECK(argmax_excluding(p, {}) == 0);
    CHECK(argmax_excluding(p, ex0) == 2);
  }

  TEST_CASE("real model identities") {
    const Model m(testing::small_config(16), 3);
    const Mat regions = testing::random_mat(3, 5, 4);
    const Mat ctx = m.encode_regions(regions);

    SUBCASE("beam 1 equals greedy") {
      const auto g = decode_ar(m, ctx, 1), b = decode_beam(m, ctx, 1);
      CHECK(g.tokens == b.tokens);
      CHECK(g.model_calls.filling == b.model_calls.filling);
    }

    SUBCASE("beam scores are sorted at every step") {
      const auto t = decode_ar(m, ctx, 3);
      CHECK(!t.beam_scores.empty());
      for (const auto& s : t.beam_scores) {
        CHECK(s.size() <= 3);
        CHECK(std::is_sorted(s.rbegin(), s.rend()));
      }
      CHECK(t.hypothesis_evals >= t.model_calls.filling);
      CHECK(t.model_calls.filling == static_cast<long>(t.beam_scores.size()));
    }

    SUBCASE("NA and SA call identities with predicted boxes") {
      for (Manner manner : {Manner::NA, Manner::SA}) {
        GenerateOptions o;
        o.manner = manner;
        const auto t = generate(m, regions, o);
        REQUIRE(t.boxes_used);
        const long n = static_cast<long>(t.boxes_used->size());
        CHECK(static_cast<int>(t.tokens.size()) == total_length(*t.boxes_used));
        CHECK(t.model_calls.bounding == n + t.bounding_overhead);
        CHECK(t.model_calls.filling == (manner == Manner::NA ? 1 : n));
        const auto again = generate(m, regions, o);
        CHECK(again.tokens == t.tokens);
      }
    }

    SUBCASE("different boxes give different captions") {
      GenerateOptions a, b;
      a.boxes = BoundingSequence{{BoxType::NP, 3}, {BoxType::VP, 2}, {BoxType::NP, 2}};
      b.boxes = BoundingSequence{{BoxType::VP, 1}, {BoxType::OTHER, 4}};
      CHECK(generate(m, regions, a).tokens != generate(m, regions, b).tokens);
    }

    SUBCASE("plain tags use one OTHER box") {
      GenerateOptions o;
      o.boxes = BoundingSequence{{BoxType::NP, 2}, {BoxType::VP, 2}};
      o.plain_tags = true;
      const auto t = generate(m, regions, o);
      CHECK(*t.boxes_used == BoundingSequence{{BoxType::OTHER, 4}});
    }
  }
}
