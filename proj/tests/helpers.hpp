#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include <bofi/decode.hpp>
#include <bofi/model.hpp>
#include <bofi/rng.hpp>
#include <bofi/train.hpp>

namespace testing {

inline std::filesystem::path data_dir() { return BOFI_TEST_DATA_DIR; }

inline nlohmann::json load_json(const std::string& name) {
  std::ifstream in(data_dir() / name);
  return nlohmann::json::parse(in);
}

inline bofi::ModelConfig small_config(int vocab = 12, int d = 8) {
  bofi::ModelConfig c;
  c.vocab_size = vocab;
  c.d = d;
  c.n_enc = 1;
  c.n_dec = 1;
  c.heads = 2;
  c.d_ff = 12;
  c.d_r = 5;
  c.max_len = 10;
  c.max_boxes = 6;
  c.max_box_len = 6;
  c.init_range = 0.3;
  return c;
}

inline bofi::Mat random_mat(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
  bofi::Rng rng(seed);
  bofi::Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// One block handed to a filling cursor.
struct AppendLog {
  std::vector<bofi::TokenId> inputs;
  std::vector<bofi::SlotTag> tags;
  int offset = 0;
};

/// Scripted StepModel: bounding emits `boxes` then EOB (or EOB at `eob_step`);
/// filling puts all mass on token_at(position), and on EOS from `eos_position`.
class FakeModel : public bofi::StepModel {
 public:
  bofi::ModelConfig cfg = small_config(20);
  std::vector<bofi::BoxSpec> boxes;
  int eos_position = 1 << 20;
  mutable std::shared_ptr<std::vector<AppendLog>> log = std::make_shared<std::vector<AppendLog>>();
  mutable int bounding_calls = 0;

  bofi::TokenId token_at(int pos) const { return static_cast<bofi::TokenId>(4 + pos % (cfg.vocab_size - 4)); }

  const bofi::ModelConfig& config() const override { return cfg; }
  bofi::Mat encode_regions(const bofi::Mat& regions) const override { return regions; }

  std::unique_ptr<bofi::BoundingCursor> start_bounding(const bofi::Mat&) const override {
    struct C : bofi::BoundingCursor {
      const FakeModel* m;
      std::size_t step_no = 0;
      bofi::BoxDistributions step(const std::optional<bofi::BoxSpec>&) override {
        ++m->bounding_calls;
        bofi::BoxDistributions d;
        d.type.assign(bofi::kNumBoxTypes, 0.0);
        d.length.assign(static_cast<std::size_t>(m->cfg.max_box_len), 0.0);
        if (step_no < m->boxes.size()) {
          d.type[static_cast<std::size_t>(m->boxes[step_no].type)] = 1.0;
          d.length[static_cast<std::size_t>(m->boxes[step_no].length - 1)] = 1.0;
        } else {
          d.type[static_cast<std::size_t>(bofi::BoxType::EOB)] = 0.6;
          d.type[0] = 0.4;
          d.length[0] = 1.0;
        }
        ++step_no;
        return d;
      }
    };
    auto c = std::make_unique<C>();
    c->m = this;
    return c;
  }

  std::unique_ptr<bofi::FillingCursor> start_filling(const bofi::Mat&) const override {
    struct C : bofi::FillingCursor {
      const FakeModel* m;
      int len = 0;
      bofi::Mat append(std::span<const bofi::TokenId> in, std::span<const bofi::SlotTag> tags) override {
        m->log->push_back({{in.begin(), in.end()}, {tags.begin(), tags.end()}, len});
        bofi::Mat p = bofi::Mat::Constant(static_cast<Eigen::Index>(in.size()), m->cfg.vocab_size, 1e-3);
        for (std::size_t i = 0; i < in.size(); ++i) {
          const int pos = len + static_cast<int>(i);
          p(static_cast<Eigen::Index>(i), pos >= m->eos_position ? bofi::kEos : m->token_at(pos)) = 1.0;
        }
        p.array().colwise() /= p.rowwise().sum().array();
        len += static_cast<int>(in.size());
        return p;
      }
      int length() const override { return len; }
      std::unique_ptr<bofi::FillingCursor> clone() const override { return std::make_unique<C>(*this); }
    };
    auto c = std::make_unique<C>();
    c->m = this;
    return c;
  }
};

/// A tiny supervised example over the small config.
inline bofi::Example tiny_example(std::uint64_t seed, const bofi::ModelConfig& cfg,
                                  bofi::BoundingSequence boxes = {{bofi::BoxType::NP, 2},
                                                                  {bofi::BoxType::VP, 1},
                                                                  {bofi::BoxType::NP, 2}}) {
  bofi::Example ex;
  ex.id = "tiny-" + std::to_string(seed);
  ex.regions = random_mat(3, cfg.d_r, seed);
  bofi::Rng rng(seed + 17);
  for (int i = 0; i < bofi::total_length(boxes); ++i)
    ex.tokens.push_back(static_cast<bofi::TokenId>(bofi::kNumReserved + rng.below(cfg.vocab_size - bofi::kNumReserved)));
  ex.boxes = std::move(boxes);
  return ex;
}

}  // namespace testing
