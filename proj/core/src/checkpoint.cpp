#include <fstream>

#include <json.hpp>

#include "bofi/error.hpp"
#include "bofi/model.hpp"

namespace bofi {

using json = nlohmann::json;

namespace {

constexpr const char* kFormat = "bofi-checkpoint";
constexpr int kVersion = 1;

json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d", c.d},           {"n_enc", c.n_enc},
          {"n_dec", c.n_dec},           {"heads", c.heads},   {"d_ff", c.d_ff},
          {"d_r", c.d_r},               {"max_len", c.max_len}, {"max_boxes", c.max_boxes},
          {"max_box_len", c.max_box_len}, {"init_range", c.init_range}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d = j.at("d").get<int>();
  c.n_enc = j.at("n_enc").get<int>();
  c.n_dec = j.at("n_dec").get<int>();
  c.heads = j.at("heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.d_r = j.at("d_r").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.max_boxes = j.at("max_boxes").get<int>();
  c.max_box_len = j.at("max_box_len").get<int>();
  c.init_range = j.at("init_range").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const Vocab& vocab, const std::filesystem::path& path) {
  json params = json::array();
  for (const auto& p : model.params()) {
    const Mat& m = p.value;
    params.push_back({{"name", p.name},
                      {"shape", {m.rows(), m.cols()}},
                      {"data", std::vector<double>(m.data(), m.data() + m.size())}});
  }
  const json j = {{"format", kFormat},
                  {"version", kVersion},
                  {"config", config_json(model.config())},
                  {"vocab", vocab.words()},
                  {"params", std::move(params)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    if (j.at("format") != kFormat) throw DataError("not a bofi checkpoint: " + path.string());
    if (j.at("version").get<int>() != kVersion)
      throw DataError("unsupported checkpoint version " + j.at("version").dump());
    ModelConfig cfg = config_from_json(j.at("config"));
    Vocab vocab = Vocab::from_words(j.at("vocab").get<std::vector<std::string>>());
    if (static_cast<int>(vocab.size()) != cfg.vocab_size)
      throw DataError("checkpoint vocabulary size disagrees with its config");
    Model model(cfg, 0);
    const json& params = j.at("params");
    if (params.size() != model.params().size())
      throw DataError("checkpoint has " + std::to_string(params.size()) + " parameters, model expects " +
                      std::to_string(model.params().size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const json& pj = params[i];
      Param& p = model.params()[i];
      if (pj.at("name").get<std::string>() != p.name)
        throw DataError("checkpoint parameter " + std::to_string(i) + " is '" + pj.at("name").get<std::string>() +
                        "', expected '" + p.name + "'");
      const auto shape = pj.at("shape").get<std::vector<long>>();
      if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols())
        throw DataError("shape mismatch for parameter '" + p.name + "'");
      const auto data = pj.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != p.value.size())
        throw DataError("data size mismatch for parameter '" + p.name + "'");
      std::copy(data.begin(), data.end(), p.value.data());
    }
    return Checkpoint{std::move(model), std::move(vocab)};
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("checkpoint " + path.string() + " has an invalid config: " + e.what());
  }
}

}  // namespace bofi
