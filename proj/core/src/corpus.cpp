#include "bofi/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "bofi/boxes.hpp"
#include "bofi/error.hpp"
#include "bofi/log.hpp"
#include "bofi/rng.hpp"

namespace bofi {

using json = nlohmann::json;

Vocab::Vocab() {
  for (const char* w : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(w);
}

void Vocab::add(std::string word) {
  index_.emplace(word, static_cast<TokenId>(words_.size()));
  words_.push_back(std::move(word));
}

Vocab Vocab::from_words(std::vector<std::string> words) {
  Vocab v;
  if (words.size() < kNumReserved ||
      !std::equal(v.words_.begin(), v.words_.end(), words.begin()))
    throw DataError("vocabulary does not start with the reserved tokens");
  for (std::size_t i = kNumReserved; i < words.size(); ++i) {
    if (v.index_.contains(words[i])) throw DataError("duplicate vocabulary word '" + words[i] + "'");
    v.add(std::move(words[i]));
  }
  return v;
}

TokenId Vocab::id(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) return words_[kUnk];
  return words_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(std::string_view word) const { return index_.contains(std::string(word)); }

Vocab build_vocab(std::span<const std::vector<std::string>> sentences, int min_count) {
  if (min_count < 1) throw ConfigError("min_count must be >= 1");
  std::map<std::string, long> counts;
  for (const auto& s : sentences)
    for (const auto& w : s) ++counts[w];

  Vocab reserved;
  std::vector<std::pair<std::string, long>> kept;
  for (auto& [w, c] : counts)
    if (c >= min_count && !reserved.contains(w)) kept.emplace_back(w, c);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> words = reserved.words();
  for (auto& [w, c] : kept) words.push_back(w);
  return Vocab::from_words(std::move(words));
}

Vocab build_vocab(std::span<const CaptionRecord> records, int min_count) {
  std::vector<std::vector<std::string>> sentences;
  sentences.reserve(records.size());
  for (const auto& r : records) sentences.push_back(r.tokens);
  return build_vocab(sentences, min_count);
}

std::vector<TokenId> encode_tokens(std::span<const std::string> words, const Vocab& vocab) {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(vocab.id(w));
  return ids;
}

std::vector<std::string> decode_tokens(std::span<const TokenId> ids, const Vocab& vocab) {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (TokenId id : ids) words.push_back(vocab.word(id));
  return words;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

constexpr std::array kCategories = {"cube",  "sphere", "cylinder", "cone",  "pyramid", "ring",
                                    "box",   "ball",   "block",    "disk",  "bottle",  "cup",
                                    "vase",  "lamp",   "chair",    "table", "book",    "bowl",
                                    "plate", "clock",  "kettle",   "shoe",  "hat",     "bag"};
constexpr std::array kAttributes = {"red",    "blue",  "green", "yellow", "purple", "orange",
                                    "black",  "white", "gray",  "brown",  "pink",   "cyan"};
constexpr std::array kSizes = {"small", "large", "tiny", "big", "huge", "little"};
constexpr std::array kMaterials = {"metal", "wooden", "plastic", "glass", "rubber", "stone"};
// Relation phrases as word/TAG pairs.
constexpr std::array kRelations = {
    "sitting/VBG on/IN",         "placed/VBN next/JJ to/TO",  "lying/VBG beside/IN",
    "standing/VBG close/RB to/TO", "resting/VBG near/IN",     "sitting/VBG right/RB behind/IN",
    "leaning/VBG against/IN",    "placed/VBN far/RB from/IN", "floating/VBG above/IN",
    "hiding/VBG just/RB under/IN", "standing/VBG behind/IN",  "lying/VBG across/IN"};

constexpr std::uint64_t kEmbeddingSeed = 0xB0F1CA9ULL;

struct Placeholder {
  enum Kind { Obj, Attr, Size, Mat, Rel } kind;
  int slot = 0;  // 0-based object slot
};

std::optional<Placeholder> classify(std::string_view tok) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) {
        return std::isupper(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c));
      }))
    return std::nullopt;
  if (!std::isupper(static_cast<unsigned char>(tok.front()))) return std::nullopt;
  std::string_view stem = tok;
  int slot = 0;
  if (std::isdigit(static_cast<unsigned char>(stem.back()))) {
    const int digit = stem.back() - '0';
    if (digit < 1) throw ConfigError("bad placeholder slot in '" + std::string(tok) + "'");
    slot = digit - 1;
    stem.remove_suffix(1);
  }
  if (stem == "OBJ") return Placeholder{Placeholder::Obj, slot};
  if (stem == "ATTR") return Placeholder{Placeholder::Attr, slot};
  if (stem == "SIZE") return Placeholder{Placeholder::Size, slot};
  if (stem == "MAT") return Placeholder{Placeholder::Mat, slot};
  if (stem == "REL" && slot == 0) return Placeholder{Placeholder::Rel, 0};
  throw ConfigError("unknown template placeholder '" + std::string(tok) + "'");
}

ParseNode template_tree(std::string_view tmpl) {
  std::string_view t = tmpl;
  while (!t.empty() && std::isspace(static_cast<unsigned char>(t.front()))) t.remove_prefix(1);
  if (t.starts_with("(")) return parse_bracketed(t);

  std::vector<ParseNode> kids;
  std::istringstream in{std::string(t)};
  std::string w;
  while (in >> w) {
    std::string tag = "NN";
    if (w == "a" || w == "an" || w == "the") {
      tag = "DT";
    } else if (auto p = classify(w)) {
      if (p->kind == Placeholder::Rel) throw ConfigError("REL is not allowed in a flat template");
      tag = p->kind == Placeholder::Obj ? "NN" : "JJ";
    }
    kids.push_back(ParseNode::node(tag, {ParseNode::leaf(w)}));
  }
  if (kids.empty()) throw ConfigError("empty template");
  return ParseNode::node("NP", std::move(kids));
}

int max_slot(const ParseNode& n, bool& uses_rel) {
  if (n.is_leaf()) {
    auto p = classify(n.token);
    if (!p) return -1;
    if (p->kind == Placeholder::Rel) {
      uses_rel = true;
      return 2;  // the relation links slots 0 and 2
    }
    return p->slot;
  }
  int m = -1;
  for (const auto& c : n.children) m = std::max(m, max_slot(c, uses_rel));
  return m;
}

std::vector<ParseNode> relation_leaves(int relation) {
  std::vector<ParseNode> out;
  std::istringstream in{std::string(kRelations[static_cast<std::size_t>(relation)])};
  std::string item;
  while (in >> item) {
    const auto slash = item.find('/');
    out.push_back(ParseNode::node(item.substr(slash + 1), {ParseNode::leaf(item.substr(0, slash))}));
  }
  return out;
}

std::string slot_word(const Placeholder& p, const SceneSpec& scene) {
  if (p.slot >= static_cast<int>(scene.objects.size()))
    throw ConfigError("template references object slot " + std::to_string(p.slot + 1) +
                      " but the scene has " + std::to_string(scene.objects.size()));
  const auto& o = scene.objects[static_cast<std::size_t>(p.slot)];
  switch (p.kind) {
    case Placeholder::Obj: return kCategories[static_cast<std::size_t>(o.category)];
    case Placeholder::Attr: return kAttributes[static_cast<std::size_t>(o.attribute)];
    case Placeholder::Size: return kSizes[static_cast<std::size_t>(o.size)];
    case Placeholder::Mat: return kMaterials[static_cast<std::size_t>(o.material)];
    case Placeholder::Rel: break;
  }
  return {};
}

void substitute(ParseNode& n, const SceneSpec& scene) {
  std::vector<ParseNode> kids;
  for (auto& c : n.children) {
    if (c.is_leaf()) {
      auto p = classify(c.token);
      if (p && p->kind == Placeholder::Rel) {
        if (scene.relations.empty()) throw ConfigError("template uses REL but the scene has no relation");
        for (auto& r : relation_leaves(scene.relations.front().relation)) kids.push_back(std::move(r));
        continue;
      }
      if (p) c.token = slot_word(*p, scene);
      kids.push_back(std::move(c));
    } else {
      substitute(c, scene);
      kids.push_back(std::move(c));
    }
  }
  n.children = std::move(kids);
}

Mat embedding_table(int rows, int dim, std::uint64_t salt) {
  Rng rng(Rng::mix(kEmbeddingSeed, salt));
  Mat m(rows, dim);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < dim; ++j) m(i, j) = rng.normal();
  return m;
}

void check_range(const char* what, int n, std::size_t available) {
  if (n < 1 || static_cast<std::size_t>(n) > available)
    throw ConfigError(std::string(what) + " must be in [1, " + std::to_string(available) + "]");
}

}  // namespace

std::vector<std::string> SynthConfig::default_templates() {
  return {
      "(S (NP (NP (DT a) (JJ SIZE) (JJ ATTR) (NN OBJ)) (CC and) (NP (DT a) (JJ SIZE2) (JJ ATTR2) "
      "(NN OBJ2))) (VP (VP REL) (NP (DT the) (JJ SIZE3) (JJ ATTR3) (NN OBJ3))))",
      "(S (NP (DT a) (JJ SIZE) (JJ ATTR) (JJ MAT) (NN OBJ)) (VP (VP REL) (NP (DT the) (JJ ATTR3) "
      "(JJ MAT3) (NN OBJ3))) (PP (IN with) (NP (DT a) (JJ ATTR4) (NN OBJ4))))",
      "(S (NP (DT a) (JJ SIZE) (JJ ATTR) (NN OBJ)) (VP (VP REL) (NP (DT the) (JJ SIZE3) (JJ ATTR3) "
      "(NN OBJ3))) (PP (IN near) (NP (DT the) (JJ ATTR4) (NN OBJ4))))",
      "(S (NP (NP (DT a) (JJ ATTR) (NN OBJ)) (CC and) (NP (DT a) (JJ ATTR2) (NN OBJ2))) (VP (VP REL) "
      "(NP (DT the) (JJ SIZE3) (JJ ATTR3) (NN OBJ3))))",
  };
}

std::string render_template(std::string_view tmpl, const SceneSpec& scene) {
  ParseNode tree = template_tree(tmpl);
  if (tree.is_leaf()) throw ConfigError("template must be a tree");
  substitute(tree, scene);
  return to_bracketed(tree);
}

std::vector<CaptionRecord> generate_synthetic_corpus(const SynthConfig& config, std::uint64_t seed) {
  if (config.n_scenes < 1) throw ConfigError("n_scenes must be >= 1");
  if (config.templates.empty()) throw ConfigError("template set is empty");
  if (config.n_refs < 1) throw ConfigError("n_refs must be >= 1");
  if (config.d_r < 1) throw ConfigError("d_r must be >= 1");
  check_range("n_categories", config.n_categories, kCategories.size());
  check_range("n_attributes", config.n_attributes, kAttributes.size());
  check_range("n_sizes", config.n_sizes, kSizes.size());
  check_range("n_materials", config.n_materials, kMaterials.size());
  check_range("n_relations", config.n_relations, kRelations.size());

  int n_objects = 1;
  bool uses_rel = false;
  for (const auto& t : config.templates) n_objects = std::max(n_objects, max_slot(template_tree(t), uses_rel) + 1);

  const int d = config.d_r;
  const Mat cat_emb = embedding_table(config.n_categories, d, 1);
  const Mat attr_emb = embedding_table(config.n_attributes, d, 2);
  const Mat size_emb = embedding_table(config.n_sizes, d, 3);
  const Mat mat_emb = embedding_table(config.n_materials, d, 4);
  const Mat rel_emb = embedding_table(config.n_relations, d, 5);
  const Mat slot_emb = embedding_table(n_objects + 1, d, 6);

  std::vector<CaptionRecord> out;
  out.reserve(static_cast<std::size_t>(config.n_scenes));
  for (int s = 0; s < config.n_scenes; ++s) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(s)));
    SceneSpec scene;
    scene.seed = Rng::mix(seed, static_cast<std::uint64_t>(s));
    for (int i = 0; i < n_objects; ++i) {
      SceneObject o;
      o.category = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.n_categories)));
      o.attribute = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.n_attributes)));
      o.size = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.n_sizes)));
      o.material = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.n_materials)));
      scene.objects.push_back(o);
    }
    if (uses_rel)
      scene.relations.push_back(
          {0, static_cast<int>(rng.below(static_cast<std::uint64_t>(config.n_relations))), 2});

    CaptionRecord rec;
    rec.id = "synth-" + std::to_string(s);
    for (int r = 0; r < config.n_refs; ++r) {
      const auto& tmpl = config.templates[rng.below(config.templates.size())];
      const std::string tree = render_template(tmpl, scene);
      auto words = leaves(parse_bracketed(tree));
      if (r == 0) {
        rec.tokens = words;
        rec.tree = tree;
      }
      rec.refs.push_back(std::move(words));
    }

    const int n_regions = n_objects + (uses_rel ? 1 : 0);
    rec.regions.resize(n_regions, d);
    for (int i = 0; i < n_objects; ++i) {
      const auto& o = scene.objects[static_cast<std::size_t>(i)];
      rec.regions.row(i) = cat_emb.row(o.category) + attr_emb.row(o.attribute) + size_emb.row(o.size) +
                           mat_emb.row(o.material) + slot_emb.row(i);
    }
    if (uses_rel) rec.regions.row(n_objects) = rel_emb.row(scene.relations.front().relation) + slot_emb.row(n_objects);
    for (int i = 0; i < n_regions; ++i)
      for (int j = 0; j < d; ++j) rec.regions(i, j) += config.noise * rng.normal();
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

void write_dataset(std::span<const CaptionRecord> records, std::ostream& out) {
  for (const auto& r : records) {
    json j;
    j["id"] = r.id;
    j["tokens"] = r.tokens;
    j["tree"] = r.tree ? json(*r.tree) : json(nullptr);
    json regions = json::array();
    for (Eigen::Index i = 0; i < r.regions.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index c = 0; c < r.regions.cols(); ++c) row.push_back(r.regions(i, c));
      regions.push_back(std::move(row));
    }
    j["regions"] = std::move(regions);
    j["refs"] = r.refs;
    out << j.dump() << '\n';
  }
}

void write_dataset(std::span<const CaptionRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_dataset(records, out);
}

namespace {

CaptionRecord record_from_json(const json& j, long line_no, int max_len) {
  const auto where = [&](const std::string& id) {
    return "line " + std::to_string(line_no) + (id.empty() ? "" : " (record '" + id + "')");
  };
  if (!j.is_object()) throw DataError(where("") + ": expected a JSON object");
  CaptionRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.tokens = j.at("tokens").get<std::vector<std::string>>();
    if (j.contains("tree") && !j.at("tree").is_null()) r.tree = j.at("tree").get<std::string>();
    if (j.contains("refs")) r.refs = j.at("refs").get<std::vector<std::vector<std::string>>>();
    const auto rows = j.at("regions").get<std::vector<std::vector<double>>>();
    if (rows.empty()) throw DataError(where(r.id) + ": record has no regions");
    const std::size_t dim = rows.front().size();
    if (dim == 0) throw DataError(where(r.id) + ": region rows are empty");
    r.regions.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != dim)
        throw DataError(where(r.id) + ": region " + std::to_string(i) + " has dimension " +
                        std::to_string(rows[i].size()) + ", expected " + std::to_string(dim));
      for (std::size_t c = 0; c < dim; ++c)
        r.regions(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
  } catch (const json::exception& e) {
    throw DataError(where(r.id) + ": " + e.what());
  }
  if (r.tokens.empty()) throw DataError(where(r.id) + ": caption has no tokens");

  if (static_cast<int>(r.tokens.size()) > max_len) {
    r.tokens.resize(static_cast<std::size_t>(max_len));
    r.tree.reset();
  }
  if (r.tree) {
    try {
      if (leaves(parse_bracketed(*r.tree)) != r.tokens) {
        log::debug("record '" + r.id + "': tree leaves differ from tokens, dropping tree");
        r.tree.reset();
      }
    } catch (const TreeParseError& e) {
      log::debug("record '" + r.id + "': unparsable tree (" + e.what() + "), dropping tree");
      r.tree.reset();
    }
  }
  return r;
}

}  // namespace

std::vector<CaptionRecord> read_dataset(std::istream& in, int max_len) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  std::vector<CaptionRecord> out;
  std::string line;
  long line_no = 0;
  std::optional<Eigen::Index> dim;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); }))
      continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    CaptionRecord r = record_from_json(j, line_no, max_len);
    if (!dim) dim = r.regions.cols();
    if (r.regions.cols() != *dim)
      throw DataError("record '" + r.id + "': region dimension " + std::to_string(r.regions.cols()) +
                      " differs from the dataset's " + std::to_string(*dim));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<CaptionRecord> read_dataset(const std::filesystem::path& path, int max_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return read_dataset(in, max_len);
}

}  // namespace bofi
