#include "bofi/boxes.hpp"

#include <cctype>
#include <charconv>
#include <functional>
#include <sstream>

namespace bofi {

ParseNode ParseNode::leaf(std::string token) {
  ParseNode n;
  n.token = std::move(token);
  return n;
}

ParseNode ParseNode::node(std::string label, std::vector<ParseNode> children) {
  ParseNode n;
  n.label = std::move(label);
  n.children = std::move(children);
  return n;
}

TreeParseError::TreeParseError(const std::string& what, std::size_t offset)
    : DataError(what + " at offset " + std::to_string(offset)), offset_(offset) {}

namespace {

class BracketReader {
 public:
  explicit BracketReader(std::string_view text) : text_(text) {}

  ParseNode read_tree() {
    skip_space();
    if (pos_ >= text_.size()) throw TreeParseError("empty tree", pos_);
    ParseNode tree = read_node();
    skip_space();
    if (pos_ < text_.size()) throw TreeParseError("trailing garbage", pos_);
    return tree;
  }

 private:
  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  std::string read_atom() {
    const std::size_t start = pos_;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '(' || c == ')' || std::isspace(static_cast<unsigned char>(c))) break;
      ++pos_;
    }
    return std::string(text_.substr(start, pos_ - start));
  }

  ParseNode read_node() {
    if (text_[pos_] == ')') throw TreeParseError("unexpected ')'", pos_);
    if (text_[pos_] != '(') return ParseNode::leaf(read_atom());

    const std::size_t open = pos_;
    ++pos_;
    skip_space();
    if (pos_ >= text_.size()) throw TreeParseError("unbalanced parentheses", pos_);
    std::string label;
    if (text_[pos_] != '(' && text_[pos_] != ')') label = read_atom();

    std::vector<ParseNode> children;
    for (;;) {
      skip_space();
      if (pos_ >= text_.size()) throw TreeParseError("unbalanced parentheses", pos_);
      if (text_[pos_] == ')') break;
      children.push_back(read_node());
    }
    if (children.empty()) throw TreeParseError("empty constituent", open);
    ++pos_;  // ')'
    return ParseNode::node(std::move(label), std::move(children));
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

void write_bracketed(const ParseNode& n, std::string& out) {
  if (n.is_leaf()) {
    out += n.token;
    return;
  }
  out += '(';
  out += n.label;
  for (const auto& c : n.children) {
    out += ' ';
    write_bracketed(c, out);
  }
  out += ')';
}

void collect_leaves(const ParseNode& n, std::vector<std::string>& out) {
  if (n.is_leaf()) {
    out.push_back(n.token);
    return;
  }
  for (const auto& c : n.children) collect_leaves(c, out);
}

std::size_t leaf_count(const ParseNode& n) {
  if (n.is_leaf()) return 1;
  std::size_t k = 0;
  for (const auto& c : n.children) k += leaf_count(c);
  return k;
}

bool is_phrase(const ParseNode& n) {
  if (n.is_leaf()) return false;
  const BoxType t = normalize_label(n.label);
  return t == BoxType::NP || t == BoxType::VP || t == BoxType::CP;
}

bool contains_phrase(const ParseNode& n) {
  if (n.is_leaf()) return false;
  if (is_phrase(n)) return true;
  for (const auto& c : n.children)
    if (contains_phrase(c)) return true;
  return false;
}

bool phrase_below(const ParseNode& n) {
  for (const auto& c : n.children)
    if (contains_phrase(c)) return true;
  return false;
}

class Segmenter {
 public:
  explicit Segmenter(int level) : level_(level) {}

  void visit(const ParseNode& n, int depth) {
    if (emits_whole(n, depth)) {
      emit(n, false);
      return;
    }
    bool prev_direct_other = false;
    for (const auto& c : n.children) {
      if (emits_whole(c, depth + 1)) {
        emit(c, prev_direct_other);
        prev_direct_other = out_.boxes.back().type == BoxType::OTHER;
      } else {
        visit(c, depth + 1);
        prev_direct_other = false;
      }
    }
  }

  Segmentation take() { return std::move(out_); }

 private:
  bool emits_whole(const ParseNode& n, int depth) const {
    if (n.is_leaf()) return true;
    if (level_ != kFinestLevel && depth >= level_) return true;
    return !phrase_below(n);
  }

  void emit(const ParseNode& n, bool merge_with_prev) {
    const std::size_t len = leaf_count(n);
    const BoxType type = n.is_leaf() ? BoxType::OTHER : normalize_label(n.label);
    if (merge_with_prev && type == BoxType::OTHER) {
      out_.boxes.back().length += static_cast<int>(len);
      out_.spans.back().end += len;
    } else {
      out_.boxes.push_back({type, static_cast<int>(len)});
      out_.spans.push_back({cursor_, cursor_ + len});
    }
    cursor_ += len;
  }

  int level_;
  std::size_t cursor_ = 0;
  Segmentation out_;
};

}  // namespace

ParseNode parse_bracketed(std::string_view text) { return BracketReader(text).read_tree(); }

std::string to_bracketed(const ParseNode& tree) {
  std::string out;
  write_bracketed(tree, out);
  return out;
}

std::vector<std::string> leaves(const ParseNode& tree) {
  std::vector<std::string> out;
  collect_leaves(tree, out);
  return out;
}

std::string_view box_type_name(BoxType t) {
  switch (t) {
    case BoxType::NP: return "NP";
    case BoxType::VP: return "VP";
    case BoxType::CP: return "CP";
    case BoxType::OTHER: return "OTHER";
    case BoxType::EOB: return "EOB";
  }
  return "OTHER";
}

BoxType box_type_from_name(std::string_view name) {
  for (int i = 0; i < kNumBoxTypes; ++i) {
    const auto t = static_cast<BoxType>(i);
    if (box_type_name(t) == name) return t;
  }
  throw ConfigError("unknown box type '" + std::string(name) + "'");
}

BoxType normalize_label(std::string_view label) {
  if (label.starts_with("NP")) return BoxType::NP;
  if (label.starts_with("VP")) return BoxType::VP;
  if (label == "CC" || label == "CONJP" || label == "CP") return BoxType::CP;
  return BoxType::OTHER;
}

int total_length(std::span<const BoxSpec> boxes) {
  int t = 0;
  for (const auto& b : boxes) t += b.length;
  return t;
}

void validate_bounding(std::span<const BoxSpec> boxes, int max_boxes, int max_box_len) {
  if (boxes.empty()) throw DataError("bounding sequence is empty");
  if (static_cast<int>(boxes.size()) > max_boxes)
    throw DataError("bounding sequence has " + std::to_string(boxes.size()) + " boxes, limit " +
                    std::to_string(max_boxes));
  for (const auto& b : boxes) {
    if (b.type == BoxType::EOB) throw DataError("EOB inside a bounding sequence");
    if (b.length < 1 || b.length > max_box_len)
      throw DataError("box length " + std::to_string(b.length) + " outside [1, " +
                      std::to_string(max_box_len) + "]");
  }
}

Segmentation extract_boxes(const ParseNode& tree, int level) {
  if (level == 0 || level < kFinestLevel)
    throw ConfigError("split level must be >= 1 or -1, got " + std::to_string(level));
  Segmenter seg(level);
  seg.visit(tree, 0);
  return seg.take();
}

std::vector<BoxType> expand_bounding(std::span<const BoxSpec> boxes) {
  std::vector<BoxType> tags;
  tags.reserve(static_cast<std::size_t>(total_length(boxes)));
  for (const auto& b : boxes) tags.insert(tags.end(), static_cast<std::size_t>(b.length), b.type);
  return tags;
}

std::vector<SlotTag> slot_tags(std::span<const BoxSpec> boxes) {
  std::vector<SlotTag> tags;
  tags.reserve(static_cast<std::size_t>(total_length(boxes)));
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (int p = 0; p < boxes[i].length; ++p)
      tags.push_back({boxes[i].type, static_cast<int>(i), p});
  return tags;
}

BoundingSequence regroup(std::span<const SlotTag> tags) {
  BoundingSequence out;
  int current = -1;
  for (const auto& t : tags) {
    if (t.box != current) {
      out.push_back({t.type, 0});
      current = t.box;
    }
    ++out.back().length;
  }
  return out;
}

BoundingSequence parse_box_list(std::string_view text) {
  BoundingSequence out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    std::string_view item = text.substr(start, comma - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    const std::size_t colon = item.find(':');
    if (colon == std::string_view::npos)
      throw ConfigError("box '" + std::string(item) + "' is not of the form TYPE:LEN");
    const BoxType type = box_type_from_name(item.substr(0, colon));
    if (type == BoxType::EOB) throw ConfigError("EOB cannot be used as a box");
    int len = 0;
    const auto digits = item.substr(colon + 1);
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), len);
    if (ec != std::errc() || ptr != digits.data() + digits.size() || len < 1)
      throw ConfigError("bad box length in '" + std::string(item) + "'");
    out.push_back({type, len});
    start = comma + 1;
  }
  return out;
}

std::string format_box_list(std::span<const BoxSpec> boxes) {
  std::string out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (i) out += ',';
    out += box_type_name(boxes[i].type);
    out += ':';
    out += std::to_string(boxes[i].length);
  }
  return out;
}

BoxStatistics box_statistics(std::span<const BoundingSequence> corpus) {
  BoxStatistics s;
  for (const auto& seq : corpus) {
    ++s.count_hist[static_cast<int>(seq.size())];
    for (const auto& b : seq) {
      ++s.length_hist[b.length];
      ++s.type_freq[b.type];
    }
  }
  return s;
}

}  // namespace bofi
