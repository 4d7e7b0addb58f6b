#include "perfect/masking.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "perfect/errors.hpp"

namespace perfect {

// ------------------------------------------------------------------ Vocab

Vocab::Vocab() {
  for (const char* special : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) push(special, 0);
}

TokenId Vocab::push(std::string token, std::size_t count) {
  const auto id = static_cast<TokenId>(tokens_.size());
  ids_.emplace(token, id);
  tokens_.push_back(std::move(token));
  counts_.push_back(count);
  return id;
}

Vocab Vocab::build(std::span<const std::string> texts) {
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for (auto& word : split_words(text)) ++counts[word];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab vocab;
  for (auto& [word, count] : ranked) {
    if (!vocab.find(word)) vocab.push(word, count);
  }
  return vocab;
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
  Vocab vocab;
  for (const auto& token : tokens) {
    if (!vocab.find(token)) vocab.push(token, 0);
  }
  return vocab;
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::id(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& word : split_words(text)) ids.push_back(vocab.id(word));
  return ids;
}

// ------------------------------------------------------------------ masking

std::string_view to_string(MaskPlacement placement) {
  switch (placement) {
    case MaskPlacement::single_sentence_suffix: return "single_sentence_suffix";
    case MaskPlacement::pair_between: return "pair_between";
    case MaskPlacement::pair_suffix: return "pair_suffix";
    case MaskPlacement::pair_two_segment_prefix: return "pair_two_segment_prefix";
    case MaskPlacement::pair_two_segment_suffix: return "pair_two_segment_suffix";
  }
  return "unknown";
}

MaskPlacement parse_mask_placement(std::string_view name) {
  for (auto p : {MaskPlacement::single_sentence_suffix, MaskPlacement::pair_between, MaskPlacement::pair_suffix,
                 MaskPlacement::pair_two_segment_prefix, MaskPlacement::pair_two_segment_suffix}) {
    if (to_string(p) == name) return p;
  }
  // Numbered aliases for the four pair layouts.
  if (name == "1") return MaskPlacement::pair_suffix;
  if (name == "2") return MaskPlacement::pair_between;
  if (name == "3") return MaskPlacement::pair_two_segment_prefix;
  if (name == "4") return MaskPlacement::pair_two_segment_suffix;
  throw InputError("unknown mask placement '" + std::string(name) + "'");
}

namespace {

bool is_two_segment(MaskPlacement kind) {
  return kind == MaskPlacement::pair_two_segment_prefix || kind == MaskPlacement::pair_two_segment_suffix;
}

// Shortens a and b (from the right, longer first, ties cut b) to fit budget.
std::size_t fit(std::vector<TokenId>& a, std::vector<TokenId>& b, std::size_t budget) {
  std::size_t dropped = 0;
  while (a.size() + b.size() > budget) {
    auto& victim = a.size() > b.size() ? a : b;
    victim.pop_back();
    ++dropped;
  }
  return dropped;
}

class Layout {
 public:
  void token(TokenId id, std::uint8_t segment) {
    ex.ids.push_back(id);
    ex.segments.push_back(segment);
  }
  void span(const std::vector<TokenId>& ids, std::uint8_t segment) {
    for (auto id : ids) token(id, segment);
  }
  void masks(std::size_t count, std::uint8_t segment) {
    for (std::size_t i = 0; i < count; ++i) {
      ex.mask_positions.push_back(ex.ids.size());
      token(Vocab::kMask, segment);
    }
  }
  MaskedExample ex;
};

}  // namespace

MaskedExample insert_masks(std::span<const TokenId> first, std::span<const TokenId> second,
                           const MaskPolicy& policy, std::size_t max_seq, std::size_t label) {
  if (policy.masks == 0) throw ContractError("insert_masks: mask count must be at least 1");
  const bool single = policy.kind == MaskPlacement::single_sentence_suffix;
  if (single && !second.empty()) {
    throw ContractError("insert_masks: single_sentence_suffix given a second sentence");
  }
  const std::size_t specials = is_two_segment(policy.kind) ? 3 : 2;
  if (specials + policy.masks > max_seq) {
    throw ContractError("insert_masks: " + std::to_string(policy.masks) + " masks do not fit in " +
                        std::to_string(max_seq) + " positions");
  }
  std::vector<TokenId> a(first.begin(), first.end());
  std::vector<TokenId> b(second.begin(), second.end());
  const auto dropped = fit(a, b, max_seq - specials - policy.masks);

  Layout out;
  out.token(Vocab::kCls, 0);
  switch (policy.kind) {
    case MaskPlacement::single_sentence_suffix:
    case MaskPlacement::pair_suffix:
      out.span(a, 0);
      out.span(b, 0);
      out.masks(policy.masks, 0);
      break;
    case MaskPlacement::pair_between:
      out.span(a, 0);
      out.masks(policy.masks, 0);
      out.span(b, 0);
      break;
    case MaskPlacement::pair_two_segment_prefix:
      out.span(a, 0);
      out.token(Vocab::kSep, 0);
      out.masks(policy.masks, 1);
      out.span(b, 1);
      break;
    case MaskPlacement::pair_two_segment_suffix:
      out.span(a, 0);
      out.token(Vocab::kSep, 0);
      out.span(b, 1);
      out.masks(policy.masks, 1);
      break;
  }
  out.token(Vocab::kSep, is_two_segment(policy.kind) ? 1 : 0);
  out.ex.label = label;
  out.ex.truncated = dropped;
  return std::move(out.ex);
}

MaskedExample plain_input(std::span<const TokenId> first, std::span<const TokenId> second,
                          std::size_t max_seq, std::size_t label) {
  const std::size_t specials = second.empty() ? 2 : 3;
  if (specials > max_seq) throw ContractError("plain_input: sequence budget too small");
  std::vector<TokenId> a(first.begin(), first.end());
  std::vector<TokenId> b(second.begin(), second.end());
  const bool pair = !b.empty();
  const auto dropped = fit(a, b, max_seq - specials);
  Layout out;
  out.token(Vocab::kCls, 0);
  out.span(a, 0);
  out.token(Vocab::kSep, 0);
  if (pair) {
    out.span(b, 1);
    out.token(Vocab::kSep, 1);
  }
  out.ex.label = label;
  out.ex.truncated = dropped;
  return std::move(out.ex);
}

// ------------------------------------------------------------------ batching

std::vector<std::size_t> Batch::mask_rows(std::size_t offset) const {
  std::vector<std::size_t> rows;
  rows.reserve(size * masks);
  const auto stride = offset + seq;
  for (std::size_t b = 0; b < size; ++b) {
    for (std::size_t i = 0; i < masks; ++i) rows.push_back(b * stride + offset + mask_positions[b * masks + i]);
  }
  return rows;
}

std::size_t longest(std::span<const MaskedExample> examples) {
  std::size_t n = 0;
  for (const auto& ex : examples) n = std::max(n, ex.ids.size());
  return n;
}

Batch build_batch(std::span<const MaskedExample> examples, std::size_t seq) {
  if (examples.empty()) throw ContractError("build_batch: empty batch");
  Batch batch;
  batch.size = examples.size();
  batch.seq = seq;
  batch.masks = examples.front().mask_positions.size();
  batch.ids.assign(batch.size * seq, Vocab::kPad);
  batch.segments.assign(batch.size * seq, 0);
  batch.attention.assign(batch.size * seq, 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto& ex = examples[b];
    if (ex.mask_positions.size() != batch.masks) {
      throw ContractError("build_batch: example " + std::to_string(b) + " has " +
                          std::to_string(ex.mask_positions.size()) + " masks, batch expects " +
                          std::to_string(batch.masks));
    }
    if (ex.ids.size() > seq) {
      throw ContractError("build_batch: example " + std::to_string(b) + " of length " +
                          std::to_string(ex.ids.size()) + " exceeds " + std::to_string(seq));
    }
    for (std::size_t j = 0; j < ex.ids.size(); ++j) {
      batch.ids[b * seq + j] = ex.ids[j];
      batch.segments[b * seq + j] = ex.segments.empty() ? 0 : ex.segments[j];
      batch.attention[b * seq + j] = 1;
    }
    batch.mask_positions.insert(batch.mask_positions.end(), ex.mask_positions.begin(), ex.mask_positions.end());
    batch.labels.push_back(ex.label);
  }
  return batch;
}

// ------------------------------------------------------------------ corpora

std::vector<std::string> Corpus::texts() const {
  std::vector<std::string> out;
  out.reserve(examples.size() * 2);
  for (const auto& ex : examples) {
    out.push_back(ex.text_a);
    if (!ex.text_b.empty()) out.push_back(ex.text_b);
  }
  return out;
}

namespace {

struct RawRow {
  std::string a, b, label;
};

std::optional<long long> as_integer(const std::string& s) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

Corpus assemble(std::vector<RawRow> rows, bool pair) {
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.label);
  std::vector<std::string> ordered(names.begin(), names.end());
  const bool numeric = std::all_of(ordered.begin(), ordered.end(), [](const auto& s) { return as_integer(s).has_value(); });
  if (numeric) {
    std::sort(ordered.begin(), ordered.end(), [](const auto& x, const auto& y) { return *as_integer(x) < *as_integer(y); });
  }
  Corpus corpus;
  corpus.pair = pair;
  corpus.label_names = ordered;
  for (auto& r : rows) {
    const auto id = static_cast<std::size_t>(std::find(ordered.begin(), ordered.end(), r.label) - ordered.begin());
    corpus.examples.push_back({std::move(r.a), std::move(r.b), id});
  }
  return corpus;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, '\t')) cells.push_back(cell);
  if (!line.empty() && line.back() == '\t') cells.emplace_back();
  return cells;
}

}  // namespace

Corpus parse_tsv_corpus(std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string line;
  if (!std::getline(in, line)) throw InputError("corpus: empty TSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_tabs(line);
  auto column = [&](const char* name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto label_col = column("label");
  auto a_col = column("text_a");
  const auto b_col = column("text_b");
  if (!a_col) a_col = column("text");
  if (!label_col || !a_col) throw InputError("corpus: TSV header needs 'label' and 'text' (or 'text_a')");

  std::vector<RawRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_tabs(line);
    if (cells.size() != header.size()) {
      throw InputError("corpus: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                       " fields, header has " + std::to_string(header.size()));
    }
    rows.push_back({cells[*a_col], b_col ? cells[*b_col] : std::string(), cells[*label_col]});
  }
  return assemble(std::move(rows), b_col.has_value());
}

Corpus parse_jsonl_corpus(std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string line;
  std::vector<RawRow> rows;
  bool pair = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("corpus: line " + std::to_string(line_no) + ": " + e.what());
    }
    RawRow row;
    if (obj.contains("text_a")) {
      row.a = obj.at("text_a").get<std::string>();
    } else if (obj.contains("text")) {
      row.a = obj.at("text").get<std::string>();
    } else {
      throw InputError("corpus: line " + std::to_string(line_no) + " lacks 'text'/'text_a'");
    }
    if (obj.contains("text_b")) {
      row.b = obj.at("text_b").get<std::string>();
      pair = true;
    }
    if (!obj.contains("label")) throw InputError("corpus: line " + std::to_string(line_no) + " lacks 'label'");
    const auto& label = obj.at("label");
    row.label = label.is_string() ? label.get<std::string>() : label.dump();
    rows.push_back(std::move(row));
  }
  return assemble(std::move(rows), pair);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  const bool jsonl = path.ends_with(".jsonl") || path.ends_with(".json");
  return jsonl ? parse_jsonl_corpus(buffer.str()) : parse_tsv_corpus(buffer.str());
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus '" + path + "'");
  const bool jsonl = path.ends_with(".jsonl") || path.ends_with(".json");
  if (jsonl) {
    for (const auto& ex : corpus.examples) {
      nlohmann::ordered_json obj;
      if (corpus.pair) {
        obj["text_a"] = ex.text_a;
        obj["text_b"] = ex.text_b;
      } else {
        obj["text"] = ex.text_a;
      }
      obj["label"] = corpus.label_names.at(ex.label);
      out << obj.dump() << '\n';
    }
    return;
  }
  out << (corpus.pair ? "text_a\ttext_b\tlabel\n" : "text\tlabel\n");
  for (const auto& ex : corpus.examples) {
    out << ex.text_a << '\t';
    if (corpus.pair) out << ex.text_b << '\t';
    out << corpus.label_names.at(ex.label) << '\n';
  }
}

}  // namespace perfect
