#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace perfect {

using TokenId = std::uint32_t;

// Token inventory built from a corpus. Special tokens occupy ids 0..4 in the
// order PAD, UNK, CLS, SEP, MASK; corpus tokens follow by descending frequency,
// ties broken lexicographically, so the id order is also the frequency rank.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kMask = 4;
  static constexpr std::size_t kSpecialCount = 5;

  Vocab();
  static Vocab build(std::span<const std::string> texts);
  // Vocab with exactly the given non-special tokens, in order.
  static Vocab from_tokens(std::span<const std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;  // UNK when absent
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t frequency(TokenId id) const { return counts_.at(id); }

 private:
  TokenId push(std::string token, std::size_t count);

  std::vector<std::string> tokens_;
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Lowercased whitespace split.
std::vector<std::string> split_words(std::string_view text);
std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab);

// Where the mask block goes. Pair layouts follow the four placements studied
// for sentence pairs:
//   pair_suffix              [CLS] s1 s2 MASK… [SEP]
//   pair_between             [CLS] s1 MASK… s2 [SEP]
//   pair_two_segment_prefix  [CLS] s1 [SEP] | MASK… s2 [SEP]
//   pair_two_segment_suffix  [CLS] s1 [SEP] | s2 MASK… [SEP]
// Two-segment layouts mark the second part with segment id 1.
enum class MaskPlacement {
  single_sentence_suffix,
  pair_between,
  pair_suffix,
  pair_two_segment_prefix,
  pair_two_segment_suffix,
};

std::string_view to_string(MaskPlacement placement);
MaskPlacement parse_mask_placement(std::string_view name);

struct MaskPolicy {
  MaskPlacement kind = MaskPlacement::single_sentence_suffix;
  std::size_t masks = 2;
};

struct MaskedExample {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> segments;
  std::vector<std::size_t> mask_positions;
  std::size_t label = 0;
  std::string raw;
  // Number of sentence tokens dropped to fit the sequence budget.
  std::size_t truncated = 0;
};

// Lays out one (single) or two (pair) token lists with policy.masks MASK
// tokens. Sentence tokens are cut from the right when the result would exceed
// max_seq; for pairs the longer sentence loses tokens first. Masks and special
// tokens are never removed.
MaskedExample insert_masks(std::span<const TokenId> first, std::span<const TokenId> second,
                           const MaskPolicy& policy, std::size_t max_seq, std::size_t label = 0);

// [CLS] s [SEP] or [CLS] s1 [SEP] s2 [SEP] without masks, for the CLS-head
// fine-tuning baseline.
MaskedExample plain_input(std::span<const TokenId> first, std::span<const TokenId> second,
                          std::size_t max_seq, std::size_t label = 0);

// Padded batch. All per-position arrays are row-major [size × seq].
struct Batch {
  std::size_t size = 0;
  std::size_t seq = 0;
  std::size_t masks = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> segments;
  std::vector<std::uint8_t> attention;  // 1 = real token, 0 = PAD
  std::vector<std::size_t> mask_positions;  // [size × masks]
  std::vector<std::size_t> labels;

  // Flat hidden-state row of every mask, ordered (example, slot), for a
  // hidden matrix of [size · (offset + seq) × H] where offset rows precede each
  // example's tokens (soft prompts).
  std::vector<std::size_t> mask_rows(std::size_t offset = 0) const;
};

std::size_t longest(std::span<const MaskedExample> examples);

// Pads every example to exactly seq positions. All examples must carry the
// same number of masks.
Batch build_batch(std::span<const MaskedExample> examples, std::size_t seq);

// ------------------------------------------------------------------ corpora

struct LabeledText {
  std::string text_a;
  std::string text_b;  // empty for single-sentence tasks
  std::size_t label = 0;
};

struct Corpus {
  std::vector<LabeledText> examples;
  std::vector<std::string> label_names;
  bool pair = false;

  std::size_t classes() const { return label_names.size(); }
  std::vector<std::string> texts() const;
};

// Reads TSV (header row naming text or text_a/text_b plus label) or JSON
// lines (objects with the same fields), chosen by the .jsonl/.json
// extension. Label names are ordered numerically when all are integers,
// lexicographically otherwise; a class's id is its rank in that order.
Corpus load_corpus(const std::string& path);
Corpus parse_tsv_corpus(std::string_view content);
Corpus parse_jsonl_corpus(std::string_view content);
void save_corpus(const Corpus& corpus, const std::string& path);

}  // namespace perfect
