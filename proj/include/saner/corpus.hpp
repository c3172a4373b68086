#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "saner/errors.hpp"

namespace saner {

struct Token {
  std::string surface;
  std::string normalized;  // lowercased copy used for neighbor lookup

  static Token make(std::string s);
};

struct LabeledSentence {
  std::vector<Token> tokens;
  std::vector<std::string> tags;

  std::size_t size() const { return tokens.size(); }
};

enum class SchemeKind { BIO, BIOES };

SchemeKind parse_scheme_kind(const std::string& name);
std::string scheme_kind_name(SchemeKind kind);

// Tag scheme: kind plus an optional closed set of entity types. An empty
// label set accepts any type.
struct TagScheme {
  SchemeKind kind = SchemeKind::BIOES;
  std::vector<std::string> labels;

  bool allows_type(const std::string& type) const;
};

struct EntitySpan {
  std::string type;
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // inclusive

  bool operator==(const EntitySpan& o) const = default;
};

struct CorpusStats {
  std::size_t n_sentences = 0;
  std::size_t n_entities = 0;
  std::optional<double> pct_unseen;  // absent without a training reference
};

// Tag validation behavior. Strict rejects transition violations (e.g. a bare
// I-X opening a span); repair coerces them the way conlleval does.
enum class TagMode { Strict, Repair };

// token in column 0, tag in the given column, whitespace-separated fields,
// blank lines between sentences.
std::vector<LabeledSentence> read_conll(const std::string& path, std::size_t tag_column,
                                        const TagScheme& scheme,
                                        TagMode mode = TagMode::Strict);
std::vector<LabeledSentence> read_conll_stream(std::istream& in, std::size_t tag_column,
                                               const TagScheme& scheme, TagMode mode,
                                               const std::string& origin);

void write_conll(std::ostream& out, const std::vector<LabeledSentence>& sentences);
void write_conll(const std::string& path, const std::vector<LabeledSentence>& sentences);
// two-column output of predictions next to the original tokens
void write_predictions(std::ostream& out, const std::vector<LabeledSentence>& sentences,
                       const std::vector<std::vector<std::string>>& pred_tags);

std::vector<std::string> bio_to_bioes(const std::vector<std::string>& tags);

std::vector<EntitySpan> tags_to_spans(const std::vector<std::string>& tags,
                                      const TagScheme& scheme, TagMode mode = TagMode::Strict);

// Inverse of tags_to_spans for non-overlapping, in-order spans.
std::vector<std::string> spans_to_tags(const std::vector<EntitySpan>& spans, std::size_t length,
                                       SchemeKind kind);

// Repair a tag sequence into canonical form under the scheme.
std::vector<std::string> repair_tags(const std::vector<std::string>& tags,
                                     const TagScheme& scheme);

CorpusStats corpus_stats(const std::vector<LabeledSentence>& data, const TagScheme& scheme,
                         const std::vector<LabeledSentence>* train_ref = nullptr);

// Surface form of a span: tokens joined with single spaces (case preserved).
std::string span_surface(const LabeledSentence& sentence, const EntitySpan& span);

// Distinct entity types present in the data, sorted.
std::vector<std::string> collect_entity_types(const std::vector<LabeledSentence>& data,
                                              const TagScheme& scheme);

// Full tag inventory for a label set under the scheme kind: "O" first, then
// per type in the given order B-/I-(/E-/S-).
std::vector<std::string> expand_tag_set(const std::vector<std::string>& labels, SchemeKind kind);

}  // namespace saner
