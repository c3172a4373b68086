#include "saner/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace saner {

namespace {

std::string ascii_lower(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

struct ParsedTag {
  char prefix = 'O';  // one of O B I E S
  std::string type;
};

ParsedTag parse_tag(const std::string& tag, SchemeKind kind) {
  if (tag == "O") return {'O', ""};
  if (tag.size() < 3 || tag[1] != '-')
    throw SchemeError("malformed tag: '" + tag + "'");
  const char p = tag[0];
  const bool ok = (kind == SchemeKind::BIO) ? (p == 'B' || p == 'I')
                                            : (p == 'B' || p == 'I' || p == 'E' || p == 'S');
  if (!ok) throw SchemeError("tag prefix '" + std::string(1, p) + "' invalid under " +
                             scheme_kind_name(kind) + " scheme: '" + tag + "'");
  return {p, tag.substr(2)};
}

std::vector<ParsedTag> parse_tags(const std::vector<std::string>& tags, const TagScheme& scheme) {
  std::vector<ParsedTag> out;
  out.reserve(tags.size());
  for (const auto& t : tags) {
    ParsedTag p = parse_tag(t, scheme.kind);
    if (p.prefix != 'O' && !scheme.allows_type(p.type))
      throw SchemeError("entity type '" + p.type + "' not in scheme label set (tag '" + t + "')");
    out.push_back(std::move(p));
  }
  return out;
}

// conlleval-style chunk boundaries; used by repair mode.
bool chunk_ends(const ParsedTag& prev, const ParsedTag& cur) {
  if (prev.prefix == 'E' || prev.prefix == 'S') return true;
  if (prev.prefix == 'B' || prev.prefix == 'I') {
    if (cur.prefix == 'B' || cur.prefix == 'S' || cur.prefix == 'O') return true;
    if (cur.type != prev.type) return true;
  }
  return false;
}

bool chunk_starts(const ParsedTag* prev, const ParsedTag& cur) {
  if (cur.prefix == 'B' || cur.prefix == 'S') return true;
  if (cur.prefix == 'I' || cur.prefix == 'E') {
    if (!prev || prev->prefix == 'O' || prev->prefix == 'E' || prev->prefix == 'S') return true;
    if (prev->type != cur.type) return true;
  }
  return false;
}

std::vector<EntitySpan> spans_repair(const std::vector<ParsedTag>& tags) {
  std::vector<EntitySpan> spans;
  bool open = false;
  std::size_t start = 0;
  std::string type;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const ParsedTag* prev = i ? &tags[i - 1] : nullptr;
    if (open && prev && chunk_ends(*prev, tags[i])) {
      spans.push_back({type, start, i - 1});
      open = false;
    }
    if (!open && tags[i].prefix != 'O' && chunk_starts(prev, tags[i])) {
      open = true;
      start = i;
      type = tags[i].type;
    }
  }
  if (open) spans.push_back({type, start, tags.size() - 1});
  return spans;
}

std::vector<EntitySpan> spans_strict_bio(const std::vector<ParsedTag>& tags) {
  std::vector<EntitySpan> spans;
  bool open = false;
  std::size_t start = 0;
  std::string type;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const ParsedTag& t = tags[i];
    switch (t.prefix) {
      case 'O':
        if (open) spans.push_back({type, start, i - 1});
        open = false;
        break;
      case 'B':
        if (open) spans.push_back({type, start, i - 1});
        open = true;
        start = i;
        type = t.type;
        break;
      case 'I':
        if (!open || type != t.type)
          throw SchemeError("I-" + t.type + " at position " + std::to_string(i) +
                            " does not continue a span");
        break;
      default:
        throw SchemeError("prefix not valid in BIO");
    }
  }
  if (open) spans.push_back({type, start, tags.size() - 1});
  return spans;
}

std::vector<EntitySpan> spans_strict_bioes(const std::vector<ParsedTag>& tags) {
  std::vector<EntitySpan> spans;
  bool open = false;
  std::size_t start = 0;
  std::string type;
  auto fail = [](std::size_t i, const std::string& msg) {
    throw SchemeError("position " + std::to_string(i) + ": " + msg);
  };
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const ParsedTag& t = tags[i];
    switch (t.prefix) {
      case 'O':
        if (open) fail(i, "span opened by B- is not closed before O");
        break;
      case 'S':
        if (open) fail(i, "span opened by B- is not closed before S-");
        spans.push_back({t.type, i, i});
        break;
      case 'B':
        if (open) fail(i, "nested B- before span is closed");
        open = true;
        start = i;
        type = t.type;
        break;
      case 'I':
        if (!open || type != t.type) fail(i, "I-" + t.type + " does not continue a span");
        break;
      case 'E':
        if (!open || type != t.type) fail(i, "E-" + t.type + " does not close a span");
        spans.push_back({type, start, i});
        open = false;
        break;
    }
  }
  if (open) throw SchemeError("sentence ends with an unclosed span");
  return spans;
}

}  // namespace

Token Token::make(std::string s) {
  Token t;
  t.normalized = ascii_lower(s);
  t.surface = std::move(s);
  return t;
}

SchemeKind parse_scheme_kind(const std::string& name) {
  std::string n = ascii_lower(name);
  if (n == "bio") return SchemeKind::BIO;
  if (n == "bioes") return SchemeKind::BIOES;
  throw ConfigError("unknown tag scheme: " + name);
}

std::string scheme_kind_name(SchemeKind kind) {
  return kind == SchemeKind::BIO ? "BIO" : "BIOES";
}

bool TagScheme::allows_type(const std::string& type) const {
  if (labels.empty()) return true;
  return std::find(labels.begin(), labels.end(), type) != labels.end();
}

std::vector<LabeledSentence> read_conll_stream(std::istream& in, std::size_t tag_column,
                                               const TagScheme& scheme, TagMode mode,
                                               const std::string& origin) {
  if (tag_column == 0) throw ConfigError("tag column must be >= 1 (token is column 0)");
  std::vector<LabeledSentence> sentences;
  LabeledSentence cur;
  std::size_t line_no = 0;
  std::size_t sent_first_line = 1;
  std::string line;

  auto flush = [&]() {
    if (cur.tokens.empty()) return;
    try {
      if (mode == TagMode::Strict)
        (void)tags_to_spans(cur.tags, scheme, TagMode::Strict);
      else
        cur.tags = repair_tags(cur.tags, scheme);
    } catch (const SchemeError& e) {
      throw SchemeError(origin + ": sentence starting at line " +
                        std::to_string(sent_first_line) + ": " + e.what());
    }
    sentences.push_back(std::move(cur));
    cur = LabeledSentence{};
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string f;
    while (ls >> f) fields.push_back(f);
    if (fields.empty()) {
      flush();
      sent_first_line = line_no + 1;
      continue;
    }
    if (fields.size() < tag_column + 1)
      throw ParseError(origin + ":" + std::to_string(line_no) + ": expected at least " +
                       std::to_string(tag_column + 1) + " fields, got " +
                       std::to_string(fields.size()));
    const std::string& tag = fields[tag_column];
    try {
      ParsedTag p = parse_tag(tag, scheme.kind);
      if (p.prefix != 'O' && !scheme.allows_type(p.type))
        throw SchemeError("entity type '" + p.type + "' not in scheme label set");
    } catch (const SchemeError& e) {
      throw SchemeError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    cur.tokens.push_back(Token::make(fields[0]));
    cur.tags.push_back(tag);
  }
  flush();
  return sentences;
}

std::vector<LabeledSentence> read_conll(const std::string& path, std::size_t tag_column,
                                        const TagScheme& scheme, TagMode mode) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file: " + path);
  return read_conll_stream(in, tag_column, scheme, mode, path);
}

void write_conll(std::ostream& out, const std::vector<LabeledSentence>& sentences) {
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i)
      out << s.tokens[i].surface << ' ' << s.tags[i] << '\n';
    out << '\n';
  }
}

void write_conll(const std::string& path, const std::vector<LabeledSentence>& sentences) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open file for writing: " + path);
  write_conll(out, sentences);
}

void write_predictions(std::ostream& out, const std::vector<LabeledSentence>& sentences,
                       const std::vector<std::vector<std::string>>& pred_tags) {
  if (sentences.size() != pred_tags.size())
    throw ValueError("predictions do not align with sentences");
  for (std::size_t k = 0; k < sentences.size(); ++k) {
    const auto& s = sentences[k];
    if (s.size() != pred_tags[k].size()) throw ValueError("prediction length mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      out << s.tokens[i].surface << ' ' << pred_tags[k][i] << '\n';
    out << '\n';
  }
}

std::vector<std::string> bio_to_bioes(const std::vector<std::string>& tags) {
  TagScheme bio{SchemeKind::BIO, {}};
  auto spans = tags_to_spans(tags, bio, TagMode::Strict);
  return spans_to_tags(spans, tags.size(), SchemeKind::BIOES);
}

std::vector<EntitySpan> tags_to_spans(const std::vector<std::string>& tags,
                                      const TagScheme& scheme, TagMode mode) {
  auto parsed = parse_tags(tags, scheme);
  if (mode == TagMode::Repair) return spans_repair(parsed);
  return scheme.kind == SchemeKind::BIO ? spans_strict_bio(parsed) : spans_strict_bioes(parsed);
}

std::vector<std::string> spans_to_tags(const std::vector<EntitySpan>& spans, std::size_t length,
                                       SchemeKind kind) {
  std::vector<std::string> tags(length, "O");
  std::size_t prev_end = 0;
  bool first = true;
  for (const auto& sp : spans) {
    if (sp.start > sp.end || sp.end >= length) throw ValueError("span out of range");
    if (!first && sp.start <= prev_end) throw ValueError("spans overlap or are out of order");
    first = false;
    prev_end = sp.end;
    if (kind == SchemeKind::BIO) {
      tags[sp.start] = "B-" + sp.type;
      for (std::size_t i = sp.start + 1; i <= sp.end; ++i) tags[i] = "I-" + sp.type;
    } else {
      if (sp.start == sp.end) {
        tags[sp.start] = "S-" + sp.type;
      } else {
        tags[sp.start] = "B-" + sp.type;
        for (std::size_t i = sp.start + 1; i < sp.end; ++i) tags[i] = "I-" + sp.type;
        tags[sp.end] = "E-" + sp.type;
      }
    }
  }
  return tags;
}

std::vector<std::string> repair_tags(const std::vector<std::string>& tags,
                                     const TagScheme& scheme) {
  auto spans = tags_to_spans(tags, scheme, TagMode::Repair);
  return spans_to_tags(spans, tags.size(), scheme.kind);
}

CorpusStats corpus_stats(const std::vector<LabeledSentence>& data, const TagScheme& scheme,
                         const std::vector<LabeledSentence>* train_ref) {
  CorpusStats stats;
  stats.n_sentences = data.size();
  std::vector<std::vector<EntitySpan>> all_spans;
  all_spans.reserve(data.size());
  for (const auto& s : data) {
    all_spans.push_back(tags_to_spans(s.tags, scheme, TagMode::Strict));
    stats.n_entities += all_spans.back().size();
  }
  if (train_ref) {
    std::set<std::string> seen;
    for (const auto& s : *train_ref)
      for (const auto& sp : tags_to_spans(s.tags, scheme, TagMode::Strict))
        seen.insert(span_surface(s, sp));
    std::size_t unseen = 0;
    for (std::size_t k = 0; k < data.size(); ++k)
      for (const auto& sp : all_spans[k])
        if (!seen.count(span_surface(data[k], sp))) ++unseen;
    stats.pct_unseen = stats.n_entities == 0
                           ? 0.0
                           : 100.0 * static_cast<double>(unseen) /
                                 static_cast<double>(stats.n_entities);
  }
  return stats;
}

std::string span_surface(const LabeledSentence& sentence, const EntitySpan& span) {
  std::string out;
  for (std::size_t i = span.start; i <= span.end; ++i) {
    if (i > span.start) out += ' ';
    out += sentence.tokens[i].surface;
  }
  return out;
}

std::vector<std::string> collect_entity_types(const std::vector<LabeledSentence>& data,
                                              const TagScheme& scheme) {
  std::set<std::string> types;
  for (const auto& s : data)
    for (const auto& sp : tags_to_spans(s.tags, scheme, TagMode::Strict)) types.insert(sp.type);
  return {types.begin(), types.end()};
}

std::vector<std::string> expand_tag_set(const std::vector<std::string>& labels, SchemeKind kind) {
  std::vector<std::string> tags{"O"};
  for (const auto& l : labels) {
    tags.push_back("B-" + l);
    tags.push_back("I-" + l);
    if (kind == SchemeKind::BIOES) {
      tags.push_back("E-" + l);
      tags.push_back("S-" + l);
    }
  }
  return tags;
}

}  // namespace saner
