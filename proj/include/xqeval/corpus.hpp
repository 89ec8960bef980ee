#pragma once

// Documents, corpora, tokenization and sentence segmentation.

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "xqeval/core.hpp"

namespace xqeval {

/// Half-open byte range into a document's text.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(const Span& other) const {
    return begin <= other.begin && other.end <= end;
  }
  friend bool operator==(const Span&, const Span&) = default;
};

struct Provenance {
  std::string source_doc_id;
  Label source_label = Label::human;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Sentence {
  Span span;
  std::optional<Provenance> provenance;
  friend bool operator==(const Sentence&, const Sentence&) = default;
};

// ---------------------------------------------------------------------------
// Tokenization

namespace detail {

inline bool is_word_codepoint(UChar32 c) {
  if (u_isalnum(c)) return true;
  const auto type = static_cast<UCharCategory>(u_charType(c));
  return type == U_NON_SPACING_MARK || type == U_COMBINING_SPACING_MARK ||
         type == U_ENCLOSING_MARK;
}

inline bool is_space_codepoint(UChar32 c) { return u_isUWhiteSpace(c); }

}  // namespace detail

/// Word-level tokens: maximal runs of letters/digits (with combining marks),
/// and every other non-space code point as a token of its own.
inline std::vector<Span> tokenize(std::string_view text) {
  std::vector<Span> tokens;
  const auto* bytes = reinterpret_cast<const uint8_t*>(text.data());
  const auto length = static_cast<int32_t>(text.size());
  int32_t i = 0;
  std::optional<std::size_t> word_start;
  while (i < length) {
    const int32_t start = i;
    UChar32 c;
    U8_NEXT(bytes, i, length, c);
    if (c < 0) c = 0xFFFD;  // malformed byte: treat as a symbol
    if (detail::is_word_codepoint(c)) {
      if (!word_start) word_start = static_cast<std::size_t>(start);
      continue;
    }
    if (word_start) {
      tokens.push_back({*word_start, static_cast<std::size_t>(start)});
      word_start.reset();
    }
    if (!detail::is_space_codepoint(c)) {
      tokens.push_back({static_cast<std::size_t>(start), static_cast<std::size_t>(i)});
    }
  }
  if (word_start) tokens.push_back({*word_start, text.size()});
  return tokens;
}

/// True if the token consists of letters/digits (not punctuation or symbols).
inline bool is_word_token(std::string_view token) {
  if (token.empty()) return false;
  const auto* bytes = reinterpret_cast<const uint8_t*>(token.data());
  int32_t i = 0;
  UChar32 c;
  U8_NEXT(bytes, i, static_cast<int32_t>(token.size()), c);
  return c >= 0 && detail::is_word_codepoint(c);
}

/// Whitespace-delimited word count, used for length filtering.
inline std::size_t word_count(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  const auto* bytes = reinterpret_cast<const uint8_t*>(text.data());
  const auto length = static_cast<int32_t>(text.size());
  int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(bytes, i, length, c);
    const bool space = c >= 0 && detail::is_space_codepoint(c);
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

// ---------------------------------------------------------------------------
// Sentence segmentation

namespace detail {

inline const std::set<std::string, std::less<>>& abbreviations() {
  static const std::set<std::string, std::less<>> kAbbreviations = {
      "mr",   "mrs",  "ms",  "dr",   "prof", "sr",   "jr",   "st",  "vs",
      "etc",  "fig",  "no",  "jan",  "feb",  "mar",  "apr",  "jun", "jul",
      "aug",  "sep",  "sept", "oct", "nov",  "dec",  "inc",  "ltd", "co",
      "corp", "mt",   "approx", "dept", "est", "vol", "gen", "gov", "rev"};
  return kAbbreviations;
}

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

inline UChar32 first_codepoint(std::string_view s) {
  const auto* bytes = reinterpret_cast<const uint8_t*>(s.data());
  int32_t i = 0;
  UChar32 c;
  U8_NEXT(bytes, i, static_cast<int32_t>(s.size()), c);
  return c;
}

inline bool is_terminal(std::string_view t) {
  return t == "." || t == "!" || t == "?" || t == "\xE2\x80\xA6" /* … */ ||
         t == "\xE3\x80\x82" /* 。 */;
}

inline bool is_closer(std::string_view t) {
  return t == "\"" || t == "'" || t == ")" || t == "]" || t == "\xE2\x80\x9D" ||
         t == "\xE2\x80\x99" || t == "\xC2\xBB";
}

inline bool is_opener(std::string_view t) {
  return t == "\"" || t == "'" || t == "(" || t == "[" || t == "\xE2\x80\x9C" ||
         t == "\xE2\x80\x98" || t == "\xC2\xAB";
}

}  // namespace detail

/// Rule-based splitter: a sentence ends at terminal punctuation (plus any
/// directly following closers). '!' and '?' always end a sentence; '.' only
/// when not preceded by an allow-listed abbreviation or a dotted initialism
/// and followed, after whitespace, by a capital, digit or opening quote. A blank line always
/// ends a sentence. Spans cover the non-whitespace content.
inline std::vector<Span> split_sentences(std::string_view text) {
  const std::vector<Span> tokens = tokenize(text);
  std::vector<Span> sentences;
  if (tokens.empty()) return sentences;
  auto tok = [&](std::size_t i) { return text.substr(tokens[i].begin, tokens[i].size()); };
  auto adjacent = [&](std::size_t a, std::size_t b) { return tokens[a].end == tokens[b].begin; };

  std::size_t start = 0;
  std::size_t i = 0;
  while (i < tokens.size()) {
    // Paragraph break between token i-1 and i.
    if (i > start) {
      const auto gap = text.substr(tokens[i - 1].end, tokens[i].begin - tokens[i - 1].end);
      if (std::count(gap.begin(), gap.end(), '\n') >= 2) {
        sentences.push_back({tokens[start].begin, tokens[i - 1].end});
        start = i;
      }
    }
    if (!detail::is_terminal(tok(i))) {
      ++i;
      continue;
    }
    std::size_t last = i;
    bool strong = tok(i) != ".";
    while (last + 1 < tokens.size() && adjacent(last, last + 1) &&
           (detail::is_terminal(tok(last + 1)) || detail::is_closer(tok(last + 1)))) {
      ++last;
      if (detail::is_terminal(tok(last)) && tok(last) != ".") strong = true;
    }
    bool boundary = false;
    if (last + 1 >= tokens.size()) {
      boundary = true;
    } else if (strong) {
      boundary = true;
    } else {
      bool abbreviation = false;
      if (i > start && adjacent(i - 1, i) && is_word_token(tok(i - 1))) {
        const std::string word = detail::ascii_lower(tok(i - 1));
        if (detail::abbreviations().count(word)) abbreviation = true;
        // Dotted initialisms such as "e.g." or "U.S.".
        if (i >= start + 3 && adjacent(i - 2, i - 1) && tok(i - 2) == "." &&
            adjacent(i - 3, i - 2) && tok(i - 1).size() == 1) {
          abbreviation = true;
        }
      }
      const auto next = tok(last + 1);
      const UChar32 c = detail::first_codepoint(next);
      const bool capital = c >= 0 && (u_isupper(c) || u_istitle(c) || u_isdigit(c));
      // "3.50" or "U.S": no whitespace after the period.
      boundary = !abbreviation && !adjacent(last, last + 1) && (capital || detail::is_opener(next));
    }
    if (boundary) {
      sentences.push_back({tokens[start].begin, tokens[last].end});
      start = last + 1;
    }
    i = last + 1;
  }
  if (start < tokens.size()) sentences.push_back({tokens[start].begin, tokens.back().end});
  return sentences;
}

// ---------------------------------------------------------------------------
// Documents

struct Document {
  std::string id;
  std::string text;
  std::vector<Span> tokens;
  Label gold = Label::human;
  std::vector<Sentence> sentences;
  std::optional<std::string> source;
  /// Index into `sentences` for every token.
  std::vector<std::size_t> token_sentence;

  std::size_t size() const { return tokens.size(); }
  std::string_view token(std::size_t i) const {
    return std::string_view(text).substr(tokens.at(i).begin, tokens.at(i).size());
  }
  bool hybrid() const {
    return !sentences.empty() && sentences.front().provenance.has_value();
  }
  /// Source label of the sentence containing token i; requires provenance.
  Label token_provenance(std::size_t i) const {
    return sentences.at(token_sentence.at(i)).provenance.value().source_label;
  }
};

namespace detail {

inline void index_and_validate(Document& doc) {
  const std::size_t n = doc.text.size();
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
    const Span& s = doc.tokens[i];
    if (s.begin >= s.end || s.end > n) {
      throw ArgumentError("document '" + doc.id + "': token span out of bounds");
    }
    if (i > 0 && doc.tokens[i - 1].end > s.begin) {
      throw ArgumentError("document '" + doc.id + "': overlapping token spans");
    }
  }
  std::size_t with_provenance = 0;
  for (std::size_t j = 0; j < doc.sentences.size(); ++j) {
    const Span& s = doc.sentences[j].span;
    if (s.begin > s.end || s.end > n || (j > 0 && doc.sentences[j - 1].span.end > s.begin)) {
      throw ArgumentError("document '" + doc.id + "': invalid sentence span");
    }
    if (doc.sentences[j].provenance) ++with_provenance;
  }
  if (with_provenance != 0 && with_provenance != doc.sentences.size()) {
    throw ArgumentError("document '" + doc.id + "': partial sentence provenance");
  }
  doc.token_sentence.assign(doc.tokens.size(), 0);
  std::size_t j = 0;
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
    while (j < doc.sentences.size() && doc.sentences[j].span.end <= doc.tokens[i].begin) ++j;
    if (j == doc.sentences.size() || !doc.sentences[j].span.contains(doc.tokens[i])) {
      throw ArgumentError("document '" + doc.id + "': token outside every sentence");
    }
    doc.token_sentence[i] = j;
  }
}

}  // namespace detail

/// Tokenizes and sentence-splits `text`.
inline Document make_document(std::string id, std::string text, Label gold,
                              std::optional<std::string> source = std::nullopt) {
  Document doc;
  doc.id = std::move(id);
  doc.text = std::move(text);
  doc.gold = gold;
  doc.source = std::move(source);
  doc.tokens = tokenize(doc.text);
  for (const Span& s : split_sentences(doc.text)) doc.sentences.push_back({s, std::nullopt});
  detail::index_and_validate(doc);
  return doc;
}

/// Builds a document whose sentence spans are given (e.g. hybrid documents).
inline Document make_document_with_sentences(std::string id, std::string text, Label gold,
                                             std::vector<Sentence> sentences) {
  Document doc;
  doc.id = std::move(id);
  doc.text = std::move(text);
  doc.gold = gold;
  doc.tokens = tokenize(doc.text);
  doc.sentences = std::move(sentences);
  detail::index_and_validate(doc);
  return doc;
}

// ---------------------------------------------------------------------------
// Corpus

class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Document> documents) : documents_(std::move(documents)) {
    std::unordered_set<std::string> ids;
    for (const Document& d : documents_) {
      if (!ids.insert(d.id).second) throw ArgumentError("duplicate document id '" + d.id + "'");
      ++label_counts_[d.gold];
    }
  }

  const std::vector<Document>& documents() const { return documents_; }
  const std::map<Label, std::size_t>& label_counts() const { return label_counts_; }
  std::size_t count(Label label) const {
    auto it = label_counts_.find(label);
    return it == label_counts_.end() ? 0 : it->second;
  }
  std::size_t size() const { return documents_.size(); }
  bool empty() const { return documents_.empty(); }
  const Document& operator[](std::size_t i) const { return documents_[i]; }

  const Document* find(std::string_view id) const {
    for (const Document& d : documents_) {
      if (d.id == id) return &d;
    }
    return nullptr;
  }

  auto begin() const { return documents_.begin(); }
  auto end() const { return documents_.end(); }

 private:
  std::vector<Document> documents_;
  std::map<Label, std::size_t> label_counts_;
};

inline nlohmann::ordered_json to_record(const Document& doc) {
  nlohmann::ordered_json record;
  record["id"] = doc.id;
  record["text"] = doc.text;
  record["label"] = to_string(doc.gold);
  if (doc.source) record["source"] = *doc.source;
  return record;
}

/// Parses one corpus record; `line` is used for error reporting.
inline Document parse_record(std::string_view text, std::size_t line) {
  nlohmann::json record;
  try {
    record = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line, std::string("invalid JSON: ") + e.what());
  }
  if (!record.is_object()) throw ParseError(line, "record is not an object");
  auto require_string = [&](const char* key) -> std::string {
    auto it = record.find(key);
    if (it == record.end()) throw ParseError(line, std::string("missing field '") + key + "'");
    if (!it->is_string()) throw ParseError(line, std::string("field '") + key + "' is not a string");
    return it->get<std::string>();
  };
  std::string id = require_string("id");
  std::string body = require_string("text");
  const std::string label_text = require_string("label");
  Label label;
  try {
    label = parse_label(label_text);
  } catch (const ArgumentError&) {
    throw ParseError(line, "label must be \"human\" or \"machine\", got \"" + label_text + "\"");
  }
  std::optional<std::string> source;
  if (auto it = record.find("source"); it != record.end() && !it->is_null()) {
    if (!it->is_string()) throw ParseError(line, "field 'source' is not a string");
    source = it->get<std::string>();
  }
  return make_document(std::move(id), std::move(body), label, std::move(source));
}

/// Reads every record of a corpus file without length filtering.
inline std::vector<Document> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file '" + path + "'");
  std::vector<Document> docs;
  std::unordered_set<std::string> ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    Document doc = parse_record(text, line);
    if (!ids.insert(doc.id).second) throw ParseError(line, "duplicate id '" + doc.id + "'");
    docs.push_back(std::move(doc));
  }
  if (in.bad()) throw IoError("error reading corpus file '" + path + "'");
  return docs;
}

/// Loads the documents whose whitespace word count lies in [min_words, max_words].
inline Corpus load_corpus(const std::string& path, std::size_t min_words, std::size_t max_words) {
  if (min_words == 0 || min_words > max_words) {
    throw ArgumentError("word bounds must satisfy 0 < min_words <= max_words");
  }
  std::vector<Document> kept;
  for (Document& doc : read_records(path)) {
    const std::size_t w = word_count(doc.text);
    if (w >= min_words && w <= max_words) kept.push_back(std::move(doc));
  }
  if (kept.empty()) throw EmptyCorpusError("no documents in '" + path + "' within the word bounds");
  return Corpus(std::move(kept));
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus file '" + path + "'");
  for (const Document& doc : corpus) out << to_record(doc).dump() << '\n';
  if (!out) throw IoError("error writing corpus file '" + path + "'");
}

/// Per class, round(fraction * count) documents without replacement; the
/// result order is itself a seeded shuffle.
inline Corpus stratified_subsample(const Corpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ArgumentError("fraction must lie in (0, 1]");
  }
  if (corpus.count(Label::human) == 0 || corpus.count(Label::machine) == 0) {
    throw ArgumentError("stratified subsampling needs at least one document per class");
  }
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  for (Label label : {Label::human, Label::machine}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus[i].gold == label) members.push_back(i);
    }
    const auto take = static_cast<std::size_t>(std::llround(fraction * double(members.size())));
    for (std::size_t pick : rng.sample(members.size(), take)) chosen.push_back(members[pick]);
  }
  rng.shuffle(chosen);
  std::vector<Document> docs;
  docs.reserve(chosen.size());
  for (std::size_t i : chosen) docs.push_back(corpus[i]);
  return Corpus(std::move(docs));
}

/// Identity of a corpus's content (ids, labels and texts in order).
inline std::string corpus_digest(const Corpus& corpus) {
  Digest digest;
  for (const Document& d : corpus) digest.add(d.id).add(to_string(d.gold)).add(d.text);
  return digest.hex();
}

}  // namespace xqeval
