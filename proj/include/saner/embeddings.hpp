#pragma once

#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "saner/corpus.hpp"
#include "saner/tensor.hpp"

namespace saner {

enum class UnkPolicy { ZeroVector, MeanVector };

// Frozen word -> dense vector map loaded from a text embedding file.
class EmbeddingTable {
 public:
  EmbeddingTable(std::size_t dim, UnkPolicy unk = UnkPolicy::ZeroVector);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return words_.size(); }
  UnkPolicy unk_policy() const { return unk_; }
  void set_unk_policy(UnkPolicy p) { unk_ = p; }
  std::size_t duplicate_count() const { return duplicates_; }

  // Returns false when the word was already present (first occurrence wins).
  bool add(const std::string& word, std::vector<double> vec);

  std::optional<std::size_t> lookup(const std::string& word) const;
  // exact surface first, then the lowercased surface
  std::optional<std::size_t> lookup_fuzzy(const std::string& word) const;

  const std::string& word(std::size_t row) const { return words_[row]; }
  const double* row(std::size_t r) const { return matrix_.data() + r * dim_; }
  // Vector for a word under the unk policy (fuzzy lookup).
  std::vector<double> vector_for(const std::string& word) const;

  const std::vector<double>& mean_vector() const;

 private:
  std::size_t dim_;
  UnkPolicy unk_;
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> vocab_;
  std::vector<double> matrix_;  // size x dim, row-major
  std::size_t duplicates_ = 0;
  mutable std::vector<double> mean_;  // computed on first use
};

// Text format: word followed by dim floats per line; optional leading
// "count dim" header. Duplicates keep the first occurrence.
std::shared_ptr<EmbeddingTable> load_embedding_text(const std::string& path,
                                                    UnkPolicy unk = UnkPolicy::ZeroVector);

// Per-sentence, per-token vectors standing in for contextual encoders that
// are out of scope here. Text format: one line of floats per token, blank
// line between sentences.
class PrecomputedVectors {
 public:
  std::size_t dim() const { return dim_; }
  std::size_t sentence_count() const { return sentences_.size(); }
  std::size_t token_count(std::size_t sent) const;
  const double* row(std::size_t sent, std::size_t tok) const;

  static std::shared_ptr<PrecomputedVectors> load(const std::string& path);

 private:
  std::size_t dim_ = 0;
  std::vector<std::vector<double>> sentences_;  // flat n_i * dim per sentence
};

// Ordered embedding slots concatenated per token (total_dim = sum of dims).
class CompositeEmbedder {
 public:
  void add_table(std::shared_ptr<EmbeddingTable> table);
  void add_vectors(std::shared_ptr<PrecomputedVectors> vectors);

  std::size_t total_dim() const { return total_dim_; }
  std::size_t slot_count() const { return slots_.size(); }
  std::vector<std::size_t> slot_dims() const;

  static constexpr std::size_t kNoIndex = static_cast<std::size_t>(-1);
  // Row i is the concatenation of slot vectors for token i. sentence_index
  // is required when any precomputed slot is present.
  Tensor embed(const LabeledSentence& sentence, std::size_t sentence_index = kNoIndex) const;

 private:
  struct Slot {
    std::shared_ptr<EmbeddingTable> table;
    std::shared_ptr<PrecomputedVectors> vectors;
  };
  std::vector<Slot> slots_;
  std::size_t total_dim_ = 0;
};

// u.v / (|u||v|), clamped into [-1, 1]. Zero-norm input is an error.
double cosine(const std::vector<double>& u, const std::vector<double>& v);
double cosine(const double* u, const double* v, std::size_t n);

struct Neighbor {
  std::string word;
  double sim;
  bool operator==(const Neighbor& o) const = default;
};

// Per-word top-m similar-word lists. Entries keep insertion order so saves
// are deterministic.
class NeighborIndex {
 public:
  explicit NeighborIndex(std::uint32_t m = 0) : m_(m) {}

  std::uint32_t m() const { return m_; }
  std::size_t size() const { return order_.size(); }
  bool has(const std::string& word) const { return entries_.count(word) > 0; }
  const std::vector<Neighbor>* find(const std::string& word) const;
  const std::vector<std::string>& words() const { return order_; }
  void add(const std::string& word, std::vector<Neighbor> neighbors);

  bool operator==(const NeighborIndex& o) const {
    return m_ == o.m_ && order_ == o.order_ && entries_ == o.entries_;
  }

 private:
  std::uint32_t m_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::vector<Neighbor>> entries_;
};

struct NeighborBuildResult {
  NeighborIndex index;
  std::vector<std::string> missing;  // query words absent from the source table
};

// Top-m neighbors by cosine over the full source vocabulary, excluding the
// query word itself. Ties break toward the smaller source row. Query words
// missing from the source get an empty entry and a line in the coverage
// report. threads <= 0 means use SANER_THREADS or the hardware count.
NeighborBuildResult build_neighbor_index(const EmbeddingTable& source,
                                         const std::vector<std::string>& query_vocab,
                                         std::uint32_t m, int threads = 0);

// Versioned binary cache: magic "SANERNBR", u32 version, u32 m, then one
// record per entry (query word, u32 k, k x (word, f64 similarity)).
void save_neighbor_index(const NeighborIndex& index, const std::string& path);
NeighborIndex load_neighbor_index(const std::string& path);

// Worker-thread cap honoring the SANER_THREADS environment variable.
int resolve_thread_count(int requested);

}  // namespace saner
