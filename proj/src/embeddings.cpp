#include "saner/embeddings.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "saner/binio.hpp"

namespace saner {

namespace {

std::string ascii_lower(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

bool parse_uint(const std::string& s, std::size_t& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> fields;
  std::istringstream ls(line);
  std::string f;
  while (ls >> f) fields.push_back(f);
  return fields;
}

}  // namespace

// ---------------------------------------------------------------------------
// EmbeddingTable

EmbeddingTable::EmbeddingTable(std::size_t dim, UnkPolicy unk) : dim_(dim), unk_(unk) {
  if (dim == 0) throw ValueError("embedding dim must be positive");
}

bool EmbeddingTable::add(const std::string& word, std::vector<double> vec) {
  if (vec.size() != dim_) throw ShapeError("embedding row dim mismatch for '" + word + "'");
  if (vocab_.count(word)) {
    ++duplicates_;
    return false;
  }
  vocab_.emplace(word, words_.size());
  words_.push_back(word);
  matrix_.insert(matrix_.end(), vec.begin(), vec.end());
  mean_.clear();
  return true;
}

std::optional<std::size_t> EmbeddingTable::lookup(const std::string& word) const {
  auto it = vocab_.find(word);
  if (it == vocab_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> EmbeddingTable::lookup_fuzzy(const std::string& word) const {
  if (auto r = lookup(word)) return r;
  std::string lower = ascii_lower(word);
  if (lower != word)
    if (auto r = lookup(lower)) return r;
  return std::nullopt;
}

std::vector<double> EmbeddingTable::vector_for(const std::string& word) const {
  if (auto r = lookup_fuzzy(word)) {
    const double* p = row(*r);
    return {p, p + dim_};
  }
  if (unk_ == UnkPolicy::MeanVector) return mean_vector();
  return std::vector<double>(dim_, 0.0);
}

const std::vector<double>& EmbeddingTable::mean_vector() const {
  if (mean_.empty()) {
    mean_.assign(dim_, 0.0);
    if (!words_.empty()) {
      for (std::size_t r = 0; r < words_.size(); ++r)
        for (std::size_t j = 0; j < dim_; ++j) mean_[j] += matrix_[r * dim_ + j];
      for (auto& x : mean_) x /= static_cast<double>(words_.size());
    }
  }
  return mean_;
}

std::shared_ptr<EmbeddingTable> load_embedding_text(const std::string& path, UnkPolicy unk) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file: " + path);
  std::shared_ptr<EmbeddingTable> table;
  std::string line;
  std::size_t line_no = 0;
  std::size_t declared_count = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto fields = split_ws(line);
    if (fields.empty()) continue;
    // optional "count dim" header
    if (line_no == 1 && fields.size() == 2) {
      std::size_t cnt, dim;
      if (parse_uint(fields[0], cnt) && parse_uint(fields[1], dim)) {
        have_header = true;
        declared_count = cnt;
        table = std::make_shared<EmbeddingTable>(dim, unk);
        continue;
      }
    }
    if (fields.size() < 2)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected word and vector");
    const std::size_t dim = fields.size() - 1;
    if (!table) table = std::make_shared<EmbeddingTable>(dim, unk);
    if (dim != table->dim())
      throw FormatError(path + ":" + std::to_string(line_no) + ": vector dim " +
                        std::to_string(dim) + " != " + std::to_string(table->dim()));
    std::vector<double> vec(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      if (!parse_double(fields[j + 1], vec[j]))
        throw FormatError(path + ":" + std::to_string(line_no) + ": bad float '" +
                          fields[j + 1] + "'");
      if (!std::isfinite(vec[j]))
        throw FormatError(path + ":" + std::to_string(line_no) + ": non-finite value");
    }
    table->add(fields[0], std::move(vec));
  }
  if (!table) throw FormatError(path + ": empty embedding file");
  if (have_header && declared_count && table->size() + table->duplicate_count() != declared_count)
    throw FormatError(path + ": header declares " + std::to_string(declared_count) +
                      " rows, file has " +
                      std::to_string(table->size() + table->duplicate_count()));
  return table;
}

// ---------------------------------------------------------------------------
// PrecomputedVectors

std::size_t PrecomputedVectors::token_count(std::size_t sent) const {
  return sentences_.at(sent).size() / dim_;
}

const double* PrecomputedVectors::row(std::size_t sent, std::size_t tok) const {
  return sentences_.at(sent).data() + tok * dim_;
}

std::shared_ptr<PrecomputedVectors> PrecomputedVectors::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vector file: " + path);
  auto out = std::make_shared<PrecomputedVectors>();
  std::vector<double> cur;
  std::string line;
  std::size_t line_no = 0;
  auto flush = [&]() {
    if (!cur.empty()) {
      out->sentences_.push_back(std::move(cur));
      cur.clear();
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto fields = split_ws(line);
    if (fields.empty()) {
      flush();
      continue;
    }
    if (out->dim_ == 0) out->dim_ = fields.size();
    if (fields.size() != out->dim_)
      throw FormatError(path + ":" + std::to_string(line_no) + ": vector dim " +
                        std::to_string(fields.size()) + " != " + std::to_string(out->dim_));
    for (const auto& f : fields) {
      double x;
      if (!parse_double(f, x) || !std::isfinite(x))
        throw FormatError(path + ":" + std::to_string(line_no) + ": bad float '" + f + "'");
      cur.push_back(x);
    }
  }
  flush();
  if (out->dim_ == 0) throw FormatError(path + ": empty vector file");
  return out;
}

// ---------------------------------------------------------------------------
// CompositeEmbedder

void CompositeEmbedder::add_table(std::shared_ptr<EmbeddingTable> table) {
  total_dim_ += table->dim();
  slots_.push_back({std::move(table), nullptr});
}

void CompositeEmbedder::add_vectors(std::shared_ptr<PrecomputedVectors> vectors) {
  total_dim_ += vectors->dim();
  slots_.push_back({nullptr, std::move(vectors)});
}

std::vector<std::size_t> CompositeEmbedder::slot_dims() const {
  std::vector<std::size_t> dims;
  for (const auto& s : slots_) dims.push_back(s.table ? s.table->dim() : s.vectors->dim());
  return dims;
}

Tensor CompositeEmbedder::embed(const LabeledSentence& sentence,
                                std::size_t sentence_index) const {
  if (slots_.empty()) throw StateError("embedder has no slots");
  const std::size_t n = sentence.size();
  Tensor out = Tensor::zeros({n, total_dim_});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (const auto& slot : slots_) {
      if (slot.table) {
        auto vec = slot.table->vector_for(sentence.tokens[i].surface);
        for (std::size_t j = 0; j < vec.size(); ++j) out.at(i, off + j) = vec[j];
        off += slot.table->dim();
      } else {
        if (sentence_index == kNoIndex)
          throw CoverageError("precomputed slot requires a sentence index");
        if (sentence_index >= slot.vectors->sentence_count() ||
            i >= slot.vectors->token_count(sentence_index))
          throw CoverageError("precomputed vectors do not cover sentence " +
                              std::to_string(sentence_index) + " token " + std::to_string(i));
        const double* p = slot.vectors->row(sentence_index, i);
        for (std::size_t j = 0; j < slot.vectors->dim(); ++j) out.at(i, off + j) = p[j];
        off += slot.vectors->dim();
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// cosine + neighbor index

double cosine(const double* u, const double* v, std::size_t n) {
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < n; ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw ValueError("cosine similarity undefined for zero vector");
  double c = uv / (std::sqrt(uu) * std::sqrt(vv));
  return std::clamp(c, -1.0, 1.0);
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size() || u.empty()) throw ShapeError("cosine: dimension mismatch");
  return cosine(u.data(), v.data(), u.size());
}

const std::vector<Neighbor>* NeighborIndex::find(const std::string& word) const {
  auto it = entries_.find(word);
  return it == entries_.end() ? nullptr : &it->second;
}

void NeighborIndex::add(const std::string& word, std::vector<Neighbor> neighbors) {
  if (entries_.count(word)) throw StateError("duplicate neighbor entry: " + word);
  order_.push_back(word);
  entries_.emplace(word, std::move(neighbors));
}

int resolve_thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SANER_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

NeighborBuildResult build_neighbor_index(const EmbeddingTable& source,
                                         const std::vector<std::string>& query_vocab,
                                         std::uint32_t m, int threads) {
  if (m == 0) throw ValueError("m must be >= 1");
  // dedup queries, keep first occurrence order
  std::vector<std::string> queries;
  {
    std::unordered_map<std::string, bool> seen;
    for (const auto& q : query_vocab)
      if (!seen.count(q)) {
        seen.emplace(q, true);
        queries.push_back(q);
      }
  }
  const std::size_t nq = queries.size();
  const std::size_t nv = source.size();
  const std::size_t dim = source.dim();

  std::vector<double> norms(nv);
  for (std::size_t r = 0; r < nv; ++r) {
    double s = 0;
    const double* p = source.row(r);
    for (std::size_t j = 0; j < dim; ++j) s += p[j] * p[j];
    norms[r] = std::sqrt(s);
  }

  std::vector<std::vector<Neighbor>> results(nq);
  std::vector<char> found(nq, 0);

  auto work = [&](std::size_t begin, std::size_t end) {
    struct Cand {
      double sim;
      std::size_t row;
    };
    std::vector<Cand> cands;
    for (std::size_t qi = begin; qi < end; ++qi) {
      auto rowidx = source.lookup_fuzzy(queries[qi]);
      if (!rowidx) continue;
      found[qi] = 1;
      const double* q = source.row(*rowidx);
      const double qn = norms[*rowidx];
      if (qn == 0.0) continue;  // no similarity defined; leave entry empty
      cands.clear();
      cands.reserve(nv);
      for (std::size_t r = 0; r < nv; ++r) {
        if (r == *rowidx || norms[r] == 0.0) continue;
        double dot = 0;
        const double* p = source.row(r);
        for (std::size_t j = 0; j < dim; ++j) dot += q[j] * p[j];
        cands.push_back({std::clamp(dot / (qn * norms[r]), -1.0, 1.0), r});
      }
      const std::size_t k = std::min<std::size_t>(m, cands.size());
      auto cmp = [](const Cand& a, const Cand& b) {
        if (a.sim != b.sim) return a.sim > b.sim;
        return a.row < b.row;
      };
      std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k),
                        cands.end(), cmp);
      auto& out = results[qi];
      out.reserve(k);
      for (std::size_t i = 0; i < k; ++i) out.push_back({source.word(cands[i].row), cands[i].sim});
    }
  };

  const int nthreads = std::min<int>(resolve_thread_count(threads), static_cast<int>(nq ? nq : 1));
  if (nthreads <= 1 || nq < 2) {
    work(0, nq);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (nq + static_cast<std::size_t>(nthreads) - 1) /
                              static_cast<std::size_t>(nthreads);
    for (int t = 0; t < nthreads; ++t) {
      const std::size_t b = static_cast<std::size_t>(t) * chunk;
      const std::size_t e = std::min(nq, b + chunk);
      if (b >= e) break;
      pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }

  NeighborBuildResult result;
  result.index = NeighborIndex(m);
  for (std::size_t qi = 0; qi < nq; ++qi) {
    result.index.add(queries[qi], std::move(results[qi]));
    if (!found[qi]) result.missing.push_back(queries[qi]);
  }
  return result;
}

namespace {
constexpr char kNbrMagic[] = "SANERNBR";
constexpr std::uint32_t kNbrVersion = 1;
}  // namespace

void save_neighbor_index(const NeighborIndex& index, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open neighbor cache for writing: " + path);
  os.write(kNbrMagic, 8);
  binio::put_u32(os, kNbrVersion);
  binio::put_u32(os, index.m());
  for (const auto& word : index.words()) {
    const auto* nbrs = index.find(word);
    binio::put_string(os, word);
    binio::put_u32(os, static_cast<std::uint32_t>(nbrs->size()));
    for (const auto& nb : *nbrs) {
      binio::put_string(os, nb.word);
      binio::put_f64(os, nb.sim);
    }
  }
  if (!os) throw IoError("failed writing neighbor cache: " + path);
}

NeighborIndex load_neighbor_index(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open neighbor cache: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != kNbrMagic)
    throw FormatError("not a neighbor cache: " + path);
  std::uint32_t version = binio::get_u32(is, "version");
  if (version != kNbrVersion)
    throw FormatError("neighbor cache version mismatch: " + std::to_string(version));
  std::uint32_t m = binio::get_u32(is, "m");
  NeighborIndex index(m);
  while (true) {
    is.peek();
    if (is.eof()) break;  // clean end at a record boundary
    std::string word = binio::get_string(is, "entry word");
    std::uint32_t k = binio::get_u32(is, "entry size");
    std::vector<Neighbor> nbrs;
    nbrs.reserve(k);
    for (std::uint32_t i = 0; i < k; ++i) {
      std::string nb = binio::get_string(is, "neighbor word");
      double sim = binio::get_f64(is, "neighbor similarity");
      nbrs.push_back({std::move(nb), sim});
    }
    index.add(word, std::move(nbrs));
  }
  return index;
}

}  // namespace saner
