#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "cares/common.hpp"
#include "cares/tensor.hpp"

namespace cares {

// m-bit fingerprint packed into 64-bit words.
struct Fingerprint {
  int bits = 0;
  std::vector<uint64_t> words;

  void set_bit(int i) { words[static_cast<size_t>(i) / 64] |= 1ull << (i % 64); }
  bool bit(int i) const {
    return (words[static_cast<size_t>(i) / 64] >> (i % 64)) & 1u;
  }
};

inline int hamming(const Fingerprint& a, const Fingerprint& b) {
  if (a.bits != b.bits)
    throw InternalError("hamming: fingerprint width mismatch " +
                        std::to_string(a.bits) + " vs " +
                        std::to_string(b.bits));
  int dist = 0;
  for (size_t w = 0; w < a.words.size(); ++w)
    dist += std::popcount(a.words[w] ^ b.words[w]);
  return dist;
}

// Frozen random projection for sign hashing. The matrix is d x m with
// standard normal entries drawn from the seed; it is never trained.
class HashProjector {
 public:
  HashProjector() = default;
  HashProjector(int dim, int hash_bits, uint64_t seed)
      : dim_(dim), bits_(hash_bits), matrix_(dim, hash_bits) {
    if (!(hash_bits > 0 && hash_bits < dim))
      throw UserError("hash dimension must be in (0, d); got m=" +
                      std::to_string(hash_bits) + ", d=" + std::to_string(dim));
    Rng rng(seed);
    matrix_.fill_normal(rng);
  }

  int dim() const { return dim_; }
  int bits() const { return bits_; }

  // Sign-binarized projection; an exactly-zero component maps to bit 0.
  template <typename Real>
  Fingerprint fingerprint(const ad::Tensor<Real>& session_vec) const {
    CARES_CHECK_MSG(session_vec.rows == 1 && session_vec.cols == dim_,
                    "fingerprint input must be 1 x d");
    Fingerprint fp;
    fp.bits = bits_;
    fp.words.assign(static_cast<size_t>((bits_ + 63) / 64), 0);
    for (int j = 0; j < bits_; ++j) {
      double acc = 0;
      for (int i = 0; i < dim_; ++i)
        acc += static_cast<double>(session_vec.at(0, i)) * matrix_.at(i, j);
      if (acc > 0.0) fp.set_bit(j);
    }
    return fp;
  }

 private:
  int dim_ = 0;
  int bits_ = 0;
  ad::Tensor<double> matrix_;
};

// Sparse soft label over item ids; probabilities sum to one.
struct SoftLabel {
  std::vector<std::pair<int, double>> probs;  // item id -> probability
  bool empty() const { return probs.empty(); }
};

struct RetrievedLabels {
  std::vector<int> targets;
  std::vector<double> weights;
  bool empty() const { return targets.empty(); }
};

// Sliding window of the M most recent training samples' fingerprints and
// targets; eviction is strictly oldest-first. The trainer updates the pool
// only after the whole batch has queried it, so a sample never retrieves
// itself.
class CandidatePool {
 public:
  explicit CandidatePool(size_t capacity = 1500) : capacity_(capacity) {
    CARES_CHECK(capacity_ > 0);
  }

  size_t capacity() const { return capacity_; }
  size_t size() const { return records_.size(); }

  void push(Fingerprint fp, int target) {
    if (records_.size() < capacity_) {
      records_.push_back({std::move(fp), target, next_seq_++});
    } else {
      records_[cursor_] = {std::move(fp), target, next_seq_++};
      cursor_ = (cursor_ + 1) % capacity_;
    }
  }

  template <typename It>
  void push_batch(It begin, It end) {
    for (auto it = begin; it != end; ++it) push(it->first, it->second);
  }

  // Records in insertion order, oldest first (test/inspection surface).
  std::vector<std::pair<const Fingerprint*, int>> records_in_order() const {
    std::vector<const Record*> ptrs;
    for (const auto& r : records_) ptrs.push_back(&r);
    std::sort(ptrs.begin(), ptrs.end(),
              [](const Record* a, const Record* b) { return a->seq < b->seq; });
    std::vector<std::pair<const Fingerprint*, int>> out;
    for (const Record* r : ptrs) out.emplace_back(&r->fp, r->target);
    return out;
  }

  // The min(K, size) records with the smallest hamming distance to the
  // query, ties broken by recency (newer first). Raw weight of a record is
  // m - distance; weights are normalized to sum to one, falling back to
  // uniform when every distance equals m. Only fingerprints are touched:
  // the scan is XOR/popcount work, never d-dimensional arithmetic.
  RetrievedLabels retrieve(const Fingerprint& query, int k) const {
    CARES_CHECK(k >= 1);
    RetrievedLabels out;
    if (records_.empty()) return out;

    struct Scored {
      int dist;
      uint64_t seq;
      int target;
    };
    std::vector<Scored> scored;
    scored.reserve(records_.size());
    for (const auto& r : records_)
      scored.push_back({hamming(query, r.fp), r.seq, r.target});
    const size_t keep = std::min<size_t>(static_cast<size_t>(k), scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(keep),
                      scored.end(), [](const Scored& a, const Scored& b) {
                        if (a.dist != b.dist) return a.dist < b.dist;
                        return a.seq > b.seq;
                      });

    double total = 0;
    for (size_t i = 0; i < keep; ++i)
      total += static_cast<double>(query.bits - scored[i].dist);
    for (size_t i = 0; i < keep; ++i) {
      out.targets.push_back(scored[i].target);
      if (total > 0)
        out.weights.push_back(
            static_cast<double>(query.bits - scored[i].dist) / total);
      else
        out.weights.push_back(1.0 / static_cast<double>(keep));
    }
    return out;
  }

 private:
  struct Record {
    Fingerprint fp;
    int target = -1;
    uint64_t seq = 0;
  };

  size_t capacity_;
  std::vector<Record> records_;
  size_t cursor_ = 0;      // next eviction slot once full
  uint64_t next_seq_ = 0;  // recency counter
};

// Accumulates retrieval weights per target; duplicates merge additively.
inline SoftLabel soft_label(const RetrievedLabels& retrieved) {
  SoftLabel out;
  if (retrieved.empty()) return out;
  std::unordered_map<int, double> acc;
  std::vector<int> order;
  for (size_t i = 0; i < retrieved.targets.size(); ++i) {
    auto [it, inserted] = acc.emplace(retrieved.targets[i], 0.0);
    if (inserted) order.push_back(retrieved.targets[i]);
    it->second += retrieved.weights[i];
  }
  for (int id : order) out.probs.emplace_back(id, acc[id]);
  return out;
}

}  // namespace cares
