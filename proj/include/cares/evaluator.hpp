#pragma once

#include <atomic>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cares/trainer.hpp"

namespace cares {

struct EvalReport {
  size_t n_cases = 0;
  double p_at_20 = 0;
  double mrr_at_20 = 0;
  std::vector<int> ranks;  // per case, 1-based

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["n"] = n_cases;
    j["p_at_20"] = p_at_20;
    j["mrr_at_20"] = mrr_at_20;
    return j;
  }
};

// Pessimistic rank: ties count against the target, so rank is one plus the
// number of other items scoring greater than or equal to the target.
template <typename Real>
int rank_target(const ad::Tensor<Real>& scores, long row, int target) {
  const Real target_score = scores.at(row, target);
  int ahead = 0;
  const Real* r = scores.row_ptr(row);
  for (long i = 0; i < scores.cols; ++i)
    if (i != target && r[i] >= target_score) ++ahead;
  return 1 + ahead;
}

template <typename Real>
int rank_target(const std::vector<Real>& scores, int target) {
  ad::Tensor<Real> t(1, static_cast<long>(scores.size()));
  std::copy(scores.begin(), scores.end(), t.data.begin());
  return rank_target(t, 0, target);
}

inline EvalReport report_from_ranks(const std::vector<int>& ranks, int cutoff) {
  if (ranks.empty()) throw UserError("cannot evaluate an empty test set");
  EvalReport report;
  report.n_cases = ranks.size();
  report.ranks = ranks;
  double hits = 0, rr = 0;
  for (int rank : ranks) {
    if (rank <= cutoff) {
      hits += 1;
      rr += 1.0 / static_cast<double>(rank);
    }
  }
  report.p_at_20 = hits / static_cast<double>(ranks.size());
  report.mrr_at_20 = rr / static_cast<double>(ranks.size());
  return report;
}

// Ranks every test sample against the full catalog. Cases are independent,
// so batches may be scored on worker threads; the rank merge is by index
// and therefore order-independent.
template <typename Real>
EvalReport evaluate(ModelParams<Real>& params, const CrossSessionGraph& graph,
                    const Vocab& vocab, const std::vector<Session>& test,
                    const TrainConfig& cfg, int cutoff = 20, int threads = 1) {
  if (test.empty()) throw UserError("cannot evaluate an empty test set");
  std::vector<int> ranks(test.size(), 0);

  const size_t batch_size = static_cast<size_t>(std::max(1, cfg.batch_size));
  std::vector<size_t> batch_starts;
  for (size_t at = 0; at < test.size(); at += batch_size)
    batch_starts.push_back(at);

  auto score_batch = [&](size_t at) {
    const size_t end = std::min(test.size(), at + batch_size);
    std::vector<const Session*> samples;
    for (size_t i = at; i < end; ++i) samples.push_back(&test[i]);
    auto batch = bind_batch(samples, vocab, graph, cfg.layers);
    ad::Tape<Real> tape;
    auto encoded = encode_items(tape, params, batch, cfg.encoder_options());
    auto session_vecs =
        encode_batch_sessions(tape, params, batch, encoded, cfg.leaky_slope);
    auto yhat = predict_scores(tape, session_vecs,
                               tape.param(params.item_table),
                               static_cast<Real>(cfg.tau));
    const auto& probs = tape.value(yhat);
    for (size_t i = at; i < end; ++i)
      ranks[i] = rank_target(probs, static_cast<long>(i - at), test[i].target);
  };

  if (threads <= 1 || batch_starts.size() <= 1) {
    for (size_t at : batch_starts) score_batch(at);
  } else {
    std::vector<std::thread> workers;
    std::atomic<size_t> next{0};
    const int n_workers =
        std::min<int>(threads, static_cast<int>(batch_starts.size()));
    for (int w = 0; w < n_workers; ++w)
      workers.emplace_back([&] {
        for (;;) {
          const size_t i = next.fetch_add(1);
          if (i >= batch_starts.size()) return;
          score_batch(batch_starts[i]);
        }
      });
    for (auto& w : workers) w.join();
  }
  return report_from_ranks(ranks, cutoff);
}

inline void write_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  out << report.to_json().dump(2) << "\n";
}

inline void write_per_case(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  for (size_t i = 0; i < report.ranks.size(); ++i)
    out << i << "\t" << report.ranks[i] << "\n";
}

}  // namespace cares
