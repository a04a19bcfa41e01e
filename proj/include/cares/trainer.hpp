#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cares/graph.hpp"
#include "cares/item_encoder.hpp"
#include "cares/label_collab.hpp"
#include "cares/model.hpp"
#include "cares/session_data.hpp"
#include "cares/session_encoder.hpp"
#include "cares/tape.hpp"

namespace cares {

struct TrainConfig {
  int d = 256;
  int batch_size = 100;
  double lr = 0.001;
  double lr_decay = 0.8;
  int decay_every = 3;  // epochs between decays
  double l2 = 1e-5;     // decoupled weight decay
  double lambda = 0.1;  // soft-label loss weight
  int epochs = 10;
  uint64_t seed = 42;
  double tau = 12.0;  // score scale on normalized vectors
  int layers = 2;
  int t_max = 20;
  int hash_bits = 64;
  int pool_size = 1500;
  int retrieve_k = 50;
  bool label_collab = true;  // false stubs out the label machinery entirely
  bool shared_layers = false;
  bool normalize_per_layer = false;
  bool no_general = false;      // ablation switches
  bool no_personalize = false;
  double leaky_slope = 0.2;

  EncoderOptions encoder_options() const {
    return EncoderOptions{leaky_slope, normalize_per_layer, no_general,
                          no_personalize};
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["d"] = d;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["lr_decay"] = lr_decay;
    j["decay_every"] = decay_every;
    j["l2"] = l2;
    j["lambda"] = lambda;
    j["epochs"] = epochs;
    j["seed"] = seed;
    j["tau"] = tau;
    j["layers"] = layers;
    j["t_max"] = t_max;
    j["hash_bits"] = hash_bits;
    j["pool_size"] = pool_size;
    j["retrieve_k"] = retrieve_k;
    j["label_collab"] = label_collab;
    j["shared_layers"] = shared_layers;
    j["normalize_per_layer"] = normalize_per_layer;
    j["no_general"] = no_general;
    j["no_personalize"] = no_personalize;
    j["leaky_slope"] = leaky_slope;
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.d = j.value("d", c.d);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.decay_every = j.value("decay_every", c.decay_every);
    c.l2 = j.value("l2", c.l2);
    c.lambda = j.value("lambda", c.lambda);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.tau = j.value("tau", c.tau);
    c.layers = j.value("layers", c.layers);
    c.t_max = j.value("t_max", c.t_max);
    c.hash_bits = j.value("hash_bits", c.hash_bits);
    c.pool_size = j.value("pool_size", c.pool_size);
    c.retrieve_k = j.value("retrieve_k", c.retrieve_k);
    c.label_collab = j.value("label_collab", c.label_collab);
    c.shared_layers = j.value("shared_layers", c.shared_layers);
    c.normalize_per_layer = j.value("normalize_per_layer", c.normalize_per_layer);
    c.no_general = j.value("no_general", c.no_general);
    c.no_personalize = j.value("no_personalize", c.no_personalize);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    return c;
  }
};

// Softmax over scaled cosine scores against the raw embedding table;
// candidate vectors are table rows, since personalized vectors exist only
// for in-session items.
template <typename Real>
ad::Var<Real> predict_scores(ad::Tape<Real>& t, ad::Var<Real> session_vecs,
                             ad::Var<Real> item_table, Real tau) {
  auto hs = t.l2_normalize_rows(session_vecs);
  auto items = t.l2_normalize_rows(item_table);
  return t.row_softmax(t.scalar_mul(t.matmul(hs, items, true), tau));
}

template <typename Real>
struct LossTerms {
  ad::Var<Real> total;
  ad::Var<Real> ce;   // mean cross entropy over the batch
  ad::Var<Real> kl;   // mean soft-label divergence; zero node when unused
  bool has_kl = false;
};

// Mean over the batch of -log yhat[target] plus lambda times the mean
// KL(soft || yhat), the divergence summed over each soft label's support.
// Samples without a soft label contribute zero to the KL mean. Predicted
// probabilities are floored at 1e-12 inside the log; *clamp_warnings
// counts the affected targets.
template <typename Real>
LossTerms<Real> batch_loss(ad::Tape<Real>& t, ad::Var<Real> yhat,
                           const std::vector<int>& targets,
                           const std::vector<SoftLabel>& soft_labels,
                           Real lambda, size_t* clamp_warnings = nullptr) {
  const long batch = yhat.rows();
  CARES_CHECK(static_cast<long>(targets.size()) == batch);
  const Real floor = Real(1e-12);

  if (clamp_warnings) {
    for (long b = 0; b < batch; ++b)
      if (t.value(yhat).at(b, targets[static_cast<size_t>(b)]) <= floor)
        ++*clamp_warnings;
  }

  auto log_probs = t.log(yhat, floor);
  std::vector<int> rows(static_cast<size_t>(batch));
  for (long b = 0; b < batch; ++b) rows[static_cast<size_t>(b)] = static_cast<int>(b);
  auto picked = t.pick_entries(log_probs, rows, targets);
  auto ce = t.scalar_mul(t.sum(picked), Real(-1) / static_cast<Real>(batch));

  LossTerms<Real> out;
  out.ce = ce;
  if (lambda > Real(0)) {
    CARES_CHECK(soft_labels.size() == static_cast<size_t>(batch));
    std::vector<int> kl_rows, kl_cols;
    std::vector<Real> kl_weights;
    double entropy_term = 0;  // sum of y~ log y~ across the batch
    for (long b = 0; b < batch; ++b) {
      for (const auto& [item, p] : soft_labels[static_cast<size_t>(b)].probs) {
        kl_rows.push_back(static_cast<int>(b));
        kl_cols.push_back(item);
        kl_weights.push_back(static_cast<Real>(p));
        if (p > 0) entropy_term += p * std::log(p);
      }
    }
    if (!kl_rows.empty()) {
      ad::Tensor<Real> w(static_cast<long>(kl_weights.size()), 1);
      std::copy(kl_weights.begin(), kl_weights.end(), w.data.begin());
      auto cross = t.weighted_sum_rows(t.pick_entries(log_probs, kl_rows, kl_cols),
                                       t.constant(std::move(w)));
      out.kl = t.affine(cross, Real(-1) / static_cast<Real>(batch),
                        static_cast<Real>(entropy_term) / static_cast<Real>(batch));
      out.has_kl = true;
      out.total = t.add(ce, t.scalar_mul(out.kl, lambda));
      return out;
    }
  }
  out.kl = t.constant_scalar(Real(0));
  out.total = ce;
  return out;
}

// Adam with decoupled weight decay; moments are kept per parameter name.
template <typename Real>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  int64_t step_count() const { return step_; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }

  struct State {
    ad::Tensor<Real> m;
    ad::Tensor<Real> v;
  };

  std::vector<std::pair<std::string, State>>& states() { return states_; }
  void set_step(int64_t s) { step_ = s; }

  void step(const std::vector<std::pair<std::string, ad::Tensor<Real>*>>& params,
            const ad::Tape<Real>& tape, Real lr, Real weight_decay) {
    if (states_.empty())
      for (const auto& [name, tensor] : params)
        states_.emplace_back(name,
                             State{ad::Tensor<Real>(tensor->rows, tensor->cols),
                                   ad::Tensor<Real>(tensor->rows, tensor->cols)});
    CARES_CHECK(states_.size() == params.size());
    ++step_;
    const Real bc1 = Real(1) - static_cast<Real>(std::pow(beta1_, step_));
    const Real bc2 = Real(1) - static_cast<Real>(std::pow(beta2_, step_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& [name, tensor] = params[i];
      auto& st = states_[i].second;
      const ad::Tensor<Real>* grad = tape.grad_of(*tensor);
      const Real b1 = static_cast<Real>(beta1_);
      const Real b2 = static_cast<Real>(beta2_);
      for (long j = 0; j < tensor->size(); ++j) {
        const size_t s = static_cast<size_t>(j);
        const Real g = grad ? grad->data[s] : Real(0);
        st.m.data[s] = b1 * st.m.data[s] + (Real(1) - b1) * g;
        st.v.data[s] = b2 * st.v.data[s] + (Real(1) - b2) * g * g;
        const Real mhat = st.m.data[s] / bc1;
        const Real vhat = st.v.data[s] / bc2;
        tensor->data[s] -=
            lr * (mhat / (std::sqrt(vhat) + static_cast<Real>(eps_)) +
                  static_cast<Real>(weight_decay) * tensor->data[s]);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  int64_t step_ = 0;
  std::vector<std::pair<std::string, State>> states_;
};

struct EpochMetrics {
  int epoch = 0;       // 1-based
  double lr = 0;
  double loss = 0;     // mean over samples; equals ce + lambda * kl
  double ce = 0;
  double kl = 0;
  double wall_seconds = 0;
};

// ---- checkpoint ------------------------------------------------------------
//
// Header: magic "CARS", version u32, d u32, m u32, l u32, L u32, relation
// count u32, vocab hash u64, graph hash u64, epoch u32, adam step u64,
// config JSON (u32 length + bytes). Then parameter tensor records and Adam
// moment records: name length u32, name, rows u32, cols u32, scalar width
// u8, raw little-endian data.

namespace detail {

constexpr char kCkptMagic[4] = {'C', 'A', 'R', 'S'};
constexpr uint32_t kCkptVersion = 1;

template <typename Real>
void put_tensor(std::string& buf, const std::string& name,
                const ad::Tensor<Real>& t) {
  put(buf, static_cast<uint32_t>(name.size()));
  buf.append(name);
  put(buf, static_cast<uint32_t>(t.rows));
  put(buf, static_cast<uint32_t>(t.cols));
  put(buf, static_cast<uint8_t>(sizeof(Real)));
  buf.append(reinterpret_cast<const char*>(t.data.data()),
             t.data.size() * sizeof(Real));
}

template <typename Real>
std::pair<std::string, ad::Tensor<Real>> take_tensor(const std::string& buf,
                                                     size_t& pos) {
  const uint32_t name_len = take<uint32_t>(buf, pos);
  if (pos + name_len > buf.size())
    throw UserError("corrupt checkpoint: truncated name");
  std::string name(buf.data() + pos, name_len);
  pos += name_len;
  const uint32_t rows = take<uint32_t>(buf, pos);
  const uint32_t cols = take<uint32_t>(buf, pos);
  const uint8_t width = take<uint8_t>(buf, pos);
  if (width != sizeof(Real))
    throw UserError("checkpoint scalar width " + std::to_string(width) +
                    " does not match this build's " +
                    std::to_string(sizeof(Real)));
  ad::Tensor<Real> t(rows, cols);
  const size_t bytes = t.data.size() * sizeof(Real);
  if (pos + bytes > buf.size())
    throw UserError("corrupt checkpoint: truncated tensor data");
  std::memcpy(t.data.data(), buf.data() + pos, bytes);
  pos += bytes;
  return {std::move(name), std::move(t)};
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const std::string& path, ModelParams<Real>& params,
                     AdamOptimizer<Real>& optimizer, int epoch,
                     const TrainConfig& config, uint64_t vocab_hash,
                     uint64_t graph_hash) {
  std::string buf;
  buf.append(detail::kCkptMagic, 4);
  detail::put(buf, detail::kCkptVersion);
  detail::put(buf, static_cast<uint32_t>(params.dims.d));
  detail::put(buf, static_cast<uint32_t>(params.dims.items));
  detail::put(buf, static_cast<uint32_t>(params.dims.categories));
  detail::put(buf, static_cast<uint32_t>(params.dims.layers));
  detail::put(buf, static_cast<uint32_t>(params.dims.relations));
  detail::put(buf, vocab_hash);
  detail::put(buf, graph_hash);
  detail::put(buf, static_cast<uint32_t>(epoch));
  detail::put(buf, static_cast<uint64_t>(optimizer.step_count()));
  const std::string cfg = config.to_json().dump();
  detail::put(buf, static_cast<uint32_t>(cfg.size()));
  buf.append(cfg);

  auto named = params.named_tensors();
  detail::put(buf, static_cast<uint32_t>(named.size()));
  for (auto& [name, tensor] : named) detail::put_tensor(buf, name, *tensor);
  detail::put(buf, static_cast<uint32_t>(optimizer.states().size()));
  for (auto& [name, st] : optimizer.states()) {
    detail::put_tensor(buf, "adam.m." + name, st.m);
    detail::put_tensor(buf, "adam.v." + name, st.v);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  out.write(buf.data(), static_cast<long>(buf.size()));
}

template <typename Real>
struct LoadedCheckpoint {
  ModelParams<Real> params;
  AdamOptimizer<Real> optimizer;
  int epoch = 0;
  TrainConfig config;
  uint64_t vocab_hash = 0;
  uint64_t graph_hash = 0;
};

// expected_* hashes of 0 skip the corresponding guard.
template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path,
                                       uint64_t expected_vocab_hash = 0,
                                       uint64_t expected_graph_hash = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 4 || std::memcmp(buf.data(), detail::kCkptMagic, 4) != 0)
    throw UserError("corrupt checkpoint: bad magic in " + path);
  size_t pos = 4;
  const uint32_t version = detail::take<uint32_t>(buf, pos);
  if (version != detail::kCkptVersion)
    throw UserError("unsupported checkpoint version " + std::to_string(version));

  LoadedCheckpoint<Real> out;
  out.params.dims.d = static_cast<int>(detail::take<uint32_t>(buf, pos));
  out.params.dims.items = static_cast<int>(detail::take<uint32_t>(buf, pos));
  out.params.dims.categories = static_cast<int>(detail::take<uint32_t>(buf, pos));
  out.params.dims.layers = static_cast<int>(detail::take<uint32_t>(buf, pos));
  out.params.dims.relations = static_cast<int>(detail::take<uint32_t>(buf, pos));
  out.vocab_hash = detail::take<uint64_t>(buf, pos);
  out.graph_hash = detail::take<uint64_t>(buf, pos);
  if (expected_vocab_hash && out.vocab_hash != expected_vocab_hash)
    throw UserError("checkpoint/vocab mismatch: the checkpoint was trained on "
                    "a different vocabulary");
  if (expected_graph_hash && out.graph_hash != expected_graph_hash)
    throw UserError("checkpoint/graph mismatch: the checkpoint was trained on "
                    "a different graph");
  out.epoch = static_cast<int>(detail::take<uint32_t>(buf, pos));
  const uint64_t adam_step = detail::take<uint64_t>(buf, pos);
  const uint32_t cfg_len = detail::take<uint32_t>(buf, pos);
  if (pos + cfg_len > buf.size())
    throw UserError("corrupt checkpoint: truncated config");
  const nlohmann::json cfg_json =
      nlohmann::json::parse(buf.substr(pos, cfg_len), nullptr, false);
  if (cfg_json.is_discarded())
    throw UserError("corrupt checkpoint: bad config snapshot");
  pos += cfg_len;
  out.config = TrainConfig::from_json(cfg_json);
  out.params.dims.t_max = out.config.t_max;
  out.params.shared_layers = out.config.shared_layers;

  // Allocate tensors at recorded shapes through init, then overwrite.
  out.params.init(0);
  auto named = out.params.named_tensors();
  const uint32_t tensor_count = detail::take<uint32_t>(buf, pos);
  if (tensor_count != named.size())
    throw UserError("corrupt checkpoint: tensor count mismatch");
  for (uint32_t i = 0; i < tensor_count; ++i) {
    auto [name, tensor] = detail::take_tensor<Real>(buf, pos);
    if (name != named[i].first)
      throw UserError("corrupt checkpoint: unexpected tensor " + name);
    if (tensor.rows != named[i].second->rows ||
        tensor.cols != named[i].second->cols)
      throw UserError("corrupt checkpoint: shape mismatch for " + name);
    *named[i].second = std::move(tensor);
  }
  const uint32_t state_count = detail::take<uint32_t>(buf, pos);
  out.optimizer.set_step(static_cast<int64_t>(adam_step));
  for (uint32_t i = 0; i < state_count; ++i) {
    auto [mname, m] = detail::take_tensor<Real>(buf, pos);
    auto [vname, v] = detail::take_tensor<Real>(buf, pos);
    if (mname.substr(0, 7) != "adam.m." || vname.substr(0, 7) != "adam.v.")
      throw UserError("corrupt checkpoint: bad optimizer record");
    out.optimizer.states().emplace_back(
        mname.substr(7),
        typename AdamOptimizer<Real>::State{std::move(m), std::move(v)});
  }
  if (pos != buf.size()) throw UserError("corrupt checkpoint: trailing bytes");
  return out;
}

// ---- training loop ---------------------------------------------------------

template <typename Real>
class Trainer {
 public:
  Trainer(const Dataset& dataset, const CrossSessionGraph& graph,
          const TrainConfig& config)
      : dataset_(dataset), graph_(graph), cfg_(config), pool_(resolve_pool(config)) {
    CARES_CHECK_MSG(!dataset.train.empty(), "empty train set");
    CARES_CHECK_MSG(graph.num_nodes == dataset.vocab.num_items(),
                    "graph/vocab size mismatch");
    params_.dims =
        ModelDims{cfg_.d, dataset.vocab.num_items(),
                  dataset.vocab.num_categories(), graph.relations.count(),
                  cfg_.layers, cfg_.t_max};
    params_.shared_layers = cfg_.shared_layers;
    params_.init(derive_seed(cfg_.seed, 1));
    if (cfg_.label_collab)
      projector_ = HashProjector(cfg_.d, cfg_.hash_bits, derive_seed(cfg_.seed, 2));
  }

  ModelParams<Real>& params() { return params_; }
  AdamOptimizer<Real>& optimizer() { return optimizer_; }
  CandidatePool& pool() { return pool_; }
  int epochs_done() const { return epoch_; }

  double lr_for_epoch(int epoch_index) const {  // 0-based
    return cfg_.lr * std::pow(cfg_.lr_decay, epoch_index / cfg_.decay_every);
  }

  EpochMetrics run_epoch() {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_for_epoch(epoch_);
    std::vector<size_t> order(dataset_.train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(derive_seed(cfg_.seed, 1000 + static_cast<uint64_t>(epoch_)));
    shuffle_rng.shuffle(order);

    double sum_ce = 0, sum_kl = 0;
    size_t n_samples = 0;
    auto named = params_.named_tensors();
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg_.batch_size)) {
      const size_t end = std::min(order.size(), at + static_cast<size_t>(cfg_.batch_size));
      std::vector<const Session*> samples;
      samples.reserve(end - at);
      for (size_t i = at; i < end; ++i)
        samples.push_back(&dataset_.train[order[i]]);
      const auto metrics = train_step(samples, named, lr);
      sum_ce += metrics.first * static_cast<double>(end - at);
      sum_kl += metrics.second * static_cast<double>(end - at);
      n_samples += end - at;
    }
    ++epoch_;
    EpochMetrics m;
    m.epoch = epoch_;
    m.lr = lr;
    m.ce = sum_ce / static_cast<double>(n_samples);
    m.kl = sum_kl / static_cast<double>(n_samples);
    m.loss = m.ce + cfg_.lambda * m.kl;
    m.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    if (clamp_warnings_)
      std::cerr << "warning: " << clamp_warnings_
                << " target probabilities clamped at 1e-12 this epoch\n";
    clamp_warnings_ = 0;
    return m;
  }

 private:
  static CandidatePool resolve_pool(const TrainConfig& cfg) {
    return CandidatePool(static_cast<size_t>(std::max(1, cfg.pool_size)));
  }

  // One optimizer step over a batch; returns (mean ce, mean kl).
  std::pair<double, double> train_step(
      const std::vector<const Session*>& samples,
      const std::vector<std::pair<std::string, ad::Tensor<Real>*>>& named,
      double lr) {
    auto batch = bind_batch(samples, dataset_.vocab, graph_, cfg_.layers);
    ad::Tape<Real> tape;
    auto encoded = encode_items(tape, params_, batch, cfg_.encoder_options());
    auto session_vecs = encode_batch_sessions(tape, params_, batch, encoded,
                                              cfg_.leaky_slope);

    // Label collaboration on detached session vectors: fingerprints and
    // retrieval see values only, so no gradient reaches the pool.
    std::vector<std::pair<Fingerprint, int>> new_records;
    std::vector<SoftLabel> soft_labels(batch.sessions.size());
    if (cfg_.label_collab) {
      const auto& vecs = tape.value(session_vecs);
      for (size_t s = 0; s < batch.sessions.size(); ++s) {
        ad::Tensor<Real> row(1, vecs.cols);
        std::copy(vecs.row_ptr(static_cast<long>(s)),
                  vecs.row_ptr(static_cast<long>(s)) + vecs.cols,
                  row.data.begin());
        Fingerprint fp = projector_.fingerprint(row);
        if (cfg_.lambda > 0)
          soft_labels[s] = soft_label(pool_.retrieve(fp, cfg_.retrieve_k));
        new_records.emplace_back(std::move(fp), batch.sessions[s].target);
      }
    }

    std::vector<int> targets;
    for (const auto& s : batch.sessions) targets.push_back(s.target);
    auto yhat = predict_scores(tape, session_vecs, tape.param(params_.item_table),
                               static_cast<Real>(cfg_.tau));
    auto loss = batch_loss(tape, yhat, targets, soft_labels,
                           static_cast<Real>(cfg_.lambda), &clamp_warnings_);
    const double loss_value =
        static_cast<double>(tape.value(loss.total).at(0, 0));
    const double ce_value = static_cast<double>(tape.value(loss.ce).at(0, 0));
    const double kl_value = static_cast<double>(tape.value(loss.kl).at(0, 0));
    if (!std::isfinite(loss_value)) {
      tape.dump(std::cerr);
      throw InternalError("non-finite loss " + std::to_string(loss_value) +
                          " at epoch " + std::to_string(epoch_ + 1));
    }

    tape.backward(loss.total);
    optimizer_.step(named, tape, static_cast<Real>(lr),
                    static_cast<Real>(cfg_.l2));

    // The pool is updated only after the whole batch retrieved, so a
    // sample never sees itself.
    pool_.push_batch(new_records.begin(), new_records.end());
    return {ce_value, kl_value};
  }

  const Dataset& dataset_;
  const CrossSessionGraph& graph_;
  TrainConfig cfg_;
  ModelParams<Real> params_;
  AdamOptimizer<Real> optimizer_;
  CandidatePool pool_;
  HashProjector projector_;
  int epoch_ = 0;
  size_t clamp_warnings_ = 0;
};

inline nlohmann::ordered_json epoch_to_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["loss"] = m.loss;
  j["ce"] = m.ce;
  j["kl"] = m.kl;
  j["wall_seconds"] = m.wall_seconds;
  return j;
}

}  // namespace cares
