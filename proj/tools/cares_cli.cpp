// Command-line driver: preprocess | build-graph | train | evaluate |
// recommend | inspect-graph. Exit codes: 0 success, 2 bad input or usage,
// 3 internal invariant violation.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cares/evaluator.hpp"
#include "cares/graph.hpp"
#include "cares/session_data.hpp"
#include "cares/trainer.hpp"

namespace {

using nlohmann::json;

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw cares::UserError("cannot read config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw cares::UserError("config file must hold a JSON object: " + path);
  return j;
}

template <typename T>
void from_config(const json& j, const char* key, T& value) {
  if (j.contains(key)) value = j.at(key).get<T>();
}

struct GlobalArgs {
  std::string config_path;
  uint64_t seed = 42;
  int threads = 1;
  bool deterministic = false;

  int effective_threads() const { return deterministic ? 1 : threads; }
};

void add_global_flags(CLI::App* cmd, GlobalArgs& g) {
  cmd->add_option("--config", g.config_path,
                  "JSON config file; flags override file values");
  cmd->add_option("--seed", g.seed, "run seed");
  cmd->add_option("--threads", g.threads, "worker threads where supported");
  cmd->add_flag("--deterministic", g.deterministic,
                "force single-threaded deterministic execution");
}

// Pre-scan for --config so file values load before CLI11 applies flags.
std::string peek_config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

uint64_t vocab_hash_of(const std::string& data_prefix) {
  return cares::read_vocab(data_prefix + ".vocab.json").content_hash();
}

int run_preprocess(const json& cfg_file, GlobalArgs& g, CLI::App* cmd,
                   int& out_code) {
  auto input = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto delimiter = std::make_shared<std::string>(",");
  auto cols = std::make_shared<cares::ColumnMap>();
  auto pre = std::make_shared<cares::PreprocessConfig>();
  auto no_augment = std::make_shared<bool>(false);
  auto no_test_augment = std::make_shared<bool>(false);

  from_config(cfg_file, "delimiter", *delimiter);
  from_config(cfg_file, "session_col", cols->session_col);
  from_config(cfg_file, "time_col", cols->time_col);
  from_config(cfg_file, "item_col", cols->item_col);
  from_config(cfg_file, "category_col", cols->category_col);
  from_config(cfg_file, "header", cols->has_header);
  from_config(cfg_file, "min_item_freq", pre->min_item_freq);
  from_config(cfg_file, "t_max", pre->t_max);
  from_config(cfg_file, "split_boundary", pre->split_boundary);
  from_config(cfg_file, "ignore_categories", pre->ignore_categories);

  cmd->add_option("--input", *input, "delimited event log")->required();
  cmd->add_option("--out", *out, "output path prefix")->required();
  cmd->add_option("--delimiter", *delimiter, "field delimiter (or 'tab')");
  cmd->add_option("--session-col", cols->session_col);
  cmd->add_option("--time-col", cols->time_col);
  cmd->add_option("--item-col", cols->item_col);
  cmd->add_option("--category-col", cols->category_col);
  cmd->add_flag("--header", cols->has_header, "skip the first line");
  cmd->add_option("--min-item-freq", pre->min_item_freq);
  cmd->add_option("--t-max", pre->t_max);
  cmd->add_option("--split-boundary", pre->split_boundary,
                  "sessions ending after this timestamp become test");
  cmd->add_flag("--no-augment", *no_augment,
                "emit one sample per session instead of all prefixes");
  cmd->add_flag("--no-test-augment", *no_test_augment,
                "augment train but keep single test samples");
  cmd->add_flag("--ignore-categories", pre->ignore_categories,
                "treat every item as one category");

  cmd->callback([=, &out_code] {
    cols->delimiter = (*delimiter == "tab" || *delimiter == "\\t")
                          ? '\t'
                          : (*delimiter)[0];
    pre->augment = !*no_augment;
    pre->augment_test = !*no_test_augment;
    std::ifstream in(*input, std::ios::binary);
    if (!in) throw cares::UserError("cannot read input " + *input);
    size_t skipped = 0;
    std::string warning;
    auto ds = cares::preprocess(in, *cols, *pre, &skipped, &warning);
    if (skipped)
      std::cerr << "warning: skipped " << skipped << " malformed lines\n";
    if (!warning.empty()) std::cerr << "warning: " << warning << "\n";
    cares::write_dataset(*out, ds);
    std::cerr << "wrote " << *out << ".{train,test}.jsonl: "
              << ds.stats.train_sessions << " train / "
              << ds.stats.test_sessions << " test samples over "
              << ds.stats.items << " items\n";
    out_code = 0;
  });
  (void)g;
  return 0;
}

int run_build_graph(const json& cfg_file, GlobalArgs& g, CLI::App* cmd,
                    int& out_code) {
  auto data = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto report = std::make_shared<std::string>();
  auto gcfg = std::make_shared<cares::GraphConfig>();

  from_config(cfg_file, "epsilon", gcfg->epsilon);
  from_config(cfg_file, "top_n", gcfg->top_n);
  from_config(cfg_file, "top_q", gcfg->top_q);
  from_config(cfg_file, "alpha", gcfg->alpha);

  cmd->add_option("--data", *data, "dataset path prefix")->required();
  cmd->add_option("--out", *out, "graph output file")->required();
  cmd->add_option("--report", *report, "relation report JSON path");
  cmd->add_option("--epsilon", gcfg->epsilon);
  cmd->add_option("--top-n", gcfg->top_n);
  cmd->add_option("--top-q", gcfg->top_q);
  cmd->add_option("--alpha", gcfg->alpha);

  cmd->callback([=, &out_code] {
    auto ds = cares::read_dataset(*data);
    auto graph = cares::build_graph(ds, *gcfg);
    cares::write_graph(*out, graph);
    auto j = cares::graph_to_json(graph, false);
    if (!report->empty()) {
      std::ofstream rep(*report);
      if (!rep) throw cares::UserError("cannot write " + *report);
      rep << j.dump(2) << "\n";
    }
    std::cerr << "wrote " << *out << ": " << graph.edges.size() << " edges, "
              << graph.relations.count() << " relations\n";
    out_code = 0;
  });
  (void)g;
  return 0;
}

int run_train(const json& cfg_file, GlobalArgs& g, CLI::App* cmd,
              int& out_code) {
  auto data = std::make_shared<std::string>();
  auto graph_path = std::make_shared<std::string>();
  auto ckpt = std::make_shared<std::string>();
  auto log_path = std::make_shared<std::string>();
  auto preset = std::make_shared<std::string>();
  auto tc = std::make_shared<cares::TrainConfig>();
  auto no_label = std::make_shared<bool>(false);
  *tc = cares::TrainConfig::from_json(cfg_file);

  cmd->add_option("--data", *data, "dataset path prefix")->required();
  cmd->add_option("--graph", *graph_path, "graph file")->required();
  cmd->add_option("--checkpoint", *ckpt, "checkpoint output")->required();
  cmd->add_option("--log", *log_path, "epoch log (JSON lines)");
  cmd->add_option("--d", tc->d, "embedding width");
  cmd->add_option("--batch-size", tc->batch_size);
  cmd->add_option("--lr", tc->lr);
  cmd->add_option("--lr-decay", tc->lr_decay);
  cmd->add_option("--decay-every", tc->decay_every);
  cmd->add_option("--l2", tc->l2);
  auto* lambda_opt = cmd->add_option("--lambda", tc->lambda,
                                     "soft-label loss weight");
  cmd->add_option("--preset", *preset,
                  "lambda preset: diginetica | yoochoose | tmall");
  cmd->add_option("--epochs", tc->epochs);
  cmd->add_option("--tau", tc->tau, "score scale");
  cmd->add_option("--layers", tc->layers);
  cmd->add_option("--t-max", tc->t_max);
  cmd->add_option("--hash-dim", tc->hash_bits);
  cmd->add_option("--pool-size", tc->pool_size);
  cmd->add_option("--retrieve-k", tc->retrieve_k);
  cmd->add_flag("--no-label-collab", *no_label,
                "stub out label collaboration entirely");
  cmd->add_flag("--shared-layers", tc->shared_layers);
  cmd->add_flag("--normalize-per-layer", tc->normalize_per_layer);
  cmd->add_flag("--no-general", tc->no_general);
  cmd->add_flag("--no-personalize", tc->no_personalize);

  cmd->callback([=, &g, &out_code] {
    if (!preset->empty() && lambda_opt->count() == 0 &&
        !cfg_file.contains("lambda")) {
      if (*preset == "diginetica") tc->lambda = 0.1;
      else if (*preset == "yoochoose") tc->lambda = 5.0;
      else if (*preset == "tmall") tc->lambda = 10.0;
      else throw cares::UserError("unknown preset " + *preset);
    }
    tc->seed = g.seed;
    tc->label_collab = !*no_label;
    auto ds = cares::read_dataset(*data);
    auto graph = cares::read_graph(*graph_path);
    cares::Trainer<float> trainer(ds, graph, *tc);

    std::ofstream log;
    if (!log_path->empty()) {
      log.open(*log_path, std::ios::binary);
      if (!log) throw cares::UserError("cannot write " + *log_path);
    }
    for (int e = 0; e < tc->epochs; ++e) {
      auto m = trainer.run_epoch();
      auto line = cares::epoch_to_json(m).dump();
      std::cerr << line << "\n";
      if (log.is_open()) log << line << "\n";
    }
    cares::save_checkpoint(*ckpt, trainer.params(), trainer.optimizer(),
                           trainer.epochs_done(), *tc,
                           ds.vocab.content_hash(), graph.content_hash());
    std::cerr << "wrote " << *ckpt << "\n";
    out_code = 0;
  });
  return 0;
}

int run_evaluate(const json& cfg_file, GlobalArgs& g, CLI::App* cmd,
                 int& out_code) {
  auto data = std::make_shared<std::string>();
  auto graph_path = std::make_shared<std::string>();
  auto ckpt = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto per_case = std::make_shared<std::string>();
  auto cutoff = std::make_shared<int>(20);
  from_config(cfg_file, "cutoff", *cutoff);

  cmd->add_option("--checkpoint", *ckpt)->required();
  cmd->add_option("--data", *data, "dataset path prefix")->required();
  cmd->add_option("--graph", *graph_path, "graph file")->required();
  cmd->add_option("--out", *out, "report path (default: stdout)");
  cmd->add_option("--per-case", *per_case, "per-case rank TSV");
  cmd->add_option("--cutoff", *cutoff);

  cmd->callback([=, &g, &out_code] {
    auto ds = cares::read_dataset(*data);
    auto graph = cares::read_graph(*graph_path);
    auto loaded = cares::load_checkpoint<float>(
        *ckpt, ds.vocab.content_hash(), graph.content_hash());
    auto report =
        cares::evaluate(loaded.params, graph, ds.vocab, ds.test, loaded.config,
                        *cutoff, g.effective_threads());
    const std::string text = report.to_json().dump(2);
    if (out->empty()) {
      std::cout << text << "\n";
    } else {
      cares::write_report(*out, report);
      std::cerr << text << "\n";
    }
    if (!per_case->empty()) cares::write_per_case(*per_case, report);
    out_code = 0;
  });
  return 0;
}

int run_recommend(const json& cfg_file, GlobalArgs& g, CLI::App* cmd,
                  int& out_code) {
  auto data = std::make_shared<std::string>();
  auto graph_path = std::make_shared<std::string>();
  auto ckpt = std::make_shared<std::string>();
  auto k = std::make_shared<int>(10);
  from_config(cfg_file, "k", *k);

  cmd->add_option("--checkpoint", *ckpt)->required();
  cmd->add_option("--data", *data, "dataset path prefix (for the vocab)")
      ->required();
  cmd->add_option("--graph", *graph_path, "graph file")->required();
  cmd->add_option("-k,--top-k", *k, "recommendations to emit");

  cmd->callback([=, &out_code] {
    auto vocab = cares::read_vocab(*data + ".vocab.json");
    auto graph = cares::read_graph(*graph_path);
    auto loaded = cares::load_checkpoint<float>(*ckpt, vocab.content_hash(),
                                                graph.content_hash());

    std::vector<std::string> keys;
    std::string tok;
    while (std::cin >> tok) {
      for (auto& c : tok)
        if (c == ',') c = ' ';
      std::istringstream split(tok);
      std::string piece;
      while (split >> piece) keys.push_back(piece);
    }
    if (keys.empty())
      throw cares::UserError("no session items on stdin");
    std::vector<std::string> unknown;
    cares::Session session;
    for (const auto& key : keys) {
      auto it = vocab.item_ids.find(key);
      if (it == vocab.item_ids.end())
        unknown.push_back(key);
      else
        session.items.push_back(it->second);
    }
    if (!unknown.empty()) {
      std::string msg = "unknown item keys:";
      for (const auto& u : unknown) msg += " " + u;
      throw cares::UserError(msg);
    }
    const auto t_max = static_cast<size_t>(loaded.config.t_max);
    if (session.items.size() > t_max)
      session.items.erase(session.items.begin(),
                          session.items.end() - static_cast<long>(t_max));
    session.target = 0;  // unused by the forward pass

    std::vector<const cares::Session*> samples{&session};
    auto batch = cares::bind_batch(samples, vocab, graph, loaded.config.layers);
    cares::ad::Tape<float> tape;
    auto encoded = cares::encode_items(tape, loaded.params, batch,
                                       loaded.config.encoder_options());
    auto vecs = cares::encode_batch_sessions(tape, loaded.params, batch,
                                             encoded,
                                             loaded.config.leaky_slope);
    auto yhat = cares::predict_scores(tape, vecs,
                                      tape.param(loaded.params.item_table),
                                      static_cast<float>(loaded.config.tau));
    const auto& probs = tape.value(yhat);
    std::vector<int> order(static_cast<size_t>(probs.cols));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (probs.at(0, a) != probs.at(0, b)) return probs.at(0, a) > probs.at(0, b);
      return a < b;
    });
    const size_t emit = std::min<size_t>(static_cast<size_t>(std::max(1, *k)),
                                         order.size());
    for (size_t i = 0; i < emit; ++i)
      std::cout << vocab.item_keys[static_cast<size_t>(order[i])] << "\t"
                << probs.at(0, order[i]) << "\n";
    out_code = 0;
  });
  (void)g;
  return 0;
}

int run_inspect_graph(const json&, GlobalArgs& g, CLI::App* cmd,
                      int& out_code) {
  auto graph_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto full = std::make_shared<bool>(false);

  cmd->add_option("--graph", *graph_path)->required();
  cmd->add_option("--out", *out, "JSON output path (default: stdout)");
  cmd->add_flag("--full", *full, "include the edge list");

  cmd->callback([=, &out_code] {
    auto graph = cares::read_graph(*graph_path);
    auto j = cares::graph_to_json(graph, *full);
    if (out->empty()) {
      std::cout << j.dump(2) << "\n";
    } else {
      std::ofstream o(*out);
      if (!o) throw cares::UserError("cannot write " + *out);
      o << j.dump(2) << "\n";
    }
    out_code = 0;
  });
  (void)g;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"session-based recommendation engine"};
  app.require_subcommand(1);
  GlobalArgs g;

  json cfg_file;
  try {
    cfg_file = load_config_file(peek_config_path(argc, argv));
  } catch (const cares::UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  from_config(cfg_file, "seed", g.seed);
  from_config(cfg_file, "threads", g.threads);

  int out_code = 3;
  auto* preprocess = app.add_subcommand("preprocess", "build dataset files");
  add_global_flags(preprocess, g);
  run_preprocess(cfg_file, g, preprocess, out_code);
  auto* build = app.add_subcommand("build-graph", "build the item graph");
  add_global_flags(build, g);
  run_build_graph(cfg_file, g, build, out_code);
  auto* train = app.add_subcommand("train", "train a model");
  add_global_flags(train, g);
  run_train(cfg_file, g, train, out_code);
  auto* evaluate = app.add_subcommand("evaluate", "rank the test set");
  add_global_flags(evaluate, g);
  run_evaluate(cfg_file, g, evaluate, out_code);
  auto* recommend = app.add_subcommand("recommend", "score a session from stdin");
  add_global_flags(recommend, g);
  run_recommend(cfg_file, g, recommend, out_code);
  auto* inspect = app.add_subcommand("inspect-graph", "dump a graph file");
  add_global_flags(inspect, g);
  run_inspect_graph(cfg_file, g, inspect, out_code);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const cares::UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cares::InternalError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return out_code;
}
