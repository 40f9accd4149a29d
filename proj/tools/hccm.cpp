// hccm: dataset generation, training, evaluation, ablation and verification.
//
// Exit codes: 0 success, 1 validation error (bad flags, config, or input),
// 2 runtime failure.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hccm/ablation.hpp"
#include "hccm/dataset.hpp"
#include "hccm/eval.hpp"
#include "hccm/train.hpp"
#include "hccm/verify.hpp"

namespace fs = std::filesystem;
using namespace hccm;
using nlohmann::json;

namespace {

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  require<IoError>(static_cast<bool>(out), "cannot write ", p.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  require<IoError>(static_cast<bool>(in), "cannot open ", p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

void log_config(const char* command, const json& resolved) {
  std::cerr << "[" << command << "] resolved config: " << resolved.dump() << '\n';
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// "name=on|off" pairs, e.g. rg_itc=off.
void apply_toggles(TrainConfig& c, const std::vector<std::string>& specs) {
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    require(eq != std::string::npos, "--toggle expects name=on|off, got '", s, "'");
    const std::string name = s.substr(0, eq), val = s.substr(eq + 1);
    require(val == "on" || val == "off", "--toggle value must be on or off, got '", val, "'");
    const bool on = val == "on";
    if (name == "mc") c.toggles.mc = on;
    else if (name == "md") c.toggles.md = on;
    else if (name == "rg_itc") c.toggles.rg_itc = on;
    else if (name == "rg_itm") c.toggles.rg_itm = on;
    else throw ValidationError("--toggle: unknown component '" + name + "' (mc|md|rg_itc|rg_itm)");
  }
}

struct Data {
  std::vector<SceneRecord> train, val, test, heldout;
  Vocabulary vocab;
};

Data load_data(const fs::path& dir, bool need_train = true) {
  Data d;
  d.vocab = dataset_vocabulary(dir);
  auto all = read_dataset(dir);
  for (auto& r : all) {
    switch (r.split) {
      case Split::train: d.train.push_back(std::move(r)); break;
      case Split::val: d.val.push_back(std::move(r)); break;
      case Split::test: d.test.push_back(std::move(r)); break;
      case Split::heldout: d.heldout.push_back(std::move(r)); break;
    }
  }
  if (need_train)
    require(!d.train.empty(), "dataset ", dir.string(), " has no train split");
  return d;
}

// ---------------------------------------------------------------------------

int cmd_gen(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  GenConfig cfg = config_path.empty() ? GenConfig{} : load_gen_config(config_path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  log_config("gen", to_json(cfg));
  const auto t0 = std::chrono::steady_clock::now();
  const auto records = generate_dataset(cfg);
  write_dataset(records, out);
  write_json(fs::path(out) / "gen_config.json", to_json(cfg));
  for (Split s : kAllSplits)
    std::printf("%-8s %zu\n", split_name(s), filter_split(records, s).size());
  std::fprintf(stderr, "[gen] wrote %zu records to %s in %.1fs\n", records.size(), out.c_str(),
               seconds_since(t0));
  return 0;
}

TrainConfig resolve_train_config(const std::string& config_path, const Vocabulary& vocab,
                                 const std::vector<std::string>& toggles,
                                 std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = vocab.size();
  require(cfg.model.vocab_size == vocab.size(), "config vocab_size ", cfg.model.vocab_size,
          " does not match the dataset vocabulary of ", vocab.size());
  apply_toggles(cfg, toggles);
  if (seed) cfg.seed = *seed;
  if (epochs) cfg.epochs = *epochs;
  cfg.validate();
  return cfg;
}

/// Trains into `out` (continuing from out/last when `resume`), then evaluates
/// the best parameters on test and heldout, by embedding ranking and, when
/// rerank > 0, with matching-head re-ranking.
CellResult train_and_report(const TrainConfig& cfg, const Data& data, const fs::path& out,
                            bool resume, std::size_t rerank, bool verbose) {
  fs::create_directories(out);
  TrainState<float> state = resume ? load_checkpoint<float>(out / "last") : TrainState<float>::init(cfg);
  state.config = cfg;  // a resumed run may extend the epoch count
  write_json(out / "config.json", to_json(cfg));
  FitOptions opt;
  opt.out_dir = out;
  opt.verbose = verbose;
  auto res = fit(std::move(state), data.train, data.val, data.vocab, opt);
  CellResult cell;
  cell.code = cfg.toggles.code();
  cell.seed = cfg.seed;
  cell.train_seconds = res.state.train_seconds;
  auto eval_split = [&](const std::vector<SceneRecord>& recs, RetrievalReport& plain,
                        std::optional<RetrievalReport>& reranked) {
    if (recs.empty()) return;
    plain = evaluate(res.best_params, cfg.model, recs, data.vocab, 0);
    if (rerank > 0) reranked = evaluate(res.best_params, cfg.model, recs, data.vocab, rerank);
  };
  eval_split(data.test, cell.test, cell.test_rerank);
  eval_split(data.heldout, cell.heldout, cell.heldout_rerank);
  json report = to_json(cell);
  report["steps"] = res.state.step;
  report["best_epoch"] = res.state.best_epoch;
  report["best_val_mR"] = res.state.best_mr;
  write_json(out / "report.json", report);
  std::ofstream txt(out / "report.txt");
  txt << "test\n" << report_table(cell.test) << "\nheldout\n" << report_table(cell.heldout);
  if (cell.test_rerank)
    txt << "\ntest, re-ranked top " << rerank << "\n" << report_table(*cell.test_rerank)
        << "\nheldout, re-ranked top " << rerank << "\n" << report_table(*cell.heldout_rerank);
  return cell;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out,
              const std::vector<std::string>& toggles, bool dry_run, const std::string& resume_dir,
              std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs, std::size_t rerank) {
  const Data data = load_data(data_dir);
  if (!resume_dir.empty()) {
    const fs::path run(resume_dir);
    TrainState<float> s = load_checkpoint<float>(run / "last");
    if (epochs) s.config.epochs = *epochs;
    s.config.validate();
    log_config("train", to_json(s.config));
    std::fprintf(stderr, "[train] resuming %s at epoch %zu batch %zu (step %llu)\n",
                 run.c_str(), s.epoch, s.cursor, static_cast<unsigned long long>(s.step));
    const CellResult c = train_and_report(s.config, data, run, true, rerank, true);
    std::cout << "test\n" << report_table(c.test);
    return 0;
  }
  TrainConfig cfg = resolve_train_config(config_path, data.vocab, toggles, seed, epochs);
  if (dry_run) cfg.max_steps = 2;
  log_config("train", to_json(cfg));
  if (dry_run) {
    TrainState<float> s = TrainState<float>::init(cfg);
    const BatchIterator it(data.train, cfg.batch_size, derive_seed(cfg.seed, "batches"));
    require(it.batches_per_epoch() >= 2, "dry run needs at least two batches of training data");
    for (std::size_t b = 0; b < 2; ++b) {
      const auto bd = train_step(s, it.batch(0, b, data.vocab));
      std::printf("dry-run step %zu: %s\n", b + 1, breakdown_json(bd).dump().c_str());
    }
    return 0;
  }
  require(!out.empty(), "train: --out is required");
  const CellResult c = train_and_report(cfg, data, out, false, rerank, true);
  std::cout << "test\n" << report_table(c.test) << "\nheldout\n" << report_table(c.heldout);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             std::size_t rerank, const std::string& json_out) {
  const Split s = parse_split(split);
  require<IoError>(fs::exists(fs::path(ckpt) / "index.json"), "no checkpoint at ", ckpt);
  auto [cfg, params] = load_model<float>(ckpt);
  const Vocabulary vocab = dataset_vocabulary(data_dir);
  require(vocab.size() == cfg.model.vocab_size, "checkpoint vocab_size ", cfg.model.vocab_size,
          " does not match dataset vocabulary of ", vocab.size());
  const auto records = read_dataset(data_dir, s);
  require(!records.empty(), "dataset ", data_dir, " has no ", split, " split");
  log_config("eval", {{"checkpoint", ckpt}, {"data", data_dir}, {"split", split}, {"rerank", rerank}});
  const RetrievalReport r = evaluate(params, cfg.model, records, vocab, rerank);
  std::cout << report_table(r);
  const json j = to_json(r);
  std::cout << j.dump() << '\n';
  if (!json_out.empty()) write_json(json_out, j);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir, const std::string& out,
               std::size_t seeds, std::size_t jobs, std::size_t rerank, std::vector<std::string> cells,
               std::optional<std::uint64_t> base_seed, std::optional<std::size_t> epochs) {
  require(seeds >= 1, "ablate: --seeds must be at least 1");
  require(jobs >= 1, "ablate: --jobs must be at least 1");
  if (cells.empty()) cells.assign(ablation_grid().begin(), ablation_grid().end());
  for (const auto& c : cells)
    require(std::find(ablation_grid().begin(), ablation_grid().end(), c) != ablation_grid().end(),
            "ablate: '", c, "' is not a row of the component grid");
  const Data data = load_data(data_dir);
  const TrainConfig base = resolve_train_config(config_path, data.vocab, {}, base_seed, epochs);
  log_config("ablate", {{"train", to_json(base)}, {"seeds", seeds}, {"rerank", rerank}, {"cells", cells}});
  fs::create_directories(out);

  struct Job {
    std::string code;
    std::size_t k;
    fs::path dir;
  };
  std::vector<Job> todo;
  for (const auto& code : cells)
    for (std::size_t k = 0; k < seeds; ++k)
      todo.push_back({code, k, fs::path(out) / code / ("seed" + std::to_string(k))});

  auto run_job = [&](const Job& j) {
    TrainConfig cfg = base;
    cfg.toggles = Toggles::from_code(j.code);
    cfg.seed = ablation_seed(base.seed, j.k);
    const bool resume = fs::exists(j.dir / "last" / "index.json");
    CellResult c = train_and_report(cfg, data, j.dir, resume, rerank, false);
    c.seed_index = j.k;
    write_json(j.dir / "cell.json", to_json(c));
    std::fprintf(stderr, "[ablate] %s seed %zu: test txt R@1 %.2f mR %.2f heldout mR %.2f (%.0fs)\n",
                 j.code.c_str(), j.k, c.test.text_query_r1, c.test.mr, c.heldout.mr, c.train_seconds);
  };

  std::map<pid_t, Job> running;
  std::vector<std::string> failures;
  auto reap = [&](bool block) {
    int status = 0;
    const pid_t pid = waitpid(-1, &status, block ? 0 : WNOHANG);
    if (pid <= 0) return false;
    const Job j = running.at(pid);
    running.erase(pid);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
      failures.push_back(j.code + "/seed" + std::to_string(j.k));
    return true;
  };
  for (const auto& j : todo) {
    if (fs::exists(j.dir / "cell.json")) {
      std::fprintf(stderr, "[ablate] %s seed %zu: done, skipping\n", j.code.c_str(), j.k);
      continue;
    }
    if (jobs == 1) {
      try {
        run_job(j);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "[ablate] %s seed %zu failed: %s\n", j.code.c_str(), j.k, e.what());
        failures.push_back(j.code + "/seed" + std::to_string(j.k));
      }
      continue;
    }
    while (running.size() >= jobs) reap(true);
    std::fflush(nullptr);
    const pid_t pid = fork();
    require<Error>(pid >= 0, "ablate: fork failed");
    if (pid == 0) {
      int code = 0;
      try {
        run_job(j);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "[ablate] %s seed %zu failed: %s\n", j.code.c_str(), j.k, e.what());
        code = 2;
      }
      std::fflush(nullptr);
      _exit(code);
    }
    running.emplace(pid, j);
  }
  while (!running.empty()) reap(true);

  std::vector<CellResult> results;
  for (const auto& j : todo)
    if (fs::exists(j.dir / "cell.json")) results.push_back(cell_from_json(read_json(j.dir / "cell.json")));
  const auto rows = consolidate(results);
  json cells_json = json::array();
  for (const auto& c : results) cells_json.push_back(to_json(c));
  write_json(fs::path(out) / "ablation.json",
             {{"rows", to_json(rows)}, {"cells", cells_json}, {"rerank_top_r", rerank},
              {"seeds", seeds}, {"failures", failures}});
  const std::string table = ablation_table(rows);
  std::ofstream(fs::path(out) / "ablation.txt") << table;
  std::cout << table;
  if (!failures.empty()) {
    for (const auto& f : failures) std::fprintf(stderr, "[ablate] cell failed: %s\n", f.c_str());
    return 2;
  }
  return 0;
}

int cmd_verify(const std::string& suite) {
  const auto results = run_verify(suite, std::cout);
  std::size_t failed = 0;
  for (const auto& r : results) failed += !r.ok;
  std::printf("%zu checks, %zu failed\n", results.size(), failed);
  return failed ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hccm: hierarchical cross-modal contrastive matching on synthetic scenes"};
  app.require_subcommand(1);

  std::string config, out, data, resume, ckpt, split = "test", json_out, suite = "all";
  std::vector<std::string> toggles, cells;
  bool dry_run = false;
  std::size_t seeds = 3, jobs = 1, rerank = 16;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;

  auto* gen = app.add_subcommand("gen", "generate the synthetic scene dataset");
  gen->add_option("--config", config, "GenConfig JSON (defaults if omitted)");
  gen->add_option("--out", out, "output dataset directory")->required();
  gen->add_option("--seed", seed, "override the config seed");

  auto* train = app.add_subcommand("train", "train one configuration");
  train->add_option("--config", config, "TrainConfig JSON (defaults if omitted)");
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "run directory (logs, checkpoints, report)");
  train->add_option("--toggle", toggles, "component switch name=on|off (mc, md, rg_itc, rg_itm)");
  train->add_flag("--dry-run", dry_run, "build everything, run 2 steps, exit");
  train->add_option("--resume", resume, "continue the run in this directory from its last checkpoint");
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--epochs", epochs, "override the number of epochs");
  train->add_option("--rerank", rerank, "re-ranking depth for the final report")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--split", split, "test|heldout|val|train")->capture_default_str();
  eval->add_option("--rerank", rerank, "matching-head re-ranking depth (0 disables)")->capture_default_str();
  eval->add_option("--json", json_out, "also write the report to this file");

  auto* ablate = app.add_subcommand("ablate", "train the component grid over several seeds");
  ablate->add_option("--config", config, "base TrainConfig JSON");
  ablate->add_option("--data", data, "dataset directory")->required();
  ablate->add_option("--out", out, "output directory")->required();
  ablate->add_option("--seeds", seeds, "repetitions per grid row")->capture_default_str();
  ablate->add_option("--jobs", jobs, "parallel worker processes")->capture_default_str();
  ablate->add_option("--rerank", rerank, "re-ranking depth for reports")->capture_default_str();
  ablate->add_option("--cells", cells, "subset of grid rows, e.g. 0000 1111");
  ablate->add_option("--seed", seed, "base seed");
  ablate->add_option("--epochs", epochs, "override the number of epochs");

  auto* verify = app.add_subcommand("verify", "run the property suites");
  verify->add_option("--suite", suite, "gradients|oracles|sampling|all")
      ->check(CLI::IsMember({"gradients", "oracles", "sampling", "all"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen(config, out, seed);
    if (*train) return cmd_train(config, data, out, toggles, dry_run, resume, seed, epochs, rerank);
    if (*eval) return cmd_eval(ckpt, data, split, rerank, json_out);
    if (*ablate) return cmd_ablate(config, data, out, seeds, jobs, rerank, cells, seed, epochs);
    if (*verify) return cmd_verify(suite);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
