#pragma once

// Command-line front end: gen-data, fit-prior, train, eval, verify-theory.
// Exit codes: 0 success, 1 usage, 2 data / I/O, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fgl/cascade.hpp"
#include "fgl/error.hpp"
#include "fgl/evaluation.hpp"
#include "fgl/guided_loss.hpp"
#include "fgl/prior.hpp"
#include "fgl/synthgen.hpp"
#include "fgl/trainer.hpp"

namespace fgl {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

namespace cli {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct GenDataArgs {
  std::size_t pairs = 0;
  std::size_t points = 500;
  double ratio_min = 0.5;
  double ratio_max = 0.9;
  double noise_px = 1.0;
  std::uint64_t seed = 0;
  std::string out;
};

inline int gen_data(const GenDataArgs& a, std::ostream& out) {
  if (a.pairs == 0) throw UsageError("--pairs must be at least 1");
  SceneConfig c;
  c.num_correspondences = a.points;
  c.outlier_ratio_min = a.ratio_min;
  c.outlier_ratio_max = a.ratio_max;
  c.noise_std_px = a.noise_px;
  c.seed = a.seed;
  c.validate();
  const auto pairs = generate_dataset(c, a.pairs);
  const auto manifest = write_dataset(a.out, pairs, c);
  out << "wrote " << pairs.size() << " pairs (" << manifest["counts"]["correspondences"] << " correspondences, "
      << manifest["counts"]["inliers"] << " inliers) to " << a.out << '\n';
  return kExitOk;
}

inline int fit_prior(const std::string& data, const std::string& path, std::size_t bins, std::ostream& out) {
  const auto pairs = read_dataset(data);
  std::vector<double> ratios;
  std::vector<std::uint8_t> labels;
  for (const auto& p : pairs) {
    ratios.insert(ratios.end(), p.lowe_ratios.begin(), p.lowe_ratios.end());
    labels.insert(labels.end(), p.labels.begin(), p.labels.end());
  }
  const auto model = fit_ratio_densities(ratios, labels, bins);
  write_prior(path, model);
  out << "fitted " << model.bins() << "-bin ratio densities from " << ratios.size() << " samples to " << path << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data, prior, config, out, resume;
  std::size_t threads = 0;
  bool quiet = false;
};

inline int train_command(const TrainArgs& a, std::ostream& out) {
  RunConfig rc = a.config.empty() ? RunConfig{} : read_run_config(a.config);
  const auto prior = read_prior(a.prior);
  const auto pairs = read_dataset(a.data);
  TrainerState st;
  if (!a.resume.empty()) {
    auto loaded = load_training_checkpoint(a.resume);
    if (to_json(loaded.config.model) != to_json(rc.model)) throw UsageError("resume: model config differs from checkpoint");
    st = std::move(loaded.state);
    rc.train.seed = loaded.config.train.seed;
  } else {
    st = initial_state(rc);
  }
  if (a.threads > 0) rc.train.threads = a.threads;
  const auto data = prepare_training_data(pairs, prior, rc.train.validation_pairs);
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  std::ofstream log(dir / "train_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError("cannot write training log in " + dir.string());
  out << "training " << data.train.size() << " pairs (" << data.validation.size() << " validation), "
      << st.model.params.size() << " tensors, iterations " << st.next_iteration << ".." << rc.train.iterations << '\n';
  TrainCallbacks cb;
  cb.on_record = [&](const LogRecord& r) {
    log << to_json(r).dump() << '\n';
    if (!a.quiet && r.validation) {
      out << "iter " << r.iteration + 1 << " loss " << r.loss << " val P " << r.validation->precision << " R "
          << r.validation->recall << " F2 " << r.validation->f2 << std::endl;
    }
  };
  train(st, rc, data, cb);
  log.close();
  save_training_checkpoint(dir / "checkpoint.bin", st, rc, prior);

  // Curve data from the whole log, including earlier runs when resuming.
  std::vector<CurvePoint> curve;
  std::ifstream in(dir / "train_log.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (!j["val_f2"].is_null()) {
      curve.push_back({j["iteration"].get<std::size_t>(), j["val_precision"].get<double>(),
                       j["val_recall"].get<double>(), j["val_f2"].get<double>()});
    }
  }
  detail::write_text(dir / "curves.csv", curve_csv(curve));
  out << "checkpoint written to " << (dir / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string data, checkpoint, methods = "ransac,learned", post = "w8p,ransac", report;
  std::uint64_t seed = 0;
  std::size_t limit = 0;
};

inline int eval_command(const EvalArgs& a, std::ostream& out) {
  std::vector<std::unique_ptr<LoadedCheckpoint>> loaded;
  std::vector<MethodSpec> methods;
  for (const auto& item : split_list(a.methods)) {
    MethodSpec m;
    m.name = item;
    std::string path;
    if (const auto eq = item.find('='); eq != std::string::npos) {
      m.name = item.substr(0, eq);
      path = item.substr(eq + 1);
    } else if (item == "ransac") {
      m.kind = MethodKind::ransac;
    } else if (item == "oracle") {
      m.kind = MethodKind::oracle;
    } else if (item == "learned") {
      if (a.checkpoint.empty()) throw UsageError("method 'learned' needs --checkpoint");
      path = a.checkpoint;
    } else {
      throw UsageError("unknown method '" + item + "' (ransac, oracle, learned or name=checkpoint)");
    }
    if (!path.empty()) {
      loaded.push_back(std::make_unique<LoadedCheckpoint>(load_training_checkpoint(path)));
      m.kind = MethodKind::learned;
      m.model = &loaded.back()->state.model;
      m.prior = &loaded.back()->prior;
    }
    methods.push_back(m);
  }
  if (methods.empty()) throw UsageError("--methods is empty");
  std::vector<PostKind> posts;
  for (const auto& p : split_list(a.post)) posts.push_back(post_kind_from_string(p));
  if (posts.empty()) throw UsageError("--post is empty");
  auto pairs = read_dataset(a.data);
  if (a.limit > 0 && pairs.size() > a.limit) pairs.resize(a.limit);
  const auto reports = run_comparison(pairs, methods, posts, a.seed);
  write_reports(a.report, reports);
  out << report_csv(reports);
  return kExitOk;
}

inline int verify_theory_command(std::size_t trials, std::size_t directions, std::uint64_t seed, std::ostream& out) {
  TheoryOptions opt;
  opt.trials = trials;
  opt.directions = directions;
  opt.seed = seed;
  const auto r = verify_theory(opt);
  const bool ok = r.max_weight_sum_error == 0.0 && r.max_ratio_residual < 1e-9 &&
                  r.max_antiparallel_product <= 1e-12 && r.sign_violations == 0;
  out << "trials " << r.trials << " (fallbacks " << r.fallbacks << "), directions " << r.directions << '\n'
      << "max |lambda + mu - 1|      " << r.max_weight_sum_error << '\n'
      << "max ratio residual         " << r.max_ratio_residual << '\n'
      << "max anti-parallel product  " << r.max_antiparallel_product << '\n'
      << "sign violations            " << r.sign_violations << '\n'
      << (ok ? "all invariants hold" : "INVARIANT VIOLATION") << '\n';
  return ok ? kExitOk : kExitNumeric;
}

}  // namespace cli

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Fn-measure guided correspondence filtering: data, prior, training and evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  cli::GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic two-view dataset");
  gen_cmd->add_option("--pairs", gen.pairs, "Number of scene pairs")->required();
  gen_cmd->add_option("--points", gen.points, "Correspondences per pair")->capture_default_str();
  gen_cmd->add_option("--outlier-ratio-min", gen.ratio_min, "Lowest per-pair outlier ratio")->capture_default_str();
  gen_cmd->add_option("--outlier-ratio-max", gen.ratio_max, "Highest per-pair outlier ratio")->capture_default_str();
  gen_cmd->add_option("--noise-px", gen.noise_px, "Inlier pixel noise standard deviation")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();

  std::string prior_data, prior_out;
  std::size_t prior_bins = kDefaultRatioBins;
  auto* prior_cmd = app.add_subcommand("fit-prior", "Fit Lowe-ratio densities on a labeled dataset");
  prior_cmd->add_option("--data", prior_data, "Dataset directory")->required();
  prior_cmd->add_option("--out", prior_out, "Output prior JSON")->required();
  prior_cmd->add_option("--bins", prior_bins, "Histogram bins")->capture_default_str();

  cli::TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the cascade classifier");
  train_cmd->add_option("--data", tr.data, "Training dataset directory")->required();
  train_cmd->add_option("--prior", tr.prior, "Prior model JSON")->required();
  train_cmd->add_option("--config", tr.config, "key = value training config");
  train_cmd->add_option("--out", tr.out, "Output directory (checkpoint, log, curves)")->required();
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint");
  train_cmd->add_option("--threads", tr.threads, "Worker threads (overrides the config)");
  train_cmd->add_flag("--quiet", tr.quiet, "No progress output");

  cli::EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Compare methods and post-processing on a dataset");
  eval_cmd->add_option("--data", ev.data, "Test dataset directory")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint for the 'learned' method");
  eval_cmd->add_option("--methods", ev.methods, "Comma list: ransac, oracle, learned, name=checkpoint")
      ->capture_default_str();
  eval_cmd->add_option("--post", ev.post, "Comma list: w8p, ransac")->capture_default_str();
  eval_cmd->add_option("--report", ev.report, "Report path stem (.json and .csv are written)")->required();
  eval_cmd->add_option("--seed", ev.seed, "RANSAC seed")->capture_default_str();
  eval_cmd->add_option("--limit", ev.limit, "Evaluate only the first N pairs");

  std::size_t trials = 10000, directions = 1000;
  std::uint64_t theory_seed = 0;
  auto* theory_cmd = app.add_subcommand("verify-theory", "Randomized check of the class-weight solver invariants");
  theory_cmd->add_option("--trials", trials, "Random confusion states")->capture_default_str();
  theory_cmd->add_option("--directions", directions, "Random directions per state")->capture_default_str();
  theory_cmd->add_option("--seed", theory_seed, "Random seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return cli::gen_data(gen, out);
    if (prior_cmd->parsed()) return cli::fit_prior(prior_data, prior_out, prior_bins, out);
    if (train_cmd->parsed()) return cli::train_command(tr, out);
    if (eval_cmd->parsed()) return cli::eval_command(ev, out);
    if (theory_cmd->parsed()) return cli::verify_theory_command(trials, directions, theory_seed, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace fgl
