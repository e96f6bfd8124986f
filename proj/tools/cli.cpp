#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "mct/checkpoint.hpp"
#include "mct/config.hpp"
#include "mct/data.hpp"
#include "mct/errors.hpp"
#include "mct/evaluate.hpp"
#include "mct/gradcheck.hpp"
#include "mct/training.hpp"

namespace mct::cli {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flags shared by the commands that read a run configuration.
struct RunFlags {
  std::string config;
  std::string features, captions, splits, vocab;
  std::string mode;
  std::optional<std::size_t> epochs, batch_size, threads, depth;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;

  void add_paths(CLI::App& cmd) {
    cmd.add_option("--config", config, "Run configuration (JSON)");
    cmd.add_option("--features", features, "Region feature file (.jsonl, or .bin/.mctf)");
    cmd.add_option("--captions", captions, "Caption file (JSONL)");
    cmd.add_option("--splits", splits, "Split file (JSON)");
  }
  void add_training(CLI::App& cmd) {
    cmd.add_option("--vocab", vocab, "Vocabulary file; built from the training captions when absent");
    cmd.add_option("--mode", mode, "MCT or ELMo-MCT");
    cmd.add_option("--epochs", epochs);
    cmd.add_option("--batch-size", batch_size);
    cmd.add_option("--threads", threads, "Worker threads; 1 is bit-reproducible");
    cmd.add_option("--lr", lr);
    cmd.add_option("--seed", seed);
    cmd.add_option("--depth", depth, "Encoder and decoder depth");
  }

  RunConfig resolve() const {
    RunConfig cfg = RunConfig::toy();
    if (!config.empty()) {
      cfg = load_run_config(config);
      // Paths in a config file are relative to the file itself.
      const fs::path base = fs::path(config).parent_path();
      for (std::string* p : {&cfg.paths.features, &cfg.paths.captions, &cfg.paths.splits, &cfg.paths.checkpoint,
                             &cfg.paths.vocab}) {
        if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).string();
      }
    }
    if (!features.empty()) cfg.paths.features = features;
    if (!captions.empty()) cfg.paths.captions = captions;
    if (!splits.empty()) cfg.paths.splits = splits;
    if (!vocab.empty()) cfg.paths.vocab = vocab;
    if (!mode.empty()) cfg.train.mode = parse_mode(mode);
    if (epochs) cfg.train.epochs = *epochs;
    if (batch_size) cfg.train.batch_size = *batch_size;
    if (threads) cfg.train.threads = *threads;
    if (lr) cfg.train.lr = *lr;
    if (seed) cfg.train.seed = *seed;
    if (depth) cfg.model.encoder.depth = cfg.model.decoder.depth = *depth;
    cfg.validate();
    return cfg;
  }
};

struct Dataset {
  FeatureFile features;
  CaptionFile captions;
  std::optional<SplitSpec> split;

  /// Ids of a named split, or every captioned image when no split file is set.
  std::vector<std::string> ids(const std::string& part) const {
    if (split) return split->part(part);
    std::vector<std::string> all;
    for (const auto& r : captions.records) all.push_back(r.image_id);
    return all;
  }
};

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.paths.features.empty()) throw UsageError("no feature file given (--features or paths.features)");
  if (cfg.paths.captions.empty()) throw UsageError("no caption file given (--captions or paths.captions)");
  Dataset ds;
  ds.features = read_features(cfg.paths.features);
  ds.captions = read_captions(cfg.paths.captions);
  check_pairing(ds.features, ds.captions);
  if (!cfg.paths.splits.empty()) {
    ds.split = read_split(cfg.paths.splits);
    ds.split->validate(ds.features.image_ids());
  }
  return ds;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

struct TrainedModel {
  CaptionModel model;
  std::vector<EpochRecord> history;
};

TrainedModel train_model(const RunConfig& cfg, const Dataset& ds, std::ostream& err, std::ostream* loss_log) {
  if (ds.features.d_feat != cfg.model.encoder.d_feat) {
    throw DataError("feature width " + std::to_string(ds.features.d_feat) + " does not match encoder d_feat " +
                    std::to_string(cfg.model.encoder.d_feat));
  }
  const auto train_ids = ds.ids("train");
  if (train_ids.empty()) throw DataError("training split is empty");
  Vocabulary vocab;
  if (!cfg.paths.vocab.empty()) {
    vocab = Vocabulary::load(cfg.paths.vocab);
  } else {
    std::vector<std::string> texts;
    for (const auto& id : train_ids)
      if (const auto* rec = ds.captions.find(id)) texts.insert(texts.end(), rec->captions.begin(), rec->captions.end());
    vocab = build_vocab(texts, static_cast<int>(cfg.min_count));
  }
  TrainedModel out{CaptionModel::create(cfg.model, cfg.train.mode, vocab, cfg.train.seed), {}};
  const auto examples = make_examples(ds.features, ds.captions, train_ids, out.model.lexicon.vocab);
  err << to_string(cfg.train.mode) << ": " << parameter_count(out.model.params) << " parameters, "
      << examples.size() << " examples, vocabulary " << vocab.size() << "\n";
  if (loss_log) *loss_log << "epoch\tmean_loss\tlr\n";
  const std::size_t report_every = std::max<std::size_t>(1, cfg.train.epochs / 10);
  out.history = train(out.model, ds.features, examples, cfg.train, [&](const EpochRecord& r) {
    if (loss_log) *loss_log << r.epoch << '\t' << fmt("%.17g", r.mean_loss) << '\t' << fmt("%.17g", r.lr) << '\n';
    if (r.epoch % report_every == 0 || r.epoch == 1) {
      err << "epoch " << r.epoch << "/" << cfg.train.epochs << " loss " << fmt("%.6f", r.mean_loss) << " lr "
          << fmt("%.3g", r.lr) << "\n";
    }
  });
  return out;
}

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw DataError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(dir);
}

// ---------------------------------------------------------------------------

void add_gen_toy(CLI::App& app, std::ostream& out, int& status) {
  auto* cmd = app.add_subcommand("gen-toy", "Write a synthetic toy dataset (features, captions, split, config)");
  struct Opts {
    std::uint64_t seed = 7;
    std::size_t images = 64;
    std::string out_dir;
    std::size_t d_feat = 16;
    double noise = 0.05;
    std::string format = "jsonl";
    bool force = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--seed", o->seed);
  cmd->add_option("--images", o->images);
  cmd->add_option("--out-dir", o->out_dir)->required();
  cmd->add_option("--d-feat", o->d_feat, "Feature width (power of two, at least 16)");
  cmd->add_option("--noise", o->noise);
  cmd->add_option("--format", o->format)->check(CLI::IsMember({"jsonl", "bin"}));
  cmd->add_flag("--force", o->force, "Allow writing into a non-empty directory");
  cmd->callback([o, &out, &status] {
    if (o->images < 2) throw UsageError("--images must be at least 2 (CIDEr-D needs two images for its idf)");
    const fs::path dir(o->out_dir);
    prepare_out_dir(dir, o->force);
    auto [features, captions] = toy_dataset(o->seed, o->images, ToyOptions{o->d_feat, o->noise});
    const std::string feature_name = o->format == "bin" ? "features.bin" : "features.jsonl";
    write_features(features, dir / feature_name);
    write_captions(captions, dir / "captions.jsonl");
    const auto ids = features.image_ids();
    write_split(make_splits(ids, std::array<double, 3>{8, 1, 1}, o->seed), dir / "splits.json");
    RunConfig cfg = RunConfig::toy();
    cfg.model.encoder.d_feat = o->d_feat;
    cfg.paths.features = feature_name;
    cfg.paths.captions = "captions.jsonl";
    cfg.paths.splits = "splits.json";
    save_run_config(cfg, dir / "config.json");
    out << "wrote " << o->images << " images to " << dir.string() << "\n";
    status = kOk;
  });
}

void add_train(CLI::App& app, std::ostream& out, std::ostream& err, int& status) {
  auto* cmd = app.add_subcommand("train", "Train a captioning model");
  auto flags = std::make_shared<RunFlags>();
  auto out_dir = std::make_shared<std::string>();
  flags->add_paths(*cmd);
  flags->add_training(*cmd);
  cmd->add_option("--out", *out_dir, "Output directory for checkpoint.mctc, loss.tsv and config.json")->required();
  cmd->callback([flags, out_dir, &out, &err, &status] {
    const RunConfig cfg = flags->resolve();
    const Dataset ds = load_dataset(cfg);
    const fs::path dir(*out_dir);
    fs::create_directories(dir);
    std::ofstream loss_log(dir / "loss.tsv");
    if (!loss_log) throw DataError("cannot write " + (dir / "loss.tsv").string());
    const auto start = std::chrono::steady_clock::now();
    TrainedModel trained = train_model(cfg, ds, err, &loss_log);
    save_checkpoint(trained.model, cfg.train, dir / "checkpoint.mctc");
    RunConfig saved = cfg;
    saved.paths.checkpoint = fs::absolute(dir / "checkpoint.mctc").string();
    for (std::string* p : {&saved.paths.features, &saved.paths.captions, &saved.paths.splits, &saved.paths.vocab})
      if (!p->empty()) *p = fs::absolute(*p).string();
    save_run_config(saved, dir / "config.json");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << "trained " << trained.history.size() << " epochs, final loss "
        << fmt("%.6f", trained.history.back().mean_loss) << " (" << fmt("%.1f", secs) << " s); checkpoint "
        << (dir / "checkpoint.mctc").string() << "\n";
    status = kOk;
  });
}

void add_caption(CLI::App& app, std::ostream& out, std::ostream&, int& status) {
  auto* cmd = app.add_subcommand("caption", "Caption one image from a checkpoint");
  struct Opts {
    std::string checkpoint, features, image_id;
    std::size_t beam = 1;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--checkpoint", o->checkpoint)->required();
  cmd->add_option("--features", o->features)->required();
  cmd->add_option("--image-id", o->image_id)->required();
  cmd->add_option("--beam", o->beam, "Beam width; 1 is greedy");
  cmd->callback([o, &out, &status] {
    if (o->beam < 1) throw UsageError("--beam must be at least 1");
    const LoadedCheckpoint ckpt = load_checkpoint(o->checkpoint);
    const FeatureFile features = read_features(o->features);
    const RegionFeatures* regions = features.find(o->image_id);
    if (!regions) throw DataError("unknown image id '" + o->image_id + "' in " + o->features);
    out << caption_text(caption_ids(ckpt.model, regions->matrix, o->beam), ckpt.model.lexicon.vocab) << "\n";
    status = kOk;
  });
}

void add_evaluate(CLI::App& app, std::ostream& out, std::ostream&, int& status) {
  auto* cmd = app.add_subcommand("evaluate", "Score greedy captions on a split");
  auto flags = std::make_shared<RunFlags>();
  struct Opts {
    std::string checkpoint, split = "test", format = "tsv";
  };
  auto o = std::make_shared<Opts>();
  flags->add_paths(*cmd);
  cmd->add_option("--checkpoint", o->checkpoint)->required();
  cmd->add_option("--split", o->split)->check(CLI::IsMember({"train", "val", "test"}));
  cmd->add_option("--format", o->format)->check(CLI::IsMember({"tsv", "json"}));
  cmd->callback([flags, o, &out, &status] {
    const RunConfig cfg = flags->resolve();
    const LoadedCheckpoint ckpt = load_checkpoint(o->checkpoint);
    const Dataset ds = load_dataset(cfg);
    const auto ids = ds.ids(o->split);
    if (ids.empty()) throw DataError("split '" + o->split + "' is empty");
    const EvalReport report = evaluate(ckpt.model, ds.features, ds.captions, ids);
    const std::string label = to_string(ckpt.model.mode);
    if (o->format == "json") {
      out << report_json(label, report).dump(2) << "\n";
    } else {
      out << report_header() << "\n" << report_row(label, report) << "\n";
    }
    status = kOk;
  });
}

void add_gradcheck(CLI::App& app, std::ostream& out, std::ostream& err, int& status) {
  auto* cmd = app.add_subcommand("gradcheck", "Compare reverse-mode gradients with finite differences");
  struct Opts {
    std::uint64_t seed = 1;
    std::string dims = "desk";
    bool inject_fault = false;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--seed", o->seed);
  cmd->add_option("--dims", o->dims)->check(CLI::IsMember({"desk"}));
  cmd->add_flag("--inject-fault", o->inject_fault, "Debug: flip the sign of the softmax backward pass");
  cmd->callback([o, &out, &err, &status] {
    const auto start = std::chrono::steady_clock::now();
    const auto results = run_gradcheck_suite(o->seed, o->inject_fault ? Fault::kNegateSoftmaxGrad : Fault::kNone);
    bool ok = true;
    out << "family\tmax_rel_error\tcoordinates\tstatus\n";
    for (const auto& r : results) {
      ok = ok && r.passed();
      out << r.family << '\t' << fmt("%.3e", r.max_error) << '\t' << r.coordinates << '\t'
          << (r.passed() ? "PASS" : "FAIL") << "\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    err << results.size() << " families checked in " << fmt("%.1f", secs) << " s (tolerance "
        << fmt("%.0e", kGradcheckTolerance) << ")\n";
    status = ok ? kOk : kNumericFailure;
  });
}

void add_ablate_depth(CLI::App& app, std::ostream& out, std::ostream& err, int& status) {
  auto* cmd = app.add_subcommand("ablate-depth", "Train and score one model per depth");
  auto flags = std::make_shared<RunFlags>();
  struct Opts {
    std::vector<std::size_t> depths = {2, 4, 6};
    std::string split = "test";
  };
  auto o = std::make_shared<Opts>();
  flags->add_paths(*cmd);
  flags->add_training(*cmd);
  cmd->add_option("--depths", o->depths, "Comma-separated depths")->delimiter(',');
  cmd->add_option("--split", o->split, "Split to score")->check(CLI::IsMember({"train", "val", "test"}));
  cmd->callback([flags, o, &out, &err, &status] {
    if (flags->depth) throw UsageError("use --depths with ablate-depth");
    const RunConfig base = flags->resolve();
    const Dataset ds = load_dataset(base);
    const auto ids = ds.ids(o->split);
    if (ids.empty()) throw DataError("split '" + o->split + "' is empty");
    std::vector<std::string> rows;
    for (std::size_t depth : o->depths) {
      RunConfig cfg = base;
      cfg.model.encoder.depth = cfg.model.decoder.depth = depth;
      cfg.validate();
      err << "depth " << depth << "\n";
      const TrainedModel trained = train_model(cfg, ds, err, nullptr);
      rows.push_back(report_row(std::to_string(depth), evaluate(trained.model, ds.features, ds.captions, ids)));
    }
    out << report_header("Profundity") << "\n";
    for (const auto& row : rows) out << row << "\n";
    status = kOk;
  });
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-channel transformer image captioning (MCT / ELMo-MCT)", "mct"};
  app.require_subcommand(1);
  int status = kOk;
  add_gen_toy(app, out, status);
  add_train(app, out, err, status);
  add_caption(app, out, err, status);
  add_evaluate(app, out, err, status);
  add_gradcheck(app, out, err, status);
  add_ablate_depth(app, out, err, status);
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    return status;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataFailure;
  }
}

}  // namespace mct::cli
