#include "peco/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "peco/pipeline.hpp"

namespace peco {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::pair<const char*, const char*> kSubcommands[] = {
    {"train-tokenizer", "train the VQ tokenizer"},
    {"train-feature-net", "self-supervised training of the perceptual feature net"},
    {"train-mim", "masked token pre-training on a cached token grid"},
    {"tokenize", "encode a dataset into a token cache"},
    {"probe", "linear probe on pooled codewords"},
    {"classify-recon", "classifier accuracy on tokenizer reconstructions"},
    {"mosaic", "patches assigned to one codeword"},
    {"reconstruct", "write originals and reconstructions side by side"},
    {"gradcheck", "finite-difference check of the decoder gradients"},
};

struct CommonFlags {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

struct CommandFlags {
  CommonFlags common;
  int64_t codeword = -2;  // -2: take mosaic.codeword from the config
  int64_t count = 0;      // 0: take the count from the config
  double eps = 3e-3;
};

RunConfig build_config(const CommonFlags& flags) {
  RunConfig cfg = flags.config.empty() ? RunConfig() : RunConfig::load(flags.config);
  for (const auto& o : flags.overrides) cfg.set_assignment(o);
  if (flags.seed) cfg.set("seed", std::to_string(*flags.seed));
  if (const char* env = std::getenv("PECO_THREADS"); env != nullptr && *env != '\0') cfg.set("threads", env);
  if (const char* env = std::getenv("PECO_OUT_DIR"); env != nullptr && *env != '\0') cfg.set("out_dir", env);
  if (!flags.out.empty()) cfg.set("out_dir", flags.out);
  const int64_t threads = cfg.get_int("threads");
  if (threads > 0) torch::set_num_threads(static_cast<int>(threads));
  return cfg;
}

fs::path output_dir(const RunConfig& cfg) {
  const std::string& out = cfg.get("out_dir");
  if (out.empty()) fail(ErrorCode::kConfig, "no output directory: pass --out, set out_dir or PECO_OUT_DIR");
  fs::create_directories(out);
  return out;
}

void write_report(const fs::path& dir, RunConfig cfg, const json& report) {
  cfg.set("out_dir", dir.string());
  cfg.resolve();
  cfg.save(dir / kResolvedConfigFile);
  std::ofstream f(dir / kReportFile, std::ios::trunc);
  if (!f) fail(ErrorCode::kIo, "cannot write " + (dir / kReportFile).string());
  f << report.dump(2) << "\n";
}

Tokenizer configured_tokenizer(const RunConfig& cfg) {
  const std::string& path = cfg.get("tokenizer.checkpoint");
  if (path.empty()) fail(ErrorCode::kConfig, "tokenizer.checkpoint is not set");
  return tokenizer_from_checkpoint(load_checkpoint(path));
}

int cmd_probe(RunConfig cfg, std::ostream& out) {
  const fs::path dir = output_dir(cfg);
  const Dataset data = load_run_dataset(cfg);
  Rng rng(cfg.seed());
  json report;
  if (cfg.stage() == "eval" && !cfg.get("mim.checkpoint").empty()) {
    MimTransformer model = mim_from_checkpoint(load_checkpoint(cfg.get("mim.checkpoint")));
    report = evaluate_pretrained(model, data, parse_eval_mode(cfg.get("eval.mode")), finetune_options(cfg), rng)
                 .to_json();
  } else {
    Tokenizer tok = configured_tokenizer(cfg);
    report = linear_probe_codewords(tok, data, rng, probe_options(cfg)).to_json();
  }
  write_report(dir, cfg, report);
  out << report.dump() << "\n";
  return 0;
}

int cmd_classify_recon(RunConfig cfg, std::ostream& out) {
  const fs::path dir = output_dir(cfg);
  const Dataset data = load_run_dataset(cfg);
  Tokenizer tok = configured_tokenizer(cfg);
  Rng rng(cfg.seed());
  const Split split = split_indices(data.labels, data.size(), cfg.get_double("dataset.test_fraction"), rng);
  const Dataset test = data.subset(split.test);
  ConvClassifier clf{nullptr};
  if (!cfg.get("classifier.checkpoint").empty()) {
    clf = classifier_from_checkpoint(load_checkpoint(cfg.get("classifier.checkpoint")));
  } else {
    ClassifierConfig cc;
    cc.input_size = data.image_size();
    cc.num_classes = data.num_classes();
    clf = train_classifier(data.subset(split.train), cc, classifier_train_options(cfg), rng);
    RunConfig snapshot = cfg;
    snapshot.set("stage", "eval");
    snapshot.resolve();
    save_checkpoint(classifier_checkpoint(clf, snapshot), dir / kClassifierFile);
  }
  const json report = {{"clean_accuracy", classifier_accuracy(clf, test.images, test.labels)},
                       {"reconstruction_accuracy", classify_reconstructions(tok, clf, test)},
                       {"test_size", test.size()},
                       {"tokenizer", to_hex(tok.fingerprint())}};
  write_report(dir, cfg, report);
  out << report.dump() << "\n";
  return 0;
}

int cmd_mosaic(RunConfig cfg, const CommandFlags& flags, std::ostream& out) {
  const fs::path dir = output_dir(cfg);
  const Dataset data = load_run_dataset(cfg);
  Tokenizer tok = configured_tokenizer(cfg);
  int64_t k = flags.codeword != -2 ? flags.codeword : cfg.get_int("mosaic.codeword");
  if (k == -1) {
    torch::Tensor hist = torch::zeros({tok.codebook.size()}, torch::kInt64);
    for (int64_t s = 0; s < data.size(); s += 256) {
      hist += token_histogram(tok.tokenize(data.images.slice(0, s, std::min(data.size(), s + 256))).indices,
                              tok.codebook.size());
    }
    k = hist.argmax().item<int64_t>();
  }
  const int64_t count = flags.count > 0 ? flags.count : cfg.get_int("mosaic.count");
  const MosaicReport report = codeword_mosaic(tok, data, k, count);
  const fs::path png = dir / ("mosaic_" + std::to_string(k) + ".png");
  write_mosaic(report, png);
  json summary = {{"codeword", k}, {"occurrences", report.occurrences}, {"emitted", report.emitted},
                  {"png", png.string()}};
  write_report(dir, cfg, summary);
  out << summary.dump() << "\n";
  return 0;
}

int cmd_reconstruct(RunConfig cfg, const CommandFlags& flags, std::ostream& out) {
  const fs::path dir = output_dir(cfg);
  const Dataset data = load_run_dataset(cfg);
  Tokenizer tok = configured_tokenizer(cfg);
  const int64_t count = std::min(data.size(), flags.count > 0 ? flags.count : cfg.get_int("reconstruct.count"));
  if (count == 0) fail(ErrorCode::kConfig, "reconstruct: dataset is empty");
  const torch::Tensor x = data.images.slice(0, 0, count);
  const torch::Tensor x_hat = reconstruct(tok, x);
  // Two rows: originals on top, reconstructions below.
  const torch::Tensor top = torch::cat(x.unbind(0), 2);
  const torch::Tensor bottom = torch::cat(x_hat.unbind(0), 2);
  write_png(dir / "reconstructions.png", to_rgb(torch::cat({top, bottom}, 1)));
  const json report = {{"images", count},
                       {"l1", pixel_loss(x, x_hat, PixelNorm::kL1).item<double>()},
                       {"l2", pixel_loss(x, x_hat, PixelNorm::kL2).item<double>()},
                       {"png", (dir / "reconstructions.png").string()}};
  write_report(dir, cfg, report);
  out << report.dump() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, const CommandFlags& flags, std::ostream& out) {
  double worst = 0.0;
  json report = json::object();
  for (double lambda : {0.0, 1.0}) {
    const DecoderGradCheck r = decoder_grad_check(lambda, cfg.seed(), flags.eps);
    worst = std::max(worst, r.max_relative_error);
    out << "lambda=" << lambda << " max relative error: " << r.max_relative_error << " (worst tensor "
        << r.worst_tensor << ": analytic " << r.worst.analytic_at_worst
        << ", numeric " << r.worst.numeric_at_worst << "; " << r.tensors << " tensors)\n";
    report[lambda > 0 ? "lambda1" : "lambda0"] = {{"max_relative_error", r.max_relative_error},
                                                  {"worst_tensor", r.worst_tensor},
                                                  {"tensors", r.tensors}};
  }
  out << "max relative error: " << worst << "\n";
  if (!cfg.get("out_dir").empty()) write_report(output_dir(cfg), cfg, report);
  return worst < 1e-2 ? 0 : 1;
}

void print_summary(const RunSummary& s, std::ostream& out) {
  json j = s.summary;
  j["dir"] = s.dir.string();
  j["artifact"] = s.artifact.string();
  out << j.dump() << "\n";
}

int dispatch(const std::string& name, const CommandFlags& flags, std::ostream& out) {
  RunConfig cfg = build_config(flags.common);
  if (name == "train-tokenizer") return print_summary(run_train_tokenizer(cfg, output_dir(cfg)), out), 0;
  if (name == "train-feature-net") return print_summary(run_train_feature_net(cfg, output_dir(cfg)), out), 0;
  if (name == "train-mim") return print_summary(run_train_mim(cfg, output_dir(cfg)), out), 0;
  if (name == "tokenize") return print_summary(run_tokenize(cfg, output_dir(cfg)), out), 0;
  if (name == "probe") return cmd_probe(cfg, out);
  if (name == "classify-recon") return cmd_classify_recon(cfg, out);
  if (name == "mosaic") return cmd_mosaic(cfg, flags, out);
  if (name == "reconstruct") return cmd_reconstruct(cfg, flags, out);
  return cmd_gradcheck(cfg, flags, out);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PeCo tokenizer, masked image modeling and evaluation tools", "peco"};
  app.require_subcommand(1, 1);
  CommandFlags flags;
  std::string selected;
  for (const auto& [name, description] : kSubcommands) {
    CLI::App* sub = app.add_subcommand(name, description);
    sub->add_option("--config", flags.common.config, "key = value config file");
    sub->add_option("--seed", flags.common.seed, "seed (overrides the config)");
    sub->add_option("--out", flags.common.out, "output directory (overrides PECO_OUT_DIR)");
    sub->add_option("--set", flags.common.overrides, "config override key=value (repeatable)");
    if (std::string(name) == "mosaic") {
      sub->add_option("--codeword", flags.codeword, "codeword id (-1: most frequent)");
      sub->add_option("--count", flags.count, "maximum number of patches");
    }
    if (std::string(name) == "reconstruct") sub->add_option("--count", flags.count, "number of images");
    if (std::string(name) == "gradcheck") sub->add_option("--eps", flags.eps, "central-difference step");
    sub->callback([&selected, name] { selected = name; });
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    return dispatch(selected, flags, out);
  } catch (const Error& e) {
    err << "error[" << to_string(e.code()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return 1;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace peco
