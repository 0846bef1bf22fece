#include "idt/commands.hpp"

#include "idt/checkpoint.hpp"
#include "idt/config.hpp"
#include "idt/io.hpp"
#include "idt/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

namespace idt {

namespace fs = std::filesystem;

namespace {

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

std::string checkpoint_name(std::uint64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ckpt_%06llu.bin", static_cast<unsigned long long>(step));
  return buf;
}

// Keeps the lines of an earlier log that precede `step`.
std::vector<std::string> previous_log(const fs::path& path, std::uint64_t step) {
  std::vector<std::string> lines;
  if (step == 0 || !fs::exists(path)) return lines;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    try {
      if (std::stoull(line.substr(0, comma)) < step) lines.push_back(line);
    } catch (const std::exception&) {
    }
  }
  return lines;
}

}  // namespace

int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    KeyValueConfig kv = KeyValueConfig::parse_file(args.config);
    if (args.seed) kv.set("seed", std::to_string(*args.seed));
    if (args.out) kv.set("out_dir", args.out->string());
    const GenDataConfig g = gen_data_config(kv);
    const scene::DatasetSummary s = scene::make_dataset(g.synth, g.out_dir, g.overwrite);
    out << "dataset " << g.out_dir.string() << ": " << s.scenes << " scenes x " << s.views
        << " views, " << s.width << "x" << s.height << ", seed " << s.seed << '\n';
    return kExitOk;
  });
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    KeyValueConfig kv = KeyValueConfig::parse_file(args.config);
    if (args.seed) kv.set("seed", std::to_string(*args.seed));
    if (args.out) kv.set("out_dir", args.out->string());
    const RunConfig cfg = run_config(kv);
    const pipeline::TrainingSet data = pipeline::load_training_set(cfg.dataset);

    pipeline::TrainerState state;
    if (args.resume) {
      state = pipeline::from_checkpoint(load_checkpoint(*args.resume));
      if (!(state.model.config == cfg.model)) {
        throw ConfigError("checkpoint model settings differ from the config file");
      }
    } else {
      state = pipeline::fresh_state(cfg);
    }

    ensure_dir(cfg.out_dir);
    const fs::path log_path = cfg.out_dir / "loss_log.csv";
    std::vector<std::string> log = previous_log(log_path, state.step);
    auto flush_log = [&] {
      std::string text = objectives::loss_log_header() + "\n";
      for (const auto& l : log) text += l + "\n";
      write_file_atomic(log_path, text);
    };
    out << objectives::loss_log_header() << '\n';

    try {
      pipeline::train(cfg, data, std::move(state),
                      [&](const pipeline::StepReport& r, const pipeline::TrainerState& s) {
                        log.push_back(objectives::format_loss_line(r.step, r.loss));
                        out << log.back() << '\n';
                        const auto every = cfg.optim.checkpoint_every;
                        const bool last = s.step >= cfg.optim.steps;
                        if ((every > 0 && s.step % every == 0) || last) {
                          save_checkpoint(cfg.out_dir / checkpoint_name(s.step), pipeline::to_checkpoint(s));
                          flush_log();
                        }
                        if (last) save_checkpoint(cfg.out_dir / "final.bin", pipeline::to_checkpoint(s));
                      });
    } catch (const NumericError&) {
      flush_log();
      throw;
    }
    if (log.empty()) flush_log();
    return kExitOk;
  });
}

int cmd_decompose(const DecomposeArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.out.empty()) throw ConfigError("--out is required");
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    const std::vector<Image> views = pipeline::load_views(args.images);
    ckpt.model.config.validate_resolution(views.front().height, views.front().width);
    const model::IntrinsicSet set = model::decompose(ckpt.model, views);
    const auto files = pipeline::write_decomposition(set, views, args.out);
    out << "wrote " << files.size() << " files to " << args.out.string() << '\n';
    return kExitOk;
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.oracle && args.per_view) throw ConfigError("--oracle and --per-view are exclusive");
    if (!(args.occlusion_tau > 0.0)) throw ConfigError("occlusion tau must be positive");
    std::optional<Checkpoint> ckpt;
    if (!args.oracle) {
      if (!args.checkpoint) throw ConfigError("--checkpoint is required unless --oracle is given");
      ckpt = load_checkpoint(*args.checkpoint);
    }
    const auto mode = args.oracle ? pipeline::EvalMode::kOracle
                                  : (args.per_view ? pipeline::EvalMode::kPerView : pipeline::EvalMode::kJoint);
    metrics::EvalConfig ec;
    ec.occlusion_tau = args.occlusion_tau;
    ec.all_references = args.all_references;
    const pipeline::DatasetReport report =
        pipeline::evaluate_dataset(ckpt ? &ckpt->model : nullptr, args.dataset, mode, ec);
    const std::string text =
        args.json ? pipeline::dataset_report_json(report) : pipeline::dataset_report_csv(report);
    if (args.out) {
      write_file_atomic(*args.out, text);
    } else {
      out << text;
    }
    return kExitOk;
  });
}

int cmd_relight(const RelightArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.out.empty()) throw ConfigError("--out is required");
    if (args.sgm.empty()) throw ConfigError("--sgm is required");
    const sg::SGMixture light = sg::read_sgm(args.sgm);
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    const std::vector<Image> views = pipeline::load_views(args.images);
    ckpt.model.config.validate_resolution(views.front().height, views.front().width);
    const model::IntrinsicSet set = model::decompose(ckpt.model, views);
    const pipeline::RelightResult r = pipeline::relight(set, light);
    ensure_dir(args.out);
    for (std::size_t v = 0; v < r.relit.size(); ++v) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "view_%02zu_relit.pfm", v);
      write_pfm(args.out / buf, r.relit[v]);
    }
    out << "relit " << r.relit.size() << " views; diffuse ratio " << format_double(r.diffuse_ratio[0]) << ' '
        << format_double(r.diffuse_ratio[1]) << ' ' << format_double(r.diffuse_ratio[2]) << ", specular ratio "
        << format_double(r.specular_ratio[0]) << ' ' << format_double(r.specular_ratio[1]) << ' '
        << format_double(r.specular_ratio[2]) << '\n';
    return kExitOk;
  });
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-view intrinsic decomposition toolkit", "idt"};
  app.require_subcommand(1);

  GenDataArgs gen;
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  auto* c_gen = app.add_subcommand("gen-data", "Render a synthetic multi-view dataset");
  c_gen->add_option("--config", gen_config, "Generator config file")->required();
  auto* o_gen_seed = c_gen->add_option("--seed", gen_seed, "Override the generator seed");
  auto* o_gen_out = c_gen->add_option("--out", gen_out, "Override the output directory");

  TrainArgs train;
  std::string train_config, train_out, train_resume;
  std::uint64_t train_seed = 0;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--config", train_config, "Run config file")->required();
  auto* o_train_seed = c_train->add_option("--seed", train_seed, "Override the run seed");
  auto* o_train_out = c_train->add_option("--out", train_out, "Override the output directory");
  auto* o_train_ckpt = c_train->add_option("--checkpoint", train_resume, "Resume from this checkpoint");

  DecomposeArgs dec;
  std::string dec_ckpt, dec_out;
  std::vector<std::string> dec_images;
  auto* c_dec = app.add_subcommand("decompose", "Decompose a set of views jointly");
  c_dec->add_option("--checkpoint", dec_ckpt, "Model checkpoint")->required();
  c_dec->add_option("--out", dec_out, "Output directory")->required();
  c_dec->add_option("images", dec_images, "Input PFM images, one per view")->required();

  EvalArgs ev;
  std::string ev_ckpt, ev_out, ev_dataset;
  auto* c_eval = app.add_subcommand("eval", "Evaluate on a dataset with ground truth");
  auto* o_ev_ckpt = c_eval->add_option("--checkpoint", ev_ckpt, "Model checkpoint");
  auto* o_ev_out = c_eval->add_option("--out", ev_out, "Metric table path (stdout if absent)");
  c_eval->add_flag("--per-view", ev.per_view, "Feed each view alone (V=1)");
  c_eval->add_flag("--oracle", ev.oracle, "Score the ground-truth layers as predictions");
  c_eval->add_flag("--json", ev.json, "Write JSON instead of CSV");
  c_eval->add_flag("--all-references", ev.all_references, "Use every view as consistency reference");
  c_eval->add_option("--occlusion-tau", ev.occlusion_tau, "Relative depth tolerance for warping");
  c_eval->add_option("dataset", ev_dataset, "Dataset directory")->required();

  RelightArgs rel;
  std::string rel_ckpt, rel_out, rel_sgm;
  std::vector<std::string> rel_images;
  auto* c_rel = app.add_subcommand("relight", "Relight views under a new SG illumination");
  c_rel->add_option("--checkpoint", rel_ckpt, "Model checkpoint")->required();
  c_rel->add_option("--sgm", rel_sgm, "New illumination file")->required();
  c_rel->add_option("--out", rel_out, "Output directory")->required();
  c_rel->add_option("images", rel_images, "Input PFM images, one per view")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }

  auto paths = [](const std::vector<std::string>& v) {
    return std::vector<fs::path>(v.begin(), v.end());
  };
  if (c_gen->parsed()) {
    gen.config = gen_config;
    if (*o_gen_seed) gen.seed = gen_seed;
    if (*o_gen_out) gen.out = gen_out;
    return cmd_gen_data(gen, out, err);
  }
  if (c_train->parsed()) {
    train.config = train_config;
    if (*o_train_seed) train.seed = train_seed;
    if (*o_train_out) train.out = train_out;
    if (*o_train_ckpt) train.resume = train_resume;
    return cmd_train(train, out, err);
  }
  if (c_dec->parsed()) {
    dec.checkpoint = dec_ckpt;
    dec.out = dec_out;
    dec.images = paths(dec_images);
    return cmd_decompose(dec, out, err);
  }
  if (c_eval->parsed()) {
    if (*o_ev_ckpt) ev.checkpoint = ev_ckpt;
    if (*o_ev_out) ev.out = ev_out;
    ev.dataset = ev_dataset;
    return cmd_eval(ev, out, err);
  }
  rel.checkpoint = rel_ckpt;
  rel.out = rel_out;
  rel.sgm = rel_sgm;
  rel.images = paths(rel_images);
  return cmd_relight(rel, out, err);
}

}  // namespace idt
