#include "idt/checkpoint.hpp"
#include "idt/commands.hpp"
#include "idt/config.hpp"
#include "idt/io.hpp"
#include "idt/pipeline.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace idt;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "idt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void put(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

// Every regular file below `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static fs::path root;
  static fs::path data;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("idt_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root);
    data = root / "data";
    put(root / "gen.cfg", "seed = 3\nscenes = 4\nviews = 2\nwidth = 32\nheight = 32\nout_dir = " + data.string() + "\n");
    ASSERT_EQ(cli({"gen-data", "--config", (root / "gen.cfg").string()}).code, kExitOk);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static fs::path train_config(const std::string& name, const std::string& extra) {
    const fs::path p = root / (name + ".cfg");
    put(p, "dataset = " + data.string() + "\nout_dir = " + (root / name).string() +
               "\nviews = 2\nmodel.embed_dim = 16\nmodel.block_pairs = 1\nmodel.heads = 2\nmodel.registers = 2\n" + extra);
    return p;
  }
};

fs::path CliTest::root;
fs::path CliTest::data;

}  // namespace

// ---- argument handling and exit codes --------------------------------------

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(cli({"train"}).code, kExitUsage);
  EXPECT_EQ(cli({"eval", "--oracle", "--per-view", data.string()}).code, kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
  put(root / "bad.cfg", "scenes = 2\nno_such_key = 1\n");
  const CliResult r = cli({"gen-data", "--config", (root / "bad.cfg").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("no_such_key"), std::string::npos);
  put(root / "bad2.cfg", "scenes = many\n");
  EXPECT_EQ(cli({"gen-data", "--config", (root / "bad2.cfg").string()}).code, kExitUsage);
}

TEST_F(CliTest, MissingFilesExitThree) {
  EXPECT_EQ(cli({"gen-data", "--config", (root / "absent.cfg").string()}).code, kExitIo);
  EXPECT_EQ(cli({"decompose", "--checkpoint", (root / "absent.bin").string(), "--out", (root / "x").string(),
                 (data / "scene_0000" / "view_00" / "image.pfm").string()})
                .code,
            kExitIo);
}

TEST_F(CliTest, UnwritableOutputExitsThree) {
  put(root / "plainfile", "x");
  const CliResult r = cli({"gen-data", "--config", (root / "gen.cfg").string(), "--out", (root / "plainfile" / "sub").string()});
  EXPECT_EQ(r.code, kExitIo);
}

TEST_F(CliTest, BinaryReportsExitCodes) {
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  const std::string bin = IDT_CLI_PATH;
  EXPECT_EQ(status(bin + " --help"), 0);
  EXPECT_EQ(status(bin + " bogus"), 2);
  EXPECT_EQ(status(bin + " eval --oracle " + data.string()), 0);
  EXPECT_EQ(status(bin + " gen-data --config /nonexistent/gen.cfg"), 3);
}

// ---- config ----------------------------------------------------------------

TEST(Config, IncludeAndOverride) {
  const fs::path dir = fs::temp_directory_path() / ("idt_cfg_" + std::to_string(::getpid()));
  put(dir / "base" / "common.cfg", "# shared\nsteps = 7\nlr = 0.5\n");
  put(dir / "run.cfg", "include base/common.cfg\nlr = 0.25  # later wins\n");
  const auto kv = KeyValueConfig::parse_file(dir / "run.cfg");
  EXPECT_EQ(kv.get_uint("steps", 0), 7u);
  EXPECT_EQ(kv.get_double("lr", 0), 0.25);
  put(dir / "loop.cfg", "include loop.cfg\n");
  put(dir / "dangling.cfg", "include nowhere.cfg\n");
  EXPECT_THROW(KeyValueConfig::parse_file(dir / "dangling.cfg"), IoError);
  EXPECT_THROW(KeyValueConfig::parse_file(dir / "loop.cfg"), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse_string("novalue\n"), ConfigError);
  fs::remove_all(dir);
}

TEST(Config, RunConfigValidation) {
  EXPECT_THROW(run_config(KeyValueConfig::parse_string("dataset = /nonexistent\nsteps = 3\n")), ConfigError);
  OptimizerConfig o;
  o.lr = -1;
  EXPECT_THROW(o.validate(), ConfigError);
}

// ---- gen-data --------------------------------------------------------------

TEST_F(CliTest, GenDataIsDeterministic) {
  const fs::path again = root / "data_again";
  ASSERT_EQ(cli({"gen-data", "--config", (root / "gen.cfg").string(), "--out", again.string()}).code, kExitOk);
  EXPECT_EQ(tree(again), tree(data));
  const fs::path other = root / "data_other";
  ASSERT_EQ(cli({"gen-data", "--config", (root / "gen.cfg").string(), "--out", other.string(), "--seed", "4"}).code, kExitOk);
  EXPECT_NE(tree(other), tree(data));
  // Refuses to write into a populated directory unless asked.
  EXPECT_EQ(cli({"gen-data", "--config", (root / "gen.cfg").string(), "--out", again.string()}).code, kExitUsage);
}

// ---- training --------------------------------------------------------------

TEST_F(CliTest, TrainingReducesObjective) {
  const fs::path cfg = train_config("t50", "steps = 50\nlr = 3e-3\nseed = 1\n");
  const CliResult r = cli({"train", "--config", cfg.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto log = lines(slurp(root / "t50" / "loss_log.csv"));
  ASSERT_EQ(log.size(), 51u);
  EXPECT_EQ(log[0].rfind("step,total,alb,diff,spec,recon,illum", 0), 0u);

  const auto set = pipeline::load_training_set(data);
  const auto rc = run_config(KeyValueConfig::parse_file(cfg));
  const auto init = pipeline::fresh_state(rc);
  const auto final_state = pipeline::from_checkpoint(load_checkpoint(root / "t50" / "final.bin"));
  EXPECT_EQ(final_state.step, 50u);
  double before = 0, after = 0;
  for (const auto& scene : set.scenes) {
    before += pipeline::training_objective(init.model, scene, rc.loss, rc.depth_weight, false).breakdown.total;
    after += pipeline::training_objective(final_state.model, scene, rc.loss, rc.depth_weight, false).breakdown.total;
  }
  EXPECT_LT(after, before);
}

TEST_F(CliTest, ResumeIsBitExact) {
  const fs::path cfg = train_config("full", "steps = 12\ncheckpoint_every = 6\nlr = 3e-3\nlr_decay = 0.5\ngrad_clip = 1\nseed = 2\n");
  ASSERT_EQ(cli({"train", "--config", cfg.string()}).code, kExitOk);
  ASSERT_TRUE(fs::exists(root / "full" / "ckpt_000006.bin"));
  ASSERT_TRUE(fs::exists(root / "full" / "ckpt_000012.bin"));

  const fs::path resumed = root / "resumed";
  fs::create_directories(resumed);
  fs::copy_file(root / "full" / "loss_log.csv", resumed / "loss_log.csv");
  const CliResult r = cli({"train", "--config", cfg.string(), "--out", resumed.string(), "--checkpoint",
                     (root / "full" / "ckpt_000006.bin").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(slurp(resumed / "loss_log.csv"), slurp(root / "full" / "loss_log.csv"));
  EXPECT_EQ(slurp(resumed / "final.bin"), slurp(root / "full" / "final.bin"));
  // First resumed step on stdout matches the uninterrupted log line for step 6.
  const auto printed = lines(r.out);
  ASSERT_GE(printed.size(), 2u);
  EXPECT_EQ(printed[1], lines(slurp(root / "full" / "loss_log.csv"))[7]);
}

TEST_F(CliTest, TrainingIsDeterministic) {
  const fs::path a = train_config("det_a", "steps = 4\nseed = 9\n");
  const fs::path b = train_config("det_b", "steps = 4\nseed = 9\n");
  ASSERT_EQ(cli({"train", "--config", a.string()}).code, kExitOk);
  ASSERT_EQ(cli({"train", "--config", b.string()}).code, kExitOk);
  EXPECT_EQ(tree(root / "det_a"), tree(root / "det_b"));
}

TEST_F(CliTest, ZeroWeightsLeaveParametersUnchanged) {
  const fs::path cfg = train_config("zero", "steps = 5\nlr = 0.1\nseed = 4\ndepth_weight = 0\nloss.w_albedo = 0\n"
                                            "loss.w_diffuse = 0\nloss.w_specular = 0\nloss.w_recon = 0\nloss.w_illum = 0\n");
  ASSERT_EQ(cli({"train", "--config", cfg.string()}).code, kExitOk);
  const auto rc = run_config(KeyValueConfig::parse_file(cfg));
  const auto trained = load_checkpoint(root / "zero" / "final.bin");
  EXPECT_TRUE(trained.model.params == pipeline::fresh_state(rc).model.params);
  for (const auto& l : lines(slurp(root / "zero" / "loss_log.csv"))) {
    if (l[0] == 's') continue;
    EXPECT_EQ(l.substr(l.find(',') + 1, 2), "0,") << l;
  }
}

TEST_F(CliTest, DivergenceAbortsWithExitFour) {
  const fs::path cfg = train_config("nan", "steps = 40\nlr = 1e12\nmomentum = 0.99\nseed = 5\n");
  const CliResult r = cli({"train", "--config", cfg.string()});
  EXPECT_EQ(r.code, kExitNumeric);
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST(PlanStep, DeterministicSortedSubsets) {
  for (std::uint64_t step = 0; step < 50; ++step) {
    const auto a = pipeline::plan_step(7, step, 16, 4, 2, 3);
    const auto b = pipeline::plan_step(7, step, 16, 4, 2, 3);
    ASSERT_EQ(a.entries.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_EQ(a.entries[i].scene, b.entries[i].scene);
      EXPECT_EQ(a.entries[i].views, b.entries[i].views);
      EXPECT_LT(a.entries[i].scene, 16u);
      ASSERT_EQ(a.entries[i].views.size(), 3u);
      EXPECT_TRUE(std::is_sorted(a.entries[i].views.begin(), a.entries[i].views.end()));
      EXPECT_LT(a.entries[i].views.back(), 4u);
    }
  }
  EXPECT_THROW(pipeline::plan_step(7, 0, 16, 2, 1, 3), std::invalid_argument);
}

// ---- checkpoint ------------------------------------------------------------

TEST(Checkpoint, RoundTripAndForwardBitExact) {
  model::ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.block_pairs = 1;
  cfg.heads = 2;
  Checkpoint c{model::Model::init(cfg, 3), {}};
  const std::string bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_TRUE(back.model.params == c.model.params);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  std::vector<Image> views(2, Image(16, 16, 3, 0.3));
  views[1].data[5] = 0.9;
  const auto a = model::decompose(c.model, views), b = model::decompose(back.model, views);
  EXPECT_EQ(a.albedo, b.albedo);
  EXPECT_EQ(a.s_spec, b.s_spec);
  EXPECT_EQ(sg::pack(a.illumination), sg::pack(b.illumination));
}

TEST(Checkpoint, CorruptionIsRejected) {
  model::ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.block_pairs = 1;
  cfg.heads = 2;
  const std::string bytes = encode_checkpoint({model::Model::init(cfg, 4), {}});
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  std::string flipped = bytes;
  flipped[bytes.size() / 3] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped), FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  EXPECT_THROW(decode_checkpoint(""), FormatError);
}

TEST_F(CliTest, TruncatedCheckpointExitsThree) {
  const fs::path cfg = train_config("trunc", "steps = 1\n");
  ASSERT_EQ(cli({"train", "--config", cfg.string()}).code, kExitOk);
  const std::string bytes = slurp(root / "trunc" / "final.bin");
  put(root / "trunc" / "cut.bin", bytes.substr(0, bytes.size() - 9));
  const CliResult r = cli({"decompose", "--checkpoint", (root / "trunc" / "cut.bin").string(), "--out",
                     (root / "trunc" / "dec").string(), (data / "scene_0000" / "view_00" / "image.pfm").string()});
  EXPECT_EQ(r.code, kExitIo);
}

// ---- decompose / eval / relight ---------------------------------------------

class TrainedCliTest : public CliTest {
 protected:
  static fs::path ckpt;
  static std::vector<std::string> images;
  static void SetUpTestSuite() {
    CliTest::SetUpTestSuite();
    const fs::path cfg = train_config("base", "steps = 3\nseed = 6\n");
    ASSERT_EQ(cli({"train", "--config", cfg.string()}).code, kExitOk);
    ckpt = root / "base" / "final.bin";
    images = {(data / "scene_0001" / "view_00" / "image.pfm").string(), (data / "scene_0001" / "view_01" / "image.pfm").string()};
  }
};

fs::path TrainedCliTest::ckpt;
std::vector<std::string> TrainedCliTest::images;

TEST_F(TrainedCliTest, DecomposeWritesLayersDeterministically) {
  auto run = [&](const fs::path& out) {
    std::vector<std::string> args{"decompose", "--checkpoint", ckpt.string(), "--out", out.string()};
    args.insert(args.end(), images.begin(), images.end());
    return cli(args);
  };
  ASSERT_EQ(run(root / "dec_a").code, kExitOk);
  ASSERT_EQ(run(root / "dec_b").code, kExitOk);
  const auto files = tree(root / "dec_a");
  EXPECT_EQ(files.size(), 2u * 6u + 1u);
  EXPECT_EQ(files, tree(root / "dec_b"));
  for (std::size_t v = 0; v < 2; ++v) {
    const std::string p = "view_0" + std::to_string(v) + "_";
    const Image input = read_pfm(images[v]);
    const Image rec = read_pfm(root / "dec_a" / (p + "recomposed.pfm"));
    const Image res = read_pfm(root / "dec_a" / (p + "residual.pfm"));
    for (std::size_t i = 0; i < res.data.size(); ++i) {
      EXPECT_NEAR(res.data[i], std::abs(rec.data[i] - input.data[i]), 1e-6);
    }
  }
  EXPECT_NO_THROW(sg::validate(sg::read_sgm(root / "dec_a" / "sgm.txt")));
}

TEST_F(TrainedCliTest, DecomposeRejectsMismatchedViews) {
  put(root / "odd" / "x.pfm", encode_pfm(Image(24, 32, 3, 0.5)));
  EXPECT_EQ(cli({"decompose", "--checkpoint", ckpt.string(), "--out", (root / "odd_out").string(), images[0],
                 (root / "odd" / "x.pfm").string()})
                .code,
            kExitUsage);
}

TEST_F(TrainedCliTest, EvalOracleHitsFloor) {
  const CliResult r = cli({"eval", "--oracle", data.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::map<std::string, std::vector<std::string>> mean;
  for (const auto& l : lines(r.out)) {
    if (l.rfind("mean,oracle,", 0) != 0) continue;
    std::vector<std::string> f;
    std::istringstream in(l);
    for (std::string x; std::getline(in, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 9u);
    mean[f[2]] = f;
  }
  ASSERT_EQ(mean.size(), 4u);
  EXPECT_EQ(mean["albedo"][3], "inf");
  EXPECT_GT(std::stod(mean["recon"][3]), 100.0);  // float32 layers on disk
  // Resampling floor at 32x32; the view-dependent layer sits above it.
  EXPECT_LT(std::stod(mean["albedo"][7]), 5e-3);
  EXPECT_LT(std::stod(mean["albedo"][7]), std::stod(mean["specular"][7]));
}

TEST_F(TrainedCliTest, EvalModesShareSchema) {
  const CliResult joint = cli({"eval", "--checkpoint", ckpt.string(), data.string()});
  const CliResult per_view = cli({"eval", "--checkpoint", ckpt.string(), "--per-view", data.string()});
  ASSERT_EQ(joint.code, kExitOk) << joint.err;
  ASSERT_EQ(per_view.code, kExitOk);
  const auto a = lines(joint.out), b = lines(per_view.out);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.size(), 2u + (4u + 1u) * 4u);
  EXPECT_NE(b.back().find(",per-view,"), std::string::npos);
  EXPECT_NE(a.back().find(",joint,"), std::string::npos);
  EXPECT_EQ(cli({"eval", "--checkpoint", ckpt.string(), data.string()}).out, joint.out);

  const CliResult js = cli({"eval", "--checkpoint", ckpt.string(), "--json", data.string()});
  ASSERT_EQ(js.code, kExitOk);
  const auto doc = nlohmann::json::parse(js.out);
  EXPECT_EQ(doc["mode"], "joint");
  EXPECT_EQ(doc["scenes"].size(), 4u);
  EXPECT_EQ(cli({"eval", data.string()}).code, kExitUsage);
}

TEST_F(TrainedCliTest, RelightContracts) {
  const Checkpoint c = load_checkpoint(ckpt);
  std::vector<Image> views;
  for (const auto& p : images) views.push_back(read_pfm(p));
  const auto set = model::decompose(c.model, views);

  const auto same = pipeline::relight(set, set.illumination);
  for (std::size_t v = 0; v < views.size(); ++v) {
    EXPECT_EQ(same.relit[v], objectives::recompose(set.albedo[v], set.s_diff[v], set.s_spec[v]));
  }
  sg::SGMixture doubled = set.illumination;
  for (auto& l : doubled.lobes) l.amplitude *= 2.0;
  doubled.ambient *= 2.0;
  const auto twice = pipeline::relight(set, doubled);
  for (std::size_t v = 0; v < views.size(); ++v) {
    for (std::size_t i = 0; i < set.s_diff[v].data.size(); ++i) {
      ASSERT_EQ(twice.s_diff[v].data[i], 2.0 * set.s_diff[v].data[i]);
      ASSERT_EQ(twice.s_spec[v].data[i], 2.0 * set.s_spec[v].data[i]);
    }
  }

  sg::write_sgm(root / "same.sgm", set.illumination);
  std::vector<std::string> args{"relight", "--checkpoint", ckpt.string(), "--sgm", (root / "same.sgm").string(),
                                "--out", (root / "relit").string()};
  args.insert(args.end(), images.begin(), images.end());
  ASSERT_EQ(cli(args).code, kExitOk);
  const Image relit = read_pfm(root / "relit" / "view_00_relit.pfm");
  EXPECT_EQ(relit, decode_pfm(encode_pfm(same.relit[0])));
  put(root / "broken.sgm", "2\n0 0 0\n");
  args[4] = (root / "broken.sgm").string();
  EXPECT_NE(cli(args).code, kExitOk);
}
