#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctrack/checkpoint.hpp"
#include "ctrack/cli.hpp"
#include "ctrack/config.hpp"
#include "ctrack/metrics.hpp"

using namespace ctrack;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig =
    "# small enough for unit tests\n"
    "epochs = 3\n"
    "iters_per_epoch = 2\n"
    "batch = 4\n"
    "lr_decay_epoch = 100\n"
    "teacher_layers = 4\n"
    "student_layers = 2\n"
    "embed_dim = 8\n"
    "heads = 2\n"
    "mlp_ratio = 2\n"
    "patch = 2\n"
    "template = 4\n"
    "search = 8\n"
    "eval_samples = 16\n"
    "finetune_epochs = 1\n";

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("ctrack_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream f(path(name), std::ios::binary);
    f << text;
    return path(name);
  }

  static std::string slurp(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  int cli(std::vector<std::string> args) {
    out.str("");
    err.str("");
    args.insert(args.begin(), "ctrack");
    std::vector<const char*> argv;
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  }

  fs::path dir;
  std::ostringstream out, err;
};

std::string config_error(const std::string& text) {
  try {
    parse_config_string(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

Checkpoint small_checkpoint() {
  Checkpoint ck;
  ck.config = parse_config_string(kTinyConfig);
  ck.regime = Regime::kCompress;
  Rng rng(1);
  add_model(ck, "teacher", TrackerModel<float>::init(ck.config.teacher_config(), rng));
  add_model(ck, "student", TrackerModel<double>::init(ck.config.student_config(), rng));
  return ck;
}

}  // namespace

TEST(Config, EmptyGivesDefaults) {
  const RunConfig c = parse_config_string("");
  const RunConfig d;
  EXPECT_EQ(c.weights.feat, 0.2);
  EXPECT_EQ(c.weights.track, 1.0);
  EXPECT_EQ(c.p_init, 0.5);
  EXPECT_EQ(c.teacher_layers, d.teacher_layers);
  EXPECT_EQ(c.student_layers, d.student_layers);
  EXPECT_EQ(serialize_config(c), serialize_config(d));
}

TEST(Config, CommentsBlanksAndWhitespace) {
  const RunConfig c = parse_config_string("\n  # note\nseed = 17   # trailing\n\n  lr=0.002\n");
  EXPECT_EQ(c.seed, 17u);
  EXPECT_EQ(c.lr, 0.002);
}

TEST(Config, RoundTrip) {
  RunConfig c = parse_config_string(kTinyConfig);
  c.lr = 0.1 + 0.2;
  c.stage_mode = StageMode::kUneven;
  c.uneven_sizes = {1, 3};
  c.init_policy = InitPolicy::kFirstK;
  c.decoder_trainable = false;
  const RunConfig back = parse_config_string(serialize_config(c));
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(back.uneven_sizes, c.uneven_sizes);
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  const std::string text = serialize_config(c);
  EXPECT_EQ(config_keys().size(), static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(Config, ConstraintViolations) {
  EXPECT_NE(config_error("p_init = 1.5").find("p_init"), std::string::npos);
  EXPECT_NE(config_error("alpha1 = 0.6\nalpha2 = 0.5").find("alpha"), std::string::npos);
  EXPECT_NE(config_error("lambda_feat = -1").find("lambda"), std::string::npos);
  EXPECT_NE(config_error("student_layers = 3").find("student_layers"), std::string::npos);
  EXPECT_NE(config_error("stage_mode = uneven\nuneven_sizes = 1,1,1,1").find("uneven"), std::string::npos);
  EXPECT_EQ(config_error("stage_mode = uneven\nuneven_sizes = 1,3,1,3"), "");
}

TEST(Config, MalformedLinesCarryLineNumbers) {
  EXPECT_EQ(config_error("seed = 1\nbogus = 3"), "line 2: unknown key 'bogus'");
  EXPECT_EQ(config_error("seed = 1\n\nseed = 2"), "line 3: duplicate key 'seed'");
  EXPECT_EQ(config_error("just words"), "line 1: expected key=value");
  EXPECT_NE(config_error("epochs = ten").find("line 1: epochs"), std::string::npos);
  EXPECT_NE(config_error("epochs = -3").find("line 1: epochs"), std::string::npos);
  EXPECT_NE(config_error("decoder_trainable = maybe").find("true or false"), std::string::npos);
}

TEST(Config, MissingFile) {
  EXPECT_THROW(parse_config("/nonexistent/ctrack.cfg"), ConfigError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const Checkpoint ck = small_checkpoint();
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.regime, Regime::kCompress);
  EXPECT_EQ(serialize_config(back.config), serialize_config(ck.config));
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ck.tensors[i].shape);
    EXPECT_EQ(back.tensors[i].bytes, ck.tensors[i].bytes);
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
  const auto s = extract_model<double>(back, "student", back.config.student_config());
  Rng rng(1);
  (void)TrackerModel<float>::init(ck.config.teacher_config(), rng);
  EXPECT_EQ(s.checksum(), TrackerModel<double>::init(ck.config.student_config(), rng).checksum());
}

TEST(Checkpoint, DecodeErrors) {
  const auto bytes = encode_checkpoint(small_checkpoint());
  auto kind_of = [](const std::vector<unsigned char>& b) {
    try {
      decode_checkpoint(b);
    } catch (const CheckpointError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  auto truncated = bytes;
  truncated.resize(bytes.size() - 7);
  EXPECT_EQ(kind_of(truncated), static_cast<int>(CheckpointError::Kind::kTruncatedBlob));

  std::string text(bytes.begin(), bytes.end());
  std::string v2 = text;
  v2.replace(v2.find("version 1"), 9, "version 2");
  EXPECT_EQ(kind_of({v2.begin(), v2.end()}), static_cast<int>(CheckpointError::Kind::kVersionMismatch));

  std::string garbled = text;
  garbled.replace(0, 5, "xxxxx");
  EXPECT_EQ(kind_of({garbled.begin(), garbled.end()}), static_cast<int>(CheckpointError::Kind::kCorruptManifest));
  EXPECT_EQ(kind_of({}), static_cast<int>(CheckpointError::Kind::kCorruptManifest));
}

TEST(Checkpoint, MissingTensorAndWrongArchitecture) {
  Checkpoint ck = small_checkpoint();
  EXPECT_FALSE(ck.has_model("other"));
  try {
    extract_model<float>(ck, "other", ck.config.teacher_config());
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kMissingTensor);
  }
  EXPECT_THROW(extract_model<float>(ck, "student", ck.config.teacher_config()), CheckpointError);
}

TEST_F(TempDir, CheckpointFileNotFound) {
  try {
    load_checkpoint(path("absent.ckpt"));
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kNotFound);
  }
  save_checkpoint(small_checkpoint(), path("a.ckpt"));
  EXPECT_EQ(load_checkpoint(path("a.ckpt")).tensors.size(), small_checkpoint().tensors.size());
}

TEST_F(TempDir, MetricsIgnoreTrailingPartialLine) {
  MetricsRecord r;
  r.epoch = 4;
  r.p = 0.625;
  r.l_total = 1.0 / 3.0;
  {
    MetricsWriter w(path("m.jsonl"));
    w.write(r);
    r.epoch = 5;
    w.write(r);
  }
  std::ofstream(path("m.jsonl"), std::ios::app) << "{\"epoch\": 6, \"p\"";
  const auto back = read_metrics(path("m.jsonl"));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].epoch, 5u);
  EXPECT_EQ(back[0].l_total, 1.0 / 3.0);
  EXPECT_EQ(metrics_to_json(back[0]).find("\"epoch\":4"), 1u);
}

TEST_F(TempDir, CliUsageErrors) {
  EXPECT_EQ(cli({}), 2);
  EXPECT_EQ(cli({"compress"}), 2);
  EXPECT_NE(err.str().find("--teacher"), std::string::npos);
  EXPECT_EQ(cli({"baseline", "--mode", "bogus"}), 2);
  EXPECT_EQ(cli({"frobnicate"}), 2);
  EXPECT_EQ(cli({"--help"}), 0);
  EXPECT_NE(out.str().find("sweep-p"), std::string::npos);
}

TEST_F(TempDir, CliMissingTeacherAndBadConfig) {
  const std::string cfg = write("tiny.cfg", kTinyConfig);
  EXPECT_EQ(cli({"--config", cfg, "compress", "--teacher", path("nope.ckpt")}), 1);
  EXPECT_NE(err.str().find("teacher checkpoint not found"), std::string::npos);
  const std::string bad = write("bad.cfg", "p_init = 2\n");
  EXPECT_EQ(cli({"--config", bad, "train-teacher"}), 1);
  EXPECT_NE(err.str().find("p_init"), std::string::npos);
  EXPECT_EQ(cli({"--config", path("absent.cfg"), "train-teacher"}), 1);
}

TEST_F(TempDir, CliEndToEnd) {
  const std::string cfg = write("tiny.cfg", kTinyConfig);
  const std::string teacher = path("t.ckpt");
  ASSERT_EQ(cli({"--config", cfg, "--out", teacher, "train-teacher"}), 0) << err.str();
  EXPECT_EQ(read_metrics(metrics_path(teacher)).size(), 3u);

  ASSERT_EQ(cli({"--config", cfg, "--out", path("c1.ckpt"), "compress", "--teacher", teacher}), 0) << err.str();
  ASSERT_EQ(cli({"--config", cfg, "--out", path("c2.ckpt"), "compress", "--teacher", teacher}), 0);
  EXPECT_EQ(slurp(path("c1.ckpt")), slurp(path("c2.ckpt")));
  const auto m1 = read_metrics(metrics_path(path("c1.ckpt")));
  const auto m2 = read_metrics(metrics_path(path("c2.ckpt")));
  ASSERT_EQ(m1.size(), 3u);
  for (std::size_t i = 0; i < m1.size(); ++i) {
    MetricsRecord a = m1[i], b = m2[i];
    a.wall_seconds = b.wall_seconds = 0.0;
    EXPECT_EQ(metrics_to_json(a), metrics_to_json(b));
  }
  ASSERT_EQ(cli({"--config", cfg, "--seed", "9", "--out", path("c3.ckpt"), "compress", "--teacher", teacher}), 0);
  EXPECT_NE(slurp(path("c1.ckpt")), slurp(path("c3.ckpt")));

  for (const char* mode : {"naive", "distill", "decoupled"}) {
    const std::string p = path(std::string(mode) + ".ckpt");
    ASSERT_EQ(cli({"--config", cfg, "--out", p, "baseline", "--mode", mode, "--teacher", teacher}), 0)
        << mode << err.str();
    EXPECT_EQ(read_metrics(metrics_path(p)).size(), 3u) << mode;
  }
  EXPECT_EQ(cli({"--config", cfg, "--out", path("d.ckpt"), "baseline", "--mode", "distill"}), 1);

  ASSERT_EQ(cli({"eval", "--checkpoint", path("c1.ckpt"), "--hanning", "off"}), 0);
  EXPECT_EQ(out.str().rfind("student (hanning off): accuracy ", 0), 0u) << out.str();
  ASSERT_EQ(cli({"eval", "--checkpoint", path("c1.ckpt"), "--model", "teacher"}), 0);
  EXPECT_EQ(out.str().rfind("teacher (hanning on)", 0), 0u);
  EXPECT_EQ(cli({"eval", "--checkpoint", teacher, "--model", "student"}), 1);

  const std::string sweep = path("sweep");
  ASSERT_EQ(cli({"--config", cfg, "--out", sweep, "sweep-p", "--teacher", teacher, "--p", "0.2,0.8"}), 0)
      << err.str();
  const std::string summary = slurp(sweep + "/summary.tsv");
  EXPECT_EQ(summary.rfind("p\taccuracy\toffset_error\tmean_iou\n0.2\t", 0), 0u) << summary;
  EXPECT_NE(summary.find("\n0.8\t"), std::string::npos);
  EXPECT_EQ(read_metrics(metrics_path(sweep + "/p0.2.ckpt")).size(), 3u);
  EXPECT_EQ(cli({"--config", cfg, "--out", sweep, "sweep-p", "--teacher", teacher, "--p", "1.5"}), 1);
}

TEST_F(TempDir, CliOracleExitCodes) {
  ASSERT_EQ(cli({"--out", path("report.json"), "oracle"}), 0) << out.str();
  EXPECT_NE(out.str().find("all oracles passed"), std::string::npos);
  EXPECT_NE(slurp(path("report.json")).find("\"pass\": true"), std::string::npos);
  EXPECT_EQ(cli({"--inject", "sampler-half-p", "oracle"}), 1);
  EXPECT_NE(out.str().find("FAIL"), std::string::npos);
  EXPECT_EQ(cli({"--inject", "schedule-jump", "oracle"}), 1);
  EXPECT_EQ(cli({"--inject", "nonsense", "oracle"}), 2);
}
