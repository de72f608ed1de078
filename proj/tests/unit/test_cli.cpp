#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"
#include "tickgp/cli/experiment.hpp"

using namespace tickgp;
using namespace tickgp::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("tickgp_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliRun {
  int code = -1;
  std::string out, err;
};

CliRun cli(const std::string& args, const fs::path& dir) {
  const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
  const std::string cmd = std::string(TICKGP_CLI) + " " + args + " > " + o.string() + " 2> " + e.string();
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

/// IDX pair of random images with labels cycling through `classes`.
std::pair<std::string, std::string> toy_idx(const fs::path& dir, const std::string& tag, std::size_t n,
                                            std::size_t h, std::size_t w, const std::vector<int>& classes,
                                            std::uint64_t seed) {
  Rng rng(seed);
  ImageBatch b;
  b.images = random_images(n, h, w, rng);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(classes[i % classes.size()]);
  const std::string im = (dir / (tag + "-images")).string(), lb = (dir / (tag + "-labels")).string();
  save_idx(b, im, lb);
  return {im, lb};
}

/// Config for a tiny conv model on 8x8 toys with a train and test split.
std::string toy_config(const fs::path& dir, const std::string& extra = "") {
  auto [ti, tl] = toy_idx(dir, "train", 24, 8, 8, {0, 1, 2}, 1);
  auto [vi, vl] = toy_idx(dir, "test", 9, 8, 8, {0, 1, 2}, 2);
  std::ostringstream os;
  os << "[model]\ntype = conv\nnum_inducing = 4\npatch_size = 3\n"
     << "[data]\ntrain_images = " << ti << "\ntrain_labels = " << tl << "\ntest_images = " << vi
     << "\ntest_labels = " << vl << "\n"
     << "[train]\nbatch_size = 8\nsteps = 6\nlr = 0.01\nseed = 5\neval_samples = 3\n"
     << "[output]\ndir = " << (dir / "run").string() << "\n"
     << extra;
  const fs::path p = dir / "toy.ini";
  std::ofstream(p) << os.str();
  return p.string();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) row.push_back(f);
    rows.push_back(row);
  }
  return rows;
}

std::map<std::string, double> metrics_of(const fs::path& p) {
  std::map<std::string, double> m;
  auto rows = read_csv(p);
  for (std::size_t i = 1; i < rows.size(); ++i) m[rows[i][1]] = std::stod(rows[i][2]);
  return m;
}

}  // namespace

TEST(Config, DefaultsMaterialized) {
  Config c;
  const std::string text = c.resolved();
  for (const auto& k : config_schema()) {
    const auto dot = k.name.find('.');
    EXPECT_NE(text.find(k.name.substr(dot + 1) + " = " + k.default_value), std::string::npos) << k.name;
  }
  EXPECT_EQ(Config::parse(text).resolved(), text);
}

TEST(Config, ParseAndOverride) {
  Config c = Config::parse("[model]\ntype = conv\nnum_inducing = 17\n[train]\nlr = 0.5\n");
  EXPECT_EQ(c.str("model.type"), "conv");
  EXPECT_EQ(c.count("model.num_inducing"), 17u);
  EXPECT_EQ(c.real("train.lr"), 0.5);
  EXPECT_EQ(c.count("train.steps"), 1000u);
  c.set("data.classes", "2, 7");
  EXPECT_EQ(c.int_list("data.classes"), (std::vector<int>{2, 7}));
}

TEST(Config, ErrorsNameTheKey) {
  auto msg = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(msg([] { Config::parse("[model]\nflavour = x\n"); }).find("model.flavour"), std::string::npos);
  EXPECT_NE(msg([] { Config::parse("[train]\nsteps = ten\n").count("train.steps"); }).find("train.steps"),
            std::string::npos);
  EXPECT_NE(msg([] { Config::parse("[train]\nlr = 1e\n").real("train.lr"); }).find("train.lr"), std::string::npos);
  EXPECT_NE(msg([] { Config::parse("[model]\nweights = maybe\n").flag("model.weights"); }).find("model.weights"),
            std::string::npos);
  EXPECT_THROW(Config::parse("steps = 3\n"), ConfigError);
  EXPECT_THROW(model_config(Config::parse("[model]\ntype = resnet\n")), ConfigError);
  EXPECT_THROW(model_config(Config::parse("[model]\nlikelihood = poisson\n")), ConfigError);
  EXPECT_THROW(model_config(Config::parse("[model]\njitter = -1\n")), ConfigError);
  EXPECT_THROW(train_config(Config::parse("[train]\nschedule = cosine\n")), ConfigError);
  EXPECT_THROW(train_config(Config::parse("[train]\nbatch_size = 0\n")), ConfigError);
}

TEST(Cli, ParseErrorsExitTwo) {
  auto dir = scratch("parse");
  EXPECT_EQ(cli("", dir).code, 2);
  EXPECT_EQ(cli("frobnicate", dir).code, 2);
  EXPECT_EQ(cli("train", dir).code, 2);
  CliRun r = cli("train " + (dir / "absent.ini").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("absent.ini"), std::string::npos);
}

TEST(Cli, UnknownKeyExitTwoNamingKey) {
  auto dir = scratch("badkey");
  CliRun r = cli("train " + toy_config(dir, "[extra]\nknob = 1\n"), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("extra.knob"), std::string::npos) << r.err;
  r = cli("train " + toy_config(dir) + " --set train.momentum=3", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("train.momentum"), std::string::npos) << r.err;
}

TEST(Cli, MissingDataExitThreeWithPath) {
  auto dir = scratch("nodata");
  CliRun r = cli("train " + toy_config(dir) + " --set data.train_images=" + (dir / "nowhere-images").string(), dir);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find((dir / "nowhere-images").string()), std::string::npos) << r.err;
}

TEST(Cli, NumericalFailureExitFour) {
  auto dir = scratch("numerical");
  CliRun r = cli("train " + toy_config(dir) + " --set train.lr=1e300", dir);
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_NE(r.err.find("numerical error"), std::string::npos) << r.err;
}

TEST(Cli, TrainWritesRunDirectory) {
  auto dir = scratch("train");
  CliRun r = cli("train " + toy_config(dir, "") + " --set train.checkpoint_interval=3", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path run = dir / "run";
  for (const char* f : {"config.resolved", "log.csv", "timing.csv", "metrics.csv", "proba.csv", "checkpoints/step_3",
                        "checkpoints/step_6"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  const std::string resolved = slurp(run / "config.resolved");
  EXPECT_NE(resolved.find("type = conv"), std::string::npos);
  EXPECT_NE(resolved.find("adam_beta2 = 0.999"), std::string::npos);
  auto log = read_csv(run / "log.csv");
  ASSERT_EQ(log.size(), 7u);
  EXPECT_EQ(log[0], (std::vector<std::string>{"step", "lr", "elbo"}));
  EXPECT_EQ(log[1][0], "0");
  auto proba = read_csv(run / "proba.csv");
  ASSERT_EQ(proba.size(), 10u);
  EXPECT_EQ(proba[0].size(), 2u + 10u);
  for (std::size_t i = 1; i < proba.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 2; j < proba[i].size(); ++j) s += std::stod(proba[i][j]);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto m = metrics_of(run / "metrics.csv");
  for (const char* k : {"top1_error_pct", "top2_error_pct", "top3_error_pct", "nll_full", "nll_misclassified", "elbo"})
    EXPECT_TRUE(m.count(k)) << k;
  const Checkpoint ck = load_checkpoint((run / "checkpoints/step_6").string());
  EXPECT_EQ(ck.step, 6u);
  EXPECT_EQ(Config::parse(ck.config).resolved(), resolved);
}

TEST(Cli, SameSeedIdenticalLog) {
  auto a = scratch("seed_a"), b = scratch("seed_b"), c = scratch("seed_c");
  ASSERT_EQ(cli("train " + toy_config(a), a).code, 0);
  ASSERT_EQ(cli("train " + toy_config(b), b).code, 0);
  ASSERT_EQ(cli("train " + toy_config(c) + " --set train.seed=6", c).code, 0);
  EXPECT_EQ(slurp(a / "run/log.csv"), slurp(b / "run/log.csv"));
  EXPECT_EQ(slurp(a / "run/metrics.csv"), slurp(b / "run/metrics.csv"));
  const Checkpoint ca = load_checkpoint((a / "run/checkpoints/step_6").string());
  const Checkpoint cb = load_checkpoint((b / "run/checkpoints/step_6").string());
  for (const auto& [name, p] : ca.params) EXPECT_EQ(cb.params.at(name).second.to_vector(), p.second.to_vector()) << name;
  EXPECT_NE(slurp(a / "run/log.csv"), slurp(c / "run/log.csv"));
}

TEST(Cli, DeepNonSquareHiddenGeometryRejected) {
  auto dir = scratch("geometry");
  auto [ti, tl] = toy_idx(dir, "wide", 8, 8, 10, {0, 1}, 3);
  std::ofstream(dir / "deep.ini") << "[model]\ntype = deep-conv\ndepth = 2\nnum_inducing = 4\nhidden_inducing = 4\n"
                                  << "patch_size = 3\nhidden_patch_size = 3\n[data]\ntrain_images = " << ti
                                  << "\ntrain_labels = " << tl << "\ntest_images =\n[train]\nsteps = 1\n"
                                  << "[output]\ndir = " << (dir / "run").string() << "\n";
  CliRun r = cli("train " + (dir / "deep.ini").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("square"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "run/log.csv"));
}

TEST(Cli, EvalRejectsKBeyondClasses) {
  auto dir = scratch("eval_k");
  ASSERT_EQ(cli("train " + toy_config(dir), dir).code, 0);
  const std::string ck = (dir / "run/checkpoints/step_6").string();
  CliRun r = cli("eval " + ck + " --k 1,11 --out " + (dir / "ev").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("k=11"), std::string::npos) << r.err;
  r = cli("eval " + ck + " --k 0 --out " + (dir / "ev").string(), dir);
  EXPECT_EQ(r.code, 2);
  r = cli("eval " + ck + " --k 1,2,10 --samples 4 --out " + (dir / "ev").string(), dir);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(metrics_of(dir / "ev/metrics.csv").count("top10_error_pct"));
  EXPECT_EQ(metrics_of(dir / "ev/metrics.csv").at("top10_error_pct"), 0.0);
}

TEST(Cli, EvalPaddedSemeionSubset) {
  auto dir = scratch("semeion");
  auto [ti, tl] = toy_idx(dir, "train", 16, 20, 20, {2, 7}, 4);
  std::ofstream(dir / "c.ini") << "[model]\ntype = tick\nnum_inducing = 4\npatch_size = 5\n[data]\ntrain_images = "
                               << ti << "\ntrain_labels = " << tl << "\ntest_images =\nclasses = 2,7\n"
                               << "[train]\nbatch_size = 8\nsteps = 2\n[output]\ndir = " << (dir / "run").string()
                               << "\n";
  ASSERT_EQ(cli("train " + (dir / "c.ini").string(), dir).code, 0);
  std::ofstream sem(dir / "semeion.data");
  for (int i = 0; i < 12; ++i) {
    for (int p = 0; p < 256; ++p) sem << ((p * 5 + i) % 4 == 0 ? "1.0000 " : "0.0000 ");
    for (int c = 0; c < 10; ++c) sem << (c == i % 10 ? "1 " : "0 ");
    sem << '\n';
  }
  sem.close();
  const std::string base = "eval " + (dir / "run/checkpoints/step_2").string() + " --semeion " +
                           (dir / "semeion.data").string() + " --classes 2,7 --k 1,2";
  CliRun r = cli(base + " --pad-to 20 --out " + (dir / "ood").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  auto proba = read_csv(dir / "ood/proba.csv");
  EXPECT_EQ(proba.size(), 1u + 2u);
  auto m = metrics_of(dir / "ood/metrics.csv");
  for (const char* k : {"top1_error_pct", "top2_error_pct", "nll_full", "nll_misclassified", "elbo"})
    EXPECT_TRUE(m.count(k)) << k;
  r = cli(base + " --pad-to 18 --out " + (dir / "ood2").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("18x18"), std::string::npos) << r.err;
  r = cli(base + " --pad-to 12 --out " + (dir / "ood3").string(), dir);
  EXPECT_EQ(r.code, 3);
}

TEST(Cli, ConjugateEvalReproducesTrainElbo) {
  auto dir = scratch("conjugate");
  Rng rng(9);
  ImageBatch b;
  b.images = Tensor(Shape{16, 1, 1});
  for (std::size_t i = 0; i < 16; ++i) {
    b.images[i] = (double(i) + 0.5) / 16.0;
    b.labels.push_back(int(std::lround(3.0 + 2.0 * std::sin(6.0 * b.images[i]))));
  }
  save_idx(b, (dir / "x").string(), (dir / "y").string());
  std::ofstream(dir / "g.ini") << "[model]\ntype = se\nnum_inducing = 16\nlikelihood = gaussian\n"
                               << "patch_lengthscale = 0.3\n[data]\ntrain_images = " << (dir / "x").string()
                               << "\ntrain_labels = " << (dir / "y").string() << "\ntest_images =\n"
                               << "[train]\nbatch_size = 16\nsteps = 40\nlr = 0.05\ncheckpoint_interval = 20\n"
                               << "[output]\ndir = " << (dir / "run").string() << "\n";
  ASSERT_EQ(cli("train " + (dir / "g.ini").string(), dir).code, 0);
  auto log = read_csv(dir / "run/log.csv");
  const double train_elbo = std::stod(log[1 + 20][2]);
  CliRun r = cli("eval " + (dir / "run/checkpoints/step_20").string() + " --images " + (dir / "x").string() +
                  " --labels " + (dir / "y").string() + " --out " + (dir / "ev").string(),
              dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const double eval_elbo = metrics_of(dir / "ev/metrics.csv").at("elbo");
  EXPECT_NEAR(eval_elbo, train_elbo, 1e-10 * std::abs(train_elbo));
  auto proba = read_csv(dir / "ev/proba.csv");
  EXPECT_EQ(proba[0], (std::vector<std::string>{"index", "label", "mean", "variance"}));
}

TEST(Cli, BenchSamplingPhasesAndSwitchPreservesParameters) {
  auto dir = scratch("bench");
  auto [ti, tl] = toy_idx(dir, "train", 16, 8, 8, {0, 1}, 5);
  auto write = [&](const std::string& name, std::size_t steps, std::size_t sw) {
    std::ofstream(dir / (name + ".ini"))
        << "[model]\ntype = deep-conv\ndepth = 2\nnum_inducing = 4\nhidden_inducing = 4\npatch_size = 3\n"
        << "hidden_patch_size = 5\n[data]\ntrain_images = " << ti << "\ntrain_labels = " << tl
        << "\ntest_images =\n[train]\nbatch_size = 4\nsteps = " << steps << "\nseed = 2\n[bench]\nswitch_step = " << sw
        << "\n[output]\ndir = " << (dir / name).string() << "\n";
    return (dir / (name + ".ini")).string();
  };
  CliRun r = cli("bench-sampling " + write("switch", 10, 6), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  auto summary = read_csv(dir / "switch/bench_summary.csv");
  ASSERT_EQ(summary.size(), 3u);
  EXPECT_EQ(summary[1][0], "marginal");
  EXPECT_EQ(summary[1][1], "6");
  EXPECT_EQ(summary[2][0], "full");
  EXPECT_EQ(summary[2][1], "4");
  auto bench = read_csv(dir / "switch/bench.csv");
  ASSERT_EQ(bench.size(), 11u);
  EXPECT_EQ(bench[6][1], "marginal");
  EXPECT_EQ(bench[7][1], "full");
  ASSERT_EQ(cli("bench-sampling " + write("plain", 6, 0), dir).code, 0);
  const Checkpoint at_switch = load_checkpoint((dir / "switch/checkpoints/step_6").string());
  const Checkpoint plain = load_checkpoint((dir / "plain/checkpoints/step_6").string());
  ASSERT_EQ(at_switch.params.size(), plain.params.size());
  for (const auto& [name, p] : plain.params) EXPECT_EQ(at_switch.params.at(name).second.to_vector(), p.second.to_vector()) << name;
  EXPECT_EQ(cli("bench-sampling " + write("bad", 5, 5), dir).code, 2);
  auto [si, sl] = toy_idx(dir, "flat", 4, 8, 8, {0, 1}, 6);
  std::ofstream(dir / "shallow.ini") << "[model]\ntype = conv\nnum_inducing = 3\npatch_size = 3\n[data]\ntrain_images = "
                                     << si << "\ntrain_labels = " << sl << "\ntest_images =\n[train]\nsteps = 3\n"
                                     << "[output]\ndir = " << (dir / "shallow").string() << "\n";
  EXPECT_EQ(cli("bench-sampling " + (dir / "shallow.ini").string(), dir).code, 2);
}

TEST(Cli, CrossingsReport) {
  auto dir = scratch("crossings");
  auto value = [](const std::string& text, const std::string& key) {
    const auto pos = text.find(key + " ");
    EXPECT_NE(pos, std::string::npos) << key;
    return std::stod(text.substr(pos + key.size() + 1));
  };
  CliRun r = cli("crossings --samples 200 --grid 1000 --seed 1", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(value(r.out, "analytic up-crossings"), 1.0, 1e-12);
  EXPECT_NEAR(value(r.out, "analytic crossings (both directions)"), 2.0, 1e-12);
  const double mc = value(r.out, "monte-carlo up-crossings");
  const auto pm = r.out.find("+-", r.out.find("monte-carlo up-crossings"));
  const double se = std::stod(r.out.substr(pm + 3));
  EXPECT_LE(std::abs(mc - 1.0), 3.0 * se);
  EXPECT_TRUE(r.err.empty()) << r.err;
  const double l = 1.0 / (2.0 * std::numbers::pi);
  CliRun d = cli("crossings --samples 10 --grid 200 --lengthscale " + format_double(2.0 * l), dir);
  EXPECT_NEAR(value(d.out, "analytic up-crossings"), 0.5, 1e-12);
  CliRun coarse = cli("crossings --samples 10 --grid 8 --lengthscale 0.05", dir);
  EXPECT_EQ(coarse.code, 0);
  EXPECT_NE(coarse.err.find("warning"), std::string::npos) << coarse.err;
}

TEST(Cli, ConfigReferenceListsEveryKey) {
  auto dir = scratch("reference");
  CliRun r = cli("config-reference", dir);
  ASSERT_EQ(r.code, 0);
  for (const auto& k : config_schema()) {
    const auto dot = k.name.find('.');
    EXPECT_NE(r.out.find(k.name.substr(dot + 1) + " = " + k.default_value), std::string::npos) << k.name;
  }
}

TEST(Cli, PatchMapWritesPgms) {
  auto dir = scratch("patchmap");
  ASSERT_EQ(cli("train " + toy_config(dir) + " --set model.type=tick", dir).code, 0);
  CliRun r = cli("patch-map " + (dir / "run/checkpoints/step_6").string() + " --images " + (dir / "test-images").string() +
                  " --labels " + (dir / "test-labels").string() + " --samples 2 --out " + (dir / "maps/m").string(),
              dir);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"maps/m_0.pgm", "maps/m_1.pgm"}) {
    const std::string pgm = slurp(dir / f);
    EXPECT_EQ(pgm.rfind("P5\n# min ", 0), 0u);
    EXPECT_NE(pgm.find("\n6 6\n255\n"), std::string::npos);
  }
  r = cli("patch-map " + (dir / "run/checkpoints/step_6").string() + " --images " + (dir / "test-images").string() +
              " --labels " + (dir / "test-labels").string() + " --index 99",
          dir);
  EXPECT_EQ(r.code, 3);
}
