#include "mmsb/mmsb.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using namespace mmsb;

namespace {

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("mmsb_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Result run(const std::string& args) {
  static int counter = 0;
  const fs::path out = workdir() / ("stdout_" + std::to_string(counter));
  const fs::path err = workdir() / ("stderr_" + std::to_string(counter++));
  const std::string cmd = std::string(MMSB_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string l;
  while (std::getline(ss, l)) out.push_back(l);
  return out;
}

std::vector<double> numbers(const std::string& line) {
  std::vector<double> v;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
  return v;
}

/// Trains once per dataset with the quick built-in config.
fs::path trained(const std::string& dataset, int seed = 0) {
  const fs::path dir = workdir() / ("run_" + dataset + "_" + std::to_string(seed));
  if (!fs::exists(dir / "manifest.json")) {
    const auto r = run("train --dataset " + dataset + " --config default --seed " + std::to_string(seed) +
                       " --threads 1 --out " + dir.string());
    EXPECT_EQ(r.code, 0) << r.err;
  }
  return dir;
}

void write_config(const fs::path& p, const std::string& extra, const std::string& times = "0, 1, 2, 3") {
  std::ofstream f(p);
  f << "times = " << times << "\nn_total_steps = 12\nsigma = 1\nbatch_size = 30\nwarmup_steps = 5\n"
    << "outer_iterations = 1\ninner_steps = 3\nseed = 0\nhidden = 8\nembed_dim = 4\n"
    << extra;
}

}  // namespace

TEST(CliTrain, DefaultConfigWritesCheckpointsAndManifest) {
  const fs::path dir = trained("moons4");
  EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(dir / "checkpoints")) ckpts += e.path().extension() == ".ckpt";
  EXPECT_GE(ckpts, 1);
  const auto model = load_model(dir / "model.ckpt");
  EXPECT_EQ(model.grid.marginals(), 4);
  EXPECT_EQ(model.history.completed_outer, 2);
  EXPECT_FALSE(fs::exists(dir / ".lock"));

  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 0);
  EXPECT_EQ(manifest["input_hash"].get<std::string>().size(), 40u);
  EXPECT_TRUE(manifest.contains("started_at"));
  EXPECT_TRUE(manifest.contains("finished_at"));
  EXPECT_EQ(manifest["config"]["batch_size"], "96");

  std::set<std::string> listed, present;
  for (const auto& o : manifest["outputs"]) listed.insert(o["path"].get<std::string>());
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) present.insert(fs::relative(e.path(), dir).generic_string());
  present.erase("manifest.json");
  EXPECT_EQ(listed, present);
}

TEST(CliTrain, MetricStreamIsBitReproducible) {
  const fs::path a = trained("moons4");
  const fs::path b = workdir() / "run_repeat";
  const auto r = run("train --dataset moons4 --config default --seed 0 --threads 1 --out " + b.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(a / "metrics.ndjson"), slurp(b / "metrics.ndjson"));
  EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
  const auto stream = lines(slurp(a / "metrics.ndjson"));
  // warmup (2 phases + eval) then 2 x (backward, forward, eval)
  ASSERT_EQ(stream.size(), 9u);
  EXPECT_EQ(nlohmann::json::parse(stream[0])["direction"], "forward");
  EXPECT_EQ(nlohmann::json::parse(stream[3])["direction"], "backward");
  EXPECT_EQ(nlohmann::json::parse(stream[8])["event"], "eval");
}

TEST(CliTrain, DryRunDoesNotTrain) {
  const fs::path dir = workdir() / "dry";
  const auto r = run("train --dataset moons4 --config default --dry-run --out " + dir.string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("config ok"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(CliTrain, ExitCodes) {
  const fs::path cfg = workdir() / "bad.cfg";
  write_config(cfg, "learning_rate = 1e-3\nwidth = 3\n");
  EXPECT_EQ(run("train --dataset moons4 --dry-run --config " + cfg.string()).code, 2);
  write_config(cfg, "learning_rate = 1e-3\n", "0, 1, 2");
  EXPECT_EQ(run("train --dataset moons4 --dry-run --config " + cfg.string()).code, 2);
  EXPECT_EQ(run("train --config default").code, 2);
  EXPECT_EQ(run("train --dataset nowhere.csv --config default --dry-run").code, 3);

  write_config(cfg, "learning_rate = 1e200\n");
  const auto div = run("train --dataset moons4 --config " + cfg.string() + " --out " + (workdir() / "div").string());
  EXPECT_EQ(div.code, 4) << div.err;
  EXPECT_NE(div.err.find("not finite"), std::string::npos) << div.err;

  const fs::path locked = workdir() / "locked";
  fs::create_directories(locked);
  std::ofstream(locked / ".lock") << "1\n";
  write_config(cfg, "learning_rate = 1e-3\n");
  const auto lk = run("train --dataset moons4 --config " + cfg.string() + " --out " + locked.string());
  EXPECT_EQ(lk.code, 3);
  EXPECT_NE(lk.err.find("locked"), std::string::npos);
  EXPECT_TRUE(fs::exists(locked / ".lock"));
}

TEST(CliTrain, ResampleAndCacheFlags) {
  const fs::path cfg = workdir() / "flags.cfg";
  write_config(cfg, "learning_rate = 1e-3\n");
  const fs::path dir = workdir() / "flags";
  const auto r = run("train --dataset moons4 --config " + cfg.string() + " --resample-times outer --cache-endpoints --out " +
                     dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["config"]["resample_times"], "outer");
  EXPECT_EQ(manifest["config"]["cache_endpoints"], true);
  EXPECT_EQ(run("train --dataset moons4 --config " + cfg.string() + " --resample-times sometimes --dry-run").code, 2);
}

TEST(CliEval, ReportCarriesBothTableLayouts) {
  const fs::path dir = trained("moons4");
  const fs::path report = workdir() / "report.txt";
  const auto r = run("eval --no-w2 --model " + (dir / "model.ckpt").string() + " --dataset moons4 --out " + report.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = slurp(report);
  EXPECT_EQ(text, r.out);
  EXPECT_NE(text.find("Setting,W2,Path Energy"), std::string::npos);
  EXPECT_NE(text.find("Results on test set of embryoid body"), std::string::npos);
  const auto ls = lines(text);
  const auto head = std::find(ls.begin(), ls.end(), "Time,MMD,SWD");
  ASSERT_NE(head, ls.end());
  ASSERT_GE(ls.end() - head, 5);
  EXPECT_EQ(head[1].substr(0, 4), "t_1,");
  EXPECT_EQ(head[3].substr(0, 4), "t_3,");
  EXPECT_EQ(head[4].substr(0, 8), "Average,");
  EXPECT_EQ(run("eval --model " + (workdir() / "missing.ckpt").string() + " --dataset moons4").code, 3);
  EXPECT_EQ(run("eval --model " + (dir / "model.ckpt").string() + " --dataset moons2").code, 3);
}

TEST(CliSample, WritesGridSnapshots) {
  const fs::path dir = trained("moons4");
  const fs::path csv = workdir() / "samples.csv";
  ASSERT_EQ(run("sample --model " + (dir / "model.ckpt").string() + " --dataset moons4 -n 50 --out " + csv.string()).code, 0);
  const auto ls = lines(slurp(csv));
  EXPECT_EQ(ls.front(), "time,x_1,x_2");
  EXPECT_EQ(ls.size(), 1u + 4 * 50);
  const fs::path traj = workdir() / "traj.csv";
  ASSERT_EQ(run("sample --model " + (dir / "model.ckpt").string() + " --dataset moons4 -n 5 --direction backward "
                "--sampler ode --trajectories --out " + traj.string())
                .code,
            0);
  EXPECT_EQ(lines(slurp(traj)).front().substr(0, 10), "row_id,ste");
}

TEST(CliExport, QuiverSnapshotsAndMoments) {
  const fs::path dir = trained("moons2");
  const fs::path out = workdir() / "plots";
  const auto r = run("export-plot --model " + (dir / "model.ckpt").string() +
                     " --dataset moons2 -n 200 --quiver-times 0.5 --quiver-grid 20 --snapshot-times 0,0.5,1,1.3 "
                     "--moments --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto quiver = lines(slurp(out / "quiver_t0.5.csv"));
  EXPECT_EQ(quiver.front(), "x,y,u,v");
  EXPECT_EQ(quiver.size(), 401u);
  for (std::size_t k = 1; k < quiver.size(); ++k) ASSERT_EQ(numbers(quiver[k]).size(), 4u);

  const auto snaps = lines(slurp(out / "snapshots.csv"));
  EXPECT_EQ(snaps.size(), 1u + 4 * 200);
  std::set<double> times;
  for (std::size_t k = 1; k < snaps.size(); ++k) times.insert(numbers(snaps[k])[0]);
  EXPECT_EQ(times, (std::set<double>{0.0, 0.5, 1.0, 1.3}));

  // Moment curves come from the same routine the library exposes.
  const auto model = load_model(dir / "model.ckpt");
  const auto data = gen_moons_sequence(20000, 2000, 1, 2);
  const Matrix start = data.marginals[0].test.topRows(200);
  const auto m = moment_track(ode_simulate(start, model.fwd, model.bwd, model.grid, Direction::forward), model.grid);
  const auto ml = lines(slurp(out / "moments.csv"));
  ASSERT_EQ(ml.size(), m.t.size() + 1);
  for (std::size_t k = 0; k < m.t.size(); ++k) {
    const auto v = numbers(ml[k + 1]);
    EXPECT_EQ(v[0], m.t[k]);
    EXPECT_EQ(v[1], m.mean[k]);
    EXPECT_EQ(v[2], m.variance[k]);
    EXPECT_EQ(v[3], m.covariance[k]);
  }
  EXPECT_EQ(run("export-plot --model " + (workdir() / "none.ckpt").string() + " --out " + out.string()).code, 3);
}

TEST(CliOracle, WritesPairwiseTablesAndEmpiricalCoupling) {
  const fs::path out = workdir() / "oracle";
  const auto r = run("oracle --atoms 5 --marginals 3 --sigma 0.5 --interior-times 0.5,1.5 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto pw = lines(slurp(out / "pairwise.csv"));
  ASSERT_EQ(pw.size(), 1u + 2 * 25);
  double mass[2] = {0, 0};
  for (std::size_t k = 1; k < pw.size(); ++k) {
    const auto v = numbers(pw[k]);
    mass[static_cast<int>(v[0])] += v[3];
  }
  EXPECT_NEAR(mass[0], 1.0, 1e-9);
  EXPECT_NEAR(mass[1], 1.0, 1e-9);
  const auto res = lines(slurp(out / "residuals.csv"));
  EXPECT_LE(numbers(res.back())[1], 1e-10);
  for (std::size_t k = 2; k < res.size(); ++k) EXPECT_GE(numbers(res[k])[2], numbers(res[k - 1])[2] - 1e-12);
  EXPECT_EQ(lines(slurp(out / "potentials.csv")).size(), 1u + 15);
  EXPECT_EQ(lines(slurp(out / "interior.csv")).size(), 3u);

  const fs::path uneven = workdir() / "oracle_grid";
  ASSERT_EQ(run("oracle --atoms 4 --marginals 3 --grid 0,0.5,2 --out " + uneven.string()).code, 0);
  EXPECT_EQ(run("oracle --atoms 4 --marginals 3 --grid 0,1 --out " + uneven.string()).code, 2);

  const fs::path model = trained("moons2") / "model.ckpt";
  const fs::path emp = workdir() / "oracle_emp";
  const auto e = run("oracle --atoms 3 --marginals 2 --dim 2 --model " + model.string() + " --paths 50 --out " + emp.string());
  ASSERT_EQ(e.code, 0) << e.err;
  const auto rows = lines(slurp(emp / "empirical.csv"));
  ASSERT_EQ(rows.size(), 2u);
  const auto v = numbers(rows[1]);
  EXPECT_GE(v[1], 0.0);
  EXPECT_LE(v[1], 1.0);
}

TEST(CliBench, SixRowTableWithTripledEnergy) {
  const fs::path m1 = trained("moons2", 0), m2 = trained("moons2", 1), mm = trained("moons4");
  const fs::path g1 = trained("8gaussians2"), gm = trained("8gaussians4");
  const fs::path table = workdir() / "table1.txt";
  const auto r = run("bench-table1 --moons-single " + (m1 / "model.ckpt").string() + "," + (m2 / "model.ckpt").string() +
                     " --moons-multi " + (mm / "model.ckpt").string() + " --8gaussians-single " +
                     (g1 / "model.ckpt").string() + " --8gaussians-multi " + (gm / "model.ckpt").string() + " --out " +
                     table.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ls = lines(slurp(table));
  ASSERT_EQ(ls.size(), 7u);
  EXPECT_EQ(ls[0], "Setting,W2,Path Energy,seeds");
  EXPECT_EQ(ls[1].rfind("Moons (single bridge),", 0), 0u);
  EXPECT_NE(ls[1].find("+-"), std::string::npos);    // two seeds
  EXPECT_EQ(ls[4].find("+-"), std::string::npos);    // one seed
  EXPECT_EQ(ls[6].rfind("8 Gaussians (multi-bridge),", 0), 0u);

  // The x3 row is exactly three times the mean single-bridge energy.
  auto energy = [](const std::string& row) {
    std::stringstream ss(row);
    std::string cell;
    std::getline(ss, cell, ',');
    std::getline(ss, cell, ',');
    std::getline(ss, cell, ',');
    return cell;
  };
  const auto single = energy(ls[4]);  // one seed: plain mean
  const auto x3 = energy(ls[5]);
  EXPECT_NEAR(std::stod(x3), 3.0 * std::stod(single), 3 * 0.0005 + 1e-9);
  EXPECT_EQ(run("bench-table1 --moons-single " + (m1 / "model.ckpt").string()).code, 3);
}
