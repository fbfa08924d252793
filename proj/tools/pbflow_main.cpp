// Command-line front end: synth / train / flow. Everything functional goes
// through the public C API; this file only parses flags, checks file
// preconditions, and writes run manifests.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "pbflow.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string iso_utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Plain-text record of one run: resolved config, seed, and every file the
// command wrote. Timestamps are the only lines that vary between reruns.
struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string started = iso_utc_now();
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::string> outputs;

  void add(const std::string& key, const std::string& value) {
    config.emplace_back(key, value);
  }

  void write(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) {
        std::cerr << "warning: cannot write manifest " << path << "\n";
        return;
      }
      out << "pbflow run manifest\n";
      out << "command: " << command << "\n";
      out << "version: " << pbf_version() << "\n";
      out << "seed: " << seed << "\n";
      out << "started_utc: " << started << "\n";
      out << "finished_utc: " << iso_utc_now() << "\n";
      out << "config:\n";
      for (const auto& [k, v] : config) out << "  " << k << " = " << v << "\n";
      out << "outputs:\n";
      for (const std::string& o : outputs) out << "  " << o << "\n";
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      std::cerr << "warning: cannot move manifest into place: " << path << "\n";
  }
};

int fail_from_status(pbf_status status) {
  std::cerr << "error: " << pbf_last_error() << "\n";
  return status == PBF_ERR_INVALID_ARGUMENT ? kExitUsage : kExitRuntime;
}

bool file_exists(const std::string& path) {
  std::error_code ec;
  return std::filesystem::exists(path, ec);
}

template <typename T>
std::string join_list(const std::vector<T>& values) {
  std::ostringstream os;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << ",";
    os << values[i];
  }
  return os.str();
}

// Flat key=value config support: tokens from the file become defaults,
// flags given on the command line win. '#' starts a comment line.
std::vector<std::string> apply_config_file(const std::vector<std::string>& args) {
  std::string config_path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size())
        throw CLI::ValidationError("--config", "missing file argument");
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (config_path.empty()) return rest;

  std::ifstream in(config_path);
  if (!in)
    throw CLI::ValidationError("--config", "cannot open " + config_path);

  std::vector<std::string> merged;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--config", "malformed line: " + line);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw CLI::ValidationError("--config", "malformed line: " + line);
    const std::string flag = "--" + key;
    const bool overridden =
        std::any_of(rest.begin(), rest.end(), [&](const std::string& a) {
          return a == flag || a.rfind(flag + "=", 0) == 0;
        });
    if (!overridden) merged.push_back(flag + "=" + value);
  }
  merged.insert(merged.end(), rest.begin(), rest.end());
  return merged;
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  std::vector<int> nc_list{10};
  std::vector<double> tau_list{3.0};
  bool normalize = false;
  std::string variants = "baseline,spring,centrifuge,spring_sd,centrifuge_sd";
  int reps = 10;
  int epochs = 30;
  int batch = 256;
  double margin = 0.0;  // 0: tuned per method on held-out data
  int threads = 1;
  std::uint64_t seed = 7;
  std::string out_dir = ".";
};

int run_synth(const SynthArgs& a) {
  std::error_code ec;
  std::filesystem::create_directories(a.out_dir, ec);

  pbf_synth_opts opts{};
  opts.nc_values = a.nc_list.data();
  opts.nc_count = a.nc_list.size();
  opts.tau_values = a.tau_list.data();
  opts.tau_count = a.tau_list.size();
  opts.normalize = a.normalize ? 1 : 0;
  opts.methods = a.variants.c_str();
  opts.repetitions = a.reps;
  opts.epochs = a.epochs;
  opts.batch = a.batch;
  opts.lambda = 0.0;  // library default
  opts.margin = a.margin;
  opts.threads = a.threads;
  opts.seed = a.seed;
  opts.write_svg = 1;

  int any_cell_failed = 0;
  const pbf_status status = pbf_synth_run(&opts, a.out_dir.c_str(), &any_cell_failed);
  if (status != PBF_OK) return fail_from_status(status);

  Manifest m;
  m.command = "synth";
  m.seed = a.seed;
  m.add("nc-list", join_list(a.nc_list));
  m.add("tau-list", join_list(a.tau_list));
  m.add("normalize", a.normalize ? "true" : "false");
  m.add("variants", a.variants);
  m.add("reps", std::to_string(a.reps));
  m.add("epochs", std::to_string(a.epochs));
  m.add("batch", std::to_string(a.batch));
  m.add("margin", a.margin > 0.0 ? std::to_string(a.margin) : "auto");
  m.add("threads", std::to_string(a.threads));
  m.add("out-dir", a.out_dir);
  m.outputs = {a.out_dir + "/cells.csv", a.out_dir + "/summary.csv",
               a.out_dir + "/auc_plot.svg"};
  m.write(a.out_dir + "/manifest.txt");

  if (any_cell_failed) {
    std::cerr << "error: one or more experiment cells failed; "
                 "failure rows are recorded in cells.csv\n";
    return kExitRuntime;
  }
  return kExitOk;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string data;
  std::string variant = "spring_sd";
  double margin = 0.0;
  double lambda = 0.8;
  int epochs = 20;
  int batch = 256;
  int patch = 9;
  int pairs = 2048;
  std::uint64_t seed = 7;
  std::string out;
  std::string log;  // defaults next to the checkpoint
};

pbf_loss_variant variant_code(const std::string& name) {
  if (name == "spring") return PBF_LOSS_SPRING;
  if (name == "centrifuge") return PBF_LOSS_CENTRIFUGE;
  if (name == "spring_sd") return PBF_LOSS_SPRING_SD;
  return PBF_LOSS_CENTRIFUGE_SD;
}

int run_train(TrainArgs a) {
  if (!file_exists(a.data)) {
    std::cerr << "error: data file does not exist: " << a.data << "\n";
    return kExitUsage;
  }
  // The data file lists one "first.pgm second.pgm flow.pbfl" triple per
  // line; every referenced file must exist up front.
  {
    std::ifstream list(a.data);
    std::string line;
    while (std::getline(list, line)) {
      std::istringstream ls(line);
      std::string f1, f2, fl;
      if (!(ls >> f1 >> f2 >> fl)) {
        if (f1.empty()) continue;
        std::cerr << "error: malformed data file line: " << line << "\n";
        return kExitUsage;
      }
      for (const std::string& p : {f1, f2, fl})
        if (!file_exists(p)) {
          std::cerr << "error: listed file does not exist: " << p << "\n";
          return kExitUsage;
        }
    }
  }
  if (a.log.empty()) a.log = a.out + ".losses.csv";

  pbf_train_opts opts{};
  opts.data_file = a.data.c_str();
  opts.variant = variant_code(a.variant);
  opts.margin = a.margin;
  opts.lambda = a.lambda;
  opts.epochs = a.epochs;
  opts.batch = a.batch;
  opts.patch = a.patch;
  opts.pairs_per_epoch = a.pairs;
  opts.seed = a.seed;

  const pbf_status status = pbf_train_run(&opts, a.out.c_str(), a.log.c_str());

  Manifest m;
  m.command = "train";
  m.seed = a.seed;
  m.add("data", a.data);
  m.add("variant", a.variant);
  m.add("margin", std::to_string(a.margin));
  m.add("lambda", std::to_string(a.lambda));
  m.add("epochs", std::to_string(a.epochs));
  m.add("batch", std::to_string(a.batch));
  m.add("patch", std::to_string(a.patch));
  m.add("pairs", std::to_string(a.pairs));
  m.add("out", a.out);
  m.add("log", a.log);
  if (file_exists(a.out)) m.outputs.push_back(a.out);
  if (file_exists(a.log)) m.outputs.push_back(a.log);
  m.write(a.out + ".manifest.txt");

  if (status != PBF_OK) return fail_from_status(status);
  return kExitOk;
}

// ------------------------------------------------------------------- flow

struct FlowArgs {
  std::string model, img1, img2, gt;
  int radius = 32;
  int iters = 2;
  int cc_area = 50;
  int border = 8;
  int downsample = 1;
  int knn = 25;
  double kappa = 100.0;
  std::uint64_t seed = 0;
  std::string out_prefix = "flow";
};

int run_flow_cmd(const FlowArgs& a) {
  for (const std::string& p : {a.model, a.img1, a.img2})
    if (!file_exists(p)) {
      std::cerr << "error: input file does not exist: " << p << "\n";
      return kExitUsage;
    }
  if (!a.gt.empty() && !file_exists(a.gt)) {
    std::cerr << "error: ground-truth file does not exist: " << a.gt << "\n";
    return kExitUsage;
  }

  pbf_model* model = nullptr;
  pbf_image* img1 = nullptr;
  pbf_image* img2 = nullptr;
  pbf_flow* gt = nullptr;
  pbf_flow* sparse = nullptr;
  pbf_flow* dense = nullptr;
  auto cleanup = [&] {
    pbf_flow_free(dense);
    pbf_flow_free(sparse);
    pbf_flow_free(gt);
    pbf_image_free(img2);
    pbf_image_free(img1);
    pbf_model_free(model);
  };

  pbf_status status = pbf_model_load(a.model.c_str(), &model);
  if (status == PBF_OK) status = pbf_image_read_pgm(a.img1.c_str(), &img1);
  if (status == PBF_OK) status = pbf_image_read_pgm(a.img2.c_str(), &img2);
  if (status == PBF_OK && !a.gt.empty())
    status = pbf_flow_read(a.gt.c_str(), &gt);
  if (status != PBF_OK) {
    const int code = fail_from_status(status);
    cleanup();
    return code;
  }

  pbf_flow_opts opts{};
  opts.iterations = a.iters;
  opts.search_radius = a.radius;
  opts.cc_area = a.cc_area;
  opts.border = a.border;
  opts.downsample = a.downsample;
  opts.knn = a.knn;
  opts.kappa = a.kappa;
  opts.bad_threshold = 0.0;    // library defaults
  opts.accuracy_radius = 0.0;
  opts.seed = a.seed;

  pbf_flow_stats stats{};
  status = pbf_flow_run(model, img1, img2, gt, &opts, &sparse, &dense, &stats);
  if (status != PBF_OK) {
    const int code = fail_from_status(status);
    cleanup();
    return code;
  }

  const std::string sparse_path = a.out_prefix + "_sparse.pbfl";
  const std::string dense_path = a.out_prefix + "_dense.pbfl";
  const std::string metrics_path = a.out_prefix + "_metrics.csv";
  if ((status = pbf_flow_write(sparse, sparse_path.c_str())) == PBF_OK)
    if ((status = pbf_flow_write(dense, dense_path.c_str())) == PBF_OK)
      status = pbf_flow_stats_csv(&stats, metrics_path.c_str());
  if (status != PBF_OK) {
    const int code = fail_from_status(status);
    cleanup();
    return code;
  }

  std::cout << "matches: raw=" << stats.raw_matches
            << " surviving=" << stats.surviving_matches
            << " seeds=" << stats.seeds_used << "\n";
  if (stats.has_metrics)
    std::cout << "dense epe=" << stats.dense_epe
              << " bad_rate=" << stats.dense_bad_rate
              << " accuracy=" << stats.dense_accuracy << "\n";

  Manifest m;
  m.command = "flow";
  m.seed = a.seed;
  m.add("model", a.model);
  m.add("img1", a.img1);
  m.add("img2", a.img2);
  m.add("gt", a.gt.empty() ? "(none)" : a.gt);
  m.add("radius", std::to_string(a.radius));
  m.add("iters", std::to_string(a.iters));
  m.add("cc-area", std::to_string(a.cc_area));
  m.add("border", std::to_string(a.border));
  m.add("downsample", std::to_string(a.downsample));
  m.add("knn", std::to_string(a.knn));
  m.add("kappa", std::to_string(a.kappa));
  m.add("out-prefix", a.out_prefix);
  m.outputs = {sparse_path, dense_path, metrics_path};
  m.write(a.out_prefix + ".manifest.txt");

  cleanup();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"descriptor-driven optical flow: synthetic benchmark, patch "
               "encoder training, and end-to-end matching"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pbf_version()));

  SynthArgs sa;
  CLI::App* synth = app.add_subcommand(
      "synth", "AUC grid on synthetic Gaussian cluster data");
  synth->add_option("--nc-list", sa.nc_list, "cluster counts")->delimiter(',');
  synth->add_option("--tau-list", sa.tau_list, "noise variances")->delimiter(',');
  synth->add_flag("--normalize", sa.normalize, "unit-normalize samples");
  synth->add_option("--variants", sa.variants,
                    "comma-separated subset of baseline,spring,centrifuge,"
                    "spring_sd,centrifuge_sd");
  synth->add_option("--reps", sa.reps, "repetitions per cell")
      ->check(CLI::PositiveNumber);
  synth->add_option("--epochs", sa.epochs)->check(CLI::PositiveNumber);
  synth->add_option("--batch", sa.batch)->check(CLI::PositiveNumber);
  synth->add_option("--margin", sa.margin, "fixed margin (default: tuned)")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--threads", sa.threads);
  synth->add_option("--seed", sa.seed);
  synth->add_option("--out-dir", sa.out_dir);

  TrainArgs ta;
  CLI::App* train = app.add_subcommand(
      "train", "train the patch encoder on image pairs with ground truth");
  train->add_option("--data", ta.data,
                    "file listing 'first.pgm second.pgm flow.pbfl' per line")
      ->required();
  train->add_option("--variant", ta.variant)
      ->check(CLI::IsMember({"spring", "centrifuge", "spring_sd",
                             "centrifuge_sd"}));
  train->add_option("--margin", ta.margin)->required()->check(CLI::PositiveNumber);
  train->add_option("--lambda", ta.lambda)
      ->check(CLI::Range(1e-9, 1.0));
  train->add_option("--epochs", ta.epochs)->check(CLI::PositiveNumber);
  train->add_option("--batch", ta.batch)->check(CLI::PositiveNumber);
  train->add_option("--patch", ta.patch)->check(CLI::PositiveNumber);
  train->add_option("--pairs", ta.pairs, "pairs sampled for the run")
      ->check(CLI::PositiveNumber);
  train->add_option("--seed", ta.seed);
  train->add_option("--out", ta.out, "checkpoint path")->required();
  train->add_option("--log", ta.log, "loss CSV (default <out>.losses.csv)");

  FlowArgs fa;
  CLI::App* flow = app.add_subcommand(
      "flow", "match an image pair and densify the surviving flow");
  flow->add_option("--model", fa.model, "encoder checkpoint")->required();
  flow->add_option("--img1", fa.img1)->required();
  flow->add_option("--img2", fa.img2)->required();
  flow->add_option("--gt", fa.gt, "optional ground-truth flow");
  flow->add_option("--radius", fa.radius)->check(CLI::PositiveNumber);
  flow->add_option("--iters", fa.iters)->check(CLI::PositiveNumber);
  flow->add_option("--cc-area", fa.cc_area)->check(CLI::NonNegativeNumber);
  flow->add_option("--border", fa.border)->check(CLI::NonNegativeNumber);
  flow->add_option("--downsample", fa.downsample)->check(CLI::IsMember({1, 2, 4}));
  flow->add_option("--knn", fa.knn)->check(CLI::PositiveNumber);
  flow->add_option("--kappa", fa.kappa)->check(CLI::NonNegativeNumber);
  flow->add_option("--seed", fa.seed);
  flow->add_option("--out-prefix", fa.out_prefix);

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (args.size() > 1) {
      std::vector<std::string> tail(args.begin() + 1, args.end());
      tail = apply_config_file(tail);
      args.assign(args.begin(), args.begin() + 1);
      args.insert(args.end(), tail.begin(), tail.end());
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (synth->parsed()) return run_synth(sa);
  if (train->parsed()) return run_train(std::move(ta));
  if (flow->parsed()) return run_flow_cmd(fa);
  return kExitUsage;
}
