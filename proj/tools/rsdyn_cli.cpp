#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsdyn/activation_store.hpp"
#include "rsdyn/cae.hpp"
#include "rsdyn/error.hpp"
#include "rsdyn/format.hpp"
#include "rsdyn/mutual_information.hpp"
#include "rsdyn/parallel.hpp"
#include "rsdyn/pca_teleport.hpp"
#include "rsdyn/phase_portrait.hpp"
#include "rsdyn/rng.hpp"
#include "rsdyn/sequence_pipeline.hpp"
#include "rsdyn/stream_statistics.hpp"
#include "rsdyn/toy_training.hpp"
#include "rsdyn/toy_transformer.hpp"

namespace fs = std::filesystem;
using namespace rsdyn;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kInput = 2, kAnalysis = 3, kUsage = 4 };

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::Format:
    case ErrorKind::InvariantViolation:
    case ErrorKind::EmptyInput:
      return kInput;
    case ErrorKind::Config:
    case ErrorKind::BadRange:
      return kUsage;
    default:
      return kAnalysis;
  }
}

std::uint64_t default_seed() {
  if (const char* env = std::getenv("RSDYN_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw Error(ErrorKind::Config, std::string("RSDYN_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

struct Manifest {
  std::string command;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
};

void write_manifest(const Manifest& m, const CLI::App& sub, const fs::path& path, double wall_seconds) {
  nlohmann::json config = nlohmann::json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help") continue;
    const auto& res = opt->results();
    if (res.empty()) {
      config[opt->get_name()] = opt->get_default_str();
    } else if (opt->get_expected_max() > 1) {
      config[opt->get_name()] = res;
    } else {
      config[opt->get_name()] = res.front();
    }
  }
  nlohmann::json j{{"command", m.command},      {"config", config},        {"inputs", m.inputs},
                   {"outputs", m.outputs},      {"seed", m.seed},          {"tool_version", kVersion},
                   {"threads", thread_count()}, {"wall_time_s", wall_seconds}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create directory " + dir.string() + ": " + ec.message());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

struct Common {
  unsigned threads = 0;
};

// ---- generate

struct GenerateOpts {
  std::string corpus;
  std::size_t synthetic = 0;
  std::string out;
  bool shuffled = false;
  std::string model;
  std::string model_out;
  int train_steps = 0;
  std::size_t l_min = 100;
  std::size_t l_max = 500;
  std::size_t max_seqs = 0;
  ModelConfig config;
};

Manifest cmd_generate(const GenerateOpts& o, std::uint64_t seed) {
  Manifest m{"generate", {}, {o.out}, seed};
  std::vector<std::string> lines;
  std::string dataset;
  if (!o.corpus.empty()) {
    lines = read_corpus(o.corpus);
    dataset = fs::path(o.corpus).filename().string();
    m.inputs.push_back(o.corpus);
  } else if (o.synthetic > 0) {
    lines = synthetic_corpus(o.synthetic, seed);
    dataset = "synthetic:" + std::to_string(o.synthetic);
  } else {
    throw Error(ErrorKind::Config, "one of --corpus or --synthetic is required");
  }

  auto kept = filter_sequences(lines, FilterSpec{o.l_min, o.l_max});
  if (o.max_seqs > 0 && kept.size() > o.max_seqs) kept.resize(o.max_seqs);
  if (kept.empty()) throw Error(ErrorKind::EmptyInput, "no sequences survive the length filter");

  ToyModel model;
  if (!o.model.empty()) {
    model = load_model(o.model);
    m.inputs.push_back(o.model);
  } else {
    ModelConfig cfg = o.config;
    cfg.seed = seed;
    model = init_model(cfg);
  }

  // Sequences longer than the context window keep their first max_seq tokens.
  const auto max_seq = static_cast<std::size_t>(model.config.max_seq);
  std::size_t truncated = 0;
  std::vector<TokenSequence> seqs;
  for (const auto& line : kept) {
    TokenSequence seq = tokenize_bytes(line);
    if (seq.tokens.size() > max_seq) {
      seq.tokens.resize(max_seq);
      ++truncated;
    }
    seqs.push_back(std::move(seq));
  }

  if (o.train_steps > 0 && o.model.empty()) {
    ToyTrainConfig tc;
    tc.steps = o.train_steps;
    tc.seed = mix_seed(seed, 1);
    const auto report = train_toy_model(model, seqs, tc);
    std::cout << "trained " << o.train_steps << " steps, loss " << report.step_loss.front() << " -> "
              << report.step_loss.back() << '\n';
  }
  if (!o.model_out.empty()) {
    ensure_parent(o.model_out);
    save_model(model, o.model_out);
    m.outputs.push_back(o.model_out);
  }

  if (o.shuffled) {
    for (std::size_t b = 0; b < seqs.size(); ++b) seqs[b] = shuffle_tokens(seqs[b], mix_seed(seed, 1000 + b));
  }

  const RSTensor rs = generate_dataset(model, seqs);
  RsdMetadata meta;
  meta.model_name = o.model.empty() ? "toy-transformer" : fs::path(o.model).filename().string();
  meta.dataset_name = dataset;
  meta.seed = static_cast<std::int64_t>(seed);
  meta.params["condition"] = o.shuffled ? "shuffled" : "normal";
  meta.params["l_min"] = std::to_string(o.l_min);
  meta.params["l_max"] = std::to_string(o.l_max);
  meta.params["truncated_sequences"] = std::to_string(truncated);
  meta.params["train_steps"] = std::to_string(o.model.empty() ? o.train_steps : 0);
  meta.params["n_layers"] = std::to_string(model.config.n_layers);
  meta.params["d_model"] = std::to_string(model.config.d_model);
  ensure_parent(o.out);
  write_rsd(rs, meta, o.out);
  std::cout << "wrote " << o.out << ": B=" << rs.samples() << " S=" << rs.sublayers() << " D=" << rs.units()
            << " (" << truncated << " truncated to " << max_seq << " tokens)\n";
  return m;
}

// ---- analyze

struct AnalyzeOpts {
  std::string input;
  std::string which;
  std::string out;
  std::size_t bins = 20;
  bool all_pairs = false;
  std::size_t mi_grid = kDefaultMiGrid;
  std::vector<std::size_t> units;
  std::size_t shuffles = 1000;
  std::size_t n_components = 0;
};

Manifest cmd_analyze(const AnalyzeOpts& o, std::uint64_t seed) {
  Manifest m{"analyze " + o.which, {o.input}, {}, seed};
  const auto [rs, meta] = read_rsd(o.input);
  const fs::path dir(o.out);
  ensure_dir(dir);
  auto out = [&](const std::string& name) {
    m.outputs.push_back((dir / name).string());
    return dir / name;
  };

  if (o.which == "stats") {
    const auto means = mean_activations(rs);
    write_means_csv(means, sort_units_by_last_layer(means), out("means.csv"));
    write_correlations_csv(layer_pair_correlations(rs), out("correlations.csv"));
    write_histogram_csv(
        correlation_histogram(rs, o.all_pairs ? HistogramMode::AllPairs : HistogramMode::Consecutive, o.bins),
        out("histogram.csv"));
    write_series_csv(cosine_similarity_series(rs), out("cosine.csv"));
    write_series_csv(velocity_series(rs), out("velocity.csv"));
  } else if (o.which == "mi") {
    std::optional<std::vector<std::size_t>> subset;
    if (!o.units.empty()) subset = o.units;
    const auto profile = mi_layer_profile(rs, subset, o.mi_grid);
    write_mi_csv(profile, out("mi.csv"));
  } else if (o.which == "phase") {
    const auto table = rotation_table(rs, o.shuffles, seed);
    write_rotations_csv(table, out("rotations.csv"));
    std::size_t above = 0, defined = 0;
    for (const auto& t : table) {
      if (t.null_samples.empty()) continue;
      ++defined;
      if (t.rotations > quantile(t.null_samples, 0.95)) ++above;
    }
    std::cout << above << " of " << defined << " units exceed their shuffle-null 95th percentile\n";
  } else if (o.which == "pca") {
    const auto pca = fit_pca(rs);
    const std::size_t n = o.n_components == 0 ? std::min<std::size_t>(100, pca.dim()) : o.n_components;
    write_ev_cumulative_csv(pca, out("ev_cumulative.csv"));
    const auto curves = explained_variance_curves(pca, rs, n);
    write_ev_sublayer_csv(curves, rs, out("ev_sublayer.csv"));
    const Eigen::MatrixXd z = project(pca, flatten_rows(rs), std::min<std::size_t>(2, pca.dim()));
    std::ofstream f(out("projection.csv"), std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::Io, "cannot write projection.csv");
    f << "sample,sublayer,pc1,pc2\n";
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      f << static_cast<std::size_t>(r) / rs.sublayers() << ',' << static_cast<std::size_t>(r) % rs.sublayers() << ','
        << fmt17(z(r, 0)) << ',' << (z.cols() > 1 ? fmt17(z(r, 1)) : std::string("0")) << '\n';
    }
  } else {
    throw Error(ErrorKind::Config, "unknown analysis '" + o.which + "'");
  }
  std::cout << "wrote " << m.outputs.size() << " artifact(s) to " << o.out << '\n';
  return m;
}

// ---- cae

struct CaeOpts {
  std::string train;
  std::string test;
  std::string out;
  CaeConfig config;
};

Manifest cmd_cae(CaeOpts o, std::uint64_t seed) {
  Manifest m{"cae", {o.train, o.test}, {}, seed};
  const auto [train_rs, train_meta] = read_rsd(o.train);
  const auto [test_rs, test_meta] = read_rsd(o.test);
  if (train_rs.units() != test_rs.units()) throw Error(ErrorKind::DimensionMismatch, "train and test widths differ");
  const fs::path dir(o.out);
  ensure_dir(dir);

  o.config.d_in = train_rs.units();
  o.config.seed = seed;
  const Eigen::MatrixXd test_rows = flatten_rows(test_rs);
  auto [model, history] = train_cae(o.config, flatten_rows(train_rs), test_rows);
  const double test_ev = explained_variance(model, test_rows);

  write_bundle(to_bundle(model), dir / "cae.ckpt");
  write_history_csv(history, dir / "history.csv");
  write_cae_trajectory_csv(trajectory_stats(model, test_rs), test_rs, dir / "trajectory.csv");
  {
    std::ofstream f(dir / "summary.csv", std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::Io, "cannot write summary.csv");
    f << "epochs,best_epoch,best_val_loss,test_loss,test_ev,stopped_early\n"
      << history.epochs() << ',' << history.best_epoch << ',' << fmt17(history.best_val_loss) << ','
      << fmt17(history.test_loss.value_or(std::nan(""))) << ',' << fmt17(test_ev) << ','
      << (history.stopped_early ? 1 : 0) << '\n';
  }
  for (const char* name : {"cae.ckpt", "history.csv", "trajectory.csv", "summary.csv"}) {
    m.outputs.push_back((dir / name).string());
  }
  std::cout << "epochs " << history.epochs() << ", best epoch " << history.best_epoch << ", test EV " << fmt17(test_ev)
            << '\n';
  return m;
}

// ---- teleport

struct TeleportOpts {
  std::string model;
  std::string pca_input;
  std::string prompt = kControlPrompt;
  std::vector<int> layers;
  std::size_t grid_n = 10;
  std::vector<double> range_x;
  std::vector<double> range_y;
  std::string mse_space = "pca2d";
  std::string out;
};

Manifest cmd_teleport(const TeleportOpts& o, std::uint64_t seed) {
  Manifest m{"teleport", {o.model, o.pca_input}, {}, seed};
  const ToyModel model = load_model(o.model);
  const auto [rs, meta] = read_rsd(o.pca_input);
  const PcaModel pca = fit_pca(rs);
  TeleportGrid grid = default_grid(pca, rs, o.grid_n);
  if (!o.range_x.empty() || !o.range_y.empty()) {
    const auto rx = o.range_x.empty() ? grid.range_x : std::pair{o.range_x[0], o.range_x[1]};
    const auto ry = o.range_y.empty() ? grid.range_y : std::pair{o.range_y[0], o.range_y[1]};
    grid = make_grid(o.grid_n, rx, ry);
  }
  const MseSpace space = o.mse_space == "full" ? MseSpace::Full : MseSpace::Pca2d;
  const auto layers = o.layers.empty() ? default_teleport_layers(model.config.n_layers) : o.layers;

  TokenSequence prompt = tokenize_bytes(o.prompt);
  if (prompt.tokens.size() > static_cast<std::size_t>(model.config.max_seq)) {
    prompt.tokens.resize(static_cast<std::size_t>(model.config.max_seq));
  }
  const fs::path dir(o.out);
  ensure_dir(dir);
  for (const int layer : layers) {
    const auto result = teleport_experiment(model, pca, prompt, layer, grid, space);
    const fs::path path = dir / ("teleport_layer" + std::to_string(layer) + ".json");
    write_teleport_json(result, path);
    m.outputs.push_back(path.string());
    std::cout << "layer " << layer << ": " << result.runs.size() << " runs -> " << path.string() << '\n';
  }
  return m;
}

// ---- inspect

int cmd_inspect(const std::string& input) {
  const auto bytes = read_file_bytes(input);
  RSTensor rs;
  RsdMetadata meta;
  try {
    std::tie(rs, meta) = decode_rsd(bytes);
  } catch (const Error& e) {
    // Payload problems found while decoding are still an inspection result.
    if (e.kind() != ErrorKind::InvariantViolation) throw;
    std::cout << "violation: " << e.what() << '\n';
    return kInput;
  }
  std::cout << "format RSD1 version 1\n"
            << "B=" << rs.samples() << " S=" << rs.sublayers() << " D=" << rs.units() << " L=" << rs.layers() << '\n'
            << "model " << meta.model_name << "\n"
            << "dataset " << meta.dataset_name << "\n"
            << "token_position " << meta.token_position << "\n"
            << "seed " << (meta.seed ? std::to_string(*meta.seed) : std::string("none")) << '\n';
  for (const auto& [k, v] : meta.params) std::cout << "param " << k << "=" << v << '\n';
  auto report = validate(rs);
  const auto meta_report = validate(meta);
  report.violations.insert(report.violations.end(), meta_report.violations.begin(), meta_report.violations.end());
  if (!report.ok()) {
    for (const auto& v : report.violations) std::cout << "violation: " << v << '\n';
    return kInput;
  }
  std::cout << "valid\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual stream dynamics toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "Key/value file with option defaults (INI, one section per subcommand)");
  app.set_version_flag("--version", kVersion);
  Common common;
  app.add_option("--threads", common.threads, "Worker threads (0 = all cores)")->capture_default_str();

  std::uint64_t seed_flag = 0;
  auto add_seed = [&](CLI::App* sub) { return sub->add_option("--seed", seed_flag, "Seed (default: RSDYN_SEED or 0)"); };

  GenerateOpts gen;
  auto* g = app.add_subcommand("generate", "Capture last-token residual activations of the toy model");
  auto* corpus_opt = g->add_option("--corpus", gen.corpus, "Text corpus, one sequence per line");
  g->add_option("--synthetic", gen.synthetic, "Use N synthetic lines instead of a corpus")->excludes(corpus_opt);
  g->add_option("--out", gen.out, "Output RSD path")->required();
  g->add_flag("--shuffled", gen.shuffled, "Shuffle tokens after BOS");
  g->add_option("--model", gen.model, "Load a model checkpoint instead of initializing one");
  g->add_option("--model-out", gen.model_out, "Save the model checkpoint");
  g->add_option("--train-steps", gen.train_steps, "Adam steps of next-token training before capture")->capture_default_str();
  g->add_option("--l-min", gen.l_min, "Exclusive minimum length in characters")->capture_default_str();
  g->add_option("--l-max", gen.l_max, "Exclusive maximum length in characters")->capture_default_str();
  g->add_option("--max-seqs", gen.max_seqs, "Keep at most N sequences (0 = all)")->capture_default_str();
  g->add_option("--n-layers", gen.config.n_layers)->capture_default_str();
  g->add_option("--d-model", gen.config.d_model)->capture_default_str();
  g->add_option("--n-heads", gen.config.n_heads)->capture_default_str();
  g->add_option("--d-mlp", gen.config.d_mlp)->capture_default_str();
  g->add_option("--max-seq", gen.config.max_seq)->capture_default_str();
  auto* g_seed = add_seed(g);

  AnalyzeOpts an;
  auto* a = app.add_subcommand("analyze", "Compute statistics of an RSD file");
  a->add_option("--input", an.input, "RSD file")->required();
  a->add_option("--which", an.which, "stats | mi | phase | pca")
      ->required()
      ->check(CLI::IsMember({"stats", "mi", "phase", "pca"}));
  a->add_option("--out", an.out, "Output directory")->required();
  a->add_option("--bins", an.bins, "Histogram bins")->capture_default_str();
  a->add_flag("--all-pairs", an.all_pairs, "Histogram over all sublayer pairs");
  a->add_option("--mi-grid", an.mi_grid, "KDE grid points per axis")->capture_default_str();
  a->add_option("--units", an.units, "Restrict MI to these units");
  a->add_option("--shuffles", an.shuffles, "Shuffle-null permutations per unit")->capture_default_str();
  a->add_option("--n-components", an.n_components, "Components for per-sublayer EV (0 = min(100, D))");
  auto* a_seed = add_seed(a);

  CaeOpts ca;
  auto* c = app.add_subcommand("cae", "Train the compressing autoencoder");
  c->add_option("--train", ca.train, "Training RSD")->required();
  c->add_option("--test", ca.test, "Test RSD")->required();
  c->add_option("--out", ca.out, "Output directory")->required();
  c->add_option("--d-bottle", ca.config.d_bottle)->capture_default_str();
  c->add_option("--k-layers", ca.config.k_layers)->capture_default_str();
  c->add_option("--lr", ca.config.lr)->capture_default_str();
  c->add_option("--max-epochs", ca.config.max_epochs)->capture_default_str();
  c->add_option("--patience", ca.config.patience)->capture_default_str();
  c->add_option("--batch-size", ca.config.batch_size)->capture_default_str();
  auto* c_seed = add_seed(c);

  TeleportOpts tp;
  auto* t = app.add_subcommand("teleport", "PCA-grid activation teleportation");
  t->add_option("--model", tp.model, "Model checkpoint")->required();
  t->add_option("--pca-input", tp.pca_input, "RSD used to fit the PCA")->required();
  t->add_option("--prompt", tp.prompt, "Prompt text")->capture_default_str();
  t->add_option("--layers", tp.layers, "Injection layers (default: scaled 0,7,15,23,31)");
  t->add_option("--grid-n", tp.grid_n, "Grid points per axis")->capture_default_str();
  t->add_option("--range-x", tp.range_x, "PC1 range as two numbers")->expected(2);
  t->add_option("--range-y", tp.range_y, "PC2 range as two numbers")->expected(2);
  t->add_option("--mse-space", tp.mse_space, "pca2d | full")->check(CLI::IsMember({"pca2d", "full"}))->capture_default_str();
  t->add_option("--out", tp.out, "Output directory")->required();
  auto* t_seed = add_seed(t);

  std::string inspect_input;
  auto* in = app.add_subcommand("inspect", "Print and validate an RSD header");
  in->add_option("--input", inspect_input, "RSD file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    set_thread_count(common.threads);
    const auto start = std::chrono::steady_clock::now();
    auto seed_for = [&](CLI::Option* opt) { return opt->count() > 0 ? seed_flag : default_seed(); };

    Manifest manifest;
    CLI::App* sub = nullptr;
    fs::path manifest_path;
    if (g->parsed()) {
      manifest = cmd_generate(gen, seed_for(g_seed));
      sub = g;
      manifest_path = gen.out + ".manifest.json";
    } else if (a->parsed()) {
      manifest = cmd_analyze(an, seed_for(a_seed));
      sub = a;
      manifest_path = fs::path(an.out) / "run_manifest.json";
    } else if (c->parsed()) {
      manifest = cmd_cae(ca, seed_for(c_seed));
      sub = c;
      manifest_path = fs::path(ca.out) / "run_manifest.json";
    } else if (t->parsed()) {
      manifest = cmd_teleport(tp, seed_for(t_seed));
      sub = t;
      manifest_path = fs::path(tp.out) / "run_manifest.json";
    } else {
      return cmd_inspect(inspect_input);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(manifest, *sub, manifest_path, wall);
    return kOk;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kAnalysis;
  }
}
