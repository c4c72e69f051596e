#include "circuitscope/cli.hpp"

#include <openssl/sha.h>

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "circuitscope/extraction.hpp"
#include "circuitscope/oracle.hpp"
#include "circuitscope/run_config.hpp"
#include "circuitscope/training.hpp"

namespace circuitscope {

namespace fs = std::filesystem;

std::string git_blob_hash(const std::string& bytes) {
  const std::string blob = "blob " + std::to_string(bytes.size()) + '\0' + bytes;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : digest) {
    out.push_back(hex[c >> 4]);
    out.push_back(hex[c & 15]);
  }
  return out;
}

namespace {

// Missing or unreadable inputs.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw InputError(std::string("--") + what + " is required");
  if (!fs::is_regular_file(path)) throw InputError(std::string(what) + " file '" + path + "' does not exist");
}

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write '" + path.string() + "'");
  }
  void operator()(const nlohmann::json& j) { out_ << j.dump() << '\n'; }

 private:
  std::ofstream out_;
};

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string task;
  std::string format = "markdown";
  std::string model_path;
  std::string masks_path;
  std::string circuit_path;
};

struct Context {
  std::string command;
  Options opt;
  RunConfig config;
  nlohmann::json inputs = nlohmann::json::object();
  std::string started;
  std::ostream* out = nullptr;

  void hash_input(const std::string& role, const std::string& path) {
    inputs[role] = {{"path", path}, {"sha1", git_blob_hash(read_file(path))}};
  }
  fs::path out_path(const std::string& name) const { return fs::path(opt.out_dir) / name; }
};

RunConfig resolve_config(const Options& opt) {
  nlohmann::json j = nlohmann::json::object();
  if (!opt.config_path.empty()) {
    if (!fs::is_regular_file(opt.config_path)) throw InputError("config file '" + opt.config_path + "' does not exist");
    std::ifstream in(opt.config_path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + opt.config_path + "' is not valid JSON: " + e.what());
    }
  }
  if (!opt.task.empty()) j["task"] = opt.task;
  if (opt.seed) j["seed"] = *opt.seed;
  return run_config_from_json(j);
}

void write_manifest(const Context& ctx, const nlohmann::json& outputs) {
  const nlohmann::json manifest = {{"command", ctx.command},
                                   {"config_path", ctx.opt.config_path},
                                   {"config", run_config_to_json(ctx.config)},
                                   {"seed", ctx.config.seed},
                                   {"inputs", ctx.inputs},
                                   {"outputs", outputs},
                                   {"output_dir", ctx.opt.out_dir},
                                   {"tool_version", std::string(kToolVersion)},
                                   {"started_at", ctx.started},
                                   {"finished_at", utc_now()}};
  write_file(ctx.out_path("manifest.json"), manifest.dump(2) + "\n");
}

nlohmann::json output_hashes(const Context& ctx, const std::vector<std::string>& names) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& n : names) j[n] = git_blob_hash(read_file(ctx.out_path(n).string()));
  return j;
}

TaskSplits splits_for(const RunConfig& c) { return make_splits(c.task, c.data.sizes, c.seed, c.data.ioi_corruption); }

Model load_checked_model(Context& ctx) {
  require_file(ctx.opt.model_path, "model");
  ctx.hash_input("model", ctx.opt.model_path);
  Model model = load_model(ctx.opt.model_path);
  if (model.config() != ctx.config.model) {
    throw ConfigError("model checkpoint architecture does not match the config's model section");
  }
  return model;
}

MaskSet load_checked_masks(Context& ctx, const Model& model) {
  require_file(ctx.opt.masks_path, "masks");
  ctx.hash_input("masks", ctx.opt.masks_path);
  MaskSet masks = load_masks(ctx.opt.masks_path);
  if (masks.layout().config() != model.config()) throw ConfigError("mask checkpoint does not match the model");
  return masks;
}

Model train_base_model(Context& ctx, const TaskSplits& splits) {
  JsonlLog log(ctx.out_path("base_log.jsonl"));
  const Model init = Model::random(ctx.config.model, ctx.config.seed);
  auto result = base_train(init, splits.base, splits.validation, ctx.config.train, std::ref(log));
  save_model(ctx.out_path("model.ckpt").string(), result.model);
  *ctx.out << "base model: " << result.epochs_run << " epochs, validation " << task_name(ctx.config.task)
           << " score " << result.final_metric << '\n';
  return std::move(result.model);
}

int cmd_train_base(Context& ctx) {
  const auto splits = splits_for(ctx.config);
  train_base_model(ctx, splits);
  write_manifest(ctx, output_hashes(ctx, {"model.ckpt", "base_log.jsonl"}));
  return kExitOk;
}

int cmd_discover(Context& ctx) {
  const auto splits = splits_for(ctx.config);
  std::vector<std::string> outputs;
  Model model = ctx.opt.model_path.empty() ? train_base_model(ctx, splits) : load_checked_model(ctx);
  if (ctx.opt.model_path.empty()) outputs = {"model.ckpt", "base_log.jsonl"};
  JsonlLog log(ctx.out_path("train_log.jsonl"));
  const auto result = discover(model, splits.train, splits.validation, ctx.config.train, std::ref(log));
  save_masks(ctx.out_path("masks.ckpt").string(), result.best);
  const auto bits = extract(result.best);
  const CircuitSize size = circuit_size(bits, model.config());
  *ctx.out << "discover: " << result.steps << " steps, kept epoch " << result.best_epoch
           << (result.best_within_tolerance ? " (validation KL and score within tolerance)" : " (no snapshot within tolerance)")
           << '\n';
  for (Granularity g : kAllGranularities) {
    const auto i = index_of(g);
    *ctx.out << "  " << granularity_name(g) << ": " << size.active[i] << '/' << size.total[i] << " active\n";
  }
  outputs.push_back("masks.ckpt");
  outputs.push_back("train_log.jsonl");
  write_manifest(ctx, output_hashes(ctx, outputs));
  return kExitOk;
}

nlohmann::json report_config(const Context& ctx) { return run_config_to_json(ctx.config); }

int cmd_extract(Context& ctx) {
  const Model model = load_checked_model(ctx);
  const MaskSet masks = load_checked_masks(ctx, model);
  const auto splits = splits_for(ctx.config);
  const auto bits = extract(masks);
  const auto report =
      make_report(model, bits, splits.test, ctx.config.task, report_config(ctx), ctx.config.seed, ctx.config.data.gt_margin);
  write_file(ctx.out_path("circuit.json"), render_report(report, ReportFormat::Json));
  write_file(ctx.out_path("circuit.md"), render_report(report, ReportFormat::Markdown));
  write_file(ctx.out_path("circuit.csv"), render_report(report, ReportFormat::Csv));
  *ctx.out << "circuit KL " << report.circuit.kl_divergence << ", " << report.circuit.edges.active << '/'
           << report.circuit.edges.total << " edges\n";
  write_manifest(ctx, output_hashes(ctx, {"circuit.json", "circuit.md", "circuit.csv"}));
  return kExitOk;
}

CircuitReport load_report(Context& ctx) {
  require_file(ctx.opt.circuit_path, "circuit");
  ctx.hash_input("circuit", ctx.opt.circuit_path);
  try {
    return nlohmann::json::parse(read_file(ctx.opt.circuit_path)).get<CircuitReport>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("circuit file '" + ctx.opt.circuit_path + "' is malformed: " + e.what());
  }
}

int cmd_evaluate(Context& ctx) {
  const Model model = load_checked_model(ctx);
  BinaryMask bits = full_circuit(model.config());
  if (!ctx.opt.circuit_path.empty()) {
    const auto report = load_report(ctx);
    if (report.model_config != model.config()) throw ConfigError("circuit does not match the model");
    bits = report.bits;
  } else if (!ctx.opt.masks_path.empty()) {
    bits = extract(load_checked_masks(ctx, model));
  }
  const auto splits = splits_for(ctx.config);
  const nlohmann::json metrics = {
      {"task", std::string(task_name(ctx.config.task))},
      {"base", evaluate_base(model, splits.test, ctx.config.data.gt_margin)},
      {"circuit", evaluate_circuit(model, bits, splits.test, ctx.config.data.gt_margin)}};
  write_file(ctx.out_path("metrics.json"), metrics.dump(2) + "\n");
  *ctx.out << "circuit KL " << metrics["circuit"]["kl_divergence"].get<double>() << '\n';
  write_manifest(ctx, output_hashes(ctx, {"metrics.json"}));
  return kExitOk;
}

int cmd_oracle(Context& ctx) {
  const Model model = load_checked_model(ctx);
  const auto splits = splits_for(ctx.config);
  const auto nodes = coarse_nodes(model.config());
  nlohmann::json j = {{"exhaustive", exhaustive_search(model, splits.test, nodes, ctx.config.oracle.epsilon)}};
  if (ctx.config.oracle.greedy) j["greedy"] = greedy_ablation(model, splits.test, nodes, ctx.config.oracle.epsilon);
  write_file(ctx.out_path("oracle.json"), j.dump(2) + "\n");
  *ctx.out << "oracle: minimal size " << j["exhaustive"]["minimal_size"].get<std::size_t>() << " of " << nodes.size()
           << " coarse nodes" << (j["exhaustive"]["feasible"].get<bool>() ? "" : " (infeasible)") << '\n';
  write_manifest(ctx, output_hashes(ctx, {"oracle.json"}));
  return kExitOk;
}

int cmd_report(Context& ctx) {
  const auto report = load_report(ctx);
  ReportFormat format;
  try {
    format = parse_report_format(ctx.opt.format);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const std::string text = render_report(report, format);
  if (ctx.opt.out_dir.empty()) {
    *ctx.out << text;
    return kExitOk;
  }
  const std::string name = format == ReportFormat::Json ? "report.json"
                           : format == ReportFormat::Csv ? "report.csv"
                                                         : "report.md";
  write_file(ctx.out_path(name), text);
  write_manifest(ctx, output_hashes(ctx, {name}));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-granularity circuit discovery on a toy transformer", "circuitscope"};
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", opt.config_path, "JSON run config");
    sub->add_option("--seed", seed, "Seed overriding the config");
    auto* o = sub->add_option("--out", opt.out_dir, "Output directory");
    if (needs_out) o->required();
    sub->add_option("--task", opt.task, "Task overriding the config")->check(CLI::IsMember({"gt", "ioi", "gp"}));
  };
  auto* train = app.add_subcommand("train-base", "Train the toy model on the task's base split");
  add_common(train, true);
  auto* disc = app.add_subcommand("discover", "Train masks and write the best mask checkpoint");
  add_common(disc, true);
  disc->add_option("--model", opt.model_path, "Model checkpoint (trained first when omitted)");
  auto* ext = app.add_subcommand("extract", "Binarize masks and write circuit files");
  add_common(ext, true);
  ext->add_option("--model", opt.model_path, "Model checkpoint")->required();
  ext->add_option("--masks", opt.masks_path, "Mask checkpoint")->required();
  auto* eval = app.add_subcommand("evaluate", "Score a circuit against the base model on the test split");
  add_common(eval, true);
  eval->add_option("--model", opt.model_path, "Model checkpoint")->required();
  auto* src = eval->add_option_group("circuit source");
  src->add_option("--circuit", opt.circuit_path, "Circuit JSON from extract");
  src->add_option("--masks", opt.masks_path, "Mask checkpoint");
  src->require_option(0, 1);
  auto* orc = app.add_subcommand("oracle", "Exhaustive and greedy coarse-node search");
  add_common(orc, true);
  orc->add_option("--model", opt.model_path, "Model checkpoint")->required();
  auto* rep = app.add_subcommand("report", "Render a circuit JSON as markdown, CSV or JSON");
  add_common(rep, false);
  rep->add_option("--circuit", opt.circuit_path, "Circuit JSON from extract")->required();
  rep->add_option("--format", opt.format, "json, markdown or csv");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfigError;
  }

  Context ctx;
  ctx.command = app.get_subcommands().front()->get_name();
  for (const auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) opt.seed = seed;
  }
  ctx.opt = opt;
  ctx.out = &out;
  ctx.started = utc_now();
  try {
    ctx.config = resolve_config(opt);
    if (!opt.config_path.empty()) ctx.hash_input("config", opt.config_path);
    if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);
    if (ctx.command == "train-base") return cmd_train_base(ctx);
    if (ctx.command == "discover") return cmd_discover(ctx);
    if (ctx.command == "extract") return cmd_extract(ctx);
    if (ctx.command == "evaluate") return cmd_evaluate(ctx);
    if (ctx.command == "oracle") return cmd_oracle(ctx);
    if (ctx.command == "report") return cmd_report(ctx);
    err << "error: unknown command\n";
    return kExitConfigError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const OracleError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitRuntimeError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntimeError;
  }
}

}  // namespace circuitscope
