#include "circuitscope/run_config.hpp"

#include <fstream>
#include <set>

namespace circuitscope {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"task", "seed", "model", "data", "base", "discover", "oracle"}, "config");
  RunConfig c;
  try {
    if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
    read(j, "seed", c.seed);

    const auto vocab = static_cast<int>(Vocabulary::standard().size());
    if (j.contains("model")) {
      const auto& m = j.at("model");
      reject_unknown(m, {"n_layers", "n_heads", "d_model", "d_mlp", "vocab_size", "max_seq_len"}, "model");
      read(m, "n_layers", c.model.n_layers);
      read(m, "n_heads", c.model.n_heads);
      read(m, "d_model", c.model.d_model);
      read(m, "d_mlp", c.model.d_mlp);
      read(m, "vocab_size", c.model.vocab_size);
      read(m, "max_seq_len", c.model.max_seq_len);
    }
    if (c.model.vocab_size == 0) c.model.vocab_size = vocab;
    if (c.model.vocab_size != vocab) {
      throw ConfigError("model.vocab_size must be " + std::to_string(vocab) + " (the task vocabulary)");
    }
    c.model.validate();

    c.data.sizes = default_split_sizes(c.task);
    if (c.task == TaskKind::Ioi) c.train.mask_epochs = 500;
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, {"base", "train", "validation", "test", "ioi_corruption", "gt_margin"}, "data");
      read(d, "base", c.data.sizes.base);
      read(d, "train", c.data.sizes.train);
      read(d, "validation", c.data.sizes.validation);
      read(d, "test", c.data.sizes.test);
      if (d.contains("ioi_corruption")) c.data.ioi_corruption = parse_ioi_corruption(d.at("ioi_corruption").get<std::string>());
      read(d, "gt_margin", c.data.gt_margin);
      if (c.data.gt_margin < 0) throw ConfigError("data.gt_margin must be non-negative");
    }
    if (c.data.sizes.train == 0 || c.data.sizes.test == 0) throw ConfigError("data.train and data.test must be positive");

    if (j.contains("base")) {
      const auto& b = j.at("base");
      reject_unknown(b, {"epochs", "lr", "batch_size", "target_metric"}, "base");
      read(b, "epochs", c.train.base_epochs);
      read(b, "lr", c.train.base_lr);
      read(b, "target_metric", c.train.base_target_metric);
      read(b, "batch_size", c.train.batch_size);
    }
    if (j.contains("discover")) {
      const auto& d = j.at("discover");
      reject_unknown(d, {"epochs", "lr", "batch_size", "lambda", "gate", "init_log_alpha", "eval_every", "answer_ce",
                         "answer_ce_weight", "select_epsilon", "select_metric_epsilon"},
                     "discover");
      nlohmann::json t = nlohmann::json::object();
      for (const auto& [key, value] : d.items()) {
        if (key == "epochs") {
          t["mask_epochs"] = value;
        } else if (key == "lr") {
          t["mask_lr"] = value;
        } else if (key != "batch_size") {
          t[key] = value;
        }
      }
      c.train = train_config_from_json(t, c.train);
      if (d.contains("batch_size")) c.train.batch_size = d.at("batch_size").get<std::size_t>();
    }
    c.train.seed = c.seed;
    c.train.gt_margin = c.data.gt_margin;
    c.train.validate();

    if (j.contains("oracle")) {
      const auto& o = j.at("oracle");
      reject_unknown(o, {"epsilon", "greedy"}, "oracle");
      read(o, "epsilon", c.oracle.epsilon);
      read(o, "greedy", c.oracle.greedy);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json lambdas = nlohmann::json::object();
  for (Granularity g : kAllGranularities) lambdas[std::string(granularity_name(g))] = c.train.lambdas[index_of(g)];
  return {{"task", std::string(task_name(c.task))},
          {"seed", c.seed},
          {"model", c.model},
          {"data",
           {{"base", c.data.sizes.base},
            {"train", c.data.sizes.train},
            {"validation", c.data.sizes.validation},
            {"test", c.data.sizes.test},
            {"ioi_corruption", c.data.ioi_corruption == IoiCorruption::Abc ? "abc" : "xyz"},
            {"gt_margin", c.data.gt_margin}}},
          {"base",
           {{"epochs", c.train.base_epochs},
            {"lr", c.train.base_lr},
            {"batch_size", c.train.batch_size},
            {"target_metric", c.train.base_target_metric}}},
          {"discover",
           {{"epochs", c.train.mask_epochs},
            {"lr", c.train.mask_lr},
            {"batch_size", c.train.batch_size},
            {"lambda", lambdas},
            {"gate", c.train.gate},
            {"init_log_alpha", c.train.init_log_alpha},
            {"eval_every", c.train.eval_every},
            {"select_epsilon", c.train.select_epsilon},
            {"select_metric_epsilon", c.train.select_metric_epsilon},
            {"answer_ce", c.train.answer_ce},
            {"answer_ce_weight", c.train.answer_ce_weight}}},
          {"oracle", {{"epsilon", c.oracle.epsilon}, {"greedy", c.oracle.greedy}}}};
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace circuitscope
