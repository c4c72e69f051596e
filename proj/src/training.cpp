#include "circuitscope/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "circuitscope/extraction.hpp"
#include "circuitscope/metrics.hpp"
#include "circuitscope/parallel.hpp"

namespace circuitscope {

namespace E = engine;

void TrainConfig::validate() const {
  if (!(base_lr > 0) || !(mask_lr > 0)) throw ConfigError("learning rates must be positive");
  if (base_epochs < 0 || mask_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_every <= 0) throw ConfigError("eval_every must be positive");
  for (double l : lambdas) {
    if (!(l >= 0) || !std::isfinite(l)) throw ConfigError("lambda values must be finite and non-negative");
  }
  if (!(answer_ce_weight >= 0)) throw ConfigError("answer_ce_weight must be non-negative");
  if (!std::isfinite(init_log_alpha)) throw ConfigError("init_log_alpha must be finite");
  if (!(select_epsilon >= 0)) throw ConfigError("select_epsilon must be non-negative");
  if (!(select_metric_epsilon >= 0)) throw ConfigError("select_metric_epsilon must be non-negative");
  gate.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  nlohmann::json lambdas = nlohmann::json::object();
  for (Granularity g : kAllGranularities) lambdas[std::string(granularity_name(g))] = c.lambdas[index_of(g)];
  j = {{"lambda", lambdas},
       {"base_lr", c.base_lr},
       {"mask_lr", c.mask_lr},
       {"base_epochs", c.base_epochs},
       {"mask_epochs", c.mask_epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"gate", c.gate},
       {"init_log_alpha", c.init_log_alpha},
       {"eval_every", c.eval_every},
       {"select_epsilon", c.select_epsilon},
       {"select_metric_epsilon", c.select_metric_epsilon},
       {"base_target_metric", c.base_target_metric},
       {"answer_ce", c.answer_ce},
       {"answer_ce_weight", c.answer_ce_weight}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  static const std::set<std::string> known = {"lambda",     "base_lr",        "mask_lr",    "base_epochs",
                                              "mask_epochs", "batch_size",    "seed",       "gate",
                                              "init_log_alpha", "eval_every", "base_target_metric", "answer_ce",
                                              "answer_ce_weight", "select_epsilon", "select_metric_epsilon"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown training config key '" + key + "'");
  }
  TrainConfig c = defaults;
  try {
    if (j.contains("lambda")) {
      const auto& lj = j.at("lambda");
      if (!lj.is_object()) throw ConfigError("'lambda' must be an object keyed by granularity");
      std::set<std::string> seen;
      for (const auto& [key, value] : lj.items()) {
        c.lambdas[index_of(parse_granularity(key))] = value.get<double>();
        seen.insert(key);
      }
      if (seen.size() != kNumGranularities) throw ConfigError("'lambda' must list all six granularities");
    }
    c.base_lr = j.value("base_lr", c.base_lr);
    c.mask_lr = j.value("mask_lr", c.mask_lr);
    c.base_epochs = j.value("base_epochs", c.base_epochs);
    c.mask_epochs = j.value("mask_epochs", c.mask_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("gate")) c.gate = j.at("gate").get<GateConstants>();
    c.init_log_alpha = j.value("init_log_alpha", c.init_log_alpha);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.select_epsilon = j.value("select_epsilon", c.select_epsilon);
    c.select_metric_epsilon = j.value("select_metric_epsilon", c.select_metric_epsilon);
    c.base_target_metric = j.value("base_target_metric", c.base_target_metric);
    c.answer_ce = j.value("answer_ce", c.answer_ce);
    c.answer_ce_weight = j.value("answer_ce_weight", c.answer_ce_weight);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

void Adam::step(std::span<float> params, std::span<const double> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("Adam: parameter/gradient size mismatch");
  if (m_.empty()) {
    m_.assign(params.size(), 0.0);
    v_.assign(params.size(), 0.0);
  }
  if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter count changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] = static_cast<float>(static_cast<double>(params[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
  }
}

std::vector<std::pair<Token, double>> answer_targets(const TaskExample& ex) {
  const auto& vocab = Vocabulary::standard();
  switch (ex.task) {
    case TaskKind::GreaterThan: {
      std::vector<std::pair<Token, double>> out;
      const int n = 99 - ex.spec.y_start;
      for (int y = ex.spec.y_start + 1; y <= 99; ++y) out.emplace_back(vocab.year_token(y), 1.0 / n);
      return out;
    }
    case TaskKind::Ioi: return {{ex.spec.io, 1.0}};
    case TaskKind::GenderedPronoun: return {{ex.spec.consistent, 1.0}};
  }
  return {};
}

namespace {

template <class Real>
E::Tensor<Real> target_row(const TaskExample& ex, std::size_t vocab) {
  E::Tensor<Real> q({1, vocab});
  for (const auto& [tok, w] : answer_targets(ex)) q[static_cast<std::size_t>(tok)] += static_cast<Real>(w);
  return q;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Sum over families of lambda times the active fraction of the extracted circuit.
double weighted_active_fraction(const MaskSet& masks, const Lambdas& lambdas) {
  const auto& layout = masks.layout();
  const BinaryMask bits = enforce_hierarchy(masks.binarized(), layout);
  std::array<double, kNumGranularities> active{};
  for (std::size_t i = 0; i < bits.size(); ++i) active[index_of(layout.node(i).granularity)] += bits[i];
  double total = 0.0;
  for (Granularity g : kAllGranularities) {
    total += lambdas[index_of(g)] * active[index_of(g)] / static_cast<double>(layout.family_total(g));
  }
  return total;
}

std::array<double, kNumGranularities> live_fractions(const MaskSet& masks) {
  std::array<double, kNumGranularities> out{};
  const auto bits = masks.binarized();
  const auto& layout = masks.layout();
  for (Granularity g : kAllGranularities) {
    std::size_t on = 0;
    for (int l = 0; l < layout.config().n_layers; ++l) {
      const std::size_t off = layout.offset(l, g);
      for (std::size_t i = 0; i < layout.width(g); ++i) on += bits[off + i];
    }
    out[index_of(g)] = static_cast<double>(on) / static_cast<double>(layout.family_total(g));
  }
  return out;
}

nlohmann::json family_json(const std::array<double, kNumGranularities>& v) {
  nlohmann::json j = nlohmann::json::object();
  for (Granularity g : kAllGranularities) j[std::string(granularity_name(g))] = v[index_of(g)];
  return j;
}

}  // namespace

double model_task_score(const Model& model, const std::vector<TaskExample>& examples, int gt_margin) {
  if (examples.empty()) return 0.0;
  const WeightCache<float> cache(model);
  std::vector<double> scores(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    const auto& ex = examples[i];
    E::Tape<float> tape;
    const auto bw = bind_weights(tape, cache, false);
    const auto fwd = forward_graph(tape, bw, model.config(), ex.clean, nullptr, ex.answer_position);
    scores[i] = task_score(ex, tape.value(fwd.logits).data(), gt_margin);
  });
  return mean(scores);
}

BaseTrainResult base_train(const Model& model, const std::vector<TaskExample>& train,
                           const std::vector<TaskExample>& validation, const TrainConfig& config, const LogSink& log) {
  config.validate();
  BaseTrainResult result{model, 0, 0.0, {}};
  if (config.base_epochs == 0) {
    result.final_metric = model_task_score(model, validation);
    return result;
  }
  if (train.empty()) throw std::invalid_argument("base_train: empty training set");
  Model& current = result.model;
  const ModelConfig& mc = current.config();
  const auto V = static_cast<std::size_t>(mc.vocab_size);
  std::map<std::string, Adam> optim;
  for (const auto& [name, _] : current.weights()) optim.emplace(name, Adam(config.base_lr));

  for (int epoch = 1; epoch <= config.base_epochs; ++epoch) {
    const auto order = shuffled(train.size(), config.seed, static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, order.size() - start);
      const WeightCache<float> cache(current);
      std::vector<std::vector<E::Tensor<float>>> grads(B);
      std::vector<double> losses(B);
      std::vector<std::string> names;
      {
        E::Tape<float> probe;
        for (const auto& [name, _] : bind_weights(probe, cache, false).by_name) names.push_back(name);
      }
      parallel_for(B, [&](std::size_t b) {
        const auto& ex = train[order[start + b]];
        E::Tape<float> tape;
        const auto bw = bind_weights(tape, cache, true);
        const auto fwd = forward_graph(tape, bw, mc, ex.clean, nullptr, ex.answer_position);
        const auto logp = E::log_softmax_rows(fwd.logits);
        const auto q = tape.constant(target_row<float>(ex, V));
        const auto loss = E::scale(E::dot(q, logp), -1.0F / static_cast<float>(B));
        losses[b] = tape.value(loss)[0];
        std::map<std::size_t, std::size_t> slot;
        for (std::size_t k = 0; k < bw.by_name.size(); ++k) slot[bw.by_name[k].second.id] = k;
        grads[b].resize(bw.by_name.size());
        for (auto& pg : tape.backward(loss)) grads[b][slot.at(pg.param.id)] = std::move(pg.grad);
      });
      for (std::size_t k = 0; k < names.size(); ++k) {
        auto& w = current.mutable_weight(names[k]);
        std::vector<double> g(w.size(), 0.0);
        for (std::size_t b = 0; b < B; ++b) {
          const auto& gb = grads[b][k];
          if (gb.empty()) continue;
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb[i];
        }
        optim.at(names[k]).step(w.data(), g);
      }
      const double batch_loss = std::accumulate(losses.begin(), losses.end(), 0.0);
      if (!std::isfinite(batch_loss)) throw DivergenceError("base training loss is not finite");
      epoch_loss += batch_loss * static_cast<double>(B);
    }
    epoch_loss /= static_cast<double>(train.size());
    result.epoch_loss.push_back(epoch_loss);
    result.epochs_run = epoch;
    result.final_metric = model_task_score(current, validation);
    if (log) log({{"phase", "base"}, {"epoch", epoch}, {"loss", epoch_loss}, {"validation_metric", result.final_metric}});
    if (result.final_metric > config.base_target_metric) break;
  }
  return result;
}

MaskLoss mask_loss(std::span<const float> base_logits, std::span<const float> clean_logits, const MaskSet& masks,
                   const Lambdas& lambdas) {
  MaskLoss out;
  out.kl = kl_divergence(softmax(base_logits), softmax(clean_logits));
  const auto pen = normalized_l0(masks, lambdas);
  out.penalty = pen.total;
  out.family_l0 = pen.family_mean;
  out.total = out.kl + out.penalty;
  return out;
}

template <class Real>
std::vector<PreparedExample<Real>> prepare_examples(const WeightCache<Real>& cache,
                                                    const std::vector<TaskExample>& examples) {
  std::vector<PreparedExample<Real>> out(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    const auto& ex = examples[i];
    if (ex.clean.size() != ex.corrupt.size()) throw std::invalid_argument("clean/corrupt length mismatch");
    PreparedExample<Real> p;
    p.example = &ex;
    p.corrupt = corrupted_sites(cache, ex.corrupt);
    E::Tape<Real> tape;
    const auto bw = bind_weights(tape, cache, false);
    const auto fwd = forward_graph(tape, bw, cache.config(), ex.clean, nullptr, ex.answer_position);
    const auto& logp = tape.value(E::log_softmax_rows(fwd.logits));
    p.base_probs.resize(logp.size());
    for (std::size_t v = 0; v < logp.size(); ++v) {
      p.base_probs[v] = std::exp(logp[v]);
      p.base_neg_entropy += p.base_probs[v] * logp[v];
    }
    out[i] = std::move(p);
  });
  return out;
}

template <class Real>
ObjectiveEval<Real> mask_objective(const WeightCache<Real>& cache, const MaskSet& masks,
                                   std::span<const PreparedExample<Real>* const> batch, const TrainConfig& config,
                                   GateMode mode, std::span<const double> noise, bool with_grad) {
  if (batch.empty()) throw std::invalid_argument("mask_objective: empty batch");
  const NodeLayout& layout = masks.layout();
  const std::size_t N = layout.size();
  const std::size_t B = batch.size();
  const auto V = static_cast<std::size_t>(cache.config().vocab_size);
  const Real inv_b = Real{1} / static_cast<Real>(B);
  const bool differentiable = with_grad && mode != GateMode::Binary;

  struct Out {
    double kl = 0.0;
    double ce = 0.0;
    std::vector<double> grad;
  };
  std::vector<Out> outs(B);
  parallel_for(B, [&](std::size_t b) {
    const auto& prep = *batch[b];
    const auto& ex = *prep.example;
    E::Tape<Real> tape;
    const auto bw = bind_weights(tape, cache, false);
    const auto leaves = bind_log_alpha(tape, masks, differentiable);
    const auto gates = hard_concrete_gates(tape, leaves, layout, masks.constants(), mode, noise);
    const StreamPatch<Real> patch{&prep.corrupt, &gates};
    const auto fwd = forward_graph(tape, bw, cache.config(), ex.clean, &patch, ex.answer_position);
    const auto logp = E::log_softmax_rows(fwd.logits);
    E::Tensor<Real> pb({1, V});
    std::copy(prep.base_probs.begin(), prep.base_probs.end(), pb.data().begin());
    const auto kl = E::add_scalar(E::scale(E::dot(tape.constant(std::move(pb)), logp), Real{-1}), prep.base_neg_entropy);
    auto loss = E::scale(kl, inv_b);
    outs[b].kl = static_cast<double>(tape.value(kl)[0]);
    if (config.answer_ce) {
      // -log of the probability mass on the correct answer set.
      E::Tensor<Real> in_set({1, V});
      for (const auto& [tok, w] : answer_targets(ex)) in_set[static_cast<std::size_t>(tok)] = Real{1};
      const auto mass = E::dot(tape.constant(std::move(in_set)), E::softmax_rows(fwd.logits));
      const auto ce = E::scale(E::log(mass), Real{-1});
      outs[b].ce = static_cast<double>(tape.value(ce)[0]);
      loss = E::add(loss, E::scale(ce, static_cast<Real>(config.answer_ce_weight) * inv_b));
    }
    if (!differentiable) return;
    outs[b].grad.assign(N, 0.0);
    std::map<std::size_t, std::size_t> offset_of;
    for (std::size_t l = 0; l < leaves.size(); ++l) {
      for (Granularity g : kAllGranularities) offset_of[leaves[l][index_of(g)].id] = layout.offset(static_cast<int>(l), g);
    }
    for (const auto& pg : tape.backward(loss)) {
      const std::size_t off = offset_of.at(pg.param.id);
      for (std::size_t i = 0; i < pg.grad.size(); ++i) outs[b].grad[off + i] = static_cast<double>(pg.grad[i]);
    }
  });

  ObjectiveEval<Real> ev;
  if (differentiable) ev.grad.assign(N, 0.0);
  for (const auto& o : outs) {
    ev.kl += o.kl;
    ev.answer_ce += o.ce;
    if (differentiable) {
      for (std::size_t i = 0; i < N; ++i) ev.grad[i] += o.grad[i];
    }
  }
  ev.kl /= static_cast<double>(B);
  ev.answer_ce /= static_cast<double>(B);
  ev.penalty = normalized_l0(masks, config.lambdas);

  if (differentiable) {
    // Penalty gradient through the same primitives.
    E::Tape<Real> tape;
    const auto leaves = bind_log_alpha(tape, masks, true);
    const Real thr = static_cast<Real>(masks.constants().threshold());
    std::optional<E::Var<Real>> total;
    for (Granularity g : kAllGranularities) {
      const Real w = static_cast<Real>(config.lambdas[index_of(g)] / static_cast<double>(layout.family_total(g)));
      for (std::size_t l = 0; l < leaves.size(); ++l) {
        const auto term = E::scale(E::sum(E::sigmoid(E::add_scalar(leaves[l][index_of(g)], -thr))), w);
        total = total ? E::add(*total, term) : term;
      }
    }
    std::map<std::size_t, std::size_t> offset_of;
    for (std::size_t l = 0; l < leaves.size(); ++l) {
      for (Granularity g : kAllGranularities) offset_of[leaves[l][index_of(g)].id] = layout.offset(static_cast<int>(l), g);
    }
    for (const auto& pg : tape.backward(*total)) {
      const std::size_t off = offset_of.at(pg.param.id);
      for (std::size_t i = 0; i < pg.grad.size(); ++i) ev.grad[off + i] += static_cast<double>(pg.grad[i]);
    }
  }
  ev.total = ev.kl + ev.penalty.total + (config.answer_ce ? config.answer_ce_weight * ev.answer_ce : 0.0);
  return ev;
}

template std::vector<PreparedExample<float>> prepare_examples(const WeightCache<float>&, const std::vector<TaskExample>&);
template std::vector<PreparedExample<double>> prepare_examples(const WeightCache<double>&,
                                                               const std::vector<TaskExample>&);
template ObjectiveEval<float> mask_objective(const WeightCache<float>&, const MaskSet&,
                                             std::span<const PreparedExample<float>* const>, const TrainConfig&,
                                             GateMode, std::span<const double>, bool);
template ObjectiveEval<double> mask_objective(const WeightCache<double>&, const MaskSet&,
                                              std::span<const PreparedExample<double>* const>, const TrainConfig&,
                                              GateMode, std::span<const double>, bool);

DiscoverResult discover(const Model& model, const std::vector<TaskExample>& train,
                        const std::vector<TaskExample>& validation, const TrainConfig& config, const LogSink& log) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("discover: empty training set");
  const WeightCache<float> cache(model);
  const auto prep_train = prepare_examples(cache, train);
  const auto prep_val = prepare_examples(cache, validation);

  DiscoverResult result;
  result.masks = MaskSet(model.config(), config.gate, config.init_log_alpha);
  result.best = result.masks;
  result.best_objective = std::numeric_limits<double>::infinity();
  Adam adam(config.mask_lr);
  const std::size_t N = result.masks.size();
  double best_size = 0.0, best_kl = 0.0;

  std::vector<const PreparedExample<float>*> val_ptrs;
  for (const auto& p : prep_val) val_ptrs.push_back(&p);
  std::optional<CircuitEvaluator> val_eval;
  double base_score = 0.0;
  if (!validation.empty()) {
    val_eval.emplace(model, validation, config.gt_margin);
    base_score = val_eval->base().score;
  }

  for (int epoch = 1; epoch <= config.mask_epochs; ++epoch) {
    const auto order = shuffled(train.size(), config.seed, static_cast<std::uint64_t>(epoch));
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, order.size() - start);
      std::vector<const PreparedExample<float>*> batch(B);
      for (std::size_t b = 0; b < B; ++b) batch[b] = &prep_train[order[start + b]];
      const auto noise = step_noise(N, config.seed, result.steps);
      const auto ev = mask_objective<float>(cache, result.masks, batch, config, GateMode::Sampled, noise);
      if (!std::isfinite(ev.total)) throw DivergenceError("mask loss is not finite at step " + std::to_string(result.steps));
      adam.step(result.masks.log_alpha(), ev.grad);
      if (log) {
        log({{"phase", "discover"},
             {"step", result.steps},
             {"epoch", epoch},
             {"loss", ev.total},
             {"kl", ev.kl},
             {"penalty", ev.penalty.total},
             {"answer_ce", ev.answer_ce},
             {"live", family_json(live_fractions(result.masks))}});
      }
      rec.kl += ev.kl;
      rec.penalty += ev.penalty.total;
      ++batches;
      ++result.steps;
    }
    rec.kl /= static_cast<double>(batches);
    rec.penalty /= static_cast<double>(batches);
    rec.step = result.steps;
    rec.live_fraction = live_fractions(result.masks);
    if (!val_ptrs.empty() && (epoch % config.eval_every == 0 || epoch == config.mask_epochs)) {
      const auto val = mask_objective<float>(cache, result.masks, val_ptrs, config, GateMode::Deterministic, {}, false);
      const auto bin = val_eval->run(extract(result.masks));
      const double size = weighted_active_fraction(result.masks, config.lambdas);
      rec.validation_kl = val.kl;
      rec.validation_binary_kl = bin.kl;
      rec.validation_binary_score = bin.score;
      rec.validation_size = size;
      const bool within = bin.kl <= config.select_epsilon &&
                          base_score - bin.score <= config.select_metric_epsilon * std::abs(base_score);
      const double objective = bin.kl + size;
      bool better;
      if (within != result.best_within_tolerance) {
        better = within;
      } else if (within) {
        better = size < best_size || (size == best_size && bin.kl < best_kl);
      } else {
        better = objective < result.best_objective;
      }
      if (better || result.best_epoch == 0) {
        best_size = size;
        best_kl = bin.kl;
        result.best_objective = objective;
        result.best_within_tolerance = within;
        result.best_epoch = epoch;
        result.best = result.masks;
      }
      if (log) {
        log({{"phase", "validate"}, {"epoch", epoch}, {"kl", val.kl}, {"penalty", val.penalty.total},
             {"binary_kl", bin.kl}, {"binary_score", bin.score}, {"binary_size", size}, {"live", family_json(rec.live_fraction)}});
      }
    }
    result.trajectory.push_back(rec);
  }
  return result;
}

}  // namespace circuitscope
