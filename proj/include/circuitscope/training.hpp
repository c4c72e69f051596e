#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "circuitscope/gates.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/tasks.hpp"
#include "circuitscope/twostream.hpp"

namespace circuitscope {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Lambdas lambdas = default_lambdas();
  double base_lr = 3e-4;
  double mask_lr = 0.05;
  int base_epochs = 40;
  int mask_epochs = 200;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  GateConstants gate;
  float init_log_alpha = 2.0F;
  int eval_every = 1;               // mask epochs between validation passes
  double select_epsilon = 0.1;      // validation KL tolerance of the kept snapshot
  double select_metric_epsilon = 0.05;  // tolerated relative task-score drop of the kept snapshot
  int gt_margin = 0;                // GT score margin used when scoring snapshots
  double base_target_metric = 0.9;  // base training stops once validation exceeds this
  bool answer_ce = false;           // extra -log P(correct answer set) term in the mask loss
  double answer_ce_weight = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Starts from `defaults`; unknown keys are an error.
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults = {});

// Adam with bias correction; one moment pair per trainable scalar.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<float> params, std::span<const double> grads);
  std::uint64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

// Answer-position target distribution for base training (and the optional
// answer cross-entropy term): uniform over valid years for GT, one-hot
// otherwise.
std::vector<std::pair<Token, double>> answer_targets(const TaskExample& ex);

struct BaseTrainResult {
  Model model;
  int epochs_run = 0;
  double final_metric = 0.0;
  std::vector<double> epoch_loss;
};

using LogSink = std::function<void(const nlohmann::json&)>;

BaseTrainResult base_train(const Model& model, const std::vector<TaskExample>& train,
                           const std::vector<TaskExample>& validation, const TrainConfig& config,
                           const LogSink& log = {});

// Mean task score of a model's answer-position logits over examples.
double model_task_score(const Model& model, const std::vector<TaskExample>& examples, int gt_margin = 0);

struct MaskLoss {
  double total = 0.0;
  double kl = 0.0;
  double penalty = 0.0;
  std::array<double, kNumGranularities> family_l0{};
};

// KL(base || clean) at the answer position plus the normalized L0 penalty.
MaskLoss mask_loss(std::span<const float> base_logits, std::span<const float> clean_logits, const MaskSet& masks,
                   const Lambdas& lambdas);

// Corrupted sites and base distribution of one example, fixed for a run.
template <class Real>
struct PreparedExample {
  const TaskExample* example = nullptr;
  SiteValues<Real> corrupt;
  std::vector<Real> base_probs;
  Real base_neg_entropy{0};  // sum p log p
};

template <class Real>
std::vector<PreparedExample<Real>> prepare_examples(const WeightCache<Real>& cache,
                                                    const std::vector<TaskExample>& examples);

template <class Real>
struct ObjectiveEval {
  double kl = 0.0;  // batch mean
  double answer_ce = 0.0;
  L0Penalty penalty;
  double total = 0.0;
  std::vector<double> grad;  // d total / d log_alpha, layout order
};

// Batch objective and its gradient with respect to every log_alpha. `noise`
// is required for Sampled mode.
template <class Real>
ObjectiveEval<Real> mask_objective(const WeightCache<Real>& cache, const MaskSet& masks,
                                   std::span<const PreparedExample<Real>* const> batch, const TrainConfig& config,
                                   GateMode mode, std::span<const double> noise = {}, bool with_grad = true);

struct EpochRecord {
  int epoch = 0;
  std::uint64_t step = 0;
  double kl = 0.0;
  double penalty = 0.0;
  std::array<double, kNumGranularities> live_fraction{};  // fraction of gates that would binarize to 1
  std::optional<double> validation_kl;         // deterministic gates
  std::optional<double> validation_binary_kl;  // extracted circuit
  std::optional<double> validation_binary_score;
  std::optional<double> validation_size;       // lambda-weighted active fraction of the extracted circuit
};

struct DiscoverResult {
  MaskSet masks;
  // Sparsest validated snapshot whose extracted circuit keeps validation KL
  // within select_epsilon and task score within select_metric_epsilon of the
  // base; without one, the lowest KL + size.
  MaskSet best;
  int best_epoch = 0;
  bool best_within_tolerance = false;
  double best_objective = 0.0;
  std::vector<EpochRecord> trajectory;
  std::uint64_t steps = 0;
};

DiscoverResult discover(const Model& model, const std::vector<TaskExample>& train,
                        const std::vector<TaskExample>& validation, const TrainConfig& config,
                        const LogSink& log = {});

}  // namespace circuitscope
