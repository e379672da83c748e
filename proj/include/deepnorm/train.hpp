#pragma once

// Desk-scale training: Adam with inverse-square-root warmup, cross-entropy
// with optional label smoothing, convergence verdicts and the
// {depth} x {v1, v2} x {Glorot, Lipschitz} comparison grid.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepnorm/analysis.hpp"
#include "deepnorm/data.hpp"
#include "deepnorm/model.hpp"
#include "deepnorm/tensor.hpp"

namespace deepnorm {

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t warmup = 400;
  std::size_t batch_tokens = 2048;
  double lr_scale = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double label_smoothing = 0.0;
  double convergence_threshold = 0.99;
  // Diverged when the loss is NaN/Inf, or exceeds this multiple of the
  // first step's loss after warmup.
  double divergence_factor = 1.5;
  std::size_t eval_every = 100;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5) * lr_scale; step >= 1.
double lr_schedule(std::size_t step, std::size_t d_model, std::size_t warmup, double lr_scale = 1.0);

// Mean over non-pad targets of -sum_j q_j log p_j with
// q = (1 - smoothing) * onehot + smoothing / vocab.
Tensor cross_entropy_loss(const Tensor& logits, const Tokens& targets, std::int32_t pad_id, double label_smoothing);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

AdamState make_adam_state(const ParameterSet& params);
// Bias-corrected Adam update from the parameters' current gradients.
void adam_step(const ParameterSet& params, AdamState& state, const AdamHyper& hyper);

// Teacher-forced token accuracy and mean loss over non-pad targets.
struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t tokens = 0;
};
EvalResult evaluate(const TransformerModel& model, const std::vector<Batch>& batches);

enum class Verdict { Converged, Diverged, Undetermined, Error };

std::string_view to_string(Verdict v);

struct EvalRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over steps since the previous record
  double eval_accuracy = 0.0;
  double eval_loss = 0.0;
  double learning_rate = 0.0;
};

struct RunReport {
  nlohmann::json config;  // model, train and task echo
  std::vector<EvalRecord> evals;
  std::vector<double> step_losses;
  Verdict verdict = Verdict::Undetermined;
  std::size_t steps_completed = 0;
  std::optional<std::size_t> converged_at;
  std::string note;
  double wall_clock_seconds = 0.0;  // not serialized, so reports stay reproducible
  std::vector<LayerStats> final_stats;
};

nlohmann::json to_json(const RunReport& report);
std::string evals_csv(const RunReport& report);

// Splits the first min(horizon, losses.size()) step losses into consecutive
// blocks of `window` steps and counts blocks whose mean exceeds the previous
// block's mean. A trailing partial block is ignored. window >= 1.
std::size_t loss_trend_violations(const std::vector<double>& losses, std::size_t window, std::size_t horizon);

struct TrainHooks {
  // Checked between steps; when set, the run stops with verdict undetermined.
  const std::atomic<bool>* stop = nullptr;
  // Called with the in-progress report after each evaluation.
  std::function<void(const RunReport&)> on_eval;
};

RunReport train_loop(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const TaskSpec& task_spec,
                     const TaskData& task, const TrainHooks& hooks = {},
                     std::optional<TransformerModel>* trained_out = nullptr);

struct GridSpec {
  std::vector<std::size_t> depths;
  std::vector<NormOrder> orders;
  std::vector<InitFamily> inits;
  std::size_t jobs = 1;  // > 1 trains cells on separate threads
};

struct GridCell {
  std::size_t depth = 0;
  NormOrder order = NormOrder::V2;
  InitFamily init = InitFamily::Glorot;
  RunReport report;
};

struct GridReport {
  GridSpec spec;
  std::vector<GridCell> cells;  // row-major: depth, then order, then init
};

using GridProgressFn = std::function<void(const GridCell&)>;

// Each cell uses enc = dec = depth and a seed derived from (train seed, cell
// index). A cell that throws gets verdict Error and the grid continues.
// on_cell is called once per finished cell, serialized across threads.
GridReport run_grid(const GridSpec& grid, const ModelConfig& base_model, const TrainConfig& base_train,
                    const TaskSpec& task_spec, const TaskData& task, const std::atomic<bool>* stop = nullptr,
                    const GridProgressFn& on_cell = {});

std::string grid_column_name(NormOrder order, InitFamily init);

nlohmann::json to_json(const GridReport& report);
// Rows are depths; columns are order x init, e.g. "v1-glorot".
std::string grid_matrix_csv(const GridReport& report);

}  // namespace deepnorm
