#include "deepnorm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "deepnorm/errors.hpp"
#include "deepnorm/report.hpp"
#include "json_fields.hpp"

namespace deepnorm {

void TrainConfig::validate() const {
  if (warmup < 1) throw ConfigError("warmup: must be >= 1");
  if (batch_tokens < 1) throw ConfigError("batch_tokens: must be >= 1");
  if (!(lr_scale >= 0.0)) throw ConfigError("lr_scale: must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1: must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2: must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps: must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing: must be in [0, 1)");
  if (!(convergence_threshold > 0.0 && convergence_threshold <= 1.0)) {
    throw ConfigError("convergence_threshold: must be in (0, 1]");
  }
  if (!(divergence_factor > 1.0)) throw ConfigError("divergence_factor: must be > 1");
  if (eval_every < 1) throw ConfigError("eval_every: must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"steps", c.steps},
                        {"warmup", c.warmup},
                        {"batch_tokens", c.batch_tokens},
                        {"lr_scale", c.lr_scale},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"adam_eps", c.adam_eps},
                        {"label_smoothing", c.label_smoothing},
                        {"convergence_threshold", c.convergence_threshold},
                        {"divergence_factor", c.divergence_factor},
                        {"eval_every", c.eval_every},
                        {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  json_fields::require_object(j, "train");
  for (const auto& [key, value] : j.items()) {
    if (key == "steps") c.steps = json_fields::as_size(value, key);
    else if (key == "warmup") c.warmup = json_fields::as_size(value, key);
    else if (key == "batch_tokens") c.batch_tokens = json_fields::as_size(value, key);
    else if (key == "lr_scale") c.lr_scale = json_fields::as_double(value, key);
    else if (key == "beta1") c.beta1 = json_fields::as_double(value, key);
    else if (key == "beta2") c.beta2 = json_fields::as_double(value, key);
    else if (key == "adam_eps") c.adam_eps = json_fields::as_double(value, key);
    else if (key == "label_smoothing") c.label_smoothing = json_fields::as_double(value, key);
    else if (key == "convergence_threshold") c.convergence_threshold = json_fields::as_double(value, key);
    else if (key == "divergence_factor") c.divergence_factor = json_fields::as_double(value, key);
    else if (key == "eval_every") c.eval_every = json_fields::as_size(value, key);
    else if (key == "seed") c.seed = json_fields::as_u64(value, key);
    else throw ConfigError("train: unknown key '" + key + "'");
  }
  return c;
}

double lr_schedule(std::size_t step, std::size_t d_model, std::size_t warmup, double lr_scale) {
  if (step == 0) throw ContractError("lr_schedule: step must be >= 1");
  if (warmup == 0) throw ContractError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5)) * lr_scale;
}

Tensor cross_entropy_loss(const Tensor& logits, const Tokens& targets, std::int32_t pad_id, double label_smoothing) {
  const auto vocab = logits.shape().back();
  const auto rows = logits.numel() / vocab;
  if (targets.ids.size() != rows) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(targets.ids.size()) + " targets for logits " +
                         to_string(logits.shape()));
  }
  std::size_t count = 0;
  for (auto id : targets.ids) {
    if (id == pad_id) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("cross_entropy_loss: target id " + std::to_string(id) + " outside vocabulary");
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy_loss: batch contains only padding");

  const double eps = label_smoothing;
  const double off = eps / static_cast<double>(vocab);
  auto z = logits.data();
  std::vector<double> probs(z.size(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto y = targets.ids[r];
    if (y == pad_id) continue;
    const double* row = z.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    double sum_logp = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double logp = row[j] - lse;
      probs[r * vocab + j] = std::exp(logp);
      sum_logp += logp;
    }
    total += -(1.0 - eps) * (row[y] - lse) - off * sum_logp;
  }
  const double n = static_cast<double>(count);
  std::vector<std::int32_t> ids = targets.ids;
  return Tensor::make_result(
      {1}, {total / n}, {logits}, "cross_entropy",
      [logits, rows, vocab, n, eps, off, pad_id, ids = std::move(ids), probs = std::move(probs)](const OpOutput& o) {
        auto g = logits.grad_buffer();
        const double scale_factor = o.grad[0] / n;
        for (std::size_t r = 0; r < rows; ++r) {
          const auto y = ids[r];
          if (y == pad_id) continue;
          for (std::size_t j = 0; j < vocab; ++j) {
            const double q = off + (static_cast<std::size_t>(y) == j ? 1.0 - eps : 0.0);
            g[r * vocab + j] += scale_factor * (probs[r * vocab + j] - q);
          }
        }
      });
}

AdamState make_adam_state(const ParameterSet& params) {
  AdamState s;
  for (const auto& e : params) {
    s.m.emplace_back(e.tensor.numel(), 0.0);
    s.v.emplace_back(e.tensor.numel(), 0.0);
  }
  return s;
}

void adam_step(const ParameterSet& params, AdamState& state, const AdamHyper& h) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  std::size_t i = 0;
  for (const auto& e : params) {
    auto p = e.tensor;
    auto data = p.mutable_data();
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) throw ContractError("adam_step: state shape mismatch for " + e.name);
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad.empty() ? 0.0 : grad[k];
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      data[k] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
    ++i;
  }
}

EvalResult evaluate(const TransformerModel& model, const std::vector<Batch>& batches) {
  NoGradGuard no_grad;
  EvalResult r;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  const auto vocab = model.config().vocab_size;
  for (const auto& batch : batches) {
    auto logits = forward(model, batch.src, batch.tgt_in);
    auto z = logits.data();
    const auto loss = cross_entropy_loss(logits, batch.tgt_out, kPadId, 0.0).item();
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < batch.tgt_out.ids.size(); ++i) {
      const auto y = batch.tgt_out.ids[i];
      if (y == kPadId) continue;
      ++tokens;
      const double* row = z.data() + i * vocab;
      const auto best = std::max_element(row, row + vocab) - row;
      if (best == y) ++correct;
    }
    loss_sum += loss * static_cast<double>(tokens);
    r.tokens += tokens;
  }
  if (r.tokens > 0) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.tokens);
    r.loss = loss_sum / static_cast<double>(r.tokens);
  }
  return r;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Converged:
      return "converged";
    case Verdict::Diverged:
      return "diverged";
    case Verdict::Undetermined:
      return "undetermined";
    case Verdict::Error:
      return "error";
  }
  return "";
}

namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : r.evals) {
    evals.push_back({{"step", e.step},
                     {"train_loss", number_or_null(e.train_loss)},
                     {"eval_accuracy", e.eval_accuracy},
                     {"eval_loss", number_or_null(e.eval_loss)},
                     {"learning_rate", e.learning_rate}});
  }
  nlohmann::json losses = nlohmann::json::array();
  for (double l : r.step_losses) losses.push_back(number_or_null(l));
  nlohmann::json stats = nlohmann::json::array();
  for (const auto& s : r.final_stats) stats.push_back(to_json(s));
  return nlohmann::json{
      {"tool", "deepnorm"},
      {"version", kToolVersion},
      {"config", r.config},
      {"verdict", to_string(r.verdict)},
      {"steps_completed", r.steps_completed},
      {"converged_at", r.converged_at ? nlohmann::json(*r.converged_at) : nlohmann::json(nullptr)},
      {"final_accuracy", r.evals.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.evals.back().eval_accuracy)},
      {"note", r.note},
      {"evals", evals},
      {"step_losses", losses},
      {"final_stats", stats},
  };
}

std::string evals_csv(const RunReport& r) {
  std::ostringstream os;
  os << "step,train_loss,eval_accuracy,eval_loss,learning_rate\n";
  for (const auto& e : r.evals) {
    os << e.step << ',' << format_double(e.train_loss) << ',' << format_double(e.eval_accuracy) << ','
       << format_double(e.eval_loss) << ',' << format_double(e.learning_rate) << '\n';
  }
  return os.str();
}

namespace {

// Activations are large and short-lived; keep them on the heap instead of
// mapping and unmapping pages every step.
void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace

RunReport train_loop(const ModelConfig& model_cfg, const TrainConfig& cfg, const TaskSpec& task_spec,
                     const TaskData& task, const TrainHooks& hooks, std::optional<TransformerModel>* trained_out) {
  tune_allocator();
  const auto started = std::chrono::steady_clock::now();
  model_cfg.validate();
  cfg.validate();
  task_spec.validate(model_cfg.max_seq_len);
  if (task_spec.vocab_size > model_cfg.vocab_size) {
    throw ConfigError("vocab_size: task vocabulary exceeds the model's vocab_size");
  }
  std::size_t longest = 0;
  for (const auto& e : task.train) longest = std::max(longest, e.tgt.size() + 1);
  if (longest > cfg.batch_tokens) throw ConfigError("batch_tokens: smaller than the longest target sequence");

  RunReport report;
  report.config = {{"model", to_json(model_cfg)}, {"train", to_json(cfg)}, {"task", to_json(task_spec)}};

  const Rng root(cfg.seed);
  auto model = build_model(model_cfg, root.split("init"));
  BatchIterator batches(task.train, cfg.batch_tokens, root.split("data").key());
  const auto eval_batches = sequential_batches(task.eval, 4096);
  auto adam = make_adam_state(model.parameters());
  const Rng dropout_root = root.split("dropout");

  double initial_loss = 0.0;
  double window_loss = 0.0;
  std::size_t window_steps = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (hooks.stop && hooks.stop->load()) {
      report.note = "interrupted";
      break;
    }
    const auto batch = batches.next();
    const double lr = lr_schedule(step, model_cfg.d_model, cfg.warmup, cfg.lr_scale);
    model.zero_grad();
    Rng dropout_rng = dropout_root.split(static_cast<std::uint64_t>(step));
    ForwardOptions opts;
    if (model_cfg.dropout > 0.0) opts.dropout_rng = &dropout_rng;
    auto logits = forward(model, batch.src, batch.tgt_in, opts);
    auto loss = cross_entropy_loss(logits, batch.tgt_out, kPadId, cfg.label_smoothing);
    const double value = loss.item();
    report.step_losses.push_back(value);
    if (step == 1) initial_loss = value;
    if (!std::isfinite(value)) {
      report.verdict = Verdict::Diverged;
      report.note = "non-finite loss at step " + std::to_string(step);
      break;
    }
    if (step > cfg.warmup && value > cfg.divergence_factor * initial_loss) {
      report.verdict = Verdict::Diverged;
      report.note = "loss " + format_double(value) + " exceeded " + format_double(cfg.divergence_factor) +
                    "x the initial loss at step " + std::to_string(step);
      break;
    }
    loss.backward();
    adam_step(model.parameters(), adam, AdamHyper{lr, cfg.beta1, cfg.beta2, cfg.adam_eps});
    report.steps_completed = step;
    window_loss += value;
    ++window_steps;

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const auto ev = evaluate(model, eval_batches);
      report.evals.push_back(EvalRecord{step, window_loss / static_cast<double>(window_steps), ev.accuracy, ev.loss, lr});
      window_loss = 0.0;
      window_steps = 0;
      if (ev.accuracy >= cfg.convergence_threshold) {
        report.verdict = Verdict::Converged;
        report.converged_at = step;
      }
      if (hooks.on_eval) hooks.on_eval(report);
      if (report.verdict == Verdict::Converged) break;
    }
  }

  model.zero_grad();
  const auto probe = make_probe_batch(model_cfg.vocab_size, 16, std::min<std::size_t>(16, model_cfg.max_seq_len),
                                      root.split("probe").key());
  report.final_stats = residual_stream_stats(model, probe.src, probe.tgt_in);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (trained_out) trained_out->emplace(std::move(model));
  return report;
}

std::size_t loss_trend_violations(const std::vector<double>& losses, std::size_t window, std::size_t horizon) {
  if (window == 0) throw ContractError("loss_trend_violations: window must be positive");
  const auto blocks = std::min(horizon, losses.size()) / window;
  std::size_t violations = 0;
  double previous = 0.0;
  for (std::size_t b = 0; b < blocks; ++b) {
    double total = 0.0;
    for (std::size_t i = b * window; i < (b + 1) * window; ++i) total += losses[i];
    const double block_mean = total / static_cast<double>(window);
    if (b > 0 && !(block_mean <= previous)) ++violations;
    previous = block_mean;
  }
  return violations;
}

// ---------------------------------------------------------------------------
// Grid

std::string grid_column_name(NormOrder order, InitFamily init) {
  return std::string(to_string(order)) + "-" + std::string(to_string(init));
}

GridReport run_grid(const GridSpec& grid, const ModelConfig& base_model, const TrainConfig& base_train,
                    const TaskSpec& task_spec, const TaskData& task, const std::atomic<bool>* stop,
                    const GridProgressFn& on_cell) {
  if (grid.depths.empty() || grid.orders.empty() || grid.inits.empty()) {
    throw ConfigError("grid: depths, orders and inits must all be nonempty");
  }
  GridReport report;
  report.spec = grid;
  for (auto depth : grid.depths)
    for (auto order : grid.orders)
      for (auto init : grid.inits) report.cells.push_back(GridCell{depth, order, init, {}});

  std::mutex mu;
  auto run_cell = [&](std::size_t index) {
    auto& cell = report.cells[index];
    ModelConfig mc = base_model;
    mc.enc_layers = cell.depth;
    mc.dec_layers = cell.depth;
    mc.norm_order = cell.order;
    mc.init_family = cell.init;
    TrainConfig tc = base_train;
    tc.seed = Rng(base_train.seed).split(static_cast<std::uint64_t>(index)).key();
    TrainHooks hooks;
    hooks.stop = stop;
    try {
      cell.report = train_loop(mc, tc, task_spec, task, hooks);
    } catch (const std::exception& e) {
      cell.report = RunReport{};
      cell.report.config = {{"model", to_json(mc)}, {"train", to_json(tc)}, {"task", to_json(task_spec)}};
      cell.report.verdict = Verdict::Error;
      cell.report.note = e.what();
    }
    if (on_cell) {
      std::lock_guard lock(mu);
      on_cell(cell);
    }
  };

  if (grid.jobs <= 1) {
    for (std::size_t i = 0; i < report.cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < std::min(grid.jobs, report.cells.size()); ++w) {
      workers.emplace_back([&] {
        for (auto i = next.fetch_add(1); i < report.cells.size(); i = next.fetch_add(1)) run_cell(i);
      });
    }
    for (auto& t : workers) t.join();
  }
  return report;
}

namespace {

nlohmann::json cell_summary(const GridCell& c) {
  const auto& r = c.report;
  return nlohmann::json{
      {"verdict", to_string(r.verdict)},
      {"final_accuracy", r.evals.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.evals.back().eval_accuracy)},
      {"steps_completed", r.steps_completed},
      {"converged_at", r.converged_at ? nlohmann::json(*r.converged_at) : nlohmann::json(nullptr)},
      {"note", r.note}};
}

}  // namespace

nlohmann::json to_json(const GridReport& report) {
  nlohmann::json columns = nlohmann::json::array();
  for (auto order : report.spec.orders)
    for (auto init : report.spec.inits) columns.push_back(grid_column_name(order, init));
  nlohmann::json rows = nlohmann::json::array();
  const auto per_row = report.spec.orders.size() * report.spec.inits.size();
  for (std::size_t d = 0; d < report.spec.depths.size(); ++d) {
    nlohmann::json cells = nlohmann::json::object();
    for (std::size_t k = 0; k < per_row; ++k) {
      const auto& c = report.cells[d * per_row + k];
      cells[grid_column_name(c.order, c.init)] = cell_summary(c);
    }
    rows.push_back({{"depth", report.spec.depths[d]}, {"cells", cells}});
  }
  nlohmann::json orders = nlohmann::json::array();
  for (auto o : report.spec.orders) orders.push_back(to_string(o));
  nlohmann::json inits = nlohmann::json::array();
  for (auto i : report.spec.inits) inits.push_back(to_string(i));
  nlohmann::json config = report.cells.empty() ? nlohmann::json(nullptr) : report.cells.front().report.config;
  return nlohmann::json{{"tool", "deepnorm"},
                        {"version", kToolVersion},
                        {"depths", report.spec.depths},
                        {"orders", orders},
                        {"inits", inits},
                        {"columns", columns},
                        {"base_config", config},
                        {"matrix", rows}};
}

std::string grid_matrix_csv(const GridReport& report) {
  std::ostringstream os;
  os << "depth";
  for (auto order : report.spec.orders)
    for (auto init : report.spec.inits) os << ',' << grid_column_name(order, init);
  os << '\n';
  const auto per_row = report.spec.orders.size() * report.spec.inits.size();
  for (std::size_t d = 0; d < report.spec.depths.size(); ++d) {
    os << report.spec.depths[d];
    for (std::size_t k = 0; k < per_row; ++k) {
      const auto& r = report.cells[d * per_row + k].report;
      os << ',' << to_string(r.verdict) << '/'
         << (r.evals.empty() ? std::string("na") : format_double(r.evals.back().eval_accuracy));
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace deepnorm
