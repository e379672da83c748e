#include "deepnorm/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "deepnorm/errors.hpp"
#include "deepnorm/gradcheck.hpp"
#include "deepnorm/report.hpp"
#include "json_fields.hpp"

namespace deepnorm {

void AnalysisOptions::validate() const {
  if (probe_batch < 1) throw ConfigError("probe_batch: must be >= 1");
  if (probe_len < 1) throw ConfigError("probe_len: must be >= 1");
  if (!(sigma_bound > 0.0)) throw ConfigError("sigma_bound: must be positive");
  if (bound_samples < 1000) throw ConfigError("bound_samples: must be >= 1000");
  if (!(fd_step > 0.0)) throw ConfigError("fd_step: must be positive");
  if (!(fd_tolerance > 0.0)) throw ConfigError("fd_tolerance: must be positive");
}

nlohmann::json to_json(const AnalysisOptions& o) {
  return nlohmann::json{{"probe_batch", o.probe_batch},     {"probe_len", o.probe_len},
                        {"sigma_bound", o.sigma_bound},     {"bound_samples", o.bound_samples},
                        {"fd_step", o.fd_step},             {"fd_tolerance", o.fd_tolerance}};
}

AnalysisOptions analysis_options_from_json(const nlohmann::json& j, AnalysisOptions o) {
  json_fields::require_object(j, "analysis");
  for (const auto& [key, value] : j.items()) {
    if (key == "probe_batch") o.probe_batch = json_fields::as_size(value, key);
    else if (key == "probe_len") o.probe_len = json_fields::as_size(value, key);
    else if (key == "sigma_bound") o.sigma_bound = json_fields::as_double(value, key);
    else if (key == "bound_samples") o.bound_samples = json_fields::as_size(value, key);
    else if (key == "fd_step") o.fd_step = json_fields::as_double(value, key);
    else if (key == "fd_tolerance") o.fd_tolerance = json_fields::as_double(value, key);
    else throw ConfigError("analysis: unknown key '" + key + "'");
  }
  return o;
}

nlohmann::json to_json(const CliConfig& c) {
  return nlohmann::json{{"model", to_json(c.model)},
                        {"train", to_json(c.train)},
                        {"task", to_json(c.task)},
                        {"analysis", to_json(c.analysis)}};
}

CliConfig cli_config_from_json(const nlohmann::json& j, CliConfig c) {
  json_fields::require_object(j, "config");
  for (const auto& [key, value] : j.items()) {
    if (key == "model") c.model = model_config_from_json(value, c.model);
    else if (key == "train") c.train = train_config_from_json(value, c.train);
    else if (key == "task") c.task = task_spec_from_json(value, c.task);
    else if (key == "analysis") c.analysis = analysis_options_from_json(value, c.analysis);
    else if (key != "seed") throw ConfigError("config: unknown key '" + key + "'");
  }
  if (j.contains("seed")) {
    c.train.seed = json_fields::as_u64(j["seed"], "seed");
    c.task.seed = c.train.seed;
  }
  return c;
}

CliConfig load_cli_config_file(const std::string& path, CliConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return cli_config_from_json(j, std::move(base));
}

CliConfig resolve_config(const SharedFlags& f, CliConfig c) {
  if (f.config_path) c = load_cli_config_file(*f.config_path, std::move(c));
  if (f.seed) {
    c.train.seed = *f.seed;
    c.task.seed = *f.seed;
  }
  if (f.order) c.model.norm_order = parse_norm_order(*f.order);
  if (f.init) c.model.init_family = parse_init_family(*f.init);
  if (f.enc) c.model.enc_layers = *f.enc;
  if (f.dec) c.model.dec_layers = *f.dec;
  if (f.d_model) c.model.d_model = *f.d_model;
  if (f.heads) c.model.n_heads = *f.heads;
  if (f.task) c.task.kind = parse_task_kind(*f.task);
  c.model.validate();
  c.train.validate();
  c.analysis.validate();
  return c;
}

std::string resolve_out_dir(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("DEEPNORM_OUT"); env && *env) return env;
  return "deepnorm-out";
}

namespace {

std::string join_path(const std::string& dir, const std::string& file) {
  if (dir.empty() || dir.back() == '/') return dir + file;
  return dir + "/" + file;
}

nlohmann::json report_header(std::string_view command, const CliConfig& cfg) {
  return nlohmann::json{{"tool", "deepnorm"}, {"version", kToolVersion}, {"command", command}, {"config", to_json(cfg)}};
}

std::string stats_csv(const std::vector<LayerStats>& stats) {
  std::string out = layer_stats_csv_header() + "\n";
  for (const auto& s : stats) out += to_csv_row(s) + "\n";
  return out;
}

std::vector<std::int32_t> parse_id_list(const std::string& text) {
  std::vector<std::int32_t> ids;
  std::istringstream is(text);
  std::string word;
  while (is >> word) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(word, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != word.size() || v < 0 || v > std::numeric_limits<std::int32_t>::max()) {
      throw ConfigError("input: '" + word + "' is not a token id");
    }
    ids.push_back(static_cast<std::int32_t>(v));
  }
  return ids;
}

}  // namespace

int cmd_init_stats(const CliConfig& cfg, const std::string& out_dir, bool assert_bound, std::ostream& log) {
  const Rng root(cfg.train.seed);
  const auto model = build_model(cfg.model, root.split("init"));
  const auto len = std::min(cfg.analysis.probe_len, cfg.model.max_seq_len);
  const auto probe = make_probe_batch(cfg.model.vocab_size, cfg.analysis.probe_batch, len, root.split("probe").key());
  const auto stats = residual_stream_stats(model, probe.src, probe.tgt_in);

  double max_sigma = 0.0;
  std::size_t violations = 0;
  for (const auto& s : stats) {
    max_sigma = std::max(max_sigma, s.sigma);
    if (!(s.sigma <= cfg.analysis.sigma_bound)) ++violations;
  }
  auto j = report_header("init-stats", cfg);
  j["max_sigma"] = max_sigma;
  j["assert_bound"] = assert_bound;
  j["sigma_bound"] = cfg.analysis.sigma_bound;
  j["violations"] = violations;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : stats) rows.push_back(to_json(s));
  j["stats"] = rows;
  write_text_file(join_path(out_dir, "stats.csv"), stats_csv(stats));
  write_text_file(join_path(out_dir, "stats.json"), dump_json(j));

  log << "init-stats: " << stats.size() << " sublayers, max sigma " << format_double(max_sigma) << "\n";
  if (!assert_bound) return kExitOk;
  if (violations == 0) {
    log << "bound holds: every sigma <= " << format_double(cfg.analysis.sigma_bound) << "\n";
    return kExitOk;
  }
  log << "bound violated on " << violations << " sublayers (sigma > " << format_double(cfg.analysis.sigma_bound)
      << ")\n";
  return kExitCheckFailed;
}

BoundedDistributionSpec random_bounded_spec(Rng& rng) {
  BoundedDistributionSpec s;
  s.kind = static_cast<DistributionKind>(rng.below(4));
  auto log_uniform = [&](double lo, double hi) {
    return std::exp(std::log(lo) + rng.uniform_open() * (std::log(hi) - std::log(lo)));
  };
  const double width = log_uniform(0.01, 100.0);
  s.a = rng.symmetric(10.0);
  s.b = s.a + width;
  s.alpha = log_uniform(0.1, 10.0);
  s.beta = log_uniform(0.1, 10.0);
  s.p = rng.uniform_open();
  s.mean = s.a + rng.uniform_open() * width;
  s.sd = width * log_uniform(0.05, 2.0);
  return s;
}

int cmd_bound_check(const CliConfig& cfg, const BoundCheckRequest& request, const std::string& out_dir,
                    std::ostream& log) {
  std::vector<BoundedDistributionSpec> specs;
  if (request.suite) {
    if (*request.suite != "default") throw ConfigError("suite: unknown suite '" + *request.suite + "'");
    specs = default_bound_suite();
  }
  if (request.single) {
    if (!(request.single->a < request.single->b)) throw ConfigError("a, b: require a < b");
    specs.push_back(*request.single);
  }
  const Rng root(cfg.train.seed);
  Rng spec_rng = root.split("random-specs");
  for (std::size_t i = 0; i < request.random_specs; ++i) specs.push_back(random_bounded_spec(spec_rng));
  if (specs.empty()) throw ConfigError("bound-check: nothing to check; pass --suite or --dist");

  std::vector<StdBoundReport> rows;
  std::size_t failures = 0;
  Rng sample_root = root.split("samples");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Rng rng = sample_root.split(static_cast<std::uint64_t>(i));
    rows.push_back(verify_std_bound(specs[i], cfg.analysis.bound_samples, rng));
    if (!rows.back().holds) ++failures;
  }

  std::ostringstream csv;
  csv << "distribution,a,b,n,empirical_std,exact_std,bound,margin,holds\n";
  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& r : rows) {
    const auto exact = r.spec.exact_std();
    csv << '"' << r.spec.label() << "\"," << format_double(r.spec.a) << ',' << format_double(r.spec.b) << ','
        << r.n_samples << ',' << format_double(r.empirical_std) << ','
        << (exact ? format_double(*exact) : std::string()) << ',' << format_double(r.bound) << ','
        << format_double(r.margin) << ',' << (r.holds ? "true" : "false") << '\n';
    jrows.push_back(to_json(r));
    log << (r.holds ? "ok   " : "FAIL ") << r.spec.label() << "  std " << format_double(r.empirical_std)
        << " < " << format_double(r.bound) << "\n";
  }
  auto j = report_header("bound-check", cfg);
  j["rows"] = jrows;
  j["failures"] = failures;
  write_text_file(join_path(out_dir, "bound_check.csv"), csv.str());
  write_text_file(join_path(out_dir, "bound_check.json"), dump_json(j));
  log << rows.size() << " distributions, " << failures << " violations\n";
  return failures == 0 ? kExitOk : kExitCheckFailed;
}

int cmd_grad_check(const CliConfig& cfg, const std::string& out_dir, const std::string& corrupt_parameter,
                   std::ostream& log) {
  const Rng root(cfg.train.seed);
  auto model = build_model(cfg.model, root.split("init"));
  const auto batch = make_grad_check_batch(cfg.model.vocab_size, cfg.train.seed);
  GradCheckOptions opts;
  opts.h = cfg.analysis.fd_step;
  opts.tolerance = cfg.analysis.fd_tolerance;
  opts.corrupt_parameter = corrupt_parameter;
  const auto report = finite_difference_check(model, batch, opts);

  auto j = report_header("grad-check", cfg);
  j["result"] = to_json(report);
  j["corrupted_parameter"] = corrupt_parameter.empty() ? nlohmann::json(nullptr) : nlohmann::json(corrupt_parameter);
  write_text_file(join_path(out_dir, "grad_check.csv"), grad_check_csv(report));
  write_text_file(join_path(out_dir, "grad_check.json"), dump_json(j));
  log << "grad-check: " << report.params.size() << " parameter tensors, max relative error "
      << format_double(report.max_rel_error) << " (" << report.worst_parameter << "), tolerance "
      << format_double(opts.tolerance) << "\n";
  log << (report.passed ? "passed" : "FAILED") << "\n";
  return report.passed ? kExitOk : kExitCheckFailed;
}

namespace {

void write_run_files(const std::string& out_dir, const RunReport& report) {
  write_text_file(join_path(out_dir, "run.json"), dump_json(to_json(report)));
  write_text_file(join_path(out_dir, "evals.csv"), evals_csv(report));
}

}  // namespace

int cmd_train(const CliConfig& cfg, const std::string& out_dir, const std::atomic<bool>* stop, std::ostream& log) {
  cfg.task.validate(cfg.model.max_seq_len);
  const auto task = generate_task(cfg.task);
  TrainHooks hooks;
  hooks.stop = stop;
  hooks.on_eval = [&](const RunReport& partial) {
    const auto& e = partial.evals.back();
    log << "step " << e.step << "  loss " << format_double(e.train_loss) << "  eval accuracy "
        << format_double(e.eval_accuracy) << "\n";
    write_run_files(out_dir, partial);
  };
  std::optional<TransformerModel> trained;
  auto report = train_loop(cfg.model, cfg.train, cfg.task, task, hooks, &trained);

  write_run_files(out_dir, report);
  write_text_file(join_path(out_dir, "stats.csv"), stats_csv(report.final_stats));
  write_text_file(join_path(out_dir, "timing.json"),
                  dump_json(nlohmann::json{{"wall_clock_seconds", report.wall_clock_seconds}}));
  save_checkpoint(*trained, join_path(out_dir, "model.bin"));
  log << "verdict " << to_string(report.verdict) << " after " << report.steps_completed << " steps";
  if (!report.note.empty()) log << " (" << report.note << ")";
  log << "\n";
  return report.verdict == Verdict::Converged ? kExitOk : kExitCheckFailed;
}

int cmd_grid(const CliConfig& cfg, const GridSpec& grid, const std::string& out_dir, const std::atomic<bool>* stop,
             std::ostream& log) {
  cfg.task.validate(cfg.model.max_seq_len);
  const auto task = generate_task(cfg.task);
  const auto report = run_grid(grid, cfg.model, cfg.train, cfg.task, task, stop, [&](const GridCell& cell) {
    log << "depth " << cell.depth << "  " << grid_column_name(cell.order, cell.init) << "  "
        << to_string(cell.report.verdict) << " after " << cell.report.steps_completed << " steps";
    if (!cell.report.note.empty()) log << " (" << cell.report.note << ")";
    log << "\n";
  });
  auto j = to_json(report);
  j["config"] = to_json(cfg);
  write_text_file(join_path(out_dir, "grid.json"), dump_json(j));
  write_text_file(join_path(out_dir, "grid.csv"), grid_matrix_csv(report));
  log << grid_matrix_csv(report);

  bool errored = false;
  for (const auto& c : report.cells) errored = errored || c.report.verdict == Verdict::Error;
  if (errored) return kExitRuntimeError;
  if (stop && stop->load()) return kExitCheckFailed;
  return kExitOk;
}

int cmd_decode(const DecodeRequest& request, const std::string& out_dir, std::ostream& log) {
  if (request.inputs.empty()) throw ConfigError("decode: no input sequences");
  const auto model = load_checkpoint(request.checkpoint);
  const auto& mc = model.config();
  const auto max_len = request.max_len == 0 ? mc.max_seq_len : request.max_len;

  std::vector<Example> items;
  std::vector<bool> has_expected;
  for (const auto& line : request.inputs) {
    const auto tab = line.find('\t');
    Example e;
    e.src = parse_id_list(line.substr(0, tab));
    if (e.src.empty()) throw ConfigError("input: empty source sequence");
    has_expected.push_back(tab != std::string::npos);
    if (tab != std::string::npos) e.tgt = parse_id_list(line.substr(tab + 1));
    items.push_back(std::move(e));
  }
  std::size_t longest = 0;
  for (const auto& e : items) longest = std::max(longest, e.src.size());
  auto src = Tokens::filled(items.size(), longest);
  for (std::size_t b = 0; b < items.size(); ++b) {
    for (std::size_t t = 0; t < items[b].src.size(); ++t) src.at(b, t) = items[b].src[t];
  }
  const auto outputs = decode_greedy(model, src, max_len);

  nlohmann::json results = nlohmann::json::array();
  std::size_t scored = 0;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    nlohmann::json r{{"src", items[i].src}, {"output", outputs[i]}};
    if (has_expected[i]) {
      const bool match = outputs[i] == items[i].tgt;
      r["expected"] = items[i].tgt;
      r["exact"] = match;
      ++scored;
      if (match) ++exact;
    }
    results.push_back(std::move(r));
    for (std::size_t t = 0; t < outputs[i].size(); ++t) log << (t ? " " : "") << outputs[i][t];
    log << "\n";
  }
  nlohmann::json j{{"tool", "deepnorm"},
                   {"version", kToolVersion},
                   {"command", "decode"},
                   {"model", to_json(mc)},
                   {"max_len", max_len},
                   {"results", results}};
  if (scored > 0) {
    j["exact_match_rate"] = static_cast<double>(exact) / static_cast<double>(scored);
    log << "exact match " << exact << "/" << scored << "\n";
  }
  write_text_file(join_path(out_dir, "decode.json"), dump_json(j));
  return kExitOk;
}

}  // namespace deepnorm
