// deepnorm command-line entry point.

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deepnorm/cli.hpp"
#include "deepnorm/errors.hpp"
#include "deepnorm/gradcheck.hpp"
#include "deepnorm/report.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

void add_shared_flags(CLI::App* cmd, deepnorm::SharedFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file (sections model, train, task, analysis)");
  cmd->add_option("--seed", f.seed, "Seed for initialization, data and probes");
  cmd->add_option("--out", f.out, "Output directory (default $DEEPNORM_OUT or ./deepnorm-out)");
  cmd->add_option("--order", f.order, "Normalization order")->check(CLI::IsMember({"v1", "v2"}));
  cmd->add_option("--init", f.init, "Initialization family")->check(CLI::IsMember({"glorot", "lipschitz"}));
  cmd->add_option("--enc", f.enc, "Encoder layers");
  cmd->add_option("--dec", f.dec, "Decoder layers");
  cmd->add_option("--d-model", f.d_model, "Model width");
  cmd->add_option("--heads", f.heads, "Attention heads");
  cmd->add_option("--task", f.task, "Synthetic task")->check(CLI::IsMember({"copy", "reverse", "sort"}));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      items.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  items.push_back(cur);
  return items;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace deepnorm;

  CLI::App app{"deepnorm: post-norm vs pre-norm transformers and Lipschitz-constrained initialization"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  SharedFlags f_init, f_bound, f_grad, f_train, f_grid;

  auto* init_stats = app.add_subcommand("init-stats", "Residual-stream statistics of a freshly initialized model");
  add_shared_flags(init_stats, f_init);
  bool assert_bound = false;
  std::optional<double> sigma_bound;
  init_stats->add_flag("--assert-bound", assert_bound, "Exit 3 unless every sublayer sigma <= the bound");
  init_stats->add_option("--sigma-bound", sigma_bound, "Bound used by --assert-bound (default 1.1)");

  auto* bound = app.add_subcommand("bound-check", "Empirical std versus b - a for bounded distributions");
  add_shared_flags(bound, f_bound);
  std::optional<std::string> suite;
  std::optional<std::string> dist;
  BoundedDistributionSpec single;
  std::optional<double> a_opt, b_opt;
  std::optional<std::size_t> samples;
  std::size_t random_specs = 0;
  bound->add_option("--suite", suite, "Named suite")->check(CLI::IsMember({"default"}));
  bound->add_option("--dist", dist, "Single distribution (default uniform when --a/--b are given)")
      ->check(CLI::IsMember({"uniform", "beta", "two-point", "truncated-normal"}));
  bound->add_option("--a", a_opt, "Lower end of the support");
  bound->add_option("--b", b_opt, "Upper end of the support");
  bound->add_option("--alpha", single.alpha, "Beta shape alpha");
  bound->add_option("--beta", single.beta, "Beta shape beta");
  bound->add_option("--p", single.p, "Two-point probability of mass at a");
  bound->add_option("--mean", single.mean, "Truncated-normal location");
  bound->add_option("--sd", single.sd, "Truncated-normal scale");
  bound->add_option("--samples", samples, "Samples per distribution (default 100000)");
  bound->add_option("--random", random_specs, "Also check this many randomized distributions");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference audit of all parameter gradients");
  add_shared_flags(grad, f_grad);
  std::string corrupt;
  grad->add_option("--corrupt-grad", corrupt, "Test hook: perturb the analytic gradient of this parameter");

  auto* train = app.add_subcommand("train", "Train one configuration on a synthetic task");
  add_shared_flags(train, f_train);
  std::optional<std::size_t> steps, batch_tokens, warmup, eval_every;
  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--steps", steps, "Maximum training steps");
    cmd->add_option("--batch-tokens", batch_tokens, "Target tokens per batch");
    cmd->add_option("--warmup", warmup, "Warmup steps");
    cmd->add_option("--eval-every", eval_every, "Steps between evaluations");
  };
  add_train_flags(train);

  auto* grid = app.add_subcommand("grid", "Depth x order x init convergence matrix");
  add_shared_flags(grid, f_grid);
  add_train_flags(grid);
  std::string depths = "2,6,12";
  std::string orders = "v1,v2";
  std::string inits = "glorot,lipschitz";
  std::size_t jobs = 1;
  grid->add_option("--depths", depths, "Comma-separated depths (enc = dec = depth)");
  grid->add_option("--orders", orders, "Comma-separated normalization orders");
  grid->add_option("--inits", inits, "Comma-separated initialization families");
  grid->add_option("--jobs", jobs, "Cells trained concurrently");

  auto* decode = app.add_subcommand("decode", "Greedy decoding with a trained checkpoint");
  std::optional<std::string> decode_out;
  DecodeRequest request;
  std::vector<std::string> srcs;
  std::optional<std::string> input_file;
  decode->add_option("--checkpoint", request.checkpoint, "model.bin written by train")->required();
  decode->add_option("--src", srcs, "Space-separated source ids (repeatable)");
  decode->add_option("--input", input_file, "File of sources, optionally 'src<TAB>expected' per line");
  decode->add_option("--max-len", request.max_len, "Maximum output length");
  decode->add_option("--out", decode_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  std::signal(SIGINT, on_sigint);

  auto apply_train_flags = [&](CliConfig& cfg) {
    if (steps) cfg.train.steps = *steps;
    if (batch_tokens) cfg.train.batch_tokens = *batch_tokens;
    if (warmup) cfg.train.warmup = *warmup;
    if (eval_every) cfg.train.eval_every = *eval_every;
    cfg.train.validate();
  };

  try {
    if (init_stats->parsed()) {
      auto cfg = resolve_config(f_init);
      if (sigma_bound) cfg.analysis.sigma_bound = *sigma_bound;
      cfg.analysis.validate();
      return cmd_init_stats(cfg, resolve_out_dir(f_init.out), assert_bound, std::cout);
    }
    if (bound->parsed()) {
      auto cfg = resolve_config(f_bound);
      if (samples) cfg.analysis.bound_samples = *samples;
      cfg.analysis.validate();
      BoundCheckRequest req;
      req.suite = suite;
      req.random_specs = random_specs;
      if (dist || a_opt || b_opt) {
        single.kind = parse_distribution_kind(dist.value_or("uniform"));
        single.a = a_opt.value_or(0.0);
        single.b = b_opt.value_or(1.0);
        req.single = single;
      }
      if (!req.suite && !req.single && req.random_specs == 0) req.suite = "default";
      return cmd_bound_check(cfg, req, resolve_out_dir(f_bound.out), std::cout);
    }
    if (grad->parsed()) {
      CliConfig defaults;
      defaults.model = micro_model_config();
      return cmd_grad_check(resolve_config(f_grad, defaults), resolve_out_dir(f_grad.out), corrupt, std::cout);
    }
    if (train->parsed()) {
      auto cfg = resolve_config(f_train);
      apply_train_flags(cfg);
      return cmd_train(cfg, resolve_out_dir(f_train.out), &g_stop, std::cout);
    }
    if (grid->parsed()) {
      auto cfg = resolve_config(f_grid);
      apply_train_flags(cfg);
      GridSpec spec;
      for (const auto& d : split_list(depths)) {
        std::size_t used = 0;
        unsigned long v = 0;
        try {
          v = std::stoul(d, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used == 0 || used != d.size() || v == 0) throw ConfigError("depths: '" + d + "' is not a positive integer");
        spec.depths.push_back(v);
      }
      for (const auto& o : split_list(orders)) spec.orders.push_back(parse_norm_order(o));
      for (const auto& i : split_list(inits)) spec.inits.push_back(parse_init_family(i));
      spec.jobs = jobs;
      return cmd_grid(cfg, spec, resolve_out_dir(f_grid.out), &g_stop, std::cout);
    }
    if (decode->parsed()) {
      request.inputs = srcs;
      if (input_file) {
        std::ifstream in(*input_file);
        if (!in) throw ConfigError("input: cannot open " + *input_file);
        for (std::string line; std::getline(in, line);) {
          if (!line.empty()) request.inputs.push_back(line);
        }
      }
      return cmd_decode(request, resolve_out_dir(decode_out), std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntimeError;
  }
  return kExitConfigError;
}
