#pragma once

// Command implementations behind the deepnorm executable. Each command takes
// a fully resolved configuration, writes its reports under an output
// directory and returns a process exit code.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepnorm/analysis.hpp"
#include "deepnorm/data.hpp"
#include "deepnorm/model.hpp"
#include "deepnorm/train.hpp"

namespace deepnorm {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfigError = 2,
  kExitCheckFailed = 3,
  kExitRuntimeError = 4,
};

struct AnalysisOptions {
  std::size_t probe_batch = 16;
  std::size_t probe_len = 16;
  double sigma_bound = 1.1;  // init-stats --assert-bound threshold
  std::size_t bound_samples = 100000;
  double fd_step = 1e-5;
  double fd_tolerance = 1e-4;

  void validate() const;
};

nlohmann::json to_json(const AnalysisOptions& opts);
AnalysisOptions analysis_options_from_json(const nlohmann::json& j, AnalysisOptions base = {});

struct CliConfig {
  ModelConfig model;
  TrainConfig train;
  TaskSpec task;
  AnalysisOptions analysis;
};

nlohmann::json to_json(const CliConfig& cfg);
// Keys: "seed", "model", "train", "task", "analysis". A top-level seed sets
// both the train and task seeds. Unknown keys raise ConfigError.
CliConfig cli_config_from_json(const nlohmann::json& j, CliConfig base = {});
CliConfig load_cli_config_file(const std::string& path, CliConfig base = {});

// Values given on the command line; unset fields keep the file/default value.
struct SharedFlags {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> order;
  std::optional<std::string> init;
  std::optional<std::size_t> enc;
  std::optional<std::size_t> dec;
  std::optional<std::size_t> d_model;
  std::optional<std::size_t> heads;
  std::optional<std::string> task;
};

// defaults < config file < flags. Throws ConfigError.
CliConfig resolve_config(const SharedFlags& flags, CliConfig defaults = {});

// --out, else $DEEPNORM_OUT, else "deepnorm-out".
std::string resolve_out_dir(const std::optional<std::string>& flag);

int cmd_init_stats(const CliConfig& cfg, const std::string& out_dir, bool assert_bound, std::ostream& log);

struct BoundCheckRequest {
  // Either a named suite ("default") or a single distribution.
  std::optional<std::string> suite;
  std::optional<BoundedDistributionSpec> single;
  // Additional randomized specs drawn from the seed.
  std::size_t random_specs = 0;
};

// Uniformly random kind, support and shape parameters.
BoundedDistributionSpec random_bounded_spec(Rng& rng);

int cmd_bound_check(const CliConfig& cfg, const BoundCheckRequest& request, const std::string& out_dir,
                    std::ostream& log);

// Audits cfg.model; the executable defaults it to micro_model_config().
int cmd_grad_check(const CliConfig& cfg, const std::string& out_dir, const std::string& corrupt_parameter,
                   std::ostream& log);

int cmd_train(const CliConfig& cfg, const std::string& out_dir, const std::atomic<bool>* stop, std::ostream& log);

int cmd_grid(const CliConfig& cfg, const GridSpec& grid, const std::string& out_dir, const std::atomic<bool>* stop,
             std::ostream& log);

struct DecodeRequest {
  std::string checkpoint;
  // Lines of space-separated source ids, optionally followed by a tab and
  // the expected target.
  std::vector<std::string> inputs;
  std::size_t max_len = 0;  // 0: max_seq_len of the checkpoint
};

int cmd_decode(const DecodeRequest& request, const std::string& out_dir, std::ostream& log);

}  // namespace deepnorm
