#pragma once

// Finite-difference audit of every parameter gradient of a model under the
// training loss.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepnorm/data.hpp"
#include "deepnorm/model.hpp"

namespace deepnorm {

// d_model 8, 2 heads, d_ff 16, enc = dec = 2, vocab 11.
ModelConfig micro_model_config();

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-8;  // |analytic - numeric| / max(|numeric|, floor)
  // Test hook: adds corrupt_delta to the first analytic gradient element of
  // this parameter before comparison.
  std::string corrupt_parameter;
  double corrupt_delta = 1e-2;
};

struct ParamGradCheck {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;   // at worst_index
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  bool passed = false;
};

// Two padded copy-task sequences of different lengths.
Batch make_grad_check_batch(std::size_t vocab_size, std::uint64_t seed);

// Central differences on every element of every parameter, loss =
// cross-entropy of forward(src, tgt_in) against tgt_out. Parameters are
// restored and gradients cleared afterwards.
GradCheckReport finite_difference_check(TransformerModel& model, const Batch& batch,
                                        const GradCheckOptions& options = {});

nlohmann::json to_json(const GradCheckReport& report);
std::string grad_check_csv(const GradCheckReport& report);

}  // namespace deepnorm
