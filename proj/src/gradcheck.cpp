#include "deepnorm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "deepnorm/errors.hpp"
#include "deepnorm/report.hpp"
#include "deepnorm/train.hpp"

namespace deepnorm {

ModelConfig micro_model_config() {
  ModelConfig c;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  return c;
}

Batch make_grad_check_batch(std::size_t vocab_size, std::uint64_t seed) {
  if (vocab_size <= static_cast<std::size_t>(kFirstContentId)) {
    throw ConfigError("vocab_size: too small for a gradient-check batch");
  }
  Rng rng = Rng(seed).split("grad-check");
  const std::size_t content = vocab_size - kFirstContentId;
  Dataset examples;
  for (std::size_t len : {5, 3}) {
    Example e;
    for (std::size_t i = 0; i < len; ++i) e.src.push_back(static_cast<std::int32_t>(kFirstContentId + rng.below(content)));
    e.tgt = derive_target(TaskKind::Copy, e.src);
    examples.push_back(std::move(e));
  }
  return make_batch({&examples[0], &examples[1]});
}

namespace {

double batch_loss(const TransformerModel& model, const Batch& batch) {
  return cross_entropy_loss(forward(model, batch.src, batch.tgt_in), batch.tgt_out, kPadId, 0.0).item();
}

}  // namespace

GradCheckReport finite_difference_check(TransformerModel& model, const Batch& batch, const GradCheckOptions& options) {
  if (!(options.h > 0.0)) throw ConfigError("fd_step: must be positive");
  if (!options.corrupt_parameter.empty() && !model.parameters().contains(options.corrupt_parameter)) {
    throw ConfigError("corrupt_parameter: no parameter named '" + options.corrupt_parameter + "'");
  }
  model.zero_grad();
  cross_entropy_loss(forward(model, batch.src, batch.tgt_in), batch.tgt_out, kPadId, 0.0).backward();

  GradCheckReport report;
  NoGradGuard no_grad;
  for (const auto& entry : model.parameters()) {
    auto param = entry.tensor;
    std::vector<double> analytic(param.grad().begin(), param.grad().end());
    analytic.resize(param.numel(), 0.0);
    if (entry.name == options.corrupt_parameter) analytic[0] += options.corrupt_delta;

    ParamGradCheck check;
    check.name = entry.name;
    check.elements = param.numel();
    auto data = param.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + options.h;
      const double up = batch_loss(model, batch);
      data[i] = saved - options.h;
      const double down = batch_loss(model, batch);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.h);
      const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), options.floor);
      if (i == 0 || err > check.max_rel_error) {
        check.max_rel_error = err;
        check.worst_index = i;
        check.analytic = analytic[i];
        check.numeric = numeric;
      }
    }
    if (report.params.empty() || check.max_rel_error > report.max_rel_error) {
      report.max_rel_error = check.max_rel_error;
      report.worst_parameter = check.name;
    }
    report.params.push_back(std::move(check));
  }
  model.zero_grad();
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

nlohmann::json to_json(const GradCheckReport& report) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : report.params) {
    params.push_back({{"name", p.name},
                      {"elements", p.elements},
                      {"max_rel_error", p.max_rel_error},
                      {"worst_index", p.worst_index},
                      {"analytic", p.analytic},
                      {"numeric", p.numeric}});
  }
  return nlohmann::json{{"passed", report.passed},
                        {"max_rel_error", report.max_rel_error},
                        {"worst_parameter", report.worst_parameter},
                        {"parameters", params}};
}

std::string grad_check_csv(const GradCheckReport& report) {
  std::ostringstream os;
  os << "parameter,elements,max_rel_error,worst_index,analytic,numeric\n";
  for (const auto& p : report.params) {
    os << p.name << ',' << p.elements << ',' << format_double(p.max_rel_error) << ',' << p.worst_index << ','
       << format_double(p.analytic) << ',' << format_double(p.numeric) << '\n';
  }
  return os.str();
}

}  // namespace deepnorm
