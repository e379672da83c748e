#pragma once

// Diagnostics for the residual stream: pre-normalization statistics and the
// w/sigma multiplier, the std(x) < b - a bound for bounded distributions,
// spectral-norm Lipschitz estimates of linear maps and per-sublayer gradient
// norms.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepnorm/model.hpp"
#include "deepnorm/rng.hpp"
#include "deepnorm/tensor.hpp"

namespace deepnorm {

struct LayerStats {
  Stack stack = Stack::Encoder;
  std::size_t layer_index = 0;
  SublayerKind sublayer_kind = SublayerKind::SelfAttention;
  double mu = 0.0;            // mean of (in_model + in_res), averaged over positions
  double sigma = 0.0;         // its normalizing std, averaged over positions
  double w_over_sigma = 0.0;  // mean_i(w_i) / sigma per position, averaged
  double grad_norm = 0.0;     // L2 norm of this sublayer's parameter gradients
};

// One LayerStats per sublayer, in forward order. sigma is the layer-norm
// scale sqrt(var + eps) computed per non-pad position. The model is not
// modified.
std::vector<LayerStats> residual_stream_stats(const TransformerModel& model, const Tokens& src, const Tokens& tgt_in,
                                              ForwardProbe* probe_out = nullptr);

std::vector<LayerStats> stats_from_probe(const ForwardProbe& probe, double ln_eps);

// Random full-length probe batch with content ids only.
struct ProbeBatch {
  Tokens src;
  Tokens tgt_in;
};
ProbeBatch make_probe_batch(std::size_t vocab_size, std::size_t batch, std::size_t len, std::uint64_t seed);

enum class DistributionKind { Uniform, Beta, TwoPoint, TruncatedNormal };

std::string_view to_string(DistributionKind kind);
DistributionKind parse_distribution_kind(std::string_view text);

struct BoundedDistributionSpec {
  DistributionKind kind = DistributionKind::Uniform;
  double a = 0.0;
  double b = 1.0;
  double alpha = 2.0;  // Beta shape
  double beta = 2.0;   // Beta shape
  double p = 0.5;      // TwoPoint: probability of mass at a
  double mean = 0.5;   // TruncatedNormal location (before truncation)
  double sd = 0.25;    // TruncatedNormal scale; 0 gives a point mass at clamp(mean)

  std::string label() const;
  // Closed-form std when available (all kinds except TruncatedNormal with sd > 0).
  std::optional<double> exact_std() const;
};

double sample_bounded(const BoundedDistributionSpec& spec, Rng& rng);

struct StdBoundReport {
  BoundedDistributionSpec spec;
  std::size_t n_samples = 0;
  double empirical_std = 0.0;
  double bound = 0.0;   // b - a
  double margin = 0.0;  // bound - empirical_std
  bool holds = false;   // empirical_std < bound, strictly
  double min_sample = 0.0;
  double max_sample = 0.0;
};

StdBoundReport verify_std_bound(const BoundedDistributionSpec& spec, std::size_t n_samples, Rng& rng);

// Shipped suite over supports [0,1], [-1,1], [-0.5,2].
std::vector<BoundedDistributionSpec> default_bound_suite();

struct LipschitzEstimate {
  double k_hat = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

// Largest singular value of W (2-D) by power iteration on W W^T, i.e. the
// Euclidean Lipschitz constant of x -> xW.
LipschitzEstimate estimate_lipschitz_linear(const Tensor& w, double tol = 1e-8, std::size_t max_iterations = 1000);

using LossFn = std::function<Tensor(const Tensor& logits)>;

struct GradProfile {
  std::vector<LayerStats> stats;  // grad_norm populated, plus forward stats
  // Deepest over shallowest encoder sublayer gradient norm (0 if undefined).
  double deep_to_shallow_ratio = 0.0;
};

// One forward + backward. Parameter gradients are reset before and after.
GradProfile grad_norm_profile(TransformerModel& model, const Tokens& src, const Tokens& tgt_in, const LossFn& loss_fn);

// Names of the parameters owned by a sublayer (attention or FFN plus its LN).
std::vector<std::string> sublayer_parameter_names(const TransformerModel& model, Stack stack, std::size_t layer,
                                                  SublayerKind kind);

nlohmann::json to_json(const LayerStats& s);
nlohmann::json to_json(const StdBoundReport& r);
std::string layer_stats_csv_header();
std::string to_csv_row(const LayerStats& s);

}  // namespace deepnorm
