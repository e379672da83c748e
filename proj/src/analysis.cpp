#include "deepnorm/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "deepnorm/errors.hpp"
#include "deepnorm/report.hpp"

namespace deepnorm {

// ---------------------------------------------------------------------------
// Residual stream statistics

std::vector<LayerStats> stats_from_probe(const ForwardProbe& probe, double ln_eps) {
  std::vector<LayerStats> out;
  out.reserve(probe.records.size());
  for (const auto& rec : probe.records) {
    // V1 already normalized the residual sum; V2 normalized in_res instead.
    const auto row = rec.order == NormOrder::V1 ? rec.io.norm_stats : row_statistics(rec.io.residual_sum, ln_eps);
    double mean_gain = 0.0;
    for (double w : rec.gain) mean_gain += w;
    mean_gain /= static_cast<double>(rec.gain.size());

    LayerStats s;
    s.stack = rec.stack;
    s.layer_index = rec.layer;
    s.sublayer_kind = rec.kind;
    std::size_t count = 0;
    for (std::size_t r = 0; r < row.mean.size(); ++r) {
      if (!rec.row_valid.empty() && !rec.row_valid[r]) continue;
      s.mu += row.mean[r];
      s.sigma += row.sigma[r];
      s.w_over_sigma += mean_gain / row.sigma[r];
      ++count;
    }
    if (count > 0) {
      s.mu /= static_cast<double>(count);
      s.sigma /= static_cast<double>(count);
      s.w_over_sigma /= static_cast<double>(count);
    }
    out.push_back(s);
  }
  return out;
}

std::vector<LayerStats> residual_stream_stats(const TransformerModel& model, const Tokens& src, const Tokens& tgt_in,
                                              ForwardProbe* probe_out) {
  NoGradGuard no_grad;
  ForwardProbe probe;
  ForwardOptions opts;
  opts.probe = &probe;
  forward(model, src, tgt_in, opts);
  auto stats = stats_from_probe(probe, model.config().ln_eps);
  if (probe_out) *probe_out = std::move(probe);
  return stats;
}

ProbeBatch make_probe_batch(std::size_t vocab_size, std::size_t batch, std::size_t len, std::uint64_t seed) {
  if (vocab_size <= static_cast<std::size_t>(kFirstContentId)) throw ConfigError("vocab_size: no content ids");
  if (batch == 0 || len == 0) throw ConfigError("probe: batch and len must be >= 1");
  Rng rng = Rng(seed).split("probe");
  const auto alphabet = static_cast<std::uint64_t>(vocab_size) - static_cast<std::uint64_t>(kFirstContentId);
  ProbeBatch p{Tokens::filled(batch, len), Tokens::filled(batch, len)};
  for (auto& id : p.src.ids) id = kFirstContentId + static_cast<std::int32_t>(rng.below(alphabet));
  for (std::size_t b = 0; b < batch; ++b) {
    p.tgt_in.at(b, 0) = kBosId;
    for (std::size_t t = 1; t < len; ++t) {
      p.tgt_in.at(b, t) = kFirstContentId + static_cast<std::int32_t>(rng.below(alphabet));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Bounded distributions

std::string_view to_string(DistributionKind kind) {
  switch (kind) {
    case DistributionKind::Uniform:
      return "uniform";
    case DistributionKind::Beta:
      return "beta";
    case DistributionKind::TwoPoint:
      return "two-point";
    case DistributionKind::TruncatedNormal:
      return "truncated-normal";
  }
  return "";
}

DistributionKind parse_distribution_kind(std::string_view text) {
  if (text == "uniform") return DistributionKind::Uniform;
  if (text == "beta") return DistributionKind::Beta;
  if (text == "two-point") return DistributionKind::TwoPoint;
  if (text == "truncated-normal") return DistributionKind::TruncatedNormal;
  throw ConfigError("dist: expected uniform, beta, two-point or truncated-normal, got '" + std::string(text) + "'");
}

std::string BoundedDistributionSpec::label() const {
  std::ostringstream os;
  os << to_string(kind) << "[" << format_double(a) << "," << format_double(b) << "]";
  switch (kind) {
    case DistributionKind::Beta:
      os << "(alpha=" << format_double(alpha) << ",beta=" << format_double(beta) << ")";
      break;
    case DistributionKind::TwoPoint:
      os << "(p=" << format_double(p) << ")";
      break;
    case DistributionKind::TruncatedNormal:
      os << "(mean=" << format_double(mean) << ",sd=" << format_double(sd) << ")";
      break;
    case DistributionKind::Uniform:
      break;
  }
  return os.str();
}

namespace {

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

void validate(const BoundedDistributionSpec& s) {
  if (!(s.a < s.b)) {
    throw ContractError("bounded distribution: support requires a < b, got [" + format_double(s.a) + ", " +
                        format_double(s.b) + "]");
  }
  switch (s.kind) {
    case DistributionKind::Beta:
      if (!(s.alpha > 0.0 && s.beta > 0.0)) throw ContractError("beta distribution: shapes must be positive");
      break;
    case DistributionKind::TwoPoint:
      if (!(s.p >= 0.0 && s.p <= 1.0)) throw ContractError("two-point distribution: p must be in [0, 1]");
      break;
    case DistributionKind::TruncatedNormal:
      if (!(s.sd >= 0.0)) throw ContractError("truncated normal: sd must be >= 0");
      break;
    case DistributionKind::Uniform:
      break;
  }
}

}  // namespace

std::optional<double> BoundedDistributionSpec::exact_std() const {
  const double width = b - a;
  switch (kind) {
    case DistributionKind::Uniform:
      return width / std::sqrt(12.0);
    case DistributionKind::Beta: {
      const double s = alpha + beta;
      return width * std::sqrt(alpha * beta / (s * s * (s + 1.0)));
    }
    case DistributionKind::TwoPoint:
      return width * std::sqrt(p * (1.0 - p));
    case DistributionKind::TruncatedNormal: {
      if (sd == 0.0) return 0.0;
      const double lo = (a - mean) / sd;
      const double hi = (b - mean) / sd;
      const double z = normal_cdf(hi) - normal_cdf(lo);
      if (!(z > 1e-12)) return std::nullopt;
      const double t = (normal_pdf(lo) - normal_pdf(hi)) / z;
      const double var = sd * sd * (1.0 + (lo * normal_pdf(lo) - hi * normal_pdf(hi)) / z - t * t);
      return std::sqrt(std::max(var, 0.0));
    }
  }
  return std::nullopt;
}

double sample_bounded(const BoundedDistributionSpec& s, Rng& rng) {
  switch (s.kind) {
    case DistributionKind::Uniform:
      return s.a + (s.b - s.a) * rng.uniform_open();
    case DistributionKind::Beta: {
      std::gamma_distribution<double> ga(s.alpha, 1.0);
      std::gamma_distribution<double> gb(s.beta, 1.0);
      const double x = ga(rng);
      const double y = gb(rng);
      const double u = (x + y) > 0.0 ? x / (x + y) : 0.5;
      return std::clamp(s.a + (s.b - s.a) * u, s.a, s.b);
    }
    case DistributionKind::TwoPoint:
      return rng.uniform_open() < s.p ? s.a : s.b;
    case DistributionKind::TruncatedNormal: {
      if (s.sd == 0.0) return std::clamp(s.mean, s.a, s.b);
      std::normal_distribution<double> normal(s.mean, s.sd);
      for (int attempt = 0; attempt < 1'000'000; ++attempt) {
        const double x = normal(rng);
        if (x >= s.a && x <= s.b) return x;
      }
      throw ContractError("truncated normal: support [" + format_double(s.a) + ", " + format_double(s.b) +
                          "] has negligible mass");
    }
  }
  return s.a;
}

StdBoundReport verify_std_bound(const BoundedDistributionSpec& spec, std::size_t n_samples, Rng& rng) {
  validate(spec);
  if (n_samples < 1000) throw ContractError("verify_std_bound: n_samples must be >= 1000");
  std::vector<double> xs(n_samples);
  for (auto& x : xs) x = sample_bounded(spec, rng);
  double total = 0.0;
  for (double x : xs) total += x;
  const double mu = total / static_cast<double>(n_samples);
  double sq = 0.0;
  for (double x : xs) sq += (x - mu) * (x - mu);

  StdBoundReport r;
  r.spec = spec;
  r.n_samples = n_samples;
  r.empirical_std = std::sqrt(sq / static_cast<double>(n_samples));
  r.bound = spec.b - spec.a;
  r.margin = r.bound - r.empirical_std;
  r.holds = r.empirical_std < r.bound;
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  r.min_sample = *lo;
  r.max_sample = *hi;
  return r;
}

std::vector<BoundedDistributionSpec> default_bound_suite() {
  using K = DistributionKind;
  std::vector<BoundedDistributionSpec> suite;
  const std::pair<double, double> supports[] = {{0.0, 1.0}, {-1.0, 1.0}, {-0.5, 2.0}};
  for (auto [a, b] : supports) {
    const double mid = 0.5 * (a + b);
    const double w = b - a;
    suite.push_back({K::Uniform, a, b});
    suite.push_back({K::TwoPoint, a, b, 2.0, 2.0, 0.5});  // worst case: (b - a) / 2
    suite.push_back({K::TwoPoint, a, b, 2.0, 2.0, 0.1});
    suite.push_back({K::Beta, a, b, 0.5, 0.5});
    suite.push_back({K::Beta, a, b, 2.0, 5.0});
    suite.push_back({K::TruncatedNormal, a, b, 2.0, 2.0, 0.5, mid, 0.25 * w});
    suite.push_back({K::TruncatedNormal, a, b, 2.0, 2.0, 0.5, a, w});
    suite.push_back({K::TruncatedNormal, a, b, 2.0, 2.0, 0.5, mid, 0.0});  // point mass
  }
  return suite;
}

// ---------------------------------------------------------------------------
// Lipschitz estimation

LipschitzEstimate estimate_lipschitz_linear(const Tensor& w, double tol, std::size_t max_iterations) {
  if (w.rank() != 2) throw DimensionError("estimate_lipschitz_linear: expected a 2-D tensor, got " + to_string(w.shape()));
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMatrix> m(w.data().data(), static_cast<Eigen::Index>(w.dim(0)),
                                      static_cast<Eigen::Index>(w.dim(1)));
  Rng rng(0x5eedULL);
  Eigen::VectorXd v(m.rows());
  for (auto& x : v) x = 2.0 * rng.uniform_open() - 1.0;
  v.normalize();

  LipschitzEstimate est;
  double previous = 0.0;
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    // v is a unit input (row) vector; |v W| is a lower bound on sigma_max.
    const Eigen::VectorXd image = m.transpose() * v;
    const double k = image.norm();
    est.iterations = it;
    est.k_hat = std::max(est.k_hat, k);
    if (k == 0.0) {
      est.converged = true;
      break;
    }
    if (it > 1 && std::abs(k - previous) <= tol * std::max(k, 1.0)) {
      est.converged = true;
      break;
    }
    previous = k;
    Eigen::VectorXd next = m * image;
    const double norm = next.norm();
    if (norm == 0.0) {
      est.converged = true;
      break;
    }
    v = next / norm;
  }
  return est;
}

// ---------------------------------------------------------------------------
// Gradient profile

std::vector<std::string> sublayer_parameter_names(const TransformerModel& model, Stack stack, std::size_t layer,
                                                  SublayerKind kind) {
  const std::string base = std::string(stack == Stack::Encoder ? "enc." : "dec.") + std::to_string(layer) + "." +
                           std::string(to_string(kind));
  const std::string own = base + ".";
  const std::string norm = base + "_norm.";
  std::vector<std::string> names;
  for (const auto& e : model.parameters()) {
    if (e.name.starts_with(own) || e.name.starts_with(norm)) names.push_back(e.name);
  }
  return names;
}

GradProfile grad_norm_profile(TransformerModel& model, const Tokens& src, const Tokens& tgt_in, const LossFn& loss_fn) {
  model.zero_grad();
  ForwardProbe probe;
  ForwardOptions opts;
  opts.probe = &probe;
  auto logits = forward(model, src, tgt_in, opts);
  auto loss = loss_fn(logits);
  if (loss.requires_grad()) loss.backward();

  GradProfile profile;
  profile.stats = stats_from_probe(probe, model.config().ln_eps);
  for (auto& s : profile.stats) {
    double sq = 0.0;
    for (const auto& name : sublayer_parameter_names(model, s.stack, s.layer_index, s.sublayer_kind)) {
      for (double g : model.parameters().get(name).grad()) sq += g * g;
    }
    s.grad_norm = std::sqrt(sq);
  }
  const LayerStats* shallow = nullptr;
  const LayerStats* deep = nullptr;
  for (const auto& s : profile.stats) {
    if (s.stack != Stack::Encoder) continue;
    if (!shallow) shallow = &s;
    deep = &s;
  }
  if (shallow && deep && shallow->grad_norm > 0.0) profile.deep_to_shallow_ratio = deep->grad_norm / shallow->grad_norm;
  model.zero_grad();
  return profile;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const LayerStats& s) {
  return nlohmann::json{{"stack", to_string(s.stack)}, {"layer", s.layer_index},
                        {"sublayer", to_string(s.sublayer_kind)}, {"mu", s.mu},
                        {"sigma", s.sigma}, {"w_over_sigma", s.w_over_sigma},
                        {"grad_norm", s.grad_norm}};
}

nlohmann::json to_json(const StdBoundReport& r) {
  nlohmann::json j{{"dist", to_string(r.spec.kind)},
                   {"label", r.spec.label()},
                   {"a", r.spec.a},
                   {"b", r.spec.b},
                   {"n_samples", r.n_samples},
                   {"empirical_std", r.empirical_std},
                   {"bound", r.bound},
                   {"margin", r.margin},
                   {"holds", r.holds},
                   {"min_sample", r.min_sample},
                   {"max_sample", r.max_sample}};
  if (auto exact = r.spec.exact_std()) j["exact_std"] = *exact;
  return j;
}

std::string layer_stats_csv_header() { return "stack,layer,sublayer,mu,sigma,w_over_sigma,grad_norm"; }

std::string to_csv_row(const LayerStats& s) {
  std::ostringstream os;
  os << to_string(s.stack) << ',' << s.layer_index << ',' << to_string(s.sublayer_kind) << ',' << format_double(s.mu)
     << ',' << format_double(s.sigma) << ',' << format_double(s.w_over_sigma) << ',' << format_double(s.grad_norm);
  return os.str();
}

}  // namespace deepnorm
