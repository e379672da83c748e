#include "deepnorm/init.hpp"

#include <algorithm>
#include <cmath>

#include "deepnorm/errors.hpp"

namespace deepnorm {

std::string_view to_string(InitFamily family) {
  return family == InitFamily::Glorot ? "glorot" : "lipschitz";
}

InitFamily parse_init_family(std::string_view text) {
  if (text == "glorot") return InitFamily::Glorot;
  if (text == "lipschitz") return InitFamily::Lipschitz;
  throw ConfigError("init_family: expected glorot or lipschitz, got '" + std::string(text) + "'");
}

namespace {

void require_positive(std::size_t value, const char* what) {
  if (value == 0) throw ContractError(std::string("init: ") + what + " must be >= 1");
}

}  // namespace

InitScheme InitScheme::glorot(std::size_t isize, std::size_t osize) {
  require_positive(isize, "isize");
  require_positive(osize, "osize");
  return InitScheme{InitKind::Glorot, isize, osize, 0, 0};
}

InitScheme InitScheme::lipschitz_linear(std::size_t isize, std::size_t osize) {
  require_positive(isize, "isize");
  require_positive(osize, "osize");
  return InitScheme{InitKind::LipschitzLinear, isize, osize, 0, 0};
}

InitScheme InitScheme::lipschitz_embedding(std::size_t vsize, std::size_t esize) {
  require_positive(vsize, "vsize");
  require_positive(esize, "esize");
  return InitScheme{InitKind::LipschitzEmbedding, 0, 0, esize, vsize};
}

double InitScheme::bound() const {
  switch (kind) {
    case InitKind::Glorot:
      return std::sqrt(6.0 / static_cast<double>(isize + osize));
    case InitKind::LipschitzLinear:
      return std::sqrt(1.0 / static_cast<double>(isize));
    case InitKind::LipschitzEmbedding:
      return std::sqrt(2.0 / static_cast<double>(esize + vsize));
  }
  return 0.0;
}

Shape InitScheme::shape() const {
  if (kind == InitKind::LipschitzEmbedding) return {vsize, esize};
  return {isize, osize};
}

Tensor sample_uniform(const InitScheme& scheme, Rng& rng, bool requires_grad) {
  const auto s = scheme.shape();
  const double b = scheme.bound();
  std::vector<double> values(shape_numel(s));
  for (auto& v : values) v = rng.symmetric(b);
  return Tensor::from_data(s, std::move(values), requires_grad);
}

Tensor glorot_uniform(std::size_t isize, std::size_t osize, Rng& rng) {
  return sample_uniform(InitScheme::glorot(isize, osize), rng);
}

Tensor lipschitz_linear_uniform(std::size_t isize, std::size_t osize, Rng& rng) {
  return sample_uniform(InitScheme::lipschitz_linear(isize, osize), rng);
}

Tensor lipschitz_embedding_uniform(std::size_t vsize, std::size_t esize, Rng& rng) {
  return sample_uniform(InitScheme::lipschitz_embedding(vsize, esize), rng);
}

void ParameterSet::add(std::string name, Tensor tensor) {
  if (contains(name)) throw ContractError("parameter set: duplicate name " + name);
  entries_.push_back({std::move(name), std::move(tensor)});
}

const Tensor& ParameterSet::get(std::string_view name) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const NamedTensor& e) { return e.name == name; });
  if (it == entries_.end()) throw ContractError("parameter set: no parameter named " + std::string(name));
  return it->tensor;
}

bool ParameterSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const NamedTensor& e) { return e.name == name; });
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

ParameterSet init_model_params(const std::vector<ParamSpec>& specs, InitFamily family, const Rng& rng) {
  ParameterSet params;
  for (const auto& spec : specs) {
    auto stream = rng.split(spec.name);
    switch (spec.role) {
      case ParamRole::LinearWeight: {
        if (spec.shape.size() != 2) throw ContractError("init: linear weight " + spec.name + " must be 2-D");
        const auto scheme = family == InitFamily::Glorot
                                ? InitScheme::glorot(spec.shape[0], spec.shape[1])
                                : InitScheme::lipschitz_linear(spec.shape[0], spec.shape[1]);
        params.add(spec.name, sample_uniform(scheme, stream));
        break;
      }
      case ParamRole::Embedding: {
        if (spec.shape.size() != 2) throw ContractError("init: embedding " + spec.name + " must be 2-D");
        // Glorot treats the table as an ordinary [vsize, esize] matrix.
        const auto scheme = family == InitFamily::Glorot
                                ? InitScheme::glorot(spec.shape[0], spec.shape[1])
                                : InitScheme::lipschitz_embedding(spec.shape[0], spec.shape[1]);
        params.add(spec.name, sample_uniform(scheme, stream));
        break;
      }
      case ParamRole::NormGain:
        params.add(spec.name, Tensor::full(spec.shape, 1.0, true));
        break;
      case ParamRole::LinearBias:
      case ParamRole::NormBias:
        params.add(spec.name, Tensor::zeros(spec.shape, true));
        break;
    }
  }
  return params;
}

}  // namespace deepnorm
