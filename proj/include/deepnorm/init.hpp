#pragma once

// Uniform initializers: the Glorot baseline and the Lipschitz-constrained
// bounds for embeddings (e) and linear weights (l).

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "deepnorm/rng.hpp"
#include "deepnorm/tensor.hpp"

namespace deepnorm {

enum class InitKind { Glorot, LipschitzLinear, LipschitzEmbedding };
enum class InitFamily { Glorot, Lipschitz };

std::string_view to_string(InitFamily family);
InitFamily parse_init_family(std::string_view text);

// One initializer with the half-width of its uniform support.
struct InitScheme {
  InitKind kind;
  std::size_t isize = 0;  // Glorot, LipschitzLinear
  std::size_t osize = 0;  // Glorot
  std::size_t esize = 0;  // LipschitzEmbedding
  std::size_t vsize = 0;  // LipschitzEmbedding

  static InitScheme glorot(std::size_t isize, std::size_t osize);
  static InitScheme lipschitz_linear(std::size_t isize, std::size_t osize);
  static InitScheme lipschitz_embedding(std::size_t vsize, std::size_t esize);

  // sqrt(6/(isize+osize)), sqrt(1/isize) or sqrt(2/(esize+vsize)).
  double bound() const;
  // Shape of the sampled matrix: [isize, osize] or [vsize, esize].
  Shape shape() const;
};

Tensor sample_uniform(const InitScheme& scheme, Rng& rng, bool requires_grad = true);

Tensor glorot_uniform(std::size_t isize, std::size_t osize, Rng& rng);
Tensor lipschitz_linear_uniform(std::size_t isize, std::size_t osize, Rng& rng);
Tensor lipschitz_embedding_uniform(std::size_t vsize, std::size_t esize, Rng& rng);

enum class ParamRole { LinearWeight, LinearBias, Embedding, NormGain, NormBias };

// Shape description of one model parameter. Linear weights are [isize, osize],
// embeddings are [vsize, esize], everything else is a vector.
struct ParamSpec {
  std::string name;
  ParamRole role;
  Shape shape;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered collection of named parameters.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor);
  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  const std::vector<NamedTensor>& entries() const { return entries_; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<NamedTensor> entries_;
};

// Each parameter draws from rng.split(name), so the result does not depend on
// the order of `specs`. LN gains start at 1, LN and linear biases at 0.
ParameterSet init_model_params(const std::vector<ParamSpec>& specs, InitFamily family, const Rng& rng);

}  // namespace deepnorm
