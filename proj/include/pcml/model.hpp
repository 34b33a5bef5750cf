#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pcml/autodiff.hpp"
#include "pcml/parallel.hpp"
#include "pcml/physics.hpp"
#include "pcml/project.hpp"

namespace pcml {

/// Paired inputs (N x input dim) and observed outputs (N x output dim).
struct Dataset {
  Matrix u;
  Matrix y;

  Index size() const { return u.rows(); }
  /// Throws ValidationError unless N >= 1, row counts agree and all entries are finite.
  void validate() const;
};

/// One named tensor inside the flat parameter vector.
struct ParamSlice {
  std::string component;
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;
  Index size() const { return rows * cols; }
};

class ParameterLayout {
 public:
  void add(std::string component, std::string name, Index rows, Index cols);
  Index size() const { return size_; }
  const std::vector<ParamSlice>& slices() const { return slices_; }
  friend bool operator==(const ParameterLayout& a, const ParameterLayout& b);

 private:
  std::vector<ParamSlice> slices_;
  Index size_ = 0;
};

/// Flat parameter vector theta together with its layout.
struct ParameterVector {
  std::shared_ptr<const ParameterLayout> layout;
  Vector values;

  Index size() const { return values.size(); }
};

ParameterVector flatten(std::shared_ptr<const ParameterLayout> layout,
                        std::span<const Matrix> tensors);
std::vector<Matrix> unflatten(const ParameterVector& theta);

/// Fully connected tanh network; the last layer is affine.
class MLComponent {
 public:
  explicit MLComponent(std::vector<Index> layer_sizes);

  const std::vector<Index>& layer_sizes() const { return sizes_; }
  Index input_dim() const { return sizes_.front(); }
  Index output_dim() const { return sizes_.back(); }
  Index layer_count() const { return static_cast<Index>(sizes_.size()) - 1; }
  Index parameter_count() const;

  /// Appends W_k (n_{k+1} x n_k) and b_k (n_{k+1} x 1) for every layer.
  void append_layout(ParameterLayout& layout, const std::string& component) const;
  /// `tensors` holds W_0, b_0, W_1, b_1, ... in layout order.
  ad::Node build(ad::ExprGraph& g, std::span<const ad::Node> tensors, ad::Node input) const;

 private:
  std::vector<Index> sizes_;
};

/// Algebraic physics map y_hat = phi_P(u, z, theta_P) with a per-parameter
/// trainability mask. `latent_dim` is zero for maps that ignore z.
struct PhysicsComponent {
  using Map = std::function<ad::Node(ad::ExprGraph&, ad::Node u, std::optional<ad::Node> z,
                                     ad::Node theta_p)>;

  Index input_dim = 0;
  Index latent_dim = 0;
  Index output_dim = 0;
  Map map;
  Vector nominal;
  std::vector<bool> trainable;

  /// y_hat = z.
  static PhysicsComponent pass_through(Index input_dim, Index dim);
  /// y_hat = z + theta_P.
  static PhysicsComponent offset(Index input_dim, Vector nominal, std::vector<bool> trainable);
  /// y_hat = G u + theta_P, independent of z.
  static PhysicsComponent affine_in_input(Matrix G, Vector nominal, std::vector<bool> trainable);
};

enum class Topology { ml_to_p, p_to_ml, bidirectional };

std::string_view to_string(Topology t);
Topology topology_from_string(std::string_view s);

/// Latent handling for ML -> P models. Every row's z becomes a separate leaf
/// bridged to its source node; with `project` set, the leaf holds the
/// projection of z onto `constraints`, otherwise z itself.
struct LatentProjection {
  const ConstraintSet* constraints = nullptr;
  ProjectionOptions options;
  bool project = true;
};

/// Links a projected latent leaf back to the raw latent node it came from.
struct LatentBridge {
  ad::Node source;
  ad::Node projected;
  Index row = 0;
  Vector raw;
  ProjectionResult result;
};

/// Graph built for a batch of inputs.
///
/// `nodes[i]` is where row i's output cotangent enters the graph. When
/// `cotangent_maps` is non-empty, the cotangent g is mapped to M_i' g first;
/// this carries implicit-function backward passes for fixed-point layers.
struct BuildOutput {
  std::vector<ad::Node> nodes;
  std::vector<Vector> values;
  std::vector<Vector> latents;
  std::vector<Matrix> cotangent_maps;
  std::vector<LatentBridge> bridges;
};

/// Common interface of differentiable models trained by this library.
class Model {
 public:
  virtual ~Model() = default;

  const ParameterLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParameterLayout>& layout_ptr() const { return layout_; }
  virtual Index input_dim() const = 0;
  virtual Index output_dim() const = 0;
  virtual Index latent_dim() const { return 0; }
  /// True when row i's prediction depends only on row i of the input.
  virtual bool rows_independent() const { return true; }
  virtual std::string describe() const = 0;

  /// Appends one prediction per row of U to the graph.
  virtual BuildOutput build(ad::ExprGraph& g, std::span<const ad::Node> params, const Matrix& U,
                            const LatentProjection* latent = nullptr) const = 0;

  /// Xavier-uniform weights, zero biases, nominal physics parameters.
  ParameterVector init_parameters(std::uint64_t seed) const;
  /// Per-entry mask over theta; frozen physics parameters are false.
  std::vector<bool> trainable_mask() const;

  /// Leaves for every tensor of theta, in layout order.
  std::vector<ad::Node> bind(ad::ExprGraph& g, const ParameterVector& theta) const;

 protected:
  std::shared_ptr<const ParameterLayout> layout_;
  std::vector<bool> mask_;
  Vector nominal_;
};

struct FixedPointOptions {
  double damping = 0.5;
  int max_iters = 500;
  double tol = 1e-10;
};

struct ForwardResult {
  Vector y_hat;
  Vector z;
  int iterations = 0;
  double residual = 0.0;
  std::vector<double> residual_history;
};

/// ML component + physics component + coupling topology.
///
/// ML -> P:   z = phi_ML(u), y_hat = phi_P(u, z).
/// P -> ML:   p = phi_P(u), y_hat = p + phi_ML([u; p]); z reports p.
/// Bidirectional: z = phi_ML([u; y_hat]), y_hat = phi_P(u, z), solved by
/// damped Picard iteration and differentiated through the fixed point.
class PCMLModel : public Model {
 public:
  PCMLModel(MLComponent ml, PhysicsComponent physics, Topology topology,
            FixedPointOptions fixed_point = {});

  const MLComponent& ml() const { return ml_; }
  const PhysicsComponent& physics() const { return physics_; }
  Topology topology() const { return topology_; }
  const FixedPointOptions& fixed_point() const { return fp_; }

  Index input_dim() const override { return physics_.input_dim; }
  Index output_dim() const override { return physics_.output_dim; }
  Index latent_dim() const override;
  std::string describe() const override;

  BuildOutput build(ad::ExprGraph& g, std::span<const ad::Node> params, const Matrix& U,
                    const LatentProjection* latent = nullptr) const override;

  /// Bidirectional only: residuals [z - phi_ML([u; w]); w - phi_P(u, z)] for
  /// free latent z and output w nodes.
  std::pair<ad::Node, ad::Node> coupling_residual(ad::ExprGraph& g, std::span<const ad::Node> params,
                                                  ad::Node u, ad::Node z, ad::Node w) const;

  /// Split of theta's leaves into the ML tensors and the physics tensor.
  std::span<const ad::Node> ml_params(std::span<const ad::Node> params) const {
    return params.first(static_cast<std::size_t>(2 * ml_.layer_count()));
  }
  ad::Node physics_param(std::span<const ad::Node> params) const { return params.back(); }

  /// Solves the bidirectional coupling for one input by damped Picard
  /// iteration. Optionally returns d phi_P(u, phi_ML([u; y])) / dy at the fixed point.
  ForwardResult solve_fixed_point(const Vector& u, std::span<const Matrix> tensors,
                                  Matrix* jacobian = nullptr) const;

 private:
  MLComponent ml_;
  PhysicsComponent physics_;
  Topology topology_;
  FixedPointOptions fp_;
};

/// Neural differential model dx/dt = phi_ML(x) integrated with RK4 from a
/// known initial state. Inputs are observation times on the integrator grid;
/// outputs are the states at those times.
class NeuralODEModel : public Model {
 public:
  NeuralODEModel(MLComponent rhs, Vector x0, double t0, IntegratorConfig integrator);

  const MLComponent& rhs() const { return rhs_; }
  const Vector& x0() const { return x0_; }
  double t0() const { return t0_; }
  const IntegratorConfig& integrator() const { return integrator_; }

  Index input_dim() const override { return 1; }
  Index output_dim() const override { return x0_.size(); }
  bool rows_independent() const override { return false; }
  std::string describe() const override;

  BuildOutput build(ad::ExprGraph& g, std::span<const ad::Node> params, const Matrix& U,
                    const LatentProjection* latent = nullptr) const override;

  /// Observation-grid index of time t; throws if t is off the grid or before t0.
  Index grid_index(double t) const;

  /// Restricts the learned right-hand side to the null space of A, so that
  /// A x(t) = A x0 holds along every RK4 trajectory. A needs full row rank.
  void conserve(const Matrix& A);
  /// Empty unless conserve() was called.
  const Matrix& rhs_projector() const { return projector_; }

 private:
  MLComponent rhs_;
  Matrix projector_;
  Vector x0_;
  double t0_;
  IntegratorConfig integrator_;
};

/// Single-input evaluation of a PCML model.
ForwardResult forward(const PCMLModel& model, const Vector& u, const ParameterVector& theta);

/// Row-wise predictions (Y_hat, Z). Row order is preserved; errors carry the row index.
std::pair<Matrix, Matrix> predict_batch(const Model& model, const Matrix& U,
                                        const ParameterVector& theta,
                                        Execution exec = Execution::parallel);

}  // namespace pcml
