#include "pcml/model.hpp"

#include "rethrow.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace pcml {

void Dataset::validate() const {
  if (u.rows() < 1) throw ValidationError("dataset must contain at least one sample");
  if (u.rows() != y.rows()) {
    throw ValidationError("dataset has " + std::to_string(u.rows()) + " input rows but " +
                          std::to_string(y.rows()) + " output rows");
  }
  if (!u.allFinite() || !y.allFinite()) throw ValidationError("dataset contains non-finite entries");
}

void ParameterLayout::add(std::string component, std::string name, Index rows, Index cols) {
  slices_.push_back(ParamSlice{std::move(component), std::move(name), rows, cols, size_});
  size_ += rows * cols;
}

bool operator==(const ParameterLayout& a, const ParameterLayout& b) {
  if (a.size_ != b.size_ || a.slices_.size() != b.slices_.size()) return false;
  for (std::size_t i = 0; i < a.slices_.size(); ++i) {
    const auto& x = a.slices_[i];
    const auto& y = b.slices_[i];
    if (x.component != y.component || x.name != y.name || x.rows != y.rows || x.cols != y.cols ||
        x.offset != y.offset) {
      return false;
    }
  }
  return true;
}

ParameterVector flatten(std::shared_ptr<const ParameterLayout> layout,
                        std::span<const Matrix> tensors) {
  if (tensors.size() != layout->slices().size()) {
    throw ShapeError("flatten: expected " + std::to_string(layout->slices().size()) +
                     " tensors, got " + std::to_string(tensors.size()));
  }
  Vector values(layout->size());
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const ParamSlice& s = layout->slices()[k];
    if (tensors[k].rows() != s.rows || tensors[k].cols() != s.cols) {
      throw ShapeError("flatten: tensor '" + s.name + "' has the wrong shape");
    }
    values.segment(s.offset, s.size()) = tensors[k].reshaped();
  }
  return ParameterVector{std::move(layout), std::move(values)};
}

std::vector<Matrix> unflatten(const ParameterVector& theta) {
  if (!theta.layout || theta.values.size() != theta.layout->size()) {
    throw ShapeError("parameter vector does not match its layout");
  }
  std::vector<Matrix> out;
  out.reserve(theta.layout->slices().size());
  for (const ParamSlice& s : theta.layout->slices()) {
    out.push_back(theta.values.segment(s.offset, s.size()).reshaped(s.rows, s.cols));
  }
  return out;
}

MLComponent::MLComponent(std::vector<Index> layer_sizes) : sizes_(std::move(layer_sizes)) {
  if (sizes_.size() < 2) throw ValidationError("ML component needs at least input and output sizes");
  for (Index n : sizes_) {
    if (n <= 0) throw ValidationError("layer sizes must be positive");
  }
}

Index MLComponent::parameter_count() const {
  Index count = 0;
  for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) count += sizes_[i] * sizes_[i + 1] + sizes_[i + 1];
  return count;
}

void MLComponent::append_layout(ParameterLayout& layout, const std::string& component) const {
  for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) {
    layout.add(component, "W" + std::to_string(i), sizes_[i + 1], sizes_[i]);
    layout.add(component, "b" + std::to_string(i), sizes_[i + 1], 1);
  }
}

ad::Node MLComponent::build(ad::ExprGraph& g, std::span<const ad::Node> tensors,
                            ad::Node input) const {
  if (static_cast<Index>(tensors.size()) != 2 * layer_count()) {
    throw ShapeError("ML component expects " + std::to_string(2 * layer_count()) + " tensors");
  }
  ad::Node h = input;
  for (Index k = 0; k < layer_count(); ++k) {
    h = g.add(g.mat_vec(tensors[2 * k], h), tensors[2 * k + 1]);
    if (k + 1 < layer_count()) h = g.tanh(h);
  }
  return h;
}

PhysicsComponent PhysicsComponent::pass_through(Index input_dim, Index dim) {
  PhysicsComponent p;
  p.input_dim = input_dim;
  p.latent_dim = dim;
  p.output_dim = dim;
  p.map = [](ad::ExprGraph&, ad::Node, std::optional<ad::Node> z, ad::Node) {
    if (!z) throw ValidationError("pass-through physics needs a latent input");
    return *z;
  };
  return p;
}

PhysicsComponent PhysicsComponent::offset(Index input_dim, Vector nominal,
                                          std::vector<bool> trainable) {
  if (static_cast<Index>(trainable.size()) != nominal.size()) {
    throw ShapeError("trainable mask must match the physics parameters");
  }
  PhysicsComponent p;
  p.input_dim = input_dim;
  p.latent_dim = nominal.size();
  p.output_dim = nominal.size();
  p.nominal = std::move(nominal);
  p.trainable = std::move(trainable);
  p.map = [](ad::ExprGraph& g, ad::Node, std::optional<ad::Node> z, ad::Node theta) {
    if (!z) throw ValidationError("offset physics needs a latent input");
    return g.add(*z, theta);
  };
  return p;
}

PhysicsComponent PhysicsComponent::affine_in_input(Matrix G, Vector nominal,
                                                   std::vector<bool> trainable) {
  if (G.rows() != nominal.size() || static_cast<Index>(trainable.size()) != nominal.size()) {
    throw ShapeError("affine physics: G rows, nominal and mask must agree");
  }
  PhysicsComponent p;
  p.input_dim = G.cols();
  p.latent_dim = 0;
  p.output_dim = G.rows();
  p.nominal = std::move(nominal);
  p.trainable = std::move(trainable);
  p.map = [G](ad::ExprGraph& g, ad::Node u, std::optional<ad::Node>, ad::Node theta) {
    return g.add(g.mat_vec(g.constant(G), u), theta);
  };
  return p;
}

std::string_view to_string(Topology t) {
  switch (t) {
    case Topology::ml_to_p: return "MLtoP";
    case Topology::p_to_ml: return "PtoML";
    case Topology::bidirectional: return "Bidirectional";
  }
  return "?";
}

Topology topology_from_string(std::string_view s) {
  if (s == "MLtoP") return Topology::ml_to_p;
  if (s == "PtoML") return Topology::p_to_ml;
  if (s == "Bidirectional") return Topology::bidirectional;
  throw ValidationError("unknown topology '" + std::string(s) +
                        "' (expected MLtoP, PtoML or Bidirectional)");
}

ParameterVector Model::init_parameters(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  Vector values = nominal_;
  for (const ParamSlice& s : layout_->slices()) {
    if (s.name.empty() || s.name[0] != 'W') continue;
    const double a = std::sqrt(6.0 / static_cast<double>(s.cols + s.rows));
    std::uniform_real_distribution<double> dist(-a, a);
    for (Index k = 0; k < s.size(); ++k) values(s.offset + k) = dist(rng);
  }
  return ParameterVector{layout_, std::move(values)};
}

std::vector<bool> Model::trainable_mask() const { return mask_; }

std::vector<ad::Node> Model::bind(ad::ExprGraph& g, const ParameterVector& theta) const {
  if (theta.values.size() != layout_->size()) {
    throw ShapeError("parameter vector has " + std::to_string(theta.values.size()) +
                     " entries, model expects " + std::to_string(layout_->size()));
  }
  std::vector<ad::Node> nodes;
  nodes.reserve(layout_->slices().size());
  for (const ParamSlice& s : layout_->slices()) {
    nodes.push_back(g.leaf(theta.values.segment(s.offset, s.size()).reshaped(s.rows, s.cols),
                           s.component + "." + s.name));
  }
  return nodes;
}

PCMLModel::PCMLModel(MLComponent ml, PhysicsComponent physics, Topology topology,
                     FixedPointOptions fixed_point)
    : ml_(std::move(ml)), physics_(std::move(physics)), topology_(topology), fp_(fixed_point) {
  if (!physics_.map) throw ValidationError("physics component has no map");
  if (static_cast<Index>(physics_.trainable.size()) != physics_.nominal.size()) {
    throw ShapeError("physics trainable mask must match its parameters");
  }
  const Index nu = physics_.input_dim;
  const Index ny = physics_.output_dim;
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ShapeError("interface mismatch: " + what);
  };
  switch (topology_) {
    case Topology::ml_to_p:
      need(ml_.input_dim() == nu, "ML input must equal the model input dimension");
      need(ml_.output_dim() == physics_.latent_dim, "ML output must equal the physics latent input");
      break;
    case Topology::p_to_ml:
      need(ml_.input_dim() == nu + ny, "ML input must be [u; physics prediction]");
      need(ml_.output_dim() == ny, "ML correction must match the output dimension");
      break;
    case Topology::bidirectional:
      need(ml_.input_dim() == nu + ny, "ML input must be [u; y_hat]");
      need(ml_.output_dim() == physics_.latent_dim, "ML output must equal the physics latent input");
      if (!(fp_.damping > 0.0 && fp_.damping <= 1.0) || fp_.max_iters < 1 || !(fp_.tol > 0.0)) {
        throw ValidationError("fixed point needs damping in (0, 1], max_iters >= 1, tol > 0");
      }
      break;
  }
  auto layout = std::make_shared<ParameterLayout>();
  ml_.append_layout(*layout, "ml");
  layout->add("physics", "theta_p", physics_.nominal.size(), 1);
  layout_ = layout;
  mask_.assign(static_cast<std::size_t>(layout_->size()), true);
  nominal_ = Vector::Zero(layout_->size());
  const Index offset = layout_->slices().back().offset;
  nominal_.segment(offset, physics_.nominal.size()) = physics_.nominal;
  for (Index k = 0; k < physics_.nominal.size(); ++k) {
    mask_[static_cast<std::size_t>(offset + k)] = physics_.trainable[static_cast<std::size_t>(k)];
  }
}

Index PCMLModel::latent_dim() const {
  return topology_ == Topology::p_to_ml ? physics_.output_dim : physics_.latent_dim;
}

std::string PCMLModel::describe() const {
  std::ostringstream os;
  os << "PCMLModel(" << to_string(topology_) << ", ml=[";
  for (std::size_t i = 0; i < ml_.layer_sizes().size(); ++i) {
    os << (i ? "," : "") << ml_.layer_sizes()[i];
  }
  os << "], theta_p=" << physics_.nominal.size() << ")";
  return os.str();
}

std::pair<ad::Node, ad::Node> PCMLModel::coupling_residual(ad::ExprGraph& g,
                                                           std::span<const ad::Node> params,
                                                           ad::Node u, ad::Node z,
                                                           ad::Node w) const {
  if (topology_ != Topology::bidirectional) {
    throw ValidationError("coupling residual is defined for bidirectional models only");
  }
  const ad::Node ml_in[] = {u, w};
  const ad::Node z_model = ml_.build(g, ml_params(params), g.concat(ml_in));
  const ad::Node w_model = physics_.map(g, u, z, physics_param(params));
  return {g.sub(z, z_model), g.sub(w, w_model)};
}

ForwardResult PCMLModel::solve_fixed_point(const Vector& u, std::span<const Matrix> tensors,
                                           Matrix* jacobian) const {
  if (topology_ != Topology::bidirectional) {
    throw ValidationError("fixed-point solve applies to bidirectional models only");
  }
  const Index ny = physics_.output_dim;
  ad::ExprGraph g;
  std::vector<ad::Node> params;
  params.reserve(tensors.size());
  for (const Matrix& t : tensors) params.push_back(g.constant(t));
  const ad::Node un = g.constant(u);
  const ad::Node y = g.leaf(Vector::Zero(ny), "y_hat");
  const ad::Node in[] = {un, y};
  const ad::Node z = ml_.build(g, ml_params(params), g.concat(in));
  const ad::Node f = physics_.map(g, un, z, physics_param(params));

  ForwardResult out;
  Vector current = Vector::Zero(ny);
  for (int it = 0; it <= fp_.max_iters; ++it) {
    if (it > 0) {
      g.set_leaf(y, current);
      g.forward_eval();
    }
    const Vector mapped = g.value(f);
    const double res = (mapped - current).lpNorm<Eigen::Infinity>();
    out.residual_history.push_back(res);
    if (res <= fp_.tol) {
      out.y_hat = current;
      out.z = g.value(z);
      out.iterations = it;
      out.residual = res;
      if (jacobian) {
        jacobian->resize(ny, ny);
        for (Index k = 0; k < ny; ++k) {
          const Matrix seed = Vector::Unit(ny, k);
          jacobian->row(k) = g.backward(f, seed)[y].transpose();
        }
      }
      return out;
    }
    if (it == fp_.max_iters) {
      throw DivergenceError("bidirectional fixed point did not converge in " +
                                std::to_string(fp_.max_iters) + " iterations (residual " +
                                std::to_string(res) + ")",
                            res);
    }
    current = (1.0 - fp_.damping) * current + fp_.damping * mapped;
  }
  throw DivergenceError("unreachable", 0.0);
}

BuildOutput PCMLModel::build(ad::ExprGraph& g, std::span<const ad::Node> params, const Matrix& U,
                             const LatentProjection* latent) const {
  if (U.cols() != input_dim()) {
    throw ShapeError("input has " + std::to_string(U.cols()) + " columns, model expects " +
                     std::to_string(input_dim()));
  }
  if (latent && topology_ != Topology::ml_to_p) {
    throw ValidationError("latent projection requires the MLtoP topology");
  }
  const auto mlp = ml_params(params);
  const ad::Node theta_p = physics_param(params);
  BuildOutput out;
  const auto rows = static_cast<std::size_t>(U.rows());
  out.nodes.reserve(rows);
  out.values.reserve(rows);
  out.latents.reserve(rows);

  std::vector<Matrix> tensors;
  if (topology_ == Topology::bidirectional) {
    for (ad::Node p : params) tensors.push_back(g.value(p));
  }

  for (Index i = 0; i < U.rows(); ++i) {
    const Vector ui = U.row(i).transpose();
    const ad::Node u = g.constant(ui);
    switch (topology_) {
      case Topology::ml_to_p: {
        const ad::Node z = ml_.build(g, mlp, u);
        Vector zval = g.value(z);
        ad::Node z_in = z;
        if (latent) {
          ProjectionResult res;
          if (latent->project && latent->constraints) {
            res = project(zval, *latent->constraints, ui, latent->options);
          } else {
            res.v_proj = zval;
          }
          z_in = g.leaf(res.v_proj, "z_projected");
          zval = res.v_proj;
          out.bridges.push_back(LatentBridge{z, z_in, i, g.value(z), std::move(res)});
        }
        const ad::Node y = physics_.map(g, u, z_in, theta_p);
        out.nodes.push_back(y);
        out.values.push_back(g.value(y));
        out.latents.push_back(std::move(zval));
        break;
      }
      case Topology::p_to_ml: {
        const ad::Node p = physics_.map(g, u, std::nullopt, theta_p);
        const ad::Node in[] = {u, p};
        const ad::Node y = g.add(p, ml_.build(g, mlp, g.concat(in)));
        out.nodes.push_back(y);
        out.values.push_back(g.value(y));
        out.latents.push_back(g.value(p));
        break;
      }
      case Topology::bidirectional: {
        Matrix J;
        ForwardResult fr = solve_fixed_point(ui, tensors, &J);
        const ad::Node ystar = g.constant(fr.y_hat);
        const ad::Node in[] = {u, ystar};
        const ad::Node z = ml_.build(g, mlp, g.concat(in));
        const ad::Node f = physics_.map(g, u, z, theta_p);
        const Index ny = output_dim();
        const Matrix I = Matrix::Identity(ny, ny);
        Eigen::FullPivLU<Matrix> lu(I - J);
        if (!lu.isInvertible()) {
          throw SingularityError("fixed-point Jacobian I - dF/dy is singular");
        }
        out.nodes.push_back(f);
        out.values.push_back(std::move(fr.y_hat));
        out.latents.push_back(std::move(fr.z));
        out.cotangent_maps.push_back(lu.inverse());
        break;
      }
    }
  }
  return out;
}

NeuralODEModel::NeuralODEModel(MLComponent rhs, Vector x0, double t0, IntegratorConfig integrator)
    : rhs_(std::move(rhs)), x0_(std::move(x0)), t0_(t0), integrator_(integrator) {
  if (rhs_.input_dim() != x0_.size() || rhs_.output_dim() != x0_.size()) {
    throw ShapeError("neural ODE right-hand side must map the state space to itself");
  }
  if (!(integrator_.step > 0.0) || integrator_.steps_per_observation < 1) {
    throw ValidationError("integrator needs step > 0 and at least one step per observation");
  }
  auto layout = std::make_shared<ParameterLayout>();
  rhs_.append_layout(*layout, "ml");
  layout_ = layout;
  mask_.assign(static_cast<std::size_t>(layout_->size()), true);
  nominal_ = Vector::Zero(layout_->size());
}

std::string NeuralODEModel::describe() const {
  std::ostringstream os;
  os << "NeuralODEModel(rhs=[";
  for (std::size_t i = 0; i < rhs_.layer_sizes().size(); ++i) {
    os << (i ? "," : "") << rhs_.layer_sizes()[i];
  }
  os << "], h=" << integrator_.step << ", steps/obs=" << integrator_.steps_per_observation;
  if (projector_.size() > 0) os << ", conserved";
  os << ")";
  return os.str();
}

void NeuralODEModel::conserve(const Matrix& A) {
  if (A.cols() != x0_.size()) throw ShapeError("conserved quantities must act on the state");
  require_full_row_rank(A);
  projector_ = Matrix::Identity(A.cols(), A.cols()) - A.transpose() * (A * A.transpose()).ldlt().solve(A);
}

Index NeuralODEModel::grid_index(double t) const {
  const double interval = integrator_.observation_interval();
  const double k = std::round((t - t0_) / interval);
  if (k < 0.0 || std::abs(t0_ + k * interval - t) > 1e-9 * std::max(1.0, std::abs(t))) {
    throw ValidationError("time " + std::to_string(t) + " is not on the observation grid");
  }
  return static_cast<Index>(k);
}

BuildOutput NeuralODEModel::build(ad::ExprGraph& g, std::span<const ad::Node> params,
                                  const Matrix& U, const LatentProjection* latent) const {
  if (U.cols() != 1) throw ShapeError("neural ODE inputs are single time columns");
  if (latent) {
    throw ValidationError("latent projection is not available for neural ODE models");
  }
  std::vector<Index> idx(static_cast<std::size_t>(U.rows()));
  Index last = 0;
  for (Index i = 0; i < U.rows(); ++i) {
    idx[static_cast<std::size_t>(i)] = grid_index(U(i, 0));
    last = std::max(last, idx[static_cast<std::size_t>(i)]);
  }
  const RhsBuilder f = [this](ad::ExprGraph& gg, double, ad::Node x,
                              std::span<const ad::Node> p) {
    const ad::Node dx = rhs_.build(gg, p, x);
    return projector_.size() > 0 ? gg.mat_vec(gg.constant(projector_), dx) : dx;
  };
  const auto states = integrate(g, f, g.constant(x0_), t0_, integrator_, last, params);
  BuildOutput out;
  for (Index k : idx) {
    const ad::Node n = states[static_cast<std::size_t>(k)];
    out.nodes.push_back(n);
    out.values.push_back(g.value(n));
    out.latents.emplace_back();
  }
  return out;
}

ForwardResult forward(const PCMLModel& model, const Vector& u, const ParameterVector& theta) {
  if (model.topology() == Topology::bidirectional) {
    if (u.size() != model.input_dim()) throw ShapeError("input dimension mismatch");
    const auto tensors = unflatten(theta);
    return model.solve_fixed_point(u, tensors);
  }
  ad::ExprGraph g;
  const auto params = model.bind(g, theta);
  BuildOutput b = model.build(g, params, u.transpose());
  ForwardResult r;
  r.y_hat = std::move(b.values.front());
  r.z = std::move(b.latents.front());
  return r;
}


std::pair<Matrix, Matrix> predict_batch(const Model& model, const Matrix& U,
                                        const ParameterVector& theta, Execution exec) {
  if (U.rows() < 1) throw ValidationError("predict_batch needs at least one input row");
  Matrix Y(U.rows(), model.output_dim());
  Matrix Z(U.rows(), model.latent_dim());
  if (!model.rows_independent()) {
    ad::ExprGraph g;
    const auto params = model.bind(g, theta);
    const BuildOutput b = model.build(g, params, U);
    for (Index i = 0; i < U.rows(); ++i) {
      Y.row(i) = b.values[static_cast<std::size_t>(i)].transpose();
    }
    return {std::move(Y), std::move(Z)};
  }
  for_each_index(static_cast<std::size_t>(U.rows()), exec, [&](std::size_t i) {
    const auto row = static_cast<Index>(i);
    try {
      ad::ExprGraph g;
      const auto params = model.bind(g, theta);
      const BuildOutput b = model.build(g, params, U.row(row));
      Y.row(row) = b.values.front().transpose();
      if (Z.cols() > 0) Z.row(row) = b.latents.front().transpose();
    } catch (const Error&) {
      detail::rethrow_with_prefix("row " + std::to_string(row) + ": ");
    }
  });
  return {std::move(Y), std::move(Z)};
}

}  // namespace pcml
