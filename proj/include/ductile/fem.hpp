/**
 * @file fem.hpp
 * @brief Desk-scale plane-strain Q1 forward solver for the three ductile
 *        phase-field fracture models: structured quadrilateral meshes,
 *        assembly of the displacement / phase-field / (M3) hardening
 *        equations, staggered stepping and load-displacement extraction.
 *
 * All systems are small (tens to a few hundred dofs), so assembly goes into
 * dense matrices and solves use LDLT. One element-geometry block is shared by
 * every element because the structured grids are uniform.
 */

#ifndef DUCTILE_FEM_HPP
#define DUCTILE_FEM_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "ductile/material.hpp"
#include "ductile/tensor.hpp"

namespace ductile::fem {

// ============================================================================
// Mesh
// ============================================================================

struct GeometryDescriptor {
  double width = 1.0;   // mm
  double height = 1.0;  // mm
  int nx = 1;
  int ny = 1;
  struct Hole { double cx, cy, r; };
  struct Notch { double x0, y0, x1, y1; };  // axis-aligned rectangle
  std::vector<Hole> holes;
  std::vector<Notch> notches;
};

struct Mesh {
  std::vector<Eigen::Vector2d> nodes;
  std::vector<std::array<int, 4>> elems;  // CCW Q1 connectivity
  // Partition of the outer-rectangle boundary; hole/notch edges tagged "free".
  std::map<std::string, std::vector<int>> tags;
  // Per-element multiplicative parameter overrides (heterogeneity fields).
  std::map<std::string, std::vector<double>> elem_scale;
  double width = 0, height = 0;
  int nx = 0, ny = 0;
  double hx = 0, hy = 0;  // element edge lengths

  bool on_edge(int node, const std::string& tag, double tol = 1e-9) const {
    const auto& p = nodes[node];
    if (tag == "left") return std::abs(p.x()) < tol;
    if (tag == "right") return std::abs(p.x() - width) < tol;
    if (tag == "bottom") return std::abs(p.y()) < tol;
    if (tag == "top") return std::abs(p.y() - height) < tol;
    throw std::runtime_error("unknown boundary tag '" + tag + "'");
  }

  /// All nodes geometrically on a rectangle edge (corners included), unlike
  /// the partition in `tags` where each boundary node appears exactly once.
  std::vector<int> edge_nodes(const std::string& tag) const {
    std::vector<int> out;
    for (int n = 0; n < static_cast<int>(nodes.size()); ++n) {
      if (on_edge(n, tag)) out.push_back(n);
    }
    if (out.empty()) throw std::runtime_error("boundary tag '" + tag + "' selects no nodes");
    return out;
  }
};

inline Mesh build_mesh(const GeometryDescriptor& g) {
  if (g.nx < 1 || g.ny < 1 || g.width <= 0 || g.height <= 0) {
    throw std::runtime_error("build_mesh: degenerate geometry descriptor");
  }
  const double hx = g.width / g.nx;
  const double hy = g.height / g.ny;

  auto removed = [&](int i, int j) {
    const double cx = (i + 0.5) * hx;
    const double cy = (j + 0.5) * hy;
    for (const auto& h : g.holes) {
      const double dx = cx - h.cx, dy = cy - h.cy;
      if (dx * dx + dy * dy <= h.r * h.r) return true;
    }
    for (const auto& n : g.notches) {
      if (cx >= n.x0 && cx <= n.x1 && cy >= n.y0 && cy <= n.y1) return true;
    }
    return false;
  };

  // Full structured grid first, then drop removed elements and unused nodes.
  std::vector<int> remap((g.nx + 1) * (g.ny + 1), -1);
  std::vector<std::array<int, 4>> elems;
  for (int j = 0; j < g.ny; ++j) {
    for (int i = 0; i < g.nx; ++i) {
      if (removed(i, j)) continue;
      const int n00 = j * (g.nx + 1) + i;
      elems.push_back({n00, n00 + 1, n00 + g.nx + 2, n00 + g.nx + 1});
    }
  }
  if (elems.empty()) throw std::runtime_error("build_mesh: geometry removes all elements");

  Mesh m;
  m.width = g.width;
  m.height = g.height;
  m.nx = g.nx;
  m.ny = g.ny;
  m.hx = hx;
  m.hy = hy;
  for (auto& e : elems) {
    for (int& n : e) {
      if (remap[n] < 0) {
        remap[n] = static_cast<int>(m.nodes.size());
        const int i = n % (g.nx + 1);
        const int j = n / (g.nx + 1);
        m.nodes.emplace_back(i * hx, j * hy);
      }
      n = remap[n];
    }
  }
  m.elems = std::move(elems);

  // Boundary nodes: those not shared by 4 elements on the outer rectangle, or
  // on any edge exposed by removal. For tagging purposes the outer rectangle
  // is partitioned with priority left, right, bottom, top; every other
  // boundary node goes to "free".
  std::vector<int> elem_count(m.nodes.size(), 0);
  for (const auto& e : m.elems)
    for (int n : e) ++elem_count[n];
  for (int n = 0; n < static_cast<int>(m.nodes.size()); ++n) {
    const bool outer = m.on_edge(n, "left") || m.on_edge(n, "right") ||
                       m.on_edge(n, "bottom") || m.on_edge(n, "top");
    const bool boundary = outer || elem_count[n] < 4;
    if (!boundary) continue;
    if (m.on_edge(n, "left")) m.tags["left"].push_back(n);
    else if (m.on_edge(n, "right")) m.tags["right"].push_back(n);
    else if (m.on_edge(n, "bottom")) m.tags["bottom"].push_back(n);
    else if (m.on_edge(n, "top")) m.tags["top"].push_back(n);
    else m.tags["free"].push_back(n);
  }
  return m;
}

// ============================================================================
// Load program and solver settings
// ============================================================================

enum class GripMode { roller, clamp };

struct LoadProgram {
  double du = 1e-3;             // displacement increment, mm
  int n_steps = 1;
  std::string driven = "right";
  std::string fixed = "left";
  int direction = 0;            // 0 = x, 1 = y
  GripMode grip = GripMode::roller;
  double dt = 1.0;              // pseudo-time per step (M2 viscosity)

  void validate() const {
    if (n_steps < 0) throw std::runtime_error("load program: n_steps must be >= 0");
    if (du == 0.0) throw std::runtime_error("load program: du must be nonzero");
    if (direction != 0 && direction != 1)
      throw std::runtime_error("load program: direction must be x or y");
    if (dt <= 0.0) throw std::runtime_error("load program: dt must be > 0");
  }
};

struct SolveSettings {
  double tol_stag = 1e-3;    // absolute combined residual norm
  double tol_newton = 1e-10; // relative residual norm
  int max_stagger = 200;
  int max_newton = 60;
  int max_active_set = 60;

  void validate() const {
    if (tol_stag <= 0 || tol_newton <= 0)
      throw std::runtime_error("solver settings: tolerances must be > 0");
    if (max_stagger < 1 || max_newton < 1)
      throw std::runtime_error("solver settings: iteration caps must be >= 1");
  }
};

struct CurvePoint {
  int step;
  double displacement;  // mm
  double force;         // N per unit thickness
};

struct LoadDisplacementCurve {
  std::vector<CurvePoint> points;
  bool fully_failed = false;
  int truncated_at = -1;  // last recorded step when failure stopped the run
};

class StepFailure : public std::runtime_error {
 public:
  StepFailure(int step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what),
        step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

struct AssembledSystem {
  Eigen::VectorXd R;
  Eigen::MatrixXd K;
};

// ============================================================================
// Forward solver
// ============================================================================

class ForwardSolver {
 public:
  ForwardSolver(Mesh mesh, ModelId model, MaterialParams base,
                LoadProgram load, SolveSettings settings)
      : mesh_(std::move(mesh)),
        model_(model),
        base_(base),
        load_(load),
        set_(settings),
        fiber_(structural_tensor(base.phi_deg)) {
    base_.validate();
    load_.validate();
    set_.validate();
    n_nodes_ = static_cast<int>(mesh_.nodes.size());
    n_elems_ = static_cast<int>(mesh_.elems.size());
    build_element_geometry();
    build_constraints();
    build_element_params();
    force_scale_ = base_.young() * std::min(mesh_.hx, mesh_.hy);
    reset();
  }

  void reset() {
    u_ = Eigen::VectorXd::Zero(2 * n_nodes_);
    d_ = Eigen::VectorXd::Zero(n_nodes_);
    d_n_ = d_;
    alpha_ = Eigen::VectorXd::Zero(n_nodes_);
    alpha_n_ = alpha_;
    qp_.assign(static_cast<std::size_t>(n_elems_) * 4, MaterialPointState{});
    scratch_ = qp_;
    hist_scratch_.assign(qp_.size(), 0.0);
    ubar_ = 0.0;
    step_ = 0;
  }

  const Mesh& mesh() const { return mesh_; }
  ModelId model() const { return model_; }
  const MaterialParams& params() const { return base_; }
  int step_index() const { return step_; }
  double ubar() const { return ubar_; }

  Eigen::VectorXd& u() { return u_; }
  Eigen::VectorXd& d_field() { return d_; }
  Eigen::VectorXd& alpha_field() { return alpha_; }
  std::vector<MaterialPointState>& qp_states() { return qp_; }
  int last_stagger_iterations() const { return last_stagger_; }

  SymTensor gauss_strain(int e, int gp) const { return strain_at(e, gp); }

  /// Stress at a quadrature point for the committed plastic state and the
  /// current (u, d) fields.
  SymTensor gauss_stress(int e, int gp) const {
    const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
    return detail::stress_at(strain_at(e, gp) - qp_[q].eps_p, interp(d_, e, gp),
                             qp_[q].alpha, fiber_, model_, eparams(e));
  }

  /// Nodal hardening variable: the M3 field, or a volume-weighted average of
  /// quadrature values for the local-plasticity models.
  Eigen::VectorXd nodal_alpha() const {
    if (model_ == ModelId::M3) return alpha_;
    Eigen::VectorXd num = Eigen::VectorXd::Zero(n_nodes_);
    Eigen::VectorXd den = Eigen::VectorXd::Zero(n_nodes_);
    for (int e = 0; e < n_elems_; ++e) {
      for (int gp = 0; gp < 4; ++gp) {
        const double w = wdetJ_[gp];
        for (int a = 0; a < 4; ++a) {
          num[mesh_.elems[e][a]] += w * N_[gp][a] * qp_[e * 4 + gp].alpha;
          den[mesh_.elems[e][a]] += w * N_[gp][a];
        }
      }
    }
    for (int n = 0; n < n_nodes_; ++n) num[n] = den[n] > 0 ? num[n] / den[n] : 0.0;
    return num;
  }

  // --------------------------------------------------------------------------
  // Assembly entry points (evaluated at the committed plastic base state)
  // --------------------------------------------------------------------------

  AssembledSystem assemble_displacement() {
    refresh_scratch_plasticity();
    return assemble_displacement_internal();
  }

  AssembledSystem assemble_phasefield() {
    std::vector<double> hist(qp_.size());
    for (std::size_t i = 0; i < qp_.size(); ++i) hist[i] = qp_[i].history;
    return assemble_phasefield_internal(hist);
  }

  AssembledSystem assemble_hardening() {
    if (model_ != ModelId::M3)
      throw std::runtime_error("assemble_hardening is defined for M3 only");
    return assemble_hardening_internal();
  }

  /// Reaction force on a boundary tag: sum of internal-force contributions in
  /// the loading direction over the tag's edge nodes.
  double reaction_force(const std::string& tag) {
    refresh_scratch_plasticity();
    Eigen::VectorXd f = internal_force();
    double F = 0.0;
    for (int n : mesh_.edge_nodes(tag)) F += f[2 * n + load_.direction];
    return F;
  }

  // --------------------------------------------------------------------------
  // Stepping
  // --------------------------------------------------------------------------

  /// One load step with staggered u / (alpha) / history / d passes.
  void staggered_step() {
    ++step_;
    ubar_ += load_.du;
    scratch_ = qp_;
    for (std::size_t i = 0; i < qp_.size(); ++i) hist_scratch_[i] = qp_[i].history;

    double res = std::numeric_limits<double>::infinity();
    for (int it = 0; it < set_.max_stagger; ++it) {
      solve_displacement();
      if (model_ == ModelId::M3) {
        solve_hardening();
        refresh_scratch_plasticity();
      }
      update_history();
      solve_phasefield();

      res = combined_residual();
      if (res <= set_.tol_stag) {
        last_stagger_ = it + 1;
        commit();
        return;
      }
    }
    throw StepFailure(step_, "staggered scheme did not reach tol_stag = " +
                                 std::to_string(set_.tol_stag) +
                                 " (residual " + std::to_string(res) + ")");
  }

  /// Run the load program (optionally truncated to the first `limit` steps).
  /// Stops early once the reaction stays below 1% of the running peak for two
  /// consecutive steps.
  LoadDisplacementCurve run(int limit = -1) {
    reset();
    LoadDisplacementCurve curve;
    const int n = (limit >= 0) ? std::min(limit, load_.n_steps) : load_.n_steps;
    double peak = 0.0;
    int low_count = 0;
    for (int s = 1; s <= n; ++s) {
      staggered_step();
      const double F = reaction_force(load_.driven);
      curve.points.push_back({s, ubar_, F});
      peak = std::max(peak, std::abs(F));
      if (peak > 0 && std::abs(F) < 0.01 * peak) {
        if (++low_count >= 2) {
          curve.fully_failed = true;
          curve.truncated_at = s;
          break;
        }
      } else {
        low_count = 0;
      }
    }
    return curve;
  }

 private:
  // --------------------------------------------------------------------------
  // Precomputed element data
  // --------------------------------------------------------------------------

  void build_element_geometry() {
    // 2x2 Gauss on the reference square; uniform rectangles share one block.
    const double gp = 1.0 / std::sqrt(3.0);
    const double xi[4] = {-gp, gp, gp, -gp};
    const double eta[4] = {-gp, -gp, gp, gp};
    const double sx[4] = {-1, 1, 1, -1};
    const double sy[4] = {-1, -1, 1, 1};
    for (int g = 0; g < 4; ++g) {
      for (int a = 0; a < 4; ++a) {
        N_[g][a] = 0.25 * (1 + sx[a] * xi[g]) * (1 + sy[a] * eta[g]);
        const double dN_dxi = 0.25 * sx[a] * (1 + sy[a] * eta[g]);
        const double dN_deta = 0.25 * sy[a] * (1 + sx[a] * xi[g]);
        dNdx_[g][a] = dN_dxi * 2.0 / mesh_.hx;
        dNdy_[g][a] = dN_deta * 2.0 / mesh_.hy;
      }
      wdetJ_[g] = 0.25 * mesh_.hx * mesh_.hy;  // w=1, detJ = hx*hy/4
      if (wdetJ_[g] <= 0) throw std::runtime_error("non-positive Jacobian");
    }
  }

  void build_constraints() {
    // Dirichlet table: dof -> multiplier of ubar (0 for fixed constraints).
    constraint_.assign(2 * n_nodes_, {false, 0.0});
    const int dir = load_.direction;
    const int odir = 1 - dir;
    for (int n : mesh_.edge_nodes(load_.fixed)) {
      constraint_[2 * n + dir] = {true, 0.0};
      if (load_.grip == GripMode::clamp) constraint_[2 * n + odir] = {true, 0.0};
    }
    for (int n : mesh_.edge_nodes(load_.driven)) {
      constraint_[2 * n + dir] = {true, 1.0};
      if (load_.grip == GripMode::clamp) constraint_[2 * n + odir] = {true, 0.0};
    }
    if (load_.grip == GripMode::roller) {
      // Pin the transverse direction on the orthogonal face through the
      // origin, which keeps uniaxial stress states homogeneous.
      const std::string side = (dir == 0) ? "bottom" : "left";
      for (int n : mesh_.edge_nodes(side)) constraint_[2 * n + odir] = {true, 0.0};
    }
    free_udofs_.clear();
    for (int i = 0; i < 2 * n_nodes_; ++i) {
      if (!constraint_[i].first) free_udofs_.push_back(i);
    }
  }

  void build_element_params() {
    elem_params_.assign(1, base_);
    elem_param_index_.assign(n_elems_, 0);
    if (mesh_.elem_scale.empty()) return;
    elem_params_.assign(n_elems_, base_);
    for (const auto& [name, fac] : mesh_.elem_scale) {
      if (static_cast<int>(fac.size()) != n_elems_)
        throw std::runtime_error("heterogeneity field '" + name +
                                 "' length does not match element count");
      for (int e = 0; e < n_elems_; ++e) {
        double* slot = param_slot(elem_params_[e], name);
        *slot *= fac[e];
      }
    }
    for (int e = 0; e < n_elems_; ++e) {
      elem_params_[e].validate();
      elem_param_index_[e] = e;
    }
  }

  static double* param_slot(MaterialParams& p, const std::string& name) {
    if (name == "mu") return &p.mu;
    if (name == "K") return &p.K;
    if (name == "H") return &p.H;
    if (name == "sigma_Y") return &p.sigma_Y;
    if (name == "alpha_crit") return &p.alpha_crit;
    if (name == "G_c") return &p.G_c;
    if (name == "psi_c") return &p.psi_c;
    if (name == "w0") return &p.w0;
    if (name == "l_f") return &p.l_f;
    if (name == "l_p") return &p.l_p;
    if (name == "zeta") return &p.zeta;
    if (name == "chi_a") return &p.chi_a;
    throw std::runtime_error("unknown heterogeneity parameter '" + name + "'");
  }

  const MaterialParams& eparams(int e) const {
    return elem_params_[elem_param_index_[e]];
  }

  // --------------------------------------------------------------------------
  // Field evaluation helpers
  // --------------------------------------------------------------------------

  SymTensor strain_at(int e, int gp) const {
    double exx = 0, eyy = 0, exy = 0;
    for (int a = 0; a < 4; ++a) {
      const int n = mesh_.elems[e][a];
      const double ux = u_[2 * n], uy = u_[2 * n + 1];
      exx += dNdx_[gp][a] * ux;
      eyy += dNdy_[gp][a] * uy;
      exy += 0.5 * (dNdy_[gp][a] * ux + dNdx_[gp][a] * uy);
    }
    return {exx, eyy, 0.0, exy, 0.0, 0.0};
  }

  double interp(const Eigen::VectorXd& f, int e, int gp) const {
    double v = 0;
    for (int a = 0; a < 4; ++a) v += N_[gp][a] * f[mesh_.elems[e][a]];
    return v;
  }

  Eigen::Vector2d grad(const Eigen::VectorXd& f, int e, int gp) const {
    Eigen::Vector2d g(0, 0);
    for (int a = 0; a < 4; ++a) {
      const int n = mesh_.elems[e][a];
      g[0] += dNdx_[gp][a] * f[n];
      g[1] += dNdy_[gp][a] * f[n];
    }
    return g;
  }

  /// Recompute the provisional plastic state at every quadrature point from
  /// the committed base state and the current (u, d, alpha) fields.
  void refresh_scratch_plasticity() {
    for (int e = 0; e < n_elems_; ++e) {
      const MaterialParams& p = eparams(e);
      for (int gp = 0; gp < 4; ++gp) {
        const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
        const SymTensor eps = strain_at(e, gp);
        const double dv = interp(d_, e, gp);
        if (model_ == ModelId::M3) {
          const double a_new = interp(alpha_, e, gp);
          auto r = plastic_update_given_alpha(eps, qp_[q], a_new, dv, fiber_,
                                              model_, p);
          scratch_[q] = r.state;
        } else {
          auto r = return_map(eps, qp_[q], dv, fiber_, model_, p);
          scratch_[q] = r.state;
        }
        scratch_[q].history = hist_scratch_[q];
      }
    }
  }

  // --------------------------------------------------------------------------
  // Displacement equation
  // --------------------------------------------------------------------------

  Eigen::VectorXd internal_force() {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(2 * n_nodes_);
    for (int e = 0; e < n_elems_; ++e) {
      const MaterialParams& p = eparams(e);
      for (int gp = 0; gp < 4; ++gp) {
        const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
        const SymTensor eps = strain_at(e, gp);
        const double dv = interp(d_, e, gp);
        const SymTensor sig = detail::stress_at(eps - scratch_[q].eps_p, dv,
                                                scratch_[q].alpha, fiber_,
                                                model_, p);
        const double w = wdetJ_[gp];
        for (int a = 0; a < 4; ++a) {
          const int n = mesh_.elems[e][a];
          f[2 * n] += w * (dNdx_[gp][a] * sig.xx() + dNdy_[gp][a] * sig.xy());
          f[2 * n + 1] += w * (dNdy_[gp][a] * sig.yy() + dNdx_[gp][a] * sig.xy());
        }
      }
    }
    return f;
  }

  /// Consistent (elastic regime) / radial-return-consistent (plastic regime)
  /// material tangent in reduced plane-strain form, columns (exx, eyy, gxy).
  Eigen::Matrix3d material_tangent(int e, int gp) {
    const MaterialParams& p = eparams(e);
    const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
    const SymTensor eps = strain_at(e, gp);
    const double dv = interp(d_, e, gp);

    MaterialPointState base = qp_[q];
    ReturnMapResult r;
    if (model_ == ModelId::M3) {
      r = plastic_update_given_alpha(eps, base, interp(alpha_, e, gp), dv,
                                     fiber_, model_, p);
    } else {
      r = return_map(eps, base, dv, fiber_, model_, p);
    }
    const SymTensor eps_e = eps - r.state.eps_p;
    const Degradation g = degradation(dv, r.state.alpha, model_, p);
    const double I1 = eps_e.trace();
    const double I4 = pseudo_invariant(eps_e, fiber_);
    const double Kt = ((I1 > 0) ? g.g_e : 1.0) * p.K;
    const double chi = ((I4 > 0) ? g.g_e : 1.0) * p.chi_a;
    const double mu_g = g.g_e * p.mu;

    double c_p = 2.0 * mu_g;  // coefficient of the deviatoric projector
    double c_nn = 0.0;        // coefficient of n (x) n
    SymTensor n_hat = SymTensor::zero();
    if (r.plastic && model_ != ModelId::M3) {
      const SymTensor F_tr = detail::stress_at(eps - base.eps_p, dv, base.alpha,
                                               fiber_, model_, p).dev();
      const double q_tr = std::sqrt(1.5) * F_tr.norm();
      if (q_tr > 0) {
        n_hat = F_tr * (1.0 / F_tr.norm());
        const double H_eff = g.g_p * p.H;
        const double theta = 1.0 - 3.0 * mu_g * r.dgamma / q_tr;
        c_p = 2.0 * mu_g * theta;
        c_nn = -6.0 * mu_g * mu_g *
               (1.0 / (3.0 * mu_g + H_eff) - r.dgamma / q_tr);
      }
    }

    Eigen::Matrix3d D;
    const double Mxx = fiber_.M.xx(), Myy = fiber_.M.yy(), Mxy = fiber_.M.xy();
    D(0, 0) = Kt + c_p * (2.0 / 3.0) + chi * Mxx * Mxx;
    D(0, 1) = Kt - c_p / 3.0 + chi * Mxx * Myy;
    D(1, 1) = Kt + c_p * (2.0 / 3.0) + chi * Myy * Myy;
    D(0, 2) = chi * Mxx * Mxy;
    D(1, 2) = chi * Myy * Mxy;
    D(2, 2) = 0.5 * c_p + chi * Mxy * Mxy;
    if (c_nn != 0.0) {
      const Eigen::Vector3d nv(n_hat.xx(), n_hat.yy(), n_hat.xy());
      for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j) D(i, j) += c_nn * nv[i] * nv[j];
    }
    D(1, 0) = D(0, 1);
    D(2, 0) = D(0, 2);
    D(2, 1) = D(1, 2);
    return D;
  }

  AssembledSystem assemble_displacement_internal() {
    AssembledSystem sys;
    sys.R = internal_force();
    sys.K = Eigen::MatrixXd::Zero(2 * n_nodes_, 2 * n_nodes_);
    for (int e = 0; e < n_elems_; ++e) {
      for (int gp = 0; gp < 4; ++gp) {
        const Eigen::Matrix3d D = material_tangent(e, gp) * wdetJ_[gp];
        for (int a = 0; a < 4; ++a) {
          const double Bax = dNdx_[gp][a], Bay = dNdy_[gp][a];
          for (int b = 0; b < 4; ++b) {
            const double Bbx = dNdx_[gp][b], Bby = dNdy_[gp][b];
            // B_a^T D B_b with engineering-shear B rows.
            const double kxx = Bax * (D(0, 0) * Bbx + D(0, 2) * Bby) +
                               Bay * (D(2, 0) * Bbx + D(2, 2) * Bby);
            const double kxy = Bax * (D(0, 1) * Bby + D(0, 2) * Bbx) +
                               Bay * (D(2, 1) * Bby + D(2, 2) * Bbx);
            const double kyx = Bay * (D(1, 0) * Bbx + D(1, 2) * Bby) +
                               Bax * (D(2, 0) * Bbx + D(2, 2) * Bby);
            const double kyy = Bay * (D(1, 1) * Bby + D(1, 2) * Bbx) +
                               Bax * (D(2, 1) * Bby + D(2, 2) * Bbx);
            const int na = mesh_.elems[e][a], nb = mesh_.elems[e][b];
            sys.K(2 * na, 2 * nb) += kxx;
            sys.K(2 * na, 2 * nb + 1) += kxy;
            sys.K(2 * na + 1, 2 * nb) += kyx;
            sys.K(2 * na + 1, 2 * nb + 1) += kyy;
          }
        }
      }
    }
    return sys;
  }

  void apply_dirichlet() {
    for (int i = 0; i < 2 * n_nodes_; ++i) {
      if (constraint_[i].first) u_[i] = constraint_[i].second * ubar_;
    }
  }

  void solve_displacement() {
    apply_dirichlet();
    const int nf = static_cast<int>(free_udofs_.size());
    if (nf == 0) { refresh_scratch_plasticity(); return; }
    // Assembly roundoff scales with the modulus and element size, so the
    // absolute convergence floor must too.
    const double atol = 1e-13 * force_scale_;
    double r0 = -1.0;
    for (int it = 0; it < set_.max_newton; ++it) {
      refresh_scratch_plasticity();
      AssembledSystem sys = assemble_displacement_internal();
      Eigen::VectorXd Rf(nf);
      for (int i = 0; i < nf; ++i) Rf[i] = sys.R[free_udofs_[i]];
      const double rn = Rf.norm();
      if (r0 < 0) r0 = rn;
      if (rn <= std::max(set_.tol_newton * r0, atol)) return;

      Eigen::MatrixXd Kf(nf, nf);
      for (int i = 0; i < nf; ++i)
        for (int j = 0; j < nf; ++j) Kf(i, j) = sys.K(free_udofs_[i], free_udofs_[j]);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(Kf);
      if (ldlt.info() != Eigen::Success)
        throw StepFailure(step_, "singular displacement tangent");
      Eigen::VectorXd du = ldlt.solve(-Rf);
      if (!du.allFinite())
        throw StepFailure(step_, "non-finite displacement update");

      // Backtracking line search.  The stress response is only C0 at the
      // volumetric split and at elastic/plastic switching, so a full Newton
      // step can chatter between the two sides of a kink; shrinking the step
      // until the residual decreases commits the iterate to one side.
      const Eigen::VectorXd u_save = u_;
      double lam = 1.0;
      for (int ls = 0; ls < 12; ++ls) {
        for (int i = 0; i < nf; ++i)
          u_[free_udofs_[i]] = u_save[free_udofs_[i]] + lam * du[i];
        refresh_scratch_plasticity();
        const Eigen::VectorXd f = internal_force();
        double rn_new = 0.0;
        for (int i : free_udofs_) rn_new += f[i] * f[i];
        rn_new = std::sqrt(rn_new);
        if (rn_new <= rn * (1.0 - 1e-4 * lam) || rn_new <= 1e-12) break;
        lam *= 0.5;
        // On exhaustion keep the smallest step: a tiny move across the kink
        // still makes the next tangent consistent with the new regime.
      }
    }
    throw StepFailure(step_, "displacement Newton did not converge");
  }

  // --------------------------------------------------------------------------
  // History update
  // --------------------------------------------------------------------------

  void update_history() {
    for (int e = 0; e < n_elems_; ++e) {
      const MaterialParams& p = eparams(e);
      for (int gp = 0; gp < 4; ++gp) {
        const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
        const SymTensor eps = strain_at(e, gp);
        const SymTensor eps_e = eps - scratch_[q].eps_p;
        const Eigen::Vector2d ga = (model_ == ModelId::M3)
                                       ? grad(alpha_, e, gp)
                                       : Eigen::Vector2d::Zero();
        const double dv = interp(d_, e, gp);
        MaterialPointState floor_state = qp_[q];  // history floor is committed
        hist_scratch_[q] = crack_driving_update(eps_e, scratch_[q].alpha, ga,
                                                dv, fiber_, model_, p,
                                                floor_state);
        scratch_[q].history = hist_scratch_[q];
      }
    }
  }

  // --------------------------------------------------------------------------
  // Phase-field equation
  // --------------------------------------------------------------------------

  AssembledSystem assemble_phasefield_internal(const std::vector<double>& hist) {
    AssembledSystem sys;
    sys.R = Eigen::VectorXd::Zero(n_nodes_);
    sys.K = Eigen::MatrixXd::Zero(n_nodes_, n_nodes_);
    const double dt = load_.dt;
    for (int e = 0; e < n_elems_; ++e) {
      const MaterialParams& p = eparams(e);
      const double l = (model_ == ModelId::M1) ? p.l_f : p.l_d();
      const double l2 = l * l;
      const double eta_dt = (model_ == ModelId::M2) ? p.eta_d() / dt : 0.0;
      for (int gp = 0; gp < 4; ++gp) {
        const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
        const double w = wdetJ_[gp];
        const double dv = interp(d_, e, gp);
        const double dn = interp(d_n_, e, gp);
        const double av = (model_ == ModelId::M3)
                              ? interp(alpha_, e, gp)
                              : scratch_[q].alpha;
        const Eigen::Vector2d gd = grad(d_, e, gp);
        const double H = hist[q];

        // Driving coefficient -(1/2) dg_e/dd, and its d-derivative for M1.
        const Degradation g = degradation(dv, av, model_, p);
        const double drive = -0.5 * g.dg_e_dd * H;
        double ddrive_dd;
        if (model_ == ModelId::M1) {
          const double expo = 2.0 * av / p.alpha_crit;
          if (expo == 0.0) {
            ddrive_dd = 0.0;
          } else {
            const double base = std::max(1.0 - dv, 1e-14);
            ddrive_dd = -0.5 * expo * (expo - 1.0) * std::pow(base, expo - 2.0) * H;
          }
        } else {
          ddrive_dd = -H;
        }

        const double bulk = drive - dv - eta_dt * (dv - dn);
        const Eigen::Vector2d Mgd(
            fiber_.M.xx() * gd[0] + fiber_.M.xy() * gd[1],
            fiber_.M.xy() * gd[0] + fiber_.M.yy() * gd[1]);
        for (int a = 0; a < 4; ++a) {
          const int na = mesh_.elems[e][a];
          const Eigen::Vector2d gNa(dNdx_[gp][a], dNdy_[gp][a]);
          sys.R[na] += w * (bulk * N_[gp][a] -
                            l2 * (gd.dot(gNa) + p.chi_a * Mgd.dot(gNa)));
          for (int b = 0; b < 4; ++b) {
            const int nb = mesh_.elems[e][b];
            const Eigen::Vector2d gNb(dNdx_[gp][b], dNdy_[gp][b]);
            const Eigen::Vector2d MgNb(
                fiber_.M.xx() * gNb[0] + fiber_.M.xy() * gNb[1],
                fiber_.M.xy() * gNb[0] + fiber_.M.yy() * gNb[1]);
            sys.K(na, nb) +=
                w * ((ddrive_dd - 1.0 - eta_dt) * N_[gp][a] * N_[gp][b] -
                     l2 * (gNa.dot(gNb) + p.chi_a * gNa.dot(MgNb)));
          }
        }
      }
    }
    return sys;
  }

  void solve_phasefield() {
    // Fast path: nothing drives damage and none is present.
    bool any_drive = false;
    for (std::size_t q = 0; q < hist_scratch_.size(); ++q) {
      if (hist_scratch_[q] > 0.0) { any_drive = true; break; }
    }
    if (!any_drive && d_n_.maxCoeff() <= 0.0) {
      d_.setZero();
      return;
    }
    // The phase-field Jacobian is negative definite: a positive residual at a
    // node pinned to its bound means the equation wants growth there.
    solve_bound_constrained(
        [this]() { return assemble_phasefield_internal(hist_scratch_); }, d_,
        d_n_, 1.0, +1.0, "phase-field");
  }

  // --------------------------------------------------------------------------
  // Hardening equation (M3)
  // --------------------------------------------------------------------------

  AssembledSystem assemble_hardening_internal() {
    AssembledSystem sys;
    sys.R = Eigen::VectorXd::Zero(n_nodes_);
    sys.K = Eigen::MatrixXd::Zero(n_nodes_, n_nodes_);
    for (int e = 0; e < n_elems_; ++e) {
      const MaterialParams& p = eparams(e);
      const double lp2 = p.l_p * p.l_p;
      for (int gp = 0; gp < 4; ++gp) {
        const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
        const double w = wdetJ_[gp];
        const double dv = interp(d_, e, gp);
        const double av = interp(alpha_, e, gp);
        const double an = interp(alpha_n_, e, gp);
        const Eigen::Vector2d ga = grad(alpha_, e, gp);
        const Degradation g = degradation(dv, av, model_, p);

        // Equivalent trial stress along the frozen trial direction.
        const SymTensor eps = strain_at(e, gp);
        const SymTensor F_tr = detail::stress_at(eps - qp_[q].eps_p, dv,
                                                 qp_[q].alpha, fiber_, model_,
                                                 p).dev();
        const double q_tr = std::sqrt(1.5) * F_tr.norm();
        const double da = std::max(av - an, 0.0);
        // q(alpha) = sqrt(3/2)|dev sigma| with eps_p advanced by
        // sqrt(3/2) (alpha - alpha_n) n_trial; isotropic collinear path.
        const double q_a = q_tr - 3.0 * g.g_e * p.mu * da;
        const double dq_da = -3.0 * g.g_e * p.mu;

        const double bulk = -q_a + g.g_p * (p.sigma_Y + p.H * av);
        const double dbulk = -dq_da + g.g_p * p.H;
        for (int a = 0; a < 4; ++a) {
          const int na = mesh_.elems[e][a];
          const Eigen::Vector2d gNa(dNdx_[gp][a], dNdy_[gp][a]);
          sys.R[na] += w * (bulk * N_[gp][a] +
                            p.sigma_Y * lp2 * g.g_p * ga.dot(gNa));
          for (int b = 0; b < 4; ++b) {
            const int nb = mesh_.elems[e][b];
            const Eigen::Vector2d gNb(dNdx_[gp][b], dNdy_[gp][b]);
            sys.K(na, nb) += w * (dbulk * N_[gp][a] * N_[gp][b] +
                                  p.sigma_Y * lp2 * g.g_p * gNa.dot(gNb));
          }
        }
      }
    }
    return sys;
  }

  void solve_hardening() {
    // Fast path: every quadrature point is elastic at alpha = alpha_n.
    alpha_ = alpha_n_;
    bool plastic = false;
    for (int e = 0; e < n_elems_ && !plastic; ++e) {
      const MaterialParams& p = eparams(e);
      for (int gp = 0; gp < 4; ++gp) {
        const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
        const SymTensor eps = strain_at(e, gp);
        const double dv = interp(d_, e, gp);
        const SymTensor F_tr = detail::stress_at(eps - qp_[q].eps_p, dv,
                                                 qp_[q].alpha, fiber_, model_,
                                                 p).dev();
        if (yield_function(F_tr, dv, interp(alpha_n_, e, gp), model_, p) > 0) {
          plastic = true;
          break;
        }
      }
    }
    if (!plastic) return;
    // The hardening Jacobian is positive definite: growth is signalled by a
    // negative residual.
    solve_bound_constrained([this]() { return assemble_hardening_internal(); },
                            alpha_, alpha_n_,
                            std::numeric_limits<double>::infinity(), -1.0,
                            "hardening");
  }

  // --------------------------------------------------------------------------
  // Bound-constrained Newton with active-set clamping (x >= lower, nodewise)
  // --------------------------------------------------------------------------

  /// `growth_dir`: sign of the residual at a bound node that indicates the
  /// equation wants the unknown to grow (depends on the Jacobian's
  /// definiteness; see call sites).  `upper` is a scalar cap applied nodewise
  /// (1 for the phase field; +infinity disables it).
  template <typename AssembleFn>
  void solve_bound_constrained(AssembleFn assemble, Eigen::VectorXd& x,
                               const Eigen::VectorXd& lower, double upper,
                               double growth_dir, const char* label) {
    std::vector<bool> frozen_lo(n_nodes_, false), frozen_hi(n_nodes_, false);
    for (int as_it = 0; as_it < set_.max_active_set; ++as_it) {
      // Newton on the free set.
      double r0 = -1.0;
      for (int it = 0; it < set_.max_newton; ++it) {
        AssembledSystem sys = assemble();
        std::vector<int> freei;
        freei.reserve(n_nodes_);
        for (int n = 0; n < n_nodes_; ++n)
          if (!frozen_lo[n] && !frozen_hi[n]) freei.push_back(n);
        const int nf = static_cast<int>(freei.size());
        if (nf == 0) break;
        Eigen::VectorXd Rf(nf);
        for (int i = 0; i < nf; ++i) Rf[i] = sys.R[freei[i]];
        const double rn = Rf.norm();
        if (r0 < 0) r0 = rn;
        if (rn <= std::max(set_.tol_newton * std::max(r0, 1.0), 1e-12)) break;
        Eigen::MatrixXd Kf(nf, nf);
        for (int i = 0; i < nf; ++i)
          for (int j = 0; j < nf; ++j) Kf(i, j) = sys.K(freei[i], freei[j]);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(Kf);
        if (!lu.isInvertible())
          throw StepFailure(step_, std::string(label) + ": singular tangent");
        Eigen::VectorXd dx = lu.solve(-Rf);
        if (!dx.allFinite())
          throw StepFailure(step_, std::string(label) + ": non-finite update");
        // Backtracking line search (same rationale as the displacement solve:
        // threshold terms make the residual only piecewise smooth).
        const Eigen::VectorXd x_save = x;
        double lam = 1.0;
        for (int ls = 0; ls < 12; ++ls) {
          for (int i = 0; i < nf; ++i) x[freei[i]] = x_save[freei[i]] + lam * dx[i];
          AssembledSystem trial = assemble();
          double rn_new = 0.0;
          for (int i = 0; i < nf; ++i) rn_new += trial.R[freei[i]] * trial.R[freei[i]];
          rn_new = std::sqrt(rn_new);
          if (rn_new <= rn * (1.0 - 1e-4 * lam) || rn_new <= 1e-12) break;
          lam *= 0.5;
        }
      }

      // Clamp violations; release bound nodes whose residual pushes back
      // into the admissible interval.
      AssembledSystem sys = assemble();
      bool changed = false;
      for (int n = 0; n < n_nodes_; ++n) {
        const bool is_free = !frozen_lo[n] && !frozen_hi[n];
        if (is_free && x[n] < lower[n] - 1e-14) {
          x[n] = lower[n];
          frozen_lo[n] = true;
          changed = true;
        } else if (is_free && x[n] > upper + 1e-14) {
          x[n] = upper;
          frozen_hi[n] = true;
          changed = true;
        } else if (frozen_lo[n] && growth_dir * sys.R[n] > 1e-12) {
          frozen_lo[n] = false;
          changed = true;
        } else if (frozen_hi[n] && growth_dir * sys.R[n] < -1e-12) {
          frozen_hi[n] = false;
          changed = true;
        }
      }
      if (!changed) return;
    }
    throw StepFailure(step_, std::string(label) + ": active-set cycling");
  }

  // --------------------------------------------------------------------------
  // Stagger bookkeeping
  // --------------------------------------------------------------------------

  double combined_residual() {
    refresh_scratch_plasticity();
    Eigen::VectorXd f = internal_force();
    double r2 = 0.0;
    for (int i : free_udofs_) r2 += f[i] * f[i];

    AssembledSystem pf = assemble_phasefield_internal(hist_scratch_);
    for (int n = 0; n < n_nodes_; ++n) {
      // Complementarity: nodes pinned at a bound with a residual pointing
      // out of the admissible interval satisfy the inequality form.
      if (d_[n] <= d_n_[n] + 1e-14 && pf.R[n] < 0) continue;
      if (d_[n] >= 1.0 - 1e-14 && pf.R[n] > 0) continue;
      r2 += pf.R[n] * pf.R[n];
    }
    if (model_ == ModelId::M3) {
      AssembledSystem hs = assemble_hardening_internal();
      for (int n = 0; n < n_nodes_; ++n) {
        if (alpha_[n] <= alpha_n_[n] + 1e-14 && hs.R[n] > 0) continue;
        r2 += hs.R[n] * hs.R[n];
      }
    }
    return std::sqrt(r2);
  }

  void commit() {
    refresh_scratch_plasticity();
    for (int e = 0; e < n_elems_; ++e) {
      for (int gp = 0; gp < 4; ++gp) {
        const std::size_t q = static_cast<std::size_t>(e) * 4 + gp;
        qp_[q] = scratch_[q];
        qp_[q].history = hist_scratch_[q];
        qp_[q].d_prev = interp(d_, e, gp);
      }
    }
    d_n_ = d_;
    alpha_n_ = alpha_;
  }

  // --------------------------------------------------------------------------

  Mesh mesh_;
  ModelId model_;
  MaterialParams base_;
  LoadProgram load_;
  SolveSettings set_;
  StructuralTensor fiber_;

  int n_nodes_ = 0, n_elems_ = 0;
  double N_[4][4], dNdx_[4][4], dNdy_[4][4], wdetJ_[4];
  std::vector<std::pair<bool, double>> constraint_;
  std::vector<int> free_udofs_;
  std::vector<MaterialParams> elem_params_;
  std::vector<int> elem_param_index_;

  Eigen::VectorXd u_, d_, d_n_, alpha_, alpha_n_;
  std::vector<MaterialPointState> qp_;       // committed
  std::vector<MaterialPointState> scratch_;  // provisional within a step
  std::vector<double> hist_scratch_;
  double ubar_ = 0.0;
  int step_ = 0;
  int last_stagger_ = 0;
  double force_scale_ = 1.0;
};

/// Convenience wrapper matching the operation signature.
inline LoadDisplacementCurve run_forward(const Mesh& mesh, ModelId model,
                                         const MaterialParams& params,
                                         const LoadProgram& load,
                                         const SolveSettings& settings,
                                         int limit_steps = -1) {
  ForwardSolver solver(mesh, model, params, load, settings);
  return solver.run(limit_steps);
}

}  // namespace ductile::fem

#endif  // DUCTILE_FEM_HPP
