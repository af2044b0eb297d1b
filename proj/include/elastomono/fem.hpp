#pragma once

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "elastomono/errors.hpp"
#include "elastomono/materials.hpp"
#include "elastomono/mesh.hpp"

namespace elastomono {

using SparseMatrix = Eigen::SparseMatrix<double>;

// Total number of forward solves performed in this process. Used to verify
// that post-processing steps do not trigger extra PDE solves.
inline std::atomic<std::int64_t>& forward_solve_counter() {
    static std::atomic<std::int64_t> counter{0};
    return counter;
}

// ---------------------------------------------------------------------------
// P1 element kinematics

struct P1Gradients {
    std::array<double, 3> dx{};
    std::array<double, 3> dy{};
    double area = 0.0;
};

inline P1Gradients p1_gradients(const Mesh& mesh, std::size_t e) {
    const auto& t = mesh.elements[e];
    P1Gradients g;
    g.area = mesh.signed_area(e);
    const double inv = 1.0 / (2.0 * g.area);
    for (int i = 0; i < 3; ++i) {
        const Point& pj = mesh.nodes[t[(i + 1) % 3]];
        const Point& pk = mesh.nodes[t[(i + 2) % 3]];
        g.dx[i] = (pj.y - pk.y) * inv;
        g.dy[i] = (pk.x - pj.x) * inv;
    }
    return g;
}

// Elemental stiffness for local dof order (u0x, u0y, u1x, u1y, u2x, u2y):
// area * B^T D B with Voigt strain (exx, eyy, 2 exy).
inline Eigen::Matrix<double, 6, 6> element_stiffness(const Mesh& mesh, std::size_t e, double lambda, double mu) {
    const P1Gradients g = p1_gradients(mesh, e);
    Eigen::Matrix<double, 3, 6> b = Eigen::Matrix<double, 3, 6>::Zero();
    for (int i = 0; i < 3; ++i) {
        b(0, 2 * i) = g.dx[i];
        b(1, 2 * i + 1) = g.dy[i];
        b(2, 2 * i) = g.dy[i];
        b(2, 2 * i + 1) = g.dx[i];
    }
    Eigen::Matrix3d d;
    d << lambda + 2.0 * mu, lambda, 0.0,
         lambda, lambda + 2.0 * mu, 0.0,
         0.0, 0.0, mu;
    return g.area * (b.transpose() * d * b);
}

// Constant divergence and symmetric gradient on one element.
struct ElementStrain {
    double div = 0.0;
    double exx = 0.0;
    double eyy = 0.0;
    double exy = 0.0;

    double frobenius_sq() const { return exx * exx + eyy * eyy + 2.0 * exy * exy; }
};

// ---------------------------------------------------------------------------
// Degrees of freedom

enum class NodeRole : std::uint8_t { free, dirichlet, removed, rigid };
enum class ElementKind : std::uint8_t { finite, cavity, rigid };

// u(x) = (a1, a2) + b * (-(x2 - c2), x1 - c1) on one rigid component.
struct RigidBody {
    Point centroid;
    int dof = 0;  // a1 at dof, a2 at dof + 1, b at dof + 2
    std::vector<NodeId> nodes;
};

struct RigidMotion {
    Point centroid;
    double a1 = 0.0;
    double a2 = 0.0;
    double b = 0.0;
};

struct DofMap {
    std::vector<NodeRole> role;
    std::vector<int> slot;  // free: first dof; rigid: body index; otherwise -1
    std::vector<Point> coords;
    std::vector<RigidBody> bodies;
    int free_nodes = 0;
    int size = 0;

    // Calls f(dof, coefficient) for every reduced dof driving component
    // `comp` of the displacement at node v.
    template <class F>
    void for_each_coefficient(NodeId v, int comp, F&& f) const {
        switch (role[v]) {
        case NodeRole::free: f(slot[v] + comp, 1.0); break;
        case NodeRole::rigid: {
            const RigidBody& body = bodies[slot[v]];
            const Point& p = coords[v];
            f(body.dof + comp, 1.0);
            f(body.dof + 2, comp == 0 ? -(p.y - body.centroid.y) : (p.x - body.centroid.x));
            break;
        }
        default: break;
        }
    }
};

struct NeumannEdge {
    NodeId a = 0;
    NodeId b = 0;
    double length = 0.0;
    Point midpoint;
};

// Per-Neumann-edge constant tractions, in NeumannEdge order.
struct BoundaryLoad {
    std::vector<std::array<double, 2>> traction;
};

// Nodal displacement on the non-cavity part of the mesh. Cavity-interior
// nodes are undefined until extend_E fills them.
struct Displacement {
    std::vector<std::array<double, 2>> nodal;
    std::vector<char> defined;
    std::vector<ElementKind> element_kind;
    std::vector<int> element_body;  // rigid component index or -1
    std::vector<RigidMotion> bodies;
    bool extended = false;
};

// ---------------------------------------------------------------------------
// Assembled system

class DiscreteSystem {
public:
    const DofMap& dofs() const { return dofs_; }
    int size() const { return dofs_.size; }
    const SparseMatrix& stiffness() const { return stiffness_; }
    const std::vector<NeumannEdge>& neumann_edges() const { return neumann_; }

    // <g, v> for every reduced basis function v.
    Eigen::VectorXd load_vector(const BoundaryLoad& load) const {
        if (load.traction.size() != neumann_.size())
            throw ValidationError("fem", "load has " + std::to_string(load.traction.size()) + " edge values, expected " +
                                             std::to_string(neumann_.size()));
        Eigen::VectorXd f = Eigen::VectorXd::Zero(dofs_.size);
        for (std::size_t k = 0; k < neumann_.size(); ++k)
            add_edge_load(f, k, load.traction[k][0], load.traction[k][1]);
        return f;
    }

    // Adds the load of a constant traction (gx, gy) on Neumann edge k.
    void add_edge_load(Eigen::Ref<Eigen::VectorXd> f, std::size_t k, double gx, double gy) const {
        const NeumannEdge& edge = neumann_[k];
        const double half = 0.5 * edge.length;
        for (NodeId v : {edge.a, edge.b}) {
            dofs_.for_each_coefficient(v, 0, [&](int dof, double c) { f[dof] += c * half * gx; });
            dofs_.for_each_coefficient(v, 1, [&](int dof, double c) { f[dof] += c * half * gy; });
        }
    }

    // Solves K U = F column by column. A column is accepted when its relative
    // residual is at most 1e-10, or when it sits at the rounding floor
    // (normwise backward error at most 1e-14) on ill-conditioned systems.
    Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const {
        Eigen::MatrixXd x(rhs.rows(), rhs.cols());
        for (Eigen::Index j = 0; j < rhs.cols(); ++j) x.col(j) = solve_column(rhs.col(j));
        return x;
    }

    Eigen::VectorXd solve_column(const Eigen::VectorXd& rhs) const {
        forward_solve_counter().fetch_add(1);
        const double rhs_norm = rhs.norm();
        if (rhs_norm == 0.0) return Eigen::VectorXd::Zero(rhs.size());
        const auto residual_of = [&](const Eigen::VectorXd& x) {
            return Eigen::VectorXd(rhs - stiffness_.selfadjointView<Eigen::Lower>() * x);
        };
        const auto accepted = [&](const Eigen::VectorXd& x, double r) {
            return r <= 1e-10 * rhs_norm || r <= 1e-14 * (stiffness_norm_ * x.norm() + rhs_norm);
        };
        Eigen::VectorXd x;
        if (solver_) {
            x = solver_->solve(rhs);
            Eigen::VectorXd r = residual_of(x);
            for (int step = 0; step < 3 && r.norm() > 1e-10 * rhs_norm; ++step) {
                const Eigen::VectorXd y = x + solver_->solve(r);
                const Eigen::VectorXd ry = residual_of(y);
                if (!(ry.norm() < r.norm())) break;
                x = y;
                r = ry;
            }
        } else {
            Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper> cg;
            cg.setTolerance(1e-12);
            cg.setMaxIterations(20 * dofs_.size + 100);
            cg.compute(stiffness_);
            x = cg.solve(rhs);
        }
        const double r = residual_of(x).norm();
        if (!accepted(x, r)) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "linear solve did not converge (relative residual %.3e)", r / rhs_norm);
            throw NumericalError("fem", buf);
        }
        return x;
    }

    // Relative residual ||F - K U|| / ||F|| of a candidate solution.
    double relative_residual(const Eigen::VectorXd& rhs, const Eigen::VectorXd& x) const {
        const double n = rhs.norm();
        const double r = (rhs - stiffness_.selfadjointView<Eigen::Lower>() * x).norm();
        return n > 0.0 ? r / n : r;
    }

    // Expands a reduced solution vector to nodal displacement.
    Displacement expand(const Eigen::VectorXd& reduced) const {
        const std::size_t n = dofs_.role.size();
        Displacement u;
        u.nodal.assign(n, {0.0, 0.0});
        u.defined.assign(n, 1);
        u.element_kind = element_kind_;
        u.element_body = element_body_;
        for (const auto& body : dofs_.bodies)
            u.bodies.push_back({body.centroid, reduced[body.dof], reduced[body.dof + 1], reduced[body.dof + 2]});
        for (std::size_t v = 0; v < n; ++v) {
            if (dofs_.role[v] == NodeRole::removed) {
                u.defined[v] = 0;
                continue;
            }
            for (int c = 0; c < 2; ++c) {
                double value = 0.0;
                dofs_.for_each_coefficient(static_cast<NodeId>(v), c,
                                           [&](int dof, double coef) { value += coef * reduced[dof]; });
                u.nodal[v][c] = value;
            }
        }
        u.extended = std::find(element_kind_.begin(), element_kind_.end(), ElementKind::cavity) == element_kind_.end();
        return u;
    }

    // Reduced vector whose expansion interpolates `u` on the free and rigid
    // nodes (rigid motions are read back from the displacement).
    Eigen::VectorXd restrict_to_dofs(const Displacement& u) const {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(dofs_.size);
        for (std::size_t v = 0; v < dofs_.role.size(); ++v) {
            if (dofs_.role[v] == NodeRole::free) {
                x[dofs_.slot[v]] = u.nodal[v][0];
                x[dofs_.slot[v] + 1] = u.nodal[v][1];
            }
        }
        for (std::size_t b = 0; b < dofs_.bodies.size(); ++b) {
            x[dofs_.bodies[b].dof] = u.bodies[b].a1;
            x[dofs_.bodies[b].dof + 1] = u.bodies[b].a2;
            x[dofs_.bodies[b].dof + 2] = u.bodies[b].b;
        }
        return x;
    }

private:
    friend DiscreteSystem assemble_system(const Mesh& mesh, const LameField& field);

    DofMap dofs_;
    SparseMatrix stiffness_;  // lower triangle is authoritative
    double stiffness_norm_ = 0.0;  // Frobenius norm of the full matrix
    std::shared_ptr<const Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower>> solver_;
    std::vector<NeumannEdge> neumann_;
    std::vector<ElementKind> element_kind_;
    std::vector<int> element_body_;
};

// Assembles the stiffness over free displacement dofs. Dirichlet nodes are
// eliminated, nodes touching only cavity elements are removed, and each
// node-connected rigid component is condensed to its three rigid-motion
// coordinates.
inline DiscreteSystem assemble_system(const Mesh& mesh, const LameField& field) {
    if (field.size() != mesh.element_count())
        throw ValidationError("fem", "field does not match the mesh");
    const std::size_t nn = mesh.node_count(), ne = mesh.element_count();
    DiscreteSystem sys;
    DofMap& dofs = sys.dofs_;
    dofs.role.assign(nn, NodeRole::removed);
    dofs.slot.assign(nn, -1);
    dofs.coords = mesh.nodes;

    sys.element_kind_.resize(ne);
    for (std::size_t e = 0; e < ne; ++e) {
        sys.element_kind_[e] = field.is_cavity(e) ? ElementKind::cavity
                               : field.is_rigid(e) ? ElementKind::rigid
                                                   : ElementKind::finite;
        if (sys.element_kind_[e] != ElementKind::cavity)
            for (NodeId v : mesh.elements[e]) dofs.role[v] = NodeRole::free;
    }
    const auto dirichlet = mesh.dirichlet_nodes();
    bool anchored = false;
    for (std::size_t v = 0; v < nn; ++v) {
        if (dirichlet[v] && dofs.role[v] == NodeRole::free) anchored = true;
        if (dirichlet[v]) dofs.role[v] = NodeRole::dirichlet;
    }
    if (!anchored) throw NumericalError("fem", "singular system: no solid element touches the Dirichlet boundary");

    // Rigid components by shared nodes (union-find over rigid elements).
    std::vector<int> parent(nn);
    std::iota(parent.begin(), parent.end(), 0);
    const auto find = [&](int v) {
        while (parent[v] != v) v = parent[v] = parent[parent[v]];
        return v;
    };
    std::vector<char> rigid_node(nn, 0);
    for (std::size_t e = 0; e < ne; ++e) {
        if (sys.element_kind_[e] != ElementKind::rigid) continue;
        const auto& t = mesh.elements[e];
        for (NodeId v : t) {
            if (dirichlet[v]) throw ValidationError("fem", "rigid region touches the Dirichlet boundary");
            rigid_node[v] = 1;
        }
        parent[find(t[1])] = find(t[0]);
        parent[find(t[2])] = find(t[0]);
    }
    std::vector<int> body_of_root(nn, -1);
    for (std::size_t v = 0; v < nn; ++v) {
        if (!rigid_node[v]) continue;
        const int root = find(static_cast<int>(v));
        if (body_of_root[root] < 0) {
            body_of_root[root] = static_cast<int>(dofs.bodies.size());
            dofs.bodies.emplace_back();
        }
        dofs.role[v] = NodeRole::rigid;
        dofs.slot[v] = body_of_root[root];
        dofs.bodies[body_of_root[root]].nodes.push_back(static_cast<NodeId>(v));
    }
    for (std::size_t v = 0; v < nn; ++v) {
        if (dofs.role[v] == NodeRole::free) {
            dofs.slot[v] = 2 * dofs.free_nodes;
            ++dofs.free_nodes;
        }
    }
    dofs.size = 2 * dofs.free_nodes;
    for (auto& body : dofs.bodies) {
        double cx = 0.0, cy = 0.0;
        for (NodeId v : body.nodes) {
            cx += mesh.nodes[v].x;
            cy += mesh.nodes[v].y;
        }
        body.centroid = {cx / body.nodes.size(), cy / body.nodes.size()};
        body.dof = dofs.size;
        dofs.size += 3;
    }
    sys.element_body_.assign(ne, -1);
    for (std::size_t e = 0; e < ne; ++e)
        if (sys.element_kind_[e] == ElementKind::rigid) sys.element_body_[e] = dofs.slot[mesh.elements[e][0]];

    for (std::size_t k = 0; k < mesh.boundary_edges.size(); ++k) {
        const auto& edge = mesh.boundary_edges[k];
        if (edge.tag != EdgeTag::neumann) continue;
        if (dofs.role[edge.a] == NodeRole::removed || dofs.role[edge.b] == NodeRole::removed)
            throw ValidationError("fem", "cavity touches the Neumann boundary");
        sys.neumann_.push_back({edge.a, edge.b, mesh.edge_length(edge),
                                {0.5 * (mesh.nodes[edge.a].x + mesh.nodes[edge.b].x),
                                 0.5 * (mesh.nodes[edge.a].y + mesh.nodes[edge.b].y)}});
    }

    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(ne * 36);
    std::array<std::vector<std::pair<int, double>>, 6> coef;
    for (std::size_t e = 0; e < ne; ++e) {
        if (sys.element_kind_[e] != ElementKind::finite) continue;
        const Finite& lm = field.finite(e);
        const auto ke = element_stiffness(mesh, e, lm.lambda, lm.mu);
        const auto& t = mesh.elements[e];
        for (int a = 0; a < 6; ++a) {
            coef[a].clear();
            dofs.for_each_coefficient(t[a / 2], a % 2, [&](int dof, double c) { coef[a].emplace_back(dof, c); });
        }
        for (int a = 0; a < 6; ++a)
            for (int b = 0; b < 6; ++b)
                for (const auto& [i, ci] : coef[a])
                    for (const auto& [j, cj] : coef[b])
                        if (i >= j) triplets.emplace_back(i, j, ci * ke(a, b) * cj);
    }
    sys.stiffness_.resize(dofs.size, dofs.size);
    sys.stiffness_.setFromTriplets(triplets.begin(), triplets.end());
    sys.stiffness_.makeCompressed();
    {
        double fro = 0.0;
        for (int k = 0; k < sys.stiffness_.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(sys.stiffness_, k); it; ++it)
                fro += (it.row() == it.col() ? 1.0 : 2.0) * it.value() * it.value();
        sys.stiffness_norm_ = std::sqrt(fro);
    }

    auto ldlt = std::make_shared<Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower>>();
    ldlt->compute(sys.stiffness_);
    bool ok = ldlt->info() == Eigen::Success;
    if (ok) {
        const auto d = ldlt->vectorD();
        ok = d.size() == 0 || d.minCoeff() > 0.0;
    }
    if (ok) sys.solver_ = std::move(ldlt);
    return sys;
}

// Full symmetric stiffness (both triangles), for inspection and tests.
inline Eigen::MatrixXd dense_stiffness(const DiscreteSystem& sys) {
    Eigen::MatrixXd lower = Eigen::MatrixXd(sys.stiffness());
    Eigen::MatrixXd full = lower.selfadjointView<Eigen::Lower>();
    return full;
}

inline Displacement solve_neumann(const DiscreteSystem& sys, const BoundaryLoad& load) {
    return sys.expand(sys.solve_column(sys.load_vector(load)));
}

// ---------------------------------------------------------------------------
// Post-processing

inline ElementStrain element_strain(const Mesh& mesh, const Displacement& u, std::size_t e) {
    if (u.element_kind[e] == ElementKind::rigid) return {};
    if (u.element_kind[e] == ElementKind::cavity && !u.extended)
        throw ValidationError("fem", "element " + std::to_string(e) +
                                         " lies in a cavity; apply the extension before querying it");
    const P1Gradients g = p1_gradients(mesh, e);
    const auto& t = mesh.elements[e];
    double uxx = 0.0, uxy = 0.0, uyx = 0.0, uyy = 0.0;
    for (int i = 0; i < 3; ++i) {
        const auto& val = u.nodal[t[i]];
        uxx += val[0] * g.dx[i];
        uxy += val[0] * g.dy[i];
        uyx += val[1] * g.dx[i];
        uyy += val[1] * g.dy[i];
    }
    return {uxx + uyy, uxx, uyy, 0.5 * (uxy + uyx)};
}

inline std::vector<ElementStrain> element_fields(const Mesh& mesh, const Displacement& u) {
    std::vector<ElementStrain> out(mesh.element_count());
    for (std::size_t e = 0; e < mesh.element_count(); ++e) out[e] = element_strain(mesh, u, e);
    return out;
}

struct RegionEnergy {
    double divergence = 0.0;  // integral of lambda |div u|^2
    double shear = 0.0;       // integral of 2 mu |symgrad u|_F^2
    double total() const { return divergence + shear; }
};

// Cavity elements carry zero stiffness and rigid elements zero strain, so
// both contribute nothing.
inline RegionEnergy energy_on_region(const Mesh& mesh, const Displacement& u, const LameField& field,
                                     const ElementSet& region) {
    RegionEnergy r;
    for (ElementId e : region.indices()) {
        if (!field.is_finite(e)) continue;
        const Finite& lm = field.finite(e);
        const ElementStrain s = element_strain(mesh, u, e);
        const double area = mesh.element_area(e);
        r.divergence += area * lm.lambda * s.div * s.div;
        r.shear += area * 2.0 * lm.mu * s.frobenius_sq();
    }
    return r;
}

inline ElementSet elements_in(const Mesh& mesh, const Shape& shape) {
    ElementSet s(mesh.element_count());
    for (std::size_t e = 0; e < mesh.element_count(); ++e)
        if (contains(shape, mesh.barycenter(e))) s.insert(static_cast<ElementId>(e));
    return s;
}

inline RegionEnergy energy_on_region(const Mesh& mesh, const Displacement& u, const LameField& field,
                                     const RegionSpec& region) {
    return energy_on_region(mesh, u, field, elements_in(mesh, region.shape));
}

// <g, u|Gamma_N> for piecewise-constant tractions and P1 traces.
inline double boundary_work(const DiscreteSystem& sys, const BoundaryLoad& load, const Displacement& u) {
    double w = 0.0;
    const auto& edges = sys.neumann_edges();
    for (std::size_t k = 0; k < edges.size(); ++k) {
        const auto& ua = u.nodal[edges[k].a];
        const auto& ub = u.nodal[edges[k].b];
        w += 0.5 * edges[k].length *
             (load.traction[k][0] * (ua[0] + ub[0]) + load.traction[k][1] * (ua[1] + ub[1]));
    }
    return w;
}

// Extension E: fills cavity-interior nodes with the solution of the
// background-coefficient Dirichlet problem whose boundary data is the trace
// of u on the cavity boundary. Nodes outside the cavities are untouched.
inline Displacement extend_E(const Mesh& mesh, const LameField& field, const Displacement& u) {
    Displacement out = u;
    out.extended = true;
    if (!field.has_cavity()) return out;

    const std::size_t nn = mesh.node_count();
    std::vector<int> unknown(nn, -1);
    int count = 0;
    for (std::size_t v = 0; v < nn; ++v)
        if (!u.defined[v]) unknown[v] = count++;
    if (count == 0) return out;

    const Background bg = field.background();
    std::vector<Eigen::Triplet<double>> triplets;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * count);
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
        if (!field.is_cavity(e)) continue;
        const auto ke = element_stiffness(mesh, e, bg.lambda, bg.mu);
        const auto& t = mesh.elements[e];
        for (int a = 0; a < 6; ++a) {
            const int row_node = unknown[t[a / 2]];
            if (row_node < 0) continue;
            const int row = 2 * row_node + a % 2;
            for (int b = 0; b < 6; ++b) {
                const int col_node = unknown[t[b / 2]];
                if (col_node >= 0)
                    triplets.emplace_back(row, 2 * col_node + b % 2, ke(a, b));
                else
                    rhs[row] -= ke(a, b) * u.nodal[t[b / 2]][b % 2];
            }
        }
    }
    SparseMatrix k(2 * count, 2 * count);
    k.setFromTriplets(triplets.begin(), triplets.end());
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(k);
    if (ldlt.info() != Eigen::Success) throw NumericalError("fem", "cavity extension system is singular");
    const Eigen::VectorXd x = ldlt.solve(rhs);
    if ((k * x - rhs).norm() > 1e-10 * std::max(rhs.norm(), 1e-300))
        throw NumericalError("fem", "cavity extension solve did not converge");
    for (std::size_t v = 0; v < nn; ++v) {
        if (unknown[v] < 0) continue;
        out.nodal[v] = {x[2 * unknown[v]], x[2 * unknown[v] + 1]};
        out.defined[v] = 1;
    }
    return out;
}

} // namespace elastomono
