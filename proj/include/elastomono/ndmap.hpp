#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "elastomono/digest.hpp"
#include "elastomono/errors.hpp"
#include "elastomono/fem.hpp"
#include "elastomono/materials.hpp"
#include "elastomono/mesh.hpp"
#include "elastomono/parallel.hpp"

namespace elastomono {

// ---------------------------------------------------------------------------
// Boundary-load basis

struct BasisEdge {
    Point a;
    Point b;
    double length = 0.0;
};

struct BasisLoad {
    std::vector<std::size_t> edges;  // consecutive Neumann edges of one side
    int direction = 0;               // 0: x, 1: y
    double scale = 0.0;              // (support length)^(-1/2)
};

// Indicator loads on the Neumann boundary, one per requested direction and
// per group of `edges_per_load` consecutive edges of a side (1 by default),
// scaled to unit L2 norm. Disjoint supports make the basis exactly
// orthonormal.
class LoadBasis {
public:
    std::size_t size() const { return loads_.size(); }
    const std::vector<BasisEdge>& edges() const { return edges_; }
    const std::vector<BasisLoad>& loads() const { return loads_; }
    const std::vector<int>& directions() const { return directions_; }
    int edges_per_load() const { return edges_per_load_; }
    const std::string& fingerprint() const { return fingerprint_; }

    // Gram matrix in the L2(Gamma_N)^2 inner product, computed edge by edge.
    Eigen::MatrixXd gram() const {
        const std::size_t n = loads_.size();
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < n; ++k) {
                if (loads_[j].direction != loads_[k].direction) continue;
                double overlap = 0.0;
                for (std::size_t a : loads_[j].edges)
                    for (std::size_t b : loads_[k].edges)
                        if (a == b) overlap += edges_[a].length;
                g(j, k) = overlap * loads_[j].scale * loads_[k].scale;
            }
        return g;
    }

    // For every Neumann edge of `sys`, the basis edge containing it. Works for
    // the basis mesh itself and for any refinement of it.
    std::vector<std::size_t> match_edges(const DiscreteSystem& sys) const {
        const auto& sys_edges = sys.neumann_edges();
        std::vector<std::size_t> owner(sys_edges.size());
        std::vector<char> covered(edges_.size(), 0);
        for (std::size_t k = 0; k < sys_edges.size(); ++k) {
            const Point m = sys_edges[k].midpoint;
            bool found = false;
            for (std::size_t e = 0; e < edges_.size() && !found; ++e) {
                const BasisEdge& be = edges_[e];
                const double cross = (be.b.x - be.a.x) * (m.y - be.a.y) - (be.b.y - be.a.y) * (m.x - be.a.x);
                const double t = ((m.x - be.a.x) * (be.b.x - be.a.x) + (m.y - be.a.y) * (be.b.y - be.a.y)) /
                                 (be.length * be.length);
                if (std::abs(cross) <= 1e-12 * be.length && t > 0.0 && t < 1.0) {
                    owner[k] = e;
                    covered[e] = 1;
                    found = true;
                }
            }
            if (!found) throw ValidationError("ndmap", "mesh Neumann boundary does not refine the basis boundary");
        }
        if (std::find(covered.begin(), covered.end(), 0) != covered.end())
            throw ValidationError("ndmap", "basis edge not covered by the mesh Neumann boundary");
        return owner;
    }

    // Load vectors of all basis loads, one column each, for the dofs of `sys`.
    Eigen::MatrixXd load_matrix(const DiscreteSystem& sys) const {
        const auto owner = match_edges(sys);
        Eigen::MatrixXd f = Eigen::MatrixXd::Zero(sys.size(), static_cast<Eigen::Index>(loads_.size()));
        std::vector<std::vector<std::size_t>> loads_on_edge(edges_.size());
        for (std::size_t k = 0; k < loads_.size(); ++k)
            for (std::size_t e : loads_[k].edges) loads_on_edge[e].push_back(k);
        for (std::size_t s = 0; s < owner.size(); ++s) {
            for (std::size_t k : loads_on_edge[owner[s]]) {
                const BasisLoad& load = loads_[k];
                sys.add_edge_load(f.col(static_cast<Eigen::Index>(k)), s, load.direction == 0 ? load.scale : 0.0,
                                  load.direction == 1 ? load.scale : 0.0);
            }
        }
        return f;
    }

    // Traction of basis load k on the Neumann edges of `sys`.
    BoundaryLoad traction(const DiscreteSystem& sys, std::size_t k) const {
        const auto owner = match_edges(sys);
        BoundaryLoad g;
        g.traction.assign(owner.size(), {0.0, 0.0});
        const auto& mine = loads_[k].edges;
        for (std::size_t s = 0; s < owner.size(); ++s)
            if (std::find(mine.begin(), mine.end(), owner[s]) != mine.end())
                g.traction[s][loads_[k].direction] = loads_[k].scale;
        return g;
    }

private:
    friend LoadBasis build_load_basis(const Mesh& mesh, const std::vector<int>& directions, int edges_per_load);

    std::vector<BasisEdge> edges_;
    std::vector<BasisLoad> loads_;
    std::vector<int> directions_;
    int edges_per_load_ = 1;
    std::string fingerprint_;
};

inline std::string boundary_fingerprint(const Mesh& mesh, const std::vector<int>& directions,
                                        int edges_per_load = 1) {
    Digest d;
    d.update(std::string_view("elastomono/load-basis/v1"));
    for (int dir : directions) d.update(static_cast<std::int64_t>(dir));
    d.update(static_cast<std::int64_t>(edges_per_load));
    for (const auto& edge : mesh.boundary_edges) {
        if (edge.tag != EdgeTag::neumann) continue;
        d.update(mesh.nodes[edge.a].x).update(mesh.nodes[edge.a].y);
        d.update(mesh.nodes[edge.b].x).update(mesh.nodes[edge.b].y);
    }
    return d.hex();
}

inline LoadBasis build_load_basis(const Mesh& mesh, const std::vector<int>& directions = {0, 1},
                                  int edges_per_load = 1) {
    if (directions.empty()) throw ValidationError("ndmap", "load basis needs at least one direction");
    for (int dir : directions)
        if (dir != 0 && dir != 1) throw ValidationError("ndmap", "load direction must be 0 (x) or 1 (y)");
    if (edges_per_load < 1) throw ValidationError("ndmap", "edges_per_load must be at least 1");
    LoadBasis basis;
    basis.directions_ = directions;
    basis.edges_per_load_ = edges_per_load;
    std::vector<std::size_t> group;
    double group_length = 0.0;
    Side group_side = Side::bottom;
    const auto flush = [&] {
        if (group.empty()) return;
        for (int dir : directions) basis.loads_.push_back({group, dir, 1.0 / std::sqrt(group_length)});
        group.clear();
        group_length = 0.0;
    };
    for (const auto& edge : mesh.boundary_edges) {
        if (edge.tag != EdgeTag::neumann) {
            flush();
            continue;
        }
        if (!group.empty() && (edge.side != group_side || static_cast<int>(group.size()) == edges_per_load)) flush();
        const double len = mesh.edge_length(edge);
        group.push_back(basis.edges_.size());
        group_length += len;
        group_side = edge.side;
        basis.edges_.push_back({mesh.nodes[edge.a], mesh.nodes[edge.b], len});
    }
    flush();
    if (basis.edges_.empty()) throw ValidationError("ndmap", "mesh has no Neumann edges");
    basis.fingerprint_ = boundary_fingerprint(mesh, directions, edges_per_load);
    return basis;
}

// ---------------------------------------------------------------------------
// ND matrices

struct NdMatrix {
    Eigen::MatrixXd values;
    std::string fingerprint;
    std::string provenance;
    double asymmetry = 0.0;  // ||M - M^T||_2 / ||M||_2 before symmetrization

    Eigen::Index dim() const { return values.rows(); }
};

inline double spectral_norm(const Eigen::MatrixXd& m) {
    if (m.size() == 0) return 0.0;
    if (m.isApprox(m.transpose(), 0.0)) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
        return es.eigenvalues().cwiseAbs().maxCoeff();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m, Eigen::EigenvaluesOnly);
    return std::sqrt(std::max(es.eigenvalues().maxCoeff(), 0.0));
}

inline NdMatrix make_nd_matrix(Eigen::MatrixXd raw, std::string fingerprint, std::string provenance) {
    NdMatrix m;
    const double norm = spectral_norm(0.5 * (raw + raw.transpose()));
    const Eigen::MatrixXd skew = raw - raw.transpose();
    m.asymmetry = norm > 0.0 ? spectral_norm(skew) / norm : 0.0;
    m.values = 0.5 * (raw + raw.transpose());
    m.fingerprint = std::move(fingerprint);
    m.provenance = std::move(provenance);
    return m;
}

// Forward responses to every basis load for one Lamé field.
struct BasisResponses {
    DiscreteSystem system;
    Eigen::MatrixXd loads;     // F, one column per basis load
    Eigen::MatrixXd solution;  // K^{-1} F
};

inline constexpr Eigen::Index kSolveBlock = 16;

inline BasisResponses solve_basis(const Mesh& mesh, const LameField& field, const LoadBasis& basis, int threads = 1) {
    BasisResponses r{assemble_system(mesh, field), {}, {}};
    r.loads = basis.load_matrix(r.system);
    const Eigen::Index cols = r.loads.cols();
    r.solution.resize(r.loads.rows(), cols);
    const std::size_t blocks = static_cast<std::size_t>((cols + kSolveBlock - 1) / kSolveBlock);
    auto parts = parallel_map(blocks, threads, [&](std::size_t b) {
        const Eigen::Index start = static_cast<Eigen::Index>(b) * kSolveBlock;
        const Eigen::Index width = std::min(kSolveBlock, cols - start);
        return Eigen::MatrixXd(r.system.solve(r.loads.middleCols(start, width)));
    });
    for (std::size_t b = 0; b < blocks; ++b)
        r.solution.middleCols(static_cast<Eigen::Index>(b) * kSolveBlock, parts[b].cols()) = parts[b];
    return r;
}

inline NdMatrix nd_from_responses(const BasisResponses& r, const LoadBasis& basis, std::string provenance) {
    return make_nd_matrix(r.loads.transpose() * r.solution, basis.fingerprint(), std::move(provenance));
}

// M_jk = <Lambda g_k, g_j> for the basis of this mesh.
inline NdMatrix assemble_nd_matrix(const Mesh& mesh, const LameField& field, const LoadBasis& basis,
                                   int threads = 1, std::string provenance = "field") {
    if (boundary_fingerprint(mesh, basis.directions(), basis.edges_per_load()) != basis.fingerprint())
        throw ValidationError("ndmap", "load basis fingerprint does not match the mesh");
    return nd_from_responses(solve_basis(mesh, field, basis, threads), basis, std::move(provenance));
}

// ND matrix of a field on a refinement of the basis mesh, expressed in the
// coarse basis (fine edge contributions are aggregated per coarse edge).
inline NdMatrix assemble_nd_matrix_nested(const Mesh& fine_mesh, const LameField& fine_field,
                                          const LoadBasis& coarse_basis, int threads = 1,
                                          std::string provenance = "field (refined data mesh)") {
    return nd_from_responses(solve_basis(fine_mesh, fine_field, coarse_basis, threads), coarse_basis,
                             std::move(provenance));
}

// ---------------------------------------------------------------------------
// Background sensitivities and Fréchet derivative

// Per-element strains of the background responses, scaled by sqrt(area), so
// that region Gram matrices are sums of outer products.
class BackgroundSensitivity {
public:
    BackgroundSensitivity(const Mesh& mesh, const LameField& background, const LoadBasis& basis, int threads = 1)
        : responses_(checked_solve(mesh, background, basis, threads)), fingerprint_(basis.fingerprint()) {
        const Eigen::Index nl = static_cast<Eigen::Index>(basis.size());
        const std::size_t ne = mesh.element_count();
        strains_.resize(nl, static_cast<Eigen::Index>(4 * ne));
        const DiscreteSystem& sys = responses_.system;
        for (Eigen::Index k = 0; k < nl; ++k) {
            const Displacement u = sys.expand(responses_.solution.col(k));
            for (std::size_t e = 0; e < ne; ++e) {
                const ElementStrain s = element_strain(mesh, u, e);
                const double w = std::sqrt(mesh.element_area(e));
                const Eigen::Index c = static_cast<Eigen::Index>(4 * e);
                strains_(k, c) = w * s.div;
                strains_(k, c + 1) = w * s.exx;
                strains_(k, c + 2) = w * s.eyy;
                strains_(k, c + 3) = w * s.exy;
            }
        }
        nd0_ = nd_from_responses(responses_, basis, "background");
    }

    // Lambda_0 in the basis.
    const NdMatrix& nd0() const { return nd0_; }
    const std::string& fingerprint() const { return fingerprint_; }
    std::size_t size() const { return static_cast<std::size_t>(strains_.rows()); }

    // G_jk = sum over region of area * (w_div div_j div_k + w_sym symgrad_j : symgrad_k).
    Eigen::MatrixXd gram(const ElementSet& region, double w_div, double w_sym) const {
        const auto ids = region.indices();
        const Eigen::Index nl = strains_.rows();
        Eigen::MatrixXd x(nl, static_cast<Eigen::Index>(4 * ids.size()));
        const double sd = std::sqrt(w_div), ss = std::sqrt(w_sym), so = std::sqrt(2.0 * w_sym);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const Eigen::Index c = 4 * static_cast<Eigen::Index>(ids[i]);
            const Eigen::Index o = 4 * static_cast<Eigen::Index>(i);
            x.col(o) = sd * strains_.col(c);
            x.col(o + 1) = ss * strains_.col(c + 1);
            x.col(o + 2) = ss * strains_.col(c + 2);
            x.col(o + 3) = so * strains_.col(c + 3);
        }
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(nl, nl);
        g.selfadjointView<Eigen::Lower>().rankUpdate(x);
        g.triangularView<Eigen::StrictlyUpper>() = g.transpose();
        return g;
    }

    // Integral over the region of |div u|^2 + 2 |symgrad u|_F^2 (polarized).
    Eigen::MatrixXd energy_gram(const ElementSet& region) const { return gram(region, 1.0, 2.0); }

    // DLambda_{beta,B} = -beta * energy_gram(B).
    NdMatrix frechet(const ElementSet& region, double beta) const {
        if (region.empty()) throw ValidationError("ndmap", "Frechet derivative needs a non-empty region");
        NdMatrix m;
        m.values = -beta * energy_gram(region);
        m.fingerprint = fingerprint_;
        m.provenance = "frechet derivative";
        return m;
    }

    const BasisResponses& responses() const { return responses_; }

private:
    static BasisResponses checked_solve(const Mesh& mesh, const LameField& background, const LoadBasis& basis,
                                        int threads) {
        if (background.has_extreme())
            throw ValidationError("ndmap", "Frechet derivative needs an all-finite background field");
        if (boundary_fingerprint(mesh, basis.directions(), basis.edges_per_load()) != basis.fingerprint())
            throw ValidationError("ndmap", "load basis fingerprint does not match the mesh");
        return solve_basis(mesh, background, basis, threads);
    }

    BasisResponses responses_;
    std::string fingerprint_;
    Eigen::MatrixXd strains_;  // basis loads x (4 * elements)
    NdMatrix nd0_;
};

inline NdMatrix assemble_frechet_matrix(const Mesh& mesh, const LameField& background, const ElementSet& region,
                                        double beta, const LoadBasis& basis, int threads = 1) {
    if (region.empty()) throw ValidationError("ndmap", "Frechet derivative needs a non-empty region");
    return BackgroundSensitivity(mesh, background, basis, threads).frechet(region, beta);
}

// Adds a random symmetric perturbation with spectral norm exactly delta.
inline NdMatrix add_symmetric_noise(const NdMatrix& m, double delta, std::uint64_t seed) {
    NdMatrix out = m;
    if (delta <= 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Eigen::Index n = m.dim();
    Eigen::MatrixXd e(n, n);
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < n; ++i) e(i, j) = normal(rng);
    e = (0.5 * (e + e.transpose())).eval();
    out.values += (delta / spectral_norm(e)) * e;
    out.provenance += " + noise";
    return out;
}

// ---------------------------------------------------------------------------
// Text serialization: header lines then row-major values with 17 digits.

inline void write_nd_matrix(std::ostream& out, const NdMatrix& m) {
    out << "# elastomono nd-matrix v1\n";
    out << "fingerprint " << m.fingerprint << '\n';
    out << "provenance " << m.provenance << '\n';
    out << "dimension " << m.dim() << '\n';
    char buf[32];
    for (Eigen::Index i = 0; i < m.dim(); ++i) {
        for (Eigen::Index j = 0; j < m.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", m.values(i, j));
            if (j) out << ' ';
            out << buf;
        }
        out << '\n';
    }
}

inline NdMatrix read_nd_matrix(std::istream& in) {
    const auto fail = [](const std::string& what) { return ValidationError("ndmap", "bad nd-matrix file: " + what); };
    std::string line;
    if (!std::getline(in, line) || line != "# elastomono nd-matrix v1") throw fail("missing header");
    NdMatrix m;
    const auto field = [&](const std::string& key) {
        if (!std::getline(in, line) || line.rfind(key + " ", 0) != 0) throw fail("missing " + key);
        return line.substr(key.size() + 1);
    };
    m.fingerprint = field("fingerprint");
    m.provenance = field("provenance");
    const long dim = std::stol(field("dimension"));
    if (dim < 0) throw fail("negative dimension");
    m.values.resize(dim, dim);
    for (long i = 0; i < dim; ++i) {
        if (!std::getline(in, line)) throw fail("truncated matrix");
        std::istringstream row(line);
        for (long j = 0; j < dim; ++j) {
            std::string token;
            if (!(row >> token)) throw fail("short row");
            m.values(i, j) = std::strtod(token.c_str(), nullptr);
        }
    }
    return m;
}

} // namespace elastomono
