#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>

#include "elastomono/fem.hpp"
#include "elastomono/ndmap.hpp"
#include "generators.hpp"

using namespace elastomono;

namespace {

Mesh reference_triangle() {
    Mesh m;
    m.nodes = {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}};
    m.elements = {{0, 1, 2}};
    m.element_region = {0};
    return m;
}

// Energy of a local displacement through hat-function coefficients solved
// from [1 x y] and the edge-midpoint rule.
double quadrature_energy(const Mesh& m, std::size_t e, const Eigen::Matrix<double, 6, 1>& u, double lambda,
                         double mu) {
    const auto& t = m.elements[e];
    Eigen::Matrix3d v;
    for (int i = 0; i < 3; ++i) v.row(i) << 1.0, m.nodes[t[i]].x, m.nodes[t[i]].y;
    const Eigen::Matrix3d c = v.inverse();  // column i: coefficients of hat i
    double ux = 0, uy = 0, vx = 0, vy = 0;
    for (int i = 0; i < 3; ++i) {
        ux += u[2 * i] * c(1, i);
        uy += u[2 * i] * c(2, i);
        vx += u[2 * i + 1] * c(1, i);
        vy += u[2 * i + 1] * c(2, i);
    }
    const double area = 0.5 * std::abs(v.determinant());
    double sum = 0.0;
    for (int q = 0; q < 3; ++q) {
        const double div = ux + vy, exy = 0.5 * (uy + vx);
        sum += (lambda * div * div + 2.0 * mu * (ux * ux + vy * vy + 2.0 * exy * exy)) / 3.0;
    }
    return area * sum;
}

Mesh square(int n) { return build_unit_square_mesh(n, {Side::bottom}); }

} // namespace

TEST(Fem, ReferenceElementStiffness) {
    const auto k = element_stiffness(reference_triangle(), 0, 1.0, 1.0);
    EXPECT_DOUBLE_EQ(k(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(k(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(k(2, 2), 1.5);
    EXPECT_DOUBLE_EQ(k(2, 5), 0.5);
    EXPECT_DOUBLE_EQ(k(3, 3), 0.5);
    EXPECT_TRUE(k.isApprox(k.transpose(), 0.0));
}

TEST(FemProperty, ElementStiffnessMatchesQuadrature) {
    gen::Rng rng(21);
    for (int trial = 0; trial < 40; ++trial) {
        Mesh m;
        m.nodes = {{rng.uniform(0, 0.3), rng.uniform(0, 0.3)},
                   {rng.uniform(0.7, 1), rng.uniform(0, 0.3)},
                   {rng.uniform(0.3, 0.7), rng.uniform(0.7, 1)}};
        m.elements = {{0, 1, 2}};
        m.element_region = {0};
        const double lambda = rng.uniform(0.1, 5), mu = rng.uniform(0.1, 5);
        const auto k = element_stiffness(m, 0, lambda, mu);
        Eigen::Matrix<double, 6, 1> u;
        for (int i = 0; i < 6; ++i) u[i] = rng.uniform(-1, 1);
        const double direct = u.dot(k * u);
        EXPECT_NEAR(direct, quadrature_energy(m, 0, u, lambda, mu), 1e-12 * std::max(1.0, direct));

        // Rigid motions carry no energy.
        Eigen::Matrix<double, 6, 1> r;
        const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), w = rng.uniform(-1, 1);
        for (int i = 0; i < 3; ++i) {
            r[2 * i] = a - w * m.nodes[i].y;
            r[2 * i + 1] = b + w * m.nodes[i].x;
        }
        EXPECT_NEAR((k * r).norm(), 0.0, 1e-12);
    }
}

TEST(Fem, SparseSolveMatchesDenseSolve) {
    const Mesh m = label_regions(square(8), {{Disc{{0.5, 0.55}, 0.12}, 1, RegionKind::rigid},
                                             {Rect{{0.13, 0.2}, {0.26, 0.4}}, 2, RegionKind::cavity}});
    const LameField f = make_lame_field(m, {1.0, 1.0}, {{1, Rigid{}}, {2, Cavity{}}});
    const DiscreteSystem sys = assemble_system(m, f);
    const LoadBasis basis = build_load_basis(m);
    const Eigen::MatrixXd rhs = basis.load_matrix(sys);
    const Eigen::MatrixXd k = dense_stiffness(sys);
    const Eigen::MatrixXd dense = k.fullPivLu().solve(rhs);
    const Eigen::MatrixXd sparse = sys.solve(rhs);
    EXPECT_LE((dense - sparse).norm(), 1e-10 * dense.norm());
    EXPECT_EQ(sys.dofs().bodies.size(), 1u);
}

TEST(Fem, SolveCounterCountsColumns) {
    const Mesh m = square(4);
    const DiscreteSystem sys = assemble_system(m, background_field(m, {1.0, 1.0}));
    const auto before = forward_solve_counter().load();
    sys.solve(Eigen::MatrixXd::Ones(sys.size(), 5));
    EXPECT_EQ(forward_solve_counter().load() - before, 5);
}

TEST(Fem, EnergyIdentityOnMixedMedium) {
    const Mesh m = label_regions(square(12), {{Disc{{0.5, 0.6}, 0.15}, 1, RegionKind::rigid},
                                              {Rect{{0.1, 0.3}, {0.22, 0.5}}, 2, RegionKind::cavity},
                                              {Disc{{0.75, 0.3}, 0.1}, 3, RegionKind::finite}});
    const LameField f = make_lame_field(m, {1.0, 2.0}, {{1, Rigid{}}, {2, Cavity{}}, {3, Finite{4.0, 0.5}}});
    const DiscreteSystem sys = assemble_system(m, f);
    const LoadBasis basis = build_load_basis(m, {0, 1}, 2);
    const ElementSet all = ElementSet(m.element_count()).complement();
    for (std::size_t k = 0; k < basis.size(); ++k) {
        const BoundaryLoad g = basis.traction(sys, k);
        const Displacement u = solve_neumann(sys, g);
        const double energy = energy_on_region(m, u, f, all).total();
        EXPECT_NEAR(boundary_work(sys, g, u), energy, 1e-10 * energy);
        for (ElementId e : f.rigid_set().indices()) EXPECT_EQ(element_strain(m, u, e).frobenius_sq(), 0.0);
    }
}

TEST(Fem, RigidLimitOfStiffInclusion) {
    const Mesh m = label_regions(square(10), {{Disc{{0.5, 0.55}, 0.12}, 1, RegionKind::rigid}});
    const LameField rigid = make_lame_field(m, {1.0, 1.0}, {{1, Rigid{}}});
    const LoadBasis basis = build_load_basis(m, {0, 1}, 3);
    const NdMatrix exact = assemble_nd_matrix(m, rigid, basis);
    double previous = 1e300;
    for (double eps : {1e-2, 1e-4, 1e-6}) {
        const double err = spectral_norm(exact.values - assemble_nd_matrix(m, truncate_extreme(m, rigid, eps), basis).values);
        EXPECT_LT(err, previous);
        previous = err;
    }
    EXPECT_LT(previous, 1e-5 * spectral_norm(exact.values));
}

// Dense re-solve of the background Dirichlet problem on the cavity, assembled
// here without DiscreteSystem.
TEST(Fem, CavityExtensionMatchesDenseResolve) {
    const Mesh m = label_regions(square(10), {{Rect{{0.3, 0.3}, {0.7, 0.6}}, 1, RegionKind::cavity}});
    const Background bg{2.0, 1.5};
    const LameField f = make_lame_field(m, bg, {{1, Cavity{}}});
    const DiscreteSystem sys = assemble_system(m, f);
    const LoadBasis basis = build_load_basis(m);
    const Displacement u = solve_neumann(sys, basis.traction(sys, 3));
    const Displacement ext = extend_E(m, f, u);

    std::vector<int> unknown(m.node_count(), -1);
    int count = 0;
    for (std::size_t v = 0; v < m.node_count(); ++v)
        if (!u.defined[v]) unknown[v] = count++;
    ASSERT_GT(count, 0);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * count, 2 * count);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(2 * count);
    for (ElementId e : f.cavity_set().indices()) {
        const auto ke = element_stiffness(m, e, bg.lambda, bg.mu);
        const auto& t = m.elements[e];
        for (int i = 0; i < 6; ++i) {
            if (unknown[t[i / 2]] < 0) continue;
            for (int j = 0; j < 6; ++j) {
                const int col = unknown[t[j / 2]];
                if (col >= 0) a(2 * unknown[t[i / 2]] + i % 2, 2 * col + j % 2) += ke(i, j);
                else b[2 * unknown[t[i / 2]] + i % 2] -= ke(i, j) * u.nodal[t[j / 2]][j % 2];
            }
        }
    }
    const Eigen::VectorXd x = a.partialPivLu().solve(b);
    for (std::size_t v = 0; v < m.node_count(); ++v) {
        if (unknown[v] < 0) {
            EXPECT_EQ(ext.nodal[v], u.nodal[v]);
            continue;
        }
        EXPECT_NEAR(ext.nodal[v][0], x[2 * unknown[v]], 1e-12);
        EXPECT_NEAR(ext.nodal[v][1], x[2 * unknown[v] + 1], 1e-12);
    }
    EXPECT_TRUE(ext.extended);
}

TEST(Fem, CavityExtensionReproducesAffineTraces) {
    const Mesh m = label_regions(square(10), {{Disc{{0.5, 0.5}, 0.2}, 1, RegionKind::cavity}});
    const LameField f = make_lame_field(m, {1.0, 1.0}, {{1, Cavity{}}});
    const DiscreteSystem sys = assemble_system(m, f);
    Displacement u = sys.expand(Eigen::VectorXd::Zero(sys.size()));
    for (std::size_t v = 0; v < m.node_count(); ++v)
        if (u.defined[v]) u.nodal[v] = {0.3 + 0.2 * m.nodes[v].x - 0.7 * m.nodes[v].y, -0.1 + 0.5 * m.nodes[v].x};
    const Displacement ext = extend_E(m, f, u);
    for (std::size_t v = 0; v < m.node_count(); ++v) {
        EXPECT_NEAR(ext.nodal[v][0], 0.3 + 0.2 * m.nodes[v].x - 0.7 * m.nodes[v].y, 1e-12);
        EXPECT_NEAR(ext.nodal[v][1], -0.1 + 0.5 * m.nodes[v].x, 1e-12);
    }
}

TEST(Fem, RejectsDegenerateConfigurations) {
    const Mesh m = square(8);
    // Rigid block on the Dirichlet side.
    const ElementSet bottom = elements_in(m, Rect{{0.3, 0.0}, {0.6, 0.2}});
    EXPECT_THROW(assemble_system(m, rigid_field(m, {1.0, 1.0}, bottom)), ValidationError);
    // Cavity opening onto the Neumann boundary.
    const ElementSet top = elements_in(m, Rect{{0.3, 0.8}, {0.6, 1.0}});
    EXPECT_THROW(assemble_system(m, cavity_field(m, {1.0, 1.0}, top)), ValidationError);
    // Cavity covering the whole Dirichlet side.
    const ElementSet strip = elements_in(m, Rect{{0.0, 0.0}, {1.0, 0.2}});
    EXPECT_THROW(assemble_system(m, cavity_field(m, {1.0, 1.0}, strip)), std::runtime_error);

    const DiscreteSystem sys = assemble_system(m, background_field(m, {1.0, 1.0}));
    BoundaryLoad g;
    g.traction.assign(3, {0.0, 0.0});
    EXPECT_THROW(sys.load_vector(g), ValidationError);
}

TEST(Fem, RigidRestrictionRoundTrip) {
    const Mesh m = label_regions(square(8), {{Disc{{0.5, 0.5}, 0.2}, 1, RegionKind::rigid}});
    const DiscreteSystem sys = assemble_system(m, make_lame_field(m, {1.0, 1.0}, {{1, Rigid{}}}));
    gen::Rng rng(3);
    Eigen::VectorXd x(sys.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1, 1);
    EXPECT_LE((sys.restrict_to_dofs(sys.expand(x)) - x).norm(), 1e-14);
}
