#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <memory>
#include <mutex>
#include <string>

#include "elastomono/errors.hpp"
#include "elastomono/materials.hpp"
#include "elastomono/mesh.hpp"
#include "elastomono/ndmap.hpp"

namespace elastomono {

struct LoewnerResult {
    double min_eig = 0.0;
    bool holds = false;  // min_eig >= -tau
    double tau = 0.0;
};

inline double min_eigenvalue(const Eigen::MatrixXd& m) {
    if (m.rows() != m.cols()) throw ValidationError("monotonicity", "matrix is not square");
    if (m.size() == 0) throw ValidationError("monotonicity", "empty matrix");
    const Eigen::MatrixXd s = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericalError("monotonicity", "symmetric eigensolver failed");
    return es.eigenvalues()(0);
}

inline void require_same_basis(const NdMatrix& a, const NdMatrix& b) {
    if (a.fingerprint != b.fingerprint)
        throw ValidationError("monotonicity", "operators are expressed in different load bases");
    if (a.dim() != b.dim()) throw ValidationError("monotonicity", "operator dimensions differ");
}

// Smallest eigenvalue of the symmetrized A - B.
inline double loewner_min_eig(const NdMatrix& a, const NdMatrix& b) {
    require_same_basis(a, b);
    return min_eigenvalue(a.values - b.values);
}

inline LoewnerResult loewner_result(double min_eig, double tau) { return {min_eig, min_eig >= -tau, tau}; }

// A >= B up to tau.
inline LoewnerResult loewner_test(const NdMatrix& a, const NdMatrix& b, double tau) {
    return loewner_result(loewner_min_eig(a, b), tau);
}

// ---------------------------------------------------------------------------
// Test context

// Thresholds for the two kinds of Loewner test. `upper` applies to tests of
// the form T >= Lambda (measured operator bounded above), `lower` to
// Lambda >= T. They are kept apart because discretization error of refined
// measurement data only shows up on the upper side.
struct Thresholds {
    double upper = 0.0;
    double lower = 0.0;

    static Thresholds uniform(double tau) { return {tau, tau}; }
    Thresholds plus(double delta) const { return {upper + delta, lower + delta}; }
    friend bool operator==(const Thresholds&, const Thresholds&) = default;
};

inline void check_thresholds(const Thresholds& t) {
    if (!(t.upper >= 0.0) || !(t.lower >= 0.0))
        throw ValidationError("monotonicity", "threshold tau must be non-negative");
}

enum class ExtremeOperator { exact, truncated };

// Which halves of a two-sided sandwich Lambda_upper >= Lambda >= Lambda_lower
// are consulted. Purely positive inclusions need only the lower bound, purely
// negative ones only the upper bound.
enum class Inequalities { both, lower, upper };

enum class InnerMode { full, linearized };

inline std::string to_string(Inequalities i) {
    switch (i) {
        case Inequalities::both: return "both";
        case Inequalities::lower: return "lower";
        case Inequalities::upper: return "upper";
    }
    return "both";
}
inline Inequalities inequalities_from_string(const std::string& s) {
    if (s == "both") return Inequalities::both;
    if (s == "lower") return Inequalities::lower;
    if (s == "upper") return Inequalities::upper;
    throw ValidationError("monotonicity", "unknown inequality selection '" + s + "' (expected both, lower or upper)");
}
inline std::string to_string(InnerMode m) { return m == InnerMode::full ? "full" : "linearized"; }
inline InnerMode inner_mode_from_string(const std::string& s) {
    if (s == "full") return InnerMode::full;
    if (s == "linearized") return InnerMode::linearized;
    throw ValidationError("monotonicity", "unknown inner mode '" + s + "' (expected full or linearized)");
}
inline std::string to_string(ExtremeOperator e) { return e == ExtremeOperator::exact ? "exact" : "truncated"; }
inline ExtremeOperator extreme_operator_from_string(const std::string& s) {
    if (s == "exact") return ExtremeOperator::exact;
    if (s == "truncated") return ExtremeOperator::truncated;
    throw ValidationError("monotonicity", "unknown extreme operator '" + s + "' (expected exact or truncated)");
}

// Everything a test needs besides the measured matrix and the test set. The
// mesh and basis must outlive the context. The background sensitivity (used by
// all linearized tests) is computed on first use and shared between copies.
class TestContext {
public:
    TestContext(const Mesh& mesh, Background background, const LoadBasis& basis, Thresholds tau, int threads = 1)
        : mesh_(&mesh), background_(background), basis_(&basis), tau_(tau), threads_(threads),
          lazy_(std::make_shared<Lazy>()) {
        check_thresholds(tau);
        if (threads < 1) throw ValidationError("monotonicity", "thread count must be at least 1");
        if (boundary_fingerprint(mesh, basis.directions(), basis.edges_per_load()) != basis.fingerprint())
            throw ValidationError("monotonicity", "load basis fingerprint does not match the mesh");
        if (!(background.lambda > 0.0) || !(background.mu > 0.0))
            throw ValidationError("monotonicity", "background Lame parameters must be positive");
    }

    const Mesh& mesh() const { return *mesh_; }
    const Background& background() const { return background_; }
    const LoadBasis& basis() const { return *basis_; }
    const Thresholds& tau() const { return tau_; }
    int threads() const { return threads_; }
    ExtremeOperator extreme() const { return extreme_; }
    double truncation_eps() const { return eps_; }

    TestContext with_tau(Thresholds tau) const {
        check_thresholds(tau);
        TestContext c = *this;
        c.tau_ = tau;
        return c;
    }
    // Same problem, other parallel width; shares the sensitivity.
    TestContext with_threads(int threads) const {
        if (threads < 1) throw ValidationError("monotonicity", "thread count must be at least 1");
        TestContext c = *this;
        c.threads_ = threads;
        return c;
    }
    TestContext with_extreme(ExtremeOperator op, double eps = 1e-4) const {
        TestContext c = *this;
        if (op == ExtremeOperator::truncated && (!(eps > 0.0) || !(eps < 1.0)))
            throw ValidationError("monotonicity", "truncation level must satisfy 0 < eps < 1");
        c.extreme_ = op;
        c.eps_ = eps;
        return c;
    }

    const BackgroundSensitivity& sensitivity() const {
        std::call_once(lazy_->once, [&] {
            lazy_->value = std::make_shared<const BackgroundSensitivity>(
                *mesh_, background_field(*mesh_, background_), *basis_, threads_);
        });
        return *lazy_->value;
    }

    // Adopts an already computed sensitivity (must belong to this mesh/basis).
    void set_sensitivity(std::shared_ptr<const BackgroundSensitivity> s) {
        if (s->fingerprint() != basis_->fingerprint())
            throw ValidationError("monotonicity", "sensitivity belongs to a different load basis");
        lazy_ = std::make_shared<Lazy>();
        std::call_once(lazy_->once, [&] { lazy_->value = std::move(s); });
    }

private:
    struct Lazy {
        std::once_flag once;
        std::shared_ptr<const BackgroundSensitivity> value;
    };

    const Mesh* mesh_;
    Background background_;
    const LoadBasis* basis_;
    Thresholds tau_;
    int threads_;
    ExtremeOperator extreme_ = ExtremeOperator::exact;
    double eps_ = 1e-4;
    std::shared_ptr<Lazy> lazy_;
};

// ---------------------------------------------------------------------------
// Test operators

// Lambda_C^0: Lame parameters 0 in C.
inline NdMatrix cavity_operator(const TestContext& ctx, const ElementSet& c) {
    if (c.empty()) throw ValidationError("monotonicity", "test set is empty");
    LameField f = cavity_field(ctx.mesh(), ctx.background(), c);
    if (ctx.extreme() == ExtremeOperator::truncated) f = truncate_extreme(ctx.mesh(), f, ctx.truncation_eps());
    return assemble_nd_matrix(ctx.mesh(), f, ctx.basis(), ctx.threads(), "cavity test operator");
}

// Lambda^C_0: Lame parameters infinite in C.
inline NdMatrix rigid_operator(const TestContext& ctx, const ElementSet& c) {
    if (c.empty()) throw ValidationError("monotonicity", "test set is empty");
    LameField f = rigid_field(ctx.mesh(), ctx.background(), c);
    if (ctx.extreme() == ExtremeOperator::truncated) f = truncate_extreme(ctx.mesh(), f, ctx.truncation_eps());
    return assemble_nd_matrix(ctx.mesh(), f, ctx.basis(), ctx.threads(), "rigid test operator");
}

// Lambda_{beta,B} for (lambda_0 + beta chi_B, mu_0 + beta chi_B); beta may be negative.
inline NdMatrix perturbed_operator(const TestContext& ctx, const ElementSet& b, double beta) {
    if (b.empty()) throw ValidationError("monotonicity", "test set is empty");
    return assemble_nd_matrix(ctx.mesh(), perturbed_field(ctx.mesh(), ctx.background(), b, beta), ctx.basis(),
                              ctx.threads(), "perturbed test operator");
}

// Lambda_0 + DLambda_{beta,B}.
inline NdMatrix linearized_operator(const TestContext& ctx, const ElementSet& b, double beta) {
    const BackgroundSensitivity& s = ctx.sensitivity();
    NdMatrix m = s.nd0();
    m.values += s.frechet(b, beta).values;
    m.provenance = "linearized test operator";
    return m;
}

// ---------------------------------------------------------------------------
// Tests

struct SandwichResult {
    LoewnerResult upper;  // Lambda_upper - Lambda
    LoewnerResult lower;  // Lambda - Lambda_lower
    bool upper_consulted = false;
    bool lower_consulted = false;

    bool holds() const { return (!upper_consulted || upper.holds) && (!lower_consulted || lower.holds); }
};

// Lambda_C^0 >= Lambda >= Lambda^C_0.
inline SandwichResult outer_test(const NdMatrix& measured, const ElementSet& c, const TestContext& ctx,
                                 Inequalities which = Inequalities::both) {
    if (c.empty()) throw ValidationError("monotonicity", "outer test set is empty");
    SandwichResult r;
    if (which != Inequalities::lower) {
        r.upper = loewner_test(cavity_operator(ctx, c), measured, ctx.tau().upper);
        r.upper_consulted = true;
    }
    if (which != Inequalities::upper) {
        r.lower = loewner_test(measured, rigid_operator(ctx, c), ctx.tau().lower);
        r.lower_consulted = true;
    }
    return r;
}

inline void check_inner_beta(double beta, InnerMode mode, bool negative, const TestContext& ctx) {
    const double kappa = beta_bounds(ctx.background()).kappa();
    if (!(beta > 0.0)) throw ValidationError("monotonicity", "inner test needs beta > 0");
    if ((negative || mode == InnerMode::linearized) && !(beta < kappa)) {
        char buf[200];
        std::snprintf(buf, sizeof(buf),
                      "inner test needs 0 < beta < kappa = min(lambda_0, mu_0) = %.6g, got beta = %.6g", kappa, beta);
        throw ValidationError("monotonicity", buf);
    }
}

// Positive (rigid) inclusions: B inside D iff Lambda_{beta,B} >= Lambda
// (full) or Lambda_0 + DLambda_{beta,B} >= Lambda (linearized).
inline LoewnerResult inner_test_pos(const NdMatrix& measured, const ElementSet& b, double beta, InnerMode mode,
                                    const TestContext& ctx) {
    check_inner_beta(beta, mode, false, ctx);
    if (b.empty()) throw ValidationError("monotonicity", "inner test set is empty");
    const NdMatrix test = mode == InnerMode::full ? perturbed_operator(ctx, b, beta) : linearized_operator(ctx, b, beta);
    return loewner_test(test, measured, ctx.tau().upper);
}

// Negative (cavity) inclusions: B inside D iff Lambda >= Lambda_{-beta,B}
// (full) or Lambda >= Lambda_0 + DLambda_{-beta,B} (linearized).
inline LoewnerResult inner_test_neg(const NdMatrix& measured, const ElementSet& b, double beta, InnerMode mode,
                                    const TestContext& ctx) {
    check_inner_beta(beta, mode, true, ctx);
    if (b.empty()) throw ValidationError("monotonicity", "inner test set is empty");
    const NdMatrix test =
        mode == InnerMode::full ? perturbed_operator(ctx, b, -beta) : linearized_operator(ctx, b, -beta);
    return loewner_test(measured, test, ctx.tau().lower);
}

// Throws unless the field satisfies the contrast bounds of the linearized
// outer test for this beta.
inline void require_linearized_bounds(const LameField& field, double beta, const BetaBounds& bounds) {
    const LinearizedBoundsCheck check = validate_linearized_bounds(field, beta, bounds);
    if (!check.ok) throw ValidationError("monotonicity", "linearized test bounds violated: " + check.message);
}

// Linearized sandwich from a precomputed energy Gram matrix G_C:
//   Lambda_0 + beta_U beta G_C >= Lambda >= Lambda_0 - beta G_C.
inline SandwichResult linearized_outer_from_gram(const NdMatrix& measured, const NdMatrix& nd0,
                                                 const Eigen::MatrixXd& gram_c, double beta, const BetaBounds& bounds,
                                                 const Thresholds& tau, Inequalities which = Inequalities::both) {
    require_same_basis(measured, nd0);
    if (!(beta > 0.0)) throw ValidationError("monotonicity", "linearized outer test needs beta > 0");
    if (!(bounds.beta_L > 0.0) || bounds.beta_U < bounds.beta_L)
        throw ValidationError("monotonicity", "invalid beta bounds");
    if (gram_c.rows() != nd0.dim() || gram_c.cols() != nd0.dim())
        throw ValidationError("monotonicity", "Gram matrix dimension does not match the basis");
    SandwichResult r;
    const Eigen::MatrixXd diff = measured.values - nd0.values;
    if (which != Inequalities::lower) {
        r.upper = loewner_result(min_eigenvalue(bounds.beta_U * beta * gram_c - diff), tau.upper);
        r.upper_consulted = true;
    }
    if (which != Inequalities::upper) {
        r.lower = loewner_result(min_eigenvalue(diff + beta * gram_c), tau.lower);
        r.lower_consulted = true;
    }
    return r;
}

// Lambda_0 + DLambda_{-beta_U beta, C} >= Lambda >= Lambda_0 + DLambda_{beta, C}.
inline SandwichResult linearized_outer_test(const NdMatrix& measured, const ElementSet& c, double beta,
                                            const BetaBounds& bounds, const TestContext& ctx,
                                            Inequalities which = Inequalities::both) {
    if (c.empty()) throw ValidationError("monotonicity", "outer test set is empty");
    const BackgroundSensitivity& s = ctx.sensitivity();
    return linearized_outer_from_gram(measured, s.nd0(), s.energy_gram(c), beta, bounds, ctx.tau(), which);
}

} // namespace elastomono
