#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "elastomono/errors.hpp"
#include "elastomono/mesh.hpp"

namespace elastomono {

struct Finite {
    double lambda = 1.0;
    double mu = 1.0;
    friend bool operator==(const Finite&, const Finite&) = default;
};
struct Cavity {
    friend bool operator==(const Cavity&, const Cavity&) = default;
};
struct Rigid {
    friend bool operator==(const Rigid&, const Rigid&) = default;
};

using MaterialState = std::variant<Finite, Cavity, Rigid>;

struct Background {
    double lambda = 1.0;
    double mu = 1.0;
};

// Per-element Lamé state over a mesh, together with the (constant) background
// pair. Construct through make_lame_field / LameField::validated so the
// invariants below always hold:
//   * finite states are strictly positive;
//   * the non-cavity elements are edge-connected;
//   * cavity and rigid elements share no node.
class LameField {
public:
    static LameField validated(const Mesh& mesh, Background background, std::vector<MaterialState> states) {
        LameField f(background, std::move(states));
        f.validate(mesh);
        return f;
    }

    const Background& background() const { return background_; }
    std::size_t size() const { return states_.size(); }
    const MaterialState& state(std::size_t e) const { return states_[e]; }
    const std::vector<MaterialState>& states() const { return states_; }

    bool is_cavity(std::size_t e) const { return std::holds_alternative<Cavity>(states_[e]); }
    bool is_rigid(std::size_t e) const { return std::holds_alternative<Rigid>(states_[e]); }
    bool is_finite(std::size_t e) const { return std::holds_alternative<Finite>(states_[e]); }
    const Finite& finite(std::size_t e) const {
        if (const auto* f = std::get_if<Finite>(&states_[e])) return *f;
        throw ValidationError("materials", "element " + std::to_string(e) + " is extreme");
    }

    bool has_cavity() const {
        return std::any_of(states_.begin(), states_.end(),
                           [](const auto& s) { return std::holds_alternative<Cavity>(s); });
    }
    bool has_rigid() const {
        return std::any_of(states_.begin(), states_.end(),
                           [](const auto& s) { return std::holds_alternative<Rigid>(s); });
    }
    bool has_extreme() const { return has_cavity() || has_rigid(); }

    ElementSet cavity_set() const { return collect<Cavity>(); }
    ElementSet rigid_set() const { return collect<Rigid>(); }

    // Constant backgrounds satisfy unique continuation; nothing else is
    // accepted at the moment, so this is always true.
    bool ucp_verified() const { return true; }

    friend bool operator==(const LameField& a, const LameField& b) {
        return a.background_.lambda == b.background_.lambda && a.background_.mu == b.background_.mu &&
               a.states_ == b.states_;
    }

private:
    LameField(Background background, std::vector<MaterialState> states)
        : background_(background), states_(std::move(states)) {}

    template <class State>
    ElementSet collect() const {
        ElementSet s(states_.size());
        for (std::size_t e = 0; e < states_.size(); ++e)
            if (std::holds_alternative<State>(states_[e])) s.insert(static_cast<ElementId>(e));
        return s;
    }

    void validate(const Mesh& mesh) const {
        if (!(background_.lambda > 0.0) || !(background_.mu > 0.0))
            throw ValidationError("materials", "background Lame parameters must be positive");
        if (states_.size() != mesh.element_count())
            throw ValidationError("materials", "field has " + std::to_string(states_.size()) +
                                                   " states for " + std::to_string(mesh.element_count()) +
                                                   " elements");
        std::vector<char> by_cavity(mesh.node_count(), 0), by_rigid(mesh.node_count(), 0);
        std::vector<char> solid(states_.size(), 1);
        for (std::size_t e = 0; e < states_.size(); ++e) {
            if (const auto* f = std::get_if<Finite>(&states_[e])) {
                if (!(f->lambda > 0.0) || !(f->mu > 0.0) || !std::isfinite(f->lambda) || !std::isfinite(f->mu))
                    throw ValidationError("materials", "finite Lame parameters must be positive and finite (element " +
                                                           std::to_string(e) + ")");
            } else if (is_cavity(e)) {
                solid[e] = 0;
                for (NodeId v : mesh.elements[e]) by_cavity[v] = 1;
            } else {
                for (NodeId v : mesh.elements[e]) by_rigid[v] = 1;
            }
        }
        for (std::size_t v = 0; v < mesh.node_count(); ++v)
            if (by_cavity[v] && by_rigid[v])
                throw ValidationError("materials", "cavity and rigid elements must not touch");
        if (count_components(mesh, solid) != 1)
            throw ValidationError("materials", "cavity elements disconnect the background");
    }

    Background background_;
    std::vector<MaterialState> states_;
};

// Elements without an assignment get Finite(lambda_0, mu_0).
inline LameField make_lame_field(const Mesh& mesh, Background background,
                                 const std::map<RegionId, MaterialState>& assignments) {
    std::vector<MaterialState> states(mesh.element_count(), Finite{background.lambda, background.mu});
    for (const auto& [region, state] : assignments) {
        if (region == kBackgroundRegion) throw ValidationError("materials", "cannot reassign the background region");
        if (std::find(mesh.element_region.begin(), mesh.element_region.end(), region) == mesh.element_region.end())
            throw ValidationError("materials", "region " + std::to_string(region) + " labels no element");
    }
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
        auto it = assignments.find(mesh.element_region[e]);
        if (it != assignments.end()) states[e] = it->second;
    }
    return LameField::validated(mesh, background, std::move(states));
}

inline LameField background_field(const Mesh& mesh, Background background) {
    return make_lame_field(mesh, background, {});
}

// Background everywhere except `where`, which gets `state`.
inline LameField field_with(const Mesh& mesh, Background background, const ElementSet& where,
                            const MaterialState& state) {
    std::vector<MaterialState> states(mesh.element_count(), Finite{background.lambda, background.mu});
    for (ElementId e : where.indices()) states[static_cast<std::size_t>(e)] = state;
    return LameField::validated(mesh, background, std::move(states));
}

// Lamé parameters 0 in C, background elsewhere.
inline LameField cavity_field(const Mesh& mesh, Background background, const ElementSet& c) {
    return field_with(mesh, background, c, Cavity{});
}

// Lamé parameters infinite in C, background elsewhere.
inline LameField rigid_field(const Mesh& mesh, Background background, const ElementSet& c) {
    return field_with(mesh, background, c, Rigid{});
}

// (lambda_0 + beta chi_B, mu_0 + beta chi_B).
inline LameField perturbed_field(const Mesh& mesh, Background background, const ElementSet& b, double beta) {
    return field_with(mesh, background, b, Finite{background.lambda + beta, background.mu + beta});
}

// Cavity -> eps * background, Rigid -> background / eps, Finite unchanged.
inline LameField truncate_extreme(const Mesh& mesh, const LameField& field, double eps) {
    if (!(eps > 0.0) || !(eps < 1.0))
        throw ValidationError("materials", "truncation level must satisfy 0 < eps < 1");
    const Background bg = field.background();
    std::vector<MaterialState> states = field.states();
    for (auto& s : states) {
        if (std::holds_alternative<Cavity>(s))
            s = Finite{eps * bg.lambda, eps * bg.mu};
        else if (std::holds_alternative<Rigid>(s))
            s = Finite{bg.lambda / eps, bg.mu / eps};
    }
    return LameField::validated(mesh, bg, std::move(states));
}

struct BetaBounds {
    double beta_L = 0.0;
    double beta_U = 0.0;
    double kappa() const { return beta_L; }
};

inline BetaBounds beta_bounds(Background bg) {
    return {std::min(bg.lambda, bg.mu), std::max(bg.lambda, bg.mu)};
}

struct LinearizedBoundsCheck {
    bool ok = false;
    double positive_sup = 0.0;    // max{sup(lambda_+ - lambda_0), sup(mu_+ - mu_0)}
    double negative_inf = 0.0;    // min{inf(lambda_- - lambda_0), inf(mu_- - mu_0)}
    double negative_floor = 0.0;  // -(beta / (1 + beta)) * beta_L
    std::string message;
};

// Checks the contrast bounds needed by the linearized outer test:
//   max{sup(lambda_+ - lambda_0), sup(mu_+ - mu_0)} <= beta,
//   min{inf(lambda_- - lambda_0), inf(mu_- - mu_0)} >= -(beta / (1 + beta)) beta_L.
inline LinearizedBoundsCheck validate_linearized_bounds(const LameField& field, double beta, const BetaBounds& bounds) {
    if (field.has_extreme())
        throw ValidationError("materials", "linearized bounds need a field without cavity or rigid elements");
    if (!(beta > 0.0)) throw ValidationError("materials", "beta must be positive");
    const Background bg = field.background();
    LinearizedBoundsCheck r;
    for (std::size_t e = 0; e < field.size(); ++e) {
        const Finite& f = field.finite(e);
        const double dl = f.lambda - bg.lambda, dm = f.mu - bg.mu;
        if ((dl > 0.0 && dm < 0.0) || (dl < 0.0 && dm > 0.0))
            throw ValidationError("materials", "element " + std::to_string(e) +
                                                   " perturbs lambda and mu in opposite directions");
        r.positive_sup = std::max({r.positive_sup, dl, dm});
        r.negative_inf = std::min({r.negative_inf, dl, dm});
    }
    r.negative_floor = -(beta / (1.0 + beta)) * bounds.beta_L;
    const bool pos_ok = r.positive_sup <= beta;
    const bool neg_ok = r.negative_inf >= r.negative_floor;
    r.ok = pos_ok && neg_ok;
    char buf[256];
    if (!pos_ok) {
        std::snprintf(buf, sizeof(buf), "positive contrast %.6g exceeds beta = %.6g", r.positive_sup, beta);
        r.message = buf;
    } else if (!neg_ok) {
        std::snprintf(buf, sizeof(buf), "negative contrast %.6g is below -(beta/(1+beta)) beta_L = %.6g",
                      r.negative_inf, r.negative_floor);
        r.message = buf;
    }
    return r;
}

} // namespace elastomono
