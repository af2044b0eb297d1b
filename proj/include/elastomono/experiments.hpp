#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "elastomono/errors.hpp"
#include "elastomono/fem.hpp"
#include "elastomono/materials.hpp"
#include "elastomono/mesh.hpp"
#include "elastomono/monotonicity.hpp"
#include "elastomono/ndmap.hpp"
#include "elastomono/parallel.hpp"
#include "elastomono/reconstruct.hpp"

namespace elastomono {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Scenario

inline constexpr int kScenarioVersion = 1;

struct MeshBlock {
    int n = 32;
    std::vector<Side> dirichlet_sides{Side::bottom};
    int data_refinements = 1;  // 0 disables the refined data mesh
    friend bool operator==(const MeshBlock&, const MeshBlock&) = default;
};

struct InclusionSpec {
    RegionId id = 1;
    Shape shape;
    MaterialState state = Finite{};
};

struct BasisBlock {
    std::vector<int> directions{0, 1};
    int edges_per_load = 4;
    friend bool operator==(const BasisBlock&, const BasisBlock&) = default;
};

struct TauSpec {
    bool calibrate = true;
    Thresholds value;  // used when calibrate is false
    friend bool operator==(const TauSpec&, const TauSpec&) = default;
};

struct TestBlock {
    TauSpec tau;
    double beta = 0.5;
    int grid = 16;
    int keyhole_halfwidth = 2;
    Inequalities inequalities = Inequalities::both;
    InnerMode mode = InnerMode::full;
    InclusionSign sign = InclusionSign::positive;
    ExtremeOperator extreme_operator = ExtremeOperator::exact;
    double truncation_epsilon = 1e-4;
    friend bool operator==(const TestBlock&, const TestBlock&) = default;
};

struct StudyBlock {
    std::vector<double> epsilons{1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4};
    std::vector<double> ts{1e-2, 5e-3};
    friend bool operator==(const StudyBlock&, const StudyBlock&) = default;
};

struct LocalizeBlock {
    Shape b = Disc{{0.5, 0.5}, 0.1};
    Shape u = Rect{{0.3, 0.3}, {0.7, 1.0}};
    std::optional<double> sigma;
    int top_k = 3;
    std::vector<int> ns{16, 32};
};

struct ForwardBlock {
    Side side = Side::top;
    std::array<double, 2> traction{0.0, -1.0};
    friend bool operator==(const ForwardBlock&, const ForwardBlock&) = default;
};

struct Scenario {
    int version = kScenarioVersion;
    MeshBlock mesh;
    Background background;
    std::vector<InclusionSpec> inclusions;
    BasisBlock basis;
    TestBlock test;
    double noise_delta = 0.0;
    StudyBlock study;
    LocalizeBlock localize;
    ForwardBlock forward;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
};

namespace detail {

[[noreturn]] inline void bad(const std::string& what) { throw ValidationError("experiments", what); }

inline void only_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) bad(where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            bad("unknown key '" + key + "' in " + where);
    }
}

inline double number(const Json& j, const std::string& where) {
    if (!j.is_number()) bad(where + " must be a number");
    return j.get<double>();
}

inline int integer(const Json& j, const std::string& where) {
    if (!j.is_number_integer()) bad(where + " must be an integer");
    return j.get<int>();
}

inline std::string text(const Json& j, const std::string& where) {
    if (!j.is_string()) bad(where + " must be a string");
    return j.get<std::string>();
}

inline Point point(const Json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 2) bad(where + " must be [x, y]");
    return {number(j[0], where), number(j[1], where)};
}

inline Json point_json(Point p) { return Json::array({p.x, p.y}); }

inline Shape shape_from_json(const Json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("type")) bad(where + " needs a type");
    const std::string type = text(j["type"], where + ".type");
    if (type == "disc") {
        only_keys(j, where, {"type", "center", "radius"});
        if (!j.contains("center") || !j.contains("radius")) bad(where + " disc needs center and radius");
        return Disc{point(j["center"], where + ".center"), number(j["radius"], where + ".radius")};
    }
    if (type == "rect") {
        only_keys(j, where, {"type", "lo", "hi"});
        if (!j.contains("lo") || !j.contains("hi")) bad(where + " rect needs lo and hi");
        return Rect{point(j["lo"], where + ".lo"), point(j["hi"], where + ".hi")};
    }
    if (type == "polygon") {
        only_keys(j, where, {"type", "vertices"});
        if (!j.contains("vertices") || !j["vertices"].is_array()) bad(where + " polygon needs vertices");
        Polygon p;
        for (const auto& v : j["vertices"]) p.vertices.push_back(point(v, where + ".vertices"));
        return p;
    }
    bad(where + ".type must be disc, rect or polygon");
}

inline Json shape_json(const Shape& s) {
    struct Visitor {
        Json operator()(const Disc& d) const {
            return Json{{"type", "disc"}, {"center", point_json(d.center)}, {"radius", d.radius}};
        }
        Json operator()(const Rect& r) const {
            return Json{{"type", "rect"}, {"lo", point_json(r.lo)}, {"hi", point_json(r.hi)}};
        }
        Json operator()(const Polygon& p) const {
            Json v = Json::array();
            for (const auto& q : p.vertices) v.push_back(point_json(q));
            return Json{{"type", "polygon"}, {"vertices", v}};
        }
    };
    return std::visit(Visitor{}, s);
}

inline MaterialState state_from_json(const Json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("kind")) bad(where + " needs a kind");
    const std::string kind = text(j["kind"], where + ".kind");
    if (kind == "finite") {
        only_keys(j, where, {"kind", "lambda", "mu"});
        if (!j.contains("lambda") || !j.contains("mu")) bad(where + " finite state needs lambda and mu");
        return Finite{number(j["lambda"], where + ".lambda"), number(j["mu"], where + ".mu")};
    }
    only_keys(j, where, {"kind"});
    if (kind == "cavity") return Cavity{};
    if (kind == "rigid") return Rigid{};
    bad(where + ".kind must be finite, cavity or rigid");
}

inline Json state_json(const MaterialState& s) {
    if (const auto* f = std::get_if<Finite>(&s)) return Json{{"kind", "finite"}, {"lambda", f->lambda}, {"mu", f->mu}};
    return Json{{"kind", std::holds_alternative<Cavity>(s) ? "cavity" : "rigid"}};
}

inline RegionKind region_kind(const MaterialState& s) {
    if (std::holds_alternative<Cavity>(s)) return RegionKind::cavity;
    if (std::holds_alternative<Rigid>(s)) return RegionKind::rigid;
    return RegionKind::finite;
}

template <class T, class Fn>
std::vector<T> list(const Json& j, const std::string& where, Fn&& item) {
    if (!j.is_array()) bad(where + " must be an array");
    std::vector<T> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(item(j[i], where + "[" + std::to_string(i) + "]"));
    return out;
}

template <class Enum, class Parse>
Enum enum_value(const Json& j, const std::string& where, Parse&& parse) {
    try {
        return parse(text(j, where));
    } catch (const ValidationError& e) {
        bad(where + ": " + e.what());
    }
}

} // namespace detail

inline Scenario scenario_from_json(const Json& j) {
    using namespace detail;
    only_keys(j, "scenario", {"version", "mesh", "background", "inclusions", "basis", "test", "noise", "study",
                              "localize", "forward", "seed", "output_dir"});
    Scenario s;
    if (!j.contains("version")) bad("scenario needs a version field");
    s.version = integer(j["version"], "version");
    if (s.version != kScenarioVersion) bad("unsupported scenario version " + std::to_string(s.version));

    if (j.contains("mesh")) {
        const Json& m = j["mesh"];
        only_keys(m, "mesh", {"n", "dirichlet_sides", "data_refinements"});
        if (m.contains("n")) s.mesh.n = integer(m["n"], "mesh.n");
        if (m.contains("dirichlet_sides"))
            s.mesh.dirichlet_sides = list<Side>(m["dirichlet_sides"], "mesh.dirichlet_sides",
                                                [](const Json& v, const std::string& w) {
                                                    return enum_value<Side>(v, w, [](const std::string& t) {
                                                        return side_from_string(t);
                                                    });
                                                });
        if (m.contains("data_refinements"))
            s.mesh.data_refinements = integer(m["data_refinements"], "mesh.data_refinements");
    }
    if (j.contains("background")) {
        const Json& b = j["background"];
        only_keys(b, "background", {"lambda", "mu"});
        if (b.contains("lambda")) s.background.lambda = number(b["lambda"], "background.lambda");
        if (b.contains("mu")) s.background.mu = number(b["mu"], "background.mu");
    }
    if (j.contains("inclusions")) {
        s.inclusions = list<InclusionSpec>(j["inclusions"], "inclusions", [](const Json& v, const std::string& w) {
            only_keys(v, w, {"id", "shape", "state"});
            if (!v.contains("id") || !v.contains("shape") || !v.contains("state"))
                bad(w + " needs id, shape and state");
            return InclusionSpec{integer(v["id"], w + ".id"), shape_from_json(v["shape"], w + ".shape"),
                                 state_from_json(v["state"], w + ".state")};
        });
    }
    if (j.contains("basis")) {
        const Json& b = j["basis"];
        only_keys(b, "basis", {"directions", "edges_per_load"});
        if (b.contains("directions"))
            s.basis.directions = list<int>(b["directions"], "basis.directions", [](const Json& v, const std::string& w) {
                const std::string d = text(v, w);
                if (d == "x") return 0;
                if (d == "y") return 1;
                bad(w + " must be \"x\" or \"y\"");
            });
        if (b.contains("edges_per_load")) s.basis.edges_per_load = integer(b["edges_per_load"], "basis.edges_per_load");
    }
    if (j.contains("test")) {
        const Json& t = j["test"];
        only_keys(t, "test", {"tau", "beta", "grid", "keyhole_halfwidth", "inequalities", "mode", "sign",
                              "extreme_operator", "truncation_epsilon"});
        if (t.contains("tau")) {
            const Json& tau = t["tau"];
            if (tau.is_string()) {
                if (tau.get<std::string>() != "calibrate") bad("test.tau must be a number, \"calibrate\" or {upper, lower}");
                s.test.tau = TauSpec{};
            } else if (tau.is_number()) {
                s.test.tau = TauSpec{false, Thresholds::uniform(tau.get<double>())};
            } else if (tau.is_object()) {
                only_keys(tau, "test.tau", {"upper", "lower"});
                if (!tau.contains("upper") || !tau.contains("lower")) bad("test.tau needs upper and lower");
                s.test.tau = TauSpec{false, {number(tau["upper"], "test.tau.upper"), number(tau["lower"], "test.tau.lower")}};
            } else {
                bad("test.tau must be a number, \"calibrate\" or {upper, lower}");
            }
        }
        if (t.contains("beta")) s.test.beta = number(t["beta"], "test.beta");
        if (t.contains("grid")) s.test.grid = integer(t["grid"], "test.grid");
        if (t.contains("keyhole_halfwidth")) s.test.keyhole_halfwidth = integer(t["keyhole_halfwidth"], "test.keyhole_halfwidth");
        if (t.contains("inequalities"))
            s.test.inequalities = enum_value<Inequalities>(t["inequalities"], "test.inequalities",
                                                           [](const std::string& v) { return inequalities_from_string(v); });
        if (t.contains("mode"))
            s.test.mode = enum_value<InnerMode>(t["mode"], "test.mode",
                                                [](const std::string& v) { return inner_mode_from_string(v); });
        if (t.contains("sign"))
            s.test.sign = enum_value<InclusionSign>(t["sign"], "test.sign",
                                                    [](const std::string& v) { return inclusion_sign_from_string(v); });
        if (t.contains("extreme_operator"))
            s.test.extreme_operator = enum_value<ExtremeOperator>(
                t["extreme_operator"], "test.extreme_operator",
                [](const std::string& v) { return extreme_operator_from_string(v); });
        if (t.contains("truncation_epsilon"))
            s.test.truncation_epsilon = number(t["truncation_epsilon"], "test.truncation_epsilon");
    }
    if (j.contains("noise")) {
        only_keys(j["noise"], "noise", {"delta"});
        if (j["noise"].contains("delta")) s.noise_delta = number(j["noise"]["delta"], "noise.delta");
    }
    if (j.contains("study")) {
        const Json& st = j["study"];
        only_keys(st, "study", {"epsilons", "ts"});
        const auto num = [](const Json& v, const std::string& w) { return number(v, w); };
        if (st.contains("epsilons")) s.study.epsilons = list<double>(st["epsilons"], "study.epsilons", num);
        if (st.contains("ts")) s.study.ts = list<double>(st["ts"], "study.ts", num);
    }
    if (j.contains("localize")) {
        const Json& l = j["localize"];
        only_keys(l, "localize", {"b", "u", "sigma", "top_k", "ns"});
        if (l.contains("b")) s.localize.b = shape_from_json(l["b"], "localize.b");
        if (l.contains("u")) s.localize.u = shape_from_json(l["u"], "localize.u");
        if (l.contains("sigma") && !l["sigma"].is_null()) s.localize.sigma = number(l["sigma"], "localize.sigma");
        if (l.contains("top_k")) s.localize.top_k = integer(l["top_k"], "localize.top_k");
        if (l.contains("ns"))
            s.localize.ns = list<int>(l["ns"], "localize.ns", [](const Json& v, const std::string& w) { return integer(v, w); });
    }
    if (j.contains("forward")) {
        const Json& f = j["forward"];
        only_keys(f, "forward", {"side", "traction"});
        if (f.contains("side"))
            s.forward.side = enum_value<Side>(f["side"], "forward.side", [](const std::string& v) { return side_from_string(v); });
        if (f.contains("traction")) {
            const Point p = point(f["traction"], "forward.traction");
            s.forward.traction = {p.x, p.y};
        }
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) bad("seed must be a non-negative integer");
        s.seed = j["seed"].get<std::uint64_t>();
    }
    if (j.contains("output_dir")) s.output_dir = text(j["output_dir"], "output_dir");
    return s;
}

inline Json scenario_to_json(const Scenario& s) {
    using namespace detail;
    Json sides = Json::array();
    for (Side d : s.mesh.dirichlet_sides) sides.push_back(std::string(to_string(d)));
    Json inclusions = Json::array();
    for (const auto& inc : s.inclusions)
        inclusions.push_back(Json{{"id", inc.id}, {"shape", shape_json(inc.shape)}, {"state", state_json(inc.state)}});
    Json dirs = Json::array();
    for (int d : s.basis.directions) dirs.push_back(d == 0 ? "x" : "y");
    Json tau = s.test.tau.calibrate ? Json("calibrate")
                                    : Json{{"upper", s.test.tau.value.upper}, {"lower", s.test.tau.value.lower}};
    Json ns = Json::array();
    for (int n : s.localize.ns) ns.push_back(n);
    return Json{
        {"version", s.version},
        {"mesh", {{"n", s.mesh.n}, {"dirichlet_sides", sides}, {"data_refinements", s.mesh.data_refinements}}},
        {"background", {{"lambda", s.background.lambda}, {"mu", s.background.mu}}},
        {"inclusions", inclusions},
        {"basis", {{"directions", dirs}, {"edges_per_load", s.basis.edges_per_load}}},
        {"test",
         {{"tau", tau},
          {"beta", s.test.beta},
          {"grid", s.test.grid},
          {"keyhole_halfwidth", s.test.keyhole_halfwidth},
          {"inequalities", to_string(s.test.inequalities)},
          {"mode", to_string(s.test.mode)},
          {"sign", to_string(s.test.sign)},
          {"extreme_operator", to_string(s.test.extreme_operator)},
          {"truncation_epsilon", s.test.truncation_epsilon}}},
        {"noise", {{"delta", s.noise_delta}}},
        {"study", {{"epsilons", s.study.epsilons}, {"ts", s.study.ts}}},
        {"localize",
         {{"b", shape_json(s.localize.b)},
          {"u", shape_json(s.localize.u)},
          {"sigma", s.localize.sigma ? Json(*s.localize.sigma) : Json(nullptr)},
          {"top_k", s.localize.top_k},
          {"ns", ns}}},
        {"forward", {{"side", std::string(to_string(s.forward.side))}, {"traction", s.forward.traction}}},
        {"seed", s.seed},
        {"output_dir", s.output_dir}};
}

inline bool operator==(const Scenario& a, const Scenario& b) { return scenario_to_json(a) == scenario_to_json(b); }

// Applies "a.b.2.c=value" to a parsed config. The value is read as JSON when
// it parses, otherwise as a plain string. Array segments must index an
// existing element.
inline void apply_override(Json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) detail::bad("override '" + assignment + "' must look like key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    Json value = Json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    Json* node = &config;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string seg = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (seg.empty()) detail::bad("override key '" + key + "' has an empty segment");
        Json* next = nullptr;
        if (node->is_array()) {
            if (!std::all_of(seg.begin(), seg.end(), [](char c) { return c >= '0' && c <= '9'; }))
                detail::bad("override key '" + key + "': '" + seg + "' must index an array");
            const std::size_t i = std::stoul(seg);
            if (i >= node->size()) detail::bad("override key '" + key + "': index " + seg + " out of range");
            next = &(*node)[i];
        } else {
            if (!node->is_object() && !node->is_null()) detail::bad("override key '" + key + "' descends into a scalar");
            next = &(*node)[seg];
        }
        if (dot == std::string::npos) {
            *next = value;
            return;
        }
        node = next;
        start = dot + 1;
    }
}

// ---------------------------------------------------------------------------
// Phantoms and data

inline std::vector<RegionSpec> region_specs(const Scenario& s) {
    std::vector<RegionSpec> out;
    for (const auto& inc : s.inclusions) out.push_back({inc.shape, inc.id, detail::region_kind(inc.state)});
    return out;
}

inline std::map<RegionId, MaterialState> region_states(const Scenario& s) {
    std::map<RegionId, MaterialState> out;
    for (const auto& inc : s.inclusions) out[inc.id] = inc.state;
    return out;
}

struct Phantom {
    Scenario scenario;
    Mesh mesh;  // inversion mesh, labeled
    LameField field;
    LoadBasis basis;

    // All inclusion elements of the inversion mesh.
    ElementSet inclusion_set() const {
        ElementSet d(mesh.element_count());
        for (std::size_t e = 0; e < mesh.element_count(); ++e)
            if (mesh.element_region[e] != kBackgroundRegion) d.insert(static_cast<ElementId>(e));
        return d;
    }
};

inline Phantom build_phantom(const Scenario& s, std::optional<int> n = std::nullopt) {
    const int cells = n.value_or(s.mesh.n);
    Mesh mesh = label_regions(build_unit_square_mesh(cells, s.mesh.dirichlet_sides), region_specs(s));
    LameField field = make_lame_field(mesh, s.background, region_states(s));
    LoadBasis basis = build_load_basis(mesh, s.basis.directions, s.basis.edges_per_load);
    return {s, std::move(mesh), std::move(field), std::move(basis)};
}

inline void validate_scenario(const Scenario& s) {
    using detail::bad;
    if (s.version != kScenarioVersion) bad("unsupported scenario version");
    if (s.mesh.n < 2) bad("mesh.n must be at least 2");
    if (s.mesh.data_refinements < 0 || s.mesh.data_refinements > 3) bad("mesh.data_refinements must be in 0..3");
    if (!(s.test.beta > 0.0)) bad("test.beta must be positive");
    if (s.test.grid < 1) bad("test.grid must be at least 1");
    if (s.test.keyhole_halfwidth < 0) bad("test.keyhole_halfwidth must be non-negative");
    if (!s.test.tau.calibrate) check_thresholds(s.test.tau.value);
    if (!(s.test.truncation_epsilon > 0.0 && s.test.truncation_epsilon < 1.0))
        bad("test.truncation_epsilon must lie in (0, 1)");
    if (!(s.noise_delta >= 0.0)) bad("noise.delta must be non-negative");
    for (double e : s.study.epsilons)
        if (!(e > 0.0 && e < 1.0)) bad("study.epsilons must lie in (0, 1)");
    for (double t : s.study.ts)
        if (!(t > 0.0)) bad("study.ts must be positive");
    if (s.localize.sigma && !(*s.localize.sigma > 0.0)) bad("localize.sigma must be positive");
    if (s.localize.top_k < 1) bad("localize.top_k must be at least 1");
    for (int n : s.localize.ns)
        if (n < 2) bad("localize.ns entries must be at least 2");
    if (std::find(s.mesh.dirichlet_sides.begin(), s.mesh.dirichlet_sides.end(), s.forward.side) !=
        s.mesh.dirichlet_sides.end())
        bad("forward.side must be a Neumann side");
    // Geometry and material invariants of the inversion mesh.
    (void)build_phantom(s);
}

inline Scenario load_scenario(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) detail::bad("cannot read config '" + path + "'");
    Json j = Json::parse(in, nullptr, false);
    if (j.is_discarded()) detail::bad("config '" + path + "' is not valid JSON");
    for (const auto& o : overrides) apply_override(j, o);
    Scenario s = scenario_from_json(j);
    validate_scenario(s);
    return s;
}

// Mesh and field that generate synthetic data: the inversion mesh refined
// data_refinements times, labeled with the same shapes.
inline Mesh data_mesh(const Phantom& ph, bool with_inclusions = true) {
    Mesh m = build_unit_square_mesh(ph.mesh.cells_per_side, ph.scenario.mesh.dirichlet_sides);
    for (int r = 0; r < ph.scenario.mesh.data_refinements; ++r) m = refine(m);
    return label_regions(std::move(m), with_inclusions ? region_specs(ph.scenario) : std::vector<RegionSpec>{});
}

inline NdMatrix synthetic_data(const Phantom& ph, bool with_inclusions, int threads) {
    const Scenario& s = ph.scenario;
    const std::string what = with_inclusions ? "phantom" : "background";
    if (s.mesh.data_refinements == 0) {
        const LameField f = with_inclusions ? ph.field : background_field(ph.mesh, s.background);
        return assemble_nd_matrix(ph.mesh, f, ph.basis, threads, what + " (inversion mesh)");
    }
    const Mesh fine = data_mesh(ph, with_inclusions);
    const LameField f = with_inclusions ? make_lame_field(fine, s.background, region_states(s))
                                        : background_field(fine, s.background);
    return assemble_nd_matrix_nested(fine, f, ph.basis, threads,
                                     what + " (data mesh refined " + std::to_string(s.mesh.data_refinements) + "x)");
}

// Phantom data, with the configured noise level.
inline NdMatrix measured_data(const Phantom& ph, int threads = 1) {
    NdMatrix m = synthetic_data(ph, true, threads);
    return add_symmetric_noise(m, ph.scenario.noise_delta, ph.scenario.seed);
}

// Inclusion-free data through the same pipeline, without noise.
inline NdMatrix background_data(const Phantom& ph, int threads = 1) { return synthetic_data(ph, false, threads); }

inline PixelGrid phantom_grid(const Phantom& ph) {
    return build_pixel_grid(ph.mesh, ph.scenario.test.grid, ph.scenario.test.keyhole_halfwidth);
}

inline TestContext phantom_context(const Phantom& ph, Thresholds tau, int threads = 1) {
    return TestContext(ph.mesh, ph.scenario.background, ph.basis, tau, threads)
        .with_extreme(ph.scenario.test.extreme_operator, ph.scenario.test.truncation_epsilon);
}

// ---------------------------------------------------------------------------
// Threshold calibration

enum class TestFamily { outer, linearized };

struct Calibration {
    Thresholds tau;
    double worst_upper = 0.0;  // over the family, on background data
    double worst_lower = 0.0;
    double noise = 0.0;
    double floor = 0.0;
};

inline constexpr double kThresholdFloor = 1e-10;

// tau_side = 2 |min(0, worst min-eig of that side)| + delta + floor, where
// the worst value is taken over the pixel test sets C_k on inclusion-free
// data and floor = 1e-10 ||Lambda_bg||_2.
inline Calibration calibrate_tau(const Phantom& ph, TestFamily family, int threads = 1) {
    const NdMatrix bg = background_data(ph, threads);
    const PixelGrid grid = phantom_grid(ph);
    const TestContext ctx = phantom_context(ph, Thresholds{}, threads);
    const TestContext serial = ctx.with_threads(1);
    std::vector<SandwichResult> results;
    if (family == TestFamily::outer) {
        results = parallel_map(grid.size(), threads,
                               [&](std::size_t k) { return outer_test(bg, grid.test_set(k), serial); });
    } else {
        const BackgroundSensitivity& sens = ctx.sensitivity();
        const Eigen::MatrixXd g_clip = sens.energy_gram(grid.clipped());
        const BetaBounds bounds = beta_bounds(ph.scenario.background);
        results = parallel_map(grid.size(), threads, [&](std::size_t k) {
            const ElementSet hole = grid.keyhole(k, grid.keyhole_side(k));
            return linearized_outer_from_gram(bg, sens.nd0(), g_clip - sens.energy_gram(hole), ph.scenario.test.beta,
                                              bounds, Thresholds{}, Inequalities::both);
        });
    }
    Calibration c;
    for (const auto& r : results) {
        c.worst_upper = std::min(c.worst_upper, r.upper.min_eig);
        c.worst_lower = std::min(c.worst_lower, r.lower.min_eig);
    }
    c.noise = ph.scenario.noise_delta;
    c.floor = kThresholdFloor * spectral_norm(bg.values);
    c.tau = {2.0 * std::abs(c.worst_upper) + c.noise + c.floor, 2.0 * std::abs(c.worst_lower) + c.noise + c.floor};
    return c;
}

inline Thresholds resolve_tau(const Phantom& ph, TestFamily family, int threads = 1) {
    if (!ph.scenario.test.tau.calibrate) return ph.scenario.test.tau.value;
    return calibrate_tau(ph, family, threads).tau;
}

// ---------------------------------------------------------------------------
// Convergence of truncated extreme inclusions

struct StudyRow {
    double epsilon = 0.0;
    double error = 0.0;  // ||Lambda - Lambda_eps||_2
};

struct StudyReport {
    std::vector<StudyRow> rows;
    double slope = 0.0;     // least-squares slope of log10 error against log10 epsilon
    double residual = 0.0;  // RMS of the fit residuals, in decades
    double bound = 0.45;
    bool pass = false;      // slope >= bound
    std::string provenance;
};

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double residual = 0.0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i] / n;
        my += y[i] / n;
    }
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    LineFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - (f.intercept + f.slope * x[i]);
        ss += r * r;
    }
    f.residual = std::sqrt(ss / n);
    return f;
}

inline StudyReport run_convergence_study(const Phantom& ph, int threads = 1) {
    const auto& eps = ph.scenario.study.epsilons;
    if (!ph.field.has_extreme()) detail::bad("convergence study needs at least one cavity or rigid inclusion");
    if (eps.size() < 4) detail::bad("convergence study needs at least 4 epsilon values");
    const auto [lo, hi] = std::minmax_element(eps.begin(), eps.end());
    if (*hi < 100.0 * *lo) detail::bad("epsilon ladder must span at least two decades");

    const NdMatrix exact = assemble_nd_matrix(ph.mesh, ph.field, ph.basis, threads, "exact extreme");
    auto errors = parallel_map(eps.size(), threads, [&](std::size_t i) {
        const NdMatrix t = assemble_nd_matrix(ph.mesh, truncate_extreme(ph.mesh, ph.field, eps[i]), ph.basis, 1,
                                              "truncated extreme");
        return spectral_norm(exact.values - t.values);
    });
    StudyReport r;
    std::vector<double> x, y;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        if (!(errors[i] > 0.0)) throw NumericalError("experiments", "truncation error vanished; cannot fit a rate");
        r.rows.push_back({eps[i], errors[i]});
        x.push_back(std::log10(eps[i]));
        y.push_back(std::log10(errors[i]));
    }
    const LineFit f = fit_line(x, y);
    r.slope = f.slope;
    r.residual = f.residual;
    r.pass = r.slope >= r.bound;
    r.provenance = "n = " + std::to_string(ph.mesh.cells_per_side) + ", " + std::to_string(ph.basis.size()) +
                   " basis loads";
    return r;
}

// ---------------------------------------------------------------------------
// Frechet derivative check

struct FrechetRow {
    double t = 0.0;
    double remainder = 0.0;       // r(t)
    double half_remainder = 0.0;  // r(t/2)
    double ratio() const { return remainder / half_remainder; }
};

struct FrechetReport {
    std::vector<FrechetRow> rows;
    double beta = 0.0;
    bool pass = false;  // every ratio in [3, 5]
};

// r(t) = ||Lambda(lambda_0 + t beta chi_B, mu_0 + t beta chi_B) - Lambda_0 - t DLambda_{beta,B}||_2 with B the
// union of the inclusion regions.
inline FrechetReport run_frechet_check(const Phantom& ph, int threads = 1) {
    const ElementSet b = ph.inclusion_set();
    if (b.empty()) detail::bad("Frechet check needs at least one inclusion region");
    if (ph.scenario.study.ts.empty()) detail::bad("Frechet check needs at least one t value");
    const Background bg = ph.scenario.background;
    const double beta = ph.scenario.test.beta;
    BackgroundSensitivity sens(ph.mesh, background_field(ph.mesh, bg), ph.basis, threads);
    const Eigen::MatrixXd d = sens.frechet(b, beta).values;
    const auto remainder = [&](double t) {
        const NdMatrix m = assemble_nd_matrix(ph.mesh, perturbed_field(ph.mesh, bg, b, t * beta), ph.basis, threads);
        return spectral_norm(m.values - sens.nd0().values - t * d);
    };
    FrechetReport r;
    r.beta = beta;
    r.pass = true;
    for (double t : ph.scenario.study.ts) {
        FrechetRow row{t, remainder(t), remainder(0.5 * t)};
        r.pass = r.pass && row.ratio() >= 3.0 && row.ratio() <= 5.0;
        r.rows.push_back(row);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Localized potentials

struct LocalizedLoad {
    double ratio = 0.0;            // energy in B over energy outside U (regularized)
    Eigen::VectorXd coefficients;  // in the load basis
};

struct LocalizeLevel {
    int n = 0;
    std::size_t basis_size = 0;
    double sigma = 0.0;
    std::vector<LocalizedLoad> loads;  // best first
};

struct LocalizeReport {
    std::vector<LocalizeLevel> levels;
    bool increasing = false;  // best ratio strictly increases along the levels
};

// Gram of int_V div u_j div u_k + symgrad u_j : symgrad u_k over element set V.
inline Eigen::MatrixXd localization_gram(const BackgroundSensitivity& sens, const ElementSet& v) {
    return sens.gram(v, 1.0, 1.0);
}

inline LocalizeLevel localized_potentials(const Mesh& mesh, Background bg, const LoadBasis& basis, const Shape& b_shape,
                                          const Shape& u_shape, std::optional<double> sigma, int top_k,
                                          int threads = 1) {
    if (sigma && !(*sigma > 0.0)) detail::bad("localization regularizer sigma must be positive");
    const ElementSet b = elements_in(mesh, b_shape);
    const ElementSet u = elements_in(mesh, u_shape);
    if (b.empty()) detail::bad("region B contains no element");
    if (!b.is_subset_of(u)) detail::bad("region B must lie inside U");
    bool touches = false;
    for (const auto& e : mesh.boundary_edges) {
        if (e.tag != EdgeTag::neumann) continue;
        const Point m{0.5 * (mesh.nodes[e.a].x + mesh.nodes[e.b].x), 0.5 * (mesh.nodes[e.a].y + mesh.nodes[e.b].y)};
        if (contains(u_shape, m)) touches = true;
    }
    if (!touches) detail::bad("region U must intersect the Neumann boundary");
    const ElementSet outside = u.complement();
    if (outside.empty()) detail::bad("region U covers the whole domain");

    const BackgroundSensitivity sens(mesh, background_field(mesh, bg), basis, threads);
    const Eigen::MatrixXd gb = localization_gram(sens, b);
    Eigen::MatrixXd go = localization_gram(sens, outside);
    const Eigen::Index dim = go.rows();
    const double s = sigma.value_or(1e-10 * go.trace() / static_cast<double>(dim));
    if (!(s > 0.0)) detail::bad("default sigma vanished; the energy outside U is zero");
    go.diagonal().array() += s;
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(gb, go);
    if (ges.info() != Eigen::Success) throw NumericalError("experiments", "generalized eigensolve failed");

    LocalizeLevel level;
    level.n = mesh.cells_per_side;
    level.basis_size = basis.size();
    level.sigma = s;
    const int k = std::min<int>(top_k, static_cast<int>(dim));
    for (int i = 0; i < k; ++i) {
        const Eigen::Index c = dim - 1 - i;
        Eigen::VectorXd x = ges.eigenvectors().col(c);
        x /= x.norm();
        level.loads.push_back({ges.eigenvalues()(c), x});
    }
    return level;
}

inline LocalizeReport run_localized_potentials(const Scenario& s, int threads = 1) {
    const auto& l = s.localize;
    if (l.ns.empty()) detail::bad("localize.ns must not be empty");
    LocalizeReport r;
    for (int n : l.ns) {
        const Mesh mesh = build_unit_square_mesh(n, s.mesh.dirichlet_sides);
        const LoadBasis basis = build_load_basis(mesh, s.basis.directions, s.basis.edges_per_load);
        r.levels.push_back(localized_potentials(mesh, s.background, basis, l.b, l.u, l.sigma, l.top_k, threads));
    }
    r.increasing = true;
    for (std::size_t i = 1; i < r.levels.size(); ++i)
        r.increasing = r.increasing && r.levels[i].loads.front().ratio > r.levels[i - 1].loads.front().ratio;
    return r;
}

// ---------------------------------------------------------------------------
// Report export

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_study_csv(std::ostream& out, const StudyReport& r) {
    out << "epsilon,error\n";
    for (const auto& row : r.rows) out << format_double(row.epsilon) << ',' << format_double(row.error) << '\n';
}

inline void write_study_text(std::ostream& out, const StudyReport& r) {
    char buf[256];
    out << "truncation convergence (" << r.provenance << ")\n";
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof(buf), "  eps %-10.3g error %.6e\n", row.epsilon, row.error);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "slope %.4f (bound %.2f), rms log10 residual %.4f: %s\n", r.slope, r.bound,
                  r.residual, r.pass ? "pass" : "fail");
    out << buf;
}

inline void write_localize_csv(std::ostream& out, const LocalizeReport& r) {
    out << "n,basis_size,rank,ratio\n";
    for (const auto& level : r.levels)
        for (std::size_t i = 0; i < level.loads.size(); ++i)
            out << level.n << ',' << level.basis_size << ',' << i + 1 << ',' << format_double(level.loads[i].ratio)
                << '\n';
}

inline void write_localize_text(std::ostream& out, const LocalizeReport& r) {
    char buf[256];
    for (const auto& level : r.levels) {
        std::snprintf(buf, sizeof(buf), "n = %d, %zu loads, sigma %.3e, best ratio %.6e\n", level.n,
                      level.basis_size, level.sigma, level.loads.front().ratio);
        out << buf;
    }
    out << "best ratio " << (r.increasing ? "increases" : "does not increase") << " under refinement\n";
}

} // namespace elastomono
