#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "elastomono/experiments.hpp"
#include "generators.hpp"

using namespace elastomono;

namespace {

const std::string kScenarios = ELASTOMONO_SCENARIO_DIR;

Json minimal() { return Json{{"version", 1}}; }

Scenario small_scenario() {
    Scenario s;
    s.mesh.n = 12;
    s.basis.edges_per_load = 3;
    s.test.grid = 4;
    s.test.keyhole_halfwidth = 1;
    return s;
}

Scenario random_scenario(gen::Rng& r) {
    Scenario s;
    s.mesh.n = r.integer(4, 64);
    s.mesh.data_refinements = r.integer(0, 2);
    s.mesh.dirichlet_sides = r.integer(0, 1) ? std::vector<Side>{Side::bottom}
                                             : std::vector<Side>{Side::left, Side::right};
    s.background = {r.uniform(0.5, 3.0), r.uniform(0.5, 3.0)};
    const int count = r.integer(0, 3);
    for (int i = 0; i < count; ++i) {
        InclusionSpec inc;
        inc.id = i + 1;
        switch (r.integer(0, 2)) {
            case 0: inc.shape = gen::disc(r); break;
            case 1: inc.shape = gen::rect(r); break;
            default: inc.shape = Polygon{{{0.2, 0.2}, {r.uniform(0.4, 0.8), 0.25}, {0.3, r.uniform(0.5, 0.8)}}};
        }
        switch (r.integer(0, 2)) {
            case 0: inc.state = Finite{r.uniform(0.1, 5), r.uniform(0.1, 5)}; break;
            case 1: inc.state = Cavity{}; break;
            default: inc.state = Rigid{};
        }
        s.inclusions.push_back(inc);
    }
    s.basis.directions = r.integer(0, 1) ? std::vector<int>{0, 1} : std::vector<int>{1};
    s.basis.edges_per_load = r.integer(1, 6);
    if (r.integer(0, 1)) s.test.tau = TauSpec{false, {r.uniform(0, 1), r.uniform(0, 1)}};
    s.test.beta = r.uniform(0.01, 3);
    s.test.grid = r.integer(1, 20);
    s.test.keyhole_halfwidth = r.integer(0, 3);
    s.test.inequalities = static_cast<Inequalities>(r.integer(0, 2));
    s.test.mode = static_cast<InnerMode>(r.integer(0, 1));
    s.test.sign = static_cast<InclusionSign>(r.integer(0, 1));
    s.test.extreme_operator = static_cast<ExtremeOperator>(r.integer(0, 1));
    s.test.truncation_epsilon = r.uniform(1e-6, 0.5);
    s.noise_delta = r.uniform(0, 1e-3);
    s.study.epsilons = {r.uniform(0.1, 0.5), 1e-2, 1e-3, r.uniform(1e-6, 1e-4)};
    s.study.ts = {r.uniform(1e-3, 1e-1)};
    s.localize.b = gen::disc(r);
    s.localize.u = gen::rect(r);
    if (r.integer(0, 1)) s.localize.sigma = r.uniform(1e-12, 1e-6);
    s.localize.top_k = r.integer(1, 5);
    s.localize.ns = {r.integer(4, 16), r.integer(17, 40)};
    s.forward = {Side::top, {r.uniform(-1, 1), r.uniform(-1, 1)}};
    s.seed = r.bits();
    s.output_dir = "out/" + std::to_string(r.integer(0, 999));
    return s;
}

std::string expect_validation(const Json& j) {
    try {
        scenario_from_json(j);
    } catch (const ValidationError& e) {
        return e.what();
    }
    ADD_FAILURE() << "accepted " << j.dump();
    return {};
}

} // namespace

TEST(ScenarioJson, DefaultsFromMinimalConfig) {
    const Scenario s = scenario_from_json(minimal());
    EXPECT_EQ(s, Scenario{});
    EXPECT_EQ(s.mesh.n, 32);
    EXPECT_EQ(s.basis.edges_per_load, 4);
    EXPECT_TRUE(s.test.tau.calibrate);
    EXPECT_EQ(s.test.keyhole_halfwidth, 2);
}

TEST(ScenarioJsonProperty, RoundTrip) {
    gen::Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const Scenario s = random_scenario(rng);
        const Json j = scenario_to_json(s);
        const Scenario back = scenario_from_json(j);
        EXPECT_EQ(back, s);
        EXPECT_EQ(scenario_to_json(back).dump(), j.dump());
        EXPECT_EQ(scenario_from_json(Json::parse(j.dump())), s);
    }
}

TEST(ScenarioJson, RejectsUnknownKeysEverywhere) {
    EXPECT_NE(expect_validation({{"version", 1}, {"extra", 1}}).find("unknown key 'extra' in scenario"),
              std::string::npos);
    EXPECT_NE(expect_validation({{"version", 1}, {"mesh", {{"size", 4}}}}).find("mesh"), std::string::npos);
    expect_validation({{"version", 1}, {"test", {{"tau", {{"upper", 1}, {"lower", 1}, {"mid", 1}}}}}});
    expect_validation({{"version", 1},
                       {"inclusions", {{{"id", 1},
                                        {"shape", {{"type", "disc"}, {"center", {0.5, 0.5}}, {"radius", 0.1}, {"r", 1}}},
                                        {"state", {{"kind", "rigid"}}}}}}});
    expect_validation({{"version", 1},
                       {"inclusions", {{{"id", 1},
                                        {"shape", {{"type", "disc"}, {"center", {0.5, 0.5}}, {"radius", 0.1}}},
                                        {"state", {{"kind", "rigid"}, {"lambda", 1}}}}}}});
    expect_validation({{"version", 1}, {"noise", {{"sigma", 1}}}});
    expect_validation({{"version", 1}, {"localize", {{"c", 1}}}});
}

TEST(ScenarioJson, RejectsMalformedValues) {
    expect_validation(Json::object());
    expect_validation({{"version", 2}});
    expect_validation({{"version", "1"}});
    expect_validation({{"version", 1}, {"mesh", {{"n", 3.5}}}});
    expect_validation({{"version", 1}, {"mesh", {{"dirichlet_sides", {"north"}}}}});
    expect_validation({{"version", 1}, {"basis", {{"directions", {"z"}}}}});
    expect_validation({{"version", 1}, {"test", {{"tau", "guess"}}}});
    expect_validation({{"version", 1}, {"test", {{"tau", {{"upper", 1}}}}}});
    expect_validation({{"version", 1}, {"test", {{"mode", "half"}}}});
    expect_validation({{"version", 1}, {"seed", -4}});
    expect_validation({{"version", 1}, {"inclusions", {{{"id", 1}, {"shape", {{"type", "star"}}}, {"state", {{"kind", "rigid"}}}}}}});
    expect_validation({{"version", 1}, {"inclusions", {{{"id", 1}}}}});
}

TEST(ScenarioJson, TauForms) {
    Json j = minimal();
    j["test"] = {{"tau", 0.25}};
    EXPECT_EQ(scenario_from_json(j).test.tau.value, Thresholds::uniform(0.25));
    EXPECT_FALSE(scenario_from_json(j).test.tau.calibrate);
    j["test"] = {{"tau", {{"upper", 0.5}, {"lower", 0.125}}}};
    EXPECT_EQ(scenario_from_json(j).test.tau.value, (Thresholds{0.5, 0.125}));
}

TEST(Overrides, PathsAndArrayIndices) {
    Json j = scenario_to_json(Scenario{});
    j["inclusions"] = Json::array({scenario_to_json(Scenario{})["localize"]["b"]});
    apply_override(j, "mesh.n=20");
    apply_override(j, "study.epsilons.2=0.005");
    apply_override(j, "localize.ns=[8,16,32]");
    apply_override(j, "output_dir=results/a");
    apply_override(j, "inclusions.0.radius=0.3");
    EXPECT_EQ(j["mesh"]["n"], 20);
    EXPECT_EQ(j["study"]["epsilons"][2], 0.005);
    EXPECT_EQ(j["localize"]["ns"].size(), 3u);
    EXPECT_EQ(j["output_dir"], "results/a");
    EXPECT_EQ(j["inclusions"][0]["radius"], 0.3);

    EXPECT_THROW(apply_override(j, "mesh.n"), ValidationError);
    EXPECT_THROW(apply_override(j, "=3"), ValidationError);
    EXPECT_THROW(apply_override(j, "study.epsilons.99=1"), ValidationError);
    EXPECT_THROW(apply_override(j, "study.epsilons.first=1"), ValidationError);
    EXPECT_THROW(apply_override(j, "mesh.n.x=1"), ValidationError);
    EXPECT_THROW(apply_override(j, "mesh..n=1"), ValidationError);

    // New keys are created and then rejected by strict parsing.
    Json k = scenario_to_json(Scenario{});
    apply_override(k, "mesh.cells=4");
    EXPECT_THROW(scenario_from_json(k), ValidationError);
}

TEST(Scenario, LoadAppliesOverridesBeforeValidation) {
    const Scenario s = load_scenario(kScenarios + "/default.json", {"mesh.n=16", "seed=9"});
    EXPECT_EQ(s.mesh.n, 16);
    EXPECT_EQ(s.seed, 9u);
    EXPECT_THROW(load_scenario(kScenarios + "/default.json", {"test.beta=-1"}), ValidationError);
    EXPECT_THROW(load_scenario(kScenarios + "/missing.json"), ValidationError);
    EXPECT_THROW(load_scenario(kScenarios + "/default.json", {"forward.side=\"bottom\""}), ValidationError);
    EXPECT_THROW(load_scenario(kScenarios + "/default.json", {"inclusions.0.shape.radius=0.4"}), ValidationError);
}

TEST(Scenario, ShippedScenariosValidate) {
    int count = 0;
    for (const auto& entry : std::filesystem::directory_iterator(kScenarios)) {
        if (entry.path().extension() != ".json") continue;
        const Scenario s = load_scenario(entry.path().string());
        EXPECT_EQ(scenario_from_json(scenario_to_json(s)), s) << entry.path();
        const Mesh m = build_unit_square_mesh(s.mesh.n, s.mesh.dirichlet_sides);
        EXPECT_NO_THROW(build_pixel_grid(m, s.test.grid, s.test.keyhole_halfwidth)) << entry.path();
        ++count;
    }
    EXPECT_EQ(count, 7);
}

TEST(Phantom, DataMeshIsRefinedAndLabeled) {
    Scenario s = small_scenario();
    s.inclusions.push_back({1, Disc{{0.5, 0.6}, 0.15}, Rigid{}});
    const Phantom ph = build_phantom(s);
    const Mesh dm = data_mesh(ph);
    EXPECT_EQ(dm.cells_per_side, 24);
    EXPECT_GT(dm.region_elements(1).count(), 3 * ph.mesh.region_elements(1).count());
    EXPECT_TRUE(data_mesh(ph, false).region_elements(1).empty());
    const NdMatrix m = measured_data(ph);
    EXPECT_EQ(m.fingerprint, ph.basis.fingerprint());
    EXPECT_NE(m.provenance.find("refined 1x"), std::string::npos);
    s.noise_delta = 1e-4;
    const Phantom noisy = build_phantom(s);
    EXPECT_NEAR(spectral_norm(measured_data(noisy).values - m.values), 1e-4, 1e-15);
    EXPECT_EQ(background_data(noisy).values, background_data(ph).values);
}

TEST(Calibration, NoiseRaisesTauByExactlyDelta) {
    Scenario s = small_scenario();
    const Calibration a = calibrate_tau(build_phantom(s), TestFamily::outer);
    s.noise_delta = 3e-4;
    const Calibration b = calibrate_tau(build_phantom(s), TestFamily::outer);
    EXPECT_NEAR(b.tau.upper - a.tau.upper, 3e-4, 1e-15);
    EXPECT_NEAR(b.tau.lower - a.tau.lower, 3e-4, 1e-15);
    EXPECT_EQ(a.worst_upper, b.worst_upper);
    EXPECT_DOUBLE_EQ(a.tau.upper, 2.0 * std::abs(a.worst_upper) + a.floor);
    EXPECT_GT(a.floor, 0.0);
    // Nested data only widens the upper side.
    EXPECT_LT(a.tau.lower, 1e-6 * a.tau.upper + 10 * a.floor);

    s.test.tau = TauSpec{false, {0.5, 0.25}};
    EXPECT_EQ(resolve_tau(build_phantom(s), TestFamily::outer), (Thresholds{0.5, 0.25}));
}

TEST(FitLine, ExactLineAndNoise) {
    const std::vector<double> x{-4, -3, -2, -1}, y{-3, -2.5, -2, -1.5};
    const LineFit f = fit_line(x, y);
    EXPECT_DOUBLE_EQ(f.slope, 0.5);
    EXPECT_DOUBLE_EQ(f.intercept, -1.0);
    EXPECT_NEAR(f.residual, 0.0, 1e-15);
    const LineFit g = fit_line({0, 1, 2, 3}, {0, 1, 0, 1});
    EXPECT_DOUBLE_EQ(g.slope, 0.2);
    EXPECT_NEAR(g.residual, std::sqrt(0.2), 1e-15);
}

TEST(ConvergenceStudy, PreconditionsAndRate) {
    Scenario s = small_scenario();
    EXPECT_THROW(run_convergence_study(build_phantom(s)), ValidationError);
    s.inclusions.push_back({1, Disc{{0.5, 0.6}, 0.15}, Rigid{}});
    s.study.epsilons = {1e-1, 1e-2, 1e-3};
    EXPECT_THROW(run_convergence_study(build_phantom(s)), ValidationError);
    s.study.epsilons = {1e-1, 8e-2, 6e-2, 4e-2};
    EXPECT_THROW(run_convergence_study(build_phantom(s)), ValidationError);
    s.study.epsilons = {1e-2, 1e-3, 1e-4, 1e-5};
    const StudyReport r = run_convergence_study(build_phantom(s));
    EXPECT_TRUE(r.pass);
    EXPECT_NEAR(r.slope, 1.0, 0.05);
    EXPECT_LT(r.residual, 0.05);
    for (std::size_t i = 1; i < r.rows.size(); ++i) EXPECT_LT(r.rows[i].error, r.rows[i - 1].error);
    std::ostringstream csv;
    write_study_csv(csv, r);
    EXPECT_EQ(csv.str().rfind("epsilon,error\n0.01,", 0), 0u);
}

TEST(FrechetCheck, QuadraticRemainder) {
    Scenario s = small_scenario();
    EXPECT_THROW(run_frechet_check(build_phantom(s)), ValidationError);
    s.inclusions.push_back({1, Disc{{0.5, 0.6}, 0.15}, Finite{2.0, 2.0}});
    const FrechetReport r = run_frechet_check(build_phantom(s));
    EXPECT_TRUE(r.pass);
    ASSERT_EQ(r.rows.size(), 2u);
    for (const auto& row : r.rows) EXPECT_NEAR(row.ratio(), 4.0, 0.1);
}

TEST(LocalizedPotentials, Preconditions) {
    const Mesh m = build_unit_square_mesh(12, {Side::bottom});
    const LoadBasis b = build_load_basis(m);
    const Background bg{1.0, 1.0};
    const Disc inner{{0.5, 0.75}, 0.08};
    const Rect u{{0.3, 0.55}, {0.7, 1.0}};
    EXPECT_THROW(localized_potentials(m, bg, b, inner, u, 0.0, 1), ValidationError);
    EXPECT_THROW(localized_potentials(m, bg, b, inner, u, -1.0, 1), ValidationError);
    EXPECT_THROW(localized_potentials(m, bg, b, Disc{{0.2, 0.2}, 0.08}, u, std::nullopt, 1), ValidationError);
    EXPECT_THROW(localized_potentials(m, bg, b, Disc{{0.5, 0.5}, 0.001}, u, std::nullopt, 1), ValidationError);
    EXPECT_THROW(localized_potentials(m, bg, b, inner, Rect{{0.3, 0.3}, {0.7, 0.9}}, std::nullopt, 1),
                 ValidationError);
    EXPECT_THROW(localized_potentials(m, bg, b, inner, Rect{{-1, -1}, {2, 2}}, std::nullopt, 1), ValidationError);

    const LocalizeLevel level = localized_potentials(m, bg, b, inner, u, std::nullopt, 3);
    ASSERT_EQ(level.loads.size(), 3u);
    EXPECT_GE(level.loads[0].ratio, level.loads[1].ratio);
    EXPECT_NEAR(level.loads[0].coefficients.norm(), 1.0, 1e-12);
    EXPECT_GT(level.sigma, 0.0);
}

// Brute force: the generalized eigenvalue is the maximum Rayleigh quotient.
TEST(LocalizedPotentials, TopRatioBoundsRayleighQuotients) {
    const Mesh m = build_unit_square_mesh(10, {Side::bottom});
    const LoadBasis b = build_load_basis(m, {0, 1}, 2);
    const Background bg{1.0, 1.0};
    const Disc inner{{0.5, 0.75}, 0.1};
    const Rect u{{0.3, 0.55}, {0.7, 1.0}};
    const LocalizeLevel level = localized_potentials(m, bg, b, inner, u, 1e-8, 1);
    const BackgroundSensitivity sens(m, background_field(m, bg), b);
    const Eigen::MatrixXd gb = localization_gram(sens, elements_in(m, inner));
    Eigen::MatrixXd go = localization_gram(sens, elements_in(m, u).complement());
    go.diagonal().array() += 1e-8;
    const auto rq = [&](const Eigen::VectorXd& x) { return x.dot(gb * x) / x.dot(go * x); };
    EXPECT_NEAR(rq(level.loads[0].coefficients), level.loads[0].ratio, 1e-8 * level.loads[0].ratio);
    gen::Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::VectorXd x(static_cast<Eigen::Index>(b.size()));
        for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1, 1);
        EXPECT_LE(rq(x), level.loads[0].ratio * (1 + 1e-10));
    }
}

TEST(Export, FormatDouble) {
    EXPECT_EQ(format_double(0.1), "0.10000000000000001");
    EXPECT_EQ(format_double(2.0), "2");
}
