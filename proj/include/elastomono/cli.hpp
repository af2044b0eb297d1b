#pragma once

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "elastomono/digest.hpp"
#include "elastomono/errors.hpp"
#include "elastomono/experiments.hpp"

namespace elastomono {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitNumerical = 2;

struct CliOptions {
    std::string command;
    std::string config;
    std::string out;
    std::vector<std::string> overrides;
    int threads = 1;
    std::optional<std::uint64_t> seed;
};

namespace cli_detail {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cli", "cannot read '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Collects output files and writes the manifest last.
class OutputDir {
public:
    explicit OutputDir(std::filesystem::path root) : root_(std::move(root)) {
        std::error_code ec;
        std::filesystem::create_directories(root_, ec);
        if (ec) throw ValidationError("cli", "cannot create output directory '" + root_.string() + "'");
    }

    template <class Writer>
    void write(const std::string& name, Writer&& writer) {
        std::ostringstream buf;
        writer(buf);
        const std::string bytes = buf.str();
        std::ofstream out(root_ / name, std::ios::binary);
        if (!out) throw ValidationError("cli", "cannot write '" + (root_ / name).string() + "'");
        out << bytes;
        outputs_.push_back({name, sha256_hex(bytes)});
    }

    void manifest(const CliOptions& opt, const std::string& config_bytes, const Scenario& s) {
        Json outputs = Json::array();
        for (const auto& [name, digest] : outputs_) outputs.push_back(Json{{"file", name}, {"sha256", digest}});
        const Json m{{"command", opt.command},
                     {"config", {{"path", opt.config}, {"sha256", sha256_hex(config_bytes)}}},
                     {"overrides", opt.overrides},
                     {"effective_scenario_sha256", sha256_hex(scenario_to_json(s).dump())},
                     {"seed", s.seed},
                     {"outputs", outputs}};
        std::ofstream out(root_ / "manifest.json", std::ios::binary);
        if (!out) throw ValidationError("cli", "cannot write manifest");
        out << m.dump(2) << '\n';
    }

private:
    std::filesystem::path root_;
    std::vector<std::pair<std::string, std::string>> outputs_;
};

inline std::string tau_line(const Thresholds& t) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "tau upper %.17g lower %.17g\n", t.upper, t.lower);
    return buf;
}

inline void write_map(OutputDir& dir, const IndicatorMap& m) {
    dir.write("indicators.csv", [&](std::ostream& o) { write_indicator_csv(o, m); });
    dir.write("indicators.pgm", [&](std::ostream& o) { write_indicator_pgm(o, m); });
    dir.write("mask.pgm", [&](std::ostream& o) { write_mask_pgm(o, m); });
    dir.write("summary.txt", [&](std::ostream& o) {
        o << "test " << m.test << '\n' << "data " << m.provenance << '\n' << tau_line(m.tau);
        o << "grid " << m.p << 'x' << m.p << ", mask " << m.mask_count() << " pixels\n";
    });
}

inline bool on_side(const NeumannEdge& e, Side side) {
    constexpr double tol = 1e-12;
    switch (side) {
    case Side::bottom: return std::abs(e.midpoint.y) < tol;
    case Side::top: return std::abs(e.midpoint.y - 1.0) < tol;
    case Side::left: return std::abs(e.midpoint.x) < tol;
    case Side::right: return std::abs(e.midpoint.x - 1.0) < tol;
    }
    return false;
}

inline void run_forward(const Phantom& ph, OutputDir& dir) {
    const DiscreteSystem sys = assemble_system(ph.mesh, ph.field);
    BoundaryLoad g;
    const auto& edges = sys.neumann_edges();
    g.traction.assign(edges.size(), {0.0, 0.0});
    for (std::size_t k = 0; k < edges.size(); ++k)
        if (on_side(edges[k], ph.scenario.forward.side)) g.traction[k] = ph.scenario.forward.traction;
    const Displacement u = extend_E(ph.mesh, ph.field, solve_neumann(sys, g));
    ElementSet all(ph.mesh.element_count());
    for (std::size_t e = 0; e < ph.mesh.element_count(); ++e) all.insert(static_cast<ElementId>(e));
    const double work = boundary_work(sys, g, u);
    const double energy = energy_on_region(ph.mesh, u, ph.field, all).total();
    double rigid_strain = 0.0;
    for (std::size_t e = 0; e < ph.mesh.element_count(); ++e)
        if (ph.field.is_rigid(e)) rigid_strain = std::max(rigid_strain, std::sqrt(element_strain(ph.mesh, u, e).frobenius_sq()));

    dir.write("displacement.csv", [&](std::ostream& o) {
        o << "node,x,y,ux,uy\n";
        for (std::size_t v = 0; v < ph.mesh.node_count(); ++v)
            o << v << ',' << format_double(ph.mesh.nodes[v].x) << ',' << format_double(ph.mesh.nodes[v].y) << ','
              << format_double(u.nodal[v][0]) << ',' << format_double(u.nodal[v][1]) << '\n';
    });
    dir.write("summary.txt", [&](std::ostream& o) {
        o << "boundary work " << format_double(work) << '\n';
        o << "strain energy " << format_double(energy) << '\n';
        o << "max rigid strain " << format_double(rigid_strain) << '\n';
    });
}

inline int dispatch(const CliOptions& opt, std::ostream& log) {
    std::vector<std::string> overrides = opt.overrides;
    if (opt.seed) overrides.push_back("seed=" + std::to_string(*opt.seed));
    if (!opt.out.empty()) overrides.push_back("output_dir=" + Json(opt.out).dump());
    if (opt.threads < 1) throw ValidationError("cli", "--threads must be at least 1");
    const std::string config_bytes = read_file(opt.config);
    const Scenario s = load_scenario(opt.config, overrides);
    OutputDir dir(s.output_dir);
    const int threads = opt.threads;
    const std::string& cmd = opt.command;

    if (cmd == "localize") {
        const LocalizeReport r = run_localized_potentials(s, threads);
        dir.write("localize.csv", [&](std::ostream& o) { write_localize_csv(o, r); });
        dir.write("summary.txt", [&](std::ostream& o) { write_localize_text(o, r); });
        dir.manifest(opt, config_bytes, s);
        return kExitOk;
    }

    const Phantom ph = build_phantom(s);
    if (cmd == "forward") {
        run_forward(ph, dir);
    } else if (cmd == "nd") {
        const NdMatrix m = measured_data(ph, threads);
        dir.write("nd_matrix.txt", [&](std::ostream& o) { write_nd_matrix(o, m); });
        dir.write("summary.txt", [&](std::ostream& o) {
            o << "dimension " << m.dim() << '\n' << "provenance " << m.provenance << '\n';
            o << "asymmetry " << format_double(m.asymmetry) << '\n';
        });
    } else if (cmd == "calibrate") {
        const Calibration outer = calibrate_tau(ph, TestFamily::outer, threads);
        const Calibration lin = calibrate_tau(ph, TestFamily::linearized, threads);
        dir.write("calibration.json", [&](std::ostream& o) {
            const auto j = [](const Calibration& c) {
                return Json{{"upper", c.tau.upper},         {"lower", c.tau.lower},     {"worst_upper", c.worst_upper},
                            {"worst_lower", c.worst_lower}, {"noise", c.noise},         {"floor", c.floor}};
            };
            o << Json{{"outer", j(outer)}, {"linearized", j(lin)}}.dump(2) << '\n';
        });
    } else if (cmd == "reconstruct-outer") {
        const NdMatrix m = measured_data(ph, threads);
        const TestContext ctx = phantom_context(ph, resolve_tau(ph, TestFamily::outer, threads), threads);
        write_map(dir, outer_reconstruction(m, phantom_grid(ph), ctx, s.test.inequalities));
    } else if (cmd == "reconstruct-inner") {
        const TestContext probe = phantom_context(ph, Thresholds{}, threads);
        check_inner_beta(s.test.beta, s.test.mode, s.test.sign == InclusionSign::negative, probe);
        const NdMatrix m = measured_data(ph, threads);
        const TestContext ctx = probe.with_tau(resolve_tau(ph, TestFamily::outer, threads));
        write_map(dir, inner_reconstruction(m, phantom_grid(ph), s.test.beta, s.test.sign, s.test.mode, ctx));
    } else if (cmd == "reconstruct-linearized") {
        const BetaBounds bounds = beta_bounds(s.background);
        require_linearized_bounds(ph.field, s.test.beta, bounds);
        const NdMatrix m = measured_data(ph, threads);
        const TestContext ctx = phantom_context(ph, resolve_tau(ph, TestFamily::linearized, threads), threads);
        write_map(dir, linearized_outer_reconstruction(m, phantom_grid(ph), s.test.beta, bounds, ctx,
                                                       s.test.inequalities));
    } else if (cmd == "convergence") {
        const StudyReport r = run_convergence_study(ph, threads);
        dir.write("convergence.csv", [&](std::ostream& o) { write_study_csv(o, r); });
        dir.write("summary.txt", [&](std::ostream& o) { write_study_text(o, r); });
    } else {
        throw ValidationError("cli", "unknown command '" + cmd + "'");
    }
    dir.manifest(opt, config_bytes, s);
    log << cmd << ": wrote " << s.output_dir << '\n';
    return kExitOk;
}

} // namespace cli_detail

inline std::string command_description(const std::string& name) {
    if (name == "forward") return "solve one traction problem and report work and energy";
    if (name == "nd") return "assemble the measured ND matrix";
    if (name == "reconstruct-outer") return "pixel map from the outer sandwich test";
    if (name == "reconstruct-inner") return "pixel map from the inner test";
    if (name == "reconstruct-linearized") return "pixel map from the linearized outer test";
    if (name == "convergence") return "truncation rate and Frechet remainder study";
    if (name == "localize") return "localized-potential energy ratios over mesh levels";
    if (name == "calibrate") return "report the calibrated thresholds";
    return {};
}

inline const std::vector<std::string>& cli_commands() {
    static const std::vector<std::string> c{"forward",     "nd",          "reconstruct-outer", "reconstruct-inner",
                                            "reconstruct-linearized", "convergence", "localize", "calibrate"};
    return c;
}

// Parses argv (without the program name) and runs one command. Returns the
// process exit code; diagnostics go to `err`.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Monotonicity-based inclusion detection for linear elasticity"};
    app.require_subcommand(1);
    CliOptions opt;
    for (const auto& name : cli_commands()) {
        CLI::App* sub = app.add_subcommand(name, command_description(name));
        sub->add_option("--config", opt.config, "scenario JSON")->required();
        sub->add_option("--out", opt.out, "output directory (overrides output_dir)");
        sub->add_option("--override", opt.overrides, "key=value applied to the config before validation");
        sub->add_option("--threads", opt.threads, "parallel workers")->default_val(1);
        sub->add_option("--seed", opt.seed, "noise seed (overrides seed)");
        sub->callback([&opt, name] { opt.command = name; });
    }
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "cli: " << e.what() << '\n';
        return kExitValidation;
    }
    try {
        return cli_detail::dispatch(opt, out);
    } catch (const ValidationError& e) {
        err << e.what() << '\n';
        return kExitValidation;
    } catch (const NumericalError& e) {
        err << e.what() << '\n';
        return kExitNumerical;
    } catch (const nlohmann::json::exception& e) {
        err << "experiments: " << e.what() << '\n';
        return kExitValidation;
    }
}

} // namespace elastomono
