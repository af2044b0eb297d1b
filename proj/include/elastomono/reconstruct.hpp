#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "elastomono/errors.hpp"
#include "elastomono/materials.hpp"
#include "elastomono/mesh.hpp"
#include "elastomono/monotonicity.hpp"
#include "elastomono/ndmap.hpp"
#include "elastomono/parallel.hpp"

namespace elastomono {

// ---------------------------------------------------------------------------
// Pixel grid

// p x p axis-aligned pixels over the clipped square [m, 1-m]^2, m = one
// element layer. Pixel (i, j) has column i (from the left) and row j (from
// the bottom); its index is j * p + i. Elements belong to the pixel holding
// their barycenter; elements in the margin belong to no pixel.
class PixelGrid {
public:
    int p() const { return p_; }
    int keyhole_halfwidth() const { return halfwidth_; }
    std::size_t size() const { return pixels_.size(); }
    double margin() const { return margin_; }
    double pixel_width() const { return width_; }
    const ElementSet& pixel(std::size_t k) const { return pixels_[k]; }
    const ElementSet& clipped() const { return clipped_; }
    const std::vector<Side>& neumann_sides() const { return neumann_sides_; }

    std::size_t index(int i, int j) const { return static_cast<std::size_t>(j * p_ + i); }
    int column(std::size_t k) const { return static_cast<int>(k) % p_; }
    int row(std::size_t k) const { return static_cast<int>(k) / p_; }

    Point center(std::size_t k) const {
        return {margin_ + (column(k) + 0.5) * width_, margin_ + (row(k) + 0.5) * width_};
    }
    Rect bounds(std::size_t k) const {
        return {{margin_ + column(k) * width_, margin_ + row(k) * width_},
                {margin_ + (column(k) + 1) * width_, margin_ + (row(k) + 1) * width_}};
    }

    // Pixels between k and `side`, k included, in order of increasing distance.
    std::vector<std::size_t> channel(std::size_t k, Side side) const {
        std::vector<std::size_t> out;
        const int i = column(k), j = row(k);
        switch (side) {
            case Side::top: for (int r = j; r < p_; ++r) out.push_back(index(i, r)); break;
            case Side::bottom: for (int r = j; r >= 0; --r) out.push_back(index(i, r)); break;
            case Side::right: for (int c = i; c < p_; ++c) out.push_back(index(c, j)); break;
            case Side::left: for (int c = i; c >= 0; --c) out.push_back(index(c, j)); break;
        }
        return out;
    }

    // Neumann sides ordered by channel length, ties broken top, left, right, bottom.
    std::vector<Side> keyhole_sides(std::size_t k) const {
        std::vector<Side> sides = neumann_sides_;
        const auto rank = [](Side s) {
            switch (s) {
                case Side::top: return 0;
                case Side::left: return 1;
                case Side::right: return 2;
                case Side::bottom: return 3;
            }
            return 4;
        };
        std::stable_sort(sides.begin(), sides.end(), [&](Side a, Side b) {
            const std::size_t la = channel(k, a).size(), lb = channel(k, b).size();
            return la != lb ? la < lb : rank(a) < rank(b);
        });
        return sides;
    }

    // The channel from pixel k to `side`, widened by keyhole_halfwidth()
    // pixels on both sides (clamped to the grid).
    ElementSet keyhole(std::size_t k, Side side) const {
        ElementSet s(clipped_.universe());
        const bool vertical = side == Side::top || side == Side::bottom;
        for (std::size_t q : channel(k, side)) {
            for (int d = -halfwidth_; d <= halfwidth_; ++d) {
                const int i = column(q) + (vertical ? d : 0), j = row(q) + (vertical ? 0 : d);
                if (i >= 0 && j >= 0 && i < p_ && j < p_) s |= pixels_[index(i, j)];
            }
        }
        return s;
    }

    // Outer test set: clipped domain minus the keyhole. Its complement reaches
    // the Neumann boundary through the channel.
    ElementSet keyhole_complement(std::size_t k, Side side) const { return clipped_.minus(keyhole(k, side)); }

    // The keyhole used for pixel k: the shortest one.
    Side keyhole_side(std::size_t k) const { return keyhole_sides(k).front(); }
    ElementSet test_set(std::size_t k) const { return keyhole_complement(k, keyhole_side(k)); }

    // Fraction of pixel k's area covered by `shape`, by midpoint sampling on a
    // samples x samples lattice.
    double overlap_fraction(std::size_t k, const Shape& shape, int samples = 64) const {
        const Rect r = bounds(k);
        int inside = 0;
        for (int a = 0; a < samples; ++a)
            for (int b = 0; b < samples; ++b) {
                const Point q{r.lo.x + (a + 0.5) * width_ / samples, r.lo.y + (b + 0.5) * width_ / samples};
                if (contains(shape, q)) ++inside;
            }
        return static_cast<double>(inside) / (static_cast<double>(samples) * samples);
    }

private:
    friend PixelGrid build_pixel_grid(const Mesh& mesh, int p, int keyhole_halfwidth);

    int p_ = 0;
    int halfwidth_ = 0;
    double margin_ = 0.0;
    double width_ = 0.0;
    std::vector<ElementSet> pixels_;
    ElementSet clipped_;
    std::vector<Side> neumann_sides_;
};

inline PixelGrid build_pixel_grid(const Mesh& mesh, int p, int keyhole_halfwidth = 0) {
    if (p < 1) throw ValidationError("reconstruct", "pixel grid needs p >= 1");
    if (keyhole_halfwidth < 0) throw ValidationError("reconstruct", "keyhole half-width must be non-negative");
    if (mesh.cells_per_side < 3) throw ValidationError("reconstruct", "mesh too coarse for a clipped pixel grid");
    PixelGrid g;
    g.p_ = p;
    g.halfwidth_ = keyhole_halfwidth;
    g.margin_ = mesh.element_layer();
    g.width_ = (1.0 - 2.0 * g.margin_) / p;
    const std::size_t ne = mesh.element_count();
    g.pixels_.assign(static_cast<std::size_t>(p) * p, ElementSet(ne));
    g.clipped_ = ElementSet(ne);
    for (std::size_t e = 0; e < ne; ++e) {
        const Point c = mesh.barycenter(e);
        const double u = (c.x - g.margin_) / g.width_, v = (c.y - g.margin_) / g.width_;
        if (u < 0.0 || v < 0.0 || u >= p || v >= p) continue;
        const int i = std::min(p - 1, static_cast<int>(u)), j = std::min(p - 1, static_cast<int>(v));
        g.pixels_[g.index(i, j)].insert(static_cast<ElementId>(e));
        g.clipped_.insert(static_cast<ElementId>(e));
    }
    for (std::size_t k = 0; k < g.pixels_.size(); ++k)
        if (g.pixels_[k].empty())
            throw ValidationError("reconstruct", "pixel " + std::to_string(k) +
                                                     " holds no element; use a finer mesh or fewer pixels");
    bool seen[4] = {false, false, false, false};
    for (const auto& edge : mesh.boundary_edges)
        if (edge.tag == EdgeTag::neumann) seen[static_cast<int>(edge.side)] = true;
    for (Side s : {Side::bottom, Side::top, Side::left, Side::right})
        if (seen[static_cast<int>(s)]) g.neumann_sides_.push_back(s);
    return g;
}

// ---------------------------------------------------------------------------
// Indicator maps

struct IndicatorMap {
    int p = 0;
    std::vector<Point> centers;
    std::vector<double> indicator_1;  // upper / single-inequality min-eig
    std::vector<double> indicator_2;  // lower min-eig, NaN when not consulted
    std::vector<char> verdict;        // test holds
    std::vector<char> mask;
    Thresholds tau;
    std::string test;
    std::string provenance;

    std::size_t size() const { return verdict.size(); }
    std::size_t mask_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

    // Smallest consulted indicator of pixel k.
    double combined(std::size_t k) const {
        const double a = indicator_1[k], b = indicator_2[k];
        if (std::isnan(a)) return b;
        if (std::isnan(b)) return a;
        return std::min(a, b);
    }
};

namespace detail {

inline IndicatorMap empty_map(const PixelGrid& grid, const Thresholds& tau, std::string test, std::string provenance) {
    IndicatorMap m;
    m.p = grid.p();
    for (std::size_t k = 0; k < grid.size(); ++k) m.centers.push_back(grid.center(k));
    m.indicator_1.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
    m.indicator_2.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
    m.verdict.assign(grid.size(), 0);
    m.mask.assign(grid.size(), 0);
    m.tau = tau;
    m.test = std::move(test);
    m.provenance = std::move(provenance);
    return m;
}

inline void store(IndicatorMap& m, std::size_t k, const SandwichResult& r) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    m.indicator_1[k] = r.upper_consulted ? r.upper.min_eig : nan;
    m.indicator_2[k] = r.lower_consulted ? r.lower.min_eig : nan;
    m.verdict[k] = r.holds() ? 1 : 0;
}

} // namespace detail

// Outer approach. Pixel k is tested with C_k = grid.test_set(k); a passing
// test shows D avoids the pixel. Mask = pixels whose test fails.
inline IndicatorMap outer_reconstruction(const NdMatrix& measured, const PixelGrid& grid, const TestContext& ctx,
                                         Inequalities which = Inequalities::both) {
    if (grid.neumann_sides().empty()) throw ValidationError("reconstruct", "grid has no Neumann side");
    const TestContext serial = ctx.with_threads(1);
    auto results = parallel_map(grid.size(), ctx.threads(), [&](std::size_t k) {
        return outer_test(measured, grid.test_set(k), serial, which);
    });
    IndicatorMap m = detail::empty_map(grid, ctx.tau(), "outer", measured.provenance);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        detail::store(m, k, results[k]);
        m.mask[k] = m.verdict[k] ? 0 : 1;
    }
    return m;
}

enum class InclusionSign { positive, negative };

inline std::string to_string(InclusionSign s) { return s == InclusionSign::positive ? "positive" : "negative"; }
inline InclusionSign inclusion_sign_from_string(const std::string& s) {
    if (s == "positive") return InclusionSign::positive;
    if (s == "negative") return InclusionSign::negative;
    throw ValidationError("reconstruct", "unknown inclusion sign '" + s + "' (expected positive or negative)");
}

// Inner approach with B = each pixel. Mask = pixels whose test holds.
inline IndicatorMap inner_reconstruction(const NdMatrix& measured, const PixelGrid& grid, double beta,
                                         InclusionSign sign, InnerMode mode, const TestContext& ctx) {
    check_inner_beta(beta, mode, sign == InclusionSign::negative, ctx);
    if (mode == InnerMode::linearized) ctx.sensitivity();
    const TestContext serial = ctx.with_threads(1);
    auto results = parallel_map(grid.size(), ctx.threads(), [&](std::size_t k) {
        return sign == InclusionSign::positive ? inner_test_pos(measured, grid.pixel(k), beta, mode, serial)
                                               : inner_test_neg(measured, grid.pixel(k), beta, mode, serial);
    });
    IndicatorMap m = detail::empty_map(grid, ctx.tau(), "inner-" + to_string(sign) + "-" + to_string(mode),
                                       measured.provenance + " (assumed " + to_string(sign) + " inclusions)");
    for (std::size_t k = 0; k < grid.size(); ++k) {
        m.indicator_1[k] = results[k].min_eig;
        m.verdict[k] = results[k].holds ? 1 : 0;
        m.mask[k] = m.verdict[k];
    }
    return m;
}

// Linearized outer approach over the same test sets. Uses only the
// background responses held by the context: G_C = G_clipped - G_keyhole.
inline IndicatorMap linearized_outer_reconstruction(const NdMatrix& measured, const PixelGrid& grid, double beta,
                                                    const BetaBounds& bounds, const TestContext& ctx,
                                                    Inequalities which = Inequalities::both) {
    if (!(beta > 0.0)) throw ValidationError("reconstruct", "linearized outer test needs beta > 0");
    if (grid.neumann_sides().empty()) throw ValidationError("reconstruct", "grid has no Neumann side");
    const BackgroundSensitivity& s = ctx.sensitivity();
    require_same_basis(measured, s.nd0());
    const Eigen::MatrixXd g_clip = s.energy_gram(grid.clipped());
    auto results = parallel_map(grid.size(), ctx.threads(), [&](std::size_t k) {
        const ElementSet hole = grid.keyhole(k, grid.keyhole_side(k));
        return linearized_outer_from_gram(measured, s.nd0(), g_clip - s.energy_gram(hole), beta, bounds, ctx.tau(),
                                          which);
    });
    IndicatorMap m = detail::empty_map(grid, ctx.tau(), "linearized-outer", measured.provenance);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        detail::store(m, k, results[k]);
        m.mask[k] = m.verdict[k] ? 0 : 1;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Export

inline void write_indicator_csv(std::ostream& out, const IndicatorMap& m) {
    out << "pixel,center_x,center_y,indicator_1,indicator_2,verdict\n";
    char buf[160];
    const auto num = [](double v) {
        if (std::isnan(v)) return std::string();
        char b[32];
        std::snprintf(b, sizeof(b), "%.17g", v);
        return std::string(b);
    };
    for (std::size_t k = 0; k < m.size(); ++k) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,", k, m.centers[k].x, m.centers[k].y);
        out << buf << num(m.indicator_1[k]) << ',' << num(m.indicator_2[k]) << ','
            << (m.verdict[k] ? "holds" : "fails") << '\n';
    }
}

namespace detail {

inline void write_pgm(std::ostream& out, int p, const std::vector<unsigned char>& by_index) {
    out << "P5\n" << p << ' ' << p << "\n255\n";
    for (int r = 0; r < p; ++r) {
        const int j = p - 1 - r;  // image row 0 is the top of the domain
        for (int i = 0; i < p; ++i) out.put(static_cast<char>(by_index[static_cast<std::size_t>(j * p + i)]));
    }
}

} // namespace detail

// Combined indicators, min-max normalized to 0..255.
inline void write_indicator_pgm(std::ostream& out, const IndicatorMap& m) {
    std::vector<double> v(m.size());
    for (std::size_t k = 0; k < m.size(); ++k) v[k] = m.combined(k);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double x : v)
        if (std::isfinite(x)) lo = std::min(lo, x), hi = std::max(hi, x);
    std::vector<unsigned char> px(m.size(), 0);
    if (hi > lo)
        for (std::size_t k = 0; k < m.size(); ++k)
            if (std::isfinite(v[k])) px[k] = static_cast<unsigned char>(std::lround(255.0 * (v[k] - lo) / (hi - lo)));
    detail::write_pgm(out, m.p, px);
}

inline void write_mask_pgm(std::ostream& out, const IndicatorMap& m) {
    std::vector<unsigned char> px(m.size());
    for (std::size_t k = 0; k < m.size(); ++k) px[k] = m.mask[k] ? 255 : 0;
    detail::write_pgm(out, m.p, px);
}

} // namespace elastomono
