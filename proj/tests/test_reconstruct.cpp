#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "elastomono/reconstruct.hpp"
#include "generators.hpp"

using namespace elastomono;

namespace {

Mesh square(int n, std::vector<Side> d = {Side::bottom}) { return build_unit_square_mesh(n, d); }

} // namespace

TEST(PixelGrid, PartitionsTheClippedDomain) {
    const Mesh m = square(24);
    const PixelGrid g = build_pixel_grid(m, 8, 1);
    ElementSet all(m.element_count());
    std::size_t total = 0;
    for (std::size_t k = 0; k < g.size(); ++k) {
        EXPECT_FALSE(g.pixel(k).intersects(all));
        all |= g.pixel(k);
        total += g.pixel(k).count();
    }
    EXPECT_EQ(all, g.clipped());
    EXPECT_EQ(total, g.clipped().count());
    EXPECT_DOUBLE_EQ(g.margin(), 1.0 / 24);
    // Elements in the outermost layer are never in a pixel.
    for (ElementId e : g.clipped().indices()) {
        const Point c = m.barycenter(e);
        EXPECT_GT(std::min({c.x, c.y, 1.0 - c.x, 1.0 - c.y}), 1.0 / 24);
    }
    EXPECT_EQ(g.neumann_sides(), (std::vector<Side>{Side::top, Side::left, Side::right}));
}

TEST(PixelGrid, RejectsBadParameters) {
    EXPECT_THROW(build_pixel_grid(square(8), 0), ValidationError);
    EXPECT_THROW(build_pixel_grid(square(8), 4, -1), ValidationError);
    EXPECT_THROW(build_pixel_grid(square(2), 1), ValidationError);
    EXPECT_THROW(build_pixel_grid(square(8), 16), ValidationError);
}

TEST(PixelGrid, ChannelsAndKeyholeSides) {
    const PixelGrid g = build_pixel_grid(square(32), 8, 1);
    // Near the top: channel to the top is shortest.
    EXPECT_EQ(g.keyhole_side(g.index(4, 6)), Side::top);
    EXPECT_EQ(g.keyhole_side(g.index(0, 2)), Side::left);
    EXPECT_EQ(g.keyhole_side(g.index(7, 3)), Side::right);
    // Ties: top before left before right.
    EXPECT_EQ(g.keyhole_side(g.index(0, 7)), Side::top);
    EXPECT_EQ(g.keyhole_side(g.index(3, 4)), Side::top);
    EXPECT_EQ(g.keyhole_side(g.index(7, 0)), Side::right);
    const auto ch = g.channel(g.index(2, 5), Side::top);
    EXPECT_EQ(ch, (std::vector<std::size_t>{g.index(2, 5), g.index(2, 6), g.index(2, 7)}));
    // The bottom side is Dirichlet and never offered.
    for (std::size_t k = 0; k < g.size(); ++k)
        for (Side s : g.keyhole_sides(k)) EXPECT_NE(s, Side::bottom);
}

TEST(PixelGrid, KeyholeGeometry) {
    const PixelGrid g = build_pixel_grid(square(32), 8, 1);
    const std::size_t k = g.index(3, 5);
    const ElementSet hole = g.keyhole(k, Side::top);
    ElementSet expected(g.clipped().universe());
    for (int j = 5; j < 8; ++j)
        for (int i = 2; i <= 4; ++i) expected |= g.pixel(g.index(i, j));
    EXPECT_EQ(hole, expected);
    const ElementSet c = g.test_set(k);
    EXPECT_FALSE(c.intersects(g.pixel(k)));
    EXPECT_TRUE(c.is_subset_of(g.clipped()));
    EXPECT_EQ(c, g.clipped().minus(hole));
    // Clamped at the grid edge.
    const ElementSet edge = g.keyhole(g.index(0, 7), Side::top);
    EXPECT_EQ(edge.count(), g.pixel(g.index(0, 7)).count() + g.pixel(g.index(1, 7)).count());
}

TEST(PixelGridProperty, KeyholeComplementAvoidsPixel) {
    gen::Rng rng(44);
    for (int trial = 0; trial < 20; ++trial) {
        const int p = rng.integer(2, 8), hw = rng.integer(0, 2);
        const PixelGrid g = build_pixel_grid(square(3 * p + 2, {Side::left}), p, hw);
        const std::size_t k = static_cast<std::size_t>(rng.integer(0, p * p - 1));
        for (Side s : g.keyhole_sides(k)) {
            const ElementSet c = g.keyhole_complement(k, s);
            EXPECT_FALSE(c.intersects(g.pixel(k)));
            // Every pixel of the channel is removed.
            for (std::size_t q : g.channel(k, s)) EXPECT_FALSE(c.intersects(g.pixel(q)));
        }
    }
}

TEST(PixelGrid, OverlapFraction) {
    const PixelGrid g = build_pixel_grid(square(16), 4);
    const Rect whole{{0.0, 0.0}, {1.0, 1.0}};
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_DOUBLE_EQ(g.overlap_fraction(k, whole), 1.0);
    const Rect b = g.bounds(g.index(1, 2));
    const Rect left_half{b.lo, {0.5 * (b.lo.x + b.hi.x), b.hi.y}};
    EXPECT_DOUBLE_EQ(g.overlap_fraction(g.index(1, 2), left_half), 0.5);
    EXPECT_DOUBLE_EQ(g.overlap_fraction(g.index(3, 3), left_half), 0.0);
}

namespace {

IndicatorMap small_map() {
    IndicatorMap m;
    m.p = 2;
    m.centers = {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
    m.indicator_1 = {-1.0, 0.0, 1.0, std::nan("")};
    m.indicator_2 = {std::nan(""), -2.0, 3.0, 0.5};
    m.verdict = {0, 0, 1, 1};
    m.mask = {1, 1, 0, 0};
    return m;
}

} // namespace

TEST(IndicatorMap, Combined) {
    const IndicatorMap m = small_map();
    EXPECT_DOUBLE_EQ(m.combined(0), -1.0);
    EXPECT_DOUBLE_EQ(m.combined(1), -2.0);
    EXPECT_DOUBLE_EQ(m.combined(2), 1.0);
    EXPECT_DOUBLE_EQ(m.combined(3), 0.5);
    EXPECT_EQ(m.mask_count(), 2u);
}

TEST(IndicatorMap, CsvAndPgm) {
    const IndicatorMap m = small_map();
    std::ostringstream csv;
    write_indicator_csv(csv, m);
    EXPECT_EQ(csv.str(),
              "pixel,center_x,center_y,indicator_1,indicator_2,verdict\n"
              "0,0.25,0.25,-1,,fails\n"
              "1,0.75,0.25,0,-2,fails\n"
              "2,0.25,0.75,1,3,holds\n"
              "3,0.75,0.75,,0.5,holds\n");
    std::ostringstream mask;
    write_mask_pgm(mask, m);
    // Row 0 of the image is the top of the domain.
    EXPECT_EQ(mask.str(), std::string("P5\n2 2\n255\n") + std::string("\0\0", 2) + "\xff\xff");
    std::ostringstream ind;
    write_indicator_pgm(ind, m);
    const std::string s = ind.str();
    const std::string px = s.substr(s.size() - 4);
    // combined: -1, -2, 1, 0.5 -> normalized over [-2, 1]
    EXPECT_EQ(static_cast<unsigned char>(px[0]), 255);
    EXPECT_EQ(static_cast<unsigned char>(px[1]), 213);
    EXPECT_EQ(static_cast<unsigned char>(px[2]), 85);
    EXPECT_EQ(static_cast<unsigned char>(px[3]), 0);
}

TEST(Reconstruction, OuterMaskOnExactData) {
    const Mesh m = square(24);
    const Background bg{1.0, 1.0};
    const LoadBasis basis = build_load_basis(m, {0, 1}, 3);
    const PixelGrid g = build_pixel_grid(m, 6, 1);
    const Disc disc{{0.5, 0.72}, 0.1};
    const ElementSet d = elements_in(m, disc);
    const NdMatrix data = assemble_nd_matrix(m, cavity_field(m, bg, d), basis, 1, "exact cavity");
    const TestContext ctx(m, bg, basis, Thresholds::uniform(1e-9));
    const IndicatorMap map = outer_reconstruction(data, g, ctx, Inequalities::upper);
    // Pixels at least half covered by D cannot pass. Pixels that only graze D
    // may still pass with a finite load basis.
    std::size_t covered = 0;
    for (std::size_t k = 0; k < g.size(); ++k)
        if (g.overlap_fraction(k, disc) >= 0.5) {
            ++covered;
            EXPECT_EQ(map.mask[k], 1) << k;
        }
    EXPECT_GT(covered, 0u);
    EXPECT_LT(map.mask_count(), g.size());
    EXPECT_EQ(map.test, "outer");
    EXPECT_EQ(map.provenance, "exact cavity");
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_TRUE(std::isnan(map.indicator_2[k]));
}

TEST(ReconstructionProperty, MaskShrinksAsTauGrows) {
    const Mesh m = square(18);
    const Background bg{1.0, 1.0};
    const LoadBasis basis = build_load_basis(m, {0, 1}, 3);
    const PixelGrid g = build_pixel_grid(m, 4, 1);
    const ElementSet d = elements_in(m, Disc{{0.5, 0.6}, 0.12});
    const NdMatrix data = add_symmetric_noise(assemble_nd_matrix(m, rigid_field(m, bg, d), basis), 1e-4, 5);
    const TestContext ctx(m, bg, basis, {});
    std::vector<char> previous(g.size(), 1);
    for (double tau : {0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1}) {
        const IndicatorMap map = outer_reconstruction(data, g, ctx.with_tau(Thresholds::uniform(tau)));
        for (std::size_t k = 0; k < g.size(); ++k) EXPECT_LE(map.mask[k], previous[k]) << "tau " << tau;
        previous = map.mask;
        const IndicatorMap inner = inner_reconstruction(data, g, 0.5, InclusionSign::positive, InnerMode::linearized,
                                                        ctx.with_tau(Thresholds::uniform(tau)));
        EXPECT_EQ(inner.test, "inner-positive-linearized");
    }
}

TEST(Reconstruction, LinearizedMatchesDirectLinearizedTests) {
    const Mesh m = square(18);
    const Background bg{1.0, 1.0};
    const LoadBasis basis = build_load_basis(m, {0, 1}, 3);
    const PixelGrid g = build_pixel_grid(m, 4, 1);
    const ElementSet d = elements_in(m, Disc{{0.5, 0.6}, 0.12});
    const NdMatrix data = assemble_nd_matrix(m, field_with(m, bg, d, Finite{2.0, 2.0}), basis);
    const TestContext ctx(m, bg, basis, Thresholds::uniform(1e-9));
    const BetaBounds bounds = beta_bounds(bg);
    const IndicatorMap map = linearized_outer_reconstruction(data, g, 1.0, bounds, ctx);
    for (std::size_t k = 0; k < g.size(); ++k) {
        const SandwichResult direct = linearized_outer_test(data, g.test_set(k), 1.0, bounds, ctx);
        EXPECT_NEAR(map.indicator_1[k], direct.upper.min_eig, 1e-12);
        EXPECT_NEAR(map.indicator_2[k], direct.lower.min_eig, 1e-12);
        EXPECT_EQ(map.verdict[k], direct.holds() ? 1 : 0);
    }
    EXPECT_THROW(linearized_outer_reconstruction(data, g, -1.0, bounds, ctx), ValidationError);
}

TEST(Reconstruction, ThreadsDoNotChangeMaps) {
    const Mesh m = square(15);
    const Background bg{1.0, 1.0};
    const LoadBasis basis = build_load_basis(m, {0, 1}, 3);
    const PixelGrid g = build_pixel_grid(m, 4, 1);
    const ElementSet d = elements_in(m, Disc{{0.5, 0.6}, 0.12});
    const NdMatrix data = assemble_nd_matrix(m, cavity_field(m, bg, d), basis);
    const TestContext ctx(m, bg, basis, Thresholds::uniform(1e-6));
    const IndicatorMap a = outer_reconstruction(data, g, ctx), b = outer_reconstruction(data, g, ctx.with_threads(3));
    std::ostringstream ca, cb;
    write_indicator_csv(ca, a);
    write_indicator_csv(cb, b);
    EXPECT_EQ(ca.str(), cb.str());
}

TEST(Reconstruction, InclusionSignStrings) {
    EXPECT_EQ(inclusion_sign_from_string("negative"), InclusionSign::negative);
    EXPECT_EQ(to_string(InclusionSign::positive), "positive");
    EXPECT_THROW(inclusion_sign_from_string("neutral"), ValidationError);
}
