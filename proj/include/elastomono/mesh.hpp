#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "elastomono/errors.hpp"

namespace elastomono {

using NodeId = std::int32_t;
using ElementId = std::int32_t;
using RegionId = std::int32_t;

inline constexpr RegionId kBackgroundRegion = 0;

struct Point {
    double x = 0.0;
    double y = 0.0;
};

enum class Side : std::uint8_t { bottom, top, left, right };
enum class EdgeTag : std::uint8_t { dirichlet, neumann };

inline std::string_view to_string(Side s) {
    switch (s) {
    case Side::bottom: return "bottom";
    case Side::top: return "top";
    case Side::left: return "left";
    case Side::right: return "right";
    }
    return "?";
}

inline Side side_from_string(std::string_view s) {
    if (s == "bottom") return Side::bottom;
    if (s == "top") return Side::top;
    if (s == "left") return Side::left;
    if (s == "right") return Side::right;
    throw ValidationError("mesh", "unknown side '" + std::string(s) + "'");
}

struct BoundaryEdge {
    NodeId a = 0;
    NodeId b = 0;
    EdgeTag tag = EdgeTag::neumann;
    Side side = Side::bottom;
};

// ---------------------------------------------------------------------------
// Region geometry

struct Disc {
    Point center;
    double radius = 0.0;
};

struct Rect {
    Point lo;
    Point hi;
};

struct Polygon {
    std::vector<Point> vertices;
};

using Shape = std::variant<Disc, Rect, Polygon>;

struct BoundingBox {
    Point lo;
    Point hi;
};

inline BoundingBox bounding_box(const Shape& shape) {
    struct Visitor {
        BoundingBox operator()(const Disc& d) const {
            return {{d.center.x - d.radius, d.center.y - d.radius},
                    {d.center.x + d.radius, d.center.y + d.radius}};
        }
        BoundingBox operator()(const Rect& r) const { return {r.lo, r.hi}; }
        BoundingBox operator()(const Polygon& p) const {
            BoundingBox box{{1e300, 1e300}, {-1e300, -1e300}};
            for (const auto& v : p.vertices) {
                box.lo.x = std::min(box.lo.x, v.x);
                box.lo.y = std::min(box.lo.y, v.y);
                box.hi.x = std::max(box.hi.x, v.x);
                box.hi.y = std::max(box.hi.y, v.y);
            }
            return box;
        }
    };
    return std::visit(Visitor{}, shape);
}

// Closed-set membership for discs and rectangles; even-odd rule for polygons.
inline bool contains(const Shape& shape, Point p) {
    struct Visitor {
        Point p;
        bool operator()(const Disc& d) const {
            const double dx = p.x - d.center.x, dy = p.y - d.center.y;
            return dx * dx + dy * dy <= d.radius * d.radius;
        }
        bool operator()(const Rect& r) const {
            return p.x >= r.lo.x && p.x <= r.hi.x && p.y >= r.lo.y && p.y <= r.hi.y;
        }
        bool operator()(const Polygon& poly) const {
            bool inside = false;
            const auto& v = poly.vertices;
            for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
                if ((v[i].y > p.y) != (v[j].y > p.y)) {
                    const double x_cross =
                        v[j].x + (p.y - v[j].y) * (v[i].x - v[j].x) / (v[i].y - v[j].y);
                    if (p.x < x_cross) inside = !inside;
                }
            }
            return inside;
        }
    };
    return std::visit(Visitor{p}, shape);
}

// The kind only drives geometric validation (extreme regions must be disjoint,
// cavities must not disconnect the background); material values live in
// LameField.
enum class RegionKind : std::uint8_t { finite, cavity, rigid };

struct RegionSpec {
    Shape shape;
    RegionId id = 1;
    RegionKind kind = RegionKind::finite;
};

// ---------------------------------------------------------------------------
// Element sets

class ElementSet {
public:
    ElementSet() = default;
    explicit ElementSet(std::size_t element_count) : member_(element_count, 0) {}

    static ElementSet from_indices(std::size_t element_count, const std::vector<ElementId>& ids) {
        ElementSet s(element_count);
        for (ElementId e : ids) s.insert(e);
        return s;
    }

    void insert(ElementId e) { member_.at(static_cast<std::size_t>(e)) = 1; }
    void erase(ElementId e) { member_.at(static_cast<std::size_t>(e)) = 0; }
    bool contains(ElementId e) const { return member_[static_cast<std::size_t>(e)] != 0; }
    std::size_t universe() const { return member_.size(); }
    std::size_t count() const {
        return static_cast<std::size_t>(std::count(member_.begin(), member_.end(), 1));
    }
    bool empty() const { return count() == 0; }

    std::vector<ElementId> indices() const {
        std::vector<ElementId> out;
        for (std::size_t e = 0; e < member_.size(); ++e)
            if (member_[e]) out.push_back(static_cast<ElementId>(e));
        return out;
    }

    ElementSet& operator|=(const ElementSet& o) {
        for (std::size_t e = 0; e < member_.size(); ++e) member_[e] |= o.member_[e];
        return *this;
    }
    ElementSet minus(const ElementSet& o) const {
        ElementSet r = *this;
        for (std::size_t e = 0; e < member_.size(); ++e)
            if (o.member_[e]) r.member_[e] = 0;
        return r;
    }
    ElementSet complement() const {
        ElementSet r = *this;
        for (auto& m : r.member_) m = m ? 0 : 1;
        return r;
    }
    bool is_subset_of(const ElementSet& o) const {
        for (std::size_t e = 0; e < member_.size(); ++e)
            if (member_[e] && !o.member_[e]) return false;
        return true;
    }
    bool intersects(const ElementSet& o) const {
        for (std::size_t e = 0; e < member_.size(); ++e)
            if (member_[e] && o.member_[e]) return true;
        return false;
    }
    friend bool operator==(const ElementSet&, const ElementSet&) = default;

private:
    std::vector<char> member_;
};

// ---------------------------------------------------------------------------
// Mesh

struct Mesh {
    std::vector<Point> nodes;
    std::vector<std::array<NodeId, 3>> elements;  // counterclockwise
    std::vector<BoundaryEdge> boundary_edges;
    std::vector<RegionId> element_region;
    double h = 0.0;          // maximum element diameter
    int cells_per_side = 0;  // structured cells per side, doubled by refine

    std::size_t node_count() const { return nodes.size(); }
    std::size_t element_count() const { return elements.size(); }

    double signed_area(std::size_t e) const {
        const auto& t = elements[e];
        const Point& a = nodes[t[0]];
        const Point& b = nodes[t[1]];
        const Point& c = nodes[t[2]];
        return 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
    }
    double element_area(std::size_t e) const { return signed_area(e); }

    Point barycenter(std::size_t e) const {
        const auto& t = elements[e];
        return {(nodes[t[0]].x + nodes[t[1]].x + nodes[t[2]].x) / 3.0,
                (nodes[t[0]].y + nodes[t[1]].y + nodes[t[2]].y) / 3.0};
    }

    // Width of one structured element layer.
    double element_layer() const { return 1.0 / cells_per_side; }

    double edge_length(const BoundaryEdge& edge) const {
        return std::hypot(nodes[edge.b].x - nodes[edge.a].x, nodes[edge.b].y - nodes[edge.a].y);
    }

    std::size_t count_edges(EdgeTag tag) const {
        return static_cast<std::size_t>(std::count_if(
            boundary_edges.begin(), boundary_edges.end(),
            [tag](const BoundaryEdge& e) { return e.tag == tag; }));
    }

    std::vector<char> dirichlet_nodes() const {
        std::vector<char> mark(nodes.size(), 0);
        for (const auto& e : boundary_edges)
            if (e.tag == EdgeTag::dirichlet) mark[e.a] = mark[e.b] = 1;
        return mark;
    }

    ElementSet region_elements(RegionId id) const {
        ElementSet s(element_count());
        for (std::size_t e = 0; e < element_count(); ++e)
            if (element_region[e] == id) s.insert(static_cast<ElementId>(e));
        return s;
    }
};

// Edge-neighbours of every element (-1 where the edge lies on the boundary).
inline std::vector<std::array<ElementId, 3>> element_neighbors(const Mesh& mesh) {
    std::vector<std::array<ElementId, 3>> nbr(mesh.element_count(), {-1, -1, -1});
    std::map<std::pair<NodeId, NodeId>, std::pair<ElementId, int>> open;
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
        const auto& t = mesh.elements[e];
        for (int k = 0; k < 3; ++k) {
            NodeId a = t[k], b = t[(k + 1) % 3];
            auto key = std::minmax(a, b);
            auto it = open.find(key);
            if (it == open.end()) {
                open.emplace(key, std::make_pair(static_cast<ElementId>(e), k));
            } else {
                nbr[e][k] = it->second.first;
                nbr[it->second.first][it->second.second] = static_cast<ElementId>(e);
                open.erase(it);
            }
        }
    }
    return nbr;
}

// Number of edge-connected components among the elements with member[e] != 0.
inline int count_components(const Mesh& mesh, const std::vector<char>& member) {
    const auto nbr = element_neighbors(mesh);
    std::vector<char> seen(mesh.element_count(), 0);
    std::vector<ElementId> stack;
    int components = 0;
    for (std::size_t start = 0; start < mesh.element_count(); ++start) {
        if (!member[start] || seen[start]) continue;
        ++components;
        stack.push_back(static_cast<ElementId>(start));
        seen[start] = 1;
        while (!stack.empty()) {
            const ElementId e = stack.back();
            stack.pop_back();
            for (ElementId f : nbr[e]) {
                if (f >= 0 && member[f] && !seen[f]) {
                    seen[f] = 1;
                    stack.push_back(f);
                }
            }
        }
    }
    return components;
}

// Structured triangulation of (0,1)^2 with n cells per side. Each cell is cut
// along a diagonal whose direction alternates in a checkerboard pattern.
inline Mesh build_unit_square_mesh(int n, const std::vector<Side>& dirichlet_sides) {
    if (n < 2) throw ValidationError("mesh", "need at least 2 subdivisions per side, got " + std::to_string(n));
    const std::set<Side> dirichlet(dirichlet_sides.begin(), dirichlet_sides.end());
    if (dirichlet.empty())
        throw ValidationError("mesh", "Dirichlet boundary must be non-empty");
    if (dirichlet.size() == 4)
        throw ValidationError("mesh", "Neumann boundary must be non-empty (all four sides are Dirichlet)");

    Mesh mesh;
    mesh.cells_per_side = n;
    mesh.h = std::sqrt(2.0) / n;
    const auto id = [n](int i, int j) { return static_cast<NodeId>(j * (n + 1) + i); };
    mesh.nodes.reserve(static_cast<std::size_t>((n + 1) * (n + 1)));
    for (int j = 0; j <= n; ++j)
        for (int i = 0; i <= n; ++i)
            mesh.nodes.push_back({static_cast<double>(i) / n, static_cast<double>(j) / n});

    mesh.elements.reserve(static_cast<std::size_t>(2 * n * n));
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) {
            const NodeId a = id(i, j), b = id(i + 1, j), c = id(i + 1, j + 1), d = id(i, j + 1);
            if ((i + j) % 2 == 0) {
                mesh.elements.push_back({a, b, c});
                mesh.elements.push_back({a, c, d});
            } else {
                mesh.elements.push_back({a, b, d});
                mesh.elements.push_back({b, c, d});
            }
        }
    }
    mesh.element_region.assign(mesh.elements.size(), kBackgroundRegion);

    const auto tag = [&](Side s) { return dirichlet.count(s) ? EdgeTag::dirichlet : EdgeTag::neumann; };
    for (int i = 0; i < n; ++i) mesh.boundary_edges.push_back({id(i, 0), id(i + 1, 0), tag(Side::bottom), Side::bottom});
    for (int j = 0; j < n; ++j) mesh.boundary_edges.push_back({id(n, j), id(n, j + 1), tag(Side::right), Side::right});
    for (int i = n; i > 0; --i) mesh.boundary_edges.push_back({id(i, n), id(i - 1, n), tag(Side::top), Side::top});
    for (int j = n; j > 0; --j) mesh.boundary_edges.push_back({id(0, j), id(0, j - 1), tag(Side::left), Side::left});
    return mesh;
}

// Uniform red refinement: every triangle is split into four congruent
// children through its edge midpoints. Region labels and boundary tags are
// inherited, never re-derived.
inline Mesh refine(const Mesh& mesh) {
    Mesh fine;
    fine.nodes = mesh.nodes;
    fine.h = mesh.h / 2.0;
    fine.cells_per_side = mesh.cells_per_side * 2;

    std::map<std::pair<NodeId, NodeId>, NodeId> midpoint;
    const auto mid = [&](NodeId a, NodeId b) {
        auto key = std::minmax(a, b);
        auto it = midpoint.find(key);
        if (it != midpoint.end()) return it->second;
        const NodeId m = static_cast<NodeId>(fine.nodes.size());
        fine.nodes.push_back({0.5 * (mesh.nodes[a].x + mesh.nodes[b].x),
                              0.5 * (mesh.nodes[a].y + mesh.nodes[b].y)});
        midpoint.emplace(key, m);
        return m;
    };

    fine.elements.reserve(4 * mesh.elements.size());
    fine.element_region.reserve(4 * mesh.elements.size());
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
        const auto [a, b, c] = mesh.elements[e];
        const NodeId ab = mid(a, b), bc = mid(b, c), ca = mid(c, a);
        fine.elements.push_back({a, ab, ca});
        fine.elements.push_back({ab, b, bc});
        fine.elements.push_back({ca, bc, c});
        fine.elements.push_back({ab, bc, ca});
        for (int k = 0; k < 4; ++k) fine.element_region.push_back(mesh.element_region[e]);
    }
    for (const auto& edge : mesh.boundary_edges) {
        const NodeId m = mid(edge.a, edge.b);
        fine.boundary_edges.push_back({edge.a, m, edge.tag, edge.side});
        fine.boundary_edges.push_back({m, edge.b, edge.tag, edge.side});
    }
    return fine;
}

// Assigns region identifiers by barycenter membership. Labels are reset first,
// so repeated calls with the same specs give the same mesh.
inline Mesh label_regions(Mesh mesh, const std::vector<RegionSpec>& specs) {
    std::set<RegionId> ids;
    for (const auto& spec : specs) {
        if (spec.id == kBackgroundRegion)
            throw ValidationError("mesh", "region id 0 is reserved for the background");
        if (!ids.insert(spec.id).second)
            throw ValidationError("mesh", "duplicate region id " + std::to_string(spec.id));
        if (const auto* d = std::get_if<Disc>(&spec.shape); d && !(d->radius > 0.0))
            throw ValidationError("mesh", "disc radius must be positive (region " + std::to_string(spec.id) + ")");
        if (const auto* p = std::get_if<Polygon>(&spec.shape); p && p->vertices.size() < 3)
            throw ValidationError("mesh", "polygon needs at least 3 vertices (region " + std::to_string(spec.id) + ")");
        const BoundingBox box = bounding_box(spec.shape);
        const double margin = mesh.element_layer() - 1e-12;
        if (box.lo.x < margin || box.lo.y < margin || box.hi.x > 1.0 - margin || box.hi.y > 1.0 - margin)
            throw ValidationError("mesh", "region " + std::to_string(spec.id) +
                                              " must stay at least one element layer inside the domain");
    }

    std::vector<RegionKind> kind_of(mesh.element_count(), RegionKind::finite);
    std::fill(mesh.element_region.begin(), mesh.element_region.end(), kBackgroundRegion);
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
        const Point p = mesh.barycenter(e);
        for (const auto& spec : specs) {
            if (!contains(spec.shape, p)) continue;
            if (mesh.element_region[e] != kBackgroundRegion)
                throw ValidationError("mesh", "regions " + std::to_string(mesh.element_region[e]) + " and " +
                                                  std::to_string(spec.id) + " overlap");
            mesh.element_region[e] = spec.id;
            kind_of[e] = spec.kind;
        }
    }

    // Extreme regions must have disjoint closures.
    std::vector<char> touches_cavity(mesh.node_count(), 0), touches_rigid(mesh.node_count(), 0);
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
        for (NodeId v : mesh.elements[e]) {
            if (kind_of[e] == RegionKind::cavity) touches_cavity[v] = 1;
            if (kind_of[e] == RegionKind::rigid) touches_rigid[v] = 1;
        }
    }
    for (std::size_t v = 0; v < mesh.node_count(); ++v)
        if (touches_cavity[v] && touches_rigid[v])
            throw ValidationError("mesh", "cavity and rigid regions overlap or touch");

    std::vector<char> solid(mesh.element_count());
    for (std::size_t e = 0; e < mesh.element_count(); ++e) solid[e] = kind_of[e] != RegionKind::cavity;
    if (count_components(mesh, solid) != 1)
        throw ValidationError("mesh", "cavity regions disconnect the background");
    return mesh;
}

// One record per line: "node i x y", "element i a b c region", "edge a b tag side".
inline void write_mesh_dump(std::ostream& out, const Mesh& mesh) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "mesh nodes %zu elements %zu edges %zu h %.17g\n", mesh.node_count(),
                  mesh.element_count(), mesh.boundary_edges.size(), mesh.h);
    out << buf;
    for (std::size_t i = 0; i < mesh.node_count(); ++i) {
        std::snprintf(buf, sizeof(buf), "node %zu %.17g %.17g\n", i, mesh.nodes[i].x, mesh.nodes[i].y);
        out << buf;
    }
    for (std::size_t e = 0; e < mesh.element_count(); ++e) {
        const auto& t = mesh.elements[e];
        std::snprintf(buf, sizeof(buf), "element %zu %d %d %d %d\n", e, t[0], t[1], t[2], mesh.element_region[e]);
        out << buf;
    }
    for (const auto& edge : mesh.boundary_edges) {
        out << "edge " << edge.a << ' ' << edge.b << ' '
            << (edge.tag == EdgeTag::dirichlet ? "dirichlet" : "neumann") << ' ' << to_string(edge.side) << '\n';
    }
}

} // namespace elastomono
