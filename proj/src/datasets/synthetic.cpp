#include "cycledm/datasets/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "cycledm/rng.hpp"

namespace cycledm::datasets {
namespace {

constexpr double kPi = std::numbers::pi;

Polyline line(double x0, double y0, double x1, double y1) { return {{x0, y0}, {x1, y1}}; }

// Elliptic arc from a0 to a1 degrees; angle 90 points down.
Polyline arc(double cx, double cy, double rx, double ry, double a0, double a1) {
  const int segments = std::max(4, static_cast<int>(std::ceil(std::abs(a1 - a0) / 15.0)));
  Polyline p;
  for (int i = 0; i <= segments; ++i) {
    const double a = (a0 + (a1 - a0) * i / segments) * kPi / 180.0;
    p.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return p;
}

Polyline join(Polyline a, const Polyline& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<std::vector<Polyline>> build_skeletons() {
  std::vector<std::vector<Polyline>> s(kNumClasses);
  const Polyline p_bowl = join(join(line(0, 0, 0.55, 0), arc(0.55, 0.27, 0.35, 0.27, -90, 90)), line(0.55, 0.54, 0, 0.54));
  s[0] = {line(0, 1, 0.5, 0), line(0.5, 0, 1, 1), line(0.22, 0.6, 0.78, 0.6)};
  s[1] = {line(0, 0, 0, 1),
          join(join(line(0, 0, 0.55, 0), arc(0.55, 0.25, 0.3, 0.25, -90, 90)), line(0.55, 0.5, 0, 0.5)),
          join(join(line(0, 0.5, 0.6, 0.5), arc(0.6, 0.75, 0.35, 0.25, -90, 90)), line(0.6, 1, 0, 1))};
  s[2] = {arc(0.55, 0.5, 0.45, 0.5, 45, 315)};
  s[3] = {line(0, 0, 0, 1), join(join(line(0, 0, 0.45, 0), arc(0.45, 0.5, 0.5, 0.5, -90, 90)), line(0.45, 1, 0, 1))};
  s[4] = {line(0, 0, 0, 1), line(0, 0, 0.9, 0), line(0, 0.5, 0.7, 0.5), line(0, 1, 0.9, 1)};
  s[5] = {line(0, 0, 0, 1), line(0, 0, 0.9, 0), line(0, 0.5, 0.7, 0.5)};
  s[6] = {arc(0.55, 0.5, 0.45, 0.5, 45, 315), join(line(0.55, 0.55, 0.98, 0.55), line(0.98, 0.55, 0.9, 0.82))};
  s[7] = {line(0, 0, 0, 1), line(1, 0, 1, 1), line(0, 0.5, 1, 0.5)};
  s[8] = {line(0.5, 0, 0.5, 1), line(0.25, 0, 0.75, 0), line(0.25, 1, 0.75, 1)};
  s[9] = {join(line(0.75, 0, 0.75, 0.7), arc(0.45, 0.7, 0.3, 0.3, 0, 180)), line(0.45, 0, 0.95, 0)};
  s[10] = {line(0, 0, 0, 1), line(0.9, 0, 0, 0.55), line(0.3, 0.4, 0.95, 1)};
  s[11] = {line(0, 0, 0, 1), line(0, 1, 0.85, 1)};
  s[12] = {{{0, 1}, {0, 0}, {0.5, 0.65}, {1, 0}, {1, 1}}};
  s[13] = {{{0, 1}, {0, 0}, {1, 1}, {1, 0}}};
  s[14] = {arc(0.5, 0.5, 0.48, 0.5, 0, 360)};
  s[15] = {line(0, 0, 0, 1), p_bowl};
  s[16] = {arc(0.5, 0.5, 0.48, 0.5, 0, 360), line(0.6, 0.7, 1, 1.02)};
  s[17] = {line(0, 0, 0, 1), p_bowl, line(0.35, 0.54, 0.95, 1)};
  s[18] = {join(arc(0.5, 0.26, 0.4, 0.26, -10, -270), arc(0.5, 0.76, 0.42, 0.24, -90, 170))};
  s[19] = {line(0, 0, 1, 0), line(0.5, 0, 0.5, 1)};
  s[20] = {join(join(line(0, 0, 0, 0.6), arc(0.5, 0.6, 0.5, 0.4, 180, 0)), line(1, 0.6, 1, 0))};
  s[21] = {{{0, 0}, {0.5, 1}, {1, 0}}};
  s[22] = {{{0, 0}, {0.22, 1}, {0.5, 0.35}, {0.78, 1}, {1, 0}}};
  s[23] = {line(0, 0, 1, 1), line(1, 0, 0, 1)};
  s[24] = {line(0, 0, 0.5, 0.5), line(1, 0, 0.5, 0.5), line(0.5, 0.5, 0.5, 1)};
  s[25] = {{{0, 0}, {1, 0}, {0, 1}, {1, 1}}};
  return s;
}

// Splits every segment so that a warp bends straight strokes.
Polyline subdivide(const Polyline& p, double max_len) {
  Polyline out;
  for (size_t i = 0; i + 1 < p.size(); ++i) {
    const Point a = p[i], b = p[i + 1];
    const int n = std::max(1, static_cast<int>(std::ceil(std::hypot(b.x - a.x, b.y - a.y) / max_len)));
    for (int k = 0; k < n; ++k) out.push_back({a.x + (b.x - a.x) * k / n, a.y + (b.y - a.y) * k / n});
  }
  out.push_back(p.back());
  return out;
}

bool is_closed(const Polyline& p) {
  return p.size() > 2 && std::hypot(p.front().x - p.back().x, p.front().y - p.back().y) < 1e-9;
}

// Short cross strokes at the open ends of every stroke.
std::vector<Polyline> add_serifs(const std::vector<Polyline>& strokes, double half_len) {
  std::vector<Polyline> out = strokes;
  for (const auto& p : strokes) {
    if (p.size() < 2 || is_closed(p)) continue;
    const std::array<std::pair<Point, Point>, 2> ends{{{p[0], p[1]}, {p.back(), p[p.size() - 2]}}};
    for (const auto& [end, next] : ends) {
      const double dx = next.x - end.x, dy = next.y - end.y;
      const double len = std::hypot(dx, dy);
      if (len < 1e-9) continue;
      const double nx = -dy / len * half_len, ny = dx / len * half_len;
      out.push_back(line(end.x - nx, end.y - ny, end.x + nx, end.y + ny));
    }
  }
  return out;
}

struct Placement {
  double scale_x = 1.0;
  double shear = 0.0;
};

// Maps glyph-box coordinates into [0, 1] image coordinates.
Point place(Point p, const Placement& pl) {
  const double x = 0.5 + (p.x - 0.5) * 0.6 * pl.scale_x + pl.shear * (0.5 - p.y) * 0.64;
  const double y = 0.18 + p.y * 0.64;
  return {x, y};
}

std::vector<Polyline> transform(const std::vector<Polyline>& strokes, const Placement& pl) {
  std::vector<Polyline> out;
  for (const auto& s : strokes) {
    Polyline q;
    for (const auto& p : s) q.push_back(place(p, pl));
    out.push_back(std::move(q));
  }
  return out;
}

// Smooth random displacement field: a few low-frequency sinusoids.
struct Warp {
  struct Wave {
    double fx, fy, phase, ax, ay;
  };
  std::vector<Wave> waves;

  Point operator()(Point p) const {
    Point d{p.x, p.y};
    for (const auto& w : waves) {
      const double s = std::sin(w.fx * p.x + w.fy * p.y + w.phase);
      d.x += w.ax * s;
      d.y += w.ay * s;
    }
    return d;
  }
};

Warp random_warp(RngStream& rng, double amplitude) {
  Warp w;
  for (int i = 0; i < 3; ++i) {
    Warp::Wave wave{};
    wave.fx = (rng.uniform() * 2 - 1) * 2 * kPi;
    wave.fy = (rng.uniform() * 2 - 1) * 2 * kPi;
    wave.phase = rng.uniform() * 2 * kPi;
    wave.ax = rng.normal() * amplitude;
    wave.ay = rng.normal() * amplitude;
    w.waves.push_back(wave);
  }
  return w;
}

std::vector<Polyline> handwriting_strokes(int label, const SyntheticGlyphSpec& spec, RngStream& rng) {
  const Warp warp = random_warp(rng, spec.jitter);
  std::vector<Polyline> out;
  for (const auto& stroke : letter_skeleton(label)) {
    Polyline p = subdivide(stroke, 0.1);
    for (auto& pt : p) pt = warp(pt);
    if (spec.wobble > 0 && !is_closed(p)) {
      const double m = static_cast<double>(p.size() - 1);
      const Point d0{rng.normal() * spec.wobble, rng.normal() * spec.wobble};
      const Point d1{rng.normal() * spec.wobble, rng.normal() * spec.wobble};
      for (size_t i = 0; i < p.size(); ++i) {
        const double u = static_cast<double>(i) / m;
        p[i].x += (1 - u) * (1 - u) * d0.x + u * u * d1.x;
        p[i].y += (1 - u) * (1 - u) * d0.y + u * u * d1.y;
      }
    }
    out.push_back(std::move(p));
  }
  Placement pl;
  pl.shear = (rng.uniform() * 2 - 1) * spec.slant;
  return transform(out, pl);
}

std::vector<Polyline> print_strokes(int label, const SyntheticGlyphSpec& spec, double aspect) {
  const auto& base = letter_skeleton(label);
  std::vector<Polyline> strokes = spec.serifs ? add_serifs(base, 0.09) : base;
  Placement pl;
  pl.scale_x = aspect;
  return transform(strokes, pl);
}

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

std::string item_name(int label, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c_%04d", class_letter(label), index);
  return buf;
}

}  // namespace

void SyntheticGlyphSpec::validate() const {
  if (resolution < 8) throw std::invalid_argument("synthetic resolution must be at least 8");
  if (per_class < 1) throw std::invalid_argument("synthetic per_class must be at least 1");
  for (double v : {jitter, wobble, slant, mp_width_variation, mp_aspect_variation}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("synthetic style parameters must be finite and >= 0");
  }
  if (!(hw_stroke_width > 0.0) || !(mp_stroke_width > 0.0)) {
    throw std::invalid_argument("synthetic stroke widths must be positive");
  }
  if (mp_width_variation >= mp_stroke_width) throw std::invalid_argument("mp_width_variation must be below mp_stroke_width");
  if (mp_aspect_variation >= 0.5) throw std::invalid_argument("mp_aspect_variation must be below 0.5");
}

nlohmann::json SyntheticGlyphSpec::to_json() const {
  return {{"resolution", resolution},
          {"per_class", per_class},
          {"seed", seed},
          {"jitter", jitter},
          {"wobble", wobble},
          {"slant", slant},
          {"hw_stroke_width", hw_stroke_width},
          {"mp_stroke_width", mp_stroke_width},
          {"mp_width_variation", mp_width_variation},
          {"mp_aspect_variation", mp_aspect_variation},
          {"serifs", serifs}};
}

const std::vector<Polyline>& letter_skeleton(int label) {
  static const std::vector<std::vector<Polyline>> skeletons = build_skeletons();
  if (label < 0 || label >= kNumClasses) throw std::out_of_range("letter_skeleton: label out of range");
  return skeletons[static_cast<size_t>(label)];
}

std::vector<uint8_t> render_strokes(const std::vector<Polyline>& strokes, double width_px, int resolution) {
  std::vector<uint8_t> out(static_cast<size_t>(resolution) * resolution, 0);
  const double half = width_px / 2.0;
  std::vector<std::pair<Point, Point>> segs;
  for (const auto& s : strokes) {
    for (size_t i = 0; i + 1 < s.size(); ++i) {
      segs.push_back({{s[i].x * resolution, s[i].y * resolution}, {s[i + 1].x * resolution, s[i + 1].y * resolution}});
    }
    if (s.size() == 1) segs.push_back({{s[0].x * resolution, s[0].y * resolution}, {s[0].x * resolution, s[0].y * resolution}});
  }
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const Point c{x + 0.5, y + 0.5};
      double d = 1e30;
      for (const auto& [a, b] : segs) d = std::min(d, segment_distance(c, a, b));
      const double coverage = std::clamp(half + 0.5 - d, 0.0, 1.0);
      out[static_cast<size_t>(y) * resolution + x] = static_cast<uint8_t>(std::lround(coverage * 255.0));
    }
  }
  return out;
}

std::pair<DomainDataset, DomainDataset> generate_synthetic(const SyntheticGlyphSpec& spec) {
  spec.validate();
  const double px_scale = spec.resolution / 32.0;
  DomainDataset hw, mp;
  hw.domain = Domain::kHandwritten;
  mp.domain = Domain::kPrinted;
  hw.resolution = mp.resolution = spec.resolution;
  hw.provenance = mp.provenance = "synthetic:seed=" + std::to_string(spec.seed);
  for (int c = 0; c < kNumClasses; ++c) {
    RngStream hw_rng = RngStream::derive(spec.seed, std::string("synthetic/hw/") + class_letter(c));
    RngStream mp_rng = RngStream::derive(spec.seed, std::string("synthetic/mp/") + class_letter(c));
    for (int i = 0; i < spec.per_class; ++i) {
      GlyphItem h;
      h.label = c;
      h.name = item_name(c, i);
      h.pixels = render_strokes(handwriting_strokes(c, spec, hw_rng), std::max(1.0, spec.hw_stroke_width * px_scale),
                                spec.resolution);
      hw.items.push_back(std::move(h));

      const double width = spec.mp_stroke_width + (mp_rng.uniform() * 2 - 1) * spec.mp_width_variation;
      const double aspect = 1.0 + (mp_rng.uniform() * 2 - 1) * spec.mp_aspect_variation;
      GlyphItem m;
      m.label = c;
      m.name = item_name(c, i);
      m.pixels = render_strokes(print_strokes(c, spec, aspect), std::max(1.0, width * px_scale), spec.resolution);
      mp.items.push_back(std::move(m));
    }
  }
  return {std::move(hw), std::move(mp)};
}

}  // namespace cycledm::datasets
