#include "f2d/synthetic_faces.hpp"

#include <algorithm>
#include <cmath>

namespace f2d::synth {

namespace {

double lerp(double lo, double hi, double u) { return lo + (hi - lo) * u; }

// Soft inside-ness from a signed distance (negative inside).
double coverage(double signed_distance) {
  return std::clamp(0.5 - signed_distance, 0.0, 1.0);
}

double ellipse_distance(double x, double y, double cx, double cy, double rx, double ry) {
  const double nx = (x - cx) / rx, ny = (y - cy) / ry;
  return (std::sqrt(nx * nx + ny * ny) - 1.0) * std::min(rx, ry);
}

double segment_distance(double x, double y, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  const double t = len2 > 0 ? std::clamp(((x - ax) * vx + (y - ay) * vy) / len2, 0.0, 1.0) : 0.0;
  const double dx = x - (ax + t * vx), dy = y - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Intensity of the face at face-frame coordinates (origin at face center).
double shade(const FaceIdentity& id, const FaceVariation& var, double fx, double fy,
             double background) {
  double v = background;

  // Hair: a slightly larger ellipse clipped to the top band.
  const double top = -id.face_half_height;
  const double hair_cov =
      coverage(ellipse_distance(fx, fy, 0, -0.5, id.face_half_width + 1.0, id.face_half_height + 1.0)) *
      std::clamp(top + id.hairline - fy + 0.5, 0.0, 1.0);
  const double face_cov =
      coverage(ellipse_distance(fx, fy, 0, 0, id.face_half_width, id.face_half_height));

  double skin = id.skin;
  for (const auto& m : id.marks) {
    const double d2 = (fx - m.x()) * (fx - m.x()) + (fy - m.y()) * (fy - m.y());
    skin += m.z() * std::exp(-d2 / 1.5);
  }

  v = v * (1.0 - face_cov) + skin * face_cov;
  v = v * (1.0 - hair_cov) + id.hair * hair_cov;

  // Eyes.
  for (double side : {-1.0, 1.0}) {
    const double ex = side * id.eye_separation, ey = -id.eye_height;
    const double ry = std::max(0.25, id.eye_radius * var.eye_open * 0.8);
    const double c = coverage(ellipse_distance(fx, fy, ex, ey, id.eye_radius, ry));
    v = v * (1.0 - c) + 0.08 * c;
    // Brow.
    const double by = ey - id.eye_radius - 1.4;
    const double tilt = side * id.brow_tilt;
    const double bd = segment_distance(fx, fy, ex - 1.6, by + tilt, ex + 1.6, by - tilt);
    const double bc = coverage(bd - 0.5);
    v = v * (1.0 - bc) + id.hair * bc;
  }

  // Nose.
  {
    const double y0 = -id.eye_height + 1.0;
    const double nd = segment_distance(fx, fy, 0.0, y0, 0.0, y0 + id.nose_length);
    const double c = coverage(nd - 0.35) * 0.6;
    v = v * (1.0 - c) + (skin - 0.25) * c;
  }

  // Mouth: a parabola bent by the smile, thickened when open.
  {
    const double half = id.mouth_width;
    if (std::abs(fx) <= half + 1.0) {
      const double u = std::clamp(fx / half, -1.0, 1.0);
      const double curve_y = id.mouth_height - var.smile * 1.6 * (1.0 - u * u);
      const double thickness = 0.45 + var.mouth_open * 1.6 * (1.0 - u * u);
      const double dy = std::abs(fy - curve_y) - thickness;
      const double dx = std::abs(fx) - half;
      const double d = std::max(dx, dy);
      const double c = coverage(d);
      v = v * (1.0 - c) + 0.12 * c;
    }
  }
  return v;
}

}  // namespace

FaceIdentity random_identity(Rng& rng) {
  FaceIdentity id;
  id.face_half_width = lerp(8.0, 11.0, rng.uniform());
  id.face_half_height = lerp(10.0, 13.0, rng.uniform());
  id.skin = lerp(0.45, 0.85, rng.uniform());
  id.hair = lerp(0.05, 0.35, rng.uniform());
  id.hairline = lerp(2.5, 5.5, rng.uniform());
  id.eye_separation = lerp(3.0, 5.0, rng.uniform());
  id.eye_height = lerp(1.5, 3.5, rng.uniform());
  id.eye_radius = lerp(0.9, 1.8, rng.uniform());
  id.brow_tilt = lerp(-0.5, 0.5, rng.uniform());
  id.nose_length = lerp(2.0, 4.5, rng.uniform());
  id.mouth_width = lerp(2.5, 5.0, rng.uniform());
  id.mouth_height = lerp(4.5, 7.0, rng.uniform());
  for (int i = 0; i < 2; ++i) {
    const double x = lerp(-0.7, 0.7, rng.uniform()) * id.face_half_width;
    const double y = lerp(-0.3, 0.7, rng.uniform()) * id.face_half_height;
    const double delta = (rng.bernoulli(0.5) ? 1.0 : -1.0) * lerp(0.15, 0.3, rng.uniform());
    id.marks.emplace_back(x, y, delta);
  }
  return id;
}

FaceVariation random_variation(Rng& rng, double strength) {
  FaceVariation v;
  const double s = strength;
  v.shift_x = lerp(-3.0, 3.0, rng.uniform()) * s;
  v.shift_y = lerp(-3.0, 3.0, rng.uniform()) * s;
  v.scale = 1.0 + lerp(-0.1, 0.1, rng.uniform()) * s;
  v.brightness = lerp(-0.15, 0.15, rng.uniform()) * s;
  v.contrast = 1.0 + lerp(-0.25, 0.25, rng.uniform()) * s;
  v.background = 0.5 + lerp(-0.3, 0.3, rng.uniform()) * s;
  v.background_gradient_x = lerp(-0.3, 0.3, rng.uniform()) * s;
  v.background_gradient_y = lerp(-0.3, 0.3, rng.uniform()) * s;
  v.noise = 0.04 * s;
  v.smile = lerp(-1.0, 1.0, rng.uniform()) * s;
  v.mouth_open = rng.bernoulli(0.5) ? rng.uniform() * s : 0.0;
  v.eye_open = 1.0 - lerp(0.0, 0.6, rng.uniform()) * s;
  v.noise_seed = static_cast<std::uint64_t>(rng.uniform_int(0, 1LL << 40));
  return v;
}

SyntheticFace render_face(const FaceIdentity& id, const FaceVariation& var, int size) {
  SyntheticFace out{Image(size, size, 1), Eigen::MatrixXd::Zero(size, size)};
  Rng noise_rng(var.noise_seed);
  const double center = 0.5 * size;
  const double unit = size / 32.0;  // geometry is authored for 32x32
  const double cx = center + var.shift_x * unit, cy = center + var.shift_y * unit;
  const double k = 1.0 / (var.scale * unit);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      // 2x2 supersampling.
      double acc = 0.0;
      for (double sy : {0.25, 0.75}) {
        for (double sx : {0.25, 0.75}) {
          const double px = x + sx, py = y + sy;
          const double bg = var.background + var.background_gradient_x * (px - center) / center +
                            var.background_gradient_y * (py - center) / center;
          acc += shade(id, var, (px - cx) * k, (py - cy) * k, bg);
        }
      }
      double v = acc / 4.0;
      v = var.contrast * (v - 0.5) + 0.5 + var.brightness;
      v += var.noise * noise_rng.normal();
      out.image.at(y, x) = std::clamp(v, 0.0, 1.0);

      const double fx = (x + 0.5 - cx) * k, fy = (y + 0.5 - cy) * k;
      const double nx = fx / id.face_half_width, ny = fy / id.face_half_height;
      out.mask(y, x) = (nx * nx + ny * ny <= 1.0) ? 1.0 : 0.0;
    }
  }
  return out;
}

std::vector<LabeledFace> make_dataset(int identities, int variations, std::uint64_t identity_seed,
                                      std::uint64_t variation_seed, double strength, int size) {
  Rng id_rng(derive_seed(identity_seed, "identities"));
  Rng var_rng(derive_seed(variation_seed, "variations"));
  std::vector<LabeledFace> out;
  out.reserve(static_cast<std::size_t>(identities) * variations);
  for (int i = 0; i < identities; ++i) {
    const FaceIdentity id = random_identity(id_rng);
    for (int j = 0; j < variations; ++j) {
      FaceVariation var = random_variation(var_rng, strength);
      out.push_back({render_face(id, var, size), i, var});
    }
  }
  return out;
}

}  // namespace f2d::synth
