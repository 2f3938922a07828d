#include "infobfr/toy_faces.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "infobfr/error.hpp"
#include "infobfr/rng.hpp"

namespace infobfr {

namespace {

using Color = std::array<float, 3>;

struct Ellipse {
  double cx, cy, rx, ry, angle = 0.0;

  // Approximate signed distance in normalized units (negative inside).
  double distance(double u, double v) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = (u - cx) * c + (v - cy) * s;
    const double dy = -(u - cx) * s + (v - cy) * c;
    const double r = std::sqrt((dx / rx) * (dx / rx) + (dy / ry) * (dy / ry));
    return (r - 1.0) * std::min(rx, ry);
  }
};

// Bilinear value noise on a coarse lattice.
class ValueNoise {
 public:
  ValueNoise(uint64_t seed, int cells) : cells_(cells), values_((cells + 1) * (cells + 1)) {
    CounterRng rng(seed);
    for (auto& v : values_) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  }

  double operator()(double u, double v) const {
    const double x = u * cells_, y = v * cells_;
    const int x0 = std::clamp(static_cast<int>(x), 0, cells_ - 1);
    const int y0 = std::clamp(static_cast<int>(y), 0, cells_ - 1);
    const double fx = x - x0, fy = y - y0;
    const double sx = fx * fx * (3 - 2 * fx), sy = fy * fy * (3 - 2 * fy);
    auto at = [&](int i, int j) { return values_[j * (cells_ + 1) + i]; };
    const double top = at(x0, y0) * (1 - sx) + at(x0 + 1, y0) * sx;
    const double bottom = at(x0, y0 + 1) * (1 - sx) + at(x0 + 1, y0 + 1) * sx;
    return top * (1 - sy) + bottom * sy;
  }

 private:
  int cells_;
  std::vector<float> values_;
};

Color random_color(CounterRng& rng, Color base, double spread) {
  Color c;
  for (int i = 0; i < 3; ++i) {
    c[i] = static_cast<float>(std::clamp(base[i] + rng.uniform(-spread, spread), 0.0, 1.0));
  }
  return c;
}

void blend(Color& dst, const Color& src, double coverage) {
  for (int i = 0; i < 3; ++i) dst[i] = static_cast<float>(dst[i] * (1 - coverage) + src[i] * coverage);
}

}  // namespace

Image generate_toy_face(uint64_t seed, int size) {
  if (size < 8) throw_invalid("toy face size must be at least 8");
  CounterRng rng(seed);

  const Color bg_top = random_color(rng, {0.55f, 0.6f, 0.7f}, 0.3);
  const Color bg_bottom = random_color(rng, {0.4f, 0.45f, 0.5f}, 0.3);
  const Color skin = random_color(rng, {0.78f, 0.6f, 0.5f}, 0.15);
  const Color hair = random_color(rng, {0.25f, 0.18f, 0.12f}, 0.15);
  const Color iris = random_color(rng, {0.3f, 0.35f, 0.35f}, 0.2);
  const Color lips = random_color(rng, {0.7f, 0.3f, 0.3f}, 0.1);
  const Color white{0.95f, 0.95f, 0.93f};
  const Color dark{0.08f, 0.06f, 0.06f};

  const double cx = 0.5 + rng.uniform(-0.05, 0.05);
  const double cy = 0.54 + rng.uniform(-0.04, 0.04);
  const double rx = rng.uniform(0.26, 0.33);
  const double ry = rng.uniform(0.34, 0.41);
  const double tilt = rng.uniform(-0.12, 0.12);
  const Ellipse head{cx, cy, rx, ry, tilt};
  const Ellipse hair_shape{cx, cy - rng.uniform(0.05, 0.1), rx * rng.uniform(1.05, 1.2),
                           ry * rng.uniform(0.95, 1.08), tilt};

  const double eye_dx = rx * rng.uniform(0.36, 0.46);
  const double eye_y = cy - ry * rng.uniform(0.12, 0.25);
  const double eye_rx = rx * rng.uniform(0.17, 0.22);
  const double eye_ry = eye_rx * rng.uniform(0.45, 0.65);
  const double iris_r = eye_ry * rng.uniform(0.8, 1.0);
  const double gaze = rng.uniform(-0.3, 0.3) * eye_rx;
  const double brow_lift = eye_ry * rng.uniform(1.6, 2.4);
  const double mouth_y = cy + ry * rng.uniform(0.42, 0.55);
  const double mouth_rx = rx * rng.uniform(0.3, 0.45);
  const double mouth_ry = ry * rng.uniform(0.05, 0.1);
  const double nose_len = ry * rng.uniform(0.18, 0.26);

  const ValueNoise coarse(derive_seed(seed, 1), 4);
  const ValueNoise fine(derive_seed(seed, 2), 16);
  const double pixel = 1.0 / size;

  std::vector<float> data(static_cast<std::size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) * pixel;
      const double v = (y + 0.5) * pixel;
      auto cover = [&](double d) { return std::clamp(0.5 - d / pixel, 0.0, 1.0); };

      Color px;
      for (int i = 0; i < 3; ++i) px[i] = static_cast<float>(bg_top[i] * (1 - v) + bg_bottom[i] * v);
      blend(px, hair, cover(hair_shape.distance(u, v)));

      Color face = skin;
      const double shade = 0.08 * coarse(u, v) - 0.1 * std::max(0.0, (u - cx) / rx);
      for (auto& ch : face) ch = static_cast<float>(std::clamp(ch + shade, 0.0, 1.0));
      blend(px, face, cover(head.distance(u, v)));

      for (int side = -1; side <= 1; side += 2) {
        const double ex = cx + side * eye_dx;
        blend(px, white, cover(Ellipse{ex, eye_y, eye_rx, eye_ry}.distance(u, v)));
        blend(px, iris, cover(Ellipse{ex + gaze, eye_y, iris_r, iris_r}.distance(u, v)));
        blend(px, dark, cover(Ellipse{ex + gaze, eye_y, iris_r * 0.45, iris_r * 0.45}.distance(u, v)));
        blend(px, hair,
              cover(Ellipse{ex, eye_y - brow_lift, eye_rx * 1.1, eye_ry * 0.28, side * 0.15}.distance(u, v)));
      }
      const Ellipse nose{cx, eye_y + nose_len, rx * 0.06, nose_len * 0.6};
      Color nose_shade = face;
      for (auto& ch : nose_shade) ch *= 0.85f;
      blend(px, nose_shade, cover(nose.distance(u, v)));

      const double mouth_outer = Ellipse{cx, mouth_y, mouth_rx, mouth_ry * 2.0}.distance(u, v);
      const double mouth_inner = Ellipse{cx, mouth_y - mouth_ry * 1.2, mouth_rx * 1.05, mouth_ry * 2.2}.distance(u, v);
      blend(px, lips, cover(mouth_outer) * (1.0 - cover(mouth_inner)));

      const double grain = 0.02 * fine(u, v);
      for (int i = 0; i < 3; ++i) {
        data[(static_cast<std::size_t>(y) * size + x) * 3 + i] = static_cast<float>(px[i] + grain);
      }
    }
  }
  return make_clamped_image(size, size, 3, std::move(data));
}

void write_toy_set(const std::filesystem::path& dir, int count, int size, uint64_t seed) {
  if (count < 1) throw_invalid("toy set count must be positive");
  std::filesystem::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "face_%05d.png", i);
    save_image(generate_toy_face(derive_seed(seed, static_cast<uint64_t>(i)), size), dir / name);
  }
}

}  // namespace infobfr
