#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stlpd/geom.hpp"
#include "stlpd/rng.hpp"

namespace stlpd {

// Interleaved RGB, values in [0,1].
struct Image {
  int width = 0, height = 0;
  std::vector<float> pix;

  static Image filled(int w, int h, float v = 0.0f) {
    Image im;
    im.width = w;
    im.height = h;
    im.pix.assign(size_t(w) * h * 3, v);
    return im;
  }
  float& at(int y, int x, int c) { return pix[size_t((y * width + x) * 3 + c)]; }
  float at(int y, int x, int c) const { return pix[size_t((y * width + x) * 3 + c)]; }
};

struct Sample {
  Image image;
  BoxXYXY gt_box;
  Quad gt_quad;
  std::string tag;
  uint64_t source_id = 0;
};

// ---------------------------------------------------------------------------
// Presets: qualitative stand-ins for the CCPD split conditions.
// ---------------------------------------------------------------------------

struct Preset {
  std::string name;
  float rot_min = 0, rot_max = 5;        // rotation magnitude, degrees
  float shear_min = 0, shear_max = 0.05f;  // perspective foreshortening
  float blur_min = 0, blur_max = 0.5f;   // gaussian sigma, px
  float gain_min = 0.9f, gain_max = 1.1f;
  float scale_min = 0.40f, scale_max = 0.65f;  // plate width / image width
  float noise_min = 0, noise_max = 0.02f;
};

inline const std::vector<Preset>& all_presets() {
  static const std::vector<Preset> presets = [] {
    Preset base;
    base.name = "base";
    Preset rotate = base;
    rotate.name = "rotate";
    rotate.rot_min = 20;
    rotate.rot_max = 50;
    Preset tilt = base;
    tilt.name = "tilt";
    tilt.shear_min = 0.2f;
    tilt.shear_max = 0.5f;
    Preset weather = base;
    weather.name = "weather";
    weather.blur_min = 1.0f;
    weather.blur_max = 2.0f;
    weather.noise_min = 0.03f;
    weather.noise_max = 0.08f;
    Preset fn = base;
    fn.name = "fn";
    fn.scale_min = 0.08f;
    fn.scale_max = 0.5f;
    Preset db = base;
    db.name = "db";
    db.gain_min = 0.4f;
    db.gain_max = 1.8f;
    Preset challenge;
    challenge.name = "challenge";
    challenge.rot_min = 0;
    challenge.rot_max = 50;
    challenge.shear_min = 0;
    challenge.shear_max = 0.5f;
    challenge.blur_min = 0;
    challenge.blur_max = 2.0f;
    challenge.gain_min = 0.4f;
    challenge.gain_max = 1.8f;
    challenge.scale_min = 0.08f;
    challenge.scale_max = 0.65f;
    challenge.noise_min = 0;
    challenge.noise_max = 0.08f;
    return std::vector<Preset>{base, rotate, tilt, weather, fn, db, challenge};
  }();
  return presets;
}

inline const Preset& preset_by_name(const std::string& name) {
  std::string known;
  for (const auto& p : all_presets()) {
    if (p.name == name) return p;
    known += (known.empty() ? "" : ", ") + p.name;
  }
  throw std::invalid_argument("unknown preset '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// Synthetic scene generation
// ---------------------------------------------------------------------------

namespace detail {

// Homography mapping the quad (TL,TR,BR,BL) onto the rect [0,w]x[0,h],
// solved from the four correspondences by Gaussian elimination.
struct Homography {
  std::array<double, 9> m{};  // row-major, maps (x,y,1)

  std::array<double, 2> apply(double x, double y) const {
    const double d = m[6] * x + m[7] * y + m[8];
    return {(m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d};
  }
};

inline Homography quad_to_rect(const Quad& q, double w, double h) {
  const std::array<std::array<double, 2>, 4> dst{{{0, 0}, {w, 0}, {w, h}, {0, h}}};
  double a[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    const double sx = q.p[size_t(i)][0], sy = q.p[size_t(i)][1];
    const double dx = dst[size_t(i)][0], dy = dst[size_t(i)][1];
    double* r0 = a[2 * i];
    double* r1 = a[2 * i + 1];
    r0[0] = sx; r0[1] = sy; r0[2] = 1; r0[6] = -dx * sx; r0[7] = -dx * sy; r0[8] = dx;
    r1[3] = sx; r1[4] = sy; r1[5] = 1; r1[6] = -dy * sx; r1[7] = -dy * sy; r1[8] = dy;
  }
  // Solve the 8x8 system with partial pivoting.
  for (int col = 0; col < 8; ++col) {
    int piv = col;
    for (int r = col + 1; r < 8; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    for (int j = 0; j < 9; ++j) std::swap(a[col][j], a[piv][j]);
    if (std::fabs(a[col][col]) < 1e-12) throw std::runtime_error("degenerate quad homography");
    for (int r = 0; r < 8; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (int j = col; j < 9; ++j) a[r][j] -= f * a[col][j];
    }
  }
  Homography hg;
  for (int i = 0; i < 8; ++i) hg.m[size_t(i)] = a[i][8] / a[i][i];
  hg.m[8] = 1.0;
  return hg;
}

struct PlateTexture {
  double w = 0, h = 0;
  float base_r = 0.85f, base_g = 0.85f, base_b = 0.88f;
  float ink = 0.1f;
  std::array<double, 6> stroke_u{};  // stroke centers in [0,w]
  double stroke_half_w = 0;

  // Color at plate coordinates; border frame and glyph-like strokes are dark.
  void color_at(double u, double v, float out[3]) const {
    const double border = 0.07 * h;
    if (u < border || u > w - border || v < border || v > h - border) {
      out[0] = out[1] = out[2] = ink * 0.8f;
      return;
    }
    for (double su : stroke_u)
      if (std::fabs(u - su) < stroke_half_w && v > 0.25 * h && v < 0.78 * h) {
        out[0] = out[1] = out[2] = ink;
        return;
      }
    out[0] = base_r;
    out[1] = base_g;
    out[2] = base_b;
  }
};

inline void gaussian_blur(Image& im, float sigma) {
  if (sigma < 0.05f) return;
  const int radius = std::max(1, int(std::ceil(2.5f * sigma)));
  std::vector<float> kernel(size_t(2 * radius + 1));
  float sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5f * float(i) * float(i) / (sigma * sigma));
    sum += kernel[size_t(i + radius)];
  }
  for (auto& k : kernel) k /= sum;
  Image tmp = im;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[size_t(i + radius)] * im.at(y, std::clamp(x + i, 0, im.width - 1), c);
        tmp.at(y, x, c) = acc;
      }
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[size_t(i + radius)] * tmp.at(std::clamp(y + i, 0, im.height - 1), x, c);
        im.at(y, x, c) = acc;
      }
}

}  // namespace detail

// Deterministic synthetic plate scene. Callers derive the per-sample seed as
// hash_combine(global_seed, sample_index).
inline Sample synth_sample(const Preset& preset, uint64_t seed, int size) {
  if (size <= 0 || size % 32 != 0)
    throw std::invalid_argument("synth_sample: size must be a positive multiple of 32");
  Rng rng(hash_combine(seed, 0x73796e7468ull));

  Quad quad;
  float pw = 0, ph = 0;
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    pw = rng.uniform(preset.scale_min, preset.scale_max) * float(size);
    ph = pw / 2.5f;
    const float rot = rng.uniform(preset.rot_min, preset.rot_max) * (rng.coin() ? 1.f : -1.f) *
                      3.14159265358979f / 180.0f;
    const float shear = rng.uniform(preset.shear_min, preset.shear_max) * (rng.coin() ? 1.f : -1.f);
    const bool shear_horizontal = rng.coin();
    const float cx = rng.uniform(0.3f, 0.7f) * float(size);
    const float cy = rng.uniform(0.3f, 0.7f) * float(size);
    const std::array<std::array<float, 2>, 4> base{
        {{-pw / 2, -ph / 2}, {pw / 2, -ph / 2}, {pw / 2, ph / 2}, {-pw / 2, ph / 2}}};
    Quad q;
    bool ok = true;
    for (int i = 0; i < 4; ++i) {
      float x = base[size_t(i)][0], y = base[size_t(i)][1];
      if (shear_horizontal)
        y *= 1.0f + shear * x / (pw / 2);
      else
        x *= 1.0f + shear * y / (ph / 2);
      const float rx = std::cos(rot) * x - std::sin(rot) * y + cx;
      const float ry = std::sin(rot) * x + std::cos(rot) * y + cy;
      if (rx < 1.0f || rx > float(size) - 1.0f || ry < 1.0f || ry > float(size) - 1.0f) ok = false;
      q.p[size_t(i)] = {rx, ry};
    }
    if (!ok) continue;
    quad = canonicalize_quad(q);
    placed = true;
  }
  if (!placed) throw std::runtime_error("synth_sample: could not place the plate in 100 tries");

  Sample s;
  s.tag = preset.name;
  s.source_id = seed;
  s.gt_quad = quad;
  s.gt_box = quad_to_aabb(quad);
  s.image = Image::filled(size, size, 0.0f);

  // Smoothed value-noise background.
  const int grid = size / 8 + 2;
  std::vector<float> cells(size_t(grid) * grid * 3);
  for (int i = 0; i < grid * grid; ++i) {
    const float g = rng.uniform(0.15f, 0.55f);
    for (int c = 0; c < 3; ++c) cells[size_t(i * 3 + c)] = g + rng.uniform(-0.06f, 0.06f);
  }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float gx = float(x) / 8.0f, gy = float(y) / 8.0f;
      const int x0 = int(gx), y0 = int(gy);
      const float fx = gx - float(x0), fy = gy - float(y0);
      for (int c = 0; c < 3; ++c) {
        const auto cell = [&](int yy, int xx) { return cells[size_t((yy * grid + xx) * 3 + c)]; };
        const float top = cell(y0, x0) * (1 - fx) + cell(y0, x0 + 1) * fx;
        const float bot = cell(y0 + 1, x0) * (1 - fx) + cell(y0 + 1, x0 + 1) * fx;
        s.image.at(y, x, c) = top * (1 - fy) + bot * fy;
      }
    }

  // Plate texture, mapped through the quad's homography, 2x2 supersampled.
  detail::PlateTexture tex;
  tex.w = pw;
  tex.h = ph;
  tex.base_r = rng.uniform(0.78f, 0.92f);
  tex.base_g = tex.base_r + rng.uniform(-0.04f, 0.02f);
  tex.base_b = tex.base_r + rng.uniform(-0.02f, 0.06f);
  tex.ink = rng.uniform(0.04f, 0.18f);
  tex.stroke_half_w = 0.028 * pw;
  for (int i = 0; i < 6; ++i)
    tex.stroke_u[size_t(i)] = (0.16 + 0.12 * i + rng.uniform(-0.025f, 0.025f)) * pw;
  const detail::Homography hg = detail::quad_to_rect(quad, pw, ph);
  const BoxXYXY hull = s.gt_box;
  const int x0 = std::max(0, int(hull.x1) - 1), x1 = std::min(size - 1, int(hull.x2) + 1);
  const int y0 = std::max(0, int(hull.y1) - 1), y1 = std::min(size - 1, int(hull.y2) + 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      float acc[3] = {0, 0, 0};
      int covered = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const auto uv = hg.apply(x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
          if (uv[0] < 0 || uv[0] > pw || uv[1] < 0 || uv[1] > ph) continue;
          float col[3];
          tex.color_at(uv[0], uv[1], col);
          for (int c = 0; c < 3; ++c) acc[c] += col[c];
          ++covered;
        }
      if (covered == 0) continue;
      const float frac = float(covered) / 4.0f;
      for (int c = 0; c < 3; ++c)
        s.image.at(y, x, c) = (1 - frac) * s.image.at(y, x, c) + acc[c] / float(covered) * frac;
    }

  detail::gaussian_blur(s.image, rng.uniform(preset.blur_min, preset.blur_max));
  const float gain = rng.uniform(preset.gain_min, preset.gain_max);
  const float noise = rng.uniform(preset.noise_min, preset.noise_max);
  for (auto& v : s.image.pix)
    v = std::clamp(v * gain + rng.uniform(-noise, noise), 0.0f, 1.0f);
  return s;
}

// ---------------------------------------------------------------------------
// Training-time augmentation: horizontal flip (p=0.5) + brightness jitter.
// ---------------------------------------------------------------------------

inline Sample flip_horizontal(const Sample& in) {
  Sample out = in;
  const int w = in.image.width;
  for (int y = 0; y < in.image.height; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = in.image.at(y, w - 1 - x, c);
  out.gt_box = {float(w) - in.gt_box.x2, in.gt_box.y1, float(w) - in.gt_box.x1, in.gt_box.y2};
  Quad q = in.gt_quad;
  for (auto& pt : q.p) pt[0] = float(w) - pt[0];
  out.gt_quad = canonicalize_quad(q);
  return out;
}

inline void apply_gain(Sample& s, float gain) {
  for (auto& v : s.image.pix) v = std::clamp(v * gain, 0.0f, 1.0f);
}

inline Sample augment(const Sample& in, uint64_t seed) {
  Rng rng(hash_combine(seed, 0x6175676dull));
  Sample out = rng.coin() ? flip_horizontal(in) : in;
  apply_gain(out, 1.0f + rng.uniform(-0.1f, 0.1f));
  return out;
}

// ---------------------------------------------------------------------------
// CCPD filename annotations
// ---------------------------------------------------------------------------

struct CcpdParseError : std::runtime_error {
  size_t offset;
  CcpdParseError(const std::string& msg, size_t off)
      : std::runtime_error(msg + " (byte " + std::to_string(off) + ")"), offset(off) {}
};

// A numeric token plus its zero-padded width, so serialization is exact.
struct CcpdTok {
  int value = 0;
  int width = 0;

  std::string text() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%0*d", width, value);
    return buf;
  }
};

struct CcpdAnnotation {
  CcpdTok area;                            // area-ratio token; ratio = value/1000
  std::array<CcpdTok, 2> tilt;             // horizontal, vertical degrees
  std::array<CcpdTok, 4> bbox;             // x1,y1,x2,y2
  std::array<CcpdTok, 8> vertices;         // as stored in the filename
  std::vector<CcpdTok> plate_codes;
  CcpdTok brightness;
  CcpdTok blurriness;
  int canonical_rotation = 0;              // stored order -> canonical order offset

  float area_ratio() const { return float(area.value) / 1000.0f; }

  Quad raw_quad() const {
    Quad q;
    for (int i = 0; i < 4; ++i)
      q.p[size_t(i)] = {float(vertices[size_t(2 * i)].value),
                        float(vertices[size_t(2 * i + 1)].value)};
    return q;
  }
  Quad quad() const { return canonicalize_quad(raw_quad()); }
};

namespace detail {

struct CcpdCursor {
  const std::string& s;
  size_t pos = 0;

  char peek() const { return pos < s.size() ? s[pos] : '\0'; }
  void expect(char c, const char* what) {
    if (peek() != c) throw CcpdParseError(std::string("expected '") + c + "' " + what, pos);
    ++pos;
  }
  CcpdTok number(const char* what) {
    const size_t start = pos;
    long long v = 0;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
      v = v * 10 + (s[pos] - '0');
      if (v > 2000000000ll) throw CcpdParseError(std::string("number too large in ") + what, start);
      ++pos;
    }
    if (pos == start) throw CcpdParseError(std::string("expected a number in ") + what, pos);
    return {int(v), int(pos - start)};
  }
};

}  // namespace detail

inline CcpdAnnotation parse_ccpd_name(const std::string& name) {
  detail::CcpdCursor c{name};
  CcpdAnnotation a;
  a.area = c.number("area");
  c.expect('-', "after area");
  a.tilt[0] = c.number("tilt");
  c.expect('_', "between tilt angles");
  a.tilt[1] = c.number("tilt");
  c.expect('-', "after tilt");
  a.bbox[0] = c.number("bbox");
  c.expect('&', "in bbox point");
  a.bbox[1] = c.number("bbox");
  c.expect('_', "between bbox points");
  a.bbox[2] = c.number("bbox");
  c.expect('&', "in bbox point");
  a.bbox[3] = c.number("bbox");
  c.expect('-', "after bbox");
  for (int i = 0; i < 4; ++i) {
    if (i) c.expect('_', "between vertices");
    a.vertices[size_t(2 * i)] = c.number("vertex");
    c.expect('&', "in vertex");
    a.vertices[size_t(2 * i + 1)] = c.number("vertex");
  }
  c.expect('-', "after vertices");
  a.plate_codes.push_back(c.number("plate code"));
  while (c.peek() == '_') {
    ++c.pos;
    a.plate_codes.push_back(c.number("plate code"));
  }
  c.expect('-', "after plate codes");
  a.brightness = c.number("brightness");
  c.expect('-', "after brightness");
  a.blurriness = c.number("blurriness");
  for (char ch : {'.', 'j', 'p', 'g'}) c.expect(ch, "in extension");
  if (c.pos != name.size()) throw CcpdParseError("trailing characters", c.pos);

  // Record how far the stored vertex order is rotated from canonical order.
  const Quad raw = a.raw_quad();
  const Quad canon = canonicalize_quad(raw);
  for (int r = 0; r < 4; ++r)
    if (raw.p[size_t(r)] == canon.p[0]) a.canonical_rotation = r;
  return a;
}

inline std::string serialize_ccpd_name(const CcpdAnnotation& a) {
  std::string out = a.area.text() + "-" + a.tilt[0].text() + "_" + a.tilt[1].text() + "-" +
                    a.bbox[0].text() + "&" + a.bbox[1].text() + "_" + a.bbox[2].text() + "&" +
                    a.bbox[3].text() + "-";
  for (int i = 0; i < 4; ++i) {
    if (i) out += "_";
    out += a.vertices[size_t(2 * i)].text() + "&" + a.vertices[size_t(2 * i + 1)].text();
  }
  out += "-";
  for (size_t i = 0; i < a.plate_codes.size(); ++i) {
    if (i) out += "_";
    out += a.plate_codes[i].text();
  }
  out += "-" + a.brightness.text() + "-" + a.blurriness.text() + ".jpg";
  return out;
}

// ---------------------------------------------------------------------------
// PPM P6 image files (8-bit, maxval 255)
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Image& im) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << im.width << " " << im.height << "\n255\n";
  std::vector<unsigned char> bytes(im.pix.size());
  for (size_t i = 0; i < im.pix.size(); ++i)
    bytes[i] = (unsigned char)std::clamp(int(std::lround(im.pix[i] * 255.0f)), 0, 255);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("write_ppm: short write to " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (f.get(ch)) {
      if (ch == '#') {  // comment to end of line
        while (f.get(ch) && ch != '\n') {}
        continue;
      }
      if (std::isspace((unsigned char)ch)) {
        if (!t.empty()) break;
        continue;
      }
      t += ch;
    }
    return t;
  };
  if (token() != "P6") throw std::runtime_error("read_ppm: bad magic in " + path);
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw std::runtime_error("read_ppm: malformed header in " + path);
  }
  if (w <= 0 || h <= 0) throw std::runtime_error("read_ppm: bad dimensions in " + path);
  if (maxval != 255) throw std::runtime_error("read_ppm: maxval must be 255 in " + path);
  std::vector<unsigned char> bytes(size_t(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
  if (f.gcount() != std::streamsize(bytes.size()))
    throw std::runtime_error("read_ppm: truncated payload in " + path);
  Image im = Image::filled(w, h);
  for (size_t i = 0; i < bytes.size(); ++i) im.pix[i] = float(bytes[i]) / 255.0f;
  return im;
}

// ---------------------------------------------------------------------------
// Dataset index TSV
// ---------------------------------------------------------------------------

constexpr const char* kIndexHeader = "#stlpd-index v1";

struct IndexEntry {
  std::string path;
  BoxXYXY box;
  Quad quad;
  std::string tag;
};

inline void write_index(const std::string& dir, const std::vector<IndexEntry>& entries) {
  const std::string path = dir + "/index.tsv";
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_index: cannot open " + path);
  f << kIndexHeader << "\n";
  for (const auto& e : entries) {
    f << e.path << "\t" << e.box.x1 << "," << e.box.y1 << "," << e.box.x2 << "," << e.box.y2
      << "\t";
    for (int i = 0; i < 4; ++i)
      f << (i ? "," : "") << e.quad.p[size_t(i)][0] << "," << e.quad.p[size_t(i)][1];
    f << "\t" << e.tag << "\n";
  }
  if (!f) throw std::runtime_error("write_index: short write to " + path);
}

inline std::vector<IndexEntry> read_index(const std::string& dir) {
  const std::string path = dir + "/index.tsv";
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_index: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != kIndexHeader)
    throw std::runtime_error("read_index: version mismatch in " + path + " (want '" +
                             kIndexHeader + "')");
  std::vector<IndexEntry> out;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    IndexEntry e;
    std::string boxs, quads;
    if (!std::getline(ls, e.path, '\t') || !std::getline(ls, boxs, '\t') ||
        !std::getline(ls, quads, '\t') || !std::getline(ls, e.tag))
      throw std::runtime_error("read_index: malformed row " + std::to_string(row));
    auto floats = [&](const std::string& s, size_t n, float* dst) {
      std::istringstream ss(s);
      std::string tok;
      for (size_t i = 0; i < n; ++i) {
        if (!std::getline(ss, tok, ','))
          throw std::runtime_error("read_index: malformed row " + std::to_string(row));
        try {
          dst[i] = std::stof(tok);
        } catch (const std::exception&) {
          throw std::runtime_error("read_index: malformed row " + std::to_string(row));
        }
      }
      if (std::getline(ss, tok, ','))
        throw std::runtime_error("read_index: malformed row " + std::to_string(row));
    };
    float b[4], q[8];
    floats(boxs, 4, b);
    floats(quads, 8, q);
    e.box = {b[0], b[1], b[2], b[3]};
    for (int i = 0; i < 4; ++i) e.quad.p[size_t(i)] = {q[2 * i], q[2 * i + 1]};
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation drawing (box outline + corner crosses), used by `detect`.
// ---------------------------------------------------------------------------

inline void draw_box(Image& im, const BoxXYXY& b, float r, float g, float bl, int thickness = 2) {
  const int x1 = std::clamp(int(b.x1), 0, im.width - 1);
  const int y1 = std::clamp(int(b.y1), 0, im.height - 1);
  const int x2 = std::clamp(int(b.x2), 0, im.width - 1);
  const int y2 = std::clamp(int(b.y2), 0, im.height - 1);
  auto put = [&](int y, int x) {
    if (x < 0 || x >= im.width || y < 0 || y >= im.height) return;
    im.at(y, x, 0) = r;
    im.at(y, x, 1) = g;
    im.at(y, x, 2) = bl;
  };
  for (int t = 0; t < thickness; ++t)
    for (int x = x1; x <= x2; ++x) {
      put(y1 + t, x);
      put(y2 - t, x);
    }
  for (int t = 0; t < thickness; ++t)
    for (int y = y1; y <= y2; ++y) {
      put(y, x1 + t);
      put(y, x2 - t);
    }
}

inline void draw_cross(Image& im, float cx, float cy, float r, float g, float b, int arm = 3) {
  const int x = int(std::lround(cx)), y = int(std::lround(cy));
  auto put = [&](int yy, int xx) {
    if (xx < 0 || xx >= im.width || yy < 0 || yy >= im.height) return;
    im.at(yy, xx, 0) = r;
    im.at(yy, xx, 1) = g;
    im.at(yy, xx, 2) = b;
  };
  for (int d = -arm; d <= arm; ++d) {
    put(y, x + d);
    put(y + d, x);
  }
}

}  // namespace stlpd
