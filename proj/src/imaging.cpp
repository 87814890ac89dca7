#include "rainkit/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "rainkit/png_io.hpp"
#include "rainkit/rng.hpp"

namespace rainkit::imaging {

namespace fs = std::filesystem;
using nlohmann::json;

ImageBuffer ImageBuffer::create(int h, int w, int c, double fill) {
  if (h <= 0 || w <= 0 || c <= 0) {
    throw std::invalid_argument("ImageBuffer: dimensions must be positive");
  }
  ImageBuffer img;
  img.height = h;
  img.width = w;
  img.channels = c;
  img.pixels.assign(static_cast<std::size_t>(h) * w * c, std::clamp(fill, 0.0, 1.0));
  return img;
}

void ImageBuffer::clamp01() {
  for (double& p : pixels) p = std::clamp(p, 0.0, 1.0);
}

namespace {

void check_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - c;
    k[static_cast<std::size_t>(i)] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Valid-mode separable convolution of one plane: horizontal then vertical.
std::vector<double> conv_valid(const std::vector<double>& plane, int h, int w,
                               const std::vector<double>& kernel) {
  const int n = static_cast<int>(kernel.size());
  const int ow = w - n + 1;
  const int oh = h - n + 1;
  std::vector<double> horiz(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += kernel[static_cast<std::size_t>(i)] * plane[static_cast<std::size_t>(y) * w + x + i];
      horiz[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += kernel[static_cast<std::size_t>(i)] * horiz[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& params) {
  check_same_shape(a, b, "ssim");
  if (params.window_size <= 0 || params.window_size % 2 == 0) {
    throw std::invalid_argument("ssim: window_size must be odd and positive");
  }
  if (params.gaussian_sigma <= 0.0 || params.dynamic_range <= 0.0) {
    throw std::invalid_argument("ssim: sigma and dynamic_range must be positive");
  }
  if (a.height < params.window_size || a.width < params.window_size) {
    throw std::invalid_argument("ssim: image smaller than the window");
  }

  const int n = params.window_size;
  const int h = a.height, w = a.width;
  const int oh = h - n + 1, ow = w - n + 1;
  const auto kernel = gaussian_kernel(n, params.gaussian_sigma);
  const double c1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
  const double c2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);

  double total = 0.0;
  std::vector<double> pa(static_cast<std::size_t>(h) * w), pb(pa.size()), paa(pa.size()),
      pbb(pa.size()), pab(pa.size());
  for (int c = 0; c < a.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double va = a.at(y, x, c);
        const double vb = b.at(y, x, c);
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        pa[i] = va;
        pb[i] = vb;
        paa[i] = va * va;
        pbb[i] = vb * vb;
        pab[i] = va * vb;
      }
    }
    const auto mu_a = conv_valid(pa, h, w, kernel);
    const auto mu_b = conv_valid(pb, h, w, kernel);
    const auto e_aa = conv_valid(paa, h, w, kernel);
    const auto e_bb = conv_valid(pbb, h, w, kernel);
    const auto e_ab = conv_valid(pab, h, w, kernel);
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = e_aa[i] - ma * ma;
      const double vb = e_bb[i] - mb * mb;
      const double cab = e_ab[i] - ma * mb;
      const double num = (2.0 * ma * mb + c1) * (2.0 * cab + c2);
      const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
      total += num / den;
    }
  }
  return total / (static_cast<double>(oh) * ow * a.channels);
}

double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  check_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

ImageBuffer resize_bilinear(const ImageBuffer& src, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) {
    throw std::invalid_argument("resize_bilinear: output dimensions must be positive");
  }
  ImageBuffer out = ImageBuffer::create(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1.0 - wx) + src.at(y0, x1, c) * wx;
        const double bot = src.at(y1, x0, c) * (1.0 - wx) + src.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

const char* to_string(DegradationKind kind) {
  switch (kind) {
    case DegradationKind::DRS: return "DRS";
    case DegradationKind::DRD: return "DRD";
    case DegradationKind::NRS: return "NRS";
    case DegradationKind::NRD: return "NRD";
  }
  throw std::logic_error("unknown degradation kind");
}

DegradationKind degradation_from_string(const std::string& name) {
  if (name == "DRS") return DegradationKind::DRS;
  if (name == "DRD") return DegradationKind::DRD;
  if (name == "NRS") return DegradationKind::NRS;
  if (name == "NRD") return DegradationKind::NRD;
  throw std::invalid_argument("unknown degradation type: " + name);
}

ImageBuffer synth_clean(std::uint64_t rng_seed, int size) {
  if (size < 8) throw std::invalid_argument("synth_clean: size must be >= 8");
  Rng rng(derive_seed(rng_seed, 0x5C));
  ImageBuffer img = ImageBuffer::create(size, size, 3);

  double c0[3], c1[3];
  for (double& v : c0) v = rng.uniform();
  for (double& v : c1) v = rng.uniform();
  const double angle = rng.uniform(0.0, 3.141592653589793);
  const double dy = std::sin(angle), dx = std::cos(angle);

  const double amp = rng.uniform(0.03, 0.12);
  const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
  const double ph1 = rng.uniform(0.0, 6.283185307179586);
  const double ph2 = rng.uniform(0.0, 6.283185307179586);

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / (size - 1);
      const double v = static_cast<double>(y) / (size - 1);
      // Projection along the gradient direction, mapped to [0, 1].
      const double t = std::clamp(0.5 + 0.5 * ((u - 0.5) * dx + (v - 0.5) * dy) * 2.0, 0.0, 1.0);
      const double ripple = amp * std::sin(6.283185307179586 * fx * u + ph1) *
                            std::cos(6.283185307179586 * fy * v + ph2);
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = c0[c] * (1.0 - t) + c1[c] * t + ripple;
      }
    }
  }

  const int shapes = rng.uniform_int(3, 6);
  for (int s = 0; s < shapes; ++s) {
    const bool disk = rng.uniform_int(0, 1) == 1;
    const double cy = rng.uniform(0.0, size - 1.0);
    const double cx = rng.uniform(0.0, size - 1.0);
    const double r = rng.uniform(size / 10.0, size / 4.0);
    double col[3];
    for (double& v : col) v = rng.uniform();
    const double opacity = rng.uniform(0.5, 0.9);
    const int y0 = std::max(0, static_cast<int>(cy - r) - 1);
    const int y1 = std::min(size - 1, static_cast<int>(cy + r) + 1);
    const int x0 = std::max(0, static_cast<int>(cx - r) - 1);
    const int x1 = std::min(size - 1, static_cast<int>(cx + r) + 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        double cover;
        if (disk) {
          const double d = std::hypot(y - cy, x - cx);
          cover = std::clamp(r - d + 0.5, 0.0, 1.0);  // 1px soft edge
        } else {
          cover = (std::abs(y - cy) <= r && std::abs(x - cx) <= r) ? 1.0 : 0.0;
        }
        if (cover <= 0.0) continue;
        const double al = opacity * cover;
        for (int c = 0; c < 3; ++c) {
          img.at(y, x, c) = img.at(y, x, c) * (1.0 - al) + col[c] * al;
        }
      }
    }
  }
  img.clamp01();
  return img;
}

namespace {

struct Streak {
  double sy, sx, len, boost;
};
struct Disk {
  double cy, cx, r, tint, lift;
};
struct Glow {
  double cy, cx, sigma, amp;
};

// Anti-aliased additive line segment with a hat-profile cross-section.
void draw_streak(ImageBuffer& img, const Streak& s, double dy, double dx, double scale) {
  const double ey = s.sy + s.len * dy;
  const double ex = s.sx + s.len * dx;
  const double thickness = 0.9;
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.sy, ey) - thickness)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(std::max(s.sy, ey) + thickness)));
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.sx, ex) - thickness)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(std::max(s.sx, ex) + thickness)));
  const double add = s.boost * scale;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double py = y - s.sy, px = x - s.sx;
      const double t = std::clamp(py * dy + px * dx, 0.0, s.len);
      const double d = std::hypot(py - t * dy, px - t * dx);
      const double cover = std::max(0.0, 1.0 - d / thickness);
      if (cover <= 0.0) continue;
      for (int c = 0; c < img.channels; ++c) img.at(y, x, c) += add * cover;
    }
  }
}

ImageBuffer box_blur(const ImageBuffer& src, int radius, int passes) {
  ImageBuffer cur = src;
  for (int p = 0; p < passes; ++p) {
    ImageBuffer next = cur;
    for (int y = 0; y < cur.height; ++y) {
      for (int x = 0; x < cur.width; ++x) {
        for (int c = 0; c < cur.channels; ++c) {
          double acc = 0.0;
          int cnt = 0;
          for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= cur.height || xx < 0 || xx >= cur.width) continue;
              acc += cur.at(yy, xx, c);
              cnt += 1;
            }
          }
          next.at(y, x, c) = acc / cnt;
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

void draw_disk(ImageBuffer& img, const ImageBuffer& blurred, const Disk& d, double strength) {
  const int y0 = std::max(0, static_cast<int>(d.cy - d.r) - 2);
  const int y1 = std::min(img.height - 1, static_cast<int>(d.cy + d.r) + 2);
  const int x0 = std::max(0, static_cast<int>(d.cx - d.r) - 2);
  const int x1 = std::min(img.width - 1, static_cast<int>(d.cx + d.r) + 2);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dist = std::hypot(y - d.cy, x - d.cx);
      // Soft edge over a 1.5px band.
      const double m = std::clamp((d.r - dist) / 1.5 + 0.5, 0.0, 1.0) * strength;
      if (m <= 0.0) continue;
      for (int c = 0; c < img.channels; ++c) {
        const double refr = blurred.at(y, x, c) * d.tint + d.lift;
        img.at(y, x, c) = img.at(y, x, c) * (1.0 - m) + refr * m;
      }
    }
  }
}

void draw_glow(ImageBuffer& img, const Glow& g, double scale) {
  const double reach = g.sigma * 3.0;
  const int y0 = std::max(0, static_cast<int>(g.cy - reach) - 1);
  const int y1 = std::min(img.height - 1, static_cast<int>(g.cy + reach) + 1);
  const int x0 = std::max(0, static_cast<int>(g.cx - reach) - 1);
  const int x1 = std::min(img.width - 1, static_cast<int>(g.cx + reach) + 1);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d2 = (y - g.cy) * (y - g.cy) + (x - g.cx) * (x - g.cx);
      const double v = g.amp * scale * std::exp(-d2 / (2.0 * g.sigma * g.sigma));
      for (int c = 0; c < img.channels; ++c) img.at(y, x, c) += v;
    }
  }
}

int element_count(double intensity, int max_at_full) {
  return static_cast<int>(std::lround(intensity * max_at_full));
}

}  // namespace

ImageBuffer degrade(const ImageBuffer& clean, const DegradationSpec& spec) {
  if (!(spec.intensity > 0.0 && spec.intensity <= 1.0)) {
    throw std::invalid_argument("degrade: intensity must be in (0, 1]");
  }
  Rng rng(derive_seed(spec.rng_seed, 0xDE6));
  ImageBuffer out = clean;
  const double intensity = spec.intensity;
  // Element opacities scale with intensity; counts do as well.
  const double opacity = 0.4 + 0.6 * intensity;
  const double night_scale = 1.0 - 0.6 * intensity;  // 0.4x at full intensity
  const double sz = static_cast<double>(clean.height);

  switch (spec.kind) {
    case DegradationKind::DRS: {
      // All streaks in one image share an angle (measured from vertical).
      const double angle = rng.uniform(0.6, 1.0);
      const double dy = std::cos(angle), dx = std::sin(angle);
      const int max_streaks = 40;
      std::vector<Streak> streaks;
      streaks.reserve(max_streaks);
      for (int i = 0; i < max_streaks; ++i) {
        Streak s;
        s.sy = rng.uniform(-0.2 * sz, 0.9 * sz);
        s.sx = rng.uniform(-0.2 * sz, 1.0 * sz);
        s.len = rng.uniform(0.2 * sz, 0.55 * sz);
        s.boost = rng.uniform(0.25, 0.50);
        streaks.push_back(s);
      }
      const int count = element_count(intensity, max_streaks);
      for (int i = 0; i < count; ++i) draw_streak(out, streaks[static_cast<std::size_t>(i)], dy, dx, opacity);
      break;
    }
    case DegradationKind::DRD: {
      const int max_disks = 12;
      std::vector<Disk> disks;
      disks.reserve(max_disks);
      for (int i = 0; i < max_disks; ++i) {
        Disk d;
        d.cy = rng.uniform(0.1 * sz, 0.9 * sz);
        d.cx = rng.uniform(0.1 * sz, 0.9 * sz);
        d.r = rng.uniform(0.06 * sz, 0.16 * sz);
        d.tint = rng.uniform(0.80, 1.00);
        d.lift = rng.uniform(0.03, 0.10);
        disks.push_back(d);
      }
      const int count = element_count(intensity, max_disks);
      if (count > 0) {
        const ImageBuffer blurred = box_blur(clean, 1, 2);
        const double strength = 0.5 + 0.5 * intensity;
        for (int i = 0; i < count; ++i) draw_disk(out, blurred, disks[static_cast<std::size_t>(i)], strength);
      }
      break;
    }
    case DegradationKind::NRS: {
      for (double& p : out.pixels) p *= night_scale;
      const double angle = rng.uniform(0.6, 1.0);
      const double dy = std::cos(angle), dx = std::sin(angle);
      const int max_streaks = 32;
      std::vector<Streak> streaks;
      streaks.reserve(max_streaks);
      for (int i = 0; i < max_streaks; ++i) {
        Streak s;
        s.sy = rng.uniform(-0.2 * sz, 0.9 * sz);
        s.sx = rng.uniform(-0.2 * sz, 1.0 * sz);
        s.len = rng.uniform(0.2 * sz, 0.5 * sz);
        s.boost = rng.uniform(0.18, 0.38);
        streaks.push_back(s);
      }
      const int count = element_count(intensity, max_streaks);
      for (int i = 0; i < count; ++i) draw_streak(out, streaks[static_cast<std::size_t>(i)], dy, dx, opacity);
      break;
    }
    case DegradationKind::NRD: {
      for (double& p : out.pixels) p *= night_scale;
      const int max_disks = 10;
      std::vector<Disk> disks;
      disks.reserve(max_disks);
      for (int i = 0; i < max_disks; ++i) {
        Disk d;
        d.cy = rng.uniform(0.1 * sz, 0.9 * sz);
        d.cx = rng.uniform(0.1 * sz, 0.9 * sz);
        d.r = rng.uniform(0.05 * sz, 0.14 * sz);
        d.tint = rng.uniform(0.80, 1.00);
        d.lift = rng.uniform(0.02, 0.08);
        disks.push_back(d);
      }
      const int max_glows = 8;
      std::vector<Glow> glows;
      glows.reserve(max_glows);
      for (int i = 0; i < max_glows; ++i) {
        Glow g;
        g.cy = rng.uniform(0.0, sz - 1.0);
        g.cx = rng.uniform(0.0, sz - 1.0);
        g.sigma = rng.uniform(0.04 * sz, 0.11 * sz);
        g.amp = rng.uniform(0.15, 0.35);
        glows.push_back(g);
      }
      const int disk_count = element_count(intensity, max_disks);
      if (disk_count > 0) {
        const ImageBuffer blurred = box_blur(out, 1, 2);
        const double strength = 0.5 + 0.5 * intensity;
        for (int i = 0; i < disk_count; ++i) draw_disk(out, blurred, disks[static_cast<std::size_t>(i)], strength);
      }
      const int glow_count = element_count(intensity, max_glows);
      for (int i = 0; i < glow_count; ++i) draw_glow(out, glows[static_cast<std::size_t>(i)], opacity);
      break;
    }
  }
  out.clamp01();
  return out;
}

static const DegradationKind kAllKinds[4] = {DegradationKind::DRS, DegradationKind::DRD,
                                             DegradationKind::NRS, DegradationKind::NRD};

std::vector<CorpusEntry> gen_corpus(const CorpusConfig& config) {
  if (config.per_type_count <= 0) {
    throw std::invalid_argument("gen_corpus: per_type_count must be positive");
  }
  if (!(config.intensity > 0.0 && config.intensity <= 1.0)) {
    throw std::invalid_argument("gen_corpus: intensity must be in (0, 1]");
  }
  const fs::path root(config.out_dir);
  const fs::path image_dir = root / "images";
  std::error_code ec;
  fs::create_directories(image_dir, ec);
  if (ec) {
    throw std::runtime_error("gen_corpus: cannot create " + image_dir.string() + ": " +
                             ec.message());
  }

  std::vector<CorpusEntry> entries;
  entries.reserve(static_cast<std::size_t>(config.per_type_count) * 4);
  std::uint64_t image_index = 0;
  for (const DegradationKind kind : kAllKinds) {
    for (int j = 0; j < config.per_type_count; ++j, ++image_index) {
      const std::uint64_t seed = config.base_seed + image_index;
      const ImageBuffer clean = synth_clean(seed, config.image_size);
      const ImageBuffer rain = degrade(clean, {kind, config.intensity, seed});

      char idbuf[32];
      std::snprintf(idbuf, sizeof(idbuf), "%s_%05d", to_string(kind), j);
      CorpusEntry e;
      e.id = idbuf;
      e.type = kind;
      e.clean_path = std::string("images/") + idbuf + "_clean.png";
      e.degraded_path = std::string("images/") + idbuf + "_rain.png";
      e.seed = seed;
      png::write_file((root / e.clean_path).string(), clean);
      png::write_file((root / e.degraded_path).string(), rain);
      entries.push_back(std::move(e));
    }
  }
  write_corpus_manifest((root / "manifest.jsonl").string(), entries);
  return entries;
}

void write_corpus_manifest(const std::string& manifest_path,
                           std::span<const CorpusEntry> entries) {
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + manifest_path);
  for (const auto& e : entries) {
    json j;
    j["id"] = e.id;
    j["type"] = to_string(e.type);
    j["clean_path"] = e.clean_path;
    j["degraded_path"] = e.degraded_path;
    j["seed"] = e.seed;
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + manifest_path);
}

std::vector<CorpusEntry> read_corpus_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + manifest_path);
  std::vector<CorpusEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    line_no += 1;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw std::runtime_error(manifest_path + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    CorpusEntry e;
    try {
      e.id = j.at("id").get<std::string>();
      e.type = degradation_from_string(j.at("type").get<std::string>());
      e.clean_path = j.at("clean_path").get<std::string>();
      e.degraded_path = j.at("degraded_path").get<std::string>();
      e.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& ex) {
      throw std::runtime_error(manifest_path + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace rainkit::imaging
