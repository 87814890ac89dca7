#pragma once

/**
 * Image quality metrics plus the synthetic degradation corpus.
 *
 * Images are float64 buffers in [0, 1], row-major HWC. Four degradation
 * recipes distinguish day/night scenes and streak/drop artifacts:
 *   DRS  day + rain streaks      (bright line segments at a shared angle)
 *   DRD  day + rain drops        (soft-edged disks with local blur)
 *   NRS  night + rain streaks    (global darkening plus streaks)
 *   NRD  night + rain drops      (darkening, disks, halo glow spots)
 * Every recipe is deterministic given its seed and converges to the clean
 * image as intensity goes to 0.
 */

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rainkit::imaging {

struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;  // row-major [y][x][c], values in [0, 1]

  static ImageBuffer create(int h, int w, int c, double fill = 0.0);

  double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t size() const { return pixels.size(); }
  bool same_shape(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  void clamp01();
};

struct SsimParams {
  int window_size = 11;
  double gaussian_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

// Mean structural similarity over all fully-interior Gaussian windows,
// averaged across channels. Symmetric; ssim(x, x) == 1.0 exactly.
double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimParams& params = {});

// 10 * log10(peak^2 / MSE) with peak 1.0; identical images give +infinity.
double psnr(const ImageBuffer& a, const ImageBuffer& b);

ImageBuffer resize_bilinear(const ImageBuffer& src, int out_h, int out_w);

enum class DegradationKind { DRS, DRD, NRS, NRD };

const char* to_string(DegradationKind kind);
DegradationKind degradation_from_string(const std::string& name);

struct DegradationSpec {
  DegradationKind kind = DegradationKind::DRS;
  double intensity = 0.5;       // in (0, 1]
  std::uint64_t rng_seed = 0;
};

// Clean synthetic scene: gradient background, low-frequency ripple, a few
// random shapes. Distinct seeds give visibly different images.
ImageBuffer synth_clean(std::uint64_t rng_seed, int size);

ImageBuffer degrade(const ImageBuffer& clean, const DegradationSpec& spec);

struct CorpusConfig {
  std::string out_dir;
  int image_size = 32;
  int per_type_count = 8;
  double intensity = 0.5;
  std::uint64_t base_seed = 0;
};

struct CorpusEntry {
  std::string id;
  DegradationKind type = DegradationKind::DRS;
  std::string clean_path;     // relative to the manifest directory
  std::string degraded_path;
  std::uint64_t seed = 0;
};

// Writes clean/degraded PNG pairs plus manifest.jsonl under out_dir and
// returns the manifest entries. Image i uses seed base_seed + i.
std::vector<CorpusEntry> gen_corpus(const CorpusConfig& config);

std::vector<CorpusEntry> read_corpus_manifest(const std::string& manifest_path);
void write_corpus_manifest(const std::string& manifest_path,
                           std::span<const CorpusEntry> entries);

}  // namespace rainkit::imaging
