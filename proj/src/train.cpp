#include "rainkit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "rainkit/imaging.hpp"
#include "rainkit/png_io.hpp"
#include "rainkit/rng.hpp"

namespace rainkit::train {

const char* to_string(WeightingMode mode) {
  switch (mode) {
    case WeightingMode::uniform: return "uniform";
    case WeightingMode::reweighted: return "reweighted";
    case WeightingMode::fixed_af: return "fixed_af";
    case WeightingMode::no_tss: return "no_tss";
    case WeightingMode::no_tbs: return "no_tbs";
  }
  return "unknown";
}

WeightingMode weighting_mode_from_string(const std::string& name) {
  if (name == "uniform") return WeightingMode::uniform;
  if (name == "reweighted") return WeightingMode::reweighted;
  if (name == "fixed_af") return WeightingMode::fixed_af;
  if (name == "no_tss") return WeightingMode::no_tss;
  if (name == "no_tbs") return WeightingMode::no_tbs;
  throw std::invalid_argument("unknown weighting mode: " + name);
}

namespace {

nn::Tensor to_chw(const imaging::ImageBuffer& img) {
  nn::Tensor t = nn::Tensor::zeros({img.channels, img.height, img.width});
  std::size_t out = 0;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        t.data[out++] = img.at(y, x, c);
      }
    }
  }
  return t;
}

// PSNR between a prediction (clamped into [0,1]) and its clean target.
double tensor_psnr(const nn::Tensor& pred, const nn::Tensor& target) {
  double mse = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double p = std::clamp(pred.data[i], 0.0, 1.0);
    const double d = p - target.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(pred.data.size());
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& field, const std::string& path, std::size_t line) {
  const char* s = field.c_str();
  char* end = nullptr;
  const double v = std::strtod(s, &end);
  if (end == s || *end != '\0') {
    throw std::runtime_error(path + ":" + std::to_string(line) + ": bad numeric field '" +
                             field + "'");
  }
  return v;
}

}  // namespace

Corpus load_corpus(const std::string& manifest_path) {
  const std::vector<imaging::CorpusEntry> entries = imaging::read_corpus_manifest(manifest_path);
  const std::filesystem::path root = std::filesystem::path(manifest_path).parent_path();
  Corpus corpus;
  for (const imaging::CorpusEntry& e : entries) {
    const imaging::ImageBuffer clean = png::read_file((root / e.clean_path).string());
    const imaging::ImageBuffer degraded = png::read_file((root / e.degraded_path).string());
    if (!clean.same_shape(degraded)) {
      throw std::runtime_error("corpus entry " + e.id + ": clean/degraded shape mismatch");
    }
    if (corpus.image_size == 0) {
      corpus.image_size = clean.width;
      corpus.channels = clean.channels;
    }
    if (clean.width != corpus.image_size || clean.height != corpus.image_size ||
        clean.channels != corpus.channels) {
      throw std::runtime_error("corpus entry " + e.id + ": inconsistent image shape");
    }
    corpus.by_type[static_cast<std::size_t>(e.type)].push_back(
        {to_chw(clean), to_chw(degraded)});
  }
  return corpus;
}

TrainResult train_toy(const TrainConfig& config, const Corpus& corpus) {
  constexpr int kTypes = 4;
  if (config.iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
    throw std::invalid_argument("train: learning_rate must be positive and finite");
  }
  if (config.final_window < 1) throw std::invalid_argument("train: final_window must be >= 1");
  if (config.eval_count < 0 || config.eval_interval < 0) {
    throw std::invalid_argument("train: eval_count and eval_interval must be >= 0");
  }
  if (config.sched.num_types != kTypes) {
    throw std::invalid_argument("train: scheduler must track exactly 4 types");
  }
  if (corpus.image_size <= 0) throw std::invalid_argument("train: empty corpus");

  std::array<std::size_t, kTypes> train_count{};
  std::array<std::size_t, kTypes> eval_begin{};
  for (int t = 0; t < kTypes; ++t) {
    const std::size_t total = corpus.by_type[static_cast<std::size_t>(t)].size();
    if (total == 0) {
      throw std::invalid_argument(std::string("train: corpus has no images of type ") +
                                  imaging::to_string(static_cast<imaging::DegradationKind>(t)));
    }
    const auto want = static_cast<std::size_t>(config.eval_count);
    // Hold out the trailing images for evaluation when the pool is large
    // enough; tiny corpora evaluate on training images instead.
    const std::size_t reserve = (want > 0 && total > want) ? want : 0;
    train_count[static_cast<std::size_t>(t)] = total - reserve;
    eval_begin[static_cast<std::size_t>(t)] = total - std::min(want, total);
  }

  moe::ModelConfig mc = config.model;
  mc.image_size = corpus.image_size;
  mc.channels = corpus.channels;
  moe::ToyModel model(mc, derive_seed(config.seed, 2));
  Rng data_rng(derive_seed(config.seed, 1));
  reweight::Scheduler scheduler(config.sched);

  TrainResult result;
  result.rows.reserve(static_cast<std::size_t>(config.iterations) * kTypes);
  std::array<double, kTypes> last_psnr;
  last_psnr.fill(std::numeric_limits<double>::quiet_NaN());
  std::vector<std::array<double, kTypes>> raw_history;
  raw_history.reserve(static_cast<std::size_t>(config.iterations));

  for (int iter = 0; iter < config.iterations; ++iter) {
    nn::Tape tape;
    const moe::ToyModel::Binding binding = model.bind(tape);
    std::vector<nn::Value> loss_nodes;
    loss_nodes.reserve(kTypes);
    std::array<double, kTypes> raw{};
    for (int t = 0; t < kTypes; ++t) {
      const auto& pool = corpus.by_type[static_cast<std::size_t>(t)];
      const int pick = data_rng.uniform_int(
          0, static_cast<int>(train_count[static_cast<std::size_t>(t)]) - 1);
      const ImagePair& pair = pool[static_cast<std::size_t>(pick)];
      const std::uint64_t noise_seed = derive_seed(
          config.seed, 0x100000ull + static_cast<std::uint64_t>(iter) * kTypes +
                           static_cast<std::uint64_t>(t));
      const nn::Value pred =
          model.forward_sample(tape, binding, pair.degraded, true, noise_seed, nullptr);
      const nn::Value loss = nn::l1_loss(pred, pair.clean);
      loss_nodes.push_back(loss);
      raw[static_cast<std::size_t>(t)] = tape.value(loss).data[0];
      if (!std::isfinite(raw[static_cast<std::size_t>(t)])) {
        throw TrainDivergence(
            "train: non-finite loss for type " +
                std::string(imaging::to_string(static_cast<imaging::DegradationKind>(t))) +
                " at iteration " + std::to_string(iter),
            std::move(result.rows));
      }
    }

    const reweight::StepResult sr =
        scheduler.step(std::span<const double>(raw.data(), raw.size()));
    std::array<double, kTypes> omega{};
    if (!sr.warmed_up || config.mode == WeightingMode::uniform) {
      omega.fill(1.0 / kTypes);
    } else {
      for (int t = 0; t < kTypes; ++t) {
        const auto i = static_cast<std::size_t>(t);
        switch (config.mode) {
          case WeightingMode::reweighted: omega[i] = sr.weights.weights[i]; break;
          case WeightingMode::fixed_af:
            omega[i] = 0.5 * sr.tbs.weights[i] + 0.5 * sr.tss.weights[i];
            break;
          case WeightingMode::no_tss: omega[i] = sr.tbs.weights[i]; break;
          case WeightingMode::no_tbs: omega[i] = sr.tss.weights[i]; break;
          case WeightingMode::uniform: omega[i] = 1.0 / kTypes; break;
        }
      }
    }

    std::array<double, kTypes> coeffs{};
    for (int t = 0; t < kTypes; ++t) {
      coeffs[static_cast<std::size_t>(t)] = kTypes * omega[static_cast<std::size_t>(t)];
    }
    const nn::Value total = nn::scalar_combine(loss_nodes, coeffs);
    tape.backward(total);
    model.apply_gradients(tape, binding, config.learning_rate);
    raw_history.push_back(raw);

    const bool do_eval =
        config.eval_interval > 0 && config.eval_count > 0 &&
        ((iter + 1) % config.eval_interval == 0 || iter == config.iterations - 1);
    std::array<double, kTypes> iter_psnr;
    iter_psnr.fill(std::numeric_limits<double>::quiet_NaN());
    if (do_eval) {
      for (int t = 0; t < kTypes; ++t) {
        const auto& pool = corpus.by_type[static_cast<std::size_t>(t)];
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t i = eval_begin[static_cast<std::size_t>(t)]; i < pool.size(); ++i) {
          const nn::Tensor pred = model.forward(pool[i].degraded, false, 0, nullptr);
          sum += tensor_psnr(pred, pool[i].clean);
          n += 1;
        }
        iter_psnr[static_cast<std::size_t>(t)] = sum / static_cast<double>(n);
        last_psnr[static_cast<std::size_t>(t)] = iter_psnr[static_cast<std::size_t>(t)];
      }
    }

    for (int t = 0; t < kTypes; ++t) {
      const auto i = static_cast<std::size_t>(t);
      result.rows.push_back({iter, t, raw[i], iter_psnr[i], omega[i], sr.af});
    }
  }

  const auto window = std::min<std::size_t>(static_cast<std::size_t>(config.final_window),
                                            raw_history.size());
  for (int t = 0; t < kTypes; ++t) {
    double sum = 0.0;
    for (std::size_t i = raw_history.size() - window; i < raw_history.size(); ++i) {
      sum += raw_history[i][static_cast<std::size_t>(t)];
    }
    result.final_loss[static_cast<std::size_t>(t)] = sum / static_cast<double>(window);
    result.final_psnr[static_cast<std::size_t>(t)] = last_psnr[static_cast<std::size_t>(t)];
  }
  result.model = std::move(model);
  return result;
}

void write_log_csv(const std::string& path, std::span<const LogRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write log: " + path);
  out << "iter,type_id,loss,psnr,omega,af\n";
  for (const LogRow& r : rows) {
    out << r.iter << ',' << r.type_id << ',' << format_double(r.loss) << ','
        << format_double(r.psnr) << ',' << format_double(r.omega) << ','
        << format_double(r.af) << '\n';
  }
  if (!out) throw std::runtime_error("log write failed: " + path);
}

std::vector<LogRow> read_log_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read log: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "iter,type_id,loss,psnr,omega,af") {
    throw std::runtime_error(path + ": missing or malformed header");
  }
  std::vector<LogRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    line_no += 1;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 6) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 6 fields");
    }
    LogRow r;
    r.iter = static_cast<int>(parse_double(fields[0], path, line_no));
    r.type_id = static_cast<int>(parse_double(fields[1], path, line_no));
    r.loss = parse_double(fields[2], path, line_no);
    r.psnr = parse_double(fields[3], path, line_no);
    r.omega = parse_double(fields[4], path, line_no);
    r.af = parse_double(fields[5], path, line_no);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace rainkit::train
