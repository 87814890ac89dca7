#include "rainkit/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rainkit/distill.hpp"
#include "rainkit/imaging.hpp"
#include "rainkit/png_io.hpp"
#include "rainkit/train.hpp"
#include "rainkit/vlm_client.hpp"

namespace rainkit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GlobalFlags {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string mock_rule;  // empty when --mock-vlm was not given
};

std::string read_file_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read file: " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Loads and validates the run config; no --config means an empty object.
struct LoadedConfig {
  json values = json::object();
  std::string raw = "{}\n";
};

LoadedConfig load_config(const GlobalFlags& flags) {
  LoadedConfig cfg;
  if (flags.config_path.empty()) return cfg;
  cfg.raw = read_file_text(flags.config_path);
  cfg.values = json::parse(cfg.raw, nullptr, false);
  if (cfg.values.is_discarded() || !cfg.values.is_object()) {
    throw ValidationError("config must be a JSON object: " + flags.config_path);
  }
  return cfg;
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& context) {
  for (const auto& item : j.items()) {
    if (allowed.find(item.key()) == allowed.end()) {
      throw ValidationError("unknown config key '" + item.key() + "' in " + context);
    }
  }
}

double get_double(const json& j, const char* key, double def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_number()) throw ValidationError(std::string("config key '") + key + "' must be a number");
  return j[key].get<double>();
}

std::int64_t get_int(const json& j, const char* key, std::int64_t def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_number_integer() && !j[key].is_number_unsigned()) {
    throw ValidationError(std::string("config key '") + key + "' must be an integer");
  }
  return j[key].get<std::int64_t>();
}

std::uint64_t get_u64(const json& j, const char* key, std::uint64_t def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_number_unsigned() && !(j[key].is_number_integer() && j[key].get<std::int64_t>() >= 0)) {
    throw ValidationError(std::string("config key '") + key + "' must be a nonnegative integer");
  }
  return j[key].get<std::uint64_t>();
}

std::string get_string(const json& j, const char* key, const std::string& def) {
  if (!j.contains(key)) return def;
  if (!j[key].is_string()) throw ValidationError(std::string("config key '") + key + "' must be a string");
  return j[key].get<std::string>();
}

std::string require_string(const json& j, const char* key) {
  if (!j.contains(key)) throw ValidationError(std::string("config key '") + key + "' is required");
  if (!j[key].is_string()) throw ValidationError(std::string("config key '") + key + "' must be a string");
  return j[key].get<std::string>();
}

// Creates the output directory and drops the verbatim config bytes into it.
void prepare_out(const GlobalFlags& flags, const LoadedConfig& cfg) {
  fs::create_directories(flags.out_dir);
  write_file_text((fs::path(flags.out_dir) / "config.echo").string(), cfg.raw);
}

int require_positive(std::int64_t v, const char* what) {
  if (v < 1 || v > std::numeric_limits<int>::max()) {
    throw ValidationError(std::string(what) + " must be a positive integer");
  }
  return static_cast<int>(v);
}

// ---------------------------------------------------------------- synth

int cmd_synth(const GlobalFlags& flags) {
  const LoadedConfig cfg = load_config(flags);
  check_keys(cfg.values, {"image_size", "per_type_count", "intensity", "seed"}, "synth config");

  imaging::CorpusConfig corpus;
  corpus.out_dir = flags.out_dir;
  corpus.image_size = require_positive(get_int(cfg.values, "image_size", 32), "image_size");
  corpus.per_type_count =
      require_positive(get_int(cfg.values, "per_type_count", 8), "per_type_count");
  corpus.intensity = get_double(cfg.values, "intensity", 0.5);
  if (!(corpus.intensity > 0.0 && corpus.intensity <= 1.0)) {
    throw ValidationError("intensity must be in (0, 1]");
  }
  corpus.base_seed = flags.seed.value_or(get_u64(cfg.values, "seed", 0));

  prepare_out(flags, cfg);
  const std::vector<imaging::CorpusEntry> entries = imaging::gen_corpus(corpus);
  std::printf("synth: wrote %zu image pairs (%d per type, size %d) under %s\n", entries.size(),
              corpus.per_type_count, corpus.image_size, flags.out_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------- train

train::WeightingMode parse_mode(const std::string& raw) {
  std::string name;
  for (char c : raw) name.push_back(c == '-' ? '_' : static_cast<char>(std::tolower(c)));
  if (name == "fixed_af_0.5") name = "fixed_af";
  return train::weighting_mode_from_string(name);
}

int cmd_train(const GlobalFlags& flags) {
  const LoadedConfig cfg = load_config(flags);
  check_keys(cfg.values,
             {"corpus", "iterations", "learning_rate", "mode", "eval_interval", "eval_count",
              "final_window", "seed", "window_size", "tau", "warmup_min_points", "model"},
             "train config");

  train::TrainConfig tc;
  const std::string corpus_path = require_string(cfg.values, "corpus");
  tc.iterations = require_positive(get_int(cfg.values, "iterations", tc.iterations), "iterations");
  tc.learning_rate = get_double(cfg.values, "learning_rate", tc.learning_rate);
  tc.mode = parse_mode(get_string(cfg.values, "mode", "reweighted"));
  tc.eval_interval = static_cast<int>(get_int(cfg.values, "eval_interval", tc.eval_interval));
  tc.eval_count = static_cast<int>(get_int(cfg.values, "eval_count", tc.eval_count));
  tc.final_window = require_positive(get_int(cfg.values, "final_window", tc.final_window),
                                     "final_window");
  tc.seed = flags.seed.value_or(get_u64(cfg.values, "seed", 0));
  tc.sched.window_size = static_cast<std::size_t>(
      require_positive(get_int(cfg.values, "window_size", static_cast<std::int64_t>(tc.sched.window_size)),
                       "window_size"));
  tc.sched.tau = get_double(cfg.values, "tau", tc.sched.tau);
  tc.sched.warmup_min_points = require_positive(
      get_int(cfg.values, "warmup_min_points", tc.sched.warmup_min_points), "warmup_min_points");
  if (tc.eval_interval < 0 || tc.eval_count < 0) {
    throw ValidationError("eval_interval and eval_count must be >= 0");
  }
  if (!(tc.learning_rate > 0.0) || !std::isfinite(tc.learning_rate)) {
    throw ValidationError("learning_rate must be positive and finite");
  }
  if (!(tc.sched.tau > 0.0) || !std::isfinite(tc.sched.tau)) {
    throw ValidationError("tau must be positive and finite");
  }

  if (cfg.values.contains("model")) {
    const json& m = cfg.values["model"];
    if (!m.is_object()) throw ValidationError("config key 'model' must be an object");
    check_keys(m,
               {"encoder_stages", "decoder_stages", "num_experts", "expert_widths", "top_k",
                "noise_std"},
               "train config model");
    tc.model.encoder_stages =
        static_cast<int>(get_int(m, "encoder_stages", tc.model.encoder_stages));
    tc.model.decoder_stages =
        static_cast<int>(get_int(m, "decoder_stages", tc.model.decoder_stages));
    tc.model.num_experts = require_positive(get_int(m, "num_experts", tc.model.num_experts),
                                            "num_experts");
    tc.model.top_k = require_positive(get_int(m, "top_k", tc.model.top_k), "top_k");
    tc.model.noise_std = get_double(m, "noise_std", tc.model.noise_std);
    if (m.contains("expert_widths")) {
      if (!m["expert_widths"].is_array()) {
        throw ValidationError("config key 'expert_widths' must be an array of integers");
      }
      tc.model.expert_widths.clear();
      for (const json& w : m["expert_widths"]) {
        if (!w.is_number_integer() && !w.is_number_unsigned()) {
          throw ValidationError("expert_widths entries must be integers");
        }
        tc.model.expert_widths.push_back(
            require_positive(w.get<std::int64_t>(), "expert width"));
      }
    }
  }

  if (!fs::exists(corpus_path)) throw ValidationError("corpus manifest not found: " + corpus_path);

  prepare_out(flags, cfg);
  const std::string log_path = (fs::path(flags.out_dir) / "log.csv").string();
  const train::Corpus corpus = train::load_corpus(corpus_path);
  train::TrainResult result;
  try {
    result = train::train_toy(tc, corpus);
  } catch (const train::TrainDivergence& e) {
    train::write_log_csv(log_path, e.rows);
    std::fprintf(stderr, "error: %s (partial log preserved)\n", e.what());
    return kExitRuntime;
  }
  train::write_log_csv(log_path, result.rows);
  moe::save_checkpoint((fs::path(flags.out_dir) / "checkpoint.bin").string(), result.model);

  std::printf("train: mode %s, %d iterations\n", train::to_string(tc.mode), tc.iterations);
  for (int t = 0; t < 4; ++t) {
    std::printf("  %s final loss %s, held-out psnr %s\n",
                imaging::to_string(static_cast<imaging::DegradationKind>(t)),
                format_double(result.final_loss[static_cast<std::size_t>(t)]).c_str(),
                format_double(result.final_psnr[static_cast<std::size_t>(t)]).c_str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------- distill

vlm::EndpointConfig parse_endpoint(const json& j, std::size_t idx) {
  if (!j.is_object()) throw ValidationError("endpoints entries must be objects");
  const std::string ctx = "endpoint " + std::to_string(idx);
  check_keys(j, {"url", "timeout_ms", "max_retries", "backoff_ms", "max_payload_bytes"}, ctx);
  vlm::EndpointConfig ep;
  ep.url = require_string(j, "url");
  ep.timeout_ms = static_cast<int>(get_int(j, "timeout_ms", ep.timeout_ms));
  ep.max_retries = static_cast<int>(get_int(j, "max_retries", ep.max_retries));
  ep.backoff_ms = static_cast<int>(get_int(j, "backoff_ms", ep.backoff_ms));
  ep.max_payload_bytes = get_u64(j, "max_payload_bytes", ep.max_payload_bytes);
  if (ep.timeout_ms < 1) throw ValidationError(ctx + ": timeout_ms must be >= 1");
  if (ep.max_retries < 0 || ep.backoff_ms < 0) {
    throw ValidationError(ctx + ": max_retries and backoff_ms must be >= 0");
  }
  return ep;
}

int cmd_distill(const GlobalFlags& flags) {
  const LoadedConfig cfg = load_config(flags);
  check_keys(cfg.values,
             {"db_manifest", "query_manifest", "k1", "k2", "k3", "prompt", "endpoints",
              "max_in_flight"},
             "distill config");

  const std::string db_manifest = require_string(cfg.values, "db_manifest");
  const std::string query_manifest = require_string(cfg.values, "query_manifest");

  distill::DistillConfig dc;
  dc.k1 = static_cast<std::size_t>(require_positive(
      get_int(cfg.values, "k1", static_cast<std::int64_t>(dc.k1)), "k1"));
  dc.k2 = static_cast<std::size_t>(require_positive(
      get_int(cfg.values, "k2", static_cast<std::int64_t>(dc.k2)), "k2"));
  dc.k3 = static_cast<std::size_t>(require_positive(
      get_int(cfg.values, "k3", static_cast<std::int64_t>(dc.k3)), "k3"));
  dc.prompt = get_string(cfg.values, "prompt", dc.prompt);
  dc.max_in_flight = require_positive(
      get_int(cfg.values, "max_in_flight", dc.max_in_flight), "max_in_flight");

  if (cfg.values.contains("endpoints")) {
    if (!cfg.values["endpoints"].is_array() || cfg.values["endpoints"].size() != 3) {
      throw ValidationError("config key 'endpoints' must be an array of exactly 3 entries");
    }
    for (std::size_t i = 0; i < 3; ++i) {
      dc.endpoints.push_back(parse_endpoint(cfg.values["endpoints"][i], i));
    }
  }
  if (!flags.mock_rule.empty()) {
    vlm::MockRule::parse(flags.mock_rule);  // reject bad rules up front
    const std::string url = "mock:" + flags.mock_rule;
    if (dc.endpoints.empty()) dc.endpoints.resize(3);
    for (auto& ep : dc.endpoints) ep.url = url;
  }
  if (dc.endpoints.size() != 3) {
    throw ValidationError("distill needs 3 endpoints (config 'endpoints' or --mock-vlm)");
  }
  for (const auto& ep : dc.endpoints) {
    if (vlm::is_mock_url(ep.url)) {
      vlm::MockRule::parse(ep.url.substr(5));
    } else if (ep.url.rfind("http://", 0) != 0) {
      throw ValidationError("endpoint url must be http:// or mock:<rule>: " + ep.url);
    }
  }
  if (!fs::exists(db_manifest)) throw ValidationError("db manifest not found: " + db_manifest);
  if (!fs::exists(query_manifest)) {
    throw ValidationError("query manifest not found: " + query_manifest);
  }

  prepare_out(flags, cfg);
  const std::string db_root = fs::path(db_manifest).parent_path().string();
  const std::string query_root = fs::path(query_manifest).parent_path().string();
  const distill::Database db = distill::Database::build(
      distill::read_record_manifest(db_manifest, distill::Tier::real_reference));
  const std::vector<distill::Record> queries =
      distill::read_record_manifest(query_manifest, distill::Tier::candidate);

  const distill::DistillResult result =
      distill::distill_corpus(queries, query_root, db, db_root, dc);
  distill::write_pyramid_jsonl((fs::path(flags.out_dir) / "pyramid.jsonl").string(), result.rows);
  distill::write_audit_jsonl((fs::path(flags.out_dir) / "audit.jsonl").string(), result.audit);

  std::size_t top = 0, middle = 0, bottom = 0;
  for (const auto& row : result.rows) {
    if (row.tier == distill::PyramidTier::top) top += 1;
    else if (row.tier == distill::PyramidTier::middle) middle += 1;
    else bottom += 1;
  }
  const double retention =
      queries.empty() ? 0.0 : 100.0 * static_cast<double>(middle) / static_cast<double>(queries.size());
  std::printf("distill: top=%zu middle=%zu bottom=%zu retention=%.1f%% (%zu of %zu queries kept",
              top, middle, bottom, retention, middle, queries.size());
  if (result.failed_queries > 0) {
    std::printf(", %zu unprocessable)\n", result.failed_queries);
    std::fprintf(stderr, "error: %zu queries could not be processed\n", result.failed_queries);
    return kExitRuntime;
  }
  std::printf(")\n");
  return kExitOk;
}

// ---------------------------------------------------------------- replay

int cmd_replay(const GlobalFlags& flags, const std::string& trace_path) {
  const LoadedConfig cfg = load_config(flags);
  check_keys(cfg.values, {"num_types", "window_size", "tau", "warmup_min_points"},
             "replay config");

  reweight::SchedulerConfig sc;
  sc.num_types = require_positive(get_int(cfg.values, "num_types", sc.num_types), "num_types");
  sc.window_size = static_cast<std::size_t>(require_positive(
      get_int(cfg.values, "window_size", static_cast<std::int64_t>(sc.window_size)),
      "window_size"));
  sc.tau = get_double(cfg.values, "tau", sc.tau);
  sc.warmup_min_points =
      require_positive(get_int(cfg.values, "warmup_min_points", sc.warmup_min_points),
                       "warmup_min_points");
  if (!(sc.tau > 0.0) || !std::isfinite(sc.tau)) {
    throw ValidationError("tau must be positive and finite");
  }
  if (!fs::exists(trace_path)) throw ValidationError("trace file not found: " + trace_path);

  // Parse the whole trace before any side effects.
  struct TraceStep {
    std::int64_t step = 0;
    std::vector<std::optional<double>> losses;
  };
  std::vector<TraceStep> steps;
  {
    std::ifstream in(trace_path, std::ios::binary);
    if (!in) throw ValidationError("cannot read trace file: " + trace_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      line_no += 1;
      if (line.empty()) continue;
      const std::string where = trace_path + ":" + std::to_string(line_no);
      std::int64_t step = 0, type_id = 0;
      double raw = 0.0;
      char extra = 0;
      if (std::sscanf(line.c_str(), "%ld,%ld,%lf%c", &step, &type_id, &raw, &extra) != 3) {
        throw ValidationError(where + ": expected 'step,type_id,raw_loss'");
      }
      if (type_id < 0 || type_id >= sc.num_types) {
        throw ValidationError(where + ": type_id out of range");
      }
      if (steps.empty() || steps.back().step != step) {
        if (!steps.empty() && step < steps.back().step) {
          throw ValidationError(where + ": steps must be non-decreasing");
        }
        steps.push_back({step, std::vector<std::optional<double>>(
                                   static_cast<std::size_t>(sc.num_types))});
      }
      auto& slot = steps.back().losses[static_cast<std::size_t>(type_id)];
      if (slot.has_value()) throw ValidationError(where + ": duplicate type within a step");
      if (!std::isfinite(raw) || raw <= 0.0) {
        throw ValidationError(where + ": raw_loss must be finite and positive");
      }
      slot = raw;
    }
  }

  prepare_out(flags, cfg);
  reweight::Scheduler sched(sc);
  std::string out_text = "step";
  for (int i = 0; i < sc.num_types; ++i) out_text += ",omega_" + std::to_string(i);
  out_text += ",af\n";
  for (const TraceStep& ts : steps) {
    const reweight::StepResult sr =
        sched.step(std::span<const std::optional<double>>(ts.losses));
    out_text += std::to_string(ts.step);
    for (double w : sr.weights.weights) out_text += "," + format_double(w);
    out_text += "," + format_double(sr.af) + "\n";
  }
  write_file_text((fs::path(flags.out_dir) / "log.csv").string(), out_text);
  std::printf("replay: %zu steps through the scheduler (K=%d) -> %s/log.csv\n", steps.size(),
              sc.num_types, flags.out_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const GlobalFlags& flags, const std::string& pred_dir, const std::string& gt_dir) {
  const LoadedConfig cfg = load_config(flags);
  check_keys(cfg.values, {}, "eval config");

  if (!fs::is_directory(pred_dir)) throw ValidationError("pred dir not found: " + pred_dir);
  if (!fs::is_directory(gt_dir)) throw ValidationError("gt dir not found: " + gt_dir);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(pred_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw ValidationError("no .png files in pred dir: " + pred_dir);
  for (const std::string& name : names) {
    if (!fs::exists(fs::path(gt_dir) / name)) {
      throw ValidationError("missing ground-truth image for " + name);
    }
  }

  prepare_out(flags, cfg);
  std::string csv = "image,psnr,ssim\n";
  double psnr_sum = 0.0, ssim_sum = 0.0;
  for (const std::string& name : names) {
    const imaging::ImageBuffer pred = png::read_file((fs::path(pred_dir) / name).string());
    const imaging::ImageBuffer gt = png::read_file((fs::path(gt_dir) / name).string());
    if (!pred.same_shape(gt)) throw std::runtime_error("shape mismatch for " + name);
    const double p = imaging::psnr(pred, gt);
    const double s = imaging::ssim(pred, gt);
    psnr_sum += p;
    ssim_sum += s;
    csv += name + "," + format_double(p) + "," + format_double(s) + "\n";
  }
  const auto n = static_cast<double>(names.size());
  csv += "mean," + format_double(psnr_sum / n) + "," + format_double(ssim_sum / n) + "\n";
  write_file_text((fs::path(flags.out_dir) / "metrics.csv").string(), csv);
  std::printf("eval: %zu images, mean psnr %s, mean ssim %s\n", names.size(),
              format_double(psnr_sum / n).c_str(), format_double(ssim_sum / n).c_str());
  return kExitOk;
}

// ---------------------------------------------------------------- report

// Numeric summary of one named series within one log file.
struct SeriesStats {
  double final_value = std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  std::size_t count = 0;

  void add(double v) {
    if (std::isnan(v)) return;
    final_value = v;
    sum += v;
    min = std::min(min, v);
    max = std::max(max, v);
    count += 1;
  }
};

int cmd_report(const GlobalFlags& flags, const std::vector<std::string>& log_paths) {
  const LoadedConfig cfg = load_config(flags);
  check_keys(cfg.values, {}, "report config");
  for (const std::string& p : log_paths) {
    if (!fs::exists(p)) throw ValidationError("log file not found: " + p);
  }

  prepare_out(flags, cfg);
  std::string curves = "log,x,series,value\n";
  std::string summary = "log,series,final,mean,min,max\n";

  for (const std::string& path : log_paths) {
    const std::string label = fs::path(path).stem().string();
    std::ifstream probe(path, std::ios::binary);
    std::string header;
    std::getline(probe, header);
    probe.close();

    std::vector<std::pair<std::string, SeriesStats>> series;  // insertion order
    const auto stat = [&series](const std::string& name) -> SeriesStats& {
      for (auto& [n, s] : series) {
        if (n == name) return s;
      }
      series.emplace_back(name, SeriesStats{});
      return series.back().second;
    };

    if (header.rfind("iter,", 0) == 0) {
      const std::vector<train::LogRow> rows = train::read_log_csv(path);
      for (const train::LogRow& r : rows) {
        const std::string t = std::to_string(r.type_id);
        const auto add_point = [&](const std::string& name, double v) {
          stat(name).add(v);
          if (!std::isnan(v)) {
            curves += label + "," + std::to_string(r.iter) + "," + name + "," +
                      format_double(v) + "\n";
          }
        };
        add_point("loss_" + t, r.loss);
        add_point("psnr_" + t, r.psnr);
        add_point("omega_" + t, r.omega);
        if (r.type_id == 0) add_point("af", r.af);
      }
    } else if (header.rfind("step,", 0) == 0) {
      // Weight log from the replay command: step,omega_0..omega_{K-1},af.
      std::vector<std::string> cols;
      std::size_t start = 0;
      while (true) {
        const std::size_t comma = header.find(',', start);
        cols.push_back(header.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      std::ifstream in(path, std::ios::binary);
      std::string line;
      std::getline(in, line);  // header
      std::size_t line_no = 1;
      while (std::getline(in, line)) {
        line_no += 1;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        start = 0;
        while (true) {
          const std::size_t comma = line.find(',', start);
          fields.push_back(line.substr(start, comma - start));
          if (comma == std::string::npos) break;
          start = comma + 1;
        }
        if (fields.size() != cols.size()) {
          throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                   ": column count mismatch");
        }
        for (std::size_t c = 1; c < cols.size(); ++c) {
          const double v = std::strtod(fields[c].c_str(), nullptr);
          stat(cols[c]).add(v);
          curves += label + "," + fields[0] + "," + cols[c] + "," + format_double(v) + "\n";
        }
      }
    } else {
      throw ValidationError(path + ": unrecognized log header '" + header + "'");
    }

    for (const auto& [name, s] : series) {
      if (s.count == 0) continue;
      summary += label + "," + name + "," + format_double(s.final_value) + "," +
                 format_double(s.sum / static_cast<double>(s.count)) + "," +
                 format_double(s.min) + "," + format_double(s.max) + "\n";
    }
  }

  write_file_text((fs::path(flags.out_dir) / "summary.csv").string(), summary);
  write_file_text((fs::path(flags.out_dir) / "curves.csv").string(), curves);
  std::printf("report: summarized %zu log file(s) -> %s/{summary.csv,curves.csv}\n",
              log_paths.size(), flags.out_dir.c_str());
  return kExitOk;
}

}  // namespace

int run_args(const std::vector<std::string>& args_in) {
  std::vector<std::string> args = args_in;
  CLI::App app{"desk-scale toolkit: loss reweighting, toy mixture nets, retrieval distillation"};
  app.require_subcommand(1);

  GlobalFlags flags;
  std::uint64_t seed_value = 0;
  CLI::Option* seed_opt = app.add_option("--seed", seed_value, "override the run seed");
  app.add_option("--config", flags.config_path, "JSON config file");
  app.add_option("--out", flags.out_dir, "output directory")->required();
  app.add_option("--mock-vlm", flags.mock_rule,
                 "replace every endpoint with mock:<rule> (accept|reject|ssim:T|hash:P)");

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic degradation corpus");
  CLI::App* distill_cmd = app.add_subcommand("distill", "run the retrieval distillation cascade");
  CLI::App* train_cmd = app.add_subcommand("train", "train the toy mixture network");
  CLI::App* replay = app.add_subcommand("replay", "drive the scheduler from a loss trace");
  CLI::App* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM between two image directories");
  CLI::App* report = app.add_subcommand("report", "summarize training or weight logs");
  for (CLI::App* sub : {synth, distill_cmd, train_cmd, replay, eval_cmd, report}) {
    sub->fallthrough();
  }

  std::string trace_path;
  replay->add_option("trace", trace_path, "loss trace file (step,type_id,raw_loss)")->required();
  std::string pred_dir, gt_dir;
  eval_cmd->add_option("--pred", pred_dir, "directory of predicted images")->required();
  eval_cmd->add_option("--gt", gt_dir, "directory of ground-truth images")->required();
  std::vector<std::string> log_paths;
  report->add_option("logs", log_paths, "log files to summarize")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  if (seed_opt->count() > 0) flags.seed = seed_value;

  try {
    if (synth->parsed()) return cmd_synth(flags);
    if (train_cmd->parsed()) return cmd_train(flags);
    if (distill_cmd->parsed()) return cmd_distill(flags);
    if (replay->parsed()) return cmd_replay(flags, trace_path);
    if (eval_cmd->parsed()) return cmd_eval(flags, pred_dir, gt_dir);
    if (report->parsed()) return cmd_report(flags, log_paths);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitValidation;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  args.reserve(static_cast<std::size_t>(argc > 0 ? argc - 1 : 0));
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_args(std::move(args));
}

}  // namespace rainkit::cli
