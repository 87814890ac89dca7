#include "rainkit/distill.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "rainkit/png_io.hpp"

namespace rainkit::distill {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const char* to_string(Tier tier) {
  return tier == Tier::real_reference ? "real_reference" : "candidate";
}

Tier tier_from_string(const std::string& name) {
  if (name == "real_reference") return Tier::real_reference;
  if (name == "candidate") return Tier::candidate;
  throw std::invalid_argument("unknown tier: " + name);
}

const char* to_string(PyramidTier tier) {
  switch (tier) {
    case PyramidTier::top: return "top";
    case PyramidTier::middle: return "middle";
    case PyramidTier::bottom: return "bottom";
  }
  return "bottom";
}

Database Database::build(std::vector<Record> records) {
  Database db;
  db.records_ = std::move(records);
  for (std::size_t i = 0; i < db.records_.size(); ++i) {
    const Record& r = db.records_[i];
    if (r.id.empty()) throw std::invalid_argument("database record " + std::to_string(i) + " has an empty id");
    if (!db.by_id_.emplace(r.id, i).second) {
      throw std::invalid_argument("duplicate record id: " + r.id);
    }
    if (r.caption_embedding.empty() || r.visual_embedding.empty()) {
      throw std::invalid_argument("record " + r.id + " is missing an embedding");
    }
    if (i == 0) {
      db.caption_dim_ = r.caption_embedding.size();
      db.visual_dim_ = r.visual_embedding.size();
    } else if (r.caption_embedding.size() != db.caption_dim_ ||
               r.visual_embedding.size() != db.visual_dim_) {
      throw std::invalid_argument("record " + r.id + " has mismatched embedding dimensions");
    }
  }
  return db;
}

const Record* Database::find(const std::string& id) const {
  const auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &records_[it->second];
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("l2_distance: dimension mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) {
    throw std::invalid_argument("cosine_similarity: zero-magnitude vector");
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

// Sorts scored entries into rank order and keeps the first k. Ties on the
// score fall back to ascending id so results never depend on input order.
void rank_and_trim(std::vector<ScoredId>& entries, std::size_t k, bool descending) {
  std::sort(entries.begin(), entries.end(), [descending](const ScoredId& x, const ScoredId& y) {
    if (x.score != y.score) return descending ? x.score > y.score : x.score < y.score;
    return x.record_id < y.record_id;
  });
  if (entries.size() > k) entries.resize(k);
}

imaging::ImageBuffer match_channels(const imaging::ImageBuffer& src, int channels) {
  if (src.channels == channels) return src;
  imaging::ImageBuffer out = imaging::ImageBuffer::create(src.height, src.width, channels);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      if (src.channels == 1) {
        for (int c = 0; c < channels; ++c) out.at(y, x, c) = src.at(y, x, 0);
      } else {
        double sum = 0.0;
        for (int c = 0; c < src.channels; ++c) sum += src.at(y, x, c);
        out.at(y, x, 0) = sum / src.channels;
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

CandidateSet stage1_semantic(const Record& query, const Database& db, std::size_t k1) {
  if (k1 < 1 || k1 > db.size()) {
    throw std::invalid_argument("stage1: k1 must be in [1, database size]");
  }
  CandidateSet out;
  out.stage = 1;
  out.entries.reserve(db.size());
  for (const Record& r : db.records()) {
    out.entries.push_back({r.id, l2_distance(query.caption_embedding, r.caption_embedding)});
  }
  rank_and_trim(out.entries, k1, /*descending=*/false);
  return out;
}

CandidateSet stage2_visual(const Record& query, const CandidateSet& prev, const Database& db,
                           std::size_t k2) {
  if (prev.entries.empty()) throw std::invalid_argument("stage2: empty candidate set");
  if (k2 < 1 || k2 > prev.entries.size()) {
    throw std::invalid_argument("stage2: k2 must be in [1, candidate count]");
  }
  CandidateSet out;
  out.stage = 2;
  out.entries.reserve(prev.entries.size());
  for (const ScoredId& c : prev.entries) {
    const Record* r = db.find(c.record_id);
    if (r == nullptr) throw std::invalid_argument("stage2: unknown candidate id " + c.record_id);
    out.entries.push_back({r->id, cosine_similarity(query.visual_embedding, r->visual_embedding)});
  }
  rank_and_trim(out.entries, k2, /*descending=*/true);
  return out;
}

CandidateSet stage3_structural(const imaging::ImageBuffer& query_image, const CandidateSet& prev,
                               const Database& db, const std::string& db_root, std::size_t k3,
                               std::vector<std::string>* warnings) {
  if (prev.entries.empty()) throw std::invalid_argument("stage3: empty candidate set");
  if (k3 < 1 || k3 > prev.entries.size()) {
    throw std::invalid_argument("stage3: k3 must be in [1, candidate count]");
  }
  CandidateSet out;
  out.stage = 3;
  for (const ScoredId& c : prev.entries) {
    const Record* r = db.find(c.record_id);
    if (r == nullptr) throw std::invalid_argument("stage3: unknown candidate id " + c.record_id);
    imaging::ImageBuffer ref;
    try {
      ref = png::read_file((fs::path(db_root) / r->image_path).string());
    } catch (const std::exception& e) {
      if (warnings != nullptr) {
        warnings->push_back("skipped reference " + r->id + ": " + e.what());
      }
      continue;
    }
    ref = match_channels(ref, query_image.channels);
    if (ref.height != query_image.height || ref.width != query_image.width) {
      ref = imaging::resize_bilinear(ref, query_image.height, query_image.width);
    }
    out.entries.push_back({r->id, imaging::ssim(query_image, ref)});
  }
  rank_and_trim(out.entries, k3, /*descending=*/true);
  return out;
}

RetrievalTrace retrieve_trace(const Record& query, const imaging::ImageBuffer& query_image,
                              const Database& db, const std::string& db_root, std::size_t k1,
                              std::size_t k2, std::size_t k3) {
  if (db.size() == 0) throw std::invalid_argument("retrieve: empty database");
  if (k1 < 1 || k2 < 1 || k3 < 1) throw std::invalid_argument("retrieve: k values must be >= 1");
  RetrievalTrace trace;
  trace.stage1 = stage1_semantic(query, db, std::min(k1, db.size()));
  trace.stage2 = stage2_visual(query, trace.stage1, db, std::min(k2, trace.stage1.entries.size()));
  trace.stage3 = stage3_structural(query_image, trace.stage2, db, db_root,
                                   std::min(k3, trace.stage2.entries.size()), &trace.warnings);
  return trace;
}

CandidateSet retrieve(const Record& query, const imaging::ImageBuffer& query_image,
                      const Database& db, const std::string& db_root, std::size_t k1,
                      std::size_t k2, std::size_t k3) {
  return retrieve_trace(query, query_image, db, db_root, k1, k2, k3).stage3;
}

EnsembleVote majority_vote(std::span<const int> verdicts) {
  if (verdicts.size() != 3) throw std::invalid_argument("majority_vote: expected 3 verdicts");
  EnsembleVote vote;
  int sum = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    vote.verdicts[i] = verdicts[i] != 0 ? 1 : 0;
    sum += vote.verdicts[i];
  }
  vote.decision = sum >= 2 ? 1 : 0;
  return vote;
}

AssessOutcome assess(const imaging::ImageBuffer& query_image, const CandidateSet& references,
                     const Database& db, const std::string& db_root, const std::string& query_id,
                     const std::string& prompt, std::span<const vlm::EndpointConfig> endpoints) {
  if (endpoints.size() != 3) throw std::invalid_argument("assess: expected 3 endpoints");

  vlm::AssessmentRequest base;
  base.prompt = prompt;
  base.query_png = png::encode(query_image);
  for (const ScoredId& ref : references.entries) {
    const Record* r = db.find(ref.record_id);
    if (r == nullptr) throw std::invalid_argument("assess: unknown reference id " + ref.record_id);
    base.reference_pngs.push_back(read_file_bytes((fs::path(db_root) / r->image_path).string()));
  }

  AssessOutcome out;
  std::array<int, 3> verdicts{};
  for (std::size_t i = 0; i < 3; ++i) {
    vlm::AssessmentRequest req = base;
    req.request_id = query_id + "/" + std::to_string(i);
    out.digests[i] = vlm::request_digest(req);
    out.results[i] = query_endpoint(endpoints[i], req);
    verdicts[i] = out.results[i].outcome == vlm::CallOutcome::ok ? out.results[i].verdict : 0;
  }
  out.vote = majority_vote(verdicts);
  return out;
}

namespace {

struct QueryOutput {
  PyramidRow row;
  std::vector<AuditEntry> audit;
  bool failed = false;
};

QueryOutput process_query(const Record& query, const std::string& query_root, const Database& db,
                          const std::string& db_root, const DistillConfig& config) {
  QueryOutput out;
  out.row.id = query.id;
  try {
    const std::vector<std::uint8_t> query_bytes =
        read_file_bytes((fs::path(query_root) / query.image_path).string());
    const imaging::ImageBuffer query_image = png::decode(query_bytes);

    const RetrievalTrace trace =
        retrieve_trace(query, query_image, db, db_root, config.k1, config.k2, config.k3);
    out.row.warnings = trace.warnings;
    for (const ScoredId& s : trace.stage1.entries) out.row.stage1_scores.push_back(s.score);
    for (const ScoredId& s : trace.stage2.entries) out.row.stage2_scores.push_back(s.score);
    for (const ScoredId& s : trace.stage3.entries) {
      out.row.stage3_scores.push_back(s.score);
      out.row.reference_ids.push_back(s.record_id);
    }

    const AssessOutcome verdicts = assess(query_image, trace.stage3, db, db_root, query.id,
                                          config.prompt, config.endpoints);
    out.row.verdicts = verdicts.vote.verdicts;
    out.row.decision = verdicts.vote.decision;
    out.row.tier = verdicts.vote.decision == 1 ? PyramidTier::middle : PyramidTier::bottom;
    for (std::size_t i = 0; i < 3; ++i) {
      const vlm::VerdictResult& r = verdicts.results[i];
      AuditEntry entry;
      entry.request_id = query.id + "/" + std::to_string(i);
      entry.endpoint = config.endpoints[i].url;
      entry.digest = verdicts.digests[i];
      entry.latency_ms = r.latency_ms;
      entry.outcome = vlm::to_string(r.outcome);
      entry.verdict = r.verdict;
      entry.attempts = r.attempts;
      entry.error = r.error;
      out.audit.push_back(std::move(entry));
    }
  } catch (const std::exception& e) {
    out.failed = true;
    out.row.tier = PyramidTier::bottom;
    out.row.decision = 0;
    out.row.verdicts = {0, 0, 0};
    out.row.warnings.push_back(std::string("unprocessable: ") + e.what());
    AuditEntry entry;
    entry.request_id = query.id;
    entry.outcome = "unprocessable";
    entry.error = e.what();
    out.audit.assign(1, std::move(entry));
  }
  return out;
}

}  // namespace

DistillResult distill_corpus(const std::vector<Record>& queries, const std::string& query_root,
                             const Database& db, const std::string& db_root,
                             const DistillConfig& config) {
  if (config.endpoints.size() != 3) {
    throw std::invalid_argument("distill: exactly 3 endpoints are required");
  }
  if (config.max_in_flight < 1) {
    throw std::invalid_argument("distill: max_in_flight must be >= 1");
  }
  if (db.size() == 0) throw std::invalid_argument("distill: empty database");

  std::vector<QueryOutput> outputs(queries.size());
  std::atomic<std::size_t> next{0};
  const std::size_t worker_count =
      std::min<std::size_t>(static_cast<std::size_t>(config.max_in_flight),
                            std::max<std::size_t>(queries.size(), 1));
  std::vector<std::thread> workers;
  workers.reserve(worker_count);
  for (std::size_t w = 0; w < worker_count; ++w) {
    workers.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= queries.size()) break;
        outputs[i] = process_query(queries[i], query_root, db, db_root, config);
      }
    });
  }
  for (std::thread& t : workers) t.join();

  DistillResult result;
  result.rows.reserve(db.size() + queries.size());
  for (const Record& r : db.records()) {
    PyramidRow row;
    row.id = r.id;
    row.tier = PyramidTier::top;
    result.rows.push_back(std::move(row));
  }
  for (QueryOutput& out : outputs) {
    if (out.failed) result.failed_queries += 1;
    result.rows.push_back(std::move(out.row));
    for (AuditEntry& e : out.audit) result.audit.push_back(std::move(e));
  }
  return result;
}

std::vector<Record> read_record_manifest(const std::string& path, Tier default_tier) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read manifest: " + path);
  const fs::path dir = fs::path(path).parent_path();
  std::vector<Record> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    line_no += 1;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw std::runtime_error(where + ": not a JSON object");
    }
    const auto need_string = [&](const char* key) {
      if (!j.contains(key) || !j[key].is_string()) {
        throw std::runtime_error(where + ": missing string field '" + key + "'");
      }
      return j[key].get<std::string>();
    };
    Record r;
    r.id = need_string("id");
    r.image_path = need_string("image_path");
    r.caption_embedding = read_embedding_file((dir / need_string("caption_embedding_path")).string());
    r.visual_embedding = read_embedding_file((dir / need_string("visual_embedding_path")).string());
    r.caption = j.contains("caption") && j["caption"].is_string() ? j["caption"].get<std::string>() : "";
    r.tier = j.contains("tier") && j["tier"].is_string() ? tier_from_string(j["tier"].get<std::string>())
                                                         : default_tier;
    records.push_back(std::move(r));
  }
  return records;
}

void write_record_manifest(const std::string& path, std::span<const Record> records) {
  const fs::path dir = fs::path(path).parent_path();
  const fs::path emb_dir = dir / "emb";
  fs::create_directories(emb_dir);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  for (const Record& r : records) {
    const std::string cap_rel = "emb/" + r.id + ".cap.emb";
    const std::string vis_rel = "emb/" + r.id + ".vis.emb";
    write_embedding_file((dir / cap_rel).string(), r.caption_embedding);
    write_embedding_file((dir / vis_rel).string(), r.visual_embedding);
    ordered_json j;
    j["id"] = r.id;
    j["caption"] = r.caption;
    j["caption_embedding_path"] = cap_rel;
    j["visual_embedding_path"] = vis_rel;
    j["image_path"] = r.image_path;
    j["tier"] = to_string(r.tier);
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("manifest write failed: " + path);
}

std::vector<double> read_embedding_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read embedding file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || bytes.compare(0, 4, "EMB1") != 0) {
    throw std::runtime_error("bad embedding file header: " + path);
  }
  std::uint32_t dim = 0;
  for (int i = 0; i < 4; ++i) {
    dim |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  }
  if (bytes.size() != 8 + static_cast<std::size_t>(dim) * 4) {
    throw std::runtime_error("embedding file size mismatch: " + path);
  }
  std::vector<double> values(dim);
  for (std::uint32_t i = 0; i < dim; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i * 4 + b]))
              << (8 * b);
    }
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    values[i] = static_cast<double>(f);
  }
  return values;
}

void write_embedding_file(const std::string& path, std::span<const double> values) {
  std::string bytes = "EMB1";
  const auto dim = static_cast<std::uint32_t>(values.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((dim >> (8 * i)) & 0xFF));
  for (double v : values) {
    const auto f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write embedding file: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("embedding write failed: " + path);
}

void write_pyramid_jsonl(const std::string& path, std::span<const PyramidRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write pyramid file: " + path);
  for (const PyramidRow& r : rows) {
    ordered_json j;
    j["id"] = r.id;
    j["tier"] = to_string(r.tier);
    j["stage1_scores"] = r.stage1_scores;
    j["stage2_scores"] = r.stage2_scores;
    j["stage3_scores"] = r.stage3_scores;
    j["reference_ids"] = r.reference_ids;
    j["verdicts"] = r.verdicts;
    j["decision"] = r.decision;
    j["warnings"] = r.warnings;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("pyramid write failed: " + path);
}

void write_audit_jsonl(const std::string& path, std::span<const AuditEntry> entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write audit file: " + path);
  for (const AuditEntry& e : entries) {
    ordered_json j;
    j["request_id"] = e.request_id;
    j["endpoint"] = e.endpoint;
    j["digest"] = e.digest;
    j["latency_ms"] = e.latency_ms;
    j["outcome"] = e.outcome;
    j["verdict"] = e.verdict;
    j["attempts"] = e.attempts;
    j["error"] = e.error;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("audit write failed: " + path);
}

}  // namespace rainkit::distill
