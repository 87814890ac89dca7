#pragma once

/**
 * Retrieval-guided dataset distillation.
 *
 * Candidates are matched against a reference database through a three-stage
 * cascade that narrows by caption-embedding L2 distance, then
 * visual-embedding cosine similarity, then structural similarity on decoded
 * images. The survivors serve as references for an ensemble of three
 * verdict endpoints whose majority vote decides keep/drop.
 */

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rainkit/imaging.hpp"
#include "rainkit/vlm_client.hpp"

namespace rainkit::distill {

enum class Tier { real_reference, candidate };
const char* to_string(Tier tier);
Tier tier_from_string(const std::string& name);

struct Record {
  std::string id;
  std::vector<double> caption_embedding;
  std::vector<double> visual_embedding;
  std::string image_path;  // relative to the owning manifest's directory
  Tier tier = Tier::candidate;
  std::string caption;
};

class Database {
 public:
  // Validates consistent embedding dimensions and unique non-empty ids.
  static Database build(std::vector<Record> records);

  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t i) const { return records_[i]; }
  const Record* find(const std::string& id) const;
  const std::vector<Record>& records() const { return records_; }
  std::size_t caption_dim() const { return caption_dim_; }
  std::size_t visual_dim() const { return visual_dim_; }

 private:
  std::vector<Record> records_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::size_t caption_dim_ = 0;
  std::size_t visual_dim_ = 0;
};

double l2_distance(std::span<const double> a, std::span<const double> b);
// Throws on a zero-magnitude vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct ScoredId {
  std::string record_id;
  double score = 0.0;
};

struct CandidateSet {
  int stage = 0;
  std::vector<ScoredId> entries;  // rank order; ties broken by ascending id
};

// Stage 1: smallest caption-embedding L2 distance. Requires 1 <= k1 <= db size.
CandidateSet stage1_semantic(const Record& query, const Database& db, std::size_t k1);
// Stage 2: largest visual-embedding cosine similarity among the stage-1 set.
CandidateSet stage2_visual(const Record& query, const CandidateSet& prev,
                           const Database& db, std::size_t k2);
// Stage 3: largest structural similarity between the decoded query image and
// each candidate image (resized to the query's dimensions). Unreadable
// candidate images are skipped with a warning.
CandidateSet stage3_structural(const imaging::ImageBuffer& query_image,
                               const CandidateSet& prev, const Database& db,
                               const std::string& db_root, std::size_t k3,
                               std::vector<std::string>* warnings = nullptr);

struct RetrievalTrace {
  CandidateSet stage1, stage2, stage3;
  std::vector<std::string> warnings;
};

// Full cascade; k2/k3 are clamped to the candidates actually available.
RetrievalTrace retrieve_trace(const Record& query, const imaging::ImageBuffer& query_image,
                              const Database& db, const std::string& db_root,
                              std::size_t k1, std::size_t k2, std::size_t k3);
CandidateSet retrieve(const Record& query, const imaging::ImageBuffer& query_image,
                      const Database& db, const std::string& db_root,
                      std::size_t k1, std::size_t k2, std::size_t k3);

struct EnsembleVote {
  std::array<int, 3> verdicts{};  // 0/1 per endpoint
  int decision = 0;               // 1 iff at least two verdicts are 1
};

EnsembleVote majority_vote(std::span<const int> verdicts);

struct AssessOutcome {
  EnsembleVote vote;
  std::array<vlm::VerdictResult, 3> results;
  std::array<std::string, 3> digests;  // canonical payload digest per endpoint
};

// Encodes the query and reference images, then queries all three endpoints
// with request ids "<query_id>/<endpoint index>". A failed endpoint
// contributes verdict 0 and keeps its error in the result.
AssessOutcome assess(const imaging::ImageBuffer& query_image, const CandidateSet& references,
                     const Database& db, const std::string& db_root,
                     const std::string& query_id, const std::string& prompt,
                     std::span<const vlm::EndpointConfig> endpoints);

struct DistillConfig {
  std::size_t k1 = 50;
  std::size_t k2 = 20;
  std::size_t k3 = 5;
  std::string prompt =
      "Does the query image depict the same kind of rain degradation as the references?";
  std::vector<vlm::EndpointConfig> endpoints;  // exactly 3
  int max_in_flight = 8;
};

// Pyramid tiers: real references on top, accepted candidates in the middle,
// rejected candidates at the bottom.
enum class PyramidTier { top, middle, bottom };
const char* to_string(PyramidTier tier);

struct PyramidRow {
  std::string id;
  PyramidTier tier = PyramidTier::bottom;
  std::vector<double> stage1_scores, stage2_scores, stage3_scores;
  std::vector<std::string> reference_ids;  // stage-3 survivors
  std::array<int, 3> verdicts{};
  int decision = 0;
  std::vector<std::string> warnings;
};

struct AuditEntry {
  std::string request_id;
  std::string endpoint;
  std::string digest;
  double latency_ms = 0.0;
  std::string outcome;
  int verdict = 0;
  int attempts = 0;
  std::string error;
};

struct DistillResult {
  // Top rows for every database reference, then one row per query in input
  // order (middle or bottom by decision).
  std::vector<PyramidRow> rows;
  std::vector<AuditEntry> audit;    // one per endpoint call, query-major
  std::size_t failed_queries = 0;   // queries with unreadable images
};

// Runs the cascade and the ensemble for every query. Queries are processed
// by a bounded worker pool; outputs keep the input order regardless of
// completion order.
DistillResult distill_corpus(const std::vector<Record>& queries, const std::string& query_root,
                             const Database& db, const std::string& db_root,
                             const DistillConfig& config);

// Manifest I/O: one JSON object per line with id, caption,
// caption_embedding_path, visual_embedding_path, image_path and optional
// tier. Embedding files are loaded eagerly, resolved relative to the
// manifest directory; image paths are kept as written.
std::vector<Record> read_record_manifest(const std::string& path, Tier default_tier);
// Writes the manifest plus one pair of embedding files per record under
// "<manifest dir>/emb/".
void write_record_manifest(const std::string& path, std::span<const Record> records);

// Embedding files: magic "EMB1", u32 dimension, f32 little-endian values.
std::vector<double> read_embedding_file(const std::string& path);
void write_embedding_file(const std::string& path, std::span<const double> values);

void write_pyramid_jsonl(const std::string& path, std::span<const PyramidRow> rows);
void write_audit_jsonl(const std::string& path, std::span<const AuditEntry> entries);

}  // namespace rainkit::distill
