#pragma once

/**
 * Client for binary keep/drop verdicts on images, spoken over HTTP or served
 * by deterministic in-process mock endpoints.
 *
 * Wire format: POST JSON {"request_id", "prompt", "query_image": base64 PNG,
 * "references": [base64 PNG, ...]}; response {"verdict": bool, "model":
 * string, "rationale"?: string}. Transport failures (connect/timeout or
 * non-2xx status) and protocol failures (2xx with a malformed body) both
 * retry with exponential backoff.
 */

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rainkit::vlm {

struct AssessmentRequest {
  std::string request_id;
  std::string prompt;
  std::vector<std::uint8_t> query_png;
  std::vector<std::vector<std::uint8_t>> reference_pngs;
};

// Canonical JSON payload as posted on the wire.
std::string request_to_json(const AssessmentRequest& req);
// 16-hex-digit FNV-1a digest of the canonical payload; used for audit trails.
std::string request_digest(const AssessmentRequest& req);

struct MockRule {
  enum class Kind { accept, reject, ssim_threshold, hash_fraction };
  Kind kind = Kind::accept;
  double value = 0.0;

  // "accept" | "reject" | "ssim:<threshold>" | "hash:<fraction>"
  static MockRule parse(const std::string& text);
  std::string label() const;
};

struct EndpointConfig {
  std::string url;  // http://host:port/path, or mock:<rule>
  int timeout_ms = 30000;
  int max_retries = 2;     // total attempts = 1 + max_retries
  int backoff_ms = 500;    // doubles after every failed attempt
  std::size_t max_payload_bytes = 32ull << 20;
};

enum class CallOutcome { ok, transport_error, protocol_error };
const char* to_string(CallOutcome outcome);

struct VerdictResult {
  CallOutcome outcome = CallOutcome::transport_error;
  int verdict = 0;  // 1 = keep; failures lean reject and stay 0
  std::string model;
  std::string rationale;
  int attempts = 0;
  double latency_ms = 0.0;
  std::string error;  // last failure description, empty on success
};

bool is_mock_url(const std::string& url);

// Deterministic verdict computed from the request bytes alone.
VerdictResult mock_verdict(const MockRule& rule, const AssessmentRequest& req);

// Dispatches to the mock or performs the HTTP call with retries.
VerdictResult query_endpoint(const EndpointConfig& endpoint, const AssessmentRequest& req);

}  // namespace rainkit::vlm
