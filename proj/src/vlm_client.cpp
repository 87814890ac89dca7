#include "rainkit/vlm_client.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "rainkit/imaging.hpp"
#include "rainkit/png_io.hpp"
#include "rainkit/rng.hpp"

namespace rainkit::vlm {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
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

}  // namespace

std::string request_to_json(const AssessmentRequest& req) {
  ordered_json j;
  j["request_id"] = req.request_id;
  j["prompt"] = req.prompt;
  j["query_image"] = png::base64_encode(req.query_png);
  json refs = json::array();
  for (const auto& r : req.reference_pngs) refs.push_back(png::base64_encode(r));
  j["references"] = std::move(refs);
  return j.dump();
}

std::string request_digest(const AssessmentRequest& req) {
  const std::string payload = request_to_json(req);
  const std::uint64_t h = fnv1a64(payload.data(), payload.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

MockRule MockRule::parse(const std::string& text) {
  MockRule rule;
  if (text == "accept") {
    rule.kind = Kind::accept;
    return rule;
  }
  if (text == "reject") {
    rule.kind = Kind::reject;
    return rule;
  }
  const auto parse_value = [&](const std::string& prefix) {
    const std::string num = text.substr(prefix.size());
    const char* s = num.c_str();
    char* end = nullptr;
    const double v = std::strtod(s, &end);
    if (end == s || *end != '\0' || !(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("mock rule needs a value in [0,1]: " + text);
    }
    return v;
  };
  if (text.rfind("ssim:", 0) == 0) {
    rule.kind = Kind::ssim_threshold;
    rule.value = parse_value("ssim:");
    return rule;
  }
  if (text.rfind("hash:", 0) == 0) {
    rule.kind = Kind::hash_fraction;
    rule.value = parse_value("hash:");
    return rule;
  }
  throw std::invalid_argument("unknown mock rule: " + text);
}

std::string MockRule::label() const {
  char buf[48];
  switch (kind) {
    case Kind::accept: return "accept";
    case Kind::reject: return "reject";
    case Kind::ssim_threshold:
      std::snprintf(buf, sizeof(buf), "ssim:%g", value);
      return buf;
    case Kind::hash_fraction:
      std::snprintf(buf, sizeof(buf), "hash:%g", value);
      return buf;
  }
  return "accept";
}

const char* to_string(CallOutcome outcome) {
  switch (outcome) {
    case CallOutcome::ok: return "ok";
    case CallOutcome::transport_error: return "transport_error";
    case CallOutcome::protocol_error: return "protocol_error";
  }
  return "transport_error";
}

bool is_mock_url(const std::string& url) { return url.rfind("mock:", 0) == 0; }

VerdictResult mock_verdict(const MockRule& rule, const AssessmentRequest& req) {
  VerdictResult res;
  res.attempts = 1;
  res.model = "mock/" + rule.label();
  res.outcome = CallOutcome::ok;
  char buf[96];
  try {
    switch (rule.kind) {
      case MockRule::Kind::accept:
        res.verdict = 1;
        res.rationale = "fixed accept";
        break;
      case MockRule::Kind::reject:
        res.verdict = 0;
        res.rationale = "fixed reject";
        break;
      case MockRule::Kind::hash_fraction: {
        const std::string payload = request_to_json(req);
        const auto bucket =
            static_cast<int>(fnv1a64(payload.data(), payload.size()) % 10000ull);
        const int cut = static_cast<int>(std::lround(rule.value * 10000.0));
        res.verdict = bucket < cut ? 1 : 0;
        std::snprintf(buf, sizeof(buf), "hash bucket %d vs cut %d", bucket, cut);
        res.rationale = buf;
        break;
      }
      case MockRule::Kind::ssim_threshold: {
        if (req.reference_pngs.empty()) {
          res.verdict = 0;
          res.rationale = "no references";
          break;
        }
        const imaging::ImageBuffer query = png::decode(req.query_png);
        double sum = 0.0;
        for (const auto& bytes : req.reference_pngs) {
          imaging::ImageBuffer ref = match_channels(png::decode(bytes), query.channels);
          if (ref.height != query.height || ref.width != query.width) {
            ref = imaging::resize_bilinear(ref, query.height, query.width);
          }
          sum += imaging::ssim(query, ref);
        }
        const double mean = sum / static_cast<double>(req.reference_pngs.size());
        res.verdict = mean > rule.value ? 1 : 0;
        std::snprintf(buf, sizeof(buf), "mean ssim %.6f vs threshold %g", mean, rule.value);
        res.rationale = buf;
        break;
      }
    }
  } catch (const std::exception& e) {
    res.outcome = CallOutcome::protocol_error;
    res.verdict = 0;
    res.error = e.what();
  }
  return res;
}

namespace {

struct ParsedUrl {
  std::string host;
  int port = 80;
  std::string path = "/";
};

ParsedUrl parse_http_url(const std::string& url) {
  const std::string prefix = "http://";
  if (url.rfind(prefix, 0) != 0) {
    throw std::invalid_argument("endpoint url must be http:// or mock:<rule>, got: " + url);
  }
  ParsedUrl out;
  std::string rest = url.substr(prefix.size());
  const std::size_t slash = rest.find('/');
  std::string host_port = rest.substr(0, slash);
  if (slash != std::string::npos) out.path = rest.substr(slash);
  const std::size_t colon = host_port.find(':');
  if (colon == std::string::npos) {
    out.host = host_port;
  } else {
    out.host = host_port.substr(0, colon);
    out.port = std::atoi(host_port.c_str() + colon + 1);
  }
  if (out.host.empty() || out.port <= 0 || out.port > 65535) {
    throw std::invalid_argument("cannot parse endpoint url: " + url);
  }
  return out;
}

// One POST attempt. Returns true on success and fills the result; on failure
// fills outcome/error and returns false.
bool attempt_post(httplib::Client& client, const std::string& path, const std::string& payload,
                  VerdictResult& res) {
  httplib::Result http = client.Post(path, payload, "application/json");
  if (!http) {
    res.outcome = CallOutcome::transport_error;
    res.error = "transport: " + httplib::to_string(http.error());
    return false;
  }
  if (http->status < 200 || http->status >= 300) {
    res.outcome = CallOutcome::transport_error;
    res.error = "transport: http status " + std::to_string(http->status);
    return false;
  }
  const json body = json::parse(http->body, nullptr, false);
  if (body.is_discarded() || !body.is_object() || !body.contains("verdict") ||
      !body["verdict"].is_boolean() || !body.contains("model") || !body["model"].is_string()) {
    res.outcome = CallOutcome::protocol_error;
    res.error = "protocol: malformed response body";
    return false;
  }
  res.outcome = CallOutcome::ok;
  res.verdict = body["verdict"].get<bool>() ? 1 : 0;
  res.model = body["model"].get<std::string>();
  if (body.contains("rationale") && body["rationale"].is_string()) {
    res.rationale = body["rationale"].get<std::string>();
  }
  res.error.clear();
  return true;
}

}  // namespace

VerdictResult query_endpoint(const EndpointConfig& endpoint, const AssessmentRequest& req) {
  const double start = now_ms();
  const std::string payload = request_to_json(req);

  VerdictResult res;
  if (payload.size() > endpoint.max_payload_bytes) {
    res.outcome = CallOutcome::protocol_error;
    res.attempts = 0;
    res.error = "payload of " + std::to_string(payload.size()) + " bytes exceeds limit of " +
                std::to_string(endpoint.max_payload_bytes);
    res.latency_ms = now_ms() - start;
    return res;
  }

  if (is_mock_url(endpoint.url)) {
    const MockRule rule = MockRule::parse(endpoint.url.substr(5));
    res = mock_verdict(rule, req);
    res.latency_ms = now_ms() - start;
    return res;
  }

  const ParsedUrl url = parse_http_url(endpoint.url);
  httplib::Client client(url.host, url.port);
  const time_t sec = endpoint.timeout_ms / 1000;
  const time_t usec = (endpoint.timeout_ms % 1000) * 1000;
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  client.set_write_timeout(sec, usec);

  const int max_attempts = 1 + std::max(endpoint.max_retries, 0);
  int backoff = std::max(endpoint.backoff_ms, 0);
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    res.attempts = attempt;
    if (attempt_post(client, url.path, payload, res)) break;
    if (attempt < max_attempts && backoff > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      backoff *= 2;
    }
  }
  res.latency_ms = now_ms() - start;
  return res;
}

}  // namespace rainkit::vlm
