#include <doctest.h>

#include <cctype>
#include <json.hpp>
#include <string>

#include "rainkit/imaging.hpp"
#include "rainkit/png_io.hpp"
#include "rainkit/vlm_client.hpp"

using namespace rainkit;
using namespace rainkit::vlm;

namespace {

AssessmentRequest make_request(std::uint64_t seed) {
  AssessmentRequest req;
  req.request_id = "q-0/0";
  req.prompt = "does the restored image match the references";
  req.query_png = png::encode(imaging::synth_clean(seed, 16));
  req.reference_pngs.push_back(png::encode(imaging::synth_clean(seed + 1, 16)));
  return req;
}

}  // namespace

TEST_CASE("mock rule strings parse and print back") {
  CHECK(MockRule::parse("accept").kind == MockRule::Kind::accept);
  CHECK(MockRule::parse("reject").kind == MockRule::Kind::reject);
  const MockRule s = MockRule::parse("ssim:0.85");
  CHECK(s.kind == MockRule::Kind::ssim_threshold);
  CHECK(s.value == doctest::Approx(0.85));
  const MockRule h = MockRule::parse("hash:0.25");
  CHECK(h.kind == MockRule::Kind::hash_fraction);
  CHECK(h.value == doctest::Approx(0.25));

  CHECK(MockRule::parse(MockRule::parse("ssim:0.5").label()).kind ==
        MockRule::Kind::ssim_threshold);
  CHECK(MockRule::parse("accept").label() == "accept");

  CHECK_THROWS_AS(MockRule::parse(""), std::invalid_argument);
  CHECK_THROWS_AS(MockRule::parse("maybe"), std::invalid_argument);
  CHECK_THROWS_AS(MockRule::parse("ssim:"), std::invalid_argument);
  CHECK_THROWS_AS(MockRule::parse("ssim:1.5"), std::invalid_argument);
  CHECK_THROWS_AS(MockRule::parse("ssim:-0.1"), std::invalid_argument);
  CHECK_THROWS_AS(MockRule::parse("hash:abc"), std::invalid_argument);
  CHECK_THROWS_AS(MockRule::parse("hash:0.5x"), std::invalid_argument);
}

TEST_CASE("mock url detection") {
  CHECK(is_mock_url("mock:accept"));
  CHECK(is_mock_url("mock:ssim:0.9"));
  CHECK_FALSE(is_mock_url("http://localhost:8080/assess"));
  CHECK_FALSE(is_mock_url("moc:accept"));
}

TEST_CASE("request payload has a fixed key order") {
  const AssessmentRequest req = make_request(10);
  const std::string body = request_to_json(req);
  CHECK(body.rfind("{\"request_id\":", 0) == 0);

  const nlohmann::json parsed = nlohmann::json::parse(body);
  CHECK(parsed.at("request_id") == "q-0/0");
  CHECK(parsed.at("prompt") == req.prompt);
  REQUIRE(parsed.at("references").is_array());
  REQUIRE(parsed.at("references").size() == 1);
  const std::vector<std::uint8_t> query_bytes =
      png::base64_decode(parsed.at("query_image").get<std::string>());
  CHECK(query_bytes == req.query_png);
}

TEST_CASE("request digest is stable and id-sensitive") {
  AssessmentRequest req = make_request(11);
  const std::string d1 = request_digest(req);
  const std::string d2 = request_digest(req);
  CHECK(d1 == d2);
  CHECK(d1.size() == 16);
  for (char c : d1) CHECK(std::isxdigit(static_cast<unsigned char>(c)) != 0);
  req.request_id = "q-0/1";
  CHECK(request_digest(req) != d1);
}

TEST_CASE("accept and reject rules answer unconditionally") {
  EndpointConfig ep;
  ep.max_retries = 2;
  const AssessmentRequest req = make_request(12);

  ep.url = "mock:accept";
  VerdictResult r = query_endpoint(ep, req);
  CHECK(r.outcome == CallOutcome::ok);
  CHECK(r.verdict == 1);
  CHECK(r.attempts == 1);
  CHECK(r.model == "mock/accept");

  ep.url = "mock:reject";
  r = query_endpoint(ep, req);
  CHECK(r.outcome == CallOutcome::ok);
  CHECK(r.verdict == 0);
}

TEST_CASE("hash rule is a deterministic bucket test") {
  EndpointConfig ep;
  const AssessmentRequest req = make_request(13);

  ep.url = "mock:hash:0";
  CHECK(query_endpoint(ep, req).verdict == 0);
  ep.url = "mock:hash:1";
  CHECK(query_endpoint(ep, req).verdict == 1);

  ep.url = "mock:hash:0.5";
  const int first = query_endpoint(ep, req).verdict;
  for (int i = 0; i < 5; ++i) CHECK(query_endpoint(ep, req).verdict == first);

  // Over many distinct requests the accept rate lands near the fraction.
  int accepted = 0;
  const int trials = 400;
  for (int i = 0; i < trials; ++i) {
    AssessmentRequest varied = req;
    varied.request_id = "q-" + std::to_string(i) + "/0";
    accepted += query_endpoint(ep, varied).verdict;
  }
  CHECK(accepted > trials / 4);
  CHECK(accepted < 3 * trials / 4);
}

TEST_CASE("ssim rule compares the decoded images") {
  const imaging::ImageBuffer clean = imaging::synth_clean(21, 24);
  AssessmentRequest req;
  req.request_id = "q-1/0";
  req.prompt = "p";
  req.query_png = png::encode(clean);
  req.reference_pngs.push_back(png::encode(clean));

  EndpointConfig ep;
  ep.url = "mock:ssim:0.99";
  CHECK(query_endpoint(ep, req).verdict == 1);

  // A heavily degraded reference falls under a strict threshold.
  const imaging::ImageBuffer far =
      imaging::degrade(clean, {imaging::DegradationKind::NRD, 1.0, 99});
  req.reference_pngs[0] = png::encode(far);
  CHECK(query_endpoint(ep, req).verdict == 0);

  req.reference_pngs.clear();
  CHECK(query_endpoint(ep, req).verdict == 0);
}

TEST_CASE("oversized payloads fail before any dispatch") {
  EndpointConfig ep;
  ep.url = "mock:accept";
  ep.max_payload_bytes = 64;
  ep.max_retries = 3;
  const AssessmentRequest req = make_request(14);
  const VerdictResult r = query_endpoint(ep, req);
  CHECK(r.outcome == CallOutcome::protocol_error);
  CHECK(r.attempts == 0);
  CHECK(r.verdict == 0);
  CHECK_FALSE(r.error.empty());
}

TEST_CASE("transport errors against an unreachable host exhaust retries") {
  EndpointConfig ep;
  ep.url = "http://127.0.0.1:9/assess";
  ep.max_retries = 1;
  ep.timeout_ms = 200;
  ep.backoff_ms = 1;
  const VerdictResult r = query_endpoint(ep, make_request(15));
  CHECK(r.outcome == CallOutcome::transport_error);
  CHECK(r.attempts == 2);
  CHECK(r.verdict == 0);
}

TEST_CASE("call outcomes have stable names") {
  CHECK(to_string(CallOutcome::ok) == std::string("ok"));
  CHECK(to_string(CallOutcome::transport_error) == std::string("transport_error"));
  CHECK(to_string(CallOutcome::protocol_error) == std::string("protocol_error"));
}

TEST_CASE("invalid endpoint urls are rejected") {
  EndpointConfig ep;
  ep.url = "ftp://example.com/assess";
  CHECK_THROWS_AS(query_endpoint(ep, make_request(16)), std::invalid_argument);
}
