#include "partcraft/error.hpp"
#include "partcraft/service.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <chrono>

using namespace partcraft;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

// Paints the image a gray level derived from the request so outputs differ.
class FlatGenerator final : public ImageGenerator {
 public:
  GenerationResult generate(const GenerationRequest& request) const override {
    ++calls;
    if (request.style_suffix == "explode") throw BackendError("generator failed");
    GenerationResult out;
    out.image = Image(32, 32, static_cast<float>(request.seed % 10) / 10.0f);
    out.provenance.composition = request.composition;
    out.provenance.seed = request.seed;
    out.provenance.steps = request.steps;
    out.provenance.guidance = request.guidance;
    out.provenance.style_suffix = request.style_suffix;
    return out;
  }
  int parts() const override { return 3; }
  int variants() const override { return 4; }
  mutable std::atomic<int> calls{0};
};

// Toy dictionary whose image paths point at PNGs written under `dir`.
std::shared_ptr<const PartDictionary> dictionary_in(const std::filesystem::path& dir) {
  const auto& corpus = oracle::toy_corpus();
  auto dict = std::make_shared<PartDictionary>(corpus.dictionary);
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < dict->images.size(); ++i) {
    dict->images[i].path = dir / (dict->images[i].id + ".png");
    write_png(corpus.images[i].second, dict->images[i].path);
  }
  dict->label_hints["1:2"] = "round head";
  return dict;
}

struct Harness {
  oracle::TempDir dir;
  std::shared_ptr<FlatGenerator> generator = std::make_shared<FlatGenerator>();
  std::unique_ptr<PartService> service;
  std::unique_ptr<httplib::Client> client;

  explicit Harness(int workers = 1) {
    ServiceConfig c;
    c.data_dir = dir.path / "data";
    c.workers = workers;
    c.default_page_size = 5;
    c.defaults.steps = 7;
    c.defaults.guidance = 1.0;
    service = std::make_unique<PartService>(dictionary_in(dir.path / "images"), generator, c);
    client = std::make_unique<httplib::Client>("127.0.0.1", service->start_http());
  }

  json get_json(const std::string& path, int expected) const {
    auto res = client->Get(path);
    EXPECT_TRUE(res) << path;
    if (!res) return {};
    EXPECT_EQ(res->status, expected) << path << " " << res->body;
    EXPECT_EQ(res->get_header_value("Content-Type"), "application/json");
    return json::parse(res->body);
  }
};

}  // namespace

TEST(RequestParsing, AcceptsArraysAndCompactStrings) {
  GenerationRequest defaults;
  defaults.steps = 9;
  const auto a = parse_generation_request(json{{"composition", {1, nullptr, 3, 4}}, {"seed", 5}}, 3, 4, defaults);
  EXPECT_EQ(format_composition(a.composition), "0:1,1:-,2:3,3:4");
  EXPECT_EQ(a.seed, 5u);
  EXPECT_EQ(a.steps, 9);
  const auto b = parse_generation_request(
      json{{"compose", "0:2,3:1"}, {"style", "in ink"}, {"steps", 20}, {"guidance", 2.5}}, 3, 4);
  EXPECT_EQ(format_composition(b.composition), "0:2,1:-,2:-,3:1");
  EXPECT_EQ(b.style_suffix, "in ink");
  EXPECT_EQ(b.steps, 20);
  EXPECT_EQ(b.guidance, 2.5);
}

TEST(RequestParsing, ReportsEveryOffendingCode) {
  try {
    parse_generation_request(json{{"composition", {0, 2, "x", 9}}}, 3, 4);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    ASSERT_EQ(e.issues().size(), 3u);
    EXPECT_EQ(e.issues()[0].slot, 0);
    EXPECT_EQ(e.issues()[1].slot, 2);
    EXPECT_EQ(e.issues()[2].slot, 3);
    EXPECT_EQ(e.issues()[2].variant, 9);
  }
}

TEST(RequestParsing, RejectsMalformedBodies) {
  for (const json& body : {json::array(), json{{"seed", 1}}, json{{"composition", {1, 2}}},
                           json{{"composition", "1,2,3,4"}}, json{{"composition", {nullptr, nullptr, nullptr, nullptr}}},
                           json{{"compose", "0:1"}, {"steps", 0}}, json{{"compose", "0:1"}, {"seed", -1}},
                           json{{"compose", "0:1"}, {"style", 3}}, json{{"compose", "9:1"}}}) {
    EXPECT_THROW(parse_generation_request(body, 3, 4), ValidationError) << body.dump();
  }
}

TEST(Jobs, JsonRoundTrip) {
  Job job;
  job.id = "job-000003";
  job.sequence = 3;
  job.request.composition = parse_composition("0:1,2:4", 3);
  job.request.seed = 12;
  job.status = JobStatus::Done;
  job.image_id = "job-000003";
  Provenance p;
  p.composition = job.request.composition;
  p.seed = 12;
  job.provenance = p;
  job.created_at = "2026-01-01T00:00:00.000Z";
  const auto back = job_from_json(to_json(job));
  EXPECT_EQ(back.id, job.id);
  EXPECT_EQ(back.sequence, 3);
  EXPECT_EQ(back.status, JobStatus::Done);
  EXPECT_EQ(back.request.composition, job.request.composition);
  EXPECT_EQ(back.request.seed, 12u);
  EXPECT_EQ(back.image_id, job.image_id);
  EXPECT_EQ(back.provenance->seed, 12u);
  EXPECT_EQ(to_json(back), to_json(job));
  EXPECT_THROW(job_status_from_string("paused"), InputError);
}

TEST(Http, HealthReportsComponents) {
  Harness h;
  const auto j = h.get_json("/api/health", 200);
  EXPECT_EQ(j.at("status"), "ok");
  EXPECT_EQ(j.at("dictionary"), true);
  EXPECT_EQ(j.at("generator"), true);
  EXPECT_EQ(j.at("workers"), 1);
}

TEST(Http, PartsArePagedInSlotMajorOrder) {
  Harness h;
  const auto first = h.get_json("/api/parts", 200);
  EXPECT_EQ(first.at("total"), 16);
  EXPECT_EQ(first.at("page_size"), 5);
  ASSERT_EQ(first.at("entries").size(), 5u);
  EXPECT_EQ(first.at("entries")[0].at("token"), "<s0_v1>");
  EXPECT_EQ(first.at("entries")[4].at("slot"), 1);
  EXPECT_EQ(first.at("entries")[4].at("variant"), 1);

  std::vector<std::pair<int, int>> seen;
  for (int page = 1; page <= 4; ++page) {
    const auto j = h.get_json("/api/parts?page_size=5&page=" + std::to_string(page), 200);
    for (const auto& e : j.at("entries")) seen.emplace_back(e.at("slot"), e.at("variant"));
  }
  ASSERT_EQ(seen.size(), 16u);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(seen[i], std::make_pair(i / 4, i % 4 + 1));

  const auto slot1 = h.get_json("/api/parts?slot=1&page_size=10", 200);
  EXPECT_EQ(slot1.at("total"), 4);
  for (const auto& e : slot1.at("entries")) EXPECT_EQ(e.at("slot"), 1);
  EXPECT_EQ(slot1.at("entries")[1].at("label_hint"), "round head");
  EXPECT_TRUE(slot1.at("entries")[0].at("label_hint").is_null());

  h.get_json("/api/parts?slot=7", 400);
  h.get_json("/api/parts?page=0", 400);
  h.get_json("/api/parts?page_size=abc", 400);
  h.get_json("/api/parts?page_size=100000", 400);
  EXPECT_TRUE(h.get_json("/api/parts?page=9", 200).at("entries").empty());
}

TEST(Http, ThumbnailsAreCroppedPngs) {
  Harness h;
  const auto parts = h.get_json("/api/parts?slot=0&page_size=4", 200);
  int served = 0;
  for (const auto& e : parts.at("entries")) {
    EXPECT_LE(e.at("thumbnails").size(), 4u);
    for (const auto& url : e.at("thumbnails")) {
      auto res = h.client->Get(url.get<std::string>());
      ASSERT_TRUE(res);
      ASSERT_EQ(res->status, 200) << url;
      EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
      const Image img = decode_image(std::vector<std::uint8_t>(res->body.begin(), res->body.end()));
      EXPECT_EQ(std::max(img.width, img.height), 128);
      ++served;
    }
  }
  EXPECT_GT(served, 0);
  h.get_json("/api/images/thumb-s0-v1-99", 404);
}

TEST(Http, JobLifecycle) {
  Harness h;
  auto res = h.client->Post("/api/jobs", R"({"composition": [1, 2, null, 4], "seed": 3})", "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 202) << res->body;
  const auto submitted = json::parse(res->body);
  const std::string id = submitted.at("id");
  EXPECT_EQ(res->get_header_value("Location"), "/api/jobs/" + id);
  EXPECT_EQ(submitted.at("request").at("steps"), 7);

  ASSERT_TRUE(h.service->wait_idle(10s));
  const auto done = h.get_json("/api/jobs/" + id, 200);
  EXPECT_EQ(done.at("status"), "done");
  EXPECT_EQ(done.at("provenance").at("seed"), 3);
  EXPECT_FALSE(done.at("finished_at").get<std::string>().empty());
  const std::string url = done.at("image_url");

  auto img = h.client->Get(url);
  ASSERT_TRUE(img);
  EXPECT_EQ(img->status, 200);
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
  EXPECT_NE(img->get_header_value("Cache-Control").find("immutable"), std::string::npos);
  const Image decoded = decode_image(std::vector<std::uint8_t>(img->body.begin(), img->body.end()));
  EXPECT_EQ(decoded.width, 32);
  EXPECT_NEAR(decoded.rgb[0], 0.3f, 1.0f / 255.0f);
  EXPECT_TRUE(std::filesystem::exists(h.dir.path / "data" / "images" / (id + ".json")));
}

TEST(Http, FailedGenerationIsRecordedOnTheJob) {
  Harness h;
  auto res = h.client->Post("/api/jobs", R"({"compose": "1:2", "style": "explode"})", "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 202);
  ASSERT_TRUE(h.service->wait_idle(10s));
  const auto j = h.get_json("/api/jobs/" + json::parse(res->body).at("id").get<std::string>(), 200);
  EXPECT_EQ(j.at("status"), "failed");
  EXPECT_NE(j.at("error").get<std::string>().find("generator failed"), std::string::npos);
  EXPECT_TRUE(j.at("image_url").is_null());
}

TEST(Http, ErrorsUseStatusCodesAndJsonBodies) {
  Harness h;
  auto bad_json = h.client->Post("/api/jobs", "{not json", "application/json");
  ASSERT_TRUE(bad_json);
  EXPECT_EQ(bad_json->status, 400);
  EXPECT_EQ(json::parse(bad_json->body).at("error"), "input");

  auto invalid = h.client->Post("/api/jobs", R"({"composition": [1, 7, 2, 0]})", "application/json");
  ASSERT_TRUE(invalid);
  EXPECT_EQ(invalid->status, 422);
  const auto body = json::parse(invalid->body);
  EXPECT_EQ(body.at("error"), "validation");
  ASSERT_EQ(body.at("codes").size(), 2u);
  EXPECT_EQ(body.at("codes")[0].at("slot"), 1);
  EXPECT_EQ(body.at("codes")[1].at("slot"), 3);

  EXPECT_EQ(h.get_json("/api/jobs/job-999999", 404).at("error"), "not_found");
  h.get_json("/api/images/job-999999", 404);
  auto traversal = h.client->Get("/api/images/..%2Fjobs%2Fjob-000001");
  ASSERT_TRUE(traversal);
  EXPECT_EQ(traversal->status, 404);
  EXPECT_EQ(h.generator->calls, 0);
}

TEST(Service, QueuedJobsSurviveARestart) {
  oracle::TempDir dir;
  auto dict = dictionary_in(dir.path / "images");
  auto gen = std::make_shared<FlatGenerator>();
  ServiceConfig c;
  c.data_dir = dir.path / "data";
  c.workers = 0;
  std::vector<std::string> ids;
  {
    PartService idle(dict, gen, c);
    for (int seed : {1, 2, 3}) {
      GenerationRequest r;
      r.composition = parse_composition("0:1,1:2", 3);
      r.seed = seed;
      ids.push_back(idle.submit(r));
    }
    EXPECT_FALSE(idle.wait_idle(50ms));
    EXPECT_EQ(idle.get_job(ids[0]).status, JobStatus::Queued);
  }
  EXPECT_EQ(gen->calls, 0);
  c.workers = 1;
  PartService restarted(dict, gen, c);
  ASSERT_TRUE(restarted.wait_idle(10s));
  for (const auto& id : ids) {
    EXPECT_EQ(restarted.get_job(id).status, JobStatus::Done) << id;
    EXPECT_FALSE(restarted.get_image(id).empty());
  }
  EXPECT_EQ(gen->calls, 3);
  // new jobs continue the sequence
  GenerationRequest r;
  r.composition = parse_composition("2:3", 3);
  EXPECT_EQ(restarted.submit(r), "job-000004");
}

TEST(Service, RejectsInconsistentSetups) {
  oracle::TempDir dir;
  ServiceConfig c;
  EXPECT_THROW(PartService(nullptr, nullptr, c), ConfigError);
  c.data_dir = dir.path;
  EXPECT_THROW(PartService(nullptr, nullptr, c), ConfigError);
  c.workers = 0;
  PartService bare(nullptr, nullptr, c);
  EXPECT_THROW(bare.list_parts(std::nullopt, 1, 10), StateError);
  GenerationRequest r;
  r.composition = parse_composition("0:1", 3);
  EXPECT_THROW(bare.submit(r), StateError);
}
