#include "partcraft/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <regex>
#include <sstream>

namespace partcraft {

using nlohmann::json;

namespace {

constexpr const char* kCatalogSchema = "partcraft.part-catalog";
constexpr int kApiVersion = 1;

std::string now_iso() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char frac[8];
  std::snprintf(frac, sizeof frac, ".%03dZ", static_cast<int>(ms));
  return std::string(buf) + frac;
}

void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InternalError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("no file " + path.filename().string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool safe_id(const std::string& id) {
  return !id.empty() && id.size() <= 128 &&
         std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
}

json request_json(const GenerationRequest& r) {
  json codes = json::array();
  for (const auto& c : r.composition.codes) codes.push_back(c.absent() ? json(nullptr) : json(c.variant));
  return {{"composition", codes},
          {"compose", format_composition(r.composition)},
          {"style", r.style_suffix},
          {"seed", r.seed},
          {"steps", r.steps},
          {"guidance", r.guidance}};
}

}  // namespace

const char* to_string(JobStatus status) {
  switch (status) {
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Done: return "done";
    case JobStatus::Failed: return "failed";
  }
  return "failed";
}

JobStatus job_status_from_string(const std::string& text) {
  if (text == "queued") return JobStatus::Queued;
  if (text == "running") return JobStatus::Running;
  if (text == "done") return JobStatus::Done;
  if (text == "failed") return JobStatus::Failed;
  throw InputError("unknown job status '" + text + "'");
}

json to_json(const Job& job) {
  json j = {{"schema", Job::kSchema},
            {"version", Job::kVersion},
            {"id", job.id},
            {"sequence", job.sequence},
            {"status", to_string(job.status)},
            {"request", request_json(job.request)},
            {"created_at", job.created_at},
            {"started_at", job.started_at},
            {"finished_at", job.finished_at},
            {"image_id", job.image_id ? json(*job.image_id) : json(nullptr)},
            {"image_url", job.image_id ? json("/api/images/" + *job.image_id) : json(nullptr)},
            {"error", job.error ? json(*job.error) : json(nullptr)},
            {"provenance", job.provenance ? to_json(*job.provenance) : json(nullptr)}};
  return j;
}

Job job_from_json(const json& j) {
  if (j.value("schema", "") != Job::kSchema || j.value("version", 0) != Job::kVersion) {
    throw InputError("unsupported job record");
  }
  Job job;
  job.id = j.at("id").get<std::string>();
  job.sequence = j.at("sequence").get<long>();
  job.status = job_status_from_string(j.at("status").get<std::string>());
  const json& r = j.at("request");
  int slot = 0;
  for (const auto& v : r.at("composition")) job.request.composition.codes.push_back({slot++, v.is_null() ? PartCode::kAbsent : v.get<int>()});
  job.request.style_suffix = r.at("style").get<std::string>();
  job.request.seed = r.at("seed").get<std::uint64_t>();
  job.request.steps = r.at("steps").get<int>();
  job.request.guidance = r.at("guidance").get<double>();
  job.created_at = j.value("created_at", "");
  job.started_at = j.value("started_at", "");
  job.finished_at = j.value("finished_at", "");
  if (!j.at("image_id").is_null()) job.image_id = j.at("image_id").get<std::string>();
  if (!j.at("error").is_null()) job.error = j.at("error").get<std::string>();
  if (!j.at("provenance").is_null()) job.provenance = provenance_from_json(j.at("provenance"));
  return job;
}

GenerationRequest parse_generation_request(const json& body, int parts, int variants, const GenerationRequest& defaults) {
  if (!body.is_object()) throw ValidationError("request body must be a JSON object", {});
  GenerationRequest r = defaults;
  std::vector<CodeIssue> issues;
  const int slots = parts + 1;
  if (body.contains("composition")) {
    const json& codes = body.at("composition");
    if (!codes.is_array()) throw ValidationError("composition must be an array", {});
    if (static_cast<int>(codes.size()) != slots) {
      throw ValidationError("composition needs " + std::to_string(slots) + " codes, got " + std::to_string(codes.size()), {});
    }
    r.composition.codes.clear();
    for (int s = 0; s < slots; ++s) {
      const json& v = codes[static_cast<std::size_t>(s)];
      if (v.is_null()) {
        r.composition.codes.push_back({s, PartCode::kAbsent});
      } else if (!v.is_number_integer()) {
        issues.push_back({s, v, "variant must be an integer or null"});
        r.composition.codes.push_back({s, PartCode::kAbsent});
      } else {
        const int variant = v.get<int>();
        if (variant < 1 || variant > variants) {
          issues.push_back({s, v, "variant out of range [1, " + std::to_string(variants) + "]"});
        }
        r.composition.codes.push_back({s, variant});
      }
    }
  } else if (body.contains("compose")) {
    if (!body.at("compose").is_string()) throw ValidationError("compose must be a string", {});
    try {
      r.composition = parse_composition(body.at("compose").get<std::string>(), parts);
    } catch (const Error& e) {
      throw ValidationError(e.what(), {});
    }
    for (const auto& c : r.composition.codes) {
      if (!c.absent() && (c.variant < 1 || c.variant > variants)) {
        issues.push_back({c.slot, c.variant, "variant out of range [1, " + std::to_string(variants) + "]"});
      }
    }
  } else {
    throw ValidationError("request needs 'composition' or 'compose'", {});
  }
  if (!issues.empty()) throw ValidationError("invalid part codes", std::move(issues));
  if (r.composition.present_count() == 0) throw ValidationError("composition has no present part", {});
  try {
    if (body.contains("style")) r.style_suffix = body.at("style").get<std::string>();
    if (body.contains("seed")) {
      const json& seed = body.at("seed");
      if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) throw json::type_error::create(302, "seed", nullptr);
      r.seed = seed.get<std::uint64_t>();
    }
    if (body.contains("steps")) r.steps = body.at("steps").get<int>();
    if (body.contains("guidance")) r.guidance = body.at("guidance").get<double>();
  } catch (const json::exception&) {
    throw ValidationError("style must be a string, seed a non-negative integer, steps an integer, guidance a number", {});
  }
  if (r.steps < 1 || r.steps > 1000) throw ValidationError("steps must be in [1, 1000]", {});
  if (!std::isfinite(r.guidance)) throw ValidationError("guidance must be finite", {});
  return r;
}

// ------------------------------------------------------------------ service

struct PartService::Http {
  httplib::Server server;
  std::thread thread;
  int port = 0;
};

PartService::PartService(std::shared_ptr<const PartDictionary> dictionary, std::shared_ptr<const ImageGenerator> generator,
                         ServiceConfig config)
    : dictionary_(std::move(dictionary)), generator_(std::move(generator)), config_(std::move(config)) {
  if (config_.data_dir.empty()) throw ConfigError("service needs a data directory");
  if (config_.workers < 0) throw ConfigError("workers must be >= 0");
  if (config_.workers > 0 && !generator_) throw ConfigError("workers need a generator");
  if (dictionary_ && generator_ &&
      (dictionary_->hierarchy.parts != generator_->parts() || dictionary_->hierarchy.variants != generator_->variants())) {
    throw ConfigError("dictionary and checkpoint disagree on parts or variants");
  }
  jobs_dir_ = config_.data_dir / "jobs";
  images_dir_ = config_.data_dir / "images";
  std::filesystem::create_directories(jobs_dir_);
  std::filesystem::create_directories(images_dir_);
  if (dictionary_) {
    for (std::size_t i = 0; i < dictionary_->images.size(); ++i) {
      for (const auto& code : dictionary_->images[i].composition.codes) {
        if (!code.absent()) exemplars_[{code.slot, code.variant}].push_back(i);
      }
    }
  }
  load_jobs();
  for (int i = 0; i < config_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

PartService::~PartService() {
  stop_http();
  shutdown();
}

void PartService::shutdown() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& w : workers_)
    if (w.joinable()) w.join();
  workers_.clear();
}

void PartService::load_jobs() {
  std::vector<Job> loaded;
  for (const auto& entry : std::filesystem::directory_iterator(jobs_dir_)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    try {
      loaded.push_back(job_from_json(json::parse(in)));
    } catch (const std::exception& e) {
      throw InputError("corrupt job record " + entry.path().filename().string() + ": " + e.what());
    }
  }
  std::sort(loaded.begin(), loaded.end(), [](const Job& a, const Job& b) { return a.sequence < b.sequence; });
  for (auto& job : loaded) {
    next_sequence_ = std::max(next_sequence_, job.sequence + 1);
    if (job.status == JobStatus::Running) {
      // Interrupted mid-generation; generation is deterministic, so rerun it.
      job.status = JobStatus::Queued;
      job.started_at.clear();
      persist(job);
    }
    if (job.status == JobStatus::Queued) queue_.push_back(job.id);
    jobs_[job.id] = std::move(job);
  }
}

void PartService::persist(const Job& job) const { write_atomic(jobs_dir_ / (job.id + ".json"), to_json(job).dump(2)); }

std::string PartService::submit(const GenerationRequest& request) {
  int parts = 0, variants = 0;
  if (generator_) {
    parts = generator_->parts();
    variants = generator_->variants();
  } else if (dictionary_) {
    parts = dictionary_->hierarchy.parts;
    variants = dictionary_->hierarchy.variants;
  } else {
    throw StateError("no checkpoint or dictionary loaded");
  }
  std::vector<CodeIssue> issues;
  if (request.composition.slot_count() != parts + 1) {
    throw ValidationError("composition needs " + std::to_string(parts + 1) + " codes", {});
  }
  for (int s = 0; s < request.composition.slot_count(); ++s) {
    const auto& c = request.composition.codes[s];
    if (c.slot != s) issues.push_back({s, c.variant, "slot index out of order"});
    else if (!c.absent() && (c.variant < 1 || c.variant > variants)) issues.push_back({s, c.variant, "variant out of range"});
  }
  if (!issues.empty()) throw ValidationError("invalid part codes", std::move(issues));
  if (request.steps < 1) throw ValidationError("steps must be >= 1", {});

  std::lock_guard lock(mutex_);
  Job job;
  job.sequence = next_sequence_++;
  char id[32];
  std::snprintf(id, sizeof id, "job-%06ld", job.sequence);
  job.id = id;
  job.request = request;
  job.created_at = now_iso();
  persist(job);
  queue_.push_back(job.id);
  jobs_[job.id] = job;
  cv_.notify_one();
  return job.id;
}

Job PartService::get_job(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw NotFoundError("no job '" + id + "'");
  return it->second;
}

void PartService::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      Job& job = jobs_.at(id);
      job.status = JobStatus::Running;
      job.started_at = now_iso();
      ++running_;
      persist(job);
    }
    run_job(id);
  }
}

void PartService::run_job(const std::string& id) {
  GenerationRequest request;
  {
    std::lock_guard lock(mutex_);
    request = jobs_.at(id).request;
  }
  std::optional<GenerationResult> result;
  std::string error;
  try {
    result = generator_->generate(request);
    const auto png = encode_png(result->image);
    write_atomic(images_dir_ / (id + ".png"), std::string(png.begin(), png.end()));
    write_atomic(images_dir_ / (id + ".json"), to_json(result->provenance).dump(2));
  } catch (const std::exception& e) {
    error = e.what();
    result.reset();
  }
  {
    std::lock_guard lock(mutex_);
    Job& job = jobs_.at(id);
    job.finished_at = now_iso();
    if (result) {
      job.status = JobStatus::Done;
      job.image_id = id;
      job.provenance = result->provenance;
    } else {
      job.status = JobStatus::Failed;
      job.error = error;
    }
    persist(job);
    --running_;
  }
  cv_.notify_all();
}

bool PartService::wait_idle(std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  return cv_.wait_for(lock, timeout, [this] { return queue_.empty() && running_ == 0; });
}

const std::vector<std::size_t>& PartService::exemplars(int slot, int variant) const {
  static const std::vector<std::size_t> none;
  auto it = exemplars_.find({slot, variant});
  return it == exemplars_.end() ? none : it->second;
}

json PartService::list_parts(std::optional<int> slot, int page, int page_size) const {
  if (!dictionary_) throw StateError("no part dictionary loaded");
  const auto& h = dictionary_->hierarchy;
  if (slot && (*slot < 0 || *slot > h.parts)) throw InputError("slot must be in [0, " + std::to_string(h.parts) + "]");
  if (page < 1) throw InputError("page must be >= 1");
  if (page_size < 1 || page_size > config_.max_page_size) {
    throw InputError("page_size must be in [1, " + std::to_string(config_.max_page_size) + "]");
  }
  std::vector<PartCode> codes;
  for (int s = 0; s <= h.parts; ++s) {
    if (slot && s != *slot) continue;
    for (int v = 1; v <= h.variants; ++v) codes.push_back({s, v});
  }
  const std::size_t begin = static_cast<std::size_t>(page - 1) * static_cast<std::size_t>(page_size);
  const std::size_t end = std::min(codes.size(), begin + static_cast<std::size_t>(page_size));
  json entries = json::array();
  for (std::size_t i = begin; i < end; ++i) {
    const PartCode& c = codes[i];
    const auto& ex = exemplars(c.slot, c.variant);
    json ids = json::array(), thumbs = json::array();
    for (std::size_t e = 0; e < ex.size(); ++e) {
      ids.push_back(dictionary_->images[ex[e]].id);
      if (static_cast<int>(e) < config_.thumbnails_per_entry) {
        thumbs.push_back("/api/images/thumb-s" + std::to_string(c.slot) + "-v" + std::to_string(c.variant) + "-" +
                         std::to_string(e));
      }
    }
    const auto hint = dictionary_->label_hints.find(std::to_string(c.slot) + ":" + std::to_string(c.variant));
    entries.push_back({{"slot", c.slot},
                       {"variant", c.variant},
                       {"token", pseudo_token_name(c)},
                       {"exemplar_image_ids", ids},
                       {"thumbnails", thumbs},
                       {"label_hint", hint == dictionary_->label_hints.end() ? json(nullptr) : json(hint->second)}});
  }
  return {{"schema", kCatalogSchema},
          {"version", kApiVersion},
          {"parts", h.parts},
          {"variants", h.variants},
          {"slot", slot ? json(*slot) : json(nullptr)},
          {"total", codes.size()},
          {"page", page},
          {"page_size", page_size},
          {"entries", entries}};
}

std::vector<std::uint8_t> PartService::thumbnail(int slot, int variant, std::size_t index) const {
  if (!dictionary_) throw NotFoundError("no part dictionary loaded");
  const auto& ex = exemplars(slot, variant);
  if (index >= ex.size() || static_cast<int>(index) >= config_.thumbnails_per_entry) {
    throw NotFoundError("no such exemplar thumbnail");
  }
  const std::string key = std::to_string(slot) + ":" + std::to_string(variant) + ":" + std::to_string(index);
  {
    std::lock_guard lock(thumb_mutex_);
    auto it = thumb_cache_.find(key);
    if (it != thumb_cache_.end()) return it->second;
  }
  const TaggedImage& tagged = dictionary_->images[ex[index]];
  const Image image = read_image(tagged.path);
  int r0 = tagged.native.rows, r1 = -1, c0 = tagged.native.cols, c1 = -1;
  for (int r = 0; r < tagged.native.rows; ++r) {
    for (int c = 0; c < tagged.native.cols; ++c) {
      if (tagged.patches[static_cast<std::size_t>(r * tagged.native.cols + c)].slot != slot) continue;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  }
  if (r1 < 0) throw NotFoundError("exemplar holds no patch of this slot");
  const double sx = static_cast<double>(image.width) / tagged.native.cols;
  const double sy = static_cast<double>(image.height) / tagged.native.rows;
  const int x0 = static_cast<int>(c0 * sx), y0 = static_cast<int>(r0 * sy);
  const int x1 = static_cast<int>(std::ceil((c1 + 1) * sx)), y1 = static_cast<int>(std::ceil((r1 + 1) * sy));
  const Image cropped = crop(image, x0, y0, std::min(x1, image.width) - x0, std::min(y1, image.height) - y0);
  const int side = config_.thumbnail_side;
  const double scale = static_cast<double>(side) / std::max(cropped.width, cropped.height);
  const Image thumb = resize_nearest(cropped, std::max(1, static_cast<int>(std::lround(cropped.width * scale))),
                                     std::max(1, static_cast<int>(std::lround(cropped.height * scale))));
  auto png = encode_png(thumb);
  std::lock_guard lock(thumb_mutex_);
  thumb_cache_[key] = png;
  return png;
}

std::vector<std::uint8_t> PartService::get_image(const std::string& id) const {
  if (!safe_id(id)) throw NotFoundError("no image '" + id + "'");
  static const std::regex thumb_re("thumb-s(\\d+)-v(\\d+)-(\\d+)");
  std::smatch m;
  if (std::regex_match(id, m, thumb_re)) {
    return thumbnail(std::stoi(m[1]), std::stoi(m[2]), std::stoul(m[3]));
  }
  const auto path = images_dir_ / (id + ".png");
  if (!std::filesystem::exists(path)) throw NotFoundError("no image '" + id + "'");
  return read_bytes(path);
}

json PartService::health() const {
  std::lock_guard lock(mutex_);
  int done = 0, failed = 0;
  for (const auto& [id, job] : jobs_) {
    if (job.status == JobStatus::Done) ++done;
    if (job.status == JobStatus::Failed) ++failed;
  }
  json j = {{"status", "ok"},
            {"version", kApiVersion},
            {"dictionary", dictionary_ != nullptr},
            {"generator", generator_ != nullptr},
            {"workers", config_.workers},
            {"queued", queue_.size()},
            {"running", running_},
            {"done", done},
            {"failed", failed}};
  if (auto* d = dynamic_cast<const DiffusionGenerator*>(generator_.get())) j["checkpoint"] = d->checkpoint_id();
  return j;
}

// --------------------------------------------------------------------- http

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message,
                json extra = json::object()) {
  extra["error"] = kind;
  extra["message"] = message;
  extra["version"] = kApiVersion;
  send_json(res, status, extra);
}

template <class F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const ValidationError& e) {
    json codes = json::array();
    for (const auto& issue : e.issues()) codes.push_back({{"slot", issue.slot}, {"variant", issue.variant}, {"reason", issue.reason}});
    send_error(res, 422, "validation", e.what(), {{"codes", codes}});
  } catch (const NotFoundError& e) {
    send_error(res, 404, "not_found", e.what());
  } catch (const StateError& e) {
    send_error(res, 409, "state", e.what());
  } catch (const InputError& e) {
    send_error(res, 400, "input", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

int int_param(const httplib::Request& req, const char* name, int fallback) {
  if (!req.has_param(name)) return fallback;
  const std::string v = req.get_param_value(name);
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw InputError(std::string("query parameter '") + name + "' must be an integer");
  }
}

}  // namespace

void PartService::listen(const std::string& host, int port) {
  if (!http_) http_ = std::make_unique<Http>();
  auto& srv = http_->server;
  srv.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, health()); });
  });
  srv.Get("/api/parts", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::optional<int> slot;
      if (req.has_param("slot") && !req.get_param_value("slot").empty()) slot = int_param(req, "slot", 0);
      send_json(res, 200, list_parts(slot, int_param(req, "page", 1), int_param(req, "page_size", config_.default_page_size)));
    });
  });
  srv.Post("/api/jobs", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception&) {
        throw InputError("request body is not valid JSON");
      }
      int parts = 0, variants = 0;
      if (generator_) {
        parts = generator_->parts();
        variants = generator_->variants();
      } else if (dictionary_) {
        parts = dictionary_->hierarchy.parts;
        variants = dictionary_->hierarchy.variants;
      } else {
        throw StateError("no checkpoint or dictionary loaded");
      }
      const std::string id = submit(parse_generation_request(body, parts, variants, config_.defaults));
      res.set_header("Location", "/api/jobs/" + id);
      send_json(res, 202, to_json(get_job(id)));
    });
  });
  srv.Get(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, to_json(get_job(req.matches[1]))); });
  });
  srv.Get(R"(/api/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto bytes = get_image(req.matches[1]);
      res.status = 200;
      res.set_header("Cache-Control", "public, max-age=31536000, immutable");
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    });
  });
  if (port == 0) {
    const int bound = srv.bind_to_any_port(host);
    if (bound < 0) throw InternalError("cannot bind " + host);
    http_->port = bound;
    http_->thread = std::thread([&srv] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    return;
  }
  if (!srv.listen(host, port)) throw InternalError("cannot listen on " + host + ":" + std::to_string(port));
}

int PartService::start_http(const std::string& host) {
  if (http_) throw StateError("HTTP server already running");
  http_ = std::make_unique<Http>();
  listen(host, 0);
  return http_->port;
}

void PartService::stop_http() {
  if (!http_) return;
  http_->server.stop();
  if (http_->thread.joinable()) http_->thread.join();
  http_.reset();
}

}  // namespace partcraft
