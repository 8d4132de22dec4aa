#pragma once

#include "partcraft/dictionary.hpp"
#include "partcraft/error.hpp"
#include "partcraft/generation.hpp"

#include <json.hpp>

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace partcraft {

enum class JobStatus { Queued, Running, Done, Failed };
const char* to_string(JobStatus status);
JobStatus job_status_from_string(const std::string& text);

struct Job {
  static constexpr const char* kSchema = "partcraft.job";
  static constexpr int kVersion = 1;

  std::string id;
  long sequence = 0;
  GenerationRequest request;
  JobStatus status = JobStatus::Queued;
  std::optional<std::string> image_id;
  std::optional<std::string> error;
  std::optional<Provenance> provenance;
  std::string created_at;
  std::string started_at;
  std::string finished_at;
};

nlohmann::json to_json(const Job& job);
Job job_from_json(const nlohmann::json& j);

/// One offending code in a rejected request.
struct CodeIssue {
  int slot = 0;
  nlohmann::json variant;
  std::string reason;
};

/// Request rejected before it reached the queue; carries every offending code.
class ValidationError : public InputError {
 public:
  ValidationError(const std::string& message, std::vector<CodeIssue> issues)
      : InputError(message), issues_(std::move(issues)) {}
  const std::vector<CodeIssue>& issues() const { return issues_; }

 private:
  std::vector<CodeIssue> issues_;
};

/// Parses a job request body: {"composition": [v0, v1, ...] | "compose": "0:3,1:2",
/// "style", "seed", "steps", "guidance"}; missing fields come from `defaults`.
/// Throws ValidationError.
GenerationRequest parse_generation_request(const nlohmann::json& body, int parts, int variants,
                                           const GenerationRequest& defaults = {});

struct ServiceConfig {
  /// Holds jobs/ and images/; created if missing.
  std::filesystem::path data_dir;
  /// Concurrent generations; 0 accepts jobs without running them.
  int workers = 1;
  int default_page_size = 50;
  int max_page_size = 500;
  int thumbnails_per_entry = 4;
  int thumbnail_side = 128;
  /// Steps, guidance and style applied when a request omits them.
  GenerationRequest defaults;
};

/// Catalog, job queue and image store behind the HTTP API. Every method is
/// safe to call from concurrent request handlers.
class PartService {
 public:
  /// `dictionary` may be null, in which case catalog calls raise StateError.
  PartService(std::shared_ptr<const PartDictionary> dictionary, std::shared_ptr<const ImageGenerator> generator,
              ServiceConfig config);
  ~PartService();
  PartService(const PartService&) = delete;
  PartService& operator=(const PartService&) = delete;

  /// Catalog page over (slot, variant) in slot-major order.
  nlohmann::json list_parts(std::optional<int> slot, int page, int page_size) const;

  /// Validates, persists and enqueues; returns the job id.
  std::string submit(const GenerationRequest& request);
  Job get_job(const std::string& id) const;
  /// PNG bytes of a generated image or an exemplar thumbnail.
  std::vector<std::uint8_t> get_image(const std::string& id) const;
  nlohmann::json health() const;

  /// Blocks until no job is queued or running, or the timeout passes.
  bool wait_idle(std::chrono::milliseconds timeout) const;
  /// Stops the workers after their current job; queued jobs stay persisted.
  void shutdown();

  /// Serves the JSON API until stop_http() is called from another thread.
  void listen(const std::string& host, int port);
  /// Binds to a free port and serves on a background thread; returns the port.
  int start_http(const std::string& host = "127.0.0.1");
  void stop_http();

 private:
  struct Http;

  void load_jobs();
  void persist(const Job& job) const;
  void worker_loop();
  void run_job(const std::string& id);
  std::vector<std::uint8_t> thumbnail(int slot, int variant, std::size_t index) const;
  const std::vector<std::size_t>& exemplars(int slot, int variant) const;

  std::shared_ptr<const PartDictionary> dictionary_;
  std::shared_ptr<const ImageGenerator> generator_;
  ServiceConfig config_;
  std::filesystem::path jobs_dir_, images_dir_;
  /// (slot, variant) -> indices into dictionary_->images.
  std::map<std::pair<int, int>, std::vector<std::size_t>> exemplars_;

  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  std::map<std::string, Job> jobs_;
  std::deque<std::string> queue_;
  long next_sequence_ = 1;
  int running_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;

  mutable std::mutex thumb_mutex_;
  mutable std::map<std::string, std::vector<std::uint8_t>> thumb_cache_;

  std::unique_ptr<Http> http_;
};

}  // namespace partcraft
