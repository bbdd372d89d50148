#pragma once

// Run manifests: every CLI command writes run_manifest.json into its output
// directory before producing anything else, updates it on success and marks
// it failed when the command throws.

#include <chrono>
#include <ctime>

#include <json.hpp>

#include "plse/common.hpp"

namespace plse {

inline constexpr const char* kToolVersion = "plse 1.0.0";
inline constexpr const char* kManifestName = "run_manifest.json";

class RunManifest {
 public:
  RunManifest(std::filesystem::path out_dir, std::string command, nlohmann::json config, std::vector<std::uint64_t> seeds)
      : dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
    j_ = {{"command", std::move(command)},
          {"tool_version", kToolVersion},
          {"config", std::move(config)},
          {"seeds", std::move(seeds)},
          {"inputs", nlohmann::json::object()},
          {"outputs", nlohmann::json::object()},
          {"timings", nlohmann::json::object()},
          {"status", "running"},
          {"started_at", utc_now()}};
  }

  /// Hashes an input file (or every regular file below a directory).
  void add_input(const std::filesystem::path& p) { hash_into(j_["inputs"], p, p.filename().string()); }

  void set_timing(const std::string& name, double seconds) { j_["timings"][name] = seconds; }
  nlohmann::json& extra() { return j_["extra"]; }

  void write() const {
    std::filesystem::create_directories(dir_);
    write_file(dir_ / kManifestName, j_.dump(2) + "\n");
  }

  /// Records hashes of every output file in the directory except the
  /// manifest itself and marks the run complete.
  void finish() {
    j_["outputs"] = nlohmann::json::object();
    if (std::filesystem::exists(dir_)) {
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::recursive_directory_iterator(dir_))
        if (e.is_regular_file() && e.path().filename() != kManifestName) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) j_["outputs"][std::filesystem::relative(f, dir_).generic_string()] = sha256_file(f);
    }
    finalize("ok");
  }

  void fail(const std::string& error) {
    j_["error"] = error;
    finalize("failed");
  }

  const nlohmann::json& json() const { return j_; }

 private:
  static std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  static void hash_into(nlohmann::json& dst, const std::filesystem::path& p, const std::string& key) {
    if (std::filesystem::is_directory(p)) {
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) dst[key + "/" + std::filesystem::relative(f, p).generic_string()] = sha256_file(f);
    } else {
      dst[key] = sha256_file(p);
    }
  }

  void finalize(const char* status) {
    j_["status"] = status;
    j_["timings"]["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write();
  }

  std::filesystem::path dir_;
  std::chrono::steady_clock::time_point start_;
  nlohmann::json j_;
};

}  // namespace plse
