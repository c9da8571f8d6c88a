#pragma once

#include <cstdio>
#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

namespace studyrig {

// Persistence boundary. A commit is a batch of JSON records that must become
// durable together; load() returns every committed record in commit order.
// Record layout is owned by the service.
class Store {
 public:
  virtual ~Store() = default;
  virtual void commit(const std::vector<nlohmann::json>& records) = 0;
  virtual std::vector<nlohmann::json> load() = 0;
};

class MemoryStore final : public Store {
 public:
  void commit(const std::vector<nlohmann::json>& records) override;
  std::vector<nlohmann::json> load() override;

 private:
  std::mutex mutex_;
  std::vector<nlohmann::json> records_;
};

// Append-only JSON-lines journal at <dir>/journal.jsonl. Each commit is one
// line, so a crash mid-write leaves at most a torn final line, which load()
// discards. `fsync` trades throughput for durability against power loss.
class JournalStore final : public Store {
 public:
  explicit JournalStore(std::filesystem::path dir, bool fsync = true);
  ~JournalStore() override;
  JournalStore(const JournalStore&) = delete;
  JournalStore& operator=(const JournalStore&) = delete;

  void commit(const std::vector<nlohmann::json>& records) override;
  std::vector<nlohmann::json> load() override;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  bool fsync_;
  std::mutex mutex_;
  std::FILE* file_ = nullptr;
};

}  // namespace studyrig
