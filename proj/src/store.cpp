#include "studyrig/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>

#include "studyrig/error.hpp"

namespace studyrig {

using nlohmann::json;

void MemoryStore::commit(const std::vector<json>& records) {
  std::lock_guard lock(mutex_);
  records_.insert(records_.end(), records.begin(), records.end());
}

std::vector<json> MemoryStore::load() {
  std::lock_guard lock(mutex_);
  return records_;
}

JournalStore::JournalStore(std::filesystem::path dir, bool fsync) : fsync_(fsync) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw Error("storage_error", "cannot create data directory '" + dir.string() + "': " +
                                     ec.message(), 500);
  }
  path_ = dir / "journal.jsonl";
  // Drop a torn tail left by a crash so later appends start on a fresh line.
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto last_newline = text.rfind('\n');
    const std::size_t keep = last_newline == std::string::npos ? 0 : last_newline + 1;
    if (keep != text.size()) std::filesystem::resize_file(path_, keep);
  }
  file_ = std::fopen(path_.c_str(), "ab");
  if (file_ == nullptr) {
    throw Error("storage_error",
                "cannot open journal '" + path_.string() + "': " + std::strerror(errno), 500);
  }
}

JournalStore::~JournalStore() {
  if (file_ != nullptr) std::fclose(file_);
}

void JournalStore::commit(const std::vector<json>& records) {
  std::string line = json{{"records", records}}.dump(-1, ' ', false,
                                                     json::error_handler_t::replace);
  line.push_back('\n');
  std::lock_guard lock(mutex_);
  if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() ||
      std::fflush(file_) != 0) {
    throw Error("storage_error", "journal write failed", 500);
  }
  if (fsync_ && ::fsync(::fileno(file_)) != 0) {
    throw Error("storage_error", "journal fsync failed", 500);
  }
}

std::vector<json> JournalStore::load() {
  std::lock_guard lock(mutex_);
  std::vector<json> out;
  std::ifstream in(path_, std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json entry = json::parse(line, nullptr, false);
    if (entry.is_discarded() || !entry.contains("records")) {
      throw Error("storage_error", "corrupt journal line in '" + path_.string() + "'", 500);
    }
    for (auto& r : entry["records"]) out.push_back(std::move(r));
  }
  return out;
}

}  // namespace studyrig
