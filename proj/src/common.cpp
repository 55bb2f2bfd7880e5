#include "l2t/common.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <thread>
#include <vector>

namespace l2t {

const char* err_name(Err kind) {
  switch (kind) {
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::DimMismatch: return "DimMismatch";
    case Err::NonScalarLoss: return "NonScalarLoss";
    case Err::NonFinite: return "NonFinite";
    case Err::EmptyMask: return "EmptyMask";
    case Err::IndexOutOfVocab: return "IndexOutOfVocab";
    case Err::InvalidId: return "InvalidId";
    case Err::EmptyCorpus: return "EmptyCorpus";
    case Err::IoError: return "IoError";
    case Err::MalformedLine: return "MalformedLine";
    case Err::UnknownPlaceholder: return "UnknownPlaceholder";
    case Err::SequenceTooLong: return "SequenceTooLong";
    case Err::AnchorMissing: return "AnchorMissing";
    case Err::LengthMismatch: return "LengthMismatch";
    case Err::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Error::Error(Err kind, const std::string& msg)
    : std::runtime_error(std::string(err_name(kind)) + ": " + msg),
      kind_(kind) {}

void raise(Err kind, const std::string& msg) { throw Error(kind, msg); }

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

void parallel_shards(size_t n_items, int n_shards, int n_threads,
                     const std::function<void(int, size_t, size_t)>& fn) {
  if (n_items == 0) return;
  if (n_shards < 1) n_shards = 1;
  if (static_cast<size_t>(n_shards) > n_items)
    n_shards = static_cast<int>(n_items);
  auto bounds = [&](int shard) {
    size_t lo = n_items * static_cast<size_t>(shard) / n_shards;
    size_t hi = n_items * static_cast<size_t>(shard + 1) / n_shards;
    return std::pair<size_t, size_t>{lo, hi};
  };
  if (n_threads <= 1 || n_shards == 1) {
    for (int s = 0; s < n_shards; ++s) {
      auto [lo, hi] = bounds(s);
      fn(s, lo, hi);
    }
    return;
  }
  int workers = std::min(n_threads, n_shards);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (int s = w; s < n_shards; s += workers) {
        auto [lo, hi] = bounds(s);
        fn(s, lo, hi);
      }
    });
  }
  for (auto& t : pool) t.join();
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Err::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Err::IoError, "cannot write " + path);
  out << content;
  if (!out) raise(Err::IoError, "short write to " + path);
}

std::string iso8601_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ",
                tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday, tm.tm_hour,
                tm.tm_min, tm.tm_sec);
  return buf;
}

}  // namespace l2t
