#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace l2t {

enum class Err {
  ShapeMismatch,
  DimMismatch,
  NonScalarLoss,
  NonFinite,
  EmptyMask,
  IndexOutOfVocab,
  InvalidId,
  EmptyCorpus,
  IoError,
  MalformedLine,
  UnknownPlaceholder,
  SequenceTooLong,
  AnchorMissing,
  LengthMismatch,
  InvalidArgument,
};

const char* err_name(Err kind);

class Error : public std::runtime_error {
 public:
  Error(Err kind, const std::string& msg);
  Err kind() const { return kind_; }

 private:
  Err kind_;
};

[[noreturn]] void raise(Err kind, const std::string& msg);

// 64-bit FNV-1a; fingerprints datasets and configs in manifests.
uint64_t fnv1a64(const void* data, size_t n,
                 uint64_t h = 1469598103934665603ull);
uint64_t fnv1a64(const std::string& s);

// splitmix64 step; derives per-record seeds from a base seed and an index.
uint64_t mix_seed(uint64_t seed, uint64_t index);

// Shortest round-trip decimal form (std::to_chars).
std::string fmt_double(double v);

// Runs fn(shard, begin, end) over [0, n_items) split into n_shards contiguous
// shards. Shard boundaries depend only on (n_items, n_shards), so per-shard
// outputs are reproducible for any worker count.
void parallel_shards(size_t n_items, int n_shards, int n_threads,
                     const std::function<void(int, size_t, size_t)>& fn);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

std::string iso8601_now();

}  // namespace l2t
