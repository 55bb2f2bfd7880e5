#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "l2t/common.hpp"

namespace l2t {

// Written before long work starts, finalized when it ends. Holds the
// effective config, seeds, input fingerprints and every declared output.
class RunManifest {
 public:
  RunManifest(std::string path, std::string command);

  void set_config(nlohmann::ordered_json config);
  void add_seed(uint64_t seed);
  void add_input(const std::string& name, const std::string& file_path);
  void add_output(const std::string& name, const std::string& file_path);

  void write_started();
  void finalize(bool ok);

  const std::string& path() const { return path_; }
  std::vector<std::string> output_paths() const;

 private:
  void write(const std::string& status) const;

  std::string path_;
  nlohmann::ordered_json doc_;
};

// Output root: L2TLAB_OUT environment variable, or "out".
std::string output_root();

uint64_t file_fingerprint(const std::string& path);

}  // namespace l2t
