#include "l2t/manifest.hpp"

#include <cstdlib>

namespace l2t {

RunManifest::RunManifest(std::string path, std::string command)
    : path_(std::move(path)) {
  doc_["schema_version"] = 1;
  doc_["command"] = std::move(command);
  doc_["config"] = nlohmann::ordered_json::object();
  doc_["seeds"] = nlohmann::ordered_json::array();
  doc_["inputs"] = nlohmann::ordered_json::array();
  doc_["outputs"] = nlohmann::ordered_json::array();
  doc_["started_at"] = "";
  doc_["finished_at"] = "";
  doc_["status"] = "created";
}

void RunManifest::set_config(nlohmann::ordered_json config) {
  doc_["config"] = std::move(config);
  doc_["config_fingerprint"] = fnv1a64(doc_["config"].dump());
}

void RunManifest::add_seed(uint64_t seed) { doc_["seeds"].push_back(seed); }

void RunManifest::add_input(const std::string& name,
                            const std::string& file_path) {
  doc_["inputs"].push_back({{"name", name},
                            {"path", file_path},
                            {"fingerprint", file_fingerprint(file_path)}});
}

void RunManifest::add_output(const std::string& name,
                             const std::string& file_path) {
  doc_["outputs"].push_back({{"name", name}, {"path", file_path}});
}

void RunManifest::write_started() {
  doc_["started_at"] = iso8601_now();
  write("running");
}

void RunManifest::finalize(bool ok) {
  doc_["finished_at"] = iso8601_now();
  write(ok ? "ok" : "failed");
}

void RunManifest::write(const std::string& status) const {
  nlohmann::ordered_json copy = doc_;
  copy["status"] = status;
  write_text_file(path_, copy.dump(2) + "\n");
}

std::vector<std::string> RunManifest::output_paths() const {
  std::vector<std::string> out;
  for (const auto& o : doc_["outputs"]) out.push_back(o["path"]);
  return out;
}

std::string output_root() {
  if (const char* env = std::getenv("L2TLAB_OUT")) return env;
  return "out";
}

uint64_t file_fingerprint(const std::string& path) {
  return fnv1a64(read_text_file(path));
}

}  // namespace l2t
