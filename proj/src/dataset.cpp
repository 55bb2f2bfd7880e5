#include "l2t/dataset.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace l2t {

using ordered_json = nlohmann::ordered_json;

std::string record_to_json_line(const DatasetRecord& r) {
  ordered_json j;
  j["schema_version"] = kDatasetSchemaVersion;
  j["image_id"] = r.sample.image_id;
  // One-hot features serialize as integers to keep files compact and stable.
  ordered_json feat = ordered_json::array();
  for (double v : r.feature) {
    if (v == static_cast<int64_t>(v))
      feat.push_back(static_cast<int64_t>(v));
    else
      feat.push_back(v);
  }
  j["image"] = std::move(feat);
  ordered_json turns = ordered_json::array();
  for (const Turn& t : r.sample.turns)
    turns.push_back({{"instruction", t.instruction}, {"response", t.response}});
  j["turns"] = std::move(turns);
  j["task_kind"] = task_kind_name(r.sample.kind);
  j["gt_objects"] = r.gt_objects;
  if (r.phrasing_id >= 0) j["phrasing_id"] = r.phrasing_id;
  if (!r.answer.empty()) j["answer"] = r.answer;
  return j.dump();
}

DatasetRecord record_from_json_line(const std::string& line, int lineno) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const std::exception& e) {
    raise(Err::MalformedLine,
          "line " + std::to_string(lineno) + ": " + e.what());
  }
  DatasetRecord r;
  try {
    r.sample.image_id = j.at("image_id").get<std::string>();
    for (const auto& v : j.at("image")) r.feature.push_back(v.get<double>());
    for (const auto& t : j.at("turns")) {
      Turn turn;
      turn.instruction = t.at("instruction").get<std::string>();
      turn.response = t.at("response").get<std::string>();
      r.sample.turns.push_back(std::move(turn));
    }
    r.sample.kind = task_kind_from(j.at("task_kind").get<std::string>());
    for (const auto& o : j.at("gt_objects"))
      r.gt_objects.push_back(o.get<std::string>());
    if (j.contains("phrasing_id")) r.phrasing_id = j["phrasing_id"].get<int>();
    if (j.contains("answer")) r.answer = j["answer"].get<std::string>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    raise(Err::MalformedLine,
          "line " + std::to_string(lineno) + ": " + e.what());
  }
  return r;
}

void write_jsonl(const std::string& path,
                 const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Err::IoError, "cannot write " + path);
  for (const DatasetRecord& r : records) out << record_to_json_line(r) << "\n";
  if (!out) raise(Err::IoError, "short write to " + path);
}

std::vector<DatasetRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Err::IoError, "cannot open " + path);
  std::vector<DatasetRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    records.push_back(record_from_json_line(line, lineno));
  }
  return records;
}

std::vector<std::string> all_instructions(
    const std::vector<DatasetRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records)
    for (const auto& t : r.sample.turns) out.push_back(t.instruction);
  return out;
}

std::vector<std::string> all_text_lines(
    const std::vector<DatasetRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) {
    for (const auto& t : r.sample.turns) {
      out.push_back(t.instruction);
      out.push_back(t.response);
    }
  }
  return out;
}

}  // namespace l2t
