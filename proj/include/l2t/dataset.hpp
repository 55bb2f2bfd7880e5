#pragma once

#include <string>
#include <vector>

#include "l2t/conversation.hpp"

namespace l2t {

constexpr int kDatasetSchemaVersion = 1;

// One JSONL record: an image feature vector plus its conversation and the
// ground truth needed for scoring.
struct DatasetRecord {
  ConversationSample sample;
  std::vector<double> feature;
  std::vector<std::string> gt_objects;
  // Optional extras for diagnostics; -1 / empty when absent.
  int phrasing_id = -1;
  std::string answer;
};

std::string record_to_json_line(const DatasetRecord& r);
DatasetRecord record_from_json_line(const std::string& line, int lineno = 0);

void write_jsonl(const std::string& path,
                 const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_jsonl(const std::string& path);

// Instruction text of every turn, in corpus order (template mining input).
std::vector<std::string> all_instructions(
    const std::vector<DatasetRecord>& records);

// All instruction+response text lines (vocabulary building input).
std::vector<std::string> all_text_lines(
    const std::vector<DatasetRecord>& records);

}  // namespace l2t
