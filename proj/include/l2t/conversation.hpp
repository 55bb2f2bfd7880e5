#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "l2t/common.hpp"
#include "l2t/templates.hpp"
#include "l2t/tokenizer.hpp"

namespace l2t {

enum class TaskKind : uint8_t { Qa, Caption, Choice, Referring, Presence };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from(const std::string& name);

struct Turn {
  std::string instruction;
  std::string response;
};

struct ConversationSample {
  std::string image_id;
  std::vector<Turn> turns;
  TaskKind kind = TaskKind::Qa;
};

enum class Role : uint8_t {
  SysTemplate,
  TaskTemplate,
  InstrContent,
  Format,
  ImageSlot,
  Response,
};

const char* role_name(Role r);

// Which token roles each supervision mode trains on.
enum class MaskMode : uint8_t { Vit, L2tFull, L2tNoSys, L2t };

const char* mask_mode_name(MaskMode m);
MaskMode mask_mode_from(const std::string& name);
bool role_supervised(MaskMode mode, Role r);

struct ChatTemplate {
  std::string system_preamble;
  std::string user_tag = "USER:";
  std::string assistant_tag = "ASSISTANT:";
  std::string image_placeholder = "<image>";
  // First-turn user prefix; must contain image_placeholder.
  std::string user_prefix_with_image = "USER: <image>";
  int n_visual_tokens = 9;

  static ChatTemplate standard();
  // One-sentence preamble; the benchmark default, trading a shorter
  // sequence for faster cells while keeping a real system template.
  static ChatTemplate compact();
};

struct SerializedSample {
  std::vector<int> ids;
  std::vector<Role> roles;
  int visual_slot_count = 0;
  int slot_begin = -1;  // -1 when no image slots
  // Per turn, the position of the assistant-tag terminal token (the token
  // immediately preceding the first response token).
  std::vector<int> answer_anchors;

  size_t length() const { return ids.size(); }
};

// (text span, role) runs produced by template matching on an instruction.
struct AnnotatedSpan {
  std::string text;
  Role role;
};

// Maximal-munch, left-to-right exact sentence matching against the template
// set; matched sentences become TaskTemplate, everything else InstrContent.
std::vector<AnnotatedSpan> annotate_task_templates(
    const std::string& instruction, const TemplateSet& templates);

SerializedSample serialize(const ConversationSample& sample,
                           const ChatTemplate& chat, const Vocab& vocab,
                           const TemplateSet& templates);

struct MaskOptions {
  bool supervise_eos = true;  // EOS terminates generation, trained by default
};

struct LossMask {
  std::vector<uint8_t> supervised;  // per target position t: predicts ids[t+1]
  MaskMode mode = MaskMode::Vit;

  int64_t count() const;
};

// Targets are next-token shifted: position t is supervised iff the token at
// t+1 has a role permitted by the mode. Returns a mask with count()==0 as a
// skip signal rather than raising.
LossMask build_loss_mask(const SerializedSample& s, MaskMode mode,
                         const MaskOptions& opts = {});

struct RoleTokenCounts {
  int64_t response = 0;
  int64_t instr_content = 0;
  int64_t templates = 0;  // sys + task + format
  int64_t total() const { return response + instr_content + templates; }
};

RoleTokenCounts count_supervised_roles(const SerializedSample& s,
                                       const LossMask& mask);

}  // namespace l2t
