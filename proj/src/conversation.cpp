#include "l2t/conversation.hpp"

#include <algorithm>

namespace l2t {

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::Qa: return "qa";
    case TaskKind::Caption: return "caption";
    case TaskKind::Choice: return "choice";
    case TaskKind::Referring: return "referring";
    case TaskKind::Presence: return "presence";
  }
  return "qa";
}

TaskKind task_kind_from(const std::string& name) {
  if (name == "qa") return TaskKind::Qa;
  if (name == "caption") return TaskKind::Caption;
  if (name == "choice") return TaskKind::Choice;
  if (name == "referring") return TaskKind::Referring;
  if (name == "presence") return TaskKind::Presence;
  raise(Err::InvalidArgument, "unknown task kind: " + name);
}

const char* role_name(Role r) {
  switch (r) {
    case Role::SysTemplate: return "sys_template";
    case Role::TaskTemplate: return "task_template";
    case Role::InstrContent: return "instr_content";
    case Role::Format: return "format";
    case Role::ImageSlot: return "image_slot";
    case Role::Response: return "response";
  }
  return "?";
}

const char* mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::Vit: return "vit";
    case MaskMode::L2tFull: return "l2t_full";
    case MaskMode::L2tNoSys: return "l2t_no_sys";
    case MaskMode::L2t: return "l2t";
  }
  return "?";
}

MaskMode mask_mode_from(const std::string& name) {
  if (name == "vit") return MaskMode::Vit;
  if (name == "l2t_full") return MaskMode::L2tFull;
  if (name == "l2t_no_sys") return MaskMode::L2tNoSys;
  if (name == "l2t") return MaskMode::L2t;
  raise(Err::InvalidArgument, "unknown mask mode: " + name);
}

bool role_supervised(MaskMode mode, Role r) {
  switch (mode) {
    case MaskMode::Vit:
      return r == Role::Response;
    case MaskMode::L2t:
      return r == Role::Response || r == Role::InstrContent;
    case MaskMode::L2tNoSys:
      return r == Role::Response || r == Role::InstrContent ||
             r == Role::TaskTemplate;
    case MaskMode::L2tFull:
      return r != Role::ImageSlot;
  }
  return false;
}

ChatTemplate ChatTemplate::standard() {
  ChatTemplate c;
  c.system_preamble =
      "A chat between a curious user and an artificial intelligence "
      "assistant. The assistant gives helpful, detailed, and polite answers "
      "to the user's questions.";
  return c;
}

ChatTemplate ChatTemplate::compact() {
  ChatTemplate c;
  c.system_preamble =
      "A chat between a curious user and an artificial intelligence "
      "assistant.";
  return c;
}

std::vector<AnnotatedSpan> annotate_task_templates(
    const std::string& instruction, const TemplateSet& templates) {
  std::vector<std::string> sentences = split_sentences(instruction);
  std::vector<AnnotatedSpan> spans;
  size_t i = 0;
  while (i < sentences.size()) {
    const TemplateEntry* hit = templates.match_at(sentences, i);
    if (hit != nullptr) {
      spans.push_back({hit->text, Role::TaskTemplate});
      i += hit->sentences.size();
    } else {
      spans.push_back({sentences[i], Role::InstrContent});
      ++i;
    }
  }
  // Merge adjacent runs of the same role so token spans stay coarse.
  std::vector<AnnotatedSpan> merged;
  for (auto& s : spans) {
    if (!merged.empty() && merged.back().role == s.role) {
      merged.back().text += " " + s.text;
    } else {
      merged.push_back(std::move(s));
    }
  }
  return merged;
}

SerializedSample serialize(const ConversationSample& sample,
                           const ChatTemplate& chat, const Vocab& vocab,
                           const TemplateSet& templates) {
  if (sample.turns.empty())
    raise(Err::InvalidArgument, "conversation needs at least one turn");
  for (const Turn& t : sample.turns)
    if (t.instruction.empty() || t.response.empty())
      raise(Err::InvalidArgument, "empty instruction or response");

  auto placeholder_pos = chat.user_prefix_with_image.find(chat.image_placeholder);
  if (chat.image_placeholder.empty() || placeholder_pos == std::string::npos)
    raise(Err::UnknownPlaceholder,
          "chat template lacks the image placeholder marker");

  SerializedSample out;
  auto emit_text = [&](const std::string& text, Role role) {
    for (int id : encode(vocab, text)) {
      out.ids.push_back(id);
      out.roles.push_back(role);
    }
  };

  out.ids.push_back(Vocab::kBos);
  out.roles.push_back(Role::Format);
  if (!chat.system_preamble.empty())
    emit_text(chat.system_preamble, Role::SysTemplate);

  for (size_t turn = 0; turn < sample.turns.size(); ++turn) {
    const Turn& t = sample.turns[turn];
    if (turn == 0) {
      emit_text(chat.user_prefix_with_image.substr(0, placeholder_pos),
                Role::Format);
      out.slot_begin = static_cast<int>(out.ids.size());
      out.visual_slot_count = chat.n_visual_tokens;
      for (int i = 0; i < chat.n_visual_tokens; ++i) {
        out.ids.push_back(Vocab::kImageSlot);
        out.roles.push_back(Role::ImageSlot);
      }
      emit_text(chat.user_prefix_with_image.substr(
                    placeholder_pos + chat.image_placeholder.size()),
                Role::Format);
    } else {
      emit_text(chat.user_tag, Role::Format);
    }

    for (const AnnotatedSpan& span :
         annotate_task_templates(t.instruction, templates))
      emit_text(span.text, span.role);

    emit_text(chat.assistant_tag, Role::Format);
    out.answer_anchors.push_back(static_cast<int>(out.ids.size()) - 1);

    emit_text(t.response, Role::Response);
    out.ids.push_back(Vocab::kEos);
    out.roles.push_back(Role::Response);
  }
  return out;
}

int64_t LossMask::count() const {
  int64_t n = 0;
  for (uint8_t b : supervised) n += b ? 1 : 0;
  return n;
}

LossMask build_loss_mask(const SerializedSample& s, MaskMode mode,
                         const MaskOptions& opts) {
  LossMask mask;
  mask.mode = mode;
  size_t L = s.ids.size();
  mask.supervised.assign(L, 0);
  for (size_t t = 0; t + 1 < L; ++t) {
    Role target_role = s.roles[t + 1];
    if (!role_supervised(mode, target_role)) continue;
    if (!opts.supervise_eos && s.ids[t + 1] == Vocab::kEos) continue;
    mask.supervised[t] = 1;
  }
  return mask;
}

RoleTokenCounts count_supervised_roles(const SerializedSample& s,
                                       const LossMask& mask) {
  RoleTokenCounts counts;
  for (size_t t = 0; t + 1 < s.ids.size(); ++t) {
    if (!mask.supervised[t]) continue;
    switch (s.roles[t + 1]) {
      case Role::Response: ++counts.response; break;
      case Role::InstrContent: ++counts.instr_content; break;
      case Role::SysTemplate:
      case Role::TaskTemplate:
      case Role::Format: ++counts.templates; break;
      case Role::ImageSlot: break;
    }
  }
  return counts;
}

}  // namespace l2t
