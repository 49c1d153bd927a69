#pragma once

// Prompt rendering and completion parsing. Templates are frozen under a
// version tag so any result file can be traced to the exact rendering that
// produced it; tests pin the rendered output byte-for-byte against golden
// files.

#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "selfexplain/corpus.hpp"
#include "selfexplain/error.hpp"
#include "selfexplain/hash.hpp"

namespace selfexplain {

inline constexpr std::string_view kTemplateVersion = "v1";

// ---------------------------------------------------------------------------
// Cue catalog
// ---------------------------------------------------------------------------

struct Cue {
    int id = 0;
    std::string_view text_medical;
    std::string_view text_general;
};

enum class Domain { medical, general };

inline Domain parse_domain(std::string_view s) {
    if (s == "medical") return Domain::medical;
    if (s == "general") return Domain::general;
    throw Error(ErrorKind::validation, "unknown domain: " + std::string(s));
}

inline const char* domain_name(Domain d) {
    return d == Domain::medical ? "medical" : "general";
}

inline const std::array<Cue, 4>& cue_catalog() {
    static const std::array<Cue, 4> catalog{{
        {1, "Explain how to reach this answer.",
            "Explain how to reach this answer."},
        {2, "Let's think step by step.",
            "Let's think step by step."},
        {3, "Let's think step by step like a medical expert.",
            "Let's think step by step like an expert."},
        {4, "Let's use step by step inductive reasoning, given the medical "
            "nature of the question.",
            "Let's use step by step inductive reasoning."},
    }};
    return catalog;
}

inline const Cue& cue_by_id(int id) {
    for (const auto& cue : cue_catalog())
        if (cue.id == id) return cue;
    throw Error(ErrorKind::validation,
                "cue id must be 1..4, got " + std::to_string(id));
}

inline std::string_view cue_text(const Cue& cue, Domain domain) {
    return domain == Domain::medical ? cue.text_medical : cue.text_general;
}

// ---------------------------------------------------------------------------
// Prompt bundles
// ---------------------------------------------------------------------------

enum class Condition { no_cot, zero_shot_cot, human_cot, self_exp, explain_gen };

inline const char* condition_name(Condition c) {
    switch (c) {
        case Condition::no_cot: return "no_cot";
        case Condition::zero_shot_cot: return "zero_shot_cot";
        case Condition::human_cot: return "human_cot";
        case Condition::self_exp: return "self_exp";
        case Condition::explain_gen: return "explain_gen";
    }
    return "?";
}

inline Condition parse_condition(std::string_view s) {
    if (s == "no_cot") return Condition::no_cot;
    if (s == "zero_shot_cot") return Condition::zero_shot_cot;
    if (s == "human_cot") return Condition::human_cot;
    if (s == "self_exp") return Condition::self_exp;
    if (s == "explain_gen") return Condition::explain_gen;
    throw Error(ErrorKind::validation, "unknown condition: " + std::string(s));
}

struct PromptBundle {
    Condition condition = Condition::no_cot;
    std::string text;
    std::string template_version;
    std::string content_hash;
};

inline PromptBundle make_prompt_bundle(Condition condition, std::string text) {
    if (text.empty()) throw Error(ErrorKind::internal, "rendered an empty prompt");
    PromptBundle b;
    b.condition = condition;
    b.template_version = std::string(kTemplateVersion);
    b.content_hash = sha256_hex(text);
    b.text = std::move(text);
    return b;
}

// One demonstration slot in an ICL prompt.
struct IclExemplar {
    QAInstance instance;
    std::optional<std::string> explanation;
    std::string answer_label;
};

namespace detail {

inline void append_instance_block(std::string& out, const QAInstance& inst) {
    out += "Question: ";
    out += inst.question;
    out += "\nOptions:\n";
    for (const auto& opt : inst.options) {
        out += "(";
        out += opt.label;
        out += ") ";
        out += opt.text;
        out += "\n";
    }
}

inline std::string rendered_answer(const QAInstance& inst, const std::string& label) {
    const Option* opt = inst.find_option(label);
    if (!opt)
        throw Error(ErrorKind::validation,
                    "instance " + inst.id + ": invalid answer label '" + label + "'");
    return "(" + opt->label + ") " + opt->text;
}

} // namespace detail

// The continuation text scored against a prompt that ends at "Answer:".
inline std::string answer_continuation(const QAInstance& inst, const std::string& label) {
    return " " + detail::rendered_answer(inst, label);
}

// ---------------------------------------------------------------------------
// build_explanation_prompt
// ---------------------------------------------------------------------------

// Question, the stated answer, then the cue, which always stays the final
// sentence. With n_variants > 1 an instruction asking for that many numbered,
// distinct-logic explanations is inserted before the cue. The stated answer
// is whatever label the caller passes; in the wrong-answer ablation that is
// deliberately not the gold label.
inline PromptBundle build_explanation_prompt(const QAInstance& inst,
                                             const std::string& answer_label,
                                             const Cue& cue, Domain domain,
                                             int n_variants) {
    if (n_variants < 1)
        throw Error(ErrorKind::validation, "n_variants must be >= 1");
    std::string text;
    detail::append_instance_block(text, inst);
    text += "Answer: ";
    text += detail::rendered_answer(inst, answer_label);
    text += "\n\n";
    if (n_variants > 1) {
        text += "Provide exactly ";
        text += std::to_string(n_variants);
        text += " different explanations for this answer, numbered 1. through ";
        text += std::to_string(n_variants);
        text += ". and each following a distinct line of reasoning.\n";
    }
    text += cue_text(cue, domain);
    return make_prompt_bundle(Condition::explain_gen, std::move(text));
}

// ---------------------------------------------------------------------------
// build_icl_prompt
// ---------------------------------------------------------------------------

// Exemplar blocks in input order, then the query block ending at the answer
// slot. zero_shot_cot drops the exemplars and seeds the answer slot with the
// step-by-step cue instead.
inline PromptBundle build_icl_prompt(const std::vector<IclExemplar>& exemplars,
                                     const QAInstance& query, Condition condition) {
    if (condition == Condition::explain_gen)
        throw Error(ErrorKind::validation,
                    "explain_gen is not an inference condition");

    std::string text;
    if (condition == Condition::zero_shot_cot) {
        detail::append_instance_block(text, query);
        text += "Answer: ";
        text += cue_text(cue_by_id(2), Domain::general);
        return make_prompt_bundle(condition, std::move(text));
    }

    bool wants_explanation =
        condition == Condition::human_cot || condition == Condition::self_exp;
    for (const auto& ex : exemplars) {
        detail::append_instance_block(text, ex.instance);
        if (wants_explanation) {
            if (!ex.explanation || ex.explanation->empty())
                throw Error(ErrorKind::validation,
                            std::string(condition_name(condition)) +
                                ": exemplar '" + ex.instance.id +
                                "' has no explanation");
            text += "Explanation: ";
            text += *ex.explanation;
            text += "\n";
        }
        text += "Answer: ";
        text += detail::rendered_answer(ex.instance, ex.answer_label);
        text += "\n\n";
    }
    detail::append_instance_block(text, query);
    text += "Answer:";
    return make_prompt_bundle(condition, std::move(text));
}

// Second stage of zero-shot CoT: the first prompt, the model's reasoning,
// then an extraction trigger the answer parser can work from.
inline PromptBundle build_answer_extraction_prompt(const PromptBundle& stage1,
                                                   const std::string& reasoning) {
    std::string text = stage1.text;
    text += "\n";
    text += reasoning;
    text += "\nTherefore, the answer is";
    return make_prompt_bundle(Condition::zero_shot_cot, std::move(text));
}

// ---------------------------------------------------------------------------
// parse_answer
// ---------------------------------------------------------------------------

enum class ParseStatus { ok, parse_failure };

struct ParsedAnswer {
    std::optional<std::string> label;
    std::string raw_span;
    ParseStatus status = ParseStatus::parse_failure;
};

namespace detail {

inline bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

struct LabelMatch {
    std::size_t pos = std::string::npos; // match start, for earliest-wins ties
    std::string label;
    std::string span;
};

// Tries to read one of the instance's labels at `pos` in `low` (lowercased
// completion). Boundary-checked; bare single letters are only accepted when
// uppercase in the original or followed by closing punctuation, so prose like
// "a useful fact" never parses as option A.
inline std::optional<std::pair<std::string, std::size_t>> match_label_at(
    const std::string& low, const std::string& original, std::size_t pos,
    const QAInstance& inst, bool require_confident_letter) {
    for (const auto& opt : inst.options) {
        std::string lab = lower_copy(opt.label);
        if (low.compare(pos, lab.size(), lab) != 0) continue;
        std::size_t end = pos + lab.size();
        if (end < low.size() && is_word_char(low[end])) continue;
        if (pos > 0 && is_word_char(low[pos - 1])) continue;
        if (lab.size() == 1 && require_confident_letter) {
            bool upper = std::isupper(static_cast<unsigned char>(original[pos])) != 0;
            bool punctuated =
                end < low.size() && (low[end] == '.' || low[end] == ')' ||
                                     low[end] == ':' || low[end] == ',');
            if (!upper && !punctuated) continue;
        }
        return std::make_pair(opt.label, end);
    }
    return std::nullopt;
}

// Rule 1: "answer is L" / "Answer: L", optionally parenthesised.
inline std::optional<LabelMatch> match_answer_phrase(const std::string& low,
                                                     const std::string& original,
                                                     const QAInstance& inst) {
    std::optional<LabelMatch> best;
    for (std::string_view phrase : {"answer is", "answer:"}) {
        std::size_t from = 0;
        while (true) {
            std::size_t p = low.find(phrase, from);
            if (p == std::string::npos) break;
            from = p + 1;
            if (p > 0 && is_word_char(low[p - 1])) continue;
            std::size_t q = p + phrase.size();
            while (q < low.size() && (low[q] == ' ' || low[q] == ':')) ++q;
            bool open_paren = q < low.size() && low[q] == '(';
            if (open_paren) ++q;
            auto hit = match_label_at(low, original, q, inst, !open_paren);
            if (!hit) continue;
            std::size_t end = hit->second;
            if (open_paren && end < low.size() && low[end] == ')') ++end;
            if (!best || p < best->pos)
                best = LabelMatch{p, hit->first, original.substr(p, end - p)};
            break; // earliest occurrence of this phrase wins
        }
    }
    return best;
}

// Rule 2: a standalone "(L)" or "L." token.
inline std::optional<LabelMatch> match_standalone_label(const std::string& low,
                                                        const std::string& original,
                                                        const QAInstance& inst) {
    std::optional<LabelMatch> best;
    for (std::size_t p = 0; p < low.size(); ++p) {
        if (low[p] == '(') {
            auto hit = match_label_at(low, original, p + 1, inst, false);
            if (hit && hit->second < low.size() && low[hit->second] == ')') {
                if (!best || p < best->pos)
                    best = LabelMatch{p, hit->first,
                                      original.substr(p, hit->second + 1 - p)};
            }
        } else if (p == 0 || !is_word_char(low[p - 1])) {
            auto hit = match_label_at(low, original, p, inst, true);
            if (hit && hit->second < low.size() && low[hit->second] == '.') {
                if (!best || p < best->pos)
                    best = LabelMatch{p, hit->first,
                                      original.substr(p, hit->second + 1 - p)};
            }
        }
        if (best && best->pos <= p) break;
    }
    return best;
}

// Rule 3: exactly one option text occurs (word-bounded) in the completion.
inline std::optional<LabelMatch> match_option_text(const std::string& low,
                                                   const std::string& original,
                                                   const QAInstance& inst) {
    std::optional<LabelMatch> unique;
    int distinct = 0;
    for (const auto& opt : inst.options) {
        std::string needle = lower_copy(opt.text);
        if (needle.empty()) continue;
        std::size_t from = 0;
        std::size_t found = std::string::npos;
        while (true) {
            std::size_t p = low.find(needle, from);
            if (p == std::string::npos) break;
            from = p + 1;
            bool left_ok = p == 0 || !is_word_char(low[p - 1]);
            std::size_t end = p + needle.size();
            bool right_ok = end >= low.size() || !is_word_char(low[end]);
            if (left_ok && right_ok) {
                found = p;
                break;
            }
        }
        if (found != std::string::npos) {
            ++distinct;
            unique = LabelMatch{found, opt.label,
                                original.substr(found, needle.size())};
        }
    }
    if (distinct == 1) return unique;
    return std::nullopt;
}

} // namespace detail

inline ParsedAnswer parse_answer(const std::string& completion_text,
                                 const QAInstance& inst) {
    std::string low = detail::lower_copy(completion_text);
    ParsedAnswer out;
    for (auto* rule : {&detail::match_answer_phrase, &detail::match_standalone_label,
                       &detail::match_option_text}) {
        auto m = (*rule)(low, completion_text, inst);
        if (m) {
            out.label = m->label;
            out.raw_span = m->span;
            out.status = ParseStatus::ok;
            return out;
        }
    }
    out.status = ParseStatus::parse_failure;
    return out;
}

// ---------------------------------------------------------------------------
// parse_explanation_variants
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim_copy(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

// Recognises "1.", "2)", "3:", "Variant 1:", "Explanation 2." at the start of
// a line; returns offset just past the enumerator, or npos.
inline std::size_t enumerator_end(std::string_view line) {
    std::size_t p = 0;
    while (p < line.size() && (line[p] == ' ' || line[p] == '\t')) ++p;
    std::string low = lower_copy(line.substr(p, 12));
    for (std::string_view word : {"variant", "explanation"}) {
        if (low.size() >= word.size() && low.compare(0, word.size(), word) == 0) {
            std::size_t q = p + word.size();
            if (q < line.size() && (line[q] == ' ' || line[q] == '\t')) {
                while (q < line.size() && (line[q] == ' ' || line[q] == '\t')) ++q;
                p = q;
            }
            break;
        }
    }
    std::size_t digits = 0;
    while (p + digits < line.size() &&
           std::isdigit(static_cast<unsigned char>(line[p + digits])))
        ++digits;
    if (digits == 0 || digits > 3) return std::string_view::npos;
    std::size_t q = p + digits;
    if (q >= line.size()) return std::string_view::npos;
    if (line[q] != '.' && line[q] != ')' && line[q] != ':') return std::string_view::npos;
    ++q;
    while (q < line.size() && (line[q] == ' ' || line[q] == '\t')) ++q;
    return q;
}

} // namespace detail

// Splits a generation completion into enumerated explanation variants. With
// no enumerators at all, the whole text is a single variant. Returns at most
// n_expected variants; the caller decides how to treat a short list.
inline std::vector<std::string> parse_explanation_variants(
    const std::string& completion_text, int n_expected) {
    if (n_expected < 1)
        throw Error(ErrorKind::validation, "n_expected must be >= 1");
    std::string trimmed = detail::trim_copy(completion_text);
    if (trimmed.empty())
        throw Error(ErrorKind::validation, "empty completion, no explanation to parse");

    std::vector<std::string> blocks;
    std::string current;
    bool in_block = false;
    std::size_t start = 0;
    while (start <= trimmed.size()) {
        std::size_t eol = trimmed.find('\n', start);
        std::string_view line(trimmed.data() + start,
                              (eol == std::string::npos ? trimmed.size() : eol) - start);
        std::size_t body = detail::enumerator_end(line);
        if (body != std::string_view::npos) {
            if (in_block) blocks.push_back(detail::trim_copy(current));
            current = std::string(line.substr(body));
            in_block = true;
        } else if (in_block) {
            current += "\n";
            current += std::string(line);
        }
        if (eol == std::string::npos) break;
        start = eol + 1;
    }
    if (in_block) blocks.push_back(detail::trim_copy(current));

    std::vector<std::string> variants;
    for (auto& b : blocks)
        if (!b.empty()) variants.push_back(std::move(b));
    if (variants.empty()) variants.push_back(trimmed);
    if (variants.size() > static_cast<std::size_t>(n_expected))
        variants.resize(static_cast<std::size_t>(n_expected));
    return variants;
}

} // namespace selfexplain
