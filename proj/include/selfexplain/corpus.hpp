#pragma once

// QA datasets: loading, validation, seeded exemplar/test sampling and the
// option-remapping control used by the bias experiments.
//
// Dataset files are UTF-8 JSONL, one record per line:
//   id        string, unique within the file
//   question  string
//   options   array of strings, labelled A, B, C, D in order
//   answer    label string ("B", "yes"), 0-based index, or boolean
//   human_cot optional string
//   split     "train" | "dev" | "test"
// Boolean answers produce a two-option yes/no instance; unknown extra
// fields are ignored.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "selfexplain/error.hpp"
#include "selfexplain/hash.hpp"
#include "selfexplain/jsonl.hpp"
#include "selfexplain/rng.hpp"

namespace selfexplain {

enum class Split { train, dev, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::dev: return "dev";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "dev") return Split::dev;
    if (s == "test") return Split::test;
    throw Error(ErrorKind::validation, "unknown split: " + std::string(s));
}

struct Option {
    std::string label;
    std::string text;
};

struct QAInstance {
    std::string id;
    std::string question;
    std::vector<Option> options;
    std::string gold_label;
    std::optional<std::string> human_cot;
    Split split = Split::train;

    const Option* find_option(std::string_view label) const {
        for (const auto& opt : options)
            if (opt.label == label) return &opt;
        return nullptr;
    }

    bool has_label(std::string_view label) const { return find_option(label) != nullptr; }

    const Option& gold_option() const {
        const Option* opt = find_option(gold_label);
        if (!opt)
            throw Error(ErrorKind::validation,
                        "instance " + id + ": gold label '" + gold_label +
                            "' not among options");
        return *opt;
    }
};

struct Dataset {
    std::string name;
    std::vector<QAInstance> instances;
    int option_arity = 0;

    const QAInstance* find(std::string_view id) const {
        for (const auto& inst : instances)
            if (inst.id == id) return &inst;
        return nullptr;
    }

    const QAInstance& require(std::string_view id) const {
        const QAInstance* inst = find(id);
        if (!inst)
            throw Error(ErrorKind::validation,
                        "dataset " + name + ": no instance with id '" +
                            std::string(id) + "'");
        return *inst;
    }

    std::vector<const QAInstance*> split_instances(Split split) const {
        std::vector<const QAInstance*> out;
        for (const auto& inst : instances)
            if (inst.split == split) out.push_back(&inst);
        return out;
    }
};

// The K demonstrations shared by every prompting condition of an experiment.
struct ExemplarSet {
    std::string dataset_name;
    std::uint64_t seed = 0;
    std::vector<std::string> members; // instance ids, sampled order

    std::string digest() const {
        json j{{"dataset", dataset_name}, {"seed", seed}, {"members", members}};
        return sha256_hex(j.dump());
    }
};

enum class DatasetSchema { auto_detect, multiple_choice, boolean_qa };

inline DatasetSchema parse_dataset_schema(std::string_view s) {
    if (s == "auto") return DatasetSchema::auto_detect;
    if (s == "mcq") return DatasetSchema::multiple_choice;
    if (s == "bool") return DatasetSchema::boolean_qa;
    throw Error(ErrorKind::validation,
                "unknown dataset schema: " + std::string(s) +
                    " (expected auto, mcq or bool)");
}

inline const char* dataset_schema_name(DatasetSchema s) {
    switch (s) {
        case DatasetSchema::auto_detect: return "auto";
        case DatasetSchema::multiple_choice: return "mcq";
        case DatasetSchema::boolean_qa: return "bool";
    }
    return "?";
}

namespace detail {

inline std::string letter_label(std::size_t index) {
    return std::string(1, static_cast<char>('A' + index));
}

inline std::string lower_copy(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline QAInstance instance_from_record(const json& rec, const std::string& where,
                                       DatasetSchema schema) {
    auto fail = [&](const std::string& msg) -> Error {
        return Error(ErrorKind::validation, where + ": " + msg);
    };

    if (!rec.is_object()) throw fail("record is not a JSON object");
    if (!rec.contains("id") || !rec["id"].is_string()) throw fail("missing string field 'id'");
    if (!rec.contains("question") || !rec["question"].is_string())
        throw fail("missing string field 'question'");
    if (!rec.contains("split") || !rec["split"].is_string())
        throw fail("missing string field 'split'");
    if (!rec.contains("answer")) throw fail("missing field 'answer'");

    QAInstance inst;
    inst.id = rec["id"].get<std::string>();
    inst.question = rec["question"].get<std::string>();
    inst.split = parse_split(rec["split"].get<std::string>());
    if (rec.contains("human_cot")) {
        if (!rec["human_cot"].is_string()) throw fail("field 'human_cot' must be a string");
        inst.human_cot = rec["human_cot"].get<std::string>();
    }

    std::vector<std::string> option_texts;
    if (rec.contains("options")) {
        if (!rec["options"].is_array()) throw fail("field 'options' must be an array");
        for (const auto& opt : rec["options"]) {
            if (!opt.is_string()) throw fail("options entries must be strings");
            option_texts.push_back(opt.get<std::string>());
        }
    }

    const json& answer = rec["answer"];
    bool boolean_record = answer.is_boolean();
    if (!boolean_record && answer.is_string()) {
        std::string low = lower_copy(answer.get<std::string>());
        boolean_record = (low == "yes" || low == "no") && option_texts.size() <= 2;
    }
    if (schema == DatasetSchema::boolean_qa && !boolean_record)
        throw fail("record is not boolean QA but schema is 'bool'");
    if (schema == DatasetSchema::multiple_choice && answer.is_boolean())
        throw fail("boolean answer not allowed under schema 'mcq'");

    if (boolean_record && schema != DatasetSchema::multiple_choice) {
        if (option_texts.empty()) option_texts = {"yes", "no"};
        if (option_texts.size() != 2)
            throw fail("boolean record needs exactly 2 options (yes text, no text)");
        inst.options = {{"yes", option_texts[0]}, {"no", option_texts[1]}};
        if (answer.is_boolean()) {
            inst.gold_label = answer.get<bool>() ? "yes" : "no";
        } else {
            inst.gold_label = lower_copy(answer.get<std::string>());
        }
        return inst;
    }

    if (option_texts.empty()) throw fail("missing or empty 'options' array");
    for (std::size_t i = 0; i < option_texts.size(); ++i)
        inst.options.push_back({letter_label(i), option_texts[i]});

    if (answer.is_number_integer()) {
        auto idx = answer.get<long long>();
        if (idx < 0 || idx >= static_cast<long long>(inst.options.size()))
            throw fail("answer index " + std::to_string(idx) + " out of range");
        inst.gold_label = inst.options[static_cast<std::size_t>(idx)].label;
    } else if (answer.is_string()) {
        inst.gold_label = answer.get<std::string>();
    } else {
        throw fail("field 'answer' must be a label string, index or boolean");
    }
    return inst;
}

inline void validate_instance(const QAInstance& inst, const std::string& where) {
    auto fail = [&](const std::string& msg) -> Error {
        return Error(ErrorKind::validation,
                     where + ": instance '" + inst.id + "': " + msg);
    };
    if (inst.id.empty()) throw Error(ErrorKind::validation, where + ": empty id");
    if (inst.options.size() < 2 || inst.options.size() > 4)
        throw fail("expected 2 to 4 options, got " + std::to_string(inst.options.size()));
    for (std::size_t i = 0; i < inst.options.size(); ++i)
        for (std::size_t j = i + 1; j < inst.options.size(); ++j)
            if (inst.options[i].label == inst.options[j].label)
                throw fail("duplicate option label '" + inst.options[i].label + "'");
    std::size_t gold_hits = 0;
    for (const auto& opt : inst.options)
        if (opt.label == inst.gold_label) ++gold_hits;
    if (gold_hits != 1)
        throw fail("gold label '" + inst.gold_label + "' not among options");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Dataset load_dataset(const std::filesystem::path& path,
                            DatasetSchema schema = DatasetSchema::auto_detect) {
    Dataset ds;
    ds.name = path.stem().string();
    auto lines = read_jsonl_file(path);
    std::map<std::string, std::size_t> seen_ids;
    for (const auto& line : lines) {
        std::string where = path.filename().string() + ":" + std::to_string(line.line_no);
        QAInstance inst = detail::instance_from_record(line.value, where, schema);
        detail::validate_instance(inst, where);
        auto [it, inserted] = seen_ids.emplace(inst.id, line.line_no);
        if (!inserted)
            throw Error(ErrorKind::validation,
                        where + ": duplicate id '" + inst.id + "' (first seen at line " +
                            std::to_string(it->second) + ")");
        ds.instances.push_back(std::move(inst));
    }
    if (ds.instances.empty())
        throw Error(ErrorKind::validation, path.string() + ": dataset has no records");
    ds.option_arity = static_cast<int>(ds.instances.front().options.size());
    if (ds.option_arity != 2 && ds.option_arity != 4)
        throw Error(ErrorKind::validation,
                    path.string() + ": option arity must be 2 or 4, got " +
                        std::to_string(ds.option_arity));
    for (const auto& inst : ds.instances)
        if (static_cast<int>(inst.options.size()) != ds.option_arity)
            throw Error(ErrorKind::validation,
                        path.string() + ": instance '" + inst.id +
                            "' breaks the shared option arity of " +
                            std::to_string(ds.option_arity));
    return ds;
}

inline std::string serialize_dataset(const Dataset& ds) {
    std::string out;
    for (const auto& inst : ds.instances) {
        json rec;
        rec["id"] = inst.id;
        rec["question"] = inst.question;
        json opts = json::array();
        for (const auto& opt : inst.options) opts.push_back(opt.text);
        rec["options"] = opts;
        rec["answer"] = inst.gold_label;
        if (inst.human_cot) rec["human_cot"] = *inst.human_cot;
        rec["split"] = split_name(inst.split);
        out += rec.dump();
        out += '\n';
    }
    return out;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    atomic_write_file(path, serialize_dataset(ds));
}

// Uniform draw of k train instances without replacement. Deterministic in
// (dataset name, k, seed); the same set is reused for every condition.
inline ExemplarSet sample_exemplars(const Dataset& ds, std::size_t k,
                                    std::uint64_t seed) {
    auto train = ds.split_instances(Split::train);
    if (k > train.size())
        throw Error(ErrorKind::validation,
                    "dataset " + ds.name + ": k=" + std::to_string(k) +
                        " exceeds train split size " + std::to_string(train.size()));
    SeededRng rng(stream_seed(seed, {"exemplars", ds.name}));
    auto idx = sample_indices_without_replacement(train.size(), k, rng);
    ExemplarSet set;
    set.dataset_name = ds.name;
    set.seed = seed;
    for (std::size_t i : idx) set.members.push_back(train[i]->id);
    return set;
}

// Uniform draw over the non-gold labels, deterministic per (instance id, seed).
inline std::string sample_wrong_label(const QAInstance& inst, std::uint64_t seed) {
    if (inst.options.size() < 2)
        throw Error(ErrorKind::validation,
                    "instance " + inst.id + ": need at least 2 options to pick a wrong label");
    std::vector<std::string> wrong;
    for (const auto& opt : inst.options)
        if (opt.label != inst.gold_label) wrong.push_back(opt.label);
    SeededRng rng(stream_seed(seed, {"wrong-label", inst.id}));
    return wrong[static_cast<std::size_t>(rng.below(wrong.size()))];
}

// Moves the gold option's text to target_label by swapping exactly two option
// texts; labels keep their positions. Applying the remap twice restores the
// original instance.
inline QAInstance remap_gold_option(const QAInstance& inst,
                                    const std::string& target_label) {
    if (!inst.has_label(target_label))
        throw Error(ErrorKind::validation,
                    "instance " + inst.id + ": invalid target label '" +
                        target_label + "'");
    QAInstance out = inst;
    if (target_label == inst.gold_label) return out;
    std::size_t gold_pos = 0, target_pos = 0;
    for (std::size_t i = 0; i < out.options.size(); ++i) {
        if (out.options[i].label == inst.gold_label) gold_pos = i;
        if (out.options[i].label == target_label) target_pos = i;
    }
    std::swap(out.options[gold_pos].text, out.options[target_pos].text);
    out.gold_label = target_label;
    return out;
}

// Seeded uniform sample of exactly per_label test instances per gold label,
// concatenated in option-label order.
inline std::vector<QAInstance> balanced_subset(const Dataset& ds,
                                               std::size_t per_label,
                                               std::uint64_t seed) {
    std::vector<std::string> labels;
    for (const auto& opt : ds.instances.front().options) labels.push_back(opt.label);

    std::vector<QAInstance> out;
    for (const auto& label : labels) {
        std::vector<const QAInstance*> group;
        for (const auto& inst : ds.instances)
            if (inst.split == Split::test && inst.gold_label == label)
                group.push_back(&inst);
        if (group.size() < per_label)
            throw Error(ErrorKind::validation,
                        "dataset " + ds.name + ": label '" + label + "' has only " +
                            std::to_string(group.size()) + " test instances, need " +
                            std::to_string(per_label));
        SeededRng rng(stream_seed(seed, {"balanced", ds.name, label}));
        auto idx = sample_indices_without_replacement(group.size(), per_label, rng);
        for (std::size_t i : idx) out.push_back(*group[i]);
    }
    return out;
}

} // namespace selfexplain
