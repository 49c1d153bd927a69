#pragma once

// The method core: generate N self-explanation variants per exemplar, pick a
// variant per test case, and run in-context inference under any condition.
//
// Explanation map file: JSONL. Line 1 is a header with full generation
// provenance; each following line is one exemplar entry. Run record file:
// JSONL, header line then one record per test instance, written in dataset
// order so reruns are byte-identical.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "selfexplain/backend.hpp"
#include "selfexplain/corpus.hpp"
#include "selfexplain/error.hpp"
#include "selfexplain/hash.hpp"
#include "selfexplain/jsonl.hpp"
#include "selfexplain/prompting.hpp"
#include "selfexplain/rng.hpp"

namespace selfexplain {

enum class GenerationMode { right, wrong };

inline const char* generation_mode_name(GenerationMode m) {
    return m == GenerationMode::right ? "right" : "wrong";
}

inline GenerationMode parse_generation_mode(std::string_view s) {
    if (s == "right") return GenerationMode::right;
    if (s == "wrong") return GenerationMode::wrong;
    throw Error(ErrorKind::validation, "unknown generation mode: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Explanation map
// ---------------------------------------------------------------------------

struct ExplanationEntry {
    std::string exemplar_id;
    std::vector<std::string> variants;
    int cue_id = 0;
    std::string answer_label_used;
    GenerationMode mode = GenerationMode::right;
    std::string generation_prompt; // persisted so audits can re-check it
    std::string generation_prompt_hash;
};

struct ExplanationProvenance {
    std::string dataset_name;
    std::string exemplar_set_digest;
    std::uint64_t seed = 0;
    int n = 0;
    int cue_id = 0;
    GenerationMode mode = GenerationMode::right;
    Domain domain = Domain::medical;
    std::string model_id;
    std::string template_version;
    std::string config_digest; // empty outside the CLI
};

struct ExplanationMap {
    ExplanationProvenance provenance;
    std::vector<ExplanationEntry> entries;

    const ExplanationEntry* find(std::string_view exemplar_id) const {
        for (const auto& e : entries)
            if (e.exemplar_id == exemplar_id) return &e;
        return nullptr;
    }

    const ExplanationEntry& require(std::string_view exemplar_id) const {
        const ExplanationEntry* e = find(exemplar_id);
        if (!e)
            throw Error(ErrorKind::validation,
                        "explanation map has no entry for exemplar '" +
                            std::string(exemplar_id) + "'");
        return *e;
    }
};

// Structural checks tying a map to the exemplar set and dataset it claims to
// describe: every exemplar covered, variants non-empty, wrong mode really
// avoiding the gold label.
inline void validate_explanation_map(const ExplanationMap& map, const Dataset& ds,
                                     const ExemplarSet& exemplars) {
    if (map.provenance.exemplar_set_digest != exemplars.digest())
        throw Error(ErrorKind::config,
                    "explanation map was generated for a different exemplar set "
                    "(digest mismatch)");
    for (const auto& id : exemplars.members) {
        const ExplanationEntry& e = map.require(id);
        if (e.variants.empty())
            throw Error(ErrorKind::validation,
                        "exemplar '" + id + "' has no explanation variants");
        const QAInstance& inst = ds.require(id);
        if (!inst.has_label(e.answer_label_used))
            throw Error(ErrorKind::validation,
                        "exemplar '" + id + "': answer_label_used '" +
                            e.answer_label_used + "' is not an option");
        if (e.mode == GenerationMode::wrong && e.answer_label_used == inst.gold_label)
            throw Error(ErrorKind::validation,
                        "exemplar '" + id +
                            "': wrong-mode entry uses the gold label");
    }
}

inline json explanation_map_header(const ExplanationProvenance& p) {
    return json{{"kind", "explanation_map"},
                {"dataset", p.dataset_name},
                {"exemplar_set_digest", p.exemplar_set_digest},
                {"seed", p.seed},
                {"n", p.n},
                {"cue_id", p.cue_id},
                {"mode", generation_mode_name(p.mode)},
                {"domain", domain_name(p.domain)},
                {"model_id", p.model_id},
                {"template_version", p.template_version},
                {"config_digest", p.config_digest}};
}

inline std::string serialize_explanation_map(const ExplanationMap& map) {
    std::string out = explanation_map_header(map.provenance).dump();
    out += '\n';
    for (const auto& e : map.entries) {
        json line{{"exemplar_id", e.exemplar_id},
                  {"variants", e.variants},
                  {"cue_id", e.cue_id},
                  {"answer_label_used", e.answer_label_used},
                  {"mode", generation_mode_name(e.mode)},
                  {"generation_prompt", e.generation_prompt},
                  {"generation_prompt_hash", e.generation_prompt_hash}};
        out += line.dump();
        out += '\n';
    }
    return out;
}

inline void save_explanation_map(const ExplanationMap& map,
                                 const std::filesystem::path& path) {
    atomic_write_file(path, serialize_explanation_map(map));
}

inline ExplanationMap load_explanation_map(const std::filesystem::path& path) {
    auto lines = read_jsonl_file(path);
    if (lines.empty())
        throw Error(ErrorKind::validation, path.string() + ": empty explanation map");
    auto where = [&](std::size_t i) {
        return path.string() + ":" + std::to_string(lines[i].line_no);
    };
    const json& h = lines[0].value;
    if (!h.is_object() || h.value("kind", std::string{}) != "explanation_map")
        throw Error(ErrorKind::validation,
                    where(0) + ": expected an explanation_map header line");
    ExplanationMap map;
    try {
        map.provenance.dataset_name = h.at("dataset").get<std::string>();
        map.provenance.exemplar_set_digest = h.at("exemplar_set_digest").get<std::string>();
        map.provenance.seed = h.at("seed").get<std::uint64_t>();
        map.provenance.n = h.at("n").get<int>();
        map.provenance.cue_id = h.at("cue_id").get<int>();
        map.provenance.mode = parse_generation_mode(h.at("mode").get<std::string>());
        map.provenance.domain = parse_domain(h.at("domain").get<std::string>());
        map.provenance.model_id = h.at("model_id").get<std::string>();
        map.provenance.template_version = h.at("template_version").get<std::string>();
        map.provenance.config_digest = h.value("config_digest", std::string{});
    } catch (const json::exception& e) {
        throw Error(ErrorKind::validation, where(0) + ": bad header: " + e.what());
    }
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const json& j = lines[i].value;
        try {
            ExplanationEntry e;
            e.exemplar_id = j.at("exemplar_id").get<std::string>();
            e.variants = j.at("variants").get<std::vector<std::string>>();
            e.cue_id = j.at("cue_id").get<int>();
            e.answer_label_used = j.at("answer_label_used").get<std::string>();
            e.mode = parse_generation_mode(j.at("mode").get<std::string>());
            e.generation_prompt = j.value("generation_prompt", std::string{});
            e.generation_prompt_hash = j.value("generation_prompt_hash", std::string{});
            if (e.variants.empty())
                throw Error(ErrorKind::validation,
                            where(i) + ": exemplar '" + e.exemplar_id +
                                "' has no variants");
            map.entries.push_back(std::move(e));
        } catch (const json::exception& ex) {
            throw Error(ErrorKind::validation, where(i) + ": bad entry: " + ex.what());
        }
    }
    return map;
}

// ---------------------------------------------------------------------------
// generate_explanations
// ---------------------------------------------------------------------------

inline ExplanationMap generate_explanations(const ExemplarSet& exemplars,
                                            const Dataset& ds, const Cue& cue, int n,
                                            GenerationMode mode, std::uint64_t seed,
                                            Backend& backend, Domain domain) {
    if (n < 1) throw Error(ErrorKind::validation, "n must be >= 1");
    if (exemplars.members.empty())
        throw Error(ErrorKind::validation, "exemplar set is empty");
    for (const auto& id : exemplars.members) ds.require(id);

    ExplanationMap map;
    map.provenance.dataset_name = ds.name;
    map.provenance.exemplar_set_digest = exemplars.digest();
    map.provenance.seed = seed;
    map.provenance.n = n;
    map.provenance.cue_id = cue.id;
    map.provenance.mode = mode;
    map.provenance.domain = domain;
    map.provenance.model_id = backend.config().model_id;
    map.provenance.template_version = std::string(kTemplateVersion);

    for (const auto& id : exemplars.members) {
        const QAInstance& inst = ds.require(id);
        std::string label = mode == GenerationMode::right
                                ? inst.gold_label
                                : sample_wrong_label(inst, seed);
        PromptBundle prompt = build_explanation_prompt(inst, label, cue, domain, n);
        CompletionRequest req;
        req.prompt = prompt;
        req.temperature = backend.config().temperature_generate;
        req.max_tokens = backend.config().max_tokens;
        Completion completion;
        try {
            completion = backend.complete(req);
        } catch (const Error& e) {
            throw Error(e.kind(), "exemplar '" + id + "': " + e.what());
        }
        std::vector<std::string> variants;
        try {
            variants = parse_explanation_variants(completion.text, n);
        } catch (const Error& e) {
            throw Error(e.kind(), "exemplar '" + id + "': " + e.what());
        }
        ExplanationEntry entry;
        entry.exemplar_id = id;
        entry.variants = std::move(variants);
        entry.cue_id = cue.id;
        entry.answer_label_used = label;
        entry.mode = mode;
        entry.generation_prompt = prompt.text;
        entry.generation_prompt_hash = prompt.content_hash;
        map.entries.push_back(std::move(entry));
    }
    return map;
}

// ---------------------------------------------------------------------------
// select_variant
// ---------------------------------------------------------------------------

// Uniform, deterministic in (exemplar id, test instance id, seed); an
// independent draw per test case.
inline std::pair<std::size_t, std::string> select_variant(
    const ExplanationMap& map, const std::string& exemplar_id,
    const std::string& test_instance_id, std::uint64_t seed) {
    const ExplanationEntry& entry = map.require(exemplar_id);
    if (entry.variants.empty())
        throw Error(ErrorKind::validation,
                    "exemplar '" + exemplar_id + "' has no variants");
    SeededRng rng(stream_seed(seed, {"variant", exemplar_id, test_instance_id}));
    std::size_t idx = static_cast<std::size_t>(rng.below(entry.variants.size()));
    return {idx, entry.variants[idx]};
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct AnswerConfidence {
    double sum_logprob = 0.0;
    double mean_logprob = 0.0;
};

struct RunRecord {
    std::string instance_id;
    Condition condition = Condition::no_cot;
    std::string prompt_hash;
    std::string completion_text;
    std::optional<std::string> reasoning_text; // two-stage zero-shot only
    ParsedAnswer parsed;
    bool correct = false;
    std::optional<AnswerConfidence> confidence;
    std::map<std::string, std::size_t> variant_choice; // empty unless self_exp
};

inline json run_record_to_json(const RunRecord& r) {
    json parsed{{"status", r.parsed.status == ParseStatus::ok ? "ok" : "parse_failure"},
                {"raw_span", r.parsed.raw_span}};
    if (r.parsed.label) parsed["label"] = *r.parsed.label;
    json j{{"instance_id", r.instance_id},
           {"condition", condition_name(r.condition)},
           {"prompt_hash", r.prompt_hash},
           {"completion_text", r.completion_text},
           {"parsed", parsed},
           {"correct", r.correct}};
    if (r.reasoning_text) j["reasoning_text"] = *r.reasoning_text;
    if (r.confidence)
        j["confidence"] = json{{"sum_logprob", r.confidence->sum_logprob},
                               {"mean_logprob", r.confidence->mean_logprob}};
    if (!r.variant_choice.empty()) j["variant_choice"] = r.variant_choice;
    return j;
}

inline RunRecord run_record_from_json(const json& j, const std::string& where) {
    try {
        RunRecord r;
        r.instance_id = j.at("instance_id").get<std::string>();
        r.condition = parse_condition(j.at("condition").get<std::string>());
        r.prompt_hash = j.at("prompt_hash").get<std::string>();
        r.completion_text = j.at("completion_text").get<std::string>();
        const json& p = j.at("parsed");
        r.parsed.status = p.at("status").get<std::string>() == "ok"
                              ? ParseStatus::ok
                              : ParseStatus::parse_failure;
        r.parsed.raw_span = p.value("raw_span", std::string{});
        if (p.contains("label")) r.parsed.label = p["label"].get<std::string>();
        r.correct = j.at("correct").get<bool>();
        if (j.contains("reasoning_text"))
            r.reasoning_text = j["reasoning_text"].get<std::string>();
        if (j.contains("confidence"))
            r.confidence = AnswerConfidence{
                j["confidence"].at("sum_logprob").get<double>(),
                j["confidence"].at("mean_logprob").get<double>()};
        if (j.contains("variant_choice"))
            r.variant_choice =
                j["variant_choice"].get<std::map<std::string, std::size_t>>();
        return r;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::validation, where + ": bad run record: " + e.what());
    }
}

struct RunHeader {
    std::string experiment_id;
    std::string config_digest;
    std::string exemplar_set_digest;
    std::string condition;
    std::string dataset;
    std::string split;
    std::string model_id;
    std::string template_version;
};

inline json run_header_to_json(const RunHeader& h) {
    return json{{"kind", "run_records"},
                {"experiment_id", h.experiment_id},
                {"config_digest", h.config_digest},
                {"exemplar_set_digest", h.exemplar_set_digest},
                {"condition", h.condition},
                {"dataset", h.dataset},
                {"split", h.split},
                {"model_id", h.model_id},
                {"template_version", h.template_version}};
}

struct RunFile {
    RunHeader header;
    std::vector<RunRecord> records;
};

inline RunFile load_run_records(const std::filesystem::path& path) {
    auto lines = read_jsonl_file(path);
    if (lines.empty())
        throw Error(ErrorKind::validation, path.string() + ": empty run record file");
    const json& h = lines[0].value;
    if (!h.is_object() || h.value("kind", std::string{}) != "run_records")
        throw Error(ErrorKind::validation,
                    path.string() + ":" + std::to_string(lines[0].line_no) +
                        ": expected a run_records header line");
    RunFile out;
    out.header.experiment_id = h.value("experiment_id", std::string{});
    out.header.config_digest = h.value("config_digest", std::string{});
    out.header.exemplar_set_digest = h.value("exemplar_set_digest", std::string{});
    out.header.condition = h.value("condition", std::string{});
    out.header.dataset = h.value("dataset", std::string{});
    out.header.split = h.value("split", std::string{});
    out.header.model_id = h.value("model_id", std::string{});
    out.header.template_version = h.value("template_version", std::string{});
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::string where = path.string() + ":" + std::to_string(lines[i].line_no);
        out.records.push_back(run_record_from_json(lines[i].value, where));
    }
    return out;
}

// ---------------------------------------------------------------------------
// run_inference
// ---------------------------------------------------------------------------

namespace detail {

// Builds the demonstration list for one test instance, drawing self-exp
// variants when applicable.
inline std::vector<IclExemplar> assemble_exemplars(
    const Dataset& ds, const ExemplarSet& exemplars, const ExplanationMap* map,
    Condition condition, const std::string& test_instance_id, std::uint64_t seed,
    std::map<std::string, std::size_t>& variant_choice) {
    std::vector<IclExemplar> out;
    if (condition == Condition::zero_shot_cot) return out;
    for (const auto& id : exemplars.members) {
        const QAInstance& inst = ds.require(id);
        IclExemplar ex;
        ex.instance = inst;
        ex.answer_label = inst.gold_label;
        if (condition == Condition::human_cot) {
            ex.explanation = inst.human_cot;
        } else if (condition == Condition::self_exp) {
            auto [idx, text] = select_variant(*map, id, test_instance_id, seed);
            ex.explanation = text;
            variant_choice[id] = idx;
        }
        out.push_back(std::move(ex));
    }
    return out;
}

} // namespace detail

// Runs one condition over a split. Instances are processed in dataset order;
// chunks of up to max_parallel run concurrently; each finished chunk is
// appended to `writer` (when given) before the next starts, so interrupted
// runs leave a readable prefix and the disk cache makes reruns cheap.
/// Scoring degrades gracefully: the first capability failure turns scoring
// off for the rest of the run instead of aborting it.
inline std::vector<RunRecord> run_inference(
    const Dataset& ds, Split split, const ExemplarSet& exemplars,
    const ExplanationMap* map, Condition condition, std::uint64_t seed,
    Backend& backend, bool score, JsonlWriter* writer = nullptr,
    const std::function<void(std::size_t, std::size_t)>& progress = {}) {
    if (condition == Condition::explain_gen)
        throw Error(ErrorKind::config, "explain_gen is not an inference condition");
    if (condition == Condition::self_exp) {
        if (!map)
            throw Error(ErrorKind::config,
                        "condition self_exp needs an explanation map");
        validate_explanation_map(*map, ds, exemplars);
    }
    if (condition == Condition::human_cot) {
        for (const auto& id : exemplars.members) {
            const QAInstance& inst = ds.require(id);
            if (!inst.human_cot || inst.human_cot->empty())
                throw Error(ErrorKind::config,
                            "condition human_cot: exemplar '" + id +
                                "' has no human explanation");
        }
    }
    if (condition != Condition::zero_shot_cot)
        for (const auto& id : exemplars.members) ds.require(id);

    auto instances = ds.split_instances(split);
    if (instances.empty())
        throw Error(ErrorKind::validation,
                    "dataset " + ds.name + ": split '" + split_name(split) +
                        "' has no instances");

    std::vector<RunRecord> records(instances.size());
    bool scoring_enabled = score;
    std::mutex scoring_mu;

    auto run_one = [&](std::size_t i) {
        const QAInstance& inst = *instances[i];
        RunRecord rec;
        rec.instance_id = inst.id;
        rec.condition = condition;

        auto demos = detail::assemble_exemplars(ds, exemplars, map, condition,
                                                inst.id, seed, rec.variant_choice);
        PromptBundle prompt = build_icl_prompt(demos, inst, condition);
        rec.prompt_hash = prompt.content_hash;

        CompletionRequest req;
        req.prompt = prompt;
        req.temperature = backend.config().temperature_answer;
        req.max_tokens = backend.config().max_tokens;
        Completion first = backend.complete(req);

        if (condition == Condition::zero_shot_cot) {
            rec.reasoning_text = first.text;
            PromptBundle extract = build_answer_extraction_prompt(prompt, first.text);
            CompletionRequest req2;
            req2.prompt = extract;
            req2.temperature = backend.config().temperature_answer;
            req2.max_tokens = backend.config().max_tokens;
            Completion second = backend.complete(req2);
            rec.completion_text = second.text;
            rec.parsed = parse_answer(second.text, inst);
            if (rec.parsed.status != ParseStatus::ok)
                rec.parsed = parse_answer(first.text, inst);
        } else {
            rec.completion_text = first.text;
            rec.parsed = parse_answer(first.text, inst);
        }

        rec.correct = rec.parsed.status == ParseStatus::ok &&
                      rec.parsed.label && *rec.parsed.label == inst.gold_label;

        bool want_score;
        {
            std::scoped_lock lock(scoring_mu);
            want_score = scoring_enabled;
        }
        if (want_score && rec.parsed.status == ParseStatus::ok && rec.parsed.label) {
            try {
                ScoreResult s = backend.score_continuation(
                    prompt.text, answer_continuation(inst, *rec.parsed.label));
                rec.confidence = AnswerConfidence{s.sum_logprob, s.mean_logprob};
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::capability) throw;
                std::scoped_lock lock(scoring_mu);
                scoring_enabled = false;
            }
        }
        records[i] = std::move(rec);
    };

    std::size_t chunk = static_cast<std::size_t>(backend.config().max_parallel);
    for (std::size_t base = 0; base < instances.size(); base += chunk) {
        std::size_t end = std::min(base + chunk, instances.size());
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(end - base);
        for (std::size_t i = base; i < end; ++i)
            pool.emplace_back([&, i] {
                try {
                    run_one(i);
                } catch (...) {
                    errors[i - base] = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        for (std::size_t i = base; i < end; ++i) {
            if (errors[i - base]) {
                try {
                    std::rethrow_exception(errors[i - base]);
                } catch (const Error& e) {
                    throw Error(e.kind(), "instance '" + instances[i]->id +
                                              "': " + e.what());
                }
            }
            if (writer) writer->append(run_record_to_json(records[i]));
        }
        if (progress) progress(end, instances.size());
    }
    return records;
}

} // namespace selfexplain
