#pragma once

// Experiment orchestration: a declarative config, a namespaced output
// directory per experiment id, and the subcommand bodies the CLI dispatches
// to. Every output file embeds the digest of the config that produced it,
// and a marker file pins the experiment identity so one id can never mix
// two different setups.
//
// Layout under <output_dir>/<experiment_id>/:
//   experiment.json            identity marker
//   explanations.jsonl         explanation map (cmd_explain)
//   records_<condition>.jsonl  run records (cmd_run)
//   eval_<condition>.json      accuracy + calibration (cmd_eval)
//   compare_<a>_vs_<b>.json/.csv  agreement categories (cmd_compare)
//   bias.json/.csv             selection bias sweep (cmd_bias)
//   similarity.json/.csv       explanation similarity (cmd_similarity)
//   report.json/.csv           merged bundle (cmd_report)

#include <array>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "selfexplain/backend.hpp"
#include "selfexplain/corpus.hpp"
#include "selfexplain/error.hpp"
#include "selfexplain/hash.hpp"
#include "selfexplain/jsonl.hpp"
#include "selfexplain/metrics.hpp"
#include "selfexplain/pipeline.hpp"
#include "selfexplain/prompting.hpp"

namespace selfexplain {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

inline json backend_config_to_json(const BackendConfig& b) {
    return json{{"kind", backend_kind_name(b.kind)},
                {"base_url", b.base_url},
                {"model_id", b.model_id},
                {"api_key_env", b.api_key_env},
                {"script_path", b.script_path},
                {"cache_dir", b.cache_dir},
                {"temperature_generate", b.temperature_generate},
                {"temperature_answer", b.temperature_answer},
                {"max_tokens", b.max_tokens},
                {"max_parallel", b.max_parallel},
                {"retry",
                 {{"max_attempts", b.retry.max_attempts},
                  {"base_delay_ms", b.retry.base_delay_ms},
                  {"backoff_factor", b.retry.backoff_factor}}}};
}

inline BackendConfig backend_config_from_json(const json& j) {
    BackendConfig b;
    if (j.contains("kind")) b.kind = parse_backend_kind(j["kind"].get<std::string>());
    b.base_url = j.value("base_url", b.base_url);
    b.model_id = j.value("model_id", b.model_id);
    b.api_key_env = j.value("api_key_env", b.api_key_env);
    b.script_path = j.value("script_path", b.script_path);
    b.cache_dir = j.value("cache_dir", b.cache_dir);
    b.temperature_generate = j.value("temperature_generate", b.temperature_generate);
    b.temperature_answer = j.value("temperature_answer", b.temperature_answer);
    b.max_tokens = j.value("max_tokens", b.max_tokens);
    b.max_parallel = j.value("max_parallel", b.max_parallel);
    if (j.contains("retry")) {
        const json& r = j["retry"];
        b.retry.max_attempts = r.value("max_attempts", b.retry.max_attempts);
        b.retry.base_delay_ms = r.value("base_delay_ms", b.retry.base_delay_ms);
        b.retry.backoff_factor = r.value("backoff_factor", b.retry.backoff_factor);
    }
    return b;
}

struct ExperimentConfig {
    std::string experiment_id;
    std::string dataset_path;
    DatasetSchema schema = DatasetSchema::auto_detect;
    int k = 5;
    int n = 5;
    int cue_id = 1;
    GenerationMode mode = GenerationMode::right;
    std::vector<Condition> conditions = {Condition::no_cot, Condition::zero_shot_cot,
                                         Condition::human_cot, Condition::self_exp};
    std::uint64_t seed = 0;
    Domain domain = Domain::medical;
    Split split = Split::test;
    bool score = false;
    std::size_t per_label = 25;     // bias subcommand
    std::string lexicon_path;       // similarity subcommand
    BackendConfig backend;
    std::string output_dir = "out";

    json to_json() const {
        json conds = json::array();
        for (auto c : conditions) conds.push_back(condition_name(c));
        return json{{"experiment_id", experiment_id},
                    {"dataset_path", dataset_path},
                    {"schema", dataset_schema_name(schema)},
                    {"k", k},
                    {"n", n},
                    {"cue_id", cue_id},
                    {"mode", generation_mode_name(mode)},
                    {"conditions", conds},
                    {"seed", seed},
                    {"domain", domain_name(domain)},
                    {"split", split_name(split)},
                    {"score", score},
                    {"per_label", per_label},
                    {"lexicon_path", lexicon_path},
                    {"backend", backend_config_to_json(backend)},
                    {"output_dir", output_dir}};
    }

    static ExperimentConfig from_json(const json& j) {
        ExperimentConfig c;
        c.experiment_id = j.value("experiment_id", c.experiment_id);
        c.dataset_path = j.value("dataset_path", c.dataset_path);
        if (j.contains("schema"))
            c.schema = parse_dataset_schema(j["schema"].get<std::string>());
        c.k = j.value("k", c.k);
        c.n = j.value("n", c.n);
        c.cue_id = j.value("cue_id", c.cue_id);
        if (j.contains("mode"))
            c.mode = parse_generation_mode(j["mode"].get<std::string>());
        if (j.contains("conditions")) {
            c.conditions.clear();
            for (const auto& s : j["conditions"])
                c.conditions.push_back(parse_condition(s.get<std::string>()));
        }
        c.seed = j.value("seed", c.seed);
        if (j.contains("domain")) c.domain = parse_domain(j["domain"].get<std::string>());
        if (j.contains("split")) c.split = parse_split(j["split"].get<std::string>());
        c.score = j.value("score", c.score);
        c.per_label = j.value("per_label", c.per_label);
        c.lexicon_path = j.value("lexicon_path", c.lexicon_path);
        if (j.contains("backend")) c.backend = backend_config_from_json(j["backend"]);
        c.output_dir = j.value("output_dir", c.output_dir);
        return c;
    }

    // Digest of the full config; embedded in every output file.
    std::string digest() const { return sha256_hex(to_json().dump()); }

    // The fields that define the experiment's identity. Per-invocation
    // selectors (condition list, scoring, report inputs) are excluded so a
    // later eval pass does not clash with the run that produced the records.
    json identity_json() const {
        return json{{"experiment_id", experiment_id},
                    {"dataset_path", dataset_path},
                    {"schema", dataset_schema_name(schema)},
                    {"k", k},
                    {"n", n},
                    {"cue_id", cue_id},
                    {"mode", generation_mode_name(mode)},
                    {"seed", seed},
                    {"domain", domain_name(domain)},
                    {"split", split_name(split)},
                    {"backend",
                     {{"kind", backend_kind_name(backend.kind)},
                      {"model_id", backend.model_id},
                      {"base_url", backend.base_url},
                      {"script_path", backend.script_path},
                      {"temperature_generate", backend.temperature_generate},
                      {"temperature_answer", backend.temperature_answer},
                      {"max_tokens", backend.max_tokens}}}};
    }

    std::string identity_digest() const { return sha256_hex(identity_json().dump()); }

    void validate() const {
        if (experiment_id.empty())
            throw Error(ErrorKind::config, "experiment_id is required");
        for (char c : experiment_id)
            if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' &&
                c != '_' && c != '.')
                throw Error(ErrorKind::config,
                            "experiment_id may only contain [A-Za-z0-9._-]: '" +
                                experiment_id + "'");
        if (dataset_path.empty())
            throw Error(ErrorKind::config, "dataset_path is required");
        if (!std::filesystem::exists(dataset_path))
            throw Error(ErrorKind::config, "dataset file not found: " + dataset_path);
        if (k < 1) throw Error(ErrorKind::config, "k must be >= 1");
        if (n < 1) throw Error(ErrorKind::config, "n must be >= 1");
        cue_by_id(cue_id);
        if (conditions.empty())
            throw Error(ErrorKind::config, "at least one condition is required");
        if (per_label < 1) throw Error(ErrorKind::config, "per_label must be >= 1");
        backend.validate();
        if (backend.kind == BackendKind::mock &&
            !std::filesystem::exists(backend.script_path))
            throw Error(ErrorKind::config,
                        "mock script not found: " + backend.script_path);
        if (output_dir.empty())
            throw Error(ErrorKind::config, "output_dir is required");
    }
};

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    json j = json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded())
        throw Error(ErrorKind::config, path.string() + ": malformed JSON config");
    try {
        return ExperimentConfig::from_json(j);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, path.string() + ": bad config: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Output directory
// ---------------------------------------------------------------------------

struct ExperimentPaths {
    std::filesystem::path dir;

    std::filesystem::path marker() const { return dir / "experiment.json"; }
    std::filesystem::path explanations() const { return dir / "explanations.jsonl"; }
    std::filesystem::path records(Condition c) const {
        return dir / ("records_" + std::string(condition_name(c)) + ".jsonl");
    }
    std::filesystem::path eval_report(Condition c) const {
        return dir / ("eval_" + std::string(condition_name(c)) + ".json");
    }
    std::filesystem::path compare_base(Condition a, Condition b) const {
        return dir / ("compare_" + std::string(condition_name(a)) + "_vs_" +
                      std::string(condition_name(b)));
    }
    std::filesystem::path bias_json() const { return dir / "bias.json"; }
    std::filesystem::path bias_csv() const { return dir / "bias.csv"; }
    std::filesystem::path similarity_json() const { return dir / "similarity.json"; }
    std::filesystem::path similarity_csv() const { return dir / "similarity.csv"; }
    std::filesystem::path report_json() const { return dir / "report.json"; }
    std::filesystem::path report_csv() const { return dir / "report.csv"; }
};

// Claims <output_dir>/<experiment_id> for this config. A marker file records
// the identity digest; reusing the id with a different identity is an error
// rather than a silent mix of artifacts.
inline ExperimentPaths ensure_experiment_dir(const ExperimentConfig& cfg) {
    ExperimentPaths paths{std::filesystem::path(cfg.output_dir) / cfg.experiment_id};
    json marker{{"kind", "experiment"},
                {"experiment_id", cfg.experiment_id},
                {"identity_digest", cfg.identity_digest()},
                {"identity", cfg.identity_json()}};
    if (std::filesystem::exists(paths.marker())) {
        json existing = json::parse(read_text_file(paths.marker()), nullptr, false);
        if (existing.is_discarded() ||
            existing.value("identity_digest", std::string{}) !=
                cfg.identity_digest())
            throw Error(ErrorKind::config,
                        "experiment id '" + cfg.experiment_id +
                            "' already exists in " + cfg.output_dir +
                            " with a different setup; pick a new id or directory");
    } else {
        atomic_write_file(paths.marker(), marker.dump() + "\n");
    }
    return paths;
}

// ---------------------------------------------------------------------------
// CSV helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

// Shortest-round-trip double formatting, same as the JSON emitter, so CSV
// and JSON never disagree.
inline std::string csv_num(double v) { return json(v).dump(); }

} // namespace detail

// ---------------------------------------------------------------------------
// cmd_explain
// ---------------------------------------------------------------------------

struct ExplainOutcome {
    std::filesystem::path map_path;
    std::size_t exemplar_count = 0;
    std::size_t variant_count = 0;
    std::uint64_t backend_calls = 0;
};

inline ExplainOutcome cmd_explain(const ExperimentConfig& cfg,
                                  std::ostream& log = std::cout) {
    cfg.validate();
    ExperimentPaths paths = ensure_experiment_dir(cfg);
    Dataset ds = load_dataset(cfg.dataset_path, cfg.schema);
    ExemplarSet exemplars =
        sample_exemplars(ds, static_cast<std::size_t>(cfg.k), cfg.seed);

    Backend backend(cfg.backend);
    ExplanationMap map =
        generate_explanations(exemplars, ds, cue_by_id(cfg.cue_id), cfg.n, cfg.mode,
                              cfg.seed, backend, cfg.domain);
    map.provenance.config_digest = cfg.digest();
    save_explanation_map(map, paths.explanations());

    ExplainOutcome out;
    out.map_path = paths.explanations();
    out.exemplar_count = map.entries.size();
    for (const auto& e : map.entries) out.variant_count += e.variants.size();
    out.backend_calls = backend.request_count();
    log << "explain: " << out.exemplar_count << " exemplars, " << out.variant_count
        << " variants (" << generation_mode_name(cfg.mode) << " mode, cue "
        << cfg.cue_id << ") -> " << out.map_path.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// cmd_run
// ---------------------------------------------------------------------------

struct RunOutcome {
    std::filesystem::path records_path;
    double accuracy_value = 0.0;
    std::size_t n_records = 0;
    std::size_t n_correct = 0;
    std::size_t parse_failures = 0;
    std::size_t scored = 0;
    std::uint64_t backend_calls = 0;
};

inline RunOutcome cmd_run(const ExperimentConfig& cfg, Condition condition,
                          std::ostream& log = std::cout) {
    cfg.validate();
    if (condition == Condition::explain_gen)
        throw Error(ErrorKind::config, "explain_gen is not a runnable condition");
    ExperimentPaths paths = ensure_experiment_dir(cfg);
    Dataset ds = load_dataset(cfg.dataset_path, cfg.schema);
    ExemplarSet exemplars =
        sample_exemplars(ds, static_cast<std::size_t>(cfg.k), cfg.seed);

    std::optional<ExplanationMap> map;
    if (condition == Condition::self_exp) {
        if (!std::filesystem::exists(paths.explanations()))
            throw Error(ErrorKind::config,
                        "condition self_exp needs " + paths.explanations().string() +
                            "; run the explain subcommand first");
        map = load_explanation_map(paths.explanations());
    }

    Backend backend(cfg.backend);
    RunHeader header;
    header.experiment_id = cfg.experiment_id;
    header.config_digest = cfg.digest();
    header.exemplar_set_digest = exemplars.digest();
    header.condition = condition_name(condition);
    header.dataset = ds.name;
    header.split = split_name(cfg.split);
    header.model_id = cfg.backend.model_id;
    header.template_version = std::string(kTemplateVersion);

    JsonlWriter writer;
    writer.open(paths.records(condition));
    writer.append(run_header_to_json(header));

    auto records = run_inference(
        ds, cfg.split, exemplars, map ? &*map : nullptr, condition, cfg.seed,
        backend, cfg.score, &writer, [&](std::size_t done, std::size_t total) {
            log << "run " << condition_name(condition) << ": " << done << "/"
                << total << "\n";
        });

    RunOutcome out;
    out.records_path = paths.records(condition);
    out.n_records = records.size();
    for (const auto& r : records) {
        if (r.correct) ++out.n_correct;
        if (r.parsed.status != ParseStatus::ok) ++out.parse_failures;
        if (r.confidence) ++out.scored;
    }
    out.accuracy_value = accuracy(records);
    out.backend_calls = backend.request_count();
    log << "run " << condition_name(condition) << ": accuracy "
        << detail::csv_num(out.accuracy_value) << " (" << out.n_correct << "/"
        << out.n_records << " correct, " << out.parse_failures
        << " parse failures, " << out.backend_calls << " backend calls)\n";
    return out;
}

// ---------------------------------------------------------------------------
// cmd_eval
// ---------------------------------------------------------------------------

inline json calibration_to_json(const RunCalibration& c) {
    json bins = json::array();
    for (const auto& b : c.bins)
        bins.push_back(json{{"lo", b.lo},
                            {"hi", b.hi},
                            {"count", b.count},
                            {"mean_confidence", b.mean_confidence},
                            {"accuracy", b.accuracy}});
    return json{{"n_correct", c.n_correct},
                {"n_incorrect", c.n_incorrect},
                {"mean_logprob_correct", c.mean_logprob_correct},
                {"mean_logprob_incorrect", c.mean_logprob_incorrect},
                {"ece", c.ece},
                {"bins", bins}};
}

struct EvalOutcome {
    std::filesystem::path report_path;
    double accuracy_value = 0.0;
    std::size_t n_records = 0;
    std::optional<RunCalibration> calibration;
};

inline EvalOutcome cmd_eval(const ExperimentConfig& cfg, Condition condition,
                            std::ostream& log = std::cout) {
    cfg.validate();
    ExperimentPaths paths = ensure_experiment_dir(cfg);
    RunFile run = load_run_records(paths.records(condition));
    if (run.records.empty())
        throw Error(ErrorKind::validation,
                    paths.records(condition).string() + " has no records");

    EvalOutcome out;
    out.report_path = paths.eval_report(condition);
    out.n_records = run.records.size();
    out.accuracy_value = accuracy(run.records);
    bool all_scored = true;
    for (const auto& r : run.records)
        if (!r.confidence) all_scored = false;
    if (all_scored) out.calibration = run_calibration(run.records);

    std::size_t n_correct = 0, failures = 0;
    for (const auto& r : run.records) {
        if (r.correct) ++n_correct;
        if (r.parsed.status != ParseStatus::ok) ++failures;
    }
    json report{{"kind", "eval"},
                {"experiment_id", cfg.experiment_id},
                {"config_digest", cfg.digest()},
                {"run_config_digest", run.header.config_digest},
                {"condition", run.header.condition},
                {"dataset", run.header.dataset},
                {"split", run.header.split},
                {"n_records", out.n_records},
                {"n_correct", n_correct},
                {"parse_failures", failures},
                {"accuracy", out.accuracy_value}};
    report["calibration"] =
        out.calibration ? calibration_to_json(*out.calibration) : json(nullptr);
    atomic_write_file(out.report_path, report.dump(2) + "\n");

    log << "eval " << run.header.condition << ": accuracy "
        << detail::csv_num(out.accuracy_value) << " (" << n_correct << "/"
        << out.n_records << ")";
    if (out.calibration)
        log << ", ece " << detail::csv_num(out.calibration->ece);
    log << " -> " << out.report_path.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// cmd_compare
// ---------------------------------------------------------------------------

struct CompareOutcome {
    std::filesystem::path json_path;
    std::filesystem::path csv_path;
    CalibrationReport report;
};

inline CompareOutcome cmd_compare(const ExperimentConfig& cfg, Condition cond_self,
                                  Condition cond_human,
                                  std::ostream& log = std::cout) {
    cfg.validate();
    ExperimentPaths paths = ensure_experiment_dir(cfg);
    RunFile a = load_run_records(paths.records(cond_self));
    RunFile b = load_run_records(paths.records(cond_human));
    if (a.header.dataset != b.header.dataset || a.header.split != b.header.split)
        throw Error(ErrorKind::validation,
                    "cannot compare runs over different data: " + a.header.dataset +
                        "/" + a.header.split + " vs " + b.header.dataset + "/" +
                        b.header.split);
    if (!a.header.exemplar_set_digest.empty() &&
        !b.header.exemplar_set_digest.empty() &&
        a.header.exemplar_set_digest != b.header.exemplar_set_digest)
        throw Error(ErrorKind::validation,
                    "runs used different exemplar sets (digest mismatch); "
                    "comparisons require the shared set");

    CompareOutcome out;
    out.report = agreement_report(a.records, b.records);
    auto base = paths.compare_base(cond_self, cond_human);
    out.json_path = base;
    out.json_path += ".json";
    out.csv_path = base;
    out.csv_path += ".csv";

    json cats = json::array();
    for (std::size_t c = 0; c < 4; ++c) {
        const auto& s = out.report.categories[c];
        cats.push_back(
            json{{"category",
                  agreement_category_name(static_cast<AgreementCategory>(c))},
                 {"count", s.count},
                 {"mean_logprob_self", s.mean_logprob_self},
                 {"mean_logprob_human", s.mean_logprob_human}});
    }
    json doc{{"kind", "compare"},
             {"experiment_id", cfg.experiment_id},
             {"config_digest", cfg.digest()},
             {"condition_self", condition_name(cond_self)},
             {"condition_human", condition_name(cond_human)},
             {"paired", out.report.paired},
             {"categories", cats},
             {"calibration_self", calibration_to_json(out.report.self_run)},
             {"calibration_human", calibration_to_json(out.report.human_run)}};
    atomic_write_file(out.json_path, doc.dump(2) + "\n");

    std::string csv = "category,count,mean_logprob_self,mean_logprob_human\n";
    for (std::size_t c = 0; c < 4; ++c) {
        const auto& s = out.report.categories[c];
        csv += std::string(
                   agreement_category_name(static_cast<AgreementCategory>(c))) +
               "," + std::to_string(s.count) + "," +
               detail::csv_num(s.mean_logprob_self) + "," +
               detail::csv_num(s.mean_logprob_human) + "\n";
    }
    atomic_write_file(out.csv_path, csv);

    log << "compare " << condition_name(cond_self) << " vs "
        << condition_name(cond_human) << ": " << out.report.paired << " pairs";
    for (std::size_t c = 0; c < 4; ++c)
        log << ", " << agreement_category_name(static_cast<AgreementCategory>(c))
            << "=" << out.report.categories[c].count;
    log << " -> " << out.json_path.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// cmd_bias
// ---------------------------------------------------------------------------

struct BiasSetting {
    std::string target_label;
    std::array<double, 4> mean_q{0.0, 0.0, 0.0, 0.0};
    double bias = 0.0;
};

struct BiasOutcome {
    std::filesystem::path json_path;
    std::filesystem::path csv_path;
    std::vector<BiasSetting> settings;
};

// Sweeps the four fixed-correct-option settings: for each target label the
// gold option text is remapped onto that label for every instance of the
// balanced subset, each option is scored as the answer continuation, and the
// deviation of mean confidence from uniform is reported.
inline BiasOutcome cmd_bias(const ExperimentConfig& cfg,
                            std::ostream& log = std::cout) {
    cfg.validate();
    ExperimentPaths paths = ensure_experiment_dir(cfg);
    Dataset ds = load_dataset(cfg.dataset_path, cfg.schema);
    if (ds.option_arity != 4)
        throw Error(ErrorKind::validation,
                    "selection bias needs 4-option data, dataset has arity " +
                        std::to_string(ds.option_arity));
    auto balanced = balanced_subset(ds, cfg.per_label, cfg.seed);
    Backend backend(cfg.backend);

    std::vector<std::string> labels;
    for (const auto& opt : balanced.front().options) labels.push_back(opt.label);

    BiasOutcome out;
    out.json_path = paths.bias_json();
    out.csv_path = paths.bias_csv();
    json settings_json = json::array();
    std::string csv = "target_label,option,mean_confidence,setting_bias\n";
    for (const auto& target : labels) {
        std::vector<OptionConfidences> confs;
        for (const auto& inst : balanced) {
            QAInstance remapped = remap_gold_option(inst, target);
            PromptBundle prompt = build_icl_prompt({}, remapped, Condition::no_cot);
            confs.push_back(option_confidences(remapped, prompt.text, backend));
        }
        BiasSetting setting;
        setting.target_label = target;
        for (const auto& c : confs)
            for (std::size_t i = 0; i < 4; ++i) setting.mean_q[i] += c.q[i];
        for (auto& q : setting.mean_q) q /= static_cast<double>(confs.size());
        setting.bias = selection_bias(confs);

        json mean_q_json;
        for (std::size_t i = 0; i < 4; ++i) mean_q_json[labels[i]] = setting.mean_q[i];
        settings_json.push_back(json{{"target_label", target},
                                     {"mean_confidence", mean_q_json},
                                     {"bias", setting.bias}});
        for (std::size_t i = 0; i < 4; ++i)
            csv += target + "," + labels[i] + "," +
                   detail::csv_num(setting.mean_q[i]) + "," +
                   detail::csv_num(setting.bias) + "\n";
        log << "bias target " << target << ": "
            << detail::csv_num(setting.bias) << "\n";
        out.settings.push_back(std::move(setting));
    }

    json doc{{"kind", "bias"},
             {"experiment_id", cfg.experiment_id},
             {"config_digest", cfg.digest()},
             {"dataset", ds.name},
             {"per_label", cfg.per_label},
             {"instances", balanced.size()},
             {"settings", settings_json}};
    atomic_write_file(out.json_path, doc.dump(2) + "\n");
    atomic_write_file(out.csv_path, csv);
    log << "bias sweep -> " << out.json_path.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// cmd_similarity
// ---------------------------------------------------------------------------

struct SimilarityOutcome {
    std::filesystem::path json_path;
    std::filesystem::path csv_path;
    SimilarityReport report;
    std::optional<double> likelihood_self;
    std::optional<double> likelihood_human;
};

inline SimilarityOutcome cmd_similarity(const ExperimentConfig& cfg,
                                        std::ostream& log = std::cout) {
    cfg.validate();
    if (cfg.lexicon_path.empty())
        throw Error(ErrorKind::config, "similarity needs lexicon_path");
    if (!std::filesystem::exists(cfg.lexicon_path))
        throw Error(ErrorKind::config, "lexicon file not found: " + cfg.lexicon_path);
    ExperimentPaths paths = ensure_experiment_dir(cfg);
    if (!std::filesystem::exists(paths.explanations()))
        throw Error(ErrorKind::config,
                    "similarity needs " + paths.explanations().string() +
                        "; run the explain subcommand first");
    Dataset ds = load_dataset(cfg.dataset_path, cfg.schema);
    ExplanationMap map = load_explanation_map(paths.explanations());
    auto lexicon = load_lexicon(cfg.lexicon_path);

    SimilarityOutcome out;
    out.json_path = paths.similarity_json();
    out.csv_path = paths.similarity_csv();
    out.report = compute_similarity(map, ds, lexicon);

    // Scoring enabled: also measure how likely the gold answer is under each
    // explanation kind (first variant for the generated side).
    if (cfg.score) {
        ExemplarSet exemplars =
            sample_exemplars(ds, static_cast<std::size_t>(cfg.k), cfg.seed);
        validate_explanation_map(map, ds, exemplars);
        Backend backend(cfg.backend);
        std::map<std::string, std::string> self_texts, human_texts;
        for (const auto& id : exemplars.members) {
            self_texts[id] = map.require(id).variants.front();
            const QAInstance& inst = ds.require(id);
            if (inst.human_cot && !inst.human_cot->empty())
                human_texts[id] = *inst.human_cot;
        }
        out.likelihood_self =
            mean_answer_likelihood(exemplars, ds, self_texts, backend);
        if (human_texts.size() == exemplars.members.size())
            out.likelihood_human =
                mean_answer_likelihood(exemplars, ds, human_texts, backend);
    }

    auto agg_json = [](const Aggregate& a) {
        return json{{"mean", a.mean}, {"stddev", a.stddev}};
    };
    json pairs = json::array();
    for (const auto& p : out.report.pairs)
        pairs.push_back(json{{"exemplar_id", p.exemplar_id},
                             {"variant_index", p.variant_index},
                             {"rouge_precision", p.rouge.precision},
                             {"rouge_recall", p.rouge.recall},
                             {"rouge_f", p.rouge.f},
                             {"term_f1", p.term_f1_score},
                             {"len_self", p.len_self},
                             {"len_human", p.len_human}});
    json doc{{"kind", "similarity"},
             {"experiment_id", cfg.experiment_id},
             {"config_digest", cfg.digest()},
             {"dataset", ds.name},
             {"pairs", pairs},
             {"aggregates",
              {{"rouge_precision", agg_json(out.report.aggregates.rouge_precision)},
               {"rouge_recall", agg_json(out.report.aggregates.rouge_recall)},
               {"rouge_f", agg_json(out.report.aggregates.rouge_f)},
               {"term_f1", agg_json(out.report.aggregates.term_f1_score)},
               {"len_self", agg_json(out.report.aggregates.len_self)},
               {"len_human", agg_json(out.report.aggregates.len_human)}}}};
    doc["answer_likelihood_self"] =
        out.likelihood_self ? json(*out.likelihood_self) : json(nullptr);
    doc["answer_likelihood_human"] =
        out.likelihood_human ? json(*out.likelihood_human) : json(nullptr);
    atomic_write_file(out.json_path, doc.dump(2) + "\n");

    std::string csv =
        "exemplar_id,variant_index,rouge_precision,rouge_recall,rouge_f,"
        "term_f1,len_self,len_human\n";
    for (const auto& p : out.report.pairs)
        csv += detail::csv_field(p.exemplar_id) + "," +
               std::to_string(p.variant_index) + "," +
               detail::csv_num(p.rouge.precision) + "," +
               detail::csv_num(p.rouge.recall) + "," +
               detail::csv_num(p.rouge.f) + "," +
               detail::csv_num(p.term_f1_score) + "," +
               std::to_string(p.len_self) + "," + std::to_string(p.len_human) + "\n";
    const auto& agg = out.report.aggregates;
    csv += "aggregate_mean,," + detail::csv_num(agg.rouge_precision.mean) + "," +
           detail::csv_num(agg.rouge_recall.mean) + "," +
           detail::csv_num(agg.rouge_f.mean) + "," +
           detail::csv_num(agg.term_f1_score.mean) + "," +
           detail::csv_num(agg.len_self.mean) + "," +
           detail::csv_num(agg.len_human.mean) + "\n";
    csv += "aggregate_stddev,," + detail::csv_num(agg.rouge_precision.stddev) + "," +
           detail::csv_num(agg.rouge_recall.stddev) + "," +
           detail::csv_num(agg.rouge_f.stddev) + "," +
           detail::csv_num(agg.term_f1_score.stddev) + "," +
           detail::csv_num(agg.len_self.stddev) + "," +
           detail::csv_num(agg.len_human.stddev) + "\n";
    atomic_write_file(out.csv_path, csv);

    log << "similarity: " << out.report.pairs.size() << " pairs, rouge_f mean "
        << detail::csv_num(agg.rouge_f.mean) << ", term_f1 mean "
        << detail::csv_num(agg.term_f1_score.mean) << " -> "
        << out.json_path.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// cmd_report
// ---------------------------------------------------------------------------

struct ReportOutcome {
    std::filesystem::path json_path;
    std::filesystem::path csv_path;
};

// Bundles whatever per-analysis outputs exist for the experiment into one
// JSON document and a flat metric,series,value CSV.
inline ReportOutcome cmd_report(const ExperimentConfig& cfg,
                                std::ostream& log = std::cout) {
    cfg.validate();
    ExperimentPaths paths = ensure_experiment_dir(cfg);

    auto read_json_if_present = [](const std::filesystem::path& p) -> json {
        if (!std::filesystem::exists(p)) return json(nullptr);
        json j = json::parse(read_text_file(p), nullptr, false);
        if (j.is_discarded())
            throw Error(ErrorKind::validation, p.string() + ": malformed JSON");
        return j;
    };

    json evals = json::object();
    for (Condition c : {Condition::no_cot, Condition::zero_shot_cot,
                        Condition::human_cot, Condition::self_exp}) {
        json j = read_json_if_present(paths.eval_report(c));
        if (!j.is_null()) evals[condition_name(c)] = j;
    }
    json compare = read_json_if_present(
        paths.compare_base(Condition::self_exp, Condition::human_cot) += ".json");
    json bias = read_json_if_present(paths.bias_json());
    json similarity = read_json_if_present(paths.similarity_json());
    if (evals.empty() && compare.is_null() && bias.is_null() && similarity.is_null())
        throw Error(ErrorKind::validation,
                    "nothing to report for experiment '" + cfg.experiment_id +
                        "'; run eval/compare/bias/similarity first");

    ReportOutcome out;
    out.json_path = paths.report_json();
    out.csv_path = paths.report_csv();

    json doc{{"kind", "report"},
             {"experiment_id", cfg.experiment_id},
             {"config_digest", cfg.digest()},
             {"evals", evals},
             {"compare", compare},
             {"bias", bias},
             {"similarity", similarity}};
    atomic_write_file(out.json_path, doc.dump(2) + "\n");

    std::string csv = "metric,series,value\n";
    for (const auto& [cond, ev] : evals.items()) {
        csv += "accuracy," + cond + "," + detail::csv_num(ev["accuracy"].get<double>()) + "\n";
        if (!ev["calibration"].is_null())
            csv += "ece," + cond + "," +
                   detail::csv_num(ev["calibration"]["ece"].get<double>()) + "\n";
    }
    if (!compare.is_null())
        for (const auto& cat : compare["categories"])
            csv += "agreement_count," + cat["category"].get<std::string>() + "," +
                   std::to_string(cat["count"].get<std::size_t>()) + "\n";
    if (!bias.is_null())
        for (const auto& s : bias["settings"])
            csv += "selection_bias,target_" + s["target_label"].get<std::string>() +
                   "," + detail::csv_num(s["bias"].get<double>()) + "\n";
    if (!similarity.is_null()) {
        const json& agg = similarity["aggregates"];
        for (const char* key : {"rouge_f", "term_f1", "len_self", "len_human"})
            csv += std::string(key) + "_mean,self_vs_human," +
                   detail::csv_num(agg[key]["mean"].get<double>()) + "\n";
    }
    atomic_write_file(out.csv_path, csv);

    log << "report -> " << out.json_path.string() << " and "
        << out.csv_path.string() << "\n";
    return out;
}

} // namespace selfexplain
