// Command-line harness around the experiment layer. A declarative JSON
// config carries the experiment definition; every flag can also be given
// directly and overrides the config file value.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "selfexplain/selfexplain.hpp"

namespace se = selfexplain;

namespace {

struct CliState {
    std::string config_path;
    // Overrides; applied only when the flag was passed.
    std::string experiment_id, dataset, schema, mode, domain, split, lexicon;
    std::string output_dir;
    int k = 0, n = 0, cue = 0;
    std::uint64_t seed = 0;
    std::size_t per_label = 0;
    bool score = false;
    std::string backend_kind, base_url, model, api_key_env, script, cache_dir;
    double temperature_generate = 0.0, temperature_answer = 0.0;
    int max_tokens = 0, max_parallel = 0;
    int retry_attempts = 0, retry_base_delay_ms = 0;
    double retry_backoff = 0.0;
};

void add_shared_flags(CLI::App& app, CliState& s) {
    app.add_option("--config", s.config_path, "JSON experiment config file");
    app.add_option("--experiment-id", s.experiment_id, "experiment id (namespaces outputs)");
    app.add_option("--dataset", s.dataset, "dataset JSONL file");
    app.add_option("--dataset-schema", s.schema, "auto | mcq | bool");
    app.add_option("--k", s.k, "number of demonstration exemplars");
    app.add_option("--n", s.n, "explanation variants per exemplar");
    app.add_option("--cue", s.cue, "cue id (1-4)");
    app.add_option("--mode", s.mode, "explanation mode: right | wrong");
    app.add_option("--seed", s.seed, "base random seed");
    app.add_option("--domain", s.domain, "cue wording domain: medical | general");
    app.add_option("--split", s.split, "evaluation split: train | dev | test");
    app.add_flag("--score", s.score, "score parsed answers for confidence");
    app.add_option("--per-label", s.per_label, "bias: instances per gold label");
    app.add_option("--lexicon", s.lexicon, "similarity: term lexicon file");
    app.add_option("--output-dir", s.output_dir, "output root directory");
    app.add_option("--backend", s.backend_kind, "backend kind: http | mock");
    app.add_option("--base-url", s.base_url, "http backend base URL");
    app.add_option("--model", s.model, "model id");
    app.add_option("--api-key-env", s.api_key_env, "env var holding the API key");
    app.add_option("--script", s.script, "mock backend script (JSONL)");
    app.add_option("--cache-dir", s.cache_dir, "completion cache directory");
    app.add_option("--temperature-generate", s.temperature_generate,
                   "sampling temperature for explanation generation");
    app.add_option("--temperature-answer", s.temperature_answer,
                   "sampling temperature for answering");
    app.add_option("--max-tokens", s.max_tokens, "completion token budget");
    app.add_option("--max-parallel", s.max_parallel, "max in-flight requests");
    app.add_option("--retry-attempts", s.retry_attempts, "max attempts per request");
    app.add_option("--retry-base-delay-ms", s.retry_base_delay_ms,
                   "first retry delay in milliseconds");
    app.add_option("--retry-backoff", s.retry_backoff, "retry delay multiplier");
}

se::ExperimentConfig build_config(const CLI::App& app, const CliState& s) {
    se::ExperimentConfig cfg;
    if (!s.config_path.empty()) cfg = se::load_experiment_config(s.config_path);
    auto passed = [&](const std::string& flag) { return app.count(flag) > 0; };
    if (passed("--experiment-id")) cfg.experiment_id = s.experiment_id;
    if (passed("--dataset")) cfg.dataset_path = s.dataset;
    if (passed("--dataset-schema")) cfg.schema = se::parse_dataset_schema(s.schema);
    if (passed("--k")) cfg.k = s.k;
    if (passed("--n")) cfg.n = s.n;
    if (passed("--cue")) cfg.cue_id = s.cue;
    if (passed("--mode")) cfg.mode = se::parse_generation_mode(s.mode);
    if (passed("--seed")) cfg.seed = s.seed;
    if (passed("--domain")) cfg.domain = se::parse_domain(s.domain);
    if (passed("--split")) cfg.split = se::parse_split(s.split);
    if (passed("--score")) cfg.score = true;
    if (passed("--per-label")) cfg.per_label = s.per_label;
    if (passed("--lexicon")) cfg.lexicon_path = s.lexicon;
    if (passed("--output-dir")) cfg.output_dir = s.output_dir;
    if (passed("--backend")) cfg.backend.kind = se::parse_backend_kind(s.backend_kind);
    if (passed("--base-url")) cfg.backend.base_url = s.base_url;
    if (passed("--model")) cfg.backend.model_id = s.model;
    if (passed("--api-key-env")) cfg.backend.api_key_env = s.api_key_env;
    if (passed("--script")) cfg.backend.script_path = s.script;
    if (passed("--cache-dir")) cfg.backend.cache_dir = s.cache_dir;
    if (passed("--temperature-generate"))
        cfg.backend.temperature_generate = s.temperature_generate;
    if (passed("--temperature-answer"))
        cfg.backend.temperature_answer = s.temperature_answer;
    if (passed("--max-tokens")) cfg.backend.max_tokens = s.max_tokens;
    if (passed("--max-parallel")) cfg.backend.max_parallel = s.max_parallel;
    if (passed("--retry-attempts")) cfg.backend.retry.max_attempts = s.retry_attempts;
    if (passed("--retry-base-delay-ms"))
        cfg.backend.retry.base_delay_ms = s.retry_base_delay_ms;
    if (passed("--retry-backoff")) cfg.backend.retry.backoff_factor = s.retry_backoff;
    return cfg;
}

std::vector<se::Condition> conditions_for(const se::ExperimentConfig& cfg,
                                          const std::string& flag_value) {
    if (flag_value.empty() || flag_value == "all") {
        std::vector<se::Condition> out;
        for (auto c : cfg.conditions)
            if (c != se::Condition::explain_gen) out.push_back(c);
        if (out.empty())
            throw se::Error(se::ErrorKind::config, "no runnable conditions configured");
        return out;
    }
    return {se::parse_condition(flag_value)};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-explanation prompting harness: generate explanation "
                 "variants, run in-context inference, and evaluate"};
    app.require_subcommand(1);
    CliState state;

    std::string run_condition, eval_condition = "self_exp";
    std::string compare_self = "self_exp", compare_human = "human_cot";

    CLI::App* explain = app.add_subcommand(
        "explain", "Sample exemplars and generate explanation variants");
    CLI::App* run = app.add_subcommand(
        "run", "Run inference over the evaluation split for one or all conditions");
    run->add_option("--condition", run_condition,
                    "no_cot | zero_shot_cot | human_cot | self_exp | all");
    CLI::App* eval = app.add_subcommand(
        "eval", "Accuracy and calibration from a run-record file");
    eval->add_option("--condition", eval_condition, "condition whose records to score");
    CLI::App* compare = app.add_subcommand(
        "compare", "Agreement categories between two scored runs");
    compare->add_option("--self-condition", compare_self, "first run (default self_exp)");
    compare->add_option("--human-condition", compare_human,
                        "second run (default human_cot)");
    CLI::App* bias = app.add_subcommand(
        "bias", "Option-position selection bias over a balanced subset");
    CLI::App* similarity = app.add_subcommand(
        "similarity", "Compare generated explanations against human ones");
    CLI::App* report = app.add_subcommand(
        "report", "Bundle all existing analysis outputs for the experiment");

    for (CLI::App* sub : {explain, run, eval, compare, bias, similarity, report})
        add_shared_flags(*sub, state);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        se::ExperimentConfig cfg = build_config(*sub, state);
        if (sub == explain) {
            se::cmd_explain(cfg);
        } else if (sub == run) {
            for (auto condition : conditions_for(cfg, run_condition))
                se::cmd_run(cfg, condition);
        } else if (sub == eval) {
            se::cmd_eval(cfg, se::parse_condition(eval_condition));
        } else if (sub == compare) {
            se::cmd_compare(cfg, se::parse_condition(compare_self),
                            se::parse_condition(compare_human));
        } else if (sub == bias) {
            se::cmd_bias(cfg);
        } else if (sub == similarity) {
            se::cmd_similarity(cfg);
        } else if (sub == report) {
            se::cmd_report(cfg);
        }
        return 0;
    } catch (const se::Error& e) {
        std::cerr << "error (" << se::error_kind_name(e.kind()) << "): " << e.what()
                  << "\n";
        return se::exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error (internal): " << e.what() << "\n";
        return 1;
    }
}
