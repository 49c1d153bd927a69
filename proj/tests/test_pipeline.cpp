#include <selfexplain/pipeline.hpp>

#include <array>
#include <catch2/catch_amalgamated.hpp>
#include <set>

#include "test_util.hpp"

namespace se = selfexplain;
using Catch::Matchers::ContainsSubstring;
using testutil::TempDir;
using testutil::fixture;
using testutil::try_error;
using testutil::write_file;

namespace {

se::Backend make_backend(const std::filesystem::path& script) {
    se::BackendConfig cfg;
    cfg.kind = se::BackendKind::mock;
    cfg.script_path = script.string();
    cfg.retry.base_delay_ms = 1;
    return se::Backend(cfg);
}

se::ExplanationMap basic_map(const se::Dataset& ds, const se::ExemplarSet& exemplars,
                             int n = 5) {
    se::Backend b = make_backend(fixture("mock_basic.jsonl"));
    return se::generate_explanations(exemplars, ds, se::cue_by_id(1), n,
                                     se::GenerationMode::right, 7, b,
                                     se::Domain::medical);
}

} // namespace

TEST_CASE("explanation generation fills entries and provenance") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    se::Backend backend = make_backend(fixture("mock_basic.jsonl"));

    se::ExplanationMap map = se::generate_explanations(
        exemplars, ds, se::cue_by_id(1), 5, se::GenerationMode::right, 7, backend,
        se::Domain::medical);

    REQUIRE(map.entries.size() == 5);
    REQUIRE(map.provenance.dataset_name == "qa10");
    REQUIRE(map.provenance.exemplar_set_digest == exemplars.digest());
    REQUIRE(map.provenance.seed == 7);
    REQUIRE(map.provenance.n == 5);
    REQUIRE(map.provenance.cue_id == 1);
    REQUIRE(map.provenance.mode == se::GenerationMode::right);
    REQUIRE(map.provenance.model_id == "mock-model");
    REQUIRE(map.provenance.template_version == "v1");
    REQUIRE(backend.request_count() == 5);

    for (std::size_t i = 0; i < map.entries.size(); ++i) {
        const se::ExplanationEntry& e = map.entries[i];
        REQUIRE(e.exemplar_id == exemplars.members[i]);
        REQUIRE(e.variants.size() == 5);
        const se::QAInstance& inst = ds.require(e.exemplar_id);
        REQUIRE(e.answer_label_used == inst.gold_label);
        se::PromptBundle expected = se::build_explanation_prompt(
            inst, inst.gold_label, se::cue_by_id(1), se::Domain::medical, 5);
        REQUIRE(e.generation_prompt == expected.text);
        REQUIRE(e.generation_prompt_hash == expected.content_hash);
        for (const auto& v : e.variants) REQUIRE_FALSE(v.empty());
    }

    se::validate_explanation_map(map, ds, exemplars);
}

TEST_CASE("single variant generation truncates the scripted list") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    se::ExplanationMap map = basic_map(ds, exemplars, 1);
    for (const auto& e : map.entries) REQUIRE(e.variants.size() == 1);
}

TEST_CASE("wrong mode never states the gold answer") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);

    for (std::uint64_t seed : {0ull, 1ull, 17ull}) {
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        se::ExplanationMap map = se::generate_explanations(
            exemplars, ds, se::cue_by_id(1), 5, se::GenerationMode::wrong, seed,
            backend, se::Domain::medical);
        for (const auto& e : map.entries) {
            const se::QAInstance& inst = ds.require(e.exemplar_id);
            REQUIRE(e.answer_label_used != inst.gold_label);
            std::string gold_line =
                "Answer: " + se::detail::rendered_answer(inst, inst.gold_label);
            REQUIRE(e.generation_prompt.find(gold_line) == std::string::npos);
        }
        se::validate_explanation_map(map, ds, exemplars);
    }
}

TEST_CASE("generation errors name the offending exemplar") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet set;
    set.dataset_name = ds.name;
    set.seed = 0;
    set.members = {"e1"};
    se::Backend backend = make_backend(fixture("mock_retry.jsonl"));
    auto err = try_error([&] {
        se::generate_explanations(set, ds, se::cue_by_id(1), 5,
                                  se::GenerationMode::right, 0, backend,
                                  se::Domain::medical);
    });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
    REQUIRE_THAT(err->what(), ContainsSubstring("exemplar 'e1'"));
}

TEST_CASE("explanation maps round trip through disk") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    se::ExplanationMap map = basic_map(ds, exemplars);
    map.provenance.config_digest = "abc123";

    TempDir tmp("pipeline_map");
    se::save_explanation_map(map, tmp.path / "map.jsonl");
    se::ExplanationMap loaded = se::load_explanation_map(tmp.path / "map.jsonl");

    REQUIRE(se::serialize_explanation_map(loaded) == se::serialize_explanation_map(map));
    REQUIRE(loaded.provenance.config_digest == "abc123");
    REQUIRE(loaded.entries.size() == 5);
    se::validate_explanation_map(loaded, ds, exemplars);

    SECTION("a non-header first line is rejected") {
        write_file(tmp.path, "bad.jsonl", "{\"foo\": 1}\n");
        auto err = try_error([&] { se::load_explanation_map(tmp.path / "bad.jsonl"); });
        REQUIRE(err);
        REQUIRE_THAT(err->what(), ContainsSubstring("header"));
    }

    SECTION("entries with no variants are rejected with their line") {
        std::string text = se::explanation_map_header(map.provenance).dump() + "\n" +
                           R"({"exemplar_id": "e1", "variants": [], "cue_id": 1, "answer_label_used": "C", "mode": "right"})" +
                           "\n";
        write_file(tmp.path, "empty_variants.jsonl", text);
        auto err = try_error(
            [&] { se::load_explanation_map(tmp.path / "empty_variants.jsonl"); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::validation);
        REQUIRE_THAT(err->what(), ContainsSubstring(":2"));
    }
}

TEST_CASE("map validation ties the map to its exemplar set") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    se::ExplanationMap map = basic_map(ds, exemplars);

    SECTION("digest mismatch is a config error") {
        se::ExemplarSet other = se::sample_exemplars(ds, 4, 7);
        auto err = try_error([&] { se::validate_explanation_map(map, ds, other); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::config);
        REQUIRE_THAT(err->what(), ContainsSubstring("different exemplar set"));
    }

    SECTION("missing exemplar entries are caught") {
        se::ExplanationMap partial = map;
        partial.entries.pop_back();
        // keep the digest consistent so the structural check is what fires
        auto err = try_error(
            [&] { se::validate_explanation_map(partial, ds, exemplars); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::validation);
        REQUIRE_THAT(err->what(), ContainsSubstring("no entry for exemplar"));
    }

    SECTION("wrong-mode entries must avoid the gold label") {
        se::ExplanationMap tampered = map;
        tampered.entries[0].mode = se::GenerationMode::wrong;
        auto err = try_error(
            [&] { se::validate_explanation_map(tampered, ds, exemplars); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::validation);
        REQUIRE_THAT(err->what(), ContainsSubstring("gold label"));
    }
}

TEST_CASE("variant selection is deterministic per test case") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    se::ExplanationMap map = basic_map(ds, exemplars);
    const std::string ex = exemplars.members.front();

    auto [idx1, text1] = se::select_variant(map, ex, "t01", 7);
    auto [idx2, text2] = se::select_variant(map, ex, "t01", 7);
    REQUIRE(idx1 == idx2);
    REQUIRE(text1 == text2);
    REQUIRE(text1 == map.require(ex).variants[idx1]);

    auto err = try_error([&] { se::select_variant(map, "not-there", "t01", 7); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::validation);

    SECTION("draws are roughly uniform across variants") {
        std::array<std::size_t, 5> histogram{};
        for (int i = 0; i < 1000; ++i) {
            auto [idx, text] = se::select_variant(map, ex, "case" + std::to_string(i), 7);
            REQUIRE(idx < 5);
            histogram[idx] += 1;
        }
        for (std::size_t count : histogram) {
            REQUIRE(count >= 150);
            REQUIRE(count <= 250);
        }
    }

    SECTION("a single-variant map always selects index 0") {
        se::ExplanationMap one = basic_map(ds, exemplars, 1);
        for (int i = 0; i < 20; ++i) {
            auto [idx, text] = se::select_variant(one, ex, "case" + std::to_string(i), 7);
            REQUIRE(idx == 0);
        }
    }
}

TEST_CASE("inference runs the scripted split under every condition") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    se::ExplanationMap map = basic_map(ds, exemplars);

    auto expect_scripted_outcomes = [&](const std::vector<se::RunRecord>& records) {
        REQUIRE(records.size() == 10);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            REQUIRE(records[i].instance_id ==
                    "t" + std::string(i + 1 < 10 ? "0" : "") + std::to_string(i + 1));
            REQUIRE(records[i].parsed.status == se::ParseStatus::ok);
            if (records[i].correct) ++correct;
        }
        REQUIRE(correct == 7);
        for (const std::string& miss : {"t03", "t07", "t10"}) {
            auto it = std::find_if(records.begin(), records.end(),
                                   [&](const se::RunRecord& r) {
                                       return r.instance_id == miss;
                                   });
            REQUIRE_FALSE(it->correct);
        }
    };

    SECTION("no_cot") {
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto records = se::run_inference(ds, se::Split::test, exemplars, nullptr,
                                         se::Condition::no_cot, 7, backend, false);
        expect_scripted_outcomes(records);
        REQUIRE(backend.request_count() == 10);
        for (const auto& r : records) {
            REQUIRE_FALSE(r.reasoning_text.has_value());
            REQUIRE(r.variant_choice.empty());
            REQUIRE_FALSE(r.confidence.has_value());
        }
    }

    SECTION("zero_shot_cot issues one extra extraction call per instance") {
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto records = se::run_inference(ds, se::Split::test, exemplars, nullptr,
                                         se::Condition::zero_shot_cot, 7, backend,
                                         false);
        expect_scripted_outcomes(records);
        REQUIRE(backend.request_count() == 20);
        for (const auto& r : records) REQUIRE(r.reasoning_text.has_value());
    }

    SECTION("human_cot") {
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto records = se::run_inference(ds, se::Split::test, exemplars, nullptr,
                                         se::Condition::human_cot, 7, backend, false);
        expect_scripted_outcomes(records);
    }

    SECTION("self_exp records which variant each test case saw") {
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto records = se::run_inference(ds, se::Split::test, exemplars, &map,
                                         se::Condition::self_exp, 7, backend, false);
        expect_scripted_outcomes(records);
        for (const auto& r : records) {
            REQUIRE(r.variant_choice.size() == 5);
            for (const auto& [ex_id, idx] : r.variant_choice) {
                auto [expected_idx, text] =
                    se::select_variant(map, ex_id, r.instance_id, 7);
                REQUIRE(idx == expected_idx);
            }
        }
    }
}

TEST_CASE("inference preconditions fail before any backend call") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);

    SECTION("explain_gen is rejected") {
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto err = try_error([&] {
            se::run_inference(ds, se::Split::test, exemplars, nullptr,
                              se::Condition::explain_gen, 7, backend, false);
        });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::config);
        REQUIRE(backend.request_count() == 0);
    }

    SECTION("self_exp needs a map") {
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto err = try_error([&] {
            se::run_inference(ds, se::Split::test, exemplars, nullptr,
                              se::Condition::self_exp, 7, backend, false);
        });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::config);
        REQUIRE_THAT(err->what(), ContainsSubstring("explanation map"));
        REQUIRE(backend.request_count() == 0);
    }

    SECTION("human_cot needs a human explanation on every exemplar") {
        se::Dataset stripped = ds;
        for (auto& inst : stripped.instances) inst.human_cot.reset();
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto err = try_error([&] {
            se::run_inference(stripped, se::Split::test, exemplars, nullptr,
                              se::Condition::human_cot, 7, backend, false);
        });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::config);
        REQUIRE(backend.request_count() == 0);
    }

    SECTION("an empty evaluation split is rejected") {
        se::Dataset train_only = ds;
        train_only.instances.erase(
            std::remove_if(train_only.instances.begin(), train_only.instances.end(),
                           [](const se::QAInstance& i) {
                               return i.split == se::Split::test;
                           }),
            train_only.instances.end());
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        auto err = try_error([&] {
            se::run_inference(train_only, se::Split::test, exemplars, nullptr,
                              se::Condition::no_cot, 7, backend, false);
        });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::validation);
        REQUIRE_THAT(err->what(), ContainsSubstring("no instances"));
        REQUIRE(backend.request_count() == 0);
    }
}

TEST_CASE("scoring attaches confidences when the backend can score") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    TempDir tmp("pipeline_scored");
    auto script = testutil::make_scored_script(tmp.path);

    se::Backend backend = make_backend(script);
    auto records = se::run_inference(ds, se::Split::test, exemplars, nullptr,
                                     se::Condition::no_cot, 7, backend, true);
    REQUIRE(records.size() == 10);
    for (const auto& r : records) REQUIRE(r.confidence.has_value());

    auto t01 = std::find_if(records.begin(), records.end(), [](const se::RunRecord& r) {
        return r.instance_id == "t01";
    });
    REQUIRE(t01->confidence->sum_logprob == -0.05129329438755058);
    REQUIRE(t01->confidence->mean_logprob == -0.05129329438755058);
}

TEST_CASE("scoring degrades gracefully when the backend cannot score") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    // mock_basic entries match the scored text but carry no token logprobs,
    // so the first score attempt raises a capability error.
    se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
    auto records = se::run_inference(ds, se::Split::test, exemplars, nullptr,
                                     se::Condition::no_cot, 7, backend, true);
    REQUIRE(records.size() == 10);
    for (const auto& r : records) REQUIRE_FALSE(r.confidence.has_value());
}

TEST_CASE("run files persist a header and replay identically") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    TempDir tmp("pipeline_runfile");

    se::RunHeader header;
    header.experiment_id = "exp1";
    header.config_digest = "cfg";
    header.exemplar_set_digest = exemplars.digest();
    header.condition = "no_cot";
    header.dataset = ds.name;
    header.split = "test";
    header.model_id = "mock-model";
    header.template_version = "v1";

    auto write_run = [&](const std::filesystem::path& path) {
        se::JsonlWriter writer;
        writer.open(path);
        writer.append(se::run_header_to_json(header));
        se::Backend backend = make_backend(fixture("mock_basic.jsonl"));
        std::vector<std::pair<std::size_t, std::size_t>> progress;
        se::run_inference(ds, se::Split::test, exemplars, nullptr,
                          se::Condition::no_cot, 7, backend, false, &writer,
                          [&](std::size_t done, std::size_t total) {
                              progress.push_back({done, total});
                          });
        return progress;
    };

    auto progress = write_run(tmp.path / "run_a.jsonl");
    REQUIRE_FALSE(progress.empty());
    REQUIRE(progress.back().first == 10);
    REQUIRE(progress.back().second == 10);

    se::RunFile loaded = se::load_run_records(tmp.path / "run_a.jsonl");
    REQUIRE(loaded.header.experiment_id == "exp1");
    REQUIRE(loaded.header.exemplar_set_digest == exemplars.digest());
    REQUIRE(loaded.records.size() == 10);
    REQUIRE(loaded.records.front().instance_id == "t01");

    write_run(tmp.path / "run_b.jsonl");
    REQUIRE(testutil::slurp(tmp.path / "run_a.jsonl") ==
            testutil::slurp(tmp.path / "run_b.jsonl"));

    SECTION("record json round trips") {
        for (const auto& r : loaded.records) {
            se::RunRecord copy =
                se::run_record_from_json(se::run_record_to_json(r), "copy");
            REQUIRE(se::run_record_to_json(copy) == se::run_record_to_json(r));
        }
    }

    SECTION("a missing header line is rejected") {
        write_file(tmp.path, "headerless.jsonl",
                   se::run_record_to_json(loaded.records[0]).dump() + "\n");
        auto err = try_error(
            [&] { se::load_run_records(tmp.path / "headerless.jsonl"); });
        REQUIRE(err);
        REQUIRE_THAT(err->what(), ContainsSubstring("header"));
    }
}

TEST_CASE("failures inside a run name the failing instance") {
    se::Dataset ds = se::load_dataset(fixture("qa10.jsonl"));
    se::ExemplarSet exemplars = se::sample_exemplars(ds, 5, 7);
    TempDir tmp("pipeline_fail");

    // Cover only some of the split so one instance has no scripted response.
    std::string partial;
    for (const auto& line :
         {std::string(R"({"match": {"prompt_substring": "hemoglobin for it to bind"}, "response": "The answer is (A)."})"),
          std::string(R"({"match": {"prompt_substring": "regulates the amount of light"}, "response": "The answer is (A)."})")})
        partial += line + "\n";
    auto script = write_file(tmp.path, "partial.jsonl", partial);

    se::Backend backend = make_backend(script);
    auto err = try_error([&] {
        se::run_inference(ds, se::Split::test, exemplars, nullptr,
                          se::Condition::no_cot, 7, backend, false);
    });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
    REQUIRE_THAT(err->what(), ContainsSubstring("instance 't03'"));
}
