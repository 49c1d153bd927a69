#pragma once

// Quantitative evaluation: accuracy, option-confidence aggregation and
// selection bias, the explanation similarity suite (LCS-based ROUGE-L,
// lexicon term F1, length statistics), agreement categories and calibration.
//
// Tokenization here is fixed and deliberately dumb: lowercase, punctuation
// mapped to whitespace, split on runs of whitespace. Every text metric in
// this module uses it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "selfexplain/backend.hpp"
#include "selfexplain/corpus.hpp"
#include "selfexplain/error.hpp"
#include "selfexplain/pipeline.hpp"

namespace selfexplain {

// ---------------------------------------------------------------------------
// Accuracy
// ---------------------------------------------------------------------------

// Fraction of records answered correctly; parse failures count against.
inline double accuracy(const std::vector<RunRecord>& records) {
    if (records.empty())
        throw Error(ErrorKind::validation, "accuracy needs at least one record");
    std::size_t correct = 0;
    for (const auto& r : records)
        if (r.correct) ++correct;
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            current += static_cast<char>(std::tolower(c));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

inline RougeScore rouge_l(const std::vector<std::string>& candidate,
                          const std::vector<std::string>& reference) {
    RougeScore out;
    if (candidate.empty() || reference.empty()) return out;
    const std::size_t m = candidate.size(), n = reference.size();
    std::vector<std::size_t> prev(n + 1, 0), cur(n + 1, 0);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= n; ++j) {
            if (candidate[i - 1] == reference[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    double lcs = static_cast<double>(prev[n]);
    out.precision = lcs / static_cast<double>(m);
    out.recall = lcs / static_cast<double>(n);
    if (out.precision + out.recall > 0.0)
        out.f = 2.0 * out.precision * out.recall / (out.precision + out.recall);
    return out;
}

// ---------------------------------------------------------------------------
// Term extraction and F1
// ---------------------------------------------------------------------------

// One lowercase term per line; blank lines ignored.
inline std::vector<std::string> load_lexicon(const std::filesystem::path& path) {
    std::string content = read_text_file(path);
    std::vector<std::string> terms;
    std::string line;
    for (std::size_t i = 0; i <= content.size(); ++i) {
        if (i == content.size() || content[i] == '\n') {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
                line.pop_back();
            std::size_t b = 0;
            while (b < line.size() && line[b] == ' ') ++b;
            if (b < line.size())
                terms.push_back(detail::lower_copy(line.substr(b)));
            line.clear();
        } else {
            line += content[i];
        }
    }
    if (terms.empty())
        throw Error(ErrorKind::validation, path.string() + ": lexicon has no terms");
    return terms;
}

// Case-insensitive, word-bounded, longest-match-first scan; a term matched
// inside an already accepted longer match is suppressed.
inline std::set<std::string> extract_terms(std::string_view text,
                                           const std::vector<std::string>& lexicon) {
    std::vector<std::string> terms;
    terms.reserve(lexicon.size());
    for (const auto& t : lexicon) {
        if (t.empty())
            throw Error(ErrorKind::validation, "lexicon contains an empty term");
        terms.push_back(detail::lower_copy(t));
    }
    std::stable_sort(terms.begin(), terms.end(),
                     [](const std::string& a, const std::string& b) {
                         return a.size() > b.size();
                     });

    std::string low = detail::lower_copy(text);
    auto word_char = [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) != 0;
    };
    std::set<std::string> found;
    std::size_t i = 0;
    while (i < low.size()) {
        if (i > 0 && word_char(low[i - 1]) && word_char(low[i])) {
            ++i;
            continue;
        }
        bool advanced = false;
        for (const auto& term : terms) {
            if (low.compare(i, term.size(), term) != 0) continue;
            std::size_t end = i + term.size();
            if (end < low.size() && word_char(low[end]) && word_char(term.back()))
                continue;
            found.insert(term);
            i = end;
            advanced = true;
            break;
        }
        if (!advanced) ++i;
    }
    return found;
}

// F1 over set overlap. Two empty sets are in perfect agreement (1.0);
// exactly one empty means total disagreement (0.0).
inline double term_f1(const std::set<std::string>& terms_a,
                      const std::set<std::string>& terms_b) {
    if (terms_a.empty() && terms_b.empty()) return 1.0;
    if (terms_a.empty() || terms_b.empty()) return 0.0;
    std::size_t inter = 0;
    for (const auto& t : terms_a)
        if (terms_b.count(t)) ++inter;
    double p = static_cast<double>(inter) / static_cast<double>(terms_a.size());
    double r = static_cast<double>(inter) / static_cast<double>(terms_b.size());
    if (p + r == 0.0) return 0.0;
    return 2.0 * p * r / (p + r);
}

// ---------------------------------------------------------------------------
// Length statistics
// ---------------------------------------------------------------------------

struct LengthStats {
    double mean = 0.0;
    double stddev = 0.0; // population
    std::map<int, std::size_t> histogram; // bin lower edge (width 10) -> count
};

inline LengthStats length_stats(const std::vector<std::string>& texts) {
    if (texts.empty())
        throw Error(ErrorKind::validation, "length_stats needs at least one text");
    LengthStats out;
    std::vector<double> counts;
    counts.reserve(texts.size());
    for (const auto& t : texts) {
        auto n = static_cast<double>(tokenize(t).size());
        counts.push_back(n);
        out.histogram[static_cast<int>(n / 10.0) * 10] += 1;
    }
    double sum = 0.0;
    for (double c : counts) sum += c;
    out.mean = sum / static_cast<double>(counts.size());
    double var = 0.0;
    for (double c : counts) var += (c - out.mean) * (c - out.mean);
    out.stddev = std::sqrt(var / static_cast<double>(counts.size()));
    return out;
}

// ---------------------------------------------------------------------------
// Option confidences and selection bias
// ---------------------------------------------------------------------------

struct OptionConfidences {
    std::string instance_id;
    std::vector<std::string> labels;
    std::vector<double> q;   // normalized, sums to 1
    std::vector<double> raw; // exp(sum_logprob) before normalization
};

// Scores each option label as a continuation of the prompt's answer slot and
// normalizes the resulting probabilities.
inline OptionConfidences option_confidences(const QAInstance& instance,
                                            const std::string& prompt_prefix,
                                            Backend& backend) {
    OptionConfidences out;
    out.instance_id = instance.id;
    double total = 0.0;
    for (const auto& opt : instance.options) {
        ScoreResult s = backend.score_continuation(prompt_prefix, " " + opt.label);
        double p = std::exp(s.sum_logprob);
        out.labels.push_back(opt.label);
        out.raw.push_back(p);
        total += p;
    }
    for (double p : out.raw)
        out.q.push_back(total > 0.0 ? p / total
                                    : 1.0 / static_cast<double>(out.raw.size()));
    return out;
}

// (1/4) * sum_i |q_i - 0.25| for a 4-option mean-confidence vector.
inline double selection_bias_from_means(const std::array<double, 4>& mean_q) {
    double acc = 0.0;
    for (double q : mean_q) acc += std::abs(q - 0.25);
    return acc / 4.0;
}

// Averages confidence per option position over the (balanced) instance list
// first, then applies the deviation formula. Range [0, 0.375].
inline double selection_bias(const std::vector<OptionConfidences>& confidences) {
    if (confidences.empty())
        throw Error(ErrorKind::validation, "selection_bias needs at least one instance");
    std::array<double, 4> mean_q{0.0, 0.0, 0.0, 0.0};
    for (const auto& c : confidences) {
        if (c.q.size() != 4)
            throw Error(ErrorKind::validation,
                        "selection_bias is defined for 4 options, instance '" +
                            c.instance_id + "' has " + std::to_string(c.q.size()));
        for (std::size_t i = 0; i < 4; ++i) mean_q[i] += c.q[i];
    }
    for (auto& q : mean_q) q /= static_cast<double>(confidences.size());
    return selection_bias_from_means(mean_q);
}

// ---------------------------------------------------------------------------
// Similarity suite
// ---------------------------------------------------------------------------

struct SimilarityPair {
    std::string exemplar_id;
    std::size_t variant_index = 0;
    RougeScore rouge;
    double term_f1_score = 0.0;
    std::size_t len_self = 0;
    std::size_t len_human = 0;
};

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0; // population
};

struct SimilarityAggregates {
    Aggregate rouge_precision, rouge_recall, rouge_f;
    Aggregate term_f1_score;
    Aggregate len_self, len_human;
};

struct SimilarityReport {
    std::vector<SimilarityPair> pairs;
    SimilarityAggregates aggregates;
};

namespace detail {

inline Aggregate aggregate_of(const std::vector<double>& xs) {
    Aggregate a;
    if (xs.empty()) return a;
    for (double x : xs) a.mean += x;
    a.mean /= static_cast<double>(xs.size());
    for (double x : xs) a.stddev += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(a.stddev / static_cast<double>(xs.size()));
    return a;
}

} // namespace detail

// Pairs every self-explanation variant with its exemplar's human CoT and
// scores ROUGE-L, lexicon term F1 and token lengths per pair.
inline SimilarityReport compute_similarity(const ExplanationMap& map,
                                           const Dataset& ds,
                                           const std::vector<std::string>& lexicon) {
    if (map.entries.empty())
        throw Error(ErrorKind::validation, "explanation map has no entries");
    SimilarityReport report;
    std::vector<double> ps, rs, fs, t1s, ls, lh;
    for (const auto& entry : map.entries) {
        const QAInstance& inst = ds.require(entry.exemplar_id);
        if (!inst.human_cot || inst.human_cot->empty())
            throw Error(ErrorKind::validation,
                        "exemplar '" + entry.exemplar_id +
                            "' has no human explanation to compare against");
        auto human_tokens = tokenize(*inst.human_cot);
        auto human_terms = extract_terms(*inst.human_cot, lexicon);
        for (std::size_t v = 0; v < entry.variants.size(); ++v) {
            const std::string& text = entry.variants[v];
            SimilarityPair pair;
            pair.exemplar_id = entry.exemplar_id;
            pair.variant_index = v;
            auto self_tokens = tokenize(text);
            pair.rouge = rouge_l(self_tokens, human_tokens);
            pair.term_f1_score = term_f1(extract_terms(text, lexicon), human_terms);
            pair.len_self = self_tokens.size();
            pair.len_human = human_tokens.size();
            ps.push_back(pair.rouge.precision);
            rs.push_back(pair.rouge.recall);
            fs.push_back(pair.rouge.f);
            t1s.push_back(pair.term_f1_score);
            ls.push_back(static_cast<double>(pair.len_self));
            lh.push_back(static_cast<double>(pair.len_human));
            report.pairs.push_back(std::move(pair));
        }
    }
    report.aggregates.rouge_precision = detail::aggregate_of(ps);
    report.aggregates.rouge_recall = detail::aggregate_of(rs);
    report.aggregates.rouge_f = detail::aggregate_of(fs);
    report.aggregates.term_f1_score = detail::aggregate_of(t1s);
    report.aggregates.len_self = detail::aggregate_of(ls);
    report.aggregates.len_human = detail::aggregate_of(lh);
    return report;
}

// ---------------------------------------------------------------------------
// Agreement categories and calibration
// ---------------------------------------------------------------------------

// Outcome cells comparing a self-explanation run (S) against a human-CoT run
// (H); T/F is whether that run answered the instance correctly.
enum class AgreementCategory { st_ht = 0, st_hf = 1, sf_ht = 2, sf_hf = 3 };

inline const char* agreement_category_name(AgreementCategory c) {
    switch (c) {
        case AgreementCategory::st_ht: return "S_T&H_T";
        case AgreementCategory::st_hf: return "S_T&H_F";
        case AgreementCategory::sf_ht: return "S_F&H_T";
        case AgreementCategory::sf_hf: return "S_F&H_F";
    }
    return "?";
}

struct CategoryStats {
    std::size_t count = 0;
    double mean_logprob_self = 0.0;
    double mean_logprob_human = 0.0;
};

struct CalibrationBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
};

struct RunCalibration {
    std::size_t n_correct = 0;
    std::size_t n_incorrect = 0;
    double mean_logprob_correct = 0.0;
    double mean_logprob_incorrect = 0.0;
    double ece = 0.0;
    std::vector<CalibrationBin> bins; // 10 equal-width bins over exp(mean_logprob)
};

struct CalibrationReport {
    std::size_t paired = 0;
    std::array<CategoryStats, 4> categories;
    RunCalibration self_run;
    RunCalibration human_run;
};

namespace detail {

inline RunCalibration calibrate_run(const std::vector<const RunRecord*>& records) {
    RunCalibration out;
    double sum_c = 0.0, sum_i = 0.0;
    for (const auto* r : records) {
        if (r->correct) {
            ++out.n_correct;
            sum_c += r->confidence->mean_logprob;
        } else {
            ++out.n_incorrect;
            sum_i += r->confidence->mean_logprob;
        }
    }
    if (out.n_correct) out.mean_logprob_correct = sum_c / static_cast<double>(out.n_correct);
    if (out.n_incorrect)
        out.mean_logprob_incorrect = sum_i / static_cast<double>(out.n_incorrect);

    constexpr int kBins = 10;
    std::array<double, kBins> conf_sum{};
    std::array<std::size_t, kBins> hits{}, counts{};
    for (const auto* r : records) {
        double conf = std::exp(r->confidence->mean_logprob);
        int b = std::min(kBins - 1, static_cast<int>(conf * kBins));
        conf_sum[b] += conf;
        counts[b] += 1;
        if (r->correct) hits[b] += 1;
    }
    double total = static_cast<double>(records.size());
    for (int b = 0; b < kBins; ++b) {
        CalibrationBin bin;
        bin.lo = b / static_cast<double>(kBins);
        bin.hi = (b + 1) / static_cast<double>(kBins);
        bin.count = counts[b];
        if (counts[b]) {
            bin.mean_confidence = conf_sum[b] / static_cast<double>(counts[b]);
            bin.accuracy = static_cast<double>(hits[b]) / static_cast<double>(counts[b]);
            out.ece += (static_cast<double>(counts[b]) / total) *
                       std::abs(bin.accuracy - bin.mean_confidence);
        }
        out.bins.push_back(bin);
    }
    return out;
}

} // namespace detail

// Calibration summary of a single scored run: per-correctness mean logprob
// and ECE over 10 equal-width confidence bins.
inline RunCalibration run_calibration(const std::vector<RunRecord>& records) {
    if (records.empty())
        throw Error(ErrorKind::validation, "run_calibration needs at least one record");
    std::vector<const RunRecord*> ptrs;
    for (const auto& r : records) {
        if (!r.confidence)
            throw Error(ErrorKind::validation,
                        "record '" + r.instance_id +
                            "' lacks confidence; rerun with scoring enabled");
        ptrs.push_back(&r);
    }
    return detail::calibrate_run(ptrs);
}

// Pairs the two runs by instance id, buckets each pair into its agreement
// category, and reports per-category and per-correctness mean logprobs plus
// ECE for each run. Both runs must have been scored.
inline CalibrationReport agreement_report(const std::vector<RunRecord>& records_self,
                                          const std::vector<RunRecord>& records_human) {
    auto index_by_id = [](const std::vector<RunRecord>& records,
                          const char* which) {
        std::map<std::string, const RunRecord*> out;
        for (const auto& r : records) {
            if (!out.emplace(r.instance_id, &r).second)
                throw Error(ErrorKind::validation,
                            std::string(which) + " run has duplicate instance id '" +
                                r.instance_id + "'");
        }
        return out;
    };
    auto self_by_id = index_by_id(records_self, "self");
    auto human_by_id = index_by_id(records_human, "human");

    std::vector<std::string> only_self, only_human;
    for (const auto& [id, _] : self_by_id)
        if (!human_by_id.count(id)) only_self.push_back(id);
    for (const auto& [id, _] : human_by_id)
        if (!self_by_id.count(id)) only_human.push_back(id);
    if (!only_self.empty() || !only_human.empty()) {
        auto join = [](const std::vector<std::string>& ids) {
            std::string s;
            for (const auto& id : ids) {
                if (!s.empty()) s += ", ";
                s += id;
            }
            return s.empty() ? std::string("none") : s;
        };
        throw Error(ErrorKind::validation,
                    "runs cover different instances; only in self run: [" +
                        join(only_self) + "]; only in human run: [" +
                        join(only_human) + "]");
    }

    CalibrationReport report;
    std::array<double, 4> sum_self{}, sum_human{};
    std::vector<const RunRecord*> selfs, humans;
    for (const auto& [id, s] : self_by_id) {
        const RunRecord* h = human_by_id.at(id);
        if (!s->confidence || !h->confidence)
            throw Error(ErrorKind::validation,
                        "instance '" + id +
                            "' lacks confidence; rerun with scoring enabled");
        auto cat = s->correct ? (h->correct ? AgreementCategory::st_ht
                                            : AgreementCategory::st_hf)
                              : (h->correct ? AgreementCategory::sf_ht
                                            : AgreementCategory::sf_hf);
        auto& stats = report.categories[static_cast<std::size_t>(cat)];
        stats.count += 1;
        sum_self[static_cast<std::size_t>(cat)] += s->confidence->mean_logprob;
        sum_human[static_cast<std::size_t>(cat)] += h->confidence->mean_logprob;
        selfs.push_back(s);
        humans.push_back(h);
        ++report.paired;
    }
    for (std::size_t c = 0; c < 4; ++c) {
        if (report.categories[c].count == 0) continue;
        report.categories[c].mean_logprob_self =
            sum_self[c] / static_cast<double>(report.categories[c].count);
        report.categories[c].mean_logprob_human =
            sum_human[c] / static_cast<double>(report.categories[c].count);
    }
    report.self_run = detail::calibrate_run(selfs);
    report.human_run = detail::calibrate_run(humans);
    return report;
}

// ---------------------------------------------------------------------------
// Answer likelihood
// ---------------------------------------------------------------------------

// Mean over exemplars of P(gold answer | question + explanation). The prompt
// mirrors a single demonstration block so the measurement matches what the
// inference prompt would condition on.
inline double mean_answer_likelihood(
    const ExemplarSet& exemplars, const Dataset& ds,
    const std::map<std::string, std::string>& explanations, Backend& backend) {
    if (exemplars.members.empty())
        throw Error(ErrorKind::validation, "exemplar set is empty");
    double total = 0.0;
    for (const auto& id : exemplars.members) {
        const QAInstance& inst = ds.require(id);
        auto it = explanations.find(id);
        if (it == explanations.end() || it->second.empty())
            throw Error(ErrorKind::validation,
                        "no explanation text supplied for exemplar '" + id + "'");
        std::string prompt;
        detail::append_instance_block(prompt, inst);
        prompt += "Explanation: ";
        prompt += it->second;
        prompt += "\nAnswer:";
        ScoreResult s = backend.score_continuation(
            prompt, answer_continuation(inst, inst.gold_label));
        total += std::exp(s.sum_logprob);
    }
    return total / static_cast<double>(exemplars.members.size());
}

} // namespace selfexplain
