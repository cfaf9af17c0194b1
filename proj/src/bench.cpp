#include "xroute/bench.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "text_util.hpp"
#include "xroute/error.hpp"
#include "xroute/knn.hpp"
#include "xroute/parallel.hpp"
#include "xroute/rng.hpp"

namespace xroute {

double oracle_downstream_accuracy(const TaskInstance& task, const LinearExtractor& e, const TrainConfig& trainer) {
    MatrixD train = extract(e, task.train_inputs);
    MatrixD test = extract(e, task.test_inputs);
    double sq = 0.0;
    for (double v : train.values()) sq += v * v;
    const double rms = std::sqrt(sq / static_cast<double>(train.values().size()));
    if (rms > 0.0) {
        for (double& v : train.values()) v /= rms;
        for (double& v : test.values()) v /= rms;
    }
    TrainConfig cfg = trainer;
    cfg.num_classes = task.train.num_classes;
    const LogisticModel m = train_logistic(train, task.train.class_labels, cfg);
    return accuracy(predict(m, test), task.test.class_labels);
}

std::string to_string(BenchSelector s) {
    switch (s) {
        case BenchSelector::oracle: return "oracle";
        case BenchSelector::knn: return "knn";
        case BenchSelector::epn: return "epn";
        case BenchSelector::kl: return "kl";
        case BenchSelector::random: return "random";
    }
    return "unknown";
}

namespace {

TaskRecord evaluate_task(const SyntheticWorld& w, std::size_t t, const std::vector<BenchSelector>& selectors) {
    const TaskInstance& task = w.tasks[t];
    TaskRecord rec;
    rec.task = t;
    rec.true_expert = task.true_expert;
    rec.image_domain = task.image_domain;
    for (const auto& e : w.experts) rec.expert_acc.push_back(oracle_downstream_accuracy(task, e, w.config.oracle_trainer));
    const auto best = std::max_element(rec.expert_acc.begin(), rec.expert_acc.end());
    rec.oracle_best = static_cast<ExpertId>(best - rec.expert_acc.begin());
    rec.oracle_acc = *best;

    for (BenchSelector s : selectors) {
        ExpertId chosen = 0;
        switch (s) {
            case BenchSelector::oracle: chosen = rec.oracle_best; break;
            case BenchSelector::knn: {
                std::vector<EmbeddingMatrix> embeddings;
                for (const auto& e : w.experts) embeddings.push_back(embed_task(task, e));
                chosen = knn_select(task.train, embeddings).chosen;
                break;
            }
            case BenchSelector::epn: chosen = epn_select(epn_probs(w, task)).chosen; break;
            case BenchSelector::kl:
                chosen = kl_select(w.slice_priors, estimate_task_distribution(task.baseline_probs)).chosen;
                break;
            case BenchSelector::random:
                chosen = random_select(w.experts.size(), task_seed(w.config.seed, t)).chosen;
                break;
        }
        rec.choices[s] = {chosen, rec.expert_acc[static_cast<std::size_t>(chosen)]};
    }
    return rec;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

BenchResult evaluate_selectors(const SyntheticWorld& w, const BenchOptions& opts) {
    if (w.tasks.size() < 5) throw UsageError("selector evaluation needs at least 5 tasks");
    BenchResult result;
    result.records.resize(w.tasks.size());
    parallel_for(0, w.tasks.size(), [&](std::size_t t) { result.records[t] = evaluate_task(w, t, opts.selectors); });

    for (std::size_t k = 0; k < opts.selectors.size(); ++k) {
        const BenchSelector s = opts.selectors[k];
        RegretSummary sum;
        sum.selector = s;
        std::vector<double> selected;
        for (const auto& rec : result.records) {
            const auto& choice = rec.choices.at(s);
            sum.regrets.push_back(rec.oracle_acc - choice.accuracy);
            sum.agreements.push_back(choice.chosen == rec.oracle_best ? 1.0 : 0.0);
            selected.push_back(choice.accuracy);
        }
        sum.mean_regret = mean_of(sum.regrets);
        sum.agreement = mean_of(sum.agreements);
        sum.mean_selected_acc = mean_of(selected);
        const std::uint64_t base = w.config.seed * 31 + static_cast<std::uint64_t>(s);
        std::tie(sum.ci_lo, sum.ci_hi) = bootstrap_ci(sum.regrets, opts.ci_level, opts.resamples, base);
        std::tie(sum.agreement_ci_lo, sum.agreement_ci_hi) =
            bootstrap_ci(sum.agreements, opts.ci_level, opts.resamples, base + 7);
        result.summaries[s] = std::move(sum);
    }
    return result;
}

void write_bench_report(std::ostream& out, const WorldConfig& cfg, const BenchResult& r) {
    using detail::format_f;
    out << "# config " << world_config_to_json(cfg) << '\n';
    for (const auto& [s, sum] : r.summaries) {
        out << "method " << to_string(s) << '\n'
            << "mean_regret " << format_f(sum.mean_regret, 6) << '\n'
            << "agreement " << format_f(sum.agreement, 6) << '\n'
            << "ci_lo " << format_f(sum.ci_lo, 6) << '\n'
            << "ci_hi " << format_f(sum.ci_hi, 6) << '\n'
            << "agreement_ci_lo " << format_f(sum.agreement_ci_lo, 6) << '\n'
            << "agreement_ci_hi " << format_f(sum.agreement_ci_hi, 6) << '\n'
            << "mean_selected_acc " << format_f(sum.mean_selected_acc, 6) << "\n\n";
    }
    for (const auto& rec : r.records) {
        out << "task " << rec.task << " true=" << rec.true_expert << " image=" << rec.image_domain
            << " oracle=" << rec.oracle_best << " oracle_acc=" << format_f(rec.oracle_acc, 6);
        for (const auto& [s, c] : rec.choices) out << ' ' << to_string(s) << '=' << c.chosen << ':' << format_f(c.accuracy, 6);
        out << '\n';
    }
}

void export_world(const SyntheticWorld& w, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_probs(priors_to_probs(w.slice_priors), dir / "priors.prob");
    for (std::size_t t = 0; t < w.tasks.size(); ++t) {
        const auto& task = w.tasks[t];
        const fs::path tdir = dir / ("task_" + std::to_string(t));
        fs::create_directories(tdir / "embeddings");
        write_task(task.train, tdir / "train.task");
        write_probs(epn_probs(w, task), tdir / "epn.prob");
        write_probs(task.baseline_probs, tdir / "baseline.prob");
        for (const auto& e : w.experts) {
            write_embeddings(embed_task(task, e), tdir / "embeddings" / ("expert_" + std::to_string(e.expert_id) + ".xprt"));
        }
    }
}

// ---------------------------------------------------------------------------
// statistics

double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw UsageError("quantile of an empty sample");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& samples, double level, std::size_t resamples,
                                       std::uint64_t seed) {
    if (samples.empty()) throw UsageError("bootstrap of an empty sample");
    if (!(level > 0.0 && level < 1.0)) throw UsageError("confidence level must be in (0, 1)");
    if (resamples == 0) throw UsageError("bootstrap needs at least one resample");
    const std::size_t n = samples.size();
    // Means are accumulated relative to the first sample so a constant
    // sample reproduces its value exactly.
    const double anchor = samples.front();
    auto rng = make_rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> means(resamples);
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += samples[pick(rng)] - anchor;
        m = anchor + s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    const double alpha = 1.0 - level;
    return {quantile_sorted(means, alpha / 2.0), quantile_sorted(means, 1.0 - alpha / 2.0)};
}

// ---------------------------------------------------------------------------
// cost model

namespace {

WideUint mul(WideUint a, WideUint b) {
    if (a != 0 && b > std::numeric_limits<WideUint>::max() / a) throw NumericError("cost model overflow");
    return a * b;
}

WideUint add(WideUint a, WideUint b) {
    if (b > std::numeric_limits<WideUint>::max() - a) throw NumericError("cost model overflow");
    return a + b;
}

} // namespace

std::string to_string(WideUint v) {
    if (v == 0) return "0";
    std::string s;
    while (v != 0) {
        s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
        v /= 10;
    }
    std::reverse(s.begin(), s.end());
    return s;
}

CostTable asymptotic_costs(const CostModelInput& in) {
    if (in.params == 0 || in.batch == 0 || in.experts == 0 || in.task_examples == 0) {
        throw UsageError("cost model needs positive P, B, E and N_T");
    }
    const WideUint P = in.params, B = in.batch, Su = in.upstream_steps, Sa = in.adapt_steps, Sf = in.finetune_steps,
                   E = in.experts, Nt = in.task_examples;
    CostTable t;
    t.domain_adaptive.upstream = mul(mul(Su, B), P);
    t.domain_adaptive.preparation = mul(add(Nt, mul(Sa, B)), P);
    t.domain_adaptive.finetune = mul(mul(Sf, B), P);
    t.expert_routing.upstream = mul(mul(add(Su, mul(Sa, E)), B), P);
    t.expert_routing.preparation = mul(add(mul(Nt, P), mul(Nt, Nt)), E);
    t.expert_routing.finetune = mul(mul(Sf, B), P);
    t.preparation_ratio =
        static_cast<double>(t.domain_adaptive.preparation) / static_cast<double>(t.expert_routing.preparation);
    return t;
}

std::string format_cost_table(const CostTable& t) {
    std::ostringstream out;
    out << "dat_upstream " << to_string(t.domain_adaptive.upstream) << '\n'
        << "dat_preparation " << to_string(t.domain_adaptive.preparation) << '\n'
        << "dat_finetune " << to_string(t.domain_adaptive.finetune) << '\n'
        << "experts_upstream " << to_string(t.expert_routing.upstream) << '\n'
        << "experts_preparation " << to_string(t.expert_routing.preparation) << '\n'
        << "experts_finetune " << to_string(t.expert_routing.finetune) << '\n'
        << "preparation_ratio " << detail::format_f(t.preparation_ratio, 2) << '\n';
    return out.str();
}

} // namespace xroute
