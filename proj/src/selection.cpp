#include "xroute/selection.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "text_util.hpp"
#include "xroute/error.hpp"
#include "xroute/rng.hpp"

namespace xroute {

std::string to_string(SelectionMethod m) {
    switch (m) {
        case SelectionMethod::knn: return "knn";
        case SelectionMethod::epn: return "epn";
        case SelectionMethod::kl: return "kl";
        case SelectionMethod::random: return "random";
    }
    return "unknown";
}

SelectionMethod parse_method(const std::string& text) {
    if (text == "knn") return SelectionMethod::knn;
    if (text == "epn") return SelectionMethod::epn;
    if (text == "kl") return SelectionMethod::kl;
    if (text == "random") return SelectionMethod::random;
    throw UsageError("unknown selection method '" + text + "'");
}

SelectionReport make_report(SelectionMethod method, Direction direction, std::map<ExpertId, double> scores) {
    if (scores.empty()) throw UsageError("cannot select from an empty score table");
    SelectionReport r;
    r.method = method;
    r.direction = direction;
    double best = scores.begin()->second;
    for (const auto& [id, s] : scores) {
        if (std::isnan(s)) throw NumericError("score of expert " + std::to_string(id) + " is NaN");
        best = direction == Direction::maximize ? std::max(best, s) : std::min(best, s);
    }
    bool found = false;
    for (const auto& [id, s] : scores) {
        if (s != best) continue;
        if (!found) {
            r.chosen = id;
            found = true;
        }
        ++r.tie_count;
    }
    r.scores = std::move(scores);
    return r;
}

void write_report(std::ostream& out, const SelectionReport& r) {
    out << "method=" << to_string(r.method) << " chosen=" << r.chosen << " tie_count=" << r.tie_count << '\n';
    for (const auto& [id, s] : r.scores) out << "score " << id << ' ' << detail::format_g(s, 9) << '\n';
}

std::string format_report(const SelectionReport& r) {
    std::ostringstream os;
    write_report(os, r);
    return os.str();
}

SelectionReport parse_report(std::istream& in) {
    SelectionReport r;
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty selection report");
    const auto head = detail::tokenize(line);
    if (head.size() != 3) throw ValidationError("malformed report header '" + line + "'");
    auto field = [&](std::string_view tok, std::string_view key) {
        if (tok.substr(0, key.size()) != key) throw ValidationError("report header: expected " + std::string(key));
        return tok.substr(key.size());
    };
    r.method = parse_method(std::string(field(head[0], "method=")));
    r.chosen = detail::parse_int<ExpertId>(field(head[1], "chosen="), "report chosen");
    r.tie_count = detail::parse_int<std::size_t>(field(head[2], "tie_count="), "report tie_count");
    r.direction = r.method == SelectionMethod::kl ? Direction::minimize : Direction::maximize;
    while (std::getline(in, line)) {
        const auto tok = detail::tokenize(line);
        if (tok.empty()) continue;
        if (tok.size() != 3 || tok[0] != "score") throw ValidationError("malformed report line '" + line + "'");
        r.scores[detail::parse_int<ExpertId>(tok[1], "score id")] = std::stod(std::string(tok[2]));
    }
    return r;
}

// ---------------------------------------------------------------------------

SelectionReport epn_select(const ProbMatrix& probs) {
    if (probs.kind != ProbKind::categorical) {
        throw UsageError("domain prediction needs a categorical probability matrix");
    }
    validate(probs);
    const std::size_t n = probs.data.rows();
    const std::size_t experts = probs.data.cols();
    if (n < 1 || experts < 1) throw UsageError("domain prediction needs at least one row and one expert");

    std::vector<double> sums(experts, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = 0; e < experts; ++e) {
            sums[e] += std::log(std::max(static_cast<double>(probs.data(i, e)), kEpnEpsilon));
        }
    }
    std::map<ExpertId, double> scores;
    for (std::size_t e = 0; e < experts; ++e) scores[static_cast<ExpertId>(e)] = sums[e] / static_cast<double>(n);
    return make_report(SelectionMethod::epn, Direction::maximize, std::move(scores));
}

LabelDistribution estimate_task_distribution(const ProbMatrix& baseline_probs) {
    if (baseline_probs.kind != ProbKind::multilabel) {
        throw UsageError("label matching needs a multilabel probability matrix");
    }
    const std::size_t n = baseline_probs.data.rows();
    const std::size_t c = baseline_probs.data.cols();
    if (n == 0 || c == 0) throw UsageError("label matching needs a non-empty probability matrix");
    validate(baseline_probs);
    LabelDistribution q;
    q.marginals.assign(c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < c; ++k) q.marginals[k] += baseline_probs.data(i, k);
    }
    for (double& v : q.marginals) v /= static_cast<double>(n);
    return q;
}

LabelDistribution empirical_prior(const ExpertSlice& slice,
                                  const std::map<ExampleId, std::set<LabelId>>& closed_labels,
                                  std::size_t num_labels) {
    if (slice.member_ids.empty()) {
        throw UsageError("empirical prior of expert " + std::to_string(slice.expert_id) + ": empty slice");
    }
    std::vector<std::size_t> hits(num_labels, 0);
    for (ExampleId id : slice.member_ids) {
        auto it = closed_labels.find(id);
        if (it == closed_labels.end()) {
            throw ValidationError("no labels known for slice member " + std::to_string(id));
        }
        for (LabelId l : it->second) {
            if (l < 0 || static_cast<std::size_t>(l) >= num_labels) {
                throw ValidationError("label " + std::to_string(l) + " outside the label space");
            }
            ++hits[static_cast<std::size_t>(l)];
        }
    }
    LabelDistribution p;
    p.marginals.resize(num_labels);
    const double n = static_cast<double>(slice.member_ids.size());
    for (std::size_t c = 0; c < num_labels; ++c) p.marginals[c] = static_cast<double>(hits[c]) / n;
    return p;
}

double bernoulli_kl(const LabelDistribution& p, const LabelDistribution& q, double eps) {
    if (p.marginals.size() != q.marginals.size()) {
        throw UsageError("KL divergence of distributions with " + std::to_string(p.marginals.size()) + " and " +
                         std::to_string(q.marginals.size()) + " labels");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < p.marginals.size(); ++c) {
        const double pc = std::clamp(p.marginals[c], eps, 1.0 - eps);
        const double qc = std::clamp(q.marginals[c], eps, 1.0 - eps);
        total += pc * std::log(pc / qc) + (1.0 - pc) * std::log((1.0 - pc) / (1.0 - qc));
    }
    return total;
}

SelectionReport kl_select(const std::vector<LabelDistribution>& priors, const LabelDistribution& q) {
    if (priors.empty()) throw UsageError("label matching needs at least one expert");
    std::map<ExpertId, double> scores;
    for (std::size_t e = 0; e < priors.size(); ++e) {
        scores[static_cast<ExpertId>(e)] = bernoulli_kl(priors[e], q);
    }
    return make_report(SelectionMethod::kl, Direction::minimize, std::move(scores));
}

SelectionReport random_select(std::size_t num_experts, std::uint64_t seed) {
    if (num_experts == 0) throw UsageError("random selection needs at least one expert");
    auto rng = make_rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, num_experts - 1);
    SelectionReport r;
    r.method = SelectionMethod::random;
    r.direction = Direction::maximize;
    r.chosen = static_cast<ExpertId>(pick(rng));
    r.tie_count = 1;
    return r;
}

ProbMatrix priors_to_probs(const std::vector<LabelDistribution>& priors) {
    if (priors.empty()) throw UsageError("no priors to store");
    const std::size_t c = priors.front().marginals.size();
    ProbMatrix p;
    p.kind = ProbKind::multilabel;
    p.data = MatrixF(priors.size(), c);
    for (std::size_t e = 0; e < priors.size(); ++e) {
        if (priors[e].marginals.size() != c) throw UsageError("priors have different label spaces");
        for (std::size_t k = 0; k < c; ++k) p.data(e, k) = static_cast<float>(priors[e].marginals[k]);
    }
    return p;
}

std::vector<LabelDistribution> probs_to_priors(const ProbMatrix& p) {
    if (p.kind != ProbKind::multilabel) throw UsageError("priors must be stored as a multilabel matrix");
    std::vector<LabelDistribution> out(p.data.rows());
    for (std::size_t e = 0; e < p.data.rows(); ++e) {
        out[e].marginals.assign(p.data.row(e).begin(), p.data.row(e).end());
    }
    return out;
}

} // namespace xroute
