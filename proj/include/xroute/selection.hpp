#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "xroute/dataset_io.hpp"
#include "xroute/hierarchy.hpp"

namespace xroute {

enum class SelectionMethod { knn, epn, kl, random };
enum class Direction { maximize, minimize };

std::string to_string(SelectionMethod m);
SelectionMethod parse_method(const std::string& text);

struct SelectionReport {
    SelectionMethod method = SelectionMethod::knn;
    Direction direction = Direction::maximize;
    std::map<ExpertId, double> scores;
    ExpertId chosen = 0;
    std::size_t tie_count = 0;
};

/// Picks the optimum of `scores` under `direction`; exact ties go to the
/// lowest expert id and are counted in tie_count.
SelectionReport make_report(SelectionMethod method, Direction direction,
                            std::map<ExpertId, double> scores);

/// `method=<m> chosen=<id> tie_count=<t>` then `score <id> <value>` lines.
void write_report(std::ostream& out, const SelectionReport& r);
std::string format_report(const SelectionReport& r);
SelectionReport parse_report(std::istream& in);

/// Independent Bernoulli marginals over upstream labels.
struct LabelDistribution {
    std::vector<double> marginals;
};

inline constexpr double kEpnEpsilon = 1e-12;
inline constexpr double kKlEpsilon = 1e-7;

/// Domain prediction: argmax over experts (columns) of the mean log
/// probability across task examples (rows).
SelectionReport epn_select(const ProbMatrix& probs);

/// Column means of a multilabel prediction matrix.
LabelDistribution estimate_task_distribution(const ProbMatrix& baseline_probs);

/// Fraction of slice members carrying each label, with labels closed under
/// the hierarchy. `closed_labels` maps example id to its closed label set.
LabelDistribution empirical_prior(const ExpertSlice& slice,
                                  const std::map<ExampleId, std::set<LabelId>>& closed_labels,
                                  std::size_t num_labels);

double bernoulli_kl(const LabelDistribution& p, const LabelDistribution& q,
                    double eps = kKlEpsilon);

/// Label matching: argmin over experts of KL(prior_e || q).
SelectionReport kl_select(const std::vector<LabelDistribution>& priors, const LabelDistribution& q);

/// Uniformly drawn expert; deterministic in seed. Scores are empty.
SelectionReport random_select(std::size_t num_experts, std::uint64_t seed);

/// Priors stored as a multilabel ProbMatrix, one row per expert.
ProbMatrix priors_to_probs(const std::vector<LabelDistribution>& priors);
std::vector<LabelDistribution> probs_to_priors(const ProbMatrix& p);

} // namespace xroute
