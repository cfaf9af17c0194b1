#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace xroute {

using LabelId = std::int64_t;
using ExampleId = std::uint64_t;
using ExpertId = std::int64_t;

struct Label {
    LabelId id = 0;
    std::string name;
};

/// Parent-pointing "is-a" edge.
struct Edge {
    LabelId child = 0;
    LabelId parent = 0;
};

/// Label DAG with per-label image counts. Construction validates that every
/// edge endpoint is declared and that the graph is acyclic.
class LabelHierarchy {
public:
    LabelHierarchy() = default;
    LabelHierarchy(std::vector<Label> labels, std::vector<Edge> edges,
                   std::map<LabelId, std::uint64_t> counts = {});

    const std::vector<Label>& labels() const { return labels_; }
    const std::vector<Edge>& edges() const { return edges_; }
    const std::map<LabelId, std::uint64_t>& counts() const { return counts_; }

    bool contains(LabelId id) const { return index_.count(id) != 0; }
    std::size_t size() const { return labels_.size(); }
    std::uint64_t count(LabelId id) const;
    const std::vector<LabelId>& parents(LabelId id) const;
    const std::string& name(LabelId id) const;

    /// Largest label id plus one; the width of a label-indexed vector.
    std::size_t label_space() const;

    LabelHierarchy with_counts(std::map<LabelId, std::uint64_t> counts) const;

private:
    std::vector<Label> labels_;
    std::vector<Edge> edges_;
    std::map<LabelId, std::uint64_t> counts_;
    std::map<LabelId, std::size_t> index_;
    std::vector<std::vector<LabelId>> parents_;
};

struct MultiLabelExample {
    ExampleId example_id = 0;
    std::set<LabelId> labels;
};

struct ExpertSlice {
    ExpertId expert_id = 0;
    LabelId root_label = 0;
    std::vector<ExampleId> member_ids;  // ascending
};

/// Hard-coded upstream routing: example -> experts whose slice holds it.
using RoutingTable = std::map<ExampleId, std::vector<ExpertId>>;

struct SliceSet {
    std::vector<ExpertSlice> slices;  // ascending expert_id
    RoutingTable routing;
};

LabelHierarchy parse_hierarchy(std::istream& in);
LabelHierarchy load_hierarchy(const std::filesystem::path& path);
void write_hierarchy(std::ostream& out, const LabelHierarchy& h);

std::vector<MultiLabelExample> parse_examples(std::istream& in, const LabelHierarchy& h);
std::vector<MultiLabelExample> load_examples(const std::filesystem::path& path, const LabelHierarchy& h);

/// Union of the given labels and all their ancestors.
std::set<LabelId> close_labels(const std::set<LabelId>& labels, const LabelHierarchy& h);
std::set<LabelId> close_labels(const MultiLabelExample& example, const LabelHierarchy& h);

/// Which labels an example contributes to when counting images per label.
enum class CountBasis {
    closed,  // the example's labels plus all ancestors (default)
    raw,     // only the labels the example was annotated with
};

/// Per-label image counts recomputed from an example corpus.
std::map<LabelId, std::uint64_t> count_images(const std::vector<MultiLabelExample>& examples,
                                              const LabelHierarchy& h,
                                              CountBasis basis = CountBasis::closed);

struct ThresholdRule {
    std::uint64_t min_images = 850000;
};
struct TopNRule {
    std::size_t n = 50;
};
using DomainRule = std::variant<ThresholdRule, TopNRule>;

/// Parses "threshold:<n>" or "topn:<n>".
DomainRule parse_domain_rule(const std::string& text);

/// Expert domains by image count, sorted by descending count then ascending id.
std::vector<LabelId> select_domains(const LabelHierarchy& h, const DomainRule& rule);

/// One slice per domain holding the examples whose closed labels contain it.
/// Domains with no members are dropped with a warning; kept slices are
/// numbered 0.. in domain order.
SliceSet build_slices(const std::vector<MultiLabelExample>& examples,
                      const std::vector<LabelId>& domains, const LabelHierarchy& h);

struct ResampledPair {
    ExampleId example_id = 0;
    ExpertId expert_id = 0;
    bool operator==(const ResampledPair&) const = default;
};

/// Draws `total` (example, expert) pairs so that every expert appears
/// total/E or total/E + 1 times, sampling uniformly with replacement inside
/// each slice. The pair sequence is shuffled and fully determined by seed.
std::vector<ResampledPair> balanced_resample(const std::vector<ExpertSlice>& slices,
                                             std::size_t total, std::uint64_t seed);

void write_slices(std::ostream& out, const SliceSet& slices);
SliceSet parse_slices(std::istream& in);

} // namespace xroute
