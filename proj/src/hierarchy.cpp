#include "xroute/hierarchy.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <sstream>

#include "text_util.hpp"
#include "xroute/error.hpp"
#include "xroute/log.hpp"
#include "xroute/parallel.hpp"
#include "xroute/rng.hpp"

namespace xroute {

using detail::parse_int;
using detail::tokenize;

LabelHierarchy::LabelHierarchy(std::vector<Label> labels, std::vector<Edge> edges,
                               std::map<LabelId, std::uint64_t> counts)
    : labels_(std::move(labels)), edges_(std::move(edges)), counts_(std::move(counts)) {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (!index_.emplace(labels_[i].id, i).second) {
            throw ValidationError("duplicate label id " + std::to_string(labels_[i].id));
        }
        if (labels_[i].id < 0) {
            throw ValidationError("negative label id " + std::to_string(labels_[i].id));
        }
    }
    parents_.resize(labels_.size());
    for (const auto& e : edges_) {
        if (!contains(e.child) || !contains(e.parent)) {
            throw ValidationError("dangling edge " + std::to_string(e.child) + " -> " +
                                  std::to_string(e.parent) + ": endpoint not declared");
        }
        if (e.child == e.parent) {
            throw ValidationError("cycle detected: self edge on label " + std::to_string(e.child));
        }
        auto& p = parents_[index_.at(e.child)];
        if (std::find(p.begin(), p.end(), e.parent) == p.end()) p.push_back(e.parent);
    }
    for (const auto& [id, c] : counts_) {
        if (!contains(id)) {
            throw ValidationError("count given for undeclared label " + std::to_string(id));
        }
    }

    // Iterative three-colour DFS over parent links.
    enum : std::uint8_t { white, grey, black };
    std::vector<std::uint8_t> colour(labels_.size(), white);
    for (std::size_t root = 0; root < labels_.size(); ++root) {
        if (colour[root] != white) continue;
        std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
        colour[root] = grey;
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < parents_[node].size()) {
                const std::size_t parent = index_.at(parents_[node][next++]);
                if (colour[parent] == grey) {
                    throw ValidationError("cycle detected through label " +
                                          std::to_string(labels_[parent].id));
                }
                if (colour[parent] == white) {
                    colour[parent] = grey;
                    stack.emplace_back(parent, 0);
                }
            } else {
                colour[node] = black;
                stack.pop_back();
            }
        }
    }
}

std::uint64_t LabelHierarchy::count(LabelId id) const {
    auto it = counts_.find(id);
    return it == counts_.end() ? 0 : it->second;
}

const std::vector<LabelId>& LabelHierarchy::parents(LabelId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("unknown label id " + std::to_string(id));
    return parents_[it->second];
}

const std::string& LabelHierarchy::name(LabelId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("unknown label id " + std::to_string(id));
    return labels_[it->second].name;
}

std::size_t LabelHierarchy::label_space() const {
    return index_.empty() ? 0 : static_cast<std::size_t>(index_.rbegin()->first) + 1;
}

LabelHierarchy LabelHierarchy::with_counts(std::map<LabelId, std::uint64_t> counts) const {
    return LabelHierarchy(labels_, edges_, std::move(counts));
}

// ---------------------------------------------------------------------------

LabelHierarchy parse_hierarchy(std::istream& in) {
    std::vector<Label> labels;
    std::vector<Edge> edges;
    std::map<LabelId, std::uint64_t> counts;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto tok = tokenize(line);
        if (tok.empty() || tok[0].front() == '#') continue;
        const std::string where = "hierarchy line " + std::to_string(lineno);
        if (tok.size() != 3) throw ValidationError(where + ": expected 3 fields");
        if (tok[0] == "L") {
            labels.push_back({parse_int<LabelId>(tok[1], where), std::string(tok[2])});
        } else if (tok[0] == "E") {
            edges.push_back({parse_int<LabelId>(tok[1], where), parse_int<LabelId>(tok[2], where)});
        } else if (tok[0] == "C") {
            const auto id = parse_int<LabelId>(tok[1], where);
            if (!counts.emplace(id, parse_int<std::uint64_t>(tok[2], where)).second) {
                throw ValidationError(where + ": duplicate count for label " + std::to_string(id));
            }
        } else {
            throw ValidationError(where + ": unknown record type '" + std::string(tok[0]) + "'");
        }
    }
    return LabelHierarchy(std::move(labels), std::move(edges), std::move(counts));
}

LabelHierarchy load_hierarchy(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open hierarchy file " + path.string());
    return parse_hierarchy(in);
}

void write_hierarchy(std::ostream& out, const LabelHierarchy& h) {
    for (const auto& l : h.labels()) out << "L " << l.id << ' ' << l.name << '\n';
    for (const auto& e : h.edges()) out << "E " << e.child << ' ' << e.parent << '\n';
    for (const auto& [id, c] : h.counts()) out << "C " << id << ' ' << c << '\n';
}

std::vector<MultiLabelExample> parse_examples(std::istream& in, const LabelHierarchy& h) {
    std::vector<MultiLabelExample> out;
    std::set<ExampleId> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto tok = tokenize(line);
        if (tok.empty() || tok[0].front() == '#') continue;
        const std::string where = "examples line " + std::to_string(lineno);
        if (tok.size() != 3 || tok[0] != "X") throw ValidationError(where + ": expected 'X <id> <labels>'");
        MultiLabelExample ex;
        ex.example_id = parse_int<ExampleId>(tok[1], where);
        for (auto part : detail::split(tok[2], ',')) {
            const auto id = parse_int<LabelId>(part, where);
            if (!h.contains(id)) {
                throw ValidationError(where + ": unknown label " + std::to_string(id));
            }
            ex.labels.insert(id);
        }
        if (!seen.insert(ex.example_id).second) {
            throw ValidationError(where + ": duplicate example id " + std::to_string(ex.example_id));
        }
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<MultiLabelExample> load_examples(const std::filesystem::path& path, const LabelHierarchy& h) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open examples file " + path.string());
    return parse_examples(in, h);
}

// ---------------------------------------------------------------------------

std::set<LabelId> close_labels(const std::set<LabelId>& labels, const LabelHierarchy& h) {
    std::set<LabelId> closed;
    std::deque<LabelId> frontier;
    for (LabelId l : labels) {
        if (!h.contains(l)) throw ValidationError("unknown label id " + std::to_string(l));
        if (closed.insert(l).second) frontier.push_back(l);
    }
    while (!frontier.empty()) {
        const LabelId l = frontier.front();
        frontier.pop_front();
        for (LabelId p : h.parents(l)) {
            if (closed.insert(p).second) frontier.push_back(p);
        }
    }
    return closed;
}

std::set<LabelId> close_labels(const MultiLabelExample& example, const LabelHierarchy& h) {
    return close_labels(example.labels, h);
}

std::map<LabelId, std::uint64_t> count_images(const std::vector<MultiLabelExample>& examples,
                                              const LabelHierarchy& h, CountBasis basis) {
    std::map<LabelId, std::uint64_t> counts;
    for (const auto& l : h.labels()) counts[l.id] = 0;
    for (const auto& ex : examples) {
        const auto labels = basis == CountBasis::closed ? close_labels(ex, h) : ex.labels;
        for (LabelId l : labels) {
            if (!h.contains(l)) throw ValidationError("unknown label id " + std::to_string(l));
            ++counts[l];
        }
    }
    return counts;
}

DomainRule parse_domain_rule(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        throw UsageError("domain rule must be threshold:<n> or topn:<n>, got '" + text + "'");
    }
    const std::string kind = text.substr(0, colon);
    const std::string_view value = std::string_view(text).substr(colon + 1);
    if (kind == "threshold") return ThresholdRule{parse_int<std::uint64_t>(value, "threshold")};
    if (kind == "topn") return TopNRule{parse_int<std::size_t>(value, "topn")};
    throw UsageError("unknown domain rule '" + kind + "'");
}

std::vector<LabelId> select_domains(const LabelHierarchy& h, const DomainRule& rule) {
    std::vector<std::pair<std::uint64_t, LabelId>> ranked;
    ranked.reserve(h.size());
    for (const auto& l : h.labels()) ranked.emplace_back(h.count(l.id), l.id);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });

    std::vector<LabelId> out;
    if (const auto* t = std::get_if<ThresholdRule>(&rule)) {
        for (const auto& [c, id] : ranked) {
            if (c > t->min_images) out.push_back(id);
        }
    } else {
        const auto n = std::get<TopNRule>(rule).n;
        for (std::size_t i = 0; i < ranked.size() && i < n; ++i) out.push_back(ranked[i].second);
    }
    if (out.empty()) warn("domain selection produced no domains");
    return out;
}

SliceSet build_slices(const std::vector<MultiLabelExample>& examples, const std::vector<LabelId>& domains,
                      const LabelHierarchy& h) {
    if (domains.empty()) throw UsageError("build_slices needs at least one domain");
    std::set<LabelId> unique_domains;
    for (LabelId d : domains) {
        if (!h.contains(d)) throw ValidationError("domain " + std::to_string(d) + " is not in the hierarchy");
        if (!unique_domains.insert(d).second) {
            throw ValidationError("domain " + std::to_string(d) + " listed twice");
        }
    }

    std::vector<std::set<LabelId>> closed(examples.size());
    parallel_for(0, examples.size(), [&](std::size_t i) { closed[i] = close_labels(examples[i], h); });

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return examples[a].example_id < examples[b].example_id; });

    SliceSet out;
    for (LabelId d : domains) {
        ExpertSlice slice;
        slice.root_label = d;
        for (std::size_t i : order) {
            if (closed[i].count(d)) slice.member_ids.push_back(examples[i].example_id);
        }
        if (slice.member_ids.empty()) {
            warn("domain " + std::to_string(d) + " (" + h.name(d) + ") has no examples; slice dropped");
            continue;
        }
        slice.expert_id = static_cast<ExpertId>(out.slices.size());
        for (ExampleId id : slice.member_ids) out.routing[id].push_back(slice.expert_id);
        out.slices.push_back(std::move(slice));
    }
    return out;
}

std::vector<ResampledPair> balanced_resample(const std::vector<ExpertSlice>& slices, std::size_t total,
                                             std::uint64_t seed) {
    if (slices.empty()) throw UsageError("balanced_resample needs at least one slice");
    if (total < slices.size()) {
        throw UsageError("balanced_resample: total " + std::to_string(total) + " is smaller than the " +
                         std::to_string(slices.size()) + " experts");
    }
    const std::size_t experts = slices.size();
    const std::size_t base = total / experts;
    const std::size_t extra = total % experts;

    std::vector<ResampledPair> pairs;
    pairs.reserve(total);
    for (std::size_t e = 0; e < experts; ++e) {
        const auto& members = slices[e].member_ids;
        if (members.empty()) {
            throw ValidationError("slice of expert " + std::to_string(slices[e].expert_id) + " is empty");
        }
        auto rng = make_rng(seed, e);
        std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
        const std::size_t quota = base + (e < extra ? 1 : 0);
        for (std::size_t k = 0; k < quota; ++k) {
            pairs.push_back({members[pick(rng)], slices[e].expert_id});
        }
    }
    auto rng = make_rng(seed, experts);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    return pairs;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::string join_ids(const std::vector<T>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(ids[i]);
    }
    return s;
}

} // namespace

void write_slices(std::ostream& out, const SliceSet& s) {
    out << "# slices " << s.slices.size() << '\n';
    for (const auto& slice : s.slices) {
        out << "S " << slice.expert_id << ' ' << slice.root_label << ' ' << join_ids(slice.member_ids) << '\n';
    }
    for (const auto& [example, experts] : s.routing) {
        out << "R " << example << ' ' << join_ids(experts) << '\n';
    }
}

SliceSet parse_slices(std::istream& in) {
    SliceSet s;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto tok = tokenize(line);
        if (tok.empty() || tok[0].front() == '#') continue;
        const std::string where = "slices line " + std::to_string(lineno);
        if (tok[0] == "S" && tok.size() == 4) {
            ExpertSlice slice;
            slice.expert_id = parse_int<ExpertId>(tok[1], where);
            slice.root_label = parse_int<LabelId>(tok[2], where);
            for (auto part : detail::split(tok[3], ',')) slice.member_ids.push_back(parse_int<ExampleId>(part, where));
            s.slices.push_back(std::move(slice));
        } else if (tok[0] == "R" && tok.size() == 3) {
            auto& experts = s.routing[parse_int<ExampleId>(tok[1], where)];
            for (auto part : detail::split(tok[2], ',')) experts.push_back(parse_int<ExpertId>(part, where));
        } else {
            throw ValidationError(where + ": malformed record");
        }
    }
    return s;
}

} // namespace xroute
