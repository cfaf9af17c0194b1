#include "doctest.h"

#include <algorithm>
#include <random>
#include <sstream>

#include "xroute/error.hpp"
#include "xroute/hierarchy.hpp"
#include "xroute/log.hpp"
#include "xroute/parallel.hpp"

using namespace xroute;

namespace {

LabelHierarchy parse(const std::string& text) {
    std::istringstream in(text);
    return parse_hierarchy(in);
}

struct WarningCapture {
    std::vector<std::string> messages;
    WarningHandler previous;
    WarningCapture() {
        previous = set_warning_handler([this](const std::string& m) { messages.push_back(m); });
    }
    ~WarningCapture() { set_warning_handler(std::move(previous)); }
};

// Random DAG: edges only go from higher to lower index, so no cycles.
LabelHierarchy random_dag(std::mt19937& rng, std::size_t n, double edge_prob) {
    std::vector<Label> labels;
    std::vector<Edge> edges;
    for (std::size_t i = 0; i < n; ++i) labels.push_back({static_cast<LabelId>(i), "n" + std::to_string(i)});
    std::bernoulli_distribution coin(edge_prob);
    for (std::size_t c = 1; c < n; ++c)
        for (std::size_t p = 0; p < c; ++p)
            if (coin(rng)) edges.push_back({static_cast<LabelId>(c), static_cast<LabelId>(p)});
    std::shuffle(labels.begin(), labels.end(), rng);
    return LabelHierarchy(labels, edges);
}

// Reachability oracle: Warshall transitive closure over the edge list.
std::vector<std::vector<bool>> reachability(const LabelHierarchy& h) {
    const std::size_t n = h.label_space();
    std::vector<std::vector<bool>> r(n, std::vector<bool>(n, false));
    for (std::size_t i = 0; i < n; ++i) r[i][i] = true;
    for (const auto& e : h.edges()) r[e.child][e.parent] = true;
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < n; ++i)
            if (r[i][k])
                for (std::size_t j = 0; j < n; ++j)
                    if (r[k][j]) r[i][j] = true;
    return r;
}

const char* kLionFile =
    "L 0 organism\nL 1 animal\nL 2 carnivore\nL 3 felidae\nL 4 lion\nL 5 plant\n"
    "E 1 0\nE 2 1\nE 3 2\nE 4 3\nE 5 0\n";

} // namespace

TEST_CASE("load_hierarchy parses labels, edges and counts") {
    const auto h = parse("L 1 lion\nL 2 felidae\nL 3 carnivore\nE 1 2\nE 2 3\nC 1 7\n");
    CHECK(h.size() == 3);
    CHECK(h.edges().size() == 2);
    CHECK(h.count(1) == 7);
    CHECK(h.count(3) == 0);
    CHECK(h.name(2) == "felidae");
}

TEST_CASE("load_hierarchy rejects cycles and dangling edges") {
    try {
        parse("L 1 a\nL 2 b\nE 1 2\nE 2 1\n");
        FAIL("expected a cycle error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("cycle") != std::string::npos);
    }
    CHECK_THROWS_AS(parse("L 1 a\nE 1 9\n"), ValidationError);
    CHECK_THROWS_AS(parse("L 1 a\nL 1 b\n"), ValidationError);
    CHECK_THROWS_AS(parse("L 1 a\nQ 1 2\n"), ValidationError);
    CHECK_THROWS_AS(parse("L x a\n"), ValidationError);
}

TEST_CASE("empty hierarchy file") {
    const auto h = parse("");
    CHECK(h.size() == 0);
    CHECK(h.label_space() == 0);
}

TEST_CASE("close_labels follows is-a links to the root") {
    const auto h = parse(kLionFile);
    CHECK(close_labels(std::set<LabelId>{4}, h) == std::set<LabelId>{0, 1, 2, 3, 4});
    CHECK(close_labels(std::set<LabelId>{0}, h) == std::set<LabelId>{0});
    CHECK(close_labels(std::set<LabelId>{4, 5}, h) == std::set<LabelId>{0, 1, 2, 3, 4, 5});
    CHECK_THROWS_AS(close_labels(std::set<LabelId>{42}, h), ValidationError);
}

TEST_CASE("close_labels matches the reachability oracle on random DAGs") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto h = random_dag(rng, 30, 0.1);
        const auto reach = reachability(h);
        std::uniform_int_distribution<LabelId> pick(0, 29);
        std::set<LabelId> labels{pick(rng), pick(rng), pick(rng)};
        std::set<LabelId> expected;
        for (LabelId l : labels)
            for (std::size_t j = 0; j < 30; ++j)
                if (reach[l][j]) expected.insert(static_cast<LabelId>(j));
        const auto closed = close_labels(labels, h);
        CHECK(closed == expected);
        CHECK(close_labels(closed, h) == closed);  // idempotent
    }
}

TEST_CASE("closed counts dominate along every edge") {
    std::mt19937 rng(11);
    const auto h = random_dag(rng, 30, 0.15);
    std::vector<MultiLabelExample> examples;
    std::uniform_int_distribution<LabelId> pick(0, 29);
    for (ExampleId i = 0; i < 200; ++i) examples.push_back({i, {pick(rng), pick(rng)}});
    const auto counts = count_images(examples, h);
    for (const auto& e : h.edges()) CHECK(counts.at(e.parent) >= counts.at(e.child));
    const auto raw = count_images(examples, h, CountBasis::raw);
    std::uint64_t raw_total = 0;
    for (const auto& [id, c] : raw) raw_total += c;
    std::uint64_t label_total = 0;
    for (const auto& ex : examples) label_total += ex.labels.size();
    CHECK(raw_total == label_total);
}

TEST_CASE("select_domains orders by count with lowest-id tie break") {
    const auto h = parse("L 0 a\nL 1 b\nL 2 c\nC 0 10\nC 1 5\nC 2 1\n");
    CHECK(select_domains(h, TopNRule{2}) == std::vector<LabelId>{0, 1});
    CHECK(select_domains(h, ThresholdRule{4}) == std::vector<LabelId>{0, 1});

    const auto tied = parse("L 5 a\nL 3 b\nL 9 c\nC 5 4\nC 3 4\nC 9 4\n");
    CHECK(select_domains(tied, TopNRule{2}) == std::vector<LabelId>{3, 5});

    WarningCapture capture;
    CHECK(select_domains(h, ThresholdRule{100}).empty());
    CHECK(capture.messages.size() == 1);
}

TEST_CASE("select_domains threshold equals filter-and-sort oracle and ignores input order") {
    std::mt19937 rng(3);
    std::uniform_int_distribution<std::uint64_t> count(0, 50);
    std::vector<Label> labels;
    std::map<LabelId, std::uint64_t> counts;
    for (LabelId i = 0; i < 100; ++i) {
        labels.push_back({i, "l" + std::to_string(i)});
        counts[i] = count(rng);
    }
    for (std::uint64_t t : {0u, 10u, 25u, 49u, 50u}) {
        std::vector<std::pair<std::uint64_t, LabelId>> oracle;
        for (const auto& [id, c] : counts)
            if (c > t) oracle.emplace_back(c, id);
        std::sort(oracle.begin(), oracle.end(),
                  [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        std::vector<LabelId> expected;
        for (auto [c, id] : oracle) expected.push_back(id);

        WarningCapture quiet;
        CHECK(select_domains(LabelHierarchy(labels, {}, counts), ThresholdRule{t}) == expected);
        auto shuffled = labels;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(select_domains(LabelHierarchy(shuffled, {}, counts), ThresholdRule{t}) == expected);
    }
}

TEST_CASE("parse_domain_rule") {
    CHECK(std::get<ThresholdRule>(parse_domain_rule("threshold:850000")).min_images == 850000);
    CHECK(std::get<TopNRule>(parse_domain_rule("topn:50")).n == 50);
    CHECK_THROWS_AS(parse_domain_rule("top:3"), UsageError);
    CHECK_THROWS_AS(parse_domain_rule("topn"), UsageError);
}

TEST_CASE("build_slices places an example in every ancestor slice") {
    const auto h = parse(kLionFile);
    const std::vector<MultiLabelExample> examples{{10, {4}}, {11, {5}}};
    const auto s = build_slices(examples, {1, 2}, h);
    REQUIRE(s.slices.size() == 2);
    CHECK(s.slices[0].root_label == 1);
    CHECK(s.slices[0].member_ids == std::vector<ExampleId>{10});
    CHECK(s.slices[1].member_ids == std::vector<ExampleId>{10});
    CHECK(s.routing.at(10) == std::vector<ExpertId>{0, 1});
    CHECK(s.routing.count(11) == 0);
}

TEST_CASE("build_slices drops empty domains with a warning") {
    const auto h = parse(kLionFile);
    WarningCapture capture;
    const auto s = build_slices({{1, {4}}}, {5, 3}, h);
    REQUIRE(s.slices.size() == 1);
    CHECK(s.slices[0].expert_id == 0);
    CHECK(s.slices[0].root_label == 3);
    CHECK(capture.messages.size() == 1);
    CHECK_THROWS_AS(build_slices({{1, {4}}}, {77}, h), ValidationError);
    CHECK_THROWS_AS(build_slices({{1, {4}}}, {}, h), UsageError);
}

TEST_CASE("build_slices matches per-example closure oracle; parent slices contain child slices") {
    std::mt19937 rng(5);
    const auto h = random_dag(rng, 30, 0.1);
    const auto reach = reachability(h);
    std::vector<MultiLabelExample> examples;
    std::uniform_int_distribution<LabelId> pick(0, 29);
    for (ExampleId i = 0; i < 300; ++i) examples.push_back({1000 - i, {pick(rng), pick(rng)}});
    std::vector<LabelId> domains;
    for (LabelId d = 0; d < 30; ++d) domains.push_back(d);

    WarningCapture quiet;
    set_num_threads(3);
    const auto s = build_slices(examples, domains, h);
    set_num_threads(1);
    CHECK(s.slices.size() + quiet.messages.size() == 30);

    std::map<LabelId, std::vector<ExampleId>> by_root;
    for (const auto& slice : s.slices) {
        std::vector<ExampleId> expected;
        for (const auto& ex : examples) {
            bool hit = false;
            for (LabelId l : ex.labels) hit = hit || reach[l][slice.root_label];
            if (hit) expected.push_back(ex.example_id);
        }
        std::sort(expected.begin(), expected.end());
        CHECK(slice.member_ids == expected);
        by_root[slice.root_label] = slice.member_ids;
    }
    for (const auto& e : h.edges()) {
        if (!by_root.count(e.child)) continue;
        const auto& child = by_root[e.child];
        const auto& parent = by_root.at(e.parent);
        CHECK(std::includes(parent.begin(), parent.end(), child.begin(), child.end()));
    }
}

TEST_CASE("balanced_resample balances experts") {
    ExpertSlice small{0, 1, {}};
    ExpertSlice large{1, 2, {}};
    for (ExampleId i = 0; i < 10; ++i) small.member_ids.push_back(i);
    for (ExampleId i = 100; i < 190; ++i) large.member_ids.push_back(i);
    const auto pairs = balanced_resample({small, large}, 100, 9);
    REQUIRE(pairs.size() == 100);
    const auto n0 = std::count_if(pairs.begin(), pairs.end(), [](auto p) { return p.expert_id == 0; });
    CHECK(n0 == 50);
    for (const auto& p : pairs) {
        if (p.expert_id == 0) CHECK(p.example_id < 10);
        else CHECK(p.example_id >= 100);
    }

    const auto single = balanced_resample({small}, 7, 1);
    CHECK(single.size() == 7);
    CHECK(std::all_of(single.begin(), single.end(), [](auto p) { return p.expert_id == 0 && p.example_id < 10; }));

    CHECK_THROWS_AS(balanced_resample({}, 5, 0), UsageError);
    CHECK_THROWS_AS(balanced_resample({small, large}, 1, 0), UsageError);
    CHECK_THROWS_AS(balanced_resample({ExpertSlice{0, 0, {}}}, 3, 0), ValidationError);
}

TEST_CASE("balanced_resample frequencies and determinism") {
    std::vector<ExpertSlice> slices;
    for (ExpertId e = 0; e < 4; ++e) {
        ExpertSlice s{e, 0, {}};
        for (ExampleId i = 0; i < static_cast<ExampleId>(5 + 20 * e); ++i) s.member_ids.push_back(i);
        slices.push_back(s);
    }
    const int reps = 10000;
    const std::size_t total = 4001;
    std::vector<double> expert_hits(4, 0.0);
    std::vector<double> member_hits(5, 0.0);  // members of expert 0
    for (int r = 0; r < reps; ++r) {
        for (const auto& p : balanced_resample(slices, total, static_cast<std::uint64_t>(r))) {
            expert_hits[p.expert_id] += 1.0;
            if (p.expert_id == 0) member_hits[p.example_id] += 1.0;
        }
    }
    const double n = static_cast<double>(reps) * total;
    const double se = std::sqrt(0.25 * 0.75 / n);
    for (double h : expert_hits) CHECK(std::abs(h / n - 0.25) <= 3 * se);
    // Uniform within a slice.
    double draws = 0.0;
    for (double h : member_hits) draws += h;
    const double member_se = std::sqrt(0.2 * 0.8 / draws);
    for (double h : member_hits) CHECK(std::abs(h / draws - 0.2) <= 3 * member_se);

    const auto a = balanced_resample(slices, 999, 123);
    set_num_threads(4);
    const auto b = balanced_resample(slices, 999, 123);
    set_num_threads(1);
    CHECK(a == b);
    CHECK(a != balanced_resample(slices, 999, 124));
}

TEST_CASE("slice file round trip") {
    const auto h = parse(kLionFile);
    const auto s = build_slices({{10, {4}}, {11, {5}}, {12, {2}}}, {0, 1, 2}, h);
    std::stringstream io;
    write_slices(io, s);
    const auto back = parse_slices(io);
    REQUIRE(back.slices.size() == s.slices.size());
    for (std::size_t i = 0; i < s.slices.size(); ++i) {
        CHECK(back.slices[i].expert_id == s.slices[i].expert_id);
        CHECK(back.slices[i].root_label == s.slices[i].root_label);
        CHECK(back.slices[i].member_ids == s.slices[i].member_ids);
    }
    CHECK(back.routing == s.routing);
}
