#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "xroute/error.hpp"
#include "xroute/knn.hpp"
#include "xroute/parallel.hpp"

using namespace xroute;

namespace {

MatrixF gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> g(0.0f, scale);
    MatrixF m(n, d);
    for (auto& v : m.values()) v = g(rng);
    return m;
}

// Double-loop oracle: direct squared differences, strict < so the lowest j wins ties.
double naive_loocv(const MatrixF& x, const std::vector<std::uint32_t>& y, std::vector<std::size_t>* nn = nullptr) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t j = 0; j < x.rows(); ++j) {
            if (j == i) continue;
            double s = 0.0;
            for (std::size_t k = 0; k < x.cols(); ++k) {
                const double diff = static_cast<double>(x(i, k)) - static_cast<double>(x(j, k));
                s += diff * diff;
            }
            if (s < best) {
                best = s;
                arg = j;
            }
        }
        if (nn) nn->push_back(arg);
        if (y[arg] == y[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(x.rows());
}

EmbeddingMatrix embed(ExpertId id, const std::vector<ExampleId>& ids, MatrixF data) {
    return EmbeddingMatrix{id, ids, std::move(data)};
}

} // namespace

TEST_CASE("two points with different labels score zero") {
    MatrixF x(2, 1, std::vector<float>{0.0f, 1.0f});
    const std::vector<std::uint32_t> y{0, 1};
    const auto r = loocv_1nn_accuracy(x, y);
    CHECK(r.accuracy == 0.0);
    CHECK(r.total == 2);
    CHECK(r.nn_index == std::vector<std::size_t>{1, 0});
}

TEST_CASE("well separated clusters score one") {
    std::mt19937_64 rng(1);
    auto x = gaussian(40, 4, rng, 0.1f);
    std::vector<std::uint32_t> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
        y[i] = static_cast<std::uint32_t>(i % 2);
        x(i, 0) += y[i] == 0 ? -10.0f : 10.0f;
    }
    CHECK(loocv_1nn_accuracy(x, y).accuracy == 1.0);
}

TEST_CASE("loocv equals the double-loop oracle exactly") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 2 + rng() % 99;
        const std::size_t d = 1 + rng() % 40;
        auto x = gaussian(n, d, rng);
        if (trial % 3 == 0) {
            // Duplicate rows and a coarse grid produce exact ties.
            for (auto& v : x.values()) v = std::round(v);
            for (std::size_t k = 0; k < d; ++k) x(n - 1, k) = x(0, k);
        }
        std::vector<std::uint32_t> y(n);
        for (auto& l : y) l = static_cast<std::uint32_t>(rng() % 3);
        std::vector<std::size_t> nn;
        const double expected = naive_loocv(x, y, &nn);
        const auto got = loocv_1nn_accuracy(x, y);
        CHECK(got.accuracy == expected);
        CHECK(got.nn_index == nn);
    }
}

TEST_CASE("pairwise distances agree with the direct sum") {
    std::mt19937_64 rng(3);
    const auto x = gaussian(60, 300, rng);
    const auto dist = pairwise_sq_distances(x);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        CHECK(dist(i, i) == 0.0);
        for (std::size_t j = 0; j < x.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < x.cols(); ++k) {
                const double diff = static_cast<double>(x(i, k)) - x(j, k);
                s += diff * diff;
            }
            CHECK(dist(i, j) == doctest::Approx(s).epsilon(1e-4));
            CHECK(dist(i, j) == dist(j, i));
        }
    }
}

TEST_CASE("loocv is invariant to row permutation and uniform scaling") {
    std::mt19937_64 rng(4);
    const std::size_t n = 80;
    auto x = gaussian(n, 6, rng);
    std::vector<std::uint32_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<std::uint32_t>(i % 4);
        x(i, y[i]) += 2.0f;
    }
    const double base = loocv_1nn_accuracy(x, y).accuracy;

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    MatrixF xp(n, 6);
    std::vector<std::uint32_t> yp(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), xp.row(i).begin());
        yp[i] = y[perm[i]];
    }
    CHECK(loocv_1nn_accuracy(xp, yp).accuracy == base);

    MatrixF xs = x;
    for (auto& v : xs.values()) v *= 4.0f;  // power of two keeps float values exact
    CHECK(loocv_1nn_accuracy(xs, y).accuracy == base);
}

TEST_CASE("loocv input errors") {
    MatrixF one(1, 2);
    const std::vector<std::uint32_t> y1{0};
    CHECK_THROWS_AS(loocv_1nn_accuracy(one, y1), UsageError);
    MatrixF two(2, 2);
    const std::vector<std::uint32_t> y3{0, 1, 1};
    CHECK_THROWS_AS(loocv_1nn_accuracy(two, y3), UsageError);
    two(1, 1) = std::numeric_limits<float>::infinity();
    const std::vector<std::uint32_t> y2{0, 1};
    CHECK_THROWS_AS(loocv_1nn_accuracy(two, y2), ValidationError);
}

TEST_CASE("loocv result does not depend on thread count") {
    std::mt19937_64 rng(5);
    const auto x = gaussian(300, 16, rng);
    std::vector<std::uint32_t> y(300);
    for (auto& l : y) l = static_cast<std::uint32_t>(rng() % 5);
    const auto a = loocv_1nn_accuracy(x, y);
    set_num_threads(4);
    const auto b = loocv_1nn_accuracy(x, y);
    set_num_threads(1);
    CHECK(a.nn_index == b.nn_index);
}

TEST_CASE("knn_select picks the best expert with lowest-id tie break") {
    // Expert scores 0.0, 1.0, 1.0 on a four-point task.
    const TaskDataset task{{1, 2, 3, 4}, {0, 0, 1, 1}, 2};
    const std::vector<ExampleId> ids{1, 2, 3, 4};
    const MatrixF bad(4, 1, std::vector<float>{0.0f, 5.0f, 1.0f, 6.0f});
    const MatrixF good(4, 1, std::vector<float>{0.0f, 1.0f, 5.0f, 6.0f});
    const auto r = knn_select(task, {embed(7, ids, good), embed(0, ids, bad), embed(3, ids, good)});
    CHECK(r.scores.at(0) == 0.0);
    CHECK(r.scores.at(3) == 1.0);
    CHECK(r.scores.at(7) == 1.0);
    CHECK(r.chosen == 3);
    CHECK(r.tie_count == 2);

    const auto single = knn_select(task, {embed(5, ids, bad)});
    CHECK(single.chosen == 5);
    CHECK(single.tie_count == 1);
}

TEST_CASE("knn_select is independent of expert order and row order") {
    std::mt19937_64 rng(6);
    const std::size_t n = 40;
    TaskDataset task;
    task.num_classes = 3;
    for (std::size_t i = 0; i < n; ++i) {
        task.example_ids.push_back(500 + i);
        task.class_labels.push_back(static_cast<std::uint32_t>(i % 3));
    }
    std::vector<EmbeddingMatrix> experts;
    for (ExpertId e = 0; e < 5; ++e) {
        auto x = gaussian(n, 4, rng);
        for (std::size_t i = 0; i < n; ++i) x(i, 0) += static_cast<float>(e) * static_cast<float>(task.class_labels[i]);
        experts.push_back(embed(e, task.example_ids, x));
    }
    const auto a = knn_select(task, experts);
    auto reversed = experts;
    std::reverse(reversed.begin(), reversed.end());
    // Store expert 2's rows in reverse order; alignment by id must undo it.
    auto& m = reversed[2];
    std::reverse(m.example_ids.begin(), m.example_ids.end());
    MatrixF flipped(n, 4);
    for (std::size_t i = 0; i < n; ++i)
        std::copy(m.data.row(n - 1 - i).begin(), m.data.row(n - 1 - i).end(), flipped.row(i).begin());
    m.data = flipped;
    const auto b = knn_select(task, reversed);
    CHECK(a.chosen == b.chosen);
    CHECK(a.scores == b.scores);
}

TEST_CASE("knn_select input errors") {
    const TaskDataset task{{1, 2}, {0, 1}, 2};
    const MatrixF x(2, 1, std::vector<float>{0.0f, 1.0f});
    CHECK_THROWS_AS(knn_select(task, {}), UsageError);
    CHECK_THROWS_AS(knn_select(task, {embed(0, {1, 3}, x)}), ValidationError);
    CHECK_THROWS_AS(knn_select(task, {embed(0, {1, 2}, x), embed(0, {1, 2}, x)}), ValidationError);
}
