#include "doctest.h"

#include <cmath>
#include <random>

#include "xroute/error.hpp"
#include "xroute/toy_models.hpp"

using namespace xroute;

namespace {

MatrixD random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    MatrixD m(r, c);
    for (auto& v : m.values()) v = g(rng);
    return m;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

// Group-norm oracle: two passes over each group's channels x sites.
MatrixD group_norm_oracle(const MatrixD& x, std::size_t groups, const std::vector<double>& gamma,
                          const std::vector<double>& beta) {
    MatrixD out(x.rows(), x.cols());
    const std::size_t per = x.rows() / groups;
    for (std::size_t g = 0; g < groups; ++g) {
        double sum = 0.0;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c)
            for (std::size_t s = 0; s < x.cols(); ++s) sum += x(c, s);
        const double n = static_cast<double>(per * x.cols());
        const double mean = sum / n;
        double sq = 0.0;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c)
            for (std::size_t s = 0; s < x.cols(); ++s) sq += (x(c, s) - mean) * (x(c, s) - mean);
        const double denom = std::sqrt(sq / n + 1e-5);
        for (std::size_t c = g * per; c < (g + 1) * per; ++c)
            for (std::size_t s = 0; s < x.cols(); ++s) out(c, s) = (x(c, s) - mean) / denom * gamma[c] + beta[c];
    }
    return out;
}

AdapterParams random_adapter(std::size_t c, std::size_t k, std::size_t groups, std::mt19937_64& rng) {
    auto a = make_adapter(c, k, groups);
    a.norm1_gamma = random_vector(c, rng);
    a.norm1_beta = random_vector(c, rng);
    a.norm2_gamma = random_vector(k, rng);
    a.norm2_beta = random_vector(k, rng);
    a.conv1_weight = random_matrix(k, c, rng);
    a.conv1_bias = random_vector(k, rng);
    a.conv2_weight = random_matrix(c, k, rng);
    a.conv2_bias = random_vector(c, rng);
    return a;
}

} // namespace

TEST_CASE("linear extractor") {
    LinearExtractor id{0, MatrixD(3, 3), {0, 0, 0}, Nonlinearity::none};
    for (std::size_t i = 0; i < 3; ++i) id.weight(i, i) = 1.0;
    const std::vector<double> x{1.5, -2.0, 3.0};
    CHECK(extract(id, x) == x);

    LinearExtractor neg{0, MatrixD(2, 2, -1.0), {0, 0}, Nonlinearity::relu};
    CHECK(extract(neg, std::vector<double>{1.0, 2.0}) == std::vector<double>{0.0, 0.0});

    std::mt19937_64 rng(1);
    LinearExtractor e{2, random_matrix(4, 6, rng), random_vector(4, rng), Nonlinearity::none};
    const auto batch = random_matrix(10, 6, rng);
    const auto out = extract(e, batch);
    for (std::size_t n = 0; n < 10; ++n)
        for (std::size_t o = 0; o < 4; ++o) {
            double s = e.bias[o];
            for (std::size_t i = 0; i < 6; ++i) s += e.weight(o, i) * batch(n, i);
            CHECK(std::abs(out(n, o) - s) <= 1e-6);
        }
    CHECK_THROWS_AS(extract(e, std::vector<double>{1.0}), UsageError);
}

TEST_CASE("train_logistic with zero steps is uniform") {
    std::mt19937_64 rng(2);
    const auto x = random_matrix(6, 3, rng);
    const std::vector<std::uint32_t> y{0, 1, 2, 0, 1, 2};
    TrainConfig cfg;
    cfg.steps = 0;
    const auto m = train_logistic(x, y, cfg);
    for (double w : m.weight.values()) CHECK(w == 0.0);
    const auto p = predict_proba(m, x);
    for (float v : p.data.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("train_logistic separates two clusters") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    MatrixD x(20, 2);
    std::vector<std::uint32_t> y(20);
    for (std::size_t i = 0; i < 20; ++i) {
        y[i] = static_cast<std::uint32_t>(i % 2);
        x(i, 0) = (y[i] == 0 ? -1.5 : 1.5) + 0.4 * u(rng);  // margin at least 1 around x0 = 0
        x(i, 1) = u(rng);
    }
    TrainConfig cfg;
    cfg.lr = 0.5;
    cfg.steps = 500;
    const auto m = train_logistic(x, y, cfg);
    CHECK(accuracy(predict(m, x), y) == 1.0);
}

TEST_CASE("analytic gradient matches central differences") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        LogisticModel m{random_matrix(3, 4, rng), random_vector(3, rng)};
        const auto x = random_matrix(8, 4, rng);
        std::vector<std::uint32_t> y(8);
        for (auto& l : y) l = static_cast<std::uint32_t>(rng() % 3);
        const auto g = logistic_loss_gradient(m, x, y);
        CHECK(g.loss == doctest::Approx(logistic_loss(m, x, y)));
        const double h = 1e-4;
        double max_rel = 0.0;
        auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); };
        for (std::size_t i = 0; i < m.weight.values().size(); ++i) {
            auto plus = m;
            auto minus = m;
            plus.weight.values()[i] += h;
            minus.weight.values()[i] -= h;
            const double fd = (logistic_loss(plus, x, y) - logistic_loss(minus, x, y)) / (2 * h);
            max_rel = std::max(max_rel, rel(fd, g.grad_weight.values()[i]));
        }
        for (std::size_t c = 0; c < 3; ++c) {
            auto plus = m;
            auto minus = m;
            plus.bias[c] += h;
            minus.bias[c] -= h;
            const double fd = (logistic_loss(plus, x, y) - logistic_loss(minus, x, y)) / (2 * h);
            max_rel = std::max(max_rel, rel(fd, g.grad_bias[c]));
        }
        CHECK(max_rel < 1e-4);
    }
}

TEST_CASE("loss does not increase at a small learning rate") {
    std::mt19937_64 rng(5);
    const auto x = random_matrix(50, 5, rng);
    std::vector<std::uint32_t> y(50);
    for (auto& l : y) l = static_cast<std::uint32_t>(rng() % 3);
    double prev = std::log(3.0) + 1e-12;
    for (std::size_t steps = 0; steps <= 100; steps += 10) {
        TrainConfig cfg;
        cfg.lr = 0.01;
        cfg.steps = steps;
        cfg.num_classes = 3;
        const double loss = logistic_loss(train_logistic(x, y, cfg), x, y);
        CHECK(loss <= prev);
        prev = loss;
    }
}

TEST_CASE("train_logistic reports divergence") {
    MatrixD x(2, 1, std::vector<double>{1e300, -1e300});
    const std::vector<std::uint32_t> y{0, 1};
    TrainConfig cfg;
    cfg.lr = 1e300;
    cfg.steps = 10;
    try {
        train_logistic(x, y, cfg);
        FAIL("expected divergence");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("predict_proba softmax oracle and shift invariance") {
    std::mt19937_64 rng(6);
    LogisticModel m{random_matrix(4, 3, rng), random_vector(4, rng)};
    const auto x = random_matrix(7, 3, rng);
    const auto p = predict_proba(m, x);
    CHECK(p.kind == ProbKind::categorical);
    for (std::size_t i = 0; i < 7; ++i) {
        std::vector<double> z(4);
        double total = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            z[c] = m.bias[c];
            for (std::size_t k = 0; k < 3; ++k) z[c] += m.weight(c, k) * x(i, k);
            total += std::exp(z[c]);
        }
        double row = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(std::abs(p.data(i, c) - std::exp(z[c]) / total) <= 1e-6);
            row += p.data(i, c);
        }
        CHECK(std::abs(row - 1.0) <= 1e-6);
    }
    auto shifted = m;
    for (double& b : shifted.bias) b += 37.0;
    const auto q = predict_proba(shifted, x);
    for (std::size_t i = 0; i < p.data.values().size(); ++i)
        CHECK(std::abs(q.data.values()[i] - p.data.values()[i]) <= 1e-6);
}

TEST_CASE("group_norm normalizes each group") {
    std::mt19937_64 rng(7);
    FeatureMap x(random_matrix(8, 50, rng, 3.0));
    for (std::size_t s = 0; s < 50; ++s) x.data(5, s) += 10.0;
    const std::vector<double> ones(8, 1.0), zeros(8, 0.0);
    const auto y = group_norm(x, 2, ones, zeros);
    for (std::size_t g = 0; g < 2; ++g) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t c = 4 * g; c < 4 * g + 4; ++c)
            for (std::size_t s = 0; s < 50; ++s) sum += y.data(c, s);
        const double mean = sum / 200.0;
        for (std::size_t c = 4 * g; c < 4 * g + 4; ++c)
            for (std::size_t s = 0; s < 50; ++s) sq += (y.data(c, s) - mean) * (y.data(c, s) - mean);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(sq / 200.0 - 1.0) < 1e-4);
    }

    FeatureMap shifted = x;
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t s = 0; s < 50; ++s) shifted.data(c, s) += 3.25;
    const auto ys = group_norm(shifted, 2, ones, zeros);
    for (std::size_t i = 0; i < y.data.values().size(); ++i)
        CHECK(std::abs(ys.data.values()[i] - y.data.values()[i]) <= 1e-5);

    CHECK_THROWS_AS(group_norm(x, 3, ones, zeros), UsageError);
}

TEST_CASE("group_norm on constant input returns beta") {
    FeatureMap x(MatrixD(4, 6, 2.5));
    const std::vector<double> ones(4, 1.0), beta{0.5, -1.0, 2.0, 3.0};
    const auto y = group_norm(x, 2, ones, beta);
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t s = 0; s < 6; ++s) CHECK(y.data(c, s) == beta[c]);
}

TEST_CASE("group_norm equals the two-pass oracle") {
    std::mt19937_64 rng(8);
    const auto x = random_matrix(8, 10, rng, 2.0);
    const auto gamma = random_vector(8, rng);
    const auto beta = random_vector(8, rng);
    const auto y = group_norm(FeatureMap(x), 2, gamma, beta);
    const auto oracle = group_norm_oracle(x, 2, gamma, beta);
    for (std::size_t i = 0; i < oracle.values().size(); ++i) CHECK(std::abs(y.data.values()[i] - oracle.values()[i]) <= 1e-6);
}

TEST_CASE("zero-initialized adapter is exactly the identity") {
    std::mt19937_64 rng(9);
    for (std::size_t c : {4, 8, 64}) {
        const auto a = make_adapter(c);
        CHECK(a.bottleneck == c / 2);
        FeatureMap x(random_matrix(c, 5, rng));
        CHECK(adapter_forward(x, a) == x);
    }
    CHECK_THROWS_AS(adapter_forward(FeatureMap(MatrixD(3, 2)), make_adapter(4)), UsageError);
}

TEST_CASE("adapter forward equals per-site composition") {
    std::mt19937_64 rng(10);
    const std::size_t c = 4, k = 2, groups = 2;
    const auto a = random_adapter(c, k, groups, rng);
    const auto x = random_matrix(c, 3, rng);
    const auto y = adapter_forward(FeatureMap(x), a);

    // Group statistics span all sites, so compute the normalized tensors first,
    // then apply every per-site step by hand.
    MatrixD n1 = group_norm_oracle(x, groups, a.norm1_gamma, a.norm1_beta);
    MatrixD h1(k, 3);
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t j = 0; j < k; ++j) {
            double v = a.conv1_bias[j];
            for (std::size_t i = 0; i < c; ++i) v += a.conv1_weight(j, i) * std::max(0.0, n1(i, s));
            h1(j, s) = v;
        }
    MatrixD n2 = group_norm_oracle(h1, groups, a.norm2_gamma, a.norm2_beta);
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t i = 0; i < c; ++i) {
            double v = a.conv2_bias[i];
            for (std::size_t j = 0; j < k; ++j) v += a.conv2_weight(i, j) * std::max(0.0, n2(j, s));
            CHECK(std::abs(y.data(i, s) - (x(i, s) + v)) <= 1e-5);
        }
}

TEST_CASE("adapted block forward") {
    std::mt19937_64 rng(11);
    const FeatureMap x(random_matrix(8, 4, rng));
    const auto zero = make_adapter(8);
    CHECK(adapted_block_forward(x, [](const FeatureMap& v) { return v; }, zero) == x);
    const auto doubled = adapted_block_forward(x, [](const FeatureMap& v) {
        FeatureMap o = v;
        for (auto& e : o.data.values()) e *= 2.0;
        return o;
    }, zero);
    for (std::size_t i = 0; i < x.data.values().size(); ++i) CHECK(doubled.data.values()[i] == 2.0 * x.data.values()[i]);

    const auto a = random_adapter(8, 4, 4, rng);
    const auto w = random_matrix(8, 8, rng);
    const BlockFn block = [&](const FeatureMap& v) { return conv1x1(v, w, std::vector<double>(8, 0.0)); };
    const auto got = adapted_block_forward(x, block, a);
    const auto inner = adapter_forward(x, a);
    for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t o = 0; o < 8; ++o) {
            double v = 0.0;
            for (std::size_t i = 0; i < 8; ++i) v += w(o, i) * inner.data(i, s);
            CHECK(std::abs(got.data(o, s) - v) <= 1e-9);
        }
}

TEST_CASE("default group count") {
    CHECK(default_groups(64, 32) == 32);
    CHECK(default_groups(8, 4) == 4);
    CHECK(default_groups(1024, 512) == 32);
    CHECK(default_groups(12, 6) == 6);
    CHECK(default_groups(48, 20) == 4);
    CHECK_THROWS_AS(make_adapter(8, 4, 3), UsageError);
}

TEST_CASE("parameter counts") {
    for (std::uint64_t c : {8u, 64u, 256u, 1024u}) {
        CHECK(adapter_conv_weight_count(c, c / 2) == c * c);
        CHECK(adapter_param_count(c, c / 2) == 2 * c + c * (c / 2) + c / 2 + c + c * c / 2 + c);
    }
    const auto r = count_params(kResNet50AdapterChannels, BottleneckRule{});
    CHECK(r.backbone_params == resnet50_v2_backbone_params());
    CHECK(r.backbone_params >= 23'000'000);
    CHECK(r.backbone_params <= 27'000'000);
    CHECK(r.ratio >= 0.05);
    CHECK(r.ratio <= 0.07);
    CHECK(r.ratio == static_cast<double>(r.per_adapter_params) / static_cast<double>(r.backbone_params));

    std::uint64_t expected = 0;
    for (std::uint64_t c : {64u, 256u, 512u, 1024u}) expected += adapter_param_count(c, c / 2);
    CHECK(r.per_adapter_params == expected);

    const auto text = format_param_report(r);
    CHECK(text.find("backbone " + std::to_string(r.backbone_params)) != std::string::npos);

    CHECK(BottleneckRule::parse("fixed:16")(1024) == 16);
    CHECK(BottleneckRule::parse("half")(64) == 32);
    CHECK_THROWS_AS(BottleneckRule::parse("third"), UsageError);
}
