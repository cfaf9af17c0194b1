#include "xroute/toy_models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "text_util.hpp"
#include "xroute/error.hpp"

namespace xroute {

// ---------------------------------------------------------------------------
// extractors

std::vector<double> extract(const LinearExtractor& e, std::span<const double> x) {
    if (x.size() != e.in_dim()) {
        throw UsageError("extractor expects " + std::to_string(e.in_dim()) + " inputs, got " + std::to_string(x.size()));
    }
    if (e.bias.size() != e.out_dim()) throw UsageError("extractor bias length does not match its output width");
    std::vector<double> out(e.out_dim());
    for (std::size_t r = 0; r < e.out_dim(); ++r) {
        double s = e.bias[r];
        const auto w = e.weight.row(r);
        for (std::size_t c = 0; c < x.size(); ++c) s += w[c] * x[c];
        out[r] = e.nonlinearity == Nonlinearity::relu ? std::max(0.0, s) : s;
    }
    return out;
}

MatrixD extract(const LinearExtractor& e, const MatrixD& x) {
    if (x.cols() != e.in_dim()) {
        throw UsageError("extractor expects " + std::to_string(e.in_dim()) + " inputs, got " + std::to_string(x.cols()));
    }
    MatrixD out(x.rows(), e.out_dim());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto y = extract(e, x.row(i));
        std::copy(y.begin(), y.end(), out.row(i).begin());
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax regression

LogisticModel zero_logistic(std::size_t num_classes, std::size_t dim) {
    return {MatrixD(num_classes, dim), std::vector<double>(num_classes, 0.0)};
}

MatrixD logits(const LogisticModel& m, const MatrixD& x) {
    if (x.cols() != m.dim()) {
        throw UsageError("model expects " + std::to_string(m.dim()) + " features, got " + std::to_string(x.cols()));
    }
    MatrixD z(x.rows(), m.num_classes());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto xi = x.row(i);
        for (std::size_t k = 0; k < m.num_classes(); ++k) {
            double s = m.bias[k];
            const auto w = m.weight.row(k);
            for (std::size_t j = 0; j < xi.size(); ++j) s += w[j] * xi[j];
            z(i, k) = s;
        }
    }
    return z;
}

namespace {

void softmax_inplace(std::span<double> row) {
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
        v = std::exp(v - peak);
        total += v;
    }
    for (double& v : row) v /= total;
}

void check_labels(const MatrixD& x, std::span<const std::uint32_t> y, std::size_t classes) {
    if (x.rows() != y.size()) {
        throw UsageError(std::to_string(x.rows()) + " rows but " + std::to_string(y.size()) + " labels");
    }
    for (auto label : y) {
        if (label >= classes) throw ValidationError("label " + std::to_string(label) + " outside the class range");
    }
}

} // namespace

LossGradient logistic_loss_gradient(const LogisticModel& m, const MatrixD& x, std::span<const std::uint32_t> y) {
    check_labels(x, y, m.num_classes());
    if (x.rows() == 0) throw UsageError("cannot evaluate the loss on an empty batch");
    MatrixD p = logits(m, x);
    LossGradient g{0.0, MatrixD(m.num_classes(), m.dim()), std::vector<double>(m.num_classes(), 0.0)};
    const double inv_n = 1.0 / static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto row = p.row(i);
        const double peak = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double v : row) total += std::exp(v - peak);
        g.loss += (peak + std::log(total) - row[y[i]]) * inv_n;
        softmax_inplace(row);
        row[y[i]] -= 1.0;
        const auto xi = x.row(i);
        for (std::size_t k = 0; k < m.num_classes(); ++k) {
            const double coeff = row[k] * inv_n;
            g.grad_bias[k] += coeff;
            auto gw = g.grad_weight.row(k);
            for (std::size_t j = 0; j < xi.size(); ++j) gw[j] += coeff * xi[j];
        }
    }
    return g;
}

double logistic_loss(const LogisticModel& m, const MatrixD& x, std::span<const std::uint32_t> y) {
    check_labels(x, y, m.num_classes());
    const MatrixD z = logits(m, x);
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto row = z.row(i);
        const double peak = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double v : row) total += std::exp(v - peak);
        loss += peak + std::log(total) - row[y[i]];
    }
    return loss / static_cast<double>(x.rows());
}

LogisticModel train_logistic(const MatrixD& x, std::span<const std::uint32_t> y, const TrainConfig& cfg) {
    if (x.rows() == 0) throw UsageError("train_logistic needs at least one example");
    if (!(cfg.lr > 0.0)) throw UsageError("learning rate must be positive");
    std::size_t classes = cfg.num_classes;
    if (classes == 0 && !y.empty()) classes = *std::max_element(y.begin(), y.end()) + 1;
    if (classes < 2) throw UsageError("train_logistic needs at least 2 classes");
    check_labels(x, y, classes);

    LogisticModel m = zero_logistic(classes, x.cols());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto g = logistic_loss_gradient(m, x, y);
        if (!std::isfinite(g.loss)) {
            throw NumericError("logistic training diverged at step " + std::to_string(step));
        }
        auto w = m.weight.values();
        const auto gw = g.grad_weight.values();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.lr * gw[i];
        for (std::size_t k = 0; k < classes; ++k) m.bias[k] -= cfg.lr * g.grad_bias[k];
    }
    for (double v : m.weight.values()) {
        if (!std::isfinite(v)) throw NumericError("logistic training diverged at step " + std::to_string(cfg.steps));
    }
    return m;
}

ProbMatrix predict_proba(const LogisticModel& m, const MatrixD& x) {
    MatrixD z = logits(m, x);
    ProbMatrix p;
    p.kind = ProbKind::categorical;
    p.data = MatrixF(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        auto row = z.row(i);
        softmax_inplace(row);
        for (std::size_t k = 0; k < row.size(); ++k) p.data(i, k) = static_cast<float>(row[k]);
    }
    return p;
}

std::vector<std::uint32_t> predict(const LogisticModel& m, const MatrixD& x) {
    const MatrixD z = logits(m, x);
    std::vector<std::uint32_t> out(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const auto row = z.row(i);
        out[i] = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

double accuracy(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> truth) {
    if (predicted.size() != truth.size() || truth.empty()) {
        throw UsageError("accuracy needs equal-length, non-empty label vectors");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// adapter kernel

FeatureMap group_norm(const FeatureMap& x, std::size_t groups, std::span<const double> gamma,
                      std::span<const double> beta, double eps) {
    const std::size_t c = x.channels();
    const std::size_t s = x.sites();
    if (groups == 0 || c % groups != 0) {
        throw UsageError(std::to_string(c) + " channels are not divisible into " + std::to_string(groups) + " groups");
    }
    if (gamma.size() != c || beta.size() != c) throw UsageError("group_norm scale/shift length must equal channels");
    const std::size_t per_group = c / groups;
    FeatureMap out(c, s);
    const double count = static_cast<double>(per_group * s);
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t c0 = g * per_group;
        double mean = 0.0;
        for (std::size_t ch = c0; ch < c0 + per_group; ++ch)
            for (double v : x.data.row(ch)) mean += v;
        mean /= count;
        double var = 0.0;
        for (std::size_t ch = c0; ch < c0 + per_group; ++ch)
            for (double v : x.data.row(ch)) var += (v - mean) * (v - mean);
        var /= count;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t ch = c0; ch < c0 + per_group; ++ch) {
            for (std::size_t j = 0; j < s; ++j) out.data(ch, j) = (x.data(ch, j) - mean) * inv * gamma[ch] + beta[ch];
        }
    }
    return out;
}

FeatureMap conv1x1(const FeatureMap& x, const MatrixD& weight, std::span<const double> bias) {
    if (weight.cols() != x.channels() || bias.size() != weight.rows()) {
        throw UsageError("1x1 convolution shape mismatch: weight " + std::to_string(weight.rows()) + "x" +
                         std::to_string(weight.cols()) + " on " + std::to_string(x.channels()) + " channels");
    }
    FeatureMap out(weight.rows(), x.sites());
    for (std::size_t o = 0; o < weight.rows(); ++o) {
        auto dst = out.data.row(o);
        std::fill(dst.begin(), dst.end(), bias[o]);
        for (std::size_t i = 0; i < weight.cols(); ++i) {
            const double w = weight(o, i);
            const auto src = x.data.row(i);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += w * src[j];
        }
    }
    return out;
}

FeatureMap relu(const FeatureMap& x) {
    FeatureMap out = x;
    for (double& v : out.data.values()) v = std::max(0.0, v);
    return out;
}

std::size_t default_groups(std::size_t channels, std::size_t bottleneck) {
    const std::size_t common = std::gcd(channels, bottleneck);
    for (std::size_t g = std::min<std::size_t>(32, common); g > 1; --g) {
        if (common % g == 0) return g;
    }
    return 1;
}

AdapterParams make_adapter(std::size_t channels, std::size_t bottleneck, std::size_t groups) {
    if (channels == 0) throw UsageError("adapter needs at least one channel");
    if (bottleneck == 0) bottleneck = std::max<std::size_t>(1, channels / 2);
    if (groups == 0) groups = default_groups(channels, bottleneck);
    if (channels % groups != 0 || bottleneck % groups != 0) {
        throw UsageError("adapter widths " + std::to_string(channels) + "/" + std::to_string(bottleneck) +
                         " are not divisible by " + std::to_string(groups) + " groups");
    }
    AdapterParams a;
    a.in_channels = channels;
    a.bottleneck = bottleneck;
    a.groups = groups;
    a.norm1_gamma.assign(channels, 1.0);
    a.norm1_beta.assign(channels, 0.0);
    a.conv1_weight = MatrixD(bottleneck, channels);
    a.conv1_bias.assign(bottleneck, 0.0);
    a.norm2_gamma.assign(bottleneck, 1.0);
    a.norm2_beta.assign(bottleneck, 0.0);
    a.conv2_weight = MatrixD(channels, bottleneck);
    a.conv2_bias.assign(channels, 0.0);
    return a;
}

FeatureMap adapter_forward(const FeatureMap& x, const AdapterParams& a) {
    if (x.channels() != a.in_channels) {
        throw UsageError("adapter built for " + std::to_string(a.in_channels) + " channels got " +
                         std::to_string(x.channels()));
    }
    const FeatureMap h1 = conv1x1(relu(group_norm(x, a.groups, a.norm1_gamma, a.norm1_beta)), a.conv1_weight,
                                  a.conv1_bias);
    const FeatureMap h2 = conv1x1(relu(group_norm(h1, a.groups, a.norm2_gamma, a.norm2_beta)), a.conv2_weight,
                                  a.conv2_bias);
    FeatureMap out = x;
    auto dst = out.data.values();
    const auto delta = h2.data.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += delta[i];
    return out;
}

FeatureMap adapted_block_forward(const FeatureMap& x, const BlockFn& block, const AdapterParams& a) {
    return block(adapter_forward(x, a));
}

// ---------------------------------------------------------------------------
// parameter accounting

std::size_t BottleneckRule::operator()(std::size_t channels) const {
    return kind == Kind::half ? std::max<std::size_t>(1, channels / 2) : fixed;
}

BottleneckRule BottleneckRule::parse(const std::string& text) {
    if (text == "half") return {};
    if (text.rfind("fixed:", 0) == 0) {
        const auto k = detail::parse_int<std::size_t>(std::string_view(text).substr(6), "bottleneck");
        if (k == 0) throw UsageError("fixed bottleneck must be positive");
        return {Kind::fixed, k};
    }
    throw UsageError("bottleneck must be 'half' or 'fixed:<k>', got '" + text + "'");
}

std::uint64_t adapter_conv_weight_count(std::uint64_t c, std::uint64_t k) { return c * k + k * c; }

std::uint64_t adapter_param_count(std::uint64_t c, std::uint64_t k) {
    return 2 * c                 // norm1 scale + shift
           + c * k + k           // conv1
           + 2 * k               // norm2
           + k * c + c;          // conv2
}

std::uint64_t resnet50_v2_backbone_params() {
    struct Stage {
        std::uint64_t units, width, out;
    };
    constexpr Stage stages[] = {{3, 64, 256}, {4, 128, 512}, {6, 256, 1024}, {3, 512, 2048}};

    std::uint64_t total = 7 * 7 * 3 * 64;  // root convolution, no bias
    std::uint64_t in = 64;
    for (const auto& st : stages) {
        for (std::uint64_t u = 0; u < st.units; ++u) {
            total += 2 * in + in * st.width;                    // pre-act norm, 1x1
            total += 2 * st.width + 9 * st.width * st.width;    // norm, 3x3
            total += 2 * st.width + st.width * st.out;          // norm, 1x1
            if (u == 0) total += in * st.out;                   // projection shortcut
            in = st.out;
        }
    }
    total += 2 * in;  // final pre-head norm
    return total;
}

ParamReport count_params(std::span<const std::size_t> adapter_channels, const BottleneckRule& rule) {
    ParamReport r;
    r.backbone_params = resnet50_v2_backbone_params();
    for (std::size_t c : adapter_channels) {
        if (c == 0) throw UsageError("adapter channel counts must be positive");
        r.per_adapter_params += adapter_param_count(c, rule(c));
    }
    r.ratio = static_cast<double>(r.per_adapter_params) / static_cast<double>(r.backbone_params);
    return r;
}

std::string format_param_report(const ParamReport& r) {
    return "backbone " + std::to_string(r.backbone_params) + "\nadapter " + std::to_string(r.per_adapter_params) +
           "\nratio " + detail::format_f(r.ratio, 4) + "\n";
}

} // namespace xroute
