#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "xroute/dataset_io.hpp"
#include "xroute/hierarchy.hpp"
#include "xroute/matrix.hpp"

namespace xroute {

// ---------------------------------------------------------------------------
// Linear feature extractors

enum class Nonlinearity { none, relu };

struct LinearExtractor {
    ExpertId expert_id = 0;
    MatrixD weight;  // d_out x d_in
    std::vector<double> bias;
    Nonlinearity nonlinearity = Nonlinearity::none;

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }
};

std::vector<double> extract(const LinearExtractor& e, std::span<const double> x);
/// Row-wise extraction of an N x d_in batch.
MatrixD extract(const LinearExtractor& e, const MatrixD& x);

// ---------------------------------------------------------------------------
// Softmax regression

struct LogisticModel {
    MatrixD weight;  // C x d
    std::vector<double> bias;

    std::size_t num_classes() const { return weight.rows(); }
    std::size_t dim() const { return weight.cols(); }
};

LogisticModel zero_logistic(std::size_t num_classes, std::size_t dim);

/// Mean softmax cross-entropy and its gradient with respect to weight and bias.
struct LossGradient {
    double loss = 0.0;
    MatrixD grad_weight;
    std::vector<double> grad_bias;
};

LossGradient logistic_loss_gradient(const LogisticModel& m, const MatrixD& x,
                                    std::span<const std::uint32_t> y);
double logistic_loss(const LogisticModel& m, const MatrixD& x, std::span<const std::uint32_t> y);

struct TrainConfig {
    double lr = 0.5;
    std::size_t steps = 200;
    std::uint64_t seed = 0;  // full-batch descent does not consume it
    /// Number of classes; 0 infers max(y) + 1.
    std::size_t num_classes = 0;
};

/// Full-batch gradient descent from zero weights. Throws NumericError naming
/// the step if the loss stops being finite.
LogisticModel train_logistic(const MatrixD& x, std::span<const std::uint32_t> y, const TrainConfig& cfg);

MatrixD logits(const LogisticModel& m, const MatrixD& x);
/// Row-wise softmax, returned as a categorical probability matrix.
ProbMatrix predict_proba(const LogisticModel& m, const MatrixD& x);
std::vector<std::uint32_t> predict(const LogisticModel& m, const MatrixD& x);
double accuracy(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> truth);

// ---------------------------------------------------------------------------
// Adapter kernel

/// Activations entering a block: channels x sites (flattened spatial grid).
struct FeatureMap {
    MatrixD data;

    FeatureMap() = default;
    FeatureMap(std::size_t channels, std::size_t sites) : data(channels, sites) {}
    explicit FeatureMap(MatrixD d) : data(std::move(d)) {}

    std::size_t channels() const { return data.rows(); }
    std::size_t sites() const { return data.cols(); }
    bool operator==(const FeatureMap&) const = default;
};

inline constexpr double kGroupNormEpsilon = 1e-5;

FeatureMap group_norm(const FeatureMap& x, std::size_t groups, std::span<const double> gamma,
                      std::span<const double> beta, double eps = kGroupNormEpsilon);

/// 1x1 convolution: the same channel mix applied at every site.
FeatureMap conv1x1(const FeatureMap& x, const MatrixD& weight, std::span<const double> bias);
FeatureMap relu(const FeatureMap& x);

struct AdapterParams {
    std::size_t in_channels = 0;
    std::size_t bottleneck = 0;
    std::size_t groups = 1;
    std::vector<double> norm1_gamma, norm1_beta;  // length c
    MatrixD conv1_weight;                         // k x c
    std::vector<double> conv1_bias;               // k
    std::vector<double> norm2_gamma, norm2_beta;  // length k
    MatrixD conv2_weight;                         // c x k
    std::vector<double> conv2_bias;               // c
};

/// 32 if it divides both widths, otherwise the largest common divisor <= 32.
std::size_t default_groups(std::size_t channels, std::size_t bottleneck);

/// Unit norms, zero convolutions: the adapter starts as the identity map.
AdapterParams make_adapter(std::size_t channels, std::size_t bottleneck = 0, std::size_t groups = 0);

/// x + C2(ReLU(N2(C1(ReLU(N1(x)))))).
FeatureMap adapter_forward(const FeatureMap& x, const AdapterParams& a);

using BlockFn = std::function<FeatureMap(const FeatureMap&)>;

/// block(x + adapter(x)): the adapter rewrites the input of a backbone block.
FeatureMap adapted_block_forward(const FeatureMap& x, const BlockFn& block, const AdapterParams& a);

// ---------------------------------------------------------------------------
// Parameter accounting

struct BottleneckRule {
    enum class Kind { half, fixed } kind = Kind::half;
    std::size_t fixed = 0;

    std::size_t operator()(std::size_t channels) const;
    static BottleneckRule parse(const std::string& text);  // "half" | "fixed:<k>"
};

std::uint64_t adapter_param_count(std::uint64_t channels, std::uint64_t bottleneck);
/// The c*k + k*c weight terms alone.
std::uint64_t adapter_conv_weight_count(std::uint64_t channels, std::uint64_t bottleneck);

/// Pre-activation ResNet50 (v2) trunk without the classification head.
std::uint64_t resnet50_v2_backbone_params();

inline const std::vector<std::size_t> kResNet50AdapterChannels{64, 256, 512, 1024};

struct ParamReport {
    std::uint64_t backbone_params = 0;
    std::uint64_t per_adapter_params = 0;
    double ratio = 0.0;
};

ParamReport count_params(std::span<const std::size_t> adapter_channels, const BottleneckRule& rule);
/// `backbone <int>`, `adapter <int>`, `ratio <4 decimals>`.
std::string format_param_report(const ParamReport& r);

} // namespace xroute
