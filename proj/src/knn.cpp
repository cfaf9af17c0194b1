#include "xroute/knn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <unordered_map>

#include "xroute/error.hpp"
#include "xroute/parallel.hpp"

namespace xroute {

namespace {

constexpr std::size_t kQueryTile = 32;
constexpr std::size_t kCandidateTile = 128;
constexpr std::size_t kDepthTile = 256;

MatrixD widen(const MatrixF& x) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            if (!std::isfinite(x(r, c))) {
                throw ValidationError("non-finite feature at row " + std::to_string(r) + ", col " + std::to_string(c));
            }
        }
    }
    return matrix_cast<double>(x);
}

std::vector<double> row_norms(const MatrixD& x) {
    std::vector<double> norms(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (double v : x.row(i)) s += v * v;
        norms[i] = s;
    }
    return norms;
}

/// out[(i - i0) * n + j] = |x_i|^2 + |x_j|^2 - 2 x_i.x_j for i in [i0, i1),
/// all j. Dot products accumulate over depth tiles in a fixed order.
void expanded_rows(const MatrixD& x, const std::vector<double>& norms, std::size_t i0, std::size_t i1,
                   std::vector<double>& out) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    out.assign((i1 - i0) * n, 0.0);
    for (std::size_t j0 = 0; j0 < n; j0 += kCandidateTile) {
        const std::size_t j1 = std::min(n, j0 + kCandidateTile);
        for (std::size_t k0 = 0; k0 < d; k0 += kDepthTile) {
            const std::size_t k1 = std::min(d, k0 + kDepthTile);
            for (std::size_t i = i0; i < i1; ++i) {
                const double* a = x.row(i).data();
                double* dst = out.data() + (i - i0) * n;
                for (std::size_t j = j0; j < j1; ++j) {
                    const double* b = x.row(j).data();
                    double s = 0.0;
                    for (std::size_t k = k0; k < k1; ++k) s += a[k] * b[k];
                    dst[j] += s;
                }
            }
        }
    }
    for (std::size_t i = i0; i < i1; ++i) {
        double* dst = out.data() + (i - i0) * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] = norms[i] + norms[j] - 2.0 * dst[j];
    }
}

double direct_sq_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double diff = a[k] - b[k];
        s += diff * diff;
    }
    return s;
}

} // namespace

MatrixD pairwise_sq_distances(const MatrixF& xf) {
    const MatrixD x = widen(xf);
    const auto norms = row_norms(x);
    const std::size_t n = x.rows();
    MatrixD out(n, n);
    const std::size_t tiles = (n + kQueryTile - 1) / kQueryTile;
    parallel_for(0, tiles, [&](std::size_t t) {
        const std::size_t i0 = t * kQueryTile;
        const std::size_t i1 = std::min(n, i0 + kQueryTile);
        std::vector<double> buf;
        expanded_rows(x, norms, i0, i1, buf);
        for (std::size_t i = i0; i < i1; ++i) {
            for (std::size_t j = 0; j < n; ++j) out(i, j) = i == j ? 0.0 : std::max(0.0, buf[(i - i0) * n + j]);
        }
    });
    return out;
}

LoocvResult loocv_1nn_accuracy(const MatrixF& xf, std::span<const std::uint32_t> labels) {
    const std::size_t n = xf.rows();
    if (n < 2) throw UsageError("leave-one-out 1-NN needs at least 2 examples, got " + std::to_string(n));
    if (labels.size() != n) {
        throw UsageError("dimension mismatch: " + std::to_string(n) + " rows but " + std::to_string(labels.size()) +
                         " labels");
    }
    const MatrixD x = widen(xf);
    const auto norms = row_norms(x);
    const double max_norm = *std::max_element(norms.begin(), norms.end());
    // Bound on |expanded - direct| for one pair, with a factor 2 of slack.
    const double unit = std::numeric_limits<double>::epsilon();
    const double band_scale = 8.0 * static_cast<double>(x.cols() + 2) * unit;

    LoocvResult result;
    result.total = n;
    result.nn_index.assign(n, 0);

    const std::size_t tiles = (n + kQueryTile - 1) / kQueryTile;
    parallel_for(0, tiles, [&](std::size_t t) {
        const std::size_t i0 = t * kQueryTile;
        const std::size_t i1 = std::min(n, i0 + kQueryTile);
        std::vector<double> buf;
        expanded_rows(x, norms, i0, i1, buf);
        for (std::size_t i = i0; i < i1; ++i) {
            const double* row = buf.data() + (i - i0) * n;
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i && row[j] < best) best = row[j];
            }
            const double cutoff = best + 2.0 * band_scale * (norms[i] + max_norm);
            double exact_best = std::numeric_limits<double>::infinity();
            std::size_t arg = n;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i || row[j] > cutoff) continue;
                const double dist = direct_sq_distance(x.row(i), x.row(j));
                if (dist < exact_best) {
                    exact_best = dist;
                    arg = j;
                }
            }
            result.nn_index[i] = arg;
        }
    });

    for (std::size_t i = 0; i < n; ++i) {
        if (labels[result.nn_index[i]] == labels[i]) ++result.correct;
    }
    result.accuracy = static_cast<double>(result.correct) / static_cast<double>(n);
    return result;
}

MatrixF align_to_task(const TaskDataset& task, const EmbeddingMatrix& m) {
    if (m.example_ids.size() != task.size()) {
        throw ValidationError("expert " + std::to_string(m.expert_id) + " embeds " +
                              std::to_string(m.example_ids.size()) + " examples, task has " +
                              std::to_string(task.size()));
    }
    std::unordered_map<ExampleId, std::size_t> row_of;
    row_of.reserve(m.example_ids.size());
    for (std::size_t r = 0; r < m.example_ids.size(); ++r) row_of.emplace(m.example_ids[r], r);
    MatrixF out(task.size(), m.data.cols());
    for (std::size_t i = 0; i < task.size(); ++i) {
        auto it = row_of.find(task.example_ids[i]);
        if (it == row_of.end()) {
            throw ValidationError("expert " + std::to_string(m.expert_id) + " has no embedding for task example " +
                                  std::to_string(task.example_ids[i]));
        }
        std::copy(m.data.row(it->second).begin(), m.data.row(it->second).end(), out.row(i).begin());
    }
    return out;
}

SelectionReport knn_select(const TaskDataset& task, const std::vector<EmbeddingMatrix>& embeddings) {
    if (embeddings.empty()) throw UsageError("knn_select needs at least one expert");
    std::set<ExpertId> ids;
    for (const auto& m : embeddings) {
        if (!ids.insert(m.expert_id).second) {
            throw ValidationError("expert " + std::to_string(m.expert_id) + " supplied twice");
        }
    }
    std::map<ExpertId, double> scores;
    for (const auto& m : embeddings) {
        const MatrixF aligned = align_to_task(task, m);
        scores[m.expert_id] = loocv_1nn_accuracy(aligned, task.class_labels).accuracy;
    }
    return make_report(SelectionMethod::knn, Direction::maximize, std::move(scores));
}

} // namespace xroute
