#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xroute/dataset_io.hpp"
#include "xroute/matrix.hpp"
#include "xroute/selection.hpp"

namespace xroute {

struct LoocvResult {
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
    std::vector<std::size_t> nn_index;
};

/// Squared Euclidean distances between all rows of x, computed through the
/// |a|^2 + |b|^2 - 2 a.b expansion with blocked dot products.
MatrixD pairwise_sq_distances(const MatrixF& x);

/// Leave-one-out 1-NN accuracy under Euclidean distance.
///
/// For every row i the nearest other row is located with the blocked
/// expansion, and every candidate whose expanded distance lies inside the
/// rounding-error band of the minimum is re-scored with the direct sum of
/// squared differences. The reported neighbour is therefore the exact
/// argmin of sum_k (x_ik - x_jk)^2 (accumulated in double, ascending k),
/// with ties going to the lowest j.
LoocvResult loocv_1nn_accuracy(const MatrixF& x, std::span<const std::uint32_t> labels);

/// Performance-proxy selection: LOOCV 1-NN accuracy of each expert's
/// embedding of the task; rows are matched to the task by example id.
SelectionReport knn_select(const TaskDataset& task, const std::vector<EmbeddingMatrix>& embeddings);

/// Embedding rows reordered to follow task.example_ids. Throws
/// ValidationError when the id sets differ.
MatrixF align_to_task(const TaskDataset& task, const EmbeddingMatrix& m);

} // namespace xroute
