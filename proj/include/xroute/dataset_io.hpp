#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "xroute/hierarchy.hpp"
#include "xroute/matrix.hpp"

namespace xroute {

/// Features produced by one expert for a set of examples (N x d, f32).
struct EmbeddingMatrix {
    ExpertId expert_id = 0;
    std::vector<ExampleId> example_ids;
    MatrixF data;
};

/// Downstream task: example ids with class labels in [0, num_classes).
struct TaskDataset {
    std::vector<ExampleId> example_ids;
    std::vector<std::uint32_t> class_labels;
    std::uint32_t num_classes = 0;

    std::size_t size() const { return example_ids.size(); }
};

enum class ProbKind : std::uint8_t {
    categorical = 0,  // rows are distributions
    multilabel = 1,   // independent Bernoulli per column
};

struct ProbMatrix {
    ProbKind kind = ProbKind::categorical;
    MatrixF data;
};

inline constexpr std::uint32_t kFormatVersion = 1;

/// Throws ValidationError unless the matrix satisfies the embedding invariants.
void validate(const EmbeddingMatrix& m);
void validate(const TaskDataset& t);
void validate(const ProbMatrix& p);

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
/// The expert id is not stored in the file; callers pass it explicitly.
EmbeddingMatrix read_embeddings(const std::filesystem::path& path, ExpertId expert_id);
/// Reads a file named like "<prefix><digits>.xprt"; the trailing digits of
/// the stem are the expert id.
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);
/// Every *.xprt file in a directory, ordered by expert id.
std::vector<EmbeddingMatrix> read_embeddings_dir(const std::filesystem::path& dir);
ExpertId expert_id_from_filename(const std::filesystem::path& path);

void write_task(const TaskDataset& t, const std::filesystem::path& path);
TaskDataset read_task(const std::filesystem::path& path);

void write_probs(const ProbMatrix& p, const std::filesystem::path& path);
ProbMatrix read_probs(const std::filesystem::path& path);

/// In-memory encoders, used by the file functions and by checksum tests.
std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes, ExpertId expert_id);
std::vector<std::uint8_t> encode_task(const TaskDataset& t);
TaskDataset decode_task(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_probs(const ProbMatrix& p);
ProbMatrix decode_probs(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

} // namespace xroute
