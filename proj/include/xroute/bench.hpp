#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "xroute/dataset_io.hpp"
#include "xroute/hierarchy.hpp"
#include "xroute/matrix.hpp"
#include "xroute/selection.hpp"
#include "xroute/toy_models.hpp"

namespace xroute {

// ---------------------------------------------------------------------------
// Synthetic world

enum class WorldMode {
    semantic,       // experts fitted on hierarchy slices
    random_slices,  // experts fitted on uniformly random subsets of equal size
};

std::string to_string(WorldMode m);
WorldMode parse_world_mode(const std::string& text);

struct WorldConfig {
    std::uint64_t seed = 42;
    std::size_t experts = 16;
    std::size_t d_raw = 64;
    std::size_t d_embed = 8;
    std::size_t classes = 4;
    std::size_t tasks = 50;
    /// Within-class spread of downstream inputs (per-coordinate std).
    double noise = 1.0;
    WorldMode mode = WorldMode::semantic;

    std::size_t n_train = 1000;
    std::size_t n_test = 200;

    // Upstream corpus.
    std::size_t leaves_per_domain = 8;
    std::size_t upstream_per_expert = 200;
    double cross_label_prob = 0.1;
    double domain_scale = 4.0;
    double leaf_scale = 3.0;

    // Downstream tasks.
    double class_scale = 3.0;
    /// Probability that a task's images come from a different domain than
    /// the one holding its class structure.
    double label_shift = 0.3;
    /// Mixing weight of the corpus-wide label marginals in the simulated
    /// baseline's multilabel predictions.
    double baseline_smoothing = 0.2;

    TrainConfig oracle_trainer{0.5, 200, 0, 0};
    TrainConfig epn_trainer{0.5, 200, 0, 0};
};

/// Reads a JSON object whose keys are WorldConfig field names. Unknown keys
/// are rejected.
WorldConfig parse_world_config(const std::string& json_text);
WorldConfig load_world_config(const std::filesystem::path& path);
std::string world_config_to_json(const WorldConfig& cfg);

struct TaskInstance {
    TaskDataset train;
    MatrixD train_inputs;
    TaskDataset test;
    MatrixD test_inputs;
    ExpertId true_expert = 0;   // owns the class structure
    ExpertId image_domain = 0;  // domain the inputs are drawn from
    ProbMatrix baseline_probs;  // multilabel, n_train x label space
};

struct SyntheticWorld {
    WorldConfig config;
    LabelHierarchy hierarchy;
    std::vector<MultiLabelExample> upstream;
    MatrixD upstream_inputs;
    SliceSet slices;
    std::vector<LinearExtractor> experts;
    std::vector<LabelDistribution> slice_priors;
    LogisticModel epn;
    double epn_input_scale = 1.0;
    std::vector<TaskInstance> tasks;
};

SyntheticWorld generate_world(const WorldConfig& cfg);

/// Text dump of every generated quantity (17 significant digits).
std::string serialize_world(const SyntheticWorld& w);

/// Expert embedding of a task's training split, as the extraction tool
/// would write it.
EmbeddingMatrix embed_task(const TaskInstance& task, const LinearExtractor& e);

/// EPN probabilities over experts for a task's training inputs.
ProbMatrix epn_probs(const SyntheticWorld& w, const TaskInstance& task);

// ---------------------------------------------------------------------------
// Oracle and selector evaluation

/// Fine-tune proxy: trains a softmax head on the expert's features of the
/// training split and returns test accuracy. Features are divided by their
/// train-split RMS before training.
double oracle_downstream_accuracy(const TaskInstance& task, const LinearExtractor& e,
                                  const TrainConfig& trainer);

enum class BenchSelector { oracle, knn, epn, kl, random };

std::string to_string(BenchSelector s);

inline const std::vector<BenchSelector> kAllSelectors{BenchSelector::knn, BenchSelector::epn,
                                                      BenchSelector::kl, BenchSelector::random};

struct TaskChoice {
    ExpertId chosen = 0;
    double accuracy = 0.0;
};

struct TaskRecord {
    std::size_t task = 0;
    ExpertId true_expert = 0;
    ExpertId image_domain = 0;
    ExpertId oracle_best = 0;
    double oracle_acc = 0.0;
    std::vector<double> expert_acc;
    std::map<BenchSelector, TaskChoice> choices;
};

struct RegretSummary {
    BenchSelector selector = BenchSelector::knn;
    std::vector<double> regrets;     // per task
    std::vector<double> agreements;  // per task, 0 or 1
    double mean_regret = 0.0;
    double agreement = 0.0;
    double mean_selected_acc = 0.0;
    double ci_lo = 0.0, ci_hi = 0.0;                      // mean regret
    double agreement_ci_lo = 0.0, agreement_ci_hi = 0.0;  // agreement rate
};

struct BenchResult {
    std::vector<TaskRecord> records;
    std::map<BenchSelector, RegretSummary> summaries;
};

struct BenchOptions {
    std::vector<BenchSelector> selectors = kAllSelectors;
    double ci_level = 0.95;
    std::size_t resamples = 2000;
};

BenchResult evaluate_selectors(const SyntheticWorld& w, const BenchOptions& opts = {});

/// Seed used by the random selector on task t.
std::uint64_t task_seed(std::uint64_t world_seed, std::size_t task);

/// One block per selector followed by `task ...` records.
void write_bench_report(std::ostream& out, const WorldConfig& cfg, const BenchResult& r);

/// Writes the files a CLI user needs to rerun every selector on every task:
///   priors.prob, task_<t>/train.task, task_<t>/epn.prob,
///   task_<t>/baseline.prob, task_<t>/embeddings/expert_<e>.xprt
void export_world(const SyntheticWorld& w, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Statistics

/// Percentile bootstrap interval of the mean.
std::pair<double, double> bootstrap_ci(const std::vector<double>& samples, double level = 0.95,
                                       std::size_t resamples = 2000, std::uint64_t seed = 0);

/// Linear-interpolation quantile of sorted data, p in [0, 1].
double quantile_sorted(const std::vector<double>& sorted, double p);

// ---------------------------------------------------------------------------
// Asymptotic cost model

using WideUint = unsigned __int128;

std::string to_string(WideUint v);

struct CostModelInput {
    std::uint64_t params = 0;          // P
    std::uint64_t batch = 0;           // B
    std::uint64_t upstream_steps = 0;  // S_U
    std::uint64_t adapt_steps = 0;     // S_A
    std::uint64_t finetune_steps = 0;  // S_F
    std::uint64_t experts = 0;         // E
    std::uint64_t task_examples = 0;   // N_T
};

struct CostCells {
    WideUint upstream = 0;
    WideUint preparation = 0;
    WideUint finetune = 0;
};

struct CostTable {
    CostCells domain_adaptive;  // re-train on re-weighted upstream data per task
    CostCells expert_routing;   // experts + kNN selection
    double preparation_ratio = 0.0;
};

CostTable asymptotic_costs(const CostModelInput& in);
std::string format_cost_table(const CostTable& t);

} // namespace xroute
