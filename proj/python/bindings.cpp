#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "xroute/bench.hpp"
#include "xroute/dataset_io.hpp"
#include "xroute/error.hpp"
#include "xroute/hierarchy.hpp"
#include "xroute/knn.hpp"
#include "xroute/parallel.hpp"
#include "xroute/selection.hpp"
#include "xroute/toy_models.hpp"

namespace py = pybind11;
using namespace xroute;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;
using IdArray = py::array_t<std::uint64_t, py::array::c_style | py::array::forcecast>;

MatrixF to_matrix(const FloatArray& a) {
    if (a.ndim() != 2) throw UsageError("expected a 2-D array");
    const auto rows = static_cast<std::size_t>(a.shape(0));
    const auto cols = static_cast<std::size_t>(a.shape(1));
    return MatrixF(rows, cols, std::vector<float>(a.data(), a.data() + rows * cols));
}

template <typename T>
std::vector<T> to_vector(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 1) throw UsageError("expected a 1-D array");
    return std::vector<T>(a.data(), a.data() + a.shape(0));
}

FloatArray from_matrix(const MatrixF& m) {
    FloatArray out({m.rows(), m.cols()});
    std::copy(m.values().begin(), m.values().end(), out.mutable_data());
    return out;
}

py::dict report_dict(const SelectionReport& r) {
    py::dict d;
    d["method"] = to_string(r.method);
    d["chosen"] = r.chosen;
    d["tie_count"] = r.tie_count;
    d["direction"] = r.direction == Direction::maximize ? "maximize" : "minimize";
    d["scores"] = r.scores;
    d["text"] = format_report(r);
    return d;
}

ProbMatrix to_probs(const FloatArray& a, ProbKind kind) { return ProbMatrix{kind, to_matrix(a)}; }

py::object wide_int(WideUint v) { return py::int_(py::str(xroute::to_string(v))); }

py::dict cells_dict(const CostCells& c) {
    py::dict d;
    d["upstream"] = wide_int(c.upstream);
    d["preparation"] = wide_int(c.preparation);
    d["finetune"] = wide_int(c.finetune);
    return d;
}

} // namespace

PYBIND11_MODULE(_xroute, m) {
    m.doc() = "Expert selection kernels: LOOCV 1-NN proxy, EPN, KL label matching, cost model";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def("set_num_threads", &set_num_threads, py::arg("n"), "Worker threads for parallel kernels (0 = auto).");

    m.def(
        "loocv_1nn_accuracy",
        [](const FloatArray& x, const LabelArray& y) {
            const auto r = loocv_1nn_accuracy(to_matrix(x), to_vector(y));
            py::dict d;
            d["accuracy"] = r.accuracy;
            d["correct"] = r.correct;
            d["total"] = r.total;
            d["nn_index"] = r.nn_index;
            return d;
        },
        py::arg("x"), py::arg("y"), "Leave-one-out 1-NN accuracy (Euclidean).");

    m.def(
        "knn_select",
        [](const IdArray& ids, const LabelArray& labels, std::uint32_t num_classes, const py::list& experts) {
            TaskDataset task{to_vector(ids), to_vector(labels), num_classes};
            validate(task);
            std::vector<EmbeddingMatrix> embeddings;
            for (const auto& item : experts) {
                auto t = item.cast<py::tuple>();
                EmbeddingMatrix e;
                e.expert_id = t[0].cast<ExpertId>();
                e.example_ids = to_vector(t[1].cast<IdArray>());
                e.data = to_matrix(t[2].cast<FloatArray>());
                validate(e);
                embeddings.push_back(std::move(e));
            }
            return report_dict(knn_select(task, embeddings));
        },
        py::arg("ids"), py::arg("labels"), py::arg("num_classes"), py::arg("experts"),
        "experts: list of (expert_id, example_ids, N x d float32 embeddings).");

    m.def(
        "epn_select", [](const FloatArray& probs) { return report_dict(epn_select(to_probs(probs, ProbKind::categorical))); },
        py::arg("probs"));

    m.def(
        "estimate_task_distribution",
        [](const FloatArray& probs) { return estimate_task_distribution(to_probs(probs, ProbKind::multilabel)).marginals; },
        py::arg("probs"));

    m.def(
        "bernoulli_kl",
        [](const std::vector<double>& p, const std::vector<double>& q, double eps) {
            return bernoulli_kl({p}, {q}, eps);
        },
        py::arg("p"), py::arg("q"), py::arg("eps") = kKlEpsilon);

    m.def(
        "kl_select",
        [](const std::vector<std::vector<double>>& priors, const std::vector<double>& q) {
            std::vector<LabelDistribution> ps;
            for (const auto& p : priors) ps.push_back({p});
            return report_dict(kl_select(ps, {q}));
        },
        py::arg("priors"), py::arg("q"));

    m.def(
        "random_select", [](std::size_t n, std::uint64_t seed) { return report_dict(random_select(n, seed)); },
        py::arg("num_experts"), py::arg("seed"));

    m.def(
        "count_params",
        [](const std::string& bottleneck) {
            const auto r = count_params(kResNet50AdapterChannels, BottleneckRule::parse(bottleneck));
            py::dict d;
            d["backbone"] = r.backbone_params;
            d["adapter"] = r.per_adapter_params;
            d["ratio"] = r.ratio;
            return d;
        },
        py::arg("bottleneck") = "half");

    m.def(
        "asymptotic_costs",
        [](std::uint64_t P, std::uint64_t B, std::uint64_t Su, std::uint64_t Sa, std::uint64_t Sf, std::uint64_t E,
           std::uint64_t Nt) {
            const auto t = asymptotic_costs({P, B, Su, Sa, Sf, E, Nt});
            py::dict d;
            d["domain_adaptive"] = cells_dict(t.domain_adaptive);
            d["experts"] = cells_dict(t.expert_routing);
            d["preparation_ratio"] = t.preparation_ratio;
            return d;
        },
        py::arg("P"), py::arg("B"), py::arg("Su"), py::arg("Sa"), py::arg("Sf"), py::arg("E"), py::arg("Nt"));

    m.def("bootstrap_ci", &bootstrap_ci, py::arg("samples"), py::arg("level") = 0.95, py::arg("resamples") = 2000,
          py::arg("seed") = 0, "Percentile bootstrap interval of the mean.");

    m.def(
        "build_slices",
        [](const std::string& hierarchy, const std::string& examples, const std::string& mode) {
            const auto bare = load_hierarchy(hierarchy);
            const auto ex = load_examples(examples, bare);
            const auto h = ex.empty() ? bare : bare.with_counts(count_images(ex, bare));
            const auto slices = xroute::build_slices(ex, select_domains(h, parse_domain_rule(mode)), h);
            py::list out;
            for (const auto& s : slices.slices) out.append(py::make_tuple(s.expert_id, s.root_label, s.member_ids));
            return out;
        },
        py::arg("hierarchy"), py::arg("examples"), py::arg("mode") = "topn:50",
        "Returns (expert_id, root_label, member_ids) per non-empty slice.");

    m.def(
        "write_embeddings",
        [](const std::string& path, const IdArray& ids, const FloatArray& data) {
            write_embeddings(EmbeddingMatrix{0, to_vector(ids), to_matrix(data)}, path);
        },
        py::arg("path"), py::arg("ids"), py::arg("data"));

    m.def(
        "read_embeddings",
        [](const std::string& path) {
            const auto e = read_embeddings(path, 0);
            return py::make_tuple(e.example_ids, from_matrix(e.data));
        },
        py::arg("path"));

    m.def(
        "run_benchmark",
        [](const std::string& config_json) {
            const auto cfg = parse_world_config(config_json);
            BenchResult r;
            {
                py::gil_scoped_release release;
                r = evaluate_selectors(generate_world(cfg));
            }
            py::dict out;
            for (const auto& [s, sum] : r.summaries) {
                py::dict d;
                d["mean_regret"] = sum.mean_regret;
                d["agreement"] = sum.agreement;
                d["ci"] = py::make_tuple(sum.ci_lo, sum.ci_hi);
                d["agreement_ci"] = py::make_tuple(sum.agreement_ci_lo, sum.agreement_ci_hi);
                out[py::str(to_string(s))] = d;
            }
            std::ostringstream text;
            write_bench_report(text, cfg, r);
            out["report"] = text.str();
            return out;
        },
        py::arg("config_json") = "{}");
}
