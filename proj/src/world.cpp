#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "text_util.hpp"
#include "xroute/bench.hpp"
#include "xroute/error.hpp"
#include "xroute/rng.hpp"

namespace xroute {

namespace {

// Independent random streams of one world.
enum Stream : std::uint64_t {
    kGeometry = 1,
    kUpstream = 2,
    kRandomSlices = 3,
    kTask = 5,
};

constexpr std::uint64_t kEpnSeedSalt = 0x9e3779b97f4a7c15ULL;

LabelId domain_label(std::size_t e) { return static_cast<LabelId>(1 + e); }

LabelId leaf_label(const WorldConfig& cfg, std::size_t e, std::size_t l) {
    return static_cast<LabelId>(1 + cfg.experts + e * cfg.leaves_per_domain + l);
}

struct Geometry {
    std::size_t block = 0;
    std::vector<std::vector<double>> signature;               // [expert][block]
    std::vector<std::vector<std::vector<double>>> leaf_mean;  // [expert][leaf][block]
};

std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double scale) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = scale * normal(rng);
    return v;
}

Geometry make_geometry(const WorldConfig& cfg) {
    Geometry g;
    g.block = cfg.d_raw / cfg.experts;
    auto rng = make_rng(cfg.seed, kGeometry);
    for (std::size_t e = 0; e < cfg.experts; ++e) {
        auto s = gaussian_vector(rng, g.block, 1.0);
        const double norm = std::sqrt(std::inner_product(s.begin(), s.end(), s.begin(), 0.0));
        for (double& v : s) v *= cfg.domain_scale / std::max(norm, 1e-12);
        g.signature.push_back(std::move(s));
        std::vector<std::vector<double>> leaves;
        for (std::size_t l = 0; l < cfg.leaves_per_domain; ++l) leaves.push_back(gaussian_vector(rng, g.block, cfg.leaf_scale));
        g.leaf_mean.push_back(std::move(leaves));
    }
    return g;
}

void add_to_block(std::span<double> x, std::size_t block, std::size_t e, const std::vector<double>& v) {
    for (std::size_t k = 0; k < block; ++k) x[e * block + k] += v[k];
}

/// Upstream-style label draw for an image of domain e: one leaf, plus a
/// leaf of another domain with probability cross_label_prob.
std::set<LabelId> draw_labels(const WorldConfig& cfg, Rng& rng, std::size_t e, std::size_t* leaf_out = nullptr) {
    std::uniform_int_distribution<std::size_t> leaf(0, cfg.leaves_per_domain - 1);
    std::uniform_int_distribution<std::size_t> other(0, cfg.experts - 2);
    std::bernoulli_distribution cross(cfg.cross_label_prob);
    std::set<LabelId> labels;
    const std::size_t l = leaf(rng);
    labels.insert(leaf_label(cfg, e, l));
    if (leaf_out) *leaf_out = l;
    if (cross(rng)) {
        std::size_t o = other(rng);
        if (o >= e) ++o;
        labels.insert(leaf_label(cfg, o, leaf(rng)));
    }
    return labels;
}

LabelHierarchy make_hierarchy(const WorldConfig& cfg) {
    std::vector<Label> labels{{0, "entity"}};
    std::vector<Edge> edges;
    for (std::size_t e = 0; e < cfg.experts; ++e) {
        labels.push_back({domain_label(e), "domain_" + std::to_string(e)});
        edges.push_back({domain_label(e), 0});
    }
    for (std::size_t e = 0; e < cfg.experts; ++e) {
        for (std::size_t l = 0; l < cfg.leaves_per_domain; ++l) {
            labels.push_back({leaf_label(cfg, e, l), "leaf_" + std::to_string(e) + "_" + std::to_string(l)});
            edges.push_back({leaf_label(cfg, e, l), domain_label(e)});
        }
    }
    return LabelHierarchy(std::move(labels), std::move(edges));
}

/// Principal directions of the slice's inputs, each row scaled by
/// sqrt(eigenvalue / largest eigenvalue).
LinearExtractor fit_extractor(const ExpertSlice& slice, const MatrixD& inputs, std::size_t d_embed) {
    const std::size_t d = inputs.cols();
    const std::size_t n = slice.member_ids.size();
    Eigen::MatrixXd data(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = inputs.row(static_cast<std::size_t>(slice.member_ids[i]));
        for (std::size_t k = 0; k < d; ++k) data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = row[k];
    }
    const Eigen::RowVectorXd mean = data.colwise().mean();
    data.rowwise() -= mean;
    const Eigen::MatrixXd cov = (data.transpose() * data) / static_cast<double>(std::max<std::size_t>(1, n));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed while fitting an expert");

    LinearExtractor ex;
    ex.expert_id = slice.expert_id;
    ex.weight = MatrixD(d_embed, d);
    ex.bias.assign(d_embed, 0.0);
    const auto& values = solver.eigenvalues();
    const auto& vectors = solver.eigenvectors();
    const double top = std::max(values(static_cast<Eigen::Index>(d - 1)), 1e-300);
    for (std::size_t r = 0; r < d_embed; ++r) {
        const auto col = static_cast<Eigen::Index>(d - 1 - r);
        Eigen::VectorXd v = vectors.col(col);
        Eigen::Index pivot = 0;
        v.cwiseAbs().maxCoeff(&pivot);
        if (v(pivot) < 0) v = -v;
        const double scale = std::sqrt(std::max(0.0, values(col)) / top);
        for (std::size_t k = 0; k < d; ++k) ex.weight(r, k) = scale * v(static_cast<Eigen::Index>(k));
    }
    return ex;
}

void check_config(const WorldConfig& cfg) {
    if (cfg.experts < 2) throw ValidationError("a world needs at least 2 experts");
    if (cfg.experts > cfg.d_raw) {
        throw ValidationError(std::to_string(cfg.experts) + " experts exceed the " + std::to_string(cfg.d_raw) +
                              " distinct subspaces available in d_raw");
    }
    if (cfg.d_embed < 1 || cfg.d_embed > cfg.d_raw) throw ValidationError("d_embed must be in [1, d_raw]");
    if (cfg.classes < 2) throw ValidationError("tasks need at least 2 classes");
    if (cfg.tasks < 1) throw ValidationError("a world needs at least one task");
    if (cfg.n_train < 2 * cfg.classes) throw ValidationError("n_train must hold at least 2 examples per class");
    if (cfg.n_test < 1) throw ValidationError("n_test must be positive");
    if (cfg.leaves_per_domain < 1 || cfg.upstream_per_expert < 1) {
        throw ValidationError("leaves_per_domain and upstream_per_expert must be positive");
    }
    if (cfg.noise < 0 || cfg.label_shift < 0 || cfg.label_shift > 1 || cfg.cross_label_prob < 0 ||
        cfg.cross_label_prob > 1 || cfg.baseline_smoothing < 0 || cfg.baseline_smoothing > 1) {
        throw ValidationError("noise must be >= 0 and probabilities must lie in [0, 1]");
    }
}

std::vector<std::uint32_t> balanced_labels(std::size_t n, std::size_t classes, Rng& rng) {
    std::vector<std::uint32_t> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::uint32_t>(i % classes);
    std::shuffle(y.begin(), y.end(), rng);
    return y;
}

} // namespace

std::string to_string(WorldMode m) { return m == WorldMode::semantic ? "semantic" : "random_slices"; }

WorldMode parse_world_mode(const std::string& text) {
    if (text == "semantic") return WorldMode::semantic;
    if (text == "random_slices") return WorldMode::random_slices;
    throw UsageError("unknown world mode '" + text + "'");
}

std::uint64_t task_seed(std::uint64_t world_seed, std::size_t task) { return world_seed ^ task; }

SyntheticWorld generate_world(const WorldConfig& cfg) {
    check_config(cfg);
    SyntheticWorld w;
    w.config = cfg;
    const std::size_t E = cfg.experts;
    const Geometry geo = make_geometry(cfg);

    // Upstream corpus and hierarchy.
    const LabelHierarchy bare = make_hierarchy(cfg);
    const std::size_t n_up = E * cfg.upstream_per_expert;
    w.upstream_inputs = MatrixD(n_up, cfg.d_raw);
    {
        auto rng = make_rng(cfg.seed, kUpstream);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i = 0; i < n_up; ++i) {
            const std::size_t e = i % E;
            std::size_t leaf = 0;
            MultiLabelExample ex{static_cast<ExampleId>(i), draw_labels(cfg, rng, e, &leaf)};
            auto x = w.upstream_inputs.row(i);
            for (double& v : x) v = normal(rng);
            add_to_block(x, geo.block, e, geo.signature[e]);
            add_to_block(x, geo.block, e, geo.leaf_mean[e][leaf]);
            w.upstream.push_back(std::move(ex));
        }
    }
    w.hierarchy = bare.with_counts(count_images(w.upstream, bare));

    // Slices.
    std::vector<LabelId> domains(E);
    for (std::size_t e = 0; e < E; ++e) domains[e] = domain_label(e);
    w.slices = build_slices(w.upstream, domains, w.hierarchy);
    if (cfg.mode == WorldMode::random_slices) {
        auto rng = make_rng(cfg.seed, kRandomSlices);
        std::vector<ExampleId> all(n_up);
        std::iota(all.begin(), all.end(), ExampleId{0});
        SliceSet random;
        for (const auto& semantic : w.slices.slices) {
            std::shuffle(all.begin(), all.end(), rng);
            ExpertSlice s;
            s.expert_id = semantic.expert_id;
            s.root_label = 0;
            s.member_ids.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(semantic.member_ids.size()));
            std::sort(s.member_ids.begin(), s.member_ids.end());
            for (ExampleId id : s.member_ids) random.routing[id].push_back(s.expert_id);
            random.slices.push_back(std::move(s));
        }
        w.slices = std::move(random);
    }

    // Priors, stored at file precision so library and file routes agree.
    std::map<ExampleId, std::set<LabelId>> closed;
    std::vector<double> global(w.hierarchy.label_space(), 0.0);
    for (const auto& ex : w.upstream) {
        auto labels = close_labels(ex, w.hierarchy);
        for (LabelId l : labels) global[static_cast<std::size_t>(l)] += 1.0 / static_cast<double>(n_up);
        closed.emplace(ex.example_id, std::move(labels));
    }
    for (const auto& s : w.slices.slices) {
        auto p = empirical_prior(s, closed, w.hierarchy.label_space());
        for (double& v : p.marginals) v = static_cast<float>(v);
        w.slice_priors.push_back(std::move(p));
    }

    // Experts.
    for (const auto& s : w.slices.slices) w.experts.push_back(fit_extractor(s, w.upstream_inputs, cfg.d_embed));

    // Expert prediction network on balanced (example, expert) pairs.
    {
        const auto pairs = balanced_resample(w.slices.slices, n_up, cfg.seed ^ kEpnSeedSalt);
        MatrixD x(pairs.size(), cfg.d_raw);
        std::vector<std::uint32_t> y(pairs.size());
        double sq = 0.0;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const auto src = w.upstream_inputs.row(static_cast<std::size_t>(pairs[i].example_id));
            std::copy(src.begin(), src.end(), x.row(i).begin());
            for (double v : src) sq += v * v;
            y[i] = static_cast<std::uint32_t>(pairs[i].expert_id);
        }
        w.epn_input_scale = 1.0 / std::sqrt(sq / static_cast<double>(x.rows() * x.cols()));
        for (double& v : x.values()) v *= w.epn_input_scale;
        TrainConfig tc = cfg.epn_trainer;
        tc.num_classes = E;
        w.epn = train_logistic(x, y, tc);
    }

    // Downstream tasks; each draws from its own stream.
    w.tasks.resize(cfg.tasks);
    for (std::size_t t = 0; t < cfg.tasks; ++t) {
        auto rng = make_rng(task_seed(cfg.seed, t), kTask);
        std::uniform_int_distribution<std::size_t> pick_expert(0, E - 1);
        std::uniform_int_distribution<std::size_t> pick_other(0, E - 2);
        std::bernoulli_distribution shifted(cfg.label_shift);
        std::normal_distribution<double> normal(0.0, 1.0);

        TaskInstance& task = w.tasks[t];
        const std::size_t truth = pick_expert(rng);
        std::size_t image = truth;
        if (shifted(rng)) {
            image = pick_other(rng);
            if (image >= truth) ++image;
        }
        task.true_expert = static_cast<ExpertId>(truth);
        task.image_domain = static_cast<ExpertId>(image);

        std::vector<std::vector<double>> class_mean;
        for (std::size_t c = 0; c < cfg.classes; ++c) class_mean.push_back(gaussian_vector(rng, geo.block, cfg.class_scale));

        auto fill_split = [&](TaskDataset& ds, MatrixD& inputs, std::size_t n, std::size_t id_offset) {
            ds.num_classes = static_cast<std::uint32_t>(cfg.classes);
            ds.class_labels = balanced_labels(n, cfg.classes, rng);
            ds.example_ids.resize(n);
            inputs = MatrixD(n, cfg.d_raw);
            for (std::size_t i = 0; i < n; ++i) {
                ds.example_ids[i] = (static_cast<ExampleId>(t) << 32) | static_cast<ExampleId>(id_offset + i);
                auto x = inputs.row(i);
                for (double& v : x) v = cfg.noise * normal(rng);
                add_to_block(x, geo.block, image, geo.signature[image]);
                add_to_block(x, geo.block, truth, class_mean[ds.class_labels[i]]);
            }
        };
        fill_split(task.train, task.train_inputs, cfg.n_train, 0);
        fill_split(task.test, task.test_inputs, cfg.n_test, cfg.n_train);

        // Simulated baseline: smoothed upstream labels of an image from the
        // task's image domain.
        const std::size_t labels = w.hierarchy.label_space();
        task.baseline_probs.kind = ProbKind::multilabel;
        task.baseline_probs.data = MatrixF(cfg.n_train, labels);
        for (std::size_t i = 0; i < cfg.n_train; ++i) {
            const auto closed_labels = close_labels(draw_labels(cfg, rng, image), w.hierarchy);
            for (std::size_t c = 0; c < labels; ++c) {
                const double hit = closed_labels.count(static_cast<LabelId>(c)) ? 1.0 : 0.0;
                const double q = (1.0 - cfg.baseline_smoothing) * hit + cfg.baseline_smoothing * global[c];
                task.baseline_probs.data(i, c) = static_cast<float>(std::clamp(q, 0.0, 1.0));
            }
        }
    }
    return w;
}

EmbeddingMatrix embed_task(const TaskInstance& task, const LinearExtractor& e) {
    EmbeddingMatrix m;
    m.expert_id = e.expert_id;
    m.example_ids = task.train.example_ids;
    m.data = matrix_cast<float>(extract(e, task.train_inputs));
    return m;
}

ProbMatrix epn_probs(const SyntheticWorld& w, const TaskInstance& task) {
    MatrixD x = task.train_inputs;
    for (double& v : x.values()) v *= w.epn_input_scale;
    return predict_proba(w.epn, x);
}

// ---------------------------------------------------------------------------
// config

namespace {

using nlohmann::json;

TrainConfig trainer_from_json(const json& j, TrainConfig base) {
    for (const auto& [key, value] : j.items()) {
        if (key == "lr") base.lr = value.get<double>();
        else if (key == "steps") base.steps = value.get<std::size_t>();
        else throw UsageError("unknown trainer key '" + key + "'");
    }
    return base;
}

json trainer_to_json(const TrainConfig& t) { return {{"lr", t.lr}, {"steps", t.steps}}; }

} // namespace

WorldConfig parse_world_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("bench config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("bench config must be a JSON object");
    WorldConfig cfg;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "seed") cfg.seed = v.get<std::uint64_t>();
            else if (key == "experts") cfg.experts = v.get<std::size_t>();
            else if (key == "d_raw") cfg.d_raw = v.get<std::size_t>();
            else if (key == "d_embed") cfg.d_embed = v.get<std::size_t>();
            else if (key == "classes") cfg.classes = v.get<std::size_t>();
            else if (key == "tasks") cfg.tasks = v.get<std::size_t>();
            else if (key == "noise") cfg.noise = v.get<double>();
            else if (key == "mode") cfg.mode = parse_world_mode(v.get<std::string>());
            else if (key == "n_train") cfg.n_train = v.get<std::size_t>();
            else if (key == "n_test") cfg.n_test = v.get<std::size_t>();
            else if (key == "leaves_per_domain") cfg.leaves_per_domain = v.get<std::size_t>();
            else if (key == "upstream_per_expert") cfg.upstream_per_expert = v.get<std::size_t>();
            else if (key == "cross_label_prob") cfg.cross_label_prob = v.get<double>();
            else if (key == "domain_scale") cfg.domain_scale = v.get<double>();
            else if (key == "leaf_scale") cfg.leaf_scale = v.get<double>();
            else if (key == "class_scale") cfg.class_scale = v.get<double>();
            else if (key == "label_shift") cfg.label_shift = v.get<double>();
            else if (key == "baseline_smoothing") cfg.baseline_smoothing = v.get<double>();
            else if (key == "oracle_trainer") cfg.oracle_trainer = trainer_from_json(v, cfg.oracle_trainer);
            else if (key == "epn_trainer") cfg.epn_trainer = trainer_from_json(v, cfg.epn_trainer);
            else throw UsageError("unknown bench config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bench config has a value of the wrong type: ") + e.what());
    }
    return cfg;
}

WorldConfig load_world_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open bench config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_world_config(ss.str());
}

std::string world_config_to_json(const WorldConfig& c) {
    json j = {{"seed", c.seed},
              {"experts", c.experts},
              {"d_raw", c.d_raw},
              {"d_embed", c.d_embed},
              {"classes", c.classes},
              {"tasks", c.tasks},
              {"noise", c.noise},
              {"mode", to_string(c.mode)},
              {"n_train", c.n_train},
              {"n_test", c.n_test},
              {"leaves_per_domain", c.leaves_per_domain},
              {"upstream_per_expert", c.upstream_per_expert},
              {"cross_label_prob", c.cross_label_prob},
              {"domain_scale", c.domain_scale},
              {"leaf_scale", c.leaf_scale},
              {"class_scale", c.class_scale},
              {"label_shift", c.label_shift},
              {"baseline_smoothing", c.baseline_smoothing},
              {"oracle_trainer", trainer_to_json(c.oracle_trainer)},
              {"epn_trainer", trainer_to_json(c.epn_trainer)}};
    return j.dump();
}

// ---------------------------------------------------------------------------
// serialization

namespace {

void dump_matrix(std::ostream& out, const char* tag, const MatrixD& m) {
    out << tag << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? " " : "") << detail::format_g(m(r, c), 17);
        out << '\n';
    }
}

void dump_task(std::ostream& out, const char* tag, const TaskDataset& t) {
    out << tag << ' ' << t.size() << ' ' << t.num_classes << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) out << t.example_ids[i] << ':' << t.class_labels[i] << '\n';
}

} // namespace

std::string serialize_world(const SyntheticWorld& w) {
    std::ostringstream out;
    out << "config " << world_config_to_json(w.config) << '\n';
    write_hierarchy(out, w.hierarchy);
    for (const auto& ex : w.upstream) {
        out << "X " << ex.example_id;
        for (LabelId l : ex.labels) out << ' ' << l;
        out << '\n';
    }
    dump_matrix(out, "upstream_inputs", w.upstream_inputs);
    write_slices(out, w.slices);
    for (const auto& e : w.experts) {
        out << "expert " << e.expert_id << '\n';
        dump_matrix(out, "weight", e.weight);
    }
    for (const auto& p : w.slice_priors) {
        out << "prior";
        for (double v : p.marginals) out << ' ' << detail::format_g(v, 17);
        out << '\n';
    }
    dump_matrix(out, "epn_weight", w.epn.weight);
    out << "epn_scale " << detail::format_g(w.epn_input_scale, 17) << '\n';
    for (std::size_t t = 0; t < w.tasks.size(); ++t) {
        const auto& task = w.tasks[t];
        out << "task " << t << " true " << task.true_expert << " image " << task.image_domain << '\n';
        dump_task(out, "train", task.train);
        dump_matrix(out, "train_inputs", task.train_inputs);
        dump_task(out, "test", task.test);
        dump_matrix(out, "test_inputs", task.test_inputs);
        dump_matrix(out, "baseline", matrix_cast<double>(task.baseline_probs.data));
    }
    return out.str();
}

} // namespace xroute
