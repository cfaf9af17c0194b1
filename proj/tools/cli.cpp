#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "xroute/bench.hpp"
#include "xroute/dataset_io.hpp"
#include "xroute/error.hpp"
#include "xroute/hierarchy.hpp"
#include "xroute/knn.hpp"
#include "xroute/log.hpp"
#include "xroute/parallel.hpp"
#include "xroute/selection.hpp"
#include "xroute/toy_models.hpp"

namespace xroute::cli {

namespace {

namespace fs = std::filesystem;

struct Globals {
    std::uint64_t seed = 0;
    std::string threads = "1";
    bool quiet = false;
};

struct SliceArgs {
    std::string hierarchy, examples, mode = "topn:50", out, priors_out, count_basis = "closed";
};

struct SelectArgs {
    std::string method, task, embeddings_dir, probs, priors, out;
    std::size_t experts = 0;
};

struct BenchArgs {
    std::string config, out, export_dir;
};

struct ParamsArgs {
    std::string bottleneck = "half", out;
};

struct CostsArgs {
    CostModelInput in;
    std::string out;
};

class Printer {
public:
    Printer(std::ostream& out, bool quiet) : out_(out), quiet_(quiet) {}
    void config(const std::string& key, const std::string& value) {
        if (!quiet_) out_ << "# " << key << " = " << value << '\n';
    }
    std::ostream& out() { return out_; }

private:
    std::ostream& out_;
    bool quiet_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot write " + path.string());
    f << text;
}

std::size_t parse_threads(const std::string& text) {
    if (text == "auto") return 0;
    try {
        std::size_t pos = 0;
        const auto n = std::stoull(text, &pos);
        if (pos == text.size() && n > 0) return n;
    } catch (const std::exception&) {
    }
    throw UsageError("--threads expects a positive integer or 'auto', got '" + text + "'");
}

void require(bool ok, const std::string& message) {
    if (!ok) throw UsageError(message);
}

int cmd_slice(const SliceArgs& a, Printer& p) {
    p.config("hierarchy", a.hierarchy);
    p.config("examples", a.examples);
    p.config("mode", a.mode);
    p.config("count_basis", a.count_basis);
    p.config("out", a.out);
    const DomainRule rule = parse_domain_rule(a.mode);
    CountBasis basis = CountBasis::closed;
    if (a.count_basis == "raw") basis = CountBasis::raw;
    else require(a.count_basis == "closed", "--count-basis must be 'closed' or 'raw'");

    const LabelHierarchy bare = load_hierarchy(a.hierarchy);
    const auto examples = load_examples(a.examples, bare);
    const LabelHierarchy h = examples.empty() ? bare : bare.with_counts(count_images(examples, bare, basis));
    const auto domains = select_domains(h, rule);
    if (domains.empty()) throw ValidationError("no label satisfies " + a.mode);
    const SliceSet slices = build_slices(examples, domains, h);

    std::ostringstream text;
    write_slices(text, slices);
    write_text(a.out, text.str());
    if (!a.priors_out.empty()) {
        std::map<ExampleId, std::set<LabelId>> closed;
        for (const auto& ex : examples) closed.emplace(ex.example_id, close_labels(ex, h));
        std::vector<LabelDistribution> priors;
        for (const auto& s : slices.slices) priors.push_back(empirical_prior(s, closed, h.label_space()));
        write_probs(priors_to_probs(priors), a.priors_out);
    }
    p.out() << "domains " << domains.size() << '\n' << "slices " << slices.slices.size() << '\n';
    return kOk;
}

int cmd_select(const SelectArgs& a, const Globals& g, Printer& p) {
    const SelectionMethod method = parse_method(a.method);
    p.config("method", a.method);
    p.config("out", a.out);
    auto only = [&](bool task, bool emb, bool probs, bool priors, bool experts) {
        require(task == !a.task.empty(), task ? "--task is required for this method" : "--task does not apply to this method");
        require(emb == !a.embeddings_dir.empty(),
                emb ? "--embeddings-dir is required for this method" : "--embeddings-dir does not apply to this method");
        require(probs == !a.probs.empty(), probs ? "--probs is required for this method" : "--probs does not apply to this method");
        require(priors == !a.priors.empty(),
                priors ? "--priors is required for this method" : "--priors does not apply to this method");
        require(experts == (a.experts != 0),
                experts ? "--experts is required for this method" : "--experts does not apply to this method");
    };

    SelectionReport report;
    switch (method) {
        case SelectionMethod::knn: {
            only(true, true, false, false, false);
            p.config("task", a.task);
            p.config("embeddings_dir", a.embeddings_dir);
            report = knn_select(read_task(a.task), read_embeddings_dir(a.embeddings_dir));
            break;
        }
        case SelectionMethod::epn: {
            only(false, false, true, false, false);
            p.config("probs", a.probs);
            report = epn_select(read_probs(a.probs));
            break;
        }
        case SelectionMethod::kl: {
            only(false, false, true, true, false);
            p.config("probs", a.probs);
            p.config("priors", a.priors);
            const auto priors = probs_to_priors(read_probs(a.priors));
            const auto q = estimate_task_distribution(read_probs(a.probs));
            report = kl_select(priors, q);
            break;
        }
        case SelectionMethod::random: {
            only(false, false, false, false, true);
            p.config("experts", std::to_string(a.experts));
            report = random_select(a.experts, g.seed);
            break;
        }
    }
    write_text(a.out, format_report(report));
    p.out() << report.chosen << '\n';
    return kOk;
}

int cmd_bench(const BenchArgs& a, const Globals& g, bool seed_given, Printer& p) {
    WorldConfig cfg = load_world_config(a.config);
    if (seed_given) cfg.seed = g.seed;
    p.config("config", a.config);
    p.config("world", world_config_to_json(cfg));
    p.config("out", a.out);
    const SyntheticWorld world = generate_world(cfg);
    const BenchResult result = evaluate_selectors(world);
    std::ostringstream text;
    write_bench_report(text, cfg, result);
    write_text(a.out, text.str());
    if (!a.export_dir.empty()) {
        p.config("export_dir", a.export_dir);
        export_world(world, a.export_dir);
    }
    for (const auto& [s, sum] : result.summaries) {
        p.out() << to_string(s) << " mean_regret=" << sum.mean_regret << " agreement=" << sum.agreement << '\n';
    }
    return kOk;
}

int cmd_params(const ParamsArgs& a, Printer& p) {
    p.config("bottleneck", a.bottleneck);
    const auto report = count_params(kResNet50AdapterChannels, BottleneckRule::parse(a.bottleneck));
    const std::string text = format_param_report(report);
    if (!a.out.empty()) write_text(a.out, text);
    p.out() << text;
    return kOk;
}

int cmd_costs(const CostsArgs& a, Printer& p) {
    const auto& in = a.in;
    p.config("P", std::to_string(in.params));
    p.config("B", std::to_string(in.batch));
    p.config("Su", std::to_string(in.upstream_steps));
    p.config("Sa", std::to_string(in.adapt_steps));
    p.config("Sf", std::to_string(in.finetune_steps));
    p.config("E", std::to_string(in.experts));
    p.config("Nt", std::to_string(in.task_examples));
    const std::string text = format_cost_table(asymptotic_costs(in));
    if (!a.out.empty()) write_text(a.out, text);
    p.out() << text;
    return kOk;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Per-task expert routing for transfer learning", "xroute"};
    app.require_subcommand(1);
    Globals g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
    app.add_option("--threads", g.threads, "Worker threads: a positive integer or 'auto'")->capture_default_str();
    app.add_flag("--quiet", g.quiet, "Do not print the resolved configuration");

    SliceArgs slice;
    auto* s = app.add_subcommand("slice", "Select expert domains and build upstream slices");
    s->add_option("--hierarchy", slice.hierarchy, "Label hierarchy file")->required();
    s->add_option("--examples", slice.examples, "Multi-label examples file")->required();
    s->add_option("--mode", slice.mode, "threshold:<min_images> or topn:<n>")->capture_default_str();
    s->add_option("--count-basis", slice.count_basis, "Count images on 'closed' or 'raw' labels")->capture_default_str();
    s->add_option("--out", slice.out, "Slices + routing output file")->required();
    s->add_option("--priors-out", slice.priors_out, "Optional per-expert label prior matrix");

    SelectArgs sel;
    auto* c = app.add_subcommand("select", "Choose an expert for a downstream task");
    c->add_option("--method", sel.method, "knn | epn | kl | random")->required();
    c->add_option("--task", sel.task, "Task file (knn)");
    c->add_option("--embeddings-dir", sel.embeddings_dir, "Directory of expert_<id>.xprt files (knn)");
    c->add_option("--probs", sel.probs, "Probability matrix (epn: categorical, kl: multilabel)");
    c->add_option("--priors", sel.priors, "Per-expert label priors (kl)");
    c->add_option("--experts", sel.experts, "Number of experts (random)");
    c->add_option("--out", sel.out, "Selection report output file")->required();

    BenchArgs bench;
    auto* b = app.add_subcommand("bench", "Run the synthetic selector benchmark");
    b->add_option("--config", bench.config, "JSON world configuration")->required();
    b->add_option("--out", bench.out, "Benchmark report output file")->required();
    b->add_option("--export-dir", bench.export_dir, "Also write per-task selector inputs here");

    ParamsArgs params;
    auto* pa = app.add_subcommand("params", "Adapter vs. ResNet50 parameter counts");
    pa->add_option("--bottleneck", params.bottleneck, "half | fixed:<k>")->capture_default_str();
    pa->add_option("--out", params.out, "Optional output file");

    CostsArgs costs;
    auto* co = app.add_subcommand("costs", "Asymptotic cost table of both transfer pipelines");
    co->add_option("--P", costs.in.params, "Parameter count")->required();
    co->add_option("--B", costs.in.batch, "Batch size")->required();
    co->add_option("--Su", costs.in.upstream_steps, "Upstream steps")->required();
    co->add_option("--Sa", costs.in.adapt_steps, "Adaptation steps")->required();
    co->add_option("--Sf", costs.in.finetune_steps, "Fine-tuning steps")->required();
    co->add_option("--E", costs.in.experts, "Number of experts")->required();
    co->add_option("--Nt", costs.in.task_examples, "Downstream examples")->required();
    co->add_option("--out", costs.out, "Optional output file");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    }

    auto previous = set_warning_handler([&err](const std::string& msg) { err << "warning: " << msg << '\n'; });
    Printer printer(out, g.quiet);
    int code = kOk;
    try {
        set_num_threads(parse_threads(g.threads));
        printer.config("seed", std::to_string(g.seed));
        printer.config("threads", g.threads);
        if (s->parsed()) code = cmd_slice(slice, printer);
        else if (c->parsed()) code = cmd_select(sel, g, printer);
        else if (b->parsed()) code = cmd_bench(bench, g, seed_opt->count() > 0, printer);
        else if (pa->parsed()) code = cmd_params(params, printer);
        else if (co->parsed()) code = cmd_costs(costs, printer);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        code = kValidation;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        code = kUsage;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << '\n';
        code = kNumeric;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        code = kValidation;
    }
    set_warning_handler(std::move(previous));
    return code;
}

} // namespace xroute::cli
