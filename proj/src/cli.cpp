#include "facm/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "facm/config.hpp"
#include "facm/parallel.hpp"
#include "facm/sampler.hpp"
#include "facm/trainer.hpp"
#include "facm/verify.hpp"

namespace facm::cli {
namespace {

namespace fs = std::filesystem;

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "Config file (key = value lines)");
    cmd->add_option("--set", c.sets, "Override one key, e.g. --set w=1.0 (repeatable)")->allow_extra_args(false);
    cmd->add_option("--out", c.out, "Output directory (default: $FACM_LAB_OUT/<command> or runs/<command>)");
    cmd->add_option("--seed", c.seed, "Seed overriding the config");
    cmd->add_option("--threads", c.threads, "Worker threads (1 gives bit-reproducible traces)");
}

fs::path output_dir(const Common& c, const std::string& verb) {
    if (!c.out.empty()) return c.out;
    if (const char* root = std::getenv("FACM_LAB_OUT"); root && *root) return fs::path(root) / verb;
    return fs::path("runs") / verb;
}

train::TrainConfig resolve(const Common& c, std::optional<train::Paradigm> paradigm) {
    std::vector<std::string> sets = c.sets;
    if (paradigm) sets.insert(sets.begin(), "paradigm=" + std::string(train::to_string(*paradigm)));
    if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
    return config::parse_config(c.config, sets);
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

/// Resolved config and seed land next to every run's outputs.
void write_snapshot(const fs::path& dir, const train::TrainConfig& c) {
    fs::create_directories(dir);
    open_out(dir / "config.resolved") << config::to_text(c);
    open_out(dir / "seed.txt") << c.seed << '\n';
}

int train_command(const train::TrainConfig& c, const fs::path& dir) {
    write_snapshot(dir, c);
    std::ofstream trace = open_out(dir / "loss.csv");
    trace << train::kTraceHeader << '\n';
    const train::TrainResult r = train::run(c, [&](const train::TraceRow& row) { train::write_trace_row(trace, row); });
    trace.flush();
    nn::save_checkpoint(r.checkpoint, dir / "checkpoint.bin");
    const auto& last = r.trace.back();
    std::cout << train::to_string(c.paradigm) << ": " << r.trace.size() << " steps, skipped " << r.skipped_steps
              << ", final total loss " << config::format_double(last.total) << "\n"
              << "wrote " << (dir / "checkpoint.bin").string() << " and " << (dir / "loss.csv").string() << '\n';
    if (r.aborted) {
        std::cerr << "error: " << r.diagnostics << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

nn::Network load_for_eval(const train::TrainConfig& c) {
    if (c.checkpoint.empty()) throw config::ConfigError("this command needs key 'checkpoint' (use --set checkpoint=PATH)");
    return nn::load_checkpoint(c.checkpoint).eval_network();
}

sample::EvalOptions eval_options(const train::TrainConfig& c) {
    sample::EvalOptions o;
    o.dataset = c.dataset;
    o.nfe = c.eval_nfe;
    o.n_samples = c.eval_samples;
    o.n_projections = c.eval_projections;
    o.seed = c.seed;
    o.reference_steps = c.reference_steps;
    o.reference_method = sample::parse_ode_method(c.reference_method);
    o.guidance = c.guidance;
    o.label = c.label;
    return o;
}

int sample_command(const train::TrainConfig& c, const fs::path& dir) {
    const nn::Network net = load_for_eval(c);
    write_snapshot(dir, c);
    std::vector<int> labels(c.eval_samples, c.label);
    if (c.label < 0 && net.config().num_classes > 0)
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % net.config().num_classes);
    std::ofstream os = open_out(dir / "samples.csv");
    bool header = true;
    for (std::size_t nfe : c.eval_nfe) {
        const Tensor s = sample::few_step_sample(net, nfe, c.eval_samples, labels, c.seed);
        sample::write_samples_csv(os, s, labels, nfe, c.seed, header);
        header = false;
    }
    std::cout << "wrote " << (dir / "samples.csv").string() << '\n';
    return kExitOk;
}

int eval_command(const train::TrainConfig& c, const fs::path& dir) {
    const nn::Network net = load_for_eval(c);
    write_snapshot(dir, c);
    const sample::EvalReport report = sample::evaluate(net, eval_options(c));
    std::ofstream rep = open_out(dir / "report.csv");
    sample::write_report_csv(rep, report);
    std::ofstream samples = open_out(dir / "samples.csv");
    for (std::size_t i = 0; i < report.rows.size(); ++i)
        sample::write_samples_csv(samples, report.samples[i], report.labels, report.rows[i].nfe, c.seed, i == 0);
    for (const auto& r : report.rows)
        std::cout << "nfe " << r.nfe << ": energy_distance " << config::format_double(r.energy_distance)
                  << ", sliced_w2 " << config::format_double(r.sliced_w2) << '\n';
    if (report.reference) {
        std::ofstream ref = open_out(dir / "reference.csv");
        sample::write_reference_csv(ref, *report.reference);
        std::cout << report.reference->method << " " << report.reference->steps
                  << "-step reference: energy_distance " << config::format_double(report.reference->energy_distance)
                  << '\n';
    }
    return kExitOk;
}

int verify_command(const train::TrainConfig& c, const fs::path& dir) {
    write_snapshot(dir, c);
    const auto results = verify::run_suite(c.seed);
    verify::print_table(std::cout, results);
    std::ofstream os = open_out(dir / "verify.txt");
    verify::print_table(os, results);
    bool ok = true;
    for (const auto& r : results) ok = ok && r.passed;
    std::cout << (ok ? "all checks passed" : "some checks failed") << '\n';
    return ok ? kExitOk : kExitFailure;
}

int equivalence_command(const train::TrainConfig& c, const fs::path& dir) {
    write_snapshot(dir, c);
    const double worst = verify::target_equivalence(20, c.seed);
    std::cout << "max |T_MF(r=1) - T'_sCM(w=1/(1-t))|_inf over t in {0.1..0.9}, 20 networks: "
              << config::format_double(worst) << '\n';
    open_out(dir / "equivalence.txt") << config::format_double(worst) << '\n';
    return worst <= 1e-12 ? kExitOk : kExitFailure;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"Flow-anchored consistency training lab for 2-D toy distributions"};
    app.require_subcommand(1);
    struct Verb {
        const char* name;
        const char* help;
        std::optional<train::Paradigm> paradigm;
        int (*fn)(const train::TrainConfig&, const fs::path&);
    };
    const std::vector<Verb> verbs = {
        {"pretrain", "Train a flow-matching teacher with mixed conditioning", train::Paradigm::PretrainTeacher,
         train_command},
        {"distill", "Distill a teacher (key 'teacher') into a few-step model", train::Paradigm::Distill, train_command},
        {"scratch", "Train a few-step model from random init", train::Paradigm::Scratch, train_command},
        {"sample", "Draw few-step samples from key 'checkpoint'", std::nullopt, sample_command},
        {"eval", "Evaluate key 'checkpoint' against held-out data", std::nullopt, eval_command},
        {"verify", "Run the hermetic invariant suite", std::nullopt, verify_command},
        {"equivalence", "Compare the MeanFlow (r=1) and sCM targets", std::nullopt, equivalence_command},
    };
    std::vector<Common> opts(verbs.size());
    std::vector<CLI::App*> cmds;
    for (std::size_t i = 0; i < verbs.size(); ++i) {
        cmds.push_back(app.add_subcommand(verbs[i].name, verbs[i].help));
        add_common(cmds.back(), opts[i]);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    for (std::size_t i = 0; i < verbs.size(); ++i) {
        if (!cmds[i]->parsed()) continue;
        try {
            if (opts[i].threads) set_num_threads(*opts[i].threads);
            const train::TrainConfig c = resolve(opts[i], verbs[i].paradigm);
            return verbs[i].fn(c, output_dir(opts[i], verbs[i].name));
        } catch (const config::ConfigError& e) {
            std::cerr << "config error: " << e.what() << '\n';
            return kExitUsage;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return kExitFailure;
        }
    }
    return kExitUsage;
}

}  // namespace facm::cli
