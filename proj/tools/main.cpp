#include "cmv/experiments.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

nlohmann::json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

struct CommonFlags {
    std::string config_file;
    std::string output;
    long long replicas = -1;
    long long cloud = -1;
    long long ref_cloud = -1;
    long long steps = -1;
    double horizon = -1.0;
    long long seed = -1;
    long long threads = -1;
    std::vector<double> t0_list;
    double delta_frac = -1.0;
    double gamma_max = -1.0;
    std::vector<long long> n_list;
    long long samples = -1;
    std::string scenario_file;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_file, "JSON config file (flags override file values)");
    cmd->add_option("--output", f.output, "output directory");
    cmd->add_option("--replicas", f.replicas, "Monte Carlo replicas");
    cmd->add_option("--cloud", f.cloud, "conditional-law cloud size M");
    cmd->add_option("--ref-cloud", f.ref_cloud, "reference cloud size for chaos runs");
    cmd->add_option("--steps", f.steps, "coarse grid steps");
    cmd->add_option("--horizon", f.horizon, "time horizon T");
    cmd->add_option("--seed", f.seed, "base seed");
    cmd->add_option("--threads", f.threads, "worker threads (0 = hardware)");
    cmd->add_option("--t0", f.t0_list, "t0 sweep values");
    cmd->add_option("--delta-frac", f.delta_frac, "bridge cutoff fraction");
    cmd->add_option("--gamma-max", f.gamma_max, "bridge drift clamp");
    cmd->add_option("--n", f.n_list, "particle counts for the chaos sweep");
    cmd->add_option("--samples", f.samples, "condition-check samples per seed");
    cmd->add_option("--scenario", f.scenario_file, "scenario JSON file");
}

// config file < flags
cmv::ExperimentConfig merge(const std::string& experiment, int couple_case, const CommonFlags& f) {
    nlohmann::json base;
    if (!f.config_file.empty()) base = load_config_file(f.config_file);
    base["experiment"] = experiment;
    if (experiment == "couple") base["case"] = couple_case;
    if (!f.scenario_file.empty()) base["scenario"] = load_config_file(f.scenario_file);
    if (!f.output.empty()) base["output"] = f.output;
    if (f.steps >= 0) base["grid"]["steps"] = f.steps;
    if (f.horizon > 0) base["grid"]["horizon"] = f.horizon;
    if (f.replicas >= 0) base["mc"]["replicas"] = f.replicas;
    if (f.cloud >= 0) base["mc"]["cloud"] = f.cloud;
    if (f.ref_cloud >= 0) base["mc"]["ref_cloud"] = f.ref_cloud;
    if (f.seed >= 0) base["mc"]["seed"] = f.seed;
    if (f.threads >= 0) base["mc"]["threads"] = f.threads;
    if (f.samples >= 0) base["mc"]["samples"] = f.samples;
    if (!f.n_list.empty()) base["mc"]["n_list"] = f.n_list;
    if (!f.t0_list.empty()) base["coupling"]["t0_list"] = f.t0_list;
    if (f.delta_frac > 0) base["coupling"]["delta_frac"] = f.delta_frac;
    if (f.gamma_max > 0) base["coupling"]["gamma_max"] = f.gamma_max;
    return cmv::ExperimentConfig::from_json(base);
}

int run(const std::string& experiment, int couple_case, const CommonFlags& f) {
    const cmv::ExperimentConfig cfg = merge(experiment, couple_case, f);
    const cmv::ResultRecord rec = cmv::run_experiment(cfg);
    std::cout << (rec.tainted ? "TAINTED " : (rec.pass ? "PASS " : "FAIL "))
              << rec.experiment << "  (summary: " << cfg.output_dir << "/summary.json)\n";
    return cmv::exit_code_for(rec);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conditional mean-field SDE laboratory: couplings, chaos rates, Harnack checks"};
    app.require_subcommand(1);

    CommonFlags flags;
    int couple_case = 1;

    auto* validate = app.add_subcommand("validate", "sample the regularity conditions for the registry presets");
    add_common(validate, flags);
    auto* couple = app.add_subcommand("couple", "coupling-by-change-of-measure entropy cost sweep");
    couple->add_option("--case", couple_case, "coupling engine (1 or 2)")->check(CLI::Range(1, 2));
    add_common(couple, flags);
    auto* harnack = app.add_subcommand("harnack", "direct semigroup log-Harnack dominance check");
    add_common(harnack, flags);
    auto* chaos = app.add_subcommand("chaos", "conditional propagation-of-chaos rate and entropy cost sweep");
    add_common(chaos, flags);
    auto* hamiltonian = app.add_subcommand("hamiltonian", "degenerate-pair coupling: Gramian, steering, small-time order");
    add_common(hamiltonian, flags);

    CLI11_PARSE(app, argc, argv);

    try {
        if (validate->parsed()) return run("validate", 1, flags);
        if (couple->parsed()) return run("couple", couple_case, flags);
        if (harnack->parsed()) return run("harnack", 1, flags);
        if (chaos->parsed()) return run("chaos", 1, flags);
        if (hamiltonian->parsed()) return run("hamiltonian", 1, flags);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 3;
}
