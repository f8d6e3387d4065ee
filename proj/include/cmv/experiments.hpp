#pragma once

#include "cmv/coupling.hpp"
#include "cmv/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace cmv {

using ojson = nlohmann::ordered_json;

struct ExperimentConfig {
    std::string experiment; // validate | couple | harnack | chaos | hamiltonian
    int couple_case = 1;

    nlohmann::json scenario; // build_scenario config; defaulted per experiment when empty

    // grid
    std::size_t steps = 64;
    double horizon = 1.0;

    // monte carlo
    std::size_t replicas = 1000;
    std::size_t cloud = 1024;
    std::size_t ref_cloud = 4096;
    std::vector<std::size_t> n_list = {8, 16, 32, 64, 128, 256, 512};
    std::size_t samples = 10000; // validate: condition samples
    uint64_t seed = 1;
    int threads = 0;

    // coupling
    std::vector<double> t0_list;
    double delta_frac = 1.0 / 128.0;
    std::vector<double> probe_fracs = {1.0 / 8.0, 1.0 / 32.0, 1.0 / 128.0};
    double gamma_max = 1e3;

    // initial laws (couple, harnack pair 1)
    nlohmann::json mu0;
    nlohmann::json nu0;

    // chaos
    double q_moment = 8.0;
    std::vector<std::size_t> k_list = {1, 2, 4};

    std::string output_dir = "out";

    static ExperimentConfig from_json(const nlohmann::json& j);
    ojson to_json() const; // canonical ordered form (hash input)
    void validate() const;
};

struct ResultRecord {
    std::string experiment;
    ojson config;
    std::string config_hash;
    std::string bound; // the inequality shape the experiment probes
    ojson results;
    ojson diagnostics;
    ojson thresholds;
    bool pass = false;
    bool tainted = false;

    ojson to_json() const;
};

// Runs the configured experiment and writes summary.json, replicas.csv (when
// the experiment produces per-replica rows) and plot_*.csv into output_dir.
// All outputs are byte-deterministic for a fixed config.
ResultRecord run_experiment(const ExperimentConfig& cfg);

// Rewrites the plot CSV files for an existing record.
void emit_plotdata(const ResultRecord& rec, const std::string& output_dir);

// 0 pass, 1 threshold failure, 2 tainted run. (3 = config error, raised by the CLI.)
int exit_code_for(const ResultRecord& rec);

} // namespace cmv
