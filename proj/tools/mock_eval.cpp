// SPDX-License-Identifier: Apache-2.0
//
// Stand-in evaluation harness speaking the evaluator protocol: reads a
// checkpoint, prints a few log lines, then one JSON line of scores.
//
//   mock_eval [--benchmarks a,b] [scoring] [--fail-first N | --fail-at N] [--state FILE] CHECKPOINT
//
// Scoring (first that applies):
//   --target T         100 - scale * ||checkpoint - T||_2
//   --planted-beta B   merged models score 70 - 10 |beta - B|, others 50
//   --constant V       V (default 50)
// Each benchmark i gets the score minus i * --spread. Invocation counting for
// the failure options lives in --state (or MOCK_EVAL_STATE).

#include <cmath>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "exmerge/merge.hpp"
#include "exmerge/safetensors.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// params[key] of a provenance document whose outermost method is `method`.
std::optional<double> planted_param(const Json& prov, const std::string& method, const std::string& key) {
    if (prov.value("method", "") == method && prov.contains("params") && prov["params"].contains(key)) {
        return prov["params"][key].get<double>();
    }
    return std::nullopt;
}

// Bumps and returns the invocation count kept in `state`.
unsigned next_count(const fs::path& state) {
    unsigned count = 0;
    {
        std::ifstream in(state);
        in >> count;
    }
    ++count;
    std::ofstream(state, std::ios::trunc) << count << '\n';
    return count;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mock evaluation harness"};
    std::string checkpoint, target, state;
    std::vector<std::string> benchmarks{"score"};
    double constant = 50.0, scale = 1.0, spread = 0.0;
    std::optional<double> planted_beta;
    unsigned fail_first = 0;
    unsigned fail_at = 0;
    app.add_option("checkpoint", checkpoint)->required();
    app.add_option("--benchmarks", benchmarks)->delimiter(',');
    app.add_option("--target", target);
    app.add_option("--scale", scale);
    app.add_option("--planted-beta", planted_beta);
    app.add_option("--constant", constant);
    app.add_option("--spread", spread);
    app.add_option("--fail-first", fail_first)->envname("MOCK_EVAL_FAIL_FIRST");
    app.add_option("--fail-at", fail_at)->envname("MOCK_EVAL_FAIL_AT");
    app.add_option("--state", state)->envname("MOCK_EVAL_STATE");
    CLI11_PARSE(app, argc, argv);

    if (fail_first > 0 || fail_at > 0) {
        if (state.empty()) {
            std::cerr << "mock_eval: failure options need --state\n";
            return 2;
        }
        const unsigned n = next_count(state);
        if (n <= fail_first || n == fail_at) {
            std::cerr << "mock_eval: simulated harness failure on call " << n << '\n';
            return 1;
        }
    }

    try {
        std::cout << "mock_eval: loading " << checkpoint << '\n';
        const exmerge::Checkpoint c = exmerge::read_checkpoint(checkpoint);
        std::cout << "mock_eval: " << c.size() << " tensors\n";
        double score = constant;
        if (!target.empty()) {
            score = 100.0 - scale * exmerge::checkpoint_diff_norm(c, exmerge::read_checkpoint(target)).l2;
        } else if (planted_beta) {
            score = 50.0;
            auto it = c.metadata().find(std::string(exmerge::kProvenanceKey));
            if (it != c.metadata().end()) {
                if (auto beta = planted_param(Json::parse(it->second), "exme", "beta")) {
                    score = 70.0 - 10.0 * std::fabs(*beta - *planted_beta);
                }
            }
        }
        Json out = Json::object();
        for (std::size_t i = 0; i < benchmarks.size(); ++i) out[benchmarks[i]] = score - spread * static_cast<double>(i);
        std::cout << out.dump() << std::endl;
    } catch (const std::exception& e) {
        std::cerr << "mock_eval: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
