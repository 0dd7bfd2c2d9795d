// SPDX-License-Identifier: Apache-2.0
//
// Sweep fixtures: a base and several fine-tuned checkpoints on disk, and mock
// evaluators whose scores are keyed by what a candidate is (SFT position,
// alpha, beta) rather than by candidate id, so expectations can be computed
// without the pipeline's id scheme.

#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <random>
#include <vector>

#include "exmerge/pipeline.hpp"
#include "exmerge/safetensors.hpp"
#include "support.hpp"

namespace testsupport {

struct SweepFixture {
    TempDir dir;
    fs::path base;
    std::vector<fs::path> sft;

    explicit SweepFixture(std::size_t n_sft, std::uint64_t seed = 1) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::vector<double> w(16);
        std::vector<double> b(4);
        for (double& x : w) x = static_cast<float>(random_magnitude(rng, 0.05, 2.0));
        for (double& x : b) x = static_cast<float>(random_magnitude(rng, 0.05, 2.0));
        auto make = [&](const std::string& name, double rel) {
            exmerge::Checkpoint c;
            std::vector<double> wv(w), bv(b);
            for (double& x : wv) x = static_cast<float>(x * (1 + rel * gauss(rng)));
            for (double& x : bv) x = static_cast<float>(x * (1 + rel * gauss(rng)));
            c.add_values("layer.w", exmerge::DType::F32, {4, 4}, wv);
            c.add_values("layer.b", exmerge::DType::F32, {4}, bv);
            const fs::path p = dir / name;
            exmerge::write_checkpoint(c, p);
            return p;
        };
        base = make("base.safetensors", 0.0);
        for (std::size_t i = 0; i < n_sft; ++i) sft.push_back(make("sft" + std::to_string(i + 1) + ".safetensors", 0.05));
    }

    exmerge::SweepPlan plan(std::vector<double> alphas, std::vector<double> betas,
                            const std::string& work = "work") const {
        exmerge::SweepPlan p;
        p.base = base;
        p.sft = sft;
        p.alpha_grid = std::move(alphas);
        p.beta_grid = std::move(betas);
        p.workdir = dir / work;
        return p;
    }
};

/// Averages by candidate identity: SFT plan position, (SFT position, alpha), beta.
struct ScoreTable {
    std::vector<double> sft;
    std::map<std::pair<std::size_t, double>, double> expo;
    std::map<double, double> merged;
};

inline std::size_t sft_position(const SweepFixture& f, const fs::path& p) {
    for (std::size_t i = 0; i < f.sft.size(); ++i) {
        if (fs::equivalent(f.sft[i], p)) return i;
    }
    throw std::runtime_error("not an SFT checkpoint: " + p.string());
}

/// Score lookup for a request, or nullopt for an unknown candidate.
inline double table_score(const ScoreTable& t, const SweepFixture& f, const exmerge::EvalRequest& r) {
    if (r.recipe.is_null()) return t.sft.at(sft_position(f, r.checkpoint));
    const std::string method = r.recipe.at("method");
    if (method == "expo") {
        const std::size_t pos = sft_position(f, r.recipe["inputs"]["strong"].get<std::string>());
        return t.expo.at({pos, r.recipe["params"]["alpha"].get<double>()});
    }
    return t.merged.at(r.recipe["params"]["beta"].get<double>());
}

inline std::unique_ptr<exmerge::MockEvaluator> table_evaluator(const ScoreTable& t, const SweepFixture& f,
                                                               std::string identity = "mock:score-table") {
    return exmerge::MockEvaluator::function(
        [t, &f](const exmerge::EvalRequest& r) { return std::map<std::string, double>{{"score", table_score(t, f, r)}}; },
        {"score"}, std::move(identity));
}

/// Draws a table over the given grids; with `coarse` scores come from a small
/// set so ties are common.
inline ScoreTable random_table(std::mt19937_64& rng, std::size_t n_sft, const std::vector<double>& alphas,
                               const std::vector<double>& betas, bool coarse) {
    auto draw = [&] {
        if (coarse) return 60.0 + static_cast<double>(rng() % 4);
        return std::uniform_real_distribution<double>(40.0, 80.0)(rng);
    };
    ScoreTable t;
    for (std::size_t i = 0; i < n_sft; ++i) t.sft.push_back(draw());
    for (std::size_t i = 0; i < n_sft; ++i) {
        for (double a : alphas) t.expo[{i, a}] = draw();
    }
    for (double b : betas) t.merged[b] = draw();
    return t;
}

/// Exhaustive selection over a table, written out longhand.
struct ExpectedSelection {
    std::size_t sft_first = 0;   // plan position of the best SFT
    std::size_t sft_second = 0;  // and of the runner-up
    double alpha_first = 0;      // best alpha in each lineage
    double alpha_second = 0;
    std::size_t beta_lineage = 0;  // plan position whose expo model beta multiplies
    double beta = 0;
};

inline ExpectedSelection brute_force(const ScoreTable& t, const std::vector<double>& alphas,
                                     const std::vector<double>& betas, bool beta_on_weaker = true) {
    ExpectedSelection e;
    // best SFT: highest score, earliest position wins ties
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.sft.size(); ++i) {
        if (t.sft[i] > t.sft[best]) best = i;
    }
    std::size_t second = best == 0 ? 1 : 0;
    for (std::size_t i = 0; i < t.sft.size(); ++i) {
        if (i == best) continue;
        if (t.sft[i] > t.sft[second]) second = i;
    }
    e.sft_first = best;
    e.sft_second = second;

    auto best_alpha = [&](std::size_t lineage) {
        double arg = 0;
        double top = -1e300;
        bool any = false;
        for (double a : alphas) {
            const double s = t.expo.at({lineage, a});
            if (!any || s > top || (s == top && a < arg)) {
                arg = a;
                top = s;
                any = true;
            }
        }
        return std::pair{arg, top};
    };
    const auto [a1, s1] = best_alpha(best);
    const auto [a2, s2] = best_alpha(second);
    e.alpha_first = a1;
    e.alpha_second = a2;
    // the first lineage counts as stronger when the extrapolated scores tie
    const bool first_stronger = s1 >= s2;
    const std::size_t stronger = first_stronger ? best : second;
    const std::size_t weaker = first_stronger ? second : best;
    e.beta_lineage = beta_on_weaker ? weaker : stronger;

    double arg = 0;
    double top = -1e300;
    bool any = false;
    for (double b : betas) {
        const double s = t.merged.at(b);
        if (!any || s > top || (s == top && b < arg)) {
            arg = b;
            top = s;
            any = true;
        }
    }
    e.beta = arg;
    return e;
}

/// Reads the selections back out of a final merged record.
inline ExpectedSelection selection_of(const SweepFixture& f, const exmerge::ExmeResult& r) {
    ExpectedSelection s;
    s.sft_first = sft_position(f, r.sft_pair[0].checkpoint_path);
    s.sft_second = sft_position(f, r.sft_pair[1].checkpoint_path);
    s.alpha_first = *r.expo_pair[0].param();
    s.alpha_second = *r.expo_pair[1].param();
    const auto& e1 = r.final.recipe["inputs"]["expo1"];
    s.beta_lineage = sft_position(f, e1["inputs"]["strong"].get<std::string>());
    s.beta = *r.final.param();
    return s;
}

inline bool operator==(const ExpectedSelection& a, const ExpectedSelection& b) {
    return a.sft_first == b.sft_first && a.sft_second == b.sft_second && a.alpha_first == b.alpha_first &&
           a.alpha_second == b.alpha_second && a.beta_lineage == b.beta_lineage && a.beta == b.beta;
}

inline std::ostream& operator<<(std::ostream& os, const ExpectedSelection& s) {
    return os << "{sft " << s.sft_first << "," << s.sft_second << " alpha " << s.alpha_first << "," << s.alpha_second
              << " beta " << s.beta << " on lineage " << s.beta_lineage << "}";
}

}  // namespace testsupport
