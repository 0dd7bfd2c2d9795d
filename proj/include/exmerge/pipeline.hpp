// SPDX-License-Identifier: Apache-2.0
//
// Three-stage sweep: score the SFT checkpoints and keep the best two,
// extrapolate each against the base over an alpha grid and keep the best per
// lineage, then merge the two winners over a beta grid and keep the best.
//
// Every scored candidate is appended to <workdir>/ledger.jsonl as soon as its
// score is known. A rerun over the same workdir reuses recorded scores
// (keyed by candidate id and evaluator identity), so an interrupted sweep
// resumes where it stopped and a finished one costs no evaluations.

#pragma once

#include <array>
#include <atomic>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "exmerge/evaluator.hpp"
#include "exmerge/recipe.hpp"

namespace exmerge {

enum class Stage { Base, Sft, Expo, Merged };

std::string_view to_string(Stage stage) noexcept;
Stage stage_from_string(std::string_view text);  // throws ValidationError

/// Which extrapolated model the beta coefficient multiplies.
enum class BetaTarget { Weaker, Stronger };

struct SweepPlan {
    std::filesystem::path base;
    std::vector<std::filesystem::path> sft;
    std::vector<double> alpha_grid{0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<double> beta_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::optional<EvaluatorSpec> evaluator;  // may be absent when an evaluator is injected
    std::filesystem::path workdir;
    bool keep_intermediate = false;
    BetaTarget beta_target = BetaTarget::Weaker;
    unsigned parallelism = 1;  // candidates materialised and scored at once
    unsigned threads = 1;      // writer threads per candidate

    /// Throws ValidationError. Does not touch the filesystem.
    void validate() const;

    /// Keys: base, sft, alpha_grid, beta_grid, evaluator {cmd, benchmarks,
    /// timeout, retries}, workdir, keep_intermediate, beta_target
    /// ("weaker" | "stronger"), parallelism, threads. Relative paths resolve
    /// against `base_dir`.
    static SweepPlan from_json(const nlohmann::ordered_json& j, const std::filesystem::path& base_dir);
    static SweepPlan load(const std::filesystem::path& plan_file);
    nlohmann::ordered_json to_json() const;
};

struct CandidateRecord {
    std::string candidate_id;
    Stage stage = Stage::Sft;
    std::string lineage;  // "base", "sft<i>" (1-based plan position) or "exme"
    Recipe recipe;        // null for input checkpoints
    std::vector<std::string> parent_ids;
    std::string checkpoint_path;  // absolute for inputs, workdir-relative for generated candidates
    std::string content_digest;
    std::optional<EvalReport> report;
    std::string evaluator;  // identity the report was produced under

    /// The candidate's hyperparameter: alpha for expo, beta for merged.
    std::optional<double> param() const;

    nlohmann::ordered_json to_json() const;
    static CandidateRecord from_json(const nlohmann::ordered_json& j);  // throws ValidationError

    friend bool operator==(const CandidateRecord&, const CandidateRecord&) = default;
};

/// Self-describing id: sha256 of the canonical record identity.
std::string input_candidate_id(Stage stage, const std::string& content_digest);
std::string derived_candidate_id(Stage stage, const Recipe& op, const std::vector<std::string>& parent_ids);

/// Append-only record store backed by a JSON-lines file. Safe to append from
/// several threads.
class Ledger {
public:
    /// Loads existing records; a torn final line (from a killed writer) is
    /// discarded and truncated away.
    explicit Ledger(std::filesystem::path file);

    const std::filesystem::path& file() const noexcept { return file_; }

    /// Adds and durably persists a record; duplicates (same id and evaluator)
    /// are ignored.
    void append(const CandidateRecord& record);

    std::optional<CandidateRecord> find(const std::string& candidate_id, const std::string& evaluator) const;
    std::vector<CandidateRecord> records() const;

    /// sha256 over the canonical records sorted by (id, evaluator).
    std::string digest() const;

private:
    std::filesystem::path file_;
    mutable std::mutex mutex_;
    std::vector<CandidateRecord> records_;
};

std::vector<CandidateRecord> load_ledger(const std::filesystem::path& file);

/// The k best records by average. Ties go to the earlier position in
/// `records`, then to the smaller candidate id.
std::vector<CandidateRecord> select_top_sft(const std::vector<CandidateRecord>& records, std::size_t k);

/// Index of the best record by average; ties go to the smaller param().
std::size_t select_by_param(const std::vector<CandidateRecord>& records);

/// A candidate-level failure during a stage, naming the candidate.
class StageError : public Error {
public:
    StageError(ErrorKind kind, std::string candidate_id, const std::string& message)
        : Error(kind, message), candidate_id_(std::move(candidate_id)) {}

    const std::string& candidate_id() const noexcept { return candidate_id_; }

private:
    std::string candidate_id_;
};

struct PipelineEvents {
    /// Called after each candidate is scored or found in the ledger.
    std::function<void(const CandidateRecord&, bool reused)> on_scored;
};

struct ExmeResult {
    CandidateRecord final;
    std::array<CandidateRecord, 2> sft_pair;   // best first
    std::array<CandidateRecord, 2> expo_pair;  // expo_pair[i] descends from sft_pair[i]
    std::filesystem::path final_checkpoint;
    std::string ledger_digest;
    std::size_t evaluations = 0;  // evaluator invocations made by this run
};

class Pipeline {
public:
    /// `evaluator` must outlive the pipeline. Creates the workdir.
    Pipeline(SweepPlan plan, Evaluator& evaluator, PipelineEvents events = {});

    const SweepPlan& plan() const noexcept { return plan_; }
    Ledger& ledger() noexcept { return ledger_; }

    /// Records the base and scores every SFT checkpoint, in plan order.
    std::vector<CandidateRecord> score_sft();
    std::array<CandidateRecord, 2> run_expo_stage(const std::array<CandidateRecord, 2>& sft_pair);
    CandidateRecord run_merge_stage(const std::array<CandidateRecord, 2>& expo_pair);
    ExmeResult run();

    /// Writes the checkpoint a generated record describes.
    void materialize(const CandidateRecord& record, const std::filesystem::path& out);

    std::size_t evaluations() const noexcept { return evaluations_.load(); }

private:
    const CandidateRecord& base_record();
    CandidateRecord input_record(Stage stage, const std::filesystem::path& path, std::string lineage,
                                 std::vector<std::string> parents);
    std::vector<CandidateRecord> score_all(std::vector<CandidateRecord> candidates);
    CandidateRecord score_one(CandidateRecord candidate);

    SweepPlan plan_;
    Evaluator& evaluator_;
    PipelineEvents events_;
    Ledger ledger_;
    CheckpointCache cache_;
    std::optional<CandidateRecord> base_;
    std::atomic<std::size_t> evaluations_{0};
};

ExmeResult run_exme(const SweepPlan& plan, Evaluator& evaluator, PipelineEvents events = {});

/// Writes <workdir>/sweep_report.csv from the ledger and returns its path.
/// Columns: stage, lineage, param, value, one per benchmark, average,
/// selected, candidate_id. Rows sort by stage, lineage, then value.
std::filesystem::path emit_sweep_report(const std::filesystem::path& workdir);

/// The CSV text for a set of records; `selected` ids are flagged.
std::string sweep_report_csv(const std::vector<CandidateRecord>& records, const std::vector<std::string>& selected);

}  // namespace exmerge
