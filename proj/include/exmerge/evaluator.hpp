// SPDX-License-Identifier: Apache-2.0
//
// Scoring protocol. An evaluator turns a checkpoint into per-benchmark scores
// (higher is better). The subprocess evaluator runs a shell command template
// in which "{checkpoint}" is replaced by the quoted checkpoint path; the
// child's last non-empty stdout line must be a JSON object mapping each
// expected benchmark to a finite number, and its exit status must be 0.
// EXMERGE_CANDIDATE_ID is exported to the child.

#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "exmerge/errors.hpp"
#include "json.hpp"

namespace exmerge {

struct EvalReport {
    std::map<std::string, double> per_benchmark;
    double average = 0.0;  // unweighted mean of per_benchmark

    static EvalReport from_scores(std::map<std::string, double> scores);

    nlohmann::ordered_json to_json() const;
    static EvalReport from_json(const nlohmann::ordered_json& j);  // throws ValidationError

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvaluatorSpec {
    std::string cmd;
    std::vector<std::string> benchmarks;
    double timeout_seconds = 3600.0;
    unsigned retries = 0;

    void validate() const;  // throws ValidationError

    /// Identifies what the scores mean: the command and the benchmark set.
    /// Timeout and retry policy do not take part.
    std::string key() const;
};

class EvaluatorError : public IoError {
public:
    enum class Reason { Timeout, ExitStatus, MalformedOutput, BenchmarkMismatch, NonFiniteScore };

    EvaluatorError(Reason reason, const std::string& message, std::string stderr_tail = {});

    Reason reason() const noexcept { return reason_; }
    const std::string& stderr_tail() const noexcept { return stderr_tail_; }

private:
    Reason reason_;
    std::string stderr_tail_;
};

std::string_view to_string(EvaluatorError::Reason reason) noexcept;

struct EvalRequest {
    std::filesystem::path checkpoint;
    std::string candidate_id;
    nlohmann::ordered_json recipe;  // pipeline recipe of the candidate, null outside the pipeline
};

/// Checks scores against the expected benchmark set and builds the report.
/// Throws EvaluatorError (BenchmarkMismatch / NonFiniteScore).
EvalReport make_report(const std::map<std::string, double>& scores, const std::vector<std::string>& benchmarks,
                       const std::string& stderr_tail = {});

/// Parses the final non-empty line of `stdout_text` per the protocol.
EvalReport parse_evaluator_output(const std::string& stdout_text, const std::vector<std::string>& benchmarks,
                                  const std::string& stderr_tail = {});

class Evaluator {
public:
    virtual ~Evaluator() = default;

    /// Safe to call from several threads at once.
    virtual EvalReport evaluate(const EvalRequest& request) = 0;
    virtual const std::vector<std::string>& benchmarks() const = 0;
    /// Ledger key: scores recorded under one identity are reused for it.
    virtual std::string identity() const = 0;
};

class SubprocessEvaluator final : public Evaluator {
public:
    explicit SubprocessEvaluator(EvaluatorSpec spec);

    EvalReport evaluate(const EvalRequest& request) override;
    const std::vector<std::string>& benchmarks() const override { return spec_.benchmarks; }
    std::string identity() const override { return spec_.key(); }
    const EvaluatorSpec& spec() const noexcept { return spec_; }

private:
    EvaluatorSpec spec_;
};

/// One-shot form of SubprocessEvaluator.
EvalReport evaluate(const EvaluatorSpec& spec, const std::filesystem::path& checkpoint,
                    const std::string& candidate_id = {});

/// In-process test double with deterministic scores.
class MockEvaluator final : public Evaluator {
public:
    using ScoreFn = std::function<std::map<std::string, double>(const EvalRequest&)>;

    /// Every benchmark scores `score`.
    static std::unique_ptr<MockEvaluator> constant(double score, std::vector<std::string> benchmarks = {"mock"});
    /// Scores looked up by candidate id; unknown ids fail like a broken harness.
    static std::unique_ptr<MockEvaluator> table(std::map<std::string, std::map<std::string, double>> scores,
                                                std::vector<std::string> benchmarks, std::string identity = "mock:table");
    /// Scores computed from the request (candidate id, recipe, path).
    static std::unique_ptr<MockEvaluator> function(ScoreFn fn, std::vector<std::string> benchmarks,
                                                   std::string identity = "mock:function");

    EvalReport evaluate(const EvalRequest& request) override;
    const std::vector<std::string>& benchmarks() const override { return benchmarks_; }
    std::string identity() const override { return identity_; }

    std::size_t invocations() const noexcept { return invocations_.load(); }

private:
    MockEvaluator(ScoreFn fn, std::vector<std::string> benchmarks, std::string identity);

    ScoreFn fn_;
    std::vector<std::string> benchmarks_;
    std::string identity_;
    std::atomic<std::size_t> invocations_{0};
};

/// POSIX shell single-quoting.
std::string shell_quote(const std::string& text);

}  // namespace exmerge
