// SPDX-License-Identifier: Apache-2.0

#include "exmerge/evaluator.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <regex>
#include <set>
#include <thread>

#include "exmerge/digest.hpp"

extern char** environ;

namespace exmerge {

using Json = nlohmann::ordered_json;

namespace {

constexpr std::size_t kStderrTail = 4096;
constexpr std::size_t kStdoutLimit = std::size_t{16} << 20;

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& s : items) {
        if (!out.empty()) out += ", ";
        out += s;
    }
    return out;
}

std::string tail(const std::string& s, std::size_t n) { return s.size() <= n ? s : s.substr(s.size() - n); }

std::string with_tail(std::string message, const std::string& stderr_tail) {
    if (!stderr_tail.empty()) {
        message += "; stderr tail: " + stderr_tail;
    }
    return message;
}

struct Pipe {
    int fd[2] = {-1, -1};

    Pipe() {
        if (::pipe2(fd, O_CLOEXEC) != 0) {
            throw IoError(std::string("pipe failed: ") + std::strerror(errno));
        }
    }
    ~Pipe() {
        close_end(0);
        close_end(1);
    }
    void close_end(int i) {
        if (fd[i] >= 0) {
            ::close(fd[i]);
            fd[i] = -1;
        }
    }
};

struct ChildResult {
    bool timed_out = false;
    int status = 0;
    std::string out;
    std::string err;
};

std::vector<std::string> child_environment(const std::string& candidate_id) {
    std::vector<std::string> env;
    const std::string key = "EXMERGE_CANDIDATE_ID=";
    for (char** e = environ; e && *e; ++e) {
        if (std::strncmp(*e, key.c_str(), key.size()) != 0) env.emplace_back(*e);
    }
    env.push_back(key + candidate_id);
    return env;
}

ChildResult run_child(const std::string& command, const std::string& candidate_id, double timeout_seconds) {
    Pipe out;
    Pipe err;
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, 0, "/dev/null", O_RDONLY, 0);
    posix_spawn_file_actions_adddup2(&actions, out.fd[1], 1);
    posix_spawn_file_actions_adddup2(&actions, err.fd[1], 2);
    posix_spawnattr_t attr;
    posix_spawnattr_init(&attr);
    posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
    posix_spawnattr_setpgroup(&attr, 0);

    std::vector<std::string> env = child_environment(candidate_id);
    std::vector<char*> envp;
    for (auto& e : env) envp.push_back(e.data());
    envp.push_back(nullptr);
    std::string sh = "/bin/sh";
    std::string dash_c = "-c";
    std::string cmd = command;
    char* argv[] = {sh.data(), dash_c.data(), cmd.data(), nullptr};

    pid_t pid = -1;
    const int rc = ::posix_spawn(&pid, "/bin/sh", &actions, &attr, argv, envp.data());
    posix_spawn_file_actions_destroy(&actions);
    posix_spawnattr_destroy(&attr);
    if (rc != 0) {
        throw IoError(std::string("cannot start evaluator: ") + std::strerror(rc));
    }
    out.close_end(1);
    err.close_end(1);

    using Clock = std::chrono::steady_clock;
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                             std::chrono::duration<double>(timeout_seconds));
    ChildResult result;
    bool exited = false;
    char buf[65536];
    for (;;) {
        if (!exited) {
            int status = 0;
            const pid_t w = ::waitpid(pid, &status, WNOHANG);
            if (w == pid) {
                exited = true;
                result.status = status;
            }
        }
        std::vector<pollfd> fds;
        if (out.fd[0] >= 0) fds.push_back({out.fd[0], POLLIN, 0});
        if (err.fd[0] >= 0) fds.push_back({err.fd[0], POLLIN, 0});
        if (fds.empty() && exited) break;

        const auto now = Clock::now();
        if (now >= deadline) {
            result.timed_out = true;
            break;
        }
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
        const int wait_ms = static_cast<int>(std::clamp<long long>(left, 1, fds.empty() ? 10 : 100));
        if (fds.empty()) {
            std::this_thread::sleep_for(std::chrono::milliseconds(wait_ms));
            continue;
        }
        const int n = ::poll(fds.data(), fds.size(), wait_ms);
        if (n < 0 && errno != EINTR) {
            result.timed_out = true;  // treat as unrecoverable; the child is killed below
            break;
        }
        for (const pollfd& p : fds) {
            if (!(p.revents & (POLLIN | POLLHUP | POLLERR))) continue;
            const ssize_t got = ::read(p.fd, buf, sizeof buf);
            Pipe& which = p.fd == out.fd[0] ? out : err;
            if (got <= 0) {
                which.close_end(0);
                continue;
            }
            std::string& sink = &which == &out ? result.out : result.err;
            sink.append(buf, static_cast<std::size_t>(got));
            if (sink.size() > kStdoutLimit) sink.erase(0, sink.size() - kStdoutLimit / 2);
        }
    }
    // the shell's process group may still hold stray grandchildren
    ::kill(-pid, SIGKILL);
    if (!exited) {
        int status = 0;
        while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
        }
        result.status = status;
    }
    return result;
}

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

std::string describe_status(int status) {
    if (WIFEXITED(status)) return "exit status " + std::to_string(WEXITSTATUS(status));
    if (WIFSIGNALED(status)) return "signal " + std::to_string(WTERMSIG(status));
    return "status " + std::to_string(status);
}

}  // namespace

// --------------------------------------------------------------------------

EvalReport EvalReport::from_scores(std::map<std::string, double> scores) {
    EvalReport r;
    double sum = 0.0;
    for (const auto& [k, v] : scores) sum += v;
    r.average = scores.empty() ? 0.0 : sum / static_cast<double>(scores.size());
    r.per_benchmark = std::move(scores);
    return r;
}

Json EvalReport::to_json() const {
    Json scores = Json::object();
    for (const auto& [k, v] : per_benchmark) scores[k] = v;
    return Json{{"scores", std::move(scores)}, {"average", average}};
}

EvalReport EvalReport::from_json(const Json& j) {
    if (!j.is_object() || !j.contains("scores") || !j["scores"].is_object()) {
        throw ValidationError("report must be an object with a 'scores' object");
    }
    std::map<std::string, double> scores;
    for (const auto& [k, v] : j["scores"].items()) {
        if (!v.is_number()) throw ValidationError("report score '" + k + "' is not a number");
        scores[k] = v.get<double>();
    }
    EvalReport r = from_scores(std::move(scores));
    if (j.contains("average")) {
        const double stored = j["average"].get<double>();
        if (!(std::fabs(stored - r.average) <= 1e-9 * std::max(1.0, std::fabs(r.average)))) {
            throw ValidationError("report average does not match its scores");
        }
    }
    return r;
}

void EvaluatorSpec::validate() const {
    if (cmd.empty()) throw ValidationError("evaluator.cmd must be nonempty");
    if (cmd.find("{checkpoint}") == std::string::npos) {
        throw ValidationError("evaluator.cmd must contain the {checkpoint} placeholder");
    }
    if (benchmarks.empty()) throw ValidationError("evaluator.benchmarks must be nonempty");
    std::set<std::string> seen;
    for (const auto& b : benchmarks) {
        if (b.empty()) throw ValidationError("benchmark names must be nonempty");
        if (!seen.insert(b).second) throw ValidationError("duplicate benchmark '" + b + "'");
    }
    if (!(timeout_seconds > 0.0) || !std::isfinite(timeout_seconds)) {
        throw ValidationError("evaluator.timeout must be a positive number of seconds");
    }
    if (retries > 100) throw ValidationError("evaluator.retries must be at most 100");
}

std::string EvaluatorSpec::key() const {
    std::vector<std::string> sorted = benchmarks;
    std::sort(sorted.begin(), sorted.end());
    return "cmd:" + sha256_hex(Json{{"cmd", cmd}, {"benchmarks", sorted}}.dump()).substr(0, 16);
}

EvaluatorError::EvaluatorError(Reason reason, const std::string& message, std::string stderr_tail)
    : IoError(with_tail(message, stderr_tail)), reason_(reason), stderr_tail_(std::move(stderr_tail)) {}

std::string_view to_string(EvaluatorError::Reason reason) noexcept {
    switch (reason) {
        case EvaluatorError::Reason::Timeout: return "timeout";
        case EvaluatorError::Reason::ExitStatus: return "exit_status";
        case EvaluatorError::Reason::MalformedOutput: return "malformed_output";
        case EvaluatorError::Reason::BenchmarkMismatch: return "benchmark_mismatch";
        case EvaluatorError::Reason::NonFiniteScore: return "non_finite_score";
    }
    return "unknown";
}

EvalReport make_report(const std::map<std::string, double>& scores, const std::vector<std::string>& benchmarks,
                       const std::string& stderr_tail) {
    const std::set<std::string> expected(benchmarks.begin(), benchmarks.end());
    std::vector<std::string> missing;
    std::vector<std::string> extra;
    for (const auto& b : expected) {
        if (!scores.contains(b)) missing.push_back(b);
    }
    for (const auto& [k, v] : scores) {
        if (!expected.contains(k)) extra.push_back(k);
    }
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "evaluator output does not match the benchmark set";
        if (!missing.empty()) msg += "; missing benchmark(s): " + join(missing);
        if (!extra.empty()) msg += "; unexpected benchmark(s): " + join(extra);
        throw EvaluatorError(EvaluatorError::Reason::BenchmarkMismatch, msg, stderr_tail);
    }
    for (const auto& [k, v] : scores) {
        if (!std::isfinite(v)) {
            throw EvaluatorError(EvaluatorError::Reason::NonFiniteScore,
                                 "evaluator reported a non-finite score for '" + k + "'", stderr_tail);
        }
    }
    return EvalReport::from_scores(scores);
}

EvalReport parse_evaluator_output(const std::string& stdout_text, const std::vector<std::string>& benchmarks,
                                  const std::string& stderr_tail) {
    std::string last;
    std::size_t end = stdout_text.size();
    while (end > 0) {
        const std::size_t nl = stdout_text.rfind('\n', end - 1);
        const std::size_t begin = nl == std::string::npos ? 0 : nl + 1;
        last = trim(std::string_view(stdout_text).substr(begin, end - begin));
        if (!last.empty() || nl == std::string::npos) break;
        end = nl;
    }
    if (last.empty()) {
        throw EvaluatorError(EvaluatorError::Reason::MalformedOutput, "evaluator printed nothing on stdout",
                             stderr_tail);
    }
    Json doc = Json::parse(last, nullptr, false);
    if (doc.is_discarded()) {
        // Python's json module spells non-finite floats as bare NaN / Infinity
        static const std::regex bare(R"((-?Infinity|NaN)(?=\s*[,}]))");
        doc = Json::parse(std::regex_replace(last, bare, "\"$1\""), nullptr, false);
    }
    if (doc.is_discarded() || !doc.is_object()) {
        throw EvaluatorError(EvaluatorError::Reason::MalformedOutput,
                             "last stdout line is not a JSON object: " + tail(last, 200), stderr_tail);
    }
    std::map<std::string, double> scores;
    for (const auto& [k, v] : doc.items()) {
        if (!v.is_number()) {
            if (v.is_string()) {
                const std::string s = v.get<std::string>();
                if (s == "NaN" || s == "Infinity" || s == "-Infinity") {
                    throw EvaluatorError(EvaluatorError::Reason::NonFiniteScore,
                                         "evaluator reported a non-finite score for '" + k + "'", stderr_tail);
                }
            }
            throw EvaluatorError(EvaluatorError::Reason::MalformedOutput,
                                 "score for '" + k + "' is not a number: " + v.dump(), stderr_tail);
        }
        scores[k] = v.get<double>();
    }
    return make_report(scores, benchmarks, stderr_tail);
}

std::string shell_quote(const std::string& text) {
    std::string out = "'";
    for (char c : text) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out += c;
        }
    }
    return out + "'";
}

// --------------------------------------------------------------------------

SubprocessEvaluator::SubprocessEvaluator(EvaluatorSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

EvalReport SubprocessEvaluator::evaluate(const EvalRequest& request) {
    std::string command;
    const std::string quoted = shell_quote(request.checkpoint.string());
    const std::string placeholder = "{checkpoint}";
    for (std::size_t pos = 0;;) {
        const std::size_t hit = spec_.cmd.find(placeholder, pos);
        if (hit == std::string::npos) {
            command += spec_.cmd.substr(pos);
            break;
        }
        command += spec_.cmd.substr(pos, hit - pos) + quoted;
        pos = hit + placeholder.size();
    }

    for (unsigned attempt = 0;; ++attempt) {
        ChildResult r = run_child(command, request.candidate_id, spec_.timeout_seconds);
        const std::string err_tail = tail(r.err, kStderrTail);
        if (r.timed_out) {
            throw EvaluatorError(EvaluatorError::Reason::Timeout,
                                 "evaluator timed out after " + Json(spec_.timeout_seconds).dump() + " s on '" +
                                     request.checkpoint.string() + "'",
                                 err_tail);
        }
        if (!(WIFEXITED(r.status) && WEXITSTATUS(r.status) == 0)) {
            if (attempt < spec_.retries) continue;
            throw EvaluatorError(EvaluatorError::Reason::ExitStatus,
                                 "evaluator failed with " + describe_status(r.status) + " after " +
                                     std::to_string(attempt + 1) + " attempt(s) on '" + request.checkpoint.string() +
                                     "'",
                                 err_tail);
        }
        return parse_evaluator_output(r.out, spec_.benchmarks, err_tail);
    }
}

EvalReport evaluate(const EvaluatorSpec& spec, const std::filesystem::path& checkpoint,
                    const std::string& candidate_id) {
    SubprocessEvaluator e(spec);
    return e.evaluate({checkpoint, candidate_id, nullptr});
}

// --------------------------------------------------------------------------

MockEvaluator::MockEvaluator(ScoreFn fn, std::vector<std::string> benchmarks, std::string identity)
    : fn_(std::move(fn)), benchmarks_(std::move(benchmarks)), identity_(std::move(identity)) {
    if (benchmarks_.empty()) throw ValidationError("mock evaluator needs at least one benchmark");
}

std::unique_ptr<MockEvaluator> MockEvaluator::constant(double score, std::vector<std::string> benchmarks) {
    auto names = benchmarks;
    ScoreFn fn = [score, names](const EvalRequest&) {
        std::map<std::string, double> s;
        for (const auto& b : names) s[b] = score;
        return s;
    };
    return std::unique_ptr<MockEvaluator>(
        new MockEvaluator(std::move(fn), std::move(benchmarks), "mock:constant:" + Json(score).dump()));
}

std::unique_ptr<MockEvaluator> MockEvaluator::table(std::map<std::string, std::map<std::string, double>> scores,
                                                    std::vector<std::string> benchmarks, std::string identity) {
    ScoreFn fn = [scores = std::move(scores)](const EvalRequest& r) {
        auto it = scores.find(r.candidate_id);
        if (it == scores.end()) {
            throw EvaluatorError(EvaluatorError::Reason::ExitStatus,
                                 "mock table has no scores for candidate '" + r.candidate_id + "'");
        }
        return it->second;
    };
    return std::unique_ptr<MockEvaluator>(new MockEvaluator(std::move(fn), std::move(benchmarks), std::move(identity)));
}

std::unique_ptr<MockEvaluator> MockEvaluator::function(ScoreFn fn, std::vector<std::string> benchmarks,
                                                       std::string identity) {
    return std::unique_ptr<MockEvaluator>(new MockEvaluator(std::move(fn), std::move(benchmarks), std::move(identity)));
}

EvalReport MockEvaluator::evaluate(const EvalRequest& request) {
    ++invocations_;
    return make_report(fn_(request), benchmarks_);
}

}  // namespace exmerge
