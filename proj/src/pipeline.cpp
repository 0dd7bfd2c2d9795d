// SPDX-License-Identifier: Apache-2.0

#include "exmerge/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "exmerge/digest.hpp"
#include "exmerge/merge.hpp"
#include "exmerge/safetensors.hpp"

namespace exmerge {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kLedgerName = "ledger.jsonl";
constexpr std::string_view kReportName = "sweep_report.csv";
constexpr std::string_view kFinalName = "exme_final.safetensors";

std::string errno_text() { return std::strerror(errno); }

std::string format_number(double v) { return Json(v).dump(); }

void check_grid(const std::vector<double>& grid, std::string_view name) {
    if (grid.empty()) throw ValidationError(std::string(name) + " must not be empty");
    std::set<double> seen;
    for (double v : grid) {
        if (!seen.insert(v).second) {
            throw ValidationError(std::string(name) + " lists " + format_number(v) + " twice");
        }
    }
}

std::vector<double> grid_from(const Json& j, std::string_view key) {
    if (!j.is_array()) throw ValidationError("plan key '" + std::string(key) + "' must be an array of numbers");
    std::vector<double> out;
    for (const auto& v : j) {
        if (!v.is_number()) throw ValidationError("plan key '" + std::string(key) + "' must be an array of numbers");
        out.push_back(v.get<double>());
    }
    return out;
}

fs::path path_from(const Json& j, std::string_view key, const fs::path& base_dir) {
    if (!j.is_string() || j.get<std::string>().empty()) {
        throw ValidationError("plan key '" + std::string(key) + "' must be a nonempty path");
    }
    fs::path p = j.get<std::string>();
    return (p.is_relative() ? base_dir / p : p).lexically_normal();
}

unsigned positive_int(const Json& j, std::string_view key) {
    if (!j.is_number_unsigned() || j.get<std::uint64_t>() == 0 || j.get<std::uint64_t>() > 4096) {
        throw ValidationError("plan key '" + std::string(key) + "' must be an integer in [1, 4096]");
    }
    return j.get<unsigned>();
}

EvaluatorSpec evaluator_from(const Json& j) {
    if (!j.is_object()) throw ValidationError("plan key 'evaluator' must be an object");
    EvaluatorSpec s;
    for (const auto& [k, v] : j.items()) {
        if (k == "cmd") {
            if (!v.is_string()) throw ValidationError("evaluator.cmd must be a string");
            s.cmd = v.get<std::string>();
        } else if (k == "benchmarks") {
            if (!v.is_array()) throw ValidationError("evaluator.benchmarks must be an array of names");
            for (const auto& b : v) {
                if (!b.is_string()) throw ValidationError("evaluator.benchmarks must be an array of names");
                s.benchmarks.push_back(b.get<std::string>());
            }
        } else if (k == "timeout") {
            if (!v.is_number()) throw ValidationError("evaluator.timeout must be a number of seconds");
            s.timeout_seconds = v.get<double>();
        } else if (k == "retries") {
            if (!v.is_number_unsigned()) throw ValidationError("evaluator.retries must be a non-negative integer");
            s.retries = v.get<unsigned>();
        } else {
            throw ValidationError("unknown evaluator key '" + k + "'");
        }
    }
    s.validate();
    return s;
}

std::string sha256_json(const Json& j) { return sha256_hex(j.dump()); }

unsigned lineage_number(const std::string& lineage) {
    if (lineage.size() > 3 && lineage.starts_with("sft")) {
        return static_cast<unsigned>(std::stoul(lineage.substr(3)));
    }
    return 0;
}

int stage_rank(Stage s) { return static_cast<int>(s); }

}  // namespace

// ---------------------------------------------------------------------------
// Plan

std::string_view to_string(Stage stage) noexcept {
    switch (stage) {
        case Stage::Base: return "base";
        case Stage::Sft: return "sft";
        case Stage::Expo: return "expo";
        case Stage::Merged: return "merged";
    }
    return "unknown";
}

Stage stage_from_string(std::string_view text) {
    for (Stage s : {Stage::Base, Stage::Sft, Stage::Expo, Stage::Merged}) {
        if (to_string(s) == text) return s;
    }
    throw ValidationError("unknown stage '" + std::string(text) + "'");
}

void SweepPlan::validate() const {
    if (sft.size() < 2) {
        throw ValidationError("need ≥ 2 SFT checkpoints (plan lists " + std::to_string(sft.size()) + ")");
    }
    if (base.empty()) throw ValidationError("plan needs a base checkpoint");
    for (const auto& p : sft) {
        if (p.empty()) throw ValidationError("plan lists an empty SFT path");
    }
    check_grid(alpha_grid, "alpha_grid");
    for (double a : alpha_grid) ExpoParams{a}.validate();
    check_grid(beta_grid, "beta_grid");
    for (double b : beta_grid) MergeWeights::pair(b).validate(2);
    if (workdir.empty()) throw ValidationError("plan needs a workdir");
    if (parallelism == 0) throw ValidationError("parallelism must be at least 1");
    if (threads == 0) throw ValidationError("threads must be at least 1");
    if (evaluator) evaluator->validate();
}

SweepPlan SweepPlan::from_json(const Json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ValidationError("plan must be a JSON object");
    SweepPlan p;
    p.workdir.clear();
    for (const auto& [k, v] : j.items()) {
        if (k == "base") {
            p.base = path_from(v, k, base_dir);
        } else if (k == "sft") {
            if (!v.is_array()) throw ValidationError("plan key 'sft' must be an array of paths");
            for (const auto& s : v) p.sft.push_back(path_from(s, k, base_dir));
        } else if (k == "alpha_grid") {
            p.alpha_grid = grid_from(v, k);
        } else if (k == "beta_grid") {
            p.beta_grid = grid_from(v, k);
        } else if (k == "evaluator") {
            p.evaluator = evaluator_from(v);
        } else if (k == "workdir") {
            p.workdir = path_from(v, k, base_dir);
        } else if (k == "keep_intermediate") {
            if (!v.is_boolean()) throw ValidationError("plan key 'keep_intermediate' must be true or false");
            p.keep_intermediate = v.get<bool>();
        } else if (k == "beta_target") {
            const std::string t = v.is_string() ? v.get<std::string>() : "";
            if (t == "weaker") {
                p.beta_target = BetaTarget::Weaker;
            } else if (t == "stronger") {
                p.beta_target = BetaTarget::Stronger;
            } else {
                throw ValidationError("plan key 'beta_target' must be \"weaker\" or \"stronger\"");
            }
        } else if (k == "parallelism") {
            p.parallelism = positive_int(v, k);
        } else if (k == "threads") {
            p.threads = positive_int(v, k);
        } else {
            throw ValidationError("unknown plan key '" + k + "'");
        }
    }
    if (!j.contains("base")) throw ValidationError("plan needs 'base'");
    if (!j.contains("sft")) throw ValidationError("plan needs 'sft'");
    return p;
}

SweepPlan SweepPlan::load(const fs::path& plan_file) {
    std::ifstream f(plan_file);
    if (!f) throw IoError("cannot open plan " + plan_file.string());
    std::stringstream ss;
    ss << f.rdbuf();
    const Json j = Json::parse(ss.str(), nullptr, false);
    if (j.is_discarded()) throw ValidationError("plan " + plan_file.string() + " is not valid JSON");
    return from_json(j, fs::absolute(plan_file).parent_path());
}

Json SweepPlan::to_json() const {
    Json j;
    j["base"] = base.string();
    j["sft"] = Json::array();
    for (const auto& s : sft) j["sft"].push_back(s.string());
    j["alpha_grid"] = alpha_grid;
    j["beta_grid"] = beta_grid;
    if (evaluator) {
        j["evaluator"] = {{"cmd", evaluator->cmd},
                          {"benchmarks", evaluator->benchmarks},
                          {"timeout", evaluator->timeout_seconds},
                          {"retries", evaluator->retries}};
    }
    j["workdir"] = workdir.string();
    j["keep_intermediate"] = keep_intermediate;
    j["beta_target"] = beta_target == BetaTarget::Weaker ? "weaker" : "stronger";
    j["parallelism"] = parallelism;
    j["threads"] = threads;
    return j;
}

// ---------------------------------------------------------------------------
// Records

std::optional<double> CandidateRecord::param() const {
    if (!recipe.is_object() || !recipe.contains("params")) return std::nullopt;
    const Json& p = recipe["params"];
    if (stage == Stage::Expo && p.contains("alpha")) return p["alpha"].get<double>();
    if (stage == Stage::Merged && p.contains("beta")) return p["beta"].get<double>();
    return std::nullopt;
}

Json CandidateRecord::to_json() const {
    Json j;
    j["candidate_id"] = candidate_id;
    j["stage"] = to_string(stage);
    j["lineage"] = lineage;
    j["recipe"] = recipe;
    j["parents"] = parent_ids;
    j["checkpoint_path"] = checkpoint_path;
    j["content_digest"] = content_digest;
    j["report"] = report ? report->to_json() : Json();
    j["evaluator"] = evaluator;
    return j;
}

CandidateRecord CandidateRecord::from_json(const Json& j) {
    try {
        CandidateRecord r;
        r.candidate_id = j.at("candidate_id").get<std::string>();
        r.stage = stage_from_string(j.at("stage").get<std::string>());
        r.lineage = j.at("lineage").get<std::string>();
        r.recipe = j.at("recipe");
        r.parent_ids = j.at("parents").get<std::vector<std::string>>();
        r.checkpoint_path = j.at("checkpoint_path").get<std::string>();
        r.content_digest = j.at("content_digest").get<std::string>();
        if (!j.at("report").is_null()) r.report = EvalReport::from_json(j.at("report"));
        r.evaluator = j.at("evaluator").get<std::string>();
        return r;
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("malformed candidate record: ") + e.what());
    }
}

std::string input_candidate_id(Stage stage, const std::string& content_digest) {
    return sha256_json(Json{{"stage", to_string(stage)}, {"digest", content_digest}});
}

std::string derived_candidate_id(Stage stage, const Recipe& op, const std::vector<std::string>& parent_ids) {
    return sha256_json(Json{{"stage", to_string(stage)}, {"op", op}, {"parents", parent_ids}});
}

// ---------------------------------------------------------------------------
// Ledger

Ledger::Ledger(fs::path file) : file_(std::move(file)) {
    std::error_code ec;
    if (!fs::exists(file_, ec)) return;
    std::ifstream in(file_, std::ios::binary);
    if (!in) throw IoError("cannot open ledger " + file_.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();

    std::size_t pos = 0;
    std::size_t line_no = 0;
    std::uint64_t keep = text.size();
    bool repair_newline = false;
    while (pos < text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const bool complete = nl != std::string::npos;
        const std::string line = text.substr(pos, complete ? nl - pos : std::string::npos);
        ++line_no;
        const Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            if (complete && line.find_first_not_of(" \t\r") == std::string::npos) {
                pos = nl + 1;
                continue;
            }
            if (!complete) {
                keep = pos;  // torn tail from an interrupted append
                break;
            }
            throw FormatError("ledger " + file_.string() + " line " + std::to_string(line_no) + " is corrupt");
        }
        CandidateRecord r = CandidateRecord::from_json(j);
        const bool dup = std::any_of(records_.begin(), records_.end(), [&](const CandidateRecord& o) {
            return o.candidate_id == r.candidate_id && o.evaluator == r.evaluator;
        });
        if (!dup) records_.push_back(std::move(r));
        if (!complete) {
            repair_newline = true;
            break;
        }
        pos = nl + 1;
    }
    if (keep < text.size()) {
        fs::resize_file(file_, keep, ec);
        if (ec) throw IoError("cannot truncate ledger " + file_.string() + ": " + ec.message());
    }
    if (repair_newline) {
        std::ofstream out(file_, std::ios::app | std::ios::binary);
        out << '\n';
        if (!out) throw IoError("cannot repair ledger " + file_.string());
    }
}

void Ledger::append(const CandidateRecord& record) {
    std::lock_guard lock(mutex_);
    for (const auto& r : records_) {
        if (r.candidate_id == record.candidate_id && r.evaluator == record.evaluator) return;
    }
    const std::string line = record.to_json().dump() + "\n";
    const int fd = ::open(file_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw IoError("cannot open ledger " + file_.string() + ": " + errno_text());
    std::size_t done = 0;
    while (done < line.size()) {
        const ssize_t n = ::write(fd, line.data() + done, line.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string err = errno_text();
            ::close(fd);
            throw IoError("cannot append to ledger " + file_.string() + ": " + err);
        }
        done += static_cast<std::size_t>(n);
    }
    const bool synced = ::fdatasync(fd) == 0;
    ::close(fd);
    if (!synced) throw IoError("cannot sync ledger " + file_.string() + ": " + errno_text());
    records_.push_back(record);
}

std::optional<CandidateRecord> Ledger::find(const std::string& candidate_id, const std::string& evaluator) const {
    std::lock_guard lock(mutex_);
    for (const auto& r : records_) {
        if (r.candidate_id == candidate_id && r.evaluator == evaluator) return r;
    }
    return std::nullopt;
}

std::vector<CandidateRecord> Ledger::records() const {
    std::lock_guard lock(mutex_);
    return records_;
}

std::string Ledger::digest() const {
    auto recs = records();
    std::sort(recs.begin(), recs.end(), [](const CandidateRecord& a, const CandidateRecord& b) {
        return std::tie(a.candidate_id, a.evaluator) < std::tie(b.candidate_id, b.evaluator);
    });
    Sha256 h;
    for (const auto& r : recs) h.update(r.to_json().dump() + "\n");
    return h.hex_digest();
}

std::vector<CandidateRecord> load_ledger(const fs::path& file) {
    if (!fs::exists(file)) throw IoError("no ledger at " + file.string());
    return Ledger(file).records();
}

// ---------------------------------------------------------------------------
// Selection

std::vector<CandidateRecord> select_top_sft(const std::vector<CandidateRecord>& records, std::size_t k) {
    if (k == 0) throw ValidationError("k must be at least 1");
    if (k > records.size()) {
        throw ValidationError("cannot select " + std::to_string(k) + " of " + std::to_string(records.size()) +
                              " records");
    }
    for (const auto& r : records) {
        if (!r.report) throw ValidationError("candidate " + r.candidate_id + " has no score");
    }
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double va = records[a].report->average;
        const double vb = records[b].report->average;
        if (va != vb) return va > vb;
        if (a != b) return a < b;
        return records[a].candidate_id < records[b].candidate_id;
    });
    std::vector<CandidateRecord> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(records[order[i]]);
    return out;
}

std::size_t select_by_param(const std::vector<CandidateRecord>& records) {
    if (records.empty()) throw ValidationError("no candidates to select from");
    std::size_t best = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].report) throw ValidationError("candidate " + records[i].candidate_id + " has no score");
        if (!records[i].param()) throw ValidationError("candidate " + records[i].candidate_id + " has no parameter");
        if (i == 0) continue;
        const double a = records[i].report->average;
        const double b = records[best].report->average;
        if (a > b || (a == b && *records[i].param() < *records[best].param())) best = i;
    }
    return best;
}

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(SweepPlan plan, Evaluator& evaluator, PipelineEvents events)
    : plan_(std::move(plan)), evaluator_(evaluator), events_(std::move(events)), ledger_([&] {
          plan_.validate();
          plan_.base = fs::absolute(plan_.base).lexically_normal();
          for (auto& s : plan_.sft) s = fs::absolute(s).lexically_normal();
          plan_.workdir = fs::absolute(plan_.workdir).lexically_normal();
          std::error_code ec;
          fs::create_directories(plan_.workdir / "candidates", ec);
          if (ec) throw IoError("cannot create workdir " + plan_.workdir.string() + ": " + ec.message());
          return plan_.workdir / kLedgerName;
      }()) {}

CandidateRecord Pipeline::input_record(Stage stage, const fs::path& path, std::string lineage,
                                       std::vector<std::string> parents) {
    const Checkpoint c = cache_.open(path);
    CandidateRecord r;
    r.content_digest = c.content_digest();
    r.candidate_id = input_candidate_id(stage, r.content_digest);
    r.stage = stage;
    r.lineage = std::move(lineage);
    r.parent_ids = std::move(parents);
    r.checkpoint_path = path.string();
    return r;
}

const CandidateRecord& Pipeline::base_record() {
    if (!base_) {
        CandidateRecord b = input_record(Stage::Base, plan_.base, "base", {});
        ledger_.append(b);
        base_ = std::move(b);
    }
    return *base_;
}

CandidateRecord Pipeline::score_one(CandidateRecord c) {
    const bool generated = c.stage == Stage::Expo || c.stage == Stage::Merged;
    const fs::path path = generated ? plan_.workdir / c.checkpoint_path : fs::path(c.checkpoint_path);
    try {
        if (generated) {
            WriteOptions opts;
            opts.threads = plan_.threads;
            const Checkpoint ckpt = build_from_recipe(c.recipe, &cache_);
            c.content_digest = write_checkpoint(ckpt, path, opts).content_digest;
        }
        evaluations_.fetch_add(1);
        c.report = evaluator_.evaluate({path, c.candidate_id, c.recipe});
        c.evaluator = evaluator_.identity();
    } catch (const Error& e) {
        std::error_code ec;
        if (generated && !plan_.keep_intermediate) fs::remove(path, ec);
        std::string what = "candidate " + c.candidate_id + " (" + std::string(to_string(c.stage)) + " " + c.lineage;
        if (auto p = c.param()) what += " " + std::string(c.stage == Stage::Expo ? "alpha" : "beta") + "=" + format_number(*p);
        throw StageError(e.kind(), c.candidate_id, what + "): " + e.what());
    }
    if (generated && !plan_.keep_intermediate) {
        std::error_code ec;
        fs::remove(path, ec);
    }
    ledger_.append(c);
    return c;
}

std::vector<CandidateRecord> Pipeline::score_all(std::vector<CandidateRecord> candidates) {
    const std::string identity = evaluator_.identity();
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (auto done = ledger_.find(candidates[i].candidate_id, identity); done && done->report) {
            candidates[i] = std::move(*done);
            if (events_.on_scored) events_.on_scored(candidates[i], true);
        } else {
            todo.push_back(i);
        }
    }

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
        while (!failed.load()) {
            const std::size_t t = next.fetch_add(1);
            if (t >= todo.size()) return;
            CandidateRecord& c = candidates[todo[t]];
            try {
                c = score_one(std::move(c));
                if (events_.on_scored) events_.on_scored(c, false);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                failed = true;
            }
        }
    };
    const std::size_t workers = std::min<std::size_t>(plan_.parallelism, todo.size());
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
    return candidates;
}

std::vector<CandidateRecord> Pipeline::score_sft() {
    std::vector<Checkpoint> opened{cache_.open(plan_.base)};
    for (const auto& s : plan_.sft) opened.push_back(cache_.open(s));
    std::vector<const Checkpoint*> ptrs;
    for (const auto& c : opened) ptrs.push_back(&c);
    require_same_architecture(ptrs);

    base_record();
    std::vector<CandidateRecord> sft;
    std::map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < plan_.sft.size(); ++i) {
        CandidateRecord r = input_record(Stage::Sft, plan_.sft[i], "sft" + std::to_string(i + 1), {});
        if (auto it = seen.find(r.candidate_id); it != seen.end()) {
            throw ValidationError("SFT checkpoints " + plan_.sft[it->second].string() + " and " +
                                  plan_.sft[i].string() + " have identical contents");
        }
        seen.emplace(r.candidate_id, i);
        sft.push_back(std::move(r));
    }
    return score_all(std::move(sft));
}

std::array<CandidateRecord, 2> Pipeline::run_expo_stage(const std::array<CandidateRecord, 2>& sft_pair) {
    const CandidateRecord& base = base_record();
    std::vector<CandidateRecord> candidates;
    for (const CandidateRecord& sft : sft_pair) {
        if (!sft.report) throw ValidationError("SFT candidate " + sft.candidate_id + " has no score");
        for (double alpha : plan_.alpha_grid) {
            CandidateRecord r;
            r.stage = Stage::Expo;
            r.lineage = sft.lineage;
            r.parent_ids = {sft.candidate_id, base.candidate_id};
            r.candidate_id =
                derived_candidate_id(Stage::Expo, Json{{"method", "expo"}, {"params", {{"alpha", alpha}}}}, r.parent_ids);
            r.recipe = Json{{"method", "expo"},
                            {"inputs", {{"strong", sft.checkpoint_path}, {"weak", base.checkpoint_path}}},
                            {"params", {{"alpha", alpha}}}};
            r.checkpoint_path = "candidates/" + r.candidate_id + ".safetensors";
            candidates.push_back(std::move(r));
        }
    }
    const auto scored = score_all(std::move(candidates));
    const std::size_t n = plan_.alpha_grid.size();
    std::array<CandidateRecord, 2> out;
    for (std::size_t i = 0; i < 2; ++i) {
        const std::vector<CandidateRecord> lineage(scored.begin() + static_cast<std::ptrdiff_t>(i * n),
                                                   scored.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
        out[i] = lineage[select_by_param(lineage)];
    }
    return out;
}

CandidateRecord Pipeline::run_merge_stage(const std::array<CandidateRecord, 2>& expo_pair) {
    for (const auto& e : expo_pair) {
        if (!e.report) throw ValidationError("extrapolated candidate " + e.candidate_id + " has no score");
    }
    // equal averages count the first of the pair as the stronger model
    const std::size_t stronger = expo_pair[1].report->average > expo_pair[0].report->average ? 1 : 0;
    const std::size_t weighted = plan_.beta_target == BetaTarget::Stronger ? stronger : 1 - stronger;
    const CandidateRecord& e1 = expo_pair[weighted];
    const CandidateRecord& e2 = expo_pair[1 - weighted];

    std::vector<CandidateRecord> candidates;
    for (double beta : plan_.beta_grid) {
        CandidateRecord r;
        r.stage = Stage::Merged;
        r.lineage = "exme";
        r.parent_ids = {e1.candidate_id, e2.candidate_id};
        r.candidate_id =
            derived_candidate_id(Stage::Merged, Json{{"method", "exme"}, {"params", {{"beta", beta}}}}, r.parent_ids);
        r.recipe = Json{{"method", "exme"}, {"inputs", {{"expo1", e1.recipe}, {"expo2", e2.recipe}}}, {"params", {{"beta", beta}}}};
        r.checkpoint_path = "candidates/" + r.candidate_id + ".safetensors";
        candidates.push_back(std::move(r));
    }
    const auto scored = score_all(std::move(candidates));
    return scored[select_by_param(scored)];
}

void Pipeline::materialize(const CandidateRecord& record, const fs::path& out) {
    if (!record.recipe.is_object()) throw ValidationError("candidate " + record.candidate_id + " has no recipe");
    WriteOptions opts;
    opts.threads = plan_.threads;
    write_checkpoint(build_from_recipe(record.recipe, &cache_), out, opts);
}

ExmeResult Pipeline::run() {
    const std::size_t before = evaluations();
    const auto sft = score_sft();
    const auto top = select_top_sft(sft, 2);
    ExmeResult result;
    result.sft_pair = {top[0], top[1]};
    result.expo_pair = run_expo_stage(result.sft_pair);
    result.final = run_merge_stage(result.expo_pair);
    result.final_checkpoint = plan_.workdir / kFinalName;
    materialize(result.final, result.final_checkpoint);
    {
        std::ofstream f(plan_.workdir / "exme_final.json", std::ios::binary | std::ios::trunc);
        f << result.final.to_json().dump(2) << '\n';
        if (!f) throw IoError("cannot write " + (plan_.workdir / "exme_final.json").string());
    }
    emit_sweep_report(plan_.workdir);
    result.ledger_digest = ledger_.digest();
    result.evaluations = evaluations() - before;
    return result;
}

ExmeResult run_exme(const SweepPlan& plan, Evaluator& evaluator, PipelineEvents events) {
    Pipeline p(plan, evaluator, std::move(events));
    return p.run();
}

// ---------------------------------------------------------------------------
// Report

std::string sweep_report_csv(const std::vector<CandidateRecord>& records, const std::vector<std::string>& selected) {
    std::vector<const CandidateRecord*> rows;
    std::set<std::string> benchmarks;
    for (const auto& r : records) {
        if (!r.report || r.stage == Stage::Base) continue;
        rows.push_back(&r);
        for (const auto& [b, v] : r.report->per_benchmark) benchmarks.insert(b);
    }
    std::stable_sort(rows.begin(), rows.end(), [](const CandidateRecord* a, const CandidateRecord* b) {
        if (a->stage != b->stage) return stage_rank(a->stage) < stage_rank(b->stage);
        if (a->lineage != b->lineage) return lineage_number(a->lineage) < lineage_number(b->lineage);
        return a->param().value_or(0.0) < b->param().value_or(0.0);
    });
    auto field = [](const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) {
            if (c == '"') q += '"';
            q += c;
        }
        return q + "\"";
    };
    std::ostringstream out;
    out << "stage,lineage,param,value";
    for (const auto& b : benchmarks) out << ',' << field(b);
    out << ",average,selected,candidate_id\n";
    for (const CandidateRecord* r : rows) {
        const auto p = r->param();
        out << to_string(r->stage) << ',' << field(r->lineage) << ','
            << (p ? (r->stage == Stage::Expo ? "alpha" : "beta") : "") << ',' << (p ? format_number(*p) : "");
        for (const auto& b : benchmarks) {
            out << ',';
            if (auto it = r->report->per_benchmark.find(b); it != r->report->per_benchmark.end()) {
                out << format_number(it->second);
            }
        }
        const bool sel = std::find(selected.begin(), selected.end(), r->candidate_id) != selected.end();
        out << ',' << format_number(r->report->average) << ',' << (sel ? 1 : 0) << ',' << r->candidate_id << '\n';
    }
    return out.str();
}

fs::path emit_sweep_report(const fs::path& workdir) {
    auto records = load_ledger(workdir / kLedgerName);

    // report the evaluator of the most recent score
    std::string identity;
    for (const auto& r : records) {
        if (r.report) identity = r.evaluator;
    }
    std::erase_if(records, [&](const CandidateRecord& r) { return !r.report || r.evaluator != identity; });

    std::vector<std::string> selected;
    std::vector<CandidateRecord> sft;
    for (const auto& r : records) {
        if (r.stage == Stage::Sft) sft.push_back(r);
    }
    std::stable_sort(sft.begin(), sft.end(), [](const CandidateRecord& a, const CandidateRecord& b) {
        return lineage_number(a.lineage) < lineage_number(b.lineage);
    });
    if (sft.size() >= 2) {
        for (const auto& r : select_top_sft(sft, 2)) selected.push_back(r.candidate_id);
    }
    std::map<std::string, std::vector<CandidateRecord>> expo;
    std::vector<CandidateRecord> merged;
    for (const auto& r : records) {
        if (r.stage == Stage::Expo) expo[r.lineage].push_back(r);
        if (r.stage == Stage::Merged) merged.push_back(r);
    }
    for (const auto& [lineage, group] : expo) {
        const bool from_selected = std::any_of(sft.begin(), sft.end(), [&](const CandidateRecord& s) {
            return s.lineage == lineage &&
                   std::find(selected.begin(), selected.end(), s.candidate_id) != selected.end();
        });
        if (from_selected) selected.push_back(group[select_by_param(group)].candidate_id);
    }
    if (!merged.empty()) selected.push_back(merged[select_by_param(merged)].candidate_id);

    const fs::path out = workdir / kReportName;
    const fs::path tmp = workdir / (std::string(kReportName) + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f << sweep_report_csv(records, selected);
        if (!f) throw IoError("cannot write " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, out, ec);
    if (ec) throw IoError("cannot write " + out.string() + ": " + ec.message());
    return out;
}

}  // namespace exmerge
