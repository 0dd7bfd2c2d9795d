// SPDX-License-Identifier: Apache-2.0
//
// exmerge command-line tool.
//
// Exit codes: 0 ok, 1 diff found differing signatures, 2 invalid input,
// 3 incompatible checkpoints, 4 I/O or evaluator failure. Failures also print
// {"error": {"kind", "code", "message"}} as one JSON line on stderr.

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "exmerge/digest.hpp"
#include "exmerge/merge.hpp"
#include "exmerge/pipeline.hpp"
#include "exmerge/recipe.hpp"
#include "exmerge/safetensors.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using namespace exmerge;

namespace {

struct Globals {
    unsigned threads = 0;  // 0: available parallelism
    bool json = false;
    bool force = false;
    bool resume = false;
    bool verbose = false;

    unsigned thread_count() const {
        if (threads) return threads;
        return std::max(1u, std::thread::hardware_concurrency());
    }
};

void emit_error(const Globals& g, ErrorKind kind, const std::string& message) {
    if (!g.json) std::cerr << "exmerge: error: " << message << '\n';
    const Json j = {{"error", {{"kind", to_string(kind)}, {"code", static_cast<int>(kind)}, {"message", message}}}};
    std::cerr << j.dump() << '\n';
}

void print_json(const Json& j) { std::cout << j.dump(2) << '\n'; }

std::string human_dtype(DType d) {
    switch (d) {
        case DType::F32: return "float32";
        case DType::F16: return "float16";
        case DType::BF16: return "bfloat16";
        case DType::I64: return "int64";
        case DType::I32: return "int32";
        case DType::I8: return "int8";
        case DType::U8: return "uint8";
        case DType::Bool: return "bool";
    }
    return "?";
}

std::string text_of(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// merge

struct MergeArgs {
    std::string recipe_file;
    std::string method;
    std::string output;
    std::vector<std::string> inputs;  // role=path or bare path
    std::optional<double> alpha, alpha1, alpha2, beta, density, drop_rate;
    std::optional<std::uint64_t> seed;
    std::vector<double> lambdas;
};

std::string list_role(const std::string& method) {
    if (method == "weighted") return "";
    if (method == "ties" || method == "dare") return "tuned";
    return "-";
}

// Flags win over recipe-file fields.
Recipe apply_overrides(Recipe r, const MergeArgs& a) {
    if (!r.is_object()) throw ValidationError("recipe must be a JSON object");
    if (!a.method.empty()) r["method"] = a.method;
    if (!a.output.empty()) r["output"] = fs::absolute(a.output).lexically_normal().string();
    const std::string method = r.value("method", "");

    if (!a.inputs.empty()) {
        std::map<std::string, std::vector<std::string>> by_role;
        std::vector<std::string> order;
        for (const std::string& spec : a.inputs) {
            const auto eq = spec.find('=');
            std::string role = eq == std::string::npos ? "" : spec.substr(0, eq);
            const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
            if (path.empty()) throw ValidationError("--input '" + spec + "' has an empty path");
            if (role.empty()) {
                role = list_role(method);
                if (role == "-") throw ValidationError("--input '" + spec + "' needs a role for method " + method);
            }
            if (!by_role.contains(role)) order.push_back(role);
            by_role[role].push_back(fs::absolute(path).lexically_normal().string());
        }
        if (method == "weighted") {
            if (by_role.size() != 1 || !by_role.contains("")) {
                throw ValidationError("weighted takes plain --input paths");
            }
            r["inputs"] = by_role[""];
        } else {
            if (!r.contains("inputs") || !r["inputs"].is_object()) r["inputs"] = Json::object();
            for (const auto& role : order) {
                const auto& paths = by_role[role];
                if (role == list_role(method)) {
                    r["inputs"][role] = paths;
                } else if (paths.size() == 1) {
                    r["inputs"][role] = paths[0];
                } else {
                    throw ValidationError("--input role '" + role + "' given more than once");
                }
            }
        }
    }

    auto set = [&](const char* key, const auto& v) {
        if (!v) return;
        if (!r.contains("params") || !r["params"].is_object()) r["params"] = Json::object();
        r["params"][key] = *v;
    };
    set("alpha", a.alpha);
    set("alpha1", a.alpha1);
    set("alpha2", a.alpha2);
    set("beta", a.beta);
    set("density", a.density);
    set("drop_rate", a.drop_rate);
    set("seed", a.seed);
    if (!a.lambdas.empty()) set("lambdas", std::optional<std::vector<double>>(a.lambdas));
    return r;
}

int cmd_merge(const Globals& g, const MergeArgs& a) {
    Recipe r = Recipe::object();
    if (!a.recipe_file.empty()) {
        const fs::path file = a.recipe_file;
        r = Recipe::parse(text_of(file), nullptr, false);
        if (r.is_discarded()) throw ValidationError("recipe " + file.string() + " is not valid JSON");
        r = resolve_recipe_paths(std::move(r), fs::absolute(file).parent_path());
    }
    r = apply_overrides(std::move(r), a);
    validate_recipe(r);
    if (!r.contains("output")) throw ValidationError("no output path: set \"output\" in the recipe or pass --output");
    const fs::path out = r["output"].get<std::string>();
    if (fs::exists(out) && !g.force) {
        throw ValidationError("output " + out.string() + " exists; pass --force to overwrite");
    }

    const Checkpoint merged = build_from_recipe(r);
    WriteOptions opts;
    opts.threads = g.thread_count();
    const WriteSummary s = write_checkpoint(merged, out, opts);
    const std::string& prov = merged.metadata().at(std::string(kProvenanceKey));
    const std::string prov_digest = sha256_hex(prov);

    if (g.json) {
        Json nf = Json::object();
        for (const auto& [name, n] : s.nonfinite) nf[name] = n;
        print_json({{"output", out.string()},
                    {"method", r["method"]},
                    {"content_digest", s.content_digest},
                    {"provenance_digest", prov_digest},
                    {"file_bytes", s.file_bytes},
                    {"nonfinite", nf}});
    } else {
        std::cout << "wrote " << out.string() << " (" << s.file_bytes << " bytes)\n"
                  << "content digest     " << s.content_digest << '\n'
                  << "provenance digest  " << prov_digest << '\n';
        for (const auto& [name, n] : s.nonfinite) {
            std::cerr << "warning: " << name << " has " << n << " non-finite value(s)\n";
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// exme

struct ExmeArgs {
    std::string plan_file;
    std::string workdir;
    bool keep_intermediate = false;
};

std::string format_report_table(const std::string& csv) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(csv);
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::string cell;
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            const char c = line[i];
            if (quoted) {
                if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                    cell += '"';
                    ++i;
                } else if (c == '"') {
                    quoted = false;
                } else {
                    cell += c;
                }
            } else if (c == '"') {
                quoted = true;
            } else if (c == ',') {
                cells.push_back(std::move(cell));
                cell.clear();
            } else {
                cell += c;
            }
        }
        cells.push_back(std::move(cell));
        cells.pop_back();  // candidate ids are in the ledger
        rows.push_back(std::move(cells));
    }
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        width.resize(std::max(width.size(), r.size()));
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::ostringstream out;
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (i + 1 == r.size()) {
                out << r[i];
            } else {
                out << std::left << std::setw(static_cast<int>(width[i]) + 2) << r[i];
            }
        }
        out << '\n';
    }
    return out.str();
}

int cmd_exme(const Globals& g, const ExmeArgs& a) {
    SweepPlan plan = SweepPlan::load(a.plan_file);
    if (!a.workdir.empty()) {
        plan.workdir = fs::absolute(a.workdir).lexically_normal();
    } else if (plan.workdir.empty()) {
        if (const char* env = std::getenv("EXMERGE_WORKDIR"); env && *env) {
            plan.workdir = fs::absolute(env).lexically_normal();
        } else {
            throw ValidationError("no workdir: set \"workdir\" in the plan, pass --workdir or set EXMERGE_WORKDIR");
        }
    }
    if (a.keep_intermediate) plan.keep_intermediate = true;
    if (g.threads) plan.threads = g.threads;
    plan.validate();
    if (!plan.evaluator) throw ValidationError("plan needs an \"evaluator\" section");

    const fs::path ledger = plan.workdir / "ledger.jsonl";
    if (fs::exists(ledger)) {
        if (g.force) {
            for (const char* name : {"ledger.jsonl", "sweep_report.csv", "exme_final.safetensors", "exme_final.json"}) {
                fs::remove(plan.workdir / name);
            }
        } else if (!g.resume) {
            throw ValidationError("workdir " + plan.workdir.string() +
                                  " already has a ledger; pass --resume to continue it or --force to start over");
        }
    }

    SubprocessEvaluator evaluator(*plan.evaluator);
    PipelineEvents events;
    if (g.verbose) {
        events.on_scored = [](const CandidateRecord& r, bool reused) {
            std::cerr << (reused ? "reused " : "scored ") << to_string(r.stage) << ' ' << r.lineage;
            if (auto p = r.param()) std::cerr << (r.stage == Stage::Expo ? " alpha=" : " beta=") << *p;
            std::cerr << " average=" << r.report->average << " id=" << r.candidate_id.substr(0, 12) << '\n';
        };
    }
    const ExmeResult res = run_exme(plan, evaluator, events);
    const fs::path report = plan.workdir / "sweep_report.csv";

    if (g.json) {
        print_json({{"final", res.final.to_json()},
                    {"final_checkpoint", res.final_checkpoint.string()},
                    {"sft_pair", {res.sft_pair[0].candidate_id, res.sft_pair[1].candidate_id}},
                    {"expo_pair", {res.expo_pair[0].candidate_id, res.expo_pair[1].candidate_id}},
                    {"ledger_digest", res.ledger_digest},
                    {"evaluations", res.evaluations},
                    {"report", report.string()}});
    } else {
        const auto& e1 = res.final.recipe["inputs"]["expo1"];
        const auto& e2 = res.final.recipe["inputs"]["expo2"];
        std::cout << "final model  " << res.final_checkpoint.string() << '\n'
                  << "average      " << res.final.report->average << '\n'
                  << "beta         " << *res.final.param() << "  (weights " << e1["inputs"]["strong"].get<std::string>()
                  << " extrapolated with alpha " << e1["params"]["alpha"] << ")\n"
                  << "1 - beta     " << e2["inputs"]["strong"].get<std::string>() << " extrapolated with alpha "
                  << e2["params"]["alpha"] << '\n'
                  << "evaluations  " << res.evaluations << " this run\n\n"
                  << "recipe\n"
                  << res.final.recipe.dump(2) << "\n\n"
                  << format_report_table(text_of(report));
    }
    return 0;
}

// ---------------------------------------------------------------------------
// inspect / diff / report

Json tensor_listing(const Checkpoint& c) {
    const DiffStats norms = checkpoint_norms(c);
    const auto nonfinite = nonfinite_counts(c);
    Json tensors = Json::array();
    for (std::size_t i = 0; i < c.size(); ++i) {
        const TensorMeta& m = c.tensors()[i];
        Json t = {{"name", m.name},
                  {"dtype", dtype_tag(m.dtype)},
                  {"shape", m.shape},
                  {"numel", m.numel()},
                  {"bytes", m.nbytes()},
                  {"l2", norms.tensors[i].l2},
                  {"linf", norms.tensors[i].linf}};
        if (auto it = nonfinite.find(m.name); it != nonfinite.end()) t["nonfinite"] = it->second;
        tensors.push_back(std::move(t));
    }
    return tensors;
}

int cmd_inspect(const Globals& g, const std::string& path) {
    const Checkpoint c = read_checkpoint(path);
    std::map<std::string, std::uint64_t> hist;
    for (const auto& m : c.tensors()) ++hist[std::string(dtype_tag(m.dtype))];
    const Json tensors = tensor_listing(c);
    Json signature = Json::array();
    for (const auto& e : arch_signature(c).entries) {
        signature.push_back({{"name", e.name}, {"dtype", dtype_tag(e.dtype)}, {"shape", e.shape}});
    }
    if (g.json) {
        Json md = Json::object();
        for (const auto& [k, v] : c.metadata()) md[k] = v;
        print_json({{"path", path},
                    {"tensor_count", c.size()},
                    {"data_bytes", c.data_size()},
                    {"content_digest", c.content_digest()},
                    {"dtype_histogram", hist},
                    {"signature", signature},
                    {"tensors", tensors},
                    {"metadata", md}});
        return 0;
    }
    std::cout << path << '\n'
              << "  tensors " << c.size() << ", data " << c.data_size() << " bytes\n"
              << "  content digest " << c.content_digest() << '\n'
              << "  dtypes";
    for (const auto& [tag, n] : hist) std::cout << "  " << human_dtype(*parse_dtype_tag(tag)) << " x" << n;
    std::cout << '\n';
    std::size_t w = 4;
    for (const auto& m : c.tensors()) w = std::max(w, m.name.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        const TensorMeta& m = c.tensors()[i];
        std::cout << "  " << std::left << std::setw(static_cast<int>(w) + 2) << m.name << std::setw(10)
                  << human_dtype(m.dtype) << std::setw(16) << format_shape(m.shape) << "l2 " << std::setw(14)
                  << tensors[i]["l2"].get<double>() << "linf " << tensors[i]["linf"].get<double>();
        if (tensors[i].contains("nonfinite")) std::cout << "  nonfinite " << tensors[i]["nonfinite"];
        std::cout << '\n';
    }
    for (const auto& [k, v] : c.metadata()) std::cout << "  meta " << k << " = " << v << '\n';
    return 0;
}

int cmd_diff(const Globals& g, const std::string& a_path, const std::string& b_path) {
    const Checkpoint a = read_checkpoint(a_path);
    const Checkpoint b = read_checkpoint(b_path);
    const auto diffs = signature_differences(arch_signature(a), arch_signature(b));
    if (!diffs.empty()) {
        if (g.json) {
            Json d = Json::array();
            for (const auto& x : diffs) d.push_back({{"tensor", x.tensor}, {"description", x.description}});
            print_json({{"a", a_path}, {"b", b_path}, {"same_signature", false}, {"differences", d}});
        } else {
            std::cout << "signatures differ (" << diffs.size() << " tensor(s))\n";
            for (const auto& x : diffs) std::cout << "  " << x.tensor << ": " << x.description << '\n';
        }
        return 1;
    }
    const DiffStats s = checkpoint_diff_norm(a, b);
    if (g.json) {
        Json t = Json::array();
        for (const auto& d : s.tensors) t.push_back({{"name", d.name}, {"l2", d.l2}, {"linf", d.linf}});
        print_json({{"a", a_path}, {"b", b_path}, {"same_signature", true}, {"l2", s.l2}, {"linf", s.linf}, {"tensors", t}});
        return 0;
    }
    std::cout << "same signature; ||a - b||_2 = " << s.l2 << ", ||a - b||_inf = " << s.linf << '\n';
    std::size_t w = 4;
    for (const auto& d : s.tensors) w = std::max(w, d.name.size());
    for (const auto& d : s.tensors) {
        std::cout << "  " << std::left << std::setw(static_cast<int>(w) + 2) << d.name << "l2 " << std::setw(14) << d.l2
                  << "linf " << d.linf << '\n';
    }
    return 0;
}

int cmd_report(const Globals& g, const std::string& workdir) {
    const fs::path out = emit_sweep_report(workdir);
    const std::string csv = text_of(out);
    const auto rows = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
    if (g.json) {
        print_json({{"report", out.string()}, {"rows", rows > 0 ? rows - 1 : 0}});
    } else {
        std::cout << "wrote " << out.string() << '\n' << format_report_table(csv);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    Globals g;
    CLI::App app{"Checkpoint merging, extrapolation and ExMe sweeps over safetensors files."};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--threads", g.threads, "Writer threads (default: available parallelism)")
        ->check(CLI::Range(1u, 4096u));
    app.add_flag("--json", g.json, "Machine-readable output");
    app.add_flag("--force", g.force, "Overwrite outputs; restart an existing sweep");
    app.add_flag("--resume", g.resume, "Continue a sweep from its ledger");
    app.add_flag("--verbose", g.verbose, "Progress on stderr");

    MergeArgs m;
    auto* merge = app.add_subcommand("merge", "Run one merge recipe");
    merge->add_option("recipe", m.recipe_file, "Recipe JSON file");
    merge->add_option("--method", m.method, "weighted, expo, exme, exme_direct, ties or dare");
    merge->add_option("--output,-o", m.output, "Output checkpoint");
    merge->add_option("--input,-i", m.inputs, "role=path, or a bare path for list roles")
        ->expected(1)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    merge->add_option("--alpha", m.alpha);
    merge->add_option("--alpha1", m.alpha1);
    merge->add_option("--alpha2", m.alpha2);
    merge->add_option("--beta", m.beta);
    merge->add_option("--density", m.density);
    merge->add_option("--drop-rate", m.drop_rate);
    merge->add_option("--seed", m.seed);
    merge->add_option("--lambdas", m.lambdas, "Comma-separated weights")->delimiter(',');

    ExmeArgs e;
    auto* exme = app.add_subcommand("exme", "Run the select / extrapolate / merge sweep of a plan");
    exme->add_option("plan", e.plan_file, "Plan JSON file")->required();
    exme->add_option("--workdir", e.workdir, "Overrides the plan's workdir and EXMERGE_WORKDIR");
    exme->add_flag("--keep-intermediate", e.keep_intermediate);

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "List tensors, dtypes and norms");
    inspect->add_option("checkpoint", inspect_path)->required();

    std::string diff_a, diff_b;
    auto* diff = app.add_subcommand("diff", "Compare signatures and weights of two checkpoints");
    diff->add_option("a", diff_a)->required();
    diff->add_option("b", diff_b)->required();

    std::string report_dir;
    auto* report = app.add_subcommand("report", "Write sweep_report.csv from a sweep's ledger");
    report->add_option("workdir", report_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        if (err.get_exit_code() == 0) return app.exit(err);
        emit_error(g, ErrorKind::Validation, err.what());
        return static_cast<int>(ErrorKind::Validation);
    }

    try {
        if (merge->parsed()) return cmd_merge(g, m);
        if (exme->parsed()) return cmd_exme(g, e);
        if (inspect->parsed()) return cmd_inspect(g, inspect_path);
        if (diff->parsed()) return cmd_diff(g, diff_a, diff_b);
        if (report->parsed()) return cmd_report(g, report_dir);
    } catch (const Error& err) {
        emit_error(g, err.kind(), err.what());
        return err.exit_code();
    } catch (const fs::filesystem_error& err) {
        emit_error(g, ErrorKind::Io, err.what());
        return static_cast<int>(ErrorKind::Io);
    } catch (const std::exception& err) {
        emit_error(g, ErrorKind::Io, std::string("unexpected failure: ") + err.what());
        return static_cast<int>(ErrorKind::Io);
    }
    return 0;
}
