// SPDX-License-Identifier: Apache-2.0

#include "exmerge/recipe.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "exmerge/merge.hpp"
#include "exmerge/safetensors.hpp"

namespace exmerge {

namespace fs = std::filesystem;

namespace {

struct MethodSpec {
    std::string_view name;
    std::vector<std::string_view> roles;  // single-checkpoint roles
    std::string_view list_role;           // "" when none; "*" for a bare inputs array
    std::size_t list_min = 0;
    std::vector<std::string_view> params;
};

const std::vector<MethodSpec>& methods() {
    static const std::vector<MethodSpec> table = {
        {"weighted", {}, "*", 2, {"lambdas"}},
        {"expo", {"strong", "weak"}, "", 0, {"alpha"}},
        {"exme", {"expo1", "expo2"}, "", 0, {"beta"}},
        {"exme_direct", {"base", "sft1", "sft2"}, "", 0, {"beta", "alpha1", "alpha2"}},
        {"ties", {"base"}, "tuned", 1, {"density"}},
        {"dare", {"base"}, "tuned", 1, {"drop_rate", "seed", "lambdas"}},
    };
    return table;
}

const MethodSpec& method_spec(const Recipe& r, const std::string& where) {
    if (!r.is_object()) throw ValidationError(where + "recipe must be a JSON object");
    auto it = r.find("method");
    if (it == r.end() || !it->is_string()) throw ValidationError(where + "recipe needs a string \"method\"");
    const std::string m = it->get<std::string>();
    for (const MethodSpec& s : methods()) {
        if (s.name == m) return s;
    }
    throw ValidationError(where + "unknown method '" + m +
                          "' (expected weighted, expo, exme, exme_direct, ties or dare)");
}

double number(const Recipe& params, std::string_view key, const std::string& where) {
    const auto& v = params.at(std::string(key));
    if (!v.is_number()) throw ValidationError(where + "param '" + std::string(key) + "' must be a number");
    return v.get<double>();
}

std::optional<double> opt_number(const Recipe& params, std::string_view key, const std::string& where) {
    if (!params.contains(std::string(key))) return std::nullopt;
    return number(params, key, where);
}

double required(const Recipe& params, std::string_view key, const std::string& method, const std::string& where) {
    if (!params.contains(std::string(key))) {
        throw ValidationError(where + method + " recipe needs param '" + std::string(key) + "'");
    }
    return number(params, key, where);
}

std::optional<MergeWeights> lambdas(const Recipe& params, const std::string& where) {
    auto it = params.find("lambdas");
    if (it == params.end()) return std::nullopt;
    if (!it->is_array()) throw ValidationError(where + "param 'lambdas' must be an array of numbers");
    MergeWeights w;
    for (const auto& v : *it) {
        if (!v.is_number()) throw ValidationError(where + "param 'lambdas' must be an array of numbers");
        w.lambdas.push_back(v.get<double>());
    }
    return w;
}

std::uint64_t seed(const Recipe& params, const std::string& where) {
    auto it = params.find("seed");
    if (it == params.end()) return 0;
    if (!it->is_number_unsigned()) throw ValidationError(where + "param 'seed' must be a non-negative integer");
    return it->get<std::uint64_t>();
}

const Recipe& params_of(const Recipe& r) {
    static const Recipe empty = Recipe::object();
    auto it = r.find("params");
    return it == r.end() ? empty : *it;
}

// Flattens the inputs of a recipe into (role label, input) pairs in role order.
std::vector<std::pair<std::string, const Recipe*>> input_list(const Recipe& r, const MethodSpec& s,
                                                              const std::string& where) {
    auto it = r.find("inputs");
    if (it == r.end()) throw ValidationError(where + std::string(s.name) + " recipe needs \"inputs\"");
    const Recipe& inputs = *it;
    std::vector<std::pair<std::string, const Recipe*>> out;
    auto add_list = [&](const Recipe& list, const std::string& role) {
        if (!list.is_array()) throw ValidationError(where + "input '" + role + "' must be an array");
        if (list.size() < s.list_min) {
            throw ValidationError(where + std::string(s.name) + " recipe needs at least " +
                                  std::to_string(s.list_min) + " '" + role + "' input(s), got " +
                                  std::to_string(list.size()));
        }
        for (std::size_t i = 0; i < list.size(); ++i) out.emplace_back(role + "[" + std::to_string(i) + "]", &list[i]);
    };
    if (s.list_role == "*") {
        add_list(inputs, "inputs");
        return out;
    }
    if (!inputs.is_object()) throw ValidationError(where + "\"inputs\" must be an object of role -> input");
    std::set<std::string> known;
    for (std::string_view role : s.roles) {
        known.insert(std::string(role));
        auto f = inputs.find(std::string(role));
        if (f == inputs.end()) {
            throw ValidationError(where + std::string(s.name) + " recipe is missing input '" + std::string(role) + "'");
        }
        out.emplace_back(std::string(role), &*f);
    }
    if (!s.list_role.empty()) {
        const std::string role(s.list_role);
        known.insert(role);
        auto f = inputs.find(role);
        if (f == inputs.end()) {
            throw ValidationError(where + std::string(s.name) + " recipe is missing input '" + role + "'");
        }
        add_list(*f, role);
    }
    for (const auto& [k, v] : inputs.items()) {
        if (!known.contains(k)) {
            throw ValidationError(where + "unknown input role '" + k + "' for method " + std::string(s.name));
        }
    }
    return out;
}

void validate_params(const Recipe& r, const MethodSpec& s, std::size_t n_inputs, const std::string& where) {
    const Recipe& p = params_of(r);
    if (!p.is_object()) throw ValidationError(where + "\"params\" must be an object");
    for (const auto& [k, v] : p.items()) {
        if (std::find(s.params.begin(), s.params.end(), k) == s.params.end()) {
            throw ValidationError(where + "unknown param '" + k + "' for method " + std::string(s.name));
        }
    }
    const std::string m(s.name);
    if (m == "weighted") {
        lambdas(p, where).value_or(MergeWeights::uniform(n_inputs)).validate(n_inputs);
    } else if (m == "expo") {
        ExpoParams{required(p, "alpha", m, where)}.validate();
    } else if (m == "exme") {
        MergeWeights::pair(required(p, "beta", m, where)).validate(2);
    } else if (m == "exme_direct") {
        ExmeParams{required(p, "beta", m, where), required(p, "alpha1", m, where), required(p, "alpha2", m, where)}
            .validate();
    } else if (m == "ties") {
        TiesParams{opt_number(p, "density", where).value_or(0.5)}.validate();
    } else if (m == "dare") {
        DareParams{opt_number(p, "drop_rate", where).value_or(0.5), seed(p, where)}.validate();
        lambdas(p, where).value_or(MergeWeights::uniform(n_inputs - 1)).validate(n_inputs - 1);
    }
}

void validate_at(const Recipe& r, bool top_level, const std::string& where) {
    const MethodSpec& s = method_spec(r, where);
    for (const auto& [k, v] : r.items()) {
        if (k == "method" || k == "inputs" || k == "params") continue;
        if (k == "output" && top_level) {
            if (!v.is_string() || v.get<std::string>().empty()) {
                throw ValidationError(where + "\"output\" must be a nonempty path");
            }
            continue;
        }
        throw ValidationError(where + "unknown recipe key '" + k + "'");
    }
    const auto inputs = input_list(r, s, where);
    for (const auto& [role, in] : inputs) {
        if (in->is_string()) {
            if (in->get<std::string>().empty()) throw ValidationError(where + "input '" + role + "' is an empty path");
        } else if (in->is_object()) {
            validate_at(*in, false, where + role + ": ");
        } else {
            throw ValidationError(where + "input '" + role + "' must be a path or a nested recipe");
        }
    }
    validate_params(r, s, inputs.size(), where);
}

Checkpoint build_input(const Recipe& in, CheckpointCache* cache) {
    if (in.is_object()) return build_from_recipe(in, cache);
    const fs::path p = in.get<std::string>();
    return cache ? cache->open(p) : read_checkpoint(p);
}

Recipe resolve_at(Recipe r, const fs::path& dir) {
    auto fix = [&](Recipe& v) {
        if (v.is_string()) {
            const fs::path p = v.get<std::string>();
            if (p.is_relative()) v = (dir / p).lexically_normal().string();
        } else if (v.is_object()) {
            v = resolve_at(std::move(v), dir);
        }
    };
    if (auto it = r.find("output"); it != r.end()) fix(*it);
    if (auto it = r.find("inputs"); it != r.end()) {
        if (it->is_array()) {
            for (auto& v : *it) fix(v);
        } else if (it->is_object()) {
            for (auto& [k, v] : it->items()) {
                if (v.is_array()) {
                    for (auto& e : v) fix(e);
                } else {
                    fix(v);
                }
            }
        }
    }
    return r;
}

}  // namespace

Checkpoint CheckpointCache::open(const fs::path& path) {
    const fs::path key = path.lexically_normal();
    {
        std::lock_guard lock(mutex_);
        if (auto it = open_.find(key); it != open_.end()) return it->second;
    }
    Checkpoint c = read_checkpoint(key);
    std::lock_guard lock(mutex_);
    return open_.try_emplace(key, std::move(c)).first->second;
}

void validate_recipe(const Recipe& recipe) { validate_at(recipe, true, ""); }

Recipe resolve_recipe_paths(Recipe recipe, const fs::path& base_dir) { return resolve_at(std::move(recipe), base_dir); }

Checkpoint build_from_recipe(const Recipe& r, CheckpointCache* cache) {
    validate_at(r, true, "");
    const MethodSpec& s = method_spec(r, "");
    const std::string m(s.name);
    const Recipe& p = params_of(r);
    std::vector<Checkpoint> in;
    for (const auto& [role, input] : input_list(r, s, "")) in.push_back(build_input(*input, cache));

    if (m == "weighted") {
        return weighted_merge(in, lambdas(p, "").value_or(MergeWeights::uniform(in.size())));
    }
    if (m == "expo") return extrapolate(in[0], in[1], ExpoParams{number(p, "alpha", "")});
    if (m == "exme") return exme_merge(in[0], in[1], number(p, "beta", ""));
    if (m == "exme_direct") {
        return exme_direct(in[0], in[1], in[2],
                           ExmeParams{number(p, "beta", ""), number(p, "alpha1", ""), number(p, "alpha2", "")});
    }
    const std::span<const Checkpoint> tuned(in.begin() + 1, in.end());
    if (m == "ties") return ties_merge(in[0], tuned, TiesParams{opt_number(p, "density", "").value_or(0.5)});
    return dare_merge(in[0], tuned, lambdas(p, "").value_or(MergeWeights::uniform(tuned.size())),
                      DareParams{opt_number(p, "drop_rate", "").value_or(0.5), seed(p, "")});
}

Recipe load_recipe(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open recipe " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    Recipe r = Recipe::parse(ss.str(), nullptr, false);
    if (r.is_discarded()) throw ValidationError("recipe " + path.string() + " is not valid JSON");
    r = resolve_recipe_paths(std::move(r), fs::absolute(path).parent_path());
    validate_recipe(r);
    return r;
}

}  // namespace exmerge
