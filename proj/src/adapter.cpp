// SPDX-License-Identifier: Apache-2.0
#include "loramerge/adapter.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "loramerge/safetensors.hpp"

namespace loramerge {

using nlohmann::json;

const char* to_string(ModuleType t) { return kModuleTypeNames[static_cast<int>(t)]; }

ModuleType module_type_from_string(const std::string& name) {
    for (int i = 0; i < kNumModuleTypes; ++i)
        if (name == kModuleTypeNames[i]) return static_cast<ModuleType>(i);
    throw ArgumentError("unknown module type: " + name);
}

std::string to_string(const ModulePath& p) {
    return "layers." + std::to_string(p.layer) + "." +
           (is_attention(p.type) ? "self_attn." : "mlp.") + to_string(p.type);
}

ModulePath module_path_from_string(const std::string& s) {
    // layers.{l}.{self_attn|mlp}.{type}
    const std::string prefix = "layers.";
    if (s.rfind(prefix, 0) != 0) throw ArgumentError("bad module path: " + s);
    const auto dot1 = s.find('.', prefix.size());
    if (dot1 == std::string::npos) throw ArgumentError("bad module path: " + s);
    const int layer = std::stoi(s.substr(prefix.size(), dot1 - prefix.size()));
    const auto dot2 = s.find('.', dot1 + 1);
    if (dot2 == std::string::npos) throw ArgumentError("bad module path: " + s);
    const std::string group = s.substr(dot1 + 1, dot2 - dot1 - 1);
    const ModuleType type = module_type_from_string(s.substr(dot2 + 1));
    if ((group == "self_attn") != is_attention(type))
        throw ArgumentError("module path group/type mismatch: " + s);
    return ModulePath{layer, type};
}

std::vector<ModulePath> ModelConfig::all_module_paths() const {
    std::vector<ModulePath> out;
    out.reserve(static_cast<std::size_t>(n_layers) * kNumModuleTypes);
    for (int l = 0; l < n_layers; ++l)
        for (int t = 0; t < kNumModuleTypes; ++t)
            out.push_back(ModulePath{l, static_cast<ModuleType>(t)});
    return out;
}

const char* to_string(LoraVariant v) {
    return v == LoraVariant::standard ? "standard" : "rank-stabilized";
}

LoraVariant lora_variant_from_string(const std::string& s) {
    if (s == "standard") return LoraVariant::standard;
    if (s == "rank-stabilized") return LoraVariant::rank_stabilized;
    throw ArgumentError("unknown LoRA variant: " + s);
}

double lora_scaling(double alpha, std::size_t rank, LoraVariant variant) {
    if (rank < 1) throw ArgumentError("lora_scaling: rank must be >= 1");
    return variant == LoraVariant::standard ? alpha / static_cast<double>(rank)
                                            : alpha / std::sqrt(static_cast<double>(rank));
}

const char* to_string(DefectKind k) {
    switch (k) {
        case DefectKind::shape_mismatch: return "shape-mismatch";
        case DefectKind::nan_or_inf: return "nan-or-inf";
        case DefectKind::abnormal_magnitude: return "abnormal-magnitude";
        case DefectKind::unsupported_feature: return "unsupported-feature";
    }
    return "?";
}

std::string peft_tensor_name(const ModulePath& p, bool is_a) {
    return "base_model.model.model.layers." + std::to_string(p.layer) + "." +
           (is_attention(p.type) ? "self_attn." : "mlp.") + to_string(p.type) +
           (is_a ? ".lora_A.weight" : ".lora_B.weight");
}

std::optional<std::pair<ModulePath, bool>> parse_peft_tensor_name(const std::string& name) {
    const std::string prefix = "base_model.model.model.layers.";
    if (name.rfind(prefix, 0) != 0) return std::nullopt;
    std::size_t pos = prefix.size();
    const auto dot1 = name.find('.', pos);
    if (dot1 == std::string::npos) return std::nullopt;
    int layer;
    try {
        layer = std::stoi(name.substr(pos, dot1 - pos));
    } catch (...) {
        return std::nullopt;
    }
    const auto dot2 = name.find('.', dot1 + 1);
    if (dot2 == std::string::npos) return std::nullopt;
    const std::string group = name.substr(dot1 + 1, dot2 - dot1 - 1);
    const auto dot3 = name.find('.', dot2 + 1);
    if (dot3 == std::string::npos) return std::nullopt;
    const std::string type_name = name.substr(dot2 + 1, dot3 - dot2 - 1);
    const std::string tail = name.substr(dot3 + 1);
    bool is_a;
    if (tail == "lora_A.weight")
        is_a = true;
    else if (tail == "lora_B.weight")
        is_a = false;
    else
        return std::nullopt;
    for (int i = 0; i < kNumModuleTypes; ++i) {
        if (type_name == kModuleTypeNames[i]) {
            const auto type = static_cast<ModuleType>(i);
            if ((group == "self_attn") != is_attention(type)) return std::nullopt;
            if (group != "self_attn" && group != "mlp") return std::nullopt;
            return std::pair{ModulePath{layer, type}, is_a};
        }
    }
    return std::nullopt;
}

std::string sidecar_path(const std::string& adapter_path) {
    std::filesystem::path p(adapter_path);
    p.replace_extension(".json");
    return p.string();
}

RawAdapter load_raw_adapter(const std::string& path) {
    RawAdapter raw;
    raw.name = std::filesystem::path(path).stem().string();

    SafetensorsFile file = load_safetensors(path);
    for (auto& [name, entry] : file.tensors) raw.tensors.emplace(name, std::move(entry.data));
    raw.metadata = file.metadata;

    const std::string side = sidecar_path(path);
    std::ifstream in(side);
    if (!in) throw IoError("adapter: missing sidecar config " + side);
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("adapter: malformed sidecar " + side + ": " + e.what());
    }
    raw.alpha = cfg.at("alpha").get<double>();
    raw.rank = cfg.at("rank").get<std::size_t>();
    raw.variant = lora_variant_from_string(cfg.value("variant", "standard"));
    if (cfg.contains("metadata"))
        for (const auto& [k, v] : cfg["metadata"].items()) raw.metadata[k] = v.get<std::string>();
    return raw;
}

namespace {

void check_matrix_health(const Matrix& m, const std::string& where, double cap,
                         ValidationReport& report) {
    if (!m.all_finite()) {
        report.reasons.push_back({DefectKind::nan_or_inf, where + " contains NaN or Inf"});
    } else if (m.max_abs() > cap) {
        report.reasons.push_back(
            {DefectKind::abnormal_magnitude,
             where + " max-abs " + std::to_string(m.max_abs()) + " exceeds cap " +
                 std::to_string(cap)});
    }
}

}  // namespace

ValidationReport validate_adapter(const RawAdapter& raw, const ModelConfig& base_config,
                                  double magnitude_cap) {
    ValidationReport report;
    report.adapter = raw.name;

    if (raw.rank < 1)
        report.reasons.push_back({DefectKind::shape_mismatch, "declared rank must be >= 1"});

    std::map<ModulePath, const Matrix*> a_mats, b_mats;
    for (const auto& [name, tensor] : raw.tensors) {
        const auto parsed = parse_peft_tensor_name(name);
        if (!parsed) {
            report.reasons.push_back(
                {DefectKind::unsupported_feature,
                 "tensor " + name + " is not a LoRA factor of a supported module type"});
            continue;
        }
        const auto& [path, is_a] = *parsed;
        if (!base_config.contains(path)) {
            report.reasons.push_back({DefectKind::shape_mismatch,
                                      "module " + to_string(path) +
                                          " does not exist in the base config (layers=" +
                                          std::to_string(base_config.n_layers) + ")"});
            continue;
        }
        (is_a ? a_mats : b_mats)[path] = &tensor;
    }

    std::set<std::size_t> ranks_seen;
    for (const auto& [path, a] : a_mats) {
        const auto bit = b_mats.find(path);
        if (bit == b_mats.end()) {
            report.reasons.push_back({DefectKind::shape_mismatch,
                                      "module " + to_string(path) + " has lora_A but no lora_B"});
            continue;
        }
        const Matrix& am = *a;
        const Matrix& bm = *bit->second;
        const std::size_t in = base_config.in_dim(path.type);
        const std::size_t out = base_config.out_dim(path.type);
        if (am.cols() != in)
            report.reasons.push_back({DefectKind::shape_mismatch,
                                      "module " + to_string(path) + ": lora_A is " + am.shape() +
                                          ", expected r x " + std::to_string(in)});
        if (bm.rows() != out)
            report.reasons.push_back({DefectKind::shape_mismatch,
                                      "module " + to_string(path) + ": lora_B is " + bm.shape() +
                                          ", expected " + std::to_string(out) + " x r"});
        if (am.rows() != bm.cols())
            report.reasons.push_back({DefectKind::shape_mismatch,
                                      "module " + to_string(path) + ": lora_A rank " +
                                          std::to_string(am.rows()) + " != lora_B rank " +
                                          std::to_string(bm.cols())});
        else
            ranks_seen.insert(am.rows());
        if (am.rows() < 1)
            report.reasons.push_back(
                {DefectKind::shape_mismatch, "module " + to_string(path) + ": rank 0 factor"});
        check_matrix_health(am, "module " + to_string(path) + " lora_A", magnitude_cap, report);
        check_matrix_health(bm, "module " + to_string(path) + " lora_B", magnitude_cap, report);
    }
    for (const auto& [path, b] : b_mats) {
        (void)b;
        if (a_mats.find(path) == a_mats.end())
            report.reasons.push_back({DefectKind::shape_mismatch,
                                      "module " + to_string(path) + " has lora_B but no lora_A"});
    }
    if (a_mats.empty() && report.reasons.empty())
        report.reasons.push_back(
            {DefectKind::unsupported_feature, "adapter targets no supported modules"});
    if (ranks_seen.size() > 1)
        report.reasons.push_back(
            {DefectKind::unsupported_feature,
             "per-module rank pattern (" + std::to_string(ranks_seen.size()) +
                 " distinct ranks); uniform rank required"});
    else if (ranks_seen.size() == 1 && *ranks_seen.begin() != raw.rank)
        report.reasons.push_back({DefectKind::shape_mismatch,
                                  "tensor rank " + std::to_string(*ranks_seen.begin()) +
                                      " does not match declared rank " +
                                      std::to_string(raw.rank)});
    return report;
}

namespace {

RawAdapter to_raw(const LoraAdapter& adapter) {
    RawAdapter raw;
    raw.name = adapter.name;
    raw.alpha = adapter.alpha;
    raw.rank = adapter.rank;
    raw.variant = adapter.variant;
    raw.metadata = adapter.metadata;
    for (const auto& [path, pair] : adapter.modules) {
        raw.tensors.emplace(peft_tensor_name(path, true), pair.a);
        raw.tensors.emplace(peft_tensor_name(path, false), pair.b);
    }
    return raw;
}

}  // namespace

ValidationReport validate_adapter(const LoraAdapter& adapter, const ModelConfig& base_config,
                                  double magnitude_cap) {
    return validate_adapter(to_raw(adapter), base_config, magnitude_cap);
}

LoraAdapter load_adapter(const std::string& path, const ModelConfig& base_config,
                         double magnitude_cap) {
    RawAdapter raw = load_raw_adapter(path);
    const ValidationReport report = validate_adapter(raw, base_config, magnitude_cap);
    if (!report.accepted()) {
        std::string msg = "adapter " + raw.name + " rejected:";
        for (const auto& r : report.reasons)
            msg += std::string("\n  [") + to_string(r.kind) + "] " + r.detail;
        throw ValidationError(msg);
    }

    LoraAdapter adapter;
    adapter.name = raw.name;
    adapter.alpha = raw.alpha;
    adapter.rank = raw.rank;
    adapter.variant = raw.variant;
    adapter.metadata = raw.metadata;
    const double s = lora_scaling(raw.alpha, raw.rank, raw.variant);
    for (auto& [name, tensor] : raw.tensors) {
        const auto parsed = parse_peft_tensor_name(name);
        const auto& [pathm, is_a] = *parsed;
        LoraPair& pair = adapter.modules[pathm];
        pair.scaling = s;
        (is_a ? pair.a : pair.b) = std::move(tensor);
    }
    return adapter;
}

void save_adapter(const LoraAdapter& adapter, const std::string& path) {
    if (adapter.modules.empty())
        throw ContractError("save_adapter: adapter " + adapter.name + " has no modules");
    for (const auto& [mpath, pair] : adapter.modules) {
        if (pair.a.empty() || pair.b.empty() || pair.a.rows() != pair.b.cols())
            throw ContractError("save_adapter: module " + to_string(mpath) +
                                " has inconsistent factors");
        if (!pair.a.all_finite() || !pair.b.all_finite())
            throw ContractError("save_adapter: module " + to_string(mpath) +
                                " contains non-finite values");
    }

    std::map<std::string, Matrix> tensors;
    for (const auto& [mpath, pair] : adapter.modules) {
        tensors.emplace(peft_tensor_name(mpath, true), pair.a);
        tensors.emplace(peft_tensor_name(mpath, false), pair.b);
    }
    save_safetensors(path, tensors, adapter.metadata, "F32");

    std::set<std::string> target_types;
    for (const auto& [mpath, pair] : adapter.modules) target_types.insert(to_string(mpath.type));
    json cfg;
    cfg["alpha"] = adapter.alpha;
    cfg["rank"] = adapter.rank;
    cfg["variant"] = to_string(adapter.variant);
    cfg["target_modules"] = target_types;
    if (!adapter.metadata.empty()) {
        json meta = json::object();
        for (const auto& [k, v] : adapter.metadata) meta[k] = v;
        cfg["metadata"] = meta;
    }
    std::ofstream out(sidecar_path(path), std::ios::trunc);
    if (!out) throw IoError("adapter: cannot write sidecar " + sidecar_path(path));
    out << cfg.dump(2) << "\n";
}

TaskVectorSet materialize_task_vectors(const LoraAdapter& adapter) {
    TaskVectorSet tvs;
    tvs.name = adapter.name;
    for (const auto& [path, pair] : adapter.modules) {
        if (pair.a.rows() != pair.b.cols())
            throw DimensionError("materialize: module " + to_string(path) + " factors " +
                                 pair.b.shape() + " @ " + pair.a.shape() + " not conformable");
        tvs.deltas.emplace(path, scale(matmul(pair.b, pair.a), pair.scaling));
    }
    return tvs;
}

LoraAdapter pad_to_rank(const LoraAdapter& adapter, std::size_t r_max) {
    for (const auto& [path, pair] : adapter.modules)
        if (pair.a.rows() > r_max)
            throw ArgumentError("pad_to_rank: module " + to_string(path) + " already has rank " +
                                std::to_string(pair.a.rows()) + " > " + std::to_string(r_max));
    LoraAdapter out = adapter;
    for (auto& [path, pair] : out.modules) {
        const std::size_t r = pair.a.rows();
        if (r == r_max) continue;
        Matrix a(r_max, pair.a.cols());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pair.a.cols(); ++j) a(i, j) = pair.a(i, j);
        Matrix b(pair.b.rows(), r_max);
        for (std::size_t i = 0; i < pair.b.rows(); ++i)
            for (std::size_t j = 0; j < r; ++j) b(i, j) = pair.b(i, j);
        pair.a = std::move(a);
        pair.b = std::move(b);
    }
    return out;
}

namespace {

double population_std(const Matrix& m) {
    if (m.size() == 0) return 0.0;
    double mean = 0.0;
    for (const double v : m.values()) mean += v;
    mean /= static_cast<double>(m.size());
    double var = 0.0;
    for (const double v : m.values()) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(m.size()));
}

}  // namespace

LoraAdapter reinit_matched(const LoraAdapter& adapter, std::uint64_t seed) {
    LoraAdapter out = adapter;
    for (auto& [path, pair] : out.modules) {
        const std::uint64_t module_seed = derive_seed(seed, adapter.name + "/" + to_string(path));
        Rng rng_a(derive_seed(module_seed, "A"));
        Rng rng_b(derive_seed(module_seed, "B"));
        const double std_a = population_std(pair.a);
        const double std_b = population_std(pair.b);
        for (auto& v : pair.a.values()) v = rng_a.normal(0.0, std_a);
        for (auto& v : pair.b.values()) v = rng_b.normal(0.0, std_b);
    }
    return out;
}

std::vector<double> flatten_features(const TaskVectorSet& tvs, FeatureTransform transform,
                                     const std::vector<ModulePath>& module_universe,
                                     const ModelConfig& config) {
    std::size_t total = 0;
    for (const auto& path : module_universe)
        total += config.out_dim(path.type) * config.in_dim(path.type);
    std::vector<double> out;
    out.reserve(total);
    for (const auto& path : module_universe) {
        const std::size_t block = config.out_dim(path.type) * config.in_dim(path.type);
        const auto it = tvs.deltas.find(path);
        if (it == tvs.deltas.end()) {
            out.insert(out.end(), block, 0.0);
            continue;
        }
        const Matrix& delta = it->second;
        if (delta.size() != block)
            throw DimensionError("flatten_features: module " + to_string(path) + " delta is " +
                                 delta.shape() + ", base config expects " +
                                 std::to_string(config.out_dim(path.type)) + "x" +
                                 std::to_string(config.in_dim(path.type)));
        for (const double v : delta.values()) {
            switch (transform) {
                case FeatureTransform::identity: out.push_back(v); break;
                case FeatureTransform::absolute: out.push_back(std::fabs(v)); break;
                case FeatureTransform::square: out.push_back(v * v); break;
                case FeatureTransform::clamp_nonneg: out.push_back(v < 0.0 ? 0.0 : v); break;
            }
        }
    }
    return out;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw DimensionError("cosine: feature lengths " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()) + " differ");
    double num = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return num / (std::sqrt(na) * std::sqrt(nb));
}

void save_task_vectors(const TaskVectorSet& tvs, const std::string& path) {
    std::map<std::string, Matrix> tensors;
    for (const auto& [mpath, delta] : tvs.deltas)
        tensors.emplace("model." + to_string(mpath) + ".weight", delta);
    save_safetensors(path, tensors, {{"name", tvs.name}}, "F32");
}

}  // namespace loramerge
