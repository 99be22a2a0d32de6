#include "tide/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace tide {

namespace {

struct SchemaEntry {
    const char* key;
    const char* type;  // int, double, bool, string
    const char* def;
};

// clang-format off
const SchemaEntry kSchema[] = {
    {"corpus.vocab_size",     "int",    "512"},
    {"corpus.exponent",       "double", "1.0"},
    {"corpus.seed",           "int",    "0"},
    {"corpus.length",         "int",    "200000"},
    {"corpus.bins",           "int",    "10"},
    {"corpus.format",         "string", "binary"},
    {"model.d",               "int",    "64"},
    {"model.layers",          "int",    "2"},
    {"model.heads",           "int",    "2"},
    {"model.d_ff",            "int",    "0"},      // 0: use 4*d
    {"model.t_max",           "int",    "0"},      // 0: max(seq_len, template_len)
    {"model.rope_theta",      "double", "10000.0"},
    {"model.tied_head",       "bool",   "false"},
    {"tide.k",                "int",    "0"},
    {"tide.d_b",              "int",    "0"},      // 0: use model.d
    {"train.arch",            "string", "base"},
    {"train.batch",           "int",    "8"},
    {"train.seq_len",         "int",    "128"},
    {"train.steps",           "int",    "2000"},
    {"train.warmup_iters",    "int",    "200"},
    {"train.warmup_init_lr",  "double", "1e-6"},
    {"train.max_lr",          "double", "1e-4"},
    {"train.min_lr",          "double", "1e-5"},
    {"train.beta1",           "double", "0.9"},
    {"train.beta2",           "double", "0.95"},
    {"train.weight_decay",    "double", "0.1"},
    {"train.adam_eps",        "double", "1e-8"},
    {"train.z_coeff",         "double", "1e-6"},
    {"train.clip_norm",       "double", "1.0"},
    {"train.seed",            "int",    "0"},
    {"train.checkpoint_every","int",    "0"},
    {"train.val_fraction",    "double", "0.05"},
    {"diag.audit_steps",      "int",    "1000"},
    {"diag.templates",        "int",    "200"},
    {"diag.template_len",     "int",    "16"},
    {"diag.pairs",            "string", ""},
    {"diag.delta_tol",        "double", "1e-3"},
    {"diag.knn_queries",      "int",    "64"},
    {"diag.knn_k",            "int",    "10"},
    {"diag.eps",              "double", "1e-3"},
    {"diag.seed",             "int",    "0"},
    {"compress.mode",         "string", "lowrank"},
    {"compress.bits",         "int",    "8"},
    {"compress.rank",         "int",    "0"},
    {"compress.percents",     "string", "0,30,60,90"},
};
// clang-format on

const SchemaEntry* find_entry(const std::string& key) {
    for (const SchemaEntry& e : kSchema) {
        if (key == e.key) return &e;
    }
    return nullptr;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

void check_value(const std::string& key, const std::string& type, const std::string& value) {
    if (type == "int") {
        try {
            size_t pos = 0;
            (void)std::stoll(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw ParamError("config: key " + key + " needs an integer, got '" + value + "'");
        }
    } else if (type == "double") {
        try {
            size_t pos = 0;
            (void)std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw ParamError("config: key " + key + " needs a number, got '" + value + "'");
        }
    } else if (type == "bool") {
        if (value != "true" && value != "false") {
            throw ParamError("config: key " + key + " needs true/false, got '" + value + "'");
        }
    }
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    for (const SchemaEntry& e : kSchema) values_[e.key] = e.def;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    const SchemaEntry* entry = find_entry(key);
    if (entry == nullptr) throw ParamError("config: unknown key " + key);
    check_value(key, entry->type, value);
    values_[key] = value;
}

void ExperimentConfig::apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::string line, section;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') {
                throw ParamError("config: malformed section at line " + std::to_string(line_no));
            }
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParamError("config: expected key = value at line " + std::to_string(line_no));
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;
        set(full, value);
    }
}

std::string ExperimentConfig::get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ParamError("config: unknown key " + key);
    return it->second;
}

int64_t ExperimentConfig::get_int(const std::string& key) const {
    return std::stoll(get_string(key));
}

double ExperimentConfig::get_double(const std::string& key) const {
    return std::stod(get_string(key));
}

bool ExperimentConfig::get_bool(const std::string& key) const {
    return get_string(key) == "true";
}

std::string ExperimentConfig::resolved_text() const {
    std::ostringstream out;
    std::string section;
    for (const SchemaEntry& e : kSchema) {
        const std::string key = e.key;
        const std::string sec = key.substr(0, key.find('.'));
        if (sec != section) {
            if (!section.empty()) out << "\n";
            out << "[" << sec << "]\n";
            section = sec;
        }
        out << key.substr(key.find('.') + 1) << " = " << values_.at(key) << "\n";
    }
    return out.str();
}

ZipfSpec ExperimentConfig::corpus_spec() const {
    ZipfSpec spec;
    spec.vocab_size = static_cast<int>(get_int("corpus.vocab_size"));
    spec.exponent = get_double("corpus.exponent");
    spec.seed = static_cast<uint64_t>(get_int("corpus.seed"));
    spec.length = get_int("corpus.length");
    return spec;
}

int ExperimentConfig::corpus_bins() const { return static_cast<int>(get_int("corpus.bins")); }

ModelConfig ExperimentConfig::model_config() const {
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(get_int("corpus.vocab_size"));
    cfg.d_model = static_cast<int>(get_int("model.d"));
    cfg.n_layers = static_cast<int>(get_int("model.layers"));
    cfg.n_heads = static_cast<int>(get_int("model.heads"));
    cfg.d_ff = static_cast<int>(get_int("model.d_ff"));
    if (cfg.d_ff == 0) cfg.d_ff = 4 * cfg.d_model;
    cfg.t_max = static_cast<int>(get_int("model.t_max"));
    if (cfg.t_max == 0) {
        cfg.t_max = std::max(static_cast<int>(get_int("train.seq_len")),
                             static_cast<int>(get_int("diag.template_len")));
    }
    cfg.rope_theta = get_double("model.rope_theta");
    cfg.tied_head = get_bool("model.tied_head");
    cfg.validate();
    return cfg;
}

TideConfig ExperimentConfig::tide_config(int k_override) const {
    TideConfig cfg;
    cfg.k_blocks = k_override >= 0 ? k_override : static_cast<int>(get_int("tide.k"));
    cfg.d_block = static_cast<int>(get_int("tide.d_b"));
    if (cfg.k_blocks > 0 && cfg.d_block == 0) cfg.d_block = static_cast<int>(get_int("model.d"));
    if (cfg.k_blocks == 0) cfg.d_block = 0;
    return cfg;
}

TrainConfig ExperimentConfig::train_config() const {
    TrainConfig cfg;
    cfg.batch = static_cast<int>(get_int("train.batch"));
    cfg.seq_len = static_cast<int>(get_int("train.seq_len"));
    cfg.steps = get_int("train.steps");
    cfg.warmup_iters = get_int("train.warmup_iters");
    cfg.warmup_init_lr = get_double("train.warmup_init_lr");
    cfg.max_lr = get_double("train.max_lr");
    cfg.min_lr = get_double("train.min_lr");
    cfg.beta1 = get_double("train.beta1");
    cfg.beta2 = get_double("train.beta2");
    cfg.weight_decay = get_double("train.weight_decay");
    cfg.adam_eps = get_double("train.adam_eps");
    cfg.z_coeff = get_double("train.z_coeff");
    cfg.clip_norm = get_double("train.clip_norm");
    cfg.seed = static_cast<uint64_t>(get_int("train.seed"));
    cfg.checkpoint_every = get_int("train.checkpoint_every");
    cfg.val_fraction = get_double("train.val_fraction");
    cfg.validate();
    return cfg;
}

std::vector<std::pair<int32_t, int32_t>> ExperimentConfig::diag_pairs() const {
    std::vector<std::pair<int32_t, int32_t>> pairs;
    const std::string text = get_string("diag.pairs");
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const std::string t = trim(item);
        if (t.empty()) continue;
        const size_t colon = t.find(':');
        if (colon == std::string::npos) {
            throw ParamError("config: diag.pairs entries need the form u:v, got '" + t + "'");
        }
        try {
            pairs.emplace_back(std::stoi(t.substr(0, colon)), std::stoi(t.substr(colon + 1)));
        } catch (const std::exception&) {
            throw ParamError("config: diag.pairs entry '" + t + "' is not a token pair");
        }
    }
    return pairs;
}

std::vector<double> ExperimentConfig::compress_percents() const {
    std::vector<double> out;
    std::istringstream in(get_string("compress.percents"));
    std::string item;
    while (std::getline(in, item, ',')) {
        const std::string t = trim(item);
        if (t.empty()) continue;
        try {
            out.push_back(std::stod(t));
        } catch (const std::exception&) {
            throw ParamError("config: compress.percents entry '" + t + "' is not a number");
        }
    }
    if (out.empty()) throw ParamError("config: compress.percents is empty");
    return out;
}

}  // namespace tide
