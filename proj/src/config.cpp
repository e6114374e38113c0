#include "lab/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace lab {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string join_csv(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) {
        if (!out.empty()) out += ",";
        out += s;
    }
    return out;
}

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (...) {
        throw ConfigError("config: bad integer for " + key + ": \"" + v + "\"");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (...) {
        throw ConfigError("config: bad number for " + key + ": \"" + v + "\"");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (...) {
        throw ConfigError("config: bad seed for " + key + ": \"" + v + "\"");
    }
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& schema() {
    static const std::map<std::string, Setter> s = {
        {"run.seed", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); }},

        {"corpus.classes", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.classes = split_csv(v); }},
        {"corpus.instances_per_class", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.instances_per_class = to_int(k, v); }},
        {"corpus.contexts", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.contexts = split_csv(v); }},
        {"corpus.train_per_class", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train_per_class = to_int(k, v); }},

        {"model.image_size", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.image_size = to_int(k, v); }},
        {"model.base_channels", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.base_channels = to_int(k, v); }},
        {"model.mult1", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.mult1 = to_int(k, v); }},
        {"model.mult2", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.mult2 = to_int(k, v); }},
        {"model.d_text", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.d_text = to_int(k, v); c.model.text.d_text = c.model.unet.d_text; }},
        {"model.temb_dim", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.temb_dim = to_int(k, v); }},
        {"model.heads", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.heads = to_int(k, v); }},
        {"model.gn_groups", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.unet.gn_groups = to_int(k, v); }},
        {"model.text_layers", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.text.layers = to_int(k, v); }},
        {"model.text_heads", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.text.heads = to_int(k, v); }},
        {"model.max_len", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.text.max_len = to_int(k, v); c.model.unet.max_len = c.model.text.max_len; }},
        {"model.ff_mult", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.text.ff_mult = to_int(k, v); }},

        {"schedule.kind", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.model.schedule_kind = v; }},
        {"schedule.T", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.T = to_int(k, v); }},
        {"schedule.beta_min", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.beta_min = to_double(k, v); }},
        {"schedule.beta_max", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.model.beta_max = to_double(k, v); }},

        {"pretrain.steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.pretrain.steps = to_int(k, v); }},
        {"pretrain.batch_size", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.pretrain.batch_size = to_int(k, v); }},
        {"pretrain.lr", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.pretrain.lr = to_double(k, v); }},
        {"pretrain.log_every", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.pretrain.log_every = to_int(k, v); }},

        {"personalize.strategy", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.strategy.strategy = v; }},
        {"personalize.stage1_steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.stage1_steps = to_int(k, v); }},
        {"personalize.stage1_lr", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.stage1_lr = to_double(k, v); }},
        {"personalize.stage2_steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.stage2_steps = to_int(k, v); }},
        {"personalize.stage2_lr", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.stage2_lr = to_double(k, v); }},
        {"personalize.checkpoint_every", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.checkpoint_every = to_int(k, v); }},
        {"personalize.ti_steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.ti_steps = to_int(k, v); }},
        {"personalize.ti_lr", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.ti_lr = to_double(k, v); }},
        {"personalize.db_steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.db_steps = to_int(k, v); }},
        {"personalize.db_lr", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.db_lr = to_double(k, v); }},
        {"personalize.prior_image_count", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.prior_image_count = to_int(k, v); }},
        {"personalize.lambda", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.lambda = to_double(k, v); }},
        {"personalize.batch_size", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.batch_size = to_int(k, v); }},
        {"personalize.lr_preset", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.strategy.lr_preset = v; }},
        {"personalize.prior_sampler", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.strategy.prior_sampler = v; }},
        {"personalize.prior_sampler_steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.strategy.prior_sampler_steps = to_int(k, v); }},

        {"evaluate.sampler", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.eval_sampler = v; }},
        {"evaluate.sampler_steps", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.eval_sampler_steps = to_int(k, v); }},
        {"evaluate.drift_samples", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.drift_samples = to_int(k, v); }},
    };
    return s;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
    ExperimentConfig cfg = defaults();
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
        const std::string full = section + "." + key;
        auto it = schema().find(full);
        if (it == schema().end())
            throw ConfigError("config: unknown key [" + section + "] " + key);
        it->second(cfg, full, value);
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str());
}

void ExperimentConfig::validate() const {
    model.validate();
    strategy.validate();
    sampler_kind_from(eval_sampler);
    sampler_kind_from(strategy.prior_sampler);
    if (classes.empty()) throw ConfigError("config: corpus.classes is empty");
    if (contexts.empty()) throw ConfigError("config: corpus.contexts is empty");
    if (train_per_class <= 0) throw ConfigError("config: corpus.train_per_class must be positive");
    if (instances_per_class < 0) throw ConfigError("config: instances_per_class negative");
    if (pretrain.steps < 0 || pretrain.batch_size <= 0 || pretrain.lr <= 0)
        throw ConfigError("config: bad [pretrain] values");
    if (eval_sampler_steps <= 0 || drift_samples <= 0)
        throw ConfigError("config: bad [evaluate] values");
    if (model.unet.image_size % 8 != 0)
        throw ConfigError("config: image_size must be divisible by 8");
    // schedule bounds are validated by make_schedule
    model.make_schedule();
}

std::string ExperimentConfig::echo() const {
    std::ostringstream os;
    os << "[run]\n";
    os << "seed = " << seed << "\n\n";
    os << "[corpus]\n";
    os << "classes = " << join_csv(classes) << "\n";
    os << "instances_per_class = " << instances_per_class << "\n";
    os << "contexts = " << join_csv(contexts) << "\n";
    os << "train_per_class = " << train_per_class << "\n\n";
    os << "[model]\n";
    os << "image_size = " << model.unet.image_size << "\n";
    os << "base_channels = " << model.unet.base_channels << "\n";
    os << "mult1 = " << model.unet.mult1 << "\n";
    os << "mult2 = " << model.unet.mult2 << "\n";
    os << "d_text = " << model.unet.d_text << "\n";
    os << "temb_dim = " << model.unet.temb_dim << "\n";
    os << "heads = " << model.unet.heads << "\n";
    os << "gn_groups = " << model.unet.gn_groups << "\n";
    os << "text_layers = " << model.text.layers << "\n";
    os << "text_heads = " << model.text.heads << "\n";
    os << "max_len = " << model.text.max_len << "\n";
    os << "ff_mult = " << model.text.ff_mult << "\n\n";
    os << "[schedule]\n";
    os << "kind = " << model.schedule_kind << "\n";
    os << "T = " << model.T << "\n";
    os << "beta_min = " << model.beta_min << "\n";
    os << "beta_max = " << model.beta_max << "\n\n";
    os << "[pretrain]\n";
    os << "steps = " << pretrain.steps << "\n";
    os << "batch_size = " << pretrain.batch_size << "\n";
    os << "lr = " << pretrain.lr << "\n";
    os << "log_every = " << pretrain.log_every << "\n\n";
    os << "[personalize]\n";
    os << "strategy = " << strategy.strategy << "\n";
    os << "stage1_steps = " << strategy.stage1_steps << "\n";
    os << "stage1_lr = " << strategy.stage1_lr << "\n";
    os << "stage2_steps = " << strategy.stage2_steps << "\n";
    os << "stage2_lr = " << strategy.stage2_lr << "\n";
    os << "checkpoint_every = " << strategy.checkpoint_every << "\n";
    os << "ti_steps = " << strategy.ti_steps << "\n";
    os << "ti_lr = " << strategy.ti_lr << "\n";
    os << "db_steps = " << strategy.db_steps << "\n";
    os << "db_lr = " << strategy.db_lr << "\n";
    os << "prior_image_count = " << strategy.prior_image_count << "\n";
    os << "lambda = " << strategy.lambda << "\n";
    os << "batch_size = " << strategy.batch_size << "\n";
    os << "lr_preset = " << strategy.lr_preset << "\n";
    os << "prior_sampler = " << strategy.prior_sampler << "\n";
    os << "prior_sampler_steps = " << strategy.prior_sampler_steps << "\n\n";
    os << "[evaluate]\n";
    os << "sampler = " << eval_sampler << "\n";
    os << "sampler_steps = " << eval_sampler_steps << "\n";
    os << "drift_samples = " << drift_samples << "\n";
    return os.str();
}

}  // namespace lab
