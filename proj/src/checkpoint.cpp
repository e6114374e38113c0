#include "lab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace lab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

namespace {
constexpr char kMagic[8] = {'L', 'A', 'B', 'C', 'K', 'P', 'T', '\n'};
constexpr int kFormatVersion = 1;
}  // namespace

std::string ModelConfig::canonical_text() const {
    std::ostringstream os;
    os << "model.image_size=" << unet.image_size << "\n";
    os << "model.in_channels=" << unet.in_channels << "\n";
    os << "model.out_channels=" << unet.out_channels << "\n";
    os << "model.base_channels=" << unet.base_channels << "\n";
    os << "model.mult1=" << unet.mult1 << "\n";
    os << "model.mult2=" << unet.mult2 << "\n";
    os << "model.d_text=" << unet.d_text << "\n";
    os << "model.temb_dim=" << unet.temb_dim << "\n";
    os << "model.heads=" << unet.heads << "\n";
    os << "model.gn_groups=" << unet.gn_groups << "\n";
    os << "model.text_layers=" << text.layers << "\n";
    os << "model.text_heads=" << text.heads << "\n";
    os << "model.max_len=" << text.max_len << "\n";
    os << "model.ff_mult=" << text.ff_mult << "\n";
    os << "schedule.kind=" << schedule_kind << "\n";
    os << "schedule.T=" << T << "\n";
    os << "schedule.beta_min=" << beta_min << "\n";
    os << "schedule.beta_max=" << beta_max << "\n";
    return os.str();
}

std::string checkpoint_content_hash(const Checkpoint& c) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, p] : c.params) {
        h = fnv1a64(name, h);
        h = fnv1a64(p.tensor.data.data(), p.tensor.data.size() * sizeof(float), h);
    }
    return hex64(h);
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    const std::string vocab_path = path + ".vocab";
    c.vocab.save(vocab_path);

    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["config_hash"] = c.config.config_hash();
    header["step"] = c.step;
    header["strategy"] = c.strategy;
    header["parent_hash"] = c.parent_hash;
    header["vocab_file"] = vocab_path.substr(vocab_path.find_last_of('/') + 1);
    header["vocab_hash"] = hex64(c.vocab.hash());
    nlohmann::json cfg;
    cfg["image_size"] = c.config.unet.image_size;
    cfg["in_channels"] = c.config.unet.in_channels;
    cfg["out_channels"] = c.config.unet.out_channels;
    cfg["base_channels"] = c.config.unet.base_channels;
    cfg["mult1"] = c.config.unet.mult1;
    cfg["mult2"] = c.config.unet.mult2;
    cfg["d_text"] = c.config.unet.d_text;
    cfg["temb_dim"] = c.config.unet.temb_dim;
    cfg["heads"] = c.config.unet.heads;
    cfg["gn_groups"] = c.config.unet.gn_groups;
    cfg["text_layers"] = c.config.text.layers;
    cfg["text_heads"] = c.config.text.heads;
    cfg["max_len"] = c.config.text.max_len;
    cfg["ff_mult"] = c.config.text.ff_mult;
    cfg["schedule_kind"] = c.config.schedule_kind;
    cfg["T"] = c.config.T;
    cfg["beta_min"] = c.config.beta_min;
    cfg["beta_max"] = c.config.beta_max;
    header["config"] = cfg;
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& [name, p] : c.params) {
        nlohmann::json a;
        a["name"] = name;
        a["dtype"] = "f32";
        a["shape"] = p.tensor.shape;
        arrays.push_back(a);
    }
    header["arrays"] = arrays;

    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write(kMagic, sizeof(kMagic));
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, p] : c.params)
        f.write(reinterpret_cast<const char*>(p.tensor.data.data()),
                static_cast<std::streamsize>(p.tensor.data.size() * sizeof(float)));
    if (!f) throw IoError("short write on checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("not a checkpoint file: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("truncated checkpoint header: " + path);
    nlohmann::json header = nlohmann::json::parse(hs);
    if (header.at("format_version").get<int>() != kFormatVersion)
        throw IoError("unsupported checkpoint format version in " + path);

    Checkpoint c;
    const auto& cfg = header.at("config");
    c.config.unet.image_size = cfg.at("image_size").get<int>();
    c.config.unet.in_channels = cfg.at("in_channels").get<int>();
    c.config.unet.out_channels = cfg.at("out_channels").get<int>();
    c.config.unet.base_channels = cfg.at("base_channels").get<int>();
    c.config.unet.mult1 = cfg.at("mult1").get<int>();
    c.config.unet.mult2 = cfg.at("mult2").get<int>();
    c.config.unet.d_text = cfg.at("d_text").get<int>();
    c.config.unet.temb_dim = cfg.at("temb_dim").get<int>();
    c.config.unet.heads = cfg.at("heads").get<int>();
    c.config.unet.gn_groups = cfg.at("gn_groups").get<int>();
    c.config.text.d_text = c.config.unet.d_text;
    c.config.text.layers = cfg.at("text_layers").get<int>();
    c.config.text.heads = cfg.at("text_heads").get<int>();
    c.config.text.max_len = cfg.at("max_len").get<int>();
    c.config.text.ff_mult = cfg.at("ff_mult").get<int>();
    c.config.unet.max_len = c.config.text.max_len;
    c.config.schedule_kind = cfg.at("schedule_kind").get<std::string>();
    c.config.T = cfg.at("T").get<int>();
    c.config.beta_min = cfg.at("beta_min").get<double>();
    c.config.beta_max = cfg.at("beta_max").get<double>();
    if (header.at("config_hash").get<std::string>() != c.config.config_hash())
        throw IoError("checkpoint config hash mismatch in " + path);
    c.step = header.at("step").get<int>();
    c.strategy = header.at("strategy").get<std::string>();
    c.parent_hash = header.at("parent_hash").get<std::string>();

    c.vocab = Vocabulary::load(path + ".vocab");
    if (hex64(c.vocab.hash()) != header.at("vocab_hash").get<std::string>())
        throw IoError("vocabulary hash mismatch for " + path);

    for (const auto& a : header.at("arrays")) {
        const std::string name = a.at("name").get<std::string>();
        if (a.at("dtype").get<std::string>() != "f32")
            throw IoError("unsupported dtype in " + path);
        std::vector<int> shape = a.at("shape").get<std::vector<int>>();
        Tensor<float> t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!f) throw IoError("truncated checkpoint payload: " + path);
        c.params.add(name, std::move(t));
    }
    return c;
}

}  // namespace lab
