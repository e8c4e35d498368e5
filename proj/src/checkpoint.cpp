#include "pdial/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace pdial {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'D', 'I', 'A', 'L', 'C', 'K', '\0'};

template <class T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <class U>
void write_pod(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U read_pod(std::istream& in) {
    U v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(U));
    if (!in) throw FormatError("truncated checkpoint");
    return v;
}

struct Loaded {
    CheckpointInfo info;
    std::vector<char> data;
};

Loaded read_all(const std::filesystem::path& path, bool with_data) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path.string() + " is not a checkpoint file");
    Loaded l;
    l.info.version = read_pod<std::uint32_t>(in);
    if (l.info.version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(l.info.version));
    }
    const auto hlen = read_pod<std::uint64_t>(in);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw FormatError("truncated checkpoint header");
    const json h = json::parse(header);
    l.info.dtype = h.at("dtype").get<std::string>();
    if (l.info.dtype != "f32" && l.info.dtype != "f64") throw FormatError("unknown dtype " + l.info.dtype);
    l.info.config = model_config_from_json(h.at("config"));
    l.info.meta = h.value("meta", json::object());
    for (const auto& e : h.at("params")) {
        l.info.manifest.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(),
                                   e.at("offset").get<std::uint64_t>()});
    }
    if (with_data) {
        l.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return l;
}

template <class T, class U>
void copy_values(const char* src, Tensor<T>& dst) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        U v;
        std::memcpy(&v, src + i * sizeof(U), sizeof(U));
        dst.data[i] = static_cast<T>(v);
    }
}

}  // namespace

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path, CheckpointScope scope,
                     const json& meta) {
    json params = json::array();
    std::uint64_t offset = 0;
    std::vector<const Parameter<T>*> kept;
    for (const auto* p : model.parameters()) {
        if (scope == CheckpointScope::lm_only && !is_lm_parameter(p->name())) continue;
        params.push_back({{"name", p->name()}, {"shape", p->shape()}, {"offset", offset}});
        offset += p->value().size() * sizeof(T);
        kept.push_back(p);
    }
    json header = {{"format_version", kCheckpointVersion},
                   {"dtype", dtype_name<T>()},
                   {"config", to_json(model.config())},
                   {"params", params},
                   {"meta", meta}};
    const std::string h = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + path.string());
    out.write(kMagic, 8);
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint64_t>(out, h.size());
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto* p : kept) {
        out.write(reinterpret_cast<const char*>(p->value().data.data()),
                  static_cast<std::streamsize>(p->value().size() * sizeof(T)));
    }
    if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) { return read_all(path, false).info; }

template <class T>
void load_parameters(Model<T>& model, const std::filesystem::path& path) {
    const Loaded l = read_all(path, true);
    const std::size_t elem = l.info.dtype == "f32" ? 4 : 8;
    std::vector<std::string> bad;
    for (const auto& e : l.info.manifest) {
        const Parameter<T>* p = model.find(e.name);
        if (!p) {
            bad.push_back(e.name + " (unknown to model)");
        } else if (p->shape() != e.shape) {
            bad.push_back(e.name + " (file " + shape_str(e.shape) + ", model " + shape_str(p->shape()) + ")");
        } else if (e.offset + shape_numel(e.shape) * elem > l.data.size()) {
            bad.push_back(e.name + " (data truncated)");
        }
    }
    if (!bad.empty()) {
        std::string msg = "checkpoint " + path.string() + " does not fit the model:";
        for (const auto& b : bad) msg += " " + b + ";";
        throw FormatError(msg);
    }
    for (const auto& e : l.info.manifest) {
        Parameter<T>* p = model.find(e.name);
        const char* src = l.data.data() + e.offset;
        if (elem == 4) {
            copy_values<T, float>(src, p->value());
        } else {
            copy_values<T, double>(src, p->value());
        }
    }
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path, std::uint64_t seed) {
    const CheckpointInfo info = read_checkpoint_info(path);
    Model<T> model(info.config, seed);
    load_parameters(model, path);
    return model;
}

std::string checkpoint_id(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

template void save_checkpoint<float>(const Model<float>&, const std::filesystem::path&, CheckpointScope, const json&);
template void save_checkpoint<double>(const Model<double>&, const std::filesystem::path&, CheckpointScope, const json&);
template void load_parameters<float>(Model<float>&, const std::filesystem::path&);
template void load_parameters<double>(Model<double>&, const std::filesystem::path&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&, std::uint64_t);
template Model<double> load_checkpoint<double>(const std::filesystem::path&, std::uint64_t);

}  // namespace pdial
