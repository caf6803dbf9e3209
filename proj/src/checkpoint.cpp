#include "lrgt/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace lrgt {

namespace {

constexpr char kMagic[8] = {'L', 'R', 'G', 'T', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw IoError(path.string() + ": truncated checkpoint");
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::filesystem::path& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) {
        throw IoError(path.string() + ": truncated checkpoint");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& is, const std::filesystem::path& path) {
    const std::uint64_t v = get_u64(is, path);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

void put_vec(std::ostream& os, const DVec& v) {
    for (double d : v) put_f64(os, d);
}

CheckpointMeta read_header(std::istream& is, const std::filesystem::path& path) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw IoError(path.string() + ": not a checkpoint file (bad magic)");
    }
    const std::uint32_t version = get_u32(is, path);
    if (version != kVersion) {
        throw IoError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
    }
    CheckpointMeta meta;
    meta.architecture_digest = get_u64(is, path);
    meta.step = get_u64(is, path);
    meta.epoch = static_cast<int>(get_u32(is, path));
    const std::uint32_t config_len = get_u32(is, path);
    meta.config_text.resize(config_len);
    if (!is.read(meta.config_text.data(), config_len)) {
        throw IoError(path.string() + ": truncated config text");
    }
    return meta;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdamW* optimizer, std::uint64_t step, int epoch) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(kMagic, 8);
    put_u32(os, kVersion);
    put_u64(os, model.config().architecture_digest());
    put_u64(os, step);
    put_u32(os, static_cast<std::uint32_t>(epoch));
    const std::string config_text = model.config().to_text();
    put_u32(os, static_cast<std::uint32_t>(config_text.size()));
    os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));

    const NamedParams& params = model.params();
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(tensor.ndim()));
        for (auto d : tensor.shape()) put_u64(os, static_cast<std::uint64_t>(d));
        put_vec(os, tensor.values());
    }
    if (optimizer) {
        os.put(1);
        put_u64(os, optimizer->steps_taken());
        AdamW& opt = const_cast<AdamW&>(*optimizer);
        for (std::size_t i = 0; i < params.size(); ++i) {
            put_vec(os, opt.first_moments()[i]);
            put_vec(os, opt.second_moments()[i]);
        }
    } else {
        os.put(0);
    }
    if (!os) throw IoError("failed writing " + path.string());
}

CheckpointMeta peek_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_header(is, path);
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model& model,
                               AdamW* optimizer) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    CheckpointMeta meta = read_header(is, path);
    if (meta.architecture_digest != model.config().architecture_digest()) {
        throw ConfigError(path.string() + ": checkpoint architecture digest " +
                          std::to_string(meta.architecture_digest) +
                          " does not match the runtime configuration (" +
                          std::to_string(model.config().architecture_digest()) + ")");
    }
    NamedParams& params = model.params();
    const std::uint32_t count = get_u32(is, path);
    if (count != params.size()) {
        throw IoError(path.string() + ": checkpoint has " + std::to_string(count) +
                      " tensors, model has " + std::to_string(params.size()));
    }
    for (auto& [name, tensor] : params) {
        const std::uint32_t name_len = get_u32(is, path);
        std::string stored(name_len, '\0');
        if (!is.read(stored.data(), name_len)) throw IoError(path.string() + ": truncated name");
        if (stored != name) {
            throw IoError(path.string() + ": tensor name mismatch, expected '" + name +
                          "', found '" + stored + "'");
        }
        const std::uint32_t ndim = get_u32(is, path);
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<std::int64_t>(get_u64(is, path));
        if (shape != tensor.shape()) {
            throw IoError(path.string() + ": tensor '" + name + "' has shape " + shape_str(shape) +
                          ", model expects " + shape_str(tensor.shape()));
        }
        for (auto& v : tensor.raw()) v = get_f64(is, path);
    }
    const int has_opt = is.get();
    if (has_opt == 1 && optimizer) {
        optimizer->set_steps_taken(get_u64(is, path));
        for (std::size_t i = 0; i < params.size(); ++i) {
            for (auto& v : optimizer->first_moments()[i]) v = get_f64(is, path);
            for (auto& v : optimizer->second_moments()[i]) v = get_f64(is, path);
        }
    } else if (has_opt != 1 && optimizer) {
        throw IoError(path.string() + ": checkpoint carries no optimizer state to resume from");
    }
    return meta;
}

Model model_from_checkpoint(const std::filesystem::path& path) {
    const CheckpointMeta meta = peek_checkpoint(path);
    Model model = Model::init(ModelConfig::from_text(meta.config_text));
    load_checkpoint(path, model, nullptr);
    return model;
}

}  // namespace lrgt
