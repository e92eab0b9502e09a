#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cht/generator.hpp"
#include "cht/target_cnn.hpp"
#include "cht/tensor.hpp"

namespace cht {

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace detail {

inline void write_f32(std::ofstream& f, const std::vector<float>& data) {
    f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
}

template <class R>
std::vector<float> to_f32(const Tensor<R>& t) {
    std::vector<float> out(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) out[i] = static_cast<float>(t.data[i]);
    return out;
}

inline std::string shape_text(const Shape& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

inline Shape parse_shape_text(const std::string& s) {
    Shape shape;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, 'x')) shape.push_back(std::stoi(tok));
    return shape;
}

}  // namespace detail

// Flat little-endian float32 arrays concatenated in declaration order, plus
// a text manifest of (name, shape, offset). Offsets count floats.

template <class R>
void save_bundle(const std::string& stem, const Arch& arch, const WeightBundle<R>& w) {
    validate_bundle(arch, w);
    const auto table = shape_table(arch);
    std::ofstream bin(stem + ".bin", std::ios::binary);
    std::ofstream man(stem + ".manifest");
    require(bin.good() && man.good(), "save_bundle: cannot write " + stem);
    man << "cht-weights v1\n";
    long offset = 0;
    for (size_t i = 0; i < table.size(); ++i) {
        man << "tensor " << table[i].name << " " << offset << " " << detail::shape_text(table[i].shape) << "\n";
        detail::write_f32(bin, detail::to_f32(w.tensors[i]));
        offset += w.tensors[i].size();
    }
}

template <class R>
WeightBundle<R> load_bundle(const std::string& stem, const Arch& arch) {
    std::ifstream man(stem + ".manifest");
    require(man.good(), "load_bundle: cannot open " + stem + ".manifest");
    std::string header;
    std::getline(man, header);
    require(header == "cht-weights v1", "load_bundle: bad manifest header in " + stem);

    std::ifstream bin(stem + ".bin", std::ios::binary);
    require(bin.good(), "load_bundle: cannot open " + stem + ".bin");

    const auto table = shape_table(arch);
    WeightBundle<R> w;
    std::string line;
    size_t idx = 0;
    while (std::getline(man, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string tag, name, shape_text;
        long offset;
        is >> tag >> name >> offset >> shape_text;
        require(tag == "tensor", "load_bundle: unexpected manifest line: " + line);
        require(idx < table.size() && name == table[idx].name, "load_bundle: tensor " + name + " does not match arch");
        const Shape shape = detail::parse_shape_text(shape_text);
        require(shape == table[idx].shape, "load_bundle: shape mismatch for " + name);
        std::vector<float> buf(static_cast<size_t>(shape_numel(shape)));
        bin.seekg(offset * 4);
        bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        require(bin.good(), "load_bundle: truncated data for " + name);
        Tensor<R> t = Tensor<R>::zeros(shape);
        for (size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<R>(buf[i]);
        w.tensors.push_back(std::move(t));
        idx++;
    }
    require(idx == table.size(), "load_bundle: manifest lists " + std::to_string(idx) + " tensors, arch needs " +
                                     std::to_string(table.size()));
    return w;
}

// Generator checkpoints reuse the same convention and embed the resolved
// config so a checkpoint is self-describing; loading verifies the config
// fingerprint before touching any tensor data.

template <class R>
void save_checkpoint(const std::string& stem, GeneratorState<R>& st, uint64_t fingerprint, const std::string& config_text) {
    std::ofstream bin(stem + ".bin", std::ios::binary);
    std::ofstream man(stem + ".manifest");
    require(bin.good() && man.good(), "save_checkpoint: cannot write " + stem);
    man << "cht-checkpoint v1\n";
    man << "fingerprint " << hex64(fingerprint) << "\n";
    man << "step " << st.step << "\n";
    long offset = 0;
    st.for_each_param([&](const std::string& name, Tensor<R>& t) {
        man << "tensor " << name << " " << offset << " " << detail::shape_text(t.shape) << "\n";
        detail::write_f32(bin, detail::to_f32(t));
        offset += t.size();
    });
    man << "config-begin\n" << config_text;
    if (!config_text.empty() && config_text.back() != '\n') man << "\n";
    man << "config-end\n";
}

/// Resolved config text embedded in a checkpoint manifest.
inline std::string read_checkpoint_config(const std::string& stem) {
    std::ifstream man(stem + ".manifest");
    require(man.good(), "checkpoint: cannot open " + stem + ".manifest");
    std::string line, config;
    bool in_config = false;
    std::getline(man, line);
    require(line == "cht-checkpoint v1", "checkpoint: bad manifest header in " + stem);
    while (std::getline(man, line)) {
        if (line == "config-begin") {
            in_config = true;
        } else if (line == "config-end") {
            in_config = false;
        } else if (in_config) {
            config += line + "\n";
        }
    }
    require(!config.empty(), "checkpoint: no embedded config in " + stem);
    return config;
}

/// Fills a state constructed from the same config; refuses on fingerprint
/// mismatch or any layout difference.
template <class R>
void load_checkpoint(const std::string& stem, GeneratorState<R>& st, uint64_t expected_fingerprint) {
    std::ifstream man(stem + ".manifest");
    require(man.good(), "load_checkpoint: cannot open " + stem + ".manifest");
    std::string line;
    std::getline(man, line);
    require(line == "cht-checkpoint v1", "load_checkpoint: bad manifest header in " + stem);
    std::getline(man, line);
    {
        std::istringstream is(line);
        std::string tag, hex;
        is >> tag >> hex;
        require(tag == "fingerprint", "load_checkpoint: missing fingerprint in " + stem);
        require(hex == hex64(expected_fingerprint), "load_checkpoint: config fingerprint mismatch (checkpoint " + hex +
                                                        ", expected " + hex64(expected_fingerprint) + ")");
    }
    std::getline(man, line);
    long step = 0;
    {
        std::istringstream is(line);
        std::string tag;
        is >> tag >> step;
        require(tag == "step", "load_checkpoint: missing step in " + stem);
    }

    std::ifstream bin(stem + ".bin", std::ios::binary);
    require(bin.good(), "load_checkpoint: cannot open " + stem + ".bin");

    std::vector<std::pair<std::string, Tensor<R>*>> params;
    st.for_each_param([&](const std::string& name, Tensor<R>& t) { params.emplace_back(name, &t); });

    size_t idx = 0;
    while (std::getline(man, line)) {
        if (line == "config-begin") break;
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string tag, name, shape_text;
        long offset;
        is >> tag >> name >> offset >> shape_text;
        require(tag == "tensor", "load_checkpoint: unexpected manifest line: " + line);
        require(idx < params.size() && name == params[idx].first,
                "load_checkpoint: tensor " + name + " does not match the constructed state");
        const Shape shape = detail::parse_shape_text(shape_text);
        require(shape == params[idx].second->shape, "load_checkpoint: shape mismatch for " + name);
        std::vector<float> buf(static_cast<size_t>(shape_numel(shape)));
        bin.seekg(offset * 4);
        bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        require(bin.good(), "load_checkpoint: truncated data for " + name);
        for (size_t i = 0; i < buf.size(); ++i) params[idx].second->data[i] = static_cast<R>(buf[i]);
        idx++;
    }
    require(idx == params.size(), "load_checkpoint: checkpoint lists " + std::to_string(idx) + " tensors, state has " +
                                      std::to_string(params.size()));
    st.step = step;
}

}  // namespace cht
