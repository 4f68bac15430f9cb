#include "circuitforge/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "circuitforge/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "weight container I/O assumes a little-endian host");

namespace circuitforge {

using nlohmann::json;

namespace {

constexpr const char* kSpecKey = "__spec__";

std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::FormatError, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

json spec_to_json(const ModelSpec& s) {
    return json{{"n_layers", s.n_layers},     {"n_heads", s.n_heads},
                {"d_model", s.d_model},       {"d_head", s.d_head},
                {"d_ff", s.d_ff},             {"vocab_size", s.vocab_size},
                {"max_seq", s.max_seq},       {"ln_eps", s.ln_eps},
                {"attn_only", s.attn_only},
                {"positional", s.positional == Positional::learned ? "learned" : "none"}};
}

ModelSpec spec_from_json(const json& j) {
    try {
        ModelSpec s;
        s.n_layers = j.at("n_layers").get<std::size_t>();
        s.n_heads = j.at("n_heads").get<std::size_t>();
        s.d_model = j.at("d_model").get<std::size_t>();
        s.d_head = j.at("d_head").get<std::size_t>();
        s.d_ff = j.at("d_ff").get<std::size_t>();
        s.vocab_size = j.at("vocab_size").get<std::size_t>();
        s.max_seq = j.at("max_seq").get<std::size_t>();
        s.ln_eps = j.at("ln_eps").get<float>();
        s.attn_only = j.at("attn_only").get<bool>();
        const auto pos = j.at("positional").get<std::string>();
        if (pos != "learned" && pos != "none") {
            fail(ErrorCode::FormatError, "unknown positional kind " + pos);
        }
        s.positional = pos == "learned" ? Positional::learned : Positional::none;
        return s;
    } catch (const json::exception& e) {
        fail(ErrorCode::FormatError, std::string("bad model spec: ") + e.what());
    }
}

void save_weights(const std::filesystem::path& path, const WeightStore& store) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : store.tensors()) {
        const std::uint64_t length = t.numel() * sizeof(float);
        header[name] = json{{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset},
                            {"length", length}};
        offset += length;
    }
    header[kSpecKey] = spec_to_json(store.spec());
    const std::string text = header.dump();
    const std::uint64_t n = text.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : store.tensors()) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

namespace {

std::pair<json, std::map<std::string, Tensor>> parse_container(const std::filesystem::path& path) {
    const std::vector<char> bytes = read_file(path);
    if (bytes.size() < 8) fail(ErrorCode::FormatError, "container shorter than its header length");
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), sizeof(n));
    if (n > bytes.size() - 8) fail(ErrorCode::FormatError, "header length exceeds file size");

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const json::exception& e) {
        fail(ErrorCode::FormatError, std::string("header is not JSON: ") + e.what());
    }
    if (!header.is_object()) fail(ErrorCode::FormatError, "header must be a JSON object");

    const std::size_t blob_start = 8 + static_cast<std::size_t>(n);
    const std::size_t blob_size = bytes.size() - blob_start;
    std::map<std::string, Tensor> tensors;
    for (const auto& [name, info] : header.items()) {
        if (name == kSpecKey) continue;
        try {
            if (info.at("dtype").get<std::string>() != "f32") {
                fail(ErrorCode::FormatError, "tensor " + name + " is not f32");
            }
            auto shape = info.at("shape").get<std::vector<std::size_t>>();
            const auto offset = info.at("offset").get<std::uint64_t>();
            const auto length = info.at("length").get<std::uint64_t>();
            if (length != Tensor::numel_of(shape) * sizeof(float)) {
                fail(ErrorCode::FormatError, "tensor " + name + " length disagrees with shape");
            }
            if (offset > blob_size || length > blob_size - offset) {
                fail(ErrorCode::FormatError, "tensor " + name + " runs past end of file");
            }
            std::vector<float> data(length / sizeof(float));
            std::memcpy(data.data(), bytes.data() + blob_start + offset, length);
            tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
        } catch (const json::exception& e) {
            fail(ErrorCode::FormatError, "bad entry for " + name + ": " + e.what());
        }
    }
    return {std::move(header), std::move(tensors)};
}

}  // namespace

WeightStore load_weights(const std::filesystem::path& path, const ModelSpec& spec) {
    auto [header, tensors] = parse_container(path);
    return WeightStore(spec, std::move(tensors));
}

WeightStore load_weights(const std::filesystem::path& path) {
    auto [header, tensors] = parse_container(path);
    if (!header.contains(kSpecKey)) fail(ErrorCode::FormatError, "container has no __spec__");
    return WeightStore(spec_from_json(header[kSpecKey]), std::move(tensors));
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
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

}  // namespace circuitforge
