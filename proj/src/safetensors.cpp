// SPDX-License-Identifier: Apache-2.0
#include "loramerge/safetensors.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace loramerge {

namespace {

using nlohmann::json;

double decode_f16(std::uint16_t h) {
    const std::uint16_t sign = h >> 15;
    const std::uint16_t exp = (h >> 10) & 0x1f;
    const std::uint16_t frac = h & 0x3ff;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(frac), -24);
    } else if (exp == 31) {
        v = frac ? std::numeric_limits<double>::quiet_NaN()
                 : std::numeric_limits<double>::infinity();
    } else {
        v = std::ldexp(static_cast<double>(frac | 0x400), static_cast<int>(exp) - 25);
    }
    return sign ? -v : v;
}

double decode_bf16(std::uint16_t h) {
    const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return static_cast<double>(f);
}

std::size_t dtype_width(const std::string& dtype) {
    if (dtype == "F16" || dtype == "BF16") return 2;
    if (dtype == "F32") return 4;
    if (dtype == "F64") return 8;
    throw UnsupportedFormatError("safetensors: dtype " + dtype +
                                 " is not a supported 16/32/64-bit float type");
}

}  // namespace

SafetensorsFile load_safetensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("safetensors: cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    if (file_size < 8)
        throw ParseError("safetensors: file shorter than the 8-byte length field", 0);

    std::uint8_t lenbuf[8];
    in.read(reinterpret_cast<char*>(lenbuf), 8);
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | lenbuf[i];
    if (header_len > file_size - 8)
        throw ParseError("safetensors: header length " + std::to_string(header_len) +
                             " exceeds file size " + std::to_string(file_size),
                         0);

    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    json j;
    try {
        j = json::parse(header);
    } catch (const json::exception& e) {
        throw ParseError(std::string("safetensors: malformed JSON header: ") + e.what(), 8);
    }
    if (!j.is_object()) throw ParseError("safetensors: header is not a JSON object", 8);

    const std::uint64_t data_size = file_size - 8 - header_len;
    std::vector<char> buffer(data_size);
    in.read(buffer.data(), static_cast<std::streamsize>(data_size));

    SafetensorsFile out;
    for (const auto& [name, info] : j.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : info.items()) out.metadata[k] = v.get<std::string>();
            continue;
        }
        if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
            !info.contains("data_offsets"))
            throw ParseError("safetensors: tensor " + name + " missing dtype/shape/data_offsets",
                             8);
        SafetensorsFile::Entry entry;
        entry.dtype = info["dtype"].get<std::string>();
        const std::size_t width = dtype_width(entry.dtype);
        entry.shape = info["shape"].get<std::vector<std::size_t>>();
        if (entry.shape.size() > 2)
            throw UnsupportedFormatError("safetensors: tensor " + name + " has rank " +
                                         std::to_string(entry.shape.size()) +
                                         "; only 1-D and 2-D tensors are supported");
        std::size_t count = 1;
        for (const std::size_t d : entry.shape) count *= d;
        const auto offsets = info["data_offsets"].get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_size)
            throw ParseError("safetensors: tensor " + name + " has out-of-range data_offsets",
                             static_cast<long long>(8 + header_len));
        if (offsets[1] - offsets[0] != count * width)
            throw ParseError("safetensors: tensor " + name + " byte span does not match shape",
                             static_cast<long long>(8 + header_len + offsets[0]));

        const std::size_t rows = entry.shape.size() == 2 ? entry.shape[0] : 1;
        const std::size_t cols = entry.shape.size() == 2 ? entry.shape[1]
                                 : entry.shape.size() == 1 ? entry.shape[0]
                                                           : 1;
        Matrix m(rows, cols);
        const char* src = buffer.data() + offsets[0];
        for (std::size_t i = 0; i < count; ++i) {
            double v = 0.0;
            if (width == 2) {
                std::uint16_t bits;
                std::memcpy(&bits, src + i * 2, 2);
                v = entry.dtype == "F16" ? decode_f16(bits) : decode_bf16(bits);
            } else if (width == 4) {
                float f;
                std::memcpy(&f, src + i * 4, 4);
                v = static_cast<double>(f);
            } else {
                std::memcpy(&v, src + i * 8, 8);
            }
            m.data()[i] = v;
        }
        entry.data = std::move(m);
        out.tensors.emplace(name, std::move(entry));
    }
    return out;
}

void save_safetensors(const std::string& path, const std::map<std::string, Matrix>& tensors,
                      const std::map<std::string, std::string>& metadata,
                      const std::string& dtype) {
    if (dtype != "F32" && dtype != "F64")
        throw ArgumentError("safetensors: writer supports F32 or F64, got " + dtype);
    const std::size_t width = dtype == "F32" ? 4 : 8;

    json header = json::object();
    if (!metadata.empty()) {
        json meta = json::object();
        for (const auto& [k, v] : metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, m] : tensors) {  // std::map iterates in sorted name order
        const std::uint64_t bytes = m.size() * width;
        header[name] = {{"dtype", dtype},
                        {"shape", {m.rows(), m.cols()}},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("safetensors: cannot write " + path);
    const std::uint64_t len = header_str.size();
    std::uint8_t lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<std::uint8_t>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, m] : tensors) {
        if (width == 4) {
            std::vector<float> f(m.size());
            for (std::size_t i = 0; i < m.size(); ++i) f[i] = static_cast<float>(m.data()[i]);
            out.write(reinterpret_cast<const char*>(f.data()),
                      static_cast<std::streamsize>(f.size() * 4));
        } else {
            out.write(reinterpret_cast<const char*>(m.data()),
                      static_cast<std::streamsize>(m.size() * 8));
        }
    }
    if (!out) throw IoError("safetensors: write failed for " + path);
}

}  // namespace loramerge
