#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "dfformer/layers.hpp"
#include "dfformer/tensor.hpp"

namespace dff {

static_assert(std::endian::native == std::endian::little,
              "tensor container I/O assumes a little-endian host");

// Flat binary tensor container: magic bytes "DFT1", then the 4 shape entries
// as little-endian 64-bit integers, then raw little-endian element bytes.
// The element width (f32/f64) is inferred from the byte count on read.

inline constexpr char kTensorMagic[4] = {'D', 'F', 'T', '1'};

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    os.write(kTensorMagic, 4);
    for (std::int64_t s : t.shape) {
        const auto u = static_cast<std::uint64_t>(s);
        os.write(reinterpret_cast<const char*>(&u), 8);
    }
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(T)));
}

template <class T>
void write_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    write_tensor(os, t);
    if (!os) {
        throw std::runtime_error("short write: " + path.string());
    }
}

/// Reads a container, converting the stored element type to T if necessary.
template <class T>
Tensor<T> read_tensor_file(const std::filesystem::path& path) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open for reading: " + path.string());
    }
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw std::runtime_error("not a tensor container: " + path.string());
    }
    std::array<std::int64_t, 4> shape{};
    for (auto& s : shape) {
        std::uint64_t u = 0;
        is.read(reinterpret_cast<char*>(&u), 8);
        s = static_cast<std::int64_t>(u);
    }
    if (!is) {
        throw std::runtime_error("truncated tensor header: " + path.string());
    }
    const std::int64_t count = shape[0] * shape[1] * shape[2] * shape[3];
    const std::uintmax_t payload = std::filesystem::file_size(path) - 36;
    if (count < 0 || (payload != static_cast<std::uintmax_t>(count) * 4 &&
                      payload != static_cast<std::uintmax_t>(count) * 8)) {
        throw std::runtime_error("tensor payload does not match shape: " + path.string());
    }
    const bool stored_f64 = payload == static_cast<std::uintmax_t>(count) * 8;

    Tensor<T> out(shape[0], shape[1], shape[2], shape[3]);
    if ((stored_f64 && std::is_same_v<T, double>) || (!stored_f64 && std::is_same_v<T, float>)) {
        is.read(reinterpret_cast<char*>(out.data.data()),
                static_cast<std::streamsize>(payload));
    } else if (stored_f64) {
        std::vector<double> buf(static_cast<std::size_t>(count));
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(payload));
        for (std::size_t i = 0; i < buf.size(); ++i) {
            out.data[i] = static_cast<T>(buf[i]);
        }
    } else {
        std::vector<float> buf(static_cast<std::size_t>(count));
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(payload));
        for (std::size_t i = 0; i < buf.size(); ++i) {
            out.data[i] = static_cast<T>(buf[i]);
        }
    }
    if (!is) {
        throw std::runtime_error("truncated tensor payload: " + path.string());
    }
    return out;
}

// Checkpoints: a directory holding index.json (the parameter names, in
// model iteration order) plus one flat tensor blob per parameter.

template <class T>
void save_checkpoint(const std::vector<ParamRef<T>>& params, const std::filesystem::path& dir);

template <class T>
void load_checkpoint(const std::vector<ParamRef<T>>& params, const std::filesystem::path& dir);

}  // namespace dff
