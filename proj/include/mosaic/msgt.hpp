#pragma once

// MSGT binary tensor files and manifest-indexed tensor directories.
//
// Layout: "MSGT" | u32 version (=1) | u32 rank | rank x u64 dims | u8 dtype
// (0 = f32, 1 = f64) | payload, all little-endian, row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic::io {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kMsgtVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<U>(v);
}

template <class F>
void put_float(std::string& out, F v) {
    using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
    put_le(out, std::bit_cast<Bits>(v));
}

template <class F>
F get_float(const unsigned char* p) {
    using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
    return std::bit_cast<F>(get_le<Bits>(p));
}

}  // namespace detail

template <class T>
std::string encode_msgt(const Tensor<T>& t, DType dtype = dtype_of<T>()) {
    std::string out = "MSGT";
    detail::put_le<std::uint32_t>(out, kMsgtVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    out.push_back(static_cast<char>(dtype));
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (dtype == DType::f32)
            detail::put_float<float>(out, static_cast<float>(t[i]));
        else
            detail::put_float<double>(out, static_cast<double>(t[i]));
    }
    return out;
}

template <class T>
Tensor<T> decode_msgt(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    if (n < 13 || std::memcmp(p, "MSGT", 4) != 0) throw IoError("not an MSGT stream (bad magic)");
    const auto version = detail::get_le<std::uint32_t>(p + 4);
    if (version != kMsgtVersion) throw IoError("unsupported MSGT version " + std::to_string(version));
    const auto rank = detail::get_le<std::uint32_t>(p + 8);
    std::size_t off = 12;
    if (n < off + 8ull * rank + 1) throw IoError("truncated MSGT header");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i, off += 8) shape[i] = detail::get_le<std::uint64_t>(p + off);
    const auto dtype = static_cast<DType>(p[off++]);
    if (dtype != DType::f32 && dtype != DType::f64) throw IoError("unknown MSGT dtype code");
    const std::size_t count = shape_numel(shape);
    const std::size_t width = dtype == DType::f32 ? 4 : 8;
    if (n != off + count * width) throw IoError("MSGT payload length does not match header");
    AlignedVector<T> data(count);
    for (std::size_t i = 0; i < count; ++i, off += width)
        data[i] = dtype == DType::f32 ? static_cast<T>(detail::get_float<float>(p + off))
                                      : static_cast<T>(detail::get_float<double>(p + off));
    return Tensor<T>(std::move(shape), std::move(data));
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

template <class T>
void save_msgt(const std::filesystem::path& path, const Tensor<T>& t, DType dtype = dtype_of<T>()) {
    write_file(path, encode_msgt(t, dtype));
}

template <class T>
Tensor<T> load_msgt(const std::filesystem::path& path) {
    return decode_msgt<T>(read_file(path));
}

// A directory of named tensors with a `manifest.txt` listing "name file" lines.
template <class T>
void save_tensor_dir(const std::filesystem::path& dir, const std::map<std::string, Tensor<T>>& tensors) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    std::string manifest;
    for (const auto& [name, t] : tensors) {
        std::string file = name;
        for (auto& c : file)
            if (c == '/' || c == ' ') c = '_';
        file += ".msgt";
        save_msgt(dir / file, t);
        manifest += name + " " + file + "\n";
    }
    write_file(dir / "manifest.txt", manifest);
}

template <class T>
std::map<std::string, Tensor<T>> load_tensor_dir(const std::filesystem::path& dir) {
    std::istringstream in(read_file(dir / "manifest.txt"));
    std::map<std::string, Tensor<T>> out;
    std::string name, file;
    while (in >> name >> file) out.emplace(name, load_msgt<T>(dir / file));
    return out;
}

}  // namespace mosaic::io
