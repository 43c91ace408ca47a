#include "tpt/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace tpt {

namespace io {

namespace {

template <typename T>
void write_le(std::ostream& out, T v) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
        throw std::runtime_error("unexpected end of file");
    }
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
    return v;
}

} // namespace

void write_u8(std::ostream& out, std::uint8_t v) { write_le(out, v); }
void write_u16(std::ostream& out, std::uint16_t v) { write_le(out, v); }
void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }
std::uint8_t read_u8(std::istream& in) { return read_le<std::uint8_t>(in); }
std::uint16_t read_u16(std::istream& in) { return read_le<std::uint16_t>(in); }
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

} // namespace io

namespace {
constexpr char kMagic[] = "TPTW1";
constexpr std::size_t kMagicLen = 5;
} // namespace

void write_weights(std::ostream& out, const ModelWeights& weights) {
    out.write(kMagic, kMagicLen);
    io::write_u32(out, static_cast<std::uint32_t>(weights.tensors.size()));
    for (const auto& [name, t] : weights.tensors) {
        if (name.size() > 0xffff) throw std::runtime_error("weight name too long: " + name);
        io::write_u16(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u8(out, static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) io::write_u32(out, static_cast<std::uint32_t>(d));
        for (double v : t.data()) io::write_f64(out, v);
    }
    if (!out) throw std::runtime_error("failed writing weights");
}

ModelWeights read_weights(std::istream& in) {
    char magic[kMagicLen];
    if (!in.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0) {
        throw std::runtime_error("not a TPTW1 weights file");
    }
    ModelWeights w;
    const std::uint32_t count = io::read_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(io::read_u16(in), '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) {
            throw std::runtime_error("unexpected end of file");
        }
        Shape shape(io::read_u8(in));
        for (auto& d : shape) d = io::read_u32(in);
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) v = io::read_f64(in);
        if (!w.tensors.emplace(name, Tensor(shape, std::move(data))).second) {
            throw std::runtime_error("duplicate weight name '" + name + "'");
        }
    }
    return w;
}

void save_weights(const std::filesystem::path& path, const ModelWeights& weights) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_weights(out, weights);
}

ModelWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return read_weights(in);
}

} // namespace tpt
