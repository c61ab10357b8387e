#include "caan/serialize.hpp"

#include <cstring>
#include <fstream>
#include <limits>

namespace caan {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

bool get_f32(std::istream& is, float& f) {
    std::uint32_t v;
    if (!get_u32(is, v)) return false;
    std::memcpy(&f, &v, 4);
    return true;
}

constexpr std::size_t kMaxElements = std::size_t{1} << 31;

}  // namespace

void write_params(const ParamFile& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os.write("CAAN", 4);
    put_u32(os, kModelVersion);
    for (const auto& rec : params) {
        put_u32(os, static_cast<std::uint32_t>(rec.name.size()));
        os.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
        put_u32(os, static_cast<std::uint32_t>(rec.shape.size()));
        for (std::size_t d : rec.shape) put_u32(os, static_cast<std::uint32_t>(d));
        if (shape_numel(rec.shape) != rec.values.size())
            throw contract_error("record " + rec.name + " shape/value mismatch");
        for (float f : rec.values) put_f32(os, f);
    }
    if (!os) throw io_error("write failed for " + path);
}

ParamFile read_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "CAAN", 4) != 0)
        throw format_error("bad magic in " + path);
    std::uint32_t version;
    if (!get_u32(is, version)) throw format_error("truncated header in " + path);
    if (version != kModelVersion)
        throw format_error("unsupported model version " + std::to_string(version));

    ParamFile out;
    for (;;) {
        std::uint32_t name_len;
        if (!get_u32(is, name_len)) {
            if (is.eof()) break;  // clean end of records
            throw format_error("truncated record header in " + path);
        }
        if (name_len > 4096) throw format_error("implausible name length in " + path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (is.gcount() != static_cast<std::streamsize>(name_len))
            throw format_error("truncated name in " + path);
        std::uint32_t rank;
        if (!get_u32(is, rank)) throw format_error("truncated rank in " + path);
        if (rank > 8) throw format_error("implausible rank " + std::to_string(rank) + " in " + path);
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t d;
            if (!get_u32(is, d)) throw format_error("truncated dims in " + path);
            if (d == 0) throw format_error("zero dimension in " + path);
            shape[i] = d;
            if (numel > kMaxElements / d) throw format_error("dimension overflow in " + path);
            numel *= d;
        }
        std::vector<float> values(numel);
        for (std::size_t i = 0; i < numel; ++i)
            if (!get_f32(is, values[i])) throw format_error("truncated payload in " + path);
        out.push_back(ParamRecord{std::move(name), std::move(shape), std::move(values)});
    }
    return out;
}

ParamRecord meta_record(const std::string& name, const std::vector<float>& vals) {
    return ParamRecord{name, {vals.size()}, vals};
}

const ParamRecord& find_param(const ParamFile& file, const std::string& name) {
    for (const auto& rec : file)
        if (rec.name == name) return rec;
    throw validation_error("missing parameter record " + name);
}

const ParamRecord* find_param_opt(const ParamFile& file, const std::string& name) {
    for (const auto& rec : file)
        if (rec.name == name) return &rec;
    return nullptr;
}

}  // namespace caan
