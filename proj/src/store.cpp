#include "cfm/store.hpp"

#include <cstring>
#include <fstream>

namespace cfm {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    std::ifstream in;
    std::string context;

    explicit Reader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw LoadError("cannot open '" + path + "'");
    }

    void read_bytes(void* dst, std::size_t n) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw LoadError("truncated file while reading " +
                            (context.empty() ? std::string("header") : context));
        }
    }

    std::uint16_t u16() {
        unsigned char b[2];
        read_bytes(b, 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }

    std::uint32_t u32() {
        unsigned char b[4];
        read_bytes(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

}  // namespace

void NamedTensorStore::add(const std::string& name, std::vector<std::uint32_t> dims,
                           std::vector<float> data) {
    if (index_.count(name)) throw LoadError("duplicate entry '" + name + "'");
    std::uint64_t expected = 1;
    for (auto d : dims) expected *= d;
    if (expected != data.size()) {
        throw LoadError("entry '" + name + "': payload length " + std::to_string(data.size()) +
                        " inconsistent with shape");
    }
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(dims), std::move(data)});
}

const NamedTensorStore::Entry& NamedTensorStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LoadError("missing entry '" + name + "'");
    return entries_[it->second];
}

float NamedTensorStore::scalar(const std::string& name) const {
    const Entry& e = get(name);
    if (e.data.size() != 1) throw LoadError("entry '" + name + "' is not a scalar");
    return e.data[0];
}

void NamedTensorStore::add_u64(const std::string& name, std::uint64_t value) {
    std::vector<float> limbs(4);
    for (int i = 0; i < 4; ++i) limbs[static_cast<std::size_t>(i)] =
        static_cast<float>((value >> (16 * i)) & 0xffffULL);
    add(name, {4}, std::move(limbs));
}

std::uint64_t NamedTensorStore::u64(const std::string& name) const {
    const Entry& e = get(name);
    if (e.data.size() != 4) throw LoadError("entry '" + name + "' is not a u64 record");
    std::uint64_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<std::uint32_t>(e.data[static_cast<std::size_t>(i)]))
             << (16 * i);
    }
    return v;
}

void NamedTensorStore::save(const std::string& path) const {
    std::string buf;
    buf.append("CFMN");
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<std::uint32_t>(entries_.size()));
    for (const Entry& e : entries_) {
        if (e.name.size() > 0xffff) throw LoadError("entry name too long");
        put_u16(buf, static_cast<std::uint16_t>(e.name.size()));
        buf.append(e.name);
        buf.push_back(static_cast<char>(e.dims.size()));
        for (auto d : e.dims) put_u32(buf, d);
        for (float v : e.data) put_f32(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw LoadError("write failed for '" + path + "'");
}

NamedTensorStore NamedTensorStore::load(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.read_bytes(magic, 4);
    if (std::memcmp(magic, "CFMN", 4) != 0) {
        throw LoadError("'" + path + "': bad magic, not a model file");
    }
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw LoadError("'" + path + "': unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    NamedTensorStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        r.context = "entry " + std::to_string(i);
        const std::uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        r.read_bytes(name.data(), name_len);
        r.context = "entry '" + name + "'";
        unsigned char rank;
        r.read_bytes(&rank, 1);
        std::vector<std::uint32_t> dims(rank);
        std::uint64_t n = 1;
        for (auto& d : dims) {
            d = r.u32();
            n *= d;
        }
        std::vector<float> data(n);
        for (auto& v : data) v = r.f32();
        store.add(name, std::move(dims), std::move(data));
    }
    return store;
}

}  // namespace cfm
