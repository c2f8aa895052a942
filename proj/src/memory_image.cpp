#include "flipguard/memory_image.hpp"

#include <cstring>

#include "flipguard/bytes.hpp"
#include "flipguard/error.hpp"

namespace flipguard {

// Weight/bias element counts derivable from layer dims (skeleton layers carry
// no data vectors).
static uint64_t weight_count_of(const QuantLayer& l) {
    if (l.kind == LayerKind::Linear)
        return static_cast<uint64_t>(l.out) * static_cast<uint64_t>(l.in);
    return static_cast<uint64_t>(l.filters) * static_cast<uint64_t>(l.channels) *
           static_cast<uint64_t>(l.kh) * static_cast<uint64_t>(l.kw);
}
static uint64_t bias_count_of(const QuantLayer& l) {
    return l.kind == LayerKind::Linear ? static_cast<uint64_t>(l.out)
                                       : static_cast<uint64_t>(l.filters);
}

const Section& MemoryImage::section(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return s;
    fail(Errc::ImageCorrupt, "missing section " + name);
}

bool MemoryImage::has_section(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return true;
    return false;
}

uint64_t MemoryImage::payload_hash() const { return fnv1a64(payload.data(), payload.size()); }

uint64_t MemoryImage::section_hash(const std::string& name) const {
    const Section& s = section(name);
    return fnv1a64(payload.data() + s.offset, s.length);
}

MemoryImage build_image(const Network& net, const Program& prog) {
    MemoryImage img;
    img.program_meta.labels = prog.labels;
    img.program_meta.entry = prog.entry;
    img.dummy_layer_flags.assign(net.layers.size(), 0);

    // Skeleton: shapes and scales only.
    img.skeleton = net;
    for (auto& l : img.skeleton.layers) {
        l.w.clear();
        l.w.shrink_to_fit();
        l.b.clear();
        l.b.shrink_to_fit();
    }

    // WEIGHTS: every layer's weight bytes, then every layer's bias words.
    // All-weights-first means obfuscation growth never shifts a fixed replay
    // address onto a bias byte.
    for (const auto& l : net.layers)
        img.payload.insert(img.payload.end(), reinterpret_cast<const uint8_t*>(l.w.data()),
                           reinterpret_cast<const uint8_t*>(l.w.data()) + l.w.size());
    for (const auto& l : net.layers) {
        for (int32_t b : l.b) {
            uint32_t u = static_cast<uint32_t>(b);
            for (int i = 0; i < 4; ++i) img.payload.push_back(static_cast<uint8_t>(u >> (8 * i)));
        }
    }
    uint64_t weights_len = img.payload.size();
    img.payload.insert(img.payload.end(), prog.bytecode.begin(), prog.bytecode.end());

    img.sections.push_back({"WEIGHTS", 0, weights_len});
    img.sections.push_back({"CODE", weights_len, img.payload.size() - weights_len});
    return img;
}

CoordMap coord_map(const MemoryImage& img) {
    CoordMap m;
    uint64_t off = 0;
    for (const auto& l : img.skeleton.layers) {
        m.weight_offset.push_back(off);
        m.weight_length.push_back(weight_count_of(l));
        m.layer_cols.push_back(l.kind == LayerKind::Linear ? l.in : l.channels * l.kh * l.kw);
        off += weight_count_of(l);
    }
    m.weights_begin = 0;
    m.weights_end = off;
    for (const auto& l : img.skeleton.layers) {
        m.bias_offset.push_back(off);
        off += bias_count_of(l) * 4;
    }
    for (size_t i = 0; i < img.skeleton.layers.size(); ++i)
        m.dummy_layer.push_back(i < img.dummy_layer_flags.size() && img.dummy_layer_flags[i]);
    const Section& code = img.section("CODE");
    m.code_begin = code.offset;
    m.code_end = code.offset + code.length;
    if (off != code.offset) fail(Errc::ImageCorrupt, "WEIGHTS layout inconsistent with sections");
    return m;
}

void flip_bit(MemoryImage& img, const BitAddress& a) {
    if (a.byte_offset >= img.payload.size() || a.bit_index > 7)
        fail(Errc::OutOfRange, "bit address outside payload");
    img.payload[a.byte_offset] ^= static_cast<uint8_t>(1u << a.bit_index);
}

WeightLocation locate_weight(const MemoryImage& img, int layer, int row, int col) {
    CoordMap m = coord_map(img);
    if (layer < 0 || layer >= static_cast<int>(m.weight_offset.size()))
        fail(Errc::UnknownCoordinate, "no such layer");
    int cols = m.layer_cols[static_cast<size_t>(layer)];
    uint64_t idx = static_cast<uint64_t>(row) * static_cast<uint64_t>(cols) +
                   static_cast<uint64_t>(col);
    if (row < 0 || col < 0 || col >= cols || idx >= m.weight_length[static_cast<size_t>(layer)])
        fail(Errc::UnknownCoordinate, "coordinate outside layer");
    WeightLocation loc;
    loc.byte_offset = m.weight_offset[static_cast<size_t>(layer)] + idx;
    for (int b = 0; b < 8; ++b) loc.bits[b] = {loc.byte_offset, static_cast<uint8_t>(b)};
    return loc;
}

bool lookup_weight(const MemoryImage& img, uint64_t byte_offset, WeightCoord& out) {
    CoordMap m = coord_map(img);
    for (size_t li = 0; li < m.weight_offset.size(); ++li) {
        uint64_t base = m.weight_offset[li];
        if (byte_offset >= base && byte_offset < base + m.weight_length[li]) {
            uint64_t idx = byte_offset - base;
            out.layer = static_cast<int>(li);
            out.row = static_cast<int>(idx / static_cast<uint64_t>(m.layer_cols[li]));
            out.col = static_cast<int>(idx % static_cast<uint64_t>(m.layer_cols[li]));
            return true;
        }
    }
    return false;
}

Network materialize_network(const MemoryImage& img) {
    Network net = img.skeleton;
    CoordMap m = coord_map(img);
    for (size_t li = 0; li < net.layers.size(); ++li) {
        auto& l = net.layers[li];
        l.w.resize(weight_count_of(l));
        std::memcpy(l.w.data(), img.payload.data() + m.weight_offset[li], l.w.size());
        l.b.resize(bias_count_of(l));
        const uint8_t* p = img.payload.data() + m.bias_offset[li];
        for (auto& b : l.b) {
            uint32_t u = 0;
            for (int i = 0; i < 4; ++i) u |= static_cast<uint32_t>(p[i]) << (8 * i);
            b = static_cast<int32_t>(u);
            p += 4;
        }
    }
    return net;
}

Program materialize_program(const MemoryImage& img) {
    Program prog = img.program_meta;
    const Section& code = img.section("CODE");
    prog.bytecode.assign(img.payload.begin() + static_cast<long>(code.offset),
                         img.payload.begin() + static_cast<long>(code.offset + code.length));
    return prog;
}

std::vector<uint8_t> serialize_image(const MemoryImage& img) {
    ByteWriter w;
    w.bytes("BARM", 4);
    w.u16(img.version);
    w.u16(static_cast<uint16_t>(img.sections.size()));
    w.u32(MemoryImage::kPageSize);
    for (const auto& s : img.sections) {
        char name[8] = {};
        std::memcpy(name, s.name.data(), std::min<size_t>(8, s.name.size()));
        w.bytes(name, 8);
        w.u64(s.offset);
        w.u64(s.length);
    }
    w.u64(img.payload.size());
    w.bytes(img.payload.data(), img.payload.size());

    // Structural sidecar.
    w.u32(static_cast<uint32_t>(img.skeleton.input_dim));
    w.u32(static_cast<uint32_t>(img.skeleton.n_classes));
    w.u16(static_cast<uint16_t>(img.skeleton.layers.size()));
    for (const auto& l : img.skeleton.layers) {
        w.u8(static_cast<uint8_t>(l.kind));
        w.u8(static_cast<uint8_t>(l.act));
        w.u8(static_cast<uint8_t>(l.backend));
        w.u32(static_cast<uint32_t>(l.in));
        w.u32(static_cast<uint32_t>(l.out));
        w.u32(static_cast<uint32_t>(l.filters));
        w.u32(static_cast<uint32_t>(l.channels));
        w.u32(static_cast<uint32_t>(l.kh));
        w.u32(static_cast<uint32_t>(l.kw));
        w.u32(static_cast<uint32_t>(l.in_shape.c));
        w.u32(static_cast<uint32_t>(l.in_shape.h));
        w.u32(static_cast<uint32_t>(l.in_shape.w));
        w.f32(l.scale_w);
        w.f32(l.scale_in);
        w.f32(l.scale_out);
    }
    for (uint8_t f : img.dummy_layer_flags) w.u8(f);
    w.u32(img.program_meta.entry);
    w.u32(static_cast<uint32_t>(img.program_meta.labels.size()));
    for (const auto& [name, off] : img.program_meta.labels) {
        w.u16(static_cast<uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(off);
    }
    return w.buf;
}

MemoryImage deserialize_image(const std::vector<uint8_t>& data) {
    ByteReader r(data);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "BARM", 4) != 0) fail(Errc::ParseError, "bad image magic");
    MemoryImage img;
    img.version = r.u16();
    if (img.version != 1) fail(Errc::ParseError, "unsupported image version");
    size_t n_sections = r.u16();
    if (r.u32() != MemoryImage::kPageSize) fail(Errc::ParseError, "unexpected page size");
    for (size_t i = 0; i < n_sections; ++i) {
        char name[9] = {};
        r.bytes(name, 8);
        Section s;
        s.name = name;
        s.offset = r.u64();
        s.length = r.u64();
        img.sections.push_back(std::move(s));
    }
    img.payload.resize(r.u64());
    r.bytes(img.payload.data(), img.payload.size());
    for (const auto& s : img.sections)
        if (s.offset + s.length > img.payload.size())
            fail(Errc::ParseError, "section range outside payload");

    img.skeleton.input_dim = static_cast<int>(r.u32());
    img.skeleton.n_classes = static_cast<int>(r.u32());
    size_t n_layers = r.u16();
    for (size_t i = 0; i < n_layers; ++i) {
        QuantLayer l;
        l.kind = static_cast<LayerKind>(r.u8());
        l.act = static_cast<Activation>(r.u8());
        l.backend = static_cast<Backend>(r.u8());
        l.in = static_cast<int>(r.u32());
        l.out = static_cast<int>(r.u32());
        l.filters = static_cast<int>(r.u32());
        l.channels = static_cast<int>(r.u32());
        l.kh = static_cast<int>(r.u32());
        l.kw = static_cast<int>(r.u32());
        l.in_shape.c = static_cast<int>(r.u32());
        l.in_shape.h = static_cast<int>(r.u32());
        l.in_shape.w = static_cast<int>(r.u32());
        l.scale_w = r.f32();
        l.scale_in = r.f32();
        l.scale_out = r.f32();
        img.skeleton.layers.push_back(std::move(l));
    }
    img.dummy_layer_flags.resize(n_layers);
    for (auto& f : img.dummy_layer_flags) f = r.u8();
    img.program_meta.entry = r.u32();
    size_t n_labels = r.u32();
    for (size_t i = 0; i < n_labels; ++i) {
        std::string name(r.u16(), '\0');
        r.bytes(name.data(), name.size());
        img.program_meta.labels[name] = r.u32();
    }
    return img;
}

void save_image(const MemoryImage& img, const std::string& path) {
    write_file(path, serialize_image(img));
}

MemoryImage load_image(const std::string& path) { return deserialize_image(read_file(path)); }

} // namespace flipguard
