#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flipguard/engine.hpp"
#include "flipguard/vm.hpp"

namespace flipguard {

// A single bit in the image payload. Bit 0 is the least significant bit.
struct BitAddress {
    uint64_t byte_offset = 0; // from payload start
    uint8_t bit_index = 0;    // 0..7

    friend bool operator==(const BitAddress& a, const BitAddress& b) {
        return a.byte_offset == b.byte_offset && a.bit_index == b.bit_index;
    }
    friend auto operator<=>(const BitAddress& a, const BitAddress& b) = default;
};

struct Section {
    std::string name; // "WEIGHTS" / "CODE"
    uint64_t offset = 0;
    uint64_t length = 0;
};

// Byte-exact container for weights and code. All bit flips operate on the
// payload; the structural metadata (network shapes, scales, program entry)
// rides alongside so the image can be re-materialized into a Network.
struct MemoryImage {
    static constexpr uint32_t kPageSize = 4096;

    uint16_t version = 1;
    std::vector<Section> sections;
    std::vector<uint8_t> payload;

    // Structural sidecar: the network with weight bytes zeroed out of the
    // payload view, plus the program's label metadata. Not part of the
    // attacked surface; regenerated on load from the skeleton fields below.
    Network skeleton;       // shapes/scales/backends; w/b contents ignored
    Program program_meta;   // labels/entry; bytecode lives in CODE
    std::vector<uint8_t> dummy_layer_flags; // 1 for layers inserted by obfuscation

    const Section& section(const std::string& name) const;
    bool has_section(const std::string& name) const;
    uint64_t payload_hash() const;
    uint64_t section_hash(const std::string& name) const;
};

// Maps (layer,row,col[,filter,kr,kc]) coordinates to payload byte ranges.
// Stored beside the image, never inside it: the attacker replays raw
// addresses against whatever layout is loaded.
struct WeightCoord {
    int layer = 0;
    int row = 0; // Linear: output row; Conv2D: filter
    int col = 0; // Linear: input col; Conv2D: flattened (channel,kr,kc)
    friend bool operator==(const WeightCoord&, const WeightCoord&) = default;
};

struct CoordMap {
    // weight_offset[layer] = payload byte offset of that layer's first weight
    std::vector<uint64_t> weight_offset;
    std::vector<uint64_t> weight_length; // int8 count per layer
    std::vector<uint64_t> bias_offset;   // payload offset of layer's int32 biases
    std::vector<int> layer_cols;         // row stride (Linear: in; Conv: per-filter count)
    std::vector<bool> dummy_layer;       // true for layers inserted by obfuscation
    uint64_t weights_begin = 0, weights_end = 0; // weight-byte region (excl. biases)
    uint64_t code_begin = 0, code_end = 0;
};

struct WeightLocation {
    uint64_t byte_offset = 0;
    BitAddress bits[8]; // bits[7] is the MSB
};

// Builds the image: WEIGHTS holds every layer's weight bytes in layer order
// (row-major), then every layer's bias words; CODE is the program bytecode.
// Keeping all biases after all weights means insertions only ever grow the
// weight region, so fixed replayed addresses can never drift onto bias bytes.
MemoryImage build_image(const Network& net, const Program& prog);
CoordMap coord_map(const MemoryImage& img);

// XOR-toggles exactly one bit in place. OutOfRange past the payload.
void flip_bit(MemoryImage& img, const BitAddress& a);

// Byte + all 8 bit addresses of one weight. UnknownCoordinate if absent.
WeightLocation locate_weight(const MemoryImage& img, int layer, int row, int col);
// Inverse: which weight houses this payload byte? False if not a weight byte.
bool lookup_weight(const MemoryImage& img, uint64_t byte_offset, WeightCoord& out);

// Re-materializes the network from the (possibly corrupted) payload.
Network materialize_network(const MemoryImage& img);
// The program as currently stored in CODE.
Program materialize_program(const MemoryImage& img);

// Image file ("BARM", little-endian): header, section table, payload,
// then the structural sidecar. deserialize(serialize(img)) is bit-identical.
std::vector<uint8_t> serialize_image(const MemoryImage& img);
MemoryImage deserialize_image(const std::vector<uint8_t>& data);
void save_image(const MemoryImage& img, const std::string& path);
MemoryImage load_image(const std::string& path);

} // namespace flipguard
