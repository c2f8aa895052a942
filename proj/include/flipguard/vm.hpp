#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flipguard/engine.hpp"

namespace flipguard {

// Mini register VM. Opcode bytes deliberately copy x86 where the attack
// surface depends on them (NOP, HALT, the jcc families) so single-bit
// conditional inversion carries over verbatim. The remaining encodings are
// chosen so that flipping bit 0 of any opcode byte yields an invalid opcode.
enum class Op : uint8_t {
    Nop = 0x90,
    Halt = 0xF4,
    Loadi = 0xB8, // LOADI r, imm32
    Mov = 0x88,   // MOV rd, rs
    Load = 0x8A,  // LOAD rd, [rs+disp8]
    Store = 0x82, // STORE [rd+disp8], rs
    Add = 0x20,   // ADD rd, rs
    Sub = 0x24,   // SUB rd, rs
    Mul = 0x28,   // MUL rd, rs
    Cmp = 0x38,   // CMP ra, rb (signed)
    Jmp = 0xEB,   // JMP rel8
    JmpNear = 0xE9, // JMP rel32
    Je = 0x74,
    Jne = 0x75,
    Jl = 0x7C,
    Jge = 0x7D,
    Jle = 0x7E,
    Jg = 0x7F,
    NearPrefix = 0x0F, // 0x0F 0x84/85/8C/8D/8E/8F + rel32
};

struct Program {
    std::vector<uint8_t> bytecode;
    std::map<std::string, uint32_t> labels; // assembler metadata
    uint32_t entry = 0;
};

enum class CrashReason : uint8_t { None = 0, InvalidOpcode, OutOfBoundsMemory, BadJumpTarget };

struct VmOutcome {
    Outcome status = Outcome::Ok;
    CrashReason reason = CrashReason::None;
    uint64_t steps = 0;
};

// Decoded instruction, the unit the assembler and splicer work with.
struct Instr {
    Op op = Op::Nop;
    uint8_t force = 0;   // jumps: 0 auto, 1 short, 2 near
    uint8_t r1 = 0, r2 = 0;
    int32_t imm = 0;     // LOADI immediate / LOAD,STORE displacement
    int target = -1;     // jumps: target instruction index
    uint32_t offset = 0; // byte offset once encoded
    uint32_t length = 0;
};

// One instruction per line; `label:` definitions; `;` comments. Jump
// mnemonics accept .S / .N suffixes to force short/near encoding; otherwise
// rel8 is chosen when it reaches, else rel32 (iterated to a fixpoint).
// Throws ParseError with the line number, RangeError for an unreachable
// forced-short jump.
Program assemble(const std::string& source);

// Linear decode from offset 0. Throws ParseError on an invalid opcode or a
// jump target that is not an instruction boundary.
std::vector<Instr> decode_program(const std::vector<uint8_t>& bytecode);

// Re-encodes a decoded instruction list (rel8/rel32 fixpoint as in assemble).
std::vector<uint8_t> encode_program(const std::vector<Instr>& instrs);

std::string disassemble(const std::vector<uint8_t>& bytecode);

// Byte offsets of instruction starts, in order, from a linear decode.
std::vector<uint32_t> instruction_sites(const std::vector<uint8_t>& bytecode);

// Fetch-decode-execute over `mem` (int32 words, bounds-checked). Never
// faults the host; any malformed fetch is Crash, exhausted budget is
// Timeout with steps == step_budget.
VmOutcome execute(const uint8_t* code, size_t code_len, uint32_t entry, std::vector<int32_t>& mem,
                  uint64_t step_budget);
VmOutcome execute(const Program& prog, std::vector<int32_t>& mem, uint64_t step_budget);

// The semantic opposite of a conditional-jump opcode byte; differs in
// exactly bit 0. NotConditional otherwise. `near_second_byte` selects the
// 0x84..0x8F family.
uint8_t opposite_jump(uint8_t opcode, bool near_second_byte = false);

struct CondJumpSite {
    uint32_t instr_offset = 0;  // start of the instruction
    uint32_t opcode_offset = 0; // the byte whose bit 0 inverts the condition
    bool near = false;
};
// Every conditional jump in a linear decode, in offset order.
std::vector<CondJumpSite> find_cond_jumps(const std::vector<uint8_t>& bytecode);

// Sized so the default 256x256 hidden layer (~1.8M steps per kernel call)
// completes with headroom; an adversarial infinite loop still times out fast.
constexpr uint64_t kDefaultStepBudget = 4'000'000;

// Reference integer GEMM kernel (assembly text). Data memory layout, in
// int32 words: [0]=M [1]=N [2]=K [3]=baseA [4]=baseB [5]=baseC
// [6]=clamp_hi [7]=clamp_lo, then A (M*K), B (K*N), C (M*N). The kernel
// uses all six conditional forms across its guards and clamp sequence.
extern const char* const kGemmKernelSource;

constexpr int32_t kClampHi = 1 << 28;
constexpr int32_t kClampLo = -(1 << 28);

} // namespace flipguard
