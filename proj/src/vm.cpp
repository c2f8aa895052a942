#include "flipguard/vm.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "flipguard/error.hpp"

namespace flipguard {

namespace {

bool is_short_jcc(uint8_t b) {
    return b == 0x74 || b == 0x75 || b == 0x7C || b == 0x7D || b == 0x7E || b == 0x7F;
}
bool is_near_jcc_second(uint8_t b) {
    return b == 0x84 || b == 0x85 || b == 0x8C || b == 0x8D || b == 0x8E || b == 0x8F;
}
bool is_jump(Op op) {
    switch (op) {
        case Op::Jmp:
        case Op::Je:
        case Op::Jne:
        case Op::Jl:
        case Op::Jge:
        case Op::Jle:
        case Op::Jg: return true;
        default: return false;
    }
}
bool is_cond(Op op) { return is_jump(op) && op != Op::Jmp; }

// The 0x84..0x8F near-family byte for a short jcc opcode.
uint8_t near_byte(Op op) { return static_cast<uint8_t>(static_cast<uint8_t>(op) + 0x10); }
Op short_from_near(uint8_t b) { return static_cast<Op>(b - 0x10); }

uint32_t instr_length(const Instr& in, bool near_form) {
    switch (in.op) {
        case Op::Nop:
        case Op::Halt: return 1;
        case Op::Loadi: return 6;
        case Op::Mov:
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Cmp: return 3;
        case Op::Load:
        case Op::Store: return 4;
        case Op::Jmp: return near_form ? 5u : 2u;
        default: return near_form ? 6u : 2u; // jcc
    }
}

// Registers encode as even bytes 0x00..0x0E: flipping bit 0 of a register
// operand always produces an invalid encoding (loud crash) instead of a
// silent register swap.
uint8_t reg_byte(uint8_t r) { return static_cast<uint8_t>(r << 1); }
bool decode_reg(uint8_t b, uint8_t& r) {
    if (b & 0x01 || b > 0x0E) return false;
    r = b >> 1;
    return true;
}

struct Line {
    std::string label;
    std::string mnemonic;
    std::vector<std::string> operands;
    int number = 0;
};

[[noreturn]] void parse_fail(int line, const std::string& msg) {
    fail(Errc::ParseError, "line " + std::to_string(line) + ": " + msg);
}

std::string upper(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_reg(const std::string& tok, uint8_t& r, int line) {
    std::string t = upper(trim(tok));
    if (t.size() != 2 || t[0] != 'R' || t[1] < '0' || t[1] > '7')
        parse_fail(line, "expected register r0..r7, got '" + tok + "'");
    r = static_cast<uint8_t>(t[1] - '0');
    return true;
}

int32_t parse_imm(const std::string& tok, int line) {
    std::string t = trim(tok);
    if (t.empty()) parse_fail(line, "empty immediate");
    try {
        size_t used = 0;
        long long v = std::stoll(t, &used, 0);
        if (used != t.size()) parse_fail(line, "bad immediate '" + tok + "'");
        if (v < INT32_MIN || v > INT32_MAX) parse_fail(line, "immediate out of range");
        return static_cast<int32_t>(v);
    } catch (const Error&) {
        throw;
    } catch (...) {
        parse_fail(line, "bad immediate '" + tok + "'");
    }
}

// [rN], [rN+imm], [rN-imm]
void parse_mem(const std::string& tok, uint8_t& r, int32_t& disp, int line) {
    std::string t = trim(tok);
    if (t.size() < 4 || t.front() != '[' || t.back() != ']')
        parse_fail(line, "expected memory operand [rN+disp], got '" + tok + "'");
    std::string inner = t.substr(1, t.size() - 2);
    size_t sep = inner.find_first_of("+-", 1);
    disp = 0;
    if (sep == std::string::npos) {
        parse_reg(inner, r, line);
    } else {
        parse_reg(inner.substr(0, sep), r, line);
        disp = parse_imm(inner.substr(sep), line);
    }
    if (disp < -128 || disp > 127) parse_fail(line, "displacement out of rel8 range");
}

std::vector<Line> tokenize(const std::string& source) {
    std::vector<Line> out;
    std::istringstream ss(source);
    std::string raw;
    int lineno = 0;
    while (std::getline(ss, raw)) {
        ++lineno;
        size_t sc = raw.find(';');
        if (sc != std::string::npos) raw.resize(sc);
        std::string s = trim(raw);
        if (s.empty()) continue;
        Line ln;
        ln.number = lineno;
        size_t colon = s.find(':');
        if (colon != std::string::npos && s.find_first_of(" \t,[") > colon) {
            ln.label = trim(s.substr(0, colon));
            if (ln.label.empty()) parse_fail(lineno, "empty label");
            s = trim(s.substr(colon + 1));
        }
        if (!s.empty()) {
            size_t sp = s.find_first_of(" \t");
            ln.mnemonic = upper(s.substr(0, sp));
            if (sp != std::string::npos) {
                std::string rest = s.substr(sp + 1);
                size_t pos = 0;
                while (pos <= rest.size()) {
                    size_t comma = rest.find(',', pos);
                    std::string tok = rest.substr(pos, comma == std::string::npos
                                                           ? std::string::npos
                                                           : comma - pos);
                    tok = trim(tok);
                    if (!tok.empty()) ln.operands.push_back(tok);
                    if (comma == std::string::npos) break;
                    pos = comma + 1;
                }
            }
        }
        out.push_back(std::move(ln));
    }
    return out;
}

struct EncodeLayout {
    std::vector<uint32_t> offsets;
    std::vector<bool> near;
    uint32_t total = 0;
};

// Short-preferred displacement fixpoint: everything that fits rel8 stays
// short; anything out of reach auto-promotes to its near form.
EncodeLayout layout(const std::vector<Instr>& instrs) {
    EncodeLayout L;
    size_t n = instrs.size();
    L.near.resize(n);
    L.offsets.resize(n + 1);
    for (size_t i = 0; i < n; ++i) L.near[i] = instrs[i].force == 2;
    for (bool changed = true; changed;) {
        changed = false;
        uint32_t off = 0;
        for (size_t i = 0; i < n; ++i) {
            L.offsets[i] = off;
            off += instr_length(instrs[i], L.near[i]);
        }
        L.offsets[n] = off;
        L.total = off;
        for (size_t i = 0; i < n; ++i) {
            const Instr& in = instrs[i];
            if (!is_jump(in.op) || L.near[i]) continue;
            if (in.target < 0 || in.target > static_cast<int>(n))
                fail(Errc::ParseError, "jump target out of program");
            int64_t rel = static_cast<int64_t>(L.offsets[static_cast<size_t>(in.target)]) -
                          (static_cast<int64_t>(L.offsets[i]) + instr_length(in, false));
            if (rel < -128 || rel > 127) {
                if (in.force == 1) fail(Errc::RangeError, "forced-short jump cannot reach");
                L.near[i] = true;
                changed = true;
            }
        }
    }
    return L;
}

void emit_i32(std::vector<uint8_t>& out, int32_t v) {
    uint32_t u = static_cast<uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(u >> (8 * i)));
}

} // namespace

std::vector<uint8_t> encode_program(const std::vector<Instr>& instrs) {
    EncodeLayout L = layout(instrs);
    std::vector<uint8_t> out;
    out.reserve(L.total);
    for (size_t i = 0; i < instrs.size(); ++i) {
        const Instr& in = instrs[i];
        bool nf = L.near[i];
        switch (in.op) {
            case Op::Nop:
            case Op::Halt: out.push_back(static_cast<uint8_t>(in.op)); break;
            case Op::Loadi:
                out.push_back(static_cast<uint8_t>(Op::Loadi));
                out.push_back(reg_byte(in.r1));
                emit_i32(out, in.imm);
                break;
            case Op::Mov:
            case Op::Add:
            case Op::Sub:
            case Op::Mul:
            case Op::Cmp:
                out.push_back(static_cast<uint8_t>(in.op));
                out.push_back(reg_byte(in.r1));
                out.push_back(reg_byte(in.r2));
                break;
            case Op::Load:
            case Op::Store:
                out.push_back(static_cast<uint8_t>(in.op));
                out.push_back(reg_byte(in.r1));
                out.push_back(reg_byte(in.r2));
                out.push_back(static_cast<uint8_t>(static_cast<int8_t>(in.imm)));
                break;
            default: {
                int64_t rel = static_cast<int64_t>(L.offsets[static_cast<size_t>(in.target)]) -
                              (static_cast<int64_t>(L.offsets[i]) + instr_length(in, nf));
                if (in.op == Op::Jmp) {
                    if (nf) {
                        out.push_back(static_cast<uint8_t>(Op::JmpNear));
                        emit_i32(out, static_cast<int32_t>(rel));
                    } else {
                        out.push_back(static_cast<uint8_t>(Op::Jmp));
                        out.push_back(static_cast<uint8_t>(static_cast<int8_t>(rel)));
                    }
                } else if (nf) {
                    out.push_back(static_cast<uint8_t>(Op::NearPrefix));
                    out.push_back(near_byte(in.op));
                    emit_i32(out, static_cast<int32_t>(rel));
                } else {
                    out.push_back(static_cast<uint8_t>(in.op));
                    out.push_back(static_cast<uint8_t>(static_cast<int8_t>(rel)));
                }
            }
        }
    }
    return out;
}

Program assemble(const std::string& source) {
    std::vector<Line> lines = tokenize(source);
    std::vector<Instr> instrs;
    std::map<std::string, int> label_index; // label -> instruction index
    std::vector<std::pair<std::string, int>> pending; // (label used, line)

    for (const auto& ln : lines) {
        if (!ln.label.empty()) {
            if (label_index.count(ln.label)) parse_fail(ln.number, "duplicate label " + ln.label);
            label_index[ln.label] = static_cast<int>(instrs.size());
        }
        if (ln.mnemonic.empty()) continue;
        Instr in;
        std::string mn = ln.mnemonic;
        if (mn.size() > 2 && mn[mn.size() - 2] == '.') {
            char suf = mn.back();
            if (suf == 'S') in.force = 1;
            else if (suf == 'N') in.force = 2;
            else parse_fail(ln.number, "unknown mnemonic suffix");
            mn.resize(mn.size() - 2);
        }
        auto need = [&](size_t n) {
            if (ln.operands.size() != n)
                parse_fail(ln.number, mn + " expects " + std::to_string(n) + " operand(s)");
        };
        if (mn == "NOP") { in.op = Op::Nop; need(0); }
        else if (mn == "HALT") { in.op = Op::Halt; need(0); }
        else if (mn == "LOADI") {
            in.op = Op::Loadi; need(2);
            parse_reg(ln.operands[0], in.r1, ln.number);
            in.imm = parse_imm(ln.operands[1], ln.number);
        } else if (mn == "MOV" || mn == "ADD" || mn == "SUB" || mn == "MUL" || mn == "CMP") {
            in.op = mn == "MOV" ? Op::Mov : mn == "ADD" ? Op::Add : mn == "SUB" ? Op::Sub
                    : mn == "MUL" ? Op::Mul : Op::Cmp;
            need(2);
            parse_reg(ln.operands[0], in.r1, ln.number);
            parse_reg(ln.operands[1], in.r2, ln.number);
        } else if (mn == "LOAD") {
            in.op = Op::Load; need(2);
            parse_reg(ln.operands[0], in.r1, ln.number);
            parse_mem(ln.operands[1], in.r2, in.imm, ln.number);
        } else if (mn == "STORE") {
            in.op = Op::Store; need(2);
            parse_mem(ln.operands[0], in.r1, in.imm, ln.number);
            parse_reg(ln.operands[1], in.r2, ln.number);
        } else if (mn == "JMP" || mn == "JE" || mn == "JNE" || mn == "JL" || mn == "JGE" ||
                   mn == "JLE" || mn == "JG") {
            in.op = mn == "JMP" ? Op::Jmp : mn == "JE" ? Op::Je : mn == "JNE" ? Op::Jne
                    : mn == "JL" ? Op::Jl : mn == "JGE" ? Op::Jge : mn == "JLE" ? Op::Jle : Op::Jg;
            need(1);
            pending.emplace_back(ln.operands[0], ln.number);
            in.target = -1;
        } else {
            parse_fail(ln.number, "unknown mnemonic '" + ln.mnemonic + "'");
        }
        instrs.push_back(in);
    }

    size_t pi = 0;
    for (auto& in : instrs) {
        if (!is_jump(in.op)) continue;
        const auto& [label, lineno] = pending[pi++];
        auto it = label_index.find(label);
        if (it == label_index.end()) parse_fail(lineno, "undefined label '" + label + "'");
        if (it->second >= static_cast<int>(instrs.size()))
            parse_fail(lineno, "label '" + label + "' has no following instruction");
        in.target = it->second;
    }

    Program prog;
    prog.bytecode = encode_program(instrs);
    EncodeLayout L = layout(instrs);
    for (const auto& [name, idx] : label_index)
        prog.labels[name] = L.offsets[static_cast<size_t>(idx)];
    return prog;
}

std::vector<Instr> decode_program(const std::vector<uint8_t>& code) {
    std::vector<Instr> instrs;
    std::map<uint32_t, int> boundary; // byte offset -> instruction index
    struct Jump { size_t idx; int64_t target_off; };
    std::vector<Jump> jumps;

    size_t pos = 0;
    auto need = [&](size_t n) {
        if (pos + n > code.size()) fail(Errc::ParseError, "truncated instruction");
    };
    auto rd_i32 = [&]() {
        uint32_t u = 0;
        for (int i = 0; i < 4; ++i) u |= static_cast<uint32_t>(code[pos + static_cast<size_t>(i)]) << (8 * i);
        pos += 4;
        return static_cast<int32_t>(u);
    };
    auto rd_reg = [&](uint8_t& r) {
        if (!decode_reg(code[pos], r)) fail(Errc::ParseError, "invalid register byte");
        ++pos;
    };

    while (pos < code.size()) {
        Instr in;
        in.offset = static_cast<uint32_t>(pos);
        boundary[in.offset] = static_cast<int>(instrs.size());
        uint8_t b = code[pos];
        if (b == static_cast<uint8_t>(Op::Nop) || b == static_cast<uint8_t>(Op::Halt)) {
            in.op = static_cast<Op>(b);
            ++pos;
        } else if (b == static_cast<uint8_t>(Op::Loadi)) {
            need(6); ++pos;
            in.op = Op::Loadi;
            rd_reg(in.r1);
            in.imm = rd_i32();
        } else if (b == static_cast<uint8_t>(Op::Mov) || b == static_cast<uint8_t>(Op::Add) ||
                   b == static_cast<uint8_t>(Op::Sub) || b == static_cast<uint8_t>(Op::Mul) ||
                   b == static_cast<uint8_t>(Op::Cmp)) {
            need(3); ++pos;
            in.op = static_cast<Op>(b);
            rd_reg(in.r1);
            rd_reg(in.r2);
        } else if (b == static_cast<uint8_t>(Op::Load) || b == static_cast<uint8_t>(Op::Store)) {
            need(4); ++pos;
            in.op = static_cast<Op>(b);
            rd_reg(in.r1);
            rd_reg(in.r2);
            in.imm = static_cast<int8_t>(code[pos++]);
        } else if (b == static_cast<uint8_t>(Op::Jmp) || is_short_jcc(b)) {
            need(2);
            in.op = static_cast<Op>(b);
            int8_t rel = static_cast<int8_t>(code[pos + 1]);
            pos += 2;
            jumps.push_back({instrs.size(), static_cast<int64_t>(pos) + rel});
        } else if (b == static_cast<uint8_t>(Op::JmpNear)) {
            need(5); ++pos;
            in.op = Op::Jmp;
            in.force = 2;
            int32_t rel = rd_i32();
            jumps.push_back({instrs.size(), static_cast<int64_t>(pos) + rel});
        } else if (b == static_cast<uint8_t>(Op::NearPrefix)) {
            need(6);
            if (!is_near_jcc_second(code[pos + 1])) fail(Errc::ParseError, "invalid near jump");
            in.op = short_from_near(code[pos + 1]);
            in.force = 2;
            pos += 2;
            int32_t rel = rd_i32();
            jumps.push_back({instrs.size(), static_cast<int64_t>(pos) + rel});
        } else {
            fail(Errc::ParseError, "invalid opcode byte");
        }
        in.length = static_cast<uint32_t>(pos) - in.offset;
        instrs.push_back(in);
    }
    boundary[static_cast<uint32_t>(pos)] = static_cast<int>(instrs.size());

    for (const auto& j : jumps) {
        if (j.target_off < 0) fail(Errc::ParseError, "jump target before program start");
        auto it = boundary.find(static_cast<uint32_t>(j.target_off));
        if (it == boundary.end()) fail(Errc::ParseError, "jump target not on instruction boundary");
        instrs[j.idx].target = it->second;
    }
    return instrs;
}

std::vector<uint32_t> instruction_sites(const std::vector<uint8_t>& code) {
    std::vector<uint32_t> sites;
    for (const auto& in : decode_program(code)) sites.push_back(in.offset);
    return sites;
}

std::vector<CondJumpSite> find_cond_jumps(const std::vector<uint8_t>& code) {
    std::vector<CondJumpSite> out;
    for (const auto& in : decode_program(code)) {
        if (!is_cond(in.op)) continue;
        CondJumpSite s;
        s.instr_offset = in.offset;
        s.near = in.force == 2;
        s.opcode_offset = in.offset + (s.near ? 1u : 0u);
        out.push_back(s);
    }
    return out;
}

uint8_t opposite_jump(uint8_t opcode, bool near_second_byte) {
    bool ok = near_second_byte ? is_near_jcc_second(opcode) : is_short_jcc(opcode);
    if (!ok) fail(Errc::NotConditional, "not a conditional jump opcode");
    return opcode ^ 0x01;
}

std::string disassemble(const std::vector<uint8_t>& code) {
    static const std::map<Op, std::string> names = {
        {Op::Nop, "NOP"}, {Op::Halt, "HALT"}, {Op::Loadi, "LOADI"}, {Op::Mov, "MOV"},
        {Op::Load, "LOAD"}, {Op::Store, "STORE"}, {Op::Add, "ADD"}, {Op::Sub, "SUB"},
        {Op::Mul, "MUL"}, {Op::Cmp, "CMP"}, {Op::Jmp, "JMP"}, {Op::Je, "JE"}, {Op::Jne, "JNE"},
        {Op::Jl, "JL"}, {Op::Jge, "JGE"}, {Op::Jle, "JLE"}, {Op::Jg, "JG"}};
    auto instrs = decode_program(code);
    std::ostringstream out;
    for (const auto& in : instrs) {
        out << in.offset << ":\t" << names.at(in.op);
        switch (in.op) {
            case Op::Loadi: out << " r" << int(in.r1) << ", " << in.imm; break;
            case Op::Mov: case Op::Add: case Op::Sub: case Op::Mul: case Op::Cmp:
                out << " r" << int(in.r1) << ", r" << int(in.r2); break;
            case Op::Load: out << " r" << int(in.r1) << ", [r" << int(in.r2) << "+" << in.imm << "]"; break;
            case Op::Store: out << " [r" << int(in.r1) << "+" << in.imm << "], r" << int(in.r2); break;
            case Op::Nop: case Op::Halt: break;
            default:
                out << " -> " << (in.target >= 0 && in.target < static_cast<int>(instrs.size())
                                      ? instrs[static_cast<size_t>(in.target)].offset
                                      : 0);
                if (in.force == 2) out << " (near)";
        }
        out << "\n";
    }
    return out.str();
}

VmOutcome execute(const uint8_t* code, size_t len, uint32_t entry, std::vector<int32_t>& mem,
                  uint64_t step_budget) {
    VmOutcome out;
    int32_t reg[8] = {0};
    int cmp = 0;
    size_t pc = entry;

    auto crash = [&](CrashReason r) {
        out.status = Outcome::Crash;
        out.reason = r;
        return out;
    };

    while (out.steps < step_budget) {
        if (pc >= len) return crash(CrashReason::InvalidOpcode);
        uint8_t b = code[pc];
        ++out.steps;

        auto fetch_ok = [&](size_t n) { return pc + n <= len; };
        auto get_reg = [&](size_t at, uint8_t& r) { return decode_reg(code[at], r); };
        auto rd_i32 = [&](size_t at) {
            uint32_t u = 0;
            for (int i = 0; i < 4; ++i) u |= static_cast<uint32_t>(code[at + static_cast<size_t>(i)]) << (8 * i);
            return static_cast<int32_t>(u);
        };
        auto jump_to = [&](int64_t target) -> bool {
            if (target < 0 || target >= static_cast<int64_t>(len)) return false;
            pc = static_cast<size_t>(target);
            return true;
        };

        if (b == static_cast<uint8_t>(Op::Nop)) {
            ++pc;
        } else if (b == static_cast<uint8_t>(Op::Halt)) {
            return out;
        } else if (b == static_cast<uint8_t>(Op::Loadi)) {
            uint8_t r;
            if (!fetch_ok(6) || !get_reg(pc + 1, r)) return crash(CrashReason::InvalidOpcode);
            reg[r] = rd_i32(pc + 2);
            pc += 6;
        } else if (b == static_cast<uint8_t>(Op::Mov) || b == static_cast<uint8_t>(Op::Add) ||
                   b == static_cast<uint8_t>(Op::Sub) || b == static_cast<uint8_t>(Op::Mul) ||
                   b == static_cast<uint8_t>(Op::Cmp)) {
            uint8_t rd, rs;
            if (!fetch_ok(3) || !get_reg(pc + 1, rd) || !get_reg(pc + 2, rs))
                return crash(CrashReason::InvalidOpcode);
            int64_t a = reg[rd], c = reg[rs];
            switch (static_cast<Op>(b)) {
                case Op::Mov: reg[rd] = reg[rs]; break;
                case Op::Add: reg[rd] = static_cast<int32_t>(static_cast<uint32_t>(a) + static_cast<uint32_t>(c)); break;
                case Op::Sub: reg[rd] = static_cast<int32_t>(static_cast<uint32_t>(a) - static_cast<uint32_t>(c)); break;
                case Op::Mul: reg[rd] = static_cast<int32_t>(static_cast<uint32_t>(a * c)); break;
                case Op::Cmp: cmp = a < c ? -1 : (a == c ? 0 : 1); break;
                default: break;
            }
            pc += 3;
        } else if (b == static_cast<uint8_t>(Op::Load)) {
            uint8_t rd, rs;
            if (!fetch_ok(4) || !get_reg(pc + 1, rd) || !get_reg(pc + 2, rs))
                return crash(CrashReason::InvalidOpcode);
            int64_t addr = static_cast<int64_t>(reg[rs]) + static_cast<int8_t>(code[pc + 3]);
            if (addr < 0 || addr >= static_cast<int64_t>(mem.size()))
                return crash(CrashReason::OutOfBoundsMemory);
            reg[rd] = mem[static_cast<size_t>(addr)];
            pc += 4;
        } else if (b == static_cast<uint8_t>(Op::Store)) {
            uint8_t rd, rs;
            if (!fetch_ok(4) || !get_reg(pc + 1, rd) || !get_reg(pc + 2, rs))
                return crash(CrashReason::InvalidOpcode);
            int64_t addr = static_cast<int64_t>(reg[rd]) + static_cast<int8_t>(code[pc + 3]);
            if (addr < 0 || addr >= static_cast<int64_t>(mem.size()))
                return crash(CrashReason::OutOfBoundsMemory);
            mem[static_cast<size_t>(addr)] = reg[rs];
            pc += 4;
        } else if (b == static_cast<uint8_t>(Op::Jmp)) {
            if (!fetch_ok(2)) return crash(CrashReason::InvalidOpcode);
            if (!jump_to(static_cast<int64_t>(pc) + 2 + static_cast<int8_t>(code[pc + 1])))
                return crash(CrashReason::BadJumpTarget);
        } else if (b == static_cast<uint8_t>(Op::JmpNear)) {
            if (!fetch_ok(5)) return crash(CrashReason::InvalidOpcode);
            if (!jump_to(static_cast<int64_t>(pc) + 5 + rd_i32(pc + 1)))
                return crash(CrashReason::BadJumpTarget);
        } else if (is_short_jcc(b) || b == static_cast<uint8_t>(Op::NearPrefix)) {
            uint8_t cc;
            int64_t fall, target;
            if (b == static_cast<uint8_t>(Op::NearPrefix)) {
                if (!fetch_ok(6) || !is_near_jcc_second(code[pc + 1]))
                    return crash(CrashReason::InvalidOpcode);
                cc = static_cast<uint8_t>(code[pc + 1] - 0x10);
                fall = static_cast<int64_t>(pc) + 6;
                target = fall + rd_i32(pc + 2);
            } else {
                if (!fetch_ok(2)) return crash(CrashReason::InvalidOpcode);
                cc = b;
                fall = static_cast<int64_t>(pc) + 2;
                target = fall + static_cast<int8_t>(code[pc + 1]);
            }
            bool take;
            switch (static_cast<Op>(cc)) {
                case Op::Je: take = cmp == 0; break;
                case Op::Jne: take = cmp != 0; break;
                case Op::Jl: take = cmp < 0; break;
                case Op::Jge: take = cmp >= 0; break;
                case Op::Jle: take = cmp <= 0; break;
                default: take = cmp > 0; break; // Jg
            }
            if (take) {
                if (!jump_to(target)) return crash(CrashReason::BadJumpTarget);
            } else {
                pc = static_cast<size_t>(fall);
            }
        } else {
            return crash(CrashReason::InvalidOpcode);
        }
    }
    out.status = Outcome::Timeout;
    out.steps = step_budget;
    return out;
}

VmOutcome execute(const Program& prog, std::vector<int32_t>& mem, uint64_t step_budget) {
    return execute(prog.bytecode.data(), prog.bytecode.size(), prog.entry, mem, step_budget);
}

// Integer GEMM with accumulator clamping. Header sanity checks up front:
// a non-negative clamp_lo spins forever, non-positive M or zero N halt
// before any C element is written.
const char* const kGemmKernelSource = R"(
entry:
    SUB r7, r7          ; r7 = 0
    LOAD r5, [r7+7]     ; clamp_lo (always negative in a sane header)
    SUB r6, r6
    CMP r5, r6
    JL.N gate
spin:
    JMP spin            ; bad header: hang
gate:
    LOADI r0, 1
    LOAD r5, [r7+0]     ; M
    CMP r5, r6
    JG m_ok
    HALT
m_ok:
    LOAD r5, [r7+1]     ; N
    CMP r5, r6
    JNE n_ok
    HALT
n_ok:
    SUB r1, r1          ; i = 0
i_loop:
    SUB r6, r6
    LOAD r5, [r6+0]     ; M
    CMP r1, r5
    JGE done
    SUB r2, r2          ; j = 0
j_loop:
    SUB r6, r6
    LOAD r5, [r6+1]     ; N
    CMP r5, r2
    JG j_body
    JMP i_next
j_body:
    SUB r4, r4          ; acc = 0
    SUB r3, r3          ; k = 0
k_loop:
    SUB r6, r6
    LOAD r5, [r6+2]     ; K
    CMP r3, r5
    JNE k_body
    JMP k_done
k_body:
    SUB r7, r7
    MOV r6, r1
    LOAD r5, [r7+2]     ; K
    MUL r6, r5
    ADD r6, r3          ; i*K + k
    LOAD r5, [r7+3]     ; baseA
    ADD r6, r5
    LOAD r5, [r6]       ; A[i,k]
    CMP r5, r7
    JE k_next           ; zero operand: skip the multiply
    MOV r6, r3
    LOAD r7, [r7+1]     ; N
    MUL r6, r7
    ADD r6, r2          ; k*N + j
    SUB r7, r7
    LOAD r7, [r7+4]     ; baseB
    ADD r6, r7
    LOAD r6, [r6]       ; B[k,j]
    MUL r5, r6
    ADD r4, r5          ; acc += A[i,k] * B[k,j]
k_next:
    ADD r3, r0          ; k++
    JMP k_loop
k_done:
    SUB r7, r7
    LOAD r5, [r7+6]     ; clamp_hi
    CMP r4, r5
    JLE hi_ok
    MOV r4, r5
hi_ok:
    SUB r7, r7
    LOAD r5, [r7+7]     ; clamp_lo
    CMP r4, r5
    JGE lo_ok
    MOV r4, r5
lo_ok:
    MOV r6, r1
    SUB r7, r7
    LOAD r5, [r7+1]     ; N
    MUL r6, r5
    ADD r6, r2          ; i*N + j
    LOAD r5, [r7+5]     ; baseC
    ADD r6, r5
    STORE [r6], r4      ; C[i,j] = acc
    ADD r2, r0          ; j++
    JMP j_loop
i_next:
    ADD r1, r0          ; i++
    JMP i_loop
done:
    HALT
)";

} // namespace flipguard
