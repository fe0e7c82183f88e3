//! Text frontend: parsing and serialization of the program assembly format,
//! dynamic trace files, and candidate-map files.
//!
//! The assembly format is line oriented (UTF-8, LF):
//!
//! ```text
//! .section <name> <hexaddr>       # begins a memory section
//! .slot <hexaddr> <hexvalue>      # one pointer-width slot
//! .slot <hexaddr> &<funcname>     # slot holding a function address
//! .func <name> <hexaddr>          # begins a function
//! .block <hexaddr>                # begins a basic block (optional for the
//!                                 # first block of a function)
//! <hexaddr>: <mnemonic> <operands>
//! ```
//!
//! Operands: registers `r0`-`r5`/`fp`/`sp`, immediates `$0x2a` (or `$name`
//! for a function address), stack slots `[fp-0x1c]`/`[fp+0x8]`, globals
//! `[0x804a100]`, and register-indirect `[r1]`. Direct calls are written
//! `call <funcname>` and resolved to the callee's start address. `#` starts
//! a comment. Function references (`&name`, `$name`, `call name`) may appear
//! before the named function is declared; they are resolved in a second
//! pass.
//!
//! Trace files carry one `<hex callsite> <hex callee>` pair per non-comment
//! line with set semantics. Candidate files carry one
//! `<hex callsite>: <hex target>*` record per line; duplicate callsite keys
//! are an error, and an empty target list is legal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{
    Addr, BasicBlock, Function, Instruction, MemoryImage, Mnemonic, Operand, Program, Reg,
    Section, Slot,
};

/// Map from callsite address to its candidate target set.
pub type CandidateMap = BTreeMap<Addr, BTreeSet<Addr>>;

/// Set of observed (callsite, callee) pairs from dynamic traces.
pub type TraceSet = BTreeSet<(Addr, Addr)>;

/// Parse failure, carrying the 1-based source line.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            message: message.into(),
        }
    }
}

/// An operand as first parsed, before function names are resolved.
#[derive(Debug, Clone)]
enum RawOperand {
    Ready(Operand),
    /// `$name` or `call name`: an immediate that resolves to a function
    /// start address.
    FuncRef(String),
}

#[derive(Debug)]
struct RawInstruction {
    line: usize,
    addr: Addr,
    mnemonic: Mnemonic,
    operands: Vec<RawOperand>,
}

#[derive(Debug)]
enum RawSlotValue {
    Value(u64),
    FuncRef(String),
}

/// Parse a program from its assembly text.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    struct RawFunc {
        name: String,
        start: Addr,
        /// Explicit `.block` labels in declaration order.
        labels: Vec<Addr>,
        instructions: Vec<RawInstruction>,
    }
    struct RawSection {
        name: String,
        base: Addr,
        slots: Vec<(usize, Addr, RawSlotValue)>,
    }

    let mut funcs: Vec<RawFunc> = Vec::new();
    let mut sections: Vec<RawSection> = Vec::new();
    let mut func_names: BTreeMap<String, Addr> = BTreeMap::new();
    let mut seen_instr_addrs: BTreeSet<Addr> = BTreeSet::new();
    let mut seen_func_addrs: BTreeSet<Addr> = BTreeSet::new();
    let mut seen_slot_addrs: BTreeSet<Addr> = BTreeSet::new();
    // What the last directive opened: instructions attach to the open
    // function, slots to the open section.
    let mut in_section = false;

    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix(".section") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| ParseError::new(lineno, "missing section name"))?;
            let base = parse_hex(parts.next(), lineno, "section base address")?;
            if parts.next().is_some() {
                return Err(ParseError::new(lineno, "trailing tokens after .section"));
            }
            sections.push(RawSection {
                name: name.to_string(),
                base,
                slots: Vec::new(),
            });
            in_section = true;
        } else if let Some(rest) = line.strip_prefix(".slot") {
            if !in_section {
                return Err(ParseError::new(lineno, ".slot outside a section"));
            }
            let mut parts = rest.split_whitespace();
            let addr = parse_hex(parts.next(), lineno, "slot address")?;
            let value_tok = parts
                .next()
                .ok_or_else(|| ParseError::new(lineno, "missing slot value"))?;
            if parts.next().is_some() {
                return Err(ParseError::new(lineno, "trailing tokens after .slot"));
            }
            if !seen_slot_addrs.insert(addr) {
                return Err(ParseError::new(
                    lineno,
                    format!("duplicate address 0x{addr:x}"),
                ));
            }
            let value = if let Some(name) = value_tok.strip_prefix('&') {
                RawSlotValue::FuncRef(name.to_string())
            } else {
                RawSlotValue::Value(parse_hex(Some(value_tok), lineno, "slot value")?)
            };
            sections
                .last_mut()
                .expect("in_section implies a section exists")
                .slots
                .push((lineno, addr, value));
        } else if let Some(rest) = line.strip_prefix(".func") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| ParseError::new(lineno, "missing function name"))?;
            let start = parse_hex(parts.next(), lineno, "function start address")?;
            if parts.next().is_some() {
                return Err(ParseError::new(lineno, "trailing tokens after .func"));
            }
            if func_names.contains_key(name) {
                return Err(ParseError::new(
                    lineno,
                    format!("duplicate function name {name}"),
                ));
            }
            if !seen_func_addrs.insert(start) {
                return Err(ParseError::new(
                    lineno,
                    format!("duplicate address 0x{start:x}"),
                ));
            }
            func_names.insert(name.to_string(), start);
            funcs.push(RawFunc {
                name: name.to_string(),
                start,
                labels: Vec::new(),
                instructions: Vec::new(),
            });
            in_section = false;
        } else if let Some(rest) = line.strip_prefix(".block") {
            let mut parts = rest.split_whitespace();
            let addr = parse_hex(parts.next(), lineno, "block address")?;
            if parts.next().is_some() {
                return Err(ParseError::new(lineno, "trailing tokens after .block"));
            }
            let f = funcs
                .last_mut()
                .ok_or_else(|| ParseError::new(lineno, ".block outside a function"))?;
            f.labels.push(addr);
            in_section = false;
        } else {
            // Instruction line: `<hexaddr>: <mnemonic> <operands>`.
            let (addr_part, rest) = line
                .split_once(':')
                .ok_or_else(|| ParseError::new(lineno, "expected `<hexaddr>: <mnemonic> ...`"))?;
            let addr = parse_hex(Some(addr_part.trim()), lineno, "instruction address")?;
            if !seen_instr_addrs.insert(addr) {
                return Err(ParseError::new(
                    lineno,
                    format!("duplicate address 0x{addr:x}"),
                ));
            }
            let f = funcs
                .last_mut()
                .ok_or_else(|| ParseError::new(lineno, "instruction outside a function"))?;
            if in_section {
                return Err(ParseError::new(lineno, "instruction inside a section"));
            }
            f.instructions
                .push(parse_instruction(lineno, addr, rest.trim())?);
        }
    }

    // Resolution pass: function name references become immediates.
    let resolve = |name: &str, line: usize| -> Result<u64, ParseError> {
        func_names.get(name).copied().ok_or_else(|| {
            ParseError::new(line, format!("reference to undefined function label {name}"))
        })
    };

    let mut out_sections = Vec::new();
    for s in sections {
        let mut slots = Vec::new();
        for (line, addr, value) in s.slots {
            let value = match value {
                RawSlotValue::Value(v) => v,
                RawSlotValue::FuncRef(name) => resolve(&name, line)?,
            };
            slots.push(Slot { addr, value });
        }
        out_sections.push(Section {
            name: s.name,
            base: s.base,
            slots,
        });
    }

    let mut out_functions = Vec::new();
    for f in funcs {
        let labels: BTreeSet<Addr> = f.labels.iter().copied().collect();
        let mut instructions = Vec::new();
        for ri in f.instructions {
            let mut operands = Vec::new();
            for op in ri.operands {
                operands.push(match op {
                    RawOperand::Ready(o) => o,
                    RawOperand::FuncRef(name) => Operand::Immediate(resolve(&name, ri.line)?),
                });
            }
            instructions.push((ri.line, Instruction::new(ri.addr, ri.mnemonic, operands)));
        }
        // Split into basic blocks: a block begins at the function start, at
        // each `.block` label, and after every control transfer.
        for &label in &labels {
            if !instructions.iter().any(|(_, i)| i.addr == label) {
                return Err(ParseError::new(
                    0,
                    format!(
                        "block label 0x{label:x} in function {} has no instruction",
                        f.name
                    ),
                ));
            }
        }
        let mut blocks: Vec<BasicBlock> = Vec::new();
        let mut current: Vec<Instruction> = Vec::new();
        let mut split_next = true;
        for (_line, instr) in instructions {
            if (split_next || labels.contains(&instr.addr)) && !current.is_empty() {
                let start = current[0].addr;
                blocks.push(BasicBlock::new(start, std::mem::take(&mut current)));
            }
            split_next = instr.mnemonic.is_control_transfer();
            current.push(instr);
        }
        if !current.is_empty() {
            let start = current[0].addr;
            blocks.push(BasicBlock::new(start, current));
        }
        out_functions.push(Function::new(Some(f.name), f.start, blocks));
    }

    // Entry convention: the function named `main` if present, else the first
    // declared function, else 0 (validation rejects it downstream).
    let entry = out_functions
        .iter()
        .find(|f| f.name.as_deref() == Some("main"))
        .or_else(|| out_functions.first())
        .map(|f| f.start)
        .unwrap_or(0);

    Ok(Program::new(
        out_functions,
        MemoryImage {
            sections: out_sections,
        },
        entry,
    ))
}

fn parse_instruction(
    line: usize,
    addr: Addr,
    text: &str,
) -> Result<RawInstruction, ParseError> {
    let (mn_text, ops_text) = match text.split_once(char::is_whitespace) {
        Some((m, rest)) => (m, rest.trim()),
        None => (text, ""),
    };
    let mnemonic = parse_mnemonic(mn_text)
        .ok_or_else(|| ParseError::new(line, format!("unknown mnemonic {mn_text}")))?;
    let mut operands = Vec::new();
    if !ops_text.is_empty() {
        for raw in ops_text.split(',') {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(ParseError::new(line, "empty operand"));
            }
            operands.push(parse_operand(raw, line, mnemonic)?);
        }
    }
    if operands.len() != mnemonic.operand_count() {
        return Err(ParseError::new(
            line,
            format!(
                "{mnemonic} takes {} operand(s), found {}",
                mnemonic.operand_count(),
                operands.len()
            ),
        ));
    }
    Ok(RawInstruction {
        line,
        addr,
        mnemonic,
        operands,
    })
}

fn parse_mnemonic(s: &str) -> Option<Mnemonic> {
    Some(match s {
        "mov" => Mnemonic::Mov,
        "lea" => Mnemonic::Lea,
        "push" => Mnemonic::Push,
        "pop" => Mnemonic::Pop,
        "add" => Mnemonic::Add,
        "sub" => Mnemonic::Sub,
        "cmp" => Mnemonic::Cmp,
        "test" => Mnemonic::Test,
        "call" => Mnemonic::Call,
        "icall" => Mnemonic::Icall,
        "jmp" => Mnemonic::Jmp,
        "je" => Mnemonic::Je,
        "jne" => Mnemonic::Jne,
        "jg" => Mnemonic::Jg,
        "jl" => Mnemonic::Jl,
        "ret" => Mnemonic::Ret,
        _ => return None,
    })
}

fn parse_reg(s: &str) -> Option<Reg> {
    Some(match s {
        "r0" => Reg::R0,
        "r1" => Reg::R1,
        "r2" => Reg::R2,
        "r3" => Reg::R3,
        "r4" => Reg::R4,
        "r5" => Reg::R5,
        "fp" => Reg::Fp,
        "sp" => Reg::Sp,
        _ => return None,
    })
}

fn parse_operand(raw: &str, line: usize, mnemonic: Mnemonic) -> Result<RawOperand, ParseError> {
    // Direct calls name their callee: `call target_func`.
    if mnemonic == Mnemonic::Call {
        if is_identifier(raw) {
            return Ok(RawOperand::FuncRef(raw.to_string()));
        }
        return Err(ParseError::new(
            line,
            format!("call target must be a function name, found {raw}"),
        ));
    }
    if let Some(r) = parse_reg(raw) {
        return Ok(RawOperand::Ready(Operand::Register(r)));
    }
    if let Some(rest) = raw.strip_prefix('$') {
        if is_identifier(rest) {
            return Ok(RawOperand::FuncRef(rest.to_string()));
        }
        let v = parse_hex(Some(rest), line, "immediate")?;
        return Ok(RawOperand::Ready(Operand::Immediate(v)));
    }
    if let Some(inner) = raw.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        let inner = inner.trim();
        if inner == "fp" {
            return Ok(RawOperand::Ready(Operand::StackSlot(0)));
        }
        if let Some(rest) = inner.strip_prefix("fp") {
            let (sign, digits) = match rest.as_bytes().first() {
                Some(b'+') => (1i64, &rest[1..]),
                Some(b'-') => (-1i64, &rest[1..]),
                _ => {
                    return Err(ParseError::new(
                        line,
                        format!("malformed stack slot operand {raw}"),
                    ))
                }
            };
            let off = parse_hex(Some(digits), line, "stack offset")? as i64;
            return Ok(RawOperand::Ready(Operand::StackSlot(sign * off)));
        }
        if let Some(r) = parse_reg(inner) {
            return Ok(RawOperand::Ready(Operand::Indirect(r)));
        }
        let a = parse_hex(Some(inner), line, "global address")?;
        return Ok(RawOperand::Ready(Operand::Global(a)));
    }
    Err(ParseError::new(line, format!("malformed operand {raw}")))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_hex(tok: Option<&str>, line: usize, what: &str) -> Result<u64, ParseError> {
    let tok = tok.ok_or_else(|| ParseError::new(line, format!("missing {what}")))?;
    let digits = tok.strip_prefix("0x").unwrap_or(tok);
    u64::from_str_radix(digits, 16)
        .map_err(|_| ParseError::new(line, format!("malformed {what} {tok}")))
}

/// Serialize a program back to canonical assembly text. Parsing the result
/// yields a structurally identical program (sections first, then functions,
/// each in stored order; `.block` emitted for every non-entry block; slot
/// values and jump targets as raw hex; call targets by callee name).
pub fn serialize_program(p: &Program) -> String {
    let mut out = String::new();
    for s in &p.memory.sections {
        let _ = writeln!(out, ".section {} 0x{:x}", s.name, s.base);
        for slot in &s.slots {
            let _ = writeln!(out, ".slot 0x{:x} 0x{:x}", slot.addr, slot.value);
        }
    }
    for f in &p.functions {
        let _ = writeln!(out, ".func {} 0x{:x}", f.display_name(), f.start);
        for (bi, b) in f.blocks.iter().enumerate() {
            if bi != 0 {
                let _ = writeln!(out, ".block 0x{:x}", b.start);
            }
            for i in &b.instructions {
                let _ = write!(out, "0x{:x}: {}", i.addr, i.mnemonic);
                if i.mnemonic == Mnemonic::Call {
                    // Render the resolved immediate back as the callee name.
                    if let Some(Operand::Immediate(target)) = i.operands.first() {
                        let name = p
                            .function_starting_at(*target)
                            .map(|f| f.display_name())
                            .unwrap_or_else(|| format!("fn_{target:x}"));
                        let _ = write!(out, " {name}");
                    }
                } else {
                    for (oi, op) in i.operands.iter().enumerate() {
                        let sep = if oi == 0 { " " } else { ", " };
                        let _ = write!(out, "{sep}{op}");
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Parse a dynamic trace file into its pair set (set semantics: duplicate
/// pairs collapse).
pub fn parse_trace_set(text: &str) -> Result<TraceSet, ParseError> {
    let mut out = TraceSet::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let callsite = parse_hex(parts.next(), lineno, "callsite address")?;
        let callee = parse_hex(parts.next(), lineno, "callee address")?;
        if parts.next().is_some() {
            return Err(ParseError::new(lineno, "trailing tokens after trace pair"));
        }
        out.insert((callsite, callee));
    }
    Ok(out)
}

/// Serialize a trace set, one pair per line, sorted.
pub fn serialize_trace_set(t: &TraceSet) -> String {
    let mut out = String::new();
    for (cs, callee) in t {
        let _ = writeln!(out, "0x{cs:x} 0x{callee:x}");
    }
    out
}

/// Parse a candidate-map file. Duplicate callsite keys are an error; an
/// empty target list is legal.
pub fn parse_candidate_map(text: &str) -> Result<CandidateMap, ParseError> {
    let mut out = CandidateMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (cs_part, rest) = line
            .split_once(':')
            .ok_or_else(|| ParseError::new(lineno, "expected `<hexaddr>: <targets>`"))?;
        let callsite = parse_hex(Some(cs_part.trim()), lineno, "callsite address")?;
        let mut targets = BTreeSet::new();
        for tok in rest.split_whitespace() {
            targets.insert(parse_hex(Some(tok), lineno, "target address")?);
        }
        if out.insert(callsite, targets).is_some() {
            return Err(ParseError::new(
                lineno,
                format!("duplicate callsite key 0x{callsite:x}"),
            ));
        }
    }
    Ok(out)
}

/// Serialize a candidate map, one callsite per line, targets sorted.
pub fn serialize_candidate_map(c: &CandidateMap) -> String {
    let mut out = String::new();
    for (cs, targets) in c {
        let _ = write!(out, "0x{cs:x}:");
        for t in targets {
            let _ = write!(out, " 0x{t:x}");
        }
        out.push('\n');
    }
    out
}
