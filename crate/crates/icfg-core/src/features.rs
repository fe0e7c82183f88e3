//! Soft-signature recovery: which variables die at a callsite, which of
//! them were being passed as arguments, what a callee expects, and how a
//! (callsite, callee) pair is encoded for the scorer.
//!
//! Everything here is deliberately heuristic. Arguments are recovered from
//! `push` instructions whose variable is dead after the call (its value
//! cannot be needed again, so it must have been produced *for* the call);
//! callee parameter lists are recovered from variables that are read before
//! being written and score highly on a set of structural hints. The scorer
//! downstream learns how much to trust each signal.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfg::Dcfg;
use crate::model::{
    Addr, Function, Instruction, Mnemonic, Operand, Program, Reg, Section, Terminator,
};

/// Variables tracked by the dataflow analyses: stack slots (frame-pointer
/// relative), general registers, and fixed global cells. The frame and
/// stack pointers themselves are untracked, as is anything reached through
/// a register-indirect access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Var {
    Stack(i64),
    Register(Reg),
    Global(Addr),
}

impl std::fmt::Display for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Var::Stack(o) if *o < 0 => write!(f, "[fp-0x{:x}]", -o),
            Var::Stack(o) => write!(f, "[fp+0x{o:x}]"),
            Var::Register(r) => write!(f, "{r}"),
            Var::Global(a) => write!(f, "[0x{a:x}]"),
        }
    }
}

fn operand_var(op: &Operand) -> Option<Var> {
    match op {
        Operand::Register(r) if r.is_general() => Some(Var::Register(*r)),
        Operand::StackSlot(o) => Some(Var::Stack(*o)),
        Operand::Global(a) => Some(Var::Global(*a)),
        _ => None,
    }
}

/// Variables whose *value* is read when the operand is used as a source.
fn source_reads(op: &Operand) -> Vec<Var> {
    match op {
        Operand::Register(r) if r.is_general() => vec![Var::Register(*r)],
        Operand::StackSlot(o) => vec![Var::Stack(*o)],
        Operand::Global(a) => vec![Var::Global(*a)],
        Operand::Indirect(r) if r.is_general() => vec![Var::Register(*r)],
        _ => Vec::new(),
    }
}

/// Variables read to *address* a destination operand (nothing for direct
/// slots; the base register for indirect stores).
fn address_reads(op: &Operand) -> Vec<Var> {
    match op {
        Operand::Indirect(r) if r.is_general() => vec![Var::Register(*r)],
        _ => Vec::new(),
    }
}

/// Tracked variables whose value an instruction reads.
pub(crate) fn instr_reads(i: &Instruction) -> Vec<Var> {
    let mut out = Vec::new();
    match i.mnemonic {
        Mnemonic::Mov => {
            out.extend(source_reads(&i.operands[0]));
            out.extend(address_reads(&i.operands[1]));
        }
        // lea computes an address: the slot's value is not read, only an
        // indirect base register would be.
        Mnemonic::Lea => out.extend(address_reads(&i.operands[0])),
        Mnemonic::Push => out.extend(source_reads(&i.operands[0])),
        Mnemonic::Pop => out.extend(address_reads(&i.operands[0])),
        Mnemonic::Add | Mnemonic::Sub => {
            out.extend(source_reads(&i.operands[0]));
            // Destination is read-modify-write.
            out.extend(source_reads(&i.operands[1]));
            out.extend(address_reads(&i.operands[1]));
        }
        Mnemonic::Cmp | Mnemonic::Test => {
            out.extend(source_reads(&i.operands[0]));
            out.extend(source_reads(&i.operands[1]));
        }
        Mnemonic::Icall => out.extend(source_reads(&i.operands[0])),
        Mnemonic::Call
        | Mnemonic::Jmp
        | Mnemonic::Je
        | Mnemonic::Jne
        | Mnemonic::Jg
        | Mnemonic::Jl
        | Mnemonic::Ret => {}
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Tracked variables an instruction writes. Calls of either kind clobber
/// the return-value register.
pub(crate) fn instr_writes(i: &Instruction) -> Vec<Var> {
    match i.mnemonic {
        Mnemonic::Mov | Mnemonic::Lea | Mnemonic::Add | Mnemonic::Sub => {
            operand_var(&i.operands[1]).into_iter().collect()
        }
        Mnemonic::Pop => operand_var(&i.operands[0]).into_iter().collect(),
        Mnemonic::Call | Mnemonic::Icall => vec![Var::Register(Reg::R0)],
        _ => Vec::new(),
    }
}

/// Whether the instruction explicitly defines `r0` (call clobbers do not
/// count as explicit).
fn explicit_r0_def(i: &Instruction) -> bool {
    matches!(
        i.mnemonic,
        Mnemonic::Mov | Mnemonic::Lea | Mnemonic::Add | Mnemonic::Sub
    ) && i.operands[1] == Operand::Register(Reg::R0)
        || i.mnemonic == Mnemonic::Pop && i.operands[0] == Operand::Register(Reg::R0)
}

/// Every tracked variable an instruction mentions at all, including slots
/// whose address is taken by `lea` (an access, though not a value read).
pub(crate) fn instr_touches(i: &Instruction) -> Vec<Var> {
    let mut out: Vec<Var> = i.operands.iter().filter_map(operand_var).collect();
    for op in &i.operands {
        if let Operand::Indirect(r) = op {
            if r.is_general() {
                out.push(Var::Register(*r));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Per-block liveness over the intra-function edge view: block start ->
/// (live-in, live-out).
pub(crate) fn function_liveness(
    d: &Dcfg,
    f: &Function,
) -> BTreeMap<Addr, (BTreeSet<Var>, BTreeSet<Var>)> {
    let mut gen: BTreeMap<Addr, BTreeSet<Var>> = BTreeMap::new();
    let mut kill: BTreeMap<Addr, BTreeSet<Var>> = BTreeMap::new();
    for b in &f.blocks {
        let mut g = BTreeSet::new();
        let mut k = BTreeSet::new();
        for i in &b.instructions {
            for v in instr_reads(i) {
                if !k.contains(&v) {
                    g.insert(v);
                }
            }
            for v in instr_writes(i) {
                k.insert(v);
            }
        }
        gen.insert(b.start, g);
        kill.insert(b.start, k);
    }
    let mut live_in: BTreeMap<Addr, BTreeSet<Var>> = BTreeMap::new();
    let mut live_out: BTreeMap<Addr, BTreeSet<Var>> = BTreeMap::new();
    for b in &f.blocks {
        live_in.insert(b.start, BTreeSet::new());
        live_out.insert(b.start, BTreeSet::new());
    }
    loop {
        let mut changed = false;
        for b in f.blocks.iter().rev() {
            let mut out: BTreeSet<Var> = BTreeSet::new();
            for &s in d.intra_successors(b.start) {
                if let Some(i) = live_in.get(&s) {
                    out.extend(i.iter().copied());
                }
            }
            let mut inn: BTreeSet<Var> = gen[&b.start].clone();
            for v in &out {
                if !kill[&b.start].contains(v) {
                    inn.insert(*v);
                }
            }
            if out != live_out[&b.start] {
                live_out.insert(b.start, out);
                changed = true;
            }
            if inn != live_in[&b.start] {
                live_in.insert(b.start, inn);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    f.blocks
        .iter()
        .map(|b| {
            (
                b.start,
                (live_in.remove(&b.start).unwrap(), live_out.remove(&b.start).unwrap()),
            )
        })
        .collect()
}

/// Variables that are touched somewhere before the callsite and whose
/// pre-call value cannot be observed after it: either the call itself
/// clobbers them, or no path from the call reads them before writing them.
///
/// `call_addr` must be the address of a `call` or `icall` instruction
/// (always a block terminator); anything else yields the empty set.
pub fn dead_after_callsite(p: &Program, d: &Dcfg, call_addr: Addr) -> BTreeSet<Var> {
    let f = match p.function_at(call_addr) {
        Some(f) => f,
        None => return BTreeSet::new(),
    };
    let block = match f.blocks.iter().find(|b| b.last_addr() == call_addr) {
        Some(b) => b,
        None => return BTreeSet::new(),
    };
    let c = block.instructions.last().expect("blocks are non-empty");
    if !matches!(c.mnemonic, Mnemonic::Call | Mnemonic::Icall) {
        return BTreeSet::new();
    }

    let liveness = function_liveness(d, f);
    let live_out = &liveness[&block.start].1;

    // Touched strictly before the callsite: every instruction in blocks
    // that can reach the callsite's block (backwards closure over
    // intra-function edges), plus the callsite block's own prefix.
    let mut backward: BTreeSet<Addr> = BTreeSet::from([block.start]);
    let mut work = vec![block.start];
    while let Some(b) = work.pop() {
        for &q in d.intra_predecessors(b) {
            if backward.insert(q) {
                work.push(q);
            }
        }
    }
    let mut touched: BTreeSet<Var> = BTreeSet::new();
    for b in &f.blocks {
        if !backward.contains(&b.start) {
            continue;
        }
        let upto = if b.start == block.start {
            b.instructions.len() - 1
        } else {
            b.instructions.len()
        };
        for i in &b.instructions[..upto] {
            touched.extend(instr_touches(i));
        }
    }

    let clobbered: BTreeSet<Var> = instr_writes(c).into_iter().collect();
    touched
        .into_iter()
        .filter(|v| clobbered.contains(v) || !live_out.contains(v))
        .collect()
}

/// Where an argument's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarOrigin {
    Stack,
    Register,
    Global,
    Immediate,
    Unknown,
}

impl VarOrigin {
    fn one_hot(self) -> [f64; 5] {
        let mut v = [0.0; 5];
        let idx = match self {
            VarOrigin::Stack => 0,
            VarOrigin::Register => 1,
            VarOrigin::Global => 2,
            VarOrigin::Immediate => 3,
            VarOrigin::Unknown => 4,
        };
        v[idx] = 1.0;
        v
    }
}

/// Coarse inferred type of an argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeHint {
    Int,
    CharPtr,
    OtherPtr,
    Unknown,
}

impl TypeHint {
    fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        let idx = match self {
            TypeHint::Int => 0,
            TypeHint::CharPtr => 1,
            TypeHint::OtherPtr => 2,
            TypeHint::Unknown => 3,
        };
        v[idx] = 1.0;
        v
    }
}

/// One recovered callsite argument.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgDescriptor {
    pub origin: VarOrigin,
    pub pointer_likeness: bool,
    pub validated: bool,
    pub type_hint: TypeHint,
}

/// What a callsite appears to pass and expect back.
#[derive(Debug, Clone, PartialEq)]
pub struct CallsiteSignature {
    /// In call order: the push nearest the call is the first argument.
    pub args: Vec<ArgDescriptor>,
    pub ret_used: bool,
}

/// One retained callee parameter candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CalleeArg {
    pub var: Var,
    pub origin: VarOrigin,
    pub pointer_likeness: bool,
    pub type_hint: TypeHint,
    pub score: f64,
}

/// What a callee appears to accept and return.
#[derive(Debug, Clone, PartialEq)]
pub struct CalleeSignature {
    /// Positive stack offsets ascending, then other stack slots, then
    /// registers.
    pub args: Vec<CalleeArg>,
    pub ret_score: f64,
    pub ret_present: bool,
}

/// Number of instructions scanned on each side of a callsite.
const WINDOW: usize = 16;

/// Arguments are capped at this many encoded slots; the raw count is still
/// a feature.
pub const MAX_ENCODED_ARGS: usize = 8;

/// Width of one encoded (callsite, callee) pair.
pub const ENCODED_DIM: usize = MAX_ENCODED_ARGS * 12 + 2 + MAX_ENCODED_ARGS * 11 + 2;

/// A section that plausibly holds string data: non-empty, and every byte of
/// every slot is printable ASCII or NUL/tab/newline/carriage-return.
fn byte_string_like(s: &Section) -> bool {
    !s.slots.is_empty()
        && s.slots.iter().all(|slot| {
            slot.value <= u32::MAX as u64
                && slot.value.to_le_bytes()[..4]
                    .iter()
                    .all(|&b| (0x20..=0x7e).contains(&b) || b == 0 || b == 9 || b == 10 || b == 13)
        })
}

/// What a backward trace of a pushed register learned.
struct TraceResult {
    origin: VarOrigin,
    /// The variable the value was copied from, if any (for compare/deref
    /// evidence).
    alias: Option<Var>,
    known_const: Option<u64>,
    lea_derived: bool,
    lea_of_stack: bool,
}

fn trace_register(instrs: &[&Instruction], from: usize, lo: usize, r: Reg) -> TraceResult {
    let unknown = |lea: bool, lea_stack: bool| TraceResult {
        origin: VarOrigin::Unknown,
        alias: None,
        known_const: None,
        lea_derived: lea,
        lea_of_stack: lea_stack,
    };
    let mut i = from;
    while i > lo {
        i -= 1;
        let instr = instrs[i];
        let defines_r = instr_writes(instr).contains(&Var::Register(r));
        if !defines_r {
            continue;
        }
        return match instr.mnemonic {
            Mnemonic::Lea => match &instr.operands[0] {
                Operand::StackSlot(o) => TraceResult {
                    origin: VarOrigin::Stack,
                    alias: Some(Var::Stack(*o)),
                    known_const: None,
                    lea_derived: true,
                    lea_of_stack: true,
                },
                Operand::Global(a) => TraceResult {
                    origin: VarOrigin::Global,
                    alias: Some(Var::Global(*a)),
                    known_const: Some(*a),
                    lea_derived: true,
                    lea_of_stack: false,
                },
                _ => unknown(true, false),
            },
            Mnemonic::Mov => match &instr.operands[0] {
                Operand::Immediate(v) => TraceResult {
                    origin: VarOrigin::Immediate,
                    alias: None,
                    known_const: Some(*v),
                    lea_derived: false,
                    lea_of_stack: false,
                },
                Operand::StackSlot(o) => TraceResult {
                    origin: VarOrigin::Stack,
                    alias: Some(Var::Stack(*o)),
                    known_const: last_const_write(instrs, i, lo, Var::Stack(*o)),
                    lea_derived: false,
                    lea_of_stack: false,
                },
                Operand::Global(a) => TraceResult {
                    origin: VarOrigin::Global,
                    alias: Some(Var::Global(*a)),
                    known_const: last_const_write(instrs, i, lo, Var::Global(*a)),
                    lea_derived: false,
                    lea_of_stack: false,
                },
                Operand::Register(r2) if r2.is_general() => TraceResult {
                    origin: VarOrigin::Register,
                    alias: Some(Var::Register(*r2)),
                    known_const: None,
                    lea_derived: false,
                    lea_of_stack: false,
                },
                _ => unknown(false, false),
            },
            // Clobbered by a call, popped, or arithmetic: provenance lost.
            _ => unknown(false, false),
        };
    }
    // Never defined in the window: the value arrived in the register.
    TraceResult {
        origin: VarOrigin::Register,
        alias: Some(Var::Register(r)),
        known_const: None,
        lea_derived: false,
        lea_of_stack: false,
    }
}

/// The most recent `mov $imm, v` strictly before index `at`.
fn last_const_write(instrs: &[&Instruction], at: usize, lo: usize, v: Var) -> Option<u64> {
    let mut i = at;
    while i > lo {
        i -= 1;
        let instr = instrs[i];
        if instr.mnemonic == Mnemonic::Mov && operand_var(&instr.operands[1]) == Some(v) {
            return match instr.operands[0] {
                Operand::Immediate(c) => Some(c),
                _ => None,
            };
        }
        if instr_writes(instr).contains(&v) {
            return None;
        }
    }
    None
}

/// Whether any compare in the window touches one of the argument's aliases.
fn compared_in_window(instrs: &[&Instruction], lo: usize, hi: usize, aliases: &[Var]) -> bool {
    instrs[lo..hi].iter().any(|i| {
        matches!(i.mnemonic, Mnemonic::Cmp | Mnemonic::Test)
            && instr_touches(i).iter().any(|v| aliases.contains(v))
    })
}

/// Dereference evidence for the argument inside the window: a register
/// alias used as an indirect base or dispatched through, or a memory alias
/// loaded into a register that is then used as one.
fn dereferenced_in_window(instrs: &[&Instruction], lo: usize, hi: usize, aliases: &[Var]) -> bool {
    let uses_base = |i: &Instruction, r: Reg| {
        i.operands.iter().any(|op| *op == Operand::Indirect(r))
            || i.mnemonic == Mnemonic::Icall && i.operands[0] == Operand::Register(r)
    };
    for alias in aliases {
        match alias {
            Var::Register(r) => {
                if instrs[lo..hi].iter().any(|i| uses_base(i, *r)) {
                    return true;
                }
            }
            Var::Stack(_) | Var::Global(_) => {
                // One indirection step: v copied into a register which is
                // later used as a base.
                for (idx, i) in instrs[lo..hi].iter().enumerate() {
                    if i.mnemonic == Mnemonic::Mov
                        && operand_var(&i.operands[0]) == Some(*alias)
                    {
                        if let Operand::Register(r) = i.operands[1] {
                            if instrs[lo + idx + 1..hi].iter().any(|j| uses_base(j, r)) {
                                return true;
                            }
                        }
                    }
                }
            }
        }
    }
    false
}

struct ArgEvidence {
    origin: VarOrigin,
    aliases: Vec<Var>,
    known_const: Option<u64>,
    lea_of_stack: bool,
    lea_derived: bool,
}

fn describe_argument(
    p: &Program,
    instrs: &[&Instruction],
    lo: usize,
    hi: usize,
    ev: ArgEvidence,
) -> ArgDescriptor {
    let validated = compared_in_window(instrs, lo, hi, &ev.aliases);
    let const_in_section =
        |c: u64| p.memory.section_containing(c).is_some();
    let pointer_likeness = ev.lea_derived
        || dereferenced_in_window(instrs, lo, hi, &ev.aliases)
        || ev
            .known_const
            .is_some_and(|c| p.is_function_start(c) || const_in_section(c));
    let type_hint = if let Some(c) = ev.known_const.filter(|&c| {
        p.memory
            .section_containing(c)
            .map(|idx| byte_string_like(&p.memory.sections[idx]))
            .unwrap_or(false)
    }) {
        let _ = c;
        TypeHint::CharPtr
    } else if ev.lea_of_stack {
        TypeHint::CharPtr
    } else if ev.known_const.is_some_and(|c| {
        c < 0x10000
            && !p.is_function_start(c)
            && !const_in_section(c)
            && (ev.origin == VarOrigin::Immediate || validated)
    }) {
        TypeHint::Int
    } else if pointer_likeness {
        TypeHint::OtherPtr
    } else {
        TypeHint::Unknown
    };
    ArgDescriptor {
        origin: ev.origin,
        pointer_likeness,
        validated,
        type_hint,
    }
}

/// Recover the soft signature visible at a call or indirect-call
/// instruction. Returns `None` if `call_addr` is not such an instruction.
pub fn extract_callsite_features(
    p: &Program,
    d: &Dcfg,
    call_addr: Addr,
) -> Option<CallsiteSignature> {
    let f = p.function_at(call_addr)?;
    let instrs: Vec<&Instruction> = f.instructions().collect();
    let c_idx = instrs.iter().position(|i| i.addr == call_addr)?;
    if !matches!(instrs[c_idx].mnemonic, Mnemonic::Call | Mnemonic::Icall) {
        return None;
    }
    let dead = dead_after_callsite(p, d, call_addr);
    let lo = c_idx.saturating_sub(WINDOW);
    let hi = (c_idx + 1 + WINDOW).min(instrs.len());

    // Arguments: pushes walking backwards from the call, stopping at the
    // previous call (its pushes fed it, not us). The nearest push is the
    // first argument.
    let mut args = Vec::new();
    let mut i = c_idx;
    while i > lo {
        i -= 1;
        let instr = instrs[i];
        if matches!(instr.mnemonic, Mnemonic::Call | Mnemonic::Icall) {
            break;
        }
        if instr.mnemonic != Mnemonic::Push {
            continue;
        }
        let ev = match &instr.operands[0] {
            Operand::Immediate(v) => ArgEvidence {
                origin: VarOrigin::Immediate,
                aliases: Vec::new(),
                known_const: Some(*v),
                lea_of_stack: false,
                lea_derived: false,
            },
            Operand::StackSlot(o) if dead.contains(&Var::Stack(*o)) => ArgEvidence {
                origin: VarOrigin::Stack,
                aliases: vec![Var::Stack(*o)],
                known_const: last_const_write(&instrs, i, lo, Var::Stack(*o)),
                lea_of_stack: false,
                lea_derived: false,
            },
            Operand::Global(a) if dead.contains(&Var::Global(*a)) => ArgEvidence {
                origin: VarOrigin::Global,
                aliases: vec![Var::Global(*a)],
                known_const: last_const_write(&instrs, i, lo, Var::Global(*a)),
                lea_of_stack: false,
                lea_derived: false,
            },
            Operand::Register(r)
                if r.is_general() && dead.contains(&Var::Register(*r)) =>
            {
                let t = trace_register(&instrs, i, lo, *r);
                let mut aliases = vec![Var::Register(*r)];
                aliases.extend(t.alias);
                ArgEvidence {
                    origin: t.origin,
                    aliases,
                    known_const: t.known_const,
                    lea_of_stack: t.lea_of_stack,
                    lea_derived: t.lea_derived,
                }
            }
            _ => continue,
        };
        args.push(describe_argument(p, &instrs, lo, hi, ev));
    }

    // Return use: the first instruction after the call that touches r0
    // decides — a value read means the result is consumed, an overwrite
    // (including a clobber by another call) means it is discarded.
    let mut ret_used = false;
    for instr in instrs[c_idx + 1..hi].iter() {
        if instr_reads(instr).contains(&Var::Register(Reg::R0)) {
            ret_used = true;
            break;
        }
        if instr_writes(instr).contains(&Var::Register(Reg::R0)) {
            break;
        }
    }

    Some(CallsiteSignature { args, ret_used })
}

/// Group a function's blocks into "heuristic blocks": runs of blocks merged
/// across call terminators, mirroring how a linear disassembly view would
/// draw them (a call does not end a block there). Jumps, branches, and
/// returns still end a group. Returns block indices.
pub fn heuristic_blocks(f: &Function) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for (idx, b) in f.blocks.iter().enumerate() {
        current.push(idx);
        match b.terminator() {
            Terminator::Call | Terminator::Icall => {}
            _ => {
                out.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Structural parameter-candidate score. Incoming arguments live at
/// positive frame offsets, are rarely written, tend to be touched
/// immediately on entry, and often recur across the body.
pub fn arg_heuristic_score(f: &Function, v: Var) -> f64 {
    let instrs: Vec<&Instruction> = f.instructions().collect();
    let touches: Vec<usize> = instrs
        .iter()
        .enumerate()
        .filter(|(_, i)| instr_touches(i).contains(&v))
        .map(|(idx, _)| idx)
        .collect();
    let written = instrs.iter().any(|i| instr_writes(i).contains(&v));

    let mut score = 0.0;
    if matches!(v, Var::Stack(o) if o > 0) {
        score += 2.0;
    }
    if !written {
        score += 1.5;
    }
    if touches.iter().any(|&idx| idx < 3) {
        score += 2.0;
    }
    // Touches spread across distinct heuristic blocks.
    let groups = heuristic_blocks(f);
    let mut instr_group = Vec::with_capacity(instrs.len());
    for (gi, g) in groups.iter().enumerate() {
        for &bi in g {
            for _ in &f.blocks[bi].instructions {
                instr_group.push(gi);
            }
        }
    }
    let touched_groups: BTreeSet<usize> =
        touches.iter().map(|&idx| instr_group[idx]).collect();
    if touched_groups.len() >= 2 {
        score += 1.0;
    }
    if touches.len() >= 3 {
        score += 1.0;
    }
    if instrs.iter().any(|i| {
        i.operands
            .iter()
            .any(|op| matches!(op, Operand::StackSlot(o) if *o > 0 && Some(v) == operand_var(op)))
    }) {
        score += 2.0;
    }
    score
}

/// Structural return-presence score: explicit writes to `r0`, especially in
/// a returning heuristic block, suggest a produced value.
pub fn return_heuristic_score(f: &Function) -> f64 {
    let mut score = 0.0;
    if f.instructions().any(explicit_r0_def) {
        score += 1.0;
    }
    let groups = heuristic_blocks(f);
    let mut in_ret_group_def = false;
    let mut in_ret_group_const = false;
    for g in &groups {
        let last_bi = *g.last().expect("groups are non-empty");
        if f.blocks[last_bi].terminator() != Terminator::Ret {
            continue;
        }
        for &bi in g {
            for i in &f.blocks[bi].instructions {
                if explicit_r0_def(i) {
                    in_ret_group_def = true;
                    if i.mnemonic == Mnemonic::Mov
                        && matches!(i.operands[0], Operand::Immediate(_))
                    {
                        in_ret_group_const = true;
                    }
                }
            }
        }
    }
    if in_ret_group_def {
        score += 1.5;
    }
    if in_ret_group_const {
        score += 1.0;
    }
    score
}

/// Recover a callee's soft signature: parameter candidates are stack slots
/// and registers read before written, retained when their structural score
/// reaches `tau_arg`; the return flag compares the return score against
/// `tau_ret`.
pub fn extract_callee_features(
    p: &Program,
    d: &Dcfg,
    f_start: Addr,
    tau_arg: f64,
    tau_ret: f64,
) -> Option<CalleeSignature> {
    let f = p.function_starting_at(f_start)?;
    let entry = f.entry_block()?;
    let liveness = function_liveness(d, f);
    let live_in_entry = &liveness[&entry.start].0;

    let mut candidates: Vec<Var> = live_in_entry
        .iter()
        .copied()
        .filter(|v| matches!(v, Var::Stack(_) | Var::Register(_)))
        .collect();
    candidates.sort_by_key(|v| match *v {
        Var::Stack(o) if o > 0 => (0, o, 0u8),
        Var::Stack(o) => (1, o, 0u8),
        Var::Register(r) => (2, 0, r as u8),
        Var::Global(_) => (3, 0, 0),
    });

    let instrs: Vec<&Instruction> = f.instructions().collect();
    let n = instrs.len();
    let mut args = Vec::new();
    for v in candidates {
        let score = arg_heuristic_score(f, v);
        if score < tau_arg {
            continue;
        }
        let aliases = vec![v];
        let pointer_likeness = dereferenced_in_window(&instrs, 0, n, &aliases);
        let compared_small = instrs.iter().enumerate().any(|(_, i)| {
            matches!(i.mnemonic, Mnemonic::Cmp | Mnemonic::Test)
                && instr_touches(i).contains(&v)
                && i.operands
                    .iter()
                    .any(|op| matches!(op, Operand::Immediate(c) if *c < 0x10000))
        });
        let type_hint = if compared_small {
            TypeHint::Int
        } else if pointer_likeness {
            TypeHint::OtherPtr
        } else {
            TypeHint::Unknown
        };
        args.push(CalleeArg {
            var: v,
            origin: match v {
                Var::Stack(_) => VarOrigin::Stack,
                Var::Register(_) => VarOrigin::Register,
                Var::Global(_) => VarOrigin::Global,
            },
            pointer_likeness,
            type_hint,
            score,
        });
    }

    let ret_score = return_heuristic_score(f);
    Some(CalleeSignature {
        args,
        ret_score,
        ret_present: ret_score >= tau_ret,
    })
}

/// Encode a (callsite, callee) signature pair as a fixed-width vector.
///
/// Callsite half: eight argument slots of
/// `[origin one-hot(5), pointer, validated, type one-hot(4), present]`,
/// then the raw (uncapped) argument count and the return-use flag.
/// Callee half: eight slots of `[origin(5), pointer, type(4), present]`,
/// then its raw argument count and return-presence flag.
pub fn encode_pair(cs: &CallsiteSignature, callee: &CalleeSignature) -> Vec<f64> {
    let mut out = Vec::with_capacity(ENCODED_DIM);
    for k in 0..MAX_ENCODED_ARGS {
        match cs.args.get(k) {
            Some(a) => {
                out.extend(a.origin.one_hot());
                out.push(a.pointer_likeness as u8 as f64);
                out.push(a.validated as u8 as f64);
                out.extend(a.type_hint.one_hot());
                out.push(1.0);
            }
            None => out.extend(std::iter::repeat(0.0).take(12)),
        }
    }
    out.push(cs.args.len() as f64);
    out.push(cs.ret_used as u8 as f64);
    for k in 0..MAX_ENCODED_ARGS {
        match callee.args.get(k) {
            Some(a) => {
                out.extend(a.origin.one_hot());
                out.push(a.pointer_likeness as u8 as f64);
                out.extend(a.type_hint.one_hot());
                out.push(1.0);
            }
            None => out.extend(std::iter::repeat(0.0).take(11)),
        }
    }
    out.push(callee.args.len() as f64);
    out.push(callee.ret_present as u8 as f64);
    debug_assert_eq!(out.len(), ENCODED_DIM);
    out
}

/// One labelled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub callsite: Addr,
    pub callee: Addr,
    pub features: Vec<f64>,
    pub label: f64,
}

/// Build labelled pairs from the program's direct calls: each direct call
/// pairs its callsite signature with the true callee (label 1), plus a
/// seeded sample of other functions (label 0). The fractional part of
/// `negatives_per_positive` is realized as a Bernoulli draw per callsite,
/// so the expected ratio matches exactly.
pub fn generate_training_pairs(
    p: &Program,
    d: &Dcfg,
    tau_arg: f64,
    tau_ret: f64,
    negatives_per_positive: f64,
    rng_seed: u64,
) -> Vec<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut callee_sigs: BTreeMap<Addr, CalleeSignature> = BTreeMap::new();
    for f in &p.functions {
        if let Some(sig) = extract_callee_features(p, d, f.start, tau_arg, tau_ret) {
            callee_sigs.insert(f.start, sig);
        }
    }
    let all_starts: Vec<Addr> = p.functions.iter().map(|f| f.start).collect();

    let whole = negatives_per_positive.max(0.0).floor();
    let frac = (negatives_per_positive.max(0.0) - whole).clamp(0.0, 1.0);

    let mut out = Vec::new();
    for f in &p.functions {
        for b in &f.blocks {
            if b.terminator() != Terminator::Call {
                continue;
            }
            let c = b.instructions.last().expect("blocks are non-empty");
            let target = match c.operands.first() {
                Some(Operand::Immediate(t)) => *t,
                _ => continue,
            };
            let (Some(cs_sig), Some(true_sig)) = (
                extract_callsite_features(p, d, c.addr),
                callee_sigs.get(&target),
            ) else {
                continue;
            };
            out.push(TrainingPair {
                callsite: c.addr,
                callee: target,
                features: encode_pair(&cs_sig, true_sig),
                label: 1.0,
            });
            let mut n = whole as usize;
            if frac > 0.0 && rng.gen_bool(frac) {
                n += 1;
            }
            let pool: Vec<Addr> = all_starts
                .iter()
                .copied()
                .filter(|&s| s != target)
                .collect();
            for &neg in pool.choose_multiple(&mut rng, n.min(pool.len())) {
                out.push(TrainingPair {
                    callsite: c.addr,
                    callee: neg,
                    features: encode_pair(&cs_sig, &callee_sigs[&neg]),
                    label: 0.0,
                });
            }
        }
    }
    out
}
