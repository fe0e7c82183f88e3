//! Program model for the analysis pipeline.
//!
//! Everything downstream (control-flow recovery, feature extraction, the
//! scorer, backward refinement) operates on the types in this module: a
//! [`Program`] is a list of disassembled [`Function`]s plus a static
//! [`MemoryImage`], and an [`AnalysisConfig`] carries every knob the pipeline
//! reads so that runs are reproducible from a single record.
//!
//! The instruction set is a small abstract register machine: six general
//! registers `r0`–`r5` plus `fp`/`sp`, byte addresses, and a fixed pointer
//! width of four bytes. `r0` doubles as the return-value register.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Byte address inside a program image.
pub type Addr = u64;

/// Width of a pointer (and of one memory slot) in bytes.
pub const POINTER_WIDTH: u64 = 4;

/// Register file of the abstract machine. `R0` is the return-value register;
/// `Fp`/`Sp` are the frame and stack pointers and are not tracked as data
/// variables by the analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reg {
    R0,
    R1,
    R2,
    R3,
    R4,
    R5,
    Fp,
    Sp,
}

impl Reg {
    /// All registers, in display order.
    pub const ALL: [Reg; 8] = [
        Reg::R0,
        Reg::R1,
        Reg::R2,
        Reg::R3,
        Reg::R4,
        Reg::R5,
        Reg::Fp,
        Reg::Sp,
    ];

    /// True for the general-purpose data registers `r0`–`r5`.
    pub fn is_general(self) -> bool {
        !matches!(self, Reg::Fp | Reg::Sp)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Reg::R0 => "r0",
            Reg::R1 => "r1",
            Reg::R2 => "r2",
            Reg::R3 => "r3",
            Reg::R4 => "r4",
            Reg::R5 => "r5",
            Reg::Fp => "fp",
            Reg::Sp => "sp",
        };
        f.write_str(s)
    }
}

/// Instruction operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operand {
    /// A bare register.
    Register(Reg),
    /// A literal constant (`$0x2a`). Function addresses used as data appear
    /// as immediates.
    Immediate(u64),
    /// A frame-relative memory slot (`[fp-0x1c]`, `[fp+0x8]`); the payload is
    /// the signed byte offset from `fp`.
    StackSlot(i64),
    /// An absolute memory reference (`[0x804a100]`).
    Global(Addr),
    /// A memory reference through a register (`[r1]`).
    Indirect(Reg),
}

impl Operand {
    /// True if the operand denotes a memory location (directly or through a
    /// register).
    pub fn is_memory(&self) -> bool {
        matches!(
            self,
            Operand::StackSlot(_) | Operand::Global(_) | Operand::Indirect(_)
        )
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Register(r) => write!(f, "{r}"),
            Operand::Immediate(v) => write!(f, "$0x{v:x}"),
            Operand::StackSlot(off) => {
                if *off < 0 {
                    write!(f, "[fp-0x{:x}]", off.unsigned_abs())
                } else {
                    write!(f, "[fp+0x{off:x}]")
                }
            }
            Operand::Global(a) => write!(f, "[0x{a:x}]"),
            Operand::Indirect(r) => write!(f, "[{r}]"),
        }
    }
}

/// Instruction mnemonics of the abstract machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mnemonic {
    Mov,
    Lea,
    Push,
    Pop,
    Add,
    Sub,
    Cmp,
    Test,
    Call,
    Icall,
    Jmp,
    Je,
    Jne,
    Jg,
    Jl,
    Ret,
}

impl Mnemonic {
    /// True if the instruction transfers control (and therefore terminates a
    /// basic block).
    pub fn is_control_transfer(self) -> bool {
        matches!(
            self,
            Mnemonic::Call
                | Mnemonic::Icall
                | Mnemonic::Jmp
                | Mnemonic::Je
                | Mnemonic::Jne
                | Mnemonic::Jg
                | Mnemonic::Jl
                | Mnemonic::Ret
        )
    }

    /// True for the conditional jumps.
    pub fn is_cond_jump(self) -> bool {
        matches!(self, Mnemonic::Je | Mnemonic::Jne | Mnemonic::Jg | Mnemonic::Jl)
    }

    /// Number of operands the mnemonic takes.
    pub fn operand_count(self) -> usize {
        match self {
            Mnemonic::Ret => 0,
            Mnemonic::Push
            | Mnemonic::Pop
            | Mnemonic::Call
            | Mnemonic::Icall
            | Mnemonic::Jmp
            | Mnemonic::Je
            | Mnemonic::Jne
            | Mnemonic::Jg
            | Mnemonic::Jl => 1,
            Mnemonic::Mov
            | Mnemonic::Lea
            | Mnemonic::Add
            | Mnemonic::Sub
            | Mnemonic::Cmp
            | Mnemonic::Test => 2,
        }
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Lea => "lea",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::Add => "add",
            Mnemonic::Sub => "sub",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Test => "test",
            Mnemonic::Call => "call",
            Mnemonic::Icall => "icall",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Je => "je",
            Mnemonic::Jne => "jne",
            Mnemonic::Jg => "jg",
            Mnemonic::Jl => "jl",
            Mnemonic::Ret => "ret",
        };
        f.write_str(s)
    }
}

/// A single decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub addr: Addr,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(addr: Addr, mnemonic: Mnemonic, operands: Vec<Operand>) -> Self {
        Instruction {
            addr,
            mnemonic,
            operands,
        }
    }
}

/// How a basic block ends. Derived from the block's final instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    /// Execution continues into the next block of the function.
    Fallthrough,
    /// Unconditional jump.
    Jump,
    /// Conditional jump (branch target plus fallthrough).
    CondJump,
    /// Direct call; control resumes at the next block after the callee
    /// returns.
    Call,
    /// Indirect call through a register or memory operand.
    Icall,
    /// Function return.
    Ret,
}

/// A straight-line run of instructions. Blocks are split at labels and after
/// every control-transfer instruction, so only the final instruction may
/// transfer control.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    /// Address of the first instruction.
    pub start: Addr,
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    pub fn new(start: Addr, instructions: Vec<Instruction>) -> Self {
        BasicBlock {
            start,
            instructions,
        }
    }

    /// Terminator kind, derived from the final instruction.
    pub fn terminator(&self) -> Terminator {
        match self.instructions.last().map(|i| i.mnemonic) {
            Some(Mnemonic::Jmp) => Terminator::Jump,
            Some(m) if m.is_cond_jump() => Terminator::CondJump,
            Some(Mnemonic::Call) => Terminator::Call,
            Some(Mnemonic::Icall) => Terminator::Icall,
            Some(Mnemonic::Ret) => Terminator::Ret,
            _ => Terminator::Fallthrough,
        }
    }

    /// Address of the final instruction (equal to `start` for single
    /// instruction blocks). Empty blocks are rejected by validation; this
    /// falls back to `start` for them.
    pub fn last_addr(&self) -> Addr {
        self.instructions.last().map(|i| i.addr).unwrap_or(self.start)
    }
}

/// A disassembled function: an ordered list of basic blocks. The function
/// start must equal the first block's first instruction address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: Option<String>,
    pub start: Addr,
    pub blocks: Vec<BasicBlock>,
}

impl Function {
    pub fn new(name: Option<String>, start: Addr, blocks: Vec<BasicBlock>) -> Self {
        Function {
            name,
            start,
            blocks,
        }
    }

    /// The entry block (first block).
    pub fn entry_block(&self) -> Option<&BasicBlock> {
        self.blocks.first()
    }

    /// Address of the function's final instruction.
    pub fn end_addr(&self) -> Addr {
        self.blocks
            .iter()
            .map(|b| b.last_addr())
            .max()
            .unwrap_or(self.start)
    }

    /// Display name: the symbol if present, otherwise a name synthesized from
    /// the start address.
    pub fn display_name(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => format!("fn_{:x}", self.start),
        }
    }

    /// Iterate over all instructions in block order.
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instructions.iter())
    }
}

/// One pointer-width slot of initialized static memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub addr: Addr,
    pub value: u64,
}

/// A named, contiguous region of initialized memory slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub base: Addr,
    pub slots: Vec<Slot>,
}

impl Section {
    /// Exclusive end address of the section's occupied range.
    pub fn end(&self) -> Addr {
        self.slots
            .iter()
            .map(|s| s.addr + POINTER_WIDTH)
            .max()
            .unwrap_or(self.base)
    }

    /// True if `addr` lies inside the section's occupied range.
    pub fn contains(&self, addr: Addr) -> bool {
        addr >= self.base && addr < self.end()
    }
}

/// Static memory image: an ordered list of sections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryImage {
    pub sections: Vec<Section>,
}

impl MemoryImage {
    /// Index of the section containing `addr`, if any.
    pub fn section_containing(&self, addr: Addr) -> Option<usize> {
        self.sections.iter().position(|s| s.contains(addr))
    }

    /// The slot at exactly `addr`, if one exists.
    pub fn slot_at(&self, addr: Addr) -> Option<Slot> {
        self.sections
            .iter()
            .flat_map(|s| s.slots.iter())
            .find(|s| s.addr == addr)
            .copied()
    }

    /// Iterate over all slots of all sections.
    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.sections.iter().flat_map(|s| s.slots.iter())
    }
}

/// An indirect (or, for training purposes, direct) call site. The site's
/// instruction address doubles as its identifier: instruction addresses are
/// unique across a valid program, and trace files key on them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Callsite {
    /// Address of the call instruction; unique per program.
    pub id: Addr,
    /// Start address of the enclosing function.
    pub function: Addr,
    /// Start address of the enclosing basic block.
    pub block: Addr,
    /// The call's operand (the callee expression).
    pub operand: Operand,
}

/// A whole program: disassembled functions plus the static memory image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    /// Functions sorted by ascending start address (validated, not enforced
    /// on construction).
    pub functions: Vec<Function>,
    pub memory: MemoryImage,
    /// Entry point; must be the start address of some function.
    pub entry: Addr,
}

impl Program {
    pub fn new(functions: Vec<Function>, memory: MemoryImage, entry: Addr) -> Self {
        Program {
            functions,
            memory,
            entry,
        }
    }

    /// Pointer width in bytes (fixed for the abstract machine).
    pub fn pointer_width(&self) -> u64 {
        POINTER_WIDTH
    }

    /// The function whose address range `[start, end]` contains `addr`.
    /// Addresses between instructions still resolve to the containing
    /// function; addresses past a function's final instruction do not.
    pub fn function_at(&self, addr: Addr) -> Option<&Function> {
        self.functions
            .iter()
            .find(|f| addr >= f.start && addr <= f.end_addr())
    }

    /// True if `addr` is the start address of some function.
    pub fn is_function_start(&self, addr: Addr) -> bool {
        self.functions.iter().any(|f| f.start == addr)
    }

    /// The function starting exactly at `addr`.
    pub fn function_starting_at(&self, addr: Addr) -> Option<&Function> {
        self.functions.iter().find(|f| f.start == addr)
    }

    /// Look up a function by symbol name.
    pub fn function_named(&self, name: &str) -> Option<&Function> {
        self.functions
            .iter()
            .find(|f| f.name.as_deref() == Some(name))
    }

    /// Structural validation. Returns every violation found (empty for a
    /// well-formed program); each violation names the offending address.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |address: Addr, message: String| out.push(Violation { address, message });

        // Function ordering and range disjointness.
        for w in self.functions.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if b.start <= a.start {
                push(
                    b.start,
                    format!(
                        "function {} does not start after function {}",
                        b.display_name(),
                        a.display_name()
                    ),
                );
            } else if b.start <= a.end_addr() {
                push(
                    b.start,
                    format!(
                        "function {} overlaps the range of function {}",
                        b.display_name(),
                        a.display_name()
                    ),
                );
            }
        }

        // Entry must be a function start.
        if !self.is_function_start(self.entry) {
            push(self.entry, "entry is not a function start".to_string());
        }

        for f in &self.functions {
            if f.blocks.is_empty() {
                push(f.start, format!("function {} has no blocks", f.display_name()));
                continue;
            }
            let first = &f.blocks[0];
            match first.instructions.first() {
                Some(i) if i.addr == f.start => {}
                _ => push(
                    f.start,
                    format!(
                        "function {} does not begin with an instruction at its start address",
                        f.display_name()
                    ),
                ),
            }
            for w in f.blocks.windows(2) {
                if w[1].start <= w[0].last_addr() {
                    push(
                        w[1].start,
                        "basic block does not start after its predecessor".to_string(),
                    );
                }
            }
            for b in &f.blocks {
                if b.instructions.is_empty() {
                    push(b.start, "empty basic block".to_string());
                    continue;
                }
                if b.instructions[0].addr != b.start {
                    push(
                        b.start,
                        "block start does not match its first instruction".to_string(),
                    );
                }
                for w in b.instructions.windows(2) {
                    if w[1].addr <= w[0].addr {
                        push(
                            w[1].addr,
                            "instruction addresses are not strictly increasing".to_string(),
                        );
                    }
                }
                let last = b.instructions.len() - 1;
                for (i, instr) in b.instructions.iter().enumerate() {
                    if i != last && instr.mnemonic.is_control_transfer() {
                        push(
                            instr.addr,
                            "control transfer in the middle of a basic block".to_string(),
                        );
                    }
                    validate_instruction(instr, &mut push);
                }
            }
        }

        // Memory image: alignment, slot uniqueness, section disjointness.
        let mut seen_slots: BTreeSet<Addr> = BTreeSet::new();
        for s in &self.memory.sections {
            let mut prev: Option<Addr> = None;
            for slot in &s.slots {
                if slot.addr % POINTER_WIDTH != 0 {
                    push(slot.addr, "memory slot is not pointer-width aligned".to_string());
                }
                if slot.addr < s.base {
                    push(
                        slot.addr,
                        format!("slot lies before the base of section {}", s.name),
                    );
                }
                if !seen_slots.insert(slot.addr) {
                    push(slot.addr, "duplicate memory slot address".to_string());
                }
                if let Some(p) = prev {
                    if slot.addr <= p {
                        push(
                            slot.addr,
                            "section slots are not strictly increasing".to_string(),
                        );
                    }
                }
                prev = Some(slot.addr);
            }
        }
        for (i, a) in self.memory.sections.iter().enumerate() {
            for b in self.memory.sections.iter().skip(i + 1) {
                let disjoint = a.end() <= b.base || b.end() <= a.base;
                if !disjoint {
                    push(
                        b.base,
                        format!("section {} overlaps section {}", b.name, a.name),
                    );
                }
            }
        }

        out
    }
}

fn validate_instruction(instr: &Instruction, push: &mut impl FnMut(Addr, String)) {
    let expect = instr.mnemonic.operand_count();
    if instr.operands.len() != expect {
        push(
            instr.addr,
            format!(
                "{} takes {} operand(s), found {}",
                instr.mnemonic,
                expect,
                instr.operands.len()
            ),
        );
        return;
    }
    match instr.mnemonic {
        Mnemonic::Call => {
            if !matches!(instr.operands[0], Operand::Immediate(_)) {
                push(
                    instr.addr,
                    "direct call requires an immediate target".to_string(),
                );
            }
        }
        Mnemonic::Icall => {
            if matches!(instr.operands[0], Operand::Immediate(_)) {
                push(
                    instr.addr,
                    "indirect call through an immediate operand".to_string(),
                );
            }
        }
        Mnemonic::Jmp | Mnemonic::Je | Mnemonic::Jne | Mnemonic::Jg | Mnemonic::Jl => {
            if !matches!(instr.operands[0], Operand::Immediate(_)) {
                push(instr.addr, "jump requires an immediate target".to_string());
            }
        }
        Mnemonic::Lea => {
            if !instr.operands[0].is_memory() {
                push(
                    instr.addr,
                    "lea source must be a memory operand".to_string(),
                );
            }
            if !matches!(instr.operands[1], Operand::Register(_)) {
                push(
                    instr.addr,
                    "lea destination must be a register".to_string(),
                );
            }
        }
        _ => {}
    }
}

/// A single structural violation found by [`Program::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub address: Addr,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}: {}", self.address, self.message)
    }
}

/// Errors raised when an [`AnalysisConfig`] carries out-of-range values.
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("path height must be at least 1")]
    HeightTooSmall,
    #[error("per-callsite timeout must be positive, got {0}")]
    NonPositiveTimeout(f64),
    #[error("score adjustment delta must lie in [0, 1], got {0}")]
    DeltaOutOfRange(f64),
    #[error("prune threshold must lie in [0, 1], got {0}")]
    ThresholdOutOfRange(f64),
    #[error("trace sample fraction must lie in (0, 1], got {0}")]
    SampleFractionOutOfRange(f64),
}

/// Every knob the pipeline reads, in one reproducible record.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Backward path height `H`: maximum number of blocks on one extracted
    /// path, including the seed block. Must be at least 1.
    pub height: u32,
    /// Memory sweep recursion depth `R`; 0 sweeps only the starting section.
    pub sweep_depth: u32,
    /// Cross-reference recursion depth `D`.
    pub xref_depth: u32,
    /// Per-callsite refinement timeout `T` in seconds.
    pub timeout_secs: f64,
    /// Score adjustment magnitude applied by refinement, in `[0, 1]`.
    pub delta: f64,
    /// Retention threshold for callee argument heuristic scores.
    pub tau_arg: f64,
    /// Retention threshold for callee return-usage heuristic scores.
    pub tau_ret: f64,
    /// Default edge-pruning threshold, in `[0, 1]`.
    pub prune_threshold: f64,
    /// Fraction of trace pairs sampled for threshold calibration, in
    /// `(0, 1]`.
    pub trace_sample_fraction: f64,
    /// Seed for every stochastic choice (sampling, training, negatives).
    pub rng_seed: u64,
    /// When set, the refinement timeout is measured in deterministic
    /// instruction-inspection steps (`timeout_secs` x 10,000 steps) instead
    /// of wall-clock time, so timeout behaviour is reproducible in tests.
    pub deterministic_timeout: bool,
}

/// Number of instruction-inspection steps that stand in for one second of
/// budget when `deterministic_timeout` is set.
pub const STEPS_PER_SECOND: f64 = 10_000.0;

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            height: 40,
            sweep_depth: 1,
            xref_depth: 3,
            timeout_secs: 250.0,
            delta: 0.1,
            tau_arg: 6.0,
            tau_ret: 2.0,
            prune_threshold: 0.0,
            trace_sample_fraction: 0.3,
            rng_seed: 1,
            deterministic_timeout: false,
        }
    }
}

impl AnalysisConfig {
    /// Check every range constraint; returns the first violation found.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.height < 1 {
            return Err(ConfigError::HeightTooSmall);
        }
        if !(self.timeout_secs > 0.0) {
            return Err(ConfigError::NonPositiveTimeout(self.timeout_secs));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(ConfigError::DeltaOutOfRange(self.delta));
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(ConfigError::ThresholdOutOfRange(self.prune_threshold));
        }
        if !(self.trace_sample_fraction > 0.0 && self.trace_sample_fraction <= 1.0) {
            return Err(ConfigError::SampleFractionOutOfRange(
                self.trace_sample_fraction,
            ));
        }
        Ok(())
    }

    /// Refinement step budget when `deterministic_timeout` is set.
    pub fn step_budget(&self) -> u64 {
        (self.timeout_secs * STEPS_PER_SECOND).ceil() as u64
    }
}
