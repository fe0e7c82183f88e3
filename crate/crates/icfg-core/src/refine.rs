//! Bounded inter-procedural backward refinement: starting from an indirect
//! callsite, walk backward paths through the control-flow graph, inspect the
//! code on them for function addresses and pointers into initialized memory,
//! sweep pointed-to memory recursively, and follow cross-references into
//! callers that pass pointer-like arguments. The collected target set then
//! nudges candidate edge scores up or down by a fixed delta.
//!
//! Every phase is budgeted per callsite: one step per inspected instruction
//! and per swept memory slot. The budget is either wall-clock or a
//! deterministic step count, and exhausting it yields the partial target set
//! gathered so far, flagged as timed out.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crate::cfg::{indirect_callsites, Dcfg};
use crate::frontend::CandidateMap;
use crate::model::{Addr, AnalysisConfig, BasicBlock, Mnemonic, Operand, Program, Reg};

/// Outcome of refining one callsite.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RefineResult {
    /// Function entry addresses with concrete backward evidence.
    pub targets: BTreeSet<Addr>,
    /// Whether the budget ran out; `targets` is then a partial set.
    pub timed_out: bool,
    /// Budget units charged (inspected instructions plus swept slots).
    pub steps_used: u64,
}

/// Work budget for one callsite: either a deterministic step limit or a
/// wall-clock deadline. Steps are counted in both modes.
struct Budget {
    steps: u64,
    limit: Option<u64>,
    deadline: Option<Instant>,
}

impl Budget {
    fn from_config(cfg: &AnalysisConfig) -> Budget {
        if cfg.deterministic_timeout {
            Budget {
                steps: 0,
                limit: Some(cfg.step_budget()),
                deadline: None,
            }
        } else {
            Budget {
                steps: 0,
                limit: None,
                deadline: Some(Instant::now() + Duration::from_secs_f64(cfg.timeout_secs)),
            }
        }
    }

    fn unlimited() -> Budget {
        Budget {
            steps: 0,
            limit: None,
            deadline: None,
        }
    }

    /// Charge one unit. Returns false when the budget is exhausted, in
    /// which case the unit of work must not be performed.
    fn step(&mut self) -> bool {
        self.steps += 1;
        if let Some(limit) = self.limit {
            if self.steps > limit {
                return false;
            }
        }
        if let Some(deadline) = self.deadline {
            // The clock read is amortized; granularity is plenty for a
            // seconds-scale budget.
            if self.steps % 64 == 0 && Instant::now() > deadline {
                return false;
            }
        }
        true
    }
}

enum Walk {
    Continue,
    Abort,
}

/// Depth-first enumeration of simple backward paths from `seed`, at most
/// `height` blocks per path. `visit` runs once per appended block — every
/// prefix is itself a path — with predecessors explored in ascending
/// address order, so visit order is lexicographic. Returns false if the
/// visitor aborted.
fn walk_backward_paths(
    d: &Dcfg,
    seed: Addr,
    height: u32,
    visit: &mut impl FnMut(&[Addr]) -> Walk,
) -> bool {
    if height == 0 || !d.contains(seed) {
        return true;
    }
    let mut path = vec![seed];
    let mut on_path: BTreeSet<Addr> = [seed].into();
    let mut next_pred = vec![0usize];
    if let Walk::Abort = visit(&path) {
        return false;
    }
    while !path.is_empty() {
        let cur = *path.last().unwrap();
        let preds = d.predecessors(cur);
        let idx = next_pred.last_mut().unwrap();
        if (path.len() as u64) < height as u64 && *idx < preds.len() {
            let pred = preds[*idx];
            *idx += 1;
            if on_path.insert(pred) {
                path.push(pred);
                next_pred.push(0);
                if let Walk::Abort = visit(&path) {
                    return false;
                }
            }
        } else {
            on_path.remove(&path.pop().unwrap());
            next_pred.pop();
        }
    }
    true
}

/// All simple backward paths from `seed`, each at most `height` blocks,
/// including every prefix, in lexicographic (depth-first preorder) order.
pub fn extract_backward_paths(d: &Dcfg, seed: Addr, height: u32) -> Vec<Vec<Addr>> {
    let mut paths = Vec::new();
    walk_backward_paths(d, seed, height, &mut |path| {
        paths.push(path.to_vec());
        Walk::Continue
    });
    paths
}

/// Collect function starts from the whole section containing `addr`,
/// following slot values that point into other sections while `depth`
/// permits (0 sweeps only the starting section). Already-swept sections
/// are never revisited, so pointer cycles terminate. Addresses outside any
/// section yield nothing.
pub fn recursive_memory_sweep(p: &Program, addr: Addr, depth: u32) -> BTreeSet<Addr> {
    let mut out = BTreeSet::new();
    let mut visited = BTreeSet::new();
    sweep_section(p, addr, depth, &mut visited, &mut out, &mut Budget::unlimited());
    out
}

/// Budgeted sweep worker; returns false on budget exhaustion.
fn sweep_section(
    p: &Program,
    addr: Addr,
    depth: u32,
    visited: &mut BTreeSet<usize>,
    out: &mut BTreeSet<Addr>,
    budget: &mut Budget,
) -> bool {
    let Some(si) = p.memory.section_containing(addr) else {
        return true;
    };
    if !visited.insert(si) {
        return true;
    }
    for slot in &p.memory.sections[si].slots {
        if !budget.step() {
            return false;
        }
        let value = slot.value;
        if p.is_function_start(value) {
            out.insert(value);
        } else if depth > 0
            && !sweep_section(p, value, depth - 1, visited, out, budget)
        {
            return false;
        }
    }
    true
}

/// Inspect one block's instructions for target evidence: immediates that
/// are function entries are targets directly; immediates or absolute
/// references into initialized memory trigger a sweep. Control-transfer
/// instructions are charged but not inspected, so jump tables and direct
/// call operands do not masquerade as data flow. Returns false on budget
/// exhaustion.
fn inspect_block(
    p: &Program,
    block: &BasicBlock,
    cfg: &AnalysisConfig,
    out: &mut BTreeSet<Addr>,
    budget: &mut Budget,
) -> bool {
    for instr in &block.instructions {
        if !budget.step() {
            return false;
        }
        if instr.mnemonic.is_control_transfer() {
            continue;
        }
        for op in &instr.operands {
            let swept_from = match *op {
                Operand::Immediate(v) => {
                    if p.is_function_start(v) {
                        out.insert(v);
                        continue;
                    }
                    v
                }
                Operand::Global(a) => a,
                _ => continue,
            };
            if p.memory.section_containing(swept_from).is_some()
                && !sweep_section(
                    p,
                    swept_from,
                    cfg.sweep_depth,
                    &mut BTreeSet::new(),
                    out,
                    budget,
                )
            {
                return false;
            }
        }
    }
    true
}

/// Whether a call block passes anything that could carry a function
/// pointer: a pushed immediate that is a function entry or points into a
/// section, a pushed memory operand, or a pushed register that a `lea` in
/// the same block defined (and nothing overwrote since).
fn passes_pointer_like_argument(p: &Program, block: &BasicBlock) -> bool {
    let mut lea_regs: BTreeSet<Reg> = BTreeSet::new();
    for instr in &block.instructions {
        match instr.mnemonic {
            Mnemonic::Lea => {
                if let Some(Operand::Register(r)) = instr.operands.get(1) {
                    lea_regs.insert(*r);
                }
            }
            Mnemonic::Mov | Mnemonic::Add | Mnemonic::Sub | Mnemonic::Pop => {
                let dst = if instr.mnemonic == Mnemonic::Pop {
                    instr.operands.first()
                } else {
                    instr.operands.get(1)
                };
                if let Some(Operand::Register(r)) = dst {
                    lea_regs.remove(r);
                }
            }
            Mnemonic::Call => {
                lea_regs.remove(&Reg::R0);
            }
            Mnemonic::Push => match instr.operands.first() {
                Some(&Operand::Immediate(v)) => {
                    if p.is_function_start(v) || p.memory.section_containing(v).is_some() {
                        return true;
                    }
                }
                Some(Operand::StackSlot(_) | Operand::Global(_) | Operand::Indirect(_)) => {
                    return true;
                }
                Some(&Operand::Register(r)) => {
                    if lea_regs.contains(&r) {
                        return true;
                    }
                }
                None => {}
            },
            _ => {}
        }
    }
    false
}

/// Follow direct-call cross-references to `func` up to `cfg.xref_depth`
/// levels: each calling block that passes a pointer-like or memory-based
/// argument is inspected as a one-block slice, and its own function is
/// resolved one level deeper. Returns false on budget exhaustion.
fn resolve_cross_refs(
    p: &Program,
    func: Addr,
    depth: u32,
    cfg: &AnalysisConfig,
    out: &mut BTreeSet<Addr>,
    budget: &mut Budget,
) -> bool {
    if depth >= cfg.xref_depth {
        return true;
    }
    // (call address, calling function, calling block), ascending.
    let mut xrefs: Vec<(Addr, Addr, &BasicBlock)> = Vec::new();
    for f in &p.functions {
        for block in &f.blocks {
            if let Some(last) = block.instructions.last() {
                if last.mnemonic == Mnemonic::Call
                    && last.operands.first() == Some(&Operand::Immediate(func))
                {
                    xrefs.push((last.addr, f.start, block));
                }
            }
        }
    }
    xrefs.sort_by_key(|&(at, _, _)| at);
    for (_, caller, block) in xrefs {
        if !passes_pointer_like_argument(p, block) {
            continue;
        }
        if !inspect_block(p, block, cfg, out, budget) {
            return false;
        }
        if !resolve_cross_refs(p, caller, depth + 1, cfg, out, budget) {
            return false;
        }
    }
    true
}

/// Refine one indirect callsite (identified by its call instruction
/// address): enumerate backward paths with inline inspection, then follow
/// cross-references, all under one per-callsite budget. An address that is
/// not an indirect callsite yields an empty result.
pub fn resolve_callsite_targets(
    p: &Program,
    d: &Dcfg,
    callsite: Addr,
    cfg: &AnalysisConfig,
) -> RefineResult {
    let Some(cs) = indirect_callsites(p).into_iter().find(|c| c.id == callsite) else {
        return RefineResult::default();
    };
    let mut budget = Budget::from_config(cfg);
    let mut targets = BTreeSet::new();
    let completed = walk_backward_paths(d, cs.block, cfg.height, &mut |path| {
        let appended = *path.last().unwrap();
        match d.block(p, appended) {
            Some(block) if inspect_block(p, block, cfg, &mut targets, &mut budget) => {
                Walk::Continue
            }
            Some(_) => Walk::Abort,
            None => Walk::Continue,
        }
    });
    let timed_out = !completed
        || !resolve_cross_refs(p, cs.function, 0, cfg, &mut targets, &mut budget);
    RefineResult {
        targets,
        timed_out,
        steps_used: budget.steps,
    }
}

/// Refine every indirect callsite, each under its own fresh budget.
pub fn refine_program(
    p: &Program,
    d: &Dcfg,
    cfg: &AnalysisConfig,
) -> BTreeMap<Addr, RefineResult> {
    indirect_callsites(p)
        .into_iter()
        .map(|c| (c.id, resolve_callsite_targets(p, d, c.id, cfg)))
        .collect()
}

/// Strip refinement results down to their target sets.
pub fn target_map(results: &BTreeMap<Addr, RefineResult>) -> CandidateMap {
    results
        .iter()
        .map(|(&cs, r)| (cs, r.targets.clone()))
        .collect()
}

/// Nudge candidate edge scores: `+delta` where refinement found the target,
/// `-delta` otherwise (a callsite absent from `refined` counts as an empty
/// finding), clipped to `[0, 1]`.
pub fn adjust_scores(
    scores: &mut BTreeMap<(Addr, Addr), f64>,
    refined: &CandidateMap,
    delta: f64,
) {
    for ((cs, target), score) in scores.iter_mut() {
        let found = refined.get(cs).is_some_and(|set| set.contains(target));
        *score = if found {
            (*score + delta).min(1.0)
        } else {
            (*score - delta).max(0.0)
        };
    }
}
