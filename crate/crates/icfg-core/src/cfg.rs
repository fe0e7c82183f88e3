//! Direct control-flow graph construction, reachability, address-taken
//! extraction, and the conservative per-callsite candidate sets that form
//! the first resolution layer.
//!
//! Blocks are identified by their start address (globally unique). The
//! graph carries two edge views:
//!
//! * **inter-procedural** (`successors`/`predecessors`): direct calls edge
//!   into the callee's entry block, and each of the callee's return blocks
//!   edges back to the caller's fall-through block. Indirect calls edge to
//!   their fall-through only, since their targets are what the rest of the
//!   pipeline exists to discover.
//! * **intra-function** (`intra_successors`): calls of either kind edge
//!   straight to their fall-through block and returns have no successors.
//!   Liveness and the other single-function analyses use this view.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use thiserror::Error;

use crate::frontend::CandidateMap;
use crate::model::{Addr, BasicBlock, Callsite, Function, Operand, Program, Terminator};

/// Failure to resolve a control-transfer target while building the graph.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CfgError {
    #[error("0x{at:x}: jump to 0x{target:x}, which is not a block start in the same function")]
    UnknownJumpTarget { at: Addr, target: Addr },
    #[error("0x{at:x}: call to 0x{target:x}, which is not a function start")]
    UnknownCallTarget { at: Addr, target: Addr },
}

/// The direct control-flow graph of a program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dcfg {
    succs: BTreeMap<Addr, Vec<Addr>>,
    preds: BTreeMap<Addr, Vec<Addr>>,
    intra_succs: BTreeMap<Addr, Vec<Addr>>,
    intra_preds: BTreeMap<Addr, Vec<Addr>>,
    /// Block start -> (owning function start, index into its block list).
    location: BTreeMap<Addr, (Addr, usize)>,
}

impl Dcfg {
    /// Inter-procedural successors of a block (empty for unknown blocks).
    pub fn successors(&self, block: Addr) -> &[Addr] {
        self.succs.get(&block).map_or(&[], Vec::as_slice)
    }

    /// Inter-procedural predecessors of a block.
    pub fn predecessors(&self, block: Addr) -> &[Addr] {
        self.preds.get(&block).map_or(&[], Vec::as_slice)
    }

    /// Intra-function successors (calls fall through, returns stop).
    pub fn intra_successors(&self, block: Addr) -> &[Addr] {
        self.intra_succs.get(&block).map_or(&[], Vec::as_slice)
    }

    /// Intra-function predecessors.
    pub fn intra_predecessors(&self, block: Addr) -> &[Addr] {
        self.intra_preds.get(&block).map_or(&[], Vec::as_slice)
    }

    /// Whether `block` is a block start in the graph.
    pub fn contains(&self, block: Addr) -> bool {
        self.location.contains_key(&block)
    }

    /// All block starts, ascending.
    pub fn block_starts(&self) -> impl Iterator<Item = Addr> + '_ {
        self.location.keys().copied()
    }

    /// The function start owning `block`.
    pub fn owner_start(&self, block: Addr) -> Option<Addr> {
        self.location.get(&block).map(|&(f, _)| f)
    }

    /// The block itself, resolved against the program the graph was built
    /// from.
    pub fn block<'p>(&self, p: &'p Program, block: Addr) -> Option<&'p BasicBlock> {
        let &(fstart, idx) = self.location.get(&block)?;
        p.function_starting_at(fstart)?.blocks.get(idx)
    }

    /// The function owning `block`, resolved against the program.
    pub fn owner<'p>(&self, p: &'p Program, block: Addr) -> Option<&'p Function> {
        let &(fstart, _) = self.location.get(&block)?;
        p.function_starting_at(fstart)
    }
}

fn add_edge(map: &mut BTreeMap<Addr, Vec<Addr>>, from: Addr, to: Addr) {
    let v = map.entry(from).or_default();
    if !v.contains(&to) {
        v.push(to);
    }
}

/// Build the control-flow graph. The program is assumed to have passed
/// [`Program::validate`]; graph construction additionally resolves every
/// jump and direct-call target.
pub fn build_dcfg(p: &Program) -> Result<Dcfg, CfgError> {
    let mut location = BTreeMap::new();
    for f in &p.functions {
        for (i, b) in f.blocks.iter().enumerate() {
            location.insert(b.start, (f.start, i));
        }
    }
    let mut succs: BTreeMap<Addr, Vec<Addr>> = BTreeMap::new();
    let mut intra_succs: BTreeMap<Addr, Vec<Addr>> = BTreeMap::new();
    for &b in location.keys() {
        succs.insert(b, Vec::new());
        intra_succs.insert(b, Vec::new());
    }

    for f in &p.functions {
        let own_starts: BTreeSet<Addr> = f.blocks.iter().map(|b| b.start).collect();
        for (i, b) in f.blocks.iter().enumerate() {
            let next = f.blocks.get(i + 1).map(|nb| nb.start);
            let last = match b.instructions.last() {
                Some(l) => l,
                None => continue,
            };
            let imm_target = || match last.operands.first() {
                Some(Operand::Immediate(t)) => *t,
                // Validation guarantees jumps and calls carry immediates.
                _ => 0,
            };
            match b.terminator() {
                Terminator::Fallthrough => {
                    if let Some(n) = next {
                        add_edge(&mut succs, b.start, n);
                        add_edge(&mut intra_succs, b.start, n);
                    }
                }
                Terminator::Jump | Terminator::CondJump => {
                    let target = imm_target();
                    if !own_starts.contains(&target) {
                        return Err(CfgError::UnknownJumpTarget {
                            at: last.addr,
                            target,
                        });
                    }
                    add_edge(&mut succs, b.start, target);
                    add_edge(&mut intra_succs, b.start, target);
                    if b.terminator() == Terminator::CondJump {
                        if let Some(n) = next {
                            add_edge(&mut succs, b.start, n);
                            add_edge(&mut intra_succs, b.start, n);
                        }
                    }
                }
                Terminator::Call => {
                    let target = imm_target();
                    let callee = p.function_starting_at(target).ok_or(
                        CfgError::UnknownCallTarget {
                            at: last.addr,
                            target,
                        },
                    )?;
                    if let Some(entry) = callee.entry_block() {
                        add_edge(&mut succs, b.start, entry.start);
                    }
                    if let Some(n) = next {
                        // The callee's return blocks resume at our
                        // fall-through block.
                        for rb in &callee.blocks {
                            if rb.terminator() == Terminator::Ret {
                                add_edge(&mut succs, rb.start, n);
                            }
                        }
                        add_edge(&mut intra_succs, b.start, n);
                    }
                }
                Terminator::Icall => {
                    if let Some(n) = next {
                        add_edge(&mut succs, b.start, n);
                        add_edge(&mut intra_succs, b.start, n);
                    }
                }
                Terminator::Ret => {}
            }
        }
    }

    for v in succs.values_mut() {
        v.sort_unstable();
    }
    for v in intra_succs.values_mut() {
        v.sort_unstable();
    }
    let invert = |m: &BTreeMap<Addr, Vec<Addr>>| {
        let mut out: BTreeMap<Addr, Vec<Addr>> = BTreeMap::new();
        for &b in m.keys() {
            out.insert(b, Vec::new());
        }
        for (&from, tos) in m {
            for &to in tos {
                out.entry(to).or_default().push(from);
            }
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    };
    let preds = invert(&succs);
    let intra_preds = invert(&intra_succs);
    Ok(Dcfg {
        succs,
        preds,
        intra_succs,
        intra_preds,
        location,
    })
}

/// Forward closure over inter-procedural edges from `entry` (a block start).
/// An address that is not a block start yields the empty set.
pub fn reachable(d: &Dcfg, entry: Addr) -> BTreeSet<Addr> {
    let mut seen = BTreeSet::new();
    if !d.contains(entry) {
        return seen;
    }
    seen.insert(entry);
    let mut work = vec![entry];
    while let Some(b) = work.pop() {
        for &s in d.successors(b) {
            if seen.insert(s) {
                work.push(s);
            }
        }
    }
    seen
}

/// Function starts whose address escapes into data: stored in a memory
/// slot, or appearing as an immediate operand of a non-control-transfer
/// instruction. Immediates consumed by calls and jumps are plain transfer
/// targets, not escaping addresses.
pub fn address_taken(p: &Program) -> BTreeSet<Addr> {
    let mut out = BTreeSet::new();
    for f in &p.functions {
        for i in f.instructions() {
            if i.mnemonic.is_control_transfer() {
                continue;
            }
            for op in &i.operands {
                if let Operand::Immediate(v) = op {
                    if p.is_function_start(*v) {
                        out.insert(*v);
                    }
                }
            }
        }
    }
    for s in p.memory.slots() {
        if p.is_function_start(s.value) {
            out.insert(s.value);
        }
    }
    out
}

/// All indirect callsites in the program, ascending by address.
pub fn indirect_callsites(p: &Program) -> Vec<Callsite> {
    let mut out = Vec::new();
    for f in &p.functions {
        for b in &f.blocks {
            if b.terminator() != Terminator::Icall {
                continue;
            }
            if let Some(last) = b.instructions.last() {
                out.push(Callsite {
                    id: last.addr,
                    function: f.start,
                    block: b.start,
                    operand: last.operands.first().cloned().unwrap_or(Operand::Immediate(0)),
                });
            }
        }
    }
    out
}

/// Conservative candidate sets: address-taken functions intersected with
/// reachable ones, assigned to every reachable indirect callsite.
///
/// Reachability is a fixpoint, not a single closure: functions that are
/// never called directly but whose address escapes into reachable code or
/// into memory only become live once some reachable indirect call exists to
/// potentially dispatch to them — and their bodies can in turn reference
/// further functions. Unreachable callsites get empty candidate sets.
pub fn l1_candidates(p: &Program, d: &Dcfg) -> CandidateMap {
    let mut r = match p.function_starting_at(p.entry) {
        Some(f) => reachable(d, f.entry_block().map_or(p.entry, |b| b.start)),
        None => BTreeSet::new(),
    };

    loop {
        let has_icall = r.iter().any(|&b| {
            d.block(p, b)
                .is_some_and(|blk| blk.terminator() == Terminator::Icall)
        });
        if !has_icall {
            break;
        }
        let mut live: BTreeSet<Addr> = BTreeSet::new();
        for s in p.memory.slots() {
            if p.is_function_start(s.value) {
                live.insert(s.value);
            }
        }
        for &b in &r {
            let blk = match d.block(p, b) {
                Some(blk) => blk,
                None => continue,
            };
            for i in &blk.instructions {
                if i.mnemonic.is_control_transfer() {
                    continue;
                }
                for op in &i.operands {
                    if let Operand::Immediate(v) = op {
                        if p.is_function_start(*v) {
                            live.insert(*v);
                        }
                    }
                }
            }
        }
        let added: Vec<Addr> = live
            .iter()
            .filter_map(|&fstart| {
                let entry = p.function_starting_at(fstart)?.entry_block()?.start;
                (!r.contains(&entry)).then_some(entry)
            })
            .collect();
        if added.is_empty() {
            break;
        }
        for a in added {
            r.insert(a);
            let mut work = vec![a];
            while let Some(b) = work.pop() {
                for &s in d.successors(b) {
                    if r.insert(s) {
                        work.push(s);
                    }
                }
            }
        }
    }

    let at = address_taken(p);
    let pool: BTreeSet<Addr> = at
        .into_iter()
        .filter(|&fstart| {
            p.function_starting_at(fstart)
                .and_then(Function::entry_block)
                .is_some_and(|b| r.contains(&b.start))
        })
        .collect();

    let mut out = CandidateMap::new();
    for cs in indirect_callsites(p) {
        let candidates = if r.contains(&cs.block) {
            pool.clone()
        } else {
            BTreeSet::new()
        };
        out.insert(cs.id, candidates);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;
    use crate::model::{
        BasicBlock, Instruction, MemoryImage, Mnemonic, Operand, Program, Reg,
    };

    const LISTING: &str = include_str!("../tests/fixtures/const_dispatch.masm");
    const FIG2: &str = include_str!("../tests/fixtures/table_dispatch.masm");

    fn listing() -> Program {
        let p = parse_program(LISTING).unwrap();
        assert_eq!(p.validate(), vec![]);
        p
    }

    fn table_dispatch() -> Program {
        let p = parse_program(FIG2).unwrap();
        assert_eq!(p.validate(), vec![]);
        p
    }

    #[test]
    fn listing_edges_cover_calls_returns_and_branches() {
        let p = listing();
        let d = build_dcfg(&p).unwrap();
        // Branch header: conditional jump target plus fall-through.
        assert_eq!(d.successors(0x80491be), &[0x80491ea, 0x8049240]);
        // Indirect call falls through only.
        assert_eq!(d.successors(0x80491ea), &[0x8049218]);
        // Direct calls edge into the callee entry...
        assert_eq!(d.successors(0x8049218), &[0x8049070]);
        assert_eq!(d.successors(0x8049196), &[0x8049070]);
        // ...and the callee's return block resumes at every caller's
        // fall-through block.
        assert_eq!(
            d.successors(0x8049070),
            &[0x80491a6, 0x804922a, 0x8049236]
        );
        assert_eq!(d.successors(0x80491a6), &[] as &[Addr]);
        assert_eq!(d.successors(0x8049236), &[0x8049240]);
        assert_eq!(d.successors(0x8049240), &[] as &[Addr]);
        // Predecessors are the exact inverse.
        assert_eq!(
            d.predecessors(0x8049070),
            &[0x8049196, 0x8049218, 0x804922a]
        );
        assert_eq!(d.predecessors(0x8049240), &[0x80491be, 0x8049236]);
        // The intra-function view: calls fall through, returns stop.
        assert_eq!(d.intra_successors(0x8049218), &[0x804922a]);
        assert_eq!(d.intra_successors(0x8049196), &[0x80491a6]);
        assert_eq!(d.intra_successors(0x8049070), &[] as &[Addr]);
        assert_eq!(d.intra_predecessors(0x804922a), &[0x8049218]);
        // Ownership metadata.
        assert_eq!(d.owner_start(0x8049240), Some(0x80491be));
        assert_eq!(d.owner(&p, 0x80491a6).unwrap().start, 0x8049196);
        assert_eq!(d.block(&p, 0x8049236).unwrap().last_addr(), 0x8049236);
    }

    #[test]
    fn plain_closure_is_context_insensitive_but_entry_blocks_are_not_polluted() {
        let p = listing();
        let d = build_dcfg(&p).unwrap();
        let r = reachable(&d, 0x80491be);
        for b in [0x80491be, 0x80491ea, 0x8049218, 0x804922a, 0x8049236, 0x8049240, 0x8049070] {
            assert!(r.contains(&b), "missing 0x{b:x}");
        }
        // The shared return block of printf leaks into target_func's second
        // block (a return edge exists for every caller of printf)...
        assert!(r.contains(&0x80491a6));
        // ...but target_func's entry block has no incoming edge, so the
        // function itself is not considered reached by the plain closure.
        assert!(!r.contains(&0x8049196));
    }

    #[test]
    fn listing_candidates_are_the_stored_pointer_target() {
        let p = listing();
        let d = build_dcfg(&p).unwrap();
        assert_eq!(address_taken(&p), BTreeSet::from([0x8049196]));
        let cands = l1_candidates(&p, &d);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[&0x8049213], BTreeSet::from([0x8049196]));
        let sites = indirect_callsites(&p);
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].id, 0x8049213);
        assert_eq!(sites[0].function, 0x80491be);
        assert_eq!(sites[0].block, 0x80491ea);
        assert_eq!(sites[0].operand, Operand::StackSlot(-0x1c));
    }

    #[test]
    fn table_dispatch_candidates_include_slot_chain_and_immediate_load() {
        let p = table_dispatch();
        let d = build_dcfg(&p).unwrap();
        // fp1 escapes via an immediate load, fp7 and fp9 via memory slots.
        assert_eq!(
            address_taken(&p),
            BTreeSet::from([0x8049200, 0x8049210, 0x8049220])
        );
        let cands = l1_candidates(&p, &d);
        assert_eq!(
            cands[&0x8049108],
            BTreeSet::from([0x8049200, 0x8049210, 0x8049220])
        );
        // f1 is never called and never referenced: not reachable.
        let f = p.function_starting_at(p.entry).unwrap();
        let r = reachable(&d, f.start);
        assert!(!r.contains(&0x8049120));
        // The fixpoint pulls in the pointer bodies themselves.
        assert!(cands[&0x8049108].iter().all(|&t| {
            l1_candidates(&p, &d)[&0x8049108].contains(&t)
        }));
    }

    #[test]
    fn unreachable_icall_gets_empty_candidates() {
        let text = "\
.func main 0x100
0x100: ret
.func orphan 0x200
0x200: mov $helper, [fp-0x8]
0x204: icall [fp-0x8]
0x208: ret
.func helper 0x300
0x300: ret
";
        let p = parse_program(text).unwrap();
        assert_eq!(p.validate(), vec![]);
        let d = build_dcfg(&p).unwrap();
        let cands = l1_candidates(&p, &d);
        assert_eq!(cands.len(), 1);
        assert!(cands[&0x204].is_empty());
        // The address escapes, but no reachable dispatch exists to use it.
        assert_eq!(address_taken(&p), BTreeSet::from([0x300]));
    }

    #[test]
    fn without_reachable_icalls_escaped_functions_stay_unreachable() {
        let text = "\
.func main 0x100
0x100: mov $helper, [fp-0x4]
0x104: ret
.func helper 0x200
0x200: ret
";
        let p = parse_program(text).unwrap();
        let d = build_dcfg(&p).unwrap();
        assert!(l1_candidates(&p, &d).is_empty());
        let r = reachable(&d, 0x100);
        assert!(!r.contains(&0x200));
    }

    #[test]
    fn fixpoint_follows_references_out_of_newly_live_functions() {
        // main's icall makes `first` live; only first's body references
        // `second`, which must become a candidate through the second round.
        let text = "\
.func main 0x100
0x100: mov $first, [fp-0x4]
0x104: icall [fp-0x4]
0x108: ret
.func first 0x200
0x200: mov $second, [fp-0x4]
0x204: ret
.func second 0x300
0x300: ret
";
        let p = parse_program(text).unwrap();
        let d = build_dcfg(&p).unwrap();
        let cands = l1_candidates(&p, &d);
        assert_eq!(cands[&0x104], BTreeSet::from([0x200, 0x300]));
    }

    #[test]
    fn jump_targets_must_be_block_starts_in_the_same_function() {
        let text = "\
.func main 0x100
0x100: jmp $0x104
0x104: ret
.func other 0x200
0x200: je $0x104
0x204: ret
";
        let p = parse_program(text).unwrap();
        let err = build_dcfg(&p).unwrap_err();
        assert_eq!(
            err,
            CfgError::UnknownJumpTarget {
                at: 0x200,
                target: 0x104
            }
        );

        let text = ".func main 0x100\n0x100: jmp $0x999\n";
        let p = parse_program(text).unwrap();
        let err = build_dcfg(&p).unwrap_err();
        assert_eq!(
            err,
            CfgError::UnknownJumpTarget {
                at: 0x100,
                target: 0x999
            }
        );
    }

    #[test]
    fn call_targets_must_be_function_starts() {
        // The parser only emits named calls, so build the bad program by
        // hand.
        let f = Function::new(
            Some("main".into()),
            0x100,
            vec![BasicBlock::new(
                0x100,
                vec![Instruction::new(
                    0x100,
                    Mnemonic::Call,
                    vec![Operand::Immediate(0xdead)],
                )],
            )],
        );
        let p = Program::new(vec![f], MemoryImage { sections: vec![] }, 0x100);
        let err = build_dcfg(&p).unwrap_err();
        assert_eq!(
            err,
            CfgError::UnknownCallTarget {
                at: 0x100,
                target: 0xdead
            }
        );
    }

    #[test]
    fn trailing_calls_without_fallthrough_produce_no_return_edges() {
        let text = "\
.func main 0x100
0x100: call leaf
.func leaf 0x200
0x200: ret
";
        let p = parse_program(text).unwrap();
        let d = build_dcfg(&p).unwrap();
        assert_eq!(d.successors(0x100), &[0x200]);
        assert_eq!(d.successors(0x200), &[] as &[Addr]);
        assert_eq!(d.intra_successors(0x100), &[] as &[Addr]);
    }

    #[test]
    fn register_indirect_and_register_icall_operands_are_recorded() {
        let text = "\
.func main 0x100
0x100: mov $main, r1
.block 0x104
0x104: icall r1
0x108: icall [r1]
";
        let p = parse_program(text).unwrap();
        let sites = indirect_callsites(&p);
        assert_eq!(sites.len(), 2);
        assert_eq!(sites[0].operand, Operand::Register(Reg::R1));
        assert_eq!(sites[1].operand, Operand::Indirect(Reg::R1));
    }

    #[test]
    fn predecessors_invert_successors_on_random_branchy_programs() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n_blocks = rng.gen_range(2..10usize);
            let mut text = String::from(".func main 0x1000\n");
            let block_addr = |i: usize| 0x1000 + 0x10 * i as u64;
            for i in 0..n_blocks {
                let a = block_addr(i);
                if i != 0 {
                    text.push_str(&format!(".block 0x{a:x}\n"));
                }
                match rng.gen_range(0..4) {
                    0 => text.push_str(&format!(
                        "0x{a:x}: jmp $0x{:x}\n",
                        block_addr(rng.gen_range(0..n_blocks))
                    )),
                    1 => text.push_str(&format!(
                        "0x{a:x}: je $0x{:x}\n",
                        block_addr(rng.gen_range(0..n_blocks))
                    )),
                    2 => text.push_str(&format!("0x{a:x}: ret\n")),
                    _ => text.push_str(&format!("0x{a:x}: add $0x1, r0\n")),
                }
            }
            let p = parse_program(&text).unwrap();
            assert_eq!(p.validate(), vec![]);
            let d = build_dcfg(&p).unwrap();

            // preds is exactly the inverse relation of succs.
            let mut pairs_fwd = BTreeSet::new();
            let mut pairs_bwd = BTreeSet::new();
            for b in d.block_starts() {
                for &s in d.successors(b) {
                    pairs_fwd.insert((b, s));
                }
                for &q in d.predecessors(b) {
                    pairs_bwd.insert((q, b));
                }
            }
            assert_eq!(pairs_fwd, pairs_bwd);

            // The closure equals the fixpoint of one-step expansion.
            let r = reachable(&d, 0x1000);
            let mut expand = BTreeSet::from([0x1000]);
            loop {
                let next: BTreeSet<Addr> = expand
                    .iter()
                    .flat_map(|&b| d.successors(b).iter().copied())
                    .chain(expand.iter().copied())
                    .collect();
                if next == expand {
                    break;
                }
                expand = next;
            }
            assert_eq!(r, expand);
        }
    }
}
