//! Layered resolution of indirect-call targets over a compact abstract
//! program representation.
//!
//! The pipeline has three layers plus a reporting stage:
//!
//! 1. **Conservative candidates** ([`cfg`]): address-taken functions
//!    intersected with reachable code give a sound-by-construction
//!    candidate set per indirect callsite.
//! 2. **Learned scoring** ([`features`], [`scorer`]): argument and return
//!    descriptors recovered at each callsite and callee are encoded into a
//!    fixed-width vector and scored by a feed-forward network trained only
//!    on direct calls, where the ground-truth callee is known.
//! 3. **Backward refinement** ([`refine`]): bounded inter-procedural
//!    backward exploration from each callsite nudges scores up for targets
//!    it can concretely witness and down for the rest.
//!
//! The result is a confidence-annotated call graph ([`graph`]) that can be
//! pruned at a threshold chosen against dynamic traces ([`pipeline`]).

pub mod cfg;
pub mod features;
pub mod frontend;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod scorer;
