//! Quantized KV-cache handoff toolkit.
//!
//! An agent that has already prefilled a transformer-style KV cache can hand
//! that cache to a collaborating agent instead of forcing the receiver to
//! re-prefill the shared context from scratch. This crate implements the
//! full desk-scale pipeline around that idea:
//!
//! - [`tensorio`] — the full-precision cache container (`QKVT` file format)
//!   plus deterministic synthetic cache/attention generation;
//! - [`quantizer`] — group-wise asymmetric quantization at 2/4/8 bits with a
//!   16-bit lossless pass-through and bit-exact code packing;
//! - [`importance`] — per-token local importance, downstream demand from
//!   segment priors and an anchor pool, and the combined score `S(t)`;
//! - [`allocator`] — budgeted per-token bit-width assignment (greedy, exact
//!   dynamic programming, and a small trained controller);
//! - [`cachecard`] — the self-contained `QKVC` handoff artifact with CRC-32
//!   integrity and compression statistics;
//! - [`handoff`] — a deterministic toy-attention model, receiver-side
//!   injection, multi-hop chain simulation, and the context-density
//!   calculator;
//! - [`transport`] — length-prefixed, integrity-checked framing of cache
//!   cards over any reliable byte stream, with a compatibility handshake;
//! - [`bench`] — stage-timing and error-propagation sweeps behind the CLI,
//!   with stable JSON/CSV report schemas;
//! - [`config`] — the flat `key=value` configuration file shared by the CLI
//!   subcommands.
//!
//! All randomness flows through the [`rng`] module's explicitly specified
//! generator, so every artifact in this crate (synthetic caches, cards,
//! fixtures) is bit-identical across runs and platforms. `FORMAT.md` at the
//! repository root is the normative description of every on-disk and
//! on-wire byte layout produced here.

pub mod allocator;
pub mod bench;
pub mod cachecard;
pub mod config;
pub mod handoff;
pub mod importance;
pub mod quantizer;
pub mod rng;
pub mod tensorio;
pub mod transport;
