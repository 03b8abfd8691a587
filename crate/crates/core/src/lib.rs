//! Deterministic verifiable-reward engine for structured cyber-threat-intelligence
//! outputs, plus a policy-agnostic self-training loop that can be driven at desk
//! scale with a toy softmax policy.
//!
//! The crate is organized around the data flow of an RLVR trainer:
//!
//! - [`task`]: task instances, gold labels, alias tables, identifier catalogs
//! - [`extract`]: pulling a structured answer span out of a raw completion
//! - [`cvss`]: CVSS v3.1 base-vector parsing and scoring
//! - [`reward`]: the five reward families, each returning a scalar in `[0, 1]`
//! - [`filter`]: heuristic + ML acceptance pipeline for distillation traces
//! - [`policy`]: finite-answer-space softmax policy with GRPO/SFT updates
//! - [`training`]: the full rollout → buffer → distill loop and its metrics
//! - [`theory`]: detectability-threshold calculators and run estimators

pub mod cvss;
pub mod extract;
pub mod filter;
pub mod policy;
pub mod reward;
pub mod task;
pub mod theory;
pub mod training;

/// Stable 64-bit mixer used to derive per-site RNG seeds from a run seed.
///
/// Sampling sites are keyed by `(seed, step, site, uid-hash)` so that the
/// sequence drawn at one site never depends on how many draws another site
/// consumed. `std`'s default hasher is not stable across releases, so the
/// mixing is spelled out here.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// FNV-1a hash of a string, for stable uid-keyed seed derivation and
/// feature hashing.
pub fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
