//! Seed derivation for reproducible sweeps.
//!
//! Sweep cells must be reproducible individually, without running the whole
//! sweep, so the derivation below is part of the external contract and its
//! constants are frozen.

/// One step of the splitmix64 generator.
///
/// Constants are the standard ones from Steele, Lea and Flood's splitmix64;
/// they are part of the output contract and must not change.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a label into a seed stream.
pub fn mix(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ label.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Seed for one sweep cell: master seed, grid indices and replicate index.
///
/// `cell_seed(master, p_idx, k_idx, rep)` feeds each index through one
/// splitmix64 round, so neighboring cells get unrelated streams.
pub fn cell_seed(master: u64, p_idx: usize, k_idx: usize, rep: usize) -> u64 {
    let s = splitmix64(master);
    let s = mix(s, (p_idx as u64).wrapping_add(1));
    let s = mix(s, (k_idx as u64).wrapping_add(1));
    mix(s, (rep as u64).wrapping_add(1))
}
