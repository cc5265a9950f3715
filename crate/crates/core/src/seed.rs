//! Seed streams. Every per-episode or per-sample seed is derived from the run
//! seed with splitmix64 so workers can be scheduled in any order.

/// One splitmix64 output for state `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)`.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

/// Named streams, so unrelated consumers never share seeds.
pub mod stream {
    pub const TRAIN_EPISODE: u64 = 1;
    pub const EVAL_EPISODE: u64 = 2;
    pub const ROI_DISABLE: u64 = 3;
    pub const DETECTOR: u64 = 4;
    pub const INIT: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const POINTS: u64 = 7;
    pub const EXPERT_NOISE: u64 = 8;
    pub const TASK: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        // First outputs of the reference splitmix64 generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_differ() {
        assert_ne!(derive(1, stream::TRAIN_EPISODE, 0), derive(1, stream::EVAL_EPISODE, 0));
        assert_ne!(derive(1, 1, 0), derive(1, 1, 1));
        assert_eq!(derive(7, 3, 9), derive(7, 3, 9));
    }
}
