/// Identifies one stream of dropout masks: the run seed, the optimizer step
/// and a caller-chosen stream (e.g. the sample index within a batch).
///
/// Masks are a pure function of `(seed, step, stream, site, element)`, so a
/// forward pass is reproducible regardless of how samples are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub stream: u64,
}

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` for one counter value.
pub fn counter_uniform(key: DropoutKey, site: u64, counter: u64) -> f64 {
    let k = splitmix64(splitmix64(splitmix64(key.seed) ^ key.step) ^ key.stream.rotate_left(32) ^ site);
    let bits = splitmix64(k ^ splitmix64(counter));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

pub(crate) fn keep_mask(key: DropoutKey, site: u64, len: usize, p: f64) -> Vec<bool> {
    (0..len as u64).map(|i| counter_uniform(key, site, i) >= p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_reproducible_and_keyed() {
        let key = DropoutKey { seed: 7, step: 3, stream: 1 };
        assert_eq!(keep_mask(key, 0, 64, 0.5), keep_mask(key, 0, 64, 0.5));
        assert_ne!(keep_mask(key, 0, 64, 0.5), keep_mask(key, 1, 64, 0.5));
        let other = DropoutKey { step: 4, ..key };
        assert_ne!(keep_mask(key, 0, 64, 0.5), keep_mask(other, 0, 64, 0.5));
    }

    #[test]
    fn drop_rate_is_close_to_p() {
        let key = DropoutKey { seed: 1, step: 0, stream: 0 };
        let kept = keep_mask(key, 0, 20_000, 0.1).into_iter().filter(|&k| k).count();
        let rate = 1.0 - kept as f64 / 20_000.0;
        assert!((rate - 0.1).abs() < 0.01, "rate {rate}");
    }
}
