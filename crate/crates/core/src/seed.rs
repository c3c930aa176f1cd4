/// Mixes a master seed with a path of stream labels into an independent seed.
///
/// SplitMix64 finalizer applied per label, so `derive_seed(s, &[a, b])` and
/// `derive_seed(s, &[b, a])` differ.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    let mut state = mix(master ^ 0x5353_4c43_4852_4f4e);
    for &label in labels {
        state = mix(state ^ mix(label.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    state
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
