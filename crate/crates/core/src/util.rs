//! Small numeric helpers shared across modules.

use rand::Rng;

/// Round half away from zero: 127.5 → 128, -0.5 → -1.
///
/// This is the single rounding rule used everywhere a real value is
/// quantized to a grayscale level (camera model and PGM export alike), so
/// outputs do not depend on the platform's default rounding mode.
pub fn round_half_away_from_zero(v: f64) -> f64 {
    // f64::round already rounds half away from zero; the wrapper exists to
    // give the rule a name and one definition.
    v.round()
}

/// Quantize a real value to a u8 grayscale level with clamping.
pub(crate) fn quantize_u8(v: f64) -> u8 {
    round_half_away_from_zero(v).clamp(0.0, 255.0) as u8
}

/// Derive a child stream seed from a master seed and two indices.
///
/// SplitMix64 finalizer applied to a mixed word. Pixel streams must be
/// independent of generation order, so every (depth, pixel) pair gets its
/// own seed instead of drawing from one shared generator.
pub fn derive_stream_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(a.wrapping_add(1)))
        .wrapping_add(0x85eb_ca6b_ed1a_56d3u64.wrapping_mul(b.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One standard normal draw (Box–Muller, first coordinate).
///
/// Hand-rolled so the byte stream of every seeded artifact depends only on
/// this crate and the pinned RNG, not on a distribution crate's internals.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > 0.0 {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
