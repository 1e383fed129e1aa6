use crate::error::{Error, Result};

pub const SEED_RANGE: u32 = 1000;

/// Reproducible Bernoulli draw: the seed selects the midpoint of one of
/// 1000 equal cells of [0, 1].
pub fn draw_action(pi: f64, seed: u32) -> Result<u8> {
    if seed >= SEED_RANGE {
        return Err(Error::rejected(format!("seed must be in [0, 999], got {seed}")));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::rejected(format!("probability must be in [0, 1], got {pi}")));
    }
    let u = (f64::from(seed) + 0.5) / f64::from(SEED_RANGE);
    Ok(u8::from(u < pi))
}
