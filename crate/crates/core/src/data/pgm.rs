//! 8-bit binary PGM export for heatmaps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Encodes an `h x w` map as binary P5, min-max scaled to `[0, 255]` with
/// round-half-up. Constant maps become mid-gray (128).
pub fn encode_pgm<T: Scalar>(map: &[T], h: usize, w: usize) -> Result<Vec<u8>> {
    if map.len() != h * w || map.is_empty() {
        return Err(Error::Shape(format!("map of {} values is not {h}x{w}", map.len())));
    }
    if !map.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("cannot export a non-finite map".into()));
    }
    let lo = map.iter().copied().fold(T::infinity(), T::min).to_f64_lossy();
    let hi = map.iter().copied().fold(T::neg_infinity(), T::max).to_f64_lossy();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        out.extend(map.iter().map(|v| {
            let s = (v.to_f64_lossy() - lo) * scale;
            (s + 0.5).floor().clamp(0.0, 255.0) as u8
        }));
    } else {
        out.extend(std::iter::repeat_n(128u8, map.len()));
    }
    Ok(out)
}

pub fn write_pgm<T: Scalar>(map: &[T], h: usize, w: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pgm(map, h, w)?;
    fs::write(path, bytes)?;
    Ok(())
}
