//! Binary PGM (P5) / PPM (P6) export.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encode `[h, w, 1]` or `[h, w, 3]`, mapping `[lo, hi]` linearly onto
/// 0–255 with clamping.
pub fn encode_pnm(t: &Tensor, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::shape("pnm", format!("expected [h,w,c], got {:?}", t.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape("pnm", format!("{c} channels (need 1 or 3)"))),
    };
    if !(hi > lo) {
        return Err(Error::Invalid(format!("pnm range [{lo}, {hi}] is empty")));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(
        t.data()
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn write_pnm(path: impl AsRef<Path>, t: &Tensor, lo: f64, hi: f64) -> Result<()> {
    fs::write(path, encode_pnm(t, lo, hi)?)?;
    Ok(())
}
