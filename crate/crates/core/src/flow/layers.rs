//! Invertible layers on the differentiation tape.
//!
//! Every forward function returns the transformed tensor and its
//! log-Jacobian-determinant as a `[1]` node, so the log-likelihood stays
//! differentiable in both the layer inputs and the generated weights.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{nn_coupling, BoundCn};
use crate::error::{Error, Result};

/// Per-channel affine weights `u = s ⊙ v + b`, each a `[1, c]` node.
#[derive(Clone, Copy, Debug)]
pub struct ActnormWeights {
    pub scale: Var,
    pub bias: Var,
}

/// `c × c` matrix applied to every spatial position.
#[derive(Clone, Copy, Debug)]
pub struct ConvWeights {
    pub weight: Var,
}

/// Scale (strictly positive) and shift for the transformed coupling half.
#[derive(Clone, Copy, Debug)]
pub struct CouplingOutput {
    pub scale: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Squeeze,
    Actnorm,
    InvConv,
    Coupling,
    Split,
}

/// One entry of the per-layer log-determinant diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub level: usize,
    pub step: Option<usize>,
    pub kind: LayerKind,
    pub logdet: f64,
}

fn hwc(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(v) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape {
            op,
            detail: format!("expected [h, w, c], got {s:?}"),
        }),
    }
}

fn check_positive(tape: &Tape, s: Var, what: &str) -> Result<()> {
    if tape.value(s).data().iter().all(|&v| v > 0.0) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what}: scale must be strictly positive")))
    }
}

pub fn actnorm_forward(tape: &mut Tape, v: Var, w: &ActnormWeights) -> Result<(Var, Var)> {
    let (h, wd, _) = hwc(tape, v, "actnorm")?;
    check_positive(tape, w.scale, "actnorm")?;
    let scaled = tape.mul(v, w.scale)?;
    let u = tape.add(scaled, w.bias)?;
    let log_s = tape.log(w.scale)?;
    let sum = tape.sum(log_s);
    let logdet = tape.scale(sum, (h * wd) as f64);
    Ok((u, logdet))
}

pub fn actnorm_inverse(tape: &mut Tape, u: Var, w: &ActnormWeights) -> Result<Var> {
    hwc(tape, u, "actnorm")?;
    check_positive(tape, w.scale, "actnorm")?;
    let shifted = tape.sub(u, w.bias)?;
    tape.div(shifted, w.scale)
}

pub fn invconv_forward(tape: &mut Tape, v: Var, w: &ConvWeights) -> Result<(Var, Var)> {
    let (h, wd, c) = hwc(tape, v, "invconv")?;
    let (lad, _sign) = tape.log_abs_det(w.weight)?;
    let flat = tape.reshape(v, &[h * wd, c])?;
    let wt = tape.transpose(w.weight)?;
    let prod = tape.matmul(flat, wt)?;
    let u = tape.reshape(prod, &[h, wd, c])?;
    let logdet = tape.scale(lad, (h * wd) as f64);
    Ok((u, logdet))
}

pub fn invconv_inverse(tape: &mut Tape, u: Var, w: &ConvWeights) -> Result<Var> {
    let (h, wd, c) = hwc(tape, u, "invconv")?;
    let inv = tape.inverse(w.weight)?;
    let flat = tape.reshape(u, &[h * wd, c])?;
    let inv_t = tape.transpose(inv)?;
    let prod = tape.matmul(flat, inv_t)?;
    tape.reshape(prod, &[h, wd, c])
}

fn halves(tape: &mut Tape, v: Var, op: &'static str) -> Result<(Var, Var)> {
    let (_, _, c) = hwc(tape, v, op)?;
    if c % 2 != 0 {
        return Err(Error::Shape {
            op,
            detail: format!("odd channel count {c}"),
        });
    }
    let a = tape.slice_channels(v, 0, c / 2)?;
    let b = tape.slice_channels(v, c / 2, c)?;
    Ok((a, b))
}

/// `u = concat(v1, s2 ⊙ v2 + b2)` with `(s2, b2) = NN(v1, x_r)`.
pub fn coupling_forward(tape: &mut Tape, v: Var, x_r: Var, nn: &BoundCn) -> Result<(Var, Var)> {
    let (v1, v2) = halves(tape, v, "coupling")?;
    let CouplingOutput { scale, bias } = nn_coupling(tape, v1, x_r, nn)?;
    let scaled = tape.mul(scale, v2)?;
    let u2 = tape.add(scaled, bias)?;
    let u = tape.concat_channels(&[v1, u2])?;
    let log_s = tape.log(scale)?;
    let logdet = tape.sum(log_s);
    Ok((u, logdet))
}

pub fn coupling_inverse(tape: &mut Tape, u: Var, x_r: Var, nn: &BoundCn) -> Result<Var> {
    let (u1, u2) = halves(tape, u, "coupling")?;
    let CouplingOutput { scale, bias } = nn_coupling(tape, u1, x_r, nn)?;
    let shifted = tape.sub(u2, bias)?;
    let v2 = tape.div(shifted, scale)?;
    tape.concat_channels(&[u1, v2])
}

/// Source offsets for squeezing an `h×w×c` tensor.
///
/// Output element `(i, j, ch·4 + dy·2 + dx)` takes input `(2i+dy, 2j+dx, ch)`:
/// channel-major within each 2×2 block, so a single-channel block
/// `[[a, b], [c, d]]` becomes `[a, b, c, d]`.
pub fn squeeze_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let (oh, ow, oc) = (h / 2, w / 2, 4 * c);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..oh {
        for j in 0..ow {
            for k in 0..oc {
                let (ch, pos) = (k / 4, k % 4);
                let (dy, dx) = (pos / 2, pos % 2);
                idx.push(((2 * i + dy) * w + (2 * j + dx)) * c + ch);
            }
        }
    }
    idx
}

fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &src) in p.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

pub fn squeeze(tape: &mut Tape, v: Var) -> Result<Var> {
    let (h, w, c) = hwc(tape, v, "squeeze")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape {
            op: "squeeze",
            detail: format!("odd spatial size {h}x{w}"),
        });
    }
    let idx: Rc<[usize]> = squeeze_index(h, w, c).into();
    tape.gather(v, idx, &[h / 2, w / 2, 4 * c])
}

pub fn unsqueeze(tape: &mut Tape, v: Var) -> Result<Var> {
    let (h, w, c) = hwc(tape, v, "unsqueeze")?;
    if c % 4 != 0 {
        return Err(Error::Shape {
            op: "unsqueeze",
            detail: format!("channel count {c} not divisible by 4"),
        });
    }
    let (oh, ow, oc) = (2 * h, 2 * w, c / 4);
    let idx: Rc<[usize]> = invert_permutation(&squeeze_index(oh, ow, oc)).into();
    tape.gather(v, idx, &[oh, ow, oc])
}

/// Keep the first channel half, emit the second as a latent part.
pub fn split_forward(tape: &mut Tape, v: Var) -> Result<(Var, Var)> {
    halves(tape, v, "split")
}

pub fn split_inverse(tape: &mut Tape, kept: Var, z: Var) -> Result<Var> {
    tape.concat_channels(&[kept, z])
}

/// `Σ log N(z_i; 0, 1)` as a `[1]` node.
pub fn standard_normal_logpdf(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.value(z).len() as f64;
    let sq = tape.mul(z, z)?;
    let ss = tape.sum(sq);
    let half = tape.scale(ss, -0.5);
    Ok(tape.offset(half, -0.5 * n * (2.0 * PI).ln()))
}
