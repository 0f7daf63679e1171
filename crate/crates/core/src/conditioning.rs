//! Conditioning networks: maps from the input `x` to the weights of every
//! conditional layer, plus the coupling network itself.
//!
//! All networks are plain stacks of convolution or fully connected layers
//! with ReLU between layers and none after the last. The last layer of each
//! stack starts at zero, so a fresh model begins at the identity for actnorm
//! and the 1×1 convolution and at a fixed contraction for the coupling.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::layers::{ActnormWeights, ConvWeights, CouplingOutput};
use crate::tensor::{ConvGeometry, Tensor};

/// Channel count of the coupling feature network output.
pub const FEATURE_CHANNELS: usize = 16;

/// Constant added to the raw coupling scale before the logistic, so that a
/// zero output gives `s2 = sigmoid(2) ≈ 0.881`.
pub const COUPLING_SCALE_SHIFT: f64 = 2.0;

/// Geometry of a convolution that maps spatial size `in_size` to `out_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DownscaleSpec {
    pub in_size: usize,
    pub out_size: usize,
    pub stride: usize,
    pub kernel: usize,
    pub padding: usize,
}

/// Stride `in/out`, kernel `2·padding + stride`.
pub fn downscale_spec(in_size: usize, out_size: usize, padding: usize) -> Result<DownscaleSpec> {
    if out_size == 0 || !in_size.is_multiple_of(out_size) {
        return Err(Error::Invalid(format!(
            "cannot downscale {in_size} to {out_size}: sizes must divide"
        )));
    }
    let stride = in_size / out_size;
    Ok(DownscaleSpec {
        in_size,
        out_size,
        stride,
        kernel: 2 * padding + stride,
        padding,
    })
}

/// Largest divisor of `n` that is at most `cap`.
pub fn reduced_size(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnLayerKind {
    Conv(ConvGeometry),
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnLayer {
    pub kind: CnLayerKind,
    /// `[kh, kw, cin, cout]` for convolutions, `[in, out]` for dense layers.
    pub weight: Tensor,
    pub bias: Tensor,
    pub relu: bool,
}

impl CnLayer {
    fn fan_in(&self) -> usize {
        let s = self.weight.shape();
        s[..s.len() - 1].iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnParams {
    pub layers: Vec<CnLayer>,
}

/// Handles of a bound network on a tape.
#[derive(Clone, Debug)]
pub struct BoundCn {
    layers: Vec<(CnLayerKind, Var, Var, bool)>,
}

struct StackBuilder<'r, R: Rng> {
    layers: Vec<CnLayer>,
    rng: &'r mut R,
}

impl<'r, R: Rng> StackBuilder<'r, R> {
    fn new(rng: &'r mut R) -> Self {
        Self {
            layers: Vec::new(),
            rng,
        }
    }

    /// Uniform fan-in (He) scaling for interior layers.
    fn init_weight(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    fn conv(mut self, kh: usize, kw: usize, cin: usize, cout: usize, g: ConvGeometry) -> Self {
        let weight = self.init_weight(&[kh, kw, cin, cout], kh * kw * cin);
        self.layers.push(CnLayer {
            kind: CnLayerKind::Conv(g),
            weight,
            bias: Tensor::zeros(&[1, cout]),
            relu: true,
        });
        self
    }

    fn dense(mut self, n_in: usize, n_out: usize) -> Self {
        let weight = self.init_weight(&[n_in, n_out], n_in);
        self.layers.push(CnLayer {
            kind: CnLayerKind::Dense,
            weight,
            bias: Tensor::zeros(&[1, n_out]),
            relu: true,
        });
        self
    }

    /// Zero the last layer and drop its activation.
    fn finish(mut self) -> CnParams {
        let last = self.layers.last_mut().expect("non-empty stack");
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias = Tensor::zeros(last.bias.shape());
        last.relu = false;
        CnParams {
            layers: self.layers,
        }
    }
}

fn downscale_geometry(
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Result<(usize, usize, ConvGeometry)> {
    let sh = downscale_spec(h, th, 1)?;
    let sw = downscale_spec(w, tw, 1)?;
    Ok((
        sh.kernel,
        sw.kernel,
        ConvGeometry {
            stride: (sh.stride, sw.stride),
            padding: (sh.padding, sw.padding),
        },
    ))
}

const SAME_3X3: ConvGeometry = ConvGeometry {
    stride: (1, 1),
    padding: (1, 1),
};

impl CnParams {
    /// Six-layer weight generator: three convolutions bring `x` (`[h,w,cx]`)
    /// down to at most 4×4 spatial, then three dense layers emit `out_width`
    /// values. The first convolution carries the whole downscale.
    pub fn weight_generator<R: Rng>(
        x_shape: [usize; 3],
        n_c: usize,
        n_w: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [h, w, cx] = x_shape;
        let target = (reduced_size(h, 4), reduced_size(w, 4));
        let (kh, kw, g) = downscale_geometry((h, w), target)?;
        let flat = target.0 * target.1 * n_c;
        Ok(StackBuilder::new(rng)
            .conv(kh, kw, cx, n_c, g)
            .conv(3, 3, n_c, n_c, SAME_3X3)
            .conv(3, 3, n_c, n_c, SAME_3X3)
            .dense(flat, n_w)
            .dense(n_w, n_w)
            .dense(n_w, out_width)
            .finish())
    }

    /// Three-layer coupling feature extractor: 3×3 convolution, downscaling
    /// convolution to `target`, 3×3 convolution; all with `channels` outputs.
    pub fn feature_extractor<R: Rng>(
        x_shape: [usize; 3],
        target: (usize, usize),
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [h, w, cx] = x_shape;
        let (kh, kw, g) = downscale_geometry((h, w), target)?;
        Ok(StackBuilder::new(rng)
            .conv(3, 3, cx, channels, SAME_3X3)
            .conv(kh, kw, channels, channels, g)
            .conv(3, 3, channels, channels, SAME_3X3)
            .finish())
    }

    /// Coupling network: three 3×3 convolutions from `half + features`
    /// channels through `hidden` channels to `2·half` outputs.
    pub fn coupling<R: Rng>(half: usize, features: usize, hidden: usize, rng: &mut R) -> Self {
        StackBuilder::new(rng)
            .conv(3, 3, half + features, hidden, SAME_3X3)
            .conv(3, 3, hidden, hidden, SAME_3X3)
            .conv(3, 3, hidden, 2 * half, SAME_3X3)
            .finish()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors in canonical order: per layer, weight then bias.
    pub fn tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            [(format!("{i}.weight"), &l.weight), (format!("{i}.bias"), &l.bias)]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.layers.iter_mut().enumerate().flat_map(|(i, l)| {
            [
                (format!("{i}.weight"), &mut l.weight),
                (format!("{i}.bias"), &mut l.bias),
            ]
        })
    }

    /// Fill the last layer with `U(-scale, scale)/sqrt(fan_in)` weights and
    /// `U(-scale, scale)` biases.
    pub fn perturb_last<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        let last = self.layers.last_mut().expect("non-empty stack");
        if !(scale > 0.0) {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
            return;
        }
        let wb = scale / (last.fan_in() as f64).sqrt();
        last.weight
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-wb..wb));
        last.bias
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
    }

    /// Register every tensor on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundCn {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                };
                (l.kind, w, b, l.relu)
            })
            .collect();
        BoundCn { layers }
    }
}

impl BoundCn {
    /// Parameter handles in the same order as [`CnParams::tensors`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(_, w, b, _)| [w, b])
    }

    pub fn apply(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut h = input;
        for &(kind, w, b, relu) in &self.layers {
            h = match kind {
                CnLayerKind::Conv(g) => {
                    let c = tape.conv2d(h, w, g)?;
                    tape.add(c, b)?
                }
                CnLayerKind::Dense => {
                    let flat = if tape.shape(h).len() == 2 && tape.shape(h)[0] == 1 {
                        h
                    } else {
                        let n = tape.value(h).len();
                        tape.reshape(h, &[1, n])?
                    };
                    let m = tape.matmul(flat, w)?;
                    tape.add(m, b)?
                }
            };
            if relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

fn check_width(tape: &Tape, raw: Var, expected: usize, what: &str) -> Result<()> {
    let got = tape.value(raw).len();
    if got != expected {
        return Err(Error::shape(
            "conditioning",
            format!("{what} network emits {got} values, expected {expected}"),
        ));
    }
    Ok(())
}

/// `(ŝ, b) = CN(x)`, `s = exp(ŝ)`: always positive, identity at zero output.
pub fn cn_actnorm(tape: &mut Tape, x: Var, p: &BoundCn, c: usize) -> Result<ActnormWeights> {
    let raw = p.apply(tape, x)?;
    check_width(tape, raw, 2 * c, "actnorm")?;
    let raw = tape.reshape(raw, &[1, 2 * c])?;
    let log_scale = tape.slice_channels(raw, 0, c)?;
    let bias = tape.slice_channels(raw, c, 2 * c)?;
    let scale = tape.exp(log_scale);
    Ok(ActnormWeights { scale, bias })
}

/// `W = I + reshape(CN(x), c×c)`.
pub fn cn_conv(tape: &mut Tape, x: Var, p: &BoundCn, c: usize) -> Result<ConvWeights> {
    let raw = p.apply(tape, x)?;
    check_width(tape, raw, c * c, "1x1 convolution")?;
    let m = tape.reshape(raw, &[c, c])?;
    let eye = tape.constant(Tensor::eye(c));
    let weight = tape.add(m, eye)?;
    Ok(ConvWeights { weight })
}

/// Coupling features `x_r` at the spatial size `(target_h, target_w)`.
pub fn cn_coupling_features(
    tape: &mut Tape,
    x: Var,
    p: &BoundCn,
    target_h: usize,
    target_w: usize,
) -> Result<Var> {
    let x_r = p.apply(tape, x)?;
    let s = tape.shape(x_r);
    if s[0] != target_h || s[1] != target_w {
        return Err(Error::shape(
            "coupling features",
            format!("produced {s:?}, expected {target_h}x{target_w} spatial"),
        ));
    }
    Ok(x_r)
}

/// `(s2, b2) = NN(v1, x_r)` with `s2 = sigmoid(ŝ2 + 2) ∈ (0, 1)`.
pub fn nn_coupling(tape: &mut Tape, v1: Var, x_r: Var, p: &BoundCn) -> Result<CouplingOutput> {
    let (s1, s2) = (tape.shape(v1), tape.shape(x_r));
    if s1[..2] != s2[..2] {
        return Err(Error::shape(
            "coupling",
            format!("v1 {s1:?} and x_r {s2:?} differ spatially"),
        ));
    }
    let half = s1[2];
    let input = tape.concat_channels(&[v1, x_r])?;
    let raw = p.apply(tape, input)?;
    if tape.shape(raw)[2] != 2 * half {
        return Err(Error::shape(
            "coupling",
            format!("network emits {:?}, expected {} channels", tape.shape(raw), 2 * half),
        ));
    }
    let log_raw = tape.slice_channels(raw, 0, half)?;
    let bias = tape.slice_channels(raw, half, 2 * half)?;
    let shifted = tape.offset(log_raw, COUPLING_SCALE_SHIFT);
    let scale = tape.sigmoid(shifted);
    Ok(CouplingOutput { scale, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::layers::{coupling_forward, coupling_inverse};
    use crate::linalg::slogdet_lu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn downscale_rule_instances() {
        let s = downscale_spec(64, 16, 1).unwrap();
        assert_eq!((s.stride, s.kernel), (4, 6));
        assert_eq!((64 + 2 - 6) / 4 + 1, 16);
        let s = downscale_spec(8, 8, 1).unwrap();
        assert_eq!((s.stride, s.kernel), (1, 3));
        let s = downscale_spec(32, 4, 0).unwrap();
        assert_eq!((s.stride, s.kernel), (8, 8));
        assert!(downscale_spec(10, 4, 1).is_err());
    }

    #[test]
    fn downscale_geometry_hits_target_exactly() {
        for (h, t) in [(64, 4), (16, 8), (8, 8), (32, 2), (12, 3)] {
            let s = downscale_spec(h, t, 1).unwrap();
            let x = Tensor::ones(&[h, h, 1]);
            let k = Tensor::ones(&[s.kernel, s.kernel, 1, 1]);
            let out = crate::tensor::conv2d(&x, &k, ConvGeometry::new(s.stride, s.padding)).unwrap();
            assert_eq!(&out.shape()[..2], &[t, t]);
        }
    }

    #[test]
    fn zero_initialized_networks_give_identity_weights() {
        let mut r = rng();
        let x_shape = [8, 8, 1];
        let an = CnParams::weight_generator(x_shape, 4, 8, 2 * 3, &mut r).unwrap();
        let cv = CnParams::weight_generator(x_shape, 4, 8, 9, &mut r).unwrap();
        let ft = CnParams::feature_extractor(x_shape, (4, 4), FEATURE_CHANNELS, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut r, &[8, 8, 1]));
        let (ban, bcv, bft) = (an.bind(&mut tape, true), cv.bind(&mut tape, true), ft.bind(&mut tape, true));
        let aw = cn_actnorm(&mut tape, x, &ban, 3).unwrap();
        assert_eq!(tape.value(aw.scale), &Tensor::ones(&[1, 3]));
        assert_eq!(tape.value(aw.bias), &Tensor::zeros(&[1, 3]));
        let cw = cn_conv(&mut tape, x, &bcv, 3).unwrap();
        assert_eq!(tape.value(cw.weight), &Tensor::eye(3));
        let xr = cn_coupling_features(&mut tape, x, &bft, 4, 4).unwrap();
        assert_eq!(tape.value(xr), &Tensor::zeros(&[4, 4, FEATURE_CHANNELS]));
        // width mismatch
        assert!(cn_actnorm(&mut tape, x, &bcv, 3).is_err());
        assert!(cn_coupling_features(&mut tape, x, &bft, 2, 2).is_err());
    }

    #[test]
    fn scale_parameterizations() {
        let mut tape = Tape::new();
        let mut p = CnParams {
            layers: vec![CnLayer {
                kind: CnLayerKind::Dense,
                weight: Tensor::zeros(&[1, 4]),
                bias: Tensor::new(vec![1, 4], vec![2f64.ln(), 3f64.ln(), 0.5, -1.0]).unwrap(),
                relu: false,
            }],
        };
        let x = tape.constant(Tensor::ones(&[1, 1, 1]));
        let b = p.bind(&mut tape, false);
        let aw = cn_actnorm(&mut tape, x, &b, 2).unwrap();
        let s = tape.value(aw.scale).data();
        assert!((s[0] - 2.0).abs() < 1e-15 && (s[1] - 3.0).abs() < 1e-15);
        assert_eq!(tape.value(aw.bias).data(), &[0.5, -1.0]);

        p.layers[0].bias = Tensor::new(vec![1, 4], vec![1., 0., 0., 1.]).unwrap();
        let b = p.bind(&mut tape, false);
        let cw = cn_conv(&mut tape, x, &b, 2).unwrap();
        let w = tape.value(cw.weight);
        assert_eq!(w.data(), &[2., 0., 0., 2.]);
        let (_, lad) = slogdet_lu(w).unwrap();
        assert!((lad - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn small_perturbations_keep_w_nonsingular() {
        let mut r = rng();
        for _ in 0..100 {
            let c = r.random_range(2..7);
            let m = rand_tensor(&mut r, &[c, c]).map(|v| v * 0.49);
            let w = m.zip_map(&Tensor::eye(c), |a, b| a + b).unwrap();
            // Gershgorin: every disc excludes zero when the off-diagonal row
            // mass stays below the diagonal magnitude.
            let dominant = (0..c).all(|i| {
                let off: f64 = (0..c).filter(|&j| j != i).map(|j| w.at(&[i, j]).abs()).sum();
                w.at(&[i, i]).abs() > off
            });
            let (_, lad) = slogdet_lu(&w).unwrap();
            assert!(lad.is_finite());
            if c == 2 {
                assert!(dominant);
            }
        }
    }

    #[test]
    fn coupling_scale_bounds_and_zero_init() {
        let mut r = rng();
        let nn = CnParams::coupling(2, FEATURE_CHANNELS, 8, &mut r);
        let mut tape = Tape::new();
        let v1 = tape.constant(rand_tensor(&mut r, &[2, 2, 2]));
        let xr = tape.constant(rand_tensor(&mut r, &[2, 2, FEATURE_CHANNELS]));
        let b = nn.bind(&mut tape, false);
        let out = nn_coupling(&mut tape, v1, xr, &b).unwrap();
        let sig2 = 1.0 / (1.0 + (-2f64).exp());
        assert!(tape.value(out.scale).data().iter().all(|&s| s == sig2));
        assert!(tape.value(out.bias).data().iter().all(|&s| s == 0.0));

        let mut big = nn.clone();
        big.perturb_last(&mut r, 50.0);
        let b = big.bind(&mut tape, false);
        let out = nn_coupling(&mut tape, v1, xr, &b).unwrap();
        assert!(tape.value(out.scale).data().iter().all(|&s| s > 0.0 && s < 1.0));

        let bad = tape.constant(Tensor::ones(&[1, 1, FEATURE_CHANNELS]));
        assert!(nn_coupling(&mut tape, v1, bad, &b).is_err());
    }

    #[test]
    fn coupling_layer_contracts() {
        let mut r = rng();
        let mut nn = CnParams::coupling(1, FEATURE_CHANNELS, 6, &mut r);
        let input = rand_tensor(&mut r, &[2, 2, 2]);
        let features = rand_tensor(&mut r, &[2, 2, FEATURE_CHANNELS]);

        let fwd = |nn: &CnParams, v: &Tensor| {
            let mut tape = Tape::new();
            let vv = tape.constant(v.clone());
            let xr = tape.constant(features.clone());
            let b = nn.bind(&mut tape, false);
            let (u, ld) = coupling_forward(&mut tape, vv, xr, &b).unwrap();
            (tape.value(u).clone(), tape.value(ld).item())
        };
        let inv = |nn: &CnParams, u: &Tensor| {
            let mut tape = Tape::new();
            let uu = tape.constant(u.clone());
            let xr = tape.constant(features.clone());
            let b = nn.bind(&mut tape, false);
            let v = coupling_inverse(&mut tape, uu, xr, &b).unwrap();
            tape.value(v).clone()
        };

        // zero-init: logdet = (#v2 elements) · log sigmoid(2)
        let (_, ld) = fwd(&nn, &input);
        let expect = 4.0 * (1.0 / (1.0 + (-2f64).exp())).ln();
        assert!((ld - expect).abs() < 1e-14);

        // forced s2 = 1, b2 = 0 point is the identity
        let mut ident = nn.clone();
        let last = ident.layers.last_mut().unwrap();
        last.bias = Tensor::new(vec![1, 2], vec![1e3, 0.0]).unwrap();
        let (u, ld) = fwd(&ident, &input);
        assert_eq!(u, input);
        assert_eq!(ld, 0.0);

        nn.perturb_last(&mut r, 1.0);
        let (u, ld) = fwd(&nn, &input);
        assert_eq!(u.slice_channels(0, 1).unwrap(), input.slice_channels(0, 1).unwrap());
        assert!(inv(&nn, &u).max_abs_diff(&input) < 1e-10);
        assert_eq!(inv(&nn, &u).slice_channels(0, 1).unwrap(), u.slice_channels(0, 1).unwrap());

        // analytic logdet vs numeric Jacobian
        let n = input.len();
        let eps = 1e-6;
        let mut jac = Tensor::zeros(&[n, n]);
        for j in 0..n {
            let mut p = input.clone();
            p.data_mut()[j] += eps;
            let mut m = input.clone();
            m.data_mut()[j] -= eps;
            let (fp, fm) = (fwd(&nn, &p).0, fwd(&nn, &m).0);
            for i in 0..n {
                jac.set(&[i, j], (fp.data()[i] - fm.data()[i]) / (2.0 * eps));
            }
        }
        let (_, oracle) = slogdet_lu(&jac).unwrap();
        assert!((ld - oracle).abs() / oracle.abs().max(1.0) < 1e-6);

        let mut tape = Tape::new();
        let odd = tape.constant(Tensor::ones(&[2, 2, 3]));
        let xr = tape.constant(features.clone());
        let b = nn.bind(&mut tape, false);
        assert!(coupling_forward(&mut tape, odd, xr, &b).is_err());
    }
}
