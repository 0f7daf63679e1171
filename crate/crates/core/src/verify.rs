//! Numerical invariant checks on small models: round trip, exact Jacobian,
//! parameter gradients, normalization and the dequantization bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::{ConditionedFlow, FlowModel, ModelConfig, Preprocess};
use crate::inference::sample;
use crate::linalg::slogdet_lu;
use crate::tensor::Tensor;
use crate::autodiff::Tape;
use crate::training::{nll_and_grads, nll_loss};

/// Finite-difference step used throughout.
pub const FD_EPS: f64 = 1e-6;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], half_width: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-half_width..half_width))
}

/// Tiny model with every network's last layer randomized by `perturb`.
pub fn random_model<R: Rng>(config: ModelConfig, perturb: f64, rng: &mut R) -> Result<FlowModel> {
    let mut m = FlowModel::new(config, rng)?;
    m.perturb(rng, perturb);
    Ok(m)
}

/// Refill every tensor: weights `U(±gain/√fan_in)`, biases `U(±gain/2)`.
/// `gains` is (actnorm and 1×1 generators, feature and coupling nets).
pub fn randomize_all<R: Rng>(model: &mut FlowModel, gains: (f64, f64), rng: &mut R) {
    for (name, t) in model.named_params_mut() {
        let g = if name.contains(".features.") || name.contains(".coupling.") {
            gains.1
        } else {
            gains.0
        };
        let fan_in = (t.len() / t.shape().last().copied().unwrap_or(1).max(1)).max(1) as f64;
        let bound = if name.ends_with(".weight") { g / fan_in.sqrt() } else { g / 2.0 };
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    }
}

pub fn tiny_config(levels: usize, steps: usize, y_shape: [usize; 3], preprocess: Preprocess) -> ModelConfig {
    ModelConfig {
        levels,
        steps,
        x_shape: [y_shape[0], y_shape[1], 1],
        y_shape,
        n_c: 2,
        n_w: 4,
        hidden: 4,
        preprocess,
    }
}

/// `max |inverse(forward(y)) − y|`.
pub fn round_trip_error(model: &FlowModel, x: &Tensor, y: &Tensor) -> Result<f64> {
    let flow = model.conditioned(x)?;
    let (zs, _, _) = flow.forward(y)?;
    Ok(flow.inverse(&zs)?.max_abs_diff(y))
}

/// Central-difference Jacobian of the flattened latent stack.
pub fn numeric_jacobian(flow: &ConditionedFlow<'_>, y: &Tensor) -> Result<Tensor> {
    let n = y.len();
    let mut jac = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut p = y.clone();
        p.data_mut()[j] += FD_EPS;
        let mut m = y.clone();
        m.data_mut()[j] -= FD_EPS;
        let fp = flow.forward(&p)?.0.flatten();
        let fm = flow.forward(&m)?.0.flatten();
        for i in 0..n {
            jac.set(&[i, j], (fp[i] - fm[i]) / (2.0 * FD_EPS));
        }
    }
    Ok(jac)
}

/// `|total logdet − slogdet(numeric J)| / max(1, |slogdet|)`.
pub fn jacobian_logdet_error(model: &FlowModel, x: &Tensor, y: &Tensor) -> Result<f64> {
    let flow = model.conditioned(x)?;
    let (_, logdet, _) = flow.forward(y)?;
    let (_, oracle) = slogdet_lu(&numeric_jacobian(&flow, y)?)?;
    Ok((logdet - oracle).abs() / oracle.abs().max(1.0))
}

/// Gradient agreement for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `‖g − g_fd‖²`
    pub diff_sq: f64,
    pub analytic_sq: f64,
    pub numeric_sq: f64,
}

impl GradCheck {
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`, zero when both vanish.
    pub fn rel(&self) -> f64 {
        let denom = self.analytic_sq.max(self.numeric_sq).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            self.diff_sq.sqrt() / denom
        }
    }

    /// The network a tensor belongs to: `level{l}.step{k}.{net}`.
    pub fn group(&self) -> &str {
        let mut dots = self.name.match_indices('.').map(|(i, _)| i);
        match dots.nth(2) {
            Some(i) => &self.name[..i],
            None => &self.name,
        }
    }
}

fn nll_value(model: &FlowModel, batch: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let loss = nll_loss(&mut tape, model, &bound, batch)?;
    Ok(tape.value(loss).item())
}

/// Backpropagated batch-NLL gradient against central differences, per
/// parameter tensor.
pub fn gradient_checks(model: &FlowModel, batch: &[(Tensor, Tensor)]) -> Result<Vec<GradCheck>> {
    let (_, grads) = nll_and_grads(model, batch)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let mut fd = vec![0.0; grads[k].len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = probe.named_params()[k].1.data()[j];
            let mut eval = |v: f64| -> Result<f64> {
                probe.named_params_mut()[k].1.data_mut()[j] = v;
                nll_value(&probe, batch)
            };
            let hi = eval(orig + FD_EPS)?;
            let lo = eval(orig - FD_EPS)?;
            eval(orig)?;
            *slot = (hi - lo) / (2.0 * FD_EPS);
        }
        let ga = grads[k].data();
        out.push(GradCheck {
            name,
            diff_sq: ga.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum(),
            analytic_sq: ga.iter().map(|a| a * a).sum(),
            numeric_sq: fd.iter().map(|a| a * a).sum(),
        });
    }
    Ok(out)
}

/// Merge per-tensor checks into one per network.
pub fn group_checks(checks: &[GradCheck]) -> Vec<GradCheck> {
    let mut out: Vec<GradCheck> = Vec::new();
    for c in checks {
        match out.iter_mut().find(|g| g.name == c.group()) {
            Some(g) => {
                g.diff_sq += c.diff_sq;
                g.analytic_sq += c.analytic_sq;
                g.numeric_sq += c.numeric_sq;
            }
            None => out.push(GradCheck {
                name: c.group().to_string(),
                ..c.clone()
            }),
        }
    }
    out
}

/// Midpoint-rule integral of `exp(f)` over the box `[lo, hi]` with `n`
/// points per axis.
pub fn box_quadrature(lo: &[f64], hi: &[f64], n: usize, mut log_f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let d = lo.len();
    let h: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| (b - a) / n as f64).collect();
    let cell: f64 = h.iter().product();
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    let mut total = 0.0;
    loop {
        for k in 0..d {
            point[k] = lo[k] + (idx[k] as f64 + 0.5) * h[k];
        }
        total += log_f(&point)?.exp() * cell;
        let mut k = 0;
        loop {
            if k == d {
                return Ok(total);
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

pub struct NormalizationCheck {
    pub integral: f64,
    /// Fraction of fresh samples inside the integration box.
    pub coverage: f64,
}

/// Integrate `p(y|x)` in raw output units over a box fitted to model
/// samples.
pub fn normalization<R: Rng>(model: &FlowModel, x: &Tensor, n_per_axis: usize, n_samples: usize, rng: &mut R) -> Result<NormalizationCheck> {
    let d = model.config().y_dim();
    let pre = model.config().preprocess;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for _ in 0..n_samples {
        let s = sample(model, x, rng, 1.0)?;
        for (k, &v) in s.data().iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    for k in 0..d {
        let pad = 0.25 * (hi[k] - lo[k]);
        lo[k] -= pad;
        hi[k] += pad;
    }
    let mut inside = 0usize;
    for _ in 0..n_samples {
        let s = sample(model, x, rng, 1.0)?;
        inside += s.data().iter().enumerate().all(|(k, &v)| v >= lo[k] && v <= hi[k]) as usize;
    }
    let flow = model.conditioned(x)?;
    let shape = model.config().y_shape;
    let integral = box_quadrature(&lo, &hi, n_per_axis, |p| {
        let raw = Tensor::new(shape.to_vec(), p.to_vec())?;
        flow.log_likelihood(&pre.normalize(&raw))
    })?;
    Ok(NormalizationCheck {
        integral,
        coverage: inside as f64 / n_samples as f64,
    })
}

pub struct BoundCheck {
    /// `log ∫ p(y+u|x) du` by quadrature over the unit cell.
    pub log_q: f64,
    /// Monte-Carlo mean of `log p(y+u|x)`.
    pub mc_mean: f64,
    pub mc_stderr: f64,
}

impl BoundCheck {
    /// `log q − (E[log p] − 3·SE)`; non-negative when the bound holds.
    pub fn margin(&self) -> f64 {
        self.log_q - (self.mc_mean - 3.0 * self.mc_stderr)
    }
}

/// Jensen bound for one discrete `y` (values in `0..bins`): the raw
/// density is integrated over `y + [-½, ½)^d`.
pub fn dequantization_bound<R: Rng>(
    model: &FlowModel,
    x: &Tensor,
    y: &Tensor,
    n_per_axis: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<BoundCheck> {
    let pre = model.config().preprocess;
    let flow = model.conditioned(x)?;
    let shape = y.shape().to_vec();
    let eval = |u: &[f64]| -> Result<f64> {
        let raw = Tensor::new(shape.clone(), y.data().iter().zip(u).map(|(a, b)| a + b).collect())?;
        flow.log_likelihood(&pre.normalize(&raw))
    };
    let lo = vec![-0.5; y.len()];
    let hi = vec![0.5; y.len()];
    let q = box_quadrature(&lo, &hi, n_per_axis, eval)?;
    let samples: Vec<f64> = (0..n_mc)
        .map(|_| {
            let u: Vec<f64> = (0..y.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            eval(&u)
        })
        .collect::<Result<_>>()?;
    let n = n_mc as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BoundCheck {
        log_q: q.ln(),
        mc_mean: mean,
        mc_stderr: (var / n).sqrt(),
    })
}

/// One row of the verification table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    /// `value` must be below (`true`) or above the threshold.
    pub below: bool,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        if self.below {
            self.value < self.threshold
        } else {
            self.value >= self.threshold
        }
    }
}

/// Quick suite on tiny models, a few seconds in total.
pub fn run_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let mut worst = 0.0f64;
    for (levels, steps, shape) in [(1, 2, [4, 4, 2]), (2, 1, [8, 8, 1]), (3, 1, [8, 8, 4])] {
        let m = random_model(tiny_config(levels, steps, shape, Preprocess::IDENTITY), 0.3, &mut rng)?;
        let x = random_tensor(&mut rng, &[shape[0], shape[1], 1], 0.5);
        let y = random_tensor(&mut rng, &shape, 1.0);
        worst = worst.max(round_trip_error(&m, &x, &y)?);
    }
    rows.push(CheckRow {
        name: "round trip max |error|",
        value: worst,
        threshold: 1e-8,
        below: true,
    });

    let m = random_model(tiny_config(1, 1, [4, 4, 2], Preprocess::IDENTITY), 0.3, &mut rng)?;
    let x = random_tensor(&mut rng, &[4, 4, 1], 0.5);
    let y = random_tensor(&mut rng, &[4, 4, 2], 1.0);
    rows.push(CheckRow {
        name: "logdet vs numeric Jacobian (rel)",
        value: jacobian_logdet_error(&m, &x, &y)?,
        threshold: 1e-5,
        below: true,
    });

    let mut m = FlowModel::new(tiny_config(1, 1, [2, 2, 1], Preprocess::IDENTITY), &mut rng)?;
    randomize_all(&mut m, (1.0, 3.0), &mut rng);
    let batch = vec![(random_tensor(&mut rng, &[2, 2, 1], 1.0), random_tensor(&mut rng, &[2, 2, 1], 1.0))];
    let worst = group_checks(&gradient_checks(&m, &batch)?)
        .iter()
        .map(GradCheck::rel)
        .fold(0.0, f64::max);
    rows.push(CheckRow {
        name: "parameter gradient vs FD (rel)",
        value: worst,
        threshold: 1e-6,
        below: true,
    });

    let m = random_model(tiny_config(1, 1, [2, 2, 1], Preprocess::IDENTITY), 0.3, &mut rng)?;
    let x = random_tensor(&mut rng, &[2, 2, 1], 0.5);
    let norm = normalization(&m, &x, 24, 4000, &mut rng)?;
    rows.push(CheckRow {
        name: "density integral |1 - I|",
        value: (1.0 - norm.integral).abs(),
        threshold: 0.05,
        below: true,
    });

    let m = random_model(tiny_config(1, 1, [2, 2, 1], Preprocess::Dequantize { bins: 2 }), 0.3, &mut rng)?;
    let x = random_tensor(&mut rng, &[2, 2, 1], 0.5);
    let mut margin = f64::INFINITY;
    for code in [0usize, 6, 15] {
        let y = Tensor::from_fn(&[2, 2, 1], |k| ((code >> k) & 1) as f64);
        margin = margin.min(dequantization_bound(&m, &x, &y, 8, 400, &mut rng)?.margin());
    }
    rows.push(CheckRow {
        name: "dequantization bound margin",
        value: margin,
        threshold: 0.0,
        below: false,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn quadrature_of_a_gaussian() {
        let i = box_quadrature(&[-8.0, -8.0], &[8.0, 8.0], 200, |p| {
            Ok(-0.5 * (p[0] * p[0] + p[1] * p[1]) - (2.0 * PI).ln())
        })
        .unwrap();
        assert!((i - 1.0).abs() < 1e-6);
        let c = box_quadrature(&[0.0; 3], &[2.0, 1.0, 0.5], 3, |_| Ok(0.0)).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_jacobian_of_identity_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = FlowModel::new(tiny_config(1, 1, [2, 2, 1], Preprocess::IDENTITY), &mut rng).unwrap();
        let last = m.step_nets_mut(0, 0).coupling.layers.last_mut().unwrap();
        last.bias = Tensor::new(vec![1, 4], vec![800.0, 800.0, 0.0, 0.0]).unwrap();
        let x = Tensor::zeros(&[2, 2, 1]);
        let flow = m.conditioned(&x).unwrap();
        let j = numeric_jacobian(&flow, &Tensor::zeros(&[2, 2, 1])).unwrap();
        assert!(j.max_abs_diff(&Tensor::eye(4)) < 1e-9);
    }

    #[test]
    fn quick_suite_passes() {
        for row in run_suite(1).unwrap() {
            assert!(row.pass(), "{} = {:e}", row.name, row.value);
        }
    }
}
