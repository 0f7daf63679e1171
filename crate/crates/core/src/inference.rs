//! Conditional sampling and structured prediction from a frozen model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, Preprocess};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    SampleMean,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientInit {
    Zeros,
    /// A single temperature-1 sample.
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionConfig {
    pub mode: PredictMode,
    pub m: usize,
    pub temperature: f64,
    pub steps: usize,
    pub step_size: f64,
    pub init: GradientInit,
    pub discretize: bool,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            mode: PredictMode::SampleMean,
            m: 10,
            temperature: 1.0,
            steps: 1000,
            step_size: 0.1,
            init: GradientInit::Zeros,
            discretize: true,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Invalid("M must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.steps == 0 || !(self.step_size > 0.0) {
            return Err(Error::Invalid("gradient steps and step size must be positive".into()));
        }
        Ok(())
    }
}

/// A prediction in the flow's continuous space.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y: Tensor,
    /// Per-coordinate sample variance (sample-mean mode only).
    pub variance: Option<Tensor>,
    pub log_likelihood: f64,
}

/// One conditional draw in raw output units: latents `N(0, T²)` pushed
/// through the inverse flow, then un-normalized.
pub fn sample<R: Rng>(model: &FlowModel, x: &Tensor, rng: &mut R, temperature: f64) -> Result<Tensor> {
    let flow = model.conditioned(x)?;
    let zs = flow.sample_latents(rng, temperature);
    let y = flow.inverse(&zs)?;
    Ok(model.config().preprocess.unnormalize(&y))
}

/// Average of `m` conditional samples in continuous space, with the
/// per-coordinate sample variance.
pub fn predict_sample_mean<R: Rng>(model: &FlowModel, x: &Tensor, m: usize, rng: &mut R, temperature: f64) -> Result<Prediction> {
    if m == 0 {
        return Err(Error::Invalid("M must be >= 1".into()));
    }
    let flow = model.conditioned(x)?;
    let shape = model.config().y_shape;
    let mut sum = Tensor::zeros(&shape);
    let mut sum_sq = Tensor::zeros(&shape);
    for _ in 0..m {
        let y = flow.inverse(&flow.sample_latents(rng, temperature))?;
        for ((s, q), v) in sum.data_mut().iter_mut().zip(sum_sq.data_mut()).zip(y.data()) {
            *s += v;
            *q += v * v;
        }
    }
    let n = m as f64;
    let mean = sum.map(|s| s / n);
    let variance = if m > 1 {
        sum_sq.zip_map(&mean, |q, mu| ((q - n * mu * mu) / (n - 1.0)).max(0.0))?
    } else {
        Tensor::zeros(&shape)
    };
    let log_likelihood = flow.log_likelihood(&mean)?;
    Ok(Prediction {
        y: mean,
        variance: Some(variance),
        log_likelihood,
    })
}

/// Gradient ascent on `log p(y|x)` over continuous `y`. A step that does
/// not increase the likelihood is rejected and the step size halved.
pub fn predict_gradient<R: Rng>(
    model: &FlowModel,
    x: &Tensor,
    steps: usize,
    step_size: f64,
    init: GradientInit,
    rng: &mut R,
) -> Result<Prediction> {
    let flow = model.conditioned(x)?;
    let y0 = match init {
        GradientInit::Zeros => Tensor::zeros(&model.config().y_shape),
        GradientInit::Sample => flow.inverse(&flow.sample_latents(rng, 1.0))?,
    };
    predict_gradient_from(model, x, y0, steps, step_size)
}

/// [`predict_gradient`] from an explicit starting point.
pub fn predict_gradient_from(model: &FlowModel, x: &Tensor, y0: Tensor, steps: usize, step_size: f64) -> Result<Prediction> {
    if steps == 0 {
        return Err(Error::Invalid("gradient steps must be >= 1".into()));
    }
    let flow = model.conditioned(x)?;
    let mut y = y0;
    let (mut ll, mut g) = flow.log_likelihood_grad(&y)?;
    let mut eta = step_size;
    for _ in 0..steps {
        let trial = y.zip_map(&g, |a, b| a + eta * b)?;
        if !trial.all_finite() {
            return Err(Error::NonFinite {
                context: "gradient prediction iterate".into(),
            });
        }
        match flow.log_likelihood_grad(&trial) {
            Ok((l, gt)) if l >= ll => {
                y = trial;
                ll = l;
                g = gt;
            }
            _ => eta *= 0.5,
        }
    }
    Ok(Prediction {
        y,
        variance: None,
        log_likelihood: ll,
    })
}

/// How continuous predictions become final outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// A binary mask tiled over all channels.
    Binary,
    /// One channel per class; argmax wins.
    MultiClass,
    Continuous,
}

/// Round a continuous-space prediction to valid outputs, staying in
/// continuous space (so the map is idempotent).
///
/// Binary: un-normalize, average the tiled channels, class 1 iff the mean
/// is `>= 0.5` (ties go up). Multi-class: one-hot of the per-pixel argmax
/// (first index on ties). Continuous: identity.
pub fn discretize(y: &Tensor, pre: &Preprocess, kind: OutputKind) -> Result<Tensor> {
    let c = y.channels();
    match kind {
        OutputKind::Continuous => Ok(y.clone()),
        OutputKind::Binary => {
            let mask = binary_mask(y, pre)?;
            let raw = Tensor::from_fn(y.shape(), |i| mask.data()[i / c]);
            Ok(pre.normalize(&raw))
        }
        OutputKind::MultiClass => {
            let raw = pre.unnormalize(y);
            let mut onehot = Tensor::zeros(y.shape());
            for (px, out) in raw.data().chunks(c).zip(onehot.data_mut().chunks_mut(c)) {
                let best = (0..c).fold(0, |b, k| if px[k] > px[b] { k } else { b });
                out[best] = 1.0;
            }
            Ok(pre.normalize(&onehot))
        }
    }
}

/// `[h, w, 1]` class map of a tiled binary prediction in continuous space.
pub fn binary_mask(y: &Tensor, pre: &Preprocess) -> Result<Tensor> {
    let &[h, w, c] = y.shape() else {
        return Err(Error::shape("binary_mask", format!("expected [h,w,c], got {:?}", y.shape())));
    };
    let raw = pre.unnormalize(y);
    let data = raw
        .data()
        .chunks(c)
        .map(|px| {
            let mean = px.iter().sum::<f64>() / c as f64;
            if mean >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![h, w, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn model(seed: u64, perturb: bool) -> FlowModel {
        let cfg = ModelConfig {
            levels: 1,
            steps: 1,
            x_shape: [2, 2, 1],
            y_shape: [2, 2, 1],
            n_c: 2,
            n_w: 4,
            hidden: 4,
            preprocess: Preprocess::Affine {
                shift: 1.0,
                scale: 2.0,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FlowModel::new(cfg, &mut rng).unwrap();
        if perturb {
            m.perturb(&mut rng, 0.3);
        }
        m
    }

    fn x() -> Tensor {
        Tensor::new(vec![2, 2, 1], vec![0.1, -0.3, 0.4, 0.2]).unwrap()
    }

    /// Saturate every coupling scale at 1 so the flow is the identity.
    fn identity(m: &mut FlowModel) {
        let last = m.step_nets_mut(0, 0).coupling.layers.last_mut().unwrap();
        last.bias = Tensor::new(vec![1, 4], vec![800.0, 800.0, 0.0, 0.0]).unwrap();
    }

    #[test]
    fn zero_temperature_is_deterministic() {
        let m = model(1, true);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = sample(&m, &x(), &mut r1, 0.0).unwrap();
        let b = sample(&m, &x(), &mut r2, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_model_samples_are_rescaled_normals() {
        let mut m = model(2, false);
        identity(&mut m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let y = sample(&m, &x(), &mut rng, 1.0).unwrap();
                // undo the affine map: (t − 1)/2 is standard normal
                (y.data()[0] - 1.0) / 2.0
            })
            .collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = normal.cdf(v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // p > 0.01 for the one-sample KS test at n = 10⁴
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn samples_have_finite_likelihood() {
        let m = model(4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pre = m.config().preprocess;
        for _ in 0..100 {
            let y = sample(&m, &x(), &mut rng, 1.0).unwrap();
            assert!(m.log_likelihood(&x(), &pre.normalize(&y)).unwrap().is_finite());
        }
    }

    #[test]
    fn sample_likelihoods_agree_across_batches() {
        let m = model(11, true);
        let flow = m.conditioned(&x()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut batch = || -> (f64, f64) {
            let lls: Vec<f64> = (0..2000)
                .map(|_| flow.log_likelihood(&flow.inverse(&flow.sample_latents(&mut rng, 1.0)).unwrap()).unwrap())
                .collect();
            let n = lls.len() as f64;
            let mean = lls.iter().sum::<f64>() / n;
            let var = lls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        };
        let (a, se_a) = batch();
        let (b, se_b) = batch();
        assert!((a - b).abs() < 3.0 * se_a.hypot(se_b), "{a} vs {b}");
    }

    #[test]
    fn sample_mean_ignores_draw_order() {
        let m = model(13, true);
        let flow = m.conditioned(&x()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let draws: Vec<Tensor> = (0..16)
            .map(|_| flow.inverse(&flow.sample_latents(&mut rng, 1.0)).unwrap())
            .collect();
        let mean = |ys: &mut dyn Iterator<Item = &Tensor>| {
            let mut s = Tensor::zeros(&[2, 2, 1]);
            for y in ys {
                s = s.zip_map(y, |a, b| a + b).unwrap();
            }
            s.map(|v| v / 16.0)
        };
        let forward = mean(&mut draws.iter());
        let reversed = mean(&mut draws.iter().rev());
        assert!(forward.max_abs_diff(&reversed) < 1e-12);
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let p = predict_sample_mean(&m, &x(), 16, &mut r, 1.0).unwrap();
        assert!(p.y.max_abs_diff(&forward) < 1e-12);
    }

    #[test]
    fn single_sample_mean_is_a_sample() {
        let m = model(5, true);
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let p = predict_sample_mean(&m, &x(), 1, &mut r1, 1.0).unwrap();
        let s = sample(&m, &x(), &mut r2, 1.0).unwrap();
        assert!(m.config().preprocess.unnormalize(&p.y).max_abs_diff(&s) < 1e-12);
        assert_eq!(p.variance.unwrap(), Tensor::zeros(&[2, 2, 1]));
        assert!(predict_sample_mean(&m, &x(), 0, &mut r1, 1.0).is_err());
    }

    #[test]
    fn affine_pushforward_mean_converges() {
        // identity flow with actnorm bias b: g(z) = z − b, so E[y] = −b
        let mut m = model(7, false);
        identity(&mut m);
        let b = [0.3, -0.2, 0.1, 0.05];
        let last = m.step_nets_mut(0, 0).actnorm.layers.last_mut().unwrap();
        for (k, &v) in b.iter().enumerate() {
            last.bias.data_mut()[4 + k] = v;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let p = predict_sample_mean(&m, &x(), n, &mut rng, 1.0).unwrap();
        // squeeze maps the 2×2×1 pixels to channels in raster order
        for (k, &bk) in b.iter().enumerate() {
            assert!((p.y.data()[k] + bk).abs() < 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn gradient_ascent_never_decreases_likelihood() {
        let m = model(9, true);
        let flow = m.conditioned(&x()).unwrap();
        let y0 = Tensor::new(vec![2, 2, 1], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let start = flow.log_likelihood(&y0).unwrap();
        let mut last = start;
        for steps in [1, 5, 20, 80] {
            let p = predict_gradient_from(&m, &x(), y0.clone(), steps, 0.5).unwrap();
            assert!(p.log_likelihood >= last);
            last = p.log_likelihood;
        }
        assert!(last > start);
    }

    #[test]
    fn gradient_ascent_stays_at_a_maximum() {
        // identity flow: the mode in continuous space is y = 0
        let mut m = model(10, false);
        identity(&mut m);
        let before = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = predict_gradient(&m, &x(), 10, 0.1, GradientInit::Zeros, &mut rng).unwrap();
        assert!(p.y.max_abs_diff(&Tensor::zeros(&[2, 2, 1])) < 1e-12);
        predict_sample_mean(&m, &x(), 3, &mut rng, 1.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn binary_discretization_rules() {
        let pre = Preprocess::Dequantize { bins: 2 };
        let raw = Tensor::new(vec![1, 2, 3], vec![0.9, 0.8, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let y = pre.normalize(&raw);
        let mask = binary_mask(&y, &pre).unwrap();
        assert_eq!(mask.data(), &[1.0, 1.0]);
        let low = pre.normalize(&Tensor::new(vec![1, 1, 3], vec![0.4, 0.5, 0.5]).unwrap());
        assert_eq!(binary_mask(&low, &pre).unwrap().data(), &[0.0]);
        let d = discretize(&y, &pre, OutputKind::Binary).unwrap();
        assert_eq!(discretize(&d, &pre, OutputKind::Binary).unwrap(), d);
        assert_eq!(pre.unnormalize(&d).data(), &[1.0; 6]);
    }

    #[test]
    fn multiclass_and_continuous_discretization() {
        let pre = Preprocess::Dequantize { bins: 2 };
        let y = pre.normalize(&Tensor::new(vec![1, 2, 3], vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.9]).unwrap());
        let d = discretize(&y, &pre, OutputKind::MultiClass).unwrap();
        assert_eq!(pre.unnormalize(&d).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(discretize(&d, &pre, OutputKind::MultiClass).unwrap(), d);
        assert_eq!(discretize(&y, &pre, OutputKind::Continuous).unwrap(), y);
    }
}
