//! The multi-scale conditional flow and its exact log-likelihood.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{
    cn_actnorm, cn_conv, cn_coupling_features, BoundCn, CnParams, FEATURE_CHANNELS,
};
use crate::error::{Error, Result};
use crate::flow::layers::{
    actnorm_forward, actnorm_inverse, coupling_forward, coupling_inverse, invconv_forward,
    invconv_inverse, split_forward, split_inverse, squeeze, standard_normal_logpdf, unsqueeze,
    ActnormWeights, ConvWeights, LayerKind, LayerReport,
};
use crate::tensor::Tensor;

/// Map between raw outputs and the flow's working space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preprocess {
    /// Discrete values `0..bins`. A raw value `t = y + u` with
    /// `u ∈ [-0.5, 0.5)` maps to `(t + 0.5)/bins − 0.5`.
    Dequantize { bins: u32 },
    /// Continuous values: `(t − shift)/scale`.
    Affine { shift: f64, scale: f64 },
}

impl Preprocess {
    pub const IDENTITY: Preprocess = Preprocess::Affine {
        shift: 0.0,
        scale: 1.0,
    };

    fn affine(&self) -> (f64, f64) {
        match *self {
            Preprocess::Dequantize { bins } => (0.5 * bins as f64 - 0.5, bins as f64),
            Preprocess::Affine { shift, scale } => (shift, scale),
        }
    }

    /// `log|d y_cont / d t|` per coordinate.
    pub fn log_det_per_dim(&self) -> f64 {
        -self.affine().1.ln()
    }

    pub fn normalize(&self, raw: &Tensor) -> Tensor {
        let (shift, scale) = self.affine();
        raw.map(|t| (t - shift) / scale)
    }

    pub fn unnormalize(&self, y_cont: &Tensor) -> Tensor {
        let (shift, scale) = self.affine();
        y_cont.map(|y| y * scale + shift)
    }

    pub fn bins(&self) -> Option<u32> {
        match *self {
            Preprocess::Dequantize { bins } => Some(bins),
            Preprocess::Affine { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub steps: usize,
    /// `[h, w, c]` of the conditioning input.
    pub x_shape: [usize; 3],
    /// `[h, w, c]` of the output variable.
    pub y_shape: [usize; 3],
    /// Convolution channels of the actnorm / 1×1 weight generators.
    pub n_c: usize,
    /// Dense width of the actnorm / 1×1 weight generators.
    pub n_w: usize,
    /// Hidden channels of the coupling network.
    pub hidden: usize,
    pub preprocess: Preprocess,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.levels == 0 || self.steps == 0 {
            return bad(format!("levels ({}) and steps ({}) must be >= 1", self.levels, self.steps));
        }
        if self.n_c == 0 || self.n_w == 0 || self.hidden == 0 {
            return bad("network widths must be positive".into());
        }
        let [h, w, c] = self.y_shape;
        let f = 1 << self.levels;
        if c == 0 || h % f != 0 || w % f != 0 {
            return bad(format!(
                "output {h}x{w}x{c} not divisible by 2^{} for squeezing",
                self.levels
            ));
        }
        let [xh, xw, xc] = self.x_shape;
        if xc == 0 {
            return bad("input needs at least one channel".into());
        }
        for level in 0..self.levels {
            let [lh, lw, _] = self.level_shape(level);
            if xh % lh != 0 || xw % lw != 0 {
                return bad(format!(
                    "input {xh}x{xw} cannot be downscaled to level {level} size {lh}x{lw}"
                ));
            }
        }
        if let Preprocess::Dequantize { bins } = self.preprocess {
            if bins < 2 {
                return bad("dequantization needs at least 2 bins".into());
            }
        }
        Ok(())
    }

    /// Shape of the variable inside `level`, after its squeeze.
    pub fn level_shape(&self, level: usize) -> [usize; 3] {
        let [h, w, c] = self.y_shape;
        let f = 1 << (level + 1);
        [h / f, w / f, 4 * c * (1 << level)]
    }

    /// Shapes of the latent parts: one per split, then the final output.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels)
            .map(|l| {
                let [h, w, c] = self.level_shape(l);
                if l + 1 < self.levels {
                    [h, w, c / 2]
                } else {
                    [h, w, c]
                }
            })
            .collect()
    }

    pub fn y_dim(&self) -> usize {
        self.y_shape.iter().product()
    }
}

/// The four networks owned by one flow step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNets {
    pub actnorm: CnParams,
    pub conv: CnParams,
    pub features: CnParams,
    pub coupling: CnParams,
}

impl StepNets {
    fn nets(&self) -> [(&'static str, &CnParams); 4] {
        [
            ("actnorm", &self.actnorm),
            ("conv", &self.conv),
            ("features", &self.features),
            ("coupling", &self.coupling),
        ]
    }

    fn nets_mut(&mut self) -> [(&'static str, &mut CnParams); 4] {
        [
            ("actnorm", &mut self.actnorm),
            ("conv", &mut self.conv),
            ("features", &mut self.features),
            ("coupling", &mut self.coupling),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BoundStep {
    pub actnorm: BoundCn,
    pub conv: BoundCn,
    pub features: BoundCn,
    pub coupling: BoundCn,
}

/// A model's networks registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub steps: Vec<BoundStep>,
}

impl BoundModel {
    /// Handles in [`FlowModel::named_params`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.steps
            .iter()
            .flat_map(|s| {
                s.actnorm
                    .vars()
                    .chain(s.conv.vars())
                    .chain(s.features.vars())
                    .chain(s.coupling.vars())
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Weights generated from `x` for one step.
#[derive(Clone, Debug)]
pub struct StepConditioning {
    pub actnorm: ActnormWeights,
    pub conv: ConvWeights,
    pub features: Var,
    pub coupling: BoundCn,
}

/// Ordered latent parts: one per split layer, then the final output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub parts: Vec<Tensor>,
}

impl LatentStack {
    pub fn len(&self) -> usize {
        self.parts.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// All parts concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn standard_normal_logpdf(&self) -> f64 {
        let n = self.len() as f64;
        -0.5 * n * (2.0 * PI).ln() - 0.5 * self.parts.iter().map(Tensor::sum_squares).sum::<f64>()
    }
}

pub struct ForwardPass {
    pub latents: Vec<Var>,
    pub logdet: Var,
    pub reports: Vec<LayerReport>,
}

type LayerFn<'a> = dyn Fn(&mut Tape, Var) -> Result<(Var, Var)> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: ModelConfig,
    /// `levels × steps` entries, level-major.
    steps: Vec<StepNets>,
}

fn check_finite(tape: &Tape, vars: &[Var], level: usize, step: Option<usize>, kind: LayerKind) -> Result<()> {
    if vars.iter().all(|&v| tape.value(v).all_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: layer_name(level, step, kind),
        })
    }
}

fn layer_name(level: usize, step: Option<usize>, kind: LayerKind) -> String {
    match step {
        Some(k) => format!("level {level} step {k} {kind:?}"),
        None => format!("level {level} {kind:?}"),
    }
}

impl FlowModel {
    /// Fresh model: interior layers randomly initialized, every last layer
    /// zero, so all conditional layers start at (or near) the identity.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut steps = Vec::with_capacity(config.levels * config.steps);
        for level in 0..config.levels {
            let [lh, lw, c] = config.level_shape(level);
            for _ in 0..config.steps {
                steps.push(StepNets {
                    actnorm: CnParams::weight_generator(config.x_shape, config.n_c, config.n_w, 2 * c, rng)?,
                    conv: CnParams::weight_generator(config.x_shape, config.n_c, config.n_w, c * c, rng)?,
                    features: CnParams::feature_extractor(config.x_shape, (lh, lw), FEATURE_CHANNELS, rng)?,
                    coupling: CnParams::coupling(c / 2, FEATURE_CHANNELS, config.hidden, rng),
                });
            }
        }
        Ok(Self { config, steps })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn step_nets(&self, level: usize, step: usize) -> &StepNets {
        &self.steps[level * self.config.steps + step]
    }

    pub fn step_nets_mut(&mut self, level: usize, step: usize) -> &mut StepNets {
        let k = self.config.steps;
        &mut self.steps[level * k + step]
    }

    fn step_prefix(&self, idx: usize) -> String {
        format!("level{}.step{}", idx / self.config.steps, idx % self.config.steps)
    }

    /// All parameter tensors with unique dotted names, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.steps.iter().enumerate() {
            let prefix = self.step_prefix(i);
            for (net, p) in s.nets() {
                for (name, t) in p.tensors() {
                    out.push((format!("{prefix}.{net}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefixes: Vec<String> = (0..self.steps.len()).map(|i| self.step_prefix(i)).collect();
        let mut out = Vec::new();
        for (s, prefix) in self.steps.iter_mut().zip(prefixes) {
            for (net, p) in s.nets_mut() {
                for (name, t) in p.tensors_mut() {
                    out.push((format!("{prefix}.{net}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Randomize the last layer of every network (`scale` as in
    /// [`CnParams::perturb_last`]), moving the model away from the identity.
    pub fn perturb<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for s in &mut self.steps {
            for (_, p) in s.nets_mut() {
                p.perturb_last(rng, scale);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            steps: self
                .steps
                .iter()
                .map(|s| BoundStep {
                    actnorm: s.actnorm.bind(tape, trainable),
                    conv: s.conv.bind(tape, trainable),
                    features: s.features.bind(tape, trainable),
                    coupling: s.coupling.bind(tape, trainable),
                })
                .collect(),
        }
    }

    fn check_x(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.config.x_shape {
            return Err(Error::shape(
                "flow input",
                format!("x has shape {:?}, model expects {:?}", x.shape(), self.config.x_shape),
            ));
        }
        Ok(())
    }

    fn check_y(&self, y: &Tensor) -> Result<()> {
        if y.shape() != self.config.y_shape {
            return Err(Error::shape(
                "flow output",
                format!("y has shape {:?}, model expects {:?}", y.shape(), self.config.y_shape),
            ));
        }
        Ok(())
    }

    /// Run every conditioning network on `x`.
    pub fn condition(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<Vec<StepConditioning>> {
        let k_steps = self.config.steps;
        let mut out = Vec::with_capacity(self.steps.len());
        for (i, b) in bound.steps.iter().enumerate() {
            let level = i / k_steps;
            let [lh, lw, c] = self.config.level_shape(level);
            let at = |e: Error| e.within(&format!("level {level} step {} conditioning", i % k_steps));
            out.push(StepConditioning {
                actnorm: cn_actnorm(tape, x, &b.actnorm, c).map_err(at)?,
                conv: cn_conv(tape, x, &b.conv, c).map_err(at)?,
                features: cn_coupling_features(tape, x, &b.features, lh, lw).map_err(at)?,
                coupling: b.coupling.clone(),
            });
        }
        Ok(out)
    }

    /// `y → (latents, Σ log|det|)`: per level a squeeze, `K` steps of
    /// actnorm → 1×1 convolution → coupling, then a split on every level
    /// but the last.
    pub fn forward_on(&self, tape: &mut Tape, cond: &[StepConditioning], y: Var) -> Result<ForwardPass> {
        let (levels, k_steps) = (self.config.levels, self.config.steps);
        let mut latents = Vec::with_capacity(levels);
        let mut reports = Vec::new();
        let mut total = tape.constant(Tensor::scalar(0.0));
        let mut h = y;
        for level in 0..levels {
            h = squeeze(tape, h)?;
            reports.push(LayerReport {
                level,
                step: None,
                kind: LayerKind::Squeeze,
                logdet: 0.0,
            });
            for k in 0..k_steps {
                let c = &cond[level * k_steps + k];
                let at = |kind| move |e: Error| e.within(&layer_name(level, Some(k), kind));
                let layers: [(LayerKind, &LayerFn); 3] = [
                    (LayerKind::Actnorm, &|t, v| actnorm_forward(t, v, &c.actnorm)),
                    (LayerKind::InvConv, &|t, v| invconv_forward(t, v, &c.conv)),
                    (LayerKind::Coupling, &|t, v| coupling_forward(t, v, c.features, &c.coupling)),
                ];
                for (kind, f) in layers {
                    let (u, ld) = f(tape, h).map_err(at(kind))?;
                    check_finite(tape, &[u, ld], level, Some(k), kind)?;
                    reports.push(LayerReport {
                        level,
                        step: Some(k),
                        kind,
                        logdet: tape.value(ld).item(),
                    });
                    total = tape.add(total, ld)?;
                    h = u;
                }
            }
            if level + 1 < levels {
                let (kept, z) = split_forward(tape, h)?;
                reports.push(LayerReport {
                    level,
                    step: None,
                    kind: LayerKind::Split,
                    logdet: 0.0,
                });
                latents.push(z);
                h = kept;
            }
        }
        latents.push(h);
        Ok(ForwardPass {
            latents,
            logdet: total,
            reports,
        })
    }

    /// Exact inverse of [`FlowModel::forward_on`].
    pub fn inverse_on(&self, tape: &mut Tape, cond: &[StepConditioning], latents: &[Var]) -> Result<Var> {
        let (levels, k_steps) = (self.config.levels, self.config.steps);
        if latents.len() != levels {
            return Err(Error::shape(
                "flow inverse",
                format!("{} latent parts for {levels} levels", latents.len()),
            ));
        }
        for (l, (&z, shape)) in latents.iter().zip(self.config.latent_shapes()).enumerate() {
            if tape.shape(z) != shape {
                return Err(Error::shape(
                    "flow inverse",
                    format!("latent part {l} has shape {:?}, expected {shape:?}", tape.shape(z)),
                ));
            }
        }
        let mut h = latents[levels - 1];
        for level in (0..levels).rev() {
            if level + 1 < levels {
                h = split_inverse(tape, h, latents[level])?;
            }
            for k in (0..k_steps).rev() {
                let c = &cond[level * k_steps + k];
                let at = |kind| move |e: Error| e.within(&layer_name(level, Some(k), kind));
                h = coupling_inverse(tape, h, c.features, &c.coupling).map_err(at(LayerKind::Coupling))?;
                h = invconv_inverse(tape, h, &c.conv).map_err(at(LayerKind::InvConv))?;
                h = actnorm_inverse(tape, h, &c.actnorm).map_err(at(LayerKind::Actnorm))?;
                check_finite(tape, &[h], level, Some(k), LayerKind::Actnorm)?;
            }
            h = unsqueeze(tape, h)?;
        }
        Ok(h)
    }

    /// `log p(y|x) = Σ log N(z_part) + Σ log|det| + preprocessing constant`.
    pub fn log_likelihood_on(&self, tape: &mut Tape, cond: &[StepConditioning], y: Var) -> Result<Var> {
        let pass = self.forward_on(tape, cond, y)?;
        let mut total = pass.logdet;
        for &z in &pass.latents {
            let lp = standard_normal_logpdf(tape, z)?;
            total = tape.add(total, lp)?;
        }
        let constant = self.config.y_dim() as f64 * self.config.preprocess.log_det_per_dim();
        let ll = tape.offset(total, constant);
        if !tape.value(ll).item().is_finite() {
            return Err(Error::NonFinite {
                context: "log-likelihood".into(),
            });
        }
        Ok(ll)
    }

    /// Evaluate every conditioning network on `x` once, for repeated
    /// forward/inverse passes.
    pub fn conditioned(&self, x: &Tensor) -> Result<ConditionedFlow<'_>> {
        self.check_x(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cond = self.condition(&mut tape, &bound, xv)?;
        let steps = cond
            .iter()
            .map(|c| CondTensors {
                scale: tape.value(c.actnorm.scale).clone(),
                bias: tape.value(c.actnorm.bias).clone(),
                weight: tape.value(c.conv.weight).clone(),
                features: tape.value(c.features).clone(),
            })
            .collect();
        Ok(ConditionedFlow { model: self, steps })
    }

    pub fn flow_forward(&self, y_cont: &Tensor, x: &Tensor) -> Result<(LatentStack, f64, Vec<LayerReport>)> {
        self.conditioned(x)?.forward(y_cont)
    }

    pub fn flow_inverse(&self, zs: &LatentStack, x: &Tensor) -> Result<Tensor> {
        self.conditioned(x)?.inverse(zs)
    }

    pub fn log_likelihood(&self, x: &Tensor, y_cont: &Tensor) -> Result<f64> {
        self.conditioned(x)?.log_likelihood(y_cont)
    }
}

#[derive(Clone, Debug)]
struct CondTensors {
    scale: Tensor,
    bias: Tensor,
    weight: Tensor,
    features: Tensor,
}

/// A model with its conditioning networks already evaluated for one `x`.
pub struct ConditionedFlow<'m> {
    model: &'m FlowModel,
    steps: Vec<CondTensors>,
}

impl ConditionedFlow<'_> {
    pub fn model(&self) -> &FlowModel {
        self.model
    }

    fn attach(&self, tape: &mut Tape) -> Vec<StepConditioning> {
        self.steps
            .iter()
            .zip(&self.model.steps)
            .map(|(c, nets)| StepConditioning {
                actnorm: ActnormWeights {
                    scale: tape.constant(c.scale.clone()),
                    bias: tape.constant(c.bias.clone()),
                },
                conv: ConvWeights {
                    weight: tape.constant(c.weight.clone()),
                },
                features: tape.constant(c.features.clone()),
                coupling: nets.coupling.bind(tape, false),
            })
            .collect()
    }

    pub fn forward(&self, y_cont: &Tensor) -> Result<(LatentStack, f64, Vec<LayerReport>)> {
        self.model.check_y(y_cont)?;
        let mut tape = Tape::new();
        let cond = self.attach(&mut tape);
        let y = tape.constant(y_cont.clone());
        let pass = self.model.forward_on(&mut tape, &cond, y)?;
        let parts = pass.latents.iter().map(|&z| tape.value(z).clone()).collect();
        Ok((LatentStack { parts }, tape.value(pass.logdet).item(), pass.reports))
    }

    pub fn inverse(&self, zs: &LatentStack) -> Result<Tensor> {
        let mut tape = Tape::new();
        let cond = self.attach(&mut tape);
        let latents: Vec<Var> = zs.parts.iter().map(|p| tape.constant(p.clone())).collect();
        let y = self.model.inverse_on(&mut tape, &cond, &latents)?;
        Ok(tape.value(y).clone())
    }

    pub fn log_likelihood(&self, y_cont: &Tensor) -> Result<f64> {
        self.model.check_y(y_cont)?;
        let mut tape = Tape::new();
        let cond = self.attach(&mut tape);
        let y = tape.constant(y_cont.clone());
        let ll = self.model.log_likelihood_on(&mut tape, &cond, y)?;
        Ok(tape.value(ll).item())
    }

    /// Log-likelihood and its gradient with respect to `y_cont`.
    pub fn log_likelihood_grad(&self, y_cont: &Tensor) -> Result<(f64, Tensor)> {
        self.model.check_y(y_cont)?;
        let mut tape = Tape::new();
        let cond = self.attach(&mut tape);
        let y = tape.param(y_cont.clone());
        let ll = self.model.log_likelihood_on(&mut tape, &cond, y)?;
        tape.backward(ll)?;
        let g = tape.grad(y).cloned().unwrap_or_else(|| Tensor::zeros(y_cont.shape()));
        Ok((tape.value(ll).item(), g))
    }

    /// Sample latent parts `N(0, temperature²)`.
    pub fn sample_latents<R: Rng>(&self, rng: &mut R, temperature: f64) -> LatentStack {
        use rand_distr::StandardNormal;
        let parts = self
            .model
            .config
            .latent_shapes()
            .iter()
            .map(|s| Tensor::from_fn(s, |_| temperature * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        LatentStack { parts }
    }
}
