use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Preprocess};
use crate::tensor::Tensor;
use crate::training::adam::{adam_step, AdamConfig, AdamState};
use crate::training::checkpoint::save_checkpoint;
use crate::training::dequantize::dequantize;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub iterations: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 2,
            iterations: 0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Map a raw target to the flow's continuous space; discrete targets get
/// fresh uniform noise.
pub fn prepare_target<R: Rng>(y: &Tensor, pre: &Preprocess, rng: &mut R) -> Result<Tensor> {
    match *pre {
        Preprocess::Dequantize { bins } => dequantize(y, bins, rng),
        Preprocess::Affine { .. } => Ok(pre.normalize(y)),
    }
}

/// Mean negative log-likelihood (nats) of `(x, y_cont)` pairs on one tape.
pub fn nll_loss(tape: &mut Tape, model: &FlowModel, bound: &crate::flow::model::BoundModel, batch: &[(Tensor, Tensor)]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (x, y) in batch {
        let xv = tape.constant(x.clone());
        let cond = model.condition(tape, bound, xv)?;
        let yv = tape.constant(y.clone());
        let ll = model.log_likelihood_on(tape, &cond, yv)?;
        total = tape.add(total, ll)?;
    }
    Ok(tape.scale(total, -1.0 / batch.len() as f64))
}

/// Mean NLL and its gradient for every tensor in
/// [`FlowModel::named_params`] order.
pub fn nll_and_grads(model: &FlowModel, batch: &[(Tensor, Tensor)]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let loss = nll_loss(&mut tape, model, &bound, batch)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .vars()
        .into_iter()
        .map(|v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        let name = model.named_params().swap_remove(i).0;
        return Err(Error::NonFinite {
            context: format!("gradient of {name}"),
        });
    }
    Ok((tape.value(loss).item(), grads))
}

/// Everything a run needs to continue: model, optimizer, RNG, position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Self {
        let adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            model,
            adam,
            rng,
            iteration: 0,
            config,
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let cfg = self.model.config();
        if data.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        if data.x_shape() != Some(cfg.x_shape) || data.y_shape() != Some(cfg.y_shape) {
            return Err(Error::shape(
                "training data",
                format!(
                    "dataset x {:?} / y {:?} vs model x {:?} / y {:?}",
                    data.x_shape(),
                    data.y_shape(),
                    cfg.x_shape,
                    cfg.y_shape
                ),
            ));
        }
        Ok(())
    }

    /// One iteration: sample a minibatch, dequantize, forward, backward,
    /// Adam. Returns the batch NLL in nats per dimension.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let pre = self.model.config().preprocess;
        let mut batch = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let i = self.rng.random_range(0..data.len());
            let y = prepare_target(&data.examples[i].y, &pre, &mut self.rng)?;
            batch.push((data.model_input(i), y));
        }
        let (loss, grads) = nll_and_grads(&self.model, &batch)?;
        let mut params: Vec<&mut Tensor> = self.model.named_params_mut().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut params, &grads, &mut self.adam, &self.config.adam)?;
        self.iteration += 1;
        Ok(loss / self.model.config().y_dim() as f64)
    }
}

/// Output locations of a training run.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    /// CSV `iteration,nll_nats_per_dim`; appended to when it already exists.
    pub curve: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

pub fn emergency_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("emergency.cfck")
}

/// Run until `config.iterations` is reached. A failing step saves an
/// emergency checkpoint of the pre-step state and halts.
pub fn train_loop(trainer: &mut Trainer, data: &Dataset, paths: &RunPaths) -> Result<Vec<(u64, f64)>> {
    trainer.config.validate()?;
    trainer.check_data(data)?;
    let mut csv = match &paths.curve {
        Some(p) => {
            let fresh = !p.exists();
            let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?);
            if fresh {
                writeln!(w, "iteration,nll_nats_per_dim")?;
            }
            Some(w)
        }
        None => None,
    };
    let mut curve = Vec::new();
    while trainer.iteration < trainer.config.iterations {
        let before = trainer.clone();
        let step = trainer.step(data).and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    context: "training loss".into(),
                })
            }
        });
        let nll = match step {
            Ok(v) => v,
            Err(e) => {
                if let Some(p) = &paths.checkpoint {
                    save_checkpoint(emergency_path(p), &before)?;
                }
                if let Some(w) = csv.as_mut() {
                    w.flush()?;
                }
                return Err(e.within(&format!("iteration {}", before.iteration + 1)));
            }
        };
        curve.push((trainer.iteration, nll));
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{},{}", trainer.iteration, nll)?;
        }
        let every = trainer.config.checkpoint_every;
        if let Some(p) = &paths.checkpoint {
            if (every > 0 && trainer.iteration.is_multiple_of(every)) || trainer.iteration == trainer.config.iterations {
                save_checkpoint(p, trainer)?;
            }
        }
    }
    if let Some(w) = csv.as_mut() {
        w.flush()?;
    }
    Ok(curve)
}

/// Mean of each consecutive tenth of the curve.
pub fn decile_means(curve: &[(u64, f64)]) -> Vec<f64> {
    let n = curve.len();
    (0..10)
        .map(|d| {
            let part = &curve[d * n / 10..(d + 1) * n / 10];
            part.iter().map(|p| p.1).sum::<f64>() / part.len().max(1) as f64
        })
        .collect()
}
