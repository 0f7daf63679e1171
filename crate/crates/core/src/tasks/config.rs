//! Run configuration: plain `key=value` lines, `#` comments.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::ModelConfig;
use crate::inference::{GradientInit, PredictMode, PredictionConfig};
use crate::io::parse_key_values;
use crate::tasks::{TaskKind, TaskSpec};
use crate::training::{AdamConfig, TrainConfig};

/// Keys that must be present (plus `task.sigma` for denoise and
/// `task.mask_fraction` for inpaint).
pub const REQUIRED_KEYS: [&str; 11] = [
    "task.kind",
    "task.size",
    "model.L",
    "model.K",
    "model.n_c",
    "model.n_w",
    "train.lr",
    "train.batch",
    "train.iters",
    "train.seed",
    "io.outdir",
];

/// Keys with defaults.
pub const OPTIONAL_KEYS: [&str; 14] = [
    "task.sigma",
    "task.mask_fraction",
    "task.train",
    "task.test",
    "task.seed",
    "model.hidden",
    "train.beta1",
    "train.beta2",
    "train.checkpoint_every",
    "predict.mode",
    "predict.M",
    "predict.temperature",
    "predict.steps",
    "predict.step_size",
];

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictionConfig,
    pub outdir: PathBuf,
}

fn bad(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

struct Keys(BTreeMap<String, String>);

impl Keys {
    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(key, "required key is missing"))
    }

    fn req<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| bad(key, format!("cannot parse `{raw}`")))
    }

    fn opt<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.0.contains_key(key) {
            self.req(key)
        } else {
            Ok(default)
        }
    }
}

fn parse_size(key: &str, raw: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = raw.split('x').map(str::trim).collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(key, format!("cannot parse size `{raw}`")));
    match parts.as_slice() {
        [n] => Ok((num(n)?, num(n)?)),
        [h, w] => Ok((num(h)?, num(w)?)),
        _ => Err(bad(key, format!("cannot parse size `{raw}` (use N or HxW)"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_key_values(text).map_err(|e| bad("<file>", e.to_string()))?;
        if let Some(k) = map
            .keys()
            .find(|k| !REQUIRED_KEYS.contains(&k.as_str()) && !OPTIONAL_KEYS.contains(&k.as_str()))
        {
            return Err(bad(k, "unknown key"));
        }
        let k = Keys(map);

        let kind: TaskKind = k
            .raw("task.kind")?
            .parse()
            .map_err(|e: Error| bad("task.kind", e.to_string()))?;
        let mut task = TaskSpec::new(kind);
        task.size = parse_size("task.size", k.raw("task.size")?)?;
        task.train = k.opt("task.train", task.train)?;
        task.test = k.opt("task.test", task.test)?;
        let seed: u64 = k.req("train.seed")?;
        task.seed = k.opt("task.seed", seed)?;
        match kind {
            TaskKind::Denoise => {
                task.sigma = k.req("task.sigma")?;
                if !(task.sigma > 0.0) {
                    return Err(bad("task.sigma", "must be positive"));
                }
            }
            TaskKind::Inpaint => {
                task.mask_fraction = k.req("task.mask_fraction")?;
            }
            TaskKind::BinarySeg => {}
        }
        let y_shape = task.y_shape().map_err(|e| bad("task.mask_fraction", e.to_string()))?;
        if task.train == 0 {
            return Err(bad("task.train", "need at least one training example"));
        }

        let model = ModelConfig {
            levels: k.req("model.L")?,
            steps: k.req("model.K")?,
            x_shape: task.x_shape(),
            y_shape,
            n_c: k.req("model.n_c")?,
            n_w: k.req("model.n_w")?,
            hidden: k.opt("model.hidden", DEFAULT_HIDDEN)?,
            preprocess: task.target_preprocess(),
        };
        model.validate().map_err(|e| bad("model.L", e.to_string()))?;

        let train = TrainConfig {
            adam: AdamConfig {
                lr: k.req("train.lr")?,
                beta1: k.opt("train.beta1", 0.9)?,
                beta2: k.opt("train.beta2", 0.999)?,
                eps: 1e-8,
            },
            batch: k.req("train.batch")?,
            iterations: k.req("train.iters")?,
            seed,
            checkpoint_every: k.opt("train.checkpoint_every", 0)?,
        };
        train.validate().map_err(|e| bad("train.lr", e.to_string()))?;

        let defaults = PredictionConfig::default();
        let mode = match k.opt("predict.mode", "sample-mean".to_string())?.as_str() {
            "sample-mean" => PredictMode::SampleMean,
            "gradient" => PredictMode::Gradient,
            other => return Err(bad("predict.mode", format!("`{other}` is not sample-mean or gradient"))),
        };
        let predict = PredictionConfig {
            mode,
            m: k.opt("predict.M", defaults.m)?,
            temperature: k.opt("predict.temperature", defaults.temperature)?,
            steps: k.opt("predict.steps", defaults.steps)?,
            step_size: k.opt("predict.step_size", defaults.step_size)?,
            init: GradientInit::Zeros,
            discretize: true,
        };
        predict.validate().map_err(|e| bad("predict.M", e.to_string()))?;

        Ok(Self {
            task,
            model,
            train,
            predict,
            outdir: PathBuf::from(k.raw("io.outdir")?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
# tiny segmentation run
task.kind = binary-seg
task.size = 8
model.L = 2
model.K = 2
model.n_c = 4
model.n_w = 8
train.lr = 0.0002
train.beta1 = 0.9
train.beta2 = 0.999
train.batch = 2
train.iters = 100
train.seed = 7
predict.mode = sample-mean
predict.M = 10
predict.temperature = 1.0
io.outdir = out
";

    #[test]
    fn parses_a_full_config() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.task.kind, TaskKind::BinarySeg);
        assert_eq!(c.model.y_shape, [8, 8, 3]);
        assert_eq!(c.model.levels, 2);
        assert_eq!(c.train.adam.lr, 2e-4);
        assert_eq!(c.train.batch, 2);
        assert_eq!(c.predict.m, 10);
        assert_eq!(c.task.seed, 7);
        assert_eq!(c.outdir, PathBuf::from("out"));
    }

    #[test]
    fn missing_key_is_named() {
        for key in REQUIRED_KEYS {
            let text: String = BASE
                .lines()
                .filter(|l| !l.starts_with(&format!("{key} ")))
                .map(|l| format!("{l}\n"))
                .collect();
            let err = RunConfig::parse(&text).unwrap_err();
            assert!(err.to_string().contains(key), "{key}: {err}");
        }
    }

    #[test]
    fn task_specific_keys() {
        let denoise = BASE.replace("binary-seg", "denoise");
        let err = RunConfig::parse(&denoise).unwrap_err();
        assert!(err.to_string().contains("task.sigma"));
        let c = RunConfig::parse(&(denoise + "task.sigma = 25\n")).unwrap();
        assert_eq!(c.model.y_shape, [8, 8, 1]);
        let inpaint = BASE.replace("binary-seg", "inpaint").replace("task.size = 8", "task.size = 16x16");
        let c = RunConfig::parse(&(inpaint.clone() + "task.mask_fraction = 0.25\n")).unwrap();
        assert_eq!(c.model.y_shape, [8, 8, 1]);
        let err = RunConfig::parse(&(inpaint + "task.mask_fraction = 0.3\n")).unwrap_err();
        assert!(err.to_string().contains("task.mask_fraction"));
    }

    #[test]
    fn bad_values_and_unknown_keys() {
        let err = RunConfig::parse(&BASE.replace("train.lr = 0.0002", "train.lr = fast")).unwrap_err();
        assert!(err.to_string().contains("train.lr"));
        let err = RunConfig::parse(&(BASE.to_string() + "train.momentum = 0.5\n")).unwrap_err();
        assert!(err.to_string().contains("train.momentum"));
        let err = RunConfig::parse(&BASE.replace("model.L = 2", "model.L = 4")).unwrap_err();
        assert!(err.to_string().contains("model.L"));
        let err = RunConfig::parse(&BASE.replace("sample-mean", "beam")).unwrap_err();
        assert!(err.to_string().contains("predict.mode"));
    }
}
