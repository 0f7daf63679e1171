//! Desk-scale synthetic tasks, metrics, run configuration and artifacts.

pub mod config;
pub mod eval;
pub mod generators;
pub mod image;
pub mod metrics;

use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::flow::Preprocess;
use crate::inference::OutputKind;
use crate::io::{load_tensor, save_tensor, write_tensor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BinarySeg,
    Denoise,
    Inpaint,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::BinarySeg => "binary-seg",
            TaskKind::Denoise => "denoise",
            TaskKind::Inpaint => "inpaint",
        }
    }

    pub fn output_kind(self) -> OutputKind {
        match self {
            TaskKind::BinarySeg => OutputKind::Binary,
            TaskKind::Denoise | TaskKind::Inpaint => OutputKind::Continuous,
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary-seg" => Ok(TaskKind::BinarySeg),
            "denoise" => Ok(TaskKind::Denoise),
            "inpaint" => Ok(TaskKind::Inpaint),
            _ => Err(Error::Invalid(format!(
                "unknown task `{s}` (expected binary-seg, denoise or inpaint)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub size: (usize, usize),
    pub train: usize,
    pub test: usize,
    /// Noise standard deviation on the 0–255 scale (denoise).
    pub sigma: f64,
    /// Hidden area fraction (inpaint).
    pub mask_fraction: f64,
    /// Discrete levels of `y` (binary-seg, inpaint).
    pub bins: u32,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            size: (8, 8),
            train: 1024,
            test: 64,
            sigma: 25.0,
            mask_fraction: 0.25,
            bins: match kind {
                TaskKind::BinarySeg => 2,
                TaskKind::Denoise => 0,
                TaskKind::Inpaint => 256,
            },
            seed: 0,
        }
    }

    pub fn x_shape(&self) -> [usize; 3] {
        [self.size.0, self.size.1, 1]
    }

    pub fn y_shape(&self) -> Result<[usize; 3]> {
        let (h, w) = self.size;
        Ok(match self.kind {
            TaskKind::BinarySeg => [h, w, 3],
            TaskKind::Denoise => [h, w, 1],
            TaskKind::Inpaint => {
                let b = generators::inpaint_block(self.size, self.mask_fraction)?;
                [b.h, b.w, 1]
            }
        })
    }

    /// Map from raw `y` to the flow's continuous space.
    pub fn target_preprocess(&self) -> Preprocess {
        match self.kind {
            TaskKind::Denoise => Preprocess::Affine {
                shift: 0.0,
                scale: self.sigma,
            },
            TaskKind::BinarySeg | TaskKind::Inpaint => Preprocess::Dequantize { bins: self.bins },
        }
    }

    /// Network input: `x/255 − 0.5`.
    pub fn input_preprocess(&self) -> Preprocess {
        Preprocess::Affine {
            shift: 127.5,
            scale: 255.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Pure function of the spec: train split first, then test, from one
/// seeded stream.
pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |n| match spec.kind {
        TaskKind::BinarySeg => generators::gen_binary_seg(spec, n, &mut rng),
        TaskKind::Denoise => generators::gen_denoise(spec, n, &mut rng),
        TaskKind::Inpaint => generators::gen_inpaint(spec, n, &mut rng),
    };
    let train = make(spec.train)?;
    let test = make(spec.test)?;
    let input = spec.input_preprocess();
    Ok(TaskData {
        train: Dataset::new(train, input),
        test: Dataset::new(test, input),
    })
}

/// Stack `n` equal-shape tensors into `[n, ...]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::Invalid("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

pub fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let (&n, inner) = t
        .shape()
        .split_first()
        .filter(|(_, r)| !r.is_empty())
        .ok_or_else(|| Error::shape("unstack", format!("rank {} tensor", t.rank())))?;
    let step = inner.iter().product::<usize>();
    (0..n)
        .map(|i| Tensor::new(inner.to_vec(), t.data()[i * step..(i + 1) * step].to_vec()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: TaskSpec,
    pub files: Vec<String>,
    /// SHA-256 over the CFT1 encodings of `files`, in order.
    pub sha256: String,
}

const SPLIT_FILES: [&str; 4] = ["train_x.cft", "train_y.cft", "test_x.cft", "test_y.cft"];

fn split_tensors(data: &TaskData) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for ds in [&data.train, &data.test] {
        let xs: Vec<&Tensor> = ds.examples.iter().map(|e| &e.x).collect();
        let ys: Vec<&Tensor> = ds.examples.iter().map(|e| &e.y).collect();
        out.push(stack(&xs)?);
        out.push(stack(&ys)?);
    }
    Ok(out)
}

pub fn content_hash(data: &TaskData) -> Result<String> {
    let mut h = Sha256::new();
    for t in split_tensors(data)? {
        let mut buf = Cursor::new(Vec::new());
        write_tensor(&mut buf, &t)?;
        h.update(buf.get_ref());
    }
    Ok(hex::encode(h.finalize()))
}

/// Write the four split tensors and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, spec: &TaskSpec, data: &TaskData) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    for (name, t) in SPLIT_FILES.iter().zip(split_tensors(data)?) {
        save_tensor(dir.join(name), &t)?;
    }
    let manifest = Manifest {
        spec: spec.clone(),
        files: SPLIT_FILES.iter().map(|s| s.to_string()).collect(),
        sha256: content_hash(data)?,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

/// Load a dataset directory, rejecting contents that do not match the
/// manifest hash.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, TaskData)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut parts = Vec::new();
    for name in SPLIT_FILES {
        parts.push(unstack(&load_tensor(dir.join(name))?)?);
    }
    let pair = |xs: Vec<Tensor>, ys: Vec<Tensor>| -> Result<Dataset> {
        if xs.len() != ys.len() {
            return Err(Error::Format("x and y counts differ".into()));
        }
        let examples = xs.into_iter().zip(ys).map(|(x, y)| Example { x, y }).collect();
        Ok(Dataset::new(examples, manifest.spec.input_preprocess()))
    };
    let mut it = parts.into_iter();
    let (trx, tr_y, tex, tey) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let data = TaskData {
        train: pair(trx, tr_y)?,
        test: pair(tex, tey)?,
    };
    let hash = content_hash(&data)?;
    if hash != manifest.sha256 {
        return Err(Error::Format(format!(
            "dataset hash {hash} does not match manifest {}",
            manifest.sha256
        )));
    }
    Ok((manifest, data))
}
