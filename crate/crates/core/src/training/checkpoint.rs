//! `CFCK` checkpoint files.
//!
//! Layout (little-endian): magic `CFCK`, `u32` version, `u32` length of a
//! UTF-8 `key=value` hyperparameter block, the block, `u32` tensor count,
//! then per tensor a `u16` name length, the name and a `CFT1` tensor.
//! Trailer: `u64` iteration, then the RNG state as a 32-byte seed, `u64`
//! stream and `u128` word position.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, ModelConfig, Preprocess};
use crate::io::{parse_key_values, read_exact, read_tensor, read_u32, write_tensor};
use crate::tensor::Tensor;
use crate::training::adam::{AdamConfig, AdamState};
use crate::training::train::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt_shape(s: [usize; 3]) -> String {
    format!("{},{},{}", s[0], s[1], s[2])
}

pub fn format_preprocess(p: &Preprocess) -> String {
    match *p {
        Preprocess::Dequantize { bins } => format!("dequantize {bins}"),
        Preprocess::Affine { shift, scale } => format!("affine {shift} {scale}"),
    }
}

pub fn parse_preprocess(s: &str) -> Result<Preprocess> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    let num = |t: &str| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{t}`")));
    match parts.as_slice() {
        ["dequantize", b] => Ok(Preprocess::Dequantize {
            bins: b.parse().map_err(|_| Error::Format(format!("bad bin count `{b}`")))?,
        }),
        ["affine", shift, scale] => Ok(Preprocess::Affine {
            shift: num(shift)?,
            scale: num(scale)?,
        }),
        _ => Err(Error::Format(format!("bad preprocessing `{s}`"))),
    }
}

fn hyper_block(t: &Trainer) -> String {
    let m = t.model.config();
    let c = &t.config;
    let entries = [
        ("model.L", m.levels.to_string()),
        ("model.K", m.steps.to_string()),
        ("model.x_shape", fmt_shape(m.x_shape)),
        ("model.y_shape", fmt_shape(m.y_shape)),
        ("model.n_c", m.n_c.to_string()),
        ("model.n_w", m.n_w.to_string()),
        ("model.hidden", m.hidden.to_string()),
        ("model.preprocess", format_preprocess(&m.preprocess)),
        ("train.lr", c.adam.lr.to_string()),
        ("train.beta1", c.adam.beta1.to_string()),
        ("train.beta2", c.adam.beta2.to_string()),
        ("train.eps", c.adam.eps.to_string()),
        ("train.batch", c.batch.to_string()),
        ("train.iters", c.iterations.to_string()),
        ("train.seed", c.seed.to_string()),
        ("train.checkpoint_every", c.checkpoint_every.to_string()),
        ("adam.t", t.adam.t.to_string()),
    ];
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

struct Block(BTreeMap<String, String>);

impl Block {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .0
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint key `{key}` has bad value `{raw}`")))
    }

    fn shape(&self, key: &str) -> Result<[usize; 3]> {
        let raw: String = self.get(key)?;
        let dims: Vec<usize> = raw
            .split(',')
            .map(|d| d.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("bad shape `{raw}`")))?;
        <[usize; 3]>::try_from(dims).map_err(|_| Error::Format(format!("bad shape `{raw}`")))
    }
}

fn write_named<W: Write>(out: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    write_tensor(out, t)
}

pub fn write_checkpoint<W: Write>(out: &mut W, t: &Trainer) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let block = hyper_block(t);
    out.write_all(&(block.len() as u32).to_le_bytes())?;
    out.write_all(block.as_bytes())?;
    let params = t.model.named_params();
    out.write_all(&((3 * params.len()) as u32).to_le_bytes())?;
    for (name, p) in &params {
        write_named(out, name, p)?;
    }
    for (prefix, moments) in [("adam.m.", &t.adam.m), ("adam.v.", &t.adam.v)] {
        for ((name, _), m) in params.iter().zip(moments) {
            write_named(out, &format!("{prefix}{name}"), m)?;
        }
    }
    out.write_all(&t.iteration.to_le_bytes())?;
    out.write_all(&t.rng.get_seed())?;
    out.write_all(&t.rng.get_stream().to_le_bytes())?;
    out.write_all(&t.rng.get_word_pos().to_le_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Trainer> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = read_u32(input)? as usize;
    let mut text = vec![0u8; len];
    read_exact(input, &mut text)?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("hyperparameter block is not UTF-8".into()))?;
    let b = Block(parse_key_values(&text)?);
    let model_cfg = ModelConfig {
        levels: b.get("model.L")?,
        steps: b.get("model.K")?,
        x_shape: b.shape("model.x_shape")?,
        y_shape: b.shape("model.y_shape")?,
        n_c: b.get("model.n_c")?,
        n_w: b.get("model.n_w")?,
        hidden: b.get("model.hidden")?,
        preprocess: parse_preprocess(&b.get::<String>("model.preprocess")?)?,
    };
    let config = TrainConfig {
        adam: AdamConfig {
            lr: b.get("train.lr")?,
            beta1: b.get("train.beta1")?,
            beta2: b.get("train.beta2")?,
            eps: b.get("train.eps")?,
        },
        batch: b.get("train.batch")?,
        iterations: b.get("train.iters")?,
        seed: b.get("train.seed")?,
        checkpoint_every: b.get("train.checkpoint_every")?,
    };
    // Architecture only; every tensor is overwritten below.
    let mut model = FlowModel::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(0))?;

    let count = read_u32(input)? as usize;
    let mut stored = BTreeMap::new();
    for _ in 0..count {
        let mut l = [0u8; 2];
        read_exact(input, &mut l)?;
        let mut name = vec![0u8; u16::from_le_bytes(l) as usize];
        read_exact(input, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t = read_tensor(input)?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, p) in model.named_params_mut() {
        *p = take(&name, p.shape())?;
        m.push(take(&format!("adam.m.{name}"), p.shape())?);
        v.push(take(&format!("adam.v.{name}"), p.shape())?);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    let adam = AdamState {
        m,
        v,
        t: b.get("adam.t")?,
    };

    let mut it = [0u8; 8];
    read_exact(input, &mut it)?;
    let mut seed = [0u8; 32];
    read_exact(input, &mut seed)?;
    let mut stream = [0u8; 8];
    read_exact(input, &mut stream)?;
    let mut pos = [0u8; 16];
    read_exact(input, &mut pos)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(stream));
    rng.set_word_pos(u128::from_le_bytes(pos));
    Ok(Trainer {
        model,
        adam,
        rng,
        iteration: u64::from_le_bytes(it),
        config,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, t: &Trainer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Example};
    use rand::Rng;

    fn trainer() -> (Trainer, Dataset) {
        let cfg = ModelConfig {
            levels: 2,
            steps: 1,
            x_shape: [4, 4, 1],
            y_shape: [4, 4, 1],
            n_c: 2,
            n_w: 4,
            hidden: 4,
            preprocess: Preprocess::Dequantize { bins: 2 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FlowModel::new(cfg, &mut rng).unwrap();
        let examples = (0..3)
            .map(|_| Example {
                x: Tensor::from_fn(&[4, 4, 1], |_| rng.random_range(-0.5..0.5)),
                y: Tensor::from_fn(&[4, 4, 1], |_| rng.random_range(0..2) as f64),
            })
            .collect();
        let tc = TrainConfig {
            iterations: 10,
            seed: 9,
            ..Default::default()
        };
        (Trainer::new(model, tc), Dataset::new(examples, Preprocess::IDENTITY))
    }

    #[test]
    fn round_trip_is_bitwise_and_resumes_exactly() {
        let (mut t, data) = trainer();
        for _ in 0..3 {
            t.step(&data).unwrap();
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &t).unwrap();
        let mut back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.model, t.model);
        assert_eq!(back.adam, t.adam);
        assert_eq!(back.config, t.config);
        assert_eq!(back.iteration, 3);
        let a = t.step(&data).unwrap();
        let b = back.step(&data).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn header_and_corruption() {
        let (t, _) = trainer();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"CFCK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        let mut ver = buf.clone();
        ver[4] = 7;
        let err = read_checkpoint(&mut ver.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
        let short = &buf[..buf.len() - 5];
        assert!(matches!(read_checkpoint(&mut &short[..]), Err(Error::Format(_))));
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let (t, _) = trainer();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &t).unwrap();
        // claim a wider hidden layer than the stored tensors have
        let key = b"model.hidden=4";
        let at = buf.windows(key.len()).position(|w| w == key).unwrap();
        buf[at + key.len() - 1] = b'5';
        let err = read_checkpoint(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn preprocess_strings_round_trip() {
        for p in [
            Preprocess::Dequantize { bins: 256 },
            Preprocess::Affine {
                shift: 0.1,
                scale: 25.0,
            },
        ] {
            assert_eq!(parse_preprocess(&format_preprocess(&p)).unwrap(), p);
        }
        assert!(parse_preprocess("cubic 3").is_err());
    }
}
