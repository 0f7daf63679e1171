use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_binary(op: &str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{op}: mask is not binary")))
    }
}

/// `|pred ∩ truth| / |pred ∪ truth|`; two empty masks score 1.
pub fn iou(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape("iou", pred, truth)?;
    check_binary("iou", pred)?;
    check_binary("iou", truth)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        inter += (p == 1.0 && t == 1.0) as usize;
        union += (p == 1.0 || t == 1.0) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `20·log10(peak / RMSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("psnr of empty tensors".into()));
    }
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y))?.sum() / a.len() as f64;
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

pub fn pixel_accuracy(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape("pixel_accuracy", pred, truth)?;
    if pred.is_empty() {
        return Err(Error::Invalid("pixel accuracy of empty tensors".into()));
    }
    let hits = pred.data().iter().zip(truth.data()).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleMetrics {
    pub index: usize,
    pub iou: Option<f64>,
    pub psnr: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub mode: String,
    pub m: usize,
    pub wall_time_s: f64,
    pub mean_iou: Option<f64>,
    pub mean_psnr: Option<f64>,
    pub mean_pixel_accuracy: Option<f64>,
    pub examples: Vec<ExampleMetrics>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn new(task: &str, mode: &str, m: usize, wall_time_s: f64, examples: Vec<ExampleMetrics>) -> Self {
        Self {
            task: task.into(),
            mode: mode.into(),
            m,
            wall_time_s,
            mean_iou: mean_of(examples.iter().map(|e| e.iou)),
            mean_psnr: mean_of(examples.iter().map(|e| e.psnr)),
            mean_pixel_accuracy: mean_of(examples.iter().map(|e| e.pixel_accuracy)),
            examples,
        }
    }

    /// Per-example rows under a header, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("index,iou,psnr,pixel_accuracy,log_likelihood\n");
        for e in &self.examples {
            s += &format!(
                "{},{},{},{},{}\n",
                e.index,
                opt(e.iou),
                opt(e.psnr),
                opt(e.pixel_accuracy),
                e.log_likelihood
            );
        }
        let mean_ll = self.examples.iter().map(|e| e.log_likelihood).sum::<f64>() / self.examples.len().max(1) as f64;
        s += &format!(
            "mean,{},{},{},{}\n",
            opt(self.mean_iou),
            opt(self.mean_psnr),
            opt(self.mean_pixel_accuracy),
            mean_ll
        );
        s
    }

    /// One JSON object per example, then a summary object without them.
    pub fn to_json_lines(&self) -> Result<String> {
        let enc = |e: serde_json::Error| Error::Format(e.to_string());
        let mut s = String::new();
        for e in &self.examples {
            s += &serde_json::to_string(e).map_err(enc)?;
            s.push('\n');
        }
        let summary = MetricReport {
            examples: Vec::new(),
            ..self.clone()
        };
        s += &serde_json::to_string(&summary).map_err(enc)?;
        s.push('\n');
        Ok(s)
    }
}
