//! Predict on a test split and score against the task's metric.

use std::time::Instant;

use rand::Rng;

use crate::data::Dataset;
use crate::error::Result;
use crate::flow::FlowModel;
use crate::inference::{binary_mask, discretize, predict_gradient, predict_sample_mean, PredictMode, Prediction, PredictionConfig};
use crate::tasks::metrics::{iou, pixel_accuracy, psnr, ExampleMetrics, MetricReport};
use crate::tasks::{TaskKind, TaskSpec};
use crate::tensor::Tensor;

pub fn predict_one<R: Rng>(model: &FlowModel, x: &Tensor, cfg: &PredictionConfig, kind: TaskKind, rng: &mut R) -> Result<Prediction> {
    let mut p = match cfg.mode {
        PredictMode::SampleMean => predict_sample_mean(model, x, cfg.m, rng, cfg.temperature)?,
        PredictMode::Gradient => predict_gradient(model, x, cfg.steps, cfg.step_size, cfg.init, rng)?,
    };
    if cfg.discretize {
        p.y = discretize(&p.y, &model.config().preprocess, kind.output_kind())?;
    }
    Ok(p)
}

/// Score one continuous-space prediction against the raw example.
pub fn score(spec: &TaskSpec, model: &FlowModel, index: usize, x: &Tensor, y_true: &Tensor, p: &Prediction) -> Result<ExampleMetrics> {
    let pre = model.config().preprocess;
    let mut m = ExampleMetrics {
        index,
        iou: None,
        psnr: None,
        pixel_accuracy: None,
        log_likelihood: p.log_likelihood,
    };
    match spec.kind {
        TaskKind::BinarySeg => {
            let pred = binary_mask(&p.y, &pre)?;
            let truth = y_true.slice_channels(0, 1)?;
            m.iou = Some(iou(&pred, &truth)?);
            m.pixel_accuracy = Some(pixel_accuracy(&pred, &truth)?);
        }
        TaskKind::Denoise => {
            let residual = pre.unnormalize(&p.y);
            let denoised = x.zip_map(&residual, |a, r| a - r)?;
            let clean = x.zip_map(y_true, |a, r| a - r)?;
            m.psnr = Some(psnr(&clean, &denoised, 255.0)?);
        }
        TaskKind::Inpaint => {
            let block = pre.unnormalize(&p.y).map(|v| v.clamp(0.0, 255.0));
            m.psnr = Some(psnr(y_true, &block, 255.0)?);
        }
    }
    Ok(m)
}

/// Predict every test example; returns the report and the predictions.
pub fn evaluate<R: Rng>(
    model: &FlowModel,
    spec: &TaskSpec,
    test: &Dataset,
    cfg: &PredictionConfig,
    rng: &mut R,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    for (i, ex) in test.examples.iter().enumerate() {
        let p = predict_one(model, &test.model_input(i), cfg, spec.kind, rng)?;
        rows.push(score(spec, model, i, &ex.x, &ex.y, &p)?);
        preds.push(p);
    }
    let mode = match cfg.mode {
        PredictMode::SampleMean => "sample-mean",
        PredictMode::Gradient => "gradient",
    };
    let report = MetricReport::new(spec.kind.name(), mode, cfg.m, start.elapsed().as_secs_f64(), rows);
    Ok((report, preds))
}
