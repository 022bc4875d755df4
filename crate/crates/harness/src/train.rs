//! Training and evaluation loops.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use fractal_ir::models::{self, build, ModelConfig};
use fractal_ir::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{RunConfig, Task};
use crate::data::{box_upsample, degrade, gather_images, synth_clean_batch, validation_set, Pairs};
use crate::error::{HarnessError, Result};
use crate::metrics::{mean_psnr, ssim};
use crate::optim::{global_norm, AdamW};
use crate::padding::{crop, pad_reflect_to_geometry};
use crate::schedule::warmup_lr;

pub const CSV_HEADER: &str = "iter,train_loss,val_psnr,val_ssim,grad_norm,lr";

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.train_loss, self.val_psnr, self.val_ssim, self.grad_norm, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub params: ParamStore<f32>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Runs the model on `x`, reflect-padding to the geometry and cropping back.
pub fn restore(model: &ModelConfig, params: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let padded = pad_reflect_to_geometry(x, model.input_multiple());
    let y = models::predict(model, params, &padded)?;
    let r = model.head.scale();
    Ok(crop(&y, h * r, w * r))
}

fn restore_all(model: &ModelConfig, params: &ParamStore<f32>, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = inputs.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..n.min(start + EVAL_CHUNK)).collect();
        let y = restore(model, params, &gather_images(inputs, &idx))?;
        shape = y.shape().to_vec();
        data.extend_from_slice(y.data());
    }
    shape[0] = n;
    Ok(Tensor::new(&shape, data)?)
}

/// Validation quality of `params` next to the trivial baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Noisy input (denoise) or pixel-replicated input (sr2x) against the target.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

pub fn baseline(task: Task, inputs: &Tensor<f32>) -> Tensor<f32> {
    match task {
        Task::Denoise => inputs.clone(),
        Task::Sr2x => box_upsample(inputs),
    }
}

pub fn evaluate_pairs(cfg: &RunConfig, params: &ParamStore<f32>, pairs: &Pairs) -> Result<EvalReport> {
    let out = restore_all(&cfg.model, params, &pairs.inputs)?;
    let base = baseline(cfg.task, &pairs.inputs);
    Ok(EvalReport {
        psnr: mean_psnr(&out, &pairs.targets, 1.0),
        ssim: ssim(&out, &pairs.targets),
        baseline_psnr: mean_psnr(&base, &pairs.targets, 1.0),
        baseline_ssim: ssim(&base, &pairs.targets),
    })
}

pub fn evaluate(cfg: &RunConfig, params: &ParamStore<f32>) -> Result<EvalReport> {
    let pairs = validation_set(cfg.task, &cfg.dataset, cfg.noise_sigma);
    evaluate_pairs(cfg, params, &pairs)
}

/// Batch for step `iter`: image indices and degradation noise come from a
/// stream keyed by `(seed, iter)`.
fn training_batch(cfg: &RunConfig, pool: &Tensor<f32>, iter: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iter as u64 + 1);
    let idx: Vec<usize> = (0..cfg.batch_size)
        .map(|_| rng.random_range(0..cfg.dataset.n_train))
        .collect();
    let clean = gather_images(pool, &idx);
    let input = degrade(cfg.task, &clean, cfg.noise_sigma, &mut rng);
    (input, clean)
}

struct CsvSink(Option<(File, std::path::PathBuf)>);

impl CsvSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else { return Ok(Self(None)) };
        let mut f = File::create(p).map_err(|e| HarnessError::io(p, e))?;
        writeln!(f, "{CSV_HEADER}").map_err(|e| HarnessError::io(p, e))?;
        Ok(Self(Some((f, p.to_path_buf()))))
    }

    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some((f, p)) = &mut self.0 {
            writeln!(f, "{}", row.csv_line()).map_err(|e| HarnessError::io(p.as_path(), e))?;
        }
        Ok(())
    }
}

/// Renders rows exactly as they are written to the metrics file.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Trains from scratch per `cfg`, writing metrics and the checkpoint when paths are set.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// As [`train`], calling `on_row` after each evaluation.
pub fn train_with(cfg: &RunConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = cfg.input_size();
    let m = cfg.model.input_multiple();
    if !size.is_multiple_of(m) {
        return Err(HarnessError::Config(format!(
            "training input size {size} must be a multiple of {m}"
        )));
    }
    let mut params: ParamStore<f32> = build(&cfg.model, cfg.seed)?;
    let pool = synth_clean_batch(cfg.dataset.n_train, cfg.dataset.image_size, cfg.dataset.channels, cfg.dataset.seed);
    let val = validation_set(cfg.task, &cfg.dataset, cfg.noise_sigma);
    let mut opt = AdamW::new(cfg.optimizer.clone(), &params);
    let mut csv = CsvSink::open(cfg.metrics_path.as_deref())?;
    let mut rows = Vec::new();
    let total = cfg.schedule.total_iters;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;

    for iter in 0..total {
        let (input, target) = training_batch(cfg, &pool, iter);
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, true);
        let x = g.constant(input);
        let t = g.constant(target);
        let y = models::forward(&mut g, &cfg.model, &bound, x)?;
        let loss = g.l1_loss(y, t)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(HarnessError::Diverged { iter, loss: loss_value });
        }
        let mut grads = g.backward(loss)?;
        let grads = bound.collect_grads(&g, &mut grads);
        let grad_norm = global_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(HarnessError::Diverged { iter, loss: grad_norm });
        }
        let lr = warmup_lr(iter, cfg.optimizer.lr, &cfg.schedule);
        opt.step(&mut params, &grads, lr);
        loss_sum += loss_value;
        loss_n += 1;

        let done = iter + 1;
        if done % cfg.eval_interval == 0 || done == total {
            let report = evaluate_pairs(cfg, &params, &val)?;
            let row = MetricsRow {
                iter: done,
                train_loss: loss_sum / loss_n as f64,
                val_psnr: report.psnr,
                val_ssim: report.ssim,
                grad_norm,
                lr,
            };
            loss_sum = 0.0;
            loss_n = 0;
            csv.row(&row)?;
            on_row(&row);
            rows.push(row);
        }
    }
    if let Some(p) = &cfg.checkpoint_path {
        checkpoint::save(&params, p)?;
    }
    Ok(TrainOutcome { rows, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::denoise_default();
        cfg.model.channels = 4;
        cfg.dataset.n_train = 4;
        cfg.dataset.n_val = 2;
        cfg.batch_size = 2;
        cfg.schedule.warmup_iters = 2;
        cfg.schedule.total_iters = 3;
        cfg.eval_interval = 2;
        cfg
    }

    #[test]
    fn rows_at_interval_and_end() {
        let out = train(&tiny()).unwrap();
        let iters: Vec<usize> = out.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![2, 3]);
        assert!(out.rows.iter().all(|r| r.val_psnr.is_finite() && r.grad_norm > 0.0));
    }

    #[test]
    fn zero_iterations_returns_initialisation() {
        let mut cfg = tiny();
        cfg.schedule.warmup_iters = 0;
        cfg.schedule.total_iters = 0;
        let out = train(&cfg).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.params, build::<f32>(&cfg.model, cfg.seed).unwrap());
        assert_eq!(metrics_csv(&out.rows), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn huge_learning_rate_diverges_with_iteration() {
        let mut cfg = tiny();
        cfg.optimizer.lr = 1e30;
        cfg.schedule.warmup_iters = 0;
        cfg.schedule.total_iters = 20;
        match train(&cfg) {
            Err(HarnessError::Diverged { iter, .. }) => assert!(iter > 0 && iter < 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn restore_handles_unaligned_sizes() {
        let cfg = RunConfig::sr_default();
        let p = build::<f32>(&cfg.model, 0).unwrap();
        let x = Tensor::<f32>::full(&[1, 5, 7, 1], 0.5);
        let y = restore(&cfg.model, &p, &x).unwrap();
        assert_eq!(y.shape(), &[1, 10, 14, 1]);
    }
}
