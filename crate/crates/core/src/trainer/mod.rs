//! End-to-end training, fold evaluation and inference.
//!
//! Training runs over overlapping windows of the training sequences. Each
//! optimizer step averages the per-window CCC loss gradients of one batch,
//! clips the global norm and applies Adam. Windows of a batch are processed in
//! parallel; their gradients are summed in batch order, so results do not
//! depend on the number of worker threads.

pub mod adam;
pub mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adam::{clip_grad_norm, global_norm, Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, load_for_config, save_checkpoint};

use crate::config::TrainConfig;
use crate::data::{eval_windows, make_windows, AlignedSample, Dataset};
use crate::error::{Error, Result};
use crate::head::clamp_predictions;
use crate::metrics::{ccc_loss, evaluate_frames, EvalReport};
use crate::model::FusionModel;
use crate::numerics::{MaskSource, Tape, Tensor};
use crate::params::ModelParams;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "AFFUSE_THREADS";

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM_BASE: u64 = 1 << 32;

/// Builds the worker pool, honouring [`THREADS_ENV`] when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-window loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub val: EvalReport,
    pub steps: usize,
    /// Windows left out of the loss because their gold labels were degenerate.
    pub skipped_windows: usize,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {:>3}  loss {:.5}  val CCC-V {:.4}  CCC-A {:.4}  P {:.4}  ({} steps, {} skipped, {:.1}s)",
            self.epoch,
            self.train_loss,
            self.val.ccc_valence,
            self.val.ccc_arousal,
            self.val.score_p,
            self.steps,
            self.skipped_windows,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation P.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_report: EvalReport,
    /// Parameters after the last epoch.
    pub last: ModelParams,
    pub log: Vec<EpochLog>,
}

struct WindowResult {
    loss: f64,
    grads: ModelParams,
}

fn window_gradient(
    model: &FusionModel,
    params: &ModelParams,
    window: &AlignedSample,
    rng: ChaCha8Rng,
) -> Result<Option<WindowResult>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut masks = MaskSource::sample(rng);
    let pred = model.forward_sample(&mut tape, &bound, window, &mut masks)?;
    let loss = match ccc_loss(&mut tape, pred, &window.gold(), window.mask()) {
        Ok(l) => l,
        Err(Error::DegenerateBatch(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let value = f64::from(tape.value(loss).item());
    if !value.is_finite() {
        return Ok(Some(WindowResult { loss: value, grads: ModelParams::new() }));
    }
    tape.backward(loss)?;
    Ok(Some(WindowResult { loss: value, grads: bound.grads(&tape, params)? }))
}

fn add_into(acc: &mut ModelParams, g: &ModelParams) {
    for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

/// Trains on every sequence outside `fold` and validates on `fold`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, fold: usize) -> Result<TrainOutcome> {
    let (train_set, val_set) = dataset.split(cfg.folds, cfg.seed, fold)?;
    train_split(cfg, &train_set, &val_set)
}

/// Trains on `train_set`, selecting the epoch that scores best on `val_set`.
pub fn train_split(cfg: &TrainConfig, train_set: &[&AlignedSample], val_set: &[&AlignedSample]) -> Result<TrainOutcome> {
    let model = FusionModel::new(cfg)?;
    if train_set.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Evaluation("validation fold is empty".into()));
    }
    for s in train_set.iter().chain(val_set) {
        model.check_sample(s)?;
    }
    let windows: Vec<AlignedSample> = train_set
        .iter()
        .map(|s| make_windows(s, cfg.window, cfg.stride))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let pool = thread_pool()?;
    let mut params: ModelParams = model.init_params(cfg.seed)?;
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps },
        &params,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelParams, usize, EvalReport)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut counted, mut skipped, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let jobs: Vec<(usize, ChaCha8Rng)> = batch
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(DROPOUT_STREAM_BASE + ((epoch as u64) << 24) + (b * cfg.batch_size + i) as u64);
                    (w, rng)
                })
                .collect();
            let results: Vec<Option<WindowResult>> = pool.install(|| {
                jobs.into_par_iter()
                    .map(|(w, rng)| window_gradient(&model, &params, &windows[w], rng))
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut grads: Option<ModelParams> = None;
            let mut used = 0usize;
            for r in results {
                let Some(r) = r else {
                    skipped += 1;
                    continue;
                };
                if !r.loss.is_finite() {
                    return Err(Error::Divergence(format!("epoch {epoch}, step {}: loss is {}", b + 1, r.loss)));
                }
                loss_sum += r.loss;
                counted += 1;
                used += 1;
                match grads.as_mut() {
                    None => grads = Some(r.grads),
                    Some(acc) => add_into(acc, &r.grads),
                }
            }
            let Some(mut grads) = grads else { continue };
            let inv = 1.0 / used as f32;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}, step {}: gradient norm is {norm}", b + 1)));
            }
            adam.step(&mut params, &grads)?;
            steps += 1;
        }
        if params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Divergence(format!("epoch {epoch}: parameters became non-finite")));
        }
        let val = pool.install(|| evaluate_samples(&model, &params, cfg, val_set))?;
        let entry = EpochLog {
            epoch,
            train_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            val,
            steps,
            skipped_windows: skipped,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", entry.line());
        let improved = best.as_ref().is_none_or(|(_, _, r)| entry.val.score_p > r.score_p);
        if improved {
            best = Some((params.clone(), epoch, entry.val));
        }
        log.push(entry);
    }
    let (best, best_epoch, best_report) = match best {
        Some(b) => b,
        None => {
            let report = pool.install(|| evaluate_samples(&model, &params, cfg, val_set))?;
            (params.clone(), 0, report)
        }
    };
    Ok(TrainOutcome { best, best_epoch, best_report, last: params, log })
}

/// Clamped `[T, 2]` predictions over a whole sequence, assembled from disjoint
/// windows of `cfg.window` frames.
pub fn predict_sample(model: &FusionModel, params: &ModelParams, cfg: &TrainConfig, sample: &AlignedSample) -> Result<Tensor> {
    let mut out = Vec::with_capacity(sample.len() * 2);
    for w in eval_windows(sample, cfg.window)? {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let y = model.forward_sample(&mut tape, &bound, &w, &mut MaskSource::Off)?;
        out.extend_from_slice(tape.value(y).data());
    }
    Ok(clamp_predictions(&Tensor::new(&[sample.len(), 2], out)?))
}

fn evaluate_samples(model: &FusionModel, params: &ModelParams, cfg: &TrainConfig, samples: &[&AlignedSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Evaluation("evaluation fold is empty".into()));
    }
    let preds = samples
        .par_iter()
        .map(|s| predict_sample(model, params, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut mask = Vec::new();
    for (p, s) in preds.iter().zip(samples) {
        pred.extend_from_slice(p.data());
        gold.extend_from_slice(s.gold().data());
        mask.extend_from_slice(s.mask());
    }
    let n = mask.len();
    evaluate_frames(&Tensor::new(&[n, 2], pred)?, &Tensor::new(&[n, 2], gold)?, &mask)
}

/// Scores `params` on the sequences of `fold`, concatenating every sequence's
/// predictions before computing CCC.
pub fn evaluate(params: &ModelParams, cfg: &TrainConfig, dataset: &Dataset, fold: usize) -> Result<EvalReport> {
    let model = FusionModel::new(cfg)?;
    params.validate(&model.parameter_specs())?;
    let (_, val) = dataset.split(cfg.folds, cfg.seed, fold)?;
    thread_pool()?.install(|| evaluate_samples(&model, params, cfg, &val))
}

/// Predicts a sequence given only its three feature streams.
pub fn predict_features(
    params: &ModelParams,
    cfg: &TrainConfig,
    visual: Tensor,
    vggish: Tensor,
    logmel: Tensor,
) -> Result<Tensor> {
    use crate::data::{align, FeatureSequence, LabelSequence, Modality};
    let model = FusionModel::new(cfg)?;
    params.validate(&model.parameter_specs())?;
    let t = visual.rows().max(vggish.rows()).max(logmel.rows());
    let stream = |m, frames| FeatureSequence { sequence_id: "input".into(), modality: m, frames };
    // placeholder labels long enough not to constrain alignment
    let labels = LabelSequence::from_raw("input", vec![0.0; t], vec![0.0; t])?;
    let aligned = align(stream(Modality::Visual, visual), stream(Modality::Vggish, vggish), stream(Modality::Logmel, logmel), labels)?;
    predict_sample(&model, params, cfg, &aligned.sample)
}

/// Writes predictions as `frame,valence,arousal`.
pub fn write_predictions(path: &std::path::Path, pred: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data { path: path.to_path_buf(), msg: e.to_string() })?;
    let err = |e: csv::Error| Error::Data { path: path.to_path_buf(), msg: e.to_string() };
    w.write_record(["frame", "valence", "arousal"]).map_err(err)?;
    for t in 0..pred.rows() {
        w.write_record([t.to_string(), pred.at(t, 0).to_string(), pred.at(t, 1).to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn tiny_setup() -> (TrainConfig, Dataset) {
        let mut cfg = TrainConfig::tiny();
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.folds = 3;
        cfg.window = 16;
        cfg.stride = 8;
        let data = Dataset::new(synth_generate(6, 40, 2, 10.0, &cfg.dims).unwrap());
        (cfg, data)
    }

    #[test]
    fn training_is_reproducible() {
        let (cfg, data) = tiny_setup();
        let a = train(&cfg, &data, 0).unwrap();
        let b = train(&cfg, &data, 0).unwrap();
        let losses = |o: &TrainOutcome| o.log.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.best, b.best);
        assert!(a.log.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let (mut cfg, data) = tiny_setup();
        cfg.lr = 0.0;
        cfg.epochs = 1;
        let out = train(&cfg, &data, 1).unwrap();
        let init: ModelParams = FusionModel::new(&cfg).unwrap().init_params(cfg.seed).unwrap();
        assert_eq!(out.last, init);
    }

    #[test]
    fn gold_as_prediction_scores_one() {
        let (_, data) = tiny_setup();
        let s = &data.samples[0];
        assert!((evaluate_frames(&s.gold(), &s.gold(), s.mask()).unwrap().score_p - 1.0).abs() < 1e-12);
        let zero = Tensor::zeros(&[s.len(), 2]);
        assert_eq!(evaluate_frames(&zero, &s.gold(), s.mask()).unwrap().score_p, 0.0);
    }

    #[test]
    fn predictions_are_clamped_and_full_length() {
        let (cfg, data) = tiny_setup();
        let model = FusionModel::new(&cfg).unwrap();
        let mut params: ModelParams = model.init_params(0).unwrap();
        *params.get_mut("head.fc2.bias").unwrap() = Tensor::new(&[2], vec![5.0, -5.0]).unwrap();
        let s = &data.samples[0];
        let p = predict_sample(&model, &params, &cfg, s).unwrap();
        assert_eq!(p.shape(), &[40, 2]);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        let q = predict_features(&params, &cfg, s.visual.clone(), s.vggish.clone(), s.logmel.clone()).unwrap();
        assert_eq!(p, q);
    }
}
