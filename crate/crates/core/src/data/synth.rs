//! Seeded synthetic audio-visual dataset with a known latent emotion track.
//!
//! A 2-d latent `z(t)` is a leaky random walk started from its stationary
//! distribution, exponentially smoothed and squashed by `tanh`. Each stream is
//! a fixed linear embedding of the latent plus Gaussian noise:
//!
//! ```text
//! visual(t) = (z(t)   + n_v(t))·A_v      512-d
//! vggish(t) = (z(t)   + n_1(t))·A_1      128-d
//! logmel(t) = (z(t-5) + n_2(t))·A_2      128-d   (z clamped at t = 0)
//! ```
//!
//! `A_m` has orthonormal rows scaled by `√(D/2)`, so a frame carries the
//! latent's energy spread evenly over its dimensions. Noise lives in the
//! latent plane: each of the two latent coordinates receives white noise of
//! variance `E‖z‖² / snr`, with `E‖z‖²` measured over the sequence. Labels are
//! `z` itself, so `snr = ∞` gives noise-free, exactly decodable features.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::io::{write_feature_file, write_label_file, Manifest, ManifestEntry};
use super::{AlignedSample, FeatureSequence, LabelSequence, Modality};
use crate::config::FeatureDims;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frames by which the logmel stream trails the latent.
pub const LOGMEL_LAG: usize = 5;
pub const MIN_FRAMES: usize = 32;

const WALK_DECAY: f64 = 0.998;
const WALK_STEP: f64 = 0.032;
const SMOOTHING: f64 = 0.99;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `[2, d]` matrix with orthonormal rows, scaled by `√(d/2)`.
fn projection(d: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut a: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let mut b: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = norm(&a);
    a.iter_mut().for_each(|x| *x /= na);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
    let nb = norm(&b);
    let scale = (d as f64 / 2.0).sqrt();
    a.iter().zip(&b).map(|(x, y)| [x * scale, y * scale / nb]).collect()
}

fn latent(t: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let stationary = WALK_STEP / (1.0 - WALK_DECAY * WALK_DECAY).sqrt();
    let mut w = [gaussian(rng) * stationary, gaussian(rng) * stationary];
    let mut u = w;
    (0..t)
        .map(|_| {
            for k in 0..2 {
                w[k] = WALK_DECAY * w[k] + WALK_STEP * gaussian(rng);
                u[k] = SMOOTHING * u[k] + (1.0 - SMOOTHING) * w[k];
            }
            [(2.0 * u[0]).tanh(), (2.0 * u[1]).tanh()]
        })
        .collect()
}

fn embed(source: &[[f64; 2]], proj: &[[f64; 2]], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let d = proj.len();
    let mut data = Vec::with_capacity(source.len() * d);
    for z in source {
        let (c0, c1) = if sigma > 0.0 {
            (z[0] + sigma * gaussian(rng), z[1] + sigma * gaussian(rng))
        } else {
            (z[0], z[1])
        };
        data.extend(proj.iter().map(|p| (c0 * p[0] + c1 * p[1]) as f32));
    }
    Tensor::new(&[source.len(), d], data).expect("embed shape")
}

/// Generates `n_sequences` aligned samples of `frames` frames each.
///
/// `snr` may be `f64::INFINITY` for noise-free features. Sequence ids are
/// `seq_000`, `seq_001`, ….
pub fn synth_generate(n_sequences: usize, frames: usize, seed: u64, snr: f64, dims: &FeatureDims) -> Result<Vec<AlignedSample>> {
    if frames < MIN_FRAMES {
        return Err(Error::Config(format!("synthetic sequences need at least {MIN_FRAMES} frames, got {frames}")));
    }
    if snr.is_nan() || snr <= 0.0 {
        return Err(Error::Config(format!("snr must be positive, got {snr}")));
    }
    if dims.visual == 0 || dims.vggish == 0 || dims.logmel == 0 {
        return Err(Error::Config("feature dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pv = projection(dims.visual, &mut rng);
    let p1 = projection(dims.vggish, &mut rng);
    let p2 = projection(dims.logmel, &mut rng);

    let mut out = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let z = latent(frames, &mut rng);
        let energy = z.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() / frames as f64;
        let sigma = if snr.is_infinite() { 0.0 } else { (energy / snr).sqrt() };
        let lagged: Vec<[f64; 2]> = (0..frames).map(|t| z[t.saturating_sub(LOGMEL_LAG)]).collect();
        let visual = embed(&z, &pv, sigma, &mut rng);
        let vggish = embed(&z, &p1, sigma, &mut rng);
        let logmel = embed(&lagged, &p2, sigma, &mut rng);
        let labels = LabelSequence::from_raw(
            format!("seq_{i:03}"),
            z.iter().map(|v| v[0] as f32).collect(),
            z.iter().map(|v| v[1] as f32).collect(),
        )?;
        out.push(AlignedSample { sequence_id: labels.sequence_id.clone(), visual, vggish, logmel, labels });
    }
    Ok(out)
}

/// Writes feature/label files for every sample plus `manifest.csv` into `dir`
/// and returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[AlignedSample]) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for s in samples {
        let id = &s.sequence_id;
        let entry = ManifestEntry {
            sequence_id: id.clone(),
            visual: dir.join(format!("{id}.visual.bin")),
            vggish: dir.join(format!("{id}.vggish.bin")),
            logmel: dir.join(format!("{id}.logmel.bin")),
            labels: dir.join(format!("{id}.labels.csv")),
        };
        for (m, frames, path) in [
            (Modality::Visual, &s.visual, &entry.visual),
            (Modality::Vggish, &s.vggish, &entry.vggish),
            (Modality::Logmel, &s.logmel, &entry.logmel),
        ] {
            write_feature_file(path, &FeatureSequence { sequence_id: id.clone(), modality: m, frames: frames.clone() })?;
        }
        write_label_file(&entry.labels, &s.labels)?;
        manifest.entries.push(entry);
    }
    let path = dir.join("manifest.csv");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FeatureDims {
        FeatureDims { visual: 16, vggish: 8, logmel: 8 }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = synth_generate(3, 64, 5, 10.0, &small()).unwrap();
        let b = synth_generate(3, 64, 5, 10.0, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(3, 64, 6, 10.0, &small()).unwrap());
        for s in &a {
            assert_eq!(s.visual.shape(), &[64, 16]);
            assert!(s.labels.valid.iter().all(|&v| v));
            assert!(s.labels.valence.iter().chain(&s.labels.arousal).all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_short_sequences() {
        assert!(synth_generate(1, 31, 0, 10.0, &small()).is_err());
    }

    #[test]
    fn noiseless_logmel_is_lagged_visual_code() {
        let s = &synth_generate(1, 40, 1, f64::INFINITY, &small()).unwrap()[0];
        // the first LOGMEL_LAG + 1 logmel frames all encode z(0)
        let row = |t: usize| s.logmel.row(t).to_vec();
        assert_eq!(row(0), row(LOGMEL_LAG));
        assert_ne!(row(LOGMEL_LAG), row(LOGMEL_LAG + 1));
    }

    #[test]
    fn dataset_files_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(2, 40, 3, 10.0, &small()).unwrap();
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let loaded = crate::data::Dataset::load(&manifest, &small()).unwrap();
        assert_eq!(loaded.samples, samples);
    }
}
