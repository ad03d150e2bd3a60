//! Feature and label sequences, alignment, windowing and fold assignment.

pub mod io;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::config::FeatureDims;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{load_feature_file, load_label_file, write_feature_file, write_label_file, Manifest, ManifestEntry};
pub use synth::{synth_generate, write_dataset};

/// Relative length excess above which [`align`] warns.
pub const ALIGN_WARN_RATIO: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Vggish,
    Logmel,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Vggish, Modality::Logmel];

    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Vggish => 1,
            Modality::Logmel => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    /// Expected per-frame width under `dims`.
    pub fn width(self, dims: &FeatureDims) -> usize {
        match self {
            Modality::Visual => dims.visual,
            Modality::Vggish => dims.vggish,
            Modality::Logmel => dims.logmel,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Vggish => "vggish",
            Modality::Logmel => "logmel",
        })
    }
}

/// One modality's per-frame features, `[T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub sequence_id: String,
    pub modality: Modality,
    pub frames: Tensor<f32>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_width(&self, dims: &FeatureDims) -> Result<()> {
        let want = self.modality.width(dims);
        if self.frames.cols() != want {
            return Err(Error::dimension(format!(
                "{} features of {} are {} wide, expected {want}",
                self.modality,
                self.sequence_id,
                self.frames.cols()
            )));
        }
        Ok(())
    }
}

/// Per-frame valence/arousal with a validity mask. Frames whose raw labels fall
/// outside `[−1, 1]` (e.g. the `-5` "unannotated" sentinel) are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub sequence_id: String,
    pub valence: Vec<f32>,
    pub arousal: Vec<f32>,
    pub valid: Vec<bool>,
}

fn label_ok(v: f32) -> bool {
    v.is_finite() && (-1.0..=1.0).contains(&v)
}

impl LabelSequence {
    /// Builds the sequence, deriving validity from the raw values.
    pub fn from_raw(sequence_id: impl Into<String>, valence: Vec<f32>, arousal: Vec<f32>) -> Result<Self> {
        if valence.len() != arousal.len() {
            return Err(Error::Alignment(format!(
                "{} valence values but {} arousal values",
                valence.len(),
                arousal.len()
            )));
        }
        let valid = valence.iter().zip(&arousal).map(|(&v, &a)| label_ok(v) && label_ok(a)).collect();
        Ok(Self { sequence_id: sequence_id.into(), valence, arousal, valid })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    fn truncated(&self, t: usize) -> Self {
        self.slice(0, t)
    }

    fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            sequence_id: self.sequence_id.clone(),
            valence: self.valence[start..end].to_vec(),
            arousal: self.arousal[start..end].to_vec(),
            valid: self.valid[start..end].to_vec(),
        }
    }
}

/// Features of all three streams plus labels, sharing one time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub sequence_id: String,
    pub visual: Tensor<f32>,
    pub vggish: Tensor<f32>,
    pub logmel: Tensor<f32>,
    pub labels: LabelSequence,
}

impl AlignedSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[T, 2]` gold labels (valence, arousal); invalid frames hold zeros.
    pub fn gold(&self) -> Tensor<f32> {
        let data = (0..self.len())
            .flat_map(|t| {
                if self.labels.valid[t] {
                    [self.labels.valence[t], self.labels.arousal[t]]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect();
        Tensor::new(&[self.len(), 2], data).expect("gold shape")
    }

    pub fn mask(&self) -> &[bool] {
        &self.labels.valid
    }

    /// Frames `[start, end)` as a new sample.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            sequence_id: self.sequence_id.clone(),
            visual: self.visual.slice_rows(start, end)?,
            vggish: self.vggish.slice_rows(start, end)?,
            logmel: self.logmel.slice_rows(start, end)?,
            labels: self.labels.slice(start, end),
        })
    }

    pub fn check_dims(&self, dims: &FeatureDims) -> Result<()> {
        for (m, t) in [(Modality::Visual, &self.visual), (Modality::Vggish, &self.vggish), (Modality::Logmel, &self.logmel)] {
            if t.cols() != m.width(dims) {
                return Err(Error::dimension(format!(
                    "{m} features of {} are {} wide, config expects {}",
                    self.sequence_id,
                    t.cols(),
                    m.width(dims)
                )));
            }
        }
        Ok(())
    }
}

/// Result of [`align`]: the sample and, when lengths disagreed by more than
/// [`ALIGN_WARN_RATIO`], a description of the mismatch.
#[derive(Debug, Clone)]
pub struct Aligned {
    pub sample: AlignedSample,
    pub warning: Option<String>,
}

/// Truncates all streams and labels to their common minimum length.
pub fn align(
    visual: FeatureSequence,
    vggish: FeatureSequence,
    logmel: FeatureSequence,
    labels: LabelSequence,
) -> Result<Aligned> {
    let id = labels.sequence_id.clone();
    for (what, other) in [("visual", &visual.sequence_id), ("vggish", &vggish.sequence_id), ("logmel", &logmel.sequence_id)] {
        if *other != id {
            return Err(Error::Alignment(format!("{what} features belong to {other}, labels to {id}")));
        }
    }
    let lens = [visual.len(), vggish.len(), logmel.len(), labels.len()];
    let t = *lens.iter().min().unwrap();
    if t == 0 {
        return Err(Error::Alignment(format!("sequence {id} is empty after alignment (lengths {lens:?})")));
    }
    let max = *lens.iter().max().unwrap();
    let warning = (max as f64 > t as f64 * (1.0 + ALIGN_WARN_RATIO)).then(|| {
        let msg = format!(
            "sequence {id}: lengths visual/vggish/logmel/labels = {lens:?} differ by more than {:.0}%; truncating to {t}",
            ALIGN_WARN_RATIO * 100.0
        );
        log::warn!("{msg}");
        msg
    });
    let cut = |x: Tensor<f32>| if x.rows() == t { Ok(x) } else { x.slice_rows(0, t) };
    let sample = AlignedSample {
        sequence_id: id,
        visual: cut(visual.frames)?,
        vggish: cut(vggish.frames)?,
        logmel: cut(logmel.frames)?,
        labels: if labels.len() == t { labels } else { labels.truncated(t) },
    };
    Ok(Aligned { sample, warning })
}

/// Training window start offsets: every `stride` frames while a full window
/// fits, plus a final window anchored at `T − window` when the tail would
/// otherwise be uncovered. Sequences shorter than `window` yield one window
/// spanning the whole sequence.
pub fn window_starts(t: usize, window: usize, stride: usize) -> Vec<usize> {
    if t <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + window <= t).collect();
    let last = *starts.last().unwrap();
    if last + window < t {
        starts.push(t - window);
    }
    starts
}

/// Overlapping training windows (see [`window_starts`]).
pub fn make_windows(sample: &AlignedSample, window: usize, stride: usize) -> Result<Vec<AlignedSample>> {
    if window < 2 || stride == 0 {
        return Err(Error::Config(format!("window must be >= 2 and stride >= 1, got {window}/{stride}")));
    }
    let t = sample.len();
    window_starts(t, window, stride)
        .into_iter()
        .map(|s| sample.slice(s, (s + window).min(t)))
        .collect()
}

/// Disjoint evaluation windows; the last one keeps its true (possibly shorter) length.
pub fn eval_windows(sample: &AlignedSample, window: usize) -> Result<Vec<AlignedSample>> {
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let t = sample.len();
    (0..t).step_by(window).map(|s| sample.slice(s, (s + window).min(t))).collect()
}

fn fold_hash(seed: u64, id: &str) -> u64 {
    // FNV-1a over seed and id, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Assigns each sequence id to one of `k` folds.
///
/// Ids are ordered by a seeded hash and dealt round-robin, so the assignment is
/// deterministic, fold sizes differ by at most one, and every fold is
/// non-empty.
pub fn fold_split(ids: &[String], k: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut unique: Vec<&String> = ids.iter().collect();
    unique.sort();
    unique.dedup();
    if unique.len() < k {
        return Err(Error::Config(format!("{} sequences cannot fill {k} folds", unique.len())));
    }
    unique.sort_by_key(|id| (fold_hash(seed, id), (*id).clone()));
    Ok(unique.into_iter().enumerate().map(|(rank, id)| (id.clone(), rank % k)).collect())
}

/// A set of aligned sequences.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<AlignedSample>,
}

impl Dataset {
    pub fn new(samples: Vec<AlignedSample>) -> Self {
        Self { samples }
    }

    /// Loads and aligns every sequence listed in a manifest, checking widths
    /// against `dims`.
    pub fn load(manifest: &Path, dims: &FeatureDims) -> Result<Self> {
        let manifest = Manifest::load(manifest)?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let sample = e.load()?;
            sample.check_dims(dims)?;
            samples.push(sample);
        }
        Ok(Self { samples })
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.sequence_id.clone()).collect()
    }

    /// Splits into `(train, validation)` for the held-out `fold`.
    pub fn split(&self, folds: usize, seed: u64, fold: usize) -> Result<(Vec<&AlignedSample>, Vec<&AlignedSample>)> {
        if fold >= folds {
            return Err(Error::Config(format!("fold {fold} out of range for {folds} folds")));
        }
        let assignment = fold_split(&self.ids(), folds, seed)?;
        let (val, train): (Vec<_>, Vec<_>) = self.samples.iter().partition(|s| assignment[&s.sequence_id] == fold);
        Ok((train, val))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, m: Modality, t: usize, d: usize) -> FeatureSequence {
        let data = (0..t * d).map(|i| i as f32).collect();
        FeatureSequence { sequence_id: id.into(), modality: m, frames: Tensor::new(&[t, d], data).unwrap() }
    }

    fn labels(id: &str, t: usize) -> LabelSequence {
        let v: Vec<f32> = (0..t).map(|i| ((i as f32) * 0.1).sin()).collect();
        LabelSequence::from_raw(id, v.clone(), v).unwrap()
    }

    fn sample(t: usize) -> AlignedSample {
        align(seq("s", Modality::Visual, t, 3), seq("s", Modality::Vggish, t, 2), seq("s", Modality::Logmel, t, 2), labels("s", t))
            .unwrap()
            .sample
    }

    #[test]
    fn align_min_rule() {
        let a = align(seq("s", Modality::Visual, 100, 3), seq("s", Modality::Vggish, 100, 2), seq("s", Modality::Logmel, 100, 2), labels("s", 100)).unwrap();
        assert_eq!(a.sample.len(), 100);
        assert!(a.warning.is_none());

        let a = align(seq("s", Modality::Visual, 100, 3), seq("s", Modality::Vggish, 98, 2), seq("s", Modality::Logmel, 100, 2), labels("s", 100)).unwrap();
        assert_eq!((a.sample.visual.rows(), a.sample.vggish.rows(), a.sample.logmel.rows(), a.sample.len()), (98, 98, 98, 98));
        assert!(a.warning.is_none());

        let full = seq("s", Modality::Visual, 100, 3);
        let a = align(full.clone(), seq("s", Modality::Vggish, 50, 2), seq("s", Modality::Logmel, 100, 2), labels("s", 100)).unwrap();
        assert_eq!(a.sample.len(), 50);
        assert!(a.warning.is_some());
        assert_eq!(a.sample.visual, full.frames.slice_rows(0, 50).unwrap());
    }

    #[test]
    fn align_errors() {
        let err = align(seq("s", Modality::Visual, 4, 3), seq("t", Modality::Vggish, 4, 2), seq("s", Modality::Logmel, 4, 2), labels("s", 4)).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
        let empty = LabelSequence::from_raw("s", vec![], vec![]).unwrap();
        let err = align(seq("s", Modality::Visual, 4, 3), seq("s", Modality::Vggish, 4, 2), seq("s", Modality::Logmel, 4, 2), empty).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn sentinel_labels_are_masked() {
        let l = LabelSequence::from_raw("s", vec![0.5, -5.0, 1.0, 0.2], vec![0.1, 0.3, -1.0, 1.5]).unwrap();
        assert_eq!(l.valid, vec![true, false, true, false]);
    }

    #[test]
    fn training_windows() {
        assert_eq!(window_starts(256, 256, 128), vec![0]);
        assert_eq!(window_starts(300, 256, 128), vec![0, 44]);
        assert_eq!(window_starts(512, 256, 128), vec![0, 128, 256]);
        assert_eq!(window_starts(100, 256, 128), vec![0]);
        let w = make_windows(&sample(300), 256, 128).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|x| x.len() == 256));
        assert_eq!(w[1].visual.row(0), sample(300).visual.row(44));
    }

    #[test]
    fn eval_windows_concatenate_back() {
        let s = sample(300);
        let w = eval_windows(&s, 256).unwrap();
        assert_eq!(w.iter().map(AlignedSample::len).collect::<Vec<_>>(), vec![256, 44]);
        let rows: Vec<f32> = w.iter().flat_map(|x| x.visual.data().to_vec()).collect();
        assert_eq!(rows, s.visual.data());
    }

    #[test]
    fn folds() {
        let ids: Vec<String> = (0..600).map(|i| format!("video_{i:03}")).collect();
        let a = fold_split(&ids, 6, 17).unwrap();
        assert_eq!(a, fold_split(&ids, 6, 17).unwrap());
        let mut sizes = [0usize; 6];
        for f in a.values() {
            sizes[*f] += 1;
        }
        assert!(sizes.iter().all(|&s| (60..=140).contains(&s)), "{sizes:?}");
        assert_ne!(a, fold_split(&ids, 6, 18).unwrap());
        assert!(matches!(fold_split(&ids[..1], 6, 0), Err(Error::Config(_))));
        let few = fold_split(&ids[..6], 6, 3).unwrap();
        let mut used: Vec<usize> = few.values().copied().collect();
        used.sort_unstable();
        assert_eq!(used, vec![0, 1, 2, 3, 4, 5]);
    }
}
