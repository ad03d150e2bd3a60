//! Run configuration and its flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! lr = 0.001
//! tcn_kernel_sizes = 3,5,7
//! tcn_k7_blocks = 3      # per-branch override
//! ```
//!
//! Unknown keys are errors. [`TrainConfig::to_config_string`] writes every
//! value so that parsing it back yields an identical config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tcn::{TcnBranchConfig, DEFAULT_KERNEL_SIZES};

/// Per-frame feature widths of the three input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub visual: usize,
    pub vggish: usize,
    pub logmel: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self { visual: 512, vggish: 128, logmel: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dims: FeatureDims,
    /// Branch settings, shared by the three modality TCNs.
    pub tcn: Vec<TcnBranchConfig>,
    pub dk: usize,
    pub dv_out: usize,
    pub heads: usize,
    pub hidden: usize,
    pub head_dropout: f64,
    pub window: usize,
    pub stride: usize,
    pub folds: usize,
    /// Maximum global L2 norm of the gradient.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            dims: FeatureDims::default(),
            tcn: DEFAULT_KERNEL_SIZES.iter().map(|&k| TcnBranchConfig::new(k)).collect(),
            dk: 64,
            dv_out: 64,
            heads: 1,
            hidden: 256,
            head_dropout: 0.3,
            window: 256,
            stride: 128,
            folds: 6,
            grad_clip: 5.0,
        }
    }
}

const SCALAR_KEYS: &[&str] = &[
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "seed",
    "dim_visual",
    "dim_vggish",
    "dim_logmel",
    "tcn_kernel_sizes",
    "tcn_blocks",
    "tcn_channels",
    "tcn_dilation_base",
    "tcn_dropout",
    "attn_dk",
    "attn_dv_out",
    "attn_heads",
    "head_hidden",
    "head_dropout",
    "window",
    "stride",
    "folds",
    "grad_clip",
];

const BRANCH_FIELDS: &[&str] = &["blocks", "channels", "dilation_base", "dropout"];

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

/// `tcn_k<size>_<field>` → `(size, field)`
fn branch_override(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("tcn_k")?;
    let (size, field) = rest.split_once('_')?;
    let size = size.parse().ok()?;
    BRANCH_FIELDS.contains(&field).then_some((size, field))
}

impl TrainConfig {
    /// The small architecture used for exhaustive gradient checks:
    /// dims 8/4/4, 4 channels per branch, dk = dv_out = 4, hidden 8.
    pub fn tiny() -> Self {
        Self::default().shrunk()
    }

    /// This configuration with the tiny architecture's widths and a 10-frame
    /// window; kernel sizes, depth, dropout and seed are kept.
    pub fn shrunk(&self) -> Self {
        let mut cfg = self.clone();
        cfg.dims = FeatureDims { visual: 8, vggish: 4, logmel: 4 };
        for b in &mut cfg.tcn {
            b.channels = 4;
        }
        cfg.dk = 4;
        cfg.dv_out = 4;
        cfg.hidden = 8;
        cfg.window = 10;
        cfg.stride = 5;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [("lr", self.lr), ("adam_eps", self.adam_eps), ("grad_clip", self.grad_clip)];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) && !(name == "lr" && v == 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("dim_visual", self.dims.visual),
            ("dim_vggish", self.dims.vggish),
            ("dim_logmel", self.dims.logmel),
            ("attn_dk", self.dk),
            ("attn_dv_out", self.dv_out),
            ("attn_heads", self.heads),
            ("head_hidden", self.hidden),
            ("stride", self.stride),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", self.window)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!("head_dropout must lie in [0, 1), got {}", self.head_dropout)));
        }
        if !self.dk.is_multiple_of(self.heads) || !self.dv_out.is_multiple_of(self.heads) {
            return Err(Error::Config("attn_dk and attn_dv_out must be divisible by attn_heads".into()));
        }
        if self.tcn.is_empty() {
            return Err(Error::Config("at least one TCN branch is required".into()));
        }
        let mut sizes: Vec<usize> = self.tcn.iter().map(|b| b.kernel_size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        if sizes.len() != self.tcn.len() {
            return Err(Error::Config("TCN kernel sizes must be distinct".into()));
        }
        self.tcn.iter().try_for_each(TcnBranchConfig::validate)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !SCALAR_KEYS.contains(&key) && branch_override(key).is_none() {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }

        let mut cfg = Self::default();
        let mut template = TcnBranchConfig::new(0);
        let mut sizes: Vec<usize> = DEFAULT_KERNEL_SIZES.to_vec();
        for (key, raw) in &entries {
            let key = key.as_str();
            match key {
                "lr" => cfg.lr = parse_value(key, raw)?,
                "adam_beta1" => cfg.adam_beta1 = parse_value(key, raw)?,
                "adam_beta2" => cfg.adam_beta2 = parse_value(key, raw)?,
                "adam_eps" => cfg.adam_eps = parse_value(key, raw)?,
                "batch_size" => cfg.batch_size = parse_value(key, raw)?,
                "epochs" => cfg.epochs = parse_value(key, raw)?,
                "seed" => cfg.seed = parse_value(key, raw)?,
                "dim_visual" => cfg.dims.visual = parse_value(key, raw)?,
                "dim_vggish" => cfg.dims.vggish = parse_value(key, raw)?,
                "dim_logmel" => cfg.dims.logmel = parse_value(key, raw)?,
                "tcn_kernel_sizes" => {
                    sizes = raw.split(',').map(|s| parse_value(key, s.trim())).collect::<Result<_>>()?;
                }
                "tcn_blocks" => template.blocks = parse_value(key, raw)?,
                "tcn_channels" => template.channels = parse_value(key, raw)?,
                "tcn_dilation_base" => template.dilation_base = parse_value(key, raw)?,
                "tcn_dropout" => template.dropout_p = parse_value(key, raw)?,
                "attn_dk" => cfg.dk = parse_value(key, raw)?,
                "attn_dv_out" => cfg.dv_out = parse_value(key, raw)?,
                "attn_heads" => cfg.heads = parse_value(key, raw)?,
                "head_hidden" => cfg.hidden = parse_value(key, raw)?,
                "head_dropout" => cfg.head_dropout = parse_value(key, raw)?,
                "window" => cfg.window = parse_value(key, raw)?,
                "stride" => cfg.stride = parse_value(key, raw)?,
                "folds" => cfg.folds = parse_value(key, raw)?,
                "grad_clip" => cfg.grad_clip = parse_value(key, raw)?,
                _ => {} // branch overrides, applied below
            }
        }
        cfg.tcn = sizes.iter().map(|&k| TcnBranchConfig { kernel_size: k, ..template.clone() }).collect();
        for (key, raw) in &entries {
            let Some((size, field)) = branch_override(key) else { continue };
            let branch = cfg
                .tcn
                .iter_mut()
                .find(|b| b.kernel_size == size)
                .ok_or_else(|| Error::Config(format!("{key}: no TCN branch with kernel size {size}")))?;
            match field {
                "blocks" => branch.blocks = parse_value(key, raw)?,
                "channels" => branch.channels = parse_value(key, raw)?,
                "dilation_base" => branch.dilation_base = parse_value(key, raw)?,
                "dropout" => branch.dropout_p = parse_value(key, raw)?,
                _ => unreachable!("filtered by branch_override"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let shared = self.tcn.first().cloned().unwrap_or_else(|| TcnBranchConfig::new(3));
        let sizes: Vec<String> = self.tcn.iter().map(|b| b.kernel_size.to_string()).collect();
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dim_visual = {}", self.dims.visual);
        let _ = writeln!(s, "dim_vggish = {}", self.dims.vggish);
        let _ = writeln!(s, "dim_logmel = {}", self.dims.logmel);
        let _ = writeln!(s, "tcn_kernel_sizes = {}", sizes.join(","));
        let _ = writeln!(s, "tcn_blocks = {}", shared.blocks);
        let _ = writeln!(s, "tcn_channels = {}", shared.channels);
        let _ = writeln!(s, "tcn_dilation_base = {}", shared.dilation_base);
        let _ = writeln!(s, "tcn_dropout = {}", shared.dropout_p);
        for b in &self.tcn {
            let k = b.kernel_size;
            if b.blocks != shared.blocks {
                let _ = writeln!(s, "tcn_k{k}_blocks = {}", b.blocks);
            }
            if b.channels != shared.channels {
                let _ = writeln!(s, "tcn_k{k}_channels = {}", b.channels);
            }
            if b.dilation_base != shared.dilation_base {
                let _ = writeln!(s, "tcn_k{k}_dilation_base = {}", b.dilation_base);
            }
            if b.dropout_p.to_bits() != shared.dropout_p.to_bits() {
                let _ = writeln!(s, "tcn_k{k}_dropout = {}", b.dropout_p);
            }
        }
        let _ = writeln!(s, "attn_dk = {}", self.dk);
        let _ = writeln!(s, "attn_dv_out = {}", self.dv_out);
        let _ = writeln!(s, "attn_heads = {}", self.heads);
        let _ = writeln!(s, "head_hidden = {}", self.hidden);
        let _ = writeln!(s, "head_dropout = {}", self.head_dropout);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "folds = {}", self.folds);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        s
    }
}
