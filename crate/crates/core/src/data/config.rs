//! Hyperparameters and the flat `key=value` config file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Pretrained-backbone scale, encoders loaded through adapters.
    Full,
    /// Desk-scale dimensions with deterministic stub encoders.
    Stub,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "stub" => Ok(Profile::Stub),
            other => Err(Error::Config(vec![format!(
                "unknown profile {other:?} (expected full or stub)"
            )])),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Stub => "stub",
        })
    }
}

/// Component removals used for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationFlag {
    /// Both visual and textual focus mapping removed.
    #[serde(rename = "no_FM")]
    NoFm,
    #[serde(rename = "no_VFM")]
    NoVfm,
    #[serde(rename = "no_TFM")]
    NoTfm,
    /// Projection replaced by mean pooling.
    #[serde(rename = "no_MGFP")]
    NoMgfp,
    #[serde(rename = "no_target_VFM")]
    NoTargetVfm,
    #[serde(rename = "no_target_MGFP")]
    NoTargetMgfp,
    /// Gated composition replaced by plain addition.
    #[serde(rename = "no_revision")]
    NoRevision,
    #[serde(rename = "no_BBC")]
    NoBbc,
    #[serde(rename = "no_FR")]
    NoFr,
}

impl AblationFlag {
    /// In the order of the ablation table, D#(1) … D#(9).
    pub const ALL: [AblationFlag; 9] = [
        AblationFlag::NoFm,
        AblationFlag::NoVfm,
        AblationFlag::NoTfm,
        AblationFlag::NoMgfp,
        AblationFlag::NoTargetVfm,
        AblationFlag::NoTargetMgfp,
        AblationFlag::NoRevision,
        AblationFlag::NoBbc,
        AblationFlag::NoFr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationFlag::NoFm => "no_FM",
            AblationFlag::NoVfm => "no_VFM",
            AblationFlag::NoTfm => "no_TFM",
            AblationFlag::NoMgfp => "no_MGFP",
            AblationFlag::NoTargetVfm => "no_target_VFM",
            AblationFlag::NoTargetMgfp => "no_target_MGFP",
            AblationFlag::NoRevision => "no_revision",
            AblationFlag::NoBbc => "no_BBC",
            AblationFlag::NoFr => "no_FR",
        }
    }
}

impl FromStr for AblationFlag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationFlag::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(vec![format!("unknown ablation flag {s:?}")]))
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything that parameterises a model and its training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub profile: Profile,
    /// Joint embedding width `D`.
    pub embed_dim: usize,
    /// Penultimate visual width `D_I`.
    pub visual_dim: usize,
    /// Visual channel (token) count `C`.
    pub visual_channels: usize,
    /// Text sequence length `S`.
    pub text_len: usize,
    /// Penultimate text width.
    pub text_dim: usize,
    /// Focus channels `P`.
    pub focus_channels: usize,
    pub tau: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub epochs: usize,
    pub ablations: BTreeSet<AblationFlag>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Treat the target focus distribution as a fixed teacher.
    pub detach_target: bool,
    pub train_backbone: bool,
    pub seed: u64,
    pub image_backbone: String,
    pub text_backbone: String,
    pub captioner: String,
    pub segmenter: String,
    pub checkpoint_root: PathBuf,
}

impl HyperConfig {
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            embed_dim: 1024,
            visual_dim: 1280,
            visual_channels: 257,
            text_len: 77,
            text_dim: 1024,
            focus_channels: 4,
            tau: 0.1,
            mu: 0.5,
            batch_size: 16,
            lr_head: 1e-4,
            lr_backbone: 1e-6,
            epochs: 10,
            ablations: BTreeSet::new(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            detach_target: false,
            train_backbone: true,
            seed: 0,
            image_backbone: "clip-vit-h-14/image".into(),
            text_backbone: "clip-vit-h-14/text".into(),
            captioner: "blip2-opt-2.7b".into(),
            segmenter: "clipseg-rd64-refined".into(),
            checkpoint_root: PathBuf::from("checkpoints"),
        }
    }

    pub fn stub() -> Self {
        Self {
            profile: Profile::Stub,
            embed_dim: 16,
            visual_dim: 32,
            visual_channels: 5,
            text_len: 8,
            text_dim: 24,
            focus_channels: 2,
            tau: 0.2,
            batch_size: 4,
            lr_head: 5e-3,
            lr_backbone: 5e-4,
            image_backbone: "stub-image".into(),
            text_backbone: "stub-text".into(),
            captioner: "stub-captioner".into(),
            segmenter: "stub-segmenter".into(),
            ..Self::full()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Full => Self::full(),
            Profile::Stub => Self::stub(),
        }
    }

    pub fn has(&self, flag: AblationFlag) -> bool {
        self.ablations.contains(&flag)
    }

    /// Applies one `key=value` setting. `profile` is not settable here;
    /// use [`HyperConfig::from_pairs`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(vec![format!("{key}: expected {what}, got {value:?}")]);
        let uint = || value.trim().parse::<usize>().map_err(|_| bad("a nonnegative integer"));
        let real = || value.trim().parse::<f64>().map_err(|_| bad("a real number"));
        let boolean = || match value.trim() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(bad("a boolean")),
        };
        match key.trim() {
            "embed_dim" | "D" => self.embed_dim = uint()?,
            "visual_dim" | "D_I" => self.visual_dim = uint()?,
            "visual_channels" | "C" => self.visual_channels = uint()?,
            "text_len" | "S" => self.text_len = uint()?,
            "text_dim" | "D_T" => self.text_dim = uint()?,
            "focus_channels" | "P" => self.focus_channels = uint()?,
            "tau" => self.tau = real()?,
            "mu" => self.mu = real()?,
            "batch_size" | "B" => self.batch_size = uint()?,
            "lr_head" => self.lr_head = real()?,
            "lr_backbone" => self.lr_backbone = real()?,
            "epochs" => self.epochs = uint()?,
            "ablate" => {
                self.ablations = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "weight_decay" => self.weight_decay = real()?,
            "beta1" => self.beta1 = real()?,
            "beta2" => self.beta2 = real()?,
            "adam_eps" => self.adam_eps = real()?,
            "grad_clip" => {
                self.grad_clip = match value.trim() {
                    "none" | "off" | "" => None,
                    _ => Some(real()?),
                }
            }
            "detach_target" => self.detach_target = boolean()?,
            "train_backbone" => self.train_backbone = boolean()?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad("an integer seed"))?,
            "image_backbone" => self.image_backbone = value.trim().into(),
            "text_backbone" => self.text_backbone = value.trim().into(),
            "captioner" => self.captioner = value.trim().into(),
            "segmenter" => self.segmenter = value.trim().into(),
            "checkpoint_root" => self.checkpoint_root = value.trim().into(),
            "profile" => {
                return Err(Error::Config(vec![
                    "profile must be chosen before other settings".into(),
                ]))
            }
            other => return Err(Error::Config(vec![format!("unknown config key {other:?}")])),
        }
        Ok(())
    }

    /// Builds a config from ordered pairs. The `profile` key (default
    /// `stub`) selects the defaults; every other key then applies in order.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k.as_ref().trim() == "profile")
            .map(|(_, v)| v.as_ref().trim().parse())
            .transpose()?
            .unwrap_or(Profile::Stub);
        let mut cfg = Self::for_profile(profile);
        for (k, v) in pairs {
            if k.as_ref().trim() != "profile" {
                cfg.set(k.as_ref(), v.as_ref())?;
            }
        }
        Ok(cfg)
    }

    /// Canonical settings, in a fixed order, that rebuild this config.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let abl: Vec<_> = self.ablations.iter().map(|f| f.name()).collect();
        vec![
            ("profile", self.profile.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("visual_dim", self.visual_dim.to_string()),
            ("visual_channels", self.visual_channels.to_string()),
            ("text_len", self.text_len.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("focus_channels", self.focus_channels.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("mu", format!("{:?}", self.mu)),
            ("batch_size", self.batch_size.to_string()),
            ("lr_head", format!("{:?}", self.lr_head)),
            ("lr_backbone", format!("{:?}", self.lr_backbone)),
            ("epochs", self.epochs.to_string()),
            ("ablate", abl.join(",")),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            (
                "grad_clip",
                self.grad_clip
                    .map_or_else(|| "none".to_string(), |c| format!("{c:?}")),
            ),
            ("detach_target", self.detach_target.to_string()),
            ("train_backbone", self.train_backbone.to_string()),
            ("seed", self.seed.to_string()),
            ("image_backbone", self.image_backbone.clone()),
            ("text_backbone", self.text_backbone.clone()),
            ("captioner", self.captioner.clone()),
            ("segmenter", self.segmenter.clone()),
            ("checkpoint_root", self.checkpoint_root.display().to_string()),
        ]
    }

    pub fn to_config_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn parse_text(text: &str, path: &Path) -> Result<Self> {
        let pairs = parse_pairs(text, path)?;
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, path)
    }
}

/// Splits `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Returns `cfg` unchanged, or every violated constraint at once.
pub fn validate_config(cfg: HyperConfig) -> Result<HyperConfig> {
    let mut errs = Vec::new();
    let dims = [
        ("D", cfg.embed_dim),
        ("D_I", cfg.visual_dim),
        ("C", cfg.visual_channels),
        ("S", cfg.text_len),
        ("D_T", cfg.text_dim),
        ("B", cfg.batch_size),
    ];
    for (name, v) in dims {
        if v == 0 {
            errs.push(format!("{name} ≥ 1"));
        }
    }
    if cfg.focus_channels == 0 {
        errs.push("P ≥ 1".into());
    }
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
        errs.push("tau > 0".into());
    }
    if !(cfg.mu >= 0.0 && cfg.mu.is_finite()) {
        errs.push("mu ≥ 0".into());
    }
    for (name, v) in [("lr_head", cfg.lr_head), ("lr_backbone", cfg.lr_backbone)] {
        if !(v >= 0.0 && v.is_finite()) {
            errs.push(format!("{name} ≥ 0"));
        }
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        errs.push("0 ≤ beta1, beta2 < 1".into());
    }
    if cfg.weight_decay.is_nan() || cfg.weight_decay < 0.0 {
        errs.push("weight_decay ≥ 0".into());
    }
    if cfg.adam_eps.is_nan() || cfg.adam_eps <= 0.0 {
        errs.push("adam_eps > 0".into());
    }
    if let Some(c) = cfg.grad_clip {
        if c.is_nan() || c <= 0.0 {
            errs.push("grad_clip > 0".into());
        }
    }
    if cfg.has(AblationFlag::NoBbc) && cfg.has(AblationFlag::NoFr) {
        errs.push("no_BBC and no_FR together leave an empty objective".into());
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}
