//! Experiment configuration: a flat `key = value` format, presets and validation.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key '=' value          (whitespace around key and value is ignored)
//! ```
//!
//! Lists are comma separated. `preset` is expanded first, then every other key
//! overrides it. Flags given on the command line override the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{SkewKind, SkewSpec};
use crate::error::{FieldError, FloraError, Result};
use crate::fed_sim::Strategy;
use crate::lora::{Dim, InitKind};
use crate::training::{LossKind, TrainConfig};

pub const HETERO_RANKS: [usize; 10] = [64, 32, 16, 16, 8, 8, 4, 4, 4, 4];
/// Scaling factors re-run by `sweep-scaling`.
pub const SCALING_SWEEP: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
pub const PRESETS: [&str; 2] = ["homo16", "hetero"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub dim: Dim,
    pub k_clients: usize,
    pub ranks: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub rounds: usize,
    /// `train.seed` is ignored; per-client seeds are derived from `seed`.
    pub train: TrainConfig,
    /// `skew.seed` is ignored; the partition seed is derived from `seed`.
    pub skew: SkewSpec,
    /// Constant `p` for every client instead of data-size factors.
    pub scaling_override: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub samples: usize,
    pub noise_std: f64,
    pub teacher_rank: usize,
    pub init: InitKind,
    /// Fraction of clients sampled each round; 1 is full participation.
    pub participation: f64,
    /// Multiplier on the aggregate delta when it is merged.
    pub merge_scale: f64,
    /// Stack rank-1 pieces in a seeded random order (FLoRA only).
    pub privacy_shuffle: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            dim: Dim { m: 16, n: 16 },
            k_clients: 10,
            ranks: vec![16; 10],
            strategies: vec![Strategy::Flora],
            rounds: 3,
            train: TrainConfig::default(),
            skew: SkewSpec::default(),
            scaling_override: None,
            seed: 42,
            out: None,
            samples: 1000,
            noise_std: 0.1,
            teacher_rank: 4,
            init: InitKind::ZeroDeltaGaussian { std: 0.01 },
            participation: 1.0,
            merge_scale: 1.0,
            privacy_shuffle: false,
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let ranks = match name {
            "homo16" => vec![16; 10],
            "hetero" => HETERO_RANKS.to_vec(),
            _ => return None,
        };
        Some(ExperimentConfig {
            preset: Some(name.to_string()),
            k_clients: 10,
            ranks,
            rounds: 3,
            train: TrainConfig {
                local_epochs: 1,
                ..TrainConfig::default()
            },
            skew: SkewSpec::default()
                .with(SkewKind::FeatureShift, 1.0)
                .with(SkewKind::SizeSkew, 1.0),
            ..ExperimentConfig::default()
        })
    }

    pub fn is_homogeneous(&self) -> bool {
        self.ranks.windows(2).all(|w| w[0] == w[1])
    }

    /// Serializes every field; [`parse_config`] on the result gives back `self`.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        if let Some(p) = &self.preset {
            kv("preset", p.clone());
        }
        kv("m", self.dim.m.to_string());
        kv("n", self.dim.n.to_string());
        kv("clients", self.k_clients.to_string());
        kv("ranks", join(&self.ranks));
        kv("strategy", self.strategies.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
        kv("rounds", self.rounds.to_string());
        kv("epochs", self.train.local_epochs.to_string());
        kv("lr", format!("{:?}", self.train.learning_rate));
        kv("batch_size", self.train.batch_size.to_string());
        kv("loss", self.train.loss.name().to_string());
        kv("skew", skew_text(&self.skew));
        kv(
            "scaling_override",
            self.scaling_override.map_or("none".to_string(), |p| format!("{p:?}")),
        );
        kv("seed", self.seed.to_string());
        if let Some(out) = &self.out {
            kv("out", out.display().to_string());
        }
        kv("samples", self.samples.to_string());
        kv("noise_std", format!("{:?}", self.noise_std));
        kv("teacher_rank", self.teacher_rank.to_string());
        let (init, scale) = match self.init {
            InitKind::ZeroDeltaGaussian { std } => ("gaussian", std),
            InitKind::ZeroDeltaUniform { bound } => ("uniform", bound),
        };
        kv("init", init.to_string());
        kv("init_scale", format!("{scale:?}"));
        kv("participation", format!("{:?}", self.participation));
        kv("merge_scale", format!("{:?}", self.merge_scale));
        kv("privacy_shuffle", self.privacy_shuffle.to_string());
        s
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn skew_text(spec: &SkewSpec) -> String {
    let parts = spec.components();
    if parts.is_empty() {
        return "iid".to_string();
    }
    parts
        .iter()
        .map(|(k, s)| format!("{}:{s:?}", k.name()))
        .collect::<Vec<_>>()
        .join(",")
}

/// `(key, value)` pairs in source order, with the line they came from.
#[derive(Debug, Clone, Default)]
pub struct Entries(Vec<(String, String)>);

impl Entries {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.0.push((key.into(), value.into()));
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Self> {
        let mut out = Entries::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FloraError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            out.push(k.trim(), v.trim());
        }
        Ok(out)
    }
}

const KEYS: [&str; 24] = [
    "preset",
    "m",
    "n",
    "clients",
    "ranks",
    "strategy",
    "rounds",
    "epochs",
    "lr",
    "batch_size",
    "loss",
    "skew",
    "skew_strength",
    "scaling_override",
    "seed",
    "out",
    "samples",
    "noise_std",
    "teacher_rank",
    "init",
    "init_scale",
    "participation",
    "merge_scale",
    "privacy_shuffle",
];

struct Collector {
    errors: Vec<FieldError>,
}

impl Collector {
    fn fail(&mut self, key: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            key: key.to_string(),
            message: message.into(),
        });
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, value: &str, expected: &str) -> Option<T> {
        match value.parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.fail(key, format!("expected {expected}, found `{value}`"));
                None
            }
        }
    }

    fn positive(&mut self, key: &str, value: &str) -> Option<usize> {
        let v: usize = self.parse(key, value, "a positive integer")?;
        if v == 0 {
            self.fail(key, "expected a positive integer, found 0");
            return None;
        }
        Some(v)
    }

    fn real(&mut self, key: &str, value: &str, expected: &str, ok: impl Fn(f64) -> bool) -> Option<f64> {
        let v: f64 = self.parse(key, value, expected)?;
        if !v.is_finite() || !ok(v) {
            self.fail(key, format!("expected {expected}, found `{value}`"));
            return None;
        }
        Some(v)
    }
}

/// Parses and validates a configuration. `file` entries come first, `flags`
/// override them. Every invalid field is reported, not just the first.
pub fn parse_config(file: &Entries, flags: &Entries) -> Result<ExperimentConfig> {
    let mut c = Collector { errors: Vec::new() };
    let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in file.0.iter().chain(flags.0.iter()) {
        if KEYS.contains(&k.as_str()) {
            merged.insert(k.as_str(), v.as_str());
        } else {
            c.fail(k, format!("unknown key; expected one of {}", KEYS.join(", ")));
        }
    }

    let mut cfg = match merged.get("preset") {
        None => ExperimentConfig::default(),
        Some(name) => ExperimentConfig::preset(name).unwrap_or_else(|| {
            c.fail("preset", format!("expected one of {}, found `{name}`", PRESETS.join(", ")));
            ExperimentConfig::default()
        }),
    };

    let get = |k: &str| merged.get(k).copied();

    if let Some(v) = get("m").and_then(|v| c.positive("m", v)) {
        cfg.dim.m = v;
    }
    if let Some(v) = get("n").and_then(|v| c.positive("n", v)) {
        cfg.dim.n = v;
    }

    let clients = get("clients").and_then(|v| c.positive("clients", v));
    let ranks: Option<Vec<usize>> = get("ranks").and_then(|v| {
        let parsed: Option<Vec<usize>> = v.split(',').map(|r| r.trim().parse::<usize>().ok().filter(|&r| r > 0)).collect();
        if parsed.is_none() {
            c.fail("ranks", format!("expected a comma list of positive integers, found `{v}`"));
        }
        parsed
    });
    match (clients, ranks) {
        (Some(k), Some(r)) if r.len() == 1 => {
            cfg.k_clients = k;
            cfg.ranks = vec![r[0]; k];
        }
        (Some(k), Some(r)) => {
            if r.len() != k {
                c.fail("ranks", format!("expected {k} ranks (one per client), found {}", r.len()));
            }
            cfg.k_clients = k;
            cfg.ranks = r;
        }
        (Some(k), None) => {
            let r = if cfg.is_homogeneous() { cfg.ranks[0] } else { 16 };
            cfg.k_clients = k;
            cfg.ranks = vec![r; k];
        }
        (None, Some(r)) => {
            if r.len() == 1 {
                cfg.ranks = vec![r[0]; cfg.k_clients];
            } else {
                cfg.k_clients = r.len();
                cfg.ranks = r;
            }
        }
        (None, None) => {}
    }

    if let Some(v) = get("strategy") {
        let parsed: Option<Vec<Strategy>> = v.split(',').map(|s| Strategy::parse(s.trim())).collect();
        match parsed {
            Some(list) if !list.is_empty() => cfg.strategies = list,
            _ => c.fail(
                "strategy",
                format!("expected a comma list of flora, fedit, zero_padding, standalone, centralized; found `{v}`"),
            ),
        }
    }
    if let Some(v) = get("rounds").and_then(|v| c.parse::<usize>("rounds", v, "a nonnegative integer")) {
        cfg.rounds = v;
    }
    if let Some(v) = get("epochs").and_then(|v| c.positive("epochs", v)) {
        cfg.train.local_epochs = v;
    }
    if let Some(v) = get("lr").and_then(|v| c.real("lr", v, "a finite real >= 0", |x| x >= 0.0)) {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = get("batch_size").and_then(|v| c.positive("batch_size", v)) {
        cfg.train.batch_size = v;
    }
    if let Some(v) = get("loss") {
        match LossKind::parse(v) {
            Some(l) => cfg.train.loss = l,
            None => c.fail("loss", format!("expected squared-error or softmax-cross-entropy, found `{v}`")),
        }
    }

    let default_strength = get("skew_strength").and_then(|v| c.real("skew_strength", v, "a finite real >= 0", |x| x >= 0.0));
    match get("skew") {
        Some(v) => {
            let mut spec = SkewSpec::default();
            for part in v.split(',').map(str::trim) {
                let (name, strength) = match part.split_once(':') {
                    Some((n, s)) => (n, c.real("skew", s, "kind[:strength] with strength >= 0", |x| x >= 0.0)),
                    None => (part, Some(default_strength.unwrap_or(1.0))),
                };
                match SkewKind::parse(name) {
                    Some(kind) => {
                        if let Some(s) = strength {
                            spec = spec.with(kind, s);
                        }
                    }
                    None => c.fail(
                        "skew",
                        format!("expected iid, feature-shift, size-skew or label-skew, found `{name}`"),
                    ),
                }
            }
            cfg.skew = spec;
        }
        None => {
            if let Some(s) = default_strength {
                for (kind, _) in cfg.skew.components() {
                    cfg.skew = cfg.skew.with(kind, s);
                }
            }
        }
    }
    if cfg.skew.size_skew > 0.0 && cfg.skew.label_skew > 0.0 {
        c.fail("skew", "size-skew and label-skew cannot be combined");
    }

    if let Some(v) = get("scaling_override") {
        if v == "none" {
            cfg.scaling_override = None;
        } else if let Some(p) = c.real("scaling_override", v, "a real in (0, 1] or `none`", |x| x > 0.0 && x <= 1.0) {
            cfg.scaling_override = Some(p);
        }
    }
    if let Some(v) = get("seed").and_then(|v| c.parse::<u64>("seed", v, "an unsigned 64-bit integer")) {
        cfg.seed = v;
    }
    if let Some(v) = get("out") {
        cfg.out = (!v.is_empty()).then(|| PathBuf::from(v));
    }
    if let Some(v) = get("samples").and_then(|v| c.positive("samples", v)) {
        cfg.samples = v;
    }
    if let Some(v) = get("noise_std").and_then(|v| c.real("noise_std", v, "a finite real >= 0", |x| x >= 0.0)) {
        cfg.noise_std = v;
    }
    if let Some(v) = get("teacher_rank").and_then(|v| c.positive("teacher_rank", v)) {
        cfg.teacher_rank = v;
    }
    let scale = get("init_scale").and_then(|v| c.real("init_scale", v, "a finite real >= 0", |x| x >= 0.0));
    let kind = get("init").map(|v| match v {
        "gaussian" | "uniform" => Some(v),
        _ => {
            c.fail("init", format!("expected gaussian or uniform, found `{v}`"));
            None
        }
    });
    let (cur_kind, cur_scale) = match cfg.init {
        InitKind::ZeroDeltaGaussian { std } => ("gaussian", std),
        InitKind::ZeroDeltaUniform { bound } => ("uniform", bound),
    };
    let kind = kind.flatten().unwrap_or(cur_kind);
    let scale = scale.unwrap_or(cur_scale);
    cfg.init = if kind == "uniform" {
        InitKind::ZeroDeltaUniform { bound: scale }
    } else {
        InitKind::ZeroDeltaGaussian { std: scale }
    };
    if let Some(v) = get("participation").and_then(|v| c.real("participation", v, "a real in (0, 1]", |x| x > 0.0 && x <= 1.0)) {
        cfg.participation = v;
    }
    if let Some(v) = get("merge_scale").and_then(|v| c.real("merge_scale", v, "a finite real", |_| true)) {
        cfg.merge_scale = v;
    }
    if let Some(v) = get("privacy_shuffle").and_then(|v| c.parse::<bool>("privacy_shuffle", v, "true or false")) {
        cfg.privacy_shuffle = v;
    }

    if cfg.strategies.contains(&Strategy::Fedit) && !cfg.is_homogeneous() {
        c.fail(
            "strategy",
            format!("fedit averages factors and needs equal ranks, found {:?}", cfg.ranks),
        );
    }
    let eval = (cfg.samples as f64 * crate::data::EVAL_FRACTION).floor() as usize;
    if eval == 0 || cfg.samples - eval < cfg.k_clients {
        c.fail(
            "samples",
            format!(
                "need a nonempty evaluation split and at least one training sample per client; {} samples for {} clients",
                cfg.samples, cfg.k_clients
            ),
        );
    }

    if c.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(FloraError::Config(c.errors))
    }
}

/// Reads a config file and applies `flags` on top.
pub fn load_config(path: Option<&Path>, flags: &Entries) -> Result<ExperimentConfig> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| FloraError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            Entries::from_text(p, &text)?
        }
        None => Entries::default(),
    };
    parse_config(&file, flags)
}
