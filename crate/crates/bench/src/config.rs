//! Experiment configuration: sectioned `key = value` text.
//!
//! ```text
//! [dataset]          once
//! [model]            repeated, one per classifier
//! [attack]           repeated
//! [defense]          repeated; the undefended baseline "none" is implicit
//! [run]              once
//! ```
//!
//! `#` starts a comment. Every block is materialized with its defaults and
//! [`ExperimentConfig::echo`] writes them all back, so a parsed echo equals
//! the original configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use csi_core::attacks::{Mode, StepKind};
use csi_core::data::{ChannelParams, Dims, PdpKind};
use csi_core::defenses::{DefenseKind, DefenseSpec};
use csi_core::models::{Family, ModelSpec, TrainHyper};
use csi_core::physcon::{MmdBandwidth, PhysConfig, RxCov};

use crate::error::{BenchError, Result};

pub const NO_DEFENSE: &str = "none";

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csib(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub name: String,
    pub source: DataSource,
    /// Ignored for CSIB sources, whose header carries the shape.
    pub dims: Dims,
    pub classes: usize,
    pub per_class: usize,
    pub split: [f64; 3],
    pub normalize: bool,
    /// Moving-average width along time; 0 disables smoothing.
    pub smooth_width: usize,
    pub channel: ChannelParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            source: DataSource::Synthetic,
            dims: Dims::new(3, 30, 250),
            classes: 7,
            per_class: 60,
            split: [0.7, 0.1, 0.2],
            normalize: true,
            smooth_width: 0,
            channel: ChannelParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBlock {
    pub name: String,
    pub family: Family,
    pub width: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub time_pool: usize,
    pub hyper: TrainHyper,
}

impl ModelBlock {
    /// Concrete spec for a dataset shape.
    pub fn spec(&self, dims: Dims, n_classes: usize, seed: u64) -> ModelSpec {
        let mut s = ModelSpec::new(&self.name, self.family, dims, n_classes).with_seed(seed);
        s.width = self.width;
        s.hidden = self.hidden;
        s.latent_dim = self.latent_dim;
        s.time_pool = self.time_pool;
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Pgd,
    PgdCorr,
    DeepFool,
    Uap,
    Transfer,
}

impl FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "pgd" => Self::Pgd,
            "pgd-corr" => Self::PgdCorr,
            "deepfool" => Self::DeepFool,
            "uap" => Self::Uap,
            "transfer" => Self::Transfer,
            _ => return Err(format!("unknown method `{s}` (pgd|pgd-corr|deepfool|uap|transfer)")),
        })
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pgd => "pgd",
            Self::PgdCorr => "pgd-corr",
            Self::DeepFool => "deepfool",
            Self::Uap => "uap",
            Self::Transfer => "transfer",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackBlock {
    pub name: String,
    pub kind: AttackKind,
    pub budgets: Vec<f64>,
    pub mode: Mode,
    pub steps: usize,
    pub restarts: usize,
    pub step: StepKind,
    pub alpha_fraction: f64,
    pub max_iter: usize,
    pub overshoot: f64,
    pub passes: usize,
    pub fooling_target: f64,
    pub aggregate: bool,
    pub preserve_corr: bool,
    pub norm_batches: usize,
    pub uap_batch_size: usize,
    pub deepfool_iter: usize,
    /// Crafting method of a transfer attack: pgd or deepfool.
    pub base: AttackKind,
    pub surrogate: String,
    pub phys: PhysConfig,
    /// Restricts the attacked models; empty means all.
    pub models: Vec<String>,
    /// Restricts the attacked defense variants; empty means all.
    pub defenses: Vec<String>,
}

impl AttackBlock {
    fn new(kind: AttackKind) -> Self {
        Self {
            name: kind.to_string(),
            kind,
            budgets: vec![10.0, 20.0, 40.0],
            mode: Mode::Untargeted,
            steps: 100,
            restarts: 5,
            step: StepKind::Normalized,
            alpha_fraction: 1.0,
            max_iter: 100,
            overshoot: 0.02,
            passes: 5,
            fooling_target: 0.9,
            aggregate: false,
            preserve_corr: false,
            norm_batches: 50,
            uap_batch_size: 32,
            deepfool_iter: 10,
            base: AttackKind::Pgd,
            surrogate: String::new(),
            phys: PhysConfig::default(),
            models: Vec::new(),
            defenses: Vec::new(),
        }
    }

    /// Method whose keys apply: the base for transfer attacks.
    fn crafting(&self) -> AttackKind {
        match self.kind {
            AttackKind::Transfer => self.base,
            k => k,
        }
    }

    /// Whether crafting needs the physical-constraint operator.
    pub fn uses_phys(&self) -> bool {
        self.crafting() == AttackKind::PgdCorr || (self.kind == AttackKind::Uap && self.preserve_corr)
    }

    pub fn applies_to(&self, model: &str, defense: &str) -> bool {
        (self.models.is_empty() || self.models.iter().any(|m| m == model))
            && (self.defenses.is_empty() || self.defenses.iter().any(|d| d == defense))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseBlock {
    pub name: String,
    pub spec: DefenseSpec,
    pub models: Vec<String>,
}

impl DefenseBlock {
    pub fn applies_to(&self, model: &str) -> bool {
        self.models.is_empty() || self.models.iter().any(|m| m == model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            out: PathBuf::from("runs"),
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub models: Vec<ModelBlock>,
    pub attacks: Vec<AttackBlock>,
    pub defenses: Vec<DefenseBlock>,
    pub run: RunConfig,
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

struct Ctx<'a> {
    origin: &'a str,
}

impl Ctx<'_> {
    fn err(&self, line: usize, key: &str, detail: impl Into<String>) -> BenchError {
        BenchError::Config {
            origin: self.origin.to_string(),
            line,
            key: key.to_string(),
            detail: detail.into(),
        }
    }
}

fn split_sections(text: &str, ctx: &Ctx) -> Result<Vec<Section>> {
    let mut out: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            out.push(Section {
                name: name.trim().to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let Some((k, v)) = s.split_once('=') else {
            return Err(ctx.err(line, s, "expected `key = value`"));
        };
        let (k, v) = (k.trim(), v.trim());
        let Some(sec) = out.last_mut() else {
            return Err(ctx.err(line, k, "key outside of any [section]"));
        };
        if sec.entries.iter().any(|e| e.key == k) {
            return Err(ctx.err(line, k, "key repeated in the same block"));
        }
        sec.entries.push(Entry {
            line,
            key: k.to_string(),
            value: v.to_string(),
        });
    }
    Ok(out)
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true|false, got `{v}`")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn parse_names(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Applies a `TrainHyper` key; `None` when `key` is not one.
fn set_hyper(h: &mut TrainHyper, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
    let r = (|| {
        match key {
            "lr" => h.lr = parse(v)?,
            "weight_decay" => h.weight_decay = parse(v)?,
            "max_epochs" => h.max_epochs = parse(v)?,
            "patience" => h.patience = parse(v)?,
            "min_epochs" => h.min_epochs = parse(v)?,
            "batch_size" => h.batch_size = parse(v)?,
            "contractive_lambda" => h.contractive_lambda = parse(v)?,
            "mask_focus_fraction" => h.mask_focus_fraction = parse(v)?,
            "pretrain_epochs" => h.pretrain_epochs = parse(v)?,
            "phase_a_epochs" => h.phase_a_epochs = parse(v)?,
            "phase_b_epochs" => h.phase_b_epochs = parse(v)?,
            "head_lr" => h.head_lr = parse(v)?,
            "encoder_lr" => h.encoder_lr = parse(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    })();
    match r {
        Ok(true) => Some(Ok(())),
        Ok(false) => None,
        Err(e) => Some(Err(e)),
    }
}

fn echo_hyper(h: &TrainHyper, tiny: bool, out: &mut String) {
    let _ = writeln!(out, "lr = {}", h.lr);
    let _ = writeln!(out, "weight_decay = {}", h.weight_decay);
    let _ = writeln!(out, "max_epochs = {}", h.max_epochs);
    let _ = writeln!(out, "patience = {}", h.patience);
    let _ = writeln!(out, "min_epochs = {}", h.min_epochs);
    let _ = writeln!(out, "batch_size = {}", h.batch_size);
    if tiny {
        let _ = writeln!(out, "contractive_lambda = {}", h.contractive_lambda);
        let _ = writeln!(out, "mask_focus_fraction = {}", h.mask_focus_fraction);
        let _ = writeln!(out, "pretrain_epochs = {}", h.pretrain_epochs);
        let _ = writeln!(out, "phase_a_epochs = {}", h.phase_a_epochs);
        let _ = writeln!(out, "phase_b_epochs = {}", h.phase_b_epochs);
        let _ = writeln!(out, "head_lr = {}", h.head_lr);
        let _ = writeln!(out, "encoder_lr = {}", h.encoder_lr);
    }
}

const TINY_ONLY: &[&str] = &[
    "contractive_lambda",
    "mask_focus_fraction",
    "pretrain_epochs",
    "phase_a_epochs",
    "phase_b_epochs",
    "head_lr",
    "encoder_lr",
    "latent_dim",
    "time_pool",
];

fn set_phys(p: &mut PhysConfig, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
    let r = (|| {
        match key {
            "pdp" => p.pdp_kind = parse::<PdpKind>(v)?,
            "tau_rms" => p.tau_rms = parse(v)?,
            "subcarrier_spacing" => p.subcarrier_spacing = parse(v)?,
            "sigma_t" => p.sigma_t = parse(v)?,
            "rx_cov" => {
                p.rx_cov = match v {
                    "estimate" => RxCov::EstimateFromClean,
                    "identity" => RxCov::Identity,
                    m => RxCov::Matrix(parse_list(m)?),
                }
            }
            "ridge" => p.ridge = parse(v)?,
            "mmd_weight" => p.mmd_weight = parse(v)?,
            "mmd_bandwidth" => {
                p.mmd_bandwidth = match v {
                    "median" => MmdBandwidth::Median,
                    s => MmdBandwidth::Fixed(parse(s)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    })();
    match r {
        Ok(true) => Some(Ok(())),
        Ok(false) => None,
        Err(e) => Some(Err(e)),
    }
}

fn echo_phys(p: &PhysConfig, out: &mut String) {
    let _ = writeln!(out, "pdp = {}", p.pdp_kind);
    let _ = writeln!(out, "tau_rms = {}", p.tau_rms);
    let _ = writeln!(out, "subcarrier_spacing = {}", p.subcarrier_spacing);
    let _ = writeln!(out, "sigma_t = {}", p.sigma_t);
    let cov = match &p.rx_cov {
        RxCov::EstimateFromClean => "estimate".to_string(),
        RxCov::Identity => "identity".to_string(),
        RxCov::Matrix(m) => join(m),
    };
    let _ = writeln!(out, "rx_cov = {cov}");
    let _ = writeln!(out, "ridge = {}", p.ridge);
    let _ = writeln!(out, "mmd_weight = {}", p.mmd_weight);
    let bw = match p.mmd_bandwidth {
        MmdBandwidth::Median => "median".to_string(),
        MmdBandwidth::Fixed(s) => s.to_string(),
    };
    let _ = writeln!(out, "mmd_bandwidth = {bw}");
}

fn take<'a>(sec: &'a Section, key: &str) -> Option<&'a Entry> {
    sec.entries.iter().find(|e| e.key == key)
}

fn parse_dataset(sec: &Section, ctx: &Ctx) -> Result<DatasetConfig> {
    let mut d = DatasetConfig::default();
    for e in &sec.entries {
        let v = e.value.as_str();
        let r: std::result::Result<(), String> = (|| {
            match e.key.as_str() {
                "name" => d.name = v.to_string(),
                "source" => {
                    d.source = match v {
                        "synthetic" => DataSource::Synthetic,
                        p => DataSource::Csib(PathBuf::from(p)),
                    }
                }
                "antennas" => d.dims.antennas = parse(v)?,
                "subcarriers" => d.dims.subcarriers = parse(v)?,
                "packets" => d.dims.packets = parse(v)?,
                "classes" => d.classes = parse(v)?,
                "per_class" => d.per_class = parse(v)?,
                "split" => {
                    let r: Vec<f64> = parse_list(v)?;
                    d.split = r.try_into().map_err(|_| "expected three ratios".to_string())?;
                }
                "normalize" => d.normalize = parse_bool(v)?,
                "smooth_width" => d.smooth_width = parse(v)?,
                "pdp" => d.channel.pdp_kind = parse(v)?,
                "tau_rms" => d.channel.tau_rms = parse(v)?,
                "subcarrier_spacing" => d.channel.subcarrier_spacing = parse(v)?,
                "doppler_max" => d.channel.doppler_max = parse(v)?,
                "packet_rate" => d.channel.packet_rate = parse(v)?,
                "noise_std" => d.channel.noise_std = parse(v)?,
                _ => return Err("unknown key in [dataset]".into()),
            }
            Ok(())
        })();
        r.map_err(|m| ctx.err(e.line, &e.key, m))?;
    }
    let bad = |key: &str, m: String| {
        let line = take(sec, key).map_or(sec.line, |e| e.line);
        ctx.err(line, key, m)
    };
    d.dims.validate().map_err(|e| bad("packets", e.to_string()))?;
    if d.classes < 2 {
        return Err(bad("classes", "need at least 2 classes".into()));
    }
    if d.per_class == 0 {
        return Err(bad("per_class", "must be >= 1".into()));
    }
    d.channel.validate().map_err(|e| bad("noise_std", e.to_string()))?;
    Ok(d)
}

fn parse_model(sec: &Section, ctx: &Ctx) -> Result<ModelBlock> {
    let name = take(sec, "name").ok_or_else(|| ctx.err(sec.line, "name", "required in [model]"))?;
    let fam = take(sec, "family").ok_or_else(|| ctx.err(sec.line, "family", "required in [model]"))?;
    let family: Family = parse(&fam.value).map_err(|m| ctx.err(fam.line, "family", m))?;
    let base = ModelSpec::new(&name.value, family, Dims::new(1, 1, 1), 2);
    let mut m = ModelBlock {
        name: name.value.clone(),
        family,
        width: base.width,
        hidden: base.hidden,
        latent_dim: base.latent_dim,
        time_pool: base.time_pool,
        hyper: TrainHyper::default(),
    };
    for e in &sec.entries {
        let v = e.value.as_str();
        if !family.is_tiny() && TINY_ONLY.contains(&e.key.as_str()) {
            return Err(ctx.err(e.line, &e.key, format!("only used by tiny families, not {family}")));
        }
        let r: std::result::Result<(), String> = match e.key.as_str() {
            "name" | "family" => Ok(()),
            "width" => parse(v).map(|x| m.width = x),
            "hidden" => parse(v).map(|x| m.hidden = x),
            "latent_dim" => parse(v).map(|x| m.latent_dim = x),
            "time_pool" => parse(v).map(|x| m.time_pool = x),
            k => set_hyper(&mut m.hyper, k, v).unwrap_or_else(|| Err("unknown key in [model]".into())),
        };
        r.map_err(|msg| ctx.err(e.line, &e.key, msg))?;
    }
    let mut h = m.hyper.clone();
    h.seed = 0;
    h.validate().map_err(|e| ctx.err(sec.line, "model", e.to_string()))?;
    Ok(m)
}

const ATTACK_COMMON: &[&str] = &["name", "method", "budgets", "models", "defenses"];

fn attack_keys(a: &AttackBlock) -> Vec<&'static str> {
    let mut keys = ATTACK_COMMON.to_vec();
    if a.kind == AttackKind::Transfer {
        keys.extend(["base", "surrogate"]);
    }
    match a.crafting() {
        AttackKind::Pgd | AttackKind::PgdCorr => {
            keys.extend(["mode", "steps", "restarts", "step", "alpha_fraction"]);
        }
        AttackKind::DeepFool => keys.extend(["max_iter", "overshoot"]),
        AttackKind::Uap => keys.extend([
            "passes",
            "fooling_target",
            "aggregate",
            "preserve_corr",
            "norm_batches",
            "uap_batch_size",
            "deepfool_iter",
            "overshoot",
        ]),
        AttackKind::Transfer => {}
    }
    if a.uses_phys() {
        keys.extend([
            "pdp",
            "tau_rms",
            "subcarrier_spacing",
            "sigma_t",
            "rx_cov",
            "ridge",
            "mmd_weight",
            "mmd_bandwidth",
        ]);
    }
    keys
}

fn parse_attack(sec: &Section, ctx: &Ctx) -> Result<AttackBlock> {
    let method = take(sec, "method").ok_or_else(|| ctx.err(sec.line, "method", "required in [attack]"))?;
    let kind: AttackKind = parse(&method.value).map_err(|m| ctx.err(method.line, "method", m))?;
    let mut a = AttackBlock::new(kind);
    // keys that change which other keys apply go first
    for key in ["base", "preserve_corr"] {
        if let Some(e) = take(sec, key) {
            let r = match key {
                "base" => parse::<AttackKind>(&e.value).and_then(|b| match b {
                    AttackKind::Pgd | AttackKind::PgdCorr | AttackKind::DeepFool => {
                        a.base = b;
                        Ok(())
                    }
                    _ => Err("transfer base must be pgd, pgd-corr or deepfool".into()),
                }),
                _ => parse_bool(&e.value).map(|b| a.preserve_corr = b),
            };
            r.map_err(|m| ctx.err(e.line, key, m))?;
        }
    }
    let allowed = attack_keys(&a);
    for e in &sec.entries {
        let v = e.value.as_str();
        if !allowed.contains(&e.key.as_str()) {
            return Err(ctx.err(e.line, &e.key, format!("unknown key for method {kind}")));
        }
        let r: std::result::Result<(), String> = (|| {
            match e.key.as_str() {
                "method" | "base" | "preserve_corr" => {}
                "name" => a.name = v.to_string(),
                "budgets" => a.budgets = parse_list(v)?,
                "models" => a.models = parse_names(v),
                "defenses" => a.defenses = parse_names(v),
                "surrogate" => a.surrogate = v.to_string(),
                "mode" => a.mode = parse(v)?,
                "steps" => a.steps = parse(v)?,
                "restarts" => a.restarts = parse(v)?,
                "step" => a.step = parse(v)?,
                "alpha_fraction" => a.alpha_fraction = parse(v)?,
                "max_iter" => a.max_iter = parse(v)?,
                "overshoot" => a.overshoot = parse(v)?,
                "passes" => a.passes = parse(v)?,
                "fooling_target" => a.fooling_target = parse(v)?,
                "aggregate" => a.aggregate = parse_bool(v)?,
                "norm_batches" => a.norm_batches = parse(v)?,
                "uap_batch_size" => a.uap_batch_size = parse(v)?,
                "deepfool_iter" => a.deepfool_iter = parse(v)?,
                k => set_phys(&mut a.phys, k, v).unwrap_or_else(|| Err("unknown key".into()))?,
            }
            Ok(())
        })();
        r.map_err(|m| ctx.err(e.line, &e.key, m))?;
    }
    let line_of = |key: &str| take(sec, key).map_or(sec.line, |e| e.line);
    if a.budgets.is_empty() {
        return Err(ctx.err(line_of("budgets"), "budgets", "at least one budget"));
    }
    if let Some(b) = a.budgets.iter().find(|b| !(0.0..=80.0).contains(*b)) {
        return Err(ctx.err(line_of("budgets"), "budgets", format!("{b} dB outside [0, 80]")));
    }
    if a.steps == 0 || a.restarts == 0 || a.max_iter == 0 || a.passes == 0 {
        return Err(ctx.err(sec.line, "steps", "iteration counts must be >= 1"));
    }
    if !(0.0..=1.0).contains(&a.fooling_target) {
        return Err(ctx.err(line_of("fooling_target"), "fooling_target", "must lie in [0, 1]"));
    }
    if kind == AttackKind::Transfer && a.surrogate.is_empty() {
        return Err(ctx.err(sec.line, "surrogate", "required for transfer"));
    }
    a.phys
        .validate()
        .map_err(|e| ctx.err(sec.line, "phys", e.to_string()))?;
    Ok(a)
}

fn parse_defense(sec: &Section, ctx: &Ctx) -> Result<DefenseBlock> {
    let kind = take(sec, "kind").ok_or_else(|| ctx.err(sec.line, "kind", "required in [defense]"))?;
    let k: DefenseKind = parse(&kind.value).map_err(|m| ctx.err(kind.line, "kind", m))?;
    let mut d = DefenseBlock {
        name: k.to_string(),
        spec: DefenseSpec::new(k),
        models: Vec::new(),
    };
    for e in &sec.entries {
        let v = e.value.as_str();
        let s = &mut d.spec;
        let r: std::result::Result<(), String> = match e.key.as_str() {
            "kind" => Ok(()),
            "name" => {
                d.name = v.to_string();
                Ok(())
            }
            "models" => {
                d.models = parse_names(v);
                Ok(())
            }
            "train_snr_db" => parse(v).map(|x| s.train_snr_db = x),
            "inner_steps" => parse(v).map(|x| s.inner_steps = x),
            "inner_restarts" => parse(v).map(|x| s.inner_restarts = x),
            "val_steps" => parse(v).map(|x| s.val_steps = x),
            "beta" if k == DefenseKind::Trades => parse(v).map(|x| s.beta = x),
            key if TINY_ONLY.contains(&key) => Err("not a robust-training key".into()),
            key => set_hyper(&mut s.hyper, key, v)
                .unwrap_or_else(|| Err(format!("unknown key for defense {k}"))),
        };
        r.map_err(|m| ctx.err(e.line, &e.key, m))?;
    }
    if d.name == NO_DEFENSE {
        return Err(ctx.err(sec.line, "name", "`none` is reserved for the undefended baseline"));
    }
    d.spec
        .validate()
        .map_err(|e| ctx.err(sec.line, "defense", e.to_string()))?;
    Ok(d)
}

fn parse_run(sec: &Section, ctx: &Ctx) -> Result<RunConfig> {
    let mut r = RunConfig::default();
    for e in &sec.entries {
        let v = e.value.as_str();
        let res: std::result::Result<(), String> = match e.key.as_str() {
            "seeds" => parse_list(v).map(|s| r.seeds = s),
            "out" => {
                r.out = PathBuf::from(v);
                Ok(())
            }
            "jobs" => parse(v).map(|j| r.jobs = j),
            _ => Err("unknown key in [run]".into()),
        };
        res.map_err(|m| ctx.err(e.line, &e.key, m))?;
    }
    if r.seeds.is_empty() {
        return Err(ctx.err(sec.line, "seeds", "at least one seed"));
    }
    if r.jobs == 0 {
        return Err(ctx.err(sec.line, "jobs", "must be >= 1"));
    }
    Ok(r)
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let ctx = Ctx { origin };
        let mut dataset = None;
        let mut run = None;
        let (mut models, mut attacks, mut defenses) = (Vec::new(), Vec::new(), Vec::new());
        for sec in split_sections(text, &ctx)? {
            match sec.name.as_str() {
                "dataset" | "run" => {
                    let slot_taken = if sec.name == "dataset" {
                        dataset.is_some()
                    } else {
                        run.is_some()
                    };
                    if slot_taken {
                        return Err(ctx.err(sec.line, &sec.name, "section may appear only once"));
                    }
                    if sec.name == "dataset" {
                        dataset = Some(parse_dataset(&sec, &ctx)?);
                    } else {
                        run = Some(parse_run(&sec, &ctx)?);
                    }
                }
                "model" => models.push((sec.line, parse_model(&sec, &ctx)?)),
                "attack" => attacks.push((sec.line, parse_attack(&sec, &ctx)?)),
                "defense" => defenses.push((sec.line, parse_defense(&sec, &ctx)?)),
                other => return Err(ctx.err(sec.line, other, "unknown section")),
            }
        }
        if models.is_empty() {
            return Err(ctx.err(0, "model", "at least one [model] block is required"));
        }
        if attacks.is_empty() {
            return Err(ctx.err(0, "attack", "at least one [attack] block is required"));
        }
        let unique = |names: Vec<(usize, &str)>, what: &str| -> Result<()> {
            let mut seen = BTreeSet::new();
            for (line, n) in names {
                if !seen.insert(n) {
                    return Err(ctx.err(line, "name", format!("duplicate {what} name `{n}`")));
                }
            }
            Ok(())
        };
        unique(models.iter().map(|(l, m)| (*l, m.name.as_str())).collect(), "model")?;
        unique(attacks.iter().map(|(l, a)| (*l, a.name.as_str())).collect(), "attack")?;
        unique(defenses.iter().map(|(l, d)| (*l, d.name.as_str())).collect(), "defense")?;

        let model_names: BTreeSet<&str> = models.iter().map(|(_, m)| m.name.as_str()).collect();
        let mut defense_names: BTreeSet<&str> = defenses.iter().map(|(_, d)| d.name.as_str()).collect();
        defense_names.insert(NO_DEFENSE);
        for (line, a) in &attacks {
            for m in a.models.iter().chain(a.kind.eq(&AttackKind::Transfer).then_some(&a.surrogate)) {
                if !model_names.contains(m.as_str()) {
                    return Err(ctx.err(*line, "models", format!("attack `{}` names unknown model `{m}`", a.name)));
                }
            }
            if let Some(d) = a.defenses.iter().find(|d| !defense_names.contains(d.as_str())) {
                return Err(ctx.err(*line, "defenses", format!("attack `{}` names unknown defense `{d}`", a.name)));
            }
        }
        for (line, d) in &defenses {
            if let Some(m) = d.models.iter().find(|m| !model_names.contains(m.as_str())) {
                return Err(ctx.err(*line, "models", format!("defense `{}` names unknown model `{m}`", d.name)));
            }
        }
        Ok(Self {
            dataset: dataset.unwrap_or_default(),
            models: models.into_iter().map(|(_, m)| m).collect(),
            attacks: attacks.into_iter().map(|(_, a)| a).collect(),
            defenses: defenses.into_iter().map(|(_, d)| d).collect(),
            run: run.unwrap_or_default(),
        })
    }

    /// Canonical text with every default spelled out.
    pub fn echo(&self) -> String {
        let mut o = String::new();
        let d = &self.dataset;
        let _ = writeln!(o, "[dataset]");
        let _ = writeln!(o, "name = {}", d.name);
        match &d.source {
            DataSource::Synthetic => {
                let _ = writeln!(o, "source = synthetic");
                let _ = writeln!(o, "antennas = {}", d.dims.antennas);
                let _ = writeln!(o, "subcarriers = {}", d.dims.subcarriers);
                let _ = writeln!(o, "packets = {}", d.dims.packets);
                let _ = writeln!(o, "classes = {}", d.classes);
                let _ = writeln!(o, "per_class = {}", d.per_class);
                let c = &d.channel;
                let _ = writeln!(o, "pdp = {}", c.pdp_kind);
                let _ = writeln!(o, "tau_rms = {}", c.tau_rms);
                let _ = writeln!(o, "subcarrier_spacing = {}", c.subcarrier_spacing);
                let _ = writeln!(o, "doppler_max = {}", c.doppler_max);
                let _ = writeln!(o, "packet_rate = {}", c.packet_rate);
                let _ = writeln!(o, "noise_std = {}", c.noise_std);
            }
            DataSource::Csib(p) => {
                let _ = writeln!(o, "source = {}", p.display());
            }
        }
        let _ = writeln!(o, "split = {}", join(&d.split));
        let _ = writeln!(o, "normalize = {}", d.normalize);
        let _ = writeln!(o, "smooth_width = {}", d.smooth_width);

        for m in &self.models {
            let _ = writeln!(o, "\n[model]");
            let _ = writeln!(o, "name = {}", m.name);
            let _ = writeln!(o, "family = {}", m.family);
            if m.family != Family::Linear {
                let _ = writeln!(o, "width = {}", m.width);
                let _ = writeln!(o, "hidden = {}", m.hidden);
            }
            if m.family.is_tiny() {
                let _ = writeln!(o, "latent_dim = {}", m.latent_dim);
                let _ = writeln!(o, "time_pool = {}", m.time_pool);
            }
            echo_hyper(&m.hyper, m.family.is_tiny(), &mut o);
        }
        for a in &self.attacks {
            let _ = writeln!(o, "\n[attack]");
            for key in attack_keys(a) {
                let v = match key {
                    "name" => a.name.clone(),
                    "method" => a.kind.to_string(),
                    "budgets" => join(&a.budgets),
                    "models" => a.models.join(","),
                    "defenses" => a.defenses.join(","),
                    "base" => a.base.to_string(),
                    "surrogate" => a.surrogate.clone(),
                    "mode" => a.mode.to_string(),
                    "steps" => a.steps.to_string(),
                    "restarts" => a.restarts.to_string(),
                    "step" => a.step.to_string(),
                    "alpha_fraction" => a.alpha_fraction.to_string(),
                    "max_iter" => a.max_iter.to_string(),
                    "overshoot" => a.overshoot.to_string(),
                    "passes" => a.passes.to_string(),
                    "fooling_target" => a.fooling_target.to_string(),
                    "aggregate" => a.aggregate.to_string(),
                    "preserve_corr" => a.preserve_corr.to_string(),
                    "norm_batches" => a.norm_batches.to_string(),
                    "uap_batch_size" => a.uap_batch_size.to_string(),
                    "deepfool_iter" => a.deepfool_iter.to_string(),
                    // physical keys are echoed as a group below
                    _ => continue,
                };
                let _ = writeln!(o, "{key} = {v}");
            }
            if a.uses_phys() {
                echo_phys(&a.phys, &mut o);
            }
        }
        for d in &self.defenses {
            let s = &d.spec;
            let _ = writeln!(o, "\n[defense]");
            let _ = writeln!(o, "name = {}", d.name);
            let _ = writeln!(o, "kind = {}", s.kind);
            let _ = writeln!(o, "models = {}", d.models.join(","));
            let _ = writeln!(o, "train_snr_db = {}", s.train_snr_db);
            let _ = writeln!(o, "inner_steps = {}", s.inner_steps);
            let _ = writeln!(o, "inner_restarts = {}", s.inner_restarts);
            if s.kind == DefenseKind::Trades {
                let _ = writeln!(o, "beta = {}", s.beta);
            }
            let _ = writeln!(o, "val_steps = {}", s.val_steps);
            echo_hyper(&s.hyper, false, &mut o);
        }
        let _ = writeln!(o, "\n[run]");
        let _ = writeln!(o, "seeds = {}", join(&self.run.seeds));
        let _ = writeln!(o, "out = {}", self.run.out.display());
        let _ = writeln!(o, "jobs = {}", self.run.jobs);
        o
    }

    pub fn model(&self, name: &str) -> Option<&ModelBlock> {
        self.models.iter().find(|m| m.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nname = m\nfamily = large-gru\n\n[attack]\nmethod = pgd\n";

    #[test]
    fn minimal_config_materializes_defaults() {
        let c = ExperimentConfig::parse(MINIMAL, "t").unwrap();
        assert_eq!(c.run.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(c.attacks[0].budgets, vec![10.0, 20.0, 40.0]);
        assert_eq!(c.models[0].hidden, 128);
        let echo = c.echo();
        assert!(echo.contains("restarts = 5"));
        assert_eq!(ExperimentConfig::parse(&echo, "echo").unwrap(), c);
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = ExperimentConfig::parse(&format!("{MINIMAL}budgets = 10,99\n"), "t").unwrap_err();
        assert!(matches!(&e, BenchError::Config { line: 7, key, .. } if key == "budgets"), "{e}");
        let e = ExperimentConfig::parse(&format!("{MINIMAL}colour = red\n"), "t").unwrap_err();
        assert!(matches!(&e, BenchError::Config { line: 7, key, .. } if key == "colour"), "{e}");
        let dup = format!("{MINIMAL}[model]\nname = m\nfamily = linear\n");
        let e = ExperimentConfig::parse(&dup, "t").unwrap_err();
        assert!(e.to_string().contains("duplicate model name `m`"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }
}
