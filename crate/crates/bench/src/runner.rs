//! Seeded experiment grid: data, training, defenses, attacks, records.
//!
//! Work runs in three phases per configuration (clean training, robust
//! training, evaluation). Every task derives its random streams from the run
//! seed and the names involved, never from scheduling, so the worker count
//! does not change any number.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use csi_core::attacks::{
    apply, craft, fooling_rate, uap, AttackBudget, AttackMethod, DeepFoolConfig, Mode, Perturbation,
    UapConfig, ZERO_PSR_DB,
};
use csi_core::data::{moving_average_time, normalize, read_csib, split, synth_generate, DatasetSplit};
use csi_core::defenses::defend;
use csi_core::metrics::{macro_f1, EvalResult};
use csi_core::models::{build_model, finetune_head, pretrain_autoencoder, train_clean, Autoencoder, Model};
use csi_core::physcon::PhysOperator;
use csi_core::rng::derive_seed;
use csi_core::Tensor;
use log::{info, warn};

use crate::config::{AttackBlock, AttackKind, DataSource, DatasetConfig, DefenseBlock, ExperimentConfig, ModelBlock, NO_DEFENSE};
use crate::error::{BenchError, Result};
use crate::report::{finite, ReportRecord, CLEAN_ATTACK, STATUS_OK};

/// Wall time of one task; kept out of the records.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub seed: u64,
    pub stage: &'static str,
    pub cell: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub records: Vec<ReportRecord>,
    pub timings: Vec<Timing>,
}

/// Loads or generates the dataset for `seed`, then smooths, splits and
/// normalizes it.
pub fn prepare_data(d: &DatasetConfig, seed: u64) -> Result<DatasetSplit> {
    let mut data = match &d.source {
        DataSource::Synthetic => synth_generate(&d.channel, d.classes, d.per_class, d.dims, seed)?,
        DataSource::Csib(p) => read_csib(p)?,
    };
    if d.smooth_width > 1 {
        data = moving_average_time(&data, d.smooth_width);
    }
    let s = split(&data, d.split, seed)?;
    Ok(if d.normalize { normalize(&s)?.0 } else { s })
}

/// Builds and trains one model; tiny families pretrain their encoder first.
pub fn train_model(block: &ModelBlock, split: &DatasetSplit, seed: u64) -> Result<Model> {
    let spec = block.spec(
        split.train.dims,
        split.train.n_classes,
        derive_seed(seed, &format!("init/{}", block.name), 0),
    );
    let mut hyper = block.hyper.clone();
    hyper.seed = derive_seed(seed, &format!("train/{}", block.name), 0);
    let mut model = build_model(&spec)?;
    if block.family.is_tiny() {
        let mut ae = Autoencoder::build(&spec, hyper.contractive_lambda)?;
        pretrain_autoencoder(&mut ae, split, &hyper)?;
        finetune_head(&mut model, &ae, split, &hyper)?;
    } else {
        train_clean(&mut model, split, &hyper)?;
    }
    Ok(model)
}

/// Robust training continued from a clean model.
pub fn defend_model(clean: &Model, block: &DefenseBlock, split: &DatasetSplit, seed: u64) -> Result<Model> {
    let mut spec = block.spec.clone();
    spec.hyper.seed = derive_seed(seed, &format!("defense/{}/{}", block.name, clean.spec.name), 0);
    let mut m = clean.clone();
    defend(&mut m, split, &spec)?;
    Ok(m)
}

fn pgd_budget(a: &AttackBlock, snr_db: f64) -> AttackBudget {
    AttackBudget {
        snr_db,
        steps: a.steps,
        alpha_fraction: a.alpha_fraction,
        restarts: a.restarts,
        mode: a.mode,
        step_kind: a.step,
    }
}

/// Per-sample method for `a` at one budget; `None` for universal attacks.
pub fn attack_method(a: &AttackBlock, snr_db: f64) -> Option<AttackMethod> {
    match a.kind {
        AttackKind::Transfer => {
            let base = AttackBlock {
                kind: a.base,
                ..a.clone()
            };
            attack_method(&base, snr_db)
        }
        AttackKind::Pgd => Some(AttackMethod::Pgd(pgd_budget(a, snr_db))),
        AttackKind::PgdCorr => Some(AttackMethod::PgdCorr(pgd_budget(a, snr_db))),
        AttackKind::DeepFool => Some(AttackMethod::DeepFool(DeepFoolConfig {
            max_iter: a.max_iter,
            overshoot: a.overshoot,
            snr_db: Some(snr_db),
        })),
        AttackKind::Uap => None,
    }
}

pub fn uap_config(a: &AttackBlock, snr_db: f64) -> UapConfig {
    UapConfig {
        snr_db,
        passes: a.passes,
        fooling_target: a.fooling_target,
        aggregate: a.aggregate,
        preserve_corr: a.preserve_corr,
        norm_batches: a.norm_batches,
        batch_size: a.uap_batch_size,
        deepfool_iter: a.deepfool_iter,
        overshoot: a.overshoot,
    }
}

fn uses_targets(a: &AttackBlock) -> bool {
    matches!(a.kind, AttackKind::Pgd | AttackKind::PgdCorr)
        || (a.kind == AttackKind::Transfer && matches!(a.base, AttackKind::Pgd | AttackKind::PgdCorr))
}

fn mode_label(a: &AttackBlock) -> String {
    if uses_targets(a) {
        a.mode.to_string()
    } else {
        Mode::Untargeted.to_string()
    }
}

/// Outcome of one attack at one budget against one model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub eval: EvalResult,
    /// Targeted success rate when the mode is targeted, else the
    /// clean-correct misclassification rate.
    pub asr: f64,
    pub fooling_rate: Option<f64>,
}

fn psr_values(perts: &[Perturbation]) -> Vec<f64> {
    perts
        .iter()
        .map(|p| p.achieved_psr_db)
        .filter(|&v| v != ZERO_PSR_DB)
        .collect()
}

fn psr_of_shared(x: &Tensor, v: &Tensor) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.batch());
    for i in 0..x.batch() {
        let p = csi_core::attacks::measure_psr(x.row(i), v.data())?;
        if p != ZERO_PSR_DB {
            out.push(p);
        }
    }
    Ok(out)
}

fn targeted_rate(mode: Mode, clean: &[usize], adv: &[usize], y: &[usize], n_classes: usize) -> f64 {
    let mut hits = 0;
    let mut eligible = 0;
    for i in 0..y.len() {
        let Some(t) = mode.target_for(y[i], n_classes) else {
            continue;
        };
        if clean[i] == y[i] && t != y[i] {
            eligible += 1;
            hits += (adv[i] == t) as usize;
        }
    }
    if eligible == 0 {
        f64::NAN
    } else {
        hits as f64 / eligible as f64
    }
}

/// Attacks `target` on the test split. Transfer attacks craft on
/// `surrogate`; universal ones fit on the training split.
pub fn run_attack(
    a: &AttackBlock,
    target: &Model,
    surrogate: Option<&Model>,
    split: &DatasetSplit,
    snr_db: f64,
    seed: u64,
) -> Result<AttackOutcome> {
    let x = split.test.as_batch();
    let y = split.test.labels();
    let c = target.n_classes();
    let attack_seed = derive_seed(seed, &format!("attack/{}", a.name), snr_db.to_bits());
    let phys = if a.uses_phys() {
        Some(PhysOperator::new(&a.phys, split.train.dims, Some(&split.train.as_batch()))?)
    } else {
        None
    };
    let clean = target.predict(&x)?;
    let (adv_x, psr, fool) = match attack_method(a, snr_db) {
        Some(method) => {
            let crafter = match a.kind {
                AttackKind::Transfer => surrogate.ok_or_else(|| BenchError::Invalid("transfer without surrogate".into()))?,
                _ => target,
            };
            let ids: Vec<u64> = (0..x.batch() as u64).collect();
            let perts = craft(crafter, &x, &y, &ids, &method, phys.as_ref(), attack_seed)?;
            (apply(&x, &perts), psr_values(&perts), None)
        }
        None => {
            let fit = uap(target, &split.train.as_batch(), phys.as_ref(), &uap_config(a, snr_db), attack_seed)?;
            let mut adv = x.clone();
            for i in 0..adv.batch() {
                for (o, d) in adv.row_mut(i).iter_mut().zip(fit.v.data()) {
                    *o += d;
                }
            }
            let rate = fooling_rate(target, &x, &fit.v)?;
            (adv, psr_of_shared(&x, &fit.v)?, Some(rate))
        }
    };
    let adv = target.predict(&adv_x)?;
    let eval = EvalResult::new(&clean, &adv, &y, c, &psr, target.capacity());
    let asr = if uses_targets(a) && a.mode.is_targeted() {
        targeted_rate(a.mode, &clean, &adv, &y, c)
    } else {
        eval.asr()
    };
    Ok(AttackOutcome {
        eval,
        asr,
        fooling_rate: fool,
    })
}

/// Runs `f` over `tasks` on up to `jobs` threads; results keep task order.
pub fn pool<T: Sync, R: Send>(jobs: usize, tasks: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let r = f(&tasks[i]);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every task ran"))
        .collect()
}

fn failed(stage: &str, e: &dyn std::fmt::Display) -> String {
    format!("failed:{stage}: {e}")
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    partial: Option<Mutex<File>>,
}

impl Ctx<'_> {
    fn base_record(&self, m: &ModelBlock, defense: &str, seed: u64) -> ReportRecord {
        ReportRecord {
            dataset: self.cfg.dataset.name.clone(),
            model: m.name.clone(),
            family: m.family.to_string(),
            defense: defense.to_string(),
            attack: CLEAN_ATTACK.to_string(),
            method: CLEAN_ATTACK.to_string(),
            source: String::new(),
            mode: String::new(),
            budget_db: None,
            seed,
            clean_acc: None,
            clean_f1: None,
            asr: None,
            racc: None,
            adv_f1: None,
            mean_psr_db: None,
            capacity: None,
            asr_all: None,
            fooling_rate: None,
            status: STATUS_OK.to_string(),
        }
    }

    fn stream(&self, records: &[ReportRecord]) {
        let Some(f) = &self.partial else { return };
        let mut f = f.lock().expect("partial sink");
        for r in records {
            let line = serde_json::to_string(r).expect("records serialize");
            if let Err(e) = writeln!(f, "{line}") {
                warn!("partial results: {e}");
                return;
            }
        }
        let _ = f.flush();
    }
}

/// One (model, defense, attack) evaluation unit.
struct Cell {
    seed_ix: usize,
    model_ix: usize,
    /// `None` for the undefended baseline.
    defense_ix: Option<usize>,
    /// `None` for the clean-accuracy row.
    attack_ix: Option<usize>,
}

/// Runs the whole grid. When `partial` is set, records are appended to
/// that file as JSON lines while the run progresses.
pub fn run_experiment(cfg: &ExperimentConfig, partial: Option<&Path>) -> Result<RunOutput> {
    let jobs = cfg.run.jobs;
    let sink = match partial {
        Some(p) => Some(Mutex::new(File::create(p).map_err(|e| BenchError::io(p, e))?)),
        None => None,
    };
    let ctx = Ctx { cfg, partial: sink };
    let seeds = &cfg.run.seeds;
    let mut timings = Vec::new();

    let splits: Vec<DatasetSplit> = seeds
        .iter()
        .map(|&s| prepare_data(&cfg.dataset, s))
        .collect::<Result<_>>()?;

    let train_tasks: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..cfg.models.len()).map(move |m| (s, m)))
        .collect();
    let trained = pool(jobs, &train_tasks, |&(s, m)| {
        let t = Instant::now();
        let r = train_model(&cfg.models[m], &splits[s], seeds[s]);
        info!("seed {} trained {} in {:.1}s", seeds[s], cfg.models[m].name, t.elapsed().as_secs_f64());
        (r, t.elapsed().as_secs_f64())
    });
    let mut clean: Vec<Vec<std::result::Result<Model, String>>> = vec![Vec::new(); seeds.len()];
    for (&(s, m), (r, secs)) in train_tasks.iter().zip(trained) {
        timings.push(Timing {
            seed: seeds[s],
            stage: "train",
            cell: cfg.models[m].name.clone(),
            seconds: secs,
        });
        clean[s].push(r.map_err(|e| failed("train", &e)));
    }

    let defense_tasks: Vec<(usize, usize, usize)> = (0..seeds.len())
        .flat_map(|s| {
            (0..cfg.models.len()).flat_map(move |m| {
                (0..cfg.defenses.len())
                    .filter(move |&d| cfg.defenses[d].applies_to(&cfg.models[m].name))
                    .map(move |d| (s, m, d))
            })
        })
        .collect();
    let defended = pool(jobs, &defense_tasks, |&(s, m, d)| {
        let t = Instant::now();
        let r = match &clean[s][m] {
            Ok(model) => defend_model(model, &cfg.defenses[d], &splits[s], seeds[s]).map_err(|e| failed("defense", &e)),
            Err(e) => Err(e.clone()),
        };
        info!(
            "seed {} {} on {} in {:.1}s",
            seeds[s],
            cfg.defenses[d].name,
            cfg.models[m].name,
            t.elapsed().as_secs_f64()
        );
        (r, t.elapsed().as_secs_f64())
    });
    let mut robust = std::collections::HashMap::new();
    for (&(s, m, d), (r, secs)) in defense_tasks.iter().zip(defended) {
        timings.push(Timing {
            seed: seeds[s],
            stage: "defense",
            cell: format!("{}/{}", cfg.models[m].name, cfg.defenses[d].name),
            seconds: secs,
        });
        robust.insert((s, m, d), r);
    }
    let variant = |s: usize, m: usize, d: Option<usize>| -> &std::result::Result<Model, String> {
        match d {
            None => &clean[s][m],
            Some(d) => &robust[&(s, m, d)],
        }
    };

    let mut cells = Vec::new();
    for s in 0..seeds.len() {
        for m in 0..cfg.models.len() {
            let defs = std::iter::once(None).chain(
                (0..cfg.defenses.len())
                    .filter(|&d| cfg.defenses[d].applies_to(&cfg.models[m].name))
                    .map(Some),
            );
            for d in defs {
                let dname = d.map_or(NO_DEFENSE, |d| cfg.defenses[d].name.as_str());
                cells.push(Cell {
                    seed_ix: s,
                    model_ix: m,
                    defense_ix: d,
                    attack_ix: None,
                });
                for (a, block) in cfg.attacks.iter().enumerate() {
                    let name = &cfg.models[m].name;
                    let is_surrogate = block.kind == AttackKind::Transfer && block.surrogate == *name && block.models.is_empty();
                    if block.applies_to(name, dname) && !is_surrogate {
                        cells.push(Cell {
                            seed_ix: s,
                            model_ix: m,
                            defense_ix: d,
                            attack_ix: Some(a),
                        });
                    }
                }
            }
        }
    }

    let evaluated = pool(jobs, &cells, |cell| {
        let t = Instant::now();
        let (s, m) = (cell.seed_ix, cell.model_ix);
        let seed = seeds[s];
        let mb = &cfg.models[m];
        let dname = cell.defense_ix.map_or(NO_DEFENSE, |d| cfg.defenses[d].name.as_str());
        let base = ctx.base_record(mb, dname, seed);
        let model = variant(s, m, cell.defense_ix);
        let records = match cell.attack_ix {
            None => vec![clean_record(base, model, &splits[s])],
            Some(a) => {
                let block = &cfg.attacks[a];
                let surrogate = (block.kind == AttackKind::Transfer).then(|| {
                    let ix = cfg.models.iter().position(|x| x.name == block.surrogate).expect("validated reference");
                    &clean[s][ix]
                });
                block
                    .budgets
                    .iter()
                    .map(|&b| attack_record(base.clone(), block, model, surrogate, &splits[s], b, seed))
                    .collect()
            }
        };
        ctx.stream(&records);
        let label = cell.attack_ix.map_or(CLEAN_ATTACK, |a| cfg.attacks[a].name.as_str());
        (records, format!("{}/{}/{}", mb.name, dname, label), t.elapsed().as_secs_f64())
    });
    let mut records = Vec::new();
    for (cell, (rs, label, secs)) in cells.iter().zip(evaluated) {
        timings.push(Timing {
            seed: seeds[cell.seed_ix],
            stage: "eval",
            cell: label,
            seconds: secs,
        });
        records.extend(rs);
    }
    Ok(RunOutput { records, timings })
}

fn clean_record(mut r: ReportRecord, model: &std::result::Result<Model, String>, split: &DatasetSplit) -> ReportRecord {
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            r.status = e.clone();
            return r;
        }
    };
    r.capacity = Some(model.capacity());
    let y = split.test.labels();
    match model.predict(&split.test.as_batch()) {
        Ok(pred) => {
            let f1 = macro_f1(&pred, &y, model.n_classes());
            let acc = pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len().max(1) as f64;
            r.clean_acc = finite(acc);
            r.clean_f1 = finite(f1.macro_f1);
        }
        Err(e) => r.status = failed("eval", &e),
    }
    r
}

fn attack_record(
    mut r: ReportRecord,
    block: &AttackBlock,
    model: &std::result::Result<Model, String>,
    surrogate: Option<&std::result::Result<Model, String>>,
    split: &DatasetSplit,
    snr_db: f64,
    seed: u64,
) -> ReportRecord {
    r.attack = block.name.clone();
    r.method = match block.kind {
        AttackKind::Transfer => format!("transfer-{}", block.base),
        k => k.to_string(),
    };
    r.source = if block.kind == AttackKind::Transfer {
        block.surrogate.clone()
    } else {
        String::new()
    };
    r.mode = mode_label(block);
    r.budget_db = Some(snr_db);
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            r.status = e.clone();
            return r;
        }
    };
    r.capacity = Some(model.capacity());
    let surrogate = match surrogate {
        Some(Ok(m)) => Some(m),
        Some(Err(e)) => {
            r.status = format!("{e} (surrogate)");
            return r;
        }
        None => None,
    };
    match run_attack(block, model, surrogate, split, snr_db, seed) {
        Ok(o) => {
            r.clean_acc = finite(o.eval.clean_accuracy());
            r.clean_f1 = finite(o.eval.clean_f1.macro_f1);
            r.asr = finite(o.asr);
            r.racc = finite(1.0 - o.asr);
            r.adv_f1 = finite(o.eval.adv_f1.macro_f1);
            r.mean_psr_db = finite(o.eval.mean_psr_db);
            r.asr_all = finite(o.eval.asr_all());
            r.fooling_rate = o.fooling_rate.and_then(finite);
        }
        Err(e) => r.status = failed("attack", &e),
    }
    r
}

/// Paths written by [`write_outputs`].
#[derive(Clone, Debug, Default)]
pub struct OutputPaths {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub summary: PathBuf,
    pub config: PathBuf,
    pub timings: PathBuf,
}

/// Writes the report(s), the summary, the configuration echo and the
/// timing sidecar into `dir`.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    out: &RunOutput,
    dir: &Path,
    format: crate::report::Format,
) -> Result<OutputPaths> {
    use crate::report::{summarize, summary_csv, to_csv, to_json, write_atomic, Format};
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let echo = cfg.echo();
    let mut paths = OutputPaths {
        summary: dir.join("summary.csv"),
        config: dir.join("config.echo.cfg"),
        timings: dir.join("timings.csv"),
        ..Default::default()
    };
    if matches!(format, Format::Csv | Format::Both) {
        let p = dir.join("results.csv");
        write_atomic(&p, &to_csv(&out.records)?)?;
        paths.csv = Some(p);
    }
    if matches!(format, Format::Json | Format::Both) {
        let p = dir.join("results.json");
        write_atomic(&p, &to_json(&out.records, &echo)?)?;
        paths.json = Some(p);
    }
    write_atomic(&paths.summary, &summary_csv(&summarize(&out.records))?)?;
    write_atomic(&paths.config, &echo)?;
    let mut t = String::from("seed,stage,cell,seconds\n");
    for x in &out.timings {
        t += &format!("{},{},{},{:.3}\n", x.seed, x.stage, x.cell, x.seconds);
    }
    write_atomic(&paths.timings, &t)?;
    Ok(paths)
}
