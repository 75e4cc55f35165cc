//! Training, evaluation and ablation runs.
//!
//! A run directory holds everything needed to re-evaluate it:
//!
//! ```text
//! <root>/<name>/
//!   config.txt            rendered RunConfig
//!   vocab.txt             caption vocabulary
//!   checkpoints/epoch-NNN/  parameters and optimizer state after epoch NNN
//!   losses.csv            per-epoch mean loss components
//!   steps.csv             per-step loss components
//!   report.txt, report.csv  validation metrics of the final checkpoint
//!   predictions.jsonl, captions.jsonl  the dumps those metrics come from
//!   record.json           RunRecord
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use mta_core::metrics::MetricsReport;
use mta_core::model::{LossValues, MtaModel, ScenePrediction};
use mta_core::scenegen::{generate_dataset, observed_frequencies, split_dataset, Scene, Vocabulary, CLASS_NAMES};
use mta_core::train::{mean_losses, predict_split, report_from_predictions, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{read_scenes, read_vocabulary, write_vocabulary};
use crate::dump::{read_predictions, write_predictions};
use crate::error::{HarnessError, Result};
use crate::report::{loss_cells, loss_csv, parse_loss_csv, write_report, STEP_HEADER};

/// Overrides the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "MTA_OUTPUT_ROOT";

/// Largest allowed gap between a logged total and its recomposition.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

pub fn output_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(&cfg.output))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    output_root(cfg).join(&cfg.name)
}

pub fn checkpoint_dir(run: &Path, epoch: u64) -> PathBuf {
    run.join("checkpoints").join(format!("epoch-{epoch:03}"))
}

/// Scenes of both splits plus the training-split class frequencies.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocabulary,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub class_frequencies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            _ => Err(HarnessError::Config(format!("unknown split {s:?}, expected train or val"))),
        }
    }
}

impl Data {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Loads or generates the configured dataset and splits it.
pub fn load_data(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Data> {
    let scenes = if cfg.dataset.is_empty() {
        generate_dataset(&cfg.scene_config(), cfg.scenes, cfg.data_seed)?
    } else {
        read_scenes(Path::new(&cfg.dataset), vocab)?
    };
    let perception = cfg.model_config(vocab)?.perception;
    for s in &scenes {
        if s.raster.grid != perception.grid || s.raster.channels != perception.channels {
            return Err(HarnessError::Data(format!(
                "scene {} has a {}x{}x{} raster, the model expects {}x{}x{}",
                s.id, s.raster.grid, s.raster.grid, s.raster.channels, perception.grid, perception.grid, perception.channels
            )));
        }
        if s.objects.len() > perception.queries {
            return Err(HarnessError::Data(format!(
                "scene {} holds {} objects, more than the {} detection queries",
                s.id,
                s.objects.len(),
                perception.queries
            )));
        }
    }
    let parts = split_dataset(scenes.len(), &[cfg.train_fraction, 1.0 - cfg.train_fraction], cfg.split_seed)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| scenes[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&parts[0]), pick(&parts[1]));
    if train.is_empty() {
        return Err(HarnessError::Data("training split is empty".into()));
    }
    let class_frequencies = observed_frequencies(&train);
    Ok(Data {
        vocab: vocab.clone(),
        train,
        val,
        class_frequencies,
    })
}

/// Loss components as stored in records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub det: f64,
    pub lm: f64,
    pub bla: Option<f64>,
    pub dca: Option<f64>,
    pub total: f64,
}

impl From<LossValues> for LossRow {
    fn from(v: LossValues) -> Self {
        Self {
            det: v.det,
            lm: v.lm,
            bla: v.bla,
            dca: v.dca,
            total: v.total,
        }
    }
}

impl From<LossRow> for LossValues {
    fn from(r: LossRow) -> Self {
        Self {
            det: r.det,
            lm: r.lm,
            bla: r.bla,
            dca: r.dca,
            total: r.total,
        }
    }
}

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub wall_clock_secs: f64,
    /// Training-split loss before the first step and after the last.
    pub initial_loss: LossRow,
    pub final_loss: LossRow,
    /// Per-epoch means of the per-step components.
    pub epochs: Vec<LossRow>,
    /// Validation metrics in report order.
    pub report: Vec<(String, f64)>,
}

impl RunRecord {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.report.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn load(run: &Path) -> Result<Self> {
        let path = run.join("record.json");
        let text = fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
    }
}

fn check_identity(cfg: &RunConfig, v: &LossValues, at: &str) -> Result<()> {
    let gap = (v.recompose(&cfg.loss_weights()) - v.total).abs();
    if gap > IDENTITY_TOLERANCE * v.total.abs().max(1.0) {
        return Err(HarnessError::Numerical(format!(
            "{at}: total {} differs from its weighted components by {gap:e}",
            v.total
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(HarnessError::io(path))
}

fn build(cfg: &RunConfig, vocab: &Vocabulary, steps_per_epoch: usize) -> Result<Trainer> {
    let (model, store) = MtaModel::new(cfg.model_config(vocab)?, cfg.seed, cfg.uses_alignment())?;
    Ok(Trainer::new(model, store, cfg.train_options(steps_per_epoch))?)
}

/// Mean loss over `scenes` in training-sized batches, without updates.
pub fn split_loss(trainer: &mut Trainer, scenes: &[Scene]) -> Result<LossValues> {
    let mut out = Vec::new();
    for chunk in scenes.chunks(trainer.opts.batch_scenes) {
        let batch: Vec<&Scene> = chunk.iter().collect();
        out.push(trainer.evaluate_loss(&batch)?);
    }
    Ok(mean_losses(&out))
}

/// Trains from scratch, or from the checkpoint after epoch `resume` of the
/// same run directory.
pub fn train(cfg: &RunConfig, resume: Option<u64>) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let run = run_dir(cfg);
    fs::create_dir_all(&run).map_err(HarnessError::io(&run))?;
    let vocab = Vocabulary::standard();
    let data = load_data(cfg, &vocab)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_scenes);
    let mut trainer = build(cfg, &vocab, steps_per_epoch)?;

    let mut epochs: Vec<LossValues> = Vec::new();
    let mut steps_text = format!("epoch,{STEP_HEADER}\n");
    let first = match resume {
        None => {
            write_text(&run.join("config.txt"), &cfg.render())?;
            write_vocabulary(&run.join("vocab.txt"), &vocab)?;
            0
        }
        Some(e) => {
            let saved = RunConfig::load(&run.join("config.txt"))?;
            if saved.hash() != cfg.hash() {
                return Err(HarnessError::Config(format!(
                    "{} was written by a different configuration",
                    run.display()
                )));
            }
            let ck = Checkpoint::load(&checkpoint_dir(&run, e))?;
            trainer.adam = ck.restore(&mut trainer.store)?;
            let logged = fs::read_to_string(run.join("losses.csv")).map_err(HarnessError::io(run.join("losses.csv")))?;
            epochs = parse_loss_csv(&logged)?;
            if epochs.len() < e as usize {
                return Err(HarnessError::Data(format!("loss log holds fewer than {e} epochs")));
            }
            epochs.truncate(e as usize);
            let logged_steps =
                fs::read_to_string(run.join("steps.csv")).map_err(HarnessError::io(run.join("steps.csv")))?;
            steps_text = logged_steps
                .lines()
                .take(1 + e as usize * steps_per_epoch)
                .map(|l| format!("{l}\n"))
                .collect();
            e
        }
    };
    if first >= cfg.epochs {
        warn!("run {} already holds {} epochs", cfg.name, cfg.epochs);
    }
    let initial = if first == 0 {
        let v = split_loss(&mut trainer, &data.train)?;
        write_text(&run.join("initial_loss.csv"), &loss_csv(&[v]))?;
        v
    } else {
        let p = run.join("initial_loss.csv");
        let text = fs::read_to_string(&p).map_err(HarnessError::io(&p))?;
        *parse_loss_csv(&text)?
            .first()
            .ok_or_else(|| HarnessError::Data(format!("{} is empty", p.display())))?
    };
    info!("{}: initial training loss {:.4}", cfg.name, initial.total);

    for e in first..cfg.epochs {
        let steps = trainer
            .epoch(&data.train, cfg.seed, e)
            .map_err(|err| annotate(err.into(), &format!("epoch {e}")))?;
        for (i, s) in steps.iter().enumerate() {
            check_identity(cfg, s, &format!("epoch {e} step {i}"))?;
            steps_text.push_str(&format!("{e},{i},{}\n", loss_cells(s)));
        }
        let mean = mean_losses(&steps);
        info!("{}: epoch {e} mean loss {:.4} (det {:.4}, lm {:.4})", cfg.name, mean.total, mean.det, mean.lm);
        epochs.push(mean);
        Checkpoint::capture(e + 1, &trainer.store, &trainer.adam).save(&checkpoint_dir(&run, e + 1))?;
        write_text(&run.join("losses.csv"), &loss_csv(&epochs))?;
        write_text(&run.join("steps.csv"), &steps_text)?;
    }

    let final_loss = split_loss(&mut trainer, &data.train)?;
    let report = evaluate_model(cfg, &trainer, &data, Split::Val, &run)?;
    let checkpoint_hash = Checkpoint::hash_of(&checkpoint_dir(&run, cfg.epochs))?;
    let record = RunRecord {
        name: cfg.name.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        checkpoint_hash,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        initial_loss: initial.into(),
        final_loss: final_loss.into(),
        epochs: epochs.into_iter().map(Into::into).collect(),
        report: report.entries(&CLASS_NAMES),
    };
    let json = serde_json::to_string_pretty(&record).expect("plain data serializes");
    write_text(&run.join("record.json"), &json)?;
    Ok(record)
}

fn annotate(err: HarnessError, at: &str) -> HarnessError {
    match err {
        HarnessError::Numerical(m) => HarnessError::Numerical(format!("{at}: {m}")),
        HarnessError::Data(m) => HarnessError::Data(format!("{at}: {m}")),
        HarnessError::Config(m) => HarnessError::Config(format!("{at}: {m}")),
        other => other,
    }
}

fn evaluate_model(cfg: &RunConfig, trainer: &Trainer, data: &Data, split: Split, out: &Path) -> Result<MetricsReport> {
    let scenes = data.split(split);
    if scenes.is_empty() {
        return Err(HarnessError::Data(format!("{split:?} split is empty")));
    }
    let preds = predict_split(&trainer.model, &trainer.store, scenes)?;
    let report = report_from_predictions(&preds, scenes, &data.class_frequencies, cfg.iou)?;
    if !report.is_finite() {
        return Err(HarnessError::Numerical("metrics report holds non-finite values".into()));
    }
    fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    write_predictions(&out.join("predictions.jsonl"), &out.join("captions.jsonl"), &preds, &data.vocab)?;
    write_report(out, &report)?;
    Ok(report)
}

/// Latest checkpoint directory of a run.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join("checkpoints");
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(HarnessError::io(&dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("epoch-"))
        .collect();
    names.sort();
    names
        .pop()
        .map(|n| dir.join(n))
        .ok_or_else(|| HarnessError::Data(format!("{} holds no checkpoints", dir.display())))
}

/// Re-evaluates a checkpoint on a split using only the run directory.
/// `target` is a run directory or one of its checkpoint directories; dumps
/// and reports go to `<run>/eval-<split>-<checkpoint>/`.
pub fn evaluate(target: &Path, split: Split) -> Result<(MetricsReport, PathBuf)> {
    let (run, ck_dir) = if target.join(crate::checkpoint::MANIFEST).exists() {
        let run = target
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| HarnessError::Data(format!("{} is not inside a run directory", target.display())))?;
        (run.to_path_buf(), target.to_path_buf())
    } else {
        (target.to_path_buf(), latest_checkpoint(target)?)
    };
    let cfg = RunConfig::load(&run.join("config.txt"))?;
    let vocab = read_vocabulary(&run.join("vocab.txt"))?;
    if vocab != Vocabulary::standard() {
        return Err(HarnessError::Data(
            "run vocabulary differs from the one captions are generated with".into(),
        ));
    }
    let data = load_data(&cfg, &vocab)?;
    let mut trainer = build(&cfg, &vocab, data.train.len().div_ceil(cfg.batch_scenes))?;
    let ck = Checkpoint::load(&ck_dir)?;
    trainer.adam = ck.restore(&mut trainer.store)?;
    let name = ck_dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let split_name = match split {
        Split::Train => "train",
        Split::Val => "val",
    };
    let out = run.join(format!("eval-{split_name}-{name}"));
    let report = evaluate_model(&cfg, &trainer, &data, split, &out)?;
    Ok((report, out))
}

/// Recomputes a report from dumped predictions.
pub fn report_from_dumps(dir: &Path, cfg: &RunConfig, split: Split) -> Result<MetricsReport> {
    let vocab = Vocabulary::standard();
    let data = load_data(cfg, &vocab)?;
    let preds: Vec<ScenePrediction> =
        read_predictions(&dir.join("predictions.jsonl"), &dir.join("captions.jsonl"), &vocab)?;
    Ok(report_from_predictions(&preds, data.split(split), &data.class_frequencies, cfg.iou)?)
}

/// The four rows of the module ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Baseline,
    Bla,
    Dca,
    Mta,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Baseline, Self::Bla, Self::Dca, Self::Mta];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Bla => "+BLA",
            Self::Dca => "+DCA",
            Self::Mta => "+MTA",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Bla => "bla",
            Self::Dca => "dca",
            Self::Mta => "mta",
        }
    }

    /// `base` with the alignment weights this method switches off zeroed.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Self::Baseline => {
                c.lambda_bla = 0.0;
                c.lambda_dca = 0.0;
            }
            Self::Bla => c.lambda_dca = 0.0,
            Self::Dca => c.lambda_bla = 0.0,
            Self::Mta => {}
        }
        c
    }
}

/// Metric columns of ablation tables.
pub const ABLATION_METRICS: [&str; 8] = ["mAP", "NDS", "C@0.25", "B-4@0.25", "R@0.25", "C@0.5", "B-4@0.5", "R@0.5"];

/// One table row: a variant averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<RunRecord>,
}

impl AblationRow {
    pub fn mean(&self, key: &str) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.metric(key)).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Which optional sweeps to run beside the module ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Sweeps {
    pub layers: bool,
    pub objectives: bool,
}

/// Every table an ablation produced, by file stem.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub tables: Vec<(String, Vec<AblationRow>)>,
}

impl Ablation {
    pub fn table(&self, stem: &str) -> Option<&[AblationRow]> {
        self.tables.iter().find(|(s, _)| s == stem).map(|(_, r)| r.as_slice())
    }
}

fn run_variant(base: &RunConfig, label: &str, slug: &str, seeds: &[u64]) -> Result<AblationRow> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = base.clone();
        c.seed = seed;
        c.name = format!("{}-{slug}-s{seed}", base.name);
        let run = run_dir(&c);
        let record = match RunRecord::load(&run) {
            Ok(r) if r.config_hash == c.hash() => {
                info!("reusing finished run {}", run.display());
                r
            }
            _ => train(&c, None)?,
        };
        runs.push(record);
    }
    Ok(AblationRow {
        label: label.into(),
        runs,
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("method,seeds,{}\n", ABLATION_METRICS.join(","));
    for r in rows {
        let seeds: Vec<String> = r.runs.iter().map(|x| x.seed.to_string()).collect();
        let vals: Vec<String> = ABLATION_METRICS.iter().map(|k| format!("{:.6}", r.mean(k))).collect();
        s.push_str(&format!("{},{},{}\n", r.label, seeds.join(" "), vals.join(",")));
    }
    s
}

fn runs_csv(tables: &[(String, Vec<AblationRow>)]) -> String {
    let mut s = format!("table,method,run,seed,{}\n", ABLATION_METRICS.join(","));
    for (stem, rows) in tables {
        for r in rows {
            for run in &r.runs {
                let vals: Vec<String> = ABLATION_METRICS
                    .iter()
                    .map(|k| run.metric(k).map(|v| v.to_string()).unwrap_or_default())
                    .collect();
                s.push_str(&format!("{stem},{},{},{},{}\n", r.label, run.name, run.seed, vals.join(",")));
            }
        }
    }
    s
}

/// Runs the module ablation and any requested sweeps over `seeds`, then
/// writes one CSV per table plus `runs.csv` into `<root>/<name>/`.
/// Finished runs whose configuration is unchanged are reused.
pub fn ablate(base: &RunConfig, seeds: &[u64], sweeps: Sweeps) -> Result<Ablation> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one seed".into()));
    }
    let mut tables = Vec::new();
    let mut modules = Vec::new();
    for m in Method::ALL {
        modules.push(run_variant(&m.configure(base), m.name(), m.slug(), seeds)?);
    }
    tables.push(("ablation".to_string(), modules));
    if sweeps.layers {
        let l = base.qformer_blocks;
        let mut layers: Vec<usize> = vec![1, l.div_ceil(2), l];
        layers.dedup();
        let mut rows = Vec::new();
        for ell in layers {
            let mut c = base.clone();
            c.bla_layer = ell;
            rows.push(run_variant(&c, &format!("layer {ell}"), &format!("layer{ell}"), seeds)?);
        }
        tables.push(("layers".to_string(), rows));
    }
    if sweeps.objectives {
        use mta_core::alignment::Objective;
        let all = [Objective::Mse, Objective::Cosine, Objective::Clip];
        let mut bla = Vec::new();
        for o in all {
            let mut c = base.clone();
            c.bla_objective = o;
            bla.push(run_variant(&c, o.name(), &format!("bla-{}", o.name()), seeds)?);
        }
        tables.push(("bla_objectives".to_string(), bla));
        let mut dca = Vec::new();
        for o in all {
            let mut c = base.clone();
            c.dca_objective = o;
            dca.push(run_variant(&c, o.name(), &format!("dca-{}", o.name()), seeds)?);
        }
        tables.push(("dca_objectives".to_string(), dca));
    }
    let dir = run_dir(base);
    fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    for (stem, rows) in &tables {
        write_text(&dir.join(format!("{stem}.csv")), &ablation_csv(rows))?;
    }
    write_text(&dir.join("runs.csv"), &runs_csv(&tables))?;
    Ok(Ablation { tables })
}
