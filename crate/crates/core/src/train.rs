//! Training loop, evaluation driver and ablation runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamW, AdamWConfig, Checkpoint, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, Detection, EvalOptions, EvalReport, GroundTruth};
use crate::head::{head_loss, predict, HeadConfig, LossTerms, LossWeights, StdHead};
use crate::scenes::{Dataset, Sample};

pub const CONFIG_MAGIC: &str = "stdet-config";
pub const GRID_MAGIC: &str = "stdet-grid";
pub const FORMAT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,loss_xy,loss_alpha,loss_wh,loss_cls,total,val_mAP";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Parses `key = value` lines after a `<magic> <version>` header.
/// Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, magic: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().unwrap_or_default();
    match header.split_once(char::is_whitespace) {
        Some((m, v)) if m == magic => {
            if v.trim() != FORMAT_VERSION.to_string() {
                return Err(Error::Format(format!(
                    "unsupported {magic} version `{}`",
                    v.trim()
                )));
            }
        }
        _ => {
            return Err(Error::Format(format!(
                "expected `{magic} {FORMAT_VERSION}` header, got `{header}`"
            )))
        }
    }
    lines
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("expected key=value, got `{l}`")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub head: HeadConfig,
    pub optim: AdamWConfig,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            optim: AdamWConfig::default(),
            loss: LossWeights::default(),
            epochs: 20,
            batch_size: 16,
            seed: 0,
            train_data: PathBuf::new(),
            val_data: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.optim.lr
            )));
        }
        self.validate_training()
    }

    /// Like [`RunConfig::validate`] but accepts `lr = 0`, which programmatic
    /// callers use to freeze a model.
    pub fn validate_training(&self) -> Result<()> {
        self.head.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.optim.lr
            )));
        }
        if !(self.optim.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.loss.beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }

    /// Sets one run or head key. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let float = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        };
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "train_data" => self.train_data = PathBuf::from(value),
            "val_data" => self.val_data = Some(PathBuf::from(value)),
            "epochs" => self.epochs = int(value)? as usize,
            "batch_size" => self.batch_size = int(value)? as usize,
            "seed" => self.seed = int(value)?,
            "lr" => self.optim.lr = float(value)?,
            "weight_decay" => self.optim.weight_decay = float(value)?,
            "smooth_l1_beta" => self.loss.beta = float(value)?,
            "loss_weight_xy" => self.loss.xy = float(value)?,
            "loss_weight_alpha" => self.loss.alpha = float(value)?,
            "loss_weight_wh" => self.loss.wh = float(value)?,
            "loss_weight_cls" => self.loss.cls = float(value)?,
            _ => return self.head.set(key, value),
        }
        Ok(true)
    }

    /// Parses a config file body; relative dataset paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text, CONFIG_MAGIC)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        if let Some(base) = base {
            if cfg.train_data.is_relative() {
                cfg.train_data = base.join(&cfg.train_data);
            }
            if let Some(v) = cfg.val_data.as_mut().filter(|v| v.is_relative()) {
                *v = base.join(&*v);
            }
        }
        if cfg.train_data.as_os_str().is_empty() {
            return Err(Error::Config("config lacks `train_data`".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    /// Training hyper-parameters (no paths) as `key=value` pairs.
    pub fn run_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("lr".into(), self.optim.lr.to_string()),
            ("weight_decay".into(), self.optim.weight_decay.to_string()),
            ("smooth_l1_beta".into(), self.loss.beta.to_string()),
        ]
    }
}

/// Validation proposals plus every ground-truth box of their scenes.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub samples: Vec<Sample>,
    pub ground_truth: Vec<GroundTruth>,
    pub num_classes: usize,
}

impl EvalSet {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let ground_truth = ds
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(i, rec)| {
                rec.scene.annotations.iter().map(move |a| GroundTruth {
                    image: i,
                    class: a.class,
                    bbox: a.bbox,
                })
            })
            .collect();
        Ok(Self {
            samples: ds.samples()?,
            ground_truth,
            num_classes: ds.num_classes(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's samples, measured before each batch update.
    pub loss: LossTerms,
    pub val_map: Option<f64>,
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for e in log {
        let l = &e.loss;
        let map = e.val_map.map_or_else(String::new, |m| format!("{m:.6}"));
        writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
            e.epoch, l.xy, l.alpha, l.wh, l.cls, l.total, map
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: StdHead,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub final_report: Option<EvalReport>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut meta: Vec<(String, String)> = self
            .head
            .config()
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("head.{k}"), v))
            .collect();
        meta.extend(
            cfg.run_pairs()
                .into_iter()
                .map(|(k, v)| (format!("run.{k}"), v)),
        );
        Checkpoint {
            meta,
            params: self.store.clone(),
        }
    }
}

/// Rebuilds the head described by a checkpoint's `head.*` entries and loads its weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(StdHead, ParamStore)> {
    let pairs = ckpt
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("head.").map(|k| (k, v.as_str())));
    let config = HeadConfig::from_pairs(pairs)?;
    let mut store = ParamStore::new();
    let head = StdHead::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_from(&ckpt.params)?;
    Ok((head, store))
}

fn label_of(head: &StdHead, s: &Sample) -> Result<usize> {
    match &s.target {
        Some(t) if t.class >= head.config().num_classes => Err(Error::LabelOutOfRange {
            label: t.class,
            classes: head.config().num_classes,
        }),
        Some(t) => Ok(t.class),
        None => Ok(head.config().background_label()),
    }
}

/// Trains a fresh head. Single-threaded and deterministic given `cfg.seed`.
pub fn train_samples(
    cfg: &RunConfig,
    train: &[Sample],
    val: Option<&EvalSet>,
) -> Result<TrainOutcome> {
    cfg.validate_training()?;
    if train.is_empty() {
        return Err(Error::Config("training set has no proposals".into()));
    }
    if let Some(v) = val {
        if v.num_classes != cfg.head.num_classes {
            return Err(Error::Config(format!(
                "validation set has {} classes, head has {}",
                v.num_classes, cfg.head.num_classes
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let head = StdHead::new(cfg.head.clone(), &mut store, &mut rng)?;
    let labels = train
        .iter()
        .map(|s| label_of(&head, s))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.optim, &store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut per_sample = vec![LossTerms::default(); train.len()];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train[i];
                let grads = {
                    let mut tape = Tape::new();
                    let out = head.forward(&mut tape, &store, &s.tokens, &s.proposal)?;
                    let target = s.target.as_ref().map(|t| &t.delta);
                    let (loss, terms) = head_loss(&mut tape, &out, target, labels[i], &cfg.loss)?;
                    if !terms.total.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss {terms:?} at epoch {epoch}, sample {i} (scene {})",
                            s.scene
                        )));
                    }
                    per_sample[i] = terms;
                    let loss = tape.scale(loss, inv);
                    tape.backward(loss)?
                };
                store.accumulate(&grads);
            }
            opt.step(&mut store)?;
            if let Some((_, p)) = store
                .iter()
                .find(|(_, p)| p.value.data().iter().any(|x| !x.is_finite()))
            {
                return Err(Error::NonFinite(format!(
                    "parameter {} after step {} (epoch {epoch})",
                    p.name,
                    opt.steps()
                )));
            }
        }
        let mut mean = LossTerms::default();
        for t in &per_sample {
            mean += *t;
        }
        let val_map = match val {
            Some(v) => Some(evaluate_model(&head, &store, v, &EvalOptions::default())?.map),
            None => None,
        };
        log.push(EpochLog {
            epoch,
            loss: mean.scaled(1.0 / train.len() as f64),
            val_map,
        });
    }
    store.clear_grads();
    let final_report = match val {
        Some(v) => Some(evaluate_model(&head, &store, v, &EvalOptions::default())?),
        None => None,
    };
    Ok(TrainOutcome {
        head,
        store,
        log,
        final_report,
    })
}

/// Runs the head on every proposal and keeps the best foreground class per proposal.
pub fn detect(head: &StdHead, store: &ParamStore, samples: &[Sample]) -> Result<Vec<Detection>> {
    let fg = head.config().num_classes;
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let out = head.forward(&mut tape, store, &s.tokens, &s.proposal)?;
            let (bbox, probs) = predict(&out, &s.proposal)?;
            let (class, score) =
                probs[..fg]
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &p)| {
                        if p > best.1 {
                            (c, p)
                        } else {
                            best
                        }
                    });
            Ok(Detection {
                image: s.scene,
                class,
                bbox,
                score,
            })
        })
        .collect()
}

pub fn evaluate_model(
    head: &StdHead,
    store: &ParamStore,
    set: &EvalSet,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if set.num_classes != head.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint has {}",
            set.num_classes,
            head.config().num_classes
        )));
    }
    let dets = detect(head, store, &set.samples)?;
    evaluate_detections(&dets, &set.ground_truth, set.num_classes, opts)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

/// File-based training: reads the datasets named in `cfg`, writes
/// `metrics.csv` and `model.ckpt` into `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let train_ds = Dataset::load(&cfg.train_data)?;
    if train_ds.num_classes() != cfg.head.num_classes {
        return Err(Error::Config(format!(
            "training data has {} classes, config has {}",
            train_ds.num_classes(),
            cfg.head.num_classes
        )));
    }
    let samples = train_ds.samples()?;
    let val = match &cfg.val_data {
        Some(p) => Some(EvalSet::from_dataset(&Dataset::load(p)?)?),
        None => None,
    };
    let outcome = train_samples(cfg, &samples, val.as_ref())?;
    std::fs::create_dir_all(out_dir)?;
    write_file(
        &out_dir.join(METRICS_FILE),
        metrics_csv(&outcome.log).as_bytes(),
    )?;
    let mut buf = Vec::new();
    outcome.checkpoint(cfg).write(&mut buf)?;
    write_file(&out_dir.join(CHECKPOINT_FILE), &buf)?;
    Ok(outcome)
}

pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "iou_threshold {:.2}", report.iou_threshold).unwrap();
    for (c, r) in report.per_class.iter().enumerate() {
        writeln!(
            s,
            "class {c} AP {:.6} gt {} detections {} tp {}",
            r.ap, r.num_gt, r.num_detections, r.true_positives
        )
        .unwrap();
    }
    writeln!(s, "mAP {:.6}", report.map).unwrap();
    s
}

/// Cartesian grid of overrides on top of a base run config.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    /// Axes in declaration order; the last varies fastest.
    pub axes: Vec<(String, Vec<String>)>,
}

pub const MIN_SEEDS: usize = 3;

impl GridSpec {
    /// `seeds = 0,1,2`, `grid.<key> = a|b|c`, anything else is a base run key.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut base_lines = format!("{CONFIG_MAGIC} {FORMAT_VERSION}\n");
        let mut seeds = vec![0, 1, 2];
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (k, v) in parse_kv(text, GRID_MAGIC)? {
            if k == "seeds" {
                seeds = v
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad seed list `{v}`")))?;
            } else if let Some(key) = k.strip_prefix("grid.") {
                let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
                if values.iter().any(String::is_empty) {
                    return Err(Error::Config(format!("empty value in grid axis `{key}`")));
                }
                // validate against a scratch config so typos fail before training
                let mut probe = RunConfig::default();
                for val in &values {
                    if !probe.set(key, val)? {
                        return Err(Error::Config(format!("unknown grid key `{key}`")));
                    }
                }
                if axes.iter().any(|(a, _)| a == key) {
                    return Err(Error::Config(format!("duplicate grid axis `{key}`")));
                }
                axes.push((key.to_string(), values));
            } else {
                writeln!(base_lines, "{k}={v}").unwrap();
            }
        }
        let mut seen = seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() < MIN_SEEDS || seen.len() != seeds.len() {
            return Err(Error::Config(format!(
                "need at least {MIN_SEEDS} distinct seeds, got {seeds:?}"
            )));
        }
        let base = RunConfig::parse(&base_lines, base_dir)?;
        Ok(Self { base, seeds, axes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    /// Every combination of axis values, last axis fastest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell: Vec<(String, String)>| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn cell_config(&self, cell: &[(String, String)], seed: u64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        for (k, v) in cell {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: Vec<(String, String)>,
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axes: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for a in &self.axes {
            s.push_str(&csv_field(a));
            s.push(',');
        }
        for seed in &self.seeds {
            write!(s, "mAP_seed{seed},").unwrap();
        }
        s.push_str("mean_mAP,sd_mAP\n");
        for r in &self.rows {
            for (_, v) in &r.cell {
                s.push_str(&csv_field(v));
                s.push(',');
            }
            for m in &r.maps {
                write!(s, "{m:.6},").unwrap();
            }
            writeln!(s, "{:.6},{:.6}", r.mean, r.sd).unwrap();
        }
        s
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains and evaluates every (cell, seed) pair. Runs are independent and
/// execute in parallel; results are collected in grid order.
pub fn run_ablation(grid: &GridSpec, train: &[Sample], val: &EvalSet) -> Result<AblationTable> {
    let cells = grid.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let maps = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = grid.cell_config(&cells[c], seed)?;
            let out = train_samples(&cfg, train, Some(val))?;
            Ok(out.final_report.map_or(0.0, |r| r.map))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = cells
        .into_iter()
        .zip(maps.chunks(grid.seeds.len()))
        .map(|(cell, m)| {
            let (mean, sd) = mean_sd(m);
            AblationRow {
                cell,
                maps: m.to_vec(),
                mean,
                sd,
            }
        })
        .collect();
    Ok(AblationTable {
        axes: grid.axes.iter().map(|(k, _)| k.clone()).collect(),
        seeds: grid.seeds.clone(),
        rows,
    })
}

/// File-based ablation: writes `ablation.csv` into `out_dir`.
pub fn ablate(grid: &GridSpec, out_dir: &Path) -> Result<AblationTable> {
    let base = &grid.base;
    let val_path = base
        .val_data
        .as_ref()
        .ok_or_else(|| Error::Config("ablation grid needs `val_data`".into()))?;
    let train_ds = Dataset::load(&base.train_data)?;
    let val = EvalSet::from_dataset(&Dataset::load(val_path)?)?;
    let table = run_ablation(grid, &train_ds.samples()?, &val)?;
    std::fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join("ablation.csv"), table.to_csv().as_bytes())?;
    Ok(table)
}
