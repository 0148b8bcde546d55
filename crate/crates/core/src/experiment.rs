//! End-to-end experiment orchestration: setting construction, training,
//! scoring and evaluation for a list of seeds, plus the head ablation
//! matrix and the η / |𝓟| sweeps. Every stage error carries its stage name.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{build_setting, default_eta_per_class, load_dataset, OpenSetDataset, Setting};
use crate::error::StageExt;
use crate::eval::{evaluate, EvalReport, Metrics};
use crate::plot::write_plots;
use crate::scoring::{score_windows, write_scores_csv, ScoreTriple, ScoredSample, ScoringContext, DEFAULT_REFERENCE_SIZE};
use crate::trainer::{train, write_config, Checkpoint, TrainConfig, TrainOutput};
use crate::{Error, Heads, Result};

fn default_seeds() -> Vec<u64> {
    vec![123]
}

fn default_reference_size() -> usize {
    DEFAULT_REFERENCE_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub manifest: PathBuf,
    pub setting: Setting,
    /// Labelled anomalies in total; `None` applies the 0.1%-per-class rule.
    #[serde(default)]
    pub eta: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Scores summed into `s`; `None` uses the trained heads.
    #[serde(default)]
    pub score_mask: Option<Heads>,
    #[serde(default = "default_reference_size")]
    pub reference_size: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn new(manifest: impl Into<PathBuf>, setting: Setting, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentSpec {
            manifest: manifest.into(),
            setting,
            eta: None,
            seeds: default_seeds(),
            score_mask: None,
            reference_size: DEFAULT_REFERENCE_SIZE,
            out_dir: out_dir.into(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seed list must not be empty".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("seed list contains duplicates".into()));
        }
        if self.setting.is_unsupervised() && self.eta.is_some_and(|e| e > 0) {
            return Err(Error::Setting("the unsupervised setting takes no labelled anomalies (eta must be 0)".into()));
        }
        if !self.setting.is_unsupervised() && self.eta == Some(0) {
            return Err(Error::Setting("eta must be positive in open-set settings".into()));
        }
        if self.reference_size == 0 {
            return Err(Error::InvalidArgument("reference set size must be positive".into()));
        }
        if self.score_mask.is_some_and(|m| m.is_empty()) {
            return Err(Error::InvalidArgument("score mask must not be empty".into()));
        }
        self.train.validate()
    }

    /// η actually used on `base`.
    pub fn resolved_eta(&self, base: &OpenSetDataset) -> usize {
        let per_class = default_eta_per_class(base.normal_pool().len());
        match (&self.setting, self.eta) {
            (Setting::Unsupervised, _) => 0,
            (_, Some(eta)) => eta,
            (Setting::General, None) => per_class * base.all_classes().len(),
            (Setting::Hard(_), None) => per_class,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("cannot serialise spec: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad experiment spec: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// A score may only use a trained head, except `s_rec`, whose decoder is
/// always present.
pub fn check_masks(head_mask: Heads, score_mask: Heads) -> Result<()> {
    if head_mask.is_empty() || score_mask.is_empty() {
        return Err(Error::InvalidArgument(format!("empty mask in ({head_mask}, {score_mask})")));
    }
    if !score_mask.is_subset(&head_mask.union(Heads::REC)) {
        return Err(Error::InvalidArgument(format!(
            "score mask {score_mask} uses a head that is not trained under {head_mask}"
        )));
    }
    Ok(())
}

/// A trained model together with its scoring context and the full score
/// triples on the test pool.
pub struct TrainedRun {
    pub dataset: OpenSetDataset,
    pub output: TrainOutput,
    pub context: ScoringContext,
    pub triples: Vec<ScoreTriple>,
}

impl TrainedRun {
    pub fn scored(&self, mask: Heads) -> Vec<ScoredSample> {
        self.dataset.test_pool().iter().zip(&self.triples).map(|(w, t)| ScoredSample::new(w, t.with_mask(mask))).collect()
    }

    pub fn report(&self, mask: Heads) -> Result<EvalReport> {
        evaluate(&self.scored(mask), Some(self.dataset.seen_classes())).stage("eval")
    }

    /// Re-scores the test pool with a fresh reference set of `size`.
    pub fn rescore_with_reference(&self, size: usize, seed: u64) -> Result<Vec<ScoreTriple>> {
        let ctx = ScoringContext::draw(&self.output.model, &self.output.train_normals, size, seed, self.output.normalizer)
            .stage("score")?;
        score_windows(&self.output.model, self.dataset.test_pool(), &ctx, Heads::ALL).stage("score")
    }

    /// Writes checkpoint, config, logs, scoring context, scores, report and
    /// plots into `dir`.
    pub fn write_artifacts(&self, dir: &Path, mask: Heads) -> Result<EvalReport> {
        let io = |p: &Path, e| Error::io(p, e);
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e)).stage("write")?;
        let log = &self.output.log;
        let tc = &self.output.config;
        write_config(tc, &dir.join("config.toml")).stage("write")?;
        log.write_steps_csv(&dir.join("train_steps.csv")).stage("write")?;
        log.write_epochs_csv(&dir.join("train_epochs.csv")).stage("write")?;
        let ckpt = Checkpoint::new(
            self.output.model.clone(),
            self.output.normalizer,
            tc.clone(),
            self.output.heads,
            self.dataset.setting().clone(),
            self.dataset.seen_classes().clone(),
        );
        ckpt.save(&dir.join("checkpoint.json")).stage("write")?;
        let ctx_path = dir.join("context.json");
        let text = serde_json::to_string(&self.context).map_err(|e| Error::Checkpoint(e.to_string())).stage("write")?;
        std::fs::write(&ctx_path, text).map_err(|e| io(&ctx_path, e)).stage("write")?;

        let rows = self.scored(mask);
        write_scores_csv(&dir.join("scores.csv"), &rows).stage("score")?;
        let report = evaluate(&rows, Some(self.dataset.seen_classes())).stage("eval")?;
        report.write(dir).stage("eval")?;
        write_plots(&dir.join("plots"), &rows).stage("plot")?;
        Ok(report)
    }
}

/// Builds the setting, trains, fits the scoring context and scores the test pool.
pub fn train_and_score(
    base: &OpenSetDataset,
    setting: &Setting,
    eta: usize,
    config: &TrainConfig,
    reference_size: usize,
) -> Result<TrainedRun> {
    let dataset = build_setting(base, setting, eta, config.seed).stage("prepare")?;
    let output = train(&dataset, config).stage("train")?;
    let context =
        ScoringContext::draw(&output.model, &output.train_normals, reference_size, config.seed, output.normalizer)
            .stage("score")?;
    let triples = score_windows(&output.model, dataset.test_pool(), &context, Heads::ALL).stage("score")?;
    Ok(TrainedRun { dataset, output, context, triples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Mean and standard deviation of every metric over `reports`. Sub-reports
/// absent from some seeds are aggregated over the seeds that have them.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    let mut push = |name: &str, m: Option<Metrics>| {
        let idx = match cols.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                cols.push((name.to_string(), Vec::new()));
                cols.len() - 1
            }
        };
        if let Some(m) = m {
            cols[idx].1.push(m.auc);
        }
        let apr_name = name.replace("auc", "apr");
        let idx = match cols.iter().position(|(n, _)| *n == apr_name) {
            Some(i) => i,
            None => {
                cols.push((apr_name, Vec::new()));
                cols.len() - 1
            }
        };
        if let Some(m) = m {
            cols[idx].1.push(m.apr);
        }
    };
    for r in reports {
        push("auc", Some(r.overall()));
        push("seen_auc", r.seen);
        push("unseen_auc", r.unseen);
        push("normal_auc", r.normal);
    }
    cols.into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(metric, v)| {
            let (mean, std) = mean_std(&v);
            AggregateRow { metric, mean, std, n: v.len() }
        })
        .collect()
}

fn write_aggregate(dir: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut csv = String::from("metric,mean,std,n\n");
    let mut txt = format!("{:<12} {:>8} {:>8} {:>4}\n", "metric", "mean", "std", "n");
    for r in rows {
        let _ = writeln!(csv, "{},{},{},{}", r.metric, r.mean, r.std, r.n);
        let _ = writeln!(txt, "{:<12} {:>8.4} {:>8.4} {:>4}", r.metric, r.mean, r.std, r.n);
    }
    let p = dir.join("aggregate.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("aggregate.txt");
    std::fs::write(&p, txt).map_err(|e| Error::io(&p, e))
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub seeds: Vec<SeedResult>,
    pub aggregate: Vec<AggregateRow>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Loads the manifest named in `spec` and runs every seed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate().stage("config")?;
    let base = load_dataset(&spec.manifest).stage("load")?;
    run_experiment_on(&base, spec)
}

/// Runs every seed of `spec` on an already loaded dataset, writing one
/// `seed_<n>` directory per seed and an aggregate table.
pub fn run_experiment_on(base: &OpenSetDataset, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate().stage("config")?;
    let eta = spec.resolved_eta(base);
    std::fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e)).stage("write")?;
    std::fs::write(spec.out_dir.join("experiment.toml"), spec.to_toml()?)
        .map_err(|e| Error::io(&spec.out_dir, e))
        .stage("write")?;

    let mut seeds = Vec::new();
    for &seed in &spec.seeds {
        info!("seed {seed}: setting {} with eta {eta}", spec.setting);
        let cfg = TrainConfig { seed, ..spec.train.clone() };
        let run = train_and_score(base, &spec.setting, eta, &cfg, spec.reference_size)?;
        let mask = spec.score_mask.unwrap_or(run.output.heads);
        check_masks(run.output.heads, mask).stage("score")?;
        let dir = seed_dir(&spec.out_dir, seed);
        let snapshot = ExperimentSpec { seeds: vec![seed], eta: Some(eta), out_dir: spec.out_dir.clone(), ..spec.clone() };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).stage("write")?;
        std::fs::write(dir.join("experiment.toml"), snapshot.to_toml()?).map_err(|e| Error::io(&dir, e)).stage("write")?;
        let report = run.write_artifacts(&dir, mask)?;
        info!("seed {seed}: AUC {:.4} APR {:.4}", report.auc, report.apr);
        seeds.push(SeedResult { seed, dir, report });
    }
    let reports: Vec<EvalReport> = seeds.iter().map(|s| s.report.clone()).collect();
    let aggregate = aggregate(&reports);
    write_aggregate(&spec.out_dir, &aggregate).stage("write")?;
    Ok(ExperimentResult { dir: spec.out_dir.clone(), seeds, aggregate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub head_mask: Heads,
    pub score_mask: Heads,
}

/// The eight rows of the head ablation table.
pub fn ablation_matrix() -> Vec<AblationRow> {
    let r = |h: Heads, s: Heads| AblationRow { head_mask: h, score_mask: s };
    let (rec, dev, con) = (Heads::REC, Heads::DEV, Heads::CON);
    vec![
        r(rec, rec),
        r(dev, dev),
        r(con, con),
        r(dev.union(con), dev.union(con)),
        r(rec.union(dev), rec.union(dev)),
        r(rec.union(con), rec.union(con)),
        r(Heads::ALL, rec.union(dev)),
        r(Heads::ALL, Heads::ALL),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
    pub auc: f64,
    pub apr: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationResult>,
    /// Models trained, which is one per distinct head mask and seed.
    pub trainings: usize,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14} {:<14} {:>8} {:>8}\n", "training", "inference", "AUC", "APR");
        for r in &self.rows {
            let _ = writeln!(s, "{:<14} {:<14} {:>8.4} {:>8.4}", r.row.head_mask, r.row.score_mask, r.auc, r.apr);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("head_mask,score_mask,auc,apr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.row.head_mask.names().join("+"), r.row.score_mask.names().join("+"), r.auc, r.apr);
        }
        s
    }
}

/// Trained runs keyed by (head mask, seed), shared across ablation rows.
pub type RunCache = BTreeMap<(Heads, u64), TrainedRun>;

pub fn run_ablation_matrix(spec: &ExperimentSpec, matrix: &[AblationRow]) -> Result<AblationTable> {
    spec.validate().stage("config")?;
    let base = load_dataset(&spec.manifest).stage("load")?;
    run_ablation_matrix_on(&base, spec, matrix, &mut RunCache::new())
}

/// Runs the ablation matrix, training one model per distinct head mask and
/// seed. Runs already present in `cache` are reused.
pub fn run_ablation_matrix_on(
    base: &OpenSetDataset,
    spec: &ExperimentSpec,
    matrix: &[AblationRow],
    cache: &mut RunCache,
) -> Result<AblationTable> {
    spec.validate().stage("config")?;
    if matrix.is_empty() {
        return Err(Error::InvalidArgument("ablation matrix is empty".into())).stage("config");
    }
    for row in matrix {
        check_masks(row.head_mask, row.score_mask).stage("config")?;
    }
    let eta = spec.resolved_eta(base);
    let mut trainings = 0;
    let mut rows = Vec::new();
    for row in matrix {
        let mut reports = Vec::new();
        for &seed in &spec.seeds {
            let key = (row.head_mask, seed);
            if !cache.contains_key(&key) {
                info!("ablation: training {} with seed {seed}", row.head_mask);
                let cfg = TrainConfig { seed, head_mask: row.head_mask, ..spec.train.clone() };
                cache.insert(key, train_and_score(base, &spec.setting, eta, &cfg, spec.reference_size)?);
                trainings += 1;
            }
            reports.push(cache[&key].report(row.score_mask)?);
        }
        let auc = mean_std(&reports.iter().map(|r| r.auc).collect::<Vec<_>>()).0;
        let apr = mean_std(&reports.iter().map(|r| r.apr).collect::<Vec<_>>()).0;
        rows.push(AblationResult { row: *row, reports, auc, apr });
    }
    let table = AblationTable { rows, trainings };
    write_table(&spec.out_dir, "ablation", &table.to_text(), &table.to_csv())?;
    Ok(table)
}

fn write_table(dir: &Path, stem: &str, text: &str, csv: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage("write")?;
    for (ext, body) in [("txt", text), ("csv", csv)] {
        let p = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e)).stage("write")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// η or |𝓟|, depending on the sweep.
    pub value: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub apr_mean: f64,
    pub apr_std: f64,
}

fn sweep_table(name: &str, rows: &[SweepRow]) -> (String, String) {
    let mut txt = format!("{:<8} {:>10} {:>8} {:>10} {:>8}\n", name, "AUC mean", "AUC std", "APR mean", "APR std");
    let mut csv = format!("{name},auc_mean,auc_std,apr_mean,apr_std\n");
    for r in rows {
        let _ = writeln!(txt, "{:<8} {:>10.4} {:>8.4} {:>10.4} {:>8.4}", r.value, r.auc_mean, r.auc_std, r.apr_mean, r.apr_std);
        let _ = writeln!(csv, "{},{},{},{},{}", r.value, r.auc_mean, r.auc_std, r.apr_mean, r.apr_std);
    }
    (txt, csv)
}

fn sweep_row(value: usize, reports: &[Metrics]) -> SweepRow {
    let (auc_mean, auc_std) = mean_std(&reports.iter().map(|m| m.auc).collect::<Vec<_>>());
    let (apr_mean, apr_std) = mean_std(&reports.iter().map(|m| m.apr).collect::<Vec<_>>());
    SweepRow { value, auc_mean, auc_std, apr_mean, apr_std }
}

/// The η grid 3, 6, …, 30.
pub fn default_eta_grid() -> Vec<usize> {
    (1..=10).map(|i| 3 * i).collect()
}

/// One full experiment per η, in `eta_<n>` subdirectories, with the
/// mean/std table written to `sweep_eta.{txt,csv}`.
pub fn sweep_eta_on(base: &OpenSetDataset, spec: &ExperimentSpec, etas: &[usize]) -> Result<Vec<SweepRow>> {
    if etas.is_empty() {
        return Err(Error::InvalidArgument("empty eta grid".into())).stage("config");
    }
    let mut rows = Vec::new();
    for &eta in etas {
        let sub = ExperimentSpec { eta: Some(eta), out_dir: spec.out_dir.join(format!("eta_{eta}")), ..spec.clone() };
        let res = run_experiment_on(base, &sub)?;
        let m: Vec<Metrics> = res.seeds.iter().map(|s| s.report.overall()).collect();
        rows.push(sweep_row(eta, &m));
    }
    let (txt, csv) = sweep_table("eta", &rows);
    write_table(&spec.out_dir, "sweep_eta", &txt, &csv)?;
    Ok(rows)
}

pub fn sweep_eta(spec: &ExperimentSpec, etas: &[usize]) -> Result<Vec<SweepRow>> {
    let base = load_dataset(&spec.manifest).stage("load")?;
    sweep_eta_on(&base, spec, etas)
}

pub fn default_reference_grid() -> Vec<usize> {
    vec![8, 64, 512]
}

/// Trains once per seed and re-scores with each reference-set size.
pub fn sweep_reference_on(base: &OpenSetDataset, spec: &ExperimentSpec, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    spec.validate().stage("config")?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("reference sizes must be positive and non-empty".into())).stage("config");
    }
    let eta = spec.resolved_eta(base);
    let mut per_size: Vec<Vec<Metrics>> = vec![Vec::new(); sizes.len()];
    for &seed in &spec.seeds {
        let cfg = TrainConfig { seed, ..spec.train.clone() };
        let run = train_and_score(base, &spec.setting, eta, &cfg, spec.reference_size)?;
        let mask = spec.score_mask.unwrap_or(run.output.heads);
        check_masks(run.output.heads, mask).stage("score")?;
        for (i, &size) in sizes.iter().enumerate() {
            let triples = run.rescore_with_reference(size, seed)?;
            let rows: Vec<ScoredSample> = run
                .dataset
                .test_pool()
                .iter()
                .zip(&triples)
                .map(|(w, t)| ScoredSample::new(w, t.with_mask(mask)))
                .collect();
            let dir = spec.out_dir.join(format!("p_{size}")).join(format!("seed_{seed}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).stage("write")?;
            write_scores_csv(&dir.join("scores.csv"), &rows).stage("score")?;
            let report = evaluate(&rows, Some(run.dataset.seen_classes())).stage("eval")?;
            report.write(&dir).stage("eval")?;
            per_size[i].push(report.overall());
        }
    }
    let rows: Vec<SweepRow> = sizes.iter().zip(&per_size).map(|(&s, m)| sweep_row(s, m)).collect();
    let (txt, csv) = sweep_table("p", &rows);
    write_table(&spec.out_dir, "sweep_p", &txt, &csv)?;
    Ok(rows)
}

pub fn sweep_reference(spec: &ExperimentSpec, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    let base = load_dataset(&spec.manifest).stage("load")?;
    sweep_reference_on(&base, spec, sizes)
}
