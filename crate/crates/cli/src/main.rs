use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mosad::data::{build_setting, generate_to_dir, load_dataset, write_dataset, GeneratorConfig, Setting};
use mosad::eval::evaluate;
use mosad::experiment::{
    ablation_matrix, default_eta_grid, default_reference_grid, run_ablation_matrix, run_experiment, sweep_eta,
    sweep_reference, ExperimentSpec,
};
use mosad::plot::write_plots;
use mosad::scoring::{read_scores_csv, score_windows, write_scores_csv, ScoredSample, ScoringContext};
use mosad::trainer::{read_config, split_holdout, train, write_config, Checkpoint, TrainConfig};
use mosad::{Heads, StageExt};

/// Open-set multivariate time-series anomaly detection.
#[derive(Parser)]
#[command(name = "mosad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and write it as a manifest directory.
    SynthGen {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator configuration (TOML); defaults to K=8, L=128, three classes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 123)]
        seed: u64,
    },
    /// Subsample the labelled anomalies for a setting and write the result.
    Prepare {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 123)]
        seed: u64,
        /// Output directory for the prepared manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and training logs.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 123)]
        seed: u64,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test pool of a manifest with a trained checkpoint.
    Score {
        /// Checkpoint file or the directory containing checkpoint.json.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV (sample_id, class_tag, y, s_rec, s_dev, s_con, s).
        #[arg(long)]
        out: PathBuf,
        /// Size of the normal reference set for s_con.
        #[arg(long, default_value_t = 64)]
        reference_size: usize,
        /// Seed for drawing the reference set; defaults to the training seed.
        #[arg(long)]
        reference_seed: Option<u64>,
        /// Scores summed into s, e.g. "all" or "rec,dev"; defaults to the trained heads.
        #[arg(long)]
        score_mask: Option<Heads>,
    },
    /// Compute AUC/APR reports and plots from a scores CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Seen anomaly classes, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "ckpt")]
        seen: Vec<String>,
        /// Take the seen classes from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Train the head ablation matrix and write the comparison table.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Repeat the experiment for each η in the grid.
    SweepEta {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',')]
        etas: Vec<usize>,
    },
    /// Re-score trained models with several reference-set sizes.
    SweepP {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Run a full experiment: setting, training, scoring, evaluation and plots per seed.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// u (unsupervised), og (general open-set) or oh (hard open-set).
    #[arg(long, default_value = "og")]
    setting: String,
    /// Seen class under the hard setting.
    #[arg(long)]
    seen_class: Option<String>,
    /// Labelled anomalies in total; defaults to 0.1% of the normals per class.
    #[arg(long)]
    eta: Option<usize>,
}

impl DataArgs {
    fn setting(&self) -> Result<Setting> {
        parse_setting(&self.setting, self.seen_class.as_deref())
    }
}

fn parse_setting(setting: &str, seen_class: Option<&str>) -> Result<Setting> {
    let s = match (setting.to_ascii_lowercase().as_str(), seen_class) {
        ("oh", Some(c)) => Setting::Hard(c.to_string()),
        ("oh", None) => bail!("--setting oh requires --seen-class"),
        (_, Some(_)) if !setting.contains(':') => bail!("--seen-class is only valid with --setting oh"),
        _ => setting.parse()?,
    };
    Ok(s)
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// Training configuration (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Heads to train, e.g. "all" or "rec,con".
    #[arg(long)]
    heads: Option<Heads>,
    /// Use plain supervised contrastive learning for the contrastive head.
    #[arg(long)]
    vsc: bool,
    #[arg(long)]
    no_coe: bool,
    #[arg(long)]
    no_wmix: bool,
}

impl TrainArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(e) = self.epochs {
            cfg.max_epochs = e;
        }
        if let Some(h) = self.heads {
            cfg.head_mask = h;
        }
        cfg.vsc |= self.vsc;
        cfg.coe &= !self.no_coe;
        cfg.wmix &= !self.no_wmix;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment spec (TOML). When given, the flags below are ignored except --out.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, required_unless_present = "spec")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "og")]
    setting: String,
    #[arg(long)]
    seen_class: Option<String>,
    #[arg(long)]
    eta: Option<usize>,
    /// Comma separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "123")]
    seeds: Vec<u64>,
    #[arg(long)]
    score_mask: Option<Heads>,
    #[arg(long, default_value_t = 64)]
    reference_size: usize,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn build(&self) -> Result<ExperimentSpec> {
        if let Some(p) = &self.spec {
            let mut spec = ExperimentSpec::read(p)?;
            if let Some(out) = &self.out {
                spec.out_dir = out.clone();
            }
            return Ok(spec);
        }
        let manifest = self.manifest.clone().context("--manifest is required")?;
        let out = self.out.clone().context("--out is required")?;
        let mut spec = ExperimentSpec::new(manifest, parse_setting(&self.setting, self.seen_class.as_deref())?, out);
        spec.eta = self.eta;
        spec.seeds = self.seeds.clone();
        spec.score_mask = self.score_mask;
        spec.reference_size = self.reference_size;
        spec.train = self.train.build()?;
        spec.validate()?;
        Ok(spec)
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("checkpoint.json")
    } else {
        p.to_path_buf()
    }
}

fn resolved_eta(spec_eta: Option<usize>, setting: &Setting, base: &mosad::data::OpenSetDataset) -> usize {
    let mut spec = ExperimentSpec::new("", setting.clone(), "");
    spec.eta = spec_eta;
    spec.resolved_eta(base)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { out, config, seed } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    GeneratorConfig::from_toml(&text)?
                }
                None => GeneratorConfig::default(),
            };
            let manifest = generate_to_dir(&cfg, seed, &out).stage("generate")?;
            println!("{}", manifest.display());
        }
        Command::Prepare { data, seed, out } => {
            let setting = data.setting()?;
            let base = load_dataset(&data.manifest).stage("load")?;
            let eta = resolved_eta(data.eta, &setting, &base);
            let ds = build_setting(&base, &setting, eta, seed).stage("prepare")?;
            let manifest = write_dataset(&ds, &out, None).stage("write")?;
            info!("{} labelled anomalies kept under {setting}", ds.anomaly_pool().len());
            println!("{}", manifest.display());
        }
        Command::Train { data, train: targs, seed, out } => {
            let setting = data.setting()?;
            let base = load_dataset(&data.manifest).stage("load")?;
            let eta = resolved_eta(data.eta, &setting, &base);
            let ds = build_setting(&base, &setting, eta, seed).stage("prepare")?;
            let cfg = TrainConfig { seed, ..targs.build()? };
            let output = train(&ds, &cfg).stage("train")?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_config(&cfg, &out.join("config.toml")).stage("write")?;
            output.log.write_steps_csv(&out.join("train_steps.csv")).stage("write")?;
            output.log.write_epochs_csv(&out.join("train_epochs.csv")).stage("write")?;
            let ckpt = Checkpoint::new(
                output.model,
                output.normalizer,
                cfg,
                output.heads,
                ds.setting().clone(),
                ds.seen_classes().clone(),
            );
            let path = out.join("checkpoint.json");
            ckpt.save(&path).stage("write")?;
            info!("best epoch {} of {}", output.log.best_epoch, output.log.epochs.len());
            println!("{}", path.display());
        }
        Command::Score { ckpt, manifest, out, reference_size, reference_seed, score_mask } => {
            let ckpt = Checkpoint::load(&checkpoint_path(&ckpt)).stage("load")?;
            let ds = load_dataset(&manifest).stage("load")?;
            let mask = score_mask.unwrap_or(ckpt.heads);
            mosad::experiment::check_masks(ckpt.heads, mask).stage("score")?;
            let cfg = &ckpt.train_config;
            let (train_normals, _) = split_holdout(ds.normal_pool(), cfg.holdout_fraction, cfg.seed).stage("score")?;
            let seed = reference_seed.unwrap_or(cfg.seed);
            let ctx = ScoringContext::draw(&ckpt.model, &train_normals, reference_size, seed, ckpt.normalizer)
                .stage("score")?;
            let triples = score_windows(&ckpt.model, ds.test_pool(), &ctx, mask).stage("score")?;
            let rows: Vec<ScoredSample> =
                ds.test_pool().iter().zip(&triples).map(|(w, t)| ScoredSample::new(w, *t)).collect();
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_scores_csv(&out, &rows).stage("write")?;
            std::fs::write(out.with_extension("context.json"), serde_json::to_string(&ctx)?)?;
            println!("{}", out.display());
        }
        Command::Eval { scores, out, seen, ckpt } => {
            let rows = read_scores_csv(&scores).stage("load")?;
            let seen: BTreeSet<String> = match ckpt {
                Some(p) => Checkpoint::load(&checkpoint_path(&p)).stage("load")?.seen_classes,
                None => seen.into_iter().collect(),
            };
            let report = evaluate(&rows, Some(&seen)).stage("eval")?;
            report.write(&out).stage("write")?;
            write_plots(&out.join("plots"), &rows).stage("plot")?;
            print!("{}", report.to_text());
        }
        Command::Ablate { exp } => {
            let spec = exp.build()?;
            let table = run_ablation_matrix(&spec, &ablation_matrix())?;
            print!("{}", table.to_text());
        }
        Command::SweepEta { exp, etas } => {
            let spec = exp.build()?;
            let etas = if etas.is_empty() { default_eta_grid() } else { etas };
            let rows = sweep_eta(&spec, &etas)?;
            for r in rows {
                println!("eta {:>4}: AUC {:.4} ± {:.4}  APR {:.4} ± {:.4}", r.value, r.auc_mean, r.auc_std, r.apr_mean, r.apr_std);
            }
        }
        Command::SweepP { exp, sizes } => {
            let spec = exp.build()?;
            let sizes = if sizes.is_empty() { default_reference_grid() } else { sizes };
            let rows = sweep_reference(&spec, &sizes)?;
            for r in rows {
                println!("|P| {:>4}: AUC {:.4} ± {:.4}  APR {:.4} ± {:.4}", r.value, r.auc_mean, r.auc_std, r.apr_mean, r.apr_std);
            }
        }
        Command::Run { exp } => {
            let spec = exp.build()?;
            let res = run_experiment(&spec)?;
            for s in &res.seeds {
                println!("seed {}: AUC {:.4} APR {:.4} ({})", s.seed, s.report.auc, s.report.apr, s.dir.display());
            }
            for a in &res.aggregate {
                println!("{:<12} {:.4} ± {:.4}", a.metric, a.mean, a.std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their sources, so only print
            // causes that add something new.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
