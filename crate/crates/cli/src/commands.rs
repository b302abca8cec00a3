use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ews_core::adversarial::evaluate_robust;
use ews_core::analysis::{
    block_vulnerability, compare_search_strategies, distributions_to_text, subnet_accuracy_distribution,
    BlockVulnerability, BoxSummary, InputVariant, SearchBudget, Strategy, StrategyResult, SubnetDistribution,
};
use ews_core::checkpoint::{file_hash, Checkpoint};
use ews_core::corruption::{evaluate_corrupted, full_suite, mean_corruption_error, CorruptionKind, CorruptionTable};
use ews_core::data::{Dataset, Split};
use ews_core::metrics::{read_log, Metric, MetricsLog, MetricsRecord};
use ews_core::train::{clean_error, train_named, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};
use ews_core::SeedTree;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::RunManifest;
use crate::plot::{extent, Canvas, PALETTE};
use crate::settings::RunConfig;

pub const RUN_ROOT_ENV: &str = "EWS_RUN_ROOT";
const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "ews", version, about = "Train small classifiers by finding and enhancing weak subnets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) a run and write its manifest.
    Train(TrainArgs),
    /// Evaluate a trained run and append the results to its metrics log.
    Eval(EvalArgs),
    /// Run a diagnostic study on a trained run.
    Analyze(AnalyzeArgs),
    /// Render a figure from logged results.
    Plot(PlotArgs),
    /// Train one run per value of a config key.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory; defaults to `$EWS_RUN_ROOT/<run id>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(seed) = self.seed {
            o.push(format!("seed={seed}"));
        }
        o
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Stop after this many epochs, leaving a resumable run.
    #[arg(long, hide = true)]
    pub stop_after_epoch: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Clean,
    Corruption,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Best,
    Last,
}

impl Which {
    fn file(self) -> &'static str {
        match self {
            Which::Best => BEST_CHECKPOINT,
            Which::Last => LAST_CHECKPOINT,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, value_enum, default_value = "best")]
    pub checkpoint: Which,
    /// Vanilla run whose corruption errors normalize the mCE.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "best", global = true)]
    pub checkpoint: Which,
    /// Analyze on the first N test images only.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    #[command(subcommand)]
    pub analysis: Analysis,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Accuracy distribution of uniformly sampled subnets.
    SubnetDistribution {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        width: f64,
        /// `clean`, `<corruption>-<severity>` or `pgd<steps>`.
        #[arg(long, default_value = "clean")]
        variant: String,
    },
    /// Error when masking one block at a time.
    BlockVulnerability {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        width: f64,
    },
    /// Mean subnet accuracy found by uniform, L1 and controller search.
    Search {
        #[arg(long, default_value_t = 500)]
        budget: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0.7)]
        width: f64,
    },
    /// Same as the top-level `sweep` command.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    /// Box plot per subnet-distribution result (and per `--with` run).
    SubnetDistribution,
    /// Mean error per masked block, one series per run.
    BlockVulnerability,
    /// Box plot of subnet accuracy per search strategy.
    Search,
    /// Training loss and validation error against step.
    Curves,
    /// Test error against the swept value.
    Sweep,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(value_enum)]
    pub figure: Figure,
    /// Run directory (or sweep directory for `sweep`).
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Further runs drawn next to the first.
    #[arg(long = "with")]
    pub with: Vec<PathBuf>,
    /// Output image; defaults to `<run dir>/plots/<figure>.png`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Config key to vary.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let dir = cmd_train(&a.run, a.stop_after_epoch)?;
            println!("{}", dir.display());
        }
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Analyze(a) => cmd_analyze(&a)?,
        Command::Plot(a) => {
            let out = cmd_plot(&a)?;
            println!("{}", out.display());
        }
        Command::Sweep(a) => {
            let dir = cmd_sweep(&a)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn short_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..12].to_string()
}

pub fn cmd_train(args: &RunArgs, stop_after_epoch: Option<u64>) -> anyhow::Result<PathBuf> {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides())?;
    let text = config.to_text()?;
    let run_id = short_hash(&text);
    let dir = args.run_dir.clone().unwrap_or_else(|| run_root().join(&run_id));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let config_path = dir.join(CONFIG_FILE);
    if config_path.exists() {
        let previous = fs::read_to_string(&config_path)?;
        if previous != text {
            bail!("{} already holds a run with a different config", dir.display());
        }
    } else {
        fs::write(&config_path, &text)?;
    }

    let data = config.dataset()?;
    let topology = config.topology(&data)?;
    log::info!(
        "run {run_id}: {} parameters, {} training images, dir {}",
        ews_core::MaskableModel::new(topology.clone(), &mut SeedTree::new(0).stream("count"))?.num_parameters(),
        data.train.len(),
        dir.display()
    );
    train_named(config.train.clone(), topology, &data, Some(&dir), &run_id, stop_after_epoch)?;
    if !dir.join(METRICS_FILE).exists() {
        fs::write(dir.join(METRICS_FILE), "")?;
    }
    let checkpoints = [LAST_CHECKPOINT, BEST_CHECKPOINT]
        .into_iter()
        .filter(|c| dir.join(c).exists())
        .map(|c| RunManifest::artifact(&dir, c))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let previous_reports = RunManifest::load_verified(&dir).map(|m| m.reports).unwrap_or_default();
    let manifest = RunManifest {
        run_id,
        config: text,
        dataset_hash: data.content_hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.train.seed,
        checkpoints,
        metrics: RunManifest::artifact(&dir, METRICS_FILE)?,
        reports: previous_reports,
    };
    manifest.save(&dir)?;
    Ok(dir)
}

/// A verified run ready for evaluation.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub config: RunConfig,
    pub data: Dataset,
    pub checkpoint: Checkpoint,
    pub checkpoint_hash: String,
}

pub fn load_run(dir: &Path, which: Which) -> anyhow::Result<LoadedRun> {
    let manifest = RunManifest::load_verified(dir)?;
    let config: RunConfig = ews_core::config::resolve(Some(&manifest.config), &[])?;
    let data = config.dataset()?;
    if data.content_hash() != manifest.dataset_hash {
        bail!("dataset content differs from the one {} was trained on", dir.display());
    }
    let path = dir.join(which.file());
    let checkpoint = Checkpoint::load(&path)?;
    Ok(LoadedRun {
        checkpoint_hash: file_hash(&path)?,
        dir: dir.to_path_buf(),
        manifest,
        config,
        data,
        checkpoint,
    })
}

fn test_split(data: &Dataset, limit: Option<usize>) -> Split {
    match limit {
        Some(n) => data.test.head(n),
        None => data.test.clone(),
    }
}

fn write_report(run: &mut LoadedRun, relative: &str, text: &str) -> anyhow::Result<()> {
    let path = run.dir.join(relative);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    run.manifest.record(&run.dir, Some(relative))
}

/// Corruption errors of a run's model, evaluated on the same images and seed.
fn corruption_table(run: &LoadedRun, split: &Split) -> anyhow::Result<CorruptionTable> {
    Ok(evaluate_corrupted(&run.checkpoint.model, split, &full_suite(), run.config.train.seed)?)
}

#[derive(Serialize, Deserialize)]
struct AdversarialReport {
    attack_id: String,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    clean_error: f64,
    robust_error: f64,
    max_perturbation: f64,
    within_pixel_bounds: bool,
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let mut run = load_run(&args.run_dir, args.checkpoint)?;
    let split = test_split(&run.data, args.limit);
    let model = &run.checkpoint.model;
    let step = run.checkpoint.step;
    let id = run.manifest.run_id.clone();
    let mut log = MetricsLog::open(&run.dir.join(METRICS_FILE))?;
    let record = |metric, value| MetricsRecord::new(&id, step, "test", metric, value);
    match args.suite {
        Suite::Clean => {
            let e = clean_error(model, &split, None)?;
            log.push(record(Metric::CleanError, e))?;
            println!("clean_error\t{e:.4}");
            run.manifest.record(&run.dir, None)?;
        }
        Suite::Corruption => {
            let table = corruption_table(&run, &split)?;
            for c in &table.cells {
                log.push(
                    record(Metric::CorruptionError, c.error)
                        .with_id(c.kind.name())
                        .with_severity(c.severity),
                )?;
            }
            log.push(record(Metric::CorruptionError, table.mean_error()).with_id("mean"))?;
            let baseline = match &args.baseline {
                Some(dir) => Some(load_run(dir, Which::Best)?),
                None if run.config.train.lambda == 0.0 => None,
                None => {
                    log::warn!("no --baseline given for a non-vanilla run; mCE skipped");
                    print!("{}", table.to_text());
                    write_report(&mut run, "eval/corruption.tsv", &table.to_text())?;
                    return Ok(());
                }
            };
            let (base_table, base_hash) = match &baseline {
                Some(b) => (corruption_table(b, &split)?, b.checkpoint_hash.clone()),
                None => (table.clone(), run.checkpoint_hash.clone()),
            };
            let mut mce = mean_corruption_error(&table.cells, &base_table.cells)?;
            mce.baseline = Some(base_hash);
            log.push(record(Metric::Mce, mce.mce))?;
            let text = format!("{}\n{}", table.to_text(), mce.to_text());
            print!("{text}");
            write_report(&mut run, "eval/corruption.tsv", &text)?;
        }
        Suite::Adversarial => {
            let attack = run.config.train.eval_attack();
            let report = evaluate_robust(model, &split, &attack, &SeedTree::new(run.config.train.seed).child("eval"))?;
            log.push(record(Metric::CleanError, report.clean_error))?;
            log.push(record(Metric::RobustError, report.robust_error).with_id(report.attack_id.clone()))?;
            let out = AdversarialReport {
                attack_id: report.attack_id,
                epsilon: report.epsilon,
                steps: attack.steps,
                step_size: attack.step_size(),
                clean_error: report.clean_error,
                robust_error: report.robust_error,
                max_perturbation: report.max_perturbation,
                within_pixel_bounds: report.within_pixel_bounds,
            };
            let text = serde_json::to_string_pretty(&out)? + "\n";
            print!("{text}");
            write_report(&mut run, "eval/adversarial.json", &text)?;
        }
    }
    Ok(())
}

fn parse_variant(text: &str, config: &RunConfig) -> anyhow::Result<InputVariant> {
    if text == "clean" {
        return Ok(InputVariant::Clean);
    }
    if let Some(steps) = text.strip_prefix("pgd") {
        let steps: usize = steps.parse().with_context(|| format!("bad attack variant `{text}`"))?;
        let attack = ews_core::adversarial::AttackConfig {
            steps,
            ..config.train.eval_attack()
        };
        return Ok(InputVariant::Attack {
            attack,
            seed: config.train.seed,
        });
    }
    let (kind, severity) = text
        .rsplit_once('-')
        .with_context(|| format!("variant `{text}` is not clean, pgd<steps> or <corruption>-<severity>"))?;
    Ok(InputVariant::Corruption {
        kind: kind.parse::<CorruptionKind>()?,
        severity: severity.parse()?,
        seed: config.train.seed,
    })
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    if let Analysis::Sweep(s) = &args.analysis {
        let dir = cmd_sweep(s)?;
        println!("{}", dir.display());
        return Ok(());
    }
    let dir = args.run_dir.as_ref().context("--run-dir is required")?;
    let mut run = load_run(dir, args.checkpoint)?;
    let split = test_split(&run.data, args.limit);
    let seeds = SeedTree::new(args.seed).child("analysis");
    let model = run.checkpoint.model.clone();
    match &args.analysis {
        Analysis::SubnetDistribution { n, width, variant } => {
            let v = parse_variant(variant, &run.config)?;
            let d = subnet_accuracy_distribution(&model, &split, *width, *n, &v, &mut seeds.stream("distribution"))?;
            let name = format!("analysis/subnet_distribution-{}", v.id());
            print!("{}", distributions_to_text(&[(run.manifest.run_id.clone(), d.clone())]));
            write_report(&mut run, &format!("{name}.json"), &(serde_json::to_string_pretty(&d)? + "\n"))?;
        }
        Analysis::BlockVulnerability { n, width } => {
            let v = block_vulnerability(&model, &split, *width, *n, &mut seeds.stream("blocks"))?;
            let mut text = String::from("block\tdownsamples\tmean_error\n");
            for b in &v {
                text.push_str(&format!("{}\t{}\t{:.4}\n", b.block, b.downsamples, b.mean_error));
            }
            print!("{text}");
            write_report(
                &mut run,
                "analysis/block_vulnerability.json",
                &(serde_json::to_string_pretty(&v)? + "\n"),
            )?;
        }
        Analysis::Search {
            budget,
            lr,
            samples,
            width,
        } => {
            let b = SearchBudget {
                steps: *budget,
                learning_rate: *lr,
                eval_samples: *samples,
                hidden: run.config.train.controller_hidden,
                ..SearchBudget::default()
            };
            let results = compare_search_strategies(&model, &split, &Strategy::ALL, *width, &b, &seeds)?;
            let mut text = String::from("strategy\tmean_accuracy\n");
            for r in &results {
                text.push_str(&format!("{}\t{:.6}\n", r.strategy, r.mean_accuracy));
            }
            print!("{text}");
            write_report(&mut run, "analysis/search.json", &(serde_json::to_string_pretty(&results)? + "\n"))?;
        }
        Analysis::Sweep(_) => unreachable!(),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub run_dir: String,
    pub test_error: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<PathBuf> {
    let root = args
        .run
        .run_dir
        .clone()
        .unwrap_or_else(|| run_root().join(format!("sweep-{}", args.param)));
    fs::create_dir_all(&root)?;
    let mut points = Vec::new();
    for value in &args.values {
        let mut run = args.run.clone();
        run.set.push(format!("{}={value}", args.param));
        run.run_dir = Some(root.join(format!("{}={value}", args.param)));
        let dir = cmd_train(&run, None)?;
        let loaded = load_run(&dir, Which::Best)?;
        let e = clean_error(&loaded.checkpoint.model, &loaded.data.test, None)?;
        points.push(SweepPoint {
            value: value.clone(),
            run_dir: dir.display().to_string(),
            test_error: e,
        });
    }
    let mut text = format!("{}\ttest_error\n", args.param);
    for p in &points {
        text.push_str(&format!("{}\t{:.4}\n", p.value, p.test_error));
    }
    print!("{text}");
    fs::write(root.join("sweep.tsv"), text)?;
    fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&points)? + "\n")?;
    Ok(root)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn distribution_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("analysis"))
        .with_context(|| format!("no analysis results under {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("subnet_distribution-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn cmd_plot(args: &PlotArgs) -> anyhow::Result<PathBuf> {
    let runs: Vec<&PathBuf> = std::iter::once(&args.run_dir).chain(&args.with).collect();
    let name = format!("{:?}", args.figure).to_lowercase();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run_dir.join("plots").join(format!("{name}.png")));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let canvas = match args.figure {
        Figure::SubnetDistribution => {
            // boxes grouped by variant, one colour per run
            let mut boxes: Vec<(usize, usize, SubnetDistribution)> = Vec::new();
            for (r, dir) in runs.iter().enumerate() {
                for (v, f) in distribution_files(dir)?.iter().enumerate() {
                    boxes.push((v, r, read_json(f)?));
                }
            }
            if boxes.is_empty() {
                bail!("no subnet distributions to plot");
            }
            let mut c = Canvas::new((-0.5, boxes.iter().map(|b| b.0).max().unwrap() as f64 + 0.5), (0.0, 1.0));
            let slot = 0.8 / runs.len() as f64;
            for (v, r, d) in &boxes {
                let x = *v as f64 - 0.4 + slot * (*r as f64 + 0.5);
                c.boxplot(x, slot * 0.35, &d.summary, PALETTE[r % PALETTE.len()], Some(d.full_accuracy));
            }
            c
        }
        Figure::BlockVulnerability => {
            let series: Vec<Vec<BlockVulnerability>> = runs
                .iter()
                .map(|d| read_json(&d.join("analysis/block_vulnerability.json")))
                .collect::<anyhow::Result<_>>()?;
            let n = series.iter().map(|s| s.len()).max().unwrap_or(0);
            let (_, hi) = extent(series.iter().flatten().map(|b| b.mean_error));
            let mut c = Canvas::new((-0.5, n as f64 - 0.5), (0.0, hi.max(1.0)));
            let slot = 0.8 / series.len() as f64;
            for (r, s) in series.iter().enumerate() {
                for b in s {
                    let x = b.block as f64 - 0.4 + slot * r as f64;
                    c.fill_rect((x, x + slot * 0.9), (0.0, b.mean_error), PALETTE[r % PALETTE.len()]);
                }
            }
            c
        }
        Figure::Search => {
            let results: Vec<StrategyResult> = read_json(&args.run_dir.join("analysis/search.json"))?;
            let mut c = Canvas::new((-0.5, results.len() as f64 - 0.5), (0.0, 1.0));
            for (i, r) in results.iter().enumerate() {
                let b = BoxSummary::from_values(&r.accuracies)?;
                c.boxplot(i as f64, 0.25, &b, PALETTE[i % PALETTE.len()], None);
            }
            c
        }
        Figure::Curves => {
            let mut lines: Vec<Vec<(f64, f64)>> = Vec::new();
            for dir in &runs {
                let records = read_log(&dir.join(METRICS_FILE))?;
                let pick = |m: Metric, split: &str| -> Vec<(f64, f64)> {
                    records
                        .iter()
                        .filter(|r| r.metric == m && r.split == split && r.id.is_none())
                        .map(|r| (r.step as f64, r.value))
                        .collect()
                };
                // loss is drawn on the error scale: percent of its first value
                let loss = pick(Metric::LossTotal, "train");
                let first = loss.first().map_or(1.0, |p| p.1.max(1e-12));
                lines.push(loss.iter().map(|&(s, v)| (s, 100.0 * v / first)).collect());
                lines.push(pick(Metric::CleanError, "val"));
            }
            let (x0, x1) = extent(lines.iter().flatten().map(|p| p.0));
            let (_, y1) = extent(lines.iter().flatten().map(|p| p.1));
            if !x0.is_finite() {
                bail!("no curves logged");
            }
            let mut c = Canvas::new((x0, x1), (0.0, y1.max(1.0)));
            for (i, l) in lines.iter().enumerate() {
                c.polyline(l, PALETTE[i % PALETTE.len()]);
            }
            c
        }
        Figure::Sweep => {
            let points: Vec<SweepPoint> = read_json(&args.run_dir.join("sweep.json"))?;
            // positions are evenly spaced in sweep order
            let pts: Vec<(f64, f64)> = points.iter().enumerate().map(|(i, p)| (i as f64, p.test_error)).collect();
            let (_, hi) = extent(pts.iter().map(|p| p.1));
            let mut c = Canvas::new((-0.5, pts.len() as f64 - 0.5), (0.0, hi.max(1.0)));
            c.polyline(&pts, PALETTE[0]);
            c
        }
    };
    canvas.save(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn analyze_sweep_keeps_its_run_args() {
        let cli = Cli::try_parse_from([
            "ews", "analyze", "sweep", "--param", "lambda", "--values", "0,1", "--run-dir", "out", "--seed", "3",
        ])
        .unwrap();
        let Command::Analyze(a) = cli.command else { panic!("not analyze") };
        let Analysis::Sweep(s) = a.analysis else { panic!("not sweep") };
        assert_eq!(s.values, ["0", "1"]);
        assert_eq!(s.run.run_dir.as_deref(), Some(Path::new("out")));
        assert_eq!(s.run.seed, Some(3));
    }
}
