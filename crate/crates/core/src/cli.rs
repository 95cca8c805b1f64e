//! Command-line surface. Every command reads and writes plain files;
//! [`run`] returns an error whose [`Error::exit_code`] is the process status.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{integrate, read_outbreaks, read_telemetry, write_integrated};
use crate::error::{Error, Result};
use crate::features::{cohort_split, featurize, read_windows, write_windows, Split, SplitRatios, Window, WindowConfig};
use crate::geo::{GeoConfig, GeoLayers};
use crate::metrics::{accuracy_svg, breakdown, evaluate, write_breakdown_csv, write_report_csv, GroupBy};
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, ModelConfig};
use crate::synth::{generate, null_dataset, SynthConfig};
use crate::train::{fit_with_progress, prepare_inputs, score, write_history_csv, TrainConfig};

/// Pipeline configuration file: one JSON object with sections
/// `geo`, `window`, `model` and `train`. Every key must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geo: GeoConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let reference = serde_json::to_value(RunConfig::default())?;
        let obj = value.as_object().ok_or_else(|| Error::invalid("config must be a JSON object"))?;
        let sections = reference.as_object().expect("struct serializes to an object");
        for key in obj.keys() {
            if !sections.contains_key(key) {
                return Err(Error::Config {
                    section: key.clone(),
                    key: String::new(),
                    message: "unknown section".into(),
                });
            }
        }
        for (section, fields) in sections {
            let given = obj.get(section).ok_or_else(|| Error::Config {
                section: section.clone(),
                key: String::new(),
                message: "missing section".into(),
            })?;
            let given = given.as_object().ok_or_else(|| Error::Config {
                section: section.clone(),
                key: String::new(),
                message: "section must be an object".into(),
            })?;
            let fields = fields.as_object().expect("section serializes to an object");
            for key in given.keys() {
                if !fields.contains_key(key) {
                    return Err(Error::Config {
                        section: section.clone(),
                        key: key.clone(),
                        message: "unknown key".into(),
                    });
                }
            }
            for key in fields.keys() {
                if !given.contains_key(key) {
                    return Err(Error::Config {
                        section: section.clone(),
                        key: key.clone(),
                        message: "missing key".into(),
                    });
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config {
            section: String::new(),
            key: String::new(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.geo.validate()?;
        self.window.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "avianrisk", version, about = "Migration-trajectory disease risk pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (telemetry, outbreaks, layers, manifest, config).
    Synth(SynthArgs),
    /// Join telemetry with layers and outbreaks and write the window store.
    Featurize(FeaturizeArgs),
    /// Assign windows to train/val/test by cohort.
    Split(SplitArgs),
    /// Train the encoder and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a window file.
    Eval(EvalArgs),
    /// Score windows with a checkpoint.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    /// Generate the no-signal control (p_hot = p_cold).
    #[arg(long)]
    pub null: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Optional JSON file with SynthConfig fields.
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub telemetry: PathBuf,
    #[arg(long)]
    pub outbreaks: PathBuf,
    /// Directory holding land.geojson, lakes.geojson and admin.geojson.
    #[arg(long)]
    pub layers: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Window store (NDJSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Integrated fix table; defaults to `<out>.integrated.csv`.
    #[arg(long)]
    pub integrated_out: Option<PathBuf>,
    /// Overrides geo.cell_resolution.
    #[arg(long)]
    pub resolution: Option<u8>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub ratios: String,
    /// Directory for train.ndjson, val.ndjson and test.ndjson.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path; history goes to `<out>.history.csv` and statistics
    /// to `<out>.stats.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides train.seed and model.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the threshold stored in the checkpoint.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Breakdown CSV; defaults to `<out>.<species|region>.csv`.
    #[arg(long)]
    pub breakdown_out: Option<PathBuf>,
    /// Also write the per-group accuracy as an SVG bar chart.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub windows: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// `<path>.<suffix>`, keeping the original extension in the stem.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.synth_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config {
                section: "synth".into(),
                key: String::new(),
                message: e.to_string(),
            })?
        }
        None => SynthConfig::default(),
    };
    cfg.seed = a.seed;
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))?.next().is_some();
        if non_empty && !a.force {
            return Err(Error::invalid(format!("{} is not empty; pass --force to overwrite", a.out.display())));
        }
    }
    let out = if a.null { null_dataset(&cfg)? } else { generate(&cfg)? };
    out.write_to(&a.out)?;
    write_text(&a.out.join("config.json"), &RunConfig::default().to_json())?;
    println!(
        "individuals {} fixes {} events {} risk units {}",
        out.manifest.individuals.len(),
        out.manifest.individuals.iter().map(|i| i.fixes).sum::<usize>(),
        out.manifest.events.len(),
        out.manifest.risk_units.join(" ")
    );
    Ok(())
}

pub fn cmd_featurize(a: &FeaturizeArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(r) = a.resolution {
        cfg.geo.cell_resolution = r;
        cfg.geo.validate()?;
    }
    let layers = GeoLayers::load_dir(&a.layers)?;
    let (fixes, _) = read_telemetry(&a.telemetry)?;
    let (events, ob_report) = read_outbreaks(&a.outbreaks, &layers)?;
    if !ob_report.rejected_lines.is_empty() {
        eprintln!("skipped {} outbreak rows without unit or point", ob_report.rejected_lines.len());
    }
    let table = integrate(&fixes, &events, &layers, &cfg.geo);
    let integrated = a.integrated_out.clone().unwrap_or_else(|| sidecar(&a.out, "integrated.csv"));
    let mut w = create(&integrated)?;
    write_integrated(&mut w, &table)?;
    finish(w, &integrated)?;

    let windows = featurize(&table, &events, &cfg.geo, &cfg.window)?;
    let w = create(&a.out)?;
    write_windows(w, &windows)?;
    let individuals: BTreeSet<&str> = windows.iter().map(|w| w.individual_id.as_str()).collect();
    let species: BTreeSet<&str> = windows.iter().map(|w| w.species.as_str()).collect();
    println!(
        "windows {} positives {} individuals {} species {}",
        windows.len(),
        windows.iter().filter(|w| w.label == 1).count(),
        individuals.len(),
        species.len()
    );
    Ok(())
}

pub fn parse_ratios(s: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad ratio `{p}`"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [a, b, c] => SplitRatios::new(a, b, c),
        _ => Err(Error::invalid("ratios need three comma-separated values")),
    }
}

/// Fails when a cohort appears in more than one split.
pub fn leakage_audit(windows: &[Window]) -> Result<()> {
    let mut seen = std::collections::BTreeMap::new();
    for w in windows {
        let split = w.split.ok_or_else(|| Error::invalid(format!("window {} has no split", w.window_id)))?;
        if let Some(prev) = seen.insert(&w.cohort, split) {
            if prev != split {
                return Err(Error::invalid(format!("cohort {:?} spans {} and {}", w.cohort, prev.as_str(), split.as_str())));
            }
        }
    }
    Ok(())
}

pub fn cmd_split(a: &SplitArgs) -> Result<()> {
    let ratios = parse_ratios(&a.ratios)?;
    let mut windows = read_windows(&a.input)?;
    cohort_split(&mut windows, &ratios, a.seed);
    leakage_audit(&windows)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for split in Split::ALL {
        let part: Vec<Window> = windows.iter().filter(|w| w.split == Some(split)).cloned().collect();
        let cohorts: BTreeSet<_> = part.iter().map(|w| &w.cohort).collect();
        let path = a.out.join(format!("{}.ndjson", split.as_str()));
        write_windows(create(&path)?, &part)?;
        println!(
            "{} cohorts {} windows {} positives {}",
            split.as_str(),
            cohorts.len(),
            part.len(),
            part.iter().filter(|w| w.label == 1).count()
        );
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    let train = read_windows(&a.train)?;
    let val = read_windows(&a.val)?;
    let fit = fit_with_progress(&train, &val, &cfg.model, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3} train_loss {:.4} val_loss {:.4} val_acc {:.4} val_auc {} val_ap {}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_acc,
            r.val_auc.map_or("-".into(), |v| format!("{v:.4}")),
            r.val_ap.map_or("-".into(), |v| format!("{v:.4}")),
        );
    })?;
    write_checkpoint(&a.out, &fit.checkpoint)?;
    let hist = sidecar(&a.out, "history.csv");
    let mut w = create(&hist)?;
    write_history_csv(&mut w, &fit.history).map_err(|e| Error::io(&hist, e))?;
    finish(w, &hist)?;
    write_text(&sidecar(&a.out, "stats.json"), &serde_json::to_string_pretty(&fit.checkpoint.header.stats)?)?;
    let h = &fit.checkpoint.header;
    println!(
        "best epoch {} val_ap {:.4} threshold {:.6}",
        h.epoch,
        h.val_ap.unwrap_or(f64::NAN),
        h.threshold
    );
    Ok(())
}

/// Normalizes `windows` with the checkpoint statistics and scores them.
pub fn score_with_checkpoint(ck: &Checkpoint, windows: &[Window]) -> Result<Vec<f64>> {
    let h = &ck.header;
    for w in windows {
        match h.species.get(w.species_id as usize) {
            Some(name) if *name == w.species => {}
            _ => {
                return Err(Error::invalid(format!(
                    "window {} has species {} ({}) outside the training vocabulary",
                    w.window_id, w.species, w.species_id
                )))
            }
        }
    }
    let normalized: Vec<Window> = windows.iter().map(|w| crate::features::apply_stats(w, &h.stats)).collect::<Result<_>>()?;
    let inputs = prepare_inputs(&normalized, &h.vocab)?;
    score(&ck.model()?, &inputs)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = read_checkpoint(&a.ckpt)?;
    let windows = read_windows(&a.test)?;
    let scores = score_with_checkpoint(&ck, &windows)?;
    let threshold = a.threshold.unwrap_or(ck.header.threshold);
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    let report = evaluate(&scores, &labels, threshold)?;
    let mut w = create(&a.out)?;
    write_report_csv(&mut w, &report).map_err(|e| Error::io(&a.out, e))?;
    finish(w, &a.out)?;
    println!(
        "n {} accuracy {:.4} auc {} ap {} f1 {:.4} threshold {:.6}",
        report.n,
        report.accuracy,
        report.auc.map_or("-".into(), |v| format!("{v:.4}")),
        report.ap.map_or("-".into(), |v| format!("{v:.4}")),
        report.f1,
        report.threshold
    );
    if let Some(g) = a.group_by {
        let rows = breakdown(&windows, &scores, threshold, g)?;
        let suffix = match g {
            GroupBy::Species => "species.csv",
            GroupBy::Region => "region.csv",
        };
        let path = a.breakdown_out.clone().unwrap_or_else(|| sidecar(&a.out, suffix));
        let mut w = create(&path)?;
        write_breakdown_csv(&mut w, g, &rows, &report).map_err(|e| Error::io(&path, e))?;
        finish(w, &path)?;
        if let Some(svg) = &a.svg {
            write_text(svg, &accuracy_svg(g.header(), &rows))?;
        }
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ck = read_checkpoint(&a.ckpt)?;
    let windows = read_windows(&a.windows)?;
    let scores = score_with_checkpoint(&ck, &windows)?;
    let t = ck.header.threshold;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["window_id", "score", "decision"])?;
    for (win, s) in windows.iter().zip(&scores) {
        w.write_record([win.window_id.as_str(), &format!("{s:.8}"), if *s >= t { "1" } else { "0" }])?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))
}

/// Sizes the global worker pool from `AVIANRISK_THREADS` (0 or unset = auto).
pub fn init_threads() -> Result<()> {
    let n = match std::env::var("AVIANRISK_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::Config {
            section: "env".into(),
            key: "AVIANRISK_THREADS".into(),
            message: format!("`{v}` is not a non-negative integer"),
        })?,
        Err(_) => 0,
    };
    if n > 0 {
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}
