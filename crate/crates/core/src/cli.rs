//! Command-line surface: configuration file, subcommands and exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradsuite::{run_gradient_suite, SuiteOptions};
use crate::inference::{
    confusion_map, ensemble_inference, landscape_csv, landscape_emit, threshold_map, InferenceConfig,
};
use crate::mantis::{Mantis, MantisConfig};
use crate::pipeline::chips::{chips_in, crop, extract_chips};
use crate::pipeline::io::{load_split, read_gray, read_label, read_rgb, write_f32_grid, write_gray, write_palette, write_sample};
use crate::pipeline::{split_train_val, synth::SynthConfig, synth::synth_chip, AugmentConfig, ChipPair};
use crate::trainer::metrics::Confusion;
use crate::trainer::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthData {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthData {
    fn default() -> Self {
        Self {
            train: 32,
            val: 8,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root in the `{train,val,test}/{A,B,label}` layout; synthetic data when unset.
    pub root: Option<PathBuf>,
    pub synth: SynthData,
}

impl DataConfig {
    /// Training and validation chips.
    pub fn load(&self) -> Result<(Vec<ChipPair>, Vec<ChipPair>)> {
        match &self.root {
            Some(root) => {
                let strip = |v: Vec<(String, ChipPair)>| v.into_iter().map(|(_, c)| c).collect();
                Ok((strip(load_split(root, "train")?), strip(load_split(root, "val")?)))
            }
            None => {
                let s = &self.synth;
                let cfg = SynthConfig::with_size(s.size);
                let make = |n: usize, offset: u64| {
                    (0..n as u64)
                        .map(|i| synth_chip(&cfg, s.seed, offset + i).map(|c| c.pair))
                        .collect::<Result<Vec<_>>>()
                };
                // validation chips use stream indices after the training ones
                Ok((make(s.train, 0)?, make(s.val, s.train as u64)?))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: MantisConfig,
    pub data: DataConfig,
    pub schedule: TrainConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    /// The file at `path`, or defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            }
            None => Ok(Self::default()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mantis", version, about = "Bi-temporal change detection with fractal Tanimoto attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut a co-registered tile pair and its label into chips.
    Chip(ChipArgs),
    /// Train a network and write checkpoints and a log.
    Train(TrainArgs),
    /// Sliding-window inference with one or more checkpoints.
    Infer(InferArgs),
    /// Score predicted masks against labels.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Emit the ⟨FT⟩ landscape of a 2-vector as CSV.
    Landscape(LandscapeArgs),
}

#[derive(Debug, Args)]
pub struct ChipArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub label: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 128)]
    pub stride: usize,
    /// Target split, or `auto` for the geometric train/val split of the tile.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Name prefix of the written chips.
    #[arg(long, default_value = "tile")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_f1: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Checkpoint directory; repeat to average an ensemble.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks (PNG).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of label masks with matching file names.
    #[arg(long)]
    pub label: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the full-network check.
    #[arg(long)]
    pub skip_network: bool,
    #[arg(long, default_value_t = 48)]
    pub network_params: usize,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.6])]
    pub l: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 3, 5])]
    pub depths: Vec<u32>,
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    /// Output file; stdout when unset.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_chip(args: &ChipArgs) -> Result<()> {
    let t1 = read_rgb(&args.a)?;
    let t2 = read_rgb(&args.b)?;
    let mask = read_label(&args.label)?;
    if t1.shape() != t2.shape() || t1.shape()[1..] != *mask.shape() {
        return Err(Error::Data(format!(
            "tile shapes differ: {:?}, {:?}, {:?}",
            t1.shape(),
            t2.shape(),
            mask.shape()
        )));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let f = args.size;
    let plan: Vec<(&str, Vec<(usize, usize)>)> = match args.split.as_str() {
        "auto" => {
            let split = split_train_val(w, h, f)?;
            let mut val = Vec::new();
            for r in &split.val {
                val.extend(chips_in(*r, f, args.stride)?);
            }
            vec![("train", chips_in(split.train, f, args.stride)?), ("val", val)]
        }
        "train" | "val" | "test" => vec![(args.split.as_str(), extract_chips(w, h, f, args.stride)?)],
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other}; expected train, val, test or auto"
            )))
        }
    };
    for (split, origins) in plan {
        let dir = args.out.join(split);
        for &(x, y) in &origins {
            let chip = ChipPair::from_mask(
                crop(&t1, x, y, f, f)?,
                crop(&t2, x, y, f, f)?,
                crop(&mask, x, y, f, f)?,
            )?;
            write_sample(&dir, &format!("{}_{x}_{y}", args.name), &chip)?;
        }
        println!("{split}: {} chips", origins.len());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = Config::load(args.config.as_deref())?;
    if let Some(root) = &args.data {
        cfg.data.root = Some(root.clone());
    }
    if let Some(e) = args.epochs {
        cfg.schedule.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.schedule.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.schedule.seed = s;
        cfg.model.seed = s;
    }
    if let Some(f1) = args.target_f1 {
        cfg.schedule.target_train_f1 = Some(f1);
    }
    if args.no_augment {
        cfg.augment.enabled = false;
    }
    cfg.schedule.checkpoint_dir.get_or_insert_with(|| args.out.join("checkpoints"));
    cfg.schedule.log_path.get_or_insert_with(|| args.out.join("train.log"));
    write_text(&args.out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;

    let (train_set, val_set) = cfg.data.load()?;
    let mut model = Mantis::new(cfg.model.clone())?;
    eprintln!(
        "{} with {} parameters; {} train / {} val chips",
        cfg.model.tag(),
        model.params.num_scalars(),
        train_set.len(),
        val_set.len()
    );
    let report = train(&mut model, &train_set, &val_set, &cfg.schedule, &cfg.augment, |log| {
        eprintln!("{}", log.csv_row());
    })?;
    let front = report.pareto()?;
    write_text(&args.out.join("pareto.json"), &serde_json::to_string_pretty(&front)?)?;
    for r in &front {
        println!("pareto epoch {} mcc {:.4} ftnmt {:.4}", r.epoch, r.mcc, r.ftnmt);
    }
    if let Some(f1) = report.stopped_at_f1 {
        println!("stopped early at train F1 {f1:.4}");
    }
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let mut cfg = Config::load(args.config.as_deref())?.inference;
    if !args.checkpoints.is_empty() {
        cfg.checkpoints = args.checkpoints.clone();
    }
    if let Some(w) = args.window {
        cfg.window = w;
    }
    if let Some(s) = args.stride {
        cfg.stride = s;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    if cfg.checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoint given".into()));
    }
    let models = cfg
        .checkpoints
        .iter()
        .map(|p| Mantis::load(p))
        .collect::<Result<Vec<_>>>()?;
    let r1 = read_rgb(&args.a)?;
    let r2 = read_rgb(&args.b)?;
    let prob = ensemble_inference(&models, &r1, &r2, &cfg)?;
    let mask = threshold_map(&prob, cfg.threshold);
    let out = &args.out;
    write_gray(&out.join("probability.png"), &prob)?;
    // distance from the undecided value 0.5, stretched to [0, 1]
    write_gray(&out.join("heatmap.png"), &prob.map(|p| (2.0 * p - 1.0).abs()))?;
    write_gray(&out.join("mask.png"), &mask)?;
    write_f32_grid(&out.join("probability.f32"), &prob)?;
    let meta = serde_json::json!({
        "height": prob.shape()[0],
        "width": prob.shape()[1],
        "dtype": "float32",
        "byte_order": "little",
    });
    write_text(&out.join("probability.json"), &serde_json::to_string_pretty(&meta)?)?;
    if let Some(label) = &args.label {
        let gt = read_label(label)?;
        let raster = confusion_map(&mask, &gt, &cfg.palette)?;
        write_palette(&out.join("confusion.png"), raster.height, raster.width, |y, x| {
            raster.pixels[y * raster.width + x]
        })?;
        let m = Confusion::from_masks(&mask, &gt)?.metrics();
        println!(
            "precision {:.4} recall {:.4} f1 {:.4} mcc {:.4} iou {:.4}",
            m.precision, m.recall, m.f1, m.mcc, m.iou
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", args.threshold)));
    }
    let entries = fs::read_dir(&args.label).map_err(|e| Error::io(&args.label, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&args.label, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            names.extend(path.file_name().and_then(|n| n.to_str()).map(String::from));
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no labels in {}", args.label.display())));
    }
    println!("name,precision,recall,f1,mcc,iou");
    let mut total = Confusion::default();
    let row = |name: &str, c: &Confusion| {
        let m = c.metrics();
        println!("{name},{:.6},{:.6},{:.6},{:.6},{:.6}", m.precision, m.recall, m.f1, m.mcc, m.iou);
    };
    for name in &names {
        let pred = threshold_map(&read_gray(&args.pred.join(name))?, args.threshold);
        let gt = read_label(&args.label.join(name))?;
        let c = Confusion::from_masks(&pred, &gt).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        row(name, &c);
        total.merge(&c);
    }
    row("TOTAL", &total);
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let results = run_gradient_suite(&SuiteOptions {
        seed: args.seed,
        include_network: !args.skip_network,
        network_params: args.network_params,
    })?;
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed() { "PASS" } else { "FAIL" }, r.name, r.report);
        ok &= r.passed();
    }
    Ok(ok)
}

fn cmd_landscape(args: &LandscapeArgs) -> Result<()> {
    let l: [f64; 2] = args
        .l
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidArgument(format!("--l needs two values, got {}", args.l.len())))?;
    let csv = landscape_csv(&landscape_emit(l, &args.depths, args.grid)?);
    match &args.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Chip(a) => cmd_chip(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return EXIT_NUMERIC;
            }
            Err(e) => Err(e),
        },
        Command::Landscape(a) => cmd_landscape(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn unknown_field_is_usage_error() {
        let e = Config::from_json(r#"{"model": {"depht": 4}}"#).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_USAGE);
    }

    #[test]
    fn sections_parse() {
        let c = Config::from_json(
            r#"{"model": {"depth": 4, "nf": 8, "variant": "fractal_resnet"},
                "schedule": {"stages": [{"lr": 0.001, "depth": 0}], "epochs": 3},
                "augment": {"enabled": false},
                "inference": {"window": 64, "stride": 16}}"#,
        )
        .unwrap();
        assert_eq!(c.model.tag(), "D4nf8");
        assert_eq!(c.schedule.epochs, 3);
        assert!(!c.augment.enabled);
        assert_eq!(c.inference.stride, 16);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["mantis", "bogus"]), EXIT_USAGE);
        assert_eq!(main_with_args(["mantis", "--help"]), EXIT_OK);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
    }
}
