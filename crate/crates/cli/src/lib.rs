//! Batch command-line front end.
//!
//! [`run`] parses arguments, executes one subcommand and returns the process
//! exit code: 0 on success, 2 for usage and configuration errors (including
//! malformed inputs), 1 for runtime failures such as I/O.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use edgeseg::analysis::{self, ablation_report};
use edgeseg::graph::{execute, plan_layouts, Graph, LayoutProfile};
use edgeseg::metrics::{self, Mask};
use edgeseg::pipeline::{self, ScenarioFile};
use edgeseg::pnm;
use edgeseg::tensor::{Layout, LogicalTensor, Shape};
use edgeseg::train::{self, ToyConfig};
use edgeseg::weights::WeightStore;
use edgeseg::zoo::{self, DecoderOptions, ModelConfig};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "edgeseg",
    version,
    about = "Edge segmentation engine: build, analyze, run and evaluate models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a model, print its graph summary and write its weights.
    Build {
        #[arg(long)]
        model: PathBuf,
        /// Weight file to write.
        #[arg(long)]
        out: PathBuf,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Per-node parameter and MAC counts as CSV.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost table for every configuration in a suite file.
    Ablate {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Segment one PGM/PPM image and write the mask as PGM.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the 1/32-scale coarse mask.
        #[arg(long)]
        coarse_out: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth masks with matching file names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Prediction binarisation threshold in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Boundary tolerance in pixels; defaults to 0.8% of each image diagonal.
        #[arg(long)]
        tolerance: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the scenarios of a scenario file and compare them to the first.
    Pipeline {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Sweep this parameter on one scenario instead of comparing.
        #[arg(long, requires = "values")]
        sweep: Option<String>,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Scenario to sweep; defaults to the first.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the small pointwise network on synthetic disks.
    TrainToy {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Build {
            model,
            out,
            summary,
        } => build(&model, &out, summary.as_deref(), stdout),
        Command::Analyze { model, out } => {
            let cfg = load_model(&model)?;
            let report = analysis::analyze_config(&cfg).map_err(config)?;
            let mut text = report.nodes_csv();
            text.push_str(&format!(
                "# total params={} macs={} ops={} size_mb={:.3}\n",
                report.params(),
                report.macs(),
                report.ops(),
                report.size_mb()
            ));
            emit(out.as_deref(), &text, stdout)
        }
        Command::Ablate { suite, out, format } => {
            let suite = Suite::load(&suite)?;
            let table = ablation_report(&suite.configs).map_err(config)?;
            let text = match format {
                Format::Csv => table.to_csv(),
                Format::Text => table.to_text(),
            };
            emit(out.as_deref(), &text, stdout)
        }
        Command::Infer {
            model,
            weights,
            input,
            out,
            coarse_out,
        } => infer(&model, &weights, &input, &out, coarse_out.as_deref()),
        Command::Eval {
            pred,
            gt,
            threshold,
            tolerance,
            out,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Config(format!(
                    "threshold {threshold} is outside [0, 1]"
                )));
            }
            let (names, pairs) = load_pairs(&pred, &gt)?;
            let report = metrics::evaluate(&pairs, threshold, tolerance).map_err(config)?;
            emit(out.as_deref(), &report.to_text(&names), stdout)
        }
        Command::Pipeline {
            scenario,
            format,
            sweep,
            values,
            label,
            out,
        } => {
            let file = ScenarioFile::from_json(&read_text(&scenario)?).map_err(config)?;
            let text = match sweep {
                None => {
                    let table = file.compare().map_err(config)?;
                    match format {
                        Format::Csv => table.to_csv(),
                        Format::Text => table.to_text(),
                    }
                }
                Some(param) => {
                    let cfg = match &label {
                        Some(l) => file.get(l).ok_or_else(|| {
                            CliError::Config(format!("no scenario labelled {l:?}"))
                        })?,
                        None => &file.scenarios[0].config,
                    };
                    let rows = pipeline::sweep(cfg, &param, &values).map_err(config)?;
                    let mut s = format!("{param},latency_ms,throughput_fps,energy_per_frame_mj\n");
                    for (v, r) in rows {
                        s.push_str(&format!(
                            "{v},{:.3},{:.3},{:.3}\n",
                            r.e2e_latency_ms, r.throughput_fps, r.energy_per_frame_mj
                        ));
                    }
                    s
                }
            };
            emit(out.as_deref(), &text, stdout)
        }
        Command::TrainToy {
            steps,
            seed,
            lr,
            out,
        } => {
            let defaults = ToyConfig::default();
            let cfg = ToyConfig {
                steps,
                seed,
                lr: lr.unwrap_or(defaults.lr),
                ..defaults
            };
            let report = train::train_toy(&cfg).map_err(|e| match e {
                train::TrainError::NonFinite(_) => CliError::Runtime(e.to_string()),
                other => config(other),
            })?;
            let mut s = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                s.push_str(&format!("{i},{l:.6}\n"));
            }
            s.push_str(&format!(
                "# initial_test_miou={:.6} test_miou={:.6} steps={} seed={} lr={}\n",
                report.initial_test_miou, report.test_miou, cfg.steps, cfg.seed, cfg.lr
            ));
            emit(out.as_deref(), &s, stdout)
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn load_model(path: &Path) -> Result<ModelConfig, CliError> {
    ModelConfig::from_json(&read_text(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// A list of model configurations to tabulate.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Suite {
    #[serde(default)]
    #[allow(dead_code)]
    comment: String,
    configs: Vec<ModelConfig>,
}

impl Suite {
    fn load(path: &Path) -> Result<Suite, CliError> {
        serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn build(
    model: &Path,
    out: &Path,
    summary: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = load_model(model)?;
    let g = zoo::build_model(&cfg).map_err(config)?;
    let mut text = format!("# {cfg}\n");
    text.push_str(&analysis::graph_summary(&g).map_err(config)?);
    let mut bytes = Vec::new();
    g.weights
        .write_to(&mut bytes)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out, bytes).map_err(|e| io_err(out, e))?;
    emit(summary, &text, stdout)
}

/// Every declared weight must be present with the declared dims, and nothing else.
fn check_weights(g: &Graph, store: &WeightStore) -> Result<(), CliError> {
    for (name, dims) in g.weight_decls() {
        match store.get(name) {
            None => return Err(CliError::Config(format!("weight file lacks {name}"))),
            Some(t) if &t.dims != dims => {
                return Err(CliError::Config(format!(
                    "weight {name} has dims {:?}, model needs {dims:?}",
                    t.dims
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = store.names().find(|n| !g.weight_decls().contains_key(*n)) {
        return Err(CliError::Config(format!(
            "weight file has {extra}, which the model does not use"
        )));
    }
    Ok(())
}

fn to_pgm_bytes(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn write_mask(path: &Path, t: &LogicalTensor) -> Result<(), CliError> {
    let s = t.shape();
    let mut bytes = Vec::new();
    pnm::write_pgm(&mut bytes, s.w, s.h, &to_pgm_bytes(&t.to_interleaved())).map_err(config)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn infer(
    model: &Path,
    weights: &Path,
    input: &Path,
    out: &Path,
    coarse: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_model(model)?;
    let raw = fs::read(input).map_err(|e| io_err(input, e))?;
    let img =
        pnm::decode(&raw).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    for (what, v) in [("width", img.width), ("height", img.height)] {
        if v == 0 || v % zoo::OUTPUT_STRIDE != 0 {
            return Err(CliError::Config(format!(
                "image {what} {v} is not a positive multiple of {}",
                zoo::OUTPUT_STRIDE
            )));
        }
    }
    let (mut g, _) = zoo::build_graph_for(&cfg, &DecoderOptions::default(), img.height, img.width)
        .map_err(config)?;
    let bytes = fs::read(weights).map_err(|e| io_err(weights, e))?;
    let store = WeightStore::read_from(bytes.as_slice())
        .map_err(|e| CliError::Config(format!("{}: {e}", weights.display())))?;
    check_weights(&g, &store)?;
    g.weights = store;

    let values: Vec<f32> = img
        .to_rgb()
        .iter()
        .map(|&v| (v as f32 - zoo::INPUT_MEAN) / zoo::INPUT_STD)
        .collect();
    let shape = Shape::new(1, img.height, img.width, zoo::INPUT_CHANNELS).map_err(config)?;
    let x = LogicalTensor::from_interleaved(shape, Layout::Interleaved, &values).map_err(config)?;
    let outputs = execute(&g, &[x], &plan_layouts(&g, LayoutProfile::Packed))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_mask(out, &outputs[0])?;
    if let Some(p) = coarse {
        write_mask(p, &outputs[1])?;
    }
    Ok(())
}

fn read_mask(path: &Path, as_gt: bool) -> Result<Mask, CliError> {
    let raw = fs::read(path).map_err(|e| io_err(path, e))?;
    let img =
        pnm::decode(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if img.channels != 1 {
        return Err(CliError::Config(format!(
            "{}: masks must be single-channel PGM",
            path.display()
        )));
    }
    let values = img
        .data
        .iter()
        .map(|&v| match as_gt {
            true => (v >= 128) as u8 as f32,
            false => v as f32 / 255.0,
        })
        .collect();
    Mask::new(img.height, img.width, values).map_err(config)
}

fn pgm_names(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Pairs by file name: every ground truth mask needs a prediction.
type NamedPairs = (Vec<String>, Vec<(Mask, Mask)>);

fn load_pairs(pred: &Path, gt: &Path) -> Result<NamedPairs, CliError> {
    let names = pgm_names(gt)?;
    if names.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no .pgm masks",
            gt.display()
        )));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let p = pred.join(name);
        if !p.is_file() {
            return Err(CliError::Config(format!(
                "no prediction for {name} in {}",
                pred.display()
            )));
        }
        pairs.push((read_mask(&p, false)?, read_mask(&gt.join(name), true)?));
    }
    Ok((names, pairs))
}
