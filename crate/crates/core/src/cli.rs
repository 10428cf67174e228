//! Command-line front end.
//!
//! Flags are resolved into a [`RunConfig`] with every default filled in; the
//! config is written to `run.json` before any work starts, and executing a
//! `RunConfig` depends on nothing else, so `replay` reproduces a run from
//! that file alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agd::{self, AgdConfig, Optimizer};
use crate::checkpoint::{self, Provenance, MANIFEST};
use crate::convert::{self, ConversionConfig};
use crate::data::{self, Dataset};
use crate::energy::{self, EnergyConstants, EnergyReport};
use crate::error::{config_err, Error, Result};
use crate::metrics::{append_jsonl, evaluate, EvalResult, LayerActivity};
use crate::network::{Network, SimConfig};
use crate::neuron::ResetMode;
use crate::stdp::{self, StdpConfig};
use crate::topology::{fixtures, parse_topology, ClassifierKind, TopologySpec};
use crate::Rng;

#[derive(Parser, Debug)]
#[command(name = "snnwb", version, about = "Spiking neural network workbench")]
pub struct Cli {
    /// Cap on worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Surrogate-gradient (BPTT) training.
    TrainAgd(TrainAgdArgs),
    /// Layerwise STDP followed by a backprop-trained classifier.
    TrainStdp(TrainStdpArgs),
    /// ANN to SNN conversion with a latency sweep.
    Convert(ConvertArgs),
    /// Accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Energy report of one checkpoint, or the efficiency of one against another.
    Profile(ProfileArgs),
    /// Re-executes a recorded run.json into a fresh run directory.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Softmax,
    Stochmax,
}

impl From<HeadArg> for ClassifierKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Softmax => ClassifierKind::Softmax,
            HeadArg::Stochmax => ClassifierKind::Stochmax,
        }
    }
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// idx:<dir> | cifar10:<dir> | synth-blobs | synth-rate
    #[arg(long, default_value = "synth-rate")]
    pub dataset: String,
    /// Synthetic set size, or cap on the loaded training split.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Cap on the test split.
    #[arg(long)]
    pub test_samples: Option<usize>,
    /// Held-out fraction when the source has no test split.
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    /// Class count (default: the network's output width).
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainAgdArgs {
    /// Topology file or bundled name (e.g. agd_vgg5).
    #[arg(long)]
    pub topology: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 25, value_parser = positive)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long)]
    pub momentum: bool,
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f32,
    #[arg(long, default_value_t = crate::neuron::DEFAULT_GAMMA)]
    pub gamma: f32,
    #[arg(long, default_value_t = crate::neuron::DEFAULT_ALPHA)]
    pub alpha: f32,
    /// Override the topology's classifier head.
    #[arg(long, value_enum)]
    pub classifier: Option<HeadArg>,
    /// Stochmax retain-encoder step, as a fraction of --lr.
    #[arg(long, default_value_t = 0.01)]
    pub psi_lr_scale: f32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct TrainStdpArgs {
    #[arg(long)]
    pub topology: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub timesteps: usize,
    /// STDP epochs per layer.
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub batch_size: usize,
    /// STDP learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.4)]
    pub offset: f64,
    /// STDP time constant (default T/5).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    /// Update points per unroll step per presentation.
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub updates: usize,
    /// Separate classifier topology (e.g. convnn_resnet2); default: the
    /// network's own fully-connected stack.
    #[arg(long)]
    pub classifier_topology: Option<String>,
    #[arg(long, value_enum)]
    pub classifier: Option<HeadArg>,
    /// Target firing rate for post-training threshold calibration; 0 keeps
    /// the mean adapted threshold.
    #[arg(long, default_value_t = 0.2)]
    pub inference_rate: f64,
    /// Let every map fire at a position during training (no winner-take-all).
    #[arg(long)]
    pub no_inhibition: bool,
    #[arg(long, default_value_t = 30)]
    pub classifier_epochs: usize,
    /// Classifier learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Checkpoint of a trained ReLU network.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated simulation lengths to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "100,500,2000", value_parser = positive)]
    pub sweep: Vec<usize>,
    #[arg(long, default_value_t = 2000, value_parser = positive)]
    pub calibration_timesteps: usize,
    #[arg(long, default_value_t = 512, value_parser = positive)]
    pub calibration_samples: usize,
    #[arg(long, default_value_t = 100.0)]
    pub percentile: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 25, value_parser = positive)]
    pub timesteps: usize,
    #[arg(long, default_value_t = crate::neuron::DEFAULT_ALPHA)]
    pub alpha: f32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// One checkpoint, or two to compare (EE = E_SNN(first) / E_SNN(second)).
    #[arg(long, num_args = 1..=2, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 25, value_parser = positive)]
    pub timesteps: usize,
    #[arg(long, default_value_t = crate::neuron::DEFAULT_ALPHA)]
    pub alpha: f32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub run_json: PathBuf,
    /// Parent directory for the new run (default: the recorded one).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---- resolved configuration -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: String,
    pub samples: Option<usize>,
    pub test_samples: Option<usize>,
    pub test_fraction: f64,
    pub classes: usize,
    pub seed: u64,
}

/// A checkpoint input, pinned by the hash of its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub manifest_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainAgdRun {
    pub topology: serde_json::Value,
    pub dataset: DatasetConfig,
    pub trainer: AgdConfig,
    pub energy: EnergyConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStdpRun {
    pub topology: serde_json::Value,
    pub dataset: DatasetConfig,
    pub stdp: StdpConfig,
    /// `None`: the network's own FC stack.
    pub classifier_topology: Option<serde_json::Value>,
    pub classifier: AgdConfig,
    pub energy: EnergyConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertRun {
    pub checkpoint: CheckpointRef,
    pub dataset: DatasetConfig,
    pub conversion: ConversionConfig,
    pub sweep: Vec<usize>,
    pub energy: EnergyConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoint: CheckpointRef,
    pub dataset: DatasetConfig,
    pub sim: SimConfig,
    /// Stream for input encoding and stochastic heads.
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRun {
    pub checkpoints: Vec<CheckpointRef>,
    pub dataset: DatasetConfig,
    pub sim: SimConfig,
    pub energy: EnergyConstants,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    TrainAgd(TrainAgdRun),
    TrainStdp(TrainStdpRun),
    Convert(ConvertRun),
    Eval(EvalRun),
    Profile(ProfileRun),
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub out: PathBuf,
    pub seed: u64,
    #[serde(flatten)]
    pub run: RunConfig,
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::TrainAgd(_) => "train-agd",
            RunConfig::TrainStdp(_) => "train-stdp",
            RunConfig::Convert(_) => "convert",
            RunConfig::Eval(_) => "eval",
            RunConfig::Profile(_) => "profile",
        }
    }
}

// ---- resolution ------------------------------------------------------------------

/// A bundled topology name or a path to a topology document.
pub fn load_topology(arg: &str) -> Result<TopologySpec> {
    if let Some(spec) = fixtures::load(arg) {
        return Ok(spec);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(config_err!(
            "topology {arg:?} is neither a bundled name nor an existing file"
        ));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_topology(&text)
}

fn document(spec: &TopologySpec) -> Result<serde_json::Value> {
    Ok(serde_json::from_str(&spec.to_document())?)
}

fn spec_of(doc: &serde_json::Value) -> Result<TopologySpec> {
    parse_topology(&serde_json::to_string(doc)?)
}

fn pin_checkpoint(path: &Path) -> Result<CheckpointRef> {
    let m = path.join(MANIFEST);
    let bytes = fs::read(&m).map_err(|e| Error::io(&m, e))?;
    Ok(CheckpointRef {
        path: path.to_path_buf(),
        manifest_sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn open_checkpoint(r: &CheckpointRef) -> Result<Network> {
    let now = pin_checkpoint(&r.path)?;
    if now.manifest_sha256 != r.manifest_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} changed since the run was recorded",
            r.path.display()
        )));
    }
    Ok(checkpoint::load(&r.path)?.0)
}

fn dataset_config(a: &DataArgs, net_classes: usize, seed: u64) -> Result<DatasetConfig> {
    let source = a.dataset.trim().to_string();
    let known = source == "synth-blobs"
        || source == "synth-rate"
        || source.starts_with("idx:")
        || source.starts_with("cifar10:");
    if !known {
        return Err(config_err!(
            "unknown dataset {source:?}; expected idx:<dir>, cifar10:<dir>, synth-blobs or synth-rate"
        ));
    }
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(config_err!("test fraction must lie in [0, 1)"));
    }
    let classes = if source.starts_with("cifar10:") {
        data::CIFAR_CLASSES
    } else {
        a.classes.unwrap_or(net_classes)
    };
    let samples = match source.as_str() {
        "synth-blobs" | "synth-rate" => Some(a.samples.unwrap_or(400)),
        _ => a.samples,
    };
    Ok(DatasetConfig {
        source,
        samples,
        test_samples: a.test_samples,
        test_fraction: a.test_fraction,
        classes,
        seed,
    })
}

/// Train and test splits shaped for `shape`.
pub fn load_dataset(cfg: &DatasetConfig, shape: [usize; 3]) -> Result<(Dataset, Dataset)> {
    let split = |ds: Dataset| ds.split(cfg.test_fraction, cfg.seed);
    let (mut train, mut test) = match cfg.source.as_str() {
        "synth-blobs" => split(data::synth_blobs(
            cfg.classes,
            cfg.samples.unwrap_or(400),
            shape,
            cfg.seed,
        )?)?,
        "synth-rate" => split(data::synth_rate_patterns(
            cfg.classes,
            cfg.samples.unwrap_or(400),
            shape,
            cfg.seed,
        )?)?,
        s => {
            let (tr, te) = if let Some(dir) = s.strip_prefix("idx:") {
                data::load_idx_dir(Path::new(dir), cfg.classes)?
            } else if let Some(dir) = s.strip_prefix("cifar10:") {
                data::load_cifar10_binary(Path::new(dir))?
            } else {
                return Err(config_err!("unknown dataset {s:?}"));
            };
            let (tr, te) = match te {
                Some(te) => (tr, te),
                None => split(tr)?,
            };
            (cfg.samples.map_or(tr.clone(), |n| tr.take(n)), te)
        }
    };
    if let Some(n) = cfg.test_samples {
        test = test.take(n);
    }
    if train.classes != cfg.classes {
        train.classes = cfg.classes;
        test.classes = cfg.classes;
    }
    if train.image_shape() != shape {
        return Err(config_err!(
            "dataset images are {:?} but the network expects {:?}",
            train.image_shape(),
            shape
        ));
    }
    Ok((train, test))
}

fn resolve(command: Command) -> Result<RunFile> {
    let (out, run) = match command {
        Command::TrainAgd(a) => {
            let mut spec = load_topology(&a.topology)?;
            if let Some(h) = a.classifier {
                spec.classifier = h.into();
            }
            let trainer = AgdConfig {
                timesteps: a.timesteps,
                lr: a.lr,
                gamma: a.gamma,
                alpha: a.alpha,
                threshold: a.threshold,
                batch_size: a.batch_size,
                epochs: a.epochs,
                optimizer: if a.momentum {
                    Optimizer::SgdMomentum
                } else {
                    Optimizer::Sgd
                },
                seed: a.out.seed,
                rate_factor: 1.0,
                reset: ResetMode::Subtract,
                psi_lr_scale: a.psi_lr_scale,
            };
            trainer.validate()?;
            let classes = spec.layers.last().map_or(0, head_width);
            (
                a.out,
                RunConfig::TrainAgd(TrainAgdRun {
                    dataset: dataset_config(&a.data, classes, trainer.seed)?,
                    topology: document(&spec)?,
                    trainer,
                    energy: EnergyConstants::default(),
                }),
            )
        }
        Command::TrainStdp(a) => {
            let spec = load_topology(&a.topology)?;
            let mut cspec = a.classifier_topology.as_deref().map(load_topology).transpose()?;
            if let (Some(c), Some(h)) = (cspec.as_mut(), a.classifier) {
                c.classifier = h.into();
            }
            let mut spec = spec;
            if let (None, Some(h)) = (&cspec, a.classifier) {
                spec.classifier = h.into();
            }
            let stdp = StdpConfig {
                eta: a.eta,
                tau: a.tau.unwrap_or(a.timesteps as f64 / 5.0),
                offset: a.offset,
                batch_size: a.batch_size,
                dropout_p: a.dropout,
                updates_per_presentation: a.updates,
                lateral_inhibition: !a.no_inhibition,
                inference_rate: (a.inference_rate > 0.0).then_some(a.inference_rate),
                epochs: a.epochs,
                seed: a.out.seed,
                ..StdpConfig::with_timesteps(a.timesteps)
            };
            stdp.validate()?;
            let classifier = AgdConfig {
                lr: a.lr,
                epochs: a.classifier_epochs,
                batch_size: a.batch_size,
                seed: a.out.seed,
                ..AgdConfig::default()
            };
            classifier.validate()?;
            let classes = spec.layers.last().map_or(0, head_width);
            let dataset = dataset_config(&a.data, classes, a.out.seed)?;
            (
                a.out,
                RunConfig::TrainStdp(TrainStdpRun {
                    dataset,
                    topology: document(&spec)?,
                    stdp,
                    classifier_topology: cspec.as_ref().map(document).transpose()?,
                    classifier,
                    energy: EnergyConstants::default(),
                }),
            )
        }
        Command::Convert(a) => {
            let checkpoint = pin_checkpoint(&a.checkpoint)?;
            let (net, _) = checkpoint::load(&a.checkpoint)?;
            let conversion = ConversionConfig {
                calibration_timesteps: a.calibration_timesteps,
                calibration_samples: a.calibration_samples,
                percentile: a.percentile,
                seed: a.out.seed,
            };
            conversion.validate()?;
            (
                a.out.clone(),
                RunConfig::Convert(ConvertRun {
                    checkpoint,
                    dataset: dataset_config(&a.data, net.classes(), a.out.seed)?,
                    conversion,
                    sweep: a.sweep,
                    energy: EnergyConstants::default(),
                }),
            )
        }
        Command::Eval(a) => {
            let checkpoint = pin_checkpoint(&a.checkpoint)?;
            let (net, _) = checkpoint::load(&a.checkpoint)?;
            let sim = SimConfig {
                timesteps: a.timesteps,
                alpha: a.alpha,
                ..SimConfig::default()
            };
            sim.validate()?;
            (
                a.out.clone(),
                RunConfig::Eval(EvalRun {
                    checkpoint,
                    dataset: dataset_config(&a.data, net.classes(), a.out.seed)?,
                    sim,
                    eval_seed: a.out.seed,
                }),
            )
        }
        Command::Profile(a) => {
            let checkpoints = a
                .checkpoint
                .iter()
                .map(|p| pin_checkpoint(p))
                .collect::<Result<Vec<_>>>()?;
            let (net, _) = checkpoint::load(&a.checkpoint[0])?;
            let sim = SimConfig {
                timesteps: a.timesteps,
                alpha: a.alpha,
                ..SimConfig::default()
            };
            sim.validate()?;
            (
                a.out.clone(),
                RunConfig::Profile(ProfileRun {
                    checkpoints,
                    dataset: dataset_config(&a.data, net.classes(), a.out.seed)?,
                    sim,
                    energy: EnergyConstants::default(),
                    eval_seed: a.out.seed,
                }),
            )
        }
        Command::Replay(_) => unreachable!("replay is handled before resolution"),
    };
    Ok(RunFile {
        out: out.out,
        seed: out.seed,
        run,
    })
}

fn head_width(l: &crate::topology::LayerSpec) -> usize {
    match l.kind {
        crate::topology::LayerKind::Fc { outputs, .. } => outputs,
        _ => 0,
    }
}

// ---- execution -----------------------------------------------------------------

/// Summary returned to the caller (and printed by the binary).
pub struct Outcome {
    pub run_dir: PathBuf,
    pub text: String,
}

fn unix_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// `<out>/<command>-<unix millis>-seed<seed>`, never an existing directory.
fn fresh_run_dir(out: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base = format!("{command}-{}-seed{seed}", unix_millis());
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn provenance<T: Serialize>(trainer: &str, seed: u64, cfg: &T) -> Result<Provenance> {
    Ok(Provenance {
        trainer: trainer.into(),
        seed,
        config: serde_json::to_value(cfg)?,
    })
}

fn activity_table(layers: &[LayerActivity]) -> String {
    let w = layers.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<w$}  {:>8}  {:>8}  {:>8}\n", "layer", "S_A", "peak", "rate");
    for l in layers {
        let _ = writeln!(
            s,
            "{:<w$}  {:>8.4}  {:>8.4}  {:>8.4}",
            l.layer, l.spiking_activity, l.peak_activity, l.firing_rate
        );
    }
    s
}

#[derive(Serialize)]
struct EvalReport<'a> {
    accuracy: f64,
    loss: f64,
    samples: usize,
    timesteps: usize,
    layers: &'a [LayerActivity],
}

fn eval_report<'a>(r: &EvalResult, layers: &'a [LayerActivity], timesteps: usize) -> EvalReport<'a> {
    EvalReport {
        accuracy: r.accuracy,
        loss: r.loss,
        samples: r.samples,
        timesteps,
        layers,
    }
}

/// Executes a resolved run into `dir` (which must exist).
pub fn execute(file: &RunFile, dir: &Path) -> Result<String> {
    write_json(&dir.join("run.json"), file)?;
    let mut text = String::new();
    match &file.run {
        RunConfig::TrainAgd(r) => {
            let spec = spec_of(&r.topology)?;
            let (train, test) = load_dataset(&r.dataset, spec.input_shape)?;
            let mut net = Network::new(spec, &mut Rng::new(r.trainer.seed))?;
            let metrics = dir.join("metrics.jsonl");
            agd::train_with(&mut net, &train, Some(&test), &r.trainer, |m| {
                append_jsonl(&metrics, &m.records())
            })?;
            checkpoint::save(
                &net,
                &dir.join("checkpoint"),
                provenance("agd", r.trainer.seed, &r.trainer)?,
            )?;
            let sim = r.trainer.sim();
            let ev = evaluate(&net, &test, &sim, r.trainer.seed)?;
            let layers = ev.layers(&net);
            let en = energy::profile(&net, &ev.activity, sim.timesteps, &r.energy)?;
            write_json(&dir.join("eval.json"), &eval_report(&ev, &layers, sim.timesteps))?;
            write_json(&dir.join("energy.json"), &en)?;
            let _ = writeln!(
                text,
                "test accuracy {:.4} over {} samples (T={})",
                ev.accuracy, ev.samples, sim.timesteps
            );
            text += &activity_table(&layers);
            text += &en.to_string();
        }
        RunConfig::TrainStdp(r) => {
            let mut net = Network::new(spec_of(&r.topology)?, &mut Rng::new(r.stdp.seed))?;
            let (train, test) = load_dataset(&r.dataset, net.spec().input_shape)?;
            stdp::init_weights(&mut net, &r.stdp);
            let log = dir.join("stdp.jsonl");
            let reports = stdp::train_with(&mut net, &train, &r.stdp, |rep| {
                let line = serde_json::to_string(rep)? + "\n";
                use std::io::Write;
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&log)
                    .and_then(|mut f| f.write_all(line.as_bytes()))
                    .map_err(|e| Error::io(&log, e))
            })?;
            let sim = r.stdp.sim();
            let metrics = dir.join("metrics.jsonl");
            match &r.classifier_topology {
                None => {
                    let mut clf = Network::new(stdp::suffix_classifier_spec(&net)?, &mut Rng::new(r.classifier.seed))?;
                    let hist = stdp::fit_classifier(&net, &mut clf, &train, Some(&test), &sim, &r.classifier)?;
                    for m in &hist {
                        append_jsonl(&metrics, &m.records())?;
                    }
                    stdp::install_classifier(&mut net, &clf, sim.timesteps)?;
                    checkpoint::save(&net, &dir.join("checkpoint"), provenance("stdp", r.stdp.seed, r)?)?;
                    let ev = evaluate(&net, &test, &sim, r.stdp.seed)?;
                    let layers = ev.layers(&net);
                    let en = energy::profile(&net, &ev.activity, sim.timesteps, &r.energy)?;
                    write_json(&dir.join("eval.json"), &eval_report(&ev, &layers, sim.timesteps))?;
                    write_json(&dir.join("energy.json"), &en)?;
                    let _ = writeln!(
                        text,
                        "test accuracy {:.4} over {} samples (T={})",
                        ev.accuracy, ev.samples, sim.timesteps
                    );
                    text += &activity_table(&layers);
                    text += &en.to_string();
                }
                Some(doc) => {
                    let mut clf = Network::new(spec_of(doc)?, &mut Rng::new(r.classifier.seed))?;
                    let hist = stdp::fit_classifier(&net, &mut clf, &train, Some(&test), &sim, &r.classifier)?;
                    for m in &hist {
                        append_jsonl(&metrics, &m.records())?;
                    }
                    checkpoint::save(&net, &dir.join("checkpoint"), provenance("stdp", r.stdp.seed, r)?)?;
                    checkpoint::save(
                        &clf,
                        &dir.join("classifier"),
                        provenance("agd", r.classifier.seed, &r.classifier)?,
                    )?;
                    if let Some(last) = hist.last() {
                        let _ = writeln!(
                            text,
                            "classifier {}: train accuracy {:.4}, test accuracy {:.4}",
                            clf.spec().name,
                            last.train_accuracy,
                            last.test_accuracy.unwrap_or(f64::NAN)
                        );
                    }
                }
            }
            let _ = writeln!(
                text,
                "{:<10} {:>6} {:>8} {:>10} {:>10}",
                "layer", "epoch", "updates", "rate", "threshold"
            );
            for rep in &reports {
                let _ = writeln!(
                    text,
                    "{:<10} {:>6} {:>8} {:>10.5} {:>10.4}{}",
                    rep.layer,
                    rep.epoch,
                    rep.updates,
                    rep.firing_rate,
                    rep.mean_threshold,
                    if rep.dead { "  (no spikes)" } else { "" }
                );
            }
        }
        RunConfig::Convert(r) => {
            let ann = open_checkpoint(&r.checkpoint)?;
            let (train, test) = load_dataset(&r.dataset, ann.spec().input_shape)?;
            let (snn, report) = convert::convert(&ann, &train, &test, &r.sweep, &r.conversion)?;
            checkpoint::save(
                &snn,
                &dir.join("checkpoint"),
                provenance("conversion", r.conversion.seed, &r.conversion)?,
            )?;
            write_json(&dir.join("conversion.json"), &report)?;
            let t_max = *r.sweep.iter().max().expect("non-empty sweep");
            let run = convert::run_converted(&snn, &test, &[t_max], r.conversion.seed)?;
            let en = energy::profile(&snn, &run.activity, t_max, &r.energy)?;
            write_json(&dir.join("energy.json"), &en)?;
            let _ = writeln!(text, "ANN accuracy {:.4}", report.ann_accuracy);
            let _ = writeln!(text, "{:>8}  {:>8}  {:>9}", "T", "accuracy", "agreement");
            for p in &report.sweep {
                let _ = writeln!(text, "{:>8}  {:>8.4}  {:>9.4}", p.timesteps, p.accuracy, p.agreement);
            }
            for t in &report.thresholds {
                let _ = writeln!(
                    text,
                    "threshold {}: {:?}{}",
                    t.layer,
                    t.thresholds,
                    match t.increasing {
                        Some(true) => "  (increasing with unroll step)",
                        Some(false) => "  (not increasing)",
                        None => "",
                    }
                );
            }
            text += &en.to_string();
        }
        RunConfig::Eval(r) => {
            let net = open_checkpoint(&r.checkpoint)?;
            let (_, test) = load_dataset(&r.dataset, net.spec().input_shape)?;
            let ev = evaluate(&net, &test, &r.sim, r.eval_seed)?;
            let layers = ev.layers(&net);
            write_json(&dir.join("eval.json"), &eval_report(&ev, &layers, r.sim.timesteps))?;
            let _ = writeln!(
                text,
                "accuracy {:.4}  loss {:.4}  samples {}",
                ev.accuracy, ev.loss, ev.samples
            );
            text += &activity_table(&layers);
        }
        RunConfig::Profile(r) => {
            let mut reports: Vec<EnergyReport> = Vec::new();
            for c in &r.checkpoints {
                let net = open_checkpoint(c)?;
                let (_, test) = load_dataset(&r.dataset, net.spec().input_shape)?;
                let ev = evaluate(&net, &test, &r.sim, r.eval_seed)?;
                let en = energy::profile(&net, &ev.activity, r.sim.timesteps, &r.energy)?;
                let _ = writeln!(text, "{}:", c.path.display());
                text += &en.to_string();
                reports.push(en);
            }
            let relative = (reports.len() == 2).then(|| energy::relative_efficiency(&reports[0], &reports[1]));
            if let Some(ee) = relative {
                let _ = writeln!(text, "EE (first / second) = {ee:.4}");
            }
            #[derive(Serialize)]
            struct ProfileOut<'a> {
                reports: &'a [EnergyReport],
                relative_ee: Option<f64>,
            }
            write_json(
                &dir.join("energy.json"),
                &ProfileOut {
                    reports: &reports,
                    relative_ee: relative,
                },
            )?;
        }
    }
    write_text(&dir.join("report.txt"), &text)?;
    Ok(text)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        // a second initialisation (e.g. in tests) keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let file = match cli.command {
        Command::Replay(a) => {
            let text = fs::read_to_string(&a.run_json).map_err(|e| Error::io(&a.run_json, e))?;
            let mut f: RunFile = serde_json::from_str(&text)?;
            if let Some(o) = a.out {
                f.out = o;
            }
            f
        }
        other => resolve(other)?,
    };
    let dir = fresh_run_dir(&file.out, file.run.name(), file.seed)?;
    info!("run directory {}", dir.display());
    let text = execute(&file, &dir)?;
    Ok(Outcome { run_dir: dir, text })
}

/// Exit status for an error: 2 for bad configuration or input, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        _ => 1,
    }
}
