//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::diagnostics::{compare_schemes, overhead_estimate, sweep_a, weight_stats};
use crate::error::{Error, Result};
use crate::fit::{fit, Exponent, FitMode, GridSpec, Solver};
use crate::inference::{
    quantize_model, Accumulation, ActRangePolicy, QuantizeOptions, WeightScheme,
};
use crate::intpow::IntPowConfig;
use crate::io::{
    read_dataset_csv, read_model_dir, read_qmodel_dir, to_json, write_dataset_csv, write_model_dir,
    write_qmodel_dir,
};
use crate::model::{
    accuracy, generate_dataset, train_fixture, ActivationKind, DatasetKind, TrainConfig,
};
use crate::quant::{lp_norm, BitWidth, Granularity, Norm};

#[derive(Debug, Parser)]
#[command(
    name = "powfit",
    version,
    about = "Power-function post-training quantization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset, train a fixture model and write its model directory.
    Fixture(FixtureArgs),
    /// Fit the quantization exponent and print the fit report as JSON.
    Fit(FitArgs),
    /// Quantize a model and write qmodel.json + qweights.bin.
    Quantize(QuantizeArgs),
    /// Accuracy and per-layer reconstruction error of a float or quantized model.
    Eval(EvalArgs),
    /// Reconstruction error and accuracy over a grid of exponents (CSV).
    Sweep(SweepArgs),
    /// Uniform, log and power schemes side by side (CSV).
    Compare(CompareArgs),
    /// Per-layer weight moments (JSON).
    Stats(StatsArgs),
    /// Estimated cost of the integer power evaluations (JSON).
    Overhead(OverheadArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Blobs,
    Rings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranArg {
    PerTensor,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitModeArg {
    Global,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    NelderMead,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActPolicyArg {
    BnStats,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccumulationArg {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Power,
    Uniform,
    Log,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DatasetArg::Blobs)]
    pub dataset: DatasetArg,
    /// Number of rows.
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    /// Layer widths, input first, e.g. `2,16,3`.
    #[arg(long, value_delimiter = ',', default_value = "2,16,3")]
    pub arch: Vec<usize>,
    /// Blob centre spacing.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    /// Ring noise standard deviation.
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value = "relu", value_parser = parse_activation)]
    pub activation: ActivationKind,
    /// Model directory to write; the dataset goes to `<out>/dataset.csv`
    /// unless `--data-out` is given.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub data_out: Option<PathBuf>,
}

fn parse_activation(s: &str) -> std::result::Result<ActivationKind, String> {
    s.parse::<ActivationKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 4)]
    pub bits_w: u32,
    /// Norm of the reconstruction error, 1 or 2.
    #[arg(long, default_value_t = 2)]
    pub p: u32,
    #[arg(long, value_enum, default_value_t = GranArg::PerChannel)]
    pub gran: GranArg,
}

impl WeightArgs {
    fn bits(&self) -> Result<BitWidth> {
        BitWidth::new(self.bits_w).map_err(|e| Error::Usage(format!("--bits-w: {e}")))
    }

    fn norm(&self) -> Result<Norm> {
        Norm::from_p(self.p)
            .map_err(|_| Error::Usage(format!("--p must be 1 or 2, got {}", self.p)))
    }

    fn granularity(&self) -> Granularity {
        match self.gran {
            GranArg::PerTensor => Granularity::PerTensor,
            GranArg::PerChannel => Granularity::per_channel(),
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[arg(long, value_enum, default_value_t = FitModeArg::Global)]
    pub fit_mode: FitModeArg,
    #[arg(long, value_enum, default_value_t = SolverArg::NelderMead)]
    pub solver: SolverArg,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantArgs {
    #[command(flatten)]
    pub weights: WeightArgs,
    #[arg(long, default_value_t = 4)]
    pub bits_a: u32,
    #[arg(long, value_enum, default_value_t = SchemeArg::Power)]
    pub scheme: SchemeArg,
    /// Fixed global exponent instead of a fitted one (power scheme only).
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long, value_enum, default_value_t = FitModeArg::Global)]
    pub fit_mode: FitModeArg,
    #[arg(long, value_enum, default_value_t = SolverArg::NelderMead)]
    pub solver: SolverArg,
    #[arg(long, value_enum, default_value_t = ActPolicyArg::BnStats)]
    pub act_policy: ActPolicyArg,
    /// Range multiplier of the bn-stats policy.
    #[arg(long, default_value_t = 3.0)]
    pub n_sigma: f64,
    #[arg(long, value_enum, default_value_t = AccumulationArg::Pre)]
    pub accumulation: AccumulationArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub bias_correct: bool,
}

impl QuantArgs {
    fn options(&self) -> Result<QuantizeOptions> {
        let bits_a =
            BitWidth::new(self.bits_a).map_err(|e| Error::Usage(format!("--bits-a: {e}")))?;
        let mut options = QuantizeOptions::new(self.weights.bits()?, bits_a);
        options.granularity = self.weights.granularity();
        options.norm = self.weights.norm()?;
        options.scheme = match (self.scheme, self.a) {
            (SchemeArg::Power, Some(a)) => WeightScheme::Fixed(Exponent::Global(a)),
            (SchemeArg::Power, None) => WeightScheme::Fitted {
                mode: fit_mode(self.fit_mode),
                solver: solver(self.solver),
            },
            (_, Some(_)) => return Err(Error::Usage("--a only applies to --scheme power".into())),
            (SchemeArg::Uniform, None) => WeightScheme::Uniform,
            (SchemeArg::Log, None) => WeightScheme::Log,
        };
        options.act_policy = match self.act_policy {
            ActPolicyArg::BnStats => ActRangePolicy::BnStats {
                n_sigma: self.n_sigma,
            },
            ActPolicyArg::Dynamic => ActRangePolicy::Dynamic,
        };
        options.accumulation = match self.accumulation {
            AccumulationArg::Pre => Accumulation::Pre,
            AccumulationArg::Post => Accumulation::Post,
        };
        options.bias_correct = self.bias_correct;
        Ok(options)
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    /// Calibration dataset (needed for the input layer's range).
    #[arg(long, short)]
    pub data: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Quantized model directory to write.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Float model directory.
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub data: PathBuf,
    /// Quantized model directory; when given it is evaluated against `--model`.
    #[arg(long, short)]
    pub qmodel: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub p: u32,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub data: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 0.05)]
    pub lo: f64,
    #[arg(long, default_value_t = 2.0)]
    pub hi: f64,
    #[arg(long, default_value_t = 0.005)]
    pub step: f64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub data: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Bit widths to compare (weights and activations).
    #[arg(long, value_delimiter = ',', default_value = "3,4,6,8")]
    pub bits: Vec<u32>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverheadArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub bits_w: u32,
    #[arg(long, default_value_t = 8)]
    pub bits_a: u32,
    #[arg(long, default_value_t = 2)]
    pub iterations: u32,
    #[arg(long, default_value_t = 16)]
    pub fraction_bits: u32,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn fit_mode(m: FitModeArg) -> FitMode {
    match m {
        FitModeArg::Global => FitMode::Global,
        FitModeArg::PerLayer => FitMode::PerLayer,
    }
}

fn solver(s: SolverArg) -> Solver {
    match s {
        SolverArg::NelderMead => Solver::NelderMead,
        SolverArg::Grid => Solver::Grid,
    }
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Error::io(path, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn emit_json<T: Serialize>(output: Option<&Path>, value: &T) -> Result<()> {
    emit(output, to_json(value)?.as_bytes())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::validation("csv", e.to_string()))?;
    }
    w.into_inner()
        .map_err(|e| Error::validation("csv", e.to_string()))
}

fn model_id(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Serialize)]
struct EvalReport {
    kind: &'static str,
    samples: usize,
    accuracy: f64,
    float_accuracy: f64,
    norm: u32,
    epsilon: Option<f64>,
    layer_epsilon: Vec<f64>,
}

#[derive(Serialize)]
struct CompareCsvRow {
    scheme: String,
    bits_w: u32,
    bits_a: u32,
    a_star: String,
    accuracy: f64,
    reconstruction_error: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fixture(args) => {
            if args.arch.len() < 2 {
                return Err(Error::Usage(
                    "--arch needs at least an input and an output width".into(),
                ));
            }
            let kind = match args.dataset {
                DatasetArg::Blobs => DatasetKind::Blobs {
                    classes: *args.arch.last().unwrap_or(&3),
                    dims: args.arch[0],
                    separation: args.separation,
                },
                DatasetArg::Rings => DatasetKind::Rings { noise: args.noise },
            };
            let dataset = generate_dataset(kind, args.n, args.seed)?;
            let cfg = TrainConfig {
                epochs: args.epochs,
                lr: args.lr,
                seed: args.seed,
                activation: args.activation,
            };
            let model = train_fixture(&args.arch, &dataset, &cfg)?;
            write_model_dir(&model, &args.out)?;
            let data_path = args
                .data_out
                .unwrap_or_else(|| args.out.join("dataset.csv"));
            write_dataset_csv(&dataset, &data_path)
        }
        Command::Fit(args) => {
            let model = read_model_dir(&args.model)?.fold_batchnorm()?;
            let mut cfg = crate::fit::FitConfig::new(args.weights.bits()?);
            cfg.granularity = args.weights.granularity();
            cfg.norm = args.weights.norm()?;
            cfg.solver = solver(args.solver);
            let report = fit(&model, fit_mode(args.fit_mode), &cfg)?;
            emit_json(args.output.as_deref(), &report)
        }
        Command::Quantize(args) => {
            let options = args.quant.options()?;
            let model = read_model_dir(&args.model)?;
            let data = read_dataset_csv(&args.data, None)?;
            let q = quantize_model(&model, &options, Some(&data))?;
            write_qmodel_dir(&q.model, &args.out)
        }
        Command::Eval(args) => {
            let norm = Norm::from_p(args.p)
                .map_err(|_| Error::Usage(format!("--p must be 1 or 2, got {}", args.p)))?;
            let model = read_model_dir(&args.model)?;
            let data = read_dataset_csv(&args.data, None)?;
            let float_accuracy = accuracy(&model, &data)?;
            let report = match &args.qmodel {
                None => EvalReport {
                    kind: "float",
                    samples: data.len(),
                    accuracy: float_accuracy,
                    float_accuracy,
                    norm: args.p,
                    epsilon: None,
                    layer_epsilon: Vec::new(),
                },
                Some(dir) => {
                    let qm = read_qmodel_dir(dir)?;
                    let folded = model.fold_batchnorm()?;
                    if folded.weighted_count() != qm.layers.len() {
                        return Err(Error::validation(
                            "qmodel.layers",
                            "layer count differs from the float model",
                        ));
                    }
                    let layer_epsilon = folded
                        .weights()
                        .zip(&qm.layers)
                        .map(|(w, l)| {
                            let rec = l.reconstructed_weight();
                            if rec.shape() != w.shape() {
                                return Err(Error::validation(
                                    "qmodel.layers",
                                    "weight shape differs from the float model",
                                ));
                            }
                            Ok(lp_norm(
                                w.data().iter().zip(rec.data()).map(|(a, b)| a - b),
                                norm,
                            ))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    EvalReport {
                        kind: "quantized",
                        samples: data.len(),
                        accuracy: qm.accuracy(&data)?,
                        float_accuracy,
                        norm: args.p,
                        epsilon: Some(layer_epsilon.iter().sum()),
                        layer_epsilon,
                    }
                }
            };
            emit_json(args.output.as_deref(), &report)
        }
        Command::Sweep(args) => {
            let options = args.quant.options()?;
            let model = read_model_dir(&args.model)?;
            let data = read_dataset_csv(&args.data, None)?;
            let grid = GridSpec {
                lo: args.lo,
                hi: args.hi,
                step: args.step,
            };
            let curve = sweep_a(&model, &data, &options, grid, &model_id(&args.model))?;
            emit(args.output.as_deref(), &csv_bytes(&curve.points)?)
        }
        Command::Compare(args) => {
            let options = args.quant.options()?;
            let bits = args
                .bits
                .iter()
                .map(|&b| BitWidth::new(b).map_err(|e| Error::Usage(format!("--bits: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let model = read_model_dir(&args.model)?;
            let data = read_dataset_csv(&args.data, None)?;
            let rows: Vec<CompareCsvRow> = compare_schemes(&model, &data, &bits, &options)?
                .into_iter()
                .map(|r| CompareCsvRow {
                    a_star: match r.a_star {
                        None => String::new(),
                        Some(Exponent::Global(a)) => a.to_string(),
                        Some(Exponent::PerLayer(v)) => {
                            v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
                        }
                    },
                    scheme: r.scheme,
                    bits_w: r.bits_w,
                    bits_a: r.bits_a,
                    accuracy: r.accuracy,
                    reconstruction_error: r.reconstruction_error,
                })
                .collect();
            emit(args.output.as_deref(), &csv_bytes(&rows)?)
        }
        Command::Stats(args) => {
            let model = read_model_dir(&args.model)?;
            emit_json(args.output.as_deref(), &weight_stats(&model)?)
        }
        Command::Overhead(args) => {
            let bw =
                BitWidth::new(args.bits_w).map_err(|e| Error::Usage(format!("--bits-w: {e}")))?;
            let ba =
                BitWidth::new(args.bits_a).map_err(|e| Error::Usage(format!("--bits-a: {e}")))?;
            let intpow = IntPowConfig {
                iterations: args.iterations,
                fraction_bits: args.fraction_bits,
            };
            intpow.validate().map_err(|e| Error::Usage(e.to_string()))?;
            let model = read_model_dir(&args.model)?;
            emit_json(
                args.output.as_deref(),
                &overhead_estimate(&model, bw, ba, intpow)?,
            )
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
