use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use densecnn::ExecMode;

mod commands;
mod files;

#[derive(Debug, Parser)]
#[command(name = "densecnn", version, about = "Whole-image CNN passes with dilated kernels")]
struct Cli {
    /// Worker threads for the engine; 1 runs serially.
    #[arg(long, global = true, env = "DENSECNN_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the dilation schedule, extents, patch size and padding.
    Compile {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Run the dense forward pass over a whole image.
    Forward(ForwardArgs),
    /// Squared-error gradients of the masked pixels.
    Backward(BackwardArgs),
    /// Patch-by-patch reference passes.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Time each layer, optionally against the oracle.
    Bench(BenchArgs),
    /// Compare dense and oracle passes and check gradients numerically.
    Check(CheckArgs),
    /// Write a deterministic spec, weights, image, target and mask.
    Fixture(FixtureArgs),
}

#[derive(Debug, Subcommand)]
enum OracleCommand {
    Forward(ForwardArgs),
    Backward(BackwardArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory receiving the output of every layer (dense pass only).
    #[arg(long)]
    dump_layers: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Debug, Args)]
struct BackwardArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Text file with one `y x` pair per line, or the single word `all`.
    #[arg(long)]
    mask: PathBuf,
    /// Gradient directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write the error with respect to the input image (dense pass only).
    #[arg(long)]
    input_delta: bool,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Side of the square random image.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Also time the patch-by-patch oracle.
    #[arg(long)]
    oracle: bool,
    /// Oracle pixels are sampled every this many rows and columns.
    #[arg(long, default_value_t = 8)]
    oracle_step: usize,
    /// Comma-separated mask sizes for a backward sweep, e.g. 1,128,all.
    #[arg(long, value_delimiter = ',')]
    mask_sweep: Option<Vec<String>>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameters per conv layer checked by finite differences.
    #[arg(long, default_value_t = 24)]
    fd_params: usize,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FixtureKind {
    ExampleNet,
    PlainCnn1,
    Rcnn3Chain,
    RandomSmall,
}

#[derive(Debug, Args)]
struct FixtureArgs {
    #[arg(long, value_enum)]
    kind: FixtureKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the generated image.
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Failures split by exit code.
#[derive(Debug)]
enum Failure {
    /// Bad input, exit 1.
    Invalid(String),
    /// A `check` comparison exceeded its tolerance, exit 2.
    Verification,
}

impl From<densecnn::Error> for Failure {
    fn from(e: densecnn::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn exec_mode(threads: Option<usize>) -> Result<ExecMode, Failure> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Invalid("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(if rayon::current_num_threads() > 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Serial
    })
}

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> CmdResult {
    let mode = exec_mode(cli.threads)?;
    match cli.command {
        Command::Compile { spec } => commands::compile(&spec),
        Command::Forward(a) => with_precision!(a.precision, forward(&a, mode)),
        Command::Backward(a) => with_precision!(a.precision, backward(&a, mode)),
        Command::Oracle(OracleCommand::Forward(a)) => with_precision!(a.precision, oracle_forward(&a)),
        Command::Oracle(OracleCommand::Backward(a)) => with_precision!(a.precision, oracle_backward(&a)),
        Command::Bench(a) => with_precision!(a.precision, bench(&a, mode)),
        Command::Check(a) => with_precision!(a.precision, check(&a, mode)),
        Command::Fixture(a) => commands::fixture(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification) => ExitCode::from(2),
    }
}
