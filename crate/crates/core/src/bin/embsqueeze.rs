use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use embsqueeze::analysis::TimingStats;
use embsqueeze::data::Split;
use embsqueeze::pipeline::{self, PipelineConfig};
use embsqueeze::Result;

#[derive(Parser)]
#[command(name = "embsqueeze", version, about = "Train, compress and compare text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; omitted fields take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train an uncompressed model
    Train(Common),
    /// Factorize a trained model's embedding and retrain
    CompressRetrain {
        /// Input model file (vocab.txt must sit next to it)
        model: PathBuf,
        /// Retained fraction p
        #[arg(long, conflicts_with_all = ["r", "rank"])]
        p: Option<f64>,
        /// Size reduction R = 1 - p
        #[arg(long, conflicts_with = "rank")]
        r: Option<f64>,
        /// Explicit rank
        #[arg(long)]
        rank: Option<usize>,
        /// Retraining epochs (default: the training epoch budget)
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Post-training fixed-point quantization
    Quantize {
        model: PathBuf,
        /// 8 or 16 (default: config value)
        #[arg(long)]
        bits: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy and per-class counts of a model file
    Eval {
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
    /// FLOP, space and latency conditions per retained fraction
    Analyze {
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated retained fractions
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        p: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on an embedding compressed before training
    BaselineOffline {
        #[arg(long, conflicts_with_all = ["r", "rank"])]
        p: Option<f64>,
        #[arg(long, conflicts_with = "rank")]
        r: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare uncompressed, quantized, proposed and offline models
    Sweep {
        /// Comma-separated size reductions
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn set_target(cfg: &mut PipelineConfig, p: Option<f64>, r: Option<f64>, rank: Option<usize>) {
    if p.is_some() || r.is_some() || rank.is_some() {
        cfg.compression.p = p;
        cfg.compression.r = r;
        cfg.compression.rank = rank;
    }
}

fn print_timing(label: &str, t: &Option<TimingStats>) {
    if let Some(t) = t {
        println!(
            "{label} inference time: mean {:.4}s, median {:.4}s, std {:.4}s over {} runs",
            t.mean, t.median, t.std, t.repeats
        );
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let s = pipeline::cmd_train(&cfg, &common.out)?;
            println!(
                "trained {:?}: dev {:.4}, test {:.4}, {} parameters, {} bytes ({:.2} MB)",
                s.model_kind, s.dev_accuracy, s.test_accuracy, s.parameters, s.file.bytes, s.file.mb
            );
            print_timing("model", &s.timing);
            println!("wrote {}", show(&common.out));
        }
        Command::CompressRetrain {
            model,
            p,
            r,
            rank,
            epochs,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            set_target(&mut cfg, p, r, rank);
            if epochs.is_some() {
                cfg.compression.retrain_epochs = epochs;
            }
            let s = pipeline::cmd_compress_retrain(&cfg, &model, &common.out)?;
            println!(
                "k={} (p={:.4}): test {:.4} before retraining, {:.4} after; {} -> {} bytes",
                s.k,
                s.p,
                s.pre_retrain_test_accuracy,
                s.post_retrain_test_accuracy,
                s.input_file.bytes,
                s.output_file.bytes
            );
            print_timing("compressed model", &s.timing);
        }
        Command::Quantize { model, bits, common } => {
            let cfg = load_config(&common)?;
            let bits = bits.unwrap_or(cfg.quantize_bits);
            let s = pipeline::cmd_quantize(&cfg, &model, bits, &common.out)?;
            println!(
                "{}-bit: payload {} of {} reference bytes ({:.4}), file {} bytes, test {:.4}",
                s.bits,
                s.weight_payload_bytes,
                s.reference_payload_bytes,
                s.payload_ratio,
                s.output_file.bytes,
                s.test_accuracy
            );
        }
        Command::Eval { model, split, common } => {
            let cfg = load_config(&common)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Dev => Split::Dev,
                SplitArg::Test => Split::Test,
            };
            let s = pipeline::cmd_eval(&cfg, &model, split, Some(&common.out))?;
            println!("{} accuracy {:.4}", s.split, s.accuracy);
            for c in &s.per_class {
                println!("  class {}: {}/{}", c.label, c.correct, c.total);
            }
        }
        Command::Analyze { m, n, p, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = m {
                cfg.analyze.m = m;
            }
            if let Some(n) = n {
                cfg.analyze.n = n;
            }
            if let Some(p) = p {
                cfg.analyze.p_list = p;
            }
            let reports = pipeline::cmd_analyze(&cfg, &common.out)?;
            print!("{}", pipeline::analysis_text(&reports));
        }
        Command::BaselineOffline { p, r, rank, common } => {
            let mut cfg = load_config(&common)?;
            set_target(&mut cfg, p, r, rank);
            let s = pipeline::cmd_baseline_offline(&cfg, &common.out)?;
            println!(
                "offline k={}: dev {:.4}, test {:.4}, {} bytes",
                s.k, s.dev_accuracy, s.test_accuracy, s.file.bytes
            );
            print_timing("offline model", &s.timing);
        }
        Command::Sweep { r, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(r) = r {
                cfg.compression.r_list = r;
            }
            let rows = pipeline::cmd_sweep(&cfg, &common.out)?;
            println!("{}", pipeline::SweepRow::CSV_HEADER);
            for row in &rows {
                println!("{}", row.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
