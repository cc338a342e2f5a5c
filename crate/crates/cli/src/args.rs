use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train, validation, test and fine-tune fractions: 400/100/200/200 out of
/// every 900 images per class.
pub const DESK_FRACTIONS: [f64; 4] = [4.0 / 9.0, 1.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0];
pub const PAPER_FRACTIONS: [f64; 4] = [0.6, 0.18, 0.2, 0.02];

#[derive(Debug, Parser)]
#[command(name = "fdft", version, about = "Attention-augmented fake image detector: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Seed for every random decision in the run.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,

    #[arg(long, global = true, value_enum, env = "FDFT_PROFILE", default_value_t = Profile::Desk)]
    pub profile: Profile,

    /// Worker threads. The default of 1 keeps runs bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// UTF-8 file of `key=value` lines; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

impl Cli {
    /// One-line rendering of every setting after defaults, environment and
    /// config file have been applied.
    pub fn resolved(&self) -> String {
        let mut s = format!(
            "seed={} precision={:?} profile={:?} threads={}",
            self.seed, self.precision, self.profile, self.threads
        );
        write!(s, " command={:?}", self.command).expect("string write");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Batch 32, at most 60 epochs.
    Desk,
    /// Batch 128, at most 300 epochs.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    Finetune,
    All,
}

impl SplitName {
    pub fn index(self) -> usize {
        match self {
            SplitName::Train => 0,
            SplitName::Val => 1,
            SplitName::Test => 2,
            SplitName::Finetune => 3,
            SplitName::All => unreachable!("the whole directory is not a split"),
        }
    }
}

fn parse_fractions(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 4]>::try_from(v).map_err(|v| format!("need four fractions, got {}", v.len()))
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Train,val,test,finetune fractions. Defaults depend on the profile.
    #[arg(long, value_parser = parse_fractions)]
    pub fractions: Option<[f64; 4]>,

    /// Seed for the split shuffle; defaults to --seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Rescale only, no augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic real/fake task as PPM files plus manifest.csv.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 900)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.25)]
        artifact_amp: f64,
        #[arg(long, default_value_t = 6)]
        blob_count: usize,
        #[arg(long, default_value_t = 2)]
        artifact_period: usize,
        #[arg(long, default_value_t = 0.5)]
        artifact_region: f64,
    },
    /// Train the toy backbone on the train split and save its weights.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fine-tune transformer, blocks and head on top of a frozen backbone.
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        cutout_alpha: usize,
        #[arg(long, default_value_t = 5)]
        cutout_beta: usize,
        /// Replace the transformer features with zeros.
        #[arg(long)]
        no_ftt: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Print ACC and AUROC of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Which part of the directory to score.
        #[arg(long = "split", value_enum, default_value_t = SplitName::Test)]
        which: SplitName,
    },
    /// Print the probability that one image is fake.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print per-layer parameter tables.
    Params {
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        backbone_channels: usize,
    },
}

/// Appends `--key value` for each `key=value` line of the `--config` file
/// whose flag is not already on the command line.
pub fn expand_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let present: Vec<String> = argv
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1);
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim();
        if key == "config" || present.contains(&key) {
            continue;
        }
        match value {
            "true" => argv.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                argv.push(format!("--{key}").into());
                argv.push(value.into());
            }
        }
    }
    Ok(argv)
}
