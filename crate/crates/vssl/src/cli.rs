//! Command-line parsing. Flags override the config file, which overrides
//! the built-in defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{self, VideoFormat};
use crate::config::{parse_mode, ExperimentConfig, Method, ModelChoice, Pretext, TaskKind};
use crate::error::{Error, Result};
use crate::pipeline::Session;

#[derive(Debug, Parser)]
#[command(name = "vssl", version, about = "Self-supervised speech representations from audiovisual pretext tasks")]
pub struct Cli {
    /// Cache and output directory.
    #[arg(long, env = "VSSL_WORK_DIR", default_value = "vssl-work", global = true)]
    pub work_dir: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML experiment configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none, l1, odd or l1+odd.
    #[arg(long, value_parser = |s: &str| s.parse::<Pretext>())]
    pub pretext: Option<Pretext>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// frozen, finetune or scratch.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub n_runs: Option<usize>,
    /// Comparison methods, e.g. `none:frozen,odd,mfcc`.
    #[arg(long, value_delimiter = ',', value_parser = |s: &str| s.parse::<Method>())]
    pub compare: Option<Vec<Method>>,
    /// `desk` or `canonical`.
    #[arg(long)]
    pub model: Option<String>,
    /// Downstream clips from a manifest instead of the synthetic corpus.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub fraction_list: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Classify,
    Regress,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VideoArg {
    Raw,
    Png,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the configured pretext task to a checkpoint.
    Pretrain {
        #[command(flatten)]
        o: Overrides,
        /// Retrain even when a matching checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Write frozen encoder features of the downstream clips.
    Extract {
        #[command(flatten)]
        o: Overrides,
    },
    /// Repeated downstream training with paired comparisons.
    Eval {
        #[command(flatten)]
        o: Overrides,
    },
    /// Sweep the combined-task weight.
    AblateAlpha {
        #[command(flatten)]
        o: Overrides,
    },
    /// Score trained models on babble-corrupted test audio.
    AblateNoise {
        #[command(flatten)]
        o: Overrides,
    },
    /// Sweep the amount of pretraining data.
    AblateSize {
        #[command(flatten)]
        o: Overrides,
    },
    /// Write the synthetic corpus as WAV, video and a manifest.
    SynthData {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "raw")]
        video_format: VideoArg,
    },
    /// Summarise every report in the work directory.
    Report,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.pretext {
            c.pretext = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = &self.mode {
            c.mode = parse_mode(v).map_err(|e| Error::Config(format!("mode: {e}")))?;
        }
        if let Some(v) = self.task {
            c.task = match v {
                TaskArg::Classify => TaskKind::Classify,
                TaskArg::Regress => TaskKind::Regress,
            };
        }
        if let Some(v) = self.n_runs {
            c.n_runs = v;
        }
        if let Some(v) = &self.compare {
            c.compare = v.clone();
        }
        if let Some(v) = &self.model {
            c.model = ModelChoice::Preset(v.clone());
        }
        if let Some(v) = &self.manifest {
            c.data.manifest = Some(v.clone());
            c.data.synthetic = None;
        }
        if let Some(v) = &self.alpha_grid {
            c.alpha_grid = v.clone();
        }
        if let Some(v) = &self.snr_list {
            c.snr_list = v.clone();
        }
        if let Some(v) = &self.fraction_list {
            c.fraction_list = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Run a parsed command line and return the files it wrote.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let open = |o: &Overrides| -> Result<Session> {
        let mut s = Session::open(o.resolve()?, &cli.work_dir)?;
        s.verbose = cli.verbose;
        Ok(s)
    };
    Ok(match &cli.command {
        Command::Pretrain { o, force } => commands::cmd_pretrain(&open(o)?, *force)?.files,
        Command::Extract { o } => commands::cmd_extract(&open(o)?)?.files,
        Command::Eval { o } => commands::cmd_eval(&open(o)?)?.files,
        Command::AblateAlpha { o } => commands::cmd_ablate_alpha(&open(o)?)?.files,
        Command::AblateNoise { o } => commands::cmd_ablate_noise(&open(o)?)?.files,
        Command::AblateSize { o } => commands::cmd_ablate_size(&open(o)?)?.files,
        Command::SynthData { o, out, video_format } => {
            let f = match video_format {
                VideoArg::Raw => VideoFormat::Raw,
                VideoArg::Png => VideoFormat::Png,
            };
            vec![commands::cmd_synth_data(&o.resolve()?, out, f)?]
        }
        Command::Report => vec![commands::cmd_report(&cli.work_dir)?],
    })
}
