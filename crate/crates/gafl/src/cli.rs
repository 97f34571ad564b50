//! The `gafl` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for invalid input
//! (config, dataset or parameter files), 3 for failures during a run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gafl_core::encoder::{encode_all, pretrain};
use gafl_core::{generate_synthetic, Dataset, EncoderParams, Split, Variant};

use crate::artifact::{write_sidecar, ArtifactMeta};
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::format::{load_params, save_dataset_with_meta, save_params};
use crate::report::{
    comparison_table, embeddings_csv, protocol_records, summary_json, summary_table, sweep_records, sweep_table,
    write_text,
};
use crate::service::ServiceDefaults;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gafl", version, about = "Group activity retrieval with annotator feedback")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the data directory for `serve`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More log output; repeat for debug messages.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Pre-train the encoder on the training split.
    Pretrain {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Run the retrieval protocol for a set of variants.
    RunProtocol {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variants, e.g. `pretrained,ours,random`.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
    /// Sweep the number of masked persons and the candidate factor.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the GAF of every clip to CSV.
    ExportEmbeddings {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Start the HTTP session service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Parameter file; pre-trained from the config when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Trials per class.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

struct Output {
    dir: PathBuf,
    meta: ArtifactMeta,
}

impl Output {
    fn new(dir: Option<&Path>, meta: ArtifactMeta) -> Result<Self> {
        let dir = dir.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, meta })
    }

    fn text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_text(&path, text)?;
        write_sidecar(&path, &self.meta)?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    fn dataset(&self, dataset: &Dataset) -> Result<()> {
        let path = self.dir.join("dataset.jsonl");
        save_dataset_with_meta(dataset, Some(&self.meta), &path)?;
        write_sidecar(&path, &self.meta)?;
        eprintln!("wrote {} ({} videos)", path.display(), dataset.len());
        Ok(())
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { classes, per_class, noise } => {
            if let Some(c) = classes {
                cfg.dataset.class_count = *c;
            }
            if let Some(n) = per_class {
                cfg.dataset.videos_per_class = *n;
            }
            if let Some(x) = noise {
                cfg.dataset.noise_scale = *x;
            }
            cfg.validate()?;
            let out = Output::new(cli.out.as_deref(), cfg.meta())?;
            out.dataset(&generate_synthetic(&cfg.dataset)?)
        }
        Command::Pretrain { inputs } => {
            cfg.validate()?;
            let out = Output::new(cli.out.as_deref(), cfg.meta())?;
            let dataset = dataset_for(&cfg, inputs)?;
            let (params, report) = pretrain_on(&cfg, &dataset)?;
            let path = out.dir.join("params.json");
            save_params(&params, Some(&report), Some(&out.meta), &path)?;
            write_sidecar(&path, &out.meta)?;
            eprintln!(
                "wrote {} (loss {:.5} -> {:.5})",
                path.display(),
                report.initial_loss,
                report.final_loss
            );
            Ok(())
        }
        Command::RunProtocol { inputs, run, variants } => {
            apply_run_args(&mut cfg, run);
            if let Some(v) = variants {
                cfg.variants = v.clone();
            }
            cfg.validate()?;
            for w in cfg.eval.warnings() {
                log::warn!("{w}");
            }
            let out = Output::new(cli.out.as_deref(), cfg.meta())?;
            let (dataset, params) = inputs_for(&cfg, inputs)?;
            let started = Instant::now();
            let report = crate::parallel::run_protocol(&dataset, &params, &cfg.variants, &cfg.eval, cfg.workers)?;
            log::info!("protocol finished in {:.1}s", started.elapsed().as_secs_f64());
            for s in &report.skipped {
                log::warn!("skipped {} {} trial {}: {}", s.variant, s.class, s.trial, s.reason);
            }
            out.text("records.jsonl", &protocol_records(&out.meta, &report))?;
            out.text("summary.txt", &summary_table(&report.summary))?;
            out.text("summary.json", &summary_json(&out.meta, &report))?;
            print!("{}", comparison_table(&report.summary));
            Ok(())
        }
        Command::Sweep { inputs, run } => {
            apply_run_args(&mut cfg, run);
            if let Some(t) = run.trials {
                cfg.sweep.trials_per_class = Some(t);
            }
            cfg.validate()?;
            let out = Output::new(cli.out.as_deref(), cfg.meta())?;
            let (dataset, params) = inputs_for(&cfg, inputs)?;
            let points = crate::parallel::run_sweep(&dataset, &params, &cfg.sweep_eval(), &cfg.sweep.grid(), cfg.workers)?;
            out.text("sweep.jsonl", &sweep_records(&out.meta, &points))?;
            let table = sweep_table(&points);
            out.text("sweep.txt", &table)?;
            print!("{table}");
            Ok(())
        }
        Command::ExportEmbeddings { inputs } => {
            cfg.validate()?;
            let out = Output::new(cli.out.as_deref(), cfg.meta())?;
            let (dataset, params) = inputs_for(&cfg, inputs)?;
            let gafs = encode_all(dataset.entries.iter().map(|e| &e.video), &params)?;
            out.text("embeddings.csv", &embeddings_csv(&out.meta, &dataset, &gafs)?)?;
            Ok(())
        }
        Command::Serve { host, port } => {
            let mut serve = cfg.serve.clone();
            if let Some(h) = host {
                serve.host = h.clone();
            }
            if let Some(p) = port {
                serve.port = *p;
            }
            if let Some(dir) = &cli.out {
                serve.data_dir = dir.clone();
            }
            cfg.validate()?;
            let defaults = ServiceDefaults { pretrain: cfg.pretrain.clone(), finetune: cfg.eval.finetune.clone() };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Invalid(format!("cannot start runtime: {e}")))?;
            runtime.block_on(crate::service::serve(&serve, defaults))
        }
    }
}

fn apply_run_args(cfg: &mut AppConfig, run: &RunArgs) {
    if let Some(t) = run.trials {
        cfg.eval.trials_per_class = t;
    }
    if let Some(k) = &run.k {
        cfg.eval.ks = k.clone();
    }
    if let Some(w) = run.workers {
        cfg.workers = w;
    }
}

fn dataset_for(cfg: &AppConfig, inputs: &Inputs) -> Result<Dataset> {
    match &inputs.dataset {
        Some(path) => crate::format::load_dataset(path),
        None => {
            log::info!("generating the synthetic dataset");
            Ok(generate_synthetic(&cfg.dataset)?)
        }
    }
}

fn pretrain_on(cfg: &AppConfig, dataset: &Dataset) -> Result<(EncoderParams, gafl_core::PretrainReport)> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Invalid(format!("dataset {} has no training clips", dataset.id)));
    }
    let started = Instant::now();
    let out = pretrain(&train, &cfg.pretrain, cfg.seed)?;
    log::info!("pre-trained on {} clips in {:.1}s", train.len(), started.elapsed().as_secs_f64());
    Ok(out)
}

fn inputs_for(cfg: &AppConfig, inputs: &Inputs) -> Result<(Dataset, EncoderParams)> {
    let dataset = dataset_for(cfg, inputs)?;
    let params = match &inputs.params {
        Some(path) => load_params(path)?,
        None => pretrain_on(cfg, &dataset)?.0,
    };
    if params.dim() != dataset.dim {
        return Err(Error::Invalid(format!(
            "parameters are for C = {} but dataset {} has C = {}",
            params.dim(),
            dataset.id,
            dataset.dim
        )));
    }
    Ok((dataset, params))
}
