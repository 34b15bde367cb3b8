//! Command-line front end.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    list_samples, make_paper_split, read_image, synthetic_toy_dataset, write_dataset, DatasetName, PathSource,
    SampleSource, SplitRole,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_source, DEFAULT_THRESHOLD};
use crate::train::{restore, train, TrainOptions};
use crate::types::MaskTensor;

#[derive(Debug, Parser)]
#[command(name = "adsnet", version, about = "Train, evaluate and inspect the dual-semantic segmentation network")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Serial evaluation and reproducible outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the optimization loop; writes checkpoints and train_log.csv.
    Train {
        /// `synthetic`, `paper`, a benchmark name or a dataset directory.
        #[arg(long, value_name = "NAME")]
        dataset: Option<String>,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "runs/train")]
        out: PathBuf,
    },
    /// Per-image metrics CSV and a summary table.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "NAME")]
        dataset: String,
        #[arg(long, value_name = "DIR", default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Binary mask for one image, at the image's resolution.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Output mask file (PNG).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also write the probability map here.
        #[arg(long, value_name = "PATH")]
        probability: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Decomposition panels: input | GT | M | S | W | BS | OS | final.
    Visualize {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "NAME")]
        dataset: String,
        #[arg(long, value_name = "DIR", default_value = "runs/panels")]
        out: PathBuf,
        /// Only the first N images.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
    },
    /// Write the synthetic blob dataset as images/ and masks/.
    MakeToyData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Print the fully resolved config.
    DumpConfig {
        /// Print the config stored in this checkpoint instead.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn apply_overrides(mut cfg: RunConfig, g: &GlobalArgs) -> Result<RunConfig> {
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= g.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn base_config(g: &GlobalArgs) -> Result<RunConfig> {
    let cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(cfg, g)
}

/// Loads a checkpoint; its stored config wins over `--config` so the
/// network always matches the parameters.
fn checkpoint_config(path: &Path, g: &GlobalArgs) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = apply_overrides(ck.config.clone(), g)?;
    Ok((ck, cfg))
}

fn configured_root(cfg: &RunConfig, name: DatasetName) -> Result<PathBuf> {
    let (key, path) = match name {
        DatasetName::KvasirSeg => ("data.kvasir", &cfg.data.kvasir),
        DatasetName::CvcClinicDb => ("data.clinicdb", &cfg.data.clinicdb),
        DatasetName::Etis => ("data.etis", &cfg.data.etis),
        DatasetName::CvcColonDb => ("data.colondb", &cfg.data.colondb),
        DatasetName::Synthetic => unreachable!("synthetic data has no root"),
    };
    path.clone()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set; needed for dataset `{}`", name.name())))
}

fn open_benchmark(cfg: &RunConfig, name: DatasetName) -> Result<PathSource> {
    let src = PathSource::open(name.name(), &configured_root(cfg, name)?)?;
    if let Some(expected) = name.expected_count() {
        if src.len() != expected {
            log::warn!("{}: found {} samples, expected {expected}", name.name(), src.len());
        }
    }
    Ok(src)
}

/// Resolves `--dataset` into a sample source.
///
/// `synthetic` is the seeded toy set from the config; `paper` is the
/// 900 + 550 training portion of Kvasir-SEG and CVC-ClinicDB. For testing,
/// those two names resolve to their held-out portions of the same seeded
/// split. Anything else must be a directory with `images/` and `masks/`.
pub fn resolve_dataset(cfg: &RunConfig, spec: &str, role: SplitRole) -> Result<Box<dyn SampleSource>> {
    if spec == "paper" {
        if role == SplitRole::Test {
            return Err(Error::Config(
                "`paper` names the training split; evaluate kvasir and clinicdb separately".into(),
            ));
        }
        let k = list_samples(&configured_root(cfg, DatasetName::KvasirSeg)?)?;
        let c = list_samples(&configured_root(cfg, DatasetName::CvcClinicDb)?)?;
        let split = make_paper_split(&k, &c, cfg.seed)?;
        return Ok(Box::new(PathSource {
            name: "paper_train".into(),
            paths: split.train,
        }));
    }
    if let Ok(name) = spec.parse::<DatasetName>() {
        if name == DatasetName::Synthetic {
            return Ok(Box::new(synthetic_toy_dataset(
                cfg.data.synthetic_count,
                cfg.data.synthetic_size,
                cfg.seed,
            )?));
        }
        let full = open_benchmark(cfg, name)?;
        let held_out = matches!(name, DatasetName::KvasirSeg | DatasetName::CvcClinicDb);
        if role == SplitRole::Test && held_out {
            let k = list_samples(&configured_root(cfg, DatasetName::KvasirSeg)?)?;
            let c = list_samples(&configured_root(cfg, DatasetName::CvcClinicDb)?)?;
            let split = make_paper_split(&k, &c, cfg.seed)?;
            let paths = if name == DatasetName::KvasirSeg {
                split.test_kvasir
            } else {
                split.test_clinic
            };
            return Ok(Box::new(PathSource { name: full.name, paths }));
        }
        return Ok(Box::new(full));
    }
    let dir = Path::new(spec);
    if dir.is_dir() {
        let name = dir
            .file_name()
            .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
        return Ok(Box::new(PathSource::open(name, dir)?));
    }
    Err(Error::Data(format!(
        "unknown dataset `{spec}`: not a dataset name or a directory"
    )))
}

fn dataset_label(spec: &str) -> String {
    match spec.parse::<DatasetName>() {
        Ok(n) => n.name().to_string(),
        Err(_) => Path::new(spec)
            .file_name()
            .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned()),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Train { dataset, checkpoint, out } => {
            let (cfg, resume) = match &checkpoint {
                Some(p) => {
                    let (ck, ck_cfg) = checkpoint_config(p, g)?;
                    let cfg = if g.config.is_some() { base_config(g)? } else { ck_cfg };
                    (cfg, Some(ck))
                }
                None => (base_config(g)?, None),
            };
            let spec = dataset.unwrap_or_else(|| cfg.train.dataset.clone());
            let source = resolve_dataset(&cfg, &spec, SplitRole::Train)?;
            let outcome = train(
                &cfg,
                source.as_ref(),
                TrainOptions {
                    out_dir: Some(out.clone()),
                    resume,
                },
            )?;
            if let (Some(first), Some(last)) = (outcome.log.entries.first(), outcome.log.entries.last()) {
                println!(
                    "trained iterations {}..{}: loss {:.6} -> {:.6}",
                    first.iteration, last.iteration, first.total, last.total
                );
            }
            println!("checkpoint: {}", out.join("checkpoint.ckpt").display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
            threshold,
        } => {
            let (ck, cfg) = checkpoint_config(&checkpoint, g)?;
            let (net, store) = restore(&Checkpoint { config: cfg.clone(), ..ck })?;
            let source = resolve_dataset(&cfg, &dataset, SplitRole::Test)?;
            let model = crate::model::Trained {
                net: &net,
                store: &store,
                drop_os: false,
            };
            let label = dataset_label(&dataset);
            // nothing is written unless every image was scored
            let report = evaluate_source(&model, source.as_ref(), &label, threshold, !cfg.deterministic)?;
            std::fs::create_dir_all(&out)?;
            report.write_csv(&out.join(format!("metrics_{label}.csv")))?;
            let table = report.summary_table();
            std::fs::write(out.join(format!("summary_{label}.md")), &table)?;
            print!("{table}");
            for (id, why) in &report.failures {
                eprintln!("skipped {id}: {why}");
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            probability,
            threshold,
        } => {
            let (ck, cfg) = checkpoint_config(&checkpoint, g)?;
            let (net, store) = restore(&Checkpoint { config: cfg, ..ck })?;
            let img = read_image(&image)?;
            let p = net.predict_probability(&store, &img, false)?;
            write_mask(&p, threshold, &out)?;
            if let Some(path) = probability {
                crate::data::mask_to_luma(p.tensor()).save(&path)?;
            }
            Ok(())
        }
        Command::Visualize {
            checkpoint,
            dataset,
            out,
            limit,
        } => {
            let (ck, cfg) = checkpoint_config(&checkpoint, g)?;
            let (net, store) = restore(&Checkpoint { config: cfg.clone(), ..ck })?;
            let source = resolve_dataset(&cfg, &dataset, SplitRole::Test)?;
            let written = crate::viz::write_panels(&net, &store, source.as_ref(), &out, limit)?;
            println!("{} panels in {}", written.len(), out.display());
            Ok(())
        }
        Command::MakeToyData { out, count, size } => {
            let cfg = base_config(g)?;
            let ds = synthetic_toy_dataset(
                count.unwrap_or(cfg.data.synthetic_count),
                size.unwrap_or(cfg.data.synthetic_size),
                cfg.seed,
            )?;
            write_dataset(&ds, &out)?;
            println!("{} samples in {}", ds.records.len(), out.display());
            Ok(())
        }
        Command::DumpConfig { checkpoint } => {
            let cfg = match checkpoint {
                Some(p) => checkpoint_config(&p, g)?.1,
                None => base_config(g)?,
            };
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(cfg.dump().as_bytes())?;
            Ok(())
        }
    }
}

fn write_mask(p: &MaskTensor, threshold: f64, path: &Path) -> Result<()> {
    let t = p.tensor();
    let img = image::GrayImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        image::Luma([if t.get(0, 0, y as usize, x as usize) >= threshold { 255 } else { 0 }])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}
