use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use glmae::eval::{
    convergence_compare, evaluate_checkpoint, finetune, save_finetuned, EncoderInit, FinetuneConfig, FinetuneMode,
};
use glmae::pretrain::{reconstruct_dump, train, Mode, PretrainConfig};
use glmae::views::{augstats_csv, crop_statistics, sample_crop_sets, AugStatsRow, ViewConfig};
use glmae::volume::{load_volume, synth_dataset, synth_volumes};
use glmae::Result;

#[derive(Parser)]
#[command(name = "glmae", version, about = "Global-local masked autoencoder pre-training for 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset (raw grids plus manifest.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train from a JSON config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a segmentation head (and optionally the encoder).
    Finetune {
        /// Pre-training checkpoint; omit for a random-init baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "linear")]
        mode: FinetuneMode,
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the fine-tuned checkpoint and report.json.
        #[arg(long, default_value = "runs/finetune")]
        out: PathBuf,
    },
    /// Held-out Dice of a fine-tuned checkpoint (or linear evaluation of a
    /// pre-training checkpoint).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pre-train GL-MAE and MAE3D side by side with linear probes.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "50,100,200")]
        probe_epochs: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        finetune_config: Option<PathBuf>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
    /// Overlap and Hit statistics of local vs global crops, as CSV.
    Augstats {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        p: usize,
        #[arg(long, default_value_t = 8)]
        q: usize,
        /// Local scale ranges as lo:hi pairs.
        #[arg(long, value_delimiter = ',', default_value = "0.25:0.25,0.5:0.5,0.25:0.5")]
        local_scales: Vec<String>,
        #[arg(long, default_value_t = 1250)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write original / masked / reconstructed center slices for one volume.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw-grid volume (.f32raw); a synthetic volume is used if omitted.
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/reconstruct")]
        out: PathBuf,
    },
}

fn finetune_config(path: Option<&Path>) -> Result<FinetuneConfig> {
    path.map(FinetuneConfig::load).unwrap_or_else(|| Ok(FinetuneConfig::default()))
}

fn parse_scale(s: &str) -> Result<(f64, f64)> {
    let bad = || glmae::Error::InvalidArgument(format!("scale range `{s}` is not lo:hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n, size, classes, seed } => {
            let manifest = synth_dataset(n, [size; 3], classes, seed, &out)?;
            println!("wrote {} volumes to {}", manifest.entries.len(), out.display());
        }
        Command::Pretrain { config, mode, seed, out_dir, resume } => {
            let mut cfg = PretrainConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            if resume.is_some() {
                cfg.resume = resume;
            }
            cfg.log_stdout = true;
            let report = train(&cfg)?;
            eprintln!(
                "{} steps in {:.1}s, checkpoint {}",
                report.log.len(),
                report.wall_clock_secs,
                report.final_checkpoint.display()
            );
        }
        Command::Finetune { checkpoint, mode, label_fraction, config, seed, out } => {
            let mut cfg = finetune_config(config.as_deref())?;
            cfg.mode = mode;
            cfg.label_fraction = label_fraction;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = cfg.data.load()?;
            let init = match &checkpoint {
                Some(dir) => EncoderInit::from_checkpoint(dir)?,
                None => EncoderInit::Random,
            };
            let model = match &init {
                EncoderInit::Pretrained { model, .. } => model.clone(),
                EncoderInit::Random => cfg.model.clone(),
            };
            let (report, params) = finetune(init, &data, &cfg)?;
            save_finetuned(&out, &params, &model, &cfg, data[0].num_classes())?;
            let json = serde_json::to_string_pretty(&report)?;
            fs::write(out.join("report.json"), &json)?;
            println!("{json}");
        }
        Command::Eval { checkpoint, config } => {
            let cfg = finetune_config(config.as_deref())?;
            let report = evaluate_checkpoint(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare { probe_epochs, seeds, config, finetune_config: ft, out } => {
            let pre = match config {
                Some(p) => PretrainConfig::load(&p)?,
                None => PretrainConfig::default(),
            };
            let ft = finetune_config(ft.as_deref())?;
            let data = ft.data.load()?;
            let rows = convergence_compare(&pre, &ft, &data, &probe_epochs, &seeds, &out)?;
            print!("{}", glmae::eval::compare_csv(&rows));
        }
        Command::Augstats { n, size, p, q, local_scales, rounds, seed, out } => {
            let shapes = vec![[size; 3]; n];
            let mut rows = Vec::new();
            for s in &local_scales {
                let (lo, hi) = parse_scale(s)?;
                let cfg = ViewConfig { local_scale: (lo, hi), ..ViewConfig::desk() };
                let stats = crop_statistics(&sample_crop_sets(&shapes, p, q, &cfg, seed, rounds)?)?;
                rows.push(AugStatsRow {
                    local_scale_lo: lo,
                    local_scale_hi: hi,
                    overlap_pct: stats.overlap_pct,
                    hit_pct: stats.hit_pct,
                    n_samples: stats.n_samples,
                    seed,
                });
            }
            let csv = augstats_csv(&rows);
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Reconstruct { checkpoint, volume, seed, out } => {
            let v = match volume {
                Some(path) => load_volume(&path)?,
                None => synth_volumes(1, [64; 3], 3, seed)?.remove(0).volume,
            };
            let dump = reconstruct_dump(&checkpoint, &v, seed, &out)?;
            for row in &dump.rows {
                println!("{} masked {}/{} mse {:.6}", row.kind, row.masked_patches, row.num_patches, row.mse);
            }
            println!("wrote {}", dump.image.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
