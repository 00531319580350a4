use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ehct_core::checkpoint::Checkpoint;
use ehct_core::data::{
    load_image, load_mask, save_mask, synth_dataset, tile_manifest, ChangeMask, ImagePair, Manifest, SynthOptions,
};
use ehct_core::train::{evaluate, predict_manifest, restore, train, JsonlLog, TrainConfig};
use ehct_core::viz::{save_diffmap, visualize};
use ehct_core::EhctError;
use serde::Serialize;

/// Bi-temporal change detection harness.
#[derive(Parser)]
#[command(name = "ehct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of textured pairs with rectangles added to the second image.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Snap rectangles to multiples of this many pixels.
        #[arg(long, default_value_t = 1)]
        grid: usize,
        /// Paint no rectangles; every mask is empty.
        #[arg(long)]
        no_changes: bool,
    },
    /// Cut every pair of a manifest into square tiles.
    Tile {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes log.jsonl, best.safetensors and last.safetensors.
    Train {
        #[arg(long)]
        train: PathBuf,
        /// Validation manifest; the training split is used when omitted.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the metric report of a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write predicted masks as `<out>/<id>.png`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Render the pipeline intermediates of one pair.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Color-coded comparison of a predicted mask with the ground truth.
    Diffmap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Training configuration: a JSON file, then individual overrides.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// One of baseline, +ETMT, +RMI+ETMT, +ETMT+RMII, full.
    #[arg(long, allow_hyphen_values = true)]
    ablation: Option<String>,
    /// Model input size; must equal the tile size of the data.
    #[arg(long)]
    input_size: Option<usize>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.lr.is_none()
            && self.batch_size.is_none()
            && self.weight_decay.is_none()
            && self.momentum.is_none()
            && self.epochs.is_none()
            && self.seed.is_none()
            && self.ablation.is_none()
            && self.input_size.is_none()
    }

    fn resolve(&self) -> Result<TrainConfig, EhctError> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| EhctError::io(p, e))?;
                serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| EhctError::Config(format!("{}: {e}", p.display())))?
            }
            None => TrainConfig::default(),
        };
        c.lr = self.lr.unwrap_or(c.lr);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.momentum = self.momentum.unwrap_or(c.momentum);
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.seed = self.seed.unwrap_or(c.seed);
        if let Some(a) = &self.ablation {
            c.ablation = a.parse()?;
        }
        c.model.hct.input_size = self.input_size.unwrap_or(c.model.hct.input_size);
        c.validate()?;
        Ok(c)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, count, size, grid, no_changes } => {
            let opts = SynthOptions { grid, changes: !no_changes, ..SynthOptions::default() };
            let m = synth_dataset(&out, seed, count, size, &opts)?;
            println!("wrote {} pairs to {}", m.len(), out.join("manifest.json").display());
        }
        Command::Tile { manifest, tile, out } => {
            let m = tile_manifest(&Manifest::load(&manifest)?, tile, &out)?;
            println!("wrote {} tiles to {}", m.len(), out.join("manifest.json").display());
        }
        Command::Train { train: train_path, val, out, cfg } => {
            let config = cfg.resolve()?;
            let train_m = Manifest::load(&train_path)?;
            let val_m = val.as_deref().map(Manifest::load).transpose()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("train_config.json"), &config)?;
            let log_path = out.join("log.jsonl");
            let file = fs::File::create(&log_path).map_err(|e| EhctError::io(&log_path, e))?;
            let mut log = JsonlLog(BufWriter::new(file));
            let outcome = train(&config, &train_m, val_m.as_ref(), |r| {
                log.write(r).map_err(|e| EhctError::io(&log_path, e))?;
                if let ehct_core::train::LogRecord::Epoch { epoch, mean_loss, val_f1, .. } = r {
                    eprintln!(
                        "epoch {epoch}: loss {mean_loss:.4}, val F1 {}",
                        val_f1.map_or("n/a".into(), |f| format!("{f:.4}"))
                    );
                }
                Ok(())
            })?;
            outcome.best.save(&out.join("best.safetensors"))?;
            outcome.last.save(&out.join("last.safetensors"))?;
            println!(
                "{} steps; best val F1 {} at epoch {}; checkpoint hash {}",
                outcome.steps,
                outcome.best.val_f1.map_or("n/a".into(), |f| format!("{f:.4}")),
                outcome.best.epoch,
                outcome.best.parameter_hash()
            );
        }
        Command::Eval { checkpoint, manifest, json, cfg } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let resolved = if cfg.is_empty() { None } else { Some(cfg.resolve()?) };
            let expected = resolved.as_ref().map(|c| (&c.model, c.ablation));
            let batch = resolved.as_ref().map_or(8, |c| c.batch_size);
            let report = evaluate(&ck, &m, expected, batch)?;
            println!("{report}");
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Command::Predict { checkpoint, manifest, out, batch_size } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let (store, net) = restore(&ck)?;
            let masks = predict_manifest(&net, &store, &m, batch_size)?;
            for (e, mask) in m.entries.iter().zip(masks) {
                let mask = ChangeMask::new(e.id.clone(), m.tile_size, m.tile_size, mask)?;
                save_mask(&out.join(format!("{}.png", e.id)), &mask)?;
            }
            println!("wrote {} masks to {}", m.len(), out.display());
        }
        Command::Visualize { checkpoint, a, b, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (store, net) = restore(&ck)?;
            let pair = ImagePair::new("pair", load_image(&a)?, load_image(&b)?)?;
            for p in visualize(&net, &store, &pair, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Diffmap { pred, gt, out } => {
            save_diffmap(&out, &load_mask(&pred, "pred")?, &load_mask(&gt, "gt")?)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<EhctError>().map_or(3, EhctError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
