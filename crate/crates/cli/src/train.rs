//! `train`: fit a model on a generated dataset.
//!
//! A checkpoint and the loss log are rewritten atomically after every
//! `--save-every` epochs, so a diverged run leaves the last good pair intact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use rediffuse_core::autodiff::AdamConfig;
use rediffuse_core::dataio::{write_atomic, Checkpoint, CheckpointHeader, ScheduleHeader};
use rediffuse_core::diffusion::{ScheduleShape, DESK_BETA_END, DESK_BETA_START};
use rediffuse_core::training::{EpochRecord, Example, TrainConfig, Trainer};
use rediffuse_core::unet::{HeadOrder, UNet, UNetConfig};

use crate::error::{at, CliError};
use crate::gen_data::load_pairs;
use crate::{emit, fmt6};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Total epochs; a resumed run continues up to this count.
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Diffusion steps.
    #[arg(long = "T", default_value_t = 100)]
    pub steps: usize,
    #[arg(long = "beta-start", default_value_t = DESK_BETA_START)]
    pub beta_start: f64,
    #[arg(long = "beta-end", default_value_t = DESK_BETA_END)]
    pub beta_end: f64,
    /// Rotation group order.
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    /// Unrolled top-level width (orientations × channels per orientation).
    #[arg(long = "base-ch", default_value_t = 32)]
    pub base_ch: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long = "gn-groups", default_value_t = 4)]
    pub gn_groups: usize,
    #[arg(long = "time-dim", default_value_t = 32)]
    pub time_dim: usize,
    /// Replace equivariant convolutions with free dense ones.
    #[arg(long)]
    pub plain: bool,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint; architecture, schedule and optimizer
    /// settings come from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long = "save-every", default_value_t = 1)]
    pub save_every: usize,
}

impl TrainArgs {
    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let mut s = self.out.clone().into_os_string();
            s.push(".log");
            PathBuf::from(s)
        })
    }

    fn model_config(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.base_ch,
            m: self.m,
            depth: self.depth,
            gn_groups: self.gn_groups,
            time_dim: self.time_dim,
            steps: self.steps,
            head_order: HeadOrder::ConvFirst,
            plain: self.plain,
            ..UNetConfig::desk()
        }
    }
}

pub fn log_line(r: &EpochRecord) -> String {
    format!("epoch={} loss={} lr={}", r.epoch, fmt6(r.mean_loss), r.lr)
}

/// Parses a loss log back into records.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let get = |k: &str| {
                l.split_whitespace()
                    .find_map(|kv| kv.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                    .ok_or_else(|| CliError::usage(format!("{}: malformed line {l:?}", path.display())))
            };
            let bad = || CliError::usage(format!("{}: malformed line {l:?}", path.display()));
            Ok(EpochRecord {
                epoch: get("epoch")?.parse().map_err(|_| bad())?,
                mean_loss: get("loss")?.parse().map_err(|_| bad())?,
                lr: get("lr")?.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn save(ck: &Checkpoint, ck_path: &Path, log: &[String], log_path: &Path) -> Result<(), CliError> {
    ck.save(ck_path).map_err(at(ck_path))?;
    let mut text = log.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(log_path, text.as_bytes()).map_err(at(log_path))
}

pub fn run(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let pairs = load_pairs(&args.data)?;
    if pairs.is_empty() {
        return Err(CliError::usage(format!("{} holds no pairs", args.data.display())));
    }
    let size = pairs[0].0.height;
    if pairs.iter().any(|(g, a, b)| [g, a, b].iter().any(|x| x.height != size || x.width != size)) {
        return Err(CliError::usage("dataset images must all be square and the same size"));
    }
    let data: Vec<Example<f32>> =
        pairs.iter().map(|(g, a, b)| Example { ia: a.cast(), ib: b.cast(), target: g.cast() }).collect();
    let log_path = args.log_path();

    if args.batch == 0 || args.save_every == 0 {
        return Err(CliError::usage("--batch and --save-every must be positive"));
    }
    let (header, params, adam, mut log) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
            if ck.header.image_size != size {
                return Err(CliError::checkpoint(format!(
                    "checkpoint was trained on {0}x{0} images, dataset has {size}x{size}",
                    ck.header.image_size
                )));
            }
            let adam = ck.adam_state()?;
            let done = ck.header.epochs_done;
            log::info!(
                "resuming {} at epoch {done}; model, schedule, batch, lr and seed come from the checkpoint",
                path.display()
            );
            let log: Vec<String> = if log_path.exists() {
                read_log(&log_path)?.iter().filter(|r| r.epoch <= done).map(log_line).collect()
            } else {
                Vec::new()
            };
            (ck.header, ck.tensors, adam, log)
        }
        None => {
            let model = args.model_config();
            model.validate()?;
            model.check_input_size(size, size)?;
            let header = CheckpointHeader {
                seed: args.seed,
                image_size: size,
                epochs_done: 0,
                batch: args.batch,
                adam: AdamConfig { lr: args.lr, ..AdamConfig::default() },
                adam_step: 0,
                schedule: ScheduleHeader {
                    steps: args.steps,
                    beta_start: args.beta_start,
                    beta_end: args.beta_end,
                    shape: ScheduleShape::Linear,
                },
                model,
            };
            let net = UNet::new(header.model.clone())?;
            let params = net.init_params::<f32>(args.seed)?;
            (header, params, None, Vec::new())
        }
    };

    let net = UNet::new(header.model.clone()).map_err(|e| CliError::checkpoint(e.to_string()))?;
    net.check_params(&params).map_err(|e| CliError::checkpoint(e.to_string()))?;
    let sched = header.schedule.build()?;
    let config = TrainConfig { batch: header.batch, seed: header.seed, adam: header.adam };
    let mut trainer = match adam {
        Some(state) => Trainer::resume(&net, &sched, config, params, state, header.epochs_done)?,
        None => {
            let mut t = Trainer::new(&net, &sched, config, params);
            t.epochs_done = header.epochs_done;
            t
        }
    };

    let snapshot = |t: &Trainer<f32>| {
        Checkpoint::capture(CheckpointHeader { epochs_done: t.epochs_done, ..header.clone() }, &t.params, Some(&t.adam))
    };
    if trainer.epochs_done >= args.epochs {
        save(&snapshot(&trainer)?, &args.out, &log, &log_path)?;
    }
    let mut last = None;
    while trainer.epochs_done < args.epochs {
        let record = trainer.run_epoch(&data).map_err(|e| {
            let err = CliError::from(e);
            if err.code == crate::error::EXIT_DIVERGED {
                log::error!("training diverged in epoch {}; keeping the last saved checkpoint", trainer.epochs_done + 1);
            }
            err
        })?;
        log::debug!("{}", log_line(&record));
        log.push(log_line(&record));
        last = Some(record);
        if trainer.epochs_done % args.save_every == 0 || trainer.epochs_done == args.epochs {
            save(&snapshot(&trainer)?, &args.out, &log, &log_path)?;
        }
    }
    let loss = last.map_or("none".to_string(), |r| fmt6(r.mean_loss));
    emit(out, &format!("epochs={} final_loss={loss} checkpoint={}", trainer.epochs_done, args.out.display()))
}
