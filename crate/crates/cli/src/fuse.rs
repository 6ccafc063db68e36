//! `fuse`: deterministic reverse diffusion conditioned on two sources.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use rediffuse_core::dataio::{encode_pgm_annotated, read_pgm, write_atomic, Checkpoint};
use rediffuse_core::diffusion::sample;
use rediffuse_core::group_action::PlanarImage;
use rediffuse_core::rng::SeededRng;
use rediffuse_core::unet::{Model, UNet};

use crate::error::{at, CliError};
use crate::{emit, fmt6};

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write |fused − a| and |fused − b| maps next to the output.
    #[arg(long)]
    pub diff: bool,
    /// Seed of the initial noise F_T.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Largest centered window whose sides are multiples of `q`.
pub fn center_crop(img: &PlanarImage<f64>, q: usize) -> Option<PlanarImage<f64>> {
    let (h, w) = (img.height / q * q, img.width / q * q);
    if h == 0 || w == 0 {
        return None;
    }
    let (top, left) = ((img.height - h) / 2, (img.width - w) / 2);
    Some(PlanarImage::from_fn(h, w, img.channels, |i, j, c| img.at(top + i, left + j, c)))
}

/// Loads a checkpoint and builds its network, mapping every failure to the
/// checkpoint exit code.
pub fn load_model(path: &Path) -> Result<(Checkpoint, UNet), CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    let net = UNet::new(ck.header.model.clone()).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    net.check_params(&ck.tensors).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    Ok((ck, net))
}

/// Fused image in `[0, 1]` for sources of a size the network accepts.
pub fn fuse_images(
    ck: &Checkpoint,
    net: &UNet,
    a: &PlanarImage<f64>,
    b: &PlanarImage<f64>,
    seed: u64,
) -> Result<PlanarImage<f64>, CliError> {
    let sched = ck.header.schedule.build().map_err(|e| CliError::checkpoint(e.to_string()))?;
    let model = Model { net, params: &ck.tensors };
    let mut rng = SeededRng::new(seed);
    let fused: PlanarImage<f32> = sample(&model, &a.cast(), &b.cast(), &sched, &mut rng)?;
    Ok(fused.cast::<f64>().map(|v| v.clamp(0.0, 1.0)))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_{suffix}.pgm"))
}

/// `|x − y|` scaled by its maximum (zeros when the maximum is 0).
pub fn diff_map(x: &PlanarImage<f64>, y: &PlanarImage<f64>) -> (PlanarImage<f64>, f64) {
    let d: Vec<f64> = x.values.iter().zip(&y.values).map(|(p, q)| (p - q).abs()).collect();
    let max = d.iter().copied().fold(0.0, f64::max);
    let values = d.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    (PlanarImage { values, ..x.clone() }, max)
}

/// Header comments echoing the resolved fuse configuration.
fn provenance(args: &FuseArgs, ck: &Checkpoint, fused: &PlanarImage<f64>) -> Vec<String> {
    let (h, m, s) = (&ck.header, &ck.header.model, &ck.header.schedule);
    vec![
        format!(
            "rediffuse fuse a={} b={} ckpt={} seed={} size={}x{}",
            args.a.display(),
            args.b.display(),
            args.ckpt.display(),
            args.seed,
            fused.height,
            fused.width
        ),
        format!(
            "model m={} base_channels={} depth={} gn_groups={} time_dim={} plain={} epochs_done={} train_seed={}",
            m.m, m.base_channels, m.depth, m.gn_groups, m.time_dim, m.plain, h.epochs_done, h.seed
        ),
        format!("schedule steps={} beta_start={} beta_end={}", s.steps, s.beta_start, s.beta_end),
    ]
}

pub fn run(args: &FuseArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (ck, net) = load_model(&args.ckpt)?;
    let mut a = read_pgm(&args.a).map_err(at(&args.a))?;
    let mut b = read_pgm(&args.b).map_err(at(&args.b))?;
    if !a.same_shape(&b) {
        return Err(CliError::usage(format!(
            "source sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let q = 1usize << ck.header.model.depth;
    if a.height % q != 0 || a.width % q != 0 {
        let (h, w) = (a.height, a.width);
        a = center_crop(&a, q).ok_or_else(|| CliError::usage(format!("{h}x{w} is smaller than {q}x{q}")))?;
        b = center_crop(&b, q).expect("same shape as a");
        log::warn!("sources are {h}x{w}; center-cropped to {}x{} (multiples of {q})", a.height, a.width);
    }
    let fused = fuse_images(&ck, &net, &a, &b, args.seed)?;
    let notes = provenance(args, &ck, &fused);
    let mut files = vec![(args.out.clone(), encode_pgm_annotated(&fused, 65535, &notes)?)];
    let mut report = format!("fused={} size={}x{} seed={}", args.out.display(), fused.height, fused.width, args.seed);
    if args.diff {
        for (name, src) in [("diff_a", &a), ("diff_b", &b)] {
            let (map, max) = diff_map(&fused, src);
            let mut notes = notes.clone();
            notes.push(format!("{name} normalized by max={}", fmt6(max)));
            files.push((sibling(&args.out, name), encode_pgm_annotated(&map, 65535, &notes)?));
            report.push_str(&format!(" {name}_max={}", fmt6(max)));
        }
    }
    for (path, bytes) in &files {
        write_atomic(path, bytes).map_err(at(path))?;
    }
    emit(out, &report)
}
