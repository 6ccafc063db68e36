//! `metrics`: MS-SSIM, QMI and Qabf of a fused image, in that order.

use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use rediffuse_core::dataio::{fusion_ms_ssim, ms_ssim, qabf, qmi, read_pgm};
use rediffuse_core::group_action::PlanarImage;

use crate::error::{at, CliError};
use crate::{emit, fmt6};

pub const QMI_BINS: usize = 256;
pub const MS_SSIM_SCALES: usize = 3;

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Ground truth; adds an MS-SSIM-against-reference record.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

/// Named scores in output order.
pub fn compute(
    fused: &PlanarImage<f64>,
    a: &PlanarImage<f64>,
    b: &PlanarImage<f64>,
    gt: Option<&PlanarImage<f64>>,
) -> Result<Vec<(&'static str, f64)>, CliError> {
    for (name, img) in [("a", a), ("b", b)].into_iter().chain(gt.map(|g| ("gt", g))) {
        if !img.same_shape(fused) {
            return Err(CliError::usage(format!(
                "{name} is {}x{} but fused is {}x{}",
                img.height, img.width, fused.height, fused.width
            )));
        }
    }
    let mut rows = vec![
        ("ms_ssim", fusion_ms_ssim(fused, a, b)?),
        ("qmi", qmi(fused, a, b, QMI_BINS)?),
        ("qabf", qabf(fused, a, b)?),
    ];
    if let Some(g) = gt {
        rows.push(("ms_ssim_gt", ms_ssim(fused, g, MS_SSIM_SCALES)?));
    }
    Ok(rows)
}

pub fn run(args: &MetricsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let fused = read_pgm(&args.fused).map_err(at(&args.fused))?;
    let a = read_pgm(&args.a).map_err(at(&args.a))?;
    let b = read_pgm(&args.b).map_err(at(&args.b))?;
    let gt = match &args.gt {
        Some(p) => Some(read_pgm(p).map_err(at(p))?),
        None => None,
    };
    for (name, v) in compute(&fused, &a, &b, gt.as_ref())? {
        emit(out, &format!("{name}={}", fmt6(v)))?;
    }
    Ok(())
}
