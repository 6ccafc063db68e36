//! Synthetic training pairs, file formats and fusion metrics.

pub mod checkpoint;
pub mod metrics;
pub mod pgm;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use checkpoint::{Checkpoint, CheckpointHeader, ScheduleHeader};
pub use metrics::{fusion_ms_ssim, ms_ssim, qabf, qmi};
pub use pgm::{decode_pgm, encode_pgm, encode_pgm_annotated, read_pgm, write_pgm};
pub use synth::{gen_pair, gaussian_blur, pair_seed, FusionPair, Texture};

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
