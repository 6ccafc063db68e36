//! `gen-data`: synthetic multi-focus pairs.
//!
//! The dataset is staged in a hidden sibling directory and renamed into
//! place, so a failed run leaves nothing behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use rediffuse_core::dataio::{encode_pgm_annotated, gen_pair, pair_seed, read_pgm, Texture};
use rediffuse_core::group_action::PlanarImage;

use crate::error::{at, CliError};
use crate::emit;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Side length in pixels (even).
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "blur-sigma", default_value_t = 2.0)]
    pub blur_sigma: f64,
    /// shapes, gradients or mixed.
    #[arg(long, default_value_t = Texture::Mixed)]
    pub texture: Texture,
}

/// One manifest line: a pair's seed and file names relative to the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub size: usize,
    pub gt: String,
    pub a: String,
    pub b: String,
    pub mask: String,
}

impl ManifestEntry {
    fn line(&self, args: &GenDataArgs) -> String {
        format!(
            "index={} seed={} size={} texture={} blur_sigma={} gt={} a={} b={} mask={}",
            self.index, self.seed, self.size, args.texture, args.blur_sigma, self.gt, self.a, self.b, self.mask
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self, CliError> {
        let field = |key: &str| -> Result<&str, CliError> {
            line.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| CliError::usage(format!("manifest line {lineno}: missing {key}")))
        };
        let num = |key: &str| -> Result<u64, CliError> {
            field(key)?.parse().map_err(|_| CliError::usage(format!("manifest line {lineno}: bad {key}")))
        };
        Ok(Self {
            index: num("index")? as usize,
            seed: num("seed")?,
            size: num("size")? as usize,
            gt: field("gt")?.to_string(),
            a: field("a")?.to_string(),
            b: field("b")?.to_string(),
            mask: field("mask")?.to_string(),
        })
    }
}

/// Loaded pair: (ground truth, source A, source B).
pub type LoadedPair = (PlanarImage<f64>, PlanarImage<f64>, PlanarImage<f64>);

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| ManifestEntry::parse(l, i + 1))
        .collect()
}

pub fn load_pairs(dir: &Path) -> Result<Vec<LoadedPair>, CliError> {
    read_manifest(dir)?
        .iter()
        .map(|e| {
            let load = |name: &str| {
                let p = dir.join(name);
                read_pgm(&p).map_err(at(&p))
            };
            Ok((load(&e.gt)?, load(&e.a)?, load(&e.b)?))
        })
        .collect()
}

fn stage(args: &GenDataArgs, dir: &Path) -> Result<usize, CliError> {
    fs::create_dir(dir)?;
    let mut manifest = String::new();
    for i in 0..args.count {
        let seed = pair_seed(args.seed, i as u64);
        let pair = gen_pair(seed, args.size, args.texture, args.blur_sigma)?;
        let entry = ManifestEntry {
            index: i,
            seed,
            size: args.size,
            gt: format!("gt_{i}.pgm"),
            a: format!("a_{i}.pgm"),
            b: format!("b_{i}.pgm"),
            mask: format!("mask_{i}.pgm"),
        };
        let line = entry.line(args);
        let note = [format!("rediffuse gen-data {line}")];
        fs::write(dir.join(&entry.gt), encode_pgm_annotated(&pair.ground_truth, 65535, &note)?)?;
        fs::write(dir.join(&entry.a), encode_pgm_annotated(&pair.source_a, 65535, &note)?)?;
        fs::write(dir.join(&entry.b), encode_pgm_annotated(&pair.source_b, 65535, &note)?)?;
        fs::write(dir.join(&entry.mask), encode_pgm_annotated(&pair.mask, 255, &note)?)?;
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(manifest.as_bytes())?;
    f.sync_all()?;
    Ok(4 * args.count)
}

pub fn run(args: &GenDataArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.size == 0 || args.size % 2 != 0 {
        return Err(CliError::usage(format!("--size {} must be even and positive", args.size)));
    }
    if !(args.blur_sigma > 0.0 && args.blur_sigma.is_finite()) {
        return Err(CliError::usage(format!("--blur-sigma {} must be positive", args.blur_sigma)));
    }
    let target = &args.out;
    if target.exists() {
        let empty = fs::read_dir(target).map_err(|e| CliError::usage(format!("{}: {e}", target.display())))?.next().is_none();
        if !empty {
            return Err(CliError::usage(format!("{} exists and is not empty", target.display())));
        }
    }
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CliError::usage(format!("{}: {e}", parent.display())))?;
    let name = target
        .file_name()
        .ok_or_else(|| CliError::usage(format!("{} has no directory name", target.display())))?
        .to_string_lossy();
    let staging = parent.join(format!(".{name}.partial{}", std::process::id()));
    let result = stage(args, &staging).and_then(|files| {
        if target.exists() {
            fs::remove_dir(target)?;
        }
        fs::rename(&staging, target)?;
        Ok(files)
    });
    match result {
        Ok(files) => {
            log::info!("wrote {} pairs to {}", args.count, target.display());
            emit(out, &format!("pairs={} files={} dir={}", args.count, files + 1, target.display()))
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(CliError { message: format!("{}: {}", target.display(), e.message), ..e })
        }
    }
}
