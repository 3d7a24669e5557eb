//! Market-1501 style folders: `bounding_box_train`, `query`,
//! `bounding_box_test`, with files named `<id>_c<cam>...`.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::data::{Dataset, ImageSource, Sample, Splits};
use crate::error::{HatError, Result};

pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

/// Identity label of junk detections.
pub const JUNK_ID: i64 = -1;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(-?\d+)_c(\d+)").expect("valid regex"))
}

/// `(identity, camera)` from a file name; cameras are returned 0-based.
pub fn parse_name(name: &str) -> Option<(i64, usize)> {
    let caps = pattern().captures(name)?;
    let id: i64 = caps[1].parse().ok()?;
    let cam: usize = caps[2].parse().ok()?;
    if id < JUNK_ID || cam == 0 {
        return None;
    }
    Some((id, cam - 1))
}

/// Parsed splits plus one warning per skipped file.
#[derive(Debug, Clone)]
pub struct MarketSplits {
    pub splits: Splits,
    pub warnings: Vec<String>,
}

fn read_split(dir: &Path, keep_junk: bool, warnings: &mut Vec<String>) -> Result<Dataset> {
    let mut samples = Vec::new();
    if !dir.is_dir() {
        return Ok(Dataset { samples });
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let is_image = path
            .extension()
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
            .unwrap_or(false);
        if !is_image {
            warnings.push(format!("{}: not an image, skipped", path.display()));
            continue;
        }
        let Some((identity, camera)) = parse_name(&name) else {
            warnings.push(format!("{}: name does not match <id>_c<cam>, skipped", path.display()));
            continue;
        };
        if identity == JUNK_ID && !keep_junk {
            continue;
        }
        samples.push(Sample {
            source: ImageSource::File(path),
            identity,
            camera,
            name,
        });
    }
    Ok(Dataset { samples })
}

/// Reads the three splits under `root`. A missing split folder yields an
/// empty split. Junk ids are dropped from train and query but kept in the
/// gallery as distractors.
pub fn parse_market_folder(root: &Path) -> Result<MarketSplits> {
    if !root.is_dir() {
        return Err(HatError::Input(format!("dataset root {} is not a directory", root.display())));
    }
    let mut warnings = Vec::new();
    let train = read_split(&root.join(TRAIN_DIR), false, &mut warnings)?;
    let query = read_split(&root.join(QUERY_DIR), false, &mut warnings)?;
    let gallery = read_split(&root.join(GALLERY_DIR), true, &mut warnings)?;
    Ok(MarketSplits {
        splits: Splits { train, query, gallery },
        warnings,
    })
}
