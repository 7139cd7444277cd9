//! Tab-separated dataset manifests:
//! `id <TAB> rgb_path <TAB> depth_path <TAB> low|high <TAB> dataset`.
//!
//! Relative paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::png::{read_depth_png16, read_rgb_png, write_depth_png16, write_rgb_png, DEFAULT_DEPTH_SCALE};
use super::synthetic::{generate_synthetic_scene, SyntheticSpec};
use super::{DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::router::DepthRange;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub range: DepthRange,
    pub dataset: String,
}

impl SampleRecord {
    pub fn load(&self) -> Result<(RgbImage, DepthMap)> {
        let rgb = read_rgb_png(&self.rgb_path)?;
        let depth = read_depth_png16(&self.depth_path, DEFAULT_DEPTH_SCALE)?;
        if rgb.width() != depth.width() || rgb.height() != depth.height() {
            return Err(Error::Data(format!(
                "sample {}: rgb {}x{} and depth {}x{} differ in size",
                self.id,
                rgb.width(),
                rgb.height(),
                depth.width(),
                depth.height()
            )));
        }
        Ok((rgb, depth))
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<SampleRecord>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let range = fields[3].parse::<DepthRange>().map_err(|e| err(e.to_string()))?;
        out.push(SampleRecord {
            id: fields[0].to_string(),
            rgb_path: resolve(fields[1]),
            depth_path: resolve(fields[2]),
            range,
            dataset: fields[4].to_string(),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn write_manifest(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut text = String::from("# id\trgb\tdepth\trange\tdataset\n");
    for r in records {
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            rel(&r.rgb_path),
            rel(&r.depth_path),
            r.range,
            r.dataset
        )
        .unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders every spec to `<dir>/<id>_rgb.png` / `<dir>/<id>_depth.png` and
/// writes `<dir>/manifest.tsv`.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, specs: &[SyntheticSpec]) -> Result<Vec<SampleRecord>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("{}_{i:04}", spec.range);
        let (rgb, depth) = generate_synthetic_scene(spec)?;
        let rgb_path = dir.join(format!("{id}_rgb.png"));
        let depth_path = dir.join(format!("{id}_depth.png"));
        write_rgb_png(&rgb, &rgb_path)?;
        write_depth_png16(&depth, &depth_path, DEFAULT_DEPTH_SCALE)?;
        records.push(SampleRecord {
            id,
            rgb_path,
            depth_path,
            range: spec.range,
            dataset: "synthetic".into(),
        });
    }
    write_manifest(&records, dir.join("manifest.tsv"))?;
    Ok(records)
}
