//! Tab-separated frame lists.
//!
//! Each non-comment line holds `image  lumen_mask  media_mask  category  split`.
//! Relative paths resolve against the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_mask, read_pgm, BinaryMask, GrayImage, Target};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    None,
    Bifurcation,
    SideVessel,
    Shadow,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::None,
        Category::Bifurcation,
        Category::SideVessel,
        Category::Shadow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::None => "none",
            Category::Bifurcation => "bifurcation",
            Category::SideVessel => "side_vessel",
            Category::Shadow => "shadow",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                format!("unknown category {s:?}, expected none, bifurcation, side_vessel or shadow")
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}, expected train or test")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub image: PathBuf,
    pub lumen_mask: PathBuf,
    pub media_mask: PathBuf,
    pub category: Category,
    pub split: Split,
}

impl FrameRecord {
    pub fn mask_path(&self, target: Target) -> &Path {
        match target {
            Target::Lumen => &self.lumen_mask,
            Target::Media => &self.media_mask,
        }
    }

    pub fn load_image(&self) -> Result<GrayImage> {
        read_pgm(&self.image)
    }

    /// Loads the target mask and checks it against the image size.
    pub fn load_mask(&self, target: Target, width: usize, height: usize) -> Result<BinaryMask> {
        let m = read_mask(self.mask_path(target))?;
        if (m.width, m.height) != (width, height) {
            return Err(Error::dim(format!(
                "{} is {}x{} but its image is {width}x{height}",
                self.mask_path(target).display(),
                m.width,
                m.height
            )));
        }
        Ok(m)
    }
}

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<FrameRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        records.push(FrameRecord {
            image: base.join(cols[0]),
            lumen_mask: base.join(cols[1]),
            media_mask: base.join(cols[2]),
            category: cols[3].parse().map_err(parse_err)?,
            split: cols[4].parse().map_err(parse_err)?,
        });
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

/// Writes records with paths made relative to the manifest's directory
/// where possible.
pub fn write_manifest(records: &[FrameRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::from("# image\tlumen_mask\tmedia_mask\tcategory\tsplit\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            rel(&r.image),
            rel(&r.lumen_mask),
            rel(&r.media_mask),
            r.category,
            r.split.as_str()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
