//! Tab-separated dataset listings: `image  mask  domain  split` per line,
//! paths relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::BinaryMask;
use crate::synth::pgm::load_pgm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "test" => Ok(Split::Val),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub domain: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// An image with its ground-truth mask and source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub domain: usize,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.image.display(), e.mask.display(), e.domain, e.split))
            .collect()
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.trim().is_empty() && !body.starts_with('#') {
                let cols: Vec<&str> = body.split('\t').collect();
                let err = |m: String| Error::Parse {
                    path: path.to_path_buf(),
                    offset,
                    message: m,
                };
                if cols.len() != 4 {
                    return Err(err(format!("expected 4 tab-separated columns, got {}", cols.len())));
                }
                entries.push(ManifestEntry {
                    image: cols[0].into(),
                    mask: cols[1].into(),
                    domain: cols[2].parse().map_err(|_| err(format!("bad domain id {:?}", cols[2])))?,
                    split: cols[3].parse().map_err(|_| err(format!("bad split {:?}", cols[3])))?,
                });
            }
            offset += line.len();
        }
        Ok(DatasetManifest {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn counts_per_domain(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            let c: &mut (usize, usize) = m.entry(e.domain).or_default();
            match e.split {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
            }
        }
        m
    }

    pub fn domains(&self) -> Vec<usize> {
        self.counts_per_domain().into_keys().collect()
    }

    /// Loads the images and masks of one split (all entries for `None`).
    pub fn samples(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| s == e.split))
            .map(|e| {
                let image = load_pgm(self.root.join(&e.image))?;
                let mask_img = load_pgm(self.root.join(&e.mask))?;
                if (mask_img.height, mask_img.width) != (image.height, image.width) {
                    return Err(Error::shape(
                        "manifest",
                        format!("{}: mask size differs from image", e.mask.display()),
                    ));
                }
                Ok(Sample {
                    image,
                    mask: BinaryMask::threshold(&mask_img, 0.5),
                    domain: e.domain,
                })
            })
            .collect()
    }

    /// Images only, for spectrum profiling.
    pub fn images(&self, split: Option<Split>) -> Result<Vec<GrayImage>> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| s == e.split))
            .map(|e| load_pgm(self.root.join(&e.image)))
            .collect()
    }
}
