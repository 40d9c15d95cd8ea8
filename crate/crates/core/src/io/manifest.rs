//! Plain-text dataset manifests: one clean image path per line, optionally
//! followed by a paired degraded path; `#` starts a comment and
//! `@split NAME` tags the following lines. Paths are relative to the
//! manifest's directory.

use std::path::{Path, PathBuf};

use super::{load_image, BitDepth, IoError};
use crate::image::Image;

pub const DEFAULT_SPLIT: &str = "train";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub clean: PathBuf,
    pub degraded: Option<PathBuf>,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub clean: Image,
    pub degraded: Option<Image>,
}

impl Manifest {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self, IoError> {
        let path = path.into();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut split = DEFAULT_SPLIT.to_string();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| IoError::Manifest {
                path: path.clone(),
                line: i + 1,
                msg,
            };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if let Some(directive) = tokens[0].strip_prefix('@') {
                match (directive, tokens.len()) {
                    ("split", 2) => split = tokens[1].to_string(),
                    _ => return Err(err(format!("unknown directive `{line}`"))),
                }
                continue;
            }
            if tokens.len() > 2 {
                return Err(err("expected `CLEAN [DEGRADED]`".into()));
            }
            entries.push(Entry {
                clean: root.join(tokens[0]),
                degraded: tokens.get(1).map(|p| root.join(p)),
                split: split.clone(),
            });
        }
        Ok(Self { path, entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        Self::parse(&text, path)
    }

    pub fn splits(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.entries.iter().map(|e| e.split.as_str()).collect();
        s.dedup();
        s
    }

    /// Loads the entries of `split` (all entries when `None`), checking that
    /// images share one bit depth and have extents divisible by `divisor`.
    pub fn load(&self, split: Option<&str>, divisor: usize) -> Result<Vec<Sample>, IoError> {
        let mut depth: Option<BitDepth> = None;
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| split.map_or(true, |s| e.split == s)) {
            let mut read = |p: &Path| -> Result<Image, IoError> {
                let (img, d) = load_image(p)?;
                match depth {
                    None => depth = Some(d),
                    Some(prev) if prev != d => {
                        return Err(IoError::Dataset {
                            path: p.into(),
                            msg: format!("{}-bit image in a {}-bit dataset", d.bits(), prev.bits()),
                        })
                    }
                    _ => {}
                }
                if img.height() % divisor != 0 || img.width() % divisor != 0 {
                    return Err(IoError::Dataset {
                        path: p.into(),
                        msg: format!(
                            "extents {}x{} are not divisible by {divisor}",
                            img.height(),
                            img.width()
                        ),
                    });
                }
                Ok(img)
            };
            let clean = read(&e.clean)?;
            let degraded = e.degraded.as_deref().map(&mut read).transpose()?;
            out.push(Sample {
                name: e
                    .clean
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                clean,
                degraded,
            });
        }
        if out.is_empty() {
            return Err(IoError::Dataset {
                path: self.path.clone(),
                msg: match split {
                    Some(s) => format!("no images in split `{s}`"),
                    None => "no images listed".into(),
                },
            });
        }
        Ok(out)
    }
}
