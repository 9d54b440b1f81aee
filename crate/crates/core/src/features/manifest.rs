//! Tab-separated video manifests: `path<TAB>label[<TAB>gt_path]`.
//!
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are ignored. A `gt_path` names a text file of
//! whitespace-separated 0/1 frame labels that overrides any ground truth
//! embedded in the FVB file.

use std::fs;
use std::path::{Path, PathBuf};

use super::{read_fvb, VideoFeatureSequence, VideoLabel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: VideoLabel,
    pub gt_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses manifest text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(Error::Input(format!(
                    "manifest line {}: expected 2 or 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let label = match fields[1].trim() {
                "0" => VideoLabel::Normal,
                "1" => VideoLabel::Abnormal,
                other => {
                    return Err(Error::Input(format!(
                        "manifest line {}: label {other:?} is not 0 or 1",
                        lineno + 1
                    )))
                }
            };
            entries.push(ManifestEntry {
                path: base.join(fields[0]),
                label,
                gt_path: fields.get(2).map(|p| base.join(p)),
            });
        }
        Ok(Self { entries })
    }

    /// Loads a manifest file and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let manifest = Self::parse(&text, base)?;
        for e in &manifest.entries {
            for p in std::iter::once(&e.path).chain(e.gt_path.as_ref()) {
                if !p.is_file() {
                    return Err(Error::Input(format!(
                        "{}: referenced file {} does not exist",
                        path.display(),
                        p.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    /// Writes the manifest, storing paths relative to the manifest's directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&rel(&e.path));
            out.push('\t');
            out.push_str(&e.label.as_u8().to_string());
            if let Some(gt) = &e.gt_path {
                out.push('\t');
                out.push_str(&rel(gt));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads every sequence; the manifest label must agree with the file's label.
    pub fn load_sequences(&self) -> Result<Vec<VideoFeatureSequence>> {
        self.entries.iter().map(load_entry).collect()
    }

    pub fn with_label(&self, label: VideoLabel) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.label == label)
                .cloned()
                .collect(),
        }
    }
}

fn load_entry(e: &ManifestEntry) -> Result<VideoFeatureSequence> {
    let mut seq = read_fvb(&e.path)?;
    if seq.video_label != e.label {
        return Err(Error::Input(format!(
            "{}: manifest label {} disagrees with file label {}",
            e.path.display(),
            e.label.as_u8(),
            seq.video_label.as_u8()
        )));
    }
    if let Some(gt_path) = &e.gt_path {
        let text = fs::read_to_string(gt_path)?;
        let gt = text
            .split_whitespace()
            .map(|tok| match tok {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Input(format!(
                    "{}: ground-truth token {other:?} is not 0 or 1",
                    gt_path.display()
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        seq.frame_gt = Some(gt);
        seq.validate()?;
    }
    Ok(seq)
}
