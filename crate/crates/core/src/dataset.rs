//! Labeled image folders laid out as `<root>/<split>/<generator>/<real|fake>/*`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: Image,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub generator: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Sorted by generator, then label, then file name.
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    /// Loads every image of one split. Fails with an ingestion error when the
    /// split is missing or empty, or when any file cannot be decoded.
    pub fn load(root: impl AsRef<Path>, split: &str) -> Result<Self> {
        let dir = root.as_ref().join(split);
        let entries = list(&dir)?;
        let decoded: Vec<(PathBuf, Result<Image>)> = entries
            .par_iter()
            .map(|(path, _, _)| (path.clone(), Image::open(path)))
            .collect();
        let bad: Vec<PathBuf> = decoded
            .iter()
            .filter(|(_, r)| r.is_err())
            .map(|(p, _)| p.clone())
            .collect();
        if !bad.is_empty() {
            return Err(Error::Ingestion {
                message: format!("{} unreadable image(s)", bad.len()),
                paths: bad,
            });
        }
        let samples = entries
            .into_iter()
            .zip(decoded)
            .map(|((path, generator, label), (_, img))| LabeledSample {
                image: img.expect("checked"),
                label,
                generator,
                path,
            })
            .collect();
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Generator names in sorted order.
    pub fn generators(&self) -> Vec<String> {
        let mut g: Vec<String> = self.samples.iter().map(|s| s.generator.clone()).collect();
        g.dedup();
        g
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn list(split_dir: &Path) -> Result<Vec<(PathBuf, String, u8)>> {
    if !split_dir.is_dir() {
        return Err(Error::Ingestion {
            message: "split directory not found".into(),
            paths: vec![split_dir.to_path_buf()],
        });
    }
    let mut out = Vec::new();
    for gen_dir in read_dir_sorted(split_dir)?.into_iter().filter(|p| p.is_dir()) {
        let generator = gen_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (sub, label) in [("real", REAL), ("fake", FAKE)] {
            let class_dir = gen_dir.join(sub);
            if !class_dir.is_dir() {
                continue;
            }
            for path in read_dir_sorted(&class_dir)? {
                let ext = path
                    .extension()
                    .map(|e| e.to_string_lossy().to_ascii_lowercase())
                    .unwrap_or_default();
                if path.is_file() && EXTENSIONS.contains(&ext.as_str()) {
                    out.push((path, generator.clone(), label));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Ingestion {
            message: "no images found".into(),
            paths: vec![split_dir.to_path_buf()],
        });
    }
    Ok(out)
}
