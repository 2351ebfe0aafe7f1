//! A validated dataset bundle: a directory holding embedding files, the
//! annotation splits in generic JSON form and a manifest with counts and
//! SHA-256 checksums.
//!
//! ```text
//! manifest.json
//! images.cem     every image feature references/targets may resolve to
//! gallery.cem    the validation search space
//! captions.cem   caption features keyed by query id
//! train.json     optional
//! val.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cir_core::store::{
    align, parse_annotations, unresolved_ids, write_embeddings, AlignedTriplets, AnnotationSchema,
    EmbeddingMatrix, ImageLookup, Split, TripletSet,
};
use cir_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "cir-bundle";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub images: FileEntry,
    pub gallery: FileEntry,
    pub captions: FileEntry,
    pub train: Option<FileEntry>,
    pub val: FileEntry,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub images: EmbeddingMatrix,
    pub gallery: EmbeddingMatrix,
    pub captions: EmbeddingMatrix,
    pub train: Option<TripletSet>,
    pub val: TripletSet,
}

/// Everything a bundle is made of, before validation.
#[derive(Debug, Clone)]
pub struct BundleParts {
    pub images: EmbeddingMatrix,
    pub gallery: EmbeddingMatrix,
    pub captions: EmbeddingMatrix,
    pub train: Option<TripletSet>,
    pub val: TripletSet,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Every problem that would stop the bundle from being usable, sorted.
fn cross_check(parts: &BundleParts) -> Result<()> {
    let d = parts.images.dim();
    for (name, m) in [("gallery", &parts.gallery), ("captions", &parts.captions)] {
        if m.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "{name} dimension {} differs from images dimension {d}",
                m.dim()
            ))
            .into());
        }
    }
    let sources = [&parts.images, &parts.gallery];
    let lookup = ImageLookup::new(&sources);
    let mut missing = Vec::new();
    for set in parts.train.iter().chain([&parts.val]) {
        missing.extend(unresolved_ids(set, lookup, &parts.captions));
    }
    for r in &parts.val.records {
        if parts.gallery.position(&r.target_id).is_none() {
            missing.push(format!("gallery:{}", r.target_id));
        }
    }
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::UnresolvedIds(missing).into());
    }
    Ok(())
}

impl Bundle {
    /// Validates `parts` and writes them to `dir` (created if needed).
    pub fn write(dir: &Path, parts: BundleParts) -> Result<Bundle> {
        cross_check(&parts)?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

        let write_matrix = |name: &str, m: &EmbeddingMatrix| -> Result<FileEntry> {
            let path = dir.join(name);
            write_embeddings(m, &path)?;
            Ok(FileEntry {
                path: name.to_string(),
                count: m.len(),
                sha256: m.checksum()?,
            })
        };
        let write_split = |name: &str, set: &TripletSet| -> Result<FileEntry> {
            let text = serde_json::to_string_pretty(&set.to_generic_json())? + "\n";
            let path = dir.join(name);
            fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            Ok(FileEntry {
                path: name.to_string(),
                count: set.len(),
                sha256: sha256_hex(text.as_bytes()),
            })
        };

        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: FORMAT_VERSION,
            dim: parts.images.dim(),
            images: write_matrix("images.cem", &parts.images)?,
            gallery: write_matrix("gallery.cem", &parts.gallery)?,
            captions: write_matrix("captions.cem", &parts.captions)?,
            train: parts
                .train
                .as_ref()
                .map(|t| write_split("train.json", t))
                .transpose()?,
            val: write_split("val.json", &parts.val)?,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(dir.join(MANIFEST), text)
            .with_context(|| format!("writing {}", dir.join(MANIFEST).display()))?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            manifest,
            images: parts.images,
            gallery: parts.gallery,
            captions: parts.captions,
            train: parts.train,
            val: parts.val,
        })
    }

    /// Opens a bundle, verifying every checksum and re-running the id checks.
    pub fn open(dir: &Path) -> Result<Bundle> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.is_file() {
            bail!(UsageError(format!(
                "{} is not a bundle (no {MANIFEST})",
                dir.display()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(
            &fs::read(&manifest_path)
                .with_context(|| format!("reading {}", manifest_path.display()))?,
        )
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: manifest.version,
                supported: FORMAT_VERSION,
            }
            .into());
        }

        let read_verified = |entry: &FileEntry| -> Result<Vec<u8>> {
            let path = dir.join(&entry.path);
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(Error::InvalidMatrix(format!(
                    "{}: checksum {actual} does not match manifest {}",
                    entry.path, entry.sha256
                ))
                .into());
            }
            Ok(bytes)
        };
        let matrix = |entry: &FileEntry| -> Result<EmbeddingMatrix> {
            Ok(EmbeddingMatrix::from_bytes(&read_verified(entry)?)?)
        };
        let split = |entry: &FileEntry, split: Split| -> Result<TripletSet> {
            let bytes = read_verified(entry)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Annotation(format!("{} is not UTF-8", entry.path)))?;
            Ok(parse_annotations(
                &text,
                AnnotationSchema::Generic,
                split,
                None,
            )?)
        };

        let parts = BundleParts {
            images: matrix(&manifest.images)?,
            gallery: matrix(&manifest.gallery)?,
            captions: matrix(&manifest.captions)?,
            train: manifest
                .train
                .as_ref()
                .map(|e| split(e, Split::Train))
                .transpose()?,
            val: split(&manifest.val, Split::Val)?,
        };
        cross_check(&parts)?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            manifest,
            images: parts.images,
            gallery: parts.gallery,
            captions: parts.captions,
            train: parts.train,
            val: parts.val,
        })
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn lookup_sources(&self) -> [&EmbeddingMatrix; 2] {
        [&self.images, &self.gallery]
    }

    pub fn align_split(&self, split: Split) -> Result<AlignedTriplets> {
        let set = match split {
            Split::Train => self.train.as_ref().ok_or_else(|| {
                UsageError(format!("bundle {} has no train split", self.dir.display()))
            })?,
            _ => &self.val,
        };
        let sources = self.lookup_sources();
        Ok(align(set, ImageLookup::new(&sources), &self.captions)?)
    }
}
