//! Dataset splits, the on-disk manifest, and phantom dataset generation.
//!
//! Manifest format (UTF-8, one record per line, whitespace separated, paths
//! relative to the manifest's directory, `#` starts a comment line):
//!
//! ```text
//! # sgtc manifest v1
//! volume <id> <labeled|unlabeled|test> <image path> <mask path>
//! annotation <id> <strategy> <axis>:<index> [<axis>:<index> ...]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{select_slices, AnnotatedSlice, SliceSet, Strategy};
use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, PhantomTemplate};
use crate::volume::{read_volume, write_volume, LabelMask, Volume};

pub const MANIFEST_HEADER: &str = "# sgtc manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Labeled,
    Unlabeled,
    Test,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Labeled => "labeled",
            SplitRole::Unlabeled => "unlabeled",
            SplitRole::Test => "test",
        }
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self
            .labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .chain(&self.test_ids)
        {
            if !seen.insert(id) {
                return Err(Error::Config(format!("id {id:?} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeRecord {
    pub id: String,
    pub role: SplitRole,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub id: String,
    pub slices: SliceSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub volumes: Vec<VolumeRecord>,
    pub annotations: Vec<AnnotationRecord>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn split(&self) -> DatasetSplit {
        let ids = |r: SplitRole| {
            self.volumes
                .iter()
                .filter(|v| v.role == r)
                .map(|v| v.id.clone())
                .collect()
        };
        DatasetSplit {
            labeled_ids: ids(SplitRole::Labeled),
            unlabeled_ids: ids(SplitRole::Unlabeled),
            test_ids: ids(SplitRole::Test),
        }
    }

    pub fn record(&self, id: &str) -> Option<&VolumeRecord> {
        self.volumes.iter().find(|v| v.id == id)
    }

    pub fn annotation(&self, id: &str, strategy: Strategy) -> Option<&SliceSet> {
        self.annotations
            .iter()
            .find(|a| a.id == id && a.slices.strategy == strategy)
            .map(|a| &a.slices)
    }

    pub fn load_image(&self, id: &str) -> Result<Volume> {
        let rec = self
            .record(id)
            .ok_or_else(|| Error::Config(format!("unknown volume id {id:?}")))?;
        read_volume(self.root.join(&rec.image))?.into_image()
    }

    pub fn load_mask(&self, id: &str) -> Result<LabelMask> {
        let rec = self
            .record(id)
            .ok_or_else(|| Error::Config(format!("unknown volume id {id:?}")))?;
        read_volume(self.root.join(&rec.mask))?.into_mask()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for v in &self.volumes {
            out.push_str(&format!(
                "volume {} {} {} {}\n",
                v.id,
                v.role,
                v.image.display(),
                v.mask.display()
            ));
        }
        for a in &self.annotations {
            out.push_str(&format!("annotation {} {}", a.id, a.slices.strategy));
            for s in &a.slices.slices {
                out.push_str(&format!(" {s}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m = Manifest {
            root: root.into(),
            ..Default::default()
        };
        let mut ids = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let perr = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "volume" => {
                    if fields.len() != 5 {
                        return Err(perr(format!("volume record needs 5 fields, got {}", fields.len())));
                    }
                    let role = match fields[2] {
                        "labeled" => SplitRole::Labeled,
                        "unlabeled" => SplitRole::Unlabeled,
                        "test" => SplitRole::Test,
                        other => return Err(perr(format!("unknown split role {other:?}"))),
                    };
                    if !ids.insert(fields[1].to_string()) {
                        return Err(perr(format!("duplicate volume id {:?}", fields[1])));
                    }
                    m.volumes.push(VolumeRecord {
                        id: fields[1].into(),
                        role,
                        image: fields[3].into(),
                        mask: fields[4].into(),
                    });
                }
                "annotation" => {
                    if fields.len() < 4 {
                        return Err(perr("annotation record needs at least one slice".into()));
                    }
                    let strategy: Strategy = fields[2].parse().map_err(|e: Error| perr(e.to_string()))?;
                    let slices = fields[3..]
                        .iter()
                        .map(|t| t.parse::<AnnotatedSlice>())
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| perr(e.to_string()))?;
                    m.annotations.push(AnnotationRecord {
                        id: fields[1].into(),
                        slices: SliceSet { strategy, slices },
                    });
                }
                other => return Err(perr(format!("unknown record type {other:?}"))),
            }
        }
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Strategies whose annotation records are written for every labeled case.
pub const RECORDED_STRATEGIES: [Strategy; 4] =
    [Strategy::Sca, Strategy::Ca, Strategy::Cac, Strategy::Parallel3];

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Generates phantoms for every case and writes images, masks and the
/// manifest under `out_dir`. Cases are numbered labeled first, then
/// unlabeled, then test.
pub fn generate_dataset(
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    template: &PhantomTemplate,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetSplit, Manifest)> {
    if n_labeled == 0 || n_unlabeled == 0 || n_test == 0 {
        return Err(Error::Config("every split needs at least one case".into()));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let roles = std::iter::repeat_n(SplitRole::Labeled, n_labeled)
        .chain(std::iter::repeat_n(SplitRole::Unlabeled, n_unlabeled))
        .chain(std::iter::repeat_n(SplitRole::Test, n_test));

    let mut manifest = Manifest {
        root: out_dir.to_path_buf(),
        ..Default::default()
    };
    for (i, role) in roles.enumerate() {
        let id = case_id(i);
        let spec = template.sample(seed, i as u64);
        let (image, mask) = generate_phantom(&spec)?;
        let image_rel = PathBuf::from(format!("images/{id}.sgv"));
        let mask_rel = PathBuf::from(format!("masks/{id}.sgv"));
        write_volume(&image.into(), out_dir.join(&image_rel))?;
        if role == SplitRole::Labeled {
            for strategy in RECORDED_STRATEGIES {
                manifest.annotations.push(AnnotationRecord {
                    id: id.clone(),
                    slices: select_slices(&mask, strategy)?,
                });
            }
        }
        write_volume(&mask.into(), out_dir.join(&mask_rel))?;
        manifest.volumes.push(VolumeRecord {
            id,
            role,
            image: image_rel,
            mask: mask_rel,
        });
    }
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    let split = manifest.split();
    split.validate()?;
    Ok((split, manifest))
}

/// In-memory case used by training and evaluation.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub mask: LabelMask,
}

pub fn load_cases(manifest: &Manifest, ids: &[String]) -> Result<Vec<Case>> {
    ids.iter()
        .map(|id| {
            Ok(Case {
                id: id.clone(),
                image: manifest.load_image(id)?,
                mask: manifest.load_mask(id)?,
            })
        })
        .collect()
}

/// Annotation lookup keyed by case id.
pub fn annotations_for(
    manifest: &Manifest,
    ids: &[String],
    strategy: Strategy,
) -> Result<BTreeMap<String, SliceSet>> {
    ids.iter()
        .map(|id| {
            manifest
                .annotation(id, strategy)
                .cloned()
                .map(|a| (id.clone(), a))
                .ok_or_else(|| {
                    Error::Config(format!("case {id:?} has no {strategy} annotation in the manifest"))
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_template() -> PhantomTemplate {
        PhantomTemplate {
            shape: [16, 16, 16],
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (split, m) = generate_dataset(2, 18, 4, &small_template(), 7, a.path()).unwrap();
        assert_eq!(
            (split.labeled_ids.len(), split.unlabeled_ids.len(), split.test_ids.len()),
            (2, 18, 4)
        );
        let n_files = fs::read_dir(a.path().join("images")).unwrap().count();
        assert_eq!(n_files, 24);
        assert_eq!(m.annotations.len(), 2 * RECORDED_STRATEGIES.len());

        generate_dataset(2, 18, 4, &small_template(), 7, b.path()).unwrap();
        let ta = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let tb = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ta, tb);
        for id in &split.unlabeled_ids {
            let rel = format!("images/{id}.sgv");
            assert_eq!(
                fs::read(a.path().join(&rel)).unwrap(),
                fs::read(b.path().join(&rel)).unwrap()
            );
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (_, m) = generate_dataset(1, 2, 1, &small_template(), 1, dir.path()).unwrap();
        let back = Manifest::read(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert!(back.annotation("case_000", Strategy::Sca).is_some());
        assert!(back.load_mask("case_003").is_ok());

        let err = Manifest::parse("# x\nvolume a labeled i.sgv\n", ".").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = Manifest::parse("volume a nope i m\n", ".").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn zero_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(0, 2, 1, &small_template(), 1, dir.path()).is_err());
    }
}
