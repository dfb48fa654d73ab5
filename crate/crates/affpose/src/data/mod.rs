//! Dataset schema and serialization: objects as (point cloud, affordance
//! text, pose set) triplets, deterministic category-stratified splits, and a
//! synthetic benchmark generator with analytic ground truth.
//!
//! Clouds are stored in meters, pre-normalization; poses are stored in the
//! normalized object frame alongside the recorded frame transform, which is
//! the frame the models train in. The on-disk format is a JSON manifest with
//! inline point arrays, or, when written with a sidecar, a flat little-endian
//! f32 blob holding all clouds referenced by offset.

pub mod synth;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embeddings::{normalize_label, BACKGROUND_LABEL};
use crate::encoder::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{FrameTransform, Pose, UNIT_NORM_TOL};
use crate::numerics::rng::{derive_seed, stream_rng};

/// Maximum jaw opening of the target gripper, meters.
pub const MAX_APERTURE: f64 = 0.085;

/// One stored 6-DoF pose plus the jaw opening it needs (dataset metadata;
/// the models generate only the 7-vector part).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPose {
    /// Unit quaternion (w, x, y, z).
    pub quaternion: [f64; 4],
    /// Translation in the normalized object frame.
    pub translation: [f64; 3],
    /// Required jaw opening, meters; at most [`MAX_APERTURE`].
    pub width: f64,
}

impl StoredPose {
    pub fn pose(&self) -> Result<Pose> {
        Pose::new(self.quaternion, self.translation)
    }
}

/// One affordance of one object: label text, per-point mask, and the set of
/// poses supporting the affordance (possibly empty for region-only labels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceEntry {
    pub label: String,
    /// Per-point support in [0, 1], same length as the cloud.
    pub mask: Vec<f32>,
    pub poses: Vec<StoredPose>,
}

/// One dataset object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: String,
    pub category: String,
    /// Surface points in meters, pre-normalization.
    pub points: Vec<[f32; 3]>,
    /// Mapping from the metric frame to the normalized frame poses use.
    pub frame: FrameTransform,
    pub entries: Vec<AffordanceEntry>,
}

impl ObjectRecord {
    pub fn cloud(&self) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
        }
    }

    /// All affordance labels on this record, in entry order.
    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.label.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Data(format!("record `{}` has no points", self.id)));
        }
        if !self
            .points
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Data(format!(
                "record `{}` has non-finite coordinates",
                self.id
            )));
        }
        if self.entries.is_empty() {
            return Err(Error::Data(format!(
                "record `{}` needs at least one affordance entry",
                self.id
            )));
        }
        for entry in &self.entries {
            let label = normalize_label(&entry.label);
            if label.is_empty() || label == BACKGROUND_LABEL {
                return Err(Error::Data(format!(
                    "record `{}` has a reserved or empty affordance label `{}`",
                    self.id, entry.label
                )));
            }
            if entry.mask.len() != self.points.len() {
                return Err(Error::Data(format!(
                    "record `{}` entry `{}`: mask length {} for {} points",
                    self.id,
                    entry.label,
                    entry.mask.len(),
                    self.points.len()
                )));
            }
            if !entry
                .mask
                .iter()
                .all(|&v| v.is_finite() && (0.0..=1.0).contains(&v))
            {
                return Err(Error::Data(format!(
                    "record `{}` entry `{}`: mask values outside [0, 1]",
                    self.id, entry.label
                )));
            }
            for (k, pose) in entry.poses.iter().enumerate() {
                let n: f64 = pose.quaternion.iter().map(|q| q * q).sum::<f64>().sqrt();
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Data(format!(
                        "record `{}` entry `{}` pose {k}: quaternion norm {n}",
                        self.id, entry.label
                    )));
                }
                if !pose.translation.iter().all(|v| v.is_finite()) {
                    return Err(Error::Data(format!(
                        "record `{}` entry `{}` pose {k}: non-finite translation",
                        self.id, entry.label
                    )));
                }
                if !(pose.width > 0.0 && pose.width <= MAX_APERTURE) {
                    return Err(Error::Data(format!(
                        "record `{}` entry `{}` pose {k}: width {} exceeds the {} m aperture",
                        self.id, entry.label, pose.width, MAX_APERTURE
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The stored poses for one affordance label of one record, the ground-truth
/// set for pose metrics. The background label carries no poses.
pub fn ground_truth_pose_set<'a>(
    record: &'a ObjectRecord,
    label: &str,
) -> Result<&'a [StoredPose]> {
    let wanted = normalize_label(label);
    if wanted == BACKGROUND_LABEL {
        return Err(Error::Data(format!(
            "the background label `{BACKGROUND_LABEL}` has no pose set"
        )));
    }
    record
        .entries
        .iter()
        .find(|e| normalize_label(&e.label) == wanted)
        .map(|e| e.poses.as_slice())
        .ok_or_else(|| Error::UnknownLabel {
            label: wanted,
            suggestions: record.labels(),
        })
}

const DATA_FORMAT: &str = "apdata";
const DATA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RecordJson {
    id: String,
    category: String,
    frame: FrameTransform,
    /// Inline points; empty when `cloud_ref` points into the sidecar.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    points: Vec<[f32; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cloud_ref: Option<CloudRef>,
    entries: Vec<AffordanceEntry>,
}

/// Location of one cloud inside the sidecar blob: `offset` counts f32 values
/// (not bytes); the cloud occupies `3 * count` consecutive values.
#[derive(Serialize, Deserialize, Clone, Copy)]
struct CloudRef {
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
    records: Vec<RecordJson>,
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.sync_all().map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn write_manifest(
    records: &[ObjectRecord],
    path: &Path,
    sidecar: Option<&str>,
    to_json: impl Fn(&ObjectRecord, &mut usize) -> RecordJson,
) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::Data(format!("record {i}: {e}")))?;
    }
    let mut offset = 0usize;
    let file = DatasetFile {
        format: DATA_FORMAT.into(),
        version: DATA_VERSION,
        sidecar: sidecar.map(String::from),
        records: records.iter().map(|r| to_json(r, &mut offset)).collect(),
    };
    let json = serde_json::to_vec(&file)
        .map_err(|e| Error::Json {
            what: "dataset manifest".into(),
            source: e,
        })?;
    atomic_write(path, &json)
}

#[derive(Serialize, Deserialize)]
struct CloudJson {
    points: Vec<[f32; 3]>,
}

/// Saves one metric-frame cloud as a standalone JSON file (the `infer`
/// input format).
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    let json = serde_json::to_vec(&CloudJson {
        points: cloud.points.clone(),
    })
    .map_err(|e| Error::Json {
        what: "cloud file".into(),
        source: e,
    })?;
    atomic_write(path, &json)
}

/// Loads a standalone cloud file written by [`save_cloud`].
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parsed: CloudJson = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        what: format!("cloud file {}", path.display()),
        source: e,
    })?;
    let cloud = PointCloud {
        points: parsed.points,
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Saves records as a single JSON manifest with inline point arrays.
pub fn save_dataset(records: &[ObjectRecord], path: &Path) -> Result<()> {
    write_manifest(records, path, None, |r, _| RecordJson {
        id: r.id.clone(),
        category: r.category.clone(),
        frame: r.frame,
        points: r.points.clone(),
        cloud_ref: None,
        entries: r.entries.clone(),
    })
}

/// Saves records with clouds in a little-endian f32 sidecar blob next to the
/// manifest (same filename plus `.f32`), referenced by offset.
pub fn save_dataset_with_sidecar(records: &[ObjectRecord], path: &Path) -> Result<()> {
    let sidecar_name = format!(
        "{}.f32",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    );
    let mut blob: Vec<u8> = Vec::new();
    for r in records {
        for p in &r.points {
            for v in p {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sidecar_path = path.with_file_name(&sidecar_name);
    atomic_write(&sidecar_path, &blob)?;
    write_manifest(records, path, Some(&sidecar_name), |r, offset| {
        let this = CloudRef {
            offset: *offset,
            count: r.points.len(),
        };
        *offset += 3 * r.points.len();
        RecordJson {
            id: r.id.clone(),
            category: r.category.clone(),
            frame: r.frame,
            points: Vec::new(),
            cloud_ref: Some(this),
            entries: r.entries.clone(),
        }
    })
}

/// Loads a dataset manifest (inline or sidecar clouds) and validates it.
pub fn load_dataset(path: &Path) -> Result<Vec<ObjectRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: DatasetFile = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        what: format!("dataset manifest {}", path.display()),
        source: e,
    })?;
    if file.format != DATA_FORMAT || file.version != DATA_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset format `{}` version {}",
            file.format, file.version
        )));
    }
    let blob: Option<Vec<u8>> = match &file.sidecar {
        Some(name) => {
            let sidecar_path = path.with_file_name(name);
            Some(fs::read(&sidecar_path).map_err(|e| Error::io(sidecar_path.display().to_string(), e))?)
        }
        None => None,
    };
    let mut records = Vec::with_capacity(file.records.len());
    for (i, rj) in file.records.into_iter().enumerate() {
        let points = match rj.cloud_ref {
            None => rj.points,
            Some(cr) => {
                let blob = blob.as_ref().ok_or_else(|| {
                    Error::Data(format!("record {i}: cloud reference without a sidecar"))
                })?;
                let start = cr.offset * 4;
                let end = start + cr.count * 12;
                if end > blob.len() {
                    return Err(Error::Data(format!(
                        "record {i}: cloud reference {}..{} outside sidecar of {} bytes",
                        start,
                        end,
                        blob.len()
                    )));
                }
                blob[start..end]
                    .chunks_exact(12)
                    .map(|c| {
                        [
                            f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                            f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                            f32::from_le_bytes([c[8], c[9], c[10], c[11]]),
                        ]
                    })
                    .collect()
            }
        };
        let record = ObjectRecord {
            id: rj.id,
            category: rj.category,
            points,
            frame: rj.frame,
            entries: rj.entries,
        };
        record
            .validate()
            .map_err(|e| Error::Data(format!("record {i}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

/// Train/validation/test membership by record id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!(
                "unknown split `{other}` (expected train, val, or test)"
            ))),
        }
    }
}

/// Deterministic category-stratified split.
///
/// Within each category, ids are shuffled by a stream derived from the seed
/// and the category name, then allocated to the three parts by largest
/// remainder so every category's proportions sit within one record of the
/// requested ratios.
pub fn split_dataset(
    records: &[ObjectRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    if records.len() < 3 {
        return Err(Error::Data(format!(
            "cannot split {} records into three parts",
            records.len()
        )));
    }
    let mut categories: Vec<String> = records.iter().map(|r| r.category.clone()).collect();
    categories.sort();
    categories.dedup();
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for category in &categories {
        let mut ids: Vec<&str> = records
            .iter()
            .filter(|r| &r.category == category)
            .map(|r| r.id.as_str())
            .collect();
        ids.sort();
        let cat_hash = crate::embeddings::fnv1a64(category.as_bytes());
        let mut rng = stream_rng(derive_seed(seed, cat_hash), 0);
        use rand::seq::SliceRandom;
        ids.shuffle(&mut rng);
        let n = ids.len();
        let mut counts = [0usize; 3];
        let mut fracs: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0usize;
        for (k, &r) in ratios.iter().enumerate() {
            let exact = r * n as f64;
            counts[k] = exact.floor() as usize;
            assigned += counts[k];
            fracs.push((k, exact - exact.floor()));
        }
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (k, _) in fracs.iter().take(n - assigned) {
            counts[*k] += 1;
        }
        let mut it = ids.into_iter();
        split.train.extend(it.by_ref().take(counts[0]).map(String::from));
        split.val.extend(it.by_ref().take(counts[1]).map(String::from));
        split.test.extend(it.map(String::from));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::synth::{generate_synthetic, SynthConfig};
    use super::*;
    use std::time::Instant;

    fn tiny_record(id: &str, category: &str) -> ObjectRecord {
        ObjectRecord {
            id: id.into(),
            category: category.into(),
            points: vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0]],
            frame: FrameTransform {
                offset: [0.0; 3],
                scale: 5.0,
            },
            entries: vec![AffordanceEntry {
                label: "grasp".into(),
                mask: vec![1.0, 0.0, 0.0],
                poses: vec![StoredPose {
                    quaternion: [1.0, 0.0, 0.0, 0.0],
                    translation: [0.1, 0.2, 0.3],
                    width: 0.02,
                }],
            }],
        }
    }

    #[test]
    fn validation_catches_schema_violations() {
        assert!(tiny_record("a", "bottle").validate().is_ok());
        let mut r = tiny_record("a", "bottle");
        r.entries[0].mask.pop();
        assert!(r.validate().is_err());
        let mut r = tiny_record("a", "bottle");
        r.entries[0].poses[0].width = 0.2;
        assert!(r.validate().unwrap_err().to_string().contains("aperture"));
        let mut r = tiny_record("a", "bottle");
        r.entries.clear();
        assert!(r.validate().is_err());
        let mut r = tiny_record("a", "bottle");
        r.entries[0].label = "none".into();
        assert!(r.validate().is_err());
        let mut r = tiny_record("a", "bottle");
        r.entries[0].poses[0].quaternion = [0.5, 0.5, 0.0, 0.0];
        assert!(r.validate().is_err());
    }

    #[test]
    fn round_trip_preserves_records_in_both_layouts() {
        let records = vec![tiny_record("a", "bottle"), tiny_record("b", "mug")];
        let dir = tempfile::tempdir().unwrap();
        let inline = dir.path().join("inline.json");
        save_dataset(&records, &inline).unwrap();
        assert_eq!(load_dataset(&inline).unwrap(), records);
        let side = dir.path().join("side.json");
        save_dataset_with_sidecar(&records, &side).unwrap();
        assert_eq!(load_dataset(&side).unwrap(), records);
        assert!(side.with_file_name("side.json.f32").exists());
    }

    #[test]
    fn malformed_files_fail_with_record_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut records = vec![tiny_record("a", "bottle"), tiny_record("b", "mug")];
        records[1].entries[0].mask.pop();
        // Bypass save-side validation by writing the manifest by hand.
        let file = DatasetFile {
            format: DATA_FORMAT.into(),
            version: DATA_VERSION,
            sidecar: None,
            records: records
                .iter()
                .map(|r| RecordJson {
                    id: r.id.clone(),
                    category: r.category.clone(),
                    frame: r.frame,
                    points: r.points.clone(),
                    cloud_ref: None,
                    entries: r.entries.clone(),
                })
                .collect(),
        };
        std::fs::write(&path, serde_json::to_vec(&file).unwrap()).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        std::fs::write(&path, b"not json").unwrap();
        assert!(matches!(load_dataset(&path).unwrap_err(), Error::Json { .. }));
    }

    #[test]
    fn pose_sets_are_looked_up_by_label() {
        let r = tiny_record("a", "bottle");
        assert_eq!(ground_truth_pose_set(&r, "GRASP ").unwrap().len(), 1);
        assert!(ground_truth_pose_set(&r, "none").is_err());
        let err = ground_truth_pose_set(&r, "open").unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { .. }));
    }

    #[test]
    fn split_is_exact_stratified_and_deterministic() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(tiny_record(&format!("b{i}"), "bottle"));
        }
        let split = split_dataset(&records, [0.7, 0.1, 0.2], 5).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (7, 1, 2)
        );
        let again = split_dataset(&records, [0.7, 0.1, 0.2], 5).unwrap();
        assert_eq!(split, again);
        for i in 0..20 {
            records.push(tiny_record(&format!("m{i}"), "mug"));
        }
        let split = split_dataset(&records, [0.7, 0.1, 0.2], 5).unwrap();
        let mut all: Vec<&String> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 30, "parts are disjoint and cover the dataset");
        for category in ["b", "m"] {
            let of = |ids: &[String]| ids.iter().filter(|id| id.starts_with(category)).count();
            let n = if category == "b" { 10 } else { 20 } as f64;
            for (part, ratio) in [(&split.train, 0.7), (&split.val, 0.1), (&split.test, 0.2)] {
                let got = of(part) as f64;
                assert!(
                    (got - ratio * n).abs() <= 1.0 + 1e-9,
                    "{category}: {got} vs {}",
                    ratio * n
                );
            }
        }
        assert!(split_dataset(&records[..2], [0.7, 0.1, 0.2], 5).is_err());
        assert!(split_dataset(&records, [0.7, 0.1, 0.1], 5).is_err());
    }

    #[test]
    fn synthetic_dataset_round_trips_quickly() {
        let config = SynthConfig {
            bottles: 67,
            mugs: 67,
            knives: 66,
            ..SynthConfig::default()
        };
        let records = generate_synthetic(&config, 11).unwrap();
        assert_eq!(records.len(), 200);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.json");
        let start = Instant::now();
        save_dataset_with_sidecar(&records, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        let elapsed = start.elapsed();
        assert_eq!(loaded, records);
        assert!(
            elapsed.as_secs_f64() < 5.0,
            "round trip took {elapsed:?}, budget 5 s"
        );
    }
}
