//! Synthetic benchmark generator with analytic ground truth.
//!
//! Three parametric families — bottle (capped cylinder), mug (cylinder plus a
//! handle torus segment), knife (box blade plus box handle) — are sampled
//! area-weighted to surface point clouds. Affordance regions are disjoint
//! functions of the surface patch each point came from, so masks partition by
//! construction, and pose sets are constructed in closed form (pinches whose
//! placement, approach direction, and jaw width follow the geometry).
//! Everything is deterministic given (config, seed): each object consumes its
//! own derived rng stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::encoder::normalize_cloud;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_quaternion, quaternion_multiply, FrameTransform, Pose};
use crate::numerics::rng::stream_rng;

use super::{AffordanceEntry, ObjectRecord, StoredPose, MAX_APERTURE};

/// How many objects of each family to generate, and the shared shape bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub bottles: usize,
    pub mugs: usize,
    pub knives: usize,
    /// Surface samples per object.
    pub points_per_cloud: usize,
    /// Bounds on the number of poses stored per affordance entry.
    pub min_poses_per_entry: usize,
    pub max_poses_per_entry: usize,
    /// Bounds on the longest bounding-box side, meters.
    pub min_long_side: f64,
    pub max_long_side: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            bottles: 67,
            mugs: 67,
            knives: 66,
            points_per_cloud: 2048,
            min_poses_per_entry: 20,
            max_poses_per_entry: 50,
            min_long_side: 0.05,
            max_long_side: 0.30,
        }
    }
}

impl SynthConfig {
    pub fn total(&self) -> usize {
        self.bottles + self.mugs + self.knives
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Usage("no objects requested".into()));
        }
        if self.points_per_cloud < 16 {
            return Err(Error::Usage(format!(
                "points_per_cloud {} is too small",
                self.points_per_cloud
            )));
        }
        if self.min_poses_per_entry == 0 || self.min_poses_per_entry > self.max_poses_per_entry {
            return Err(Error::Usage(format!(
                "pose bounds {}..{} invalid",
                self.min_poses_per_entry, self.max_poses_per_entry
            )));
        }
        if !(self.min_long_side > 0.0 && self.min_long_side <= self.max_long_side) {
            return Err(Error::Usage(format!(
                "size bounds {}..{} m invalid",
                self.min_long_side, self.max_long_side
            )));
        }
        Ok(())
    }
}

/// Generates the full synthetic dataset for `config`, deterministically.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<ObjectRecord>> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.total());
    let mut stream = 0u64;
    for (category, count) in [
        ("bottle", config.bottles),
        ("mug", config.mugs),
        ("knife", config.knives),
    ] {
        for i in 0..count {
            let mut rng = stream_rng(seed, stream);
            stream += 1;
            let id = format!("{category}_{i:04}");
            let record = match category {
                "bottle" => build_bottle(config, &mut rng, id)?,
                "mug" => build_mug(config, &mut rng, id)?,
                _ => build_knife(config, &mut rng, id)?,
            };
            record.validate()?;
            records.push(record);
        }
    }
    Ok(records)
}

fn pose_count(config: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(config.min_poses_per_entry..=config.max_poses_per_entry)
}

/// A metric-frame pose with its jaw width, before frame normalization.
struct MetricPose {
    quaternion: [f64; 4],
    translation: [f64; 3],
    width: f64,
}

fn finish_record(
    id: String,
    category: &str,
    points: Vec<[f32; 3]>,
    entries: Vec<(String, Vec<f32>, Vec<MetricPose>)>,
) -> Result<ObjectRecord> {
    let cloud = crate::encoder::PointCloud {
        points: points.clone(),
    };
    let (_, frame) = normalize_cloud(&cloud)?;
    let entries = entries
        .into_iter()
        .map(|(label, mask, poses)| {
            let poses = poses
                .into_iter()
                .map(|mp| store_pose(&frame, mp))
                .collect::<Result<Vec<_>>>()?;
            Ok(AffordanceEntry { label, mask, poses })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectRecord {
        id,
        category: category.into(),
        points,
        frame,
        entries,
    })
}

fn store_pose(frame: &FrameTransform, mp: MetricPose) -> Result<StoredPose> {
    let pose = Pose::new(mp.quaternion, mp.translation)?;
    let normalized = frame.pose_to_normalized(&pose);
    Ok(StoredPose {
        quaternion: normalized.quaternion,
        translation: normalized.translation,
        width: mp.width,
    })
}

fn disk_point(rng: &mut ChaCha8Rng, radius: f64, z: f64) -> [f32; 3] {
    let rr = radius * rng.gen::<f64>().sqrt();
    let phi = rng.gen_range(0.0..TAU);
    [(rr * phi.cos()) as f32, (rr * phi.sin()) as f32, z as f32]
}

/// Rotation with the gripper approach axis (its +z) sent to `-z`, rolled by
/// `roll` about the approach direction: a top-down pinch.
fn top_down_quat(roll: f64) -> [f64; 4] {
    let spin = axis_angle_quaternion([0.0, 0.0, 1.0], roll).expect("unit axis");
    let flip = axis_angle_quaternion([0.0, 1.0, 0.0], PI).expect("unit axis");
    quaternion_multiply(&spin, &flip)
}

/// Rotation sending the approach axis to the horizontal direction at `phi`.
fn sideways_quat(phi: f64) -> [f64; 4] {
    let spin = axis_angle_quaternion([0.0, 0.0, 1.0], phi).expect("unit axis");
    let tilt = axis_angle_quaternion([0.0, 1.0, 0.0], FRAC_PI_2).expect("unit axis");
    quaternion_multiply(&spin, &tilt)
}

/// Capped cylinder standing on z = 0: "grasp" = mid body band, "open" = top
/// cap, "contain" = upper interior wall band (surface proxy). Grasp poses are
/// antipodal pinches perpendicular to the axis at the body diameter; open
/// poses are cap-centered top-down pinches.
fn build_bottle(config: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> Result<ObjectRecord> {
    let h = rng.gen_range(config.min_long_side..=config.max_long_side);
    let mut r = rng.gen_range(0.15..0.35) * h;
    if 2.0 * r > MAX_APERTURE {
        let clamped = rng.gen_range(0.40..0.49) * MAX_APERTURE;
        log::info!(
            "bottle {id}: diameter {:.3} m exceeds the {MAX_APERTURE} m aperture; regenerating with radius {clamped:.3} m",
            2.0 * r
        );
        r = clamped;
    }
    let lateral = TAU * r * h;
    let disk = PI * r * r;
    let total = lateral + 2.0 * disk;
    let n = config.points_per_cloud;
    let mut points = Vec::with_capacity(n);
    let mut grasp_mask = vec![0.0f32; n];
    let mut open_mask = vec![0.0f32; n];
    let mut contain_mask = vec![0.0f32; n];
    for i in 0..n {
        let pick = rng.gen_range(0.0..total);
        if pick < lateral {
            let phi = rng.gen_range(0.0..TAU);
            let z = rng.gen_range(0.0..h);
            points.push([(r * phi.cos()) as f32, (r * phi.sin()) as f32, z as f32]);
            if (0.2 * h..=0.6 * h).contains(&z) {
                grasp_mask[i] = 1.0;
            } else if (0.68 * h..=0.88 * h).contains(&z) {
                contain_mask[i] = 1.0;
            }
        } else if pick < lateral + disk {
            points.push(disk_point(rng, r, 0.0));
        } else {
            points.push(disk_point(rng, r, h));
            open_mask[i] = 1.0;
        }
    }
    let grasp_poses = (0..pose_count(config, rng))
        .map(|_| {
            let phi = rng.gen_range(0.0..TAU);
            let z = rng.gen_range(0.25 * h..0.55 * h);
            MetricPose {
                quaternion: sideways_quat(phi),
                translation: [0.0, 0.0, z],
                width: 2.0 * r,
            }
        })
        .collect();
    let open_poses = (0..pose_count(config, rng))
        .map(|_| {
            let roll = rng.gen_range(0.0..TAU);
            MetricPose {
                quaternion: top_down_quat(roll),
                translation: [0.0, 0.0, h],
                width: 2.0 * r,
            }
        })
        .collect();
    finish_record(
        id,
        "bottle",
        points,
        vec![
            ("grasp".into(), grasp_mask, grasp_poses),
            ("open".into(), open_mask, open_poses),
            ("contain".into(), contain_mask, Vec::new()),
        ],
    )
}

/// Open cylinder with a half-torus handle in the x-z plane: "grasp" = handle,
/// "pour" = rim band, "contain" = cavity opening (top disk). Grasp poses
/// pinch the handle tube along its outward normal; pour poses pinch the rim
/// wall top-down.
fn build_mug(config: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> Result<ObjectRecord> {
    let h = rng.gen_range(config.min_long_side..=config.max_long_side);
    let r = h / (2.0 * rng.gen_range(1.3..1.7));
    let ring = 0.18 * h;
    let tube = (0.06 * r).max(0.0025);
    let lateral = TAU * r * h;
    let disk = PI * r * r;
    let handle = PI * ring * TAU * tube / 2.0;
    let total = lateral + 2.0 * disk + handle;
    let n = config.points_per_cloud;
    let center = [r, 0.0, 0.5 * h];
    let mut points = Vec::with_capacity(n);
    let mut grasp_mask = vec![0.0f32; n];
    let mut pour_mask = vec![0.0f32; n];
    let mut contain_mask = vec![0.0f32; n];
    for i in 0..n {
        let pick = rng.gen_range(0.0..total);
        if pick < lateral {
            let phi = rng.gen_range(0.0..TAU);
            let z = rng.gen_range(0.0..h);
            points.push([(r * phi.cos()) as f32, (r * phi.sin()) as f32, z as f32]);
            if z > 0.85 * h {
                pour_mask[i] = 1.0;
            }
        } else if pick < lateral + disk {
            points.push(disk_point(rng, r, 0.0));
        } else if pick < lateral + 2.0 * disk {
            points.push(disk_point(rng, r, h));
            contain_mask[i] = 1.0;
        } else {
            // Half torus bulging +x, ring in the x-z plane around `center`.
            let psi = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
            let chi = rng.gen_range(0.0..TAU);
            let arm = ring + tube * chi.cos();
            points.push([
                (center[0] + arm * psi.cos()) as f32,
                (tube * chi.sin()) as f32,
                (center[2] + arm * psi.sin()) as f32,
            ]);
            grasp_mask[i] = 1.0;
        }
    }
    let grasp_poses = (0..pose_count(config, rng))
        .map(|_| {
            let psi = rng.gen_range(-1.0f64..1.0);
            // Approach along the outward ring normal in the x-z plane.
            let tilt = axis_angle_quaternion([0.0, 1.0, 0.0], FRAC_PI_2 - psi).expect("unit");
            MetricPose {
                quaternion: tilt,
                translation: [
                    center[0] + ring * psi.cos(),
                    0.0,
                    center[2] + ring * psi.sin(),
                ],
                width: 2.0 * tube,
            }
        })
        .collect();
    let pour_poses = (0..pose_count(config, rng))
        .map(|_| {
            let phi = rng.gen_range(0.0..TAU);
            MetricPose {
                quaternion: top_down_quat(phi),
                translation: [r * phi.cos(), r * phi.sin(), h],
                width: (0.008f64).min(r),
            }
        })
        .collect();
    finish_record(
        id,
        "mug",
        points,
        vec![
            ("grasp".into(), grasp_mask, grasp_poses),
            ("pour".into(), pour_mask, pour_poses),
            ("contain".into(), contain_mask, Vec::new()),
        ],
    )
}

fn box_faces(min: [f64; 3], max: [f64; 3]) -> Vec<(f64, usize, f64)> {
    // (area, fixed axis, fixed value) for all six faces.
    let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
    vec![
        (d[1] * d[2], 0, min[0]),
        (d[1] * d[2], 0, max[0]),
        (d[0] * d[2], 1, min[1]),
        (d[0] * d[2], 1, max[1]),
        (d[0] * d[1], 2, min[2]),
        (d[0] * d[1], 2, max[2]),
    ]
}

fn box_point(
    rng: &mut ChaCha8Rng,
    min: [f64; 3],
    max: [f64; 3],
    faces: &[(f64, usize, f64)],
    total: f64,
) -> [f32; 3] {
    let mut pick = rng.gen_range(0.0..total);
    for &(area, axis, value) in faces {
        if pick < area {
            let mut p = [0.0f64; 3];
            for k in 0..3 {
                p[k] = if k == axis {
                    value
                } else {
                    rng.gen_range(min[k]..=max[k])
                };
            }
            return [p[0] as f32, p[1] as f32, p[2] as f32];
        }
        pick -= area;
    }
    let p = max;
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

/// Box handle plus thin box blade along x: "grasp" = handle, "cut" = bottom
/// edge band of the blade. Grasp poses are top-down pinches across the handle
/// only; the blade stores no poses.
fn build_knife(config: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> Result<ObjectRecord> {
    let l = rng.gen_range(config.min_long_side..=config.max_long_side);
    let handle_min = [-0.5 * l, -0.06 * l, -0.075 * l];
    let handle_max = [-0.15 * l, 0.06 * l, 0.075 * l];
    let blade_h = 0.18 * l;
    let blade_t = (0.008 * l).max(0.0015);
    let blade_min = [-0.15 * l, -0.5 * blade_t, -0.5 * blade_h];
    let blade_max = [0.5 * l, 0.5 * blade_t, 0.5 * blade_h];
    let handle_faces = box_faces(handle_min, handle_max);
    let blade_faces = box_faces(blade_min, blade_max);
    let handle_area: f64 = handle_faces.iter().map(|f| f.0).sum();
    let blade_area: f64 = blade_faces.iter().map(|f| f.0).sum();
    let total = handle_area + blade_area;
    let n = config.points_per_cloud;
    let mut points = Vec::with_capacity(n);
    let mut grasp_mask = vec![0.0f32; n];
    let mut cut_mask = vec![0.0f32; n];
    for i in 0..n {
        if rng.gen_range(0.0..total) < handle_area {
            points.push(box_point(rng, handle_min, handle_max, &handle_faces, handle_area));
            grasp_mask[i] = 1.0;
        } else {
            let p = box_point(rng, blade_min, blade_max, &blade_faces, blade_area);
            if f64::from(p[2]) < blade_min[2] + 0.12 * blade_h {
                cut_mask[i] = 1.0;
            }
            points.push(p);
        }
    }
    let handle_width = handle_max[1] - handle_min[1];
    let grasp_poses = (0..pose_count(config, rng))
        .map(|_| {
            let x = rng.gen_range(handle_min[0] + 0.05 * l..handle_max[0] - 0.05 * l);
            MetricPose {
                quaternion: top_down_quat(FRAC_PI_2),
                translation: [x, 0.0, 0.0],
                width: handle_width,
            }
        })
        .collect();
    finish_record(
        id,
        "knife",
        points,
        vec![
            ("grasp".into(), grasp_mask, grasp_poses),
            ("cut".into(), cut_mask, Vec::new()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ground_truth_pose_set;
    use crate::geometry::quaternion_to_matrix;

    fn small_config() -> SynthConfig {
        SynthConfig {
            bottles: 4,
            mugs: 4,
            knives: 4,
            points_per_cloud: 512,
            ..SynthConfig::default()
        }
    }

    fn approach(q: &[f64; 4]) -> [f64; 3] {
        let m = quaternion_to_matrix(q);
        [m[0][2], m[1][2], m[2][2]]
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_synthetic(&small_config(), 3).unwrap();
        let b = generate_synthetic(&small_config(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small_config(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bottle_grasp_poses_stay_on_axis_and_perpendicular() {
        let records = generate_synthetic(&small_config(), 7).unwrap();
        let max_tilt = (5.0f64).to_radians().sin();
        for record in records.iter().filter(|r| r.category == "bottle") {
            for stored in ground_truth_pose_set(record, "grasp").unwrap() {
                let metric = record.frame.pose_to_metric(&stored.pose().unwrap());
                let [x, y, _] = metric.translation;
                assert!(
                    (x * x + y * y).sqrt() <= 0.01,
                    "{}: grasp pose {x},{y} off axis",
                    record.id
                );
                let a = approach(&metric.quaternion);
                assert!(
                    a[2].abs() <= max_tilt,
                    "{}: approach not perpendicular to the axis: {a:?}",
                    record.id
                );
            }
        }
    }

    #[test]
    fn bottle_open_poses_sit_on_the_cap_pointing_down() {
        let records = generate_synthetic(&small_config(), 8).unwrap();
        for record in records.iter().filter(|r| r.category == "bottle") {
            let top = record
                .points
                .iter()
                .map(|p| f64::from(p[2]))
                .fold(f64::NEG_INFINITY, f64::max);
            for stored in ground_truth_pose_set(record, "open").unwrap() {
                let metric = record.frame.pose_to_metric(&stored.pose().unwrap());
                assert!((metric.translation[2] - top).abs() < 1e-5);
                assert!(metric.translation[0].abs() < 1e-9);
                let a = approach(&metric.quaternion);
                assert!(a[2] < -0.996, "approach must point down, got {a:?}");
            }
        }
    }

    #[test]
    fn masks_partition_every_cloud() {
        for record in generate_synthetic(&small_config(), 9).unwrap() {
            let n = record.points.len();
            for i in 0..n {
                let hot = record
                    .entries
                    .iter()
                    .filter(|e| e.mask[i] > 0.5)
                    .count();
                assert!(hot <= 1, "{} point {i} claimed by {hot} masks", record.id);
            }
        }
    }

    #[test]
    fn apertures_and_pose_counts_respect_the_config() {
        let big = SynthConfig {
            bottles: 6,
            mugs: 2,
            knives: 2,
            points_per_cloud: 256,
            min_long_side: 0.25,
            max_long_side: 0.30,
            ..SynthConfig::default()
        };
        let records = generate_synthetic(&big, 10).unwrap();
        for record in &records {
            for entry in &record.entries {
                if !entry.poses.is_empty() {
                    assert!(
                        (big.min_poses_per_entry..=big.max_poses_per_entry)
                            .contains(&entry.poses.len()),
                        "{} {}: {} poses",
                        record.id,
                        entry.label,
                        entry.poses.len()
                    );
                }
                for pose in &entry.poses {
                    assert!(pose.width > 0.0 && pose.width <= MAX_APERTURE);
                }
            }
        }
        // Large bottles force the radius clamp; their grasp width must still fit.
        let bottle_widths: Vec<f64> = records
            .iter()
            .filter(|r| r.category == "bottle")
            .flat_map(|r| ground_truth_pose_set(r, "grasp").unwrap())
            .map(|p| p.width)
            .collect();
        assert!(!bottle_widths.is_empty());
        assert!(bottle_widths.iter().all(|&w| w <= MAX_APERTURE));
    }

    #[test]
    fn knife_stores_poses_only_for_grasp() {
        let records = generate_synthetic(&small_config(), 12).unwrap();
        for record in records.iter().filter(|r| r.category == "knife") {
            assert!(!ground_truth_pose_set(record, "grasp").unwrap().is_empty());
            assert!(ground_truth_pose_set(record, "cut").unwrap().is_empty());
        }
    }

    #[test]
    fn sizes_stay_in_the_configured_range() {
        let config = small_config();
        for record in generate_synthetic(&config, 13).unwrap() {
            let mut min = [f64::INFINITY; 3];
            let mut max = [f64::NEG_INFINITY; 3];
            for p in &record.points {
                for k in 0..3 {
                    min[k] = min[k].min(f64::from(p[k]));
                    max[k] = max[k].max(f64::from(p[k]));
                }
            }
            let longest = (0..3).map(|k| max[k] - min[k]).fold(0.0, f64::max);
            assert!(
                longest <= config.max_long_side + 1e-6
                    && longest >= 0.5 * config.min_long_side,
                "{}: longest side {longest}",
                record.id
            );
        }
    }

    #[test]
    fn families_and_ids_match_the_request() {
        let records = generate_synthetic(&small_config(), 14).unwrap();
        assert_eq!(records.len(), 12);
        let count = |cat: &str| records.iter().filter(|r| r.category == cat).count();
        assert_eq!((count("bottle"), count("mug"), count("knife")), (4, 4, 4));
        let mut ids: Vec<&String> = records.iter().map(|r| &r.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
    }
}
