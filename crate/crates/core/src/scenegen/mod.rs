//! Synthetic LiDAR-like scenes and their voxelization.
//!
//! A scene is a ground plane plus axis-aligned box "vehicles", cylindrical
//! "poles", vertical planar "walls" and uniform scatter "noise", each kind with
//! its own class. The sensor sits at the origin; coordinates are metres.

mod dataset;
mod format;

pub use dataset::{generate_dataset, split_dataset, Dataset, DatasetSpec, SceneData};
pub use format::{load_point_cloud, load_voxel_scene, save_point_cloud, save_voxel_scene};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureGrid, GridShape, LabelGrid, IGNORE};

pub const CLASS_GROUND: u16 = 0;
pub const CLASS_VEHICLE: u16 = 1;
pub const CLASS_POLE: u16 = 2;
pub const CLASS_WALL: u16 = 3;
pub const CLASS_NOISE: u16 = 4;

/// Number of feature channels produced by [`voxelize`].
pub const FEATURE_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub class: u16,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_class(&self, class: u16) -> usize {
        self.points.iter().filter(|p| p.class == class).count()
    }
}

/// Half-ranges of the scene volume, centred on the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Extent {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x > 0.0 && y > 0.0 && z > 0.0) || !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "extent half-ranges must be positive, got ({x}, {y}, {z})"
            )));
        }
        Ok(Self { x, y, z })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub extent: Extent,
    pub num_classes: usize,
    /// Height of the ground plane relative to the sensor.
    pub ground_z: f64,
    pub ground_points: usize,
    pub vehicles: usize,
    pub poles: usize,
    pub walls: usize,
    pub points_per_object: usize,
    pub noise_points: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: Extent {
                x: 12.0,
                y: 24.0,
                z: 4.0,
            },
            num_classes: 5,
            ground_z: -1.8,
            ground_points: 1500,
            vehicles: 3,
            poles: 4,
            walls: 2,
            points_per_object: 200,
            noise_points: 150,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        Extent::new(self.extent.x, self.extent.y, self.extent.z)?;
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let needed = [
            (self.vehicles, CLASS_VEHICLE),
            (self.poles, CLASS_POLE),
            (self.walls, CLASS_WALL),
            (self.noise_points, CLASS_NOISE),
        ];
        for (count, class) in needed {
            if count > 0 && class as usize >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class {class} requested but K = {}",
                    self.num_classes
                )));
            }
        }
        if self.ground_z.abs() >= self.extent.z {
            return Err(Error::InvalidArgument("ground plane outside extent".into()));
        }
        Ok(())
    }
}

fn clamp_intensity(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Generates one scene; identical `(cfg, seed)` give identical clouds.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = cfg.extent;
    let gz = cfg.ground_z;
    let mut points = Vec::with_capacity(
        cfg.ground_points
            + (cfg.vehicles + cfg.poles + cfg.walls) * cfg.points_per_object
            + cfg.noise_points,
    );
    let jitter = Normal::new(0.0, 0.04).expect("valid sigma");
    let inside = |x: f64, y: f64, z: f64| -> (f64, f64, f64) {
        let m = 1e-6;
        (
            x.clamp(-ex.x + m, ex.x - m),
            y.clamp(-ex.y + m, ex.y - m),
            z.clamp(-ex.z + m, ex.z - m),
        )
    };

    for _ in 0..cfg.ground_points {
        let x = rng.random_range(-ex.x..ex.x);
        let y = rng.random_range(-ex.y..ex.y);
        let z = gz + jitter.sample(&mut rng);
        let (x, y, z) = inside(x, y, z);
        let intensity = clamp_intensity(0.25 + 0.1 * rng.random_range(-1.0..1.0));
        points.push(Point {
            x,
            y,
            z,
            intensity,
            class: CLASS_GROUND,
        });
    }

    for _ in 0..cfg.vehicles {
        let (lx, ly) = if rng.random_bool(0.5) {
            (4.2, 1.8)
        } else {
            (1.8, 4.2)
        };
        let height = rng.random_range(1.3..1.9);
        let cx = rng.random_range(-ex.x + lx / 2.0..ex.x - lx / 2.0);
        let cy = rng.random_range(-ex.y + ly / 2.0..ex.y - ly / 2.0);
        let shade = rng.random_range(0.45..0.8);
        // area-weighted sampling over the top and four sides
        let faces = [lx * ly, lx * height, lx * height, ly * height, ly * height];
        let total: f64 = faces.iter().sum();
        for _ in 0..cfg.points_per_object {
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let u = rng.random_range(-0.5..0.5);
            let t = rng.random_range(0.0..1.0);
            let (x, y, z) = match face {
                0 => (cx + u * lx, cy + rng.random_range(-0.5..0.5) * ly, gz + height),
                1 => (cx + u * lx, cy - ly / 2.0, gz + t * height),
                2 => (cx + u * lx, cy + ly / 2.0, gz + t * height),
                3 => (cx - lx / 2.0, cy + u * ly, gz + t * height),
                _ => (cx + lx / 2.0, cy + u * ly, gz + t * height),
            };
            let (x, y, z) = inside(x, y, z);
            points.push(Point {
                x,
                y,
                z,
                intensity: clamp_intensity(shade + 0.15 * rng.random_range(-1.0..1.0)),
                class: CLASS_VEHICLE,
            });
        }
    }

    for _ in 0..cfg.poles {
        let radius = 0.15;
        let height = rng.random_range(3.0..5.0);
        let cx = rng.random_range(-ex.x + 1.0..ex.x - 1.0);
        let cy = rng.random_range(-ex.y + 1.0..ex.y - 1.0);
        for _ in 0..cfg.points_per_object {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let z = gz + rng.random_range(0.0..height);
            let (x, y, z) = inside(cx + radius * a.cos(), cy + radius * a.sin(), z);
            points.push(Point {
                x,
                y,
                z,
                intensity: clamp_intensity(0.5 + 0.2 * rng.random_range(-1.0..1.0)),
                class: CLASS_POLE,
            });
        }
    }

    for _ in 0..cfg.walls {
        let along_x = rng.random_bool(0.5);
        let length = rng.random_range(6.0..12.0);
        let height = rng.random_range(2.0..3.0);
        let (hx, hy) = if along_x {
            (length / 2.0, 0.0)
        } else {
            (0.0, length / 2.0)
        };
        let cx = rng.random_range(-ex.x + hx..ex.x - hx);
        let cy = rng.random_range(-ex.y + hy..ex.y - hy);
        for _ in 0..cfg.points_per_object {
            let s = rng.random_range(-1.0..1.0);
            let z = gz + rng.random_range(0.0..height);
            let (x, y, z) = inside(cx + s * hx, cy + s * hy, z);
            points.push(Point {
                x,
                y,
                z,
                intensity: clamp_intensity(0.35 + 0.15 * rng.random_range(-1.0..1.0)),
                class: CLASS_WALL,
            });
        }
    }

    for _ in 0..cfg.noise_points {
        let x = rng.random_range(-ex.x..ex.x);
        let y = rng.random_range(-ex.y..ex.y);
        let z = gz + rng.random_range(0.2..2.5);
        let (x, y, z) = inside(x, y, z);
        points.push(Point {
            x,
            y,
            z,
            intensity: rng.random_range(0.0..1.0),
            class: CLASS_NOISE,
        });
    }

    Ok(PointCloud { points })
}

/// Voxelized scene: features, majority labels, occupancy and per-voxel point
/// counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    pub features: FeatureGrid,
    pub labels: LabelGrid,
    pub occupancy: BinaryMask,
    pub point_counts: Vec<u32>,
    /// Points that fell outside the extent and were clamped to a boundary cell.
    pub clamped: usize,
}

fn bin(coord: f64, half: f64, cells: usize) -> (usize, bool) {
    let t = (coord + half) / (2.0 * half) * cells as f64;
    let i = t.floor();
    if i < 0.0 {
        (0, true)
    } else if i >= cells as f64 {
        // the upper boundary itself belongs to the last cell
        (cells - 1, coord > half)
    } else {
        (i as usize, false)
    }
}

/// Uniform binning of the cloud over `extent` into `shape` (which must have 4
/// channels: normalized point count, mean intensity, mean in-cell z offset,
/// occupancy flag).
pub fn voxelize(pc: &PointCloud, shape: GridShape, extent: Extent) -> Result<VoxelScene> {
    if shape.channels != FEATURE_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "voxelization produces {FEATURE_CHANNELS} channels, shape asks for {}",
            shape.channels
        )));
    }
    let dims = shape.dims;
    let n = dims.voxels();
    let k = shape.num_classes;
    let cell_h = 2.0 * extent.z / dims.l as f64;
    let mut counts = vec![0u32; n];
    let mut intensity = vec![0.0; n];
    let mut z_off = vec![0.0; n];
    let mut class_counts = vec![0u32; n * k];
    let mut clamped = 0;
    for p in &pc.points {
        if p.class as usize >= k {
            return Err(Error::InvalidArgument(format!(
                "point class {} out of range for K={k}",
                p.class
            )));
        }
        let (h, ch) = bin(p.x, extent.x, dims.h);
        let (w, cw) = bin(p.y, extent.y, dims.w);
        let (l, cl) = bin(p.z, extent.z, dims.l);
        if ch || cw || cl {
            clamped += 1;
        }
        let v = dims.index(h, w, l);
        counts[v] += 1;
        intensity[v] += p.intensity;
        let floor = -extent.z + l as f64 * cell_h;
        z_off[v] += ((p.z - floor) / cell_h).clamp(0.0, 1.0);
        class_counts[v * k + p.class as usize] += 1;
    }
    let max_count = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut features = FeatureGrid::zeros(shape);
    let mut labels = vec![IGNORE; n];
    let mut occ = vec![false; n];
    for v in 0..n {
        let c = counts[v];
        if c == 0 {
            continue;
        }
        let cf = c as f64;
        features.set(0, v, cf / max_count);
        features.set(1, v, intensity[v] / cf);
        features.set(2, v, z_off[v] / cf);
        features.set(3, v, 1.0);
        let row = &class_counts[v * k..(v + 1) * k];
        let mut best = 0;
        for (cls, &cnt) in row.iter().enumerate() {
            if cnt > row[best] {
                best = cls;
            }
        }
        labels[v] = best as u16;
        occ[v] = true;
    }
    Ok(VoxelScene {
        features,
        labels: LabelGrid::from_vec(shape, labels)?,
        occupancy: BinaryMask::from_vec(dims, occ)?,
        point_counts: counts,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape() -> GridShape {
        GridShape::new(5, 4, 8, 16, 16).unwrap()
    }

    #[test]
    fn empty_config_is_only_ground() {
        let cfg = SceneConfig {
            vehicles: 0,
            poles: 0,
            walls: 0,
            noise_points: 0,
            ..Default::default()
        };
        let pc = generate_scene(&cfg, 1).unwrap();
        assert_eq!(pc.len(), cfg.ground_points);
        assert!(pc.points.iter().all(|p| p.class == CLASS_GROUND));
    }

    #[test]
    fn same_seed_same_cloud() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn box_point_counts() {
        let cfg = SceneConfig {
            vehicles: 3,
            poles: 0,
            walls: 0,
            noise_points: 0,
            points_per_object: 200,
            ..Default::default()
        };
        let pc = generate_scene(&cfg, 7).unwrap();
        assert_eq!(pc.count_class(CLASS_VEHICLE), 600);
        // each box's points are contiguous in generation order
        let start = cfg.ground_points;
        for b in 0..3 {
            let chunk = &pc.points[start + b * 200..start + (b + 1) * 200];
            assert!(chunk.iter().all(|p| p.class == CLASS_VEHICLE));
        }
    }

    #[test]
    fn too_few_classes_rejected() {
        let cfg = SceneConfig {
            num_classes: 3,
            ..Default::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn single_point_at_centre() {
        let s = GridShape::new(5, 4, 4, 4, 4).unwrap();
        let pc = PointCloud {
            points: vec![Point {
                x: 0.0,
                y: 0.0,
                z: 0.0,
                intensity: 0.5,
                class: 2,
            }],
        };
        let ex = Extent::new(2.0, 2.0, 2.0).unwrap();
        let vs = voxelize(&pc, s, ex).unwrap();
        assert_eq!(vs.occupancy.count(), 1);
        let v = s.dims.index(2, 2, 2);
        assert!(vs.occupancy.get(v));
        assert_eq!(vs.labels.get(v), 2);
        assert_eq!(vs.features.get(0, v), 1.0);
        assert_eq!(vs.features.get(1, v), 0.5);
        assert_eq!(vs.features.get(2, v), 0.0);
        assert_eq!(vs.features.get(3, v), 1.0);
    }

    #[test]
    fn empty_cloud_voxelizes_empty() {
        let vs = voxelize(&PointCloud::default(), shape(), SceneConfig::default().extent).unwrap();
        assert_eq!(vs.occupancy.count(), 0);
        assert!(vs.labels.labels().iter().all(|&c| c == IGNORE));
    }

    #[test]
    fn majority_label() {
        let s = GridShape::new(3, 4, 1, 1, 1).unwrap();
        let mk = |class| Point {
            x: 0.1,
            y: 0.1,
            z: 0.1,
            intensity: 0.0,
            class,
        };
        let pc = PointCloud {
            points: vec![mk(1), mk(1), mk(2)],
        };
        let vs = voxelize(&pc, s, Extent::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(vs.labels.get(0), 1);
        let tie = PointCloud {
            points: vec![mk(2), mk(1)],
        };
        let vs = voxelize(&tie, s, Extent::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(vs.labels.get(0), 1);
    }

    #[test]
    fn out_of_extent_clamped_and_counted() {
        let s = GridShape::new(2, 4, 2, 2, 2).unwrap();
        let pc = PointCloud {
            points: vec![
                Point {
                    x: 5.0,
                    y: -5.0,
                    z: 0.5,
                    intensity: 0.2,
                    class: 1,
                },
                Point {
                    x: 0.5,
                    y: 0.5,
                    z: 0.5,
                    intensity: 0.2,
                    class: 0,
                },
            ],
        };
        let vs = voxelize(&pc, s, Extent::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(vs.clamped, 1);
        assert_eq!(vs.point_counts.iter().sum::<u32>(), 2);
        assert_eq!(vs.labels.get(s.dims.index(1, 0, 1)), 1);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let s = GridShape::new(5, 3, 2, 2, 2).unwrap();
        assert!(voxelize(&PointCloud::default(), s, SceneConfig::default().extent).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn counts_and_majority(seed in 0u64..1000) {
            let cfg = SceneConfig { points_per_object: 60, ground_points: 300, noise_points: 40, ..Default::default() };
            let pc = generate_scene(&cfg, seed).unwrap();
            let s = shape();
            let vs = voxelize(&pc, s, cfg.extent).unwrap();
            prop_assert_eq!(vs.point_counts.iter().map(|&c| c as usize).sum::<usize>(), pc.len());
            // recount classes per voxel and check the stored label is a mode
            let n = s.voxels();
            let mut cc = vec![0usize; n * 5];
            for p in &pc.points {
                let (h, _) = bin(p.x, cfg.extent.x, s.dims.h);
                let (w, _) = bin(p.y, cfg.extent.y, s.dims.w);
                let (l, _) = bin(p.z, cfg.extent.z, s.dims.l);
                cc[s.dims.index(h, w, l) * 5 + p.class as usize] += 1;
            }
            for v in vs.occupancy.iter_set() {
                let lab = vs.labels.get(v) as usize;
                let row = &cc[v * 5..v * 5 + 5];
                prop_assert!(row.iter().all(|&c| row[lab] >= c));
            }
        }
    }
}
