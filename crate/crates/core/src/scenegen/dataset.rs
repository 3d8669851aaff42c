//! Dataset splits, bulk generation and the textual manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::format::{load_voxel_scene, save_point_cloud, save_voxel_scene};
use super::{generate_scene, voxelize, Extent, SceneConfig};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureGrid, GridShape, LabelGrid};
use crate::kvfile::{join_list, KvFile};
use crate::parallel;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Split of scene ids plus where each scene lives on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_scenes: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub shape: GridShape,
    pub extent: Extent,
    /// Directory the scene paths are relative to.
    pub root: Option<PathBuf>,
}

impl Dataset {
    pub fn point_cloud_file(id: usize) -> String {
        format!("scene_{id:04}.rpls")
    }

    pub fn voxel_file(id: usize) -> String {
        format!("scene_{id:04}.rplv")
    }

    pub fn manifest(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("version", 1);
        kv.set("num_scenes", self.num_scenes);
        kv.set("labeled", join_list(&self.labeled));
        kv.set("unlabeled", join_list(&self.unlabeled));
        kv.set("validation", join_list(&self.validation));
        kv.set("num_classes", self.shape.num_classes);
        kv.set("channels", self.shape.channels);
        kv.set(
            "grid",
            format!("{}x{}x{}", self.shape.dims.h, self.shape.dims.w, self.shape.dims.l),
        );
        kv.set(
            "extent",
            format!("{},{},{}", self.extent.x, self.extent.y, self.extent.z),
        );
        for id in 0..self.num_scenes {
            kv.set(&format!("scene.{id:04}"), Self::voxel_file(id));
        }
        kv
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, self.manifest().render("scene dataset manifest"))?;
        Ok(path)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let kv = KvFile::read(manifest)?;
        let version: u32 = kv.require("version")?;
        if version != 1 {
            return Err(Error::Config(format!("manifest version {version}")));
        }
        let grid = kv.require_str("grid")?;
        let dims: Vec<usize> = grid
            .split('x')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad grid {grid:?}")))?;
        if dims.len() != 3 {
            return Err(Error::Config(format!("bad grid {grid:?}")));
        }
        let ex: Vec<f64> = kv.get_list("extent")?;
        if ex.len() != 3 {
            return Err(Error::Config("extent needs three values".into()));
        }
        let ds = Self {
            num_scenes: kv.require("num_scenes")?,
            labeled: kv.get_list("labeled")?,
            unlabeled: kv.get_list("unlabeled")?,
            validation: kv.get_list("validation")?,
            shape: GridShape::new(
                kv.require("num_classes")?,
                kv.require("channels")?,
                dims[0],
                dims[1],
                dims[2],
            )?,
            extent: Extent::new(ex[0], ex[1], ex[2])?,
            root: manifest.parent().map(Path::to_path_buf),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_scenes];
        for &id in self.labeled.iter().chain(&self.unlabeled).chain(&self.validation) {
            if id >= self.num_scenes {
                return Err(Error::Config(format!("scene id {id} out of range")));
            }
            if seen[id] {
                return Err(Error::Config(format!("scene id {id} in two splits")));
            }
            seen[id] = true;
        }
        if self.labeled.is_empty() {
            return Err(Error::Config("no labeled scenes".into()));
        }
        Ok(())
    }

    /// Loads every voxelized scene, indexed by scene id.
    pub fn load_scenes(&self) -> Result<Vec<SceneData>> {
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no root directory".into()))?;
        let ids: Vec<usize> = (0..self.num_scenes).collect();
        parallel::map(&ids, |&id| {
            let (vs, _) = load_voxel_scene(&root.join(Self::voxel_file(id)))?;
            if vs.features.shape() != self.shape {
                return Err(Error::ShapeMismatch(format!(
                    "scene {id} has shape {:?}",
                    vs.features.shape()
                )));
            }
            Ok(SceneData {
                id,
                features: vs.features,
                labels: vs.labels,
                occupancy: vs.occupancy,
            })
        })
        .into_iter()
        .collect()
    }
}

/// A voxelized scene as consumed by training.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub id: usize,
    pub features: FeatureGrid,
    pub labels: LabelGrid,
    pub occupancy: BinaryMask,
}

/// Deterministic shuffle; the first `n_val` ids validate, and of the rest the
/// first `ceil(ratio * n_train)` are labeled.
pub fn split_dataset(
    n_scenes: usize,
    labeled_ratio: f64,
    n_val: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n_val >= n_scenes {
        return Err(Error::InvalidArgument(format!(
            "{n_val} validation scenes leave no training scenes out of {n_scenes}"
        )));
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled ratio must lie in (0, 1], got {labeled_ratio}"
        )));
    }
    let mut ids: Vec<usize> = (0..n_scenes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = ids[..n_val].to_vec();
    let train = &ids[n_val..];
    // guard against 0.1 * 100 = 10.000000000000002
    let n_lab = ((labeled_ratio * train.len() as f64 - 1e-9).ceil() as usize).clamp(1, train.len());
    Ok((train[..n_lab].to_vec(), train[n_lab..].to_vec(), validation))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    pub shape: GridShape,
    pub n_scenes: usize,
    pub labeled_ratio: f64,
    pub n_val: usize,
    pub seed: u64,
}

/// Generates, voxelizes and splits `spec.n_scenes` scenes. When `dir` is given
/// the point clouds, voxel scenes and manifest are written there.
///
/// Scene `i` uses the seed `spec.seed ^ i`.
pub fn generate_dataset(spec: &DatasetSpec, dir: Option<&Path>) -> Result<(Dataset, Vec<SceneData>)> {
    spec.scene.validate()?;
    if spec.shape.num_classes != spec.scene.num_classes {
        return Err(Error::InvalidArgument("grid and scene class counts differ".into()));
    }
    let (labeled, unlabeled, validation) =
        split_dataset(spec.n_scenes, spec.labeled_ratio, spec.n_val, spec.seed)?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let scenes = parallel::map_range(spec.n_scenes, |id| -> Result<SceneData> {
        let pc = generate_scene(&spec.scene, spec.seed ^ id as u64)?;
        let vs = voxelize(&pc, spec.shape, spec.scene.extent)?;
        if let Some(d) = dir {
            save_point_cloud(&d.join(Dataset::point_cloud_file(id)), &pc)?;
            save_voxel_scene(&d.join(Dataset::voxel_file(id)), &vs, spec.scene.extent)?;
        }
        Ok(SceneData {
            id,
            features: vs.features,
            labels: vs.labels,
            occupancy: vs.occupancy,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        num_scenes: spec.n_scenes,
        labeled,
        unlabeled,
        validation,
        shape: spec.shape,
        extent: spec.scene.extent,
        root: dir.map(Path::to_path_buf),
    };
    if let Some(d) = dir {
        ds.write_manifest(d)?;
    }
    Ok((ds, scenes))
}
