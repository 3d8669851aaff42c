//! `RPLS` scene files. Both point clouds (`.rpls`) and voxelized triples
//! (`.rplv`) share the magic and version; a kind byte follows the header.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::{Extent, Point, PointCloud, VoxelScene};
use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureGrid, GridShape, LabelGrid};

pub const SCENE_MAGIC: [u8; 4] = *b"RPLS";
pub const SCENE_VERSION: u16 = 1;
const KIND_POINTS: u8 = 0;
const KIND_VOXELS: u8 = 1;

pub(crate) fn point_cloud_bytes(pc: &PointCloud) -> Result<Vec<u8>> {
    let mut w = Writer::new(Vec::with_capacity(16 + pc.len() * 34));
    w.bytes(&SCENE_MAGIC)?;
    w.u16(SCENE_VERSION)?;
    w.u8(KIND_POINTS)?;
    w.u64(pc.len() as u64)?;
    for p in &pc.points {
        w.f64(p.x)?;
        w.f64(p.y)?;
        w.f64(p.z)?;
        w.f64(p.intensity)?;
        w.u16(p.class)?;
    }
    w.finish()
}

pub(crate) fn point_cloud_from_bytes(buf: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(buf);
    r.header(SCENE_MAGIC, SCENE_VERSION)?;
    expect_kind(&mut r, KIND_POINTS)?;
    let n = r.u64()? as usize;
    if (buf.len().saturating_sub(15)) / 34 < n {
        return Err(Error::Truncated(format!("point cloud of {n} points")));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(Point {
            x: r.f64()?,
            y: r.f64()?,
            z: r.f64()?,
            intensity: r.f64()?,
            class: r.u16()?,
        });
    }
    Ok(PointCloud { points })
}

fn expect_kind(r: &mut Reader<'_>, kind: u8) -> Result<()> {
    let found = r.u8()?;
    if found != kind {
        return Err(Error::InvalidArgument(format!(
            "scene file holds kind {found}, expected {kind}"
        )));
    }
    Ok(())
}

pub(crate) fn voxel_scene_bytes(vs: &VoxelScene, extent: Extent) -> Result<Vec<u8>> {
    let s = vs.features.shape();
    let mut w = Writer::new(Vec::new());
    w.bytes(&SCENE_MAGIC)?;
    w.u16(SCENE_VERSION)?;
    w.u8(KIND_VOXELS)?;
    for d in [s.num_classes, s.channels, s.dims.h, s.dims.w, s.dims.l] {
        w.u32(d as u32)?;
    }
    w.f64(extent.x)?;
    w.f64(extent.y)?;
    w.f64(extent.z)?;
    w.u64(vs.clamped as u64)?;
    w.f64s(vs.features.data())?;
    for &c in vs.labels.labels() {
        w.u16(c)?;
    }
    for &b in vs.occupancy.bits() {
        w.u8(b as u8)?;
    }
    for &c in &vs.point_counts {
        w.u32(c)?;
    }
    w.finish()
}

pub(crate) fn voxel_scene_from_bytes(buf: &[u8]) -> Result<(VoxelScene, Extent)> {
    let mut r = Reader::new(buf);
    r.header(SCENE_MAGIC, SCENE_VERSION)?;
    expect_kind(&mut r, KIND_VOXELS)?;
    let mut d = [0usize; 5];
    for x in &mut d {
        *x = r.u32()? as usize;
    }
    let shape = GridShape::new(d[0], d[1], d[2], d[3], d[4])?;
    let extent = Extent::new(r.f64()?, r.f64()?, r.f64()?)?;
    let clamped = r.u64()? as usize;
    let features = FeatureGrid::from_vec(shape, r.f64s()?)?;
    let n = shape.voxels();
    let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let occ = (0..n).map(|_| Ok(r.u8()? != 0)).collect::<Result<Vec<_>>>()?;
    let point_counts = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    if !r.is_done() {
        return Err(Error::InvalidArgument("trailing bytes after voxel scene".into()));
    }
    Ok((
        VoxelScene {
            features,
            labels: LabelGrid::from_vec(shape, labels)?,
            occupancy: BinaryMask::from_vec(shape.dims, occ)?,
            point_counts,
            clamped,
        },
        extent,
    ))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(bytes)?;
    w.finish()?;
    Ok(())
}

pub fn save_point_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    write_all(path, &point_cloud_bytes(pc)?)
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    point_cloud_from_bytes(&read_file(path)?)
}

pub fn save_voxel_scene(path: &Path, vs: &VoxelScene, extent: Extent) -> Result<()> {
    write_all(path, &voxel_scene_bytes(vs, extent)?)
}

pub fn load_voxel_scene(path: &Path) -> Result<(VoxelScene, Extent)> {
    voxel_scene_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, voxelize, SceneConfig};

    #[test]
    fn point_cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pc = generate_scene(&SceneConfig::default(), 3).unwrap();
        let path = dir.path().join("s.rpls");
        save_point_cloud(&path, &pc).unwrap();
        assert_eq!(load_point_cloud(&path).unwrap(), pc);
        let empty = dir.path().join("e.rpls");
        save_point_cloud(&empty, &PointCloud::default()).unwrap();
        assert!(load_point_cloud(&empty).unwrap().is_empty());
    }

    #[test]
    fn voxel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let pc = generate_scene(&cfg, 3).unwrap();
        let vs = voxelize(&pc, GridShape::new(5, 4, 8, 16, 16).unwrap(), cfg.extent).unwrap();
        let path = dir.path().join("s.rplv");
        save_voxel_scene(&path, &vs, cfg.extent).unwrap();
        let (back, ex) = load_voxel_scene(&path).unwrap();
        assert_eq!(back, vs);
        assert_eq!(ex, cfg.extent);
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let pc = generate_scene(&SceneConfig::default(), 3).unwrap();
        let bytes = point_cloud_bytes(&pc).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        let e = point_cloud_from_bytes(&bad).unwrap_err();
        assert!(matches!(e, Error::BadMagic { .. }));
        assert!(e.to_string().contains("bad magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        let v = point_cloud_from_bytes(&bad).unwrap_err();
        let t = point_cloud_from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(v, Error::VersionMismatch { .. }));
        assert!(matches!(t, Error::Truncated(_)));
        let codes = [e.code(), v.code(), t.code()];
        assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);
    }
}
