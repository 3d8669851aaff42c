//! `RPLC` checkpoint files: named parameter vectors with optional optimizer
//! state, bit-exact on round-trip.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::{NetConfig, NetParams, OptState};
use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RPLC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub params: NetParams,
    pub opt: Option<OptState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, name: &str, params: NetParams, opt: Option<OptState>) {
        self.entries.push(CheckpointEntry {
            name: name.to_string(),
            params,
            opt,
        });
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(Vec::new());
        w.bytes(&CHECKPOINT_MAGIC)?;
        w.u16(CHECKPOINT_VERSION)?;
        w.u32(self.entries.len() as u32)?;
        for e in &self.entries {
            w.str(&e.name)?;
            let cfg = e.params.config();
            w.u32(cfg.in_channels as u32)?;
            w.u32(cfg.hidden_channels as u32)?;
            w.u32(cfg.num_classes as u32)?;
            w.u8(cfg.mask_token as u8)?;
            let layout = cfg.layout();
            let mut blocks = vec![
                layout.conv1_w,
                layout.conv1_b,
                layout.conv2_w,
                layout.conv2_b,
                layout.head_w,
                layout.head_b,
            ];
            blocks.extend(layout.token);
            w.u32(blocks.len() as u32)?;
            for b in blocks {
                w.u64(b.start as u64)?;
                w.u64(b.end as u64)?;
            }
            w.f64s(e.params.values())?;
            match &e.opt {
                None => w.u8(0)?,
                Some(o) => {
                    w.u8(1)?;
                    w.u64(o.step)?;
                    w.u64(o.schedule_offset)?;
                    w.u64(o.total_steps)?;
                    for x in [o.base_lr, o.weight_decay, o.beta1, o.beta2, o.eps] {
                        w.f64(x)?;
                    }
                    w.f64s(&o.m)?;
                    w.f64s(&o.v)?;
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.str()?;
            let cfg = NetConfig {
                in_channels: r.u32()? as usize,
                hidden_channels: r.u32()? as usize,
                num_classes: r.u32()? as usize,
                mask_token: r.u8()? != 0,
            };
            let layout = cfg.layout();
            let mut expected = vec![
                layout.conv1_w,
                layout.conv1_b,
                layout.conv2_w,
                layout.conv2_b,
                layout.head_w,
                layout.head_b,
            ];
            expected.extend(layout.token);
            let nblocks = r.u32()? as usize;
            if nblocks != expected.len() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint entry {name}: layout has {nblocks} blocks, expected {}",
                    expected.len()
                )));
            }
            for b in expected {
                let (s, e) = (r.u64()? as usize, r.u64()? as usize);
                if s != b.start || e != b.end {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint entry {name}: layout block {s}..{e} != {b:?}"
                    )));
                }
            }
            let params = NetParams::from_vec(cfg, r.f64s()?)?;
            let opt = match r.u8()? {
                0 => None,
                _ => {
                    let step = r.u64()?;
                    let schedule_offset = r.u64()?;
                    let total_steps = r.u64()?;
                    let base_lr = r.f64()?;
                    let weight_decay = r.f64()?;
                    let beta1 = r.f64()?;
                    let beta2 = r.f64()?;
                    let eps = r.f64()?;
                    let m = r.f64s()?;
                    let v = r.f64s()?;
                    if m.len() != params.len() || v.len() != params.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "optimizer state of {name} does not match its parameters"
                        )));
                    }
                    Some(OptState {
                        m,
                        v,
                        step,
                        schedule_offset,
                        total_steps,
                        base_lr,
                        weight_decay,
                        beta1,
                        beta2,
                        eps,
                    })
                }
            };
            entries.push(CheckpointEntry { name, params, opt });
        }
        if !r.is_done() {
            return Err(Error::InvalidArgument("trailing bytes after checkpoint".into()));
        }
        Ok(Self { entries })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(&bytes)?;
    w.finish()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        let student = NetParams::init(NetConfig::segmenter(4, 3, 5), 1);
        let mut opt = OptState::new(student.len(), 100).starting_at(7);
        opt.step = 3;
        opt.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-3);
        c.push("student", student, Some(opt));
        c.push("refiner", NetParams::init(NetConfig::refiner(4, 3, 5), 2), None);
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rplc");
        let c = sample();
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Truncated(_))
        ));
    }
}
