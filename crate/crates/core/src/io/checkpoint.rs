//! Versioned binary checkpoint: training config, iteration, heads, anchors.
//! All numbers little-endian; floats are stored as raw IEEE-754 bits, so a
//! load/save round trip is bit-exact.

use std::path::Path;

use nalgebra::Vector3;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::neural::{AnchorGrid, HeadParameters, Mlp};
use crate::scene::Anchor;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OBJSPLAT";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_COLOR_OVERRIDE: u8 = 1;
const FLAG_LEARNABLE_SEMANTICS: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub model: Model,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn len(&mut self, n: usize) -> Result<()> {
        self.u32(u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds 32 bits")))?);
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse { offset: self.pos, message: format!("truncated while reading {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflows"))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn vec3(&mut self, what: &str) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64(what)?, self.f64(what)?, self.f64(what)?))
    }
    fn err(&self, message: &str) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    m.validate()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let cfg = ck.config.to_toml();
    w.len(cfg.len())?;
    w.0.extend_from_slice(cfg.as_bytes());
    w.u64(ck.iteration);

    w.u32(m.n_objects);
    w.len(m.grid.k())?;
    w.len(m.grid.feature_dim())?;
    w.f64(m.grid.voxel_size());
    w.u8(if m.semantics.is_some() { FLAG_LEARNABLE_SEMANTICS } else { 0 });

    for mlp in m.heads.mlps() {
        w.len(mlp.input)?;
        w.len(mlp.hidden)?;
        w.len(mlp.output)?;
        for buf in mlp.buffers() {
            w.f64s(buf);
        }
    }

    w.u64(m.grid.len() as u64);
    for (i, a) in m.grid.anchors().iter().enumerate() {
        w.f64s(a.center.as_slice());
        w.f64s(a.scaling.as_slice());
        w.u32(a.object_id());
        match a.color_override {
            Some(c) => {
                w.u8(FLAG_COLOR_OVERRIDE);
                w.f64s(&c);
            }
            None => w.u8(0),
        }
        w.f64s(&a.feature);
        for o in &a.offsets {
            w.f64s(o.as_slice());
        }
        if let Some(sem) = &m.semantics {
            w.f64s(&sem[i]);
        }
    }
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?).map_err(|_| r.err("config is not UTF-8"))?;
    let config = TrainConfig::from_toml(cfg_text)?;
    let iteration = r.u64("iteration")?;

    let n_objects = r.u32("object count")?;
    let k = r.u32("k")? as usize;
    let feature_dim = r.u32("feature size")? as usize;
    let voxel_size = r.f64("voxel size")?;
    let flags = r.u8("flags")?;
    let learnable = flags & FLAG_LEARNABLE_SEMANTICS != 0;

    let mut mlps = Vec::with_capacity(3);
    for _ in 0..3 {
        let input = r.u32("head input")? as usize;
        let hidden = r.u32("head hidden")? as usize;
        let output = r.u32("head output")? as usize;
        let mut mlp = Mlp::zeros(input, hidden, output);
        for buf in mlp.buffers_mut() {
            let n = buf.len();
            *buf = r.f64s(n, "head weights")?;
        }
        mlps.push(mlp);
    }
    let covariance = mlps.pop().unwrap();
    let color = mlps.pop().unwrap();
    let opacity = mlps.pop().unwrap();
    let expected = HeadParameters::zeros(feature_dim, k);
    let heads = HeadParameters { feature_dim, k, opacity, color, covariance };
    let shapes_match = heads
        .mlps()
        .iter()
        .zip(expected.mlps())
        .all(|(a, b)| (a.input, a.hidden, a.output) == (b.input, b.hidden, b.output));
    if !shapes_match {
        return Err(Error::Format("head shapes do not match k and feature size".into()));
    }

    let count = r.u64("anchor count")? as usize;
    let mut anchors = Vec::with_capacity(count.min(bytes.len() / 8));
    let mut semantics = learnable.then(Vec::new);
    for _ in 0..count {
        let center = r.vec3("anchor center")?;
        let scaling = r.vec3("anchor scaling")?;
        let id = r.u32("object id")?;
        if id > n_objects {
            return Err(Error::InvalidId { id, n_objects });
        }
        let color_override = match r.u8("anchor flags")? {
            0 => None,
            FLAG_COLOR_OVERRIDE => Some([r.f64("color")?, r.f64("color")?, r.f64("color")?]),
            f => return Err(r.err(&format!("unknown anchor flags {f}"))),
        };
        let feature = r.f64s(feature_dim, "anchor feature")?;
        let mut offsets = Vec::with_capacity(k);
        for _ in 0..k {
            offsets.push(r.vec3("anchor offsets")?);
        }
        if let Some(sem) = semantics.as_mut() {
            sem.push(r.f64s(n_objects as usize + 1, "semantic vector")?);
        }
        let mut a = Anchor::new(center, scaling, feature, offsets, id);
        a.color_override = color_override;
        anchors.push(a);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after anchors"));
    }
    let grid = AnchorGrid::from_anchors(voxel_size, k, feature_dim, anchors)?;
    let model = Model { grid, heads, n_objects, semantics };
    model.validate()?;
    Ok(Checkpoint { config, iteration, model })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::voxelize_init;
    use crate::scene::{LabeledPoint, LabeledPointCloud};
    use crate::train::SemanticMode;

    fn sample(learnable: bool) -> Checkpoint {
        let pts = (0..40)
            .map(|i| LabeledPoint {
                position: [i as f64 * 0.037, (i % 7) as f64 * 0.05, -0.2],
                color: [0.5; 3],
                object_id: (i % 3) as u32,
            })
            .collect();
        let mut grid = voxelize_init(&LabeledPointCloud::new(pts), 0.1, 4, 6).unwrap();
        for (i, a) in grid.anchors_mut().iter_mut().enumerate() {
            a.feature.iter_mut().enumerate().for_each(|(j, f)| *f = (i * 7 + j) as f64 * 0.1 - 1.0 / 3.0);
            a.offsets[1].x = std::f64::consts::PI * i as f64;
        }
        grid.anchors_mut()[0].color_override = Some([1.0, 0.0, 0.25]);
        let n = grid.len();
        let config = TrainConfig {
            k: 4,
            feature_dim: 6,
            voxel_size: 0.1,
            semantic_mode: if learnable { SemanticMode::Learnable } else { SemanticMode::OneHot },
            ..Default::default()
        };
        let model = Model {
            grid,
            heads: HeadParameters::random(6, 4, 11),
            n_objects: 2,
            semantics: learnable.then(|| (0..n).map(|i| vec![0.1 * i as f64, -0.5, 1.0 / 7.0]).collect()),
        };
        Checkpoint { config, iteration: 1234, model }
    }

    #[test]
    fn round_trip_bit_exact() {
        for learnable in [false, true] {
            let ck = sample(learnable);
            let bytes = encode_checkpoint(&ck).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_checkpoint(&sample(false)).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }
}
