//! Labeled point clouds as binary little-endian PLY.

use std::path::Path;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::scene::{LabeledPoint, LabeledPointCloud};

const REQUIRED: [&str; 7] = ["x", "y", "z", "red", "green", "blue", "object_id"];

/// Positions are stored as 32-bit floats and colors as 8-bit channels, so
/// only values representable in those types survive a round trip.
pub fn encode_labeled_ply(cloud: &LabeledPointCloud) -> Result<Vec<u8>> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property ushort object_id\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    out.reserve(cloud.len() * 17);
    for (i, p) in cloud.points.iter().enumerate() {
        for v in p.position {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for c in p.color {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        let id = u16::try_from(p.object_id)
            .map_err(|_| Error::Format(format!("point {i}: object id {} exceeds 16 bits", p.object_id)))?;
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

pub fn decode_labeled_ply(bytes: &[u8]) -> Result<LabeledPointCloud> {
    let perr = |offset: usize, message: String| Error::Parse { offset, message };
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| perr(start, "unterminated header".into()))?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| perr(start, "header is not text".into()))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(perr(off, "missing 'ply' magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let (off, line) = next_line(&mut pos)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(perr(off, format!("unsupported format '{fmt}'")));
                }
            }
            ["element", name, n] => {
                if *name != "vertex" || count.is_some() {
                    return Err(perr(off, format!("unsupported element '{name}'")));
                }
                count = Some(n.parse().map_err(|_| perr(off, format!("bad vertex count '{n}'")))?);
            }
            ["property", "list", ..] => return Err(perr(off, "list properties are not supported".into())),
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| perr(off, format!("unknown property type '{ty}'")))?;
                props.push((name.to_string(), s));
            }
            _ => return Err(perr(off, format!("unrecognized header line '{line}'"))),
        }
    }
    let count = count.ok_or_else(|| perr(pos, "no vertex element".into()))?;
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(REQUIRED) {
        *slot = props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| perr(pos, format!("missing property '{name}'")))?;
    }
    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, s) in &props {
        offsets.push(stride);
        stride += s.size();
    }
    let body = &bytes[pos..];
    let needed = count.checked_mul(stride).ok_or_else(|| perr(pos, "vertex count overflows".into()))?;
    if body.len() < needed {
        let complete = body.len() / stride.max(1);
        return Err(perr(
            pos + complete * stride,
            format!("truncated body: {count} vertices declared, {complete} complete"),
        ));
    }
    let mut points = Vec::with_capacity(count);
    for v in 0..count {
        let rec = &body[v * stride..(v + 1) * stride];
        let get = |k: usize| {
            let p = index[k];
            props[p].1.read(&rec[offsets[p]..])
        };
        let id = get(6);
        if !(id >= 0.0 && id.fract() == 0.0 && id <= u32::MAX as f64) {
            return Err(perr(pos + v * stride + offsets[index[6]], format!("object_id {id} is not a valid ID")));
        }
        let color = |k: usize| {
            let s = props[index[k]].1;
            match s {
                Scalar::F32 | Scalar::F64 => get(k),
                _ => get(k) / 255.0,
            }
        };
        points.push(LabeledPoint {
            position: [get(0), get(1), get(2)],
            color: [color(3), color(4), color(5)],
            object_id: id as u32,
        });
    }
    Ok(LabeledPointCloud::new(points))
}

pub fn write_labeled_ply(path: &Path, cloud: &LabeledPointCloud) -> Result<()> {
    write_atomic(path, &encode_labeled_ply(cloud)?)
}

pub fn read_labeled_ply(path: &Path) -> Result<LabeledPointCloud> {
    decode_labeled_ply(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud_strategy() -> impl Strategy<Value = LabeledPointCloud> {
        prop::collection::vec(
            (prop::array::uniform3(-1e4f32..1e4), prop::array::uniform3(0u8..=255), 0u32..=65535),
            0..50,
        )
        .prop_map(|pts| {
            LabeledPointCloud::new(
                pts.into_iter()
                    .map(|(p, c, id)| LabeledPoint {
                        position: p.map(|v| v as f64),
                        color: c.map(|v| v as f64 / 255.0),
                        object_id: id,
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn round_trip(cloud in cloud_strategy()) {
            let bytes = encode_labeled_ply(&cloud).unwrap();
            let back = decode_labeled_ply(&bytes).unwrap();
            prop_assert_eq!(&back, &cloud);
            prop_assert_eq!(encode_labeled_ply(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn missing_object_id() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
        let err = decode_labeled_ply(text.as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::Parse { message, .. } if message.contains("object_id")), "{err}");
    }

    #[test]
    fn truncated_body() {
        let cloud = LabeledPointCloud::new(vec![
            LabeledPoint { position: [1.0, 2.0, 3.0], color: [0.0; 3], object_id: 1 };
            3
        ]);
        let bytes = encode_labeled_ply(&cloud).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        let header_len = bytes.len() - 3 * 17;
        match decode_labeled_ply(cut).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, header_len + 2 * 17),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn id_too_large() {
        let cloud = LabeledPointCloud::new(vec![LabeledPoint { position: [0.0; 3], color: [0.0; 3], object_id: 70000 }]);
        assert!(matches!(encode_labeled_ply(&cloud), Err(Error::Format(_))));
    }
}
