//! Camera lists as JSON: `{"cameras": [{"fx", "fy", "cx", "cy", "width",
//! "height", "rotation": [w, x, y, z], "translation": [x, y, z]}, ...]}`.

use std::path::Path;

use serde_json::{json, Map, Value};

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::scene::Camera;

pub fn encode_cameras(cameras: &[Camera]) -> String {
    let list: Vec<Value> = cameras
        .iter()
        .map(|c| {
            json!({
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height,
                "rotation": c.rotation, "translation": c.translation,
            })
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&json!({ "cameras": list })).expect("cameras serialize");
    s.push('\n');
    s
}

fn field<'a>(obj: &'a Map<String, Value>, i: usize, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Field { field: format!("cameras[{i}].{name}"), message: "missing".into() })
}

fn number(obj: &Map<String, Value>, i: usize, name: &str) -> Result<f64> {
    field(obj, i, name)?
        .as_f64()
        .ok_or_else(|| Error::Field { field: format!("cameras[{i}].{name}"), message: "expected a number".into() })
}

fn size(obj: &Map<String, Value>, i: usize, name: &str) -> Result<u32> {
    field(obj, i, name)?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| Error::Field { field: format!("cameras[{i}].{name}"), message: "expected a non-negative integer".into() })
}

fn array<const N: usize>(obj: &Map<String, Value>, i: usize, name: &str) -> Result<[f64; N]> {
    let bad = || Error::Field { field: format!("cameras[{i}].{name}"), message: format!("expected {N} numbers") };
    let v = field(obj, i, name)?.as_array().ok_or_else(bad)?;
    if v.len() != N {
        return Err(bad());
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(v) {
        *o = x.as_f64().ok_or_else(bad)?;
    }
    Ok(out)
}

/// Parses and validates every camera.
pub fn decode_cameras(text: &str) -> Result<Vec<Camera>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("camera file: {e}")))?;
    let list = doc
        .get("cameras")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Field { field: "cameras".into(), message: "expected an array".into() })?;
    let mut out = Vec::with_capacity(list.len());
    for (i, v) in list.iter().enumerate() {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Field { field: format!("cameras[{i}]"), message: "expected an object".into() })?;
        let cam = Camera {
            fx: number(obj, i, "fx")?,
            fy: number(obj, i, "fy")?,
            cx: number(obj, i, "cx")?,
            cy: number(obj, i, "cy")?,
            width: size(obj, i, "width")?,
            height: size(obj, i, "height")?,
            rotation: array(obj, i, "rotation")?,
            translation: array(obj, i, "translation")?,
        };
        cam.validate()?;
        out.push(cam);
    }
    Ok(out)
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    write_atomic(path, encode_cameras(cameras).as_bytes())
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    decode_cameras(&read_text(path)?)
}
