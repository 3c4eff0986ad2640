//! Binary scene container.
//!
//! Layout (all little-endian): magic `S2M2`, format version `u32`, scene
//! count `u64`, then per scene: seed `u64`, class count `u32`, points
//! (`len`, `3*len` f64), semantics (`len`, f64s), point labels (`len`, i64s),
//! boxes (`len`, then 9 f64 + class `u32` each). Floats are stored bit-exact.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scene::{Box3D, Scene};

pub const MAGIC: &[u8; 4] = b"S2M2";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_scenes(scenes: &[Scene]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(scenes.len() as u64);
    for s in scenes {
        w.u64(s.seed);
        w.u32(s.num_classes as u32);
        w.u64(s.points.len() as u64);
        for p in &s.points {
            p.iter().for_each(|&v| w.f64(v));
        }
        w.f64s(&s.semantics);
        w.u64(s.point_to_box.len() as u64);
        s.point_to_box.iter().for_each(|&i| w.i64(i));
        w.u64(s.boxes.len() as u64);
        for b in &s.boxes {
            for v in [b.x, b.y, b.z, b.w, b.l, b.h, b.vx, b.vy, b.yaw] {
                w.f64(v);
            }
            w.u32(b.class_id as u32);
        }
    }
    w.finish()
}

pub fn decode_scenes(bytes: &[u8]) -> Result<Vec<Scene>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected S2M2".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported format version {version}"),
        });
    }
    // each scene needs at least 44 bytes of headers
    let count = r.len(44, "scene count")?;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let seed = r.u64("seed")?;
        let num_classes = r.u32("class count")? as usize;
        let n = r.len(24, "point count")?;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push([r.f64("point")?, r.f64("point")?, r.f64("point")?]);
        }
        let sem_at = r.offset();
        let semantics = r.f64s("semantics")?;
        if semantics.len() != n * num_classes {
            return Err(Error::Parse {
                offset: sem_at,
                message: format!(
                    "semantics has {} values, expected {n} x {num_classes}",
                    semantics.len()
                ),
            });
        }
        let lab_at = r.offset();
        let m = r.len(8, "label count")?;
        if m != n {
            return Err(Error::Parse {
                offset: lab_at,
                message: format!("{m} labels for {n} points"),
            });
        }
        let point_to_box = (0..m).map(|_| r.i64("label")).collect::<Result<Vec<_>>>()?;
        let nb = r.len(76, "box count")?;
        let mut boxes = Vec::with_capacity(nb);
        for _ in 0..nb {
            let mut v = [0.0; 9];
            for x in v.iter_mut() {
                *x = r.f64("box")?;
            }
            let class_id = r.u32("box class")? as usize;
            boxes.push(Box3D {
                x: v[0],
                y: v[1],
                z: v[2],
                w: v[3],
                l: v[4],
                h: v[5],
                vx: v[6],
                vy: v[7],
                yaw: v[8],
                class_id,
            });
        }
        if let Some(&bad) = point_to_box
            .iter()
            .find(|&&i| i < -1 || i >= boxes.len() as i64)
        {
            return Err(r.error(format!("point label {bad} out of range")));
        }
        scenes.push(Scene {
            points,
            semantics,
            num_classes,
            boxes,
            point_to_box,
            seed,
        });
    }
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after last scene"));
    }
    Ok(scenes)
}

pub fn save_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_scenes(scenes)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scenes(&bytes)
}

/// Debug-only JSON view of a scene list.
pub fn scenes_to_json(scenes: &[Scene]) -> Result<String> {
    let view: Vec<_> = scenes
        .iter()
        .map(|s| {
            serde_json::json!({
                "seed": s.seed,
                "num_classes": s.num_classes,
                "points": s.points,
                "semantics": s.semantics,
                "point_to_box": s.point_to_box,
                "boxes": s.boxes,
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&view)?)
}
