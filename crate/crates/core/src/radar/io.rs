//! On-disk sequence layout:
//!
//! ```text
//! <dir>/frames/NNNNNN.csv   x,y,z,v_r,v_c per point, fixed 6 decimals
//! <dir>/poses.csv           12 values per frame (row-major 3×4 sensor→world)
//! <dir>/annotations.jsonl   one box per line
//! <dir>/meta.json           {"fps": .., "sensor_id": ..}
//! <dir>/labels/NNNNNN.csv   optional: sx,sy,sz,mask,object_id per point
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AnnotatedFrame, BoxAnnotation, FrameTruth, RadarFrame, RadarPoint, Sequence, SequenceMeta};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::scalar::Scalar;

pub const FRAME_DECIMALS: usize = 6;
const POSE_DECIMALS: usize = 9;

fn frame_file_name(index: u64) -> String {
    format!("{index:06}.csv")
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, format!("{other:?}")),
        })?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        if rec.len() != width {
            return Err(Error::parse(
                path,
                format!("row {line}: expected {width} fields, found {}", rec.len()),
            ));
        }
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("row {line}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn sorted_frame_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) != Some("csv") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let index = stem
            .parse::<u64>()
            .map_err(|_| Error::parse(&path, "frame file name is not a frame index"))?;
        files.push((index, path));
    }
    files.sort_by_key(|(i, _)| *i);
    Ok(files)
}

/// Reads a sequence directory. A directory without `frames/` is an empty sequence.
pub fn load_sequence<T: Scalar>(dir: impl AsRef<Path>) -> Result<Sequence<T>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "sequence directory not found"),
        ));
    }
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?
    } else {
        SequenceMeta::default()
    };

    let frames_dir = dir.join("frames");
    let files = if frames_dir.is_dir() {
        sorted_frame_files(&frames_dir)?
    } else {
        Vec::new()
    };
    if files.is_empty() {
        return Ok(Sequence {
            meta,
            frames: Vec::new(),
        });
    }

    let pose_path = dir.join("poses.csv");
    let poses = read_rows(&pose_path, 12)?;
    if poses.len() != files.len() {
        return Err(Error::parse(
            &pose_path,
            format!("{} pose rows for {} frames", poses.len(), files.len()),
        ));
    }

    let mut boxes_by_frame: std::collections::BTreeMap<u64, Vec<BoxAnnotation<T>>> =
        Default::default();
    let ann_path = dir.join("annotations.jsonl");
    if ann_path.exists() {
        let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        for (line, l) in text.lines().enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            let b: BoxAnnotation<f64> = serde_json::from_str(l)
                .map_err(|e| Error::parse(&ann_path, format!("line {line}: {e}")))?;
            boxes_by_frame
                .entry(b.frame_index)
                .or_default()
                .push(BoxAnnotation {
                    center: crate::geometry::cast3(b.center),
                    dims: crate::geometry::cast3(b.dims),
                    yaw: T::of(b.yaw),
                    track_id: b.track_id,
                    frame_index: b.frame_index,
                });
        }
    }

    let mut frames = Vec::with_capacity(files.len());
    for ((index, path), pose_row) in files.iter().zip(&poses) {
        let rows = read_rows(path, 5)?;
        let points = rows
            .iter()
            .map(|r| RadarPoint::new([T::of(r[0]), T::of(r[1]), T::of(r[2])], T::of(r[3]), T::of(r[4])))
            .collect();
        let mut p = [T::zero(); 12];
        for (dst, src) in p.iter_mut().zip(pose_row) {
            *dst = T::of(*src);
        }
        let frame = RadarFrame {
            points,
            ego_pose: Pose::from_row_major(&p),
            timestamp: T::of(*index as f64 / meta.fps),
            frame_index: *index,
        };
        frame
            .validate()
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        frames.push(AnnotatedFrame {
            frame,
            boxes: boxes_by_frame.remove(index).unwrap_or_default(),
        });
    }
    let seq = Sequence { meta, frames };
    seq.validate()?;
    Ok(seq)
}

fn fmt_frame<T: Scalar>(frame: &RadarFrame<T>) -> String {
    let mut s = String::with_capacity(frame.len() * 48);
    for p in &frame.points {
        let v = [
            p.position[0],
            p.position[1],
            p.position[2],
            p.rrv,
            p.rrv_compensated,
        ];
        let fields: Vec<String> = v
            .iter()
            .map(|x| format!("{:.*}", FRAME_DECIMALS, x.as_f64()))
            .collect();
        let _ = writeln!(s, "{}", fields.join(","));
    }
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `seq` in the directory layout read by [`load_sequence`].
pub fn save_sequence<T: Scalar>(seq: &Sequence<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let frames_dir = dir.join("frames");
    mkdir(&frames_dir)?;
    let meta = serde_json::to_string_pretty(&seq.meta).expect("meta serializes");
    write(&dir.join("meta.json"), &(meta + "\n"))?;

    let mut poses = String::new();
    let mut ann = String::new();
    for af in &seq.frames {
        let f = &af.frame;
        write(&frames_dir.join(frame_file_name(f.frame_index)), &fmt_frame(f))?;
        let row: Vec<String> = f
            .ego_pose
            .to_row_major()
            .iter()
            .map(|x| format!("{:.*}", POSE_DECIMALS, x.as_f64()))
            .collect();
        let _ = writeln!(poses, "{}", row.join(","));
        for b in &af.boxes {
            let b64 = BoxAnnotation {
                center: crate::geometry::cast3::<T, f64>(b.center),
                dims: crate::geometry::cast3::<T, f64>(b.dims),
                yaw: b.yaw.as_f64(),
                track_id: b.track_id,
                frame_index: b.frame_index,
            };
            let _ = writeln!(ann, "{}", serde_json::to_string(&b64).expect("box serializes"));
        }
    }
    write(&dir.join("poses.csv"), &poses)?;
    write(&dir.join("annotations.jsonl"), &ann)?;
    Ok(())
}

/// Writes per-point truth under `<dir>/labels/`.
pub fn save_labels<T: Scalar>(
    seq: &Sequence<T>,
    truth: &[FrameTruth<T>],
    dir: impl AsRef<Path>,
) -> Result<()> {
    let labels_dir = dir.as_ref().join("labels");
    mkdir(&labels_dir)?;
    for (af, t) in seq.frames.iter().zip(truth) {
        let mut s = String::new();
        for ((f, m), id) in t.flow.iter().zip(&t.motion_mask).zip(&t.object_id) {
            let _ = writeln!(
                s,
                "{:.9},{:.9},{:.9},{},{}",
                f[0].as_f64(),
                f[1].as_f64(),
                f[2].as_f64(),
                m,
                id
            );
        }
        write(&labels_dir.join(frame_file_name(af.frame.frame_index)), &s)?;
    }
    Ok(())
}

/// Reads `<dir>/labels/` for every frame of `seq`.
pub fn load_labels<T: Scalar>(seq: &Sequence<T>, dir: impl AsRef<Path>) -> Result<Vec<FrameTruth<T>>> {
    let labels_dir = dir.as_ref().join("labels");
    seq.frames
        .iter()
        .map(|af| {
            let path = labels_dir.join(frame_file_name(af.frame.frame_index));
            let rows = read_rows(&path, 5)?;
            if rows.len() != af.frame.len() {
                return Err(Error::parse(
                    &path,
                    format!("{} label rows for {} points", rows.len(), af.frame.len()),
                ));
            }
            Ok(FrameTruth {
                flow: rows.iter().map(|r| [T::of(r[0]), T::of(r[1]), T::of(r[2])]).collect(),
                motion_mask: rows.iter().map(|r| u8::from(r[3] != 0.0)).collect(),
                object_id: rows.iter().map(|r| r[4] as i64).collect(),
            })
        })
        .collect()
}
