//! Trajectory files: JSON-lines with one header line followed by one line per
//! frame. Images are inline base64 PNG or offsets into a sibling `.bin` blob
//! of raw RGB bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Action, ExpertEvent, Frame, Image, Observation, SubtaskSpan, TaskSpec, Trajectory, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::util::TOOL_VERSION;

pub const TRAJECTORY_FORMAT: &str = "emcot-trajectory/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoding {
    #[default]
    PngBase64,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub kind: String,
    pub format: String,
    pub tool_version: String,
    pub config_hash: String,
    pub id: String,
    pub task: TaskSpec,
    pub seed: u64,
    pub success: bool,
    pub length: usize,
    pub image_size: [usize; 2],
    pub image_encoding: ImageEncoding,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub blob_file: Option<String>,
    pub plan: Vec<String>,
    pub boundaries: Vec<SubtaskSpan>,
    pub events: Vec<ExpertEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameLine {
    kind: String,
    t: usize,
    proprio: [f64; PROPRIO_DIM],
    action: Action,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    blob_offset: Option<u64>,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, config_hash: &str, encoding: ImageEncoding) -> Result<()> {
    let first = traj
        .frames
        .first()
        .ok_or_else(|| Error::Input("cannot write an empty trajectory".into()))?;
    let blob = blob_path(path);
    let header = TrajectoryHeader {
        kind: "header".into(),
        format: TRAJECTORY_FORMAT.into(),
        tool_version: TOOL_VERSION.into(),
        config_hash: config_hash.into(),
        id: traj.id.clone(),
        task: traj.task.clone(),
        seed: traj.seed,
        success: traj.success,
        length: traj.len(),
        image_size: [first.observation.image.height, first.observation.image.width],
        image_encoding: encoding,
        blob_file: (encoding == ImageEncoding::Blob).then(|| blob.file_name().unwrap().to_string_lossy().into_owned()),
        plan: traj.plan.clone(),
        boundaries: traj.boundaries.clone(),
        events: traj.events.clone(),
    };

    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut blob_out = match encoding {
        ImageEncoding::Blob => Some(BufWriter::new(File::create(&blob)?)),
        ImageEncoding::PngBase64 => None,
    };
    let mut offset = 0u64;
    for (t, frame) in traj.frames.iter().enumerate() {
        let img = &frame.observation.image;
        let (image, blob_offset) = match blob_out.as_mut() {
            Some(b) => {
                b.write_all(&img.data)?;
                let at = offset;
                offset += img.data.len() as u64;
                (None, Some(at))
            }
            None => (Some(B64.encode(img.encode_png()?)), None),
        };
        let line = FrameLine {
            kind: "frame".into(),
            t,
            proprio: frame.observation.proprio,
            action: frame.action,
            image,
            blob_offset,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    if let Some(mut b) = blob_out {
        b.flush()?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<(TrajectoryHeader, Trajectory)> {
    let reader = BufReader::new(File::open(path).map_err(|e| crate::Error::Input(format!("{}: {e}", path.display())))?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{}: empty trajectory file", path.display())))??;
    let header: TrajectoryHeader = serde_json::from_str(&header_line)?;
    if header.format != TRAJECTORY_FORMAT {
        return Err(Error::Input(format!(
            "unsupported trajectory format '{}'",
            header.format
        )));
    }
    let [h, w] = header.image_size;
    let blob = match header.image_encoding {
        ImageEncoding::Blob => {
            let name = header
                .blob_file
                .as_ref()
                .ok_or_else(|| Error::Input("blob encoding without blob_file".into()))?;
            let mut bytes = Vec::new();
            File::open(path.with_file_name(name))?.read_to_end(&mut bytes)?;
            Some(bytes)
        }
        ImageEncoding::PngBase64 => None,
    };

    let mut frames = Vec::with_capacity(header.length);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FrameLine = serde_json::from_str(&line)?;
        if f.t != frames.len() {
            return Err(Error::Input(format!(
                "frame {} out of order (expected {})",
                f.t,
                frames.len()
            )));
        }
        let image = match (&f.image, f.blob_offset, &blob) {
            (Some(b64), _, _) => {
                let bytes = B64
                    .decode(b64)
                    .map_err(|e| Error::Input(format!("frame {}: bad base64: {e}", f.t)))?;
                Image::decode_png(&bytes)?
            }
            (None, Some(off), Some(bytes)) => {
                let n = h * w * 3;
                let start = off as usize;
                let data = bytes
                    .get(start..start + n)
                    .ok_or_else(|| Error::Input(format!("frame {}: blob offset out of range", f.t)))?
                    .to_vec();
                Image {
                    width: w,
                    height: h,
                    data,
                }
            }
            _ => return Err(Error::Input(format!("frame {} has no image", f.t))),
        };
        frames.push(Frame {
            observation: Observation {
                image,
                proprio: f.proprio,
            },
            action: f.action,
        });
    }
    if frames.len() != header.length {
        return Err(Error::Input(format!(
            "header declares {} frames, file has {}",
            header.length,
            frames.len()
        )));
    }
    let traj = Trajectory {
        id: header.id.clone(),
        task: header.task.clone(),
        seed: header.seed,
        frames,
        success: header.success,
        plan: header.plan.clone(),
        boundaries: header.boundaries.clone(),
        events: header.events.clone(),
    };
    Ok((header, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{EnvConfig, Level, Simulator, TaskId};

    #[test]
    fn both_encodings_round_trip() {
        let sim = Simulator::new(EnvConfig::default()).unwrap();
        let traj = sim
            .collect_trajectory(&TaskSpec::new(TaskId::PressButton, Level::Hard), 5)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for enc in [ImageEncoding::PngBase64, ImageEncoding::Blob] {
            let p = dir.path().join(format!("{:?}.jsonl", enc));
            write_trajectory(&p, &traj, "abc", enc).unwrap();
            let (h, back) = read_trajectory(&p).unwrap();
            assert_eq!(h.config_hash, "abc");
            assert_eq!(back, traj);
        }
    }
}
