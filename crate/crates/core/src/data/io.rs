//! On-disk dataset layout.
//!
//! ```text
//! DIR/index.json                 {"version":1,"seed":S,"episodes":["ep_00000",...]}
//! DIR/ep_00000/manifest.json     instruction, fps, arm, native_dims, length, shapes, init, goal
//! DIR/ep_00000/frames.bin        [T,32,32,3]
//! DIR/ep_00000/states.bin        [T,20]
//! DIR/ep_00000/actions.bin       [T,20]
//! DIR/ep_00000/latent_labels.txt written by labelling (optional)
//! QA_DIR/qa.json + QA_DIR/frames.bin [N,32,32,3]
//! ```
//!
//! Tensor files: 8-byte magic `VLAT\x00F32`, `u32` rank, `u64` dims × rank,
//! then little-endian `f32` payload in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episode::{Arm, Dataset, Episode, QaSample, Vec20, NATIVE_DIMS, PADDED_DIMS};
use super::expert::Goal;
use super::world::{Image, WorldState, CHANNELS, IMAGE_SIZE, PIXELS};
use super::DataError;

pub const TENSOR_MAGIC: &[u8; 8] = b"VLAT\x00F32";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(12 + shape.len() * 8 + data.len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>), DataError> {
    let buf = fs::read(path)?;
    let bad = |m: &str| DataError::Format(format!("{}: {m}", path.display()));
    if buf.len() < 12 || &buf[..8] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let rank = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let header = 12 + rank * 8;
    if buf.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(buf[12 + i * 8..20 + i * 8].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    if buf.len() != header + numel * 4 {
        return Err(bad("payload size disagrees with header"));
    }
    let data = buf[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

#[derive(Serialize, Deserialize)]
struct Index {
    version: u32,
    seed: u64,
    episodes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub version: u32,
    pub id: usize,
    pub instruction: String,
    pub fps: f64,
    pub arm: Arm,
    pub native_dims: usize,
    pub length: usize,
    pub frames_shape: Vec<usize>,
    pub states_shape: Vec<usize>,
    pub actions_shape: Vec<usize>,
    pub init: WorldState,
    pub goal: Goal,
}

pub fn episode_dir_name(id: usize) -> String {
    format!("ep_{id:05}")
}

fn rows_f32(rows: &[Vec20]) -> Vec<f32> {
    rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect()
}

fn rows_f64(data: &[f32]) -> Vec<Vec20> {
    data.chunks_exact(PADDED_DIMS)
        .map(|c| {
            let mut r = [0.0; PADDED_DIMS];
            for (o, v) in r.iter_mut().zip(c) {
                *o = f64::from(*v);
            }
            r
        })
        .collect()
}

pub fn write_episode(dir: &Path, ep: &Episode) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let t = ep.len();
    let manifest = EpisodeManifest {
        version: FORMAT_VERSION,
        id: ep.id,
        instruction: ep.instruction.clone(),
        fps: ep.fps,
        arm: ep.arm,
        native_dims: NATIVE_DIMS,
        length: t,
        frames_shape: vec![t, IMAGE_SIZE, IMAGE_SIZE, CHANNELS],
        states_shape: vec![t, PADDED_DIMS],
        actions_shape: vec![t, PADDED_DIMS],
        init: ep.init.clone(),
        goal: ep.goal,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let frames: Vec<f32> = ep.frames.iter().flat_map(|f| f.data.iter().copied()).collect();
    write_tensor(&dir.join("frames.bin"), &manifest.frames_shape, &frames)?;
    write_tensor(&dir.join("states.bin"), &manifest.states_shape, &rows_f32(&ep.states))?;
    write_tensor(&dir.join("actions.bin"), &manifest.actions_shape, &rows_f32(&ep.actions))?;
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<Episode, DataError> {
    let m: EpisodeManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let (fshape, frames) = read_tensor(&dir.join("frames.bin"))?;
    let (sshape, states) = read_tensor(&dir.join("states.bin"))?;
    let (ashape, actions) = read_tensor(&dir.join("actions.bin"))?;
    if fshape != m.frames_shape || sshape != m.states_shape || ashape != m.actions_shape {
        return Err(DataError::Format(format!("{}: tensor shapes disagree with manifest", dir.display())));
    }
    Ok(Episode {
        id: m.id,
        instruction: m.instruction,
        frames: frames.chunks_exact(PIXELS).map(|c| Image { data: c.to_vec() }).collect(),
        states: rows_f64(&states),
        actions: rows_f64(&actions),
        fps: m.fps,
        arm: m.arm,
        init: m.init,
        goal: m.goal,
    })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(ds.episodes.len());
    for ep in &ds.episodes {
        let name = episode_dir_name(ep.id);
        write_episode(&dir.join(&name), ep)?;
        names.push(name);
    }
    let index = Index { version: FORMAT_VERSION, seed: ds.seed, episodes: names };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let index: Index = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    let episodes = index
        .episodes
        .iter()
        .map(|name| read_episode(&dir.join(name)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { seed: index.seed, episodes })
}

#[derive(Serialize, Deserialize)]
struct QaRecord {
    question: String,
    answer: String,
    subject: usize,
    scene: WorldState,
}

pub fn write_qa(dir: &Path, samples: &[QaSample]) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let records: Vec<QaRecord> = samples
        .iter()
        .map(|s| QaRecord {
            question: s.question.clone(),
            answer: s.answer.clone(),
            subject: s.subject,
            scene: s.scene.clone(),
        })
        .collect();
    fs::write(dir.join("qa.json"), serde_json::to_string_pretty(&records)?)?;
    let frames: Vec<f32> = samples.iter().flat_map(|s| s.frame.data.iter().copied()).collect();
    write_tensor(&dir.join("frames.bin"), &[samples.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], &frames)
}

pub fn read_qa(dir: &Path) -> Result<Vec<QaSample>, DataError> {
    let records: Vec<QaRecord> = serde_json::from_str(&fs::read_to_string(dir.join("qa.json"))?)?;
    let (shape, frames) = read_tensor(&dir.join("frames.bin"))?;
    if shape.first() != Some(&records.len()) {
        return Err(DataError::Format("qa frame count disagrees with qa.json".into()));
    }
    Ok(records
        .into_iter()
        .zip(frames.chunks_exact(PIXELS))
        .map(|(r, f)| QaSample {
            frame: Image { data: f.to_vec() },
            question: r.question,
            answer: r.answer,
            scene: r.scene,
            subject: r.subject,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::episode::generate_dataset;

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = generate_dataset(3, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.episodes, ds.episodes);
    }

    #[test]
    fn tensor_header_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tensor(&p, &[2, 3], &[1.0; 6]).unwrap();
        let (s, d) = read_tensor(&p).unwrap();
        assert_eq!(s, vec![2, 3]);
        assert_eq!(d, vec![1.0; 6]);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(read_tensor(&p).is_err());
    }
}
