//! Parameter archive: a binary payload plus a text manifest.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "VLACKPT1"
//! count   u64
//! repeated count times:
//!   name_len u32, name (UTF-8), rank u32, dims u64 × rank, payload f64 × numel
//! ```
//!
//! The manifest (`<archive>.manifest`) lists one `name<TAB>d0xd1x…` line per
//! entry in serialization order, after `@key=value` metadata lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{GradError, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"VLACKPT1";
const MANIFEST_HEADER: &str = "# vla-core parameter manifest v1";

/// Parameters plus free-form metadata carried in the manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GradError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| GradError::Checkpoint("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, GradError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, GradError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(buf: &[u8]) -> Result<ParamStore, GradError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(GradError::Checkpoint("bad magic".into()));
    }
    let count = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| GradError::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(GradError::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(store)
}

fn manifest_text(ckpt: &Checkpoint) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for (k, v) in &ckpt.meta {
        s.push_str(&format!("@{k}={}\n", v.replace('\n', "\\n")));
    }
    for (name, t) in ckpt.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        s.push_str(&format!("{name}\t{}\n", dims.join("x")));
    }
    s
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), GradError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(&ckpt.params))?;
    fs::write(manifest_path(path), manifest_text(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, GradError> {
    let params = decode(&fs::read(path)?)?;
    let text = fs::read_to_string(manifest_path(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(GradError::Checkpoint("manifest header missing".into()));
    }
    let mut meta = BTreeMap::new();
    let mut names = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        if let Some(kv) = line.strip_prefix('@') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| GradError::Checkpoint(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.replace("\\n", "\n"));
        } else {
            let (name, _) = line
                .split_once('\t')
                .ok_or_else(|| GradError::Checkpoint(format!("bad manifest line `{line}`")))?;
            names.push(name.to_string());
        }
    }
    let archive: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    if archive != names {
        return Err(GradError::Checkpoint("manifest order disagrees with archive".into()));
    }
    Ok(Checkpoint { params, meta })
}
