use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetSpec, FeatureRecord, StoreError, TaskSpec, TrackData, TrackSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";
const MAGIC: [u8; 4] = *b"MMFS";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    label_names: Vec<String>,
    /// Optional in files written by other tools; defaults to one task over all labels.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tasks: Vec<TaskSpec>,
    tracks: Vec<TrackSpec>,
    record_count: u64,
    checksum: String,
}

/// Writes `manifest.json` and `records.bin` into `dir`, creating it if needed.
pub fn write_features(dir: &Path, spec: &DatasetSpec, records: &[FeatureRecord]) -> Result<(), StoreError> {
    spec.validate()?;
    let mut buf = Vec::with_capacity(6 + records.len() * 4096);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        r.validate(spec)?;
        buf.extend_from_slice(&r.id.to_le_bytes());
        buf.extend_from_slice(&r.labels);
        for t in &r.tracks {
            let n = u16::try_from(t.seq_len()).map_err(|_| StoreError::Inconsistent(format!("record {}: seq_len overflows u16", r.id)))?;
            buf.extend_from_slice(&n.to_le_bytes());
            put_f32s(&mut buf, &t.tokens);
            buf.extend(t.mask.iter().map(|&m| m as u8));
            if let Some(l) = &t.logits {
                put_f32s(&mut buf, l);
            }
        }
    }
    let manifest = Manifest {
        name: spec.name.clone(),
        label_names: spec.label_names.clone(),
        tasks: spec.tasks.clone(),
        tracks: spec.tracks.clone(),
        record_count: records.len() as u64,
        checksum: sha256_hex(&buf),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RECORDS_FILE), &buf)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_features(dir: &Path) -> Result<(DatasetSpec, Vec<FeatureRecord>), StoreError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let tasks = if manifest.tasks.is_empty() {
        vec![TaskSpec { name: manifest.name.clone(), labels: manifest.label_names.clone() }]
    } else {
        manifest.tasks
    };
    let spec = DatasetSpec { name: manifest.name, label_names: manifest.label_names, tasks, tracks: manifest.tracks };
    spec.validate()?;
    let bytes = fs::read(dir.join(RECORDS_FILE))?;

    let mut cur = Cursor { buf: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::Version(version));
    }
    let mut records = Vec::new();
    for _ in 0..manifest.record_count {
        let id = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let labels = cur.take(spec.label_names.len())?.to_vec();
        let mut tracks = Vec::with_capacity(spec.tracks.len());
        for ts in &spec.tracks {
            let n = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            if n > ts.max_len {
                return Err(StoreError::Inconsistent(format!("record {id}: {} seq_len {n} exceeds max_len {}", ts.name, ts.max_len)));
            }
            let tokens = cur.f32s(n * ts.dim)?;
            let mask = cur
                .take(n)?
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(StoreError::Inconsistent(format!("record {id}: mask byte {b}"))),
                })
                .collect::<Result<_, _>>()?;
            let logits = if ts.has_logits { Some(cur.f32s(n * ts.logit_classes)?) } else { None };
            tracks.push(TrackData { tokens, mask, logits });
        }
        let rec = FeatureRecord { id, labels, tracks };
        rec.validate(&spec)?;
        records.push(rec);
    }
    if cur.pos != bytes.len() {
        return Err(StoreError::Inconsistent(format!("{} trailing bytes after last record", bytes.len() - cur.pos)));
    }
    if sha256_hex(&bytes) != manifest.checksum {
        return Err(StoreError::Checksum);
    }
    Ok((spec, records))
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(StoreError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, StoreError> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
