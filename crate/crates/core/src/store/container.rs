//! Container directory: `manifest.json` plus one little-endian blob per record.
//!
//! Blob layout (all little-endian):
//!
//! | bytes  | field                        |
//! |--------|------------------------------|
//! | 0..4   | magic `ATTN`                 |
//! | 4..6   | version (u16)                |
//! | 6      | kind (u8, 0 self, 1 cross)   |
//! | 7      | padding                      |
//! | 8..10  | h (u16)                      |
//! | 10..12 | w (u16)                      |
//! | 12..16 | cols (u32)                   |
//! | 16..   | `h·w·cols` f32, row-major    |

use std::fs::{self, File};
use std::io::{BufWriter, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::manifest::{RecordDescriptor, RunManifest};
use super::record::{check_probability_rows, AttentionKind, AttentionRecord, Grid};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ATTN";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 16;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobHeader {
    pub version: u16,
    pub kind: AttentionKind,
    pub grid: Grid,
    pub cols: u32,
}

impl BlobHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6] = self.kind.code();
        out[8..10].copy_from_slice(&self.grid.h.to_le_bytes());
        out[10..12].copy_from_slice(&self.grid.w.to_le_bytes());
        out[12..16].copy_from_slice(&self.cols.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported blob version {version}")));
        }
        let kind = AttentionKind::from_code(bytes[6])
            .ok_or_else(|| Error::Format(format!("unknown record kind {}", bytes[6])))?;
        Ok(Self {
            version,
            kind,
            grid: Grid::new(
                u16::from_le_bytes([bytes[8], bytes[9]]),
                u16::from_le_bytes([bytes[10], bytes[11]]),
            ),
            cols: u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]),
        })
    }
}

/// Handle on a written container. Cheap to share across threads: every
/// record load opens its own file handle.
#[derive(Debug, Clone)]
pub struct Container {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Container {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn descriptors(&self) -> &[RecordDescriptor] {
        &self.manifest.records
    }

    /// Loads and validates one record.
    pub fn load(&self, desc: &RecordDescriptor) -> Result<AttentionRecord> {
        let path = self.dir.join(&desc.file);
        let mut file = File::open(&path).map_err(|source| match source.kind() {
            ErrorKind::NotFound => Error::MissingBlob {
                descriptor: desc.label(),
                path: path.clone(),
                source,
            },
            _ => Error::io(&path, source),
        })?;
        file.seek(SeekFrom::Start(desc.offset))
            .map_err(|e| Error::io(&path, e))?;

        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)
            .map_err(|e| Error::io(&path, e))?;
        let header = BlobHeader::decode(&header)?;
        if header.kind != desc.kind || header.grid != desc.grid || header.cols != desc.cols {
            return Err(Error::Format(format!(
                "{}: blob header says {} at {} with {} columns",
                desc.label(),
                header.kind,
                header.grid,
                header.cols
            )));
        }
        if desc.length != HEADER_LEN + desc.payload_len() {
            return Err(Error::Format(format!(
                "{}: declared length {} does not match its shape",
                desc.label(),
                desc.length
            )));
        }

        let mut payload = vec![0u8; desc.payload_len() as usize];
        file.read_exact(&mut payload)
            .map_err(|e| Error::io(&path, e))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        check_probability_rows(&data, desc.cols as usize, &desc.label())?;

        Ok(AttentionRecord {
            kind: desc.kind,
            layer: desc.layer,
            timestep: desc.timestep,
            grid: desc.grid,
            token_count: match desc.kind {
                AttentionKind::SelfAttention => None,
                AttentionKind::CrossAttention => Some(desc.cols),
            },
            data,
        })
    }

    /// Lazily loads every record in manifest order.
    pub fn records(&self) -> impl Iterator<Item = Result<AttentionRecord>> + '_ {
        self.descriptors().iter().map(move |d| self.load(d))
    }
}

/// Writes `records` (in manifest descriptor order) and the manifest into `dir`.
///
/// The descriptors' `file`, `offset` and `length` fields are assigned here.
pub fn write_container<I>(manifest: &RunManifest, records: I, dir: impl AsRef<Path>) -> Result<Container>
where
    I: IntoIterator<Item = AttentionRecord>,
{
    let dir = dir.as_ref();
    manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut written = manifest.clone();
    let mut records = records.into_iter();
    for desc in written.records.iter_mut() {
        let record = records.next().ok_or_else(|| {
            Error::Format(format!("record stream ended before {}", desc.label()))
        })?;
        if RecordDescriptor::for_record(&record).key() != desc.key()
            || record.cols() as u32 != desc.cols
        {
            return Err(Error::Format(format!(
                "record {} does not match descriptor {} ({} columns)",
                record.label(),
                desc.label(),
                desc.cols
            )));
        }
        record.validate()?;

        desc.file = desc.default_file_name();
        desc.offset = 0;
        desc.length = HEADER_LEN + desc.payload_len();
        write_blob(&dir.join(&desc.file), &record)?;
    }
    if let Some(extra) = records.next() {
        return Err(Error::Format(format!(
            "record {} has no descriptor in the manifest",
            extra.label()
        )));
    }

    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&written).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    Ok(Container {
        dir: dir.to_path_buf(),
        manifest: written,
    })
}

fn write_blob(path: &Path, record: &AttentionRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = BlobHeader {
        version: FORMAT_VERSION,
        kind: record.kind,
        grid: record.grid,
        cols: record.cols() as u32,
    };
    out.write_all(&header.encode())
        .map_err(|e| Error::io(path, e))?;
    for v in &record.data {
        out.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Opens a container directory. Records are not touched until loaded.
pub fn read_container(dir: impl AsRef<Path>) -> Result<Container> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
    manifest.validate()?;
    Ok(Container {
        dir: dir.to_path_buf(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::manifest::ImageSize;

    fn manifest_for(records: &[AttentionRecord]) -> RunManifest {
        RunManifest {
            image_id: "t".into(),
            prompt: String::new(),
            class_prompt: String::new(),
            classes: vec![],
            num_layers: 1,
            num_timesteps: 1,
            image_size: ImageSize::new(4, 4),
            records: records.iter().map(RecordDescriptor::for_record).collect(),
            seed: 1,
        }
    }

    #[test]
    fn empty_container_has_manifest_only() {
        let tmp = tempfile::tempdir().unwrap();
        let m = manifest_for(&[]);
        write_container(&m, Vec::new(), tmp.path()).unwrap();
        let entries: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
        let back = read_container(tmp.path()).unwrap();
        assert_eq!(back.manifest(), &m);
    }

    #[test]
    fn self_record_blob_size() {
        // 16-byte header + 4x4 f32 payload.
        let tmp = tempfile::tempdir().unwrap();
        let rec = AttentionRecord::new_self(0, 0, Grid::square(2), vec![0.25; 16]);
        let c = write_container(&manifest_for(&[rec.clone()]), vec![rec.clone()], tmp.path()).unwrap();
        let desc = &c.descriptors()[0];
        let len = fs::metadata(tmp.path().join(&desc.file)).unwrap().len();
        assert_eq!(len, 16 + 64);
        assert_eq!(desc.length, 80);
        assert_eq!(c.load(desc).unwrap(), rec);
    }

    #[test]
    fn write_rejects_bad_row_sum() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = AttentionRecord::new_cross(0, 0, Grid::square(1), 2, vec![0.75, 0.75]);
        let err = write_container(&manifest_for(&[rec.clone()]), vec![rec], tmp.path()).unwrap_err();
        assert!(matches!(err, Error::NotRowStochastic { .. }));
    }

    #[test]
    fn write_rejects_mismatched_stream() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = AttentionRecord::new_self(0, 0, Grid::square(1), vec![1.0]);
        let mut other = rec.clone();
        other.layer = 3;
        let err = write_container(&manifest_for(&[rec]), vec![other], tmp.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = AttentionRecord::new_self(0, 0, Grid::square(2), vec![0.25; 16]);
        let c = write_container(&manifest_for(&[rec.clone()]), vec![rec], tmp.path()).unwrap();
        let desc = c.descriptors()[0].clone();
        let blob = tmp.path().join(&desc.file);
        let bytes = fs::read(&blob).unwrap();

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        fs::write(&blob, &corrupt).unwrap();
        assert!(matches!(c.load(&desc), Err(Error::Format(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        fs::write(&blob, &wrong_version).unwrap();
        assert!(matches!(c.load(&desc), Err(Error::Format(_))));

        fs::write(&blob, &bytes[..40]).unwrap();
        assert!(matches!(c.load(&desc), Err(Error::Io { .. })));

        fs::remove_file(&blob).unwrap();
        match c.load(&desc) {
            Err(Error::MissingBlob { descriptor, .. }) => assert_eq!(descriptor, desc.label()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
