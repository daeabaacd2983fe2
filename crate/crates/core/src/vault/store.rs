//! Storage-server record file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header:  "SMTF" | version: u16 | p: u64
//! record:  owner: u32 | epoch: u32 | group: u32 | sender: u32
//!          | nonce_len: u32 | nonce | ct_len: u32 | ct | tag_len: u32 | tag
//! ```
//!
//! Records are appended and flushed one at a time.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{EncryptedGradientRecord, RecordKey, VaultError};
use crate::protocol::ClientId;

pub const MAGIC: &[u8; 4] = b"SMTF";
pub const FORMAT_VERSION: u16 = 1;
pub(crate) const HEADER_LEN: usize = 4 + 2 + 8;

pub(crate) fn encode_header(p: u64) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[..4].copy_from_slice(MAGIC);
    out[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    out[6..].copy_from_slice(&p.to_le_bytes());
    out
}

/// Byte cursor that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> VaultError {
        VaultError::Format {
            path: self.path.display().to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], VaultError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, VaultError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, VaultError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, VaultError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, VaultError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn prefixed(&mut self) -> Result<Vec<u8>, VaultError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    /// Checks magic and version, returns the prime.
    pub(crate) fn header(&mut self) -> Result<u64, VaultError> {
        if self.take(4)? != MAGIC {
            return Err(self.fail("bad magic"));
        }
        let version = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(self.fail(format!("unsupported version {version}")));
        }
        self.u64()
    }
}

fn encode_record(r: &EncryptedGradientRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + r.nonce.len() + r.ciphertext.len() + r.tag.len());
    out.extend(r.key.to_bytes());
    for field in [&r.nonce, &r.ciphertext, &r.tag] {
        out.extend((field.len() as u32).to_le_bytes());
        out.extend(field);
    }
    out
}

/// Exact-match filter; unset fields match everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub owner: Option<ClientId>,
    pub sender: Option<ClientId>,
    pub group: Option<u32>,
    /// Inclusive epoch range.
    pub epochs: Option<(u32, u32)>,
}

impl RecordFilter {
    pub fn owner(mut self, id: ClientId) -> Self {
        self.owner = Some(id);
        self
    }

    pub fn sender(mut self, id: ClientId) -> Self {
        self.sender = Some(id);
        self
    }

    pub fn group(mut self, group: u32) -> Self {
        self.group = Some(group);
        self
    }

    pub fn epoch(self, epoch: u32) -> Self {
        self.epochs(epoch, epoch)
    }

    pub fn epochs(mut self, first: u32, last: u32) -> Self {
        self.epochs = Some((first, last));
        self
    }

    pub fn matches(&self, key: &RecordKey) -> bool {
        self.owner.is_none_or(|o| key.owner == o)
            && self.sender.is_none_or(|s| key.sender == s)
            && self.group.is_none_or(|g| key.group == g)
            && self
                .epochs
                .is_none_or(|(a, b)| (a..=b).contains(&key.epoch))
    }
}

/// Append-only record store, optionally backed by a file.
#[derive(Debug)]
pub struct RecordStore {
    p: u64,
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    records: Vec<EncryptedGradientRecord>,
    index: BTreeMap<RecordKey, usize>,
}

impl RecordStore {
    pub fn in_memory(p: u64) -> Self {
        Self {
            p,
            path: None,
            writer: None,
            records: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Creates (truncating) a record file and writes its header.
    pub fn create(path: &Path, p: u64) -> Result<Self, VaultError> {
        let mut file = File::create(path)?;
        file.write_all(&encode_header(p))?;
        file.flush()?;
        Ok(Self {
            p,
            path: Some(path.to_path_buf()),
            writer: Some(BufWriter::new(file)),
            records: Vec::new(),
            index: BTreeMap::new(),
        })
    }

    /// Re-reads an existing record file; later appends go to the same file.
    pub fn open(path: &Path) -> Result<Self, VaultError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut reader = Reader::new(&bytes, path);
        let p = reader.header()?;
        let mut store = Self::in_memory(p);
        while !reader.at_end() {
            let key = RecordKey {
                owner: ClientId(reader.u32()?),
                epoch: reader.u32()?,
                group: reader.u32()?,
                sender: ClientId(reader.u32()?),
            };
            let record = EncryptedGradientRecord {
                key,
                nonce: reader.prefixed()?,
                ciphertext: reader.prefixed()?,
                tag: reader.prefixed()?,
            };
            store.insert(record)?;
        }
        let file = OpenOptions::new().append(true).open(path)?;
        store.path = Some(path.to_path_buf());
        store.writer = Some(BufWriter::new(file));
        Ok(store)
    }

    pub fn prime(&self) -> u64 {
        self.p
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn insert(&mut self, record: EncryptedGradientRecord) -> Result<(), VaultError> {
        if self.index.contains_key(&record.key) {
            return Err(VaultError::DuplicateRecord(record.key));
        }
        self.index.insert(record.key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Appends a record, persisting it before returning when file-backed.
    pub fn store_record(&mut self, record: EncryptedGradientRecord) -> Result<(), VaultError> {
        if self.index.contains_key(&record.key) {
            return Err(VaultError::DuplicateRecord(record.key));
        }
        if let Some(w) = self.writer.as_mut() {
            w.write_all(&encode_record(&record))?;
            w.flush()?;
        }
        self.insert(record)
    }

    pub fn get(&self, key: &RecordKey) -> Option<&EncryptedGradientRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    /// Matching records in append order.
    pub fn fetch(&self, filter: &RecordFilter) -> Vec<&EncryptedGradientRecord> {
        self.records
            .iter()
            .filter(|r| filter.matches(&r.key))
            .collect()
    }

    pub fn records(&self) -> &[EncryptedGradientRecord] {
        &self.records
    }

    /// Total bytes of ciphertext, nonces and tags held for `owner`.
    pub fn bytes_for_owner(&self, owner: ClientId) -> usize {
        self.fetch(&RecordFilter::default().owner(owner))
            .iter()
            .map(|r| r.nonce.len() + r.ciphertext.len() + r.tag.len())
            .sum()
    }
}
