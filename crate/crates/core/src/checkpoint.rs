//! Self-describing checkpoint container and atomic file writes.
//!
//! A checkpoint is one file: a plain-text manifest (format line, `field`
//! lines for scalar metadata, `array`/`blob` lines naming each payload with
//! shape, dtype, and byte offsets), a `@@DATA` marker, then the binary
//! payloads — arrays as little-endian 64-bit floats, blobs verbatim. Storing
//! parameters at 64 bits makes save→load round-trips bit-exact, which the
//! persistence tests rely on.
//!
//! All file writes go through [`atomic_write`]: content lands in a temp file
//! in the destination directory and is renamed into place, so a failed write
//! never leaves a partial artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "memcast-checkpoint v1";
const DATA_MARKER: &str = "@@DATA";

/// A named 64-bit float array with its logical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory checkpoint: ordered scalar fields plus named payloads.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    fields: BTreeMap<String, String>,
    arrays: Vec<NamedArray>,
    blobs: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    /// Sets a scalar manifest field (config echo, counters, ...).
    pub fn set_field(&mut self, key: &str, value: impl ToString) {
        self.fields.insert(key.to_string(), value.to_string());
    }

    /// Reads a scalar manifest field.
    pub fn field(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Persistence(format!("checkpoint field {key:?} missing")))
    }

    /// Parses a scalar manifest field into any `FromStr` type.
    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.field(key)?.parse().map_err(|_| {
            Error::Persistence(format!("checkpoint field {key:?} has unparsable value"))
        })
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &str)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Stores a named array. Names must be unique and space-free.
    pub fn add_array(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert!(!name.contains(char::is_whitespace));
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray { name: name.to_string(), shape, data });
    }

    /// Looks up a named array.
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Persistence(format!("checkpoint array {name:?} missing")))
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    /// Stores an opaque byte payload (e.g. a serialized memory state).
    pub fn add_blob(&mut self, name: &str, bytes: Vec<u8>) {
        debug_assert!(!name.contains(char::is_whitespace));
        self.blobs.push((name.to_string(), bytes));
    }

    /// Looks up an opaque byte payload.
    pub fn blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::Persistence(format!("checkpoint blob {name:?} missing")))
    }

    /// Serializes manifest + payloads into one byte buffer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let _ = writeln!(manifest, "{MAGIC}");
        for (k, v) in &self.fields {
            let _ = writeln!(manifest, "field {k} = {v}");
        }
        let mut offset = 0usize;
        for a in &self.arrays {
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            let bytes = a.data.len() * 8;
            let _ = writeln!(
                manifest,
                "array {} f64le {} {offset} {bytes}",
                a.name,
                dims.join("x")
            );
            offset += bytes;
        }
        for (name, bytes) in &self.blobs {
            let _ = writeln!(manifest, "blob {name} {offset} {}", bytes.len());
            offset += bytes.len();
        }
        let _ = writeln!(manifest, "{DATA_MARKER}");

        let mut out = manifest.into_bytes();
        out.reserve(offset);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (_, bytes) in &self.blobs {
            out.extend_from_slice(bytes);
        }
        out
    }

    /// Parses a buffer produced by [`Checkpoint::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Persistence(format!("malformed checkpoint: {msg}"));
        let marker = format!("{DATA_MARKER}\n");
        let data_start = find_subslice(bytes, marker.as_bytes())
            .ok_or_else(|| bad("no data marker"))?
            + marker.len();
        let manifest = std::str::from_utf8(&bytes[..data_start])
            .map_err(|_| bad("manifest is not UTF-8"))?;
        let data = &bytes[data_start..];

        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("unrecognized format line"));
        }
        let mut ckpt = Checkpoint::new();
        for line in lines {
            if line == DATA_MARKER {
                break;
            }
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match kind {
                "field" => {
                    let (k, v) = rest
                        .split_once(" = ")
                        .ok_or_else(|| bad("field line without ' = '"))?;
                    ckpt.fields.insert(k.to_string(), v.to_string());
                }
                "array" => {
                    let toks: Vec<&str> = rest.split(' ').collect();
                    if toks.len() != 5 || toks[1] != "f64le" {
                        return Err(bad("array line malformed"));
                    }
                    let name = toks[0].to_string();
                    let shape: Vec<usize> = toks[2]
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("array shape malformed")))
                        .collect::<Result<_>>()?;
                    let offset: usize =
                        toks[3].parse().map_err(|_| bad("array offset malformed"))?;
                    let len: usize = toks[4].parse().map_err(|_| bad("array length malformed"))?;
                    if len % 8 != 0 || shape.iter().product::<usize>() * 8 != len {
                        return Err(bad("array shape disagrees with byte length"));
                    }
                    let end = offset.checked_add(len).ok_or_else(|| bad("array range overflows"))?;
                    if end > data.len() {
                        return Err(bad("array data truncated"));
                    }
                    let values: Vec<f64> = data[offset..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ckpt.arrays.push(NamedArray { name, shape, data: values });
                }
                "blob" => {
                    let toks: Vec<&str> = rest.split(' ').collect();
                    if toks.len() != 3 {
                        return Err(bad("blob line malformed"));
                    }
                    let offset: usize =
                        toks[1].parse().map_err(|_| bad("blob offset malformed"))?;
                    let len: usize = toks[2].parse().map_err(|_| bad("blob length malformed"))?;
                    let end = offset.checked_add(len).ok_or_else(|| bad("blob range overflows"))?;
                    if end > data.len() {
                        return Err(bad("blob data truncated"));
                    }
                    ckpt.blobs.push((toks[0].to_string(), data[offset..end].to_vec()));
                }
                "" => {}
                other => return Err(bad(&format!("unknown manifest entry {other:?}"))),
            }
        }
        Ok(ckpt)
    }

    /// Writes the checkpoint to `path` atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    /// Loads a checkpoint file.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Persistence(format!("cannot read checkpoint {path:?}: {e}")))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Writes `bytes` to `path` via a temp file in the same directory plus a
/// rename, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::Persistence(format!("cannot create temp file in {dir:?}: {e}")))?;
    tmp.write_all(bytes)
        .map_err(|e| Error::Persistence(format!("cannot write {path:?}: {e}")))?;
    tmp.persist(path)
        .map_err(|e| Error::Persistence(format!("cannot finalize {path:?}: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_field("model.d_model", 64);
        c.set_field("note", "spaces are fine = even equals");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        c.add_array("enc.w_q", vec![3, 4], data);
        c.add_array("bias", vec![4], vec![0.0, -0.0, f64::MIN_POSITIVE, 1e300]);
        c.add_blob("memory", vec![0xDE, 0xAD, 0xBE, 0xEF, 0x00, 0x0A, 0x40]);
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.field("model.d_model").unwrap(), "64");
        assert_eq!(back.field("note").unwrap(), "spaces are fine = even equals");
        let a = back.array("enc.w_q").unwrap();
        assert_eq!(a.shape, vec![3, 4]);
        let orig = c.array("enc.w_q").unwrap();
        for (x, y) in orig.data.iter().zip(a.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Signed zero and extreme magnitudes survive exactly.
        let b = back.array("bias").unwrap();
        assert_eq!(b.data[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(b.data[3], 1e300);
        assert_eq!(back.blob("memory").unwrap(), c.blob("memory").unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn truncated_bytes_are_a_persistence_error() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 20, 10] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Persistence(_)), "cut={cut} got {err}");
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Persistence(_)));
    }

    #[test]
    fn missing_names_are_errors() {
        let c = sample();
        assert!(c.array("nope").is_err());
        assert!(c.blob("nope").is_err());
        assert!(c.field("nope").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_partial_file_on_bad_target() {
        let dir = tempfile::tempdir().unwrap();
        let missing_parent = dir.path().join("no_such_dir").join("x.ckpt");
        assert!(atomic_write(&missing_parent, b"data").is_err());
        assert!(!missing_parent.exists());
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
    }
}
