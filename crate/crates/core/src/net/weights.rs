//! The weights file: `MGRNDWTS`, version u32, entry count u32, then per
//! entry a u16-length UTF-8 layer name, u16 blob index, four u32 dims and
//! the little-endian f32 values. All integers are little-endian.

use std::io::Write;
use std::path::Path;

use crate::tensor::Shape4;
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MGRNDWTS";
pub const WEIGHTS_VERSION: u32 = 1;
/// Magic of the solver section that may follow a weights payload.
pub const SOLVER_MAGIC: &[u8; 8] = b"MGRNDSLV";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub layer: String,
    pub index: u16,
    pub shape: Shape4,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsFile {
    pub entries: Vec<WeightEntry>,
}

impl WeightsFile {
    pub fn get(&self, layer: &str, index: u16) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.index == index)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("writing weights", e);
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many weight entries".into()))?;
        w.write_all(WEIGHTS_MAGIC).map_err(io)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&count.to_le_bytes()).map_err(io)?;
        for e in &self.entries {
            let name_len = u16::try_from(e.layer.len())
                .map_err(|_| Error::Format(format!("layer name `{}` is too long", e.layer)))?;
            if e.data.len() != e.shape.count() {
                return Err(Error::Format(format!(
                    "entry {}[{}] holds {} values for shape {}",
                    e.layer,
                    e.index,
                    e.data.len(),
                    e.shape
                )));
            }
            w.write_all(&name_len.to_le_bytes()).map_err(io)?;
            w.write_all(e.layer.as_bytes()).map_err(io)?;
            w.write_all(&e.index.to_le_bytes()).map_err(io)?;
            for d in e.shape.dims() {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
                w.write_all(&d.to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(e.data.len() * 4);
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    /// Decodes a weights payload at the start of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(WeightsFile, usize)> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8, "magic")? != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!(
                "weights format version {version}, expected {WEIGHTS_VERSION}"
            )));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let layer = std::str::from_utf8(r.take(len, "layer name")?)
                .map_err(|_| Error::Format("layer name is not UTF-8".into()))?
                .to_string();
            let index = r.u16("blob index")?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("dimension")? as usize;
            }
            let shape = Shape4::from(dims);
            let n = shape
                .checked_count()
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("entry {layer}[{index}] shape {shape} overflows")))?;
            let raw = r.take(n, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(WeightEntry {
                layer,
                index,
                shape,
                data,
            });
        }
        Ok((WeightsFile { entries }, r.at))
    }

    /// Decodes a whole file: a weights payload, optionally followed by a
    /// solver section (so snapshots load as weights).
    pub fn decode(bytes: &[u8]) -> Result<WeightsFile> {
        let (w, used) = Self::decode_prefix(bytes)?;
        let rest = &bytes[used..];
        if !rest.is_empty() && !rest.starts_with(SOLVER_MAGIC) {
            return Err(Error::Format(format!("{} unexpected trailing bytes", rest.len())));
        }
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<WeightsFile> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub at: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightsFile {
        WeightsFile {
            entries: vec![
                WeightEntry {
                    layer: "conv1".into(),
                    index: 0,
                    shape: Shape4::new(2, 1, 1, 2),
                    data: vec![1.0, -2.5, f32::MIN_POSITIVE, 3e7],
                },
                WeightEntry {
                    layer: "conv1".into(),
                    index: 1,
                    shape: Shape4::new(2, 1, 1, 1),
                    data: vec![0.0, -0.0],
                },
            ],
        }
    }

    #[test]
    fn layout_is_exact() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..8], b"MGRNDWTS");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..18], &5u16.to_le_bytes());
        assert_eq!(&bytes[18..23], b"conv1");
        assert_eq!(&bytes[23..25], &0u16.to_le_bytes());
        assert_eq!(&bytes[25..29], &2u32.to_le_bytes());
        assert_eq!(&bytes[41..45], &1.0f32.to_le_bytes());
        let entry = 2 + 5 + 2 + 16;
        assert_eq!(bytes.len(), 16 + 2 * entry + 4 * 4 + 2 * 4);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = sample();
        let bytes = w.encode().unwrap();
        let back = WeightsFile::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.entries[1].data[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightsFile::decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(WeightsFile::decode(&bad).unwrap_err().to_string().contains("version"));
        for cut in [0, 7, 15, 20, bytes.len() - 1] {
            assert!(WeightsFile::decode(&bytes[..cut]).unwrap_err().to_string().contains("truncated"));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WeightsFile::decode(&extra).is_err());
        let mut snap = bytes.clone();
        snap.extend_from_slice(b"MGRNDSLV...");
        assert_eq!(WeightsFile::decode(&snap).unwrap(), sample());
    }
}
