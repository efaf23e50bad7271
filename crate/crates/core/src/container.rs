//! Binary dataset containers and JSON manifests.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "CSQ1" (52-sample CSI) or "IQF1" (320-sample IQ / features)
//! version      u16
//! frame_count  u32
//! frame_length u16
//! frames       frame_count x { device_id: u32, frame_length x (re: f32, im: f32) }
//! ```
//!
//! Samples are stored as `f32`; everything upstream computes in `f64`, so a
//! save/load cycle quantises values to single precision.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{NUM_SUBCARRIERS, PREAMBLE_LEN};

pub const CONTAINER_VERSION: u16 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainerKind {
    Csi,
    Iq,
}

impl ContainerKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            ContainerKind::Csi => b"CSQ1",
            ContainerKind::Iq => b"IQF1",
        }
    }

    pub fn frame_length(self) -> usize {
        match self {
            ContainerKind::Csi => NUM_SUBCARRIERS,
            ContainerKind::Iq => PREAMBLE_LEN,
        }
    }

    fn from_magic(magic: &[u8]) -> Result<Self> {
        match magic {
            b"CSQ1" => Ok(ContainerKind::Csi),
            b"IQF1" => Ok(ContainerKind::Iq),
            other => Err(Error::Format(format!("unknown magic {:?}", String::from_utf8_lossy(other)))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerFrame {
    pub device_id: u32,
    pub samples: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub kind: ContainerKind,
    pub frames: Vec<ContainerFrame>,
}

impl DatasetContainer {
    pub fn new(kind: ContainerKind) -> Self {
        Self {
            kind,
            frames: Vec::new(),
        }
    }

    pub fn push(&mut self, device_id: u32, samples: Vec<Complex64>) -> Result<()> {
        if samples.len() != self.kind.frame_length() {
            return Err(Error::Format(format!(
                "{:?} container frames hold {} samples, got {}",
                self.kind,
                self.kind.frame_length(),
                samples.len()
            )));
        }
        self.frames.push(ContainerFrame { device_id, samples });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.frames.iter().map(|f| f.device_id).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let frame_count = u32::try_from(self.frames.len())
            .map_err(|_| Error::Format("too many frames for a u32 count".into()))?;
        let frame_length = self.kind.frame_length();
        w.write_all(self.kind.magic())?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&frame_count.to_le_bytes())?;
        w.write_all(&(frame_length as u16).to_le_bytes())?;
        for frame in &self.frames {
            if frame.samples.len() != frame_length {
                return Err(Error::Format("frame length does not match container kind".into()));
            }
            w.write_all(&frame.device_id.to_le_bytes())?;
            for s in &frame.samples {
                w.write_all(&(s.re as f32).to_le_bytes())?;
                w.write_all(&(s.im as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let header = read_header(&mut r)?;
        let frame_length = header.kind.frame_length();
        let mut frames = Vec::with_capacity(header.frame_count as usize);
        let mut buf = vec![0u8; 4 + 8 * frame_length];
        for i in 0..header.frame_count {
            r.read_exact(&mut buf).map_err(|_| {
                Error::Format(format!(
                    "body truncated at frame {i} of {} declared",
                    header.frame_count
                ))
            })?;
            let device_id = u32::from_le_bytes(buf[0..4].try_into().unwrap());
            let samples = buf[4..]
                .chunks_exact(8)
                .map(|c| {
                    let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
                    let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
                    Complex64::new(re as f64, im as f64)
                })
                .collect();
            frames.push(ContainerFrame { device_id, samples });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format(format!(
                "body holds more than the {} declared frames",
                header.frame_count
            )));
        }
        Ok(Self {
            kind: header.kind,
            frames,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Self::read_from(BufReader::new(file))
    }

    /// Reads `device_id, re, im, re, im, ...` rows.
    pub fn from_csv<R: Read>(kind: ContainerKind, r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut out = Self::new(kind);
        for (row_idx, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Format(format!("CSV row {row_idx}: {e}")))?;
            let expected = 1 + 2 * kind.frame_length();
            if record.len() != expected {
                return Err(Error::Format(format!(
                    "CSV row {row_idx}: expected {expected} columns, got {}",
                    record.len()
                )));
            }
            let device_id: u32 = record[0]
                .parse()
                .map_err(|e| Error::Format(format!("CSV row {row_idx}: device id: {e}")))?;
            let mut values = Vec::with_capacity(expected - 1);
            for field in record.iter().skip(1) {
                let v: f32 = field
                    .parse()
                    .map_err(|e| Error::Format(format!("CSV row {row_idx}: {e}")))?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("CSV row {row_idx}: non-finite sample")));
                }
                values.push(v as f64);
            }
            let samples = values.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
            out.push(device_id, samples)?;
        }
        Ok(out)
    }

    /// Writes rows in the [`from_csv`](Self::from_csv) layout using the
    /// shortest `f32` representation, so re-importing is bit-exact.
    pub fn to_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for frame in &self.frames {
            let mut row = Vec::with_capacity(1 + 2 * frame.samples.len());
            row.push(frame.device_id.to_string());
            for s in &frame.samples {
                row.push((s.re as f32).to_string());
                row.push((s.im as f32).to_string());
            }
            writer
                .write_record(&row)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub kind: ContainerKind,
    pub version: u16,
    pub frame_count: u32,
    pub frame_length: u16,
}

fn read_header<R: Read>(r: &mut R) -> Result<ContainerHeader> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("file shorter than the 12-byte header".into()))?;
    let kind = ContainerKind::from_magic(&header[0..4])?;
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let frame_count = u32::from_le_bytes(header[6..10].try_into().unwrap());
    let frame_length = u16::from_le_bytes([header[10], header[11]]);
    if frame_length as usize != kind.frame_length() {
        return Err(Error::Format(format!(
            "{} container declares frame length {frame_length}, expected {}",
            String::from_utf8_lossy(kind.magic()),
            kind.frame_length()
        )));
    }
    Ok(ContainerHeader {
        kind,
        version,
        frame_count,
        frame_length,
    })
}

/// Validates the header and that the file size matches the declared body.
pub fn validate_file(path: impl AsRef<Path>) -> Result<ContainerHeader> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let header = read_header(&mut file)?;
    let expected = HEADER_LEN as u64
        + header.frame_count as u64 * (4 + 8 * header.frame_length as u64);
    let actual = file.metadata()?.len();
    if actual != expected {
        return Err(Error::Format(format!(
            "{}: size {actual} bytes, header implies {expected}",
            path.display()
        )));
    }
    Ok(header)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Aligned IQ and CSI containers from one simulation.
    Paired,
    Csi,
    Iq,
    Features,
}

/// JSON description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub device_labels: Vec<u32>,
    pub frames_per_device: BTreeMap<u32, usize>,
    pub seed: u64,
    pub config_hash: String,
    /// Role (`"iq"`, `"csi"`, ...) to path, relative to the manifest.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that every referenced file exists under `base` and carries a
    /// valid header whose frame count matches the manifest totals.
    pub fn validate(&self, base: impl AsRef<Path>) -> Result<()> {
        let total: usize = self.frames_per_device.values().sum();
        for (role, rel) in &self.files {
            let header = validate_file(base.as_ref().join(rel))?;
            if header.frame_count as usize != total {
                return Err(Error::Format(format!(
                    "{role} container holds {} frames, manifest lists {total}",
                    header.frame_count
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_container(kind: ContainerKind, frames: usize) -> DatasetContainer {
        let mut c = DatasetContainer::new(kind);
        for f in 0..frames {
            let samples = (0..kind.frame_length())
                .map(|n| Complex64::new(n as f64 * 0.25, -(f as f64) - 0.5))
                .collect();
            c.push(f as u32 % 3, samples).unwrap();
        }
        c
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let mut buf = Vec::new();
        sample_container(ContainerKind::Csi, 2).write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"CSQ1");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[2, 0, 0, 0]);
        assert_eq!(&buf[10..12], &[52, 0]);
        assert_eq!(buf.len(), 12 + 2 * (4 + 52 * 8));
        // Second frame: device id 1, first sample (0.0, -1.5).
        let off = 12 + 4 + 52 * 8;
        assert_eq!(&buf[off..off + 4], &[1, 0, 0, 0]);
        assert_eq!(&buf[off + 4..off + 8], &0f32.to_le_bytes());
        assert_eq!(&buf[off + 8..off + 12], &(-1.5f32).to_le_bytes());
    }

    #[test]
    fn round_trip_through_bytes() {
        let c = sample_container(ContainerKind::Iq, 3);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(DatasetContainer::read_from(&buf[..]).unwrap(), c);
    }

    #[test]
    fn truncated_and_padded_bodies_are_rejected() {
        let mut buf = Vec::new();
        sample_container(ContainerKind::Csi, 2).write_to(&mut buf).unwrap();
        assert!(matches!(
            DatasetContainer::read_from(&buf[..buf.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut padded = buf.clone();
        padded.push(0);
        assert!(DatasetContainer::read_from(&padded[..]).is_err());
    }

    #[test]
    fn magic_and_length_must_agree() {
        let mut buf = Vec::new();
        sample_container(ContainerKind::Csi, 1).write_to(&mut buf).unwrap();
        buf[0..4].copy_from_slice(b"IQF1");
        assert!(DatasetContainer::read_from(&buf[..]).is_err());
        buf[0..4].copy_from_slice(b"XXXX");
        assert!(DatasetContainer::read_from(&buf[..]).is_err());
    }

    #[test]
    fn push_checks_frame_length() {
        let mut c = DatasetContainer::new(ContainerKind::Csi);
        assert!(c.push(0, vec![Complex64::new(0.0, 0.0); 320]).is_err());
    }

    #[test]
    fn csv_rejects_wrong_width() {
        let text = "0,1.0,2.0\n";
        assert!(DatasetContainer::from_csv(ContainerKind::Csi, text.as_bytes()).is_err());
    }

    #[test]
    fn manifest_validation_checks_counts() {
        let dir = std::env::temp_dir().join(format!("csi2q-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        sample_container(ContainerKind::Csi, 4).save(dir.join("csi.bin")).unwrap();
        let mut m = Manifest {
            kind: DatasetKind::Csi,
            device_labels: vec![0, 1],
            frames_per_device: [(0, 2), (1, 2)].into_iter().collect(),
            seed: 1,
            config_hash: String::new(),
            files: [("csi".to_string(), "csi.bin".to_string())].into_iter().collect(),
        };
        m.validate(&dir).unwrap();
        m.frames_per_device.insert(1, 3);
        assert!(m.validate(&dir).is_err());
        m.files.insert("iq".into(), "missing.bin".into());
        assert!(m.validate(&dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn csv_export_reimports_bit_exact(values in prop::collection::vec(-1e6f32..1e6f32, 104), id in 0u32..1000) {
            let row: Vec<String> = std::iter::once(id.to_string())
                .chain(values.iter().map(|v| v.to_string()))
                .collect();
            let text = row.join(",") + "\n";
            let c = DatasetContainer::from_csv(ContainerKind::Csi, text.as_bytes()).unwrap();
            let mut out = Vec::new();
            c.to_csv(&mut out).unwrap();
            let back = DatasetContainer::from_csv(ContainerKind::Csi, &out[..]).unwrap();
            prop_assert_eq!(&back, &c);
            for (s, pair) in c.frames[0].samples.iter().zip(values.chunks(2)) {
                prop_assert_eq!((s.re as f32).to_bits(), pair[0].to_bits());
                prop_assert_eq!((s.im as f32).to_bits(), pair[1].to_bits());
            }
        }
    }
}
