//! MetaImage (`.mhd` + raw payload, or single-file `LOCAL`) and headerless float I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dims, Volume3};
use crate::error::{Error, Result};

/// On-disk layout for a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    /// MetaImage header with a sibling raw payload (`ElementDataFile`).
    Mhd,
    /// Bare little-endian 32-bit floats; dims are supplied by the caller.
    RawF32 { dims: Dims },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
}

impl ElementType {
    pub fn bytes(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataFile {
    Local,
    Path(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhdHeader {
    pub dims: Dims,
    pub element_type: ElementType,
    pub spacing: [f64; 3],
    pub offset: [f64; 3],
    pub channels: usize,
    pub data_file: DataFile,
}

impl MhdHeader {
    pub fn new(dims: Dims, spacing: [f64; 3], offset: [f64; 3], channels: usize, data_file: DataFile) -> Self {
        MhdHeader {
            dims,
            element_type: ElementType::Float,
            spacing,
            offset,
            channels,
            data_file,
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.dims.len() * self.channels * self.element_type.bytes()) as u64
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut ndims = None;
        let mut dims = None;
        let mut element_type = None;
        let mut spacing = [1.0f64; 3];
        let mut offset = [0.0f64; 3];
        let mut channels = 1usize;
        let mut data_file = None;

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(origin, line, "expected `Key = Value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "ObjectType" if value != "Image" => {
                    return Err(Error::format(origin, key, format!("unsupported object type {value}")));
                }
                "NDims" => ndims = Some(parse_num::<usize>(origin, key, value)?),
                "DimSize" => {
                    let d = parse_triple::<usize>(origin, key, value)?;
                    dims = Some(Dims::from(d));
                }
                "ElementType" => {
                    element_type = Some(match value {
                        "MET_SHORT" => ElementType::Short,
                        "MET_FLOAT" => ElementType::Float,
                        other => {
                            return Err(Error::format(origin, key, format!("unsupported element type {other}")))
                        }
                    })
                }
                "ElementSpacing" | "ElementSize" => spacing = parse_triple(origin, key, value)?,
                "Offset" | "Origin" | "Position" => offset = parse_triple(origin, key, value)?,
                "ElementNumberOfChannels" => channels = parse_num(origin, key, value)?,
                "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => {
                    if !value.eq_ignore_ascii_case("false") {
                        return Err(Error::format(origin, key, "only little-endian payloads are supported"));
                    }
                }
                "ElementDataFile" => {
                    data_file = Some(if value == "LOCAL" {
                        DataFile::Local
                    } else {
                        DataFile::Path(value.to_string())
                    });
                    // MetaImage places the payload directly after this key.
                    break;
                }
                _ => {}
            }
        }

        match ndims {
            Some(3) => {}
            Some(n) => return Err(Error::format(origin, "NDims", format!("expected 3, found {n}"))),
            None => return Err(Error::format(origin, "NDims", "missing")),
        }
        let dims = dims.ok_or_else(|| Error::format(origin, "DimSize", "missing"))?;
        if dims.as_array().iter().any(|&n| n < 2) {
            return Err(Error::format(origin, "DimSize", format!("{dims} has an extent below 2")));
        }
        if channels == 0 {
            return Err(Error::format(origin, "ElementNumberOfChannels", "must be positive"));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::format(origin, "ElementSpacing", "must be positive"));
        }
        Ok(MhdHeader {
            dims,
            element_type: element_type.ok_or_else(|| Error::format(origin, "ElementType", "missing"))?,
            spacing,
            offset,
            channels,
            data_file: data_file.ok_or_else(|| Error::format(origin, "ElementDataFile", "missing"))?,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let d = self.dims;
        let [sx, sy, sz] = self.spacing;
        let [ox, oy, oz] = self.offset;
        let _ = writeln!(s, "ObjectType = Image");
        let _ = writeln!(s, "NDims = 3");
        let _ = writeln!(s, "BinaryData = True");
        let _ = writeln!(s, "ElementByteOrderMSB = False");
        let _ = writeln!(s, "Offset = {ox} {oy} {oz}");
        let _ = writeln!(s, "ElementSpacing = {sx} {sy} {sz}");
        let _ = writeln!(s, "DimSize = {} {} {}", d.nx, d.ny, d.nz);
        if self.channels != 1 {
            let _ = writeln!(s, "ElementNumberOfChannels = {}", self.channels);
        }
        let _ = writeln!(s, "ElementType = {}", self.element_type.tag());
        let file = match &self.data_file {
            DataFile::Local => "LOCAL",
            DataFile::Path(p) => p.as_str(),
        };
        let _ = writeln!(s, "ElementDataFile = {file}");
        s
    }

    /// Decode a payload into f32 values, checking its size first.
    pub fn decode_payload(&self, bytes: &[u8], origin: &Path) -> Result<Vec<f32>> {
        let expected = self.payload_bytes();
        if bytes.len() as u64 != expected {
            return Err(Error::Size {
                path: origin.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        Ok(match self.element_type {
            ElementType::Short => bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect(),
            ElementType::Float => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        })
    }
}

pub(crate) fn f32_payload(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

fn parse_num<T: std::str::FromStr>(origin: &Path, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(origin, key, format!("cannot parse `{value}`")))
}

fn parse_triple<T: std::str::FromStr + Copy>(origin: &Path, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(origin, key, format!("expected 3 values, found {}", parts.len())));
    }
    Ok([
        parse_num(origin, key, parts[0])?,
        parse_num(origin, key, parts[1])?,
        parse_num(origin, key, parts[2])?,
    ])
}

/// Split a header + payload buffer. Returns the header text and the payload slice.
pub(crate) fn split_local(bytes: &[u8], origin: &Path) -> Result<(String, Option<usize>)> {
    let mut pos = 0;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| pos + i + 1);
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::format(origin, "header", "not valid UTF-8"))?;
        if line.trim_start().starts_with("ElementDataFile") {
            let header = std::str::from_utf8(&bytes[..end]).expect("validated line by line");
            return Ok((header.to_string(), Some(end)));
        }
        pos = end;
    }
    let header = std::str::from_utf8(bytes).map_err(|_| Error::format(origin, "header", "not valid UTF-8"))?;
    Ok((header.to_string(), None))
}

/// Read a header (and its payload) from disk. Returns the header and decoded values.
pub(crate) fn read_mhd(path: &Path) -> Result<(MhdHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (text, payload_start) = split_local(&bytes, path)?;
    let header = MhdHeader::parse(&text, path)?;
    let values = match &header.data_file {
        DataFile::Local => {
            let start = payload_start.unwrap_or(bytes.len());
            header.decode_payload(&bytes[start..], path)?
        }
        DataFile::Path(rel) => {
            let data_path = path.parent().unwrap_or(Path::new(".")).join(rel);
            let payload = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
            header.decode_payload(&payload, &data_path)?
        }
    };
    Ok((header, values))
}

/// Write `header` + payload; the payload goes next to the header as `<stem>.raw`.
pub(crate) fn write_mhd(path: &Path, mut header: MhdHeader, payload: &[u8]) -> Result<()> {
    let raw_path = raw_sibling(path);
    let raw_name = raw_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::argument("path", format!("{} has no file name", path.display())))?;
    header.data_file = DataFile::Path(raw_name);
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header.render()).map_err(|e| Error::io(path, e))
}

pub fn raw_sibling(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

pub fn load_volume(path: impl AsRef<Path>, format: VolumeFormat) -> Result<Volume3> {
    let path = path.as_ref();
    match format {
        VolumeFormat::Mhd => {
            let (h, values) = read_mhd(path)?;
            if h.channels != 1 {
                return Err(Error::format(path, "ElementNumberOfChannels", "volumes must have one channel"));
            }
            Volume3::with_geometry(h.dims, h.spacing, h.offset, values)
                .map_err(|e| Error::format(path, "data", e.to_string()))
        }
        VolumeFormat::RawF32 { dims } => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let header = MhdHeader::new(dims, [1.0; 3], [0.0; 3], 1, DataFile::Local);
            let values = header.decode_payload(&bytes, path)?;
            Volume3::new(dims, values).map_err(|e| Error::format(path, "data", e.to_string()))
        }
    }
}

pub fn save_volume(v: &Volume3, path: impl AsRef<Path>, format: VolumeFormat) -> Result<()> {
    let path = path.as_ref();
    let payload = f32_payload(v.data().iter().copied());
    match format {
        VolumeFormat::Mhd => {
            let header = MhdHeader::new(v.dims(), v.spacing_mm(), v.origin_mm(), 1, DataFile::Local);
            write_mhd(path, header, &payload)
        }
        VolumeFormat::RawF32 { dims } => {
            v.dims().ensure_same(&dims)?;
            fs::write(path, payload).map_err(|e| Error::io(path, e))
        }
    }
}

/// Single-buffer MetaImage (`ElementDataFile = LOCAL`), used for uploads and downloads.
pub fn encode_mha(v: &Volume3) -> Vec<u8> {
    let header = MhdHeader::new(v.dims(), v.spacing_mm(), v.origin_mm(), 1, DataFile::Local);
    let mut out = header.render().into_bytes();
    out.extend(f32_payload(v.data().iter().copied()));
    out
}

pub fn decode_mha(bytes: &[u8], label: &str) -> Result<Volume3> {
    let origin = Path::new(label);
    let (text, start) = split_local(bytes, origin)?;
    let h = MhdHeader::parse(&text, origin)?;
    if h.data_file != DataFile::Local {
        return Err(Error::format(origin, "ElementDataFile", "in-memory volumes must use LOCAL"));
    }
    if h.channels != 1 {
        return Err(Error::format(origin, "ElementNumberOfChannels", "volumes must have one channel"));
    }
    let values = h.decode_payload(&bytes[start.unwrap_or(bytes.len())..], origin)?;
    Volume3::with_geometry(h.dims, h.spacing, h.offset, values).map_err(|e| Error::format(origin, "data", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_header(dir: &Path, body: &str, payload: &[u8]) -> PathBuf {
        let p = dir.join("v.mhd");
        fs::write(&p, body).unwrap();
        fs::write(dir.join("v.raw"), payload).unwrap();
        p
    }

    const SHORT_4: &str = "NDims = 3\nDimSize = 4 4 4\nElementType = MET_SHORT\nElementSpacing = 1 1 2\nElementByteOrderMSB = False\nElementDataFile = v.raw\n";

    #[test]
    fn loads_int16_volume() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..64i16).flat_map(|v| (v * 10 - 300).to_le_bytes()).collect();
        assert_eq!(payload.len(), 128);
        let p = write_header(dir.path(), SHORT_4, &payload);
        let v = load_volume(&p, VolumeFormat::Mhd).unwrap();
        assert_eq!(v.data().len(), 64);
        assert_eq!(v.spacing_mm(), [1.0, 1.0, 2.0]);
        assert_eq!(v.get(3, 0, 0), -270.0);
        assert_eq!(v.get(3, 3, 3), 330.0);
    }

    #[test]
    fn size_mismatch_reports_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(dir.path(), SHORT_4, &[0u8; 100]);
        match load_volume(&p, VolumeFormat::Mhd) {
            Err(Error::Size { expected, actual, .. }) => assert_eq!((expected, actual), (128, 100)),
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn garbled_fields_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("NDims = 3\nDimSize = 4 4\nElementType = MET_FLOAT\nElementDataFile = v.raw\n", "DimSize"),
            ("NDims = 3\nDimSize = 4 4 4\nElementType = MET_UCHAR\nElementDataFile = v.raw\n", "ElementType"),
            ("NDims = 3\nDimSize = 4 4 4\nElementDataFile = v.raw\n", "ElementType"),
            ("DimSize = 4 4 4\nElementType = MET_FLOAT\nElementDataFile = v.raw\n", "NDims"),
            ("NDims = 3\nDimSize = 4 4 4\nElementType = MET_FLOAT\nElementSpacing = 1 x 1\nElementDataFile = v.raw\n", "ElementSpacing"),
            ("NDims = 3\nDimSize = 4 4 4\nElementType = MET_FLOAT\n", "ElementDataFile"),
        ];
        for (body, field) in cases {
            let p = write_header(dir.path(), body, &[0u8; 256]);
            match load_volume(&p, VolumeFormat::Mhd) {
                Err(Error::Format { field: f, .. }) => assert_eq!(f, field, "{body}"),
                other => panic!("expected format error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let zero = Volume3::filled(Dims::cube(2), 0.0).unwrap();
        let p = dir.path().join("zero.mhd");
        save_volume(&zero, &p, VolumeFormat::Mhd).unwrap();
        assert_eq!(load_volume(&p, VolumeFormat::Mhd).unwrap(), zero);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = Dims::cube(8);
        let v = Volume3::with_geometry(
            dims,
            [0.7, 0.8, 2.5],
            [-10.0, 3.5, 0.0],
            (0..dims.len()).map(|_| rng.random_range(-3000.0f32..3000.0)).collect(),
        )
        .unwrap();
        let p = dir.path().join("rand.mhd");
        save_volume(&v, &p, VolumeFormat::Mhd).unwrap();
        let back = load_volume(&p, VolumeFormat::Mhd).unwrap();
        assert!(v.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.spacing_mm(), v.spacing_mm());
        assert_eq!(back.origin_mm(), v.origin_mm());

        let p = dir.path().join("rand.f32");
        save_volume(&v, &p, VolumeFormat::RawF32 { dims }).unwrap();
        let raw = load_volume(&p, VolumeFormat::RawF32 { dims }).unwrap();
        assert_eq!(raw.data(), v.data());

        assert_eq!(decode_mha(&encode_mha(&v), "mem").unwrap(), v);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = Volume3::filled(Dims::cube(2), 0.0).unwrap();
        let err = save_volume(&v, "/nonexistent-dir/sub/v.mhd", VolumeFormat::Mhd).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent-dir/sub"));
    }
}
