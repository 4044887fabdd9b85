//! Sidecar header (`.hdr`, UTF-8 `key: value` lines) plus raw little-endian
//! payload (`.raw`), X fastest, then Y, then Z, then channel.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::field::{DisplacementField, Grid, Mask, Vec3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U8 => "u8",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            "u8" => Ok(Dtype::U8),
            other => Err(Error::InvalidArgument(format!(
                "unknown dtype `{other}` (f32, f64, u8)"
            ))),
        }
    }
}

/// Parsed sidecar. `spacing`, `origin` and the frame stamps are optional
/// extensions beyond the required `dtype`, `dims`, `channels`, `endianness`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeader {
    pub dtype: Dtype,
    /// Up to three extents, X first.
    pub dims: Vec<usize>,
    pub channels: usize,
    pub spacing: Option<Vec3>,
    pub origin: Option<Vec3>,
    pub frame: Option<usize>,
    pub from_frame: Option<usize>,
    pub to_frame: Option<usize>,
}

impl RawHeader {
    pub fn new(dtype: Dtype, dims: Vec<usize>, channels: usize) -> Self {
        Self {
            dtype,
            dims,
            channels,
            spacing: None,
            origin: None,
            frame: None,
            from_frame: None,
            to_frame: None,
        }
    }

    fn for_grid(dtype: Dtype, grid: &Grid, channels: usize) -> Self {
        Self {
            spacing: Some(grid.spacing),
            origin: Some(grid.origin),
            ..Self::new(dtype, grid.dims.to_vec(), channels)
        }
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.channels * self.dtype.size()
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        let _ = writeln!(s, "dtype: {}", self.dtype);
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "dims: {}", dims.join(" "));
        let _ = writeln!(s, "channels: {}", self.channels);
        let _ = writeln!(s, "endianness: little");
        if let Some(sp) = self.spacing {
            let _ = writeln!(s, "spacing: {}", join(&sp));
        }
        if let Some(o) = self.origin {
            let _ = writeln!(s, "origin: {}", join(&o));
        }
        for (key, v) in [
            ("frame", self.frame),
            ("from_frame", self.from_frame),
            ("to_frame", self.to_frame),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{key}: {v}");
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let (mut dtype, mut dims, mut channels, mut endian) = (None, None, None, None);
        let mut h = RawHeader::new(Dtype::U8, Vec::new(), 0);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("line {}: expected `key: value`", n + 1)))?;
            let value = value.trim();
            let uint = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| bad(format!("line {}: `{v}` is not a count", n + 1)))
            };
            let vec3 = |v: &str| -> Result<Vec3> {
                let xs: Vec<f64> = v
                    .split_whitespace()
                    .map(|x| {
                        x.parse::<f64>()
                            .map_err(|_| bad(format!("line {}: `{x}` is not a number", n + 1)))
                    })
                    .collect::<Result<_>>()?;
                xs.try_into()
                    .map_err(|_| bad(format!("line {}: expected three numbers", n + 1)))
            };
            match key.trim() {
                "dtype" => dtype = Some(value.parse::<Dtype>().map_err(|e| bad(e.to_string()))?),
                "dims" => {
                    dims = Some(
                        value
                            .split_whitespace()
                            .map(uint)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "channels" => channels = Some(uint(value)?),
                "endianness" => endian = Some(value.to_string()),
                "spacing" => h.spacing = Some(vec3(value)?),
                "origin" => h.origin = Some(vec3(value)?),
                "frame" => h.frame = Some(uint(value)?),
                "from_frame" => h.from_frame = Some(uint(value)?),
                "to_frame" => h.to_frame = Some(uint(value)?),
                other => return Err(bad(format!("unknown header key `{other}`"))),
            }
        }
        match endian.as_deref() {
            Some("little") => {}
            Some(e) => return Err(bad(format!("unsupported endianness `{e}` (only little)"))),
            None => return Err(bad("missing `endianness`".into())),
        }
        h.dtype = dtype.ok_or_else(|| bad("missing `dtype`".into()))?;
        h.dims = dims.ok_or_else(|| bad("missing `dims`".into()))?;
        h.channels = channels.ok_or_else(|| bad("missing `channels`".into()))?;
        if h.dims.is_empty() || h.dims.len() > 3 || h.dims.contains(&0) || h.channels == 0 {
            return Err(bad(format!(
                "bad shape: dims {:?}, channels {}",
                h.dims, h.channels
            )));
        }
        Ok(h)
    }

    fn grid(&self, path: &Path) -> Result<Grid> {
        let dims: [usize; 3] = self.dims.clone().try_into().map_err(|_| {
            Error::format(path, format!("expected three dims, got {:?}", self.dims))
        })?;
        Grid::with_origin(
            dims,
            self.spacing.unwrap_or([1.0; 3]),
            self.origin.unwrap_or([0.0; 3]),
        )
    }
}

fn pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("hdr"), path.with_extension("raw"))
}

/// Writes `<path>.hdr` and `<path>.raw` (any extension on `path` is replaced).
pub fn write_raw(path: &Path, header: &RawHeader, payload: &[u8]) -> Result<()> {
    let (hdr, raw) = pair(path);
    if payload.len() != header.payload_len() {
        return Err(Error::format(
            &raw,
            format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_len()
            ),
        ));
    }
    write_atomic(&raw, payload)?;
    write_atomic(&hdr, header.to_text().as_bytes())
}

/// Reads a header/payload pair and checks the payload length.
pub fn read_raw(path: &Path) -> Result<(RawHeader, Vec<u8>)> {
    let (hdr, raw) = pair(path);
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let header = RawHeader::parse(&text, &hdr)?;
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if payload.len() != header.payload_len() {
        return Err(Error::format(
            &raw,
            format!(
                "expected {} bytes from the header, found {}",
                header.payload_len(),
                payload.len()
            ),
        ));
    }
    Ok((header, payload))
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::U8 => out.push(v as u8),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::U8 => bytes.iter().map(|b| f64::from(*b)).collect(),
    }
}

fn expect(h: &RawHeader, path: &Path, channels: usize, float: bool) -> Result<()> {
    let ok_dtype = if float {
        h.dtype != Dtype::U8
    } else {
        h.dtype == Dtype::U8
    };
    if !ok_dtype || h.channels != channels {
        return Err(Error::format(
            path,
            format!(
                "expected {} channel(s) of {}, found {} of {}",
                channels,
                if float { "f32/f64" } else { "u8" },
                h.channels,
                h.dtype
            ),
        ));
    }
    Ok(())
}

/// Volume as f32.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_volume_as(path, vol, Dtype::F32)
}

pub fn write_volume_as(path: &Path, vol: &Volume, dtype: Dtype) -> Result<()> {
    if dtype == Dtype::U8 {
        return Err(Error::InvalidArgument(
            "volumes are stored as f32 or f64".into(),
        ));
    }
    let mut h = RawHeader::for_grid(dtype, &vol.grid, 1);
    h.frame = vol.frame;
    write_raw(path, &h, &encode(&vol.values, dtype))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (h, payload) = read_raw(path)?;
    expect(&h, path, 1, true)?;
    let mut v = Volume::new(h.grid(path)?, decode(&payload, h.dtype))?;
    v.frame = h.frame;
    Ok(v)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_raw(
        path,
        &RawHeader::for_grid(Dtype::U8, &mask.grid, 1),
        &mask.labels,
    )
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (h, payload) = read_raw(path)?;
    expect(&h, path, 1, false)?;
    Mask::new(h.grid(path)?, payload)
}

/// Field as three f32 channels, channel-major.
pub fn write_dvf(path: &Path, dvf: &DisplacementField) -> Result<()> {
    write_dvf_as(path, dvf, Dtype::F32)
}

pub fn write_dvf_as(path: &Path, dvf: &DisplacementField, dtype: Dtype) -> Result<()> {
    if dtype == Dtype::U8 {
        return Err(Error::InvalidArgument(
            "fields are stored as f32 or f64".into(),
        ));
    }
    let mut h = RawHeader::for_grid(dtype, &dvf.grid, 3);
    h.from_frame = Some(dvf.from_frame);
    h.to_frame = Some(dvf.to_frame);
    write_raw(path, &h, &encode(&dvf.to_channels(), dtype))
}

pub fn read_dvf(path: &Path) -> Result<DisplacementField> {
    let (h, payload) = read_raw(path)?;
    expect(&h, path, 3, true)?;
    let (from, to) = match (h.from_frame, h.to_frame) {
        (Some(f), Some(t)) => (f, t),
        _ => {
            return Err(Error::format(
                path,
                "field header needs `from_frame` and `to_frame`",
            ))
        }
    };
    DisplacementField::from_channels(h.grid(path)?, &decode(&payload, h.dtype), from, to)
}

/// Slice stack `[X, Y, steps]` as f32, one slice per step in order.
pub fn write_slices(path: &Path, slices: &[Vec<f64>], dims: [usize; 2]) -> Result<()> {
    let n = dims[0] * dims[1];
    if slices.is_empty() || slices.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "slices do not all have {n} values"
        )));
    }
    let h = RawHeader::new(Dtype::F32, vec![dims[0], dims[1], slices.len()], 1);
    write_raw(path, &h, &encode(&slices.concat(), Dtype::F32))
}

pub fn read_slices(path: &Path) -> Result<(Vec<Vec<f64>>, [usize; 2])> {
    let (h, payload) = read_raw(path)?;
    expect(&h, path, 1, true)?;
    if h.dims.len() != 3 {
        return Err(Error::format(
            path,
            format!("slice stack needs dims X Y steps, got {:?}", h.dims),
        ));
    }
    let values = decode(&payload, h.dtype);
    let slices = values
        .chunks(h.dims[0] * h.dims[1])
        .map(<[f64]>::to_vec)
        .collect();
    Ok((slices, [h.dims[0], h.dims[1]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_text_round_trips() {
        let mut h = RawHeader::new(Dtype::F32, vec![3, 4, 5], 3);
        h.spacing = Some([1.8, 0.1 + 0.2, 2.0]);
        h.origin = Some([-1.5, 0.0, 1e-17]);
        h.from_frame = Some(0);
        h.to_frame = Some(4);
        let p = Path::new("x.hdr");
        assert_eq!(RawHeader::parse(&h.to_text(), p).unwrap(), h);
        assert_eq!(h.payload_len(), 3 * 4 * 5 * 3 * 4);
    }

    #[test]
    fn header_rejects_bad_input() {
        let p = Path::new("x.hdr");
        let ok = "dtype: f32\ndims: 2 2 2\nchannels: 1\nendianness: little\n";
        assert!(RawHeader::parse(ok, p).is_ok());
        assert!(RawHeader::parse(&ok.replace("little", "big"), p).is_err());
        assert!(RawHeader::parse(&ok.replace("f32", "i16"), p).is_err());
        assert!(RawHeader::parse(&ok.replace("channels: 1\n", ""), p).is_err());
        assert!(RawHeader::parse(&ok.replace("2 2 2", "2 0 2"), p).is_err());
        assert!(RawHeader::parse(&format!("{ok}colour: red\n"), p).is_err());
    }

    #[test]
    fn codecs_are_inverse_on_representable_values() {
        let v = vec![0.0, -1.5, 3.25, f64::from(0.1f32)];
        assert_eq!(decode(&encode(&v, Dtype::F32), Dtype::F32), v);
        let w = vec![0.1, -1e300, 7.0];
        assert_eq!(decode(&encode(&w, Dtype::F64), Dtype::F64), w);
        assert_eq!(
            decode(&encode(&[0.0, 1.0, 255.0], Dtype::U8), Dtype::U8),
            vec![0.0, 1.0, 255.0]
        );
    }
}
