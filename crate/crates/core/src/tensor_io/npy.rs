//! Reading and writing a minimal subset of the numpy npy format.
//!
//! Only little-endian 32-bit floats in C order are supported, with rank 1 to 3.
//! Version 1.0 headers are written; 1.0 and 2.0 headers are accepted on read.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

/// The npy magic number.
pub(crate) const MAGIC: [u8; 6] = *b"\x93NUMPY";

const ALIGN: usize = 64;
const MAX_RANK: usize = 3;

/// A row-major `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::Tensor(format!(
                "rank {} unsupported, expected 1 to {MAX_RANK}",
                shape.len()
            )));
        }
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::Tensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn from_vector(v: &Array1<f64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: m.shape().to_vec(),
            data: m.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_stack(m: &Array3<f64>) -> Self {
        Self {
            shape: m.shape().to_vec(),
            data: m.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec(
                (r, c),
                self.data.iter().map(|&x| x as f64).collect(),
            )
            .expect("shape validated on construction")),
            _ => Err(Error::shape(format!("expected rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    /// Rank-3 tensors as they are; rank-2 tensors gain a leading axis of one.
    pub fn to_stack(&self) -> Result<Array3<f64>> {
        let (h, r, c) = match self.shape[..] {
            [h, r, c] => (h, r, c),
            [r, c] => (1, r, c),
            _ => {
                return Err(Error::shape(format!(
                    "expected rank-2 or rank-3 tensor, got shape {:?}",
                    self.shape
                )))
            }
        };
        Ok(
            Array3::from_shape_vec((h, r, c), self.data.iter().map(|&x| x as f64).collect())
                .expect("shape validated on construction"),
        )
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Tensor(format!("shape {shape:?} overflows")))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let mut reader = BufReader::new(File::open(path)?);
    read_from(&mut reader)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_to(&mut writer, tensor)?;
    writer.flush()?;
    Ok(())
}

/// Reads a tensor from a stream positioned at the magic number.
pub fn read_from<R: Read>(reader: &mut R) -> Result<TensorFile> {
    let mut magic = [0u8; 6];
    read_exact_or(reader, &mut magic, "missing magic")?;
    if magic != MAGIC {
        return Err(Error::Tensor("bad magic number".into()));
    }
    let mut version = [0u8; 2];
    read_exact_or(reader, &mut version, "missing version")?;
    let header_len = match version {
        [1, 0] => {
            let mut b = [0u8; 2];
            read_exact_or(reader, &mut b, "missing header length")?;
            u16::from_le_bytes(b) as usize
        }
        [2, 0] => {
            let mut b = [0u8; 4];
            read_exact_or(reader, &mut b, "missing header length")?;
            u32::from_le_bytes(b) as usize
        }
        [major, minor] => {
            return Err(Error::Tensor(format!("unsupported npy version {major}.{minor}")))
        }
    };
    let mut header = vec![0u8; header_len];
    read_exact_or(reader, &mut header, "truncated header")?;
    let header = std::str::from_utf8(&header)
        .map_err(|_| Error::Tensor("header is not valid text".into()))?;
    let dict = HeaderDict::parse(header)?;

    if dict.descr != "<f4" {
        return Err(Error::Tensor(format!(
            "unsupported dtype '{}', only '<f4' is accepted",
            dict.descr
        )));
    }
    if dict.fortran_order {
        return Err(Error::Tensor("Fortran order not supported".into()));
    }
    if dict.shape.is_empty() || dict.shape.len() > MAX_RANK {
        return Err(Error::Tensor(format!("rank {} unsupported", dict.shape.len())));
    }
    let count = element_count(&dict.shape)?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::Tensor("payload size overflows".into()))?;
    if payload.len() < expected {
        return Err(Error::Tensor(format!(
            "truncated payload: shape {:?} needs {count} values, found {} bytes",
            dict.shape,
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Tensor(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    TensorFile::new(dict.shape, data)
}

pub fn write_to<W: Write>(writer: &mut W, tensor: &TensorFile) -> Result<()> {
    let shape = match tensor.shape[..] {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            tensor.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // magic + version + u16 length + header + newline must land on ALIGN.
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    let header_len = u16::try_from(header.len())
        .map_err(|_| Error::Tensor("header too long for npy 1.0".into()))?;

    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&header_len.to_le_bytes())?;
    writer.write_all(header.as_bytes())?;
    for v in &tensor.data {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Tensor(what.to_string()),
        _ => Error::Io(e),
    })
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the python-literal dict of an npy header.
    fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Tensor(format!("malformed header: {msg}"));
        let body = text
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| bad("not a dict"))?;

        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;
        let mut rest = body.trim_start();
        while !rest.is_empty() {
            let (key, after) = parse_quoted(rest).ok_or_else(|| bad("expected quoted key"))?;
            let after = after
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| bad("expected ':'"))?
                .trim_start();
            let after = match key {
                "descr" => {
                    let (v, a) = parse_quoted(after).ok_or_else(|| bad("descr"))?;
                    descr = Some(v.to_string());
                    a
                }
                "fortran_order" => {
                    if let Some(a) = after.strip_prefix("False") {
                        fortran_order = Some(false);
                        a
                    } else if let Some(a) = after.strip_prefix("True") {
                        fortran_order = Some(true);
                        a
                    } else {
                        return Err(bad("fortran_order"));
                    }
                }
                "shape" => {
                    let inner = after.strip_prefix('(').ok_or_else(|| bad("shape"))?;
                    let close = inner.find(')').ok_or_else(|| bad("shape"))?;
                    let dims = inner[..close]
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.trim_end_matches('L').parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad("shape entries must be integers"))?;
                    shape = Some(dims);
                    &inner[close + 1..]
                }
                other => return Err(bad(&format!("unknown key '{other}'"))),
            };
            let after = after.trim_start();
            rest = after.strip_prefix(',').unwrap_or(after).trim_start();
        }
        Ok(Self {
            descr: descr.ok_or_else(|| bad("missing descr"))?,
            fortran_order: fortran_order.ok_or_else(|| bad("missing fortran_order"))?,
            shape: shape.ok_or_else(|| bad("missing shape"))?,
        })
    }
}

fn parse_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|&c| c == '\'' || c == '"')?;
    let inner = &s[1..];
    let end = inner.find(quote)?;
    Some((&inner[..end], &inner[end + 1..]))
}
