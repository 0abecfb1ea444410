//! Minimal NPY v1.0 codec.
//!
//! Only little-endian `<f4` and `<i4` arrays in C order are supported.
//! Headers are padded with spaces so that magic, version, length field and
//! header text together occupy a multiple of 64 bytes, matching numpy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Tensor, TensorData};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;
// magic + version + u16 header length
const PREAMBLE: usize = 10;

pub fn read_npy(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_npy_from(BufReader::new(file))
}

pub fn read_npy_from<R: Read>(mut reader: R) -> Result<Tensor> {
    let mut preamble = [0u8; PREAMBLE];
    read_exact_or_truncated(&mut reader, &mut preamble)?;
    if &preamble[..6] != MAGIC {
        return Err(Error::MagicMismatch);
    }
    if preamble[6] != 1 || preamble[7] != 0 {
        return Err(Error::UnsupportedDtype(format!(
            "NPY version {}.{}",
            preamble[6], preamble[7]
        )));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut header = vec![0u8; header_len];
    read_exact_or_truncated(&mut reader, &mut header)?;
    let header = std::str::from_utf8(&header)
        .map_err(|_| Error::HeaderParse("header is not valid text".into()))?;
    let dict = HeaderDict::parse(header)?;

    let dtype = match dict.descr.as_str() {
        "<f4" => DType::F32,
        "<i4" => DType::I32,
        other => return Err(Error::UnsupportedDtype(format!("descr '{other}'"))),
    };
    if dict.fortran_order {
        return Err(Error::UnsupportedDtype("fortran_order=True".into()));
    }

    let count: usize = dict.shape.iter().product();
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<npy stream>", e))?;
    let expected = count * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedData {
            expected,
            found: bytes.len(),
        });
    }
    let words = bytes[..expected]
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]]);
    let data = match dtype {
        DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
        DType::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
    };
    Tensor::new(dict.shape, data)
}

pub fn write_npy(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_npy_to(&mut writer, tensor).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn write_npy_to<W: Write>(writer: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    let shape = match tensor.shape() {
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        tensor.dtype().descr(),
        shape
    );
    // +1 for the terminating newline
    let unpadded = PREAMBLE + header.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');

    let header_len = u16::try_from(header.len()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "NPY header too long")
    })?;
    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&header_len.to_le_bytes())?;
    writer.write_all(header.as_bytes())?;
    match tensor.data() {
        TensorData::F32(v) => {
            for x in v {
                writer.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::I32(v) => {
            for x in v {
                writer.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::TruncatedData {
                    expected: buf.len(),
                    found: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<npy stream>", e)),
        }
    }
    Ok(())
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the Python dict literal numpy writes, e.g.
    /// `{'descr': '<f4', 'fortran_order': False, 'shape': (3, 4), }`.
    fn parse(text: &str) -> Result<Self> {
        let body = text
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| Error::HeaderParse("header is not a dict literal".into()))?;

        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;
        let mut rest = body.trim_start();
        while !rest.is_empty() {
            let (key, after_key) = parse_quoted(rest)?;
            let after_colon = after_key
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| Error::HeaderParse(format!("expected ':' after '{key}'")))?
                .trim_start();
            rest = match key {
                "descr" => {
                    let (value, r) = parse_quoted(after_colon)?;
                    descr = Some(value.to_string());
                    r
                }
                "fortran_order" => {
                    if let Some(r) = after_colon.strip_prefix("False") {
                        fortran_order = Some(false);
                        r
                    } else if let Some(r) = after_colon.strip_prefix("True") {
                        fortran_order = Some(true);
                        r
                    } else {
                        return Err(Error::HeaderParse("fortran_order is not a bool".into()));
                    }
                }
                "shape" => {
                    let (dims, r) = parse_tuple(after_colon)?;
                    shape = Some(dims);
                    r
                }
                other => return Err(Error::HeaderParse(format!("unexpected key '{other}'"))),
            };
            rest = rest.trim_start();
            rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
        }

        Ok(Self {
            descr: descr.ok_or_else(|| Error::HeaderParse("missing 'descr'".into()))?,
            fortran_order: fortran_order
                .ok_or_else(|| Error::HeaderParse("missing 'fortran_order'".into()))?,
            shape: shape.ok_or_else(|| Error::HeaderParse("missing 'shape'".into()))?,
        })
    }
}

fn parse_quoted(s: &str) -> Result<(&str, &str)> {
    let quote = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::HeaderParse(format!("expected quoted string at '{s}'")))?;
    let inner = &s[1..];
    let end = inner
        .find(quote)
        .ok_or_else(|| Error::HeaderParse("unterminated string".into()))?;
    Ok((&inner[..end], &inner[end + 1..]))
}

fn parse_tuple(s: &str) -> Result<(Vec<usize>, &str)> {
    let inner = s
        .strip_prefix('(')
        .ok_or_else(|| Error::HeaderParse("shape is not a tuple".into()))?;
    let end = inner
        .find(')')
        .ok_or_else(|| Error::HeaderParse("unterminated shape tuple".into()))?;
    let dims = inner[..end]
        .split(',')
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(|d| {
            d.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::HeaderParse(format!("bad dimension '{d}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, &inner[end + 1..]))
}
