//! Reading and writing the numpy `.npy` array format.
//!
//! Writing always produces version 1.0 with a header laid out exactly as
//! `numpy.save` does (sorted keys, trailing `, }`, space padding to a
//! 64-byte boundary, terminating newline). Reading accepts versions 1.0,
//! 2.0 and 3.0, little- or big-endian `f4`/`f8`, and `u1`/`b1`, C order only.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const ALIGN: usize = 64;
/// Same cap numpy applies before it refuses to parse a header.
const MAX_HEADER_LEN: usize = 10_000;
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("missing npy magic bytes")]
    BadMagic,
    #[error("unsupported npy version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed npy header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype descriptor {0:?}")]
    UnsupportedDtype(String),
    #[error("fortran-order arrays are not supported")]
    FortranOrder,
    #[error("data length mismatch: header implies {expected} bytes, found {found}")]
    DataLength { expected: usize, found: usize },
}

/// Element types understood by the reader. `F8` and `F4` can also be written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F8,
    F4,
    U1,
    Bool,
}

impl Dtype {
    pub fn item_size(self) -> usize {
        match self {
            Dtype::F8 => 8,
            Dtype::F4 => 4,
            Dtype::U1 | Dtype::Bool => 1,
        }
    }

    fn descr(self) -> &'static str {
        match self {
            Dtype::F8 => "<f8",
            Dtype::F4 => "<f4",
            Dtype::U1 => "|u1",
            Dtype::Bool => "|b1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// A decoded array, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl NpyArray {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Header {
    dtype: Dtype,
    endian: Endian,
    fortran_order: bool,
    shape: Vec<usize>,
}

pub fn parse(bytes: &[u8]) -> Result<NpyArray, NpyError> {
    let mut cursor = bytes;
    read(&mut cursor)
}

pub fn read<R: Read>(reader: &mut R) -> Result<NpyArray, NpyError> {
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic).map_err(|_| NpyError::BadMagic)?;
    if magic != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version)?;
    let header_len = match (version[0], version[1]) {
        (1, 0) => {
            let mut len = [0u8; 2];
            reader.read_exact(&mut len)?;
            u16::from_le_bytes(len) as usize
        }
        (2, 0) | (3, 0) => {
            let mut len = [0u8; 4];
            reader.read_exact(&mut len)?;
            u32::from_le_bytes(len) as usize
        }
        (major, minor) => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    if header_len > MAX_HEADER_LEN {
        return Err(NpyError::MalformedHeader(format!("header length {header_len} too large")));
    }
    let mut raw = vec![0u8; header_len];
    reader.read_exact(&mut raw)?;
    let text = std::str::from_utf8(&raw)
        .map_err(|_| NpyError::MalformedHeader("header is not valid text".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(NpyError::FortranOrder);
    }

    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NpyError::MalformedHeader("shape overflows".into()))?;
    let expected = count
        .checked_mul(header.dtype.item_size())
        .ok_or_else(|| NpyError::MalformedHeader("shape overflows".into()))?;
    let mut body = Vec::new();
    reader.take(expected as u64 + 1).read_to_end(&mut body)?;
    if body.len() != expected {
        return Err(NpyError::DataLength { expected, found: body.len() });
    }
    let data = decode(&body, header.dtype, header.endian)?;
    Ok(NpyArray { shape: header.shape, dtype: header.dtype, data })
}

fn decode(body: &[u8], dtype: Dtype, endian: Endian) -> Result<Vec<f64>, NpyError> {
    let size = dtype.item_size();
    let out = body.chunks_exact(size).map(|chunk| match (dtype, endian) {
        (Dtype::F8, Endian::Little) => Ok(f64::from_le_bytes(chunk.try_into().unwrap())),
        (Dtype::F8, Endian::Big) => Ok(f64::from_be_bytes(chunk.try_into().unwrap())),
        (Dtype::F4, Endian::Little) => Ok(f32::from_le_bytes(chunk.try_into().unwrap()) as f64),
        (Dtype::F4, Endian::Big) => Ok(f32::from_be_bytes(chunk.try_into().unwrap()) as f64),
        (Dtype::U1, _) => Ok(chunk[0] as f64),
        (Dtype::Bool, _) => match chunk[0] {
            0 => Ok(0.0),
            1 => Ok(1.0),
            b => Err(NpyError::MalformedHeader(format!("invalid bool byte {b}"))),
        },
    });
    out.collect()
}

/// Encodes `data` (C order) as a version 1.0 npy byte stream.
pub fn encode(shape: &[usize], data: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + data.len() * dtype.item_size());
    write(&mut out, shape, data, dtype).expect("writing to a Vec cannot fail");
    out
}

pub fn write<W: Write>(
    writer: &mut W,
    shape: &[usize],
    data: &[f64],
    dtype: Dtype,
) -> io::Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("shape {shape:?} holds {count} values, got {}", data.len()),
        ));
    }
    let header = header_text(shape, dtype);
    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(header.len() as u16).to_le_bytes())?;
    writer.write_all(header.as_bytes())?;
    let mut body = Vec::with_capacity(data.len() * dtype.item_size());
    for &v in data {
        match dtype {
            Dtype::F8 => body.extend_from_slice(&v.to_le_bytes()),
            Dtype::F4 => body.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::U1 => body.push(v.clamp(0.0, 255.0) as u8),
            Dtype::Bool => body.push(u8::from(v != 0.0)),
        }
    }
    writer.write_all(&body)
}

fn header_text(shape: &[usize], dtype: Dtype) -> String {
    let shape_repr = match shape {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_repr
    );
    // numpy reserves room for the leading axis to grow in place
    if let Some(first) = shape.first() {
        header.extend(std::iter::repeat_n(' ', GROWTH_AXIS_MAX_DIGITS - first.to_string().len()));
    }
    // magic + version + u16 length, then header, spaces, newline
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = ALIGN - unpadded % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    header
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open(char),
    Close(char),
    Colon,
    Comma,
    Str(&'a str),
    Int(usize),
    Bool(bool),
}

fn tokenize(text: &str) -> Result<Vec<Token<'_>>, NpyError> {
    let bad = |msg: &str| NpyError::MalformedHeader(msg.to_string());
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'{' | b'(' => {
                tokens.push(Token::Open(c as char));
                i += 1;
            }
            b'}' | b')' => {
                tokens.push(Token::Close(c as char));
                i += 1;
            }
            b':' => {
                tokens.push(Token::Colon);
                i += 1;
            }
            b',' => {
                tokens.push(Token::Comma);
                i += 1;
            }
            b'\'' | b'"' => {
                let end = text[i + 1..].find(c as char).ok_or_else(|| bad("unterminated string"))?;
                tokens.push(Token::Str(&text[i + 1..i + 1 + end]));
                i += end + 2;
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                // numpy on some platforms writes `3L`
                let value = text[start..i].parse().map_err(|_| bad("integer out of range"))?;
                if i < bytes.len() && bytes[i] == b'L' {
                    i += 1;
                }
                tokens.push(Token::Int(value));
            }
            _ if text[i..].starts_with("True") => {
                tokens.push(Token::Bool(true));
                i += 4;
            }
            _ if text[i..].starts_with("False") => {
                tokens.push(Token::Bool(false));
                i += 5;
            }
            _ => return Err(bad(&format!("unexpected character {:?}", c as char))),
        }
    }
    Ok(tokens)
}

fn parse_header(text: &str) -> Result<Header, NpyError> {
    let bad = |msg: &str| NpyError::MalformedHeader(msg.to_string());
    let tokens = tokenize(text)?;
    let mut it = tokens.into_iter().peekable();
    if it.next() != Some(Token::Open('{')) {
        return Err(bad("header must be a dict"));
    }
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    loop {
        let key = match it.next() {
            Some(Token::Close('}')) => break,
            Some(Token::Str(k)) => k,
            _ => return Err(bad("expected key")),
        };
        if it.next() != Some(Token::Colon) {
            return Err(bad("expected ':'"));
        }
        match key {
            "descr" => match it.next() {
                Some(Token::Str(s)) => descr = Some(s.to_string()),
                _ => return Err(bad("descr must be a string")),
            },
            "fortran_order" => match it.next() {
                Some(Token::Bool(b)) => fortran = Some(b),
                _ => return Err(bad("fortran_order must be a bool")),
            },
            "shape" => {
                if it.next() != Some(Token::Open('(')) {
                    return Err(bad("shape must be a tuple"));
                }
                let mut dims = Vec::new();
                loop {
                    match it.next() {
                        Some(Token::Close(')')) => break,
                        Some(Token::Int(d)) => {
                            dims.push(d);
                            match it.next() {
                                Some(Token::Comma) => {}
                                Some(Token::Close(')')) => break,
                                _ => return Err(bad("malformed shape tuple")),
                            }
                        }
                        _ => return Err(bad("malformed shape tuple")),
                    }
                }
                if dims.len() > 32 {
                    return Err(bad("too many dimensions"));
                }
                shape = Some(dims);
            }
            other => return Err(bad(&format!("unexpected key {other:?}"))),
        }
        match it.next() {
            Some(Token::Comma) => {}
            Some(Token::Close('}')) => break,
            _ => return Err(bad("expected ',' or '}'")),
        }
    }
    if it.next().is_some() {
        return Err(bad("trailing tokens after dict"));
    }
    let descr = descr.ok_or_else(|| bad("missing descr"))?;
    let (dtype, endian) = parse_descr(&descr)?;
    Ok(Header {
        dtype,
        endian,
        fortran_order: fortran.ok_or_else(|| bad("missing fortran_order"))?,
        shape: shape.ok_or_else(|| bad("missing shape"))?,
    })
}

fn parse_descr(descr: &str) -> Result<(Dtype, Endian), NpyError> {
    let unsupported = || NpyError::UnsupportedDtype(descr.to_string());
    let (order, kind) = descr.split_at_checked(1).ok_or_else(unsupported)?;
    let endian = match order {
        "<" | "|" | "=" => Endian::Little,
        ">" => Endian::Big,
        _ => return Err(unsupported()),
    };
    let dtype = match kind {
        "f8" => Dtype::F8,
        "f4" => Dtype::F4,
        "u1" => Dtype::U1,
        "b1" => Dtype::Bool,
        _ => return Err(unsupported()),
    };
    Ok((dtype, endian))
}
