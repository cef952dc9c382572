//! Reading and writing the numpy `.npy` array format.
//!
//! Only the subset needed for embedding files is supported: little-endian
//! `f4`/`f8` elements in C order, header versions 1.0 and 2.0 on read. Writing
//! always produces version 1.0 with `<f8` elements.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Element {
    F4,
    F8,
}

impl Element {
    fn size(self) -> usize {
        match self {
            Element::F4 => 4,
            Element::F8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Header {
    element: Element,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// A dense array read from disk: raw values in C order plus the stored shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NpyArray {
    /// Interprets the array as a matrix. 1-D arrays become a single row;
    /// 0-D arrays and arrays with more than two axes are rejected.
    pub fn into_matrix(self) -> std::result::Result<Array2<f64>, String> {
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => return Err(format!("unsupported array rank {}", other.len())),
        };
        Array2::from_shape_vec((rows, cols), self.values).map_err(|e| e.to_string())
    }
}

pub fn read_npy<R: Read>(reader: &mut R) -> std::result::Result<NpyArray, String> {
    let header = read_header(reader)?;
    if header.fortran_order {
        return Err("Fortran-order arrays are not supported".into());
    }
    let count: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; count * header.element.size()];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| format!("truncated data: expected {count} elements"))?;
    let values = match header.element {
        Element::F4 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Element::F8 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(NpyArray {
        shape: header.shape,
        values,
    })
}

fn read_header<R: Read>(reader: &mut R) -> std::result::Result<Header, String> {
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| "file too short for magic string".to_string())?;
    if magic != MAGIC {
        return Err("bad magic string".into());
    }
    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|_| "missing version".to_string())?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            reader.read_exact(&mut b).map_err(|_| "missing header length")?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            reader.read_exact(&mut b).map_err(|_| "missing header length")?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(format!("unsupported format version {v}.{}", version[1])),
    };
    let mut text = vec![0u8; header_len];
    reader
        .read_exact(&mut text)
        .map_err(|_| "truncated header".to_string())?;
    let text = String::from_utf8(text).map_err(|_| "header is not valid text".to_string())?;
    parse_header_dict(&text)
}

/// Parses the python dict literal, e.g.
/// `{'descr': '<f8', 'fortran_order': False, 'shape': (3, 2), }`.
fn parse_header_dict(text: &str) -> std::result::Result<Header, String> {
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or("malformed header dictionary")?;

    let descr = dict_value(body, "descr")?;
    let descr = descr.trim().trim_matches(|c| c == '\'' || c == '"');
    let element = match descr {
        "<f4" => Element::F4,
        "<f8" => Element::F8,
        other => return Err(format!("unsupported element type {other:?}")),
    };

    let fortran_order = match dict_value(body, "fortran_order")?.trim() {
        "False" => false,
        "True" => true,
        other => return Err(format!("bad fortran_order value {other:?}")),
    };

    let shape_text = dict_value(body, "shape")?;
    let inner = shape_text
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or("malformed shape tuple")?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("bad shape entry {s:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    Ok(Header {
        element,
        fortran_order,
        shape,
    })
}

fn dict_value<'a>(body: &'a str, key: &str) -> std::result::Result<&'a str, String> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let start = quoted
        .iter()
        .find_map(|q| body.find(q.as_str()).map(|i| i + q.len()))
        .ok_or_else(|| format!("header missing key {key:?}"))?;
    let rest = body[start..]
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(|| format!("header key {key:?} missing ':'"))?;
    // a value ends at the first top-level comma
    let mut depth = 0i32;
    for (i, c) in rest.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => return Ok(&rest[..i]),
            _ => {}
        }
    }
    Ok(rest)
}

pub fn write_npy<W: Write>(writer: &mut W, array: ArrayView2<f64>) -> io::Result<()> {
    write_npy_shape(writer, &[array.nrows(), array.ncols()], array.iter().copied())
}

pub fn write_npy_vector<W: Write>(writer: &mut W, values: &[f64]) -> io::Result<()> {
    write_npy_shape(writer, &[values.len()], values.iter().copied())
}

fn write_npy_shape<W: Write>(
    writer: &mut W,
    shape: &[usize],
    values: impl Iterator<Item = f64>,
) -> io::Result<()> {
    let shape_text = match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_text}, }}");
    // magic + version + u16 length + dict + '\n' must be a multiple of 64
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a 1-D or 2-D float array file as a matrix, rejecting non-finite values.
pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let array = read_npy(&mut BufReader::new(file)).map_err(|r| Error::ingest(path, r))?;
    if array.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::ingest(path, "non-finite value"));
    }
    array.into_matrix().map_err(|r| Error::ingest(path, r))
}

pub fn save_matrix(path: &Path, array: ArrayView2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_npy(&mut w, array)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_round_trip() {
        let m = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut buf = Vec::new();
        write_npy(&mut buf, m.view()).unwrap();
        assert_eq!((buf.len() - 6 * 8) % 64, 0);
        let back = read_npy(&mut buf.as_slice()).unwrap().into_matrix().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let mut buf = Vec::new();
        write_npy_vector(&mut buf, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((buf.len() - 24) % 64, 0);
        assert_eq!(&buf[..6], &MAGIC);
    }

    #[test]
    fn one_dimensional_promotes_to_single_frame() {
        let mut buf = Vec::new();
        write_npy_vector(&mut buf, &[1.0, 2.0, 3.0]).unwrap();
        let m = read_npy(&mut buf.as_slice()).unwrap().into_matrix().unwrap();
        assert_eq!(m.dim(), (1, 3));
        assert_eq!(m.row(0).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn reads_f4_elements() {
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }";
        let mut buf = MAGIC.to_vec();
        buf.extend([1, 0]);
        buf.extend((dict.len() as u16).to_le_bytes());
        buf.extend(dict.as_bytes());
        buf.extend(1.5f32.to_le_bytes());
        buf.extend((-2.0f32).to_le_bytes());
        let a = read_npy(&mut buf.as_slice()).unwrap();
        assert_eq!(a.values, vec![1.5, -2.0]);
        assert_eq!(a.shape, vec![2]);
    }

    #[test]
    fn rejects_unsupported_element_type() {
        let dict = "{'descr': '<i8', 'fortran_order': False, 'shape': (1,), }";
        let mut buf = MAGIC.to_vec();
        buf.extend([1, 0]);
        buf.extend((dict.len() as u16).to_le_bytes());
        buf.extend(dict.as_bytes());
        buf.extend(0i64.to_le_bytes());
        let err = read_npy(&mut buf.as_slice()).unwrap_err();
        assert!(err.contains("unsupported element type"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_npy(&mut &b"NOTNPY\x01\x00"[..]).is_err());
        let mut buf = Vec::new();
        write_npy_vector(&mut buf, &[1.0, 2.0]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_npy(&mut buf.as_slice()).unwrap_err().contains("truncated"));
    }

    #[test]
    fn nan_is_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        let mut f = File::create(&path).unwrap();
        write_npy_vector(&mut f, &[1.0, f64::NAN]).unwrap();
        drop(f);
        let err = load_matrix(&path).unwrap_err().to_string();
        assert!(err.contains("non-finite value"), "{err}");
        assert!(err.contains("bad.npy"), "{err}");
    }
}
