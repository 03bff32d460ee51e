//! Dense and sparse 2-D arrays plus the `.ens` array codec.
//!
//! Everything is row-major `f64`. Products sum each output cell strictly
//! left to right over the shared dimension, so identical inputs always give
//! identical bits.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value {} at ({}, {})",
                data[i],
                i / cols,
                i % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite());
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::from_rows(columns)?.transpose())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.data[r * self.cols + c])
            .collect()
    }

    /// Gathers the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        assert!(!idx.is_empty());
        let mut out = Self::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (dst, &c) in out.row_mut(r).iter_mut().zip(idx) {
                *dst = src[c];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Appends one row filled with `value` (the homogeneous bias row).
    pub fn append_row(&self, value: f64) -> Self {
        let mut data = Vec::with_capacity((self.rows + 1) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend(std::iter::repeat(value).take(self.cols));
        Self {
            rows: self.rows + 1,
            cols: self.cols,
            data,
        }
    }

    /// Splits off the last row, returning `(top, last_row)`.
    pub fn split_last_row(&self) -> Result<(Self, Vec<f64>)> {
        if self.rows < 2 {
            return Err(Error::shape("cannot split the last row of a 1-row matrix"));
        }
        let top = Self {
            rows: self.rows - 1,
            cols: self.cols,
            data: self.data[..(self.rows - 1) * self.cols].to_vec(),
        };
        Ok((top, self.row(self.rows - 1).to_vec()))
    }

    /// Stacks a row vector beneath the matrix.
    pub fn with_row(&self, row: &[f64]) -> Result<Self> {
        if row.len() != self.cols {
            return Err(Error::shape(format!(
                "row of length {} cannot extend a {}x{} matrix",
                row.len(),
                self.rows,
                self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(row);
        Self::new(self.rows + 1, self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn count_nonzero(&self, threshold: f64) -> usize {
        self.data.iter().filter(|v| v.abs() > threshold).count()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn check_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::invalid(format!("{op} produced a non-finite value")))
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        assert!(
            r < self.rows && c < self.cols,
            "index ({r}, {c}) out of range"
        );
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        assert!(
            r < self.rows && c < self.cols,
            "index ({r}, {c}) out of range"
        );
        &mut self.data[r * self.cols + c]
    }
}

/// `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let acc = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            // 0·b is ±0 and adding it never changes the running sum.
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    DenseMatrix::from_raw(a.rows, b.cols, out).check_finite("matmul")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul (transposed {}x{}) by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.cols * b.cols];
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out[i * b.cols..(i + 1) * b.cols].iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    DenseMatrix::from_raw(a.cols, b.cols, out).check_finite("matmul_tn")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul {}x{} by (transposed {}x{})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(b.row(j)) {
                s += x * y;
            }
            out.push(s);
        }
    }
    DenseMatrix::from_raw(a.rows, b.rows, out).check_finite("matmul_nt")
}

pub fn relu(a: &DenseMatrix) -> DenseMatrix {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Coordinate-format sparse matrix. Entries are sorted by `(row, col)`,
/// unique, and never hold an explicit zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<(u32, u32, f64)>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("empty matrix {rows}x{cols}")));
        }
        if rows > u32::MAX as usize || cols > u32::MAX as usize {
            return Err(Error::shape("sparse dimensions exceed u32 indices"));
        }
        for (i, &(r, c, v)) in entries.iter().enumerate() {
            if r as usize >= rows || c as usize >= cols {
                return Err(Error::shape(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if v == 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("entry ({r}, {c}) holds {v}")));
            }
            if i > 0 && (entries[i - 1].0, entries[i - 1].1) >= (r, c) {
                return Err(Error::invalid(format!(
                    "entry ({r}, {c}) is out of order or duplicated"
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut entries = Vec::new();
        for r in 0..m.rows {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    entries.push((r as u32, c as u32, v));
                }
            }
        }
        Self {
            rows: m.rows,
            cols: m.cols,
            entries,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r as usize, c as usize)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }
}

const MAGIC: &[u8; 4] = b"ENSY";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    /// True when the dtype cannot hold every `f64` exactly.
    pub fn is_lossy(self) -> bool {
        !matches!(self, DType::F64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Dense,
    Coo,
}

impl Encoding {
    fn code(self) -> u8 {
        match self {
            Encoding::Dense => 0,
            Encoding::Coo => 1,
        }
    }
}

/// One named array in `.ens` form. `bytes` is the complete encoded stream:
/// header followed by payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayRecord {
    pub name: String,
    pub dtype: DType,
    pub encoding: Encoding,
    pub dims: Vec<u64>,
    pub bytes: Vec<u8>,
}

/// Result of decoding: the encoding decides which representation comes back.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayValue {
    Dense(DenseMatrix),
    Sparse(SparseMatrix),
}

impl ArrayValue {
    pub fn into_dense(self) -> DenseMatrix {
        match self {
            ArrayValue::Dense(m) => m,
            ArrayValue::Sparse(s) => s.to_dense(),
        }
    }
}

/// Encodes as f64, which is always bit-exact.
pub fn encode_array(name: &str, m: &DenseMatrix, encoding: Encoding) -> ArrayRecord {
    encode_array_as(name, m, encoding, DType::F64).expect("f64 encoding cannot fail")
}

/// Encodes with an explicit dtype. `I64` requires integral values; `F32`
/// rounds.
pub fn encode_array_as(
    name: &str,
    m: &DenseMatrix,
    encoding: Encoding,
    dtype: DType,
) -> Result<ArrayRecord> {
    if dtype == DType::I64 {
        if let Some(v) = m
            .as_slice()
            .iter()
            .find(|v| v.fract() != 0.0 || v.abs() > 9.007_199_254_740_992e15)
        {
            return Err(Error::invalid(format!(
                "array `{name}` holds {v}, which is not an exact i64"
            )));
        }
    }
    if dtype == DType::F32 {
        if let Some(v) = m.as_slice().iter().find(|v| (**v as f32).is_infinite()) {
            return Err(Error::invalid(format!(
                "array `{name}` holds {v}, which overflows f32"
            )));
        }
    }

    let dims = vec![m.rows() as u64, m.cols() as u64];
    let mut bytes = Vec::with_capacity(header_len(2) + m.as_slice().len() * dtype.width());
    bytes.extend_from_slice(MAGIC);
    bytes.push(FORMAT_VERSION);
    bytes.push(dtype.code());
    bytes.push(encoding.code());
    bytes.push(dims.len() as u8);
    for d in &dims {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    match encoding {
        Encoding::Dense => {
            for &v in m.as_slice() {
                push_value(&mut bytes, v, dtype);
            }
        }
        Encoding::Coo => {
            // Entries that round to zero in the target dtype are dropped so the
            // decoded sparse matrix never holds an explicit zero.
            let entries: Vec<_> = SparseMatrix::from_dense(m)
                .entries
                .into_iter()
                .filter(|&(_, _, v)| dtype != DType::F32 || v as f32 != 0.0)
                .collect();
            bytes.extend_from_slice(&(entries.len() as u64).to_le_bytes());
            for (r, c, v) in entries {
                bytes.extend_from_slice(&r.to_le_bytes());
                bytes.extend_from_slice(&c.to_le_bytes());
                push_value(&mut bytes, v, dtype);
            }
        }
    }
    Ok(ArrayRecord {
        name: name.to_string(),
        dtype,
        encoding,
        dims,
        bytes,
    })
}

/// Picks whichever encoding yields fewer bytes (dense on ties).
pub fn encode_array_smallest(name: &str, m: &DenseMatrix, dtype: DType) -> Result<ArrayRecord> {
    let dense = encode_array_as(name, m, Encoding::Dense, dtype)?;
    let coo = encode_array_as(name, m, Encoding::Coo, dtype)?;
    Ok(if coo.bytes.len() < dense.bytes.len() {
        coo
    } else {
        dense
    })
}

fn header_len(ndim: usize) -> usize {
    8 + 8 * ndim
}

fn push_value(out: &mut Vec<u8>, v: f64, dtype: DType) {
    match dtype {
        DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        DType::I64 => out.extend_from_slice(&(v as i64).to_le_bytes()),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn value(&mut self, dtype: DType) -> Result<f64> {
        let at = self.pos;
        let v = match dtype {
            DType::F32 => f32::from_le_bytes(self.take(4, "value")?.try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(self.take(8, "value")?.try_into().unwrap()),
            DType::I64 => i64::from_le_bytes(self.take(8, "value")?.try_into().unwrap()) as f64,
        };
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite value {v}")));
        }
        Ok(v)
    }
}

/// Parses a raw `.ens` stream into a record, validating the header and
/// the exact payload length.
pub fn parse_record(name: &str, bytes: Vec<u8>) -> Result<ArrayRecord> {
    let (dtype, encoding, dims) = {
        let mut rd = Reader {
            buf: &bytes,
            pos: 0,
        };
        let header = read_header(&mut rd)?;
        skip_payload(&mut rd, &header)?;
        header
    };
    Ok(ArrayRecord {
        name: name.to_string(),
        dtype,
        encoding,
        dims,
        bytes,
    })
}

fn read_header(rd: &mut Reader<'_>) -> Result<(DType, Encoding, Vec<u64>)> {
    if rd.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected `ENSY`"));
    }
    let version = rd.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let code = rd.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(5, format!("dtype {code}")))?;
    let encoding = match rd.u8("encoding")? {
        0 => Encoding::Dense,
        1 => Encoding::Coo,
        other => return Err(Error::format(6, format!("encoding {other}"))),
    };
    let ndim = rd.u8("ndim")? as usize;
    if !(1..=2).contains(&ndim) {
        return Err(Error::format(
            7,
            format!("ndim {ndim}, only 1 or 2 supported"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = rd.pos;
        let d = rd.u64("dim")?;
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::format(at, format!("dimension {d} out of range")));
        }
        dims.push(d);
    }
    Ok((dtype, encoding, dims))
}

fn shape_of(dims: &[u64]) -> (usize, usize) {
    match dims {
        [n] => (*n as usize, 1),
        [r, c] => (*r as usize, *c as usize),
        _ => unreachable!("ndim validated by read_header"),
    }
}

fn skip_payload(
    rd: &mut Reader<'_>,
    (dtype, encoding, dims): &(DType, Encoding, Vec<u64>),
) -> Result<()> {
    let (rows, cols) = shape_of(dims);
    let need = match encoding {
        Encoding::Dense => rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.width())),
        Encoding::Coo => {
            let nnz = rd.u64("nnz")?;
            (nnz as usize).checked_mul(8 + dtype.width())
        }
    }
    .ok_or_else(|| Error::format(rd.pos, "payload size overflows"))?;
    rd.take(need, "payload")?;
    if rd.pos != rd.buf.len() {
        return Err(Error::format(
            rd.pos,
            format!("{} trailing bytes", rd.buf.len() - rd.pos),
        ));
    }
    Ok(())
}

pub fn decode_array(record: &ArrayRecord) -> Result<ArrayValue> {
    let mut rd = Reader {
        buf: &record.bytes,
        pos: 0,
    };
    let (dtype, encoding, dims) = read_header(&mut rd)?;
    if dtype != record.dtype || encoding != record.encoding || dims != record.dims {
        return Err(Error::format(
            0,
            format!(
                "header of `{}` disagrees with its record fields",
                record.name
            ),
        ));
    }
    let (rows, cols) = shape_of(&dims);
    let value = match encoding {
        Encoding::Dense => {
            let n = rows * cols;
            if record.bytes.len() - rd.pos < n * dtype.width() {
                return Err(Error::format(rd.pos, "truncated dense payload"));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(rd.value(dtype)?);
            }
            ArrayValue::Dense(DenseMatrix::from_raw(rows, cols, data))
        }
        Encoding::Coo => {
            let nnz_at = rd.pos;
            let nnz = rd.u64("nnz")? as usize;
            if nnz > rows * cols {
                return Err(Error::format(nnz_at, format!("nnz {nnz} exceeds capacity")));
            }
            let mut entries = Vec::with_capacity(nnz);
            let mut prev: Option<(u32, u32)> = None;
            for _ in 0..nnz {
                let at = rd.pos;
                let r = rd.u32("row index")?;
                let c = rd.u32("col index")?;
                if r as usize >= rows || c as usize >= cols {
                    return Err(Error::format(
                        at,
                        format!("index ({r}, {c}) outside {rows}x{cols}"),
                    ));
                }
                if prev.is_some_and(|p| p >= (r, c)) {
                    return Err(Error::format(at, format!("index ({r}, {c}) out of order")));
                }
                prev = Some((r, c));
                let v = rd.value(dtype)?;
                if v == 0.0 {
                    return Err(Error::format(at, "explicit zero in coo payload"));
                }
                entries.push((r, c, v));
            }
            ArrayValue::Sparse(SparseMatrix {
                rows,
                cols,
                entries,
            })
        }
    };
    if rd.pos != record.bytes.len() {
        return Err(Error::format(
            rd.pos,
            format!("{} trailing bytes", record.bytes.len() - rd.pos),
        ));
    }
    Ok(value)
}
