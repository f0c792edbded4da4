//! Portable model file.
//!
//! Little-endian throughout; matrices are written row-major.
//!
//! ```text
//! magic            8 bytes "ICMODL01"
//! arch             u64  (0 rnn, 1 lstm, 2 mlstm)
//! hidden           u64
//! n_history, horizon, stride       u64 x3
//! dt, a_max                        f64 x2
//! recurrent_dropout, dense_dropout f64 x2
//! scaler min[4], scaler max[4]     f64 x8
//! encoder: wx (G*H x 4), wh (G*H x H), b (G*H)
//! decoder: wx (G*H x (1+K)), wh (G*H x H), b (G*H)
//! head_w (H), head_b (1)
//! cls_w (K x H), cls_b (K)
//! ```
//!
//! `G` is 1 for the simple cell and 4 for LSTM (gate order i, f, o, g);
//! `K` is the number of maneuver classes for the classifier variant, else 0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::cell::CellParams;
use super::model::{Architecture, EncoderDecoder};
use crate::dataset::{get_f64, get_u64, put_f64, put_u64, AccelScaler, MinMaxScaler, WindowConfig, FEATURE_DIM};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ICMODL01";

fn put_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            put_f64(w, m[(r, c)])?;
        }
    }
    Ok(())
}

fn get_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(get_f64(r)?);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn get_vector(r: &mut impl Read, n: usize) -> Result<DVector<f64>> {
    Ok(DVector::from_iterator(n, (0..n).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?))
}

fn put_cell(w: &mut impl Write, c: &CellParams) -> Result<()> {
    put_matrix(w, &c.wx)?;
    put_matrix(w, &c.wh)?;
    c.b.iter().try_for_each(|v| put_f64(w, *v))
}

fn get_cell(r: &mut impl Read, arch: Architecture, input: usize, hidden: usize) -> Result<CellParams> {
    let mut c = CellParams::zeros(arch.cell(), input, hidden);
    let rows = c.wx.nrows();
    c.wx = get_matrix(r, rows, input)?;
    c.wh = get_matrix(r, rows, hidden)?;
    c.b = get_vector(r, rows)?;
    Ok(c)
}

pub fn write_model(m: &EncoderDecoder, w: &mut impl Write) -> Result<()> {
    m.validate()?;
    w.write_all(MAGIC)?;
    put_u64(w, m.arch.code())?;
    put_u64(w, m.hidden() as u64)?;
    for v in [m.window.n_history, m.window.horizon, m.window.stride] {
        put_u64(w, v as u64)?;
    }
    for v in [m.window.dt, m.accel.a_max, m.recurrent_dropout, m.dense_dropout] {
        put_f64(w, v)?;
    }
    for v in m.scaler.min.iter().chain(m.scaler.max.iter()) {
        put_f64(w, *v)?;
    }
    put_cell(w, &m.encoder)?;
    put_cell(w, &m.decoder)?;
    for v in m.head_w.iter().chain(m.head_b.iter()) {
        put_f64(w, *v)?;
    }
    put_matrix(w, &m.cls_w)?;
    m.cls_b.iter().try_for_each(|v| put_f64(w, *v))
}

pub fn read_model(r: &mut impl Read) -> Result<EncoderDecoder> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let arch = Architecture::from_code(get_u64(r)?).ok_or_else(|| Error::Format("unknown architecture".into()))?;
    let hidden = get_u64(r)? as usize;
    if hidden == 0 || hidden > 4096 {
        return Err(Error::Format(format!("implausible hidden width {hidden}")));
    }
    let n_history = get_u64(r)? as usize;
    let horizon = get_u64(r)? as usize;
    let stride = get_u64(r)? as usize;
    let dt = get_f64(r)?;
    let a_max = get_f64(r)?;
    let recurrent_dropout = get_f64(r)?;
    let dense_dropout = get_f64(r)?;
    let mut mm = [0.0; 2 * FEATURE_DIM];
    for v in &mut mm {
        *v = get_f64(r)?;
    }
    let k = arch.n_classes();
    let encoder = get_cell(r, arch, FEATURE_DIM, hidden)?;
    let decoder = get_cell(r, arch, 1 + k, hidden)?;
    let head_w = get_vector(r, hidden)?;
    let head_b = get_vector(r, 1)?;
    let cls_w = get_matrix(r, k, hidden)?;
    let cls_b = get_vector(r, k)?;
    let m = EncoderDecoder {
        arch,
        encoder,
        decoder,
        head_w,
        head_b,
        cls_w,
        cls_b,
        recurrent_dropout,
        dense_dropout,
        window: WindowConfig { n_history, horizon, stride, dt },
        scaler: MinMaxScaler {
            min: mm[..FEATURE_DIM].try_into().expect("4 entries"),
            max: mm[FEATURE_DIM..].try_into().expect("4 entries"),
        },
        accel: AccelScaler { a_max },
    };
    m.validate()?;
    Ok(m)
}

pub fn save_model(m: &EncoderDecoder, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(m, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<EncoderDecoder> {
    read_model(&mut BufReader::new(File::open(path)?))
}
