//! Recurrent cells with batched forward/backward passes.
//!
//! Activations are stored column-per-sample: a batch of `B` hidden states is
//! a `hidden_dim x B` matrix. LSTM gate rows are ordered input, forget,
//! output, candidate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    SimpleRnn,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            Self::SimpleRnn => 1,
            Self::Lstm => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `gates * hidden x input`
    pub wx: DMatrix<f64>,
    /// `gates * hidden x hidden`
    pub wh: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl CellParams {
    pub fn zeros(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Self {
        let rows = kind.gates() * hidden_dim;
        Self {
            kind,
            input_dim,
            hidden_dim,
            wx: DMatrix::zeros(rows, input_dim),
            wh: DMatrix::zeros(rows, hidden_dim),
            b: DVector::zeros(rows),
        }
    }

    /// Uniform fan-in scaled weights; LSTM forget-gate bias starts at 1.
    pub fn init(kind: CellKind, input_dim: usize, hidden_dim: usize, rng: &mut SimRng) -> Self {
        let mut p = Self::zeros(kind, input_dim, hidden_dim);
        let bound = 1.0 / ((input_dim + hidden_dim) as f64).sqrt();
        p.wx.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        p.wh.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        if kind == CellKind::Lstm {
            p.b.rows_mut(hidden_dim, hidden_dim).fill(1.0);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.kind.gates() * self.hidden_dim;
        if self.wx.shape() != (rows, self.input_dim)
            || self.wh.shape() != (rows, self.hidden_dim)
            || self.b.len() != rows
        {
            return Err(Error::Dimension(format!(
                "cell weights inconsistent with input {} / hidden {}",
                self.input_dim, self.hidden_dim
            )));
        }
        if self.wx.iter().chain(self.wh.iter()).chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dimension("non-finite cell weight".into()));
        }
        Ok(())
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [self.wx.as_slice(), self.wh.as_slice(), self.b.as_slice()]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [self.wx.as_mut_slice(), self.wh.as_mut_slice(), self.b.as_mut_slice()]
    }
}

/// Hidden (and, for LSTM, cell) state of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: DVector<f64>,
    pub c: DVector<f64>,
}

impl CellState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self { h: DVector::zeros(hidden_dim), c: DVector::zeros(hidden_dim) }
    }
}

/// Single-sample step. Returns the new state; the output is `state.h`.
pub fn cell_forward(p: &CellParams, x: &DVector<f64>, state: &CellState) -> Result<CellState> {
    if x.len() != p.input_dim || state.h.len() != p.hidden_dim || state.c.len() != p.hidden_dim {
        return Err(Error::Dimension(format!(
            "cell expects input {} / hidden {}, got {} / {}",
            p.input_dim,
            p.hidden_dim,
            x.len(),
            state.h.len()
        )));
    }
    let xm = DMatrix::from_column_slice(p.input_dim, 1, x.as_slice());
    let hm = DMatrix::from_column_slice(p.hidden_dim, 1, state.h.as_slice());
    let cm = DMatrix::from_column_slice(p.hidden_dim, 1, state.c.as_slice());
    let cache = step_batch(p, xm, hm, cm);
    Ok(CellState {
        h: DVector::from_column_slice(cache.h.as_slice()),
        c: DVector::from_column_slice(cache.c.as_slice()),
    })
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Everything one batched step needs for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub x: DMatrix<f64>,
    pub h_in: DMatrix<f64>,
    pub c_prev: DMatrix<f64>,
    /// post-activation gates, `gates * hidden x B`
    pub act: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub tanh_c: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

pub(crate) fn step_batch(
    p: &CellParams,
    x: DMatrix<f64>,
    h_in: DMatrix<f64>,
    c_prev: DMatrix<f64>,
) -> StepCache {
    let hd = p.hidden_dim;
    let bsz = x.ncols();
    let mut z = &p.wx * &x;
    z.gemm(1.0, &p.wh, &h_in, 1.0);
    for mut col in z.column_iter_mut() {
        col += &p.b;
    }
    match p.kind {
        CellKind::SimpleRnn => {
            z.apply(|v| *v = v.tanh());
            let h = z.clone();
            StepCache {
                x,
                h_in,
                c: DMatrix::zeros(hd, bsz),
                tanh_c: DMatrix::zeros(0, 0),
                c_prev,
                act: z,
                h,
            }
        }
        CellKind::Lstm => {
            for j in 0..bsz {
                let mut col = z.column_mut(j);
                for r in 0..3 * hd {
                    col[r] = sigmoid(col[r]);
                }
                for r in 3 * hd..4 * hd {
                    col[r] = col[r].tanh();
                }
            }
            let mut c = DMatrix::zeros(hd, bsz);
            let mut tanh_c = DMatrix::zeros(hd, bsz);
            let mut h = DMatrix::zeros(hd, bsz);
            for j in 0..bsz {
                let a = z.column(j);
                for r in 0..hd {
                    let (i, f, o, g) = (a[r], a[hd + r], a[2 * hd + r], a[3 * hd + r]);
                    let cn = f * c_prev[(r, j)] + i * g;
                    let tc = cn.tanh();
                    c[(r, j)] = cn;
                    tanh_c[(r, j)] = tc;
                    h[(r, j)] = o * tc;
                }
            }
            StepCache { x, h_in, c_prev, act: z, c, tanh_c, h }
        }
    }
}

/// Backpropagates one step. Accumulates weight gradients into `grad` and
/// returns `(dx, dh_in, dc_prev)`.
pub(crate) fn step_backward(
    p: &CellParams,
    cache: &StepCache,
    dh: &DMatrix<f64>,
    dc: &DMatrix<f64>,
    grad: &mut CellParams,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let hd = p.hidden_dim;
    let bsz = dh.ncols();
    let mut dz = DMatrix::zeros(p.kind.gates() * hd, bsz);
    let mut dc_prev = DMatrix::zeros(hd, bsz);
    match p.kind {
        CellKind::SimpleRnn => {
            for j in 0..bsz {
                for r in 0..hd {
                    let h = cache.act[(r, j)];
                    dz[(r, j)] = dh[(r, j)] * (1.0 - h * h);
                }
            }
        }
        CellKind::Lstm => {
            for j in 0..bsz {
                let a = cache.act.column(j);
                for r in 0..hd {
                    let (i, f, o, g) = (a[r], a[hd + r], a[2 * hd + r], a[3 * hd + r]);
                    let tc = cache.tanh_c[(r, j)];
                    let dct = dc[(r, j)] + dh[(r, j)] * o * (1.0 - tc * tc);
                    let d_o = dh[(r, j)] * tc;
                    let d_i = dct * g;
                    let d_g = dct * i;
                    let d_f = dct * cache.c_prev[(r, j)];
                    dc_prev[(r, j)] = dct * f;
                    dz[(r, j)] = d_i * i * (1.0 - i);
                    dz[(hd + r, j)] = d_f * f * (1.0 - f);
                    dz[(2 * hd + r, j)] = d_o * o * (1.0 - o);
                    dz[(3 * hd + r, j)] = d_g * (1.0 - g * g);
                }
            }
        }
    }
    grad.wx.gemm(1.0, &dz, &cache.x.transpose(), 1.0);
    grad.wh.gemm(1.0, &dz, &cache.h_in.transpose(), 1.0);
    for col in dz.column_iter() {
        grad.b += col;
    }
    let dx = p.wx.tr_mul(&dz);
    let dh_in = p.wh.tr_mul(&dz);
    (dx, dh_in, dc_prev)
}
