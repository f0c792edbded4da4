//! Encoder-decoder acceleration forecaster.
//!
//! The encoder consumes the scaled observation window; its final `(h, c)`
//! seeds the decoder, which unrolls one step per forecast sample and emits a
//! scalar normalized acceleration through an affine head. The decoder input
//! at step `j` is the previous acceleration (the true label during training,
//! the model's own output at inference) and, for the maneuver-aware variant,
//! the softmax of a classifier applied to the encoder's final hidden state.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cell::{step_backward, step_batch, CellKind, CellParams, StepCache};
use crate::dataset::{AccelScaler, Feature, MinMaxScaler, TrajectorySample, WindowConfig, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::maneuver::ManeuverKind;
use crate::rng::SimRng;

/// Decoder input before the first forecast: normalized zero acceleration.
pub const GO_VALUE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[serde(rename = "rnn")]
    SimpleRnn,
    Lstm,
    #[serde(rename = "mlstm")]
    MLstm,
}

impl Architecture {
    pub fn cell(self) -> CellKind {
        match self {
            Self::SimpleRnn => CellKind::SimpleRnn,
            Self::Lstm | Self::MLstm => CellKind::Lstm,
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Self::MLstm => ManeuverKind::COUNT,
            _ => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SimpleRnn => "rnn",
            Self::Lstm => "lstm",
            Self::MLstm => "mlstm",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Self::SimpleRnn => 0,
            Self::Lstm => 1,
            Self::MLstm => 2,
        }
    }

    pub fn from_code(c: u64) -> Option<Self> {
        match c {
            0 => Some(Self::SimpleRnn),
            1 => Some(Self::Lstm),
            2 => Some(Self::MLstm),
            _ => None,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "simplernn" => Ok(Self::SimpleRnn),
            "lstm" => Ok(Self::Lstm),
            "mlstm" | "m-lstm" => Ok(Self::MLstm),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Small,
    Medium,
    Large,
}

impl SizePreset {
    pub fn hidden(self) -> usize {
        match self {
            Self::Small => 32,
            Self::Medium => 64,
            Self::Large => 128,
        }
    }
}

impl std::str::FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Self::Small),
            "medium" => Ok(Self::Medium),
            "large" => Ok(Self::Large),
            other => Err(Error::Config(format!("unknown size preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub arch: Architecture,
    pub encoder: CellParams,
    pub decoder: CellParams,
    /// Output head, `hidden -> 1`.
    pub head_w: DVector<f64>,
    pub head_b: DVector<f64>,
    /// Maneuver classifier, `hidden -> n_classes`; empty without one.
    pub cls_w: DMatrix<f64>,
    pub cls_b: DVector<f64>,
    pub recurrent_dropout: f64,
    pub dense_dropout: f64,
    pub window: WindowConfig,
    pub scaler: MinMaxScaler,
    pub accel: AccelScaler,
}

/// Inference output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Normalized accelerations, one per forecast sample.
    pub accel: Vec<f64>,
    pub class_probs: Option<Vec<f64>>,
}

/// A training batch in column-per-sample layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `n_history` matrices of shape `FEATURE_DIM x B`.
    pub inputs: Vec<DMatrix<f64>>,
    /// `horizon x B`
    pub targets: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&TrajectorySample]) -> Self {
        let b = samples.len();
        let n = samples.first().map_or(0, |s| s.history.len());
        let h = samples.first().map_or(0, |s| s.future_accel.len());
        let inputs = (0..n)
            .map(|t| DMatrix::from_fn(FEATURE_DIM, b, |r, j| samples[j].history[t][r]))
            .collect();
        let targets = DMatrix::from_fn(h, b, |r, j| samples[j].future_accel[r]);
        let labels = samples.iter().map(|s| s.label.index()).collect();
        Self { inputs, targets, labels }
    }

    pub fn size(&self) -> usize {
        self.targets.ncols()
    }
}

/// Fixed inverted-dropout masks for one pass.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub encoder_recurrent: DMatrix<f64>,
    pub decoder_recurrent: DMatrix<f64>,
    /// One `hidden x B` mask per decoder step, applied before the output head.
    pub dense: Vec<DMatrix<f64>>,
}

impl DropoutMasks {
    pub fn sample(model: &EncoderDecoder, batch: usize, rng: &mut SimRng) -> Self {
        let hd = model.hidden();
        let mut draw = |p: f64| {
            DMatrix::from_fn(hd, batch, |_, _| {
                if p > 0.0 && rng.random::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
        };
        let encoder_recurrent = draw(model.recurrent_dropout);
        let decoder_recurrent = draw(model.recurrent_dropout);
        let dense = (0..model.window.horizon).map(|_| draw(model.dense_dropout)).collect();
        Self { encoder_recurrent, decoder_recurrent, dense }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

/// Intermediate values of a training-mode pass.
pub struct Trace {
    enc: Vec<StepCache>,
    h_enc: DMatrix<f64>,
    probs: Option<DMatrix<f64>>,
    dec: Vec<StepCache>,
    head_in: Vec<DMatrix<f64>>,
    pub outputs: DMatrix<f64>,
    teacher: Option<DMatrix<f64>>,
}

/// Mean squared error over all entries.
pub fn mse(outputs: &[f64], labels: &[f64]) -> Result<f64> {
    if outputs.len() != labels.len() {
        return Err(Error::Dimension(format!("{} outputs vs {} labels", outputs.len(), labels.len())));
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    Ok(outputs.iter().zip(labels).map(|(o, l)| (o - l) * (o - l)).sum::<f64>() / outputs.len() as f64)
}

/// Mean negative log-likelihood of `labels` under column-wise distributions.
pub fn cross_entropy(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let b = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        .map(|(j, &l)| -probs[(l, j)].max(1e-300).ln())
        .sum::<f64>()
        / b
}

fn softmax_columns(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut col in p.column_iter_mut() {
        let m = col.max();
        col.apply(|v| *v = (*v - m).exp());
        let s = col.sum();
        col /= s;
    }
    p
}

impl EncoderDecoder {
    pub fn new(
        arch: Architecture,
        hidden: usize,
        window: WindowConfig,
        scaler: MinMaxScaler,
        accel: AccelScaler,
        rng: &mut SimRng,
    ) -> Self {
        let kind = arch.cell();
        let k = arch.n_classes();
        let encoder = CellParams::init(kind, FEATURE_DIM, hidden, rng);
        let decoder = CellParams::init(kind, 1 + k, hidden, rng);
        let bound = 1.0 / (hidden as f64).sqrt();
        let head_w = DVector::from_fn(hidden, |_, _| rng.random_range(-bound..bound));
        let head_b = DVector::from_element(1, GO_VALUE);
        let cls_w = DMatrix::from_fn(k, hidden, |_, _| rng.random_range(-bound..bound));
        let cls_b = DVector::zeros(k);
        Self {
            arch,
            encoder,
            decoder,
            head_w,
            head_b,
            cls_w,
            cls_b,
            recurrent_dropout: 0.2,
            dense_dropout: 0.1,
            window,
            scaler,
            accel,
        }
    }

    /// Same shapes, all parameters zero. Used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.param_slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn hidden(&self) -> usize {
        self.encoder.hidden_dim
    }

    pub fn horizon(&self) -> usize {
        self.window.horizon
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(10);
        v.extend(self.encoder.slices());
        v.extend(self.decoder.slices());
        v.push(self.head_w.as_slice());
        v.push(self.head_b.as_slice());
        v.push(self.cls_w.as_slice());
        v.push(self.cls_b.as_slice());
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(10);
        v.extend(self.encoder.slices_mut());
        v.extend(self.decoder.slices_mut());
        v.push(self.head_w.as_mut_slice());
        v.push(self.head_b.as_mut_slice());
        v.push(self.cls_w.as_mut_slice());
        v.push(self.cls_b.as_mut_slice());
        v
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let h = self.hidden();
        let k = self.arch.n_classes();
        if self.decoder.hidden_dim != h
            || self.decoder.input_dim != 1 + k
            || self.encoder.input_dim != FEATURE_DIM
            || self.head_w.len() != h
            || self.head_b.len() != 1
            || self.cls_w.shape() != (k, h)
            || self.cls_b.len() != k
        {
            return Err(Error::Dimension("encoder/decoder shapes inconsistent".into()));
        }
        Ok(())
    }

    fn encode(&self, inputs: &[DMatrix<f64>], mask: Option<&DMatrix<f64>>) -> (Vec<StepCache>, DMatrix<f64>, DMatrix<f64>) {
        let b = inputs.first().map_or(0, |m| m.ncols());
        let hd = self.hidden();
        let mut h = DMatrix::zeros(hd, b);
        let mut c = DMatrix::zeros(hd, b);
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let h_in = match mask {
                Some(m) => h.component_mul(m),
                None => h,
            };
            let cache = step_batch(&self.encoder, x.clone(), h_in, c);
            h = cache.h.clone();
            c = cache.c.clone();
            caches.push(cache);
        }
        (caches, h, c)
    }

    fn classify(&self, h_enc: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        if self.arch.n_classes() == 0 {
            return None;
        }
        let mut logits = &self.cls_w * h_enc;
        for mut col in logits.column_iter_mut() {
            col += &self.cls_b;
        }
        Some(softmax_columns(&logits))
    }

    fn decoder_input(&self, prev: &[f64], probs: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let k = self.arch.n_classes();
        DMatrix::from_fn(1 + k, prev.len(), |r, j| {
            if r == 0 {
                prev[j]
            } else {
                probs.expect("classifier output")[(r - 1, j)]
            }
        })
    }

    fn head(&self, h: &DMatrix<f64>) -> RowDVector<f64> {
        let mut y = self.head_w.tr_mul(h);
        y.add_scalar_mut(self.head_b[0]);
        y
    }

    /// Training-mode pass with teacher forcing.
    pub fn forward_train(&self, batch: &Batch, masks: Option<&DropoutMasks>) -> Trace {
        self.forward_train_mixed(batch, masks, None)
    }

    /// Training-mode pass. `teacher[(j, b)] = 1` feeds the true label of step
    /// `j - 1` to decoder step `j`, `0` feeds the model's own output; `None`
    /// teacher-forces every step. Row 0 is ignored.
    pub fn forward_train_mixed(
        &self,
        batch: &Batch,
        masks: Option<&DropoutMasks>,
        teacher: Option<DMatrix<f64>>,
    ) -> Trace {
        let b = batch.size();
        let hsteps = batch.targets.nrows();
        let (enc, h_enc, c_enc) = self.encode(&batch.inputs, masks.map(|m| &m.encoder_recurrent));
        let probs = self.classify(&h_enc);
        let mut h = h_enc.clone();
        let mut c = c_enc;
        let mut dec = Vec::with_capacity(hsteps);
        let mut head_in = Vec::with_capacity(hsteps);
        let mut outputs = DMatrix::zeros(hsteps, b);
        let mut prev = vec![GO_VALUE; b];
        for j in 0..hsteps {
            let x = self.decoder_input(&prev, probs.as_ref());
            let h_in = match masks {
                Some(m) => h.component_mul(&m.decoder_recurrent),
                None => h,
            };
            let cache = step_batch(&self.decoder, x, h_in, c);
            h = cache.h.clone();
            c = cache.c.clone();
            let hm = match masks {
                Some(m) => h.component_mul(&m.dense[j]),
                None => h.clone(),
            };
            let y = self.head(&hm);
            outputs.row_mut(j).copy_from(&y);
            head_in.push(hm);
            dec.push(cache);
            for (i, p) in prev.iter_mut().enumerate() {
                let truth = match &teacher {
                    Some(t) if j + 1 < hsteps => t[(j + 1, i)] != 0.0,
                    _ => true,
                };
                *p = if truth { batch.targets[(j, i)] } else { y[i] };
            }
        }
        Trace { enc, h_enc, probs, dec, head_in, outputs, teacher }
    }

    pub fn loss(&self, trace: &Trace, batch: &Batch, beta: f64) -> LossParts {
        let mse = mse(trace.outputs.as_slice(), batch.targets.as_slice()).unwrap_or(f64::NAN);
        let ce = trace.probs.as_ref().map_or(0.0, |p| cross_entropy(p, &batch.labels));
        LossParts { mse, cross_entropy: ce, total: mse + beta * ce }
    }

    /// Exact gradients of `scale * (mse + beta * ce)` for a stored pass.
    pub fn backward(
        &self,
        trace: &Trace,
        batch: &Batch,
        masks: Option<&DropoutMasks>,
        beta: f64,
        scale: f64,
    ) -> EncoderDecoder {
        let mut g = self.zeros_like();
        let b = batch.size();
        let hd = self.hidden();
        let hsteps = batch.targets.nrows();
        let k = self.arch.n_classes();
        let n_out = (hsteps * b).max(1) as f64;

        let mut dh_next = DMatrix::zeros(hd, b);
        let mut dc_next = DMatrix::zeros(hd, b);
        let mut dprobs = DMatrix::zeros(k, b);
        // gradient reaching output j through the next step's input
        let mut dfed = RowDVector::zeros(b);
        for j in (0..hsteps).rev() {
            let dy = (trace.outputs.row(j) - batch.targets.row(j)) * (2.0 * scale / n_out) + &dfed;
            let hm = &trace.head_in[j];
            g.head_w += hm * dy.transpose();
            g.head_b[0] += dy.sum();
            let mut dh = &self.head_w * &dy;
            if let Some(m) = masks {
                dh.component_mul_assign(&m.dense[j]);
            }
            dh += &dh_next;
            let (dx, dh_in, dc_prev) = step_backward(&self.decoder, &trace.dec[j], &dh, &dc_next, &mut g.decoder);
            if k > 0 {
                dprobs += dx.rows(1, k);
            }
            match &trace.teacher {
                Some(t) if j > 0 => {
                    for i in 0..b {
                        dfed[i] = if t[(j, i)] != 0.0 { 0.0 } else { dx[(0, i)] };
                    }
                }
                _ => dfed.fill(0.0),
            }
            dh_next = match masks {
                Some(m) => dh_in.component_mul(&m.decoder_recurrent),
                None => dh_in,
            };
            dc_next = dc_prev;
        }

        if let Some(p) = &trace.probs {
            let mut dlogits = DMatrix::zeros(k, b);
            for j in 0..b {
                let pj = p.column(j);
                let dot: f64 = pj.dot(&dprobs.column(j));
                for r in 0..k {
                    let onehot = if batch.labels[j] == r { 1.0 } else { 0.0 };
                    dlogits[(r, j)] =
                        pj[r] * (dprobs[(r, j)] - dot) + scale * beta * (pj[r] - onehot) / b as f64;
                }
            }
            g.cls_w += &dlogits * trace.h_enc.transpose();
            for col in dlogits.column_iter() {
                g.cls_b += col;
            }
            dh_next += self.cls_w.tr_mul(&dlogits);
        }

        for t in (0..trace.enc.len()).rev() {
            let (_, dh_in, dc_prev) = step_backward(&self.encoder, &trace.enc[t], &dh_next, &dc_next, &mut g.encoder);
            dh_next = match masks {
                Some(m) => dh_in.component_mul(&m.encoder_recurrent),
                None => dh_in,
            };
            dc_next = dc_prev;
        }
        g
    }

    /// Loss and gradients of one batch.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        masks: Option<&DropoutMasks>,
        beta: f64,
    ) -> (LossParts, EncoderDecoder) {
        let trace = self.forward_train(batch, masks);
        let loss = self.loss(&trace, batch, beta);
        let g = self.backward(&trace, batch, masks, beta, 1.0);
        (loss, g)
    }

    /// Autoregressive inference for a batch; returns `horizon x B` normalized
    /// accelerations and, for the maneuver-aware variant, class probabilities.
    pub fn predict_batch(&self, inputs: &[DMatrix<f64>], steps: usize) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let b = inputs.first().map_or(0, |m| m.ncols());
        let (_, h_enc, c_enc) = self.encode(inputs, None);
        let probs = self.classify(&h_enc);
        let mut h = h_enc;
        let mut c = c_enc;
        let mut out = DMatrix::zeros(steps, b);
        let mut prev = vec![GO_VALUE; b];
        for j in 0..steps {
            let x = self.decoder_input(&prev, probs.as_ref());
            let cache = step_batch(&self.decoder, x, h, c);
            let y = self.head(&cache.h);
            out.row_mut(j).copy_from(&y);
            prev.copy_from_slice(y.as_slice());
            h = cache.h;
            c = cache.c;
        }
        (out, probs)
    }

    /// Forecast for one already-scaled window.
    pub fn forward(&self, window: &[Feature]) -> Result<Forecast> {
        if window.len() != self.window.n_history {
            return Err(Error::Dimension(format!(
                "window has {} samples, model expects {}",
                window.len(),
                self.window.n_history
            )));
        }
        let inputs: Vec<DMatrix<f64>> =
            window.iter().map(|f| DMatrix::from_column_slice(FEATURE_DIM, 1, f)).collect();
        let (out, probs) = self.predict_batch(&inputs, self.horizon());
        Ok(Forecast {
            accel: out.as_slice().to_vec(),
            class_probs: probs.map(|p| p.as_slice().to_vec()),
        })
    }

    /// Inference-mode MSE (normalized) and class accuracy on a sample set.
    pub fn evaluate(&self, samples: &[TrajectorySample]) -> (f64, Option<f64>) {
        if samples.is_empty() {
            return (f64::NAN, None);
        }
        let mut se = 0.0;
        let mut count = 0usize;
        let mut correct = 0usize;
        for chunk in samples.chunks(256) {
            let refs: Vec<&TrajectorySample> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs);
            let (out, probs) = self.predict_batch(&batch.inputs, batch.targets.nrows());
            se += (&out - &batch.targets).iter().map(|d| d * d).sum::<f64>();
            count += out.len();
            if let Some(p) = probs {
                for (j, &l) in batch.labels.iter().enumerate() {
                    if p.column(j).imax() == l {
                        correct += 1;
                    }
                }
            }
        }
        let acc = (self.arch.n_classes() > 0).then(|| correct as f64 / samples.len() as f64);
        (se / count as f64, acc)
    }

    /// Inference MSE at each forecast step.
    pub fn per_step_mse(&self, samples: &[TrajectorySample]) -> Vec<f64> {
        let h = self.horizon();
        let mut se = vec![0.0; h];
        for chunk in samples.chunks(256) {
            let refs: Vec<&TrajectorySample> = chunk.iter().collect();
            let batch = Batch::from_samples(&refs);
            let (out, _) = self.predict_batch(&batch.inputs, h);
            for (i, row) in (&out - &batch.targets).row_iter().enumerate() {
                se[i] += row.iter().map(|d| d * d).sum::<f64>();
            }
        }
        se.into_iter().map(|v| v / samples.len() as f64).collect()
    }
}
