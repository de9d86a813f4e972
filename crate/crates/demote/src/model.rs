//! The three-part architecture: encoder H (single-layer bidirectional LSTM
//! with additive attention), classifier C, and one or more adversaries D,
//! with forward evaluation and exact analytic gradients for all three
//! training objectives.
//!
//! Everything runs in f64. Batches are processed timestep-major (one matrix
//! per position, columns = examples) so the inner loops are gemm calls.
//! Forward and backward are pure given parameters and inputs; parameters are
//! mutated only by the training module between steps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::linalg::{general_mat_mul, general_mat_vec_mul};
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EncodedExample, Vocabulary};
use crate::error::{Error, Result};

/// Probabilities are clamped to [CLAMP_LO, 1 - CLAMP_LO] before any log.
pub const CLAMP_LO: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_h: usize,
    pub d_mlp: usize,
    pub k_y: usize,
    pub k_z: usize,
}

impl ModelDims {
    /// Width of the concatenated bidirectional state (and of the pooled
    /// representation h).
    pub fn d_state(&self) -> usize {
        2 * self.d_h
    }

    /// Width of the additive-attention projection.
    pub fn d_attn(&self) -> usize {
        2 * self.d_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_emb == 0 || self.d_h == 0 || self.d_mlp == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.k_y < 2 || self.k_z < 2 {
            return Err(Error::validation("k_y and k_z must be >= 2"));
        }
        Ok(())
    }
}

/// One LSTM direction. Gate rows are stacked [input, forget, cell, output],
/// so `w` is (4*d_h, d_emb), `u` is (4*d_h, d_h) and `b` is 4*d_h.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmParams {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    /// (vocab_size, d_emb) token embedding table.
    pub embedding: Array2<f64>,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    /// (d_attn, 2*d_h) projection of the concatenated state.
    pub attn_w: Array2<f64>,
    pub attn_b: Array1<f64>,
    /// Attention scoring vector, length d_attn.
    pub attn_v: Array1<f64>,
}

/// A two-layer MLP head with tanh between the affine layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: EncoderParams,
    pub classifier: HeadParams,
    /// k = 1 is the main setting; k > 1 is the multi-adversary variant.
    pub adversaries: Vec<HeadParams>,
}

/// The parameter subsets that the three objectives update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder H plus classifier C, the subset that pre-training and the
    /// demotion step update.
    EncoderClassifier,
    /// A single adversary head.
    Adversary(usize),
}

impl LstmParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().unwrap(),
            self.u.as_slice().unwrap(),
            self.b.as_slice().unwrap(),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().unwrap(),
            self.u.as_slice_mut().unwrap(),
            self.b.as_slice_mut().unwrap(),
        ]
    }
}

impl EncoderParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![self.embedding.as_slice().unwrap()];
        v.extend(self.fwd.slices());
        v.extend(self.bwd.slices());
        v.push(self.attn_w.as_slice().unwrap());
        v.push(self.attn_b.as_slice().unwrap());
        v.push(self.attn_v.as_slice().unwrap());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.embedding.as_slice_mut().unwrap()];
        v.extend(self.fwd.slices_mut());
        v.extend(self.bwd.slices_mut());
        v.push(self.attn_w.as_slice_mut().unwrap());
        v.push(self.attn_b.as_slice_mut().unwrap());
        v.push(self.attn_v.as_slice_mut().unwrap());
        v
    }
}

impl HeadParams {
    pub(crate) fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    pub(crate) fn zeros_like(&self) -> HeadParams {
        HeadParams {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }
}

impl ModelParams {
    pub fn n_adversaries(&self) -> usize {
        self.adversaries.len()
    }

    /// A zeroed copy with the same shapes; used as the gradient container.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            dims: self.dims,
            encoder: EncoderParams {
                embedding: Array2::zeros(self.encoder.embedding.raw_dim()),
                fwd: LstmParams {
                    w: Array2::zeros(self.encoder.fwd.w.raw_dim()),
                    u: Array2::zeros(self.encoder.fwd.u.raw_dim()),
                    b: Array1::zeros(self.encoder.fwd.b.raw_dim()),
                },
                bwd: LstmParams {
                    w: Array2::zeros(self.encoder.bwd.w.raw_dim()),
                    u: Array2::zeros(self.encoder.bwd.u.raw_dim()),
                    b: Array1::zeros(self.encoder.bwd.b.raw_dim()),
                },
                attn_w: Array2::zeros(self.encoder.attn_w.raw_dim()),
                attn_b: Array1::zeros(self.encoder.attn_b.raw_dim()),
                attn_v: Array1::zeros(self.encoder.attn_v.raw_dim()),
            },
            classifier: self.classifier.zeros_like(),
            adversaries: self.adversaries.iter().map(|a| a.zeros_like()).collect(),
        }
    }

    /// Flat views over a parameter group, in a fixed documented order:
    /// embedding, fwd {w,u,b}, bwd {w,u,b}, attn {w,b,v}, then per head
    /// {w1,b1,w2,b2}.
    pub fn group_slices(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::EncoderClassifier => {
                let mut v = self.encoder.slices();
                v.extend(self.classifier.slices());
                v
            }
            ParamGroup::Adversary(j) => self.adversaries[j].slices(),
        }
    }

    pub fn group_slices_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        match group {
            ParamGroup::EncoderClassifier => {
                let mut v = self.encoder.slices_mut();
                v.extend(self.classifier.slices_mut());
                v
            }
            ParamGroup::Adversary(j) => self.adversaries[j].slices_mut(),
        }
    }

    /// Hash of one parameter group; the training module uses these to prove
    /// phase isolation (H/C frozen in adversary epochs and vice versa).
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for slice in self.group_slices(group) {
            for x in slice {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Hash over every tensor, recorded in run manifests.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for g in self.all_groups() {
            hasher.update(self.group_hash(g).as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn all_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::EncoderClassifier];
        groups.extend((0..self.adversaries.len()).map(ParamGroup::Adversary));
        groups
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-r..r))
}

fn lstm_init(rng: &mut ChaCha8Rng, d_in: usize, d_h: usize) -> LstmParams {
    // per-gate Xavier bound; gates share dims so one bound covers the stack
    let rw = (6.0 / (d_in + d_h) as f64).sqrt();
    let ru = (6.0 / (2 * d_h) as f64).sqrt();
    let w = Array2::from_shape_fn((4 * d_h, d_in), |_| rng.random_range(-rw..rw));
    let u = Array2::from_shape_fn((4 * d_h, d_h), |_| rng.random_range(-ru..ru));
    let mut b = Array1::zeros(4 * d_h);
    b.slice_mut(s![d_h..2 * d_h]).fill(1.0); // forget-gate bias
    LstmParams { w, u, b }
}

fn head_init(rng: &mut ChaCha8Rng, d_in: usize, d_mlp: usize, n_classes: usize) -> HeadParams {
    HeadParams {
        w1: xavier(rng, d_mlp, d_in),
        b1: Array1::zeros(d_mlp),
        w2: xavier(rng, n_classes, d_mlp),
        b2: Array1::zeros(n_classes),
    }
}

/// Deterministic initialization: Xavier-uniform weights, zero biases except
/// the LSTM forget gates (set to 1).
pub fn init_params(dims: &ModelDims, n_adversaries: usize, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    if n_adversaries == 0 {
        return Err(Error::validation("n_adversaries must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = EncoderParams {
        embedding: xavier(&mut rng, dims.vocab_size, dims.d_emb),
        fwd: lstm_init(&mut rng, dims.d_emb, dims.d_h),
        bwd: lstm_init(&mut rng, dims.d_emb, dims.d_h),
        attn_w: xavier(&mut rng, dims.d_attn(), dims.d_state()),
        attn_b: Array1::zeros(dims.d_attn()),
        attn_v: xavier(&mut rng, dims.d_attn(), 1).column(0).to_owned(),
    };
    let classifier = head_init(&mut rng, dims.d_state(), dims.d_mlp, dims.k_y);
    let adversaries = (0..n_adversaries)
        .map(|_| head_init(&mut rng, dims.d_state(), dims.d_mlp, dims.k_z))
        .collect();
    Ok(ModelParams {
        dims: *dims,
        encoder,
        classifier,
        adversaries,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediate state of one LSTM direction, indexed by sequence position.
struct DirTrace {
    /// (4*d_h, B) post-activation gates [i, f, g, o] per position.
    gates: Vec<Array2<f64>>,
    /// (d_h, B) cell state after the length-mask select.
    c: Vec<Array2<f64>>,
    /// tanh of the pre-mask candidate cell state.
    tc: Vec<Array2<f64>>,
    /// (d_h, B) hidden state after the length-mask select.
    h: Vec<Array2<f64>>,
}

/// Everything the encoder backward pass needs.
pub struct EncoderTrace {
    /// Position-major token ids: ids[t][i] for example column i.
    ids: Vec<Vec<usize>>,
    lens: Vec<usize>,
    /// (d_emb, B) embedded inputs per position.
    e: Vec<Array2<f64>>,
    fwd: DirTrace,
    bwd: DirTrace,
    /// (2*d_h, B) concatenated states per position.
    s_cat: Vec<Array2<f64>>,
    /// (d_attn, B) attention projections per position.
    u_attn: Vec<Array2<f64>>,
    /// (T, B) attention weights, zero at padded positions.
    pub attn: Array2<f64>,
    /// (2*d_h, B) pooled representation.
    pub h_out: Array2<f64>,
}

fn run_direction(
    lstm: &LstmParams,
    e: &[Array2<f64>],
    lens: &[usize],
    reverse: bool,
    d_h: usize,
) -> DirTrace {
    let t_max = e.len();
    let b = lens.len();
    let mut trace = DirTrace {
        gates: vec![Array2::zeros((0, 0)); t_max],
        c: vec![Array2::zeros((0, 0)); t_max],
        tc: vec![Array2::zeros((0, 0)); t_max],
        h: vec![Array2::zeros((0, 0)); t_max],
    };
    let mut h_prev = Array2::zeros((d_h, b));
    let mut c_prev = Array2::zeros((d_h, b));
    let order: Vec<usize> = if reverse {
        (0..t_max).rev().collect()
    } else {
        (0..t_max).collect()
    };
    for &t in &order {
        let mut z = Array2::zeros((4 * d_h, b));
        general_mat_mul(1.0, &lstm.w, &e[t], 0.0, &mut z);
        general_mat_mul(1.0, &lstm.u, &h_prev, 1.0, &mut z);
        z += &lstm
            .b
            .view()
            .insert_axis(Axis(1))
            .broadcast((4 * d_h, b))
            .unwrap();
        // activations in place: sigmoid on i, f, o rows; tanh on g rows
        for ((r, _), v) in z.indexed_iter_mut() {
            *v = if r >= 2 * d_h && r < 3 * d_h {
                v.tanh()
            } else {
                sigmoid(*v)
            };
        }
        let i_g = z.slice(s![0..d_h, ..]);
        let f_g = z.slice(s![d_h..2 * d_h, ..]);
        let g_g = z.slice(s![2 * d_h..3 * d_h, ..]);
        let o_g = z.slice(s![3 * d_h..4 * d_h, ..]);

        let c_star = &f_g * &c_prev + &i_g * &g_g;
        let tc = c_star.mapv(f64::tanh);
        let h_star = &o_g * &tc;

        let mut c_t = c_star;
        let mut h_t = h_star;
        for (col, &len) in lens.iter().enumerate() {
            if t >= len {
                c_t.column_mut(col).assign(&c_prev.column(col));
                h_t.column_mut(col).assign(&h_prev.column(col));
            }
        }
        h_prev = h_t.clone();
        c_prev = c_t.clone();
        trace.gates[t] = z;
        trace.c[t] = c_t;
        trace.tc[t] = tc;
        trace.h[t] = h_t;
    }
    trace
}

/// Batched encoder forward pass. `batch` must be non-empty and every id
/// must be a valid row of the embedding table.
pub fn encode_batch(enc: &EncoderParams, batch: &[&EncodedExample]) -> Result<EncoderTrace> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let vocab_size = enc.embedding.nrows();
    let d_emb = enc.embedding.ncols();
    let d_h = enc.fwd.u.ncols();
    let d_state = 2 * d_h;
    let d_attn = enc.attn_v.len();
    let b = batch.len();

    let lens: Vec<usize> = batch.iter().map(|ex| ex.len).collect();
    let t_max = *lens.iter().max().unwrap();
    for (i, ex) in batch.iter().enumerate() {
        if ex.len == 0 || ex.len > ex.ids.len() {
            return Err(Error::validation(format!(
                "batch example {i}: bad length {} for {} ids",
                ex.len,
                ex.ids.len()
            )));
        }
        for &id in &ex.ids {
            if id >= vocab_size {
                return Err(Error::validation(format!(
                    "batch example {i}: token id {id} out of range for vocab size {vocab_size}"
                )));
            }
        }
    }

    let mut ids = vec![vec![0usize; b]; t_max];
    let mut e = Vec::with_capacity(t_max);
    for (t, ids_t) in ids.iter_mut().enumerate() {
        let mut e_t = Array2::zeros((d_emb, b));
        for (i, ex) in batch.iter().enumerate() {
            let id = if t < ex.ids.len() { ex.ids[t] } else { 0 };
            ids_t[i] = id;
            e_t.column_mut(i).assign(&enc.embedding.row(id));
        }
        e.push(e_t);
    }

    let fwd = run_direction(&enc.fwd, &e, &lens, false, d_h);
    let bwd = run_direction(&enc.bwd, &e, &lens, true, d_h);

    let mut s_cat = Vec::with_capacity(t_max);
    let mut u_attn = Vec::with_capacity(t_max);
    let mut scores = Array2::zeros((t_max, b));
    for t in 0..t_max {
        let mut s_t = Array2::zeros((d_state, b));
        s_t.slice_mut(s![0..d_h, ..]).assign(&fwd.h[t]);
        s_t.slice_mut(s![d_h..d_state, ..]).assign(&bwd.h[t]);
        let mut u_t = Array2::zeros((d_attn, b));
        general_mat_mul(1.0, &enc.attn_w, &s_t, 0.0, &mut u_t);
        u_t += &enc
            .attn_b
            .view()
            .insert_axis(Axis(1))
            .broadcast((d_attn, b))
            .unwrap();
        u_t.mapv_inplace(f64::tanh);
        let mut score_t = Array1::zeros(b);
        general_mat_vec_mul(1.0, &u_t.t(), &enc.attn_v, 0.0, &mut score_t);
        scores.row_mut(t).assign(&score_t);
        s_cat.push(s_t);
        u_attn.push(u_t);
    }
    for (i, &len) in lens.iter().enumerate() {
        for t in len..t_max {
            scores[[t, i]] = f64::NEG_INFINITY;
        }
    }
    // column softmax over positions
    let mut attn = scores;
    for mut col in attn.axis_iter_mut(Axis(1)) {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
    }

    let mut h_out = Array2::zeros((d_state, b));
    for t in 0..t_max {
        let weights = attn.row(t);
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                h_out.column_mut(i).scaled_add(w, &s_cat[t].column(i));
            }
        }
    }

    Ok(EncoderTrace {
        ids,
        lens,
        e,
        fwd,
        bwd,
        s_cat,
        u_attn,
        attn,
        h_out,
    })
}

/// Encodes one example: returns the pooled representation h (size 2*d_h)
/// and the attention weights over the `len` real positions.
pub fn encode_text(
    enc: &EncoderParams,
    ids: &[usize],
    len: usize,
) -> Result<(Array1<f64>, Vec<f64>)> {
    let ex = EncodedExample {
        ids: ids.to_vec(),
        len,
        target: 0,
        protected: 0,
    };
    let trace = encode_batch(enc, &[&ex])?;
    let h = trace.h_out.column(0).to_owned();
    let attn = (0..len).map(|t| trace.attn[[t, 0]]).collect();
    Ok((h, attn))
}

/// Forward state of one MLP head on a batch.
pub struct HeadTrace {
    /// (d_mlp, B) post-tanh hidden layer.
    pub m: Array2<f64>,
    /// (n_classes, B) softmax output.
    pub p: Array2<f64>,
}

/// Batched head forward: softmax(w2 tanh(w1 h + b1) + b2) per column.
pub fn head_forward_batch(head: &HeadParams, h: &Array2<f64>) -> HeadTrace {
    let b = h.ncols();
    let d_mlp = head.w1.nrows();
    let k = head.w2.nrows();
    let mut m = Array2::zeros((d_mlp, b));
    general_mat_mul(1.0, &head.w1, h, 0.0, &mut m);
    m += &head
        .b1
        .view()
        .insert_axis(Axis(1))
        .broadcast((d_mlp, b))
        .unwrap();
    m.mapv_inplace(f64::tanh);
    let mut logits = Array2::zeros((k, b));
    general_mat_mul(1.0, &head.w2, &m, 0.0, &mut logits);
    logits += &head
        .b2
        .view()
        .insert_axis(Axis(1))
        .broadcast((k, b))
        .unwrap();
    let mut p = logits;
    for mut col in p.axis_iter_mut(Axis(1)) {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
    }
    HeadTrace { m, p }
}

/// Single-vector head forward; errors on a width mismatch.
pub fn head_forward(head: &HeadParams, h: &Array1<f64>) -> Result<Array1<f64>> {
    if h.len() != head.w1.ncols() {
        return Err(Error::validation(format!(
            "head expects input of size {}, got {}",
            head.w1.ncols(),
            h.len()
        )));
    }
    let h2 = h.view().insert_axis(Axis(1)).to_owned();
    let trace = head_forward_batch(head, &h2);
    Ok(trace.p.column(0).to_owned())
}

fn clamped(p: f64) -> f64 {
    p.clamp(CLAMP_LO, 1.0 - CLAMP_LO)
}

/// d(-log clamp(p))/dp: zero outside the clamp window.
fn dlog_clamped(p: f64) -> f64 {
    if p > CLAMP_LO && p < 1.0 - CLAMP_LO {
        -1.0 / p
    } else {
        0.0
    }
}

/// -log pred[gold] with the prediction clamped away from 0 and 1.
pub fn cross_entropy(pred: &Array1<f64>, gold: usize) -> f64 {
    assert!(gold < pred.len(), "gold class out of range");
    -clamped(pred[gold]).ln()
}

/// Cross-entropy against the uniform distribution over the classes:
/// -(1/K) sum_c log pred[c]. Minimized (value ln K) exactly at uniform;
/// this is the demotion target that makes the adversary guess randomly.
pub fn uniform_target_loss(pred: &Array1<f64>) -> f64 {
    let k = pred.len() as f64;
    -pred.iter().map(|&p| clamped(p).ln()).sum::<f64>() / k
}

/// Which objective a backward pass differentiates, and therefore which
/// parameter subset receives gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// Mean CE of the classifier vs the target labels; updates H and C.
    Pretrain,
    /// Mean CE of one adversary vs the protected labels; updates that
    /// adversary only.
    AdversaryStep(usize),
    /// alpha * target CE + (1 - alpha) * mean uniform-target loss over the
    /// adversaries; updates H and C only.
    DemotionStep { alpha: f64 },
}

/// Loss components of one batch, unweighted means.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchLoss {
    pub target_ce: Option<f64>,
    pub demotion_term: Option<f64>,
    pub adversary_ce: Option<f64>,
}

impl BatchLoss {
    pub fn is_finite(&self) -> bool {
        [self.target_ce, self.demotion_term, self.adversary_ce]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Mean clamped CE of a batched head output against per-column gold labels.
pub(crate) fn batch_ce(p: &Array2<f64>, golds: &[usize]) -> f64 {
    let b = golds.len() as f64;
    golds
        .iter()
        .enumerate()
        .map(|(i, &y)| -clamped(p[[y, i]]).ln())
        .sum::<f64>()
        / b
}

/// Mean clamped uniform-target loss of a batched head output.
pub(crate) fn batch_ut(p: &Array2<f64>) -> f64 {
    let k = p.nrows() as f64;
    let b = p.ncols() as f64;
    -p.iter().map(|&v| clamped(v).ln()).sum::<f64>() / (k * b)
}

/// dLoss/dlogits for `weight * mean-CE`: per column, through the clamp and
/// the softmax Jacobian. In the unclamped regime this is
/// weight/B * (p - onehot).
pub(crate) fn ce_dlogits(p: &Array2<f64>, golds: &[usize], weight: f64) -> Array2<f64> {
    let (k, b) = (p.nrows(), p.ncols());
    let scale = weight / b as f64;
    let mut dl = Array2::zeros((k, b));
    for (i, &y) in golds.iter().enumerate() {
        let g = scale * dlog_clamped(p[[y, i]]);
        // dL/dz_j = p_j * (g_j - sum_c g_c p_c) with g supported on the gold class
        let dot = g * p[[y, i]];
        for j in 0..k {
            let gj = if j == y { g } else { 0.0 };
            dl[[j, i]] = p[[j, i]] * (gj - dot);
        }
    }
    dl
}

/// dLoss/dlogits for `weight * mean uniform-target loss`.
pub(crate) fn ut_dlogits(p: &Array2<f64>, weight: f64) -> Array2<f64> {
    let (k, b) = (p.nrows(), p.ncols());
    let scale = weight / (k as f64 * b as f64);
    let mut dl = Array2::zeros((k, b));
    for i in 0..b {
        let mut dot = 0.0;
        let mut g = vec![0.0; k];
        for j in 0..k {
            g[j] = scale * dlog_clamped(p[[j, i]]);
            dot += g[j] * p[[j, i]];
        }
        for j in 0..k {
            dl[[j, i]] = p[[j, i]] * (g[j] - dot);
        }
    }
    dl
}

/// Backward through one head given dLoss/dlogits. Writes the head's
/// parameter gradients when `grads` is provided (the demotion step
/// propagates through the adversaries without updating them) and returns
/// dLoss/dh.
pub(crate) fn head_backward_batch(
    head: &HeadParams,
    trace: &HeadTrace,
    h: &Array2<f64>,
    dlogits: &Array2<f64>,
    grads: Option<&mut HeadParams>,
) -> Array2<f64> {
    let b = h.ncols();
    let d_mlp = head.w1.nrows();
    let mut dm = Array2::zeros((d_mlp, b));
    general_mat_mul(1.0, &head.w2.t().to_owned(), dlogits, 0.0, &mut dm);
    let dpre1 = &dm * &trace.m.mapv(|m| 1.0 - m * m);
    if let Some(g) = grads {
        general_mat_mul(1.0, dlogits, &trace.m.t().to_owned(), 1.0, &mut g.w2);
        g.b2 += &dlogits.sum_axis(Axis(1));
        general_mat_mul(1.0, &dpre1, &h.t().to_owned(), 1.0, &mut g.w1);
        g.b1 += &dpre1.sum_axis(Axis(1));
    }
    let mut dh = Array2::zeros((h.nrows(), b));
    general_mat_mul(1.0, &head.w1.t().to_owned(), &dpre1, 0.0, &mut dh);
    dh
}

fn backward_direction(
    lstm: &LstmParams,
    dir: &DirTrace,
    e: &[Array2<f64>],
    ids: &[Vec<usize>],
    lens: &[usize],
    d_s: &[Array2<f64>],
    dir_offset: usize,
    reverse: bool,
    d_h: usize,
    grads: &mut LstmParams,
    d_emb_table: &mut Array2<f64>,
) {
    let t_max = e.len();
    let b = lens.len();
    let mut dh_carry: Array2<f64> = Array2::zeros((d_h, b));
    let mut dc_carry: Array2<f64> = Array2::zeros((d_h, b));
    // walk positions opposite to the direction's processing order
    let order: Vec<usize> = if reverse {
        (0..t_max).collect()
    } else {
        (0..t_max).rev().collect()
    };
    let zero_state = Array2::zeros((d_h, b));
    for &t in &order {
        let boundary = if reverse { t + 1 >= t_max } else { t == 0 };
        let t_prev = if reverse { t + 1 } else { t.wrapping_sub(1) };
        let h_prev = if boundary { &zero_state } else { &dir.h[t_prev] };
        let c_prev = if boundary { &zero_state } else { &dir.c[t_prev] };

        let dh_total = &d_s[t].slice(s![dir_offset..dir_offset + d_h, ..]) + &dh_carry;
        let gates = &dir.gates[t];
        let i_g = gates.slice(s![0..d_h, ..]);
        let f_g = gates.slice(s![d_h..2 * d_h, ..]);
        let g_g = gates.slice(s![2 * d_h..3 * d_h, ..]);
        let o_g = gates.slice(s![3 * d_h..4 * d_h, ..]);
        let tc = &dir.tc[t];

        // mask: gradients flow through the gates only at real positions;
        // at padded positions the state was carried, so pass straight through
        let mut dh_eff = dh_total.clone();
        let mut pass_h = Array2::zeros((d_h, b));
        let mut dc_eff_carry = dc_carry.clone();
        let mut pass_c = Array2::zeros((d_h, b));
        for (col, &len) in lens.iter().enumerate() {
            if t >= len {
                pass_h.column_mut(col).assign(&dh_total.column(col));
                dh_eff.column_mut(col).fill(0.0);
                pass_c.column_mut(col).assign(&dc_carry.column(col));
                dc_eff_carry.column_mut(col).fill(0.0);
            }
        }

        let do_ = &dh_eff * tc;
        let dtc = &dh_eff * &o_g;
        let dc = &dtc * &tc.mapv(|v| 1.0 - v * v) + &dc_eff_carry;
        let di = &dc * &g_g;
        let dg = &dc * &i_g;
        let df = &dc * c_prev;

        let mut dz = Array2::zeros((4 * d_h, b));
        dz.slice_mut(s![0..d_h, ..]).assign(&(&di * &i_g * &i_g.mapv(|v| 1.0 - v)));
        dz.slice_mut(s![d_h..2 * d_h, ..]).assign(&(&df * &f_g * &f_g.mapv(|v| 1.0 - v)));
        dz.slice_mut(s![2 * d_h..3 * d_h, ..]).assign(&(&dg * &g_g.mapv(|v| 1.0 - v * v)));
        dz.slice_mut(s![3 * d_h..4 * d_h, ..]).assign(&(&do_ * &o_g * &o_g.mapv(|v| 1.0 - v)));

        general_mat_mul(1.0, &dz, &e[t].t().to_owned(), 1.0, &mut grads.w);
        general_mat_mul(1.0, &dz, &h_prev.t().to_owned(), 1.0, &mut grads.u);
        grads.b += &dz.sum_axis(Axis(1));

        let mut de_t = Array2::zeros((e[t].nrows(), b));
        general_mat_mul(1.0, &lstm.w.t().to_owned(), &dz, 0.0, &mut de_t);
        for (col, &len) in lens.iter().enumerate() {
            if t < len {
                let id = ids[t][col];
                let mut row = d_emb_table.row_mut(id);
                row += &de_t.column(col);
            }
        }

        general_mat_mul(1.0, &lstm.u.t().to_owned(), &dz, 0.0, &mut dh_carry);
        dh_carry += &pass_h;
        dc_carry = &dc * &f_g + &pass_c;
    }
}

/// Backward through attention and both LSTM directions given dLoss/dh_out.
fn encoder_backward(
    enc: &EncoderParams,
    trace: &EncoderTrace,
    d_hout: &Array2<f64>,
    grads: &mut EncoderParams,
) {
    let t_max = trace.e.len();
    let b = trace.lens.len();
    let d_h = enc.fwd.u.ncols();
    let d_state = 2 * d_h;
    let d_attn = enc.attn_v.len();

    // dA[t,i] = s_t[:,i] . d_hout[:,i];  dS_t += a[t,i] * d_hout[:,i]
    let mut d_attn_w = Array2::zeros((t_max, b));
    let mut d_s: Vec<Array2<f64>> = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut ds_t = Array2::zeros((d_state, b));
        for i in 0..b {
            let a = trace.attn[[t, i]];
            if a != 0.0 {
                ds_t.column_mut(i).scaled_add(a, &d_hout.column(i));
            }
            d_attn_w[[t, i]] = trace.s_cat[t].column(i).dot(&d_hout.column(i));
        }
        d_s.push(ds_t);
    }
    // softmax backward per column; padded positions have a = 0 so drop out
    let mut d_score = Array2::zeros((t_max, b));
    for i in 0..b {
        let mut dot = 0.0;
        for t in 0..t_max {
            dot += trace.attn[[t, i]] * d_attn_w[[t, i]];
        }
        for t in 0..t_max {
            d_score[[t, i]] = trace.attn[[t, i]] * (d_attn_w[[t, i]] - dot);
        }
    }
    for t in 0..t_max {
        let ds_row = d_score.row(t);
        // dv += U_t . dscore_t
        let mut dv = Array1::zeros(d_attn);
        general_mat_vec_mul(1.0, &trace.u_attn[t], &ds_row.to_owned(), 0.0, &mut dv);
        grads.attn_v += &dv;
        // dU_t = v outer dscore_t, through tanh
        let mut dpre = Array2::zeros((d_attn, b));
        for i in 0..b {
            let sc = ds_row[i];
            if sc != 0.0 {
                dpre.column_mut(i).scaled_add(sc, &enc.attn_v);
            }
        }
        dpre = &dpre * &trace.u_attn[t].mapv(|u| 1.0 - u * u);
        general_mat_mul(1.0, &dpre, &trace.s_cat[t].t().to_owned(), 1.0, &mut grads.attn_w);
        grads.attn_b += &dpre.sum_axis(Axis(1));
        let mut ds_extra = Array2::zeros((d_state, b));
        general_mat_mul(1.0, &enc.attn_w.t().to_owned(), &dpre, 0.0, &mut ds_extra);
        d_s[t] += &ds_extra;
    }

    backward_direction(
        &enc.fwd, &trace.fwd, &trace.e, &trace.ids, &trace.lens, &d_s, 0, false, d_h,
        &mut grads.fwd, &mut grads.embedding,
    );
    backward_direction(
        &enc.bwd, &trace.bwd, &trace.e, &trace.ids, &trace.lens, &d_s, d_h, true, d_h,
        &mut grads.bwd, &mut grads.embedding,
    );
}

/// Evaluates the objective named by `spec` on a batch (forward only).
pub fn objective(params: &ModelParams, batch: &[&EncodedExample], spec: &LossSpec) -> Result<f64> {
    let trace = encode_batch(&params.encoder, batch)?;
    match spec {
        LossSpec::Pretrain => {
            let golds: Vec<usize> = batch.iter().map(|ex| ex.target).collect();
            let head = head_forward_batch(&params.classifier, &trace.h_out);
            Ok(batch_ce(&head.p, &golds))
        }
        LossSpec::AdversaryStep(j) => {
            let golds: Vec<usize> = batch.iter().map(|ex| ex.protected).collect();
            let head = head_forward_batch(&params.adversaries[*j], &trace.h_out);
            Ok(batch_ce(&head.p, &golds))
        }
        LossSpec::DemotionStep { alpha } => {
            let golds: Vec<usize> = batch.iter().map(|ex| ex.target).collect();
            let head = head_forward_batch(&params.classifier, &trace.h_out);
            let ce = batch_ce(&head.p, &golds);
            let k = params.adversaries.len() as f64;
            let ut = params
                .adversaries
                .iter()
                .map(|adv| batch_ut(&head_forward_batch(adv, &trace.h_out).p))
                .sum::<f64>()
                / k;
            Ok(alpha * ce + (1.0 - alpha) * ut)
        }
    }
}

/// Exact analytic gradients of the objective named by `spec`, with respect
/// to exactly the parameter subset its min operator names; every other
/// tensor in the returned container stays zero.
pub fn backward(
    params: &ModelParams,
    batch: &[&EncodedExample],
    spec: &LossSpec,
) -> Result<(ModelParams, BatchLoss)> {
    if let LossSpec::AdversaryStep(j) = spec {
        if *j >= params.adversaries.len() {
            return Err(Error::validation(format!(
                "adversary index {j} out of range for {} adversaries",
                params.adversaries.len()
            )));
        }
    }
    let mut grads = params.zeros_like();
    let trace = encode_batch(&params.encoder, batch)?;
    let mut loss = BatchLoss::default();

    match spec {
        LossSpec::Pretrain => {
            let golds: Vec<usize> = batch.iter().map(|ex| ex.target).collect();
            let head = head_forward_batch(&params.classifier, &trace.h_out);
            loss.target_ce = Some(batch_ce(&head.p, &golds));
            let dlogits = ce_dlogits(&head.p, &golds, 1.0);
            let d_hout = head_backward_batch(
                &params.classifier,
                &head,
                &trace.h_out,
                &dlogits,
                Some(&mut grads.classifier),
            );
            encoder_backward(&params.encoder, &trace, &d_hout, &mut grads.encoder);
        }
        LossSpec::AdversaryStep(j) => {
            let golds: Vec<usize> = batch.iter().map(|ex| ex.protected).collect();
            let head = head_forward_batch(&params.adversaries[*j], &trace.h_out);
            loss.adversary_ce = Some(batch_ce(&head.p, &golds));
            let dlogits = ce_dlogits(&head.p, &golds, 1.0);
            // min over D only: the encoder receives no gradient
            head_backward_batch(
                &params.adversaries[*j],
                &head,
                &trace.h_out,
                &dlogits,
                Some(&mut grads.adversaries[*j]),
            );
        }
        LossSpec::DemotionStep { alpha } => {
            let golds: Vec<usize> = batch.iter().map(|ex| ex.target).collect();
            let head = head_forward_batch(&params.classifier, &trace.h_out);
            loss.target_ce = Some(batch_ce(&head.p, &golds));
            let dlogits = ce_dlogits(&head.p, &golds, *alpha);
            let mut d_hout = head_backward_batch(
                &params.classifier,
                &head,
                &trace.h_out,
                &dlogits,
                Some(&mut grads.classifier),
            );
            let k = params.adversaries.len() as f64;
            let mut ut_sum = 0.0;
            for adv in &params.adversaries {
                let adv_head = head_forward_batch(adv, &trace.h_out);
                ut_sum += batch_ut(&adv_head.p);
                let dlogits = ut_dlogits(&adv_head.p, (1.0 - alpha) / k);
                // min over H, C only: adversary parameters receive no gradient
                let dh = head_backward_batch(adv, &adv_head, &trace.h_out, &dlogits, None);
                d_hout += &dh;
            }
            loss.demotion_term = Some(ut_sum / k);
            encoder_backward(&params.encoder, &trace, &d_hout, &mut grads.encoder);
        }
    }
    Ok((grads, loss))
}

/// Versioned checkpoint container. Serialization is deterministic JSON with
/// shortest-round-trip floats, so save -> load -> save is byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
    pub vocab_tokens: Vec<String>,
    pub pad_id: usize,
    pub unk_id: usize,
    pub vocab_hash: String,
    pub config_echo: BTreeMap<String, String>,
    /// Epoch whose dev metrics selected this checkpoint, when applicable.
    pub selected_epoch: Option<usize>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        vocab: &Vocabulary,
        config_echo: BTreeMap<String, String>,
        selected_epoch: Option<usize>,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params,
            vocab_tokens: vocab.tokens().to_vec(),
            pad_id: vocab.pad_id,
            unk_id: vocab.unk_id,
            vocab_hash: vocab.hash(),
            config_echo,
            selected_epoch,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab_tokens.clone(), self.pad_id, self.unk_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)
            .map_err(|e| Error::validation(format!("checkpoint serialization failed: {e}")))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::validation(format!("cannot parse checkpoint {path:?}: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let vocab = ckpt.vocabulary();
        if vocab.hash() != ckpt.vocab_hash {
            return Err(Error::validation(format!(
                "vocabulary mismatch: stored hash {} but tokens hash to {}",
                ckpt.vocab_hash,
                vocab.hash()
            )));
        }
        Ok(ckpt)
    }
}
