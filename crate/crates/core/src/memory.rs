// The two elementary memory systems.
//
// KV-memory: a fixed-capacity ring buffer of (key, value) pairs read by
// softmax attention over the stored keys. FW-memory: a d_out x d_key fast
// weight matrix updated per step by a rank-one outer product (purely
// additive, or the delta rule with a dynamic learning rate) and read by a
// matrix-vector product. Keys and queries pass through the feature map
// phi = L2-normalized SiLU on the fast-weight side only; values never do.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::tensor::{phi, softmax_in_place};

// ── KV-memory ────────────────────────────────────────────────────────

/// Sliding-window key-value store: a circular array of up to `capacity`
/// (key, value) pairs in strict insertion order. Pushing into a full buffer
/// evicts exactly the oldest pair and returns it by value.
#[derive(Debug, Clone)]
pub struct KVMemoryState {
    keys: Vec<f64>,
    values: Vec<f64>,
    head: usize,
    count: usize,
    capacity: usize,
    d_key: usize,
    d_out: usize,
}

impl KVMemoryState {
    pub fn new(capacity: usize, d_key: usize, d_out: usize) -> Self {
        assert!(capacity >= 1, "window size must be positive");
        KVMemoryState {
            keys: vec![0.0; capacity * d_key],
            values: vec![0.0; capacity * d_out],
            head: 0,
            count: 0,
            capacity,
            d_key,
            d_out,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Key of the i-th stored pair in insertion order (0 = oldest).
    pub fn key(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.count);
        let slot = (self.head + i) % self.capacity;
        &self.keys[slot * self.d_key..(slot + 1) * self.d_key]
    }

    /// Value of the i-th stored pair in insertion order.
    pub fn value(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.count);
        let slot = (self.head + i) % self.capacity;
        &self.values[slot * self.d_out..(slot + 1) * self.d_out]
    }
}

/// Append (k, v); when the buffer is full the oldest pair is evicted and
/// returned.
pub fn kv_push(
    state: &mut KVMemoryState,
    k: &[f64],
    v: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    assert_eq!(k.len(), state.d_key, "kv_push: key length");
    assert_eq!(v.len(), state.d_out, "kv_push: value length");
    let (dk, dv) = (state.d_key, state.d_out);
    if state.count < state.capacity {
        let slot = (state.head + state.count) % state.capacity;
        state.keys[slot * dk..(slot + 1) * dk].copy_from_slice(k);
        state.values[slot * dv..(slot + 1) * dv].copy_from_slice(v);
        state.count += 1;
        None
    } else {
        let slot = state.head;
        let old_k = state.keys[slot * dk..(slot + 1) * dk].to_vec();
        let old_v = state.values[slot * dv..(slot + 1) * dv].to_vec();
        state.keys[slot * dk..(slot + 1) * dk].copy_from_slice(k);
        state.values[slot * dv..(slot + 1) * dv].copy_from_slice(v);
        state.head = (state.head + 1) % state.capacity;
        Some((old_k, old_v))
    }
}

/// Softmax attention over the stored pairs: V · softmax(K^T q), with no
/// 1/sqrt(d_key) scaling. An empty buffer reads as the zero vector so the
/// first step of a sequence is total.
pub fn kv_attend(state: &KVMemoryState, q: &[f64]) -> Vec<f64> {
    assert_eq!(q.len(), state.d_key, "kv_attend: query length");
    let mut out = vec![0.0; state.d_out];
    if state.count == 0 {
        return out;
    }
    let mut scores = vec![0.0; state.count];
    for (i, s) in scores.iter_mut().enumerate() {
        *s = linalg::dot(state.key(i), q);
    }
    softmax_in_place(&mut scores);
    for (i, &p) in scores.iter().enumerate() {
        linalg::axpy(p, state.value(i), &mut out);
    }
    out
}

// ── FW-memory ────────────────────────────────────────────────────────

/// Fast weight matrix W in R^{d_out x d_key}, zero-initialized; every update
/// changes W by a rank-one matrix.
#[derive(Debug, Clone)]
pub struct FWMemoryState {
    pub w: Vec<f64>,
    pub d_key: usize,
    pub d_out: usize,
}

impl FWMemoryState {
    pub fn new(d_key: usize, d_out: usize) -> Self {
        FWMemoryState { w: vec![0.0; d_out * d_key], d_key, d_out }
    }
}

/// Purely additive update: W += v ⊗ phi(k).
pub fn fw_update_linear(state: &mut FWMemoryState, k: &[f64], v: &[f64]) {
    assert_eq!(k.len(), state.d_key);
    assert_eq!(v.len(), state.d_out);
    let pk = phi(k);
    linalg::outer_acc(v, &pk, &mut state.w);
}

/// Delta-rule update with an explicit effective rate b:
/// W += b * (v - W phi(k)) ⊗ phi(k).
pub fn fw_update_delta_raw(state: &mut FWMemoryState, k: &[f64], v: &[f64], b: f64) {
    assert_eq!(k.len(), state.d_key);
    assert_eq!(v.len(), state.d_out);
    let pk = phi(k);
    let mut pred = vec![0.0; state.d_out];
    linalg::matvec(&state.w, &pk, &mut pred, state.d_out, state.d_key);
    let residual: Vec<f64> = v.iter().zip(pred.iter()).map(|(vv, pp)| b * (vv - pp)).collect();
    linalg::outer_acc(&residual, &pk, &mut state.w);
}

/// Delta-rule update with dynamic rate b = sigma_scale * sigmoid(beta).
pub fn fw_update_delta(
    state: &mut FWMemoryState,
    k: &[f64],
    v: &[f64],
    beta: f64,
    sigma_scale: f64,
) {
    let b = sigma_scale * math::sigmoid(beta);
    fw_update_delta_raw(state, k, v, b);
}

/// Read the fast weights with a query: W phi(q).
pub fn fw_read(state: &FWMemoryState, q: &[f64]) -> Vec<f64> {
    assert_eq!(q.len(), state.d_key);
    let pq = phi(q);
    let mut out = vec![0.0; state.d_out];
    linalg::matvec(&state.w, &pq, &mut out, state.d_out, state.d_key);
    out
}

// ── Chunk-wise parallel form of vanilla linear attention ─────────────

/// One chunk of the chunk-wise parallel form. Rows are time steps; keys and
/// queries must already be phi-transformed. Output row j combines the
/// inter-chunk term (W_in applied to q_j) with the causally masked
/// intra-chunk term sum_{i<=j} (k_i . q_j) v_i, and the returned state is
/// W_in + sum_i v_i ⊗ k_i.
pub fn la_chunkwise_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    w_in: &FWMemoryState,
    chunk_len: usize,
) -> Result<(Vec<f64>, FWMemoryState)> {
    let (dk, dv) = (w_in.d_key, w_in.d_out);
    if q.len() != chunk_len * dk || k.len() != chunk_len * dk || v.len() != chunk_len * dv {
        return Err(Error::Dimension(format!(
            "la_chunkwise_forward: chunk_len {chunk_len} with d_key {dk}, d_out {dv} \
             does not match q/k/v lengths {}/{}/{}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let mut y = vec![0.0; chunk_len * dv];
    for j in 0..chunk_len {
        let qj = &q[j * dk..(j + 1) * dk];
        let yj = &mut y[j * dv..(j + 1) * dv];
        linalg::matvec(&w_in.w, qj, yj, dv, dk);
        for i in 0..=j {
            let s = linalg::dot(&k[i * dk..(i + 1) * dk], qj);
            linalg::axpy(s, &v[i * dv..(i + 1) * dv], yj);
        }
    }
    let mut w_out = w_in.clone();
    for i in 0..chunk_len {
        linalg::outer_acc(&v[i * dv..(i + 1) * dv], &k[i * dk..(i + 1) * dk], &mut w_out.w);
    }
    Ok((y, w_out))
}

// ── Rotary position encoding ─────────────────────────────────────────

/// Rotate consecutive pairs of coordinates by position-dependent angles
/// theta_i = 10000^(-2i/d). Applied to KV-memory queries/keys only.
pub fn rope_rotate(x: &[f64], position: usize) -> Result<Vec<f64>> {
    let d = x.len();
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "rope requires an even key dimension, got {d}"
        )));
    }
    let mut out = vec![0.0; d];
    rope_rotate_into(x, position as f64, &mut out);
    Ok(out)
}

/// Rotation by a signed position; negative positions invert, which is the
/// VJP of the forward rotation.
pub fn rope_rotate_into(x: &[f64], position: f64, out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(d % 2, 0);
    for i in 0..d / 2 {
        let theta = math::powf(10000.0, -2.0 * i as f64 / d as f64);
        let angle = position * theta;
        let (sin, cos) = (math::sin(angle), math::cos(angle));
        let (x0, x1) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = x0 * cos - x1 * sin;
        out[2 * i + 1] = x0 * sin + x1 * cos;
    }
}

// ── Slow-net projection ──────────────────────────────────────────────

/// The trainable projection generating per-step variables from the input.
/// `w` is stored [d_in, out_dim] (output j is sum_i x[i] * w[i, j]); outputs
/// are sliced in the fixed order q, k, v, beta, mixer variables, and the
/// output dimension is exactly 2*d_key + d_out + 1 + mixer_extra.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    pub w: Vec<f64>,
    pub d_in: usize,
    pub d_key: usize,
    pub d_out: usize,
    /// 0 for sum mixing, 2 for dynamic scalar, d_out for dynamic vector.
    pub mixer_extra: usize,
}

impl ProjectionParams {
    pub fn out_dim(&self) -> usize {
        2 * self.d_key + self.d_out + 1 + self.mixer_extra
    }

    pub fn zeros(d_in: usize, d_key: usize, d_out: usize, mixer_extra: usize) -> Self {
        let out_dim = 2 * d_key + d_out + 1 + mixer_extra;
        ProjectionParams { w: vec![0.0; d_in * out_dim], d_in, d_key, d_out, mixer_extra }
    }
}

/// Per-step projection outputs. The mixer slice is raw (pre-sigmoid);
/// sigmoids are applied where the variables are consumed.
#[derive(Debug, Clone)]
pub struct Projected {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: f64,
    pub mix_raw: Vec<f64>,
}

/// Deterministic linear map of one input vector through the projection.
pub fn project(params: &ProjectionParams, x: &[f64]) -> Result<Projected> {
    if x.len() != params.d_in {
        return Err(Error::Dimension(format!(
            "project: input length {} does not match d_in {}",
            x.len(),
            params.d_in
        )));
    }
    let out_dim = params.out_dim();
    let mut out = vec![0.0; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        linalg::axpy(xi, &params.w[i * out_dim..(i + 1) * out_dim], &mut out);
    }
    let (dk, dv) = (params.d_key, params.d_out);
    Ok(Projected {
        q: out[..dk].to_vec(),
        k: out[dk..2 * dk].to_vec(),
        v: out[2 * dk..2 * dk + dv].to_vec(),
        beta: out[2 * dk + dv],
        mix_raw: out[2 * dk + dv + 1..].to_vec(),
    })
}
