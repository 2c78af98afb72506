// Independent reference implementations used to validate the main engine.
//
// Everything here is written as naive straight-line loops over nested
// Vec<Vec<f64>> matrices and plain lists — no ring buffers, no tapes, no
// shared kernels — so agreement with the engine is meaningful. Only the
// scalar math primitives (exp, ln, sqrt, sin, cos) are shared.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hybrid::{HybridLayerConfig, MixerKind, UpdateRule, Variant};
use crate::math;
use crate::tasks::{TaskKind, TaskSpec, TOK_EOS, TOK_EQUALS, TOK_MINUS, TOK_PLUS, TOK_TIMES};

// ── Local scalar helpers (deliberately re-derived) ──────────────────

fn o_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

fn o_phi(k: &[f64]) -> Vec<f64> {
    let silu: Vec<f64> = k.iter().map(|&x| x * o_sigmoid(x)).collect();
    let mut sq = 0.0;
    for &s in &silu {
        sq += s * s;
    }
    let norm = math::sqrt(sq);
    let denom = if norm > 1e-12 { norm } else { 1e-12 };
    silu.iter().map(|s| s / denom).collect()
}

/// Naive softmax: plain exp over sum, no max subtraction.
fn o_softmax(scores: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = scores.iter().map(|&s| math::exp(s)).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn o_rope(x: &[f64], pos: usize) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let theta = math::powf(10000.0, -2.0 * i as f64 / d as f64);
        let a = pos as f64 * theta;
        out[2 * i] = x[2 * i] * math::cos(a) - x[2 * i + 1] * math::sin(a);
        out[2 * i + 1] = x[2 * i] * math::sin(a) + x[2 * i + 1] * math::cos(a);
    }
    out
}

fn mat_zero(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; cols]; rows]
}

fn mat_vec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum()).collect()
}

// ── Reference rollout ────────────────────────────────────────────────

/// Everything the reference simulator observed at one step of one head.
#[derive(Debug, Clone)]
pub struct RefStep {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: f64,
    pub evicted: Option<(Vec<f64>, Vec<f64>)>,
    /// Fast-weight matrix after the step, flattened row-major.
    pub w: Vec<f64>,
    pub kv_out: Vec<f64>,
    pub fw_out: Vec<f64>,
    pub mixed: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct HeadTrace {
    pub steps: Vec<RefStep>,
}

/// Per-step trace of every head plus the layer outputs, computed with
/// explicit loops and growable lists.
pub struct ReferenceTrace {
    pub heads: Vec<HeadTrace>,
    /// Concatenated head outputs, [t_len, d_model].
    pub outputs: Vec<f64>,
}

/// Straight-line simulation of one hybrid layer over a sequence.
pub fn reference_rollout(
    cfg: &HybridLayerConfig,
    w_slow: &[f64],
    xs: &[f64],
    t_len: usize,
) -> ReferenceTrace {
    let d = cfg.d_model;
    let dk = cfg.d_key();
    let dv = cfg.d_out();
    let p_total = cfg.proj_dim();
    let block = cfg.head_block();
    let scale = if cfg.use_attn_scale { 1.0 / math::sqrt(dk as f64) } else { 1.0 };

    let mut outputs = vec![0.0; t_len * d];
    let mut heads = Vec::new();

    for h in 0..cfg.n_heads {
        let mut trace = HeadTrace::default();
        // KV-memory as a plain list of (key, value, position), oldest first.
        let mut window: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
        let mut w = mat_zero(dv, dk);
        // Staged (k, v, beta) triples for the chunked scheme.
        let mut staged: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();

        for t in 0..t_len {
            let x = &xs[t * d..(t + 1) * d];
            // proj[j] = sum_i x[i] w_slow[i, h*block + j]
            let mut proj = vec![0.0; block];
            for (j, p) in proj.iter_mut().enumerate() {
                let col = h * block + j;
                for (i, &xi) in x.iter().enumerate() {
                    *p += xi * w_slow[i * p_total + col];
                }
            }
            let q = proj[..dk].to_vec();
            let k = proj[dk..2 * dk].to_vec();
            let v = proj[2 * dk..2 * dk + dv].to_vec();
            let beta = proj[2 * dk + dv];
            let mix_raw = proj[2 * dk + dv + 1..].to_vec();

            let rate = |b: f64| cfg.sigma_scale * o_sigmoid(b);
            let delta_update = |w: &mut Vec<Vec<f64>>, kk: &[f64], vv: &[f64], b: f64| {
                let pk = o_phi(kk);
                match cfg.update_rule {
                    UpdateRule::Delta => {
                        let pred = mat_vec(w, &pk);
                        let r = rate(b);
                        for i in 0..dv {
                            for j in 0..dk {
                                w[i][j] += r * (vv[i] - pred[i]) * pk[j];
                            }
                        }
                    }
                    UpdateRule::Linear => {
                        for i in 0..dv {
                            for j in 0..dk {
                                w[i][j] += vv[i] * pk[j];
                            }
                        }
                    }
                }
            };

            let mut evicted = None;
            match cfg.variant {
                Variant::KvOnly => {
                    window.push((k.clone(), v.clone(), t));
                    if window.len() > cfg.window {
                        let old = window.remove(0);
                        evicted = Some((old.0, old.1));
                    }
                }
                Variant::FwOnly | Variant::Synchronous => {
                    if cfg.variant == Variant::Synchronous {
                        window.push((k.clone(), v.clone(), t));
                        if window.len() > cfg.window {
                            let old = window.remove(0);
                            evicted = Some((old.0, old.1));
                        }
                    }
                    delta_update(&mut w, &k, &v, beta);
                }
                Variant::DelayedStream => {
                    window.push((k.clone(), v.clone(), t));
                    if window.len() > cfg.window {
                        let old = window.remove(0);
                        // The removed pair enters the fast weights with the
                        // current step's rate.
                        delta_update(&mut w, &old.0, &old.1, beta);
                        evicted = Some((old.0, old.1));
                    }
                }
                Variant::DelayedChunk => {
                    window.push((k.clone(), v.clone(), t));
                    staged.push((k.clone(), v.clone(), beta));
                }
            }

            // Fast-weight read.
            let fw_out = if cfg.variant == Variant::KvOnly {
                vec![0.0; dv]
            } else {
                mat_vec(&w, &o_phi(&q))
            };

            // Window attention.
            let kv_out = if cfg.variant == Variant::FwOnly || window.is_empty() {
                vec![0.0; dv]
            } else {
                let q_att = if cfg.use_rope { o_rope(&q, t) } else { q.clone() };
                let scores: Vec<f64> = window
                    .iter()
                    .map(|(kk, _, pos)| {
                        let k_att = if cfg.use_rope { o_rope(kk, *pos) } else { kk.clone() };
                        let mut s = 0.0;
                        for j in 0..dk {
                            s += k_att[j] * q_att[j];
                        }
                        s * scale
                    })
                    .collect();
                let p = o_softmax(&scores);
                let mut out = vec![0.0; dv];
                for ((_, vv, _), pi) in window.iter().zip(p.iter()) {
                    for (o, x) in out.iter_mut().zip(vv.iter()) {
                        *o += pi * x;
                    }
                }
                out
            };

            // Mixer.
            let mixed: Vec<f64> = match cfg.variant {
                Variant::KvOnly => kv_out.clone(),
                Variant::FwOnly => fw_out.clone(),
                _ => {
                    if let Some((wf, wk)) = cfg.mix_override {
                        fw_out.iter().zip(kv_out.iter()).map(|(f, kv)| wf * f + wk * kv).collect()
                    } else {
                        match cfg.mixer {
                            MixerKind::Sum => {
                                fw_out.iter().zip(kv_out.iter()).map(|(f, kv)| f + kv).collect()
                            }
                            MixerKind::DynamicScalar => {
                                let a_fw = o_sigmoid(mix_raw[0]);
                                let a_kv = o_sigmoid(mix_raw[1]);
                                fw_out
                                    .iter()
                                    .zip(kv_out.iter())
                                    .map(|(f, kv)| a_fw * f + a_kv * kv)
                                    .collect()
                            }
                            MixerKind::DynamicVector => fw_out
                                .iter()
                                .zip(kv_out.iter())
                                .zip(mix_raw.iter())
                                .map(|((f, kv), &m)| {
                                    let g = o_sigmoid(m);
                                    g * f + (1.0 - g) * kv
                                })
                                .collect(),
                        }
                    }
                }
            };

            // Chunk absorption at the boundary, in time order.
            if cfg.variant == Variant::DelayedChunk && (t + 1) % cfg.chunk_size == 0 {
                for (sk, sv, sb) in core::mem::take(&mut staged) {
                    delta_update(&mut w, &sk, &sv, sb);
                }
                window.clear();
            }

            outputs[t * d + h * dv..t * d + (h + 1) * dv].copy_from_slice(&mixed);
            let w_flat: Vec<f64> = w.iter().flat_map(|r| r.iter().copied()).collect();
            trace.steps.push(RefStep { q, k, v, beta, evicted, w: w_flat, kv_out, fw_out, mixed });
        }
        heads.push(trace);
    }
    ReferenceTrace { heads, outputs }
}

/// Full (unwindowed) softmax attention per head: the concat-and-attend
/// recurrence with growing key/value matrices.
pub fn reference_full_attention(
    cfg: &HybridLayerConfig,
    w_slow: &[f64],
    xs: &[f64],
    t_len: usize,
) -> Vec<f64> {
    let mut full = cfg.clone();
    full.variant = Variant::KvOnly;
    full.window = t_len.max(1);
    reference_rollout(&full, w_slow, xs, t_len).outputs
}

/// Standalone delta-rule fast-weight sequence model (no attention branch).
pub fn reference_deltanet(
    cfg: &HybridLayerConfig,
    w_slow: &[f64],
    xs: &[f64],
    t_len: usize,
) -> Vec<f64> {
    let mut fw = cfg.clone();
    fw.variant = Variant::FwOnly;
    fw.update_rule = UpdateRule::Delta;
    reference_rollout(&fw, w_slow, xs, t_len).outputs
}

/// Step-by-step recurrent form of vanilla linear attention on
/// pre-transformed inputs: W += v k^T, then y = W q.
pub fn reference_recurrent_la(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dk: usize,
    dv: usize,
    t_len: usize,
) -> Vec<f64> {
    let mut w = mat_zero(dv, dk);
    let mut y = vec![0.0; t_len * dv];
    for t in 0..t_len {
        for i in 0..dv {
            for j in 0..dk {
                w[i][j] += v[t * dv + i] * k[t * dk + j];
            }
        }
        let out = mat_vec(&w, &q[t * dk..(t + 1) * dk]);
        y[t * dv..(t + 1) * dv].copy_from_slice(&out);
    }
    y
}

// ── Finite differences ───────────────────────────────────────────────

/// Central-difference gradient estimate of a deterministic scalar function;
/// a non-finite evaluation names the offending coordinate.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let fp = f(&work);
        work[i] = theta[i] - h;
        let fm = f(&work);
        work[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Domain(format!(
                "finite_diff_grad: non-finite value at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Mixed absolute/relative closeness used for trace comparisons.
pub fn mixed_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 + 1e-7 * b.abs()
}

// ── Brute-force task labels ──────────────────────────────────────────

/// Label by direct fold over the token stream; rejects streams that do not
/// parse under the task grammar.
pub fn brute_force_label(task: &TaskSpec, tokens: &[usize]) -> Result<usize> {
    match task.kind {
        TaskKind::Parity => {
            if tokens.is_empty() {
                return Err(Error::Grammar("parity: empty stream".into()));
            }
            let mut acc = 0usize;
            for (i, &t) in tokens.iter().enumerate() {
                if t > 1 {
                    return Err(Error::Grammar(format!("parity: non-bit token {t} at {i}")));
                }
                acc ^= t;
            }
            Ok(acc)
        }
        TaskKind::ModArith => {
            // digit (op digit)* '=' [eos]
            let body_end = match tokens.iter().position(|&t| t == TOK_EQUALS) {
                Some(p) => p,
                None => return Err(Error::Grammar("mod_arith: missing '='".into())),
            };
            let tail = &tokens[body_end + 1..];
            if !(tail.is_empty() || tail == [TOK_EOS]) {
                return Err(Error::Grammar("mod_arith: trailing tokens after '='".into()));
            }
            if body_end % 2 == 0 {
                return Err(Error::Grammar("mod_arith: digit/operator alternation broken".into()));
            }
            let first = tokens[0];
            if first >= 5 {
                return Err(Error::Grammar(format!("mod_arith: expected digit, got {first}")));
            }
            let mut acc = first;
            let mut i = 1;
            while i < body_end {
                let (op, d) = (tokens[i], tokens[i + 1]);
                if d >= 5 {
                    return Err(Error::Grammar(format!("mod_arith: expected digit, got {d}")));
                }
                acc = match op {
                    TOK_PLUS => (acc + d) % 5,
                    TOK_MINUS => (acc + 5 - d) % 5,
                    TOK_TIMES => (acc * d) % 5,
                    other => {
                        return Err(Error::Grammar(format!(
                            "mod_arith: expected operator, got {other}"
                        )))
                    }
                };
                i += 2;
            }
            Ok(acc)
        }
    }
}
