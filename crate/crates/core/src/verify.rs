// Runnable verification suites: oracle equivalence, gradient checks, and
// state/property invariants. Each check returns a result row rather than
// asserting, so the CLI can print a report and tests can assert the lot.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::hybrid::{
    forward_seq, HybridLayerConfig, HybridLayerState, MixerKind, UpdateRule, Variant,
};
use crate::memory::{
    fw_read, fw_update_delta_raw, fw_update_linear, la_chunkwise_forward, FWMemoryState,
};
use crate::model::{forward_logits, forward_on_tape, init_params, loss_on_tape, ModelConfig, ParamVars};
use crate::oracles::{
    finite_diff_grad, reference_deltanet, reference_full_attention, reference_recurrent_la,
    reference_rollout,
};
use crate::rng::Rng;
use crate::tasks::TaskSpec;
use crate::tensor::{phi, Tape};
use crate::hybrid;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.into(), passed, detail }
    }
}

fn gauss(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    rng.fill_gauss(&mut v, std);
    v
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const HYBRIDS: [Variant; 3] = [Variant::Synchronous, Variant::DelayedStream, Variant::DelayedChunk];
const MIXERS: [MixerKind; 3] = [MixerKind::Sum, MixerKind::DynamicScalar, MixerKind::DynamicVector];
const RULES: [UpdateRule; 2] = [UpdateRule::Delta, UpdateRule::Linear];

fn small_layer(variant: Variant) -> HybridLayerConfig {
    let mut cfg = HybridLayerConfig::new(variant, 8, 2, 3);
    cfg.chunk_size = 3;
    cfg
}

// ── Equivalence suite ────────────────────────────────────────────────

/// Engine vs straight-line reference, over every hybrid variant x mixer x
/// update-rule combination (18 combos, 20 random instances each).
pub fn check_oracle_matrix() -> CheckResult {
    let mut rng = Rng::new(0xACE1);
    let t_len = 12;
    let mut worst = 0.0f64;
    let mut combos = 0;
    for variant in HYBRIDS {
        for rule in RULES {
            for mixer in MIXERS {
                combos += 1;
                let mut cfg = small_layer(variant);
                cfg.update_rule = rule;
                cfg.mixer = mixer;
                for _ in 0..20 {
                    let w = gauss(&mut rng, cfg.d_model * cfg.proj_dim(), 0.5);
                    let xs = gauss(&mut rng, t_len * cfg.d_model, 1.0);
                    let (engine, _) = forward_seq(&cfg, &w, &xs, t_len, false).unwrap();
                    let want = reference_rollout(&cfg, &w, &xs, t_len).outputs;
                    worst = worst.max(max_abs_diff(&engine, &want));
                }
            }
        }
    }
    CheckResult::new(
        "equivalence/oracle-matrix",
        worst < 1e-10,
        format!("{combos} combos x 20 instances, max |diff| = {worst:.3e} (tol 1e-10)"),
    )
}

/// Chunk-wise parallel form vs the recurrent form, for chunk sizes that do
/// and do not divide the sequence length.
pub fn check_chunk_invariance() -> CheckResult {
    let mut rng = Rng::new(0xACE2);
    let (dk, dv, t_len) = (8, 8, 32);
    let q: Vec<f64> = (0..t_len).flat_map(|_| phi(&gauss(&mut rng, dk, 1.0))).collect();
    let k: Vec<f64> = (0..t_len).flat_map(|_| phi(&gauss(&mut rng, dk, 1.0))).collect();
    let v = gauss(&mut rng, t_len * dv, 1.0);
    let want = reference_recurrent_la(&q, &k, &v, dk, dv, t_len);
    let mut worst = 0.0f64;
    for chunk in [1usize, 2, 4, 8, 16, 32, 3, 5, 7] {
        let mut w = FWMemoryState::new(dk, dv);
        let mut y = vec![0.0; t_len * dv];
        let mut t = 0;
        while t < t_len {
            let len = chunk.min(t_len - t);
            let (yc, w_next) = la_chunkwise_forward(
                &q[t * dk..(t + len) * dk],
                &k[t * dk..(t + len) * dk],
                &v[t * dv..(t + len) * dv],
                &w,
                len,
            )
            .unwrap();
            y[t * dv..(t + len) * dv].copy_from_slice(&yc);
            w = w_next;
            t += len;
        }
        worst = worst.max(max_abs_diff(&y, &want));
    }
    CheckResult::new(
        "equivalence/chunk-invariance",
        worst < 1e-10,
        format!("chunk sizes 1,2,4,8,16,32 and 3,5,7 over T=32, max |diff| = {worst:.3e} (tol 1e-10)"),
    )
}

/// Synchronous with the mixer pinned to the attention branch and T <= S
/// reproduces full softmax attention.
pub fn check_reduction_full_attention() -> CheckResult {
    let mut rng = Rng::new(0xACE3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut cfg = small_layer(Variant::Synchronous);
        cfg.window = 16;
        cfg.mixer = MixerKind::DynamicVector;
        cfg.mix_override = Some((0.0, 1.0));
        let t_len = 10;
        let w = gauss(&mut rng, cfg.d_model * cfg.proj_dim(), 0.5);
        let xs = gauss(&mut rng, t_len * cfg.d_model, 1.0);
        let (engine, _) = forward_seq(&cfg, &w, &xs, t_len, false).unwrap();
        let want = reference_full_attention(&cfg, &w, &xs, t_len);
        worst = worst.max(max_abs_diff(&engine, &want));
    }
    CheckResult::new(
        "equivalence/reduction-full-attention",
        worst < 1e-12,
        format!("20 instances, max |diff| = {worst:.3e} (tol 1e-12)"),
    )
}

/// The mixer pinned to the fast-weight branch with the delta rule
/// reproduces the standalone delta-rule sequence model step for step.
pub fn check_reduction_deltanet() -> CheckResult {
    let mut rng = Rng::new(0xACE4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut cfg = small_layer(Variant::Synchronous);
        cfg.update_rule = UpdateRule::Delta;
        cfg.mixer = MixerKind::DynamicVector;
        cfg.mix_override = Some((1.0, 0.0));
        let t_len = 12;
        let w = gauss(&mut rng, cfg.d_model * cfg.proj_dim(), 0.5);
        let xs = gauss(&mut rng, t_len * cfg.d_model, 1.0);
        let (engine, _) = forward_seq(&cfg, &w, &xs, t_len, false).unwrap();
        let want = reference_deltanet(&cfg, &w, &xs, t_len);
        worst = worst.max(max_abs_diff(&engine, &want));
    }
    CheckResult::new(
        "equivalence/reduction-deltanet",
        worst < 1e-10,
        format!("20 instances, max |diff| = {worst:.3e} (tol 1e-10)"),
    )
}

pub fn equivalence_suite() -> Vec<CheckResult> {
    vec![
        check_oracle_matrix(),
        check_chunk_invariance(),
        check_reduction_full_attention(),
        check_reduction_deltanet(),
    ]
}

// ── Gradient suite ───────────────────────────────────────────────────

fn grad_check_one(cfg: &ModelConfig, seed: u64) -> f64 {
    let flat = init_params(cfg, seed);
    let tokens = [0usize, 1, 2, 3, 1, 0];
    let labels = [1usize, 0, 2, 1, 3, 2];
    let mask = [true, true, true, false, true, true];

    let params = ParamVars::from_flat(cfg, &flat, true);
    let mut tape = Tape::new();
    let logits = forward_on_tape(&mut tape, cfg, &params, &tokens).unwrap();
    let loss = loss_on_tape(&mut tape, &logits, &labels, &mask).unwrap();
    tape.backward(&loss).unwrap();
    let analytic = params.grads_flat(cfg);

    let mut f = |theta: &[f64]| -> f64 {
        let p = ParamVars::from_flat(cfg, theta, false);
        let mut tape = Tape::new();
        let logits = forward_on_tape(&mut tape, cfg, &p, &tokens).unwrap();
        let l = loss_on_tape(&mut tape, &logits, &labels, &mask).unwrap();
        let v = l.borrow().data[0];
        v
    };
    let fd = finite_diff_grad(&mut f, &flat, 1e-5).unwrap();

    let scale = fd.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
    max_abs_diff(&analytic, &fd) / scale
}

/// Autodiff vs central finite differences on a 2-layer model for every
/// variant x mixer x update-rule combination; baselines run with the sum
/// mixer. The reported figure is the worst normalized error.
pub fn grad_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut seed = 0xBEE5u64;
    for variant in HYBRIDS {
        for rule in RULES {
            for mixer in MIXERS {
                let mut layer = small_layer(variant);
                layer.update_rule = rule;
                layer.mixer = mixer;
                let cfg = ModelConfig::new(5, 2, layer);
                seed += 1;
                let err = grad_check_one(&cfg, seed);
                out.push(CheckResult::new(
                    &format!("grad/{variant:?}-{rule:?}-{mixer:?}").to_lowercase(),
                    err < 1e-3,
                    format!("rel err {err:.3e} (tol 1e-3, h=1e-5)"),
                ));
            }
        }
    }
    for variant in [Variant::KvOnly, Variant::FwOnly] {
        for rule in RULES {
            if variant == Variant::KvOnly && rule == UpdateRule::Linear {
                continue; // no fast weights to distinguish the rules
            }
            let mut layer = small_layer(variant);
            layer.update_rule = rule;
            let cfg = ModelConfig::new(5, 2, layer);
            seed += 1;
            let err = grad_check_one(&cfg, seed);
            out.push(CheckResult::new(
                &format!("grad/{variant:?}-{rule:?}").to_lowercase(),
                err < 1e-3,
                format!("rel err {err:.3e} (tol 1e-3, h=1e-5)"),
            ));
        }
    }
    out
}

// ── Invariants suite ─────────────────────────────────────────────────

/// Delayed-stream bookkeeping: at every step the window and the absorbed
/// set partition the generated pairs.
pub fn check_eviction_conservation() -> CheckResult {
    let mut rng = Rng::new(0xC0DE);
    let mut ok = true;
    let mut detail = String::new();
    for s in [1usize, 16, 64] {
        let mut cfg = HybridLayerConfig::new(Variant::DelayedStream, 8, 2, s);
        cfg.mixer = MixerKind::Sum;
        let w = gauss(&mut rng, cfg.d_model * cfg.proj_dim(), 0.4);
        let mut st = HybridLayerState::new(&cfg);
        for t in 1..=200usize {
            let x = gauss(&mut rng, cfg.d_model, 1.0);
            hybrid::step(&cfg, &w, &mut st, &x).unwrap();
            for h in &st.heads {
                let window = h.kv.count();
                let absorbed = h.absorbed;
                if window != t.min(s) || absorbed != t.saturating_sub(s) || window + absorbed != t
                {
                    ok = false;
                    detail = format!("S={s} t={t}: window {window} + absorbed {absorbed} != {t}");
                }
            }
        }
    }
    if ok {
        detail = "S in {1,16,64}, T=200: min(t,S) + max(0,t-S) = t at every step".into();
    }
    CheckResult::new("invariants/eviction-conservation", ok, detail)
}

/// Synchronous bookkeeping: every pair enters both memories.
pub fn check_synchronous_duplication() -> CheckResult {
    let mut rng = Rng::new(0xC0DF);
    let s = 16usize;
    let mut cfg = HybridLayerConfig::new(Variant::Synchronous, 8, 2, s);
    cfg.mixer = MixerKind::Sum;
    let w = gauss(&mut rng, cfg.d_model * cfg.proj_dim(), 0.4);
    let mut st = HybridLayerState::new(&cfg);
    let mut ok = true;
    for t in 1..=100usize {
        let x = gauss(&mut rng, cfg.d_model, 1.0);
        hybrid::step(&cfg, &w, &mut st, &x).unwrap();
        for h in &st.heads {
            ok &= h.absorbed == t && h.kv.count() == t.min(s);
        }
    }
    CheckResult::new(
        "invariants/synchronous-duplication",
        ok,
        "T=100, S=16: absorbed = t and window = min(t,S)".into(),
    )
}

/// Delta-rule retrieval: a unit-rate write is exactly readable, whatever
/// was in the memory before.
pub fn check_delta_retrieval() -> CheckResult {
    let mut rng = Rng::new(0xC0E0);
    let (dk, dv) = (8, 8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut st = FWMemoryState::new(dk, dv);
        st.w = gauss(&mut rng, dv * dk, 1.0);
        let k = gauss(&mut rng, dk, 1.0);
        let v = gauss(&mut rng, dv, 1.0);
        fw_update_delta_raw(&mut st, &k, &v, 1.0);
        let got = fw_read(&st, &k);
        worst = worst.max(max_abs_diff(&got, &v));
    }
    CheckResult::new(
        "invariants/delta-retrieval",
        worst < 1e-9,
        format!("100 random (W, k, v) with b=1, max |read - v| = {worst:.3e} (tol 1e-9)"),
    )
}

/// Delta-rule interpolation at partial rates.
pub fn check_delta_interpolation() -> CheckResult {
    let mut rng = Rng::new(0xC0E1);
    let (dk, dv) = (6, 6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut st = FWMemoryState::new(dk, dv);
        st.w = gauss(&mut rng, dv * dk, 1.0);
        let k = gauss(&mut rng, dk, 1.0);
        let v = gauss(&mut rng, dv, 1.0);
        let b = rng.next_f64();
        let old = fw_read(&st, &k);
        fw_update_delta_raw(&mut st, &k, &v, b);
        let got = fw_read(&st, &k);
        for i in 0..dv {
            worst = worst.max((got[i] - ((1.0 - b) * old[i] + b * v[i])).abs());
        }
    }
    CheckResult::new(
        "invariants/delta-interpolation",
        worst < 1e-9,
        format!("100 random rates in (0,1), max deviation {worst:.3e} (tol 1e-9)"),
    )
}

/// Linear-rule additivity: a pair sequence accumulates to the same matrix
/// in any order.
pub fn check_linear_additivity() -> CheckResult {
    let mut rng = Rng::new(0xC0E2);
    let (dk, dv, n) = (6, 6, 8);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> =
        (0..n).map(|_| (gauss(&mut rng, dk, 1.0), gauss(&mut rng, dv, 1.0))).collect();
    let mut fwd = FWMemoryState::new(dk, dv);
    for (k, v) in &pairs {
        fw_update_linear(&mut fwd, k, v);
    }
    let mut rev = FWMemoryState::new(dk, dv);
    for (k, v) in pairs.iter().rev() {
        fw_update_linear(&mut rev, k, v);
    }
    let worst = max_abs_diff(&fwd.w, &rev.w);
    CheckResult::new(
        "invariants/linear-additivity",
        worst < 1e-12,
        format!("8 pairs applied in both orders, max |diff| = {worst:.3e}"),
    )
}

/// Position-t logits never depend on later tokens, through the full stack.
pub fn check_causality() -> CheckResult {
    let mut ok = true;
    let mut detail = String::new();
    for variant in HYBRIDS {
        let mut layer = small_layer(variant);
        layer.mixer = MixerKind::DynamicVector;
        let cfg = ModelConfig::new(5, 2, layer);
        let flat = init_params(&cfg, 0xC0E3);
        let tokens = [0usize, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        let base = forward_logits(&cfg, &flat, &tokens).unwrap();
        let mut altered = tokens;
        altered[7] = 0;
        altered[9] = 1;
        let pert = forward_logits(&cfg, &flat, &altered).unwrap();
        let v = cfg.vocab_size;
        if base[..7 * v] != pert[..7 * v] {
            ok = false;
            detail = format!("{variant:?}: prefix logits changed");
        }
    }
    if ok {
        detail = "3 variants, 2-layer stack: prefix logits bit-identical under suffix edits".into();
    }
    CheckResult::new("invariants/causality", ok, detail)
}

/// Same tokens, same parameters: bit-identical logits and gradients.
pub fn check_determinism() -> CheckResult {
    let mut layer = small_layer(Variant::Synchronous);
    layer.mixer = MixerKind::DynamicScalar;
    let cfg = ModelConfig::new(5, 2, layer);
    let flat = init_params(&cfg, 0xC0E4);
    let tokens = [0usize, 1, 2, 3, 4, 0, 1];
    let run = || {
        let params = ParamVars::from_flat(&cfg, &flat, true);
        let mut tape = Tape::new();
        let logits = forward_on_tape(&mut tape, &cfg, &params, &tokens).unwrap();
        let loss =
            loss_on_tape(&mut tape, &logits, &[1, 2, 3, 4, 0, 1, 2], &[true; 7]).unwrap();
        tape.backward(&loss).unwrap();
        let data = logits.borrow().data.clone();
        (data, params.grads_flat(&cfg))
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    let ok = l1 == l2 && g1 == g2;
    CheckResult::new(
        "invariants/determinism",
        ok,
        "two identical forward+backward replays are bit-identical".into(),
    )
}

/// Generators are pure functions of (seed, length).
pub fn check_generator_determinism() -> CheckResult {
    let mut ok = true;
    for task in [TaskSpec::parity(), TaskSpec::mod_arith()] {
        let mut a = Rng::new(0xC0E5);
        let mut b = Rng::new(0xC0E5);
        for _ in 0..100 {
            ok &= task.sample_train(&mut a) == task.sample_train(&mut b);
            ok &= task.sample_test(&mut a) == task.sample_test(&mut b);
        }
    }
    CheckResult::new(
        "invariants/generator-determinism",
        ok,
        "parity and mod-arith samples are bit-identical under a fixed seed".into(),
    )
}

pub fn invariants_suite() -> Vec<CheckResult> {
    vec![
        check_eviction_conservation(),
        check_synchronous_duplication(),
        check_delta_retrieval(),
        check_delta_interpolation(),
        check_linear_additivity(),
        check_causality(),
        check_determinism(),
        check_generator_determinism(),
    ]
}

/// Every suite, concatenated.
pub fn all_suites() -> Vec<CheckResult> {
    let mut out = equivalence_suite();
    out.extend(grad_suite());
    out.extend(invariants_suite());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_suite_passes() {
        for check in equivalence_suite() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn invariants_suite_passes() {
        for check in invariants_suite() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    // The gradient suite runs in the dedicated integration test target; a
    // single combo here keeps the unit cycle fast.
    #[test]
    fn grad_check_single_combo() {
        let mut layer = small_layer(Variant::Synchronous);
        layer.mixer = MixerKind::DynamicVector;
        let cfg = ModelConfig::new(5, 2, layer);
        let err = grad_check_one(&cfg, 0xF00D);
        assert!(err < 1e-3, "rel err {err}");
    }
}
