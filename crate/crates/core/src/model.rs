// Stacks hybrid layers into a trainable sequence classifier.
//
// Block structure per layer (pre-norm residual):
//   x = x + W_out * HybridLayer(RmsNorm(x))
//   x = x + W_down * (SiLU(W_gate * RmsNorm(x)) .* (W_up * RmsNorm(x)))
// followed by a final norm and a linear head over the vocabulary.
//
// Parameters live in one flat f64 vector with a named layout so the
// optimizer, checkpoints, and gradient checks all address the same storage.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hybrid::{self, HybridLayerConfig};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{leaf, Tape, Tensor, Var};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_multiplier: usize,
    pub layer: HybridLayerConfig,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_layers: usize, layer: HybridLayerConfig) -> Self {
        ModelConfig {
            vocab_size,
            d_model: layer.d_model,
            n_layers,
            n_heads: layer.n_heads,
            ff_multiplier: 4,
            layer,
            tie_embeddings: false,
            init_std: 0.02,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.ff_multiplier * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.d_model != self.layer.d_model || self.n_heads != self.layer.n_heads {
            return Err(Error::Config(
                "model d_model/n_heads must match the layer config".into(),
            ));
        }
        self.layer.validate()
    }
}

// ── Parameter layout ─────────────────────────────────────────────────

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named layout of the flat parameter vector, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let p = cfg.layer.proj_dim();
    let ff = cfg.d_ff();
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        specs.push(ParamSpec { name, shape, offset });
        offset += len;
    };
    push("embed".into(), vec![cfg.vocab_size, d]);
    for i in 0..cfg.n_layers {
        push(format!("layers.{i}.norm_attn"), vec![d]);
        push(format!("layers.{i}.w_slow"), vec![d, p]);
        push(format!("layers.{i}.w_out"), vec![d, d]);
        push(format!("layers.{i}.norm_ff"), vec![d]);
        push(format!("layers.{i}.w_gate"), vec![d, ff]);
        push(format!("layers.{i}.w_up"), vec![d, ff]);
        push(format!("layers.{i}.w_down"), vec![ff, d]);
    }
    push("norm_final".into(), vec![d]);
    if !cfg.tie_embeddings {
        push("head".into(), vec![d, cfg.vocab_size]);
    }
    specs
}

/// Closed-form parameter count:
///   vocab*d  (embedding)
/// + L * (2d + d*proj_dim + d^2 + 3*d*ff)  (per-layer norms, slow projection,
///   output projection, gated feedforward)
/// + d  (final norm)
/// + d*vocab unless the head is tied to the embedding.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let p = cfg.layer.proj_dim();
    let ff = cfg.d_ff();
    let per_layer = 2 * d + d * p + d * d + 3 * d * ff;
    let head = if cfg.tie_embeddings { 0 } else { d * cfg.vocab_size };
    cfg.vocab_size * d + cfg.n_layers * per_layer + d + head
}

/// Fresh parameters: every weight from normal(0, init_std); norm gains start
/// at one so the residual stream passes through unscaled.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
    let specs = param_specs(cfg);
    let total: usize = specs.iter().map(|s| s.len()).sum();
    let mut flat = vec![0.0; total];
    let mut rng = Rng::new(derive_seed(seed, 0x1217));
    for spec in &specs {
        let slice = &mut flat[spec.offset..spec.offset + spec.len()];
        if spec.name.contains("norm") {
            slice.fill(1.0);
        } else {
            rng.fill_gauss(slice, cfg.init_std);
        }
    }
    flat
}

// ── Tape-side parameter views ────────────────────────────────────────

struct LayerVars {
    norm_attn: Var,
    w_slow: Var,
    w_out: Var,
    norm_ff: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// Per-tape copies of the parameters. Building one copies the flat vector
/// once; the same set is reused across every sequence of a batch shard so
/// gradients accumulate in place.
pub struct ParamVars {
    embed: Var,
    layers: Vec<LayerVars>,
    norm_final: Var,
    head: Option<Var>,
}

impl ParamVars {
    pub fn from_flat(cfg: &ModelConfig, flat: &[f64], requires_grad: bool) -> Self {
        let specs = param_specs(cfg);
        let mut iter = specs.iter();
        let mut take = |expect: &str| -> Var {
            let spec = iter.next().expect("layout exhausted");
            debug_assert!(spec.name.ends_with(expect), "{} vs {expect}", spec.name);
            let mut t = Tensor::new(
                spec.shape.clone(),
                flat[spec.offset..spec.offset + spec.len()].to_vec(),
            );
            t.requires_grad = requires_grad;
            leaf(t)
        };
        let embed = take("embed");
        let layers = (0..cfg.n_layers)
            .map(|_| LayerVars {
                norm_attn: take("norm_attn"),
                w_slow: take("w_slow"),
                w_out: take("w_out"),
                norm_ff: take("norm_ff"),
                w_gate: take("w_gate"),
                w_up: take("w_up"),
                w_down: take("w_down"),
            })
            .collect();
        let norm_final = take("norm_final");
        let head = (!cfg.tie_embeddings).then(|| take("head"));
        ParamVars { embed, layers, norm_final, head }
    }

    /// Accumulated gradients in layout order (zeros where none flowed).
    pub fn grads_flat(&self, cfg: &ModelConfig) -> Vec<f64> {
        let specs = param_specs(cfg);
        let total: usize = specs.iter().map(|s| s.len()).sum();
        let mut out = vec![0.0; total];
        let mut idx = 0;
        let mut write = |spec_idx: &mut usize, v: &Var| {
            let spec = &specs[*spec_idx];
            if let Some(g) = v.borrow().grad.as_ref() {
                out[spec.offset..spec.offset + spec.len()].copy_from_slice(g);
            }
            *spec_idx += 1;
        };
        write(&mut idx, &self.embed);
        for l in &self.layers {
            for v in [&l.norm_attn, &l.w_slow, &l.w_out, &l.norm_ff, &l.w_gate, &l.w_up, &l.w_down]
            {
                write(&mut idx, v);
            }
        }
        write(&mut idx, &self.norm_final);
        if let Some(h) = &self.head {
            write(&mut idx, h);
        }
        out
    }
}

// ── Forward and loss ─────────────────────────────────────────────────

/// Per-position logits for several independent sequences packed along the
/// rows (the dense blocks batch across sequences; the memory layer runs its
/// recurrence per segment). Returns [sum(lengths), vocab] logits.
pub fn forward_batch_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamVars,
    sequences: &[&[usize]],
) -> Result<Var> {
    if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
        return Err(Error::Input("forward: empty token sequence".into()));
    }
    let ids: Vec<usize> = sequences.iter().flat_map(|s| s.iter().copied()).collect();
    let segments: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
    let mut x = tape.embedding(&params.embed, &ids)?;
    for layer in &params.layers {
        let h = tape.rms_norm(&x, &layer.norm_attn)?;
        let attn = hybrid::tape_forward_segments(tape, &cfg.layer, &h, &layer.w_slow, &segments)?;
        let attn = tape.matmul(&attn, &layer.w_out)?;
        x = tape.add(&x, &attn)?;
        let h2 = tape.rms_norm(&x, &layer.norm_ff)?;
        let gate = tape.matmul(&h2, &layer.w_gate)?;
        let gate = tape.silu(&gate)?;
        let up = tape.matmul(&h2, &layer.w_up)?;
        let act = tape.mul(&gate, &up)?;
        let ff = tape.matmul(&act, &layer.w_down)?;
        x = tape.add(&x, &ff)?;
    }
    let h = tape.rms_norm(&x, &params.norm_final)?;
    match &params.head {
        Some(head) => tape.matmul(&h, head),
        None => tape.matmul_bt(&h, &params.embed),
    }
}

/// Per-position logits for one token sequence, recorded on the tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamVars,
    tokens: &[usize],
) -> Result<Var> {
    forward_batch_on_tape(tape, cfg, params, &[tokens])
}

/// Mean cross-entropy over the supervised positions.
pub fn loss_on_tape(
    tape: &mut Tape,
    logits: &Var,
    labels: &[usize],
    mask: &[bool],
) -> Result<Var> {
    tape.cross_entropy(logits, labels, mask, true)
}

/// Inference-only forward: same code path as training but with non-grad
/// parameter views, so no layer caches are kept.
pub fn forward_logits(cfg: &ModelConfig, flat: &[f64], tokens: &[usize]) -> Result<Vec<f64>> {
    let params = ParamVars::from_flat(cfg, flat, false);
    forward_logits_with(cfg, &params, tokens)
}

/// Inference-only forward reusing prebuilt parameter views (cheaper when
/// evaluating many sequences).
pub fn forward_logits_with(
    cfg: &ModelConfig,
    params: &ParamVars,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let logits = forward_on_tape(&mut tape, cfg, params, tokens)?;
    let data = logits.borrow().data.clone();
    Ok(data)
}
