// Regular-language benchmarks: parity and modular arithmetic without
// brackets.
//
// Parity: tokens from {0, 1}; the label at each position is the parity of
// the prefix (1 = odd). Vocabulary 2, labels share token ids, chance 50%.
//
// Mod arithmetic: streams "d0 op1 d1 ... =" with digits 0..4 and ops from
// {+, -, *}, followed by an end marker. The label at '=' is the strict
// left-to-right evaluation mod 5 (no operator precedence, which keeps the
// language recognizable by a finite automaton). Vocabulary 10, chance 20%.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{forward_batch_on_tape, ModelConfig, ParamVars};
use crate::tensor::Tape;
use crate::rng::Rng;

/// Token ids for the mod-arith vocabulary: digits map to themselves.
pub const TOK_PLUS: usize = 5;
pub const TOK_MINUS: usize = 6;
pub const TOK_TIMES: usize = 7;
pub const TOK_EQUALS: usize = 8;
pub const TOK_EOS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Parity,
    ModArith,
}

/// One supervised sequence: tokens, per-position labels, and the mask of
/// supervised positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The position scored at evaluation time: the last supervised one
    /// (the final position for parity, '=' for mod arithmetic).
    pub fn scored_position(&self) -> usize {
        self.mask.iter().rposition(|&m| m).expect("mask has a supervised position")
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub modulus: usize,
    /// Inclusive training length range.
    pub train_len_range: (usize, usize),
    /// Inclusive evaluation length range; evaluation draws strictly above
    /// the training maximum.
    pub test_len_range: (usize, usize),
    /// Supervise parity at every position (running parity) rather than only
    /// at the end.
    pub supervise_all: bool,
}

impl TaskSpec {
    pub fn parity() -> Self {
        TaskSpec {
            kind: TaskKind::Parity,
            modulus: 2,
            train_len_range: (3, 40),
            test_len_range: (40, 256),
            supervise_all: true,
        }
    }

    pub fn mod_arith() -> Self {
        TaskSpec {
            kind: TaskKind::ModArith,
            modulus: 5,
            train_len_range: (3, 40),
            test_len_range: (40, 256),
            supervise_all: false,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TaskKind::Parity => 2,
            TaskKind::ModArith => 10,
        }
    }

    pub fn chance_pct(&self) -> f64 {
        match self.kind {
            TaskKind::Parity => 50.0,
            TaskKind::ModArith => 20.0,
        }
    }

    /// Largest generateable length not exceeding `len` (mod-arith streams
    /// have odd total length d (op d)* '=' eos, i.e. 2m+3).
    fn snap_length(&self, len: usize) -> usize {
        match self.kind {
            TaskKind::Parity => len.max(1),
            TaskKind::ModArith => {
                let len = len.max(3);
                if len % 2 == 1 {
                    len
                } else {
                    len - 1
                }
            }
        }
    }

    fn sample_length(&self, rng: &mut Rng, lo: usize, hi: usize) -> usize {
        self.snap_length(rng.range_inclusive(lo, hi))
    }

    /// Generate one sample with the given total length.
    pub fn generate(&self, rng: &mut Rng, length: usize) -> Result<TaskSample> {
        match self.kind {
            TaskKind::Parity => {
                let mut s = gen_parity(rng, length)?;
                if !self.supervise_all {
                    for (i, m) in s.mask.iter_mut().enumerate() {
                        *m = i == length - 1;
                    }
                }
                Ok(s)
            }
            TaskKind::ModArith => gen_mod_arith(rng, length),
        }
    }

    /// Fresh training sample, length uniform over the training range.
    pub fn sample_train(&self, rng: &mut Rng) -> TaskSample {
        let (lo, hi) = self.train_len_range;
        let len = self.sample_length(rng, lo, hi);
        self.generate(rng, len).expect("training range produces valid lengths")
    }

    /// Fresh held-out sample, length strictly above the training maximum.
    pub fn sample_test(&self, rng: &mut Rng) -> TaskSample {
        let lo = self.test_len_range.0.max(self.train_len_range.1 + 1);
        let hi = self.test_len_range.1.max(lo);
        let len = self.sample_length(rng, lo, hi);
        self.generate(rng, len).expect("test range produces valid lengths")
    }

    /// Printable symbol for a token id.
    pub fn symbol(&self, id: usize) -> &'static str {
        match self.kind {
            TaskKind::Parity => ["0", "1"][id],
            TaskKind::ModArith => ["0", "1", "2", "3", "4", "+", "-", "*", "=", "eos"][id],
        }
    }

    /// Sample dump format: space-separated symbols, a tab, the label at the
    /// scored position.
    pub fn dump_line(&self, s: &TaskSample) -> String {
        let mut line = String::new();
        for (i, &t) in s.tokens.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(self.symbol(t));
        }
        format!("{line}\t{}", self.symbol(s.labels[s.scored_position()]))
    }
}

/// Uniform random bits with running-parity labels at every position.
pub fn gen_parity(rng: &mut Rng, length: usize) -> Result<TaskSample> {
    if length == 0 {
        return Err(Error::Input("parity: length must be >= 1".into()));
    }
    let mut tokens = vec![0; length];
    let mut labels = vec![0; length];
    let mut parity = 0usize;
    for i in 0..length {
        let bit = (rng.next_u64() & 1) as usize;
        tokens[i] = bit;
        parity ^= bit;
        labels[i] = parity;
    }
    Ok(TaskSample { tokens, labels, mask: vec![true; length] })
}

/// Random "d0 op1 d1 ... = eos" stream of the given total length (odd,
/// >= 3), supervised only at '=' with the left-to-right fold mod 5.
pub fn gen_mod_arith(rng: &mut Rng, length: usize) -> Result<TaskSample> {
    if length < 3 || length % 2 == 0 {
        return Err(Error::Input(format!(
            "mod_arith: length must be odd and >= 3 (digit/operator alternation), got {length}"
        )));
    }
    let n_ops = (length - 3) / 2;
    let mut tokens = Vec::with_capacity(length);
    let mut acc = rng.next_below(5);
    tokens.push(acc);
    for _ in 0..n_ops {
        let op = TOK_PLUS + rng.next_below(3);
        let d = rng.next_below(5);
        tokens.push(op);
        tokens.push(d);
        acc = match op {
            TOK_PLUS => (acc + d) % 5,
            TOK_MINUS => (acc + 5 - d) % 5,
            _ => (acc * d) % 5,
        };
    }
    tokens.push(TOK_EQUALS);
    tokens.push(TOK_EOS);
    let eq_pos = length - 2;
    let mut labels = vec![0; length];
    labels[eq_pos] = acc;
    let mut mask = vec![false; length];
    mask[eq_pos] = true;
    Ok(TaskSample { tokens, labels, mask })
}

/// (raw - chance) / (100 - chance), scaled to percent: 0 at chance level,
/// 100 at perfect accuracy.
pub fn normalized_accuracy(raw_pct: f64, chance_pct: f64) -> Result<f64> {
    if !(0.0..100.0).contains(&chance_pct) {
        return Err(Error::Domain(format!(
            "normalized accuracy undefined for chance level {chance_pct}"
        )));
    }
    Ok((raw_pct - chance_pct) / (100.0 - chance_pct) * 100.0)
}

/// Greedy accuracy at the scored position over freshly generated samples in
/// the given length range. Sequences are batched through the model in
/// groups so the dense blocks amortize. Returns (raw %, normalized %).
pub fn evaluate(
    cfg: &ModelConfig,
    flat: &[f64],
    task: &TaskSpec,
    n_samples: usize,
    test_range: bool,
    seed: u64,
) -> Result<(f64, f64)> {
    let params = ParamVars::from_flat(cfg, flat, false);
    let mut rng = Rng::new(seed);
    let vocab = cfg.vocab_size;
    let mut correct = 0usize;
    let group = 32usize;
    let mut done = 0usize;
    while done < n_samples {
        let n = group.min(n_samples - done);
        let samples: Vec<TaskSample> = (0..n)
            .map(|_| if test_range { task.sample_test(&mut rng) } else { task.sample_train(&mut rng) })
            .collect();
        let sequences: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let logits = forward_batch_on_tape(&mut tape, cfg, &params, &sequences)?;
        let lv = logits.borrow();
        let mut offset = 0usize;
        for s in &samples {
            let pos = offset + s.scored_position();
            let row = &lv.data[pos * vocab..(pos + 1) * vocab];
            let mut best = 0usize;
            for j in 1..vocab {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == s.labels[s.scored_position()] {
                correct += 1;
            }
            offset += s.len();
        }
        done += n;
    }
    let raw = 100.0 * correct as f64 / n_samples as f64;
    let norm = normalized_accuracy(raw, task.chance_pct())?;
    Ok((raw, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{HybridLayerConfig, Variant};
    use crate::model::param_count;

    #[test]
    fn parity_prefix_labels() {
        // Fixed draws via a seed that yields the classic example is
        // brittle; check the definition on explicit token streams instead
        // by rebuilding labels with a fold.
        let mut rng = Rng::new(1);
        let s = gen_parity(&mut rng, 40).unwrap();
        let mut acc = 0usize;
        for i in 0..40 {
            acc ^= s.tokens[i];
            assert_eq!(s.labels[i], acc);
        }
        assert!(s.mask.iter().all(|&m| m));
        assert!(matches!(gen_parity(&mut rng, 0), Err(Error::Input(_))));
    }

    #[test]
    fn parity_known_streams() {
        // [1,0,1] -> running parity [1,1,0]; all zeros -> all zeros.
        let fold = |tokens: &[usize]| -> Vec<usize> {
            let mut acc = 0;
            tokens.iter().map(|&b| { acc ^= b; acc }).collect()
        };
        assert_eq!(fold(&[1, 0, 1]), vec![1, 1, 0]);
        assert_eq!(fold(&[0, 0, 0, 0]), vec![0; 4]);
    }

    #[test]
    fn parity_final_label_depends_only_on_multiset() {
        let mut rng = Rng::new(7);
        let s = gen_parity(&mut rng, 16).unwrap();
        // Any permutation of the prefix keeps the final label.
        let mut shuffled = s.tokens.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let mut acc = 0;
        for &b in &shuffled {
            acc ^= b;
        }
        assert_eq!(acc, s.labels[15]);
    }

    #[test]
    fn mod_arith_known_expressions() {
        // Build samples by hand through the public fold semantics.
        let fold = |tokens: &[usize]| -> usize {
            let mut acc = tokens[0];
            let mut i = 1;
            while tokens[i] != TOK_EQUALS {
                let (op, d) = (tokens[i], tokens[i + 1]);
                acc = match op {
                    TOK_PLUS => (acc + d) % 5,
                    TOK_MINUS => (acc + 5 - d) % 5,
                    TOK_TIMES => (acc * d) % 5,
                    _ => panic!("bad op"),
                };
                i += 2;
            }
            acc
        };
        // 2 + 3 = 0 (mod 5)
        assert_eq!(fold(&[2, TOK_PLUS, 3, TOK_EQUALS, TOK_EOS]), 0);
        // 3 * 0 = 0
        assert_eq!(fold(&[3, TOK_TIMES, 0, TOK_EQUALS, TOK_EOS]), 0);
        // 1 + 2 * 3 = (1+2)*3 = 9 = 4 under strict left-to-right evaluation
        assert_eq!(fold(&[1, TOK_PLUS, 2, TOK_TIMES, 3, TOK_EQUALS, TOK_EOS]), 4);
        // 4 - 4 = 0
        assert_eq!(fold(&[4, TOK_MINUS, 4, TOK_EQUALS, TOK_EOS]), 0);
    }

    #[test]
    fn mod_arith_generator_parses_under_its_own_grammar() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let len = 3 + 2 * rng.next_below(19);
            let s = gen_mod_arith(&mut rng, len).unwrap();
            assert_eq!(s.len(), len);
            // Grammar: digit (op digit)* '=' eos, with the label in 0..5 at
            // the '=' position and the mask only there.
            let t = &s.tokens;
            assert!(t[0] < 5);
            let mut i = 1;
            while i + 2 < len {
                assert!((TOK_PLUS..=TOK_TIMES).contains(&t[i]), "op at {i}");
                assert!(t[i + 1] < 5, "digit at {}", i + 1);
                i += 2;
            }
            assert_eq!(t[len - 2], TOK_EQUALS);
            assert_eq!(t[len - 1], TOK_EOS);
            let eq = len - 2;
            assert!(s.labels[eq] < 5);
            for (j, &m) in s.mask.iter().enumerate() {
                assert_eq!(m, j == eq);
            }
            assert_eq!(s.scored_position(), eq);
        }
        assert!(matches!(gen_mod_arith(&mut rng, 4), Err(Error::Input(_))));
        assert!(matches!(gen_mod_arith(&mut rng, 1), Err(Error::Input(_))));
    }

    #[test]
    fn generators_are_deterministic_under_seed() {
        let task = TaskSpec::mod_arith();
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for _ in 0..50 {
            assert_eq!(task.sample_train(&mut a), task.sample_train(&mut b));
        }
    }

    #[test]
    fn test_lengths_exceed_training_maximum() {
        for task in [TaskSpec::parity(), TaskSpec::mod_arith()] {
            let mut rng = Rng::new(13);
            for _ in 0..200 {
                let tr = task.sample_train(&mut rng);
                assert!(tr.len() >= 3 && tr.len() <= 40, "train len {}", tr.len());
                let te = task.sample_test(&mut rng);
                assert!(te.len() > 40 && te.len() <= 256, "test len {}", te.len());
            }
        }
    }

    #[test]
    fn normalized_accuracy_formula() {
        assert_eq!(normalized_accuracy(100.0, 50.0).unwrap(), 100.0);
        assert_eq!(normalized_accuracy(50.0, 50.0).unwrap(), 0.0);
        assert_eq!(normalized_accuracy(60.0, 20.0).unwrap(), 50.0);
        assert!(matches!(normalized_accuracy(50.0, 100.0), Err(Error::Domain(_))));
    }

    #[test]
    fn dump_line_format() {
        let task = TaskSpec::mod_arith();
        let s = TaskSample {
            tokens: vec![2, TOK_PLUS, 3, TOK_EQUALS, TOK_EOS],
            labels: vec![0, 0, 0, 0, 0],
            mask: vec![false, false, false, true, false],
        };
        assert_eq!(task.dump_line(&s), "2 + 3 = eos\t0");
    }

    #[test]
    fn untrained_parity_model_sits_at_chance() {
        let task = TaskSpec::parity();
        let layer = HybridLayerConfig::new(Variant::Synchronous, 8, 2, 4);
        let cfg = ModelConfig::new(task.vocab_size(), 1, layer);
        let flat = vec![0.0; param_count(&cfg)];
        let (raw, norm) = evaluate(&cfg, &flat, &task, 2000, true, 5).unwrap();
        // Zero parameters predict a constant; parity labels are uniform, so
        // raw accuracy sits at 50% up to sampling noise.
        assert!((raw - 50.0).abs() < 4.0, "raw={raw}");
        assert!(norm.abs() < 8.0, "norm={norm}");
    }
}
