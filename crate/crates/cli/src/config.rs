// Experiment configuration: a TOML file with nested sections (flat dotted
// keys), command-line overrides applied on top, validated before any run.
// Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use hqlt_core::hybrid::{HybridLayerConfig, MixerKind, UpdateRule, Variant};
use hqlt_core::model::ModelConfig;
use hqlt_core::tasks::TaskSpec;
use hqlt_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            task: TaskSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// "parity" or "mod_arith".
    pub kind: String,
    pub train_len_min: usize,
    pub train_len_max: usize,
    pub test_len_min: usize,
    pub test_len_max: usize,
    /// Supervise parity at every position (running parity) instead of only
    /// at the final one.
    pub parity_supervise_all: bool,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: "parity".into(),
            train_len_min: 3,
            train_len_max: 40,
            test_len_min: 40,
            test_len_max: 256,
            parity_supervise_all: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// "synchronous", "delayed_stream", "delayed_chunk", "kv_only", "fw_only".
    pub variant: String,
    /// "delta" or "linear".
    pub update_rule: String,
    /// "sum", "scalar", "vector".
    pub mixer: String,
    pub window: usize,
    pub chunk_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub sigma_scale: f64,
    pub use_rope: bool,
    pub use_attn_scale: bool,
    pub ff_multiplier: usize,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "synchronous".into(),
            update_rule: "delta".into(),
            mixer: "vector".into(),
            window: 16,
            chunk_size: 16,
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            sigma_scale: 2.0,
            use_rope: false,
            use_attn_scale: false,
            ff_multiplier: 4,
            tie_embeddings: false,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: usize,
    /// Learning rate for a single `train` run.
    pub lr: f64,
    /// Grid searched by `sweep`.
    pub lr_list: Vec<f64>,
    pub seeds_per_lr: usize,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub final_eval_samples: usize,
    pub shard_count: usize,
    pub early_stop_norm_acc: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 256,
            steps: 5000,
            lr: 1e-3,
            lr_list: vec![5e-3, 1e-3, 5e-4, 1e-4],
            seeds_per_lr: 3,
            warmup_steps: 100,
            grad_clip: 1.0,
            eval_interval: 250,
            eval_samples: 512,
            final_eval_samples: 2000,
            shard_count: 16,
            early_stop_norm_acc: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

/// Command-line values layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<String>,
    pub variant: Option<String>,
    pub update_rule: Option<String>,
    pub mixer: Option<String>,
    pub window: Option<usize>,
    pub chunk_size: Option<usize>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub sigma_scale: Option<f64>,
    pub use_rope: Option<bool>,
    pub batch: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub out: Option<String>,
    pub early_stop: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.task {
            self.task.kind = v.clone();
        }
        if let Some(v) = &o.variant {
            self.model.variant = v.clone();
        }
        if let Some(v) = &o.update_rule {
            self.model.update_rule = v.clone();
        }
        if let Some(v) = &o.mixer {
            self.model.mixer = v.clone();
        }
        if let Some(v) = o.window {
            self.model.window = v;
        }
        if let Some(v) = o.chunk_size {
            self.model.chunk_size = v;
        }
        if let Some(v) = o.layers {
            self.model.n_layers = v;
        }
        if let Some(v) = o.hidden {
            self.model.d_model = v;
        }
        if let Some(v) = o.heads {
            self.model.n_heads = v;
        }
        if let Some(v) = o.sigma_scale {
            self.model.sigma_scale = v;
        }
        if let Some(v) = o.use_rope {
            self.model.use_rope = v;
        }
        if let Some(v) = o.batch {
            self.train.batch_size = v;
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if let Some(v) = &o.out {
            self.output.dir = v.clone();
        }
        if let Some(v) = o.early_stop {
            self.train.early_stop_norm_acc = Some(v);
        }
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let mut spec = match self.task.kind.as_str() {
            "parity" => TaskSpec::parity(),
            "mod_arith" => TaskSpec::mod_arith(),
            other => {
                return Err(CliError::config(format!(
                    "unknown task '{other}' (expected parity or mod_arith)"
                )))
            }
        };
        spec.train_len_range = (self.task.train_len_min, self.task.train_len_max);
        spec.test_len_range = (self.task.test_len_min, self.task.test_len_max);
        spec.supervise_all = self.task.parity_supervise_all;
        if spec.train_len_range.0 > spec.train_len_range.1
            || spec.test_len_range.1 <= spec.train_len_range.1
        {
            return Err(CliError::config(
                "task length ranges must be ordered with test max above train max".into(),
            ));
        }
        Ok(spec)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let variant = match self.model.variant.as_str() {
            "synchronous" => Variant::Synchronous,
            "delayed_stream" => Variant::DelayedStream,
            "delayed_chunk" => Variant::DelayedChunk,
            "kv_only" => Variant::KvOnly,
            "fw_only" => Variant::FwOnly,
            other => return Err(CliError::config(format!("unknown variant '{other}'"))),
        };
        let update_rule = match self.model.update_rule.as_str() {
            "delta" => UpdateRule::Delta,
            "linear" => UpdateRule::Linear,
            other => return Err(CliError::config(format!("unknown update rule '{other}'"))),
        };
        let mixer = match self.model.mixer.as_str() {
            "sum" => MixerKind::Sum,
            "scalar" => MixerKind::DynamicScalar,
            "vector" => MixerKind::DynamicVector,
            other => return Err(CliError::config(format!("unknown mixer '{other}'"))),
        };
        let task = self.task_spec()?;
        let mut layer =
            HybridLayerConfig::new(variant, self.model.d_model, self.model.n_heads, self.model.window);
        layer.update_rule = update_rule;
        layer.mixer = mixer;
        layer.chunk_size = self.model.chunk_size;
        layer.sigma_scale = self.model.sigma_scale;
        layer.use_rope = self.model.use_rope;
        layer.use_attn_scale = self.model.use_attn_scale;
        let mut cfg = ModelConfig::new(task.vocab_size(), self.model.n_layers, layer);
        cfg.ff_multiplier = self.model.ff_multiplier;
        cfg.tie_embeddings = self.model.tie_embeddings;
        cfg.init_std = self.model.init_std;
        cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        if t.batch_size == 0 || t.lr_list.is_empty() || t.seeds_per_lr == 0 {
            return Err(CliError::config(
                "batch_size, lr_list and seeds_per_lr must be nonempty/positive".into(),
            ));
        }
        Ok(TrainConfig {
            batch_size: t.batch_size,
            steps: t.steps,
            lr_list: t.lr_list.clone(),
            seeds_per_lr: t.seeds_per_lr,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            eval_interval: t.eval_interval,
            eval_samples: t.eval_samples,
            final_eval_samples: t.final_eval_samples,
            shard_count: t.shard_count,
            early_stop_norm_acc: t.early_stop_norm_acc,
        })
    }
}
