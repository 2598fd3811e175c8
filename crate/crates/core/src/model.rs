//! The full classifier: a residual convolutional front-end, a stack of
//! attention blocks that each halve the sequence, and a pooled linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionLayer, AttentionVariant, LgaConfig, PosEncoding, QueryPath, WindowMode};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, LayerNorm, Linear, ParamStore};
use crate::tensor::{Element, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_res_kernel")]
    pub kernel: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
}

fn default_res_kernel() -> usize {
    7
}

fn default_pool() -> usize {
    2
}

/// Per-stage attention block settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    /// 1-based.
    pub stage: usize,
    pub attention: LgaConfig,
    pub d_base: usize,
    pub mlp_hidden: usize,
}

impl BlockSpec {
    pub fn new(stage: usize, attention: LgaConfig, d_base: usize) -> Self {
        BlockSpec {
            stage,
            attention,
            d_base,
            mlp_hidden: d_base * 2 * stage,
        }
    }
}

/// Architecture hyperparameters. The attention fields are shared by every
/// stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_leads")]
    pub leads: usize,
    #[serde(default = "d_input_len")]
    pub input_len: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_stages")]
    pub stages: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    /// Defaults to `embed_dim / 4`.
    #[serde(default)]
    pub d_base: Option<usize>,
    /// Output channels of the four front-end blocks; defaults to
    /// `[D/4, D/2, D, D]`. The last entry must equal `embed_dim`.
    #[serde(default)]
    pub front_end_channels: Option<Vec<usize>>,
    #[serde(default = "default_res_kernel")]
    pub front_end_kernel: usize,
    #[serde(default = "d_window")]
    pub window_len: usize,
    #[serde(default = "default_pool")]
    pub stride: usize,
    #[serde(default = "d_qk")]
    pub query_kernel: usize,
    #[serde(default)]
    pub kv_kernel: Option<usize>,
    #[serde(default)]
    pub variant: AttentionVariant,
    #[serde(default)]
    pub pos_encoding: PosEncoding,
    #[serde(default)]
    pub window_mode: WindowMode,
    #[serde(default)]
    pub query_path: QueryPath,
    #[serde(default)]
    pub precision: Precision,
}

fn d_leads() -> usize {
    12
}
fn d_input_len() -> usize {
    4096
}
fn d_classes() -> usize {
    6
}
fn d_embed() -> usize {
    128
}
fn d_stages() -> usize {
    4
}
fn d_heads() -> usize {
    4
}
fn d_window() -> usize {
    crate::attention::config::DEFAULT_WINDOW_LEN
}
fn d_qk() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ModelConfig {
    pub fn d_base(&self) -> usize {
        self.d_base.unwrap_or(self.embed_dim / 4)
    }

    pub fn front_end_specs(&self) -> Vec<ResBlockSpec> {
        let d = self.embed_dim;
        let channels = self
            .front_end_channels
            .clone()
            .unwrap_or_else(|| vec![(d / 4).max(1), (d / 2).max(1), d, d]);
        let mut prev = self.leads;
        channels
            .into_iter()
            .map(|c| {
                let spec = ResBlockSpec {
                    in_channels: prev,
                    out_channels: c,
                    kernel: self.front_end_kernel,
                    pool: 2,
                };
                prev = c;
                spec
            })
            .collect()
    }

    pub fn attention_config(&self) -> LgaConfig {
        LgaConfig {
            embed_dim: self.embed_dim,
            heads: self.heads,
            window_len: self.window_len,
            stride: self.stride,
            query_kernel: self.query_kernel,
            query_padding: None,
            kv_kernel: self.kv_kernel,
            variant: self.variant,
            pos_encoding: self.pos_encoding,
            window_mode: self.window_mode,
            query_path: self.query_path,
        }
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        (1..=self.stages)
            .map(|i| BlockSpec::new(i, self.attention_config(), self.d_base()))
            .collect()
    }

    /// Sequence length after the front-end and after each stage.
    pub fn length_trace(&self) -> Result<Vec<usize>> {
        let mut n = self.input_len;
        let mut trace = Vec::new();
        for spec in self.front_end_specs() {
            if spec.pool == 0 || n % spec.pool != 0 || n == 0 {
                return Err(Error::config(format!(
                    "input_len {} not divisible through the front-end pools (stuck at {n})",
                    self.input_len
                )));
            }
            n /= spec.pool;
        }
        trace.push(n);
        let att = self.attention_config();
        for stage in 1..=self.stages {
            if n % 2 != 0 {
                return Err(Error::config(format!("stage {stage} input length {n} is odd")));
            }
            let m = att.output_len(n)?;
            let expected = if self.variant == AttentionVariant::VitLike { n } else { n / 2 };
            if m != expected {
                return Err(Error::config(format!(
                    "stage {stage}: attention maps length {n} to {m}, but blocks must halve the sequence"
                )));
            }
            n /= 2;
            trace.push(n);
        }
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.leads == 0 || self.classes == 0 || self.embed_dim == 0 {
            return Err(Error::config("leads, classes and embed_dim must be positive"));
        }
        let specs = self.front_end_specs();
        if specs.len() != 4 {
            return Err(Error::config(format!("front-end needs 4 blocks, got {}", specs.len())));
        }
        if specs.last().unwrap().out_channels != self.embed_dim {
            return Err(Error::config(format!(
                "last front-end channel count {} must equal embed_dim {}",
                specs.last().unwrap().out_channels,
                self.embed_dim
            )));
        }
        if specs.iter().any(|s| s.out_channels == 0 || s.kernel % 2 == 0) {
            return Err(Error::config("front-end channels must be positive and kernels odd"));
        }
        if self.d_base() == 0 {
            return Err(Error::config("d_base must be positive"));
        }
        self.attention_config().validate()?;
        self.length_trace()?;
        Ok(())
    }
}

// ── layers ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub spec: ResBlockSpec,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    /// 1×1 projection when the channel count changes.
    pub skip: Option<Conv1d>,
}

impl ResBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, spec: ResBlockSpec) -> Result<Self> {
        let (ci, co, k) = (spec.in_channels, spec.out_channels, spec.kernel);
        let conv1 = Conv1d::same(store, rng, &format!("{name}.conv1"), ci, co, k)?;
        let conv2 = Conv1d::same(store, rng, &format!("{name}.conv2"), co, co, k)?;
        let skip = (ci != co).then(|| Conv1d::new(store, rng, &format!("{name}.skip"), ci, co, 1, 1, 0));
        Ok(ResBlock { spec, conv1, conv2, skip })
    }

    /// `[B, C_in, L] → [B, C_out, L/pool]`
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, params, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, params, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, params, x)?,
            None => x,
        };
        let h = tape.add(h, skip)?;
        let h = tape.relu(h)?;
        tape.max_pool1d(h, self.spec.pool, self.spec.pool)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub spec: BlockSpec,
    /// Owns the block's first layer norm.
    pub attention: AttentionLayer,
    /// 1×1 conv applied after the stride-2 max pool on the residual path.
    pub residual: Conv1d,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub output: Var,
    pub attention: Var,
}

impl TransformerBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: BlockSpec,
        seq_len: usize,
    ) -> Result<Self> {
        let d = spec.attention.embed_dim;
        let attention = AttentionLayer::new(store, rng, &format!("{name}.attn"), spec.attention, seq_len)?;
        let residual = Conv1d::new(store, rng, &format!("{name}.residual"), d, d, 1, 1, 0);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), d, spec.mlp_hidden);
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), spec.mlp_hidden, d);
        Ok(TransformerBlock {
            spec,
            attention,
            residual,
            norm2,
            fc1,
            fc2,
        })
    }

    /// `Conv1×1(MaxPool(k=2, s=2)(·))` on a `[B, N, D]` tensor.
    fn reduce<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let xt = tape.permute(x, &[0, 2, 1])?;
        let pooled = tape.max_pool1d(xt, 2, 2)?;
        let y = self.residual.forward(tape, params, pooled)?;
        tape.permute(y, &[0, 2, 1])
    }

    /// `[B, N, D] → [B, N/2, D]`
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<BlockOutput> {
        let n = tape.shape(x)[1];
        if n % 2 != 0 {
            return Err(Error::shape("transformer_block", format!("sequence length {n} is odd")));
        }
        let xn = self.attention.norm.forward(tape, params, x)?;
        let att = self.attention.forward_normalized(tape, params, xn)?;
        let y = if self.spec.attention.variant == AttentionVariant::VitLike {
            self.reduce(tape, params, att.output)?
        } else {
            att.output
        };
        let res = self.reduce(tape, params, xn)?;
        let z = tape.add(y, res)?;
        let h = self.norm2.forward(tape, params, z)?;
        let h = self.fc1.forward(tape, params, h)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, params, h)?;
        Ok(BlockOutput {
            output: tape.add(z, h)?,
            attention: att.attention,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub front_end: Vec<ResBlock>,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, K]` raw logits.
    pub logits: Var,
    /// Attention weights of every stage.
    pub attention: Vec<Var>,
    /// `[B, N, D]` activations: front-end output, then each stage.
    pub stages: Vec<Var>,
}

impl Model {
    /// Build the layer structure and register freshly initialised
    /// parameters in `store`.
    pub fn build<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let trace = config.length_trace()?;
        let front_end = config
            .front_end_specs()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| ResBlock::new(store, rng, &format!("front.{i}"), spec))
            .collect::<Result<Vec<_>>>()?;
        let blocks = config
            .block_specs()
            .into_iter()
            .zip(&trace)
            .map(|(spec, &n)| TransformerBlock::new(store, rng, &format!("stage.{}", spec.stage), spec, n))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, rng, "head", config.embed_dim, config.classes);
        Ok(Model {
            config: config.clone(),
            front_end,
            blocks,
            head,
        })
    }

    /// Fresh model and parameters from a seed.
    pub fn init<T: Element>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// `[B, C, N₀] → [B, N₁, D]`
    pub fn front_end<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.config.leads || s[2] != self.config.input_len {
            return Err(Error::shape(
                "front_end",
                format!(
                    "expected [B, {}, {}], got {s:?}",
                    self.config.leads, self.config.input_len
                ),
            ));
        }
        let mut h = x;
        for block in &self.front_end {
            h = block.forward(tape, params, h)?;
        }
        tape.permute(h, &[0, 2, 1])
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &Bound, x: Var) -> Result<ModelOutput> {
        let mut h = self.front_end(tape, params, x)?;
        let mut stages = vec![h];
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, params, h)?;
            h = out.output;
            stages.push(h);
            attention.push(out.attention);
        }
        let pooled = tape.mean(h, 1)?;
        let logits = self.head.forward(tape, params, pooled)?;
        Ok(ModelOutput {
            logits,
            attention,
            stages,
        })
    }
}

pub fn count_parameters<T: Element>(store: &ParamStore<T>) -> usize {
    store.num_elements()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_config_traces_to_sixteen() {
        let c = ModelConfig::default();
        assert_eq!((c.leads, c.input_len, c.classes, c.embed_dim), (12, 4096, 6, 128));
        assert_eq!(c.length_trace().unwrap(), vec![256, 128, 64, 32, 16]);
        assert_eq!(c.d_base(), 32);
        assert_eq!(c.block_specs()[2].mlp_hidden, 192);
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let c = ModelConfig {
            input_len: 4000,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_linear_counts_nine() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut store, &mut rng, "l", 2, 3);
        assert_eq!(count_parameters(&store), 9);
        assert_eq!(count_parameters(&ParamStore::<f64>::new()), 0);
    }

    #[test]
    fn miniature_forward_shapes() {
        let cfg = ModelConfig {
            leads: 2,
            input_len: 64,
            embed_dim: 8,
            heads: 2,
            stages: 2,
            window_len: 4,
            ..ModelConfig::default()
        };
        let (model, store) = Model::init::<f64>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[3, 2, 64], 0.5));
        let out = model.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.logits), &[3, 6]);
        let lens: Vec<usize> = out.stages.iter().map(|&s| tape.shape(s)[1]).collect();
        assert_eq!(lens, vec![4, 2, 1]);
    }
}
