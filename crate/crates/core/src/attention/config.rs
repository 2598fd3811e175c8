use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which attention mechanism a layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttentionVariant {
    /// Averaged overlapping-window conv queries against global conv keys/values.
    #[default]
    Lga,
    /// Full global attention with linear projections; keeps length N.
    VitLike,
    /// Attention inside non-overlapping windows, then stride-2 average pooling.
    SwinLike,
    /// Conv queries pooled without overlap, global conv keys/values.
    GlobalQkv,
    /// Averaged window queries attending only to their own window.
    LocalQkv,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::VitLike,
        AttentionVariant::SwinLike,
        AttentionVariant::GlobalQkv,
        AttentionVariant::LocalQkv,
        AttentionVariant::Lga,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AttentionVariant::Lga => "LGA",
            AttentionVariant::VitLike => "VIT_LIKE",
            AttentionVariant::SwinLike => "SWIN_LIKE",
            AttentionVariant::GlobalQkv => "GLOBAL_QKV",
            AttentionVariant::LocalQkv => "LOCAL_QKV",
        }
    }

    /// Column heading used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            AttentionVariant::Lga => "LGA-ECG",
            AttentionVariant::VitLike => "ViT-like",
            AttentionVariant::SwinLike => "Swin-like",
            AttentionVariant::GlobalQkv => "Global Q, K, V",
            AttentionVariant::LocalQkv => "Local Q, K, V",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| Error::config(format!("unknown attention variant {tag:?}")))
    }

    pub fn uses_conv_projections(self) -> bool {
        !matches!(self, AttentionVariant::VitLike | AttentionVariant::SwinLike)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PosEncoding {
    #[default]
    None,
    SinusoidalApe,
    LearnableApe,
    Relative,
}

impl PosEncoding {
    pub const ALL: [PosEncoding; 4] = [
        PosEncoding::SinusoidalApe,
        PosEncoding::LearnableApe,
        PosEncoding::Relative,
        PosEncoding::None,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PosEncoding::None => "NONE",
            PosEncoding::SinusoidalApe => "SINUSOIDAL_APE",
            PosEncoding::LearnableApe => "LEARNABLE_APE",
            PosEncoding::Relative => "RELATIVE",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PosEncoding::None => "Without PE",
            PosEncoding::SinusoidalApe => "Sinusoidal APE",
            PosEncoding::LearnableApe => "Learnable APE",
            PosEncoding::Relative => "RPE",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| Error::config(format!("unknown positional encoding {tag:?}")))
    }
}

/// How query windows meet the sequence edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Zero-pad `(l − s)/2` per side so that `M = N/s` exactly.
    #[default]
    Halving,
    /// No padding: `M = ⌊(N − l)/s⌋ + 1`.
    Unpadded,
}

/// How LGA queries are computed. Both produce identical values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryPath {
    /// One shape-preserving conv over the sequence, then average pooling.
    #[default]
    Pooled,
    /// Slice each window, convolve it, average it, stack the results.
    Windowed,
}

/// Hyperparameters of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgaConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub window_len: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_kernel")]
    pub query_kernel: usize,
    /// Defaults to `(query_kernel − 1)/2`.
    #[serde(default)]
    pub query_padding: Option<usize>,
    /// Defaults to `query_kernel`.
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
}

fn default_stride() -> usize {
    2
}

fn default_kernel() -> usize {
    3
}

pub const DEFAULT_WINDOW_LEN: usize = 64;

impl LgaConfig {
    pub fn new(embed_dim: usize, heads: usize, window_len: usize) -> Self {
        LgaConfig {
            embed_dim,
            heads,
            window_len,
            stride: default_stride(),
            query_kernel: default_kernel(),
            query_padding: None,
            kv_kernel: None,
            variant: AttentionVariant::Lga,
            pos_encoding: PosEncoding::None,
            window_mode: WindowMode::Halving,
            query_path: QueryPath::Pooled,
        }
    }

    pub fn with_variant(mut self, variant: AttentionVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_pos_encoding(mut self, pe: PosEncoding) -> Self {
        self.pos_encoding = pe;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn q_padding(&self) -> usize {
        self.query_padding.unwrap_or((self.query_kernel.saturating_sub(1)) / 2)
    }

    pub fn kv_kernel_size(&self) -> usize {
        self.kv_kernel.unwrap_or(self.query_kernel)
    }

    /// Per-side zero padding applied before window extraction.
    pub fn edge_padding(&self) -> usize {
        match self.window_mode {
            WindowMode::Halving => (self.window_len - self.stride) / 2,
            WindowMode::Unpadded => 0,
        }
    }

    /// Number of conv outputs averaged into one query: equals the window
    /// length when the query conv preserves length.
    pub fn query_pool_len(&self) -> usize {
        self.window_len + 2 * self.q_padding() + 1 - self.query_kernel
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.embed_dim == 0 || self.heads == 0 {
            return fail("embed_dim and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.stride == 0 || self.window_len < self.stride {
            return fail(format!("need window_len >= stride >= 1, got l={} s={}", self.window_len, self.stride));
        }
        if self.query_kernel == 0 {
            return fail("query_kernel must be positive".into());
        }
        if self.query_padding.is_none() && self.query_kernel % 2 == 0 {
            return fail(format!("query_kernel {} must be odd with default padding", self.query_kernel));
        }
        if self.window_len + 2 * self.q_padding() < self.query_kernel {
            return fail(format!(
                "query conv kernel {} does not fit window {} with padding {}",
                self.query_kernel,
                self.window_len,
                self.q_padding()
            ));
        }
        if self.kv_kernel_size() % 2 == 0 {
            return fail(format!("kv_kernel {} must be odd (length-preserving)", self.kv_kernel_size()));
        }
        if self.window_mode == WindowMode::Halving && (self.window_len - self.stride) % 2 != 0 {
            return fail(format!(
                "halving mode needs window_len - stride even, got l={} s={}",
                self.window_len, self.stride
            ));
        }
        Ok(())
    }

    /// Output sequence length for an input of length `n`.
    pub fn output_len(&self, n: usize) -> Result<usize> {
        match self.variant {
            AttentionVariant::VitLike => Ok(n),
            AttentionVariant::SwinLike => {
                let w = self.window_len.min(n);
                if n % 2 != 0 || w == 0 || n % w != 0 {
                    return Err(Error::shape(
                        "swin_attention",
                        format!("length {n} must be even and divisible by window {w}"),
                    ));
                }
                Ok(n / 2)
            }
            AttentionVariant::GlobalQkv => {
                if n < self.stride {
                    return Err(Error::shape("global_qkv", format!("length {n} < stride {}", self.stride)));
                }
                Ok(n / self.stride)
            }
            AttentionVariant::Lga | AttentionVariant::LocalQkv => window_count(n, self.window_len, self.stride, self.window_mode),
        }
    }
}

/// Number of query windows over a length-`n` sequence.
pub fn window_count(n: usize, l: usize, s: usize, mode: WindowMode) -> Result<usize> {
    if s == 0 || l < s {
        return Err(Error::config(format!("need l >= s >= 1, got l={l} s={s}")));
    }
    match mode {
        WindowMode::Unpadded => {
            if n < l {
                return Err(Error::shape("window_count", format!("sequence length {n} < window {l}")));
            }
            Ok((n - l) / s + 1)
        }
        WindowMode::Halving => {
            if (l - s) % 2 != 0 {
                return Err(Error::config(format!("halving mode needs l - s even, got l={l} s={s}")));
            }
            if n < s || n % s != 0 {
                return Err(Error::shape("window_count", format!("length {n} not a positive multiple of stride {s}")));
            }
            let padded = n + (l - s);
            Ok((padded - l) / s + 1)
        }
    }
}
