//! Plain transformer encoder: multi-head attention, feed-forward blocks,
//! and the position-injection policy.
//!
//! Layers default to pre-normalization residual blocks
//! (`x + MHA(norm(x))`, then `x + FFN(norm(x))`); a post-norm flag exists
//! so the alternative placement stays testable. No class token, no local
//! attention, no down-sampling inside the stack.

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, ParameterStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosInjection {
    /// Positions added once, before the first layer.
    First,
    /// Positions re-added before every layer.
    All,
}

impl PosInjection {
    pub fn name(&self) -> &'static str {
        match self {
            PosInjection::First => "first",
            PosInjection::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(PosInjection::First),
            "all" => Ok(PosInjection::All),
            other => Err(Error::invalid(format!(
                "unknown position injection `{other}` (expected first|all)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn_channels: usize,
    pub dropout: f64,
    pub pos_injection: PosInjection,
    pub post_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 3,
            channels: 256,
            heads: 4,
            ffn_channels: 512,
            dropout: 0.1,
            pos_injection: PosInjection::First,
            post_norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.ffn_channels == 0 {
            return Err(Error::invalid("ffn_channels must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Standard scaled dot-product multi-head attention with output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        if !channels.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::init(store, rng, format!("{name}.wq"), channels, channels)?,
            wk: Linear::init(store, rng, format!("{name}.wk"), channels, channels)?,
            wv: Linear::init(store, rng, format!("{name}.wv"), channels, channels)?,
            wo: Linear::init(store, rng, format!("{name}.wo"), channels, channels)?,
            heads,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, x)?.0)
    }

    /// Also returns the per-head attention weight matrices (rows sum to 1),
    /// which the invariant tests inspect.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "attention expects a 2-d sequence, got {shape:?}"
            )));
        }
        let channels = shape[1];
        let head_dim = channels / self.heads;
        let q = self.wq.forward(g, store, x)?;
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow_last(q, h * head_dim, head_dim)?;
            let kh = g.narrow_last(k, h * head_dim, head_dim)?;
            let vh = g.narrow_last(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let weights = g.softmax_last(scaled)?;
            let dropped = g.dropout(weights, self.dropout)?;
            head_outputs.push(g.matmul(dropped, vh)?);
            head_weights.push(weights);
        }
        let concat = g.concat_last(&head_outputs)?;
        let out = self.wo.forward(g, store, concat)?;
        Ok((out, head_weights))
    }
}

/// One transformer block: attention and feed-forward sub-layers with
/// residual connections and layer norms (pre-norm by default).
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm1: LayerNorm,
    norm2: LayerNorm,
    attn: MultiHeadAttention,
    ffn_in: Linear,
    ffn_out: Linear,
    dropout: f64,
    post_norm: bool,
}

impl TransformerLayer {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::init(store, format!("{name}.norm1"), cfg.channels)?,
            norm2: LayerNorm::init(store, format!("{name}.norm2"), cfg.channels)?,
            attn: MultiHeadAttention::init(
                store,
                rng,
                &format!("{name}.attn"),
                cfg.channels,
                cfg.heads,
                cfg.dropout,
            )?,
            ffn_in: Linear::init(
                store,
                rng,
                format!("{name}.ffn.l0"),
                cfg.channels,
                cfg.ffn_channels,
            )?,
            ffn_out: Linear::init(
                store,
                rng,
                format!("{name}.ffn.l1"),
                cfg.ffn_channels,
                cfg.channels,
            )?,
            dropout: cfg.dropout,
            post_norm: cfg.post_norm,
        })
    }

    fn ffn(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.ffn_in.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.dropout)?;
        self.ffn_out.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        if self.post_norm {
            let attn_out = self.attn.forward(g, store, x)?;
            let sum1 = g.add(x, attn_out)?;
            let x1 = self.norm1.forward(g, store, sum1)?;
            let ffn_out = self.ffn(g, store, x1)?;
            let sum2 = g.add(x1, ffn_out)?;
            self.norm2.forward(g, store, sum2)
        } else {
            let n1 = self.norm1.forward(g, store, x)?;
            let attn_out = self.attn.forward(g, store, n1)?;
            let x1 = g.add(x, attn_out)?;
            let n2 = self.norm2.forward(g, store, x1)?;
            let ffn_out = self.ffn(g, store, n2)?;
            g.add(x1, ffn_out)
        }
    }
}

/// Stack of transformer layers with the position-injection policy.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    layers: Vec<TransformerLayer>,
}

impl Encoder {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::init(store, rng, &format!("{name}.l{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { cfg, layers })
    }

    /// `features + positions` through the stack. With `PosInjection::All`
    /// the positions are re-added at the entry of every layer; either policy
    /// returns `features + positions` for a zero-layer stack.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        features: Var,
        positions: Var,
    ) -> Result<Var> {
        let mut x = g.add(features, positions)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 && self.cfg.pos_injection == PosInjection::All {
                x = g.add(x, positions)?;
            }
            x = layer.forward(g, store, x)?;
        }
        Ok(x)
    }
}
