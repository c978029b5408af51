//! Small layer handles: linear, normalization, and MLP stacks.
//!
//! A handle owns no values, only the parameter names it registered in the
//! [`ParameterStore`] at init time; forward passes load those names onto the
//! tape. Weights initialize uniform in ±sqrt(6/fan_in) with zero biases.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let name = name.into();
        let bound = (6.0 / in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.range(-bound, bound))
            .collect();
        store.insert(
            format!("{name}.w"),
            Tensor::new(vec![in_dim, out_dim], w)?.requires_grad(true),
        )?;
        store.insert(
            format!("{name}.b"),
            Tensor::zeros(vec![out_dim]).requires_grad(true),
        )?;
        Ok(Linear {
            name,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Per-feature normalization in evaluation semantics: fixed zero-mean /
/// unit-variance statistics with a learnable affine, i.e.
/// `y = gamma * x / sqrt(1 + eps) + beta`. Batch-independent, so forward
/// passes are deterministic at any batch size.
#[derive(Debug, Clone)]
pub struct FeatureNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl FeatureNorm {
    pub const EPS: f64 = 1e-5;

    pub fn init(store: &mut ParameterStore, name: impl Into<String>, dim: usize) -> Result<Self> {
        let name = name.into();
        store.insert(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![1.0; dim])?.requires_grad(true),
        )?;
        store.insert(
            format!("{name}.beta"),
            Tensor::zeros(vec![dim]).requires_grad(true),
        )?;
        Ok(FeatureNorm {
            name,
            dim,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        let scaled = g.scale(x, 1.0 / (1.0 + self.eps).sqrt())?;
        let y = g.mul_row(scaled, gamma)?;
        g.add_row(y, beta)
    }
}

/// Learned affine for layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParameterStore, name: impl Into<String>, dim: usize) -> Result<Self> {
        let name = name.into();
        store.insert(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![1.0; dim])?.requires_grad(true),
        )?;
        store.insert(
            format!("{name}.beta"),
            Tensor::zeros(vec![dim]).requires_grad(true),
        )?;
        Ok(LayerNorm {
            name,
            dim,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Stack of linear layers, each followed by normalization + ReLU except
/// (optionally) the last, which stays purely linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(Linear, Option<FeatureNorm>)>,
}

impl Mlp {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        last_linear: bool,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let lin = Linear::init(store, rng, format!("{name}.l{i}"), d, w)?;
            let is_last = i + 1 == widths.len();
            let norm = if is_last && last_linear {
                None
            } else {
                Some(FeatureNorm::init(store, format!("{name}.n{i}"), w)?)
            };
            layers.push((lin, norm));
            d = w;
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, mut x: Var) -> Result<Var> {
        for (lin, norm) in &self.layers {
            x = lin.forward(g, store, x)?;
            if let Some(n) = norm {
                x = n.forward(g, store, x)?;
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |(l, _)| l.out_dim)
    }
}
