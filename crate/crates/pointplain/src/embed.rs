//! Patch embedding and position embeddings.
//!
//! The patch embedding is a shared per-point MLP max-pooled over each
//! patch's K points, so it is invariant to within-patch ordering. Position
//! embeddings map key-point coordinates to feature vectors; the `Global`
//! variant additionally pools a feature over *the key set it is given* —
//! callers that embed a subset (the pre-training encoder path) therefore
//! leak nothing about keys outside that subset.

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::patchify::PatchTensor;
use crate::rng::Rng;
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

/// Builds the `(len(patches)·K) × (3 + extra_width)` input matrix for the
/// patch embedding from the selected patches: centered offsets concatenated
/// with raw extra channels.
pub fn patch_points_leaf(g: &mut Graph, pt: &PatchTensor, patches: &[usize]) -> Result<Var> {
    let k = pt.k;
    let width = pt.extras.as_ref().map_or(0, |(w, _)| *w);
    let cin = 3 + width;
    let mut data = Vec::with_capacity(patches.len() * k * cin);
    for &m in patches {
        for j in 0..k {
            let at = (m * k + j) * 3;
            data.extend_from_slice(&pt.offsets[at..at + 3]);
            if let Some((w, extras)) = &pt.extras {
                let at = (m * k + j) * w;
                data.extend_from_slice(&extras[at..at + w]);
            }
        }
    }
    Ok(g.constant(Tensor::new(vec![patches.len() * k, cin], data)?))
}

/// Shared PointNet patch embedding: a 3-layer per-point MLP (linear +
/// normalization + ReLU each) followed by a max-pool over the K points of
/// every patch.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    mlp: Mlp,
    pub out_dim: usize,
}

impl PatchEmbed {
    /// Default widths scale with the channel count as (C/4, C/2, C).
    pub fn default_widths(channels: usize) -> [usize; 3] {
        [(channels / 4).max(1), (channels / 2).max(1), channels]
    }

    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        widths: [usize; 3],
    ) -> Result<Self> {
        let mlp = Mlp::init(store, rng, name, in_dim, &widths, false)?;
        Ok(PatchEmbed {
            out_dim: widths[2],
            mlp,
        })
    }

    /// `points`: `(M·K) × C_in` rows grouped by patch. Returns `M × C`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        points: Var,
        m: usize,
        k: usize,
    ) -> Result<Var> {
        let h = self.mlp.forward(g, store, points)?;
        let h3 = g.reshape(h, vec![m, k, self.out_dim])?;
        let (pooled, _) = g.max_axis(h3, 1)?;
        Ok(pooled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosEmbedKind {
    None,
    Fourier,
    Mlp,
    Global,
}

impl PosEmbedKind {
    pub fn name(&self) -> &'static str {
        match self {
            PosEmbedKind::None => "none",
            PosEmbedKind::Fourier => "fourier",
            PosEmbedKind::Mlp => "mlp",
            PosEmbedKind::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PosEmbedKind::None),
            "fourier" => Ok(PosEmbedKind::Fourier),
            "mlp" => Ok(PosEmbedKind::Mlp),
            "global" => Ok(PosEmbedKind::Global),
            other => Err(Error::invalid(format!(
                "unknown position embedding `{other}` (expected none|fourier|mlp|global)"
            ))),
        }
    }
}

/// Position embedding: key-point coordinates → per-patch feature vectors.
#[derive(Debug, Clone)]
pub struct PosEmbed {
    pub kind: PosEmbedKind,
    pub out_dim: usize,
    per_key: Option<Mlp>,
    pool_mlp: Option<Mlp>,
    mix_mlp: Option<Mlp>,
    fourier_buffer: Option<String>,
}

impl PosEmbed {
    /// `sigma` scales the seeded Gaussian Fourier frequencies; ignored by
    /// the other kinds.
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        kind: PosEmbedKind,
        channels: usize,
        sigma: f64,
    ) -> Result<Self> {
        let mut embed = PosEmbed {
            kind,
            out_dim: channels,
            per_key: None,
            pool_mlp: None,
            mix_mlp: None,
            fourier_buffer: None,
        };
        match kind {
            PosEmbedKind::None => {}
            PosEmbedKind::Mlp => {
                embed.per_key = Some(Mlp::init(
                    store,
                    rng,
                    &format!("{name}.mlp"),
                    3,
                    &[channels, channels, channels],
                    true,
                )?);
            }
            PosEmbedKind::Global => {
                let quarter = (channels / 4).max(1);
                embed.pool_mlp = Some(Mlp::init(
                    store,
                    rng,
                    &format!("{name}.pool"),
                    3,
                    &[quarter, quarter, channels],
                    false,
                )?);
                embed.mix_mlp = Some(Mlp::init(
                    store,
                    rng,
                    &format!("{name}.mix"),
                    channels + 3,
                    &[channels, channels, channels],
                    true,
                )?);
            }
            PosEmbedKind::Fourier => {
                if !channels.is_multiple_of(2) {
                    return Err(Error::invalid(format!(
                        "fourier position embedding needs an even channel count, got {channels}"
                    )));
                }
                let half = channels / 2;
                let freqs: Vec<f64> = (0..3 * half).map(|_| rng.normal() * sigma).collect();
                let buffer = format!("{name}.freqs");
                store.insert(&buffer, Tensor::new(vec![3, half], freqs)?)?;
                embed.fourier_buffer = Some(buffer);
            }
        }
        Ok(embed)
    }

    /// Embeds the given key set. `Global` pools over exactly these keys and
    /// nothing else.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, keys: &[[f64; 3]]) -> Result<Var> {
        let m = keys.len();
        let flat: Vec<f64> = keys.iter().flat_map(|p| p.iter().copied()).collect();
        let keys_leaf = g.constant(Tensor::new(vec![m, 3], flat)?);
        match self.kind {
            PosEmbedKind::None => Ok(g.constant(Tensor::zeros(vec![m, self.out_dim]))),
            PosEmbedKind::Mlp => self.per_key.as_ref().unwrap().forward(g, store, keys_leaf),
            PosEmbedKind::Global => {
                let per_key = self
                    .pool_mlp
                    .as_ref()
                    .unwrap()
                    .forward(g, store, keys_leaf)?;
                let (pooled, _) = g.max_axis(per_key, 0)?;
                let pooled_row = g.reshape(pooled, vec![1, self.out_dim])?;
                let repeated = g.gather_rows(pooled_row, &vec![0; m])?;
                let mixed_in = g.concat_last(&[repeated, keys_leaf])?;
                self.mix_mlp.as_ref().unwrap().forward(g, store, mixed_in)
            }
            PosEmbedKind::Fourier => {
                let freqs = g.param(store, self.fourier_buffer.as_ref().unwrap())?;
                let proj = g.matmul(keys_leaf, freqs)?;
                let angles = g.scale(proj, 2.0 * std::f64::consts::PI)?;
                let sin = g.sin(angles)?;
                let cos = g.cos(angles)?;
                g.concat_last(&[sin, cos])
            }
        }
    }
}
