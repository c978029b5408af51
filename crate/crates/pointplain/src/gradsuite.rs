//! The full gradient-check suite: every differentiable primitive, a
//! 3-layer encoder, the segmentation head, and the complete
//! masked-autoencoder loss on a toy configuration, all against central
//! finite differences at 64-bit.
//!
//! Methodology for the composite (model-level) checks:
//! * parameters are nudged off their init point — zero-initialized biase
//!   rows otherwise sit exactly on ReLU kinks, where one-sided derivatives
//!   break finite differences;
//! * the probe loss is scaled down by a constant, which bounds the relative
//!   finite-difference noise of structurally zero gradients (softmax
//!   cancels key-projection biases) without changing any true relative
//!   error;
//! * eps = 1e-5 balances truncation against cancellation at that scale.

use crate::embed::PosEmbedKind;
use crate::encoder::{Encoder, EncoderConfig, PosInjection};
use crate::error::Result;
use crate::mae::{partition_patches, DecoderConfig, MaeConfig, MaeModel};
use crate::patchify::PatchTensor;
use crate::rng::Rng;
use crate::seghead::{InterpolationSpec, SegHead};
use crate::tensor::gradcheck::{check_primitives, nudge_params};
use crate::tensor::{grad_check, ParameterStore, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const PROBE_SCALE: f64 = 1e-4;
const MODEL_EPS: f64 = 2e-5;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_rows(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.range(-1.0, 1.0)).collect(),
    )
    .expect("finite random tensor")
}

fn encoder_entry() -> Result<SuiteEntry> {
    let mut rng = Rng::new(0x0e5c);
    let mut store = ParameterStore::new(0);
    let cfg = EncoderConfig {
        layers: 3,
        channels: 8,
        heads: 2,
        ffn_channels: 16,
        dropout: 0.0,
        pos_injection: PosInjection::First,
        post_norm: false,
    };
    let enc = Encoder::init(&mut store, &mut rng, "enc", cfg)?;
    let mut nudge_rng = rng.split(1);
    nudge_params(&mut store, &mut nudge_rng, 0.05);
    let f_t = rand_rows(&mut rng, 4, 8);
    let e_t = rand_rows(&mut rng, 4, 8);
    let w_t = rand_rows(&mut rng, 4, 8);
    let err = grad_check(
        |g, s| {
            let f = g.leaf(f_t.clone(), false);
            let e = g.leaf(e_t.clone(), false);
            let y = enc.forward(g, s, f, e)?;
            let w = g.leaf(w_t.clone(), false);
            let p = g.mul(y, w)?;
            let m = g.mean_all(p)?;
            g.scale(m, PROBE_SCALE)
        },
        &mut store,
        MODEL_EPS,
    )?;
    Ok(SuiteEntry {
        name: "encoder (3 layers)".into(),
        max_rel_err: err,
    })
}

fn seghead_entry() -> Result<SuiteEntry> {
    let mut rng = Rng::new(0x5e6);
    let mut store = ParameterStore::new(0);
    let head = SegHead::init(
        &mut store,
        &mut rng,
        "seg",
        8,
        5,
        InterpolationSpec {
            neighbors: 3,
            epsilon: 1e-8,
        },
    )?;
    let mut nudge_rng = rng.split(1);
    nudge_params(&mut store, &mut nudge_rng, 0.05);
    let keys: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            [
                rng.range(-1.0, 1.0),
                rng.range(-1.0, 1.0),
                rng.range(-1.0, 1.0),
            ]
        })
        .collect();
    let queries: Vec<[f64; 3]> = (0..5)
        .map(|_| {
            [
                rng.range(-1.0, 1.0),
                rng.range(-1.0, 1.0),
                rng.range(-1.0, 1.0),
            ]
        })
        .collect();
    let feats_t = rand_rows(&mut rng, 6, 8);
    let w_t = rand_rows(&mut rng, 5, 5);
    let err = grad_check(
        |g, s| {
            let feats = g.leaf(feats_t.clone(), false);
            let logits = head.forward(g, s, &queries, &keys, feats)?;
            let w = g.leaf(w_t.clone(), false);
            let p = g.mul(logits, w)?;
            let m = g.mean_all(p)?;
            g.scale(m, PROBE_SCALE)
        },
        &mut store,
        MODEL_EPS,
    )?;
    Ok(SuiteEntry {
        name: "segmentation head".into(),
        max_rel_err: err,
    })
}

/// Toy pre-training configuration: 8 patches of 16 points, 32 channels,
/// 2:1:1 drop/mask/reserve, dropout off.
pub fn toy_mae_setup() -> Result<(
    ParameterStore,
    MaeModel,
    PatchTensor,
    crate::mae::MaskPartition,
)> {
    let cfg = MaeConfig {
        patch_k: 16,
        extra_width: 0,
        encoder: EncoderConfig {
            layers: 3,
            channels: 32,
            heads: 4,
            ffn_channels: 64,
            dropout: 0.0,
            pos_injection: PosInjection::First,
            post_norm: false,
        },
        decoder: DecoderConfig {
            layers: 2,
            channels: 32,
            heads: 4,
            ffn_channels: 32,
            dropout: 0.0,
        },
        pos_kind: PosEmbedKind::Global,
        fourier_sigma: 1.0,
    };
    let mut rng = Rng::new(0x3ae);
    let mut store = ParameterStore::new(0);
    let model = MaeModel::init(&mut store, &mut rng, cfg)?;
    let mut nudge_rng = rng.split(1);
    nudge_params(&mut store, &mut nudge_rng, 0.05);
    let m = 8;
    let k = 16;
    let pt = PatchTensor {
        m,
        k,
        offsets: (0..m * k * 3).map(|_| rng.range(-0.2, 0.2)).collect(),
        extras: None,
        key_coords: (0..m)
            .map(|_| {
                [
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                ]
            })
            .collect(),
    };
    let part = partition_patches(m, (0.5, 0.25, 0.25), &mut rng)?;
    Ok((store, model, pt, part))
}

fn mae_entry() -> Result<SuiteEntry> {
    let (mut store, model, pt, part) = toy_mae_setup()?;
    let err = grad_check(
        |g, s| {
            let rec = model.forward(g, s, &pt, &part)?;
            let loss = model.loss(g, &rec)?;
            g.scale(loss, PROBE_SCALE)
        },
        &mut store,
        MODEL_EPS,
    )?;
    Ok(SuiteEntry {
        name: "mae loss (toy config)".into(),
        max_rel_err: err,
    })
}

/// Runs everything. Entries report their worst relative error; all must be
/// below [`TOLERANCE`].
pub fn run_full_suite() -> Result<Vec<SuiteEntry>> {
    let mut entries: Vec<SuiteEntry> = check_primitives(20, 1e-6)?
        .into_iter()
        .map(|(name, err)| SuiteEntry {
            name: format!("primitive {name}"),
            max_rel_err: err,
        })
        .collect();
    entries.push(encoder_entry()?);
    entries.push(seghead_entry()?);
    entries.push(mae_entry()?);
    Ok(entries)
}
