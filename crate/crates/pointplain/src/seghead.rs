//! Dense-prediction head: up-sample patch features to arbitrary query
//! points by inverse-distance interpolation over nearby keys, then classify
//! per point.

use crate::error::{Error, Result};
use crate::geom::{knn_search, sq_dist};
use crate::nn::{FeatureNorm, Linear, Mlp};
use crate::rng::Rng;
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct InterpolationSpec {
    pub neighbors: usize,
    /// Distance clamp: weights are ∝ 1/max(distance, epsilon), so an exact
    /// hit stays bounded instead of branching.
    pub epsilon: f64,
}

impl Default for InterpolationSpec {
    fn default() -> Self {
        InterpolationSpec {
            neighbors: 5,
            epsilon: 1e-8,
        }
    }
}

impl InterpolationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::invalid("interpolation needs at least one neighbor"));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::invalid("interpolation epsilon must be positive"));
        }
        Ok(())
    }
}

/// Normalized inverse-distance weights for one query's neighbor list.
pub fn inverse_distance_weights(dists: &[f64], epsilon: f64) -> Vec<f64> {
    let raw: Vec<f64> = dists.iter().map(|&d| 1.0 / d.max(epsilon)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|&w| w / z).collect()
}

pub struct SegHead {
    pub spec: InterpolationSpec,
    pub num_classes: usize,
    proj: Mlp,
    hidden: Linear,
    hidden_norm: FeatureNorm,
    out: Linear,
    dropout: f64,
}

impl SegHead {
    pub fn init(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        num_classes: usize,
        spec: InterpolationSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "segmentation needs at least 2 classes, got {num_classes}"
            )));
        }
        // Neighbor distance is concatenated to the neighbor's feature before
        // the 96-channel projection.
        let proj = Mlp::init(
            store,
            rng,
            &format!("{name}.proj"),
            in_channels + 1,
            &[96, 96],
            false,
        )?;
        let hidden = Linear::init(store, rng, format!("{name}.cls.l0"), 96, 96)?;
        let hidden_norm = FeatureNorm::init(store, format!("{name}.cls.n0"), 96)?;
        let out = Linear::init(store, rng, format!("{name}.cls.l1"), 96, num_classes)?;
        Ok(SegHead {
            spec,
            num_classes,
            proj,
            hidden,
            hidden_norm,
            out,
            dropout: 0.5,
        })
    }

    /// Inverse-distance-weighted sum of projected neighbor features:
    /// `queries × 96`, a convex combination per query.
    pub fn interpolate(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        queries: &[[f64; 3]],
        keys: &[[f64; 3]],
        feats: Var,
    ) -> Result<Var> {
        let n = self.spec.neighbors;
        if n > keys.len() {
            return Err(Error::invalid(format!(
                "interpolation wants {n} neighbors but only {} keys exist",
                keys.len()
            )));
        }
        let idx = knn_search(queries, keys, n)?;
        let q = queries.len();

        let mut dists = Vec::with_capacity(q * n);
        for (qi, row) in idx.chunks(n).enumerate() {
            for &ki in row {
                dists.push(sq_dist(queries[qi], keys[ki]).sqrt());
            }
        }
        let mut weights = Vec::with_capacity(q * n);
        for row in dists.chunks(n) {
            weights.extend(inverse_distance_weights(row, self.spec.epsilon));
        }

        let gathered = g.gather_rows(feats, &idx)?;
        let dist_col = g.constant(Tensor::new(vec![q * n, 1], dists)?);
        let with_dist = g.concat_last(&[dist_col, gathered])?;
        let projected = self.proj.forward(g, store, with_dist)?;
        let weight_vec = g.constant(Tensor::new(vec![q * n], weights)?);
        let weighted = g.mul_col(projected, weight_vec)?;
        let stacked = g.reshape(weighted, vec![q, n, 96])?;
        g.sum_axis(stacked, 1)
    }

    /// Per-query class logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        queries: &[[f64; 3]],
        keys: &[[f64; 3]],
        feats: Var,
    ) -> Result<Var> {
        let interp = self.interpolate(g, store, queries, keys, feats)?;
        let h = self.hidden.forward(g, store, interp)?;
        let h = self.hidden_norm.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.dropout)?;
        self.out.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_keys(rng: &mut Rng, m: usize) -> Vec<[f64; 3]> {
        (0..m)
            .map(|_| {
                [
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                ]
            })
            .collect()
    }

    fn toy_feats(rng: &mut Rng, m: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![m, c],
            (0..m * c).map(|_| rng.range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn weights_normalize_and_clamp() {
        let w = inverse_distance_weights(&[0.0, 0.5, 1.0], 1e-8);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // The exact hit dominates through the epsilon clamp.
        assert!(w[0] > 0.999_999);

        for trial in 0..50 {
            let mut rng = Rng::new(trial);
            let d: Vec<f64> = (0..5).map(|_| rng.range(0.01, 2.0)).collect();
            let w = inverse_distance_weights(&d, 1e-8);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn equidistant_identical_features_pass_through() {
        let mut rng = Rng::new(1);
        let mut store = ParameterStore::new(0);
        let head = SegHead::init(
            &mut store,
            &mut rng,
            "seg",
            8,
            3,
            InterpolationSpec {
                neighbors: 2,
                epsilon: 1e-8,
            },
        )
        .unwrap();
        // Two keys mirrored around the query, identical features.
        let keys = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let row: Vec<f64> = (0..8).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut fdata = row.clone();
        fdata.extend_from_slice(&row);
        let query = [[0.0, 0.0, 0.0]];

        let mut g = Graph::new();
        let feats = g.constant(Tensor::new(vec![2, 8], fdata).unwrap());
        let interp = head
            .interpolate(&mut g, &store, &query, &keys, feats)
            .unwrap();

        // The projected feature of either neighbor (identical inputs: same
        // distance, same feature row) is the convex-combination fixed point.
        let mut g2 = Graph::new();
        let mut one = vec![1.0];
        one.extend_from_slice(&row);
        let x = g2.constant(Tensor::new(vec![1, 9], one).unwrap());
        let want = head.proj.forward(&mut g2, &store, x).unwrap();
        for (a, b) in g.value(interp).data().iter().zip(g2.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_gives_constant_logits() {
        let mut rng = Rng::new(2);
        let mut store = ParameterStore::new(0);
        let head = SegHead::init(
            &mut store,
            &mut rng,
            "seg",
            4,
            3,
            InterpolationSpec {
                neighbors: 1,
                epsilon: 1e-8,
            },
        )
        .unwrap();
        let keys = [[0.5, 0.5, 0.5]];
        let queries = toy_keys(&mut rng, 7);
        let mut g = Graph::new();
        let feats = g.constant(toy_feats(&mut rng, 1, 4));
        let logits = head
            .forward(&mut g, &store, &queries, &keys, feats)
            .unwrap();
        let out = g.value(logits).data();
        // Distances differ per query, and distance feeds the projection, so
        // rows are not forced equal; but with a single neighbor each row is
        // that key's projection. Check shape and that argmax is well formed.
        assert_eq!(g.value(logits).shape(), &[7, 3]);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn logits_shape_matches_class_count() {
        let mut rng = Rng::new(3);
        let mut store = ParameterStore::new(0);
        let head = SegHead::init(
            &mut store,
            &mut rng,
            "seg",
            16,
            13,
            InterpolationSpec::default(),
        )
        .unwrap();
        let keys = toy_keys(&mut rng, 9);
        let queries = toy_keys(&mut rng, 21);
        let mut g = Graph::new();
        let feats = g.constant(toy_feats(&mut rng, 9, 16));
        let logits = head
            .forward(&mut g, &store, &queries, &keys, feats)
            .unwrap();
        assert_eq!(g.value(logits).shape(), &[21, 13]);
    }

    #[test]
    fn output_invariant_to_key_row_permutation() {
        let mut rng = Rng::new(4);
        let mut store = ParameterStore::new(0);
        let head = SegHead::init(
            &mut store,
            &mut rng,
            "seg",
            6,
            4,
            InterpolationSpec {
                neighbors: 3,
                epsilon: 1e-8,
            },
        )
        .unwrap();
        let keys = toy_keys(&mut rng, 8);
        let queries = toy_keys(&mut rng, 5);
        let feats_t = toy_feats(&mut rng, 8, 6);

        let mut g = Graph::new();
        let feats = g.constant(feats_t.clone());
        let base = head
            .forward(&mut g, &store, &queries, &keys, feats)
            .unwrap();
        let base = g.value(base).data().to_vec();

        let mut perm: Vec<usize> = (0..8).collect();
        rng.shuffle(&mut perm);
        let keys_p: Vec<[f64; 3]> = perm.iter().map(|&i| keys[i]).collect();
        let mut g2 = Graph::new();
        let feats2 = g2.constant(feats_t);
        let feats_p = g2.gather_rows(feats2, &perm).unwrap();
        let out = head
            .forward(&mut g2, &store, &queries, &keys_p, feats_p)
            .unwrap();
        for (a, b) in g2.value(out).data().iter().zip(&base) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn head_gradients_pass_finite_difference_check() {
        let mut rng = Rng::new(5);
        let mut store = ParameterStore::new(0);
        let head = SegHead::init(
            &mut store,
            &mut rng,
            "seg",
            6,
            3,
            InterpolationSpec {
                neighbors: 3,
                epsilon: 1e-8,
            },
        )
        .unwrap();
        let mut nudge_rng = rng.split(99);
        crate::tensor::gradcheck::nudge_params(&mut store, &mut nudge_rng, 0.05);
        // Freeze the 96×96 inner blocks to keep this unit check quick; the
        // acceptance suite sweeps the full head.
        for name in ["seg.proj.l1.w", "seg.cls.l0.w"] {
            store.get_mut(name).unwrap().requires_grad = false;
        }
        let keys = toy_keys(&mut rng, 6);
        let queries = toy_keys(&mut rng, 4);
        let feats_t = toy_feats(&mut rng, 6, 6);
        let w_t = toy_feats(&mut rng, 4, 3);
        let err = crate::tensor::grad_check(
            |g, s| {
                let feats = g.leaf(feats_t.clone(), false);
                let logits = head.forward(g, s, &queries, &keys, feats)?;
                let w = g.leaf(w_t.clone(), false);
                let p = g.mul(logits, w)?;
                let m = g.mean_all(p)?;
                g.scale(m, 5e-4)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
