//! Dual-branch head: stripe pooling of local tokens into part features, class
//! token fusion into a global feature, and per-head BN + L2 normalization.

use std::ops::Range;
use std::sync::Arc;

use crate::backbone::{BlockParams, BnUpdate, Mode, TokenSequence, BN_EPS};
use crate::config::{FusionMode, HeadConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormLayout, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{l2_norm, Scalar};
use crate::tensor::Tensor;

/// Guard for L2 normalization of (near) zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Global feature plus `K1 + K2` part features. Parts are ordered branch-1
/// stripes top to bottom, then branch-2 stripes top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiGrainFeatures<T> {
    pub global: Vec<T>,
    pub parts: Vec<Vec<T>>,
}

impl<T: Scalar> MultiGrainFeatures<T> {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Feature of head `j`: 0 is global, `1..=K` are parts.
    pub fn head(&self, j: usize) -> &[T] {
        if j == 0 {
            &self.global
        } else {
            &self.parts[j - 1]
        }
    }
}

/// Splits `grid_rows` into `k` contiguous stripes; when the split is uneven the
/// first `grid_rows % k` stripes get one extra row.
pub fn stripe_ranges(grid_rows: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || k > grid_rows {
        return Err(Error::Config(format!(
            "cannot split {grid_rows} token rows into {k} stripes"
        )));
    }
    let base = grid_rows / k;
    let extra = grid_rows % k;
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Token-row indices (into `[N+1, D]`) of every stripe.
fn stripe_token_rows(grid_rows: usize, grid_cols: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    Ok(stripe_ranges(grid_rows, k)?
        .into_iter()
        .map(|r| {
            r.flat_map(|row| (0..grid_cols).map(move |c| 1 + row * grid_cols + c))
                .collect()
        })
        .collect())
}

/// Mean-pools the local tokens of each horizontal stripe.
pub fn pool_parts<T: Scalar>(branch: &TokenSequence<T>, k: usize) -> Result<Vec<Vec<T>>> {
    let d = branch.tokens.cols();
    let groups = stripe_token_rows(branch.grid_rows, branch.grid_cols, k)?;
    Ok(groups
        .iter()
        .map(|rows| {
            let mut acc = vec![T::zero(); d];
            for &r in rows {
                for (a, &v) in acc.iter_mut().zip(branch.tokens.row(r)) {
                    *a += v;
                }
            }
            let inv = T::one() / T::of_usize(rows.len());
            acc.iter_mut().for_each(|a| *a *= inv);
            acc
        })
        .collect())
}

pub fn fuse_global<T: Scalar>(cls1: &[T], cls2: &[T], mode: FusionMode) -> Vec<T> {
    assert_eq!(cls1.len(), cls2.len(), "class tokens differ in dimension");
    match mode {
        FusionMode::Avg => cls1
            .iter()
            .zip(cls2)
            .map(|(&a, &b)| (a + b) * T::of(0.5))
            .collect(),
        FusionMode::Branch1 => cls1.to_vec(),
        FusionMode::Branch2 => cls2.to_vec(),
    }
}

#[derive(Clone, Debug)]
struct BnParams {
    weight: ParamId,
    bias: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Second copy of the last transformer layer plus `K + 1` BN layers.
#[derive(Clone, Debug)]
pub struct MultiGrainHead {
    pub config: HeadConfig,
    pub branch2: Option<BlockParams>,
    bn: Vec<BnParams>,
    grid_rows: usize,
    grid_cols: usize,
}

/// Graph outputs of the head for a batch.
pub struct HeadOutput {
    /// `[batch, D]`, unit rows.
    pub global: Var,
    /// One `[batch, D]` node per part, unit rows.
    pub parts: Vec<Var>,
}

impl MultiGrainHead {
    /// Registers head parameters. `last_layer` is copied into the second
    /// branch when duplication is enabled.
    pub fn new<T: Scalar>(
        config: HeadConfig,
        store: &mut ParamStore<T>,
        last_layer: &BlockParams,
        dim: usize,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Result<Self> {
        config.validate(grid_rows)?;
        let branch2 = config
            .duplicate_last_layer
            .then(|| BlockParams::duplicate(store, last_layer, "branch2"));
        let bn = (0..=config.num_parts())
            .map(|j| BnParams {
                weight: store.add(format!("head.bn.{j}.weight"), Tensor::full(&[dim], T::one())),
                // Frozen at zero: a learned shift is common to every feature
                // and lets the contrastive loss raise all similarities at once.
                bias: store.add_buffer(format!("head.bn.{j}.bias"), Tensor::zeros(&[dim])),
                running_mean: store.add_buffer(format!("head.bn.{j}.running_mean"), Tensor::zeros(&[dim])),
                running_var: store.add_buffer(format!("head.bn.{j}.running_var"), Tensor::full(&[dim], T::one())),
            })
            .collect();
        Ok(Self {
            config,
            branch2,
            bn,
            grid_rows,
            grid_cols,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.bn.len()
    }

    /// BN then L2 normalization of a single feature with running statistics.
    pub fn normalize<T: Scalar>(&self, store: &ParamStore<T>, feature: &[T], head_index: usize) -> Result<Vec<T>> {
        let batch = Tensor::from_vec(&[1, feature.len()], feature.to_vec());
        Ok(self
            .normalize_batch(store, &batch, head_index, Mode::Eval)?
            .into_data())
    }

    /// BN then L2 normalization of `[batch, D]` rows. In training mode batch
    /// statistics are used.
    pub fn normalize_batch<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        head_index: usize,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let (y, _) = self.normalize_graph(store, &mut g, x, head_index, mode)?;
        Ok(g.value(y).clone())
    }

    fn normalize_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x: Var,
        head_index: usize,
        mode: Mode,
    ) -> Result<(Var, Option<BnUpdate<T>>)> {
        let p = self
            .bn
            .get(head_index)
            .ok_or_else(|| Error::Input(format!("head index {head_index} out of range")))?;
        let xv = g.value(x);
        let layout = NormLayout::Columns {
            rows: xv.rows(),
            cols: xv.cols(),
        };
        let (w, b) = (store.leaf(g, p.weight), store.leaf(g, p.bias));
        let (bn, update) = match mode {
            Mode::Train => {
                let (v, stats) = g.norm(x, w, b, layout, T::of(BN_EPS), None);
                (
                    v,
                    Some(BnUpdate {
                        mean: p.running_mean,
                        var: p.running_var,
                        stats,
                    }),
                )
            }
            Mode::Eval => {
                let rm = store.get(p.running_mean).data();
                let rv = store.get(p.running_var).data();
                (g.norm(x, w, b, layout, T::of(BN_EPS), Some((rm, rv))).0, None)
            }
        };
        let (y, guarded) = g.l2_normalize_rows(bn, T::of(NORM_EPS));
        if guarded {
            return Err(Error::Numeric(format!(
                "feature of head {head_index} has zero norm after batch normalization"
            )));
        }
        Ok((y, update))
    }

    /// Pools, fuses and normalizes both branch outputs (`[batch*(N+1), D]`).
    pub fn forward_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        branch1: Var,
        branch2: Var,
        batch: usize,
        mode: Mode,
    ) -> Result<(HeadOutput, Vec<BnUpdate<T>>)> {
        let t = self.grid_rows * self.grid_cols + 1;
        let cls_rows = |b: usize| vec![b * t];
        let cls_groups: Arc<Vec<Vec<usize>>> = Arc::new((0..batch).map(cls_rows).collect());
        let cls1 = g.row_mean(branch1, cls_groups.clone());
        let cls2 = g.row_mean(branch2, cls_groups);
        let global = match self.config.fusion_mode {
            FusionMode::Avg => {
                let s = g.add(cls1, cls2);
                g.scale(s, T::of(0.5))
            }
            FusionMode::Branch1 => cls1,
            FusionMode::Branch2 => cls2,
        };

        let mut raw_parts = Vec::with_capacity(self.config.num_parts());
        for (branch, &k) in [branch1, branch2].iter().zip(&self.config.partitions) {
            let stripes = stripe_token_rows(self.grid_rows, self.grid_cols, k)?;
            for stripe in &stripes {
                let groups: Vec<Vec<usize>> = (0..batch)
                    .map(|b| stripe.iter().map(|&r| b * t + r).collect())
                    .collect();
                raw_parts.push(g.row_mean(*branch, Arc::new(groups)));
            }
        }

        let mut updates = Vec::new();
        let (global, u) = self.normalize_graph(store, g, global, 0, mode)?;
        updates.extend(u);
        let mut parts = Vec::with_capacity(raw_parts.len());
        for (k, raw) in raw_parts.into_iter().enumerate() {
            let (p, u) = self.normalize_graph(store, g, raw, k + 1, mode)?;
            updates.extend(u);
            parts.push(p);
        }
        Ok((HeadOutput { global, parts }, updates))
    }
}

/// Unit-norm check used by tests and invariants.
pub fn is_unit<T: Scalar>(v: &[T], tol: f64) -> bool {
    (l2_norm(v).to_f64_lossy() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::config::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stripe_split_even_and_ceil_first() {
        assert_eq!(stripe_ranges(24, 2).unwrap(), vec![0..12, 12..24]);
        assert_eq!(stripe_ranges(24, 3).unwrap(), vec![0..8, 8..16, 16..24]);
        assert_eq!(stripe_ranges(4, 3).unwrap(), vec![0..2, 2..3, 3..4]);
        assert_eq!(stripe_ranges(24, 5).unwrap(), vec![0..5, 5..10, 10..15, 15..20, 20..24]);
        assert!(matches!(stripe_ranges(4, 5), Err(Error::Config(_))));
        assert!(stripe_ranges(4, 0).is_err());
    }

    #[test]
    fn stripe_token_counts_on_reference_grid() {
        let rows = stripe_token_rows(24, 8, 2).unwrap();
        assert_eq!(rows.iter().map(Vec::len).collect::<Vec<_>>(), vec![96, 96]);
        assert_eq!(rows[0][0], 1);
        assert_eq!(*rows[1].last().unwrap(), 192);
        let rows = stripe_token_rows(24, 8, 3).unwrap();
        assert_eq!(rows.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 64]);
        for k in 1..=24 {
            let total: usize = stripe_token_rows(24, 8, k).unwrap().iter().map(Vec::len).sum();
            assert_eq!(total, 192);
        }
    }

    #[test]
    fn constant_tokens_pool_to_constant() {
        let v = vec![0.25f64, -1.0, 3.0];
        let tokens = Tensor::from_rows(&vec![v.clone(); 9]);
        let seq = TokenSequence::new(tokens, 4, 2).unwrap();
        for k in 1..=4 {
            for p in pool_parts(&seq, k).unwrap() {
                assert_eq!(p, v);
            }
        }
        assert!(pool_parts(&seq, 5).is_err());
    }

    #[test]
    fn pooling_averages_stripe_rows() {
        // token value = its grid row index
        let mut rows = vec![vec![-5.0f64]];
        for r in 0..4 {
            for _ in 0..2 {
                rows.push(vec![r as f64]);
            }
        }
        let seq = TokenSequence::new(Tensor::from_rows(&rows), 4, 2).unwrap();
        assert_eq!(pool_parts(&seq, 2).unwrap(), vec![vec![0.5], vec![2.5]]);
        assert_eq!(pool_parts(&seq, 3).unwrap(), vec![vec![0.5], vec![2.0], vec![3.0]]);
    }

    #[test]
    fn fusion_modes() {
        let (a, b) = ([1.0f64, 0.0], [0.0f64, 1.0]);
        let avg = fuse_global(&a, &b, FusionMode::Avg);
        assert_eq!(avg, vec![0.5, 0.5]);
        let n = crate::scalar::l2_normalized(&avg, 1e-12).unwrap();
        assert!((n[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6 && (n[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(fuse_global(&a, &b, FusionMode::Branch1), a.to_vec());
        assert_eq!(fuse_global(&a, &b, FusionMode::Branch2), b.to_vec());
        assert_eq!(fuse_global(&a, &a, FusionMode::Avg), a.to_vec());
    }

    fn head_setup() -> (MultiGrainHead, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(BackboneConfig::toy(1), &mut store, &mut rng).unwrap();
        let head = MultiGrainHead::new(HeadConfig::default(), &mut store, bb.blocks.last().unwrap(), 64, 4, 2).unwrap();
        (head, store)
    }

    #[test]
    fn inference_normalize_with_identity_bn_is_l2() {
        let (head, store) = head_setup();
        let v: Vec<f64> = (0..64).map(|i| (i as f64 * 0.7).sin()).collect();
        let out = head.normalize(&store, &v, 3).unwrap();
        let n = l2_norm(&v);
        // BN with running mean 0 / var 1 scales by 1/sqrt(1+eps)
        for (o, x) in out.iter().zip(&v) {
            assert!((o - x / n).abs() < 1e-6);
        }
        assert!(is_unit(&out, 1e-6));
        assert!(head.normalize(&store, &v, 6).is_err());
    }

    #[test]
    fn train_mode_symmetric_pair() {
        let (head, store) = head_setup();
        let v: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).cos() + 0.1).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let batch = Tensor::from_rows(&[v, neg]);
        let out = head.normalize_batch(&store, &batch, 0, Mode::Train).unwrap();
        for j in 0..64 {
            assert!((out.row(0)[j] + out.row(1)[j]).abs() < 1e-12);
        }
        assert!(is_unit(out.row(0), 1e-6) && is_unit(out.row(1), 1e-6));
    }

    #[test]
    fn zero_after_bn_is_reported() {
        let (head, store) = head_setup();
        let v = vec![1.0f64; 64];
        // identical rows: batch statistics remove everything and beta is zero
        let batch = Tensor::from_rows(&[v.clone(), v]);
        assert!(matches!(
            head.normalize_batch(&store, &batch, 0, Mode::Train),
            Err(Error::Numeric(_))
        ));
    }
}
