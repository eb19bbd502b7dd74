//! Proxy memory banks with momentum updates, and the proxy contrastive losses.

use crate::association::{AnchorSets, ProxyLabeling, ProxySets};
use crate::error::{Error, Result};
use crate::head::{MultiGrainFeatures, NORM_EPS};
use crate::scalar::{dot, l2_norm, Scalar};
use crate::tensor::Tensor;

/// Which feature head a memory belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadId {
    Global,
    Part(usize),
}

/// Outcome of a single momentum write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Normalized,
    /// The blended row had (near) zero norm and was left unnormalized.
    ZeroNormGuard,
}

/// `[num_proxies, D]` bank of unit-norm proxy centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyMemory<T> {
    pub bank: Tensor<T>,
    pub momentum: T,
    pub temperature: T,
    pub head: HeadId,
}

impl<T: Scalar> ProxyMemory<T> {
    /// Bank row `u` is the normalized mean of the features of proxy `u`'s images.
    pub fn init(
        features: &[&[T]],
        labeling: &ProxyLabeling,
        momentum: T,
        temperature: T,
        head: HeadId,
    ) -> Result<Self> {
        let dim = features
            .first()
            .map(|f| f.len())
            .ok_or_else(|| Error::Input("no features to initialize memory".into()))?;
        if features.len() != labeling.pseudo_label.len() {
            return Err(Error::Input("feature count does not match labeling".into()));
        }
        let mut bank = Tensor::zeros(&[labeling.num_proxies(), dim]);
        for (u, members) in labeling.proxy_members.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Labeling(format!("proxy {u} has no images")));
            }
            let row = bank.row_mut(u);
            for &i in members {
                for (r, &v) in row.iter_mut().zip(features[i]) {
                    *r += v;
                }
            }
            let inv = T::one() / T::of_usize(members.len());
            row.iter_mut().for_each(|r| *r *= inv);
            let n = l2_norm(row);
            if n <= T::of(NORM_EPS) {
                return Err(Error::Numeric(format!("proxy {u} centroid has zero norm")));
            }
            row.iter_mut().for_each(|r| *r /= n);
        }
        Ok(Self {
            bank,
            momentum,
            temperature,
            head,
        })
    }

    pub fn num_proxies(&self) -> usize {
        self.bank.rows()
    }

    /// `row ← μ·row + (1−μ)·feature`, then renormalized.
    ///
    /// Evaluated as `row + (1−μ)(feature − row)` so that `μ = 1` and
    /// `feature == row` leave the row bit-identical.
    pub fn update(&mut self, proxy: usize, feature: &[T]) -> UpdateOutcome {
        let step = T::one() - self.momentum;
        let row = self.bank.row_mut(proxy);
        for (r, &f) in row.iter_mut().zip(feature) {
            *r += step * (f - *r);
        }
        let n = l2_norm(row);
        if n <= T::of(NORM_EPS) {
            log::warn!("memory row {proxy} collapsed to zero norm; left unnormalized");
            return UpdateOutcome::ZeroNormGuard;
        }
        // already unit up to rounding: dividing would only add noise
        if (n - T::one()).abs() > T::of(4.0) * T::epsilon() {
            row.iter_mut().for_each(|r| *r /= n);
        }
        UpdateOutcome::Normalized
    }

    /// Loss value and gradient with respect to `feature`.
    pub fn contrastive(&self, feature: &[T], sets: &ProxySets) -> Result<(T, Vec<T>)> {
        contrastive_loss_grad(feature, &sets.positives, &sets.negatives, self)
    }
}

/// `-(1/|P|) Σ_{u∈P} log( S(u,f) / Σ_{v∈P∪Q} S(v,f) )` with
/// `S(u,f) = exp(bank[u]·f / τ)`.
pub fn contrastive_loss<T: Scalar>(feature: &[T], positives: &[usize], negatives: &[usize], memory: &ProxyMemory<T>) -> Result<T> {
    Ok(contrastive_loss_grad(feature, positives, negatives, memory)?.0)
}

/// Loss value plus its gradient with respect to `feature`; bank rows are
/// treated as constants.
pub fn contrastive_loss_grad<T: Scalar>(
    feature: &[T],
    positives: &[usize],
    negatives: &[usize],
    memory: &ProxyMemory<T>,
) -> Result<(T, Vec<T>)> {
    if positives.is_empty() {
        return Err(Error::Input("positive proxy set is empty".into()));
    }
    let tau = memory.temperature;
    let all: Vec<usize> = positives.iter().chain(negatives).copied().collect();
    let logits: Vec<T> = all
        .iter()
        .map(|&u| dot(memory.bank.row(u), feature) / tau)
        .collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + z.ln();
    let inv_p = T::one() / T::of_usize(positives.len());
    let mean_pos: T = logits[..positives.len()].iter().copied().sum::<T>() * inv_p;
    let loss = (lse - mean_pos).max(T::zero());

    let mut grad = vec![T::zero(); feature.len()];
    for (k, (&u, &l)) in all.iter().zip(&logits).enumerate() {
        let mut w = (l - max).exp() / z;
        if k < positives.len() {
            w -= inv_p;
        }
        let w = w / tau;
        for (g, &b) in grad.iter_mut().zip(memory.bank.row(u)) {
            *g += w * b;
        }
    }
    Ok((loss, grad))
}

/// One memory for the global feature and one per part.
#[derive(Clone, Debug)]
pub struct HeadMemories<T> {
    pub global: ProxyMemory<T>,
    pub parts: Vec<ProxyMemory<T>>,
}

impl<T: Scalar> HeadMemories<T> {
    /// Initializes all banks from per-image features under one labeling.
    pub fn init(features: &[MultiGrainFeatures<T>], labeling: &ProxyLabeling, momentum: T, temperature: T) -> Result<Self> {
        let globals: Vec<&[T]> = features.iter().map(|f| f.global.as_slice()).collect();
        let global = ProxyMemory::init(&globals, labeling, momentum, temperature, HeadId::Global)?;
        let k = features.first().map_or(0, |f| f.parts.len());
        let parts = (0..k)
            .map(|p| {
                let feats: Vec<&[T]> = features.iter().map(|f| f.parts[p].as_slice()).collect();
                ProxyMemory::init(&feats, labeling, momentum, temperature, HeadId::Part(p))
            })
            .collect::<Result<_>>()?;
        Ok(Self { global, parts })
    }

    /// Writes every anchor's features into its proxy rows, in batch order.
    pub fn update_batch(&mut self, features: &[MultiGrainFeatures<T>], proxies: &[usize]) -> usize {
        let mut guarded = 0;
        for (f, &p) in features.iter().zip(proxies) {
            if self.global.update(p, &f.global) == UpdateOutcome::ZeroNormGuard {
                guarded += 1;
            }
            for (mem, part) in self.parts.iter_mut().zip(&f.parts) {
                if mem.update(p, part) == UpdateOutcome::ZeroNormGuard {
                    guarded += 1;
                }
            }
        }
        guarded
    }
}

/// Components of the total objective for a batch.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown<T> {
    pub global_offline: T,
    pub global_online: T,
    /// `λ_p / K · Σ_k (offline_k + online_k)`.
    pub part_term: T,
    pub total: T,
}

/// Total loss and its gradients with respect to every anchor's features.
#[derive(Clone, Debug)]
pub struct TotalLoss<T> {
    pub breakdown: LossBreakdown<T>,
    /// Per anchor, gradient of the total w.r.t. the global feature.
    pub grad_global: Vec<Vec<T>>,
    /// Per anchor and part, gradient of the total w.r.t. that part feature.
    pub grad_parts: Vec<Vec<Vec<T>>>,
}

/// Global offline + online losses plus the weighted part average. Part losses
/// reuse the sets computed from the global feature. Batch terms are summed.
pub fn total_loss<T: Scalar>(
    features: &[MultiGrainFeatures<T>],
    sets: &[AnchorSets],
    memories: &HeadMemories<T>,
    lambda_p: T,
) -> Result<TotalLoss<T>> {
    if features.len() != sets.len() {
        return Err(Error::Input("one association per anchor required".into()));
    }
    let k = memories.parts.len();
    let part_scale = if k == 0 { T::zero() } else { lambda_p / T::of_usize(k) };
    let mut b = LossBreakdown::default();
    let mut grad_global = Vec::with_capacity(features.len());
    let mut grad_parts = Vec::with_capacity(features.len());
    for (f, s) in features.iter().zip(sets) {
        if f.parts.len() != k {
            return Err(Error::Input("part count does not match memories".into()));
        }
        let (l_off, g_off) = memories.global.contrastive(&f.global, &s.offline)?;
        let (l_on, g_on) = memories.global.contrastive(&f.global, &s.online)?;
        b.global_offline += l_off;
        b.global_online += l_on;
        grad_global.push(g_off.iter().zip(&g_on).map(|(&a, &c)| a + c).collect());

        let mut pg = Vec::with_capacity(k);
        for (mem, part) in memories.parts.iter().zip(&f.parts) {
            let (p_off, gp_off) = mem.contrastive(part, &s.offline)?;
            let (p_on, gp_on) = mem.contrastive(part, &s.online)?;
            b.part_term += part_scale * (p_off + p_on);
            pg.push(
                gp_off
                    .iter()
                    .zip(&gp_on)
                    .map(|(&a, &c)| part_scale * (a + c))
                    .collect(),
            );
        }
        grad_parts.push(pg);
    }
    b.total = b.global_offline + b.global_online + b.part_term;
    Ok(TotalLoss {
        breakdown: b,
        grad_global,
        grad_parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem(rows: &[Vec<f64>], tau: f64) -> ProxyMemory<f64> {
        ProxyMemory {
            bank: Tensor::from_rows(rows),
            momentum: 0.2,
            temperature: tau,
            head: HeadId::Global,
        }
    }

    #[test]
    fn three_proxy_reference_values() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let f = [1.0, 0.0];
        let e = std::f64::consts::E;
        let l1 = contrastive_loss(&f, &[0], &[1, 2], &mem(&rows, 1.0)).unwrap();
        assert!((l1 - (-(e / (e + 1.0 + 1.0 / e)).ln())).abs() < 1e-12);
        assert!((l1 - 0.407606).abs() < 1e-6);
        let l2 = contrastive_loss(&f, &[0], &[1, 2], &mem(&rows, 2.0)).unwrap();
        let h = e.sqrt();
        assert!((l2 - (-(h / (h + 1.0 + 1.0 / h)).ln())).abs() < 1e-12);
        assert!(l2 > l1);
    }

    #[test]
    fn single_positive_without_negatives_is_zero() {
        let rows = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let l = contrastive_loss(&[0.0, 1.0], &[1], &[], &mem(&rows, 0.07)).unwrap();
        assert_eq!(l, 0.0);
        assert!(contrastive_loss(&[0.0, 1.0], &[], &[0], &mem(&rows, 0.07)).is_err());
    }

    #[test]
    fn no_overflow_at_small_temperature() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (l, g) = contrastive_loss_grad(&[1.0, 0.0], &[1], &[0], &mem(&rows, 1e-4)).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
        assert!((l - 1e4).abs() < 1e-6);
    }

    #[test]
    fn momentum_update_examples() {
        let mut m = mem(&[vec![0.0, 1.0]], 1.0);
        m.update(0, &[1.0, 0.0]);
        let r = m.bank.row(0);
        assert!((r[0] - 0.9701).abs() < 1e-4 && (r[1] - 0.2425).abs() < 1e-4);
        assert!((r[0] - 0.8 / 0.68f64.sqrt()).abs() < 1e-12);

        let v = vec![0.6, 0.8];
        let mut m = mem(&[v.clone()], 1.0);
        m.update(0, &v);
        assert_eq!(m.bank.row(0), v.as_slice());

        let mut m = mem(&[vec![0.6, 0.8]], 1.0);
        m.momentum = 1.0;
        m.update(0, &[1.0, 0.0]);
        assert_eq!(m.bank.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn collapsing_update_is_guarded() {
        // μ=0.5: 0.5·row + 0.5·(−row) = 0
        let mut m = mem(&[vec![1.0, 0.0]], 1.0);
        m.momentum = 0.5;
        assert_eq!(m.update(0, &[-1.0, 0.0]), UpdateOutcome::ZeroNormGuard);
    }

    fn labeling_for(groups: &[Vec<usize>], n: usize) -> ProxyLabeling {
        let mut pseudo = vec![None; n];
        for (p, g) in groups.iter().enumerate() {
            for &i in g {
                pseudo[i] = Some(p);
            }
        }
        ProxyLabeling {
            pseudo_label: pseudo,
            proxy_cluster: (0..groups.len()).collect(),
            proxy_camera: vec![0; groups.len()],
            proxy_members: groups.to_vec(),
            num_clusters: groups.len(),
        }
    }

    #[test]
    fn init_examples() {
        let l = labeling_for(&[vec![0], vec![1, 2]], 3);
        let feats: Vec<&[f64]> = vec![&[0.6, 0.8], &[1.0, 0.0], &[0.0, 1.0]];
        let m = ProxyMemory::init(&feats, &l, 0.2, 0.07, HeadId::Global).unwrap();
        assert_eq!(m.bank.row(0), &[0.6, 0.8]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.bank.row(1)[0] - s).abs() < 1e-12 && (m.bank.row(1)[1] - s).abs() < 1e-12);

        let same: Vec<&[f64]> = vec![&[0.6, 0.8]; 3];
        let m = ProxyMemory::init(&same, &l, 0.2, 0.07, HeadId::Global).unwrap();
        assert_eq!(m.bank.row(0), m.bank.row(1));
    }

    fn features(g: Vec<f64>, parts: Vec<Vec<f64>>) -> MultiGrainFeatures<f64> {
        MultiGrainFeatures { global: g, parts }
    }

    #[test]
    fn total_loss_weighting() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let sets = vec![AnchorSets {
            offline: ProxySets {
                positives: vec![0],
                negatives: vec![1],
            },
            online: ProxySets {
                positives: vec![0],
                negatives: vec![1],
            },
        }];
        let memories = HeadMemories {
            global: mem(&rows, 0.5),
            parts: vec![mem(&rows, 0.5), mem(&rows, 0.5)],
        };
        let f = vec![features(vec![0.6, 0.8], vec![vec![0.8, 0.6], vec![0.8, 0.6]])];
        let base = total_loss(&f, &sets, &memories, 0.0).unwrap().breakdown;
        assert_eq!(base.part_term, 0.0);
        assert_eq!(base.total, base.global_offline + base.global_online);

        let ell = contrastive_loss(&[0.8, 0.6], &[0], &[1], &memories.parts[0]).unwrap();
        let w = total_loss(&f, &sets, &memories, 0.1).unwrap().breakdown;
        assert!((w.part_term - 0.1 * 2.0 * ell).abs() < 1e-12);
    }
}
