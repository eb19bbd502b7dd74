//! Pseudo-labeling: DBSCAN over global features, camera-aware proxy splitting,
//! and per-anchor positive/negative proxy sets for the contrastive losses.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rayon::prelude::*;

use crate::config::AssociationConfig;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

/// Per-image cluster index, `None` for outliers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    pub fn num_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// DBSCAN with cosine distance `1 - a·b` on row-normalized features.
///
/// A point is core when its eps-neighbourhood (itself included) holds at
/// least `min_samples` points. Clusters are grown from core points in index
/// order; a border point joins the first cluster that reaches it.
pub fn dbscan<T: Scalar>(features: &Tensor<T>, eps: f64, min_samples: usize) -> ClusterAssignment {
    let n = features.rows();
    let eps = T::of(eps);
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = features.row(i);
            (0..n)
                .filter(|&j| T::one() - dot(a, features.row(j)) <= eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut num_clusters = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        let cluster = num_clusters;
        num_clusters += 1;
        labels[start] = Some(cluster);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    ClusterAssignment {
        labels,
        num_clusters,
    }
}

/// Clusters global features, failing when every point is an outlier.
pub fn cluster<T: Scalar>(features: &Tensor<T>, cfg: &AssociationConfig) -> Result<ClusterAssignment> {
    let assignment = dbscan(features, cfg.dbscan_eps, cfg.dbscan_min_samples);
    if assignment.num_clusters == 0 {
        return Err(Error::Labeling(format!(
            "no clusters: all {} images are outliers at eps={}",
            features.rows(),
            cfg.dbscan_eps
        )));
    }
    Ok(assignment)
}

/// Camera-aware proxies derived from a clustering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProxyLabeling {
    /// Proxy of each image, `None` for outliers.
    pub pseudo_label: Vec<Option<usize>>,
    pub proxy_cluster: Vec<usize>,
    pub proxy_camera: Vec<usize>,
    /// Images belonging to each proxy, ascending.
    pub proxy_members: Vec<Vec<usize>>,
    pub num_clusters: usize,
}

impl ProxyLabeling {
    pub fn num_proxies(&self) -> usize {
        self.proxy_cluster.len()
    }

    pub fn num_outliers(&self) -> usize {
        self.pseudo_label.iter().filter(|l| l.is_none()).count()
    }

    /// Proxies that belong to `cluster`, ascending.
    pub fn proxies_of_cluster(&self, cluster: usize) -> Vec<usize> {
        (0..self.num_proxies())
            .filter(|&p| self.proxy_cluster[p] == cluster)
            .collect()
    }

    /// Checks camera and cluster purity plus membership consistency.
    pub fn validate(&self, clusters: &ClusterAssignment, cameras: &[usize]) -> Result<()> {
        let fail = |m: String| Err(Error::Labeling(m));
        if self.proxy_members.iter().any(Vec::is_empty) {
            return fail("empty proxy".into());
        }
        for (i, label) in self.pseudo_label.iter().enumerate() {
            match (label, clusters.labels[i]) {
                (None, None) => {}
                (Some(p), Some(c)) => {
                    if self.proxy_cluster[*p] != c || self.proxy_camera[*p] != cameras[i] {
                        return fail(format!("image {i} violates proxy purity"));
                    }
                    if self.proxy_members[*p].binary_search(&i).is_err() {
                        return fail(format!("image {i} missing from proxy {p}"));
                    }
                }
                _ => return fail(format!("image {i} outlier status inconsistent")),
            }
        }
        Ok(())
    }

    /// One row per image: `image,cluster,proxy,camera` with -1 for outliers.
    pub fn write_dump<W: Write>(&self, clusters: &ClusterAssignment, cameras: &[usize], mut out: W) -> std::io::Result<()> {
        writeln!(out, "image,cluster,proxy,camera")?;
        for (i, (&c, &p)) in clusters.labels.iter().zip(&self.pseudo_label).enumerate() {
            let c = c.map_or(-1, |c| c as i64);
            let p = p.map_or(-1, |p| p as i64);
            writeln!(out, "{i},{c},{p},{}", cameras[i])?;
        }
        Ok(())
    }
}

/// Splits every cluster by camera; proxies are numbered by `(cluster, camera)`.
pub fn split_camera_proxies(clusters: &ClusterAssignment, cameras: &[usize]) -> ProxyLabeling {
    assert_eq!(clusters.labels.len(), cameras.len(), "one camera per image");
    let mut members: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, label) in clusters.labels.iter().enumerate() {
        if let Some(c) = label {
            members.entry((*c, cameras[i])).or_default().push(i);
        }
    }
    let mut pseudo_label = vec![None; cameras.len()];
    let mut proxy_cluster = Vec::with_capacity(members.len());
    let mut proxy_camera = Vec::with_capacity(members.len());
    let mut proxy_members = Vec::with_capacity(members.len());
    for (p, ((cluster, camera), imgs)) in members.into_iter().enumerate() {
        for &i in &imgs {
            pseudo_label[i] = Some(p);
        }
        proxy_cluster.push(cluster);
        proxy_camera.push(camera);
        proxy_members.push(imgs);
    }
    ProxyLabeling {
        pseudo_label,
        proxy_cluster,
        proxy_camera,
        proxy_members,
        num_clusters: clusters.num_clusters,
    }
}

/// Proxy indices ordered by similarity descending, ties by lower index.
fn ranked_by_similarity<T: Scalar>(sims: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Similarity of `anchor` to every bank row.
pub fn proxy_similarities<T: Scalar>(anchor: &[T], bank: &Tensor<T>) -> Vec<T> {
    (0..bank.rows()).map(|u| dot(anchor, bank.row(u))).collect()
}

/// Positive and negative proxy index sets for one loss term.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProxySets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Offline and online sets of one anchor.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AnchorSets {
    pub offline: ProxySets,
    pub online: ProxySets,
}

fn hardest_outside(ranked: &[usize], exclude: &[usize], count: usize) -> Vec<usize> {
    ranked
        .iter()
        .copied()
        .filter(|p| !exclude.contains(p))
        .take(count)
        .collect()
}

/// Offline association: every proxy of the anchor's cluster is positive; the
/// most similar proxies of other clusters are hard negatives.
pub fn offline_sets<T: Scalar>(
    anchor_proxy: usize,
    labeling: &ProxyLabeling,
    bank: &Tensor<T>,
    anchor: &[T],
    cfg: &AssociationConfig,
) -> ProxySets {
    let positives = labeling.proxies_of_cluster(labeling.proxy_cluster[anchor_proxy]);
    let ranked = ranked_by_similarity(&proxy_similarities(anchor, bank));
    let negatives = hardest_outside(&ranked, &positives, cfg.num_hard_negatives);
    ProxySets {
        positives,
        negatives,
    }
}

/// Online association: the anchor's own proxy plus, for every other camera,
/// that camera's most similar proxy if it ranks in the global top-k.
pub fn online_sets<T: Scalar>(
    anchor: &[T],
    anchor_camera: usize,
    anchor_proxy: usize,
    labeling: &ProxyLabeling,
    bank: &Tensor<T>,
    cfg: &AssociationConfig,
) -> ProxySets {
    let sims = proxy_similarities(anchor, bank);
    let ranked = ranked_by_similarity(&sims);
    let top: &[usize] = &ranked[..cfg.online_topk.min(ranked.len())];

    let mut best_per_camera: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in &ranked {
        best_per_camera.entry(labeling.proxy_camera[p]).or_insert(p);
    }
    let mut positives = vec![anchor_proxy];
    for (&camera, &p) in &best_per_camera {
        if camera != anchor_camera && top.contains(&p) && p != anchor_proxy {
            positives.push(p);
        }
    }
    positives.sort_unstable();
    let negatives = hardest_outside(&ranked, &positives, cfg.num_hard_negatives);
    ProxySets {
        positives,
        negatives,
    }
}
