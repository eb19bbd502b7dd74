//! Reference implementations used as test oracles. They favour the most
//! literal formulation over speed.

#![allow(dead_code)]

use rand::Rng;

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// DBSCAN via connected components of the core graph.
///
/// Components are ordered by their smallest core index; a border point takes
/// the earliest component among its core neighbours.
pub fn naive_dbscan(points: &[Vec<f64>], eps: f64, min_samples: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let near = |i: usize, j: usize| 1.0 - dot(&points[i], &points[j]) <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples)
        .collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for i in 0..n {
        for j in 0..i {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut order: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if core[i] {
            let root = find(&mut parent, i);
            if order[root].is_none() {
                order[root] = Some(next);
                next += 1;
            }
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                let root = find(&mut parent, i);
                order[root]
            } else {
                (0..n)
                    .filter(|&j| core[j] && near(i, j))
                    .filter_map(|j| {
                        let root = find(&mut parent, j);
                        order[root]
                    })
                    .min()
            }
        })
        .collect()
}

/// True when two labelings induce the same partition and the same outliers.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut bwd = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(*x).or_insert(*y) != *y || *bwd.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

pub struct OracleQuery {
    pub ap: Option<f64>,
    /// 1-based.
    pub first_hit: Option<usize>,
}

/// Brute-force retrieval metrics for one query set.
///
/// Gallery entries with id -1 or with the query's id and camera are removed;
/// a query without any remaining match has no AP. Ranking is by descending
/// cosine similarity with ties broken by gallery index.
pub fn oracle_evaluate(
    query: &[Vec<f64>],
    query_ids: &[i64],
    query_cams: &[usize],
    gallery: &[Vec<f64>],
    gallery_ids: &[i64],
    gallery_cams: &[usize],
) -> Vec<OracleQuery> {
    (0..query.len())
        .map(|q| {
            let mut kept: Vec<(f64, usize)> = (0..gallery.len())
                .filter(|&g| gallery_ids[g] != -1)
                .filter(|&g| !(gallery_ids[g] == query_ids[q] && gallery_cams[g] == query_cams[q]))
                .map(|g| (dot(&query[q], &gallery[g]), g))
                .collect();
            kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let matches: Vec<bool> = kept.iter().map(|&(_, g)| gallery_ids[g] == query_ids[q]).collect();
            let total = matches.iter().filter(|&&m| m).count();
            if query_ids[q] == -1 || total == 0 {
                return OracleQuery { ap: None, first_hit: None };
            }
            let mut hits = 0;
            let mut sum = 0.0;
            for (rank, &m) in matches.iter().enumerate() {
                if m {
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
            OracleQuery {
                ap: Some(sum / total as f64),
                first_hit: matches.iter().position(|&m| m).map(|r| r + 1),
            }
        })
        .collect()
}
