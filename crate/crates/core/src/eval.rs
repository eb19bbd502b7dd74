//! Retrieval metrics (mAP, CMC) and attention rollout.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Model;
use crate::scalar::{l2_norm, Scalar};
use crate::tensor::{matmul_nt, Tensor};

/// Person id marking a distractor image that is ignored during ranking.
pub const JUNK_ID: i64 = -1;

const UNIT_TOL: f64 = 1e-4;

/// Features plus ground-truth metadata for one side of a retrieval split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet<T> {
    /// `[n, D]`, unit-norm rows.
    pub features: Tensor<T>,
    pub person_ids: Vec<i64>,
    pub camera_ids: Vec<usize>,
}

impl<T: Scalar> EvalSet<T> {
    pub fn new(features: Tensor<T>, person_ids: Vec<i64>, camera_ids: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        if person_ids.len() != n || camera_ids.len() != n {
            return Err(Error::Input(format!(
                "{n} features but {} ids and {} cameras",
                person_ids.len(),
                camera_ids.len()
            )));
        }
        for i in 0..n {
            let norm = l2_norm(features.row(i)).to_f64_lossy();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Input(format!("feature {i} is not unit norm ({norm})")));
            }
        }
        Ok(Self {
            features,
            person_ids,
            camera_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// `None` for queries without any relevant gallery item.
    pub ap: Vec<Option<f64>>,
    /// 1-based rank of the first relevant item, per query.
    pub first_hit: Vec<Option<usize>>,
    pub map: f64,
    /// `cmc[k-1]` is the Rank-k hit rate.
    pub cmc: Vec<f64>,
    pub valid_query_count: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).copied().unwrap_or_else(|| *self.cmc.last().unwrap_or(&0.0))
    }

    /// Fixed-width summary table with mAP and Rank-1/5/10 in percent.
    pub fn table(&self) -> String {
        format!(
            "{:<8}{:>8}{:>8}{:>8}{:>8}\n{:<8}{:>8.2}{:>8.2}{:>8.2}{:>8.2}\n",
            "",
            "mAP",
            "R-1",
            "R-5",
            "R-10",
            "result",
            100.0 * self.map,
            100.0 * self.rank(1),
            100.0 * self.rank(5),
            100.0 * self.rank(10),
        )
    }

    /// `query,ap,first_hit` per query; invalid queries have empty fields.
    pub fn write_per_query_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["query", "ap", "first_hit"]).map_err(|e| csv_err(path, e))?;
        for (q, (ap, hit)) in self.ap.iter().zip(&self.first_hit).enumerate() {
            let ap = ap.map(|v| format!("{v}")).unwrap_or_default();
            let hit = hit.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([q.to_string(), ap, hit]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

/// Gallery indices sorted by similarity, descending, ties to lower index.
fn ranking(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Cosine-similarity retrieval under the same-id/same-camera exclusion rule.
/// CMC is reported for ranks `1..=max_rank`.
pub fn evaluate<T: Scalar>(query: &EvalSet<T>, gallery: &EvalSet<T>, max_rank: usize) -> Result<RetrievalResult> {
    if query.features.cols() != gallery.features.cols() && !query.is_empty() && !gallery.is_empty() {
        return Err(Error::Input("query and gallery feature dims differ".into()));
    }
    if max_rank == 0 {
        return Err(Error::Input("max_rank must be at least 1".into()));
    }
    let (nq, ng, d) = (query.len(), gallery.len(), query.features.cols());
    let sims = matmul_nt(query.features.data(), gallery.features.data(), nq, d, ng);

    let per_query: Vec<(Option<f64>, Option<usize>)> = (0..nq)
        .into_par_iter()
        .map(|q| {
            let qid = query.person_ids[q];
            let qcam = query.camera_ids[q];
            if qid == JUNK_ID {
                return (None, None);
            }
            let row: Vec<f64> = sims[q * ng..(q + 1) * ng].iter().map(|s| s.to_f64_lossy()).collect();
            let mut rank = 0usize;
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            let mut first = None;
            for g in ranking(&row) {
                let gid = gallery.person_ids[g];
                if gid == JUNK_ID || (gid == qid && gallery.camera_ids[g] == qcam) {
                    continue;
                }
                rank += 1;
                if gid == qid {
                    hits += 1;
                    precision_sum += hits as f64 / rank as f64;
                    first.get_or_insert(rank);
                }
            }
            if hits == 0 {
                (None, None)
            } else {
                (Some(precision_sum / hits as f64), first)
            }
        })
        .collect();

    let (ap, first_hit): (Vec<_>, Vec<_>) = per_query.into_iter().unzip();
    let valid: Vec<f64> = ap.iter().flatten().copied().collect();
    let valid_query_count = valid.len();
    let (map, cmc) = if valid_query_count == 0 {
        (0.0, vec![0.0; max_rank])
    } else {
        let n = valid_query_count as f64;
        let cmc = (1..=max_rank)
            .map(|k| first_hit.iter().flatten().filter(|&&r| r <= k).count() as f64 / n)
            .collect();
        (valid.iter().sum::<f64>() / n, cmc)
    };
    Ok(RetrievalResult {
        ap,
        first_hit,
        map,
        cmc,
        valid_query_count,
    })
}

/// Extracts query and gallery features of `manifest` with `model` and
/// evaluates retrieval.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, manifest: &DatasetManifest, max_rank: usize) -> Result<RetrievalResult> {
    let query = eval_set(model, manifest, Split::Query)?;
    let gallery = eval_set(model, manifest, Split::Gallery)?;
    evaluate(&query, &gallery, max_rank)
}

/// Features and metadata of one split.
pub fn eval_set<T: Scalar>(model: &Model<T>, manifest: &DatasetManifest, split: Split) -> Result<EvalSet<T>> {
    let idx = manifest.indices(split);
    let bb = &model.backbone.config;
    let images = manifest.load_images(&idx, bb.image_height, bb.image_width)?;
    let refs: Vec<&Image> = images.iter().collect();
    let cams: Vec<usize> = idx.iter().map(|&i| manifest.camera_id(i)).collect();
    let feats = model.extract_global(&refs, &cams)?;
    let ids = idx
        .iter()
        .map(|&i| manifest.person_id(i).unwrap_or(JUNK_ID))
        .collect();
    EvalSet::new(feats, ids, cams)
}

/// Attention rollout for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// cls row of the rollout restricted to local tokens, before normalization.
    pub raw: Vec<f64>,
    /// `raw` min-max normalized to `[0, 1]`; all zeros when degenerate.
    pub map: Vec<f64>,
    /// The raw map was constant, so normalization is undefined.
    pub degenerate: bool,
    /// `R_1, R_2, ..., R_L` after each accumulation step.
    pub accumulated: Vec<Tensor<f64>>,
}

/// Head-averaged, residual-mixed and row-normalized attention of one layer.
pub fn mixed_attention<T: Scalar>(attn: &Tensor<T>) -> Result<Tensor<f64>> {
    let s = attn.shape();
    if s.len() != 3 || s[1] != s[2] || s[0] == 0 {
        return Err(Error::Input(format!("attention must be [heads, n, n], got {s:?}")));
    }
    let (h, n) = (s[0], s[1]);
    let mut a = Tensor::<f64>::zeros(&[n, n]);
    let inv_h = 1.0 / h as f64;
    for head in 0..h {
        let block = &attn.data()[head * n * n..(head + 1) * n * n];
        for (o, &v) in a.data_mut().iter_mut().zip(block) {
            *o += inv_h * v.to_f64_lossy();
        }
    }
    for i in 0..n {
        let row = a.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = 0.5 * *v + if i == j { 0.5 } else { 0.0 };
        }
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Numeric(format!("attention row {i} sums to {sum}")));
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(a)
}

/// `R = Â_L · ... · Â_1`; the cls row over local tokens is the saliency map.
pub fn attention_rollout<T: Scalar>(attentions: &[Tensor<T>], grid_rows: usize, grid_cols: usize) -> Result<Rollout> {
    let first = attentions
        .first()
        .ok_or_else(|| Error::Input("no attention layers".into()))?;
    let n = first.shape().get(1).copied().unwrap_or(0);
    if n != grid_rows * grid_cols + 1 {
        return Err(Error::Input(format!(
            "{n} tokens do not match a {grid_rows}x{grid_cols} grid plus cls"
        )));
    }
    let mut accumulated: Vec<Tensor<f64>> = Vec::with_capacity(attentions.len());
    for attn in attentions {
        let a = mixed_attention(attn)?;
        if a.rows() != n {
            return Err(Error::Input("attention sizes differ between layers".into()));
        }
        let r = match accumulated.last() {
            None => a,
            Some(prev) => Tensor::from_vec(&[n, n], crate::tensor::matmul(a.data(), prev.data(), n, n, n)),
        };
        accumulated.push(r);
    }
    let r = accumulated.last().expect("nonempty");
    let raw = r.row(0)[1..].to_vec();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = hi - lo <= 1e-12;
    let map = if degenerate {
        vec![0.0; raw.len()]
    } else {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(Rollout {
        grid_rows,
        grid_cols,
        raw,
        map,
        degenerate,
        accumulated,
    })
}

impl Rollout {
    /// Grid of normalized values, one text row per grid row.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.grid_rows {
            let row: Vec<String> = self.map[r * self.grid_cols..(r + 1) * self.grid_cols]
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    /// Writes the normalized map as an 8-bit grayscale image, each grid cell
    /// upscaled to `scale`×`scale` pixels.
    pub fn save_png(&self, path: &Path, scale: usize) -> Result<()> {
        crate::image::save_gray_png(&self.map, self.grid_rows, self.grid_cols, scale, path)
    }
}
