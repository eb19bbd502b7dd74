//! Full feature extractor: backbone trunk, two last-layer branches and the
//! multi-grained head, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{apply_bn_updates, attention_tensor, Backbone, BnUpdate, Mode, TokenSequence};
use crate::config::{BackboneConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{HeadOutput, MultiGrainFeatures, MultiGrainHead};
use crate::image::Image;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch size used for inference-mode extraction.
pub const EXTRACT_BATCH: usize = 64;

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: MultiGrainHead,
}

/// Graph handles produced by [`Model::forward_graph`].
pub struct ForwardOutput<T> {
    pub head: HeadOutput,
    /// Attention nodes of layers `1..L-1` followed by branch 1's layer `L`.
    pub attentions: Vec<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; parameters are a pure function of `seed`.
    pub fn new(backbone: BackboneConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bb = Backbone::new(backbone, &mut store, &mut rng)?;
        let head = MultiGrainHead::new(
            head,
            &mut store,
            bb.blocks.last().expect("at least one layer"),
            bb.config.embed_dim,
            bb.config.grid_rows(),
            bb.config.grid_cols(),
        )?;
        Ok(Self {
            store,
            backbone: bb,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.backbone.config.embed_dim
    }

    pub fn num_parts(&self) -> usize {
        self.head.config.num_parts()
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        images: &[&Image],
        cameras: &[usize],
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        let batch = images.len();
        let l = self.backbone.config.num_layers;
        let (z0, mut bn_updates) = self.backbone.tokenize_graph(&self.store, g, images, cameras, mode)?;
        let (penult, mut attentions) = self.backbone.layers_graph(&self.store, g, z0, batch, 0, l - 1)?;
        let (b1, b2) = self.branches_graph(g, penult, batch)?;
        attentions.push(b1.1);
        let (head, updates) = self.head.forward_graph(&self.store, g, b1.0, b2, batch, mode)?;
        bn_updates.extend(updates);
        Ok(ForwardOutput {
            head,
            attentions,
            bn_updates,
        })
    }

    /// Applies both copies of layer `L` (or the single layer when duplication
    /// is off) to the layer `L-1` output. Returns `((branch1, attn1), branch2)`.
    fn branches_graph(&self, g: &mut Graph<T>, penult: Var, batch: usize) -> Result<((Var, Var), Var)> {
        let cfg = &self.backbone.config;
        let l = cfg.num_layers;
        let t = cfg.num_tokens();
        let (b1, attn1) = self.backbone.blocks[l - 1].forward(&self.store, g, penult, batch, t, cfg.num_heads);
        if !g.value(b1).all_finite() {
            return Err(Error::NonFinite { layer: l });
        }
        let b2 = match &self.head.branch2 {
            Some(block) => {
                let (b2, _) = block.forward(&self.store, g, penult, batch, t, cfg.num_heads);
                if !g.value(b2).all_finite() {
                    return Err(Error::NonFinite { layer: l });
                }
                b2
            }
            None => b1,
        };
        Ok(((b1, attn1), b2))
    }

    /// Both branch outputs for one penultimate token sequence.
    pub fn dual_branch_forward(&self, z_penult: &TokenSequence<T>) -> Result<(TokenSequence<T>, TokenSequence<T>)> {
        let cfg = &self.backbone.config;
        if z_penult.tokens.rows() != cfg.num_tokens() || z_penult.tokens.cols() != cfg.embed_dim {
            return Err(Error::Input("token sequence does not match model shape".into()));
        }
        let mut g = Graph::new();
        let z = g.input(z_penult.tokens.clone());
        let ((b1, _), b2) = self.branches_graph(&mut g, z, 1)?;
        Ok((
            TokenSequence::new(g.value(b1).clone(), cfg.grid_rows(), cfg.grid_cols())?,
            TokenSequence::new(g.value(b2).clone(), cfg.grid_rows(), cfg.grid_cols())?,
        ))
    }

    /// Inference-mode features for every image, computed in fixed-size batches.
    pub fn extract(&self, images: &[&Image], cameras: &[usize]) -> Result<Vec<MultiGrainFeatures<T>>> {
        if images.len() != cameras.len() {
            return Err(Error::Input("one camera id per image required".into()));
        }
        let mut out = Vec::with_capacity(images.len());
        for (imgs, cams) in images.chunks(EXTRACT_BATCH).zip(cameras.chunks(EXTRACT_BATCH)) {
            let mut g = Graph::new();
            let fwd = self.forward_graph(&mut g, imgs, cams, Mode::Eval)?;
            out.extend(collect_features(&g, &fwd.head, imgs.len()));
        }
        Ok(out)
    }

    /// Retrieval features only (normalized global feature), `[n, D]`.
    pub fn extract_global(&self, images: &[&Image], cameras: &[usize]) -> Result<Tensor<T>> {
        let feats = self.extract(images, cameras)?;
        let rows: Vec<Vec<T>> = feats.into_iter().map(|f| f.global).collect();
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dim()]));
        }
        Ok(Tensor::from_rows(&rows))
    }

    /// Per-layer attention `[heads, N+1, N+1]` for one image along branch 1.
    pub fn attention_maps(&self, image: &Image, camera: usize) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let fwd = self.forward_graph(&mut g, &[image], &[camera], Mode::Eval)?;
        Ok(fwd
            .attentions
            .iter()
            .map(|&a| attention_tensor(&g, a, 0))
            .collect())
    }

    /// Replaces every BN running statistic with its average over training-mode
    /// batches of `images` (batches of `batch_size`, in order).
    pub fn calibrate_bn(&mut self, images: &[&Image], cameras: &[usize], batch_size: usize) -> Result<()> {
        if images.len() != cameras.len() || batch_size == 0 {
            return Err(Error::Input("calibration needs one camera per image and a positive batch size".into()));
        }
        let mut sums: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)> = Vec::new();
        let mut batches = 0usize;
        for (imgs, cams) in images.chunks(batch_size).zip(cameras.chunks(batch_size)) {
            if imgs.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let fwd = self.forward_graph(&mut g, imgs, cams, Mode::Train)?;
            if sums.is_empty() {
                sums = fwd
                    .bn_updates
                    .iter()
                    .map(|u| (u.mean, u.var, vec![0.0; u.stats.mean.len()], vec![0.0; u.stats.var.len()]))
                    .collect();
            }
            for (acc, u) in sums.iter_mut().zip(&fwd.bn_updates) {
                let n = u.stats.count as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for (a, m) in acc.2.iter_mut().zip(&u.stats.mean) {
                    *a += m.to_f64_lossy();
                }
                for (a, v) in acc.3.iter_mut().zip(&u.stats.var) {
                    *a += v.to_f64_lossy() * unbias;
                }
            }
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Input("not enough images to calibrate normalization".into()));
        }
        let inv = 1.0 / batches as f64;
        for (mean, var, m, v) in sums {
            for (r, x) in self.store.get_mut(mean).data_mut().iter_mut().zip(&m) {
                *r = T::of(x * inv);
            }
            for (r, x) in self.store.get_mut(var).data_mut().iter_mut().zip(&v) {
                *r = T::of(x * inv);
            }
        }
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        apply_bn_updates(&mut self.store, updates);
    }
}

/// Reads per-image features out of head output nodes.
pub fn collect_features<T: Scalar>(g: &Graph<T>, head: &HeadOutput, batch: usize) -> Vec<MultiGrainFeatures<T>> {
    (0..batch)
        .map(|b| MultiGrainFeatures {
            global: g.value(head.global).row(b).to_vec(),
            parts: head.parts.iter().map(|&p| g.value(p).row(b).to_vec()).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionMode;
    use crate::head::{is_unit, pool_parts};

    fn image(seed: u64) -> Image {
        let mut img = Image::new(64, 32);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 1000.0;
        }
        img
    }

    #[test]
    fn branches_identical_at_initialization() {
        let m = Model::<f64>::new(BackboneConfig::toy(2), HeadConfig::default(), 1).unwrap();
        let z0 = m.backbone.tokenize(&m.store, &image(1), 1).unwrap();
        let (pen, _) = m.backbone.forward_layers(&m.store, &z0, 3).unwrap();
        let (b1, b2) = m.dual_branch_forward(&pen).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn branches_alias_without_duplication() {
        let head = HeadConfig {
            duplicate_last_layer: false,
            ..HeadConfig::default()
        };
        let m = Model::<f64>::new(BackboneConfig::toy(2), head, 1).unwrap();
        assert!(m.head.branch2.is_none());
        let z0 = m.backbone.tokenize(&m.store, &image(1), 0).unwrap();
        let (pen, _) = m.backbone.forward_layers(&m.store, &z0, 3).unwrap();
        let (b1, b2) = m.dual_branch_forward(&pen).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn branches_diverge_after_independent_change() {
        let mut m = Model::<f64>::new(BackboneConfig::toy(2), HeadConfig::default(), 1).unwrap();
        let fc2 = m.head.branch2.as_ref().unwrap().fc2_b;
        m.store.get_mut(fc2).data_mut()[0] += 0.5;
        let z0 = m.backbone.tokenize(&m.store, &image(1), 0).unwrap();
        let (pen, _) = m.backbone.forward_layers(&m.store, &z0, 3).unwrap();
        let (b1, b2) = m.dual_branch_forward(&pen).unwrap();
        assert_ne!(b1, b2);
    }

    #[test]
    fn extracted_features_are_unit_and_match_manual_path() {
        let m = Model::<f64>::new(BackboneConfig::toy(2), HeadConfig::default(), 4).unwrap();
        let imgs = [image(1), image(2), image(3)];
        let refs: Vec<&Image> = imgs.iter().collect();
        let feats = m.extract(&refs, &[0, 1, 0]).unwrap();
        assert_eq!(feats.len(), 3);
        for f in &feats {
            assert_eq!(f.dim(), 64);
            assert_eq!(f.num_parts(), 5);
            assert!(is_unit(&f.global, 1e-6));
            assert!(f.parts.iter().all(|p| is_unit(p, 1e-6)));
        }

        // manual composition of the single-image operations
        let z0 = m.backbone.tokenize(&m.store, &imgs[1], 1).unwrap();
        let (pen, _) = m.backbone.forward_layers(&m.store, &z0, 3).unwrap();
        let (b1, b2) = m.dual_branch_forward(&pen).unwrap();
        let g = crate::head::fuse_global(b1.cls(), b2.cls(), FusionMode::Avg);
        let g = m.head.normalize(&m.store, &g, 0).unwrap();
        for (a, b) in g.iter().zip(&feats[1].global) {
            assert!((a - b).abs() < 1e-10);
        }
        let mut parts = pool_parts(&b1, 2).unwrap();
        parts.extend(pool_parts(&b2, 3).unwrap());
        for (k, p) in parts.iter().enumerate() {
            let n = m.head.normalize(&m.store, p, k + 1).unwrap();
            for (a, b) in n.iter().zip(&feats[1].parts[k]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
