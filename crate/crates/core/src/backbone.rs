//! Transformer backbone: IBN convolution stem, patch tokens with position and
//! camera embeddings, and a stack of pre-norm transformer layers.

use std::sync::Arc;

use rand::Rng;

use crate::config::{BackboneConfig, MLP_RATIO};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, ConvGeom, Graph, NormLayout, Var};
use crate::image::{batch_tensor, Image};
use crate::params::{kaiming_normal, trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch norm buffers.
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether normalization layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-image token matrix `[N+1, D]`, class token first, local tokens in
/// row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if tokens.rows() != grid_rows * grid_cols + 1 {
            return Err(Error::Input(format!(
                "token matrix has {} rows, expected {}",
                tokens.rows(),
                grid_rows * grid_cols + 1
            )));
        }
        Ok(Self {
            tokens,
            grid_rows,
            grid_cols,
        })
    }

    pub fn cls(&self) -> &[T] {
        self.tokens.row(0)
    }

    pub fn num_local(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Local token at grid cell `(r, c)`.
    pub fn local(&self, r: usize, c: usize) -> &[T] {
        self.tokens.row(1 + r * self.grid_cols + c)
    }
}

/// Pending running-statistics update for one normalization layer.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// Parameter handles of one transformer layer.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_w: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_w: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

const BLOCK_PARAM_NAMES: [&str; 12] = [
    "ln1.weight",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.weight",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl BlockParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = dim * MLP_RATIO;
        let values: [Tensor<T>; 12] = [
            Tensor::full(&[dim], T::one()),
            Tensor::zeros(&[dim]),
            trunc_normal(&[dim, 3 * dim], init_std, rng),
            Tensor::zeros(&[3 * dim]),
            trunc_normal(&[dim, dim], init_std, rng),
            Tensor::zeros(&[dim]),
            Tensor::full(&[dim], T::one()),
            Tensor::zeros(&[dim]),
            trunc_normal(&[dim, hidden], init_std, rng),
            Tensor::zeros(&[hidden]),
            trunc_normal(&[hidden, dim], init_std, rng),
            Tensor::zeros(&[dim]),
        ];
        let mut values = values.into_iter();
        Self::from_ids(BLOCK_PARAM_NAMES.map(|name| {
            store.add(format!("{prefix}.{name}"), values.next().expect("twelve tensors"))
        }))
    }

    /// Registers a copy of `src` under `prefix` with identical values.
    pub fn duplicate<T: Scalar>(store: &mut ParamStore<T>, src: &BlockParams, prefix: &str) -> Self {
        let src_ids = src.ids();
        let mut i = 0;
        Self::from_ids(BLOCK_PARAM_NAMES.map(|name| {
            let value = store.get(src_ids[i]).clone();
            i += 1;
            store.add(format!("{prefix}.{name}"), value)
        }))
    }

    fn from_ids(ids: [ParamId; 12]) -> Self {
        let [ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_w, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = ids;
        Self {
            ln1_w,
            ln1_b,
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
            ln2_w,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }

    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.ln1_w,
            self.ln1_b,
            self.qkv_w,
            self.qkv_b,
            self.proj_w,
            self.proj_b,
            self.ln2_w,
            self.ln2_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }

    /// Applies the layer to `[batch*tokens, dim]`. Returns the output and the
    /// attention node.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        z: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> (Var, Var) {
        let dim = g.value(z).cols();
        let rows = batch * tokens;
        let layout = NormLayout::Rows { rows, cols: dim };
        let eps = T::of(LN_EPS);

        let (w, b) = (store.leaf(g, self.ln1_w), store.leaf(g, self.ln1_b));
        let (h, _) = g.norm(z, w, b, layout, eps, None);
        let (w, b) = (store.leaf(g, self.qkv_w), store.leaf(g, self.qkv_b));
        let qkv = g.linear(h, w, b);
        let attn = g.attention(qkv, batch, tokens, heads);
        let (w, b) = (store.leaf(g, self.proj_w), store.leaf(g, self.proj_b));
        let o = g.linear(attn, w, b);
        let z1 = g.add(z, o);

        let (w, b) = (store.leaf(g, self.ln2_w), store.leaf(g, self.ln2_b));
        let (h2, _) = g.norm(z1, w, b, layout, eps, None);
        let (w, b) = (store.leaf(g, self.fc1_w), store.leaf(g, self.fc1_b));
        let m = g.linear(h2, w, b);
        let m = g.gelu(m);
        let (w, b) = (store.leaf(g, self.fc2_w), store.leaf(g, self.fc2_b));
        let m = g.linear(m, w, b);
        (g.add(z1, m), attn)
    }

    /// Output projections of the attention and MLP sub-blocks.
    pub fn output_projections(&self) -> [ParamId; 4] {
        [self.proj_w, self.proj_b, self.fc2_w, self.fc2_b]
    }
}

/// Stem, embeddings and transformer layers `1..=L`.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    conv_w: ParamId,
    conv_b: ParamId,
    ibn_w: ParamId,
    ibn_b: ParamId,
    ibn_running_mean: ParamId,
    ibn_running_var: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    cam: ParamId,
    pub blocks: Vec<BlockParams>,
    /// Flat gather index from stem output to `[batch*N, C*(P/2)^2]` for batch 1.
    patch_index: Arc<Vec<usize>>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.stem_channels;
        let d = config.embed_dim;
        let q = config.patch_size / 2;
        let bn_channels = c - c / 2;
        let patch_len = c * q * q;
        let init_std = config.init_std;

        let conv_w = store.add("stem.conv.weight", kaiming_normal(&[c, 3 * 9], 3 * 9, rng));
        let conv_b = store.add("stem.conv.bias", Tensor::zeros(&[c]));
        let ibn_w = store.add("stem.ibn.weight", Tensor::full(&[c], T::one()));
        let ibn_b = store.add("stem.ibn.bias", Tensor::zeros(&[c]));
        let ibn_running_mean = store.add_buffer("stem.ibn.running_mean", Tensor::zeros(&[bn_channels]));
        let ibn_running_var = store.add_buffer("stem.ibn.running_var", Tensor::full(&[bn_channels], T::one()));
        let patch_w = store.add("patch.weight", trunc_normal(&[patch_len, d], init_std, rng));
        let patch_b = store.add("patch.bias", Tensor::zeros(&[d]));
        let cls = store.add("cls_token", trunc_normal(&[1, d], init_std, rng));
        let pos = store.add("pos_embed", trunc_normal(&[config.num_tokens(), d], init_std, rng));
        let cam = store.add("cam_embed", Tensor::zeros(&[config.num_cameras, d]));
        let blocks = (0..config.num_layers)
            .map(|l| BlockParams::register(store, &format!("blocks.{l}"), d, init_std, rng))
            .collect();
        let patch_index = Arc::new(patch_gather_index(&config));
        Ok(Self {
            config,
            conv_w,
            conv_b,
            ibn_w,
            ibn_b,
            ibn_running_mean,
            ibn_running_var,
            patch_w,
            patch_b,
            cls,
            pos,
            cam,
            blocks,
            patch_index,
        })
    }

    pub fn camera_embedding(&self) -> ParamId {
        self.cam
    }

    fn check_inputs(&self, images: &[&Image], cameras: &[usize]) -> Result<()> {
        if images.is_empty() || images.len() != cameras.len() {
            return Err(Error::Input("batch must be non-empty with one camera per image".into()));
        }
        for img in images {
            if img.height != self.config.image_height || img.width != self.config.image_width {
                return Err(Error::Config(format!(
                    "image is {}x{}, backbone expects {}x{}",
                    img.height, img.width, self.config.image_height, self.config.image_width
                )));
            }
        }
        if let Some(&c) = cameras.iter().find(|&&c| c >= self.config.num_cameras) {
            return Err(Error::Input(format!(
                "camera id {c} out of range for {} cameras",
                self.config.num_cameras
            )));
        }
        Ok(())
    }

    /// Builds `z0` for a batch: `[batch*(N+1), D]`.
    pub fn tokenize_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        images: &[&Image],
        cameras: &[usize],
        mode: Mode,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        self.check_inputs(images, cameras)?;
        let cfg = &self.config;
        let batch = images.len();
        let (h, w) = (cfg.image_height, cfg.image_width);
        let c = cfg.stem_channels;
        let n = cfg.num_patches();
        let t = cfg.num_tokens();

        let x = g.input(Tensor::from_vec(&[batch, 3, h, w], batch_tensor::<T>(images)));
        let geom = ConvGeom {
            batch,
            in_channels: 3,
            out_channels: c,
            height: h,
            width: w,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let (cw, cb) = (store.leaf(g, self.conv_w), store.leaf(g, self.conv_b));
        let conv = g.conv2d(x, cw, cb, geom);
        let spatial = (h / 2) * (w / 2);
        let layout = NormLayout::Ibn {
            batch,
            channels: c,
            spatial,
            split: c / 2,
        };
        let (iw, ib) = (store.leaf(g, self.ibn_w), store.leaf(g, self.ibn_b));
        let mut updates = Vec::new();
        let stem = match mode {
            Mode::Train => {
                let (v, stats) = g.norm(conv, iw, ib, layout, T::of(BN_EPS), None);
                updates.push(BnUpdate {
                    mean: self.ibn_running_mean,
                    var: self.ibn_running_var,
                    stats,
                });
                v
            }
            Mode::Eval => {
                let rm = store.get(self.ibn_running_mean).data();
                let rv = store.get(self.ibn_running_var).data();
                g.norm(conv, iw, ib, layout, T::of(BN_EPS), Some((rm, rv))).0
            }
        };
        let stem = g.relu(stem);

        let per_img = c * spatial;
        let mut idx = Vec::with_capacity(batch * self.patch_index.len());
        for b in 0..batch {
            idx.extend(self.patch_index.iter().map(|&i| b * per_img + i));
        }
        let q = cfg.patch_size / 2;
        let patches = g.gather(stem, Arc::new(idx), &[batch * n, c * q * q]);
        let (pw, pb) = (store.leaf(g, self.patch_w), store.leaf(g, self.patch_b));
        let patch_tokens = g.linear(patches, pw, pb);

        let cls = store.leaf(g, self.cls);
        let stacked = g.concat_rows(&[cls, patch_tokens]);
        let mut order = Vec::with_capacity(batch * t);
        for b in 0..batch {
            order.push(0);
            order.extend((0..n).map(|i| 1 + b * n + i));
        }
        let z = g.row_gather(stacked, Arc::new(order));

        let pos = store.leaf(g, self.pos);
        let pos_rows = g.row_gather(pos, Arc::new((0..batch).flat_map(|_| 0..t).collect()));
        let z = g.add(z, pos_rows);
        let cam = store.leaf(g, self.cam);
        let cam_rows = g.row_gather(
            cam,
            Arc::new(cameras.iter().flat_map(|&cid| std::iter::repeat_n(cid, t)).collect()),
        );
        let cam_rows = g.scale(cam_rows, T::of(cfg.camera_weight));
        Ok((g.add(z, cam_rows), updates))
    }

    /// Runs layers `from..to` (0-based, exclusive end) on a batch of token
    /// rows. Returns the output and one attention node per layer.
    pub fn layers_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        mut z: Var,
        batch: usize,
        from: usize,
        to: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let t = self.config.num_tokens();
        let mut attns = Vec::with_capacity(to - from);
        for l in from..to {
            let (out, attn) = self.blocks[l].forward(store, g, z, batch, t, self.config.num_heads);
            if !g.value(out).all_finite() {
                return Err(Error::NonFinite { layer: l + 1 });
            }
            z = out;
            attns.push(attn);
        }
        Ok((z, attns))
    }

    /// `z0` for a single image, in inference mode.
    pub fn tokenize<T: Scalar>(&self, store: &ParamStore<T>, image: &Image, camera_id: usize) -> Result<TokenSequence<T>> {
        let mut g = Graph::new();
        let (z, _) = self.tokenize_graph(store, &mut g, &[image], &[camera_id], Mode::Eval)?;
        TokenSequence::new(g.value(z).clone(), self.config.grid_rows(), self.config.grid_cols())
    }

    /// Applies layers `1..=upto` to `z0`. Also returns each layer's attention
    /// probabilities as `[heads, N+1, N+1]`.
    pub fn forward_layers<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z0: &TokenSequence<T>,
        upto: usize,
    ) -> Result<(TokenSequence<T>, Vec<Tensor<T>>)> {
        if upto == 0 || upto > self.config.num_layers {
            return Err(Error::Input(format!(
                "layer index {upto} outside 1..={}",
                self.config.num_layers
            )));
        }
        let t = self.config.num_tokens();
        if z0.tokens.rows() != t || z0.tokens.cols() != self.config.embed_dim {
            return Err(Error::Input("token sequence does not match backbone shape".into()));
        }
        let mut g = Graph::new();
        let z = g.input(z0.tokens.clone());
        let (out, attns) = self.layers_graph(store, &mut g, z, 1, 0, upto)?;
        let maps = attns
            .iter()
            .map(|&a| attention_tensor(&g, a, 0))
            .collect();
        Ok((
            TokenSequence::new(g.value(out).clone(), z0.grid_rows, z0.grid_cols)?,
            maps,
        ))
    }
}

/// Attention probabilities of batch element `b` as `[heads, tokens, tokens]`.
pub fn attention_tensor<T: Scalar>(g: &Graph<T>, attn: Var, b: usize) -> Tensor<T> {
    let (_, heads, tokens, probs) = g.attention_probs(attn).expect("attention node");
    let block = heads * tokens * tokens;
    Tensor::from_vec(&[heads, tokens, tokens], probs[b * block..(b + 1) * block].to_vec())
}

/// For one image, maps each element of the `[N, C*q*q]` patch matrix to its
/// offset in the `[C, H/2, W/2]` stem output. Patch vectors are laid out
/// channel-major, then row, then column within the patch.
fn patch_gather_index(cfg: &BackboneConfig) -> Vec<usize> {
    let c = cfg.stem_channels;
    let q = cfg.patch_size / 2;
    let (h2, w2) = (cfg.image_height / 2, cfg.image_width / 2);
    let (gr, gc) = (cfg.grid_rows(), cfg.grid_cols());
    let mut idx = Vec::with_capacity(gr * gc * c * q * q);
    for pr in 0..gr {
        for pc in 0..gc {
            for ch in 0..c {
                for dy in 0..q {
                    for dx in 0..q {
                        idx.push((ch * h2 + pr * q + dy) * w2 + pc * q + dx);
                    }
                }
            }
        }
    }
    idx
}

/// Folds observed batch statistics into running buffers.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::of(BN_MOMENTUM);
    for u in updates {
        if u.stats.mean.is_empty() {
            continue;
        }
        let n = u.stats.count;
        let unbias = if n > 1 {
            T::of_usize(n) / T::of_usize(n - 1)
        } else {
            T::one()
        };
        for (r, &bm) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - m) * *r + m * bm;
        }
        for (r, &bv) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (T::one() - m) * *r + m * bv * unbias;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: BackboneConfig) -> (Backbone, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(cfg, &mut store, &mut rng).unwrap();
        (bb, store)
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(h, w);
        for v in &mut img.data {
            *v = rng.random();
        }
        img
    }

    #[test]
    fn patch_index_covers_stem_output_once() {
        let cfg = BackboneConfig::toy(2);
        let idx = patch_gather_index(&cfg);
        let total = cfg.stem_channels * cfg.image_height * cfg.image_width / 4;
        let mut seen = vec![false; total];
        for &i in &idx {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn toy_tokenize_shape() {
        let (bb, store) = setup(BackboneConfig::toy(3));
        let z0 = bb.tokenize(&store, &test_image(64, 32, 1), 2).unwrap();
        assert_eq!(z0.tokens.shape(), &[9, 64]);
        assert_eq!((z0.grid_rows, z0.grid_cols), (4, 2));
        assert!(z0.tokens.all_finite());
    }

    #[test]
    fn tokenize_rejects_bad_inputs() {
        let (bb, store) = setup(BackboneConfig::toy(3));
        assert!(matches!(
            bb.tokenize(&store, &test_image(64, 32, 1), 3),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            bb.tokenize(&store, &test_image(48, 32, 1), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_camera_weight_is_camera_invariant() {
        let mut cfg = BackboneConfig::toy(4);
        cfg.camera_weight = 0.0;
        let (bb, store) = setup(cfg);
        let img = test_image(64, 32, 9);
        let a = bb.tokenize(&store, &img, 0).unwrap();
        for cam in 1..4 {
            assert_eq!(bb.tokenize(&store, &img, cam).unwrap(), a);
        }
    }

    #[test]
    fn camera_embedding_shifts_tokens_when_weighted() {
        let (bb, mut store) = setup(BackboneConfig::toy(2));
        let img = test_image(64, 32, 9);
        let a = bb.tokenize(&store, &img, 0).unwrap();
        assert_eq!(bb.tokenize(&store, &img, 1).unwrap(), a, "zero at init");

        let id = store.find("cam_embed").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        *store.get_mut(id) = trunc_normal(&[2, 64], 0.02, &mut rng);
        let a = bb.tokenize(&store, &img, 0).unwrap();
        let b = bb.tokenize(&store, &img, 1).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) > 0.0);
    }

    #[test]
    fn attention_rows_are_distributions_and_token_count_preserved() {
        let (bb, store) = setup(BackboneConfig::toy(1));
        let z0 = bb.tokenize(&store, &test_image(64, 32, 5), 0).unwrap();
        let (out, attns) = bb.forward_layers(&store, &z0, 4).unwrap();
        assert_eq!(out.tokens.shape(), &[9, 64]);
        assert_eq!(attns.len(), 4);
        for a in &attns {
            assert_eq!(a.shape(), &[4, 9, 9]);
            for row in a.data().chunks(9) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        for upto in 1..=4 {
            let (o, _) = bb.forward_layers(&store, &z0, upto).unwrap();
            assert_eq!(o.tokens.rows(), 9);
        }
        assert!(bb.forward_layers(&store, &z0, 0).is_err());
        assert!(bb.forward_layers(&store, &z0, 5).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_layer_identity() {
        let (bb, mut store) = setup(BackboneConfig::toy(1));
        for id in bb.blocks[0].output_projections() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let z0 = bb.tokenize(&store, &test_image(64, 32, 5), 0).unwrap();
        let (z1, _) = bb.forward_layers(&store, &z0, 1).unwrap();
        assert!(z1.tokens.max_abs_diff(&z0.tokens) < 1e-6);
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let (bb, mut store) = setup(BackboneConfig::toy(1));
        store.get_mut(bb.blocks[1].fc2_b).data_mut()[0] = f64::NAN;
        let z0 = bb.tokenize(&store, &test_image(64, 32, 5), 0).unwrap();
        match bb.forward_layers(&store, &z0, 3) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, 2),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn batched_eval_matches_single_image() {
        let (bb, store) = setup(BackboneConfig::toy(2));
        let imgs = [test_image(64, 32, 1), test_image(64, 32, 2)];
        let mut g = Graph::new();
        let (z, _) = bb
            .tokenize_graph(&store, &mut g, &[&imgs[0], &imgs[1]], &[0, 1], Mode::Eval)
            .unwrap();
        let (out, _) = bb.layers_graph(&store, &mut g, z, 2, 0, 4).unwrap();
        for (b, img) in imgs.iter().enumerate() {
            let z0 = bb.tokenize(&store, img, b).unwrap();
            let (single, _) = bb.forward_layers(&store, &z0, 4).unwrap();
            for r in 0..9 {
                let batched = g.value(out).row(b * 9 + r);
                for (x, y) in batched.iter().zip(single.tokens.row(r)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
