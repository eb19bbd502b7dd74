//! Alternating clustering / training loop, augmentation and batch sampling.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::association::{
    cluster, offline_sets, online_sets, split_camera_proxies, AnchorSets, ClusterAssignment, ProxyLabeling,
};
use crate::backbone::Mode;
use crate::checkpoint::save_checkpoint;
use crate::config::{Config, EPS_RELAX_FACTOR};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::MultiGrainFeatures;
use crate::image::Image;
use crate::memory::{total_loss, HeadMemories, LossBreakdown};
use crate::model::{collect_features, Model};
use crate::params::Sgd;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images drawn per proxy in a batch.
pub const INSTANCES_PER_PROXY: usize = 4;

/// Training-time image augmentation: horizontal flip, pad-and-crop and
/// random erasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmenter {
    pub enabled: bool,
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
    /// Erased fraction of the image area.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    /// Per-channel fill for erased pixels.
    pub fill: [f32; 3],
}

impl Augmenter {
    pub fn new(fill: [f32; 3]) -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            pad: 10,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.3),
            fill,
        }
    }

    /// The evaluation-mode transform.
    pub fn identity() -> Self {
        Self {
            enabled: false,
            ..Self::new([0.0; 3])
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Image {
        if !self.enabled {
            return image.clone();
        }
        let mut img = if rng.random_bool(self.flip_prob) {
            image.flipped_horizontal()
        } else {
            image.clone()
        };
        if self.pad > 0 {
            let dy = rng.random_range(0..=2 * self.pad);
            let dx = rng.random_range(0..=2 * self.pad);
            img = pad_crop(&img, self.pad, dy, dx);
        }
        if rng.random_bool(self.erase_prob) {
            if let Some((y, x, h, w)) = self.erase_region(img.height, img.width, rng) {
                erase(&mut img, y, x, h, w, self.fill);
            }
        }
        img
    }

    /// Rejection-samples an erase rectangle; gives up after a few tries.
    fn erase_region<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Option<(usize, usize, usize, usize)> {
        let area = (height * width) as f64;
        for _ in 0..100 {
            let target = area * rng.random_range(self.erase_area.0..self.erase_area.1);
            let log_r = rng.random_range(self.erase_aspect.0.ln()..self.erase_aspect.1.ln());
            let aspect = log_r.exp();
            let h = (target * aspect).sqrt().round() as usize;
            let w = (target / aspect).sqrt().round() as usize;
            if h > 0 && w > 0 && h < height && w < width {
                let y = rng.random_range(0..=height - h);
                let x = rng.random_range(0..=width - w);
                return Some((y, x, h, w));
            }
        }
        None
    }
}

/// Zero-pads by `pad` on every side and crops the original size at offset
/// `(dy, dx)` of the padded image.
pub fn pad_crop(image: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let mut out = Image::new(image.height, image.width);
    for c in 0..3 {
        for y in 0..image.height {
            for x in 0..image.width {
                let sy = (y + dy) as i64 - pad as i64;
                let sx = (x + dx) as i64 - pad as i64;
                if sy >= 0 && sx >= 0 && (sy as usize) < image.height && (sx as usize) < image.width {
                    out.set(c, y, x, image.get(c, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

pub fn erase(image: &mut Image, y: usize, x: usize, h: usize, w: usize, fill: [f32; 3]) {
    for (c, &f) in fill.iter().enumerate() {
        for yy in y..(y + h).min(image.height) {
            for xx in x..(x + w).min(image.width) {
                image.set(c, yy, xx, f);
            }
        }
    }
}

pub fn channel_means(images: &[Image]) -> [f32; 3] {
    let mut sum = [0f64; 3];
    let mut count = 0usize;
    for img in images {
        let n = img.height * img.width;
        for (c, s) in sum.iter_mut().enumerate() {
            *s += img.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>();
        }
        count += n;
    }
    if count == 0 {
        return [0.0; 3];
    }
    sum.map(|s| (s / count as f64) as f32)
}

/// Proxy-balanced batches over non-outlier images: `B / 4` proxies with 4
/// images each (drawn with replacement when a proxy is smaller). The number
/// of batches covers the non-outlier count once.
pub fn sample_batches<R: Rng + ?Sized>(labeling: &ProxyLabeling, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let non_outliers = labeling.pseudo_label.len() - labeling.num_outliers();
    if non_outliers == 0 || labeling.num_proxies() == 0 {
        return Vec::new();
    }
    let per_batch = (batch_size / INSTANCES_PER_PROXY).max(1);
    let iterations = non_outliers.div_ceil(batch_size);
    let mut order: Vec<usize> = (0..labeling.num_proxies()).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut batches = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut batch = Vec::with_capacity(per_batch * INSTANCES_PER_PROXY);
        for _ in 0..per_batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let members = &labeling.proxy_members[order[cursor]];
            cursor += 1;
            if members.len() >= INSTANCES_PER_PROXY {
                batch.extend(members.choose_multiple(rng, INSTANCES_PER_PROXY).copied());
            } else {
                batch.extend((0..INSTANCES_PER_PROXY).map(|_| members[rng.random_range(0..members.len())]));
            }
        }
        batches.push(batch);
    }
    batches
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown<f64>,
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub num_clusters: usize,
    pub num_proxies: usize,
    pub num_outliers: usize,
    pub steps: usize,
    /// Per-step mean of each loss component.
    pub mean_loss: LossBreakdown<f64>,
    pub clusters: ClusterAssignment,
    pub labeling: ProxyLabeling,
}

/// Pseudo-label source for an epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Clustering,
    /// Ground-truth ids of the training images, for upper-bound runs.
    GroundTruth(Vec<usize>),
}

/// Owns the model, optimizer state and the training images.
pub struct Trainer<T: Scalar> {
    pub config: Config,
    pub model: Model<T>,
    pub augmenter: Augmenter,
    optimizer: Sgd<T>,
    rng: ChaCha8Rng,
    images: Vec<Image>,
    cameras: Vec<usize>,
    labels: LabelSource,
    log: Vec<LossRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// Loads the training split of `manifest`. Person ids are not read.
    pub fn new(config: Config, model: Model<T>, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        let idx = manifest.indices(Split::Train);
        if idx.is_empty() {
            return Err(Error::Input("manifest has no training images".into()));
        }
        let bb = &config.backbone;
        let images = manifest.load_images(&idx, bb.image_height, bb.image_width)?;
        let cameras = idx.iter().map(|&i| manifest.camera_id(i)).collect();
        let mut augmenter = Augmenter::new(channel_means(&images));
        augmenter.pad = config.train.crop_padding;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        let optimizer = Sgd::new(T::of(config.train.momentum), T::of(config.train.weight_decay));
        Ok(Self {
            config,
            model,
            augmenter,
            optimizer,
            rng,
            images,
            cameras,
            labels: LabelSource::Clustering,
            log: Vec::new(),
        })
    }

    /// Replaces pseudo labels with the manifest's true training ids.
    pub fn use_ground_truth(&mut self, manifest: &DatasetManifest) -> Result<()> {
        let mut ids = Vec::new();
        let mut map = std::collections::BTreeMap::new();
        for i in manifest.indices(Split::Train) {
            let pid = manifest
                .person_id(i)
                .ok_or_else(|| Error::Input(format!("training row {i} has no person_id")))?;
            let next = map.len();
            ids.push(*map.entry(pid).or_insert(next));
        }
        self.labels = LabelSource::GroundTruth(ids);
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn loss_log(&self) -> &[LossRecord] {
        &self.log
    }

    /// Inference-mode features of every training image.
    pub fn extract_features(&self) -> Result<Vec<MultiGrainFeatures<T>>> {
        let refs: Vec<&Image> = self.images.iter().collect();
        self.model.extract(&refs, &self.cameras)
    }

    fn assign(&self, global: &Tensor<T>) -> Result<ClusterAssignment> {
        match &self.labels {
            LabelSource::Clustering => {
                let mut cfg = self.config.association.clone();
                let mut relaxed = 0;
                loop {
                    match cluster(global, &cfg) {
                        Err(Error::Labeling(msg)) if relaxed < cfg.eps_relax_steps => {
                            relaxed += 1;
                            cfg.dbscan_eps *= EPS_RELAX_FACTOR;
                            log::warn!("{msg}; retrying at eps={:.4}", cfg.dbscan_eps);
                        }
                        other => break other,
                    }
                }
            }
            LabelSource::GroundTruth(ids) => Ok(ClusterAssignment {
                labels: ids.iter().map(|&i| Some(i)).collect(),
                num_clusters: ids.iter().max().map_or(0, |m| m + 1),
            }),
        }
    }

    /// Extract, cluster, rebuild memories, then one pass of optimization.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochReport> {
        if self.config.train.calibrate_bn {
            let refs: Vec<&Image> = self.images.iter().collect();
            self.model
                .calibrate_bn(&refs, &self.cameras, self.config.train.batch_size)?;
        }
        let features = self.extract_features()?;
        let global = Tensor::from_rows(&features.iter().map(|f| f.global.clone()).collect::<Vec<_>>());
        let clusters = self.assign(&global)?;
        let labeling = split_camera_proxies(&clusters, &self.cameras);
        let mem_cfg = &self.config.memory;
        let mut memories = HeadMemories::init(&features, &labeling, T::of(mem_cfg.momentum), T::of(mem_cfg.temperature))?;

        let lr = self.config.train.lr_at(epoch);
        let batches = sample_batches(&labeling, self.config.train.batch_size, &mut self.rng);
        let mut sum = LossBreakdown::<f64>::default();
        for (step, batch) in batches.iter().enumerate() {
            let loss = self.train_step(batch, &labeling, &mut memories, lr)?;
            sum.global_offline += loss.global_offline;
            sum.global_online += loss.global_online;
            sum.part_term += loss.part_term;
            sum.total += loss.total;
            self.log.push(LossRecord { epoch, step, loss });
        }
        let n = batches.len().max(1) as f64;
        let mean_loss = LossBreakdown {
            global_offline: sum.global_offline / n,
            global_online: sum.global_online / n,
            part_term: sum.part_term / n,
            total: sum.total / n,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e}, {} clusters, {} proxies, {} outliers, loss {:.4}",
            clusters.num_clusters,
            labeling.num_proxies(),
            labeling.num_outliers(),
            mean_loss.total
        );
        Ok(EpochReport {
            epoch,
            lr,
            num_clusters: clusters.num_clusters,
            num_proxies: labeling.num_proxies(),
            num_outliers: labeling.num_outliers(),
            steps: batches.len(),
            mean_loss,
            clusters,
            labeling,
        })
    }

    fn train_step(
        &mut self,
        batch: &[usize],
        labeling: &ProxyLabeling,
        memories: &mut HeadMemories<T>,
        lr: f64,
    ) -> Result<LossBreakdown<f64>> {
        let augmented: Vec<Image> = batch
            .iter()
            .map(|&i| self.augmenter.apply(&self.images[i], &mut self.rng))
            .collect();
        let refs: Vec<&Image> = augmented.iter().collect();
        let cams: Vec<usize> = batch.iter().map(|&i| self.cameras[i]).collect();
        let proxies: Vec<usize> = batch
            .iter()
            .map(|&i| labeling.pseudo_label[i].expect("sampler yields non-outliers"))
            .collect();

        let mut g = Graph::new();
        let fwd = self.model.forward_graph(&mut g, &refs, &cams, Mode::Train)?;
        let feats = collect_features(&g, &fwd.head, batch.len());

        let assoc = &self.config.association;
        let bank = &memories.global.bank;
        let sets: Vec<AnchorSets> = feats
            .iter()
            .zip(&proxies)
            .zip(&cams)
            .map(|((f, &p), &c)| AnchorSets {
                offline: offline_sets(p, labeling, bank, &f.global, assoc),
                online: online_sets(&f.global, c, p, labeling, bank, assoc),
            })
            .collect();
        let loss = total_loss(&feats, &sets, memories, T::of(self.config.loss.lambda_p))?;
        if !loss.breakdown.total.is_finite() {
            return Err(Error::Numeric("non-finite training loss".into()));
        }

        let d = self.model.dim();
        let b = batch.len();
        let mut inputs = vec![fwd.head.global];
        let mut grads = vec![Tensor::from_vec(&[b, d], loss.grad_global.concat())];
        for (k, &part) in fwd.head.parts.iter().enumerate() {
            inputs.push(part);
            let rows: Vec<T> = loss.grad_parts.iter().flat_map(|p| p[k].iter().copied()).collect();
            grads.push(Tensor::from_vec(&[b, d], rows));
        }
        let root = g.scalar_fn(&inputs, loss.breakdown.total, grads);
        let mut param_grads = g.backward(root);
        self.optimizer
            .step(&mut self.model.store, &g, &mut param_grads, T::of(lr));
        self.model.apply_bn_updates(&fwd.bn_updates);
        memories.update_batch(&feats, &proxies);

        let br = loss.breakdown;
        Ok(LossBreakdown {
            global_offline: br.global_offline.to_f64_lossy(),
            global_online: br.global_online.to_f64_lossy(),
            part_term: br.part_term.to_f64_lossy(),
            total: br.total.to_f64_lossy(),
        })
    }

    /// Runs every configured epoch. With an output directory, writes a
    /// checkpoint and a labeling dump per epoch plus the loss log.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<Vec<EpochReport>> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut reports = Vec::new();
        for epoch in 0..self.config.train.epochs {
            let report = self.run_epoch(epoch)?;
            if let Some(dir) = out_dir {
                let dump = dir.join(format!("labels_epoch{epoch:03}.csv"));
                let f = File::create(&dump).map_err(|e| Error::io(&dump, e))?;
                report
                    .labeling
                    .write_dump(&report.clusters, &self.cameras, BufWriter::new(f))
                    .map_err(|e| Error::io(&dump, e))?;
                save_checkpoint(&dir.join("checkpoint.bin"), &self.config, &self.model, epoch + 1)?;
                self.write_loss_log(&dir.join("loss.csv"))?;
            }
            reports.push(report);
        }
        Ok(reports)
    }

    /// `epoch,step,global_off,global_on,part_term,total`.
    pub fn write_loss_log(&self, path: &Path) -> Result<()> {
        let mut s = String::from("epoch,step,global_off,global_on,part_term,total\n");
        for r in &self.log {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e}\n",
                r.epoch, r.step, r.loss.global_offline, r.loss.global_online, r.loss.part_term, r.loss.total
            ));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}
