//! Dataset manifests, a Market-style importer and the synthetic generator.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_HEADER: [&str; 4] = ["path", "person_id", "camera_id", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub person_id: Option<i64>,
    pub camera_id: usize,
    pub split: Split,
}

/// Validated list of images. Relative paths resolve against `root`; a path
/// registered in the inline table is served from memory instead of disk.
///
/// Person ids are only reachable through [`DatasetManifest::person_id`],
/// which counts its calls.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
    num_cameras: usize,
    root: PathBuf,
    inline: HashMap<String, Arc<Image>>,
    person_id_reads: Arc<AtomicUsize>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.num_cameras == other.num_cameras
    }
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, num_cameras: usize, root: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            validate_record(r, num_cameras).map_err(|m| Error::Validation(format!("record {i}: {m}")))?;
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Validation(format!("duplicate path `{}`", r.path)));
            }
        }
        Ok(Self {
            records,
            num_cameras,
            root,
            inline: HashMap::new(),
            person_id_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Reads a `path,person_id,camera_id,split` file; paths are relative to
    /// the manifest's directory.
    pub fn load(path: &Path, num_cameras: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| parse_err(path, 1, e.to_string()))?;
        let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
        if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
            return Err(parse_err(path, 1, format!("expected header `{}`", MANIFEST_HEADER.join(","))));
        }
        let mut records = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for row in reader.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(path, line, e.to_string())
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if row.len() != 4 {
                return Err(parse_err(path, line, format!("expected 4 fields, got {}", row.len())));
            }
            let field = |i: usize| row[i].trim();
            let person_id = match field(1) {
                "" => None,
                s => Some(
                    s.parse::<i64>()
                        .map_err(|_| parse_err(path, line, format!("bad person_id `{s}`")))?,
                ),
            };
            let camera_id = field(2)
                .parse::<usize>()
                .map_err(|_| parse_err(path, line, format!("bad camera_id `{}`", field(2))))?;
            let split = field(3).parse::<Split>().map_err(|m| parse_err(path, line, m))?;
            let record = ManifestRecord {
                path: field(0).to_string(),
                person_id,
                camera_id,
                split,
            };
            if record.path.is_empty() {
                return Err(parse_err(path, line, "empty path".into()));
            }
            validate_record(&record, num_cameras).map_err(|m| Error::Validation(format!("line {line}: {m}")))?;
            if !seen.insert(record.path.clone()) {
                return Err(Error::Validation(format!("line {line}: duplicate path `{}`", record.path)));
            }
            records.push(record);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(records, num_cameras, root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(MANIFEST_HEADER).map_err(err)?;
        for r in &self.records {
            let pid = r.person_id.map(|p| p.to_string()).unwrap_or_default();
            w.write_record([r.path.as_str(), &pid, &r.camera_id.to_string(), &r.split.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: PathBuf) {
        self.root = root;
    }

    pub fn path(&self, i: usize) -> &str {
        &self.records[i].path
    }

    pub fn camera_id(&self, i: usize) -> usize {
        self.records[i].camera_id
    }

    pub fn split(&self, i: usize) -> Split {
        self.records[i].split
    }

    /// Ground-truth id of record `i`. Every call is counted.
    pub fn person_id(&self, i: usize) -> Option<i64> {
        self.person_id_reads.fetch_add(1, Ordering::Relaxed);
        self.records[i].person_id
    }

    pub fn person_id_reads(&self) -> usize {
        self.person_id_reads.load(Ordering::Relaxed)
    }

    /// Record indices in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Clones the records. Reads every person id, so not for training code.
    pub fn records(&self) -> Vec<ManifestRecord> {
        self.person_id_reads.fetch_add(self.records.len(), Ordering::Relaxed);
        self.records.clone()
    }

    pub fn insert_inline(&mut self, path: &str, image: Image) {
        self.inline.insert(path.to_string(), Arc::new(image));
    }

    pub fn is_inline(&self, i: usize) -> bool {
        self.inline.contains_key(&self.records[i].path)
    }

    pub fn load_image(&self, i: usize) -> Result<Image> {
        let p = &self.records[i].path;
        match self.inline.get(p) {
            Some(img) => Ok((**img).clone()),
            None => Image::load(&self.root.join(p)),
        }
    }

    /// Loads the given records, resized to `height`×`width` when needed.
    pub fn load_images(&self, indices: &[usize], height: usize, width: usize) -> Result<Vec<Image>> {
        indices
            .par_iter()
            .map(|&i| {
                let img = self.load_image(i)?;
                Ok(if img.height == height && img.width == width {
                    img
                } else {
                    img.resized(height, width)
                })
            })
            .collect()
    }

    /// Writes every inline image as a PNG under `dir` (at its manifest path)
    /// together with `dir/manifest.csv`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &self.records {
            let img = self
                .inline
                .get(&r.path)
                .ok_or_else(|| Error::Input(format!("`{}` has no inline image", r.path)))?;
            let out = dir.join(&r.path);
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save_png(&out)?;
        }
        let manifest = dir.join("manifest.csv");
        self.write(&manifest)?;
        Ok(manifest)
    }
}

fn parse_err(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn validate_record(r: &ManifestRecord, num_cameras: usize) -> std::result::Result<(), String> {
    if r.camera_id >= num_cameras {
        return Err(format!("camera_id {} out of range for {num_cameras} cameras", r.camera_id));
    }
    match (r.split, r.person_id) {
        (Split::Query | Split::Gallery, None) => Err(format!("{} row requires person_id", r.split)),
        (Split::Query, Some(id)) if id < 0 => Err("query person_id must be non-negative".into()),
        (_, Some(id)) if id < -1 => Err(format!("invalid person_id {id}")),
        _ => Ok(()),
    }
}

/// Parses `0002_c1s1_000451_03.jpg`-style names into `(person_id, camera)`
/// with a 0-based camera.
pub fn parse_market_name(name: &str) -> Option<(i64, usize)> {
    let (id, rest) = name.split_once('_')?;
    let id: i64 = id.parse().ok()?;
    let rest = rest.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let cam: usize = digits.parse().ok()?;
    (cam >= 1).then(|| (id, cam - 1))
}

/// Builds a manifest from a Market-1501 style directory
/// (`bounding_box_train`, `query`, `bounding_box_test`). Junk training images
/// (id −1) are dropped.
pub fn import_market(dir: &Path, num_cameras: usize) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (sub, split) in [
        ("bounding_box_train", Split::Train),
        ("query", Split::Query),
        ("bounding_box_test", Split::Gallery),
    ] {
        let folder = dir.join(sub);
        let mut names: Vec<String> = std::fs::read_dir(&folder)
            .map_err(|e| Error::io(&folder, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".jpg") || n.ends_with(".png"))
            .collect();
        names.sort();
        for name in names {
            let (id, cam) = parse_market_name(&name)
                .ok_or_else(|| Error::Validation(format!("unrecognized file name `{sub}/{name}`")))?;
            if split == Split::Train && id < 0 {
                continue;
            }
            records.push(ManifestRecord {
                path: format!("{sub}/{name}"),
                person_id: Some(id),
                camera_id: cam,
                split,
            });
        }
    }
    DatasetManifest::new(records, num_cameras, dir.to_path_buf())
}

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub num_cameras: usize,
    pub images_per_id_per_camera: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f32,
    /// Strength of the per-camera gain, offset and background change.
    pub camera_shift: f32,
    /// Maximum random displacement of the figure, in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 64×32 images with moderate noise and camera shift.
    pub fn toy(num_ids: usize, num_cameras: usize, images_per_id_per_camera: usize, seed: u64) -> Self {
        Self {
            num_ids,
            num_cameras,
            images_per_id_per_camera,
            image_height: 64,
            image_width: 32,
            noise_sigma: 0.05,
            camera_shift: 0.25,
            jitter: 2,
            seed,
        }
    }

    pub fn total_images(&self) -> usize {
        self.num_ids * self.num_cameras * self.images_per_id_per_camera
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::Config("synthetic data needs at least 2 identities".into()));
        }
        if self.num_cameras < 2 || self.images_per_id_per_camera < 2 {
            return Err(Error::Config(
                "queries need a cross-camera gallery positive: use at least 2 cameras and 2 images per camera".into(),
            ));
        }
        if self.image_height < 16 || self.image_width < 8 {
            return Err(Error::Config("synthetic images must be at least 16x8".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.camera_shift >= 0.0) {
            return Err(Error::Config("noise and camera shift must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Appearance {
    head: [f32; 3],
    top: [f32; 3],
    top_alt: [f32; 3],
    bottom: [f32; 3],
    shoes: [f32; 3],
    pattern: u8,
    /// Horizontal offset of the torso mark, as a fraction of the figure width.
    mark: f32,
}

#[derive(Clone, Debug)]
struct CameraLook {
    gain: [f32; 3],
    offset: [f32; 3],
    background: [f32; 3],
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn render(spec: &SyntheticSpec, who: &Appearance, cam: &CameraLook, dy: i64, dx: i64, noise: &mut impl FnMut() -> f32) -> Image {
    let (h, w) = (spec.image_height, spec.image_width);
    let mut img = Image::new(h, w);
    let (x0, x1) = (w as i64 / 8, 7 * w as i64 / 8);
    let fw = (x1 - x0) as f32;
    let band = |f: f32| (f * h as f32).round() as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (fy, fx) = (y - dy, x - dx);
            let inside = fx >= x0 && fx < x1;
            let rgb = if !inside || fy < band(0.04) || fy >= h as i64 {
                cam.background
            } else if fy < band(0.18) {
                let hx0 = x0 + (fw * 0.25) as i64;
                let hx1 = x1 - (fw * 0.25) as i64;
                if fx >= hx0 && fx < hx1 {
                    who.head
                } else {
                    cam.background
                }
            } else if fy < band(0.55) {
                let u = (fx - x0) as f32 / fw;
                let alt = match who.pattern {
                    0 => false,
                    1 => (fy / 3) % 2 == 0,
                    2 => ((fx - x0) / 3) % 2 == 0,
                    _ => (u - who.mark).abs() < 0.2 && fy < band(0.4),
                };
                if alt {
                    who.top_alt
                } else {
                    who.top
                }
            } else if fy < band(0.92) {
                who.bottom
            } else {
                who.shoes
            };
            for c in 0..3 {
                let v = rgb[c] * cam.gain[c] + cam.offset[c] + noise();
                img.set(c, y as usize, x as usize, v.clamp(0.0, 1.0));
            }
        }
    }
    img.quantize();
    img
}

/// Synthetic labelled-by-construction benchmark held in memory (inline
/// images). The first half of the identities is the training split; for each
/// remaining identity, image 0 of every camera is a query and the rest are
/// gallery images.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let people: Vec<Appearance> = (0..spec.num_ids)
        .map(|_| Appearance {
            head: color(&mut rng),
            top: color(&mut rng),
            top_alt: color(&mut rng),
            bottom: color(&mut rng),
            shoes: color(&mut rng),
            pattern: rng.random_range(0..4),
            mark: rng.random_range(0.2..0.8),
        })
        .collect();
    let s = spec.camera_shift;
    let cams: Vec<CameraLook> = (0..spec.num_cameras)
        .map(|_| {
            let mut look = CameraLook {
                gain: [1.0; 3],
                offset: [0.0; 3],
                background: [0.5; 3],
            };
            for c in 0..3 {
                look.gain[c] = 1.0 + s * rng.random_range(-0.5f32..0.5);
                look.offset[c] = s * rng.random_range(-0.2f32..0.2);
                look.background[c] = 0.5 + s * rng.random_range(-0.5f32..0.5);
            }
            look
        })
        .collect();
    let normal = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let train_ids = spec.num_ids / 2;
    let j = spec.jitter as i64;

    let mut records = Vec::with_capacity(spec.total_images());
    let mut images = Vec::with_capacity(spec.total_images());
    for (id, who) in people.iter().enumerate() {
        for (c, look) in cams.iter().enumerate() {
            for k in 0..spec.images_per_id_per_camera {
                let dy = rng.random_range(-j..=j);
                let dx = rng.random_range(-j..=j);
                let sigma = spec.noise_sigma;
                let mut noise = || if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                images.push(render(spec, who, look, dy, dx, &mut noise));
                let split = if id < train_ids {
                    Split::Train
                } else if k == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                };
                records.push(ManifestRecord {
                    path: format!("{split}/{id:04}_c{c}_{k:03}.png"),
                    person_id: Some(id as i64),
                    camera_id: c,
                    split,
                });
            }
        }
    }
    let mut manifest = DatasetManifest::new(records, spec.num_cameras, PathBuf::new())?;
    for (i, img) in images.into_iter().enumerate() {
        let p = manifest.records[i].path.clone();
        manifest.insert_inline(&p, img);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn three_row_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "path,person_id,camera_id,split\na.png,,0,train\nb.png,3,1,query\nc.png,-1,1,gallery\n",
        );
        let m = DatasetManifest::load(&p, 2).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.indices(Split::Train), vec![0]);
        assert_eq!(m.person_id_reads(), 0);
        assert_eq!(m.person_id(1), Some(3));
        assert_eq!(m.person_id_reads(), 1);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("path,person_id,camera_id,split\na.png,1,2,train\n", "validation"),
            ("path,person_id,camera_id,split\na.png,,0,query\n", "validation"),
            ("path,person_id,camera_id,split\na.png,1,0,train\na.png,1,1,train\n", "validation"),
            ("path,person_id,camera_id,split\na.png,1,0,train\nb.png,x,0,train\n", ":3:"),
            ("path,person_id,camera_id,split\na.png,1,0,holdout\n", ":2:"),
            ("path,pid,camera_id,split\n", ":1:"),
        ];
        for (body, needle) in cases {
            let err = DatasetManifest::load(&write(dir.path(), body), 2).unwrap_err().to_string();
            assert!(err.contains(needle), "{body:?} -> {err}");
        }
    }

    #[test]
    fn market_names() {
        assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg"), Some((2, 0)));
        assert_eq!(parse_market_name("-1_c3s2_000001_00.jpg"), Some((-1, 2)));
        assert_eq!(parse_market_name("0002_x1s1.jpg"), None);
        assert_eq!(parse_market_name("0002_c0s1.jpg"), None);
    }

    #[test]
    fn synthetic_counts_and_splits() {
        let spec = SyntheticSpec::toy(16, 4, 8, 3);
        let m = generate_synthetic(&spec).unwrap();
        assert_eq!(m.len(), 512);
        assert_eq!(m.indices(Split::Train).len(), 256);
        assert_eq!(m.indices(Split::Query).len(), 32);
        assert_eq!(m.indices(Split::Gallery).len(), 224);
    }

    #[test]
    fn noiseless_shiftless_images_coincide_per_identity() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            camera_shift: 0.0,
            jitter: 0,
            ..SyntheticSpec::toy(4, 2, 2, 9)
        };
        let m = generate_synthetic(&spec).unwrap();
        let imgs: Vec<Image> = (0..m.len()).map(|i| m.load_image(i).unwrap()).collect();
        for i in 0..m.len() {
            for k in 0..m.len() {
                let same = m.person_id(i) == m.person_id(k);
                assert_eq!(imgs[i] == imgs[k], same);
            }
        }
    }

    #[test]
    fn rejects_specs_without_cross_camera_positives() {
        assert!(generate_synthetic(&SyntheticSpec::toy(4, 1, 4, 0)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::toy(4, 3, 1, 0)).is_err());
    }
}
