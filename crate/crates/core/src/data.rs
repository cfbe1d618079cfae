//! Synthetic ultra-fine-grained dataset: filled radial-Fourier contours over
//! a shared texture, where classes differ only in the contour's global shape.
//! Also the PNG tree / CSV manifest I/O and the in-memory loader.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::bilinear_resize_values;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MAX_TRAIN_PER_CLASS: usize = 9;
const MAX_CLASS_ATTEMPTS: usize = 100_000;
const RADIUS_PROBES: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub contour_harmonics: usize,
    pub class_separation: f64,
    pub instance_jitter: f64,
    /// Restrict contours to shapes symmetric about the vertical axis, so a
    /// horizontal flip keeps the class.
    pub mirror_symmetric: bool,
    /// Largest centre offset along each axis, as a fraction of the image side.
    pub max_shift: f64,
    pub texture_seed: u64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 20,
            train_per_class: 3,
            test_per_class: 3,
            image_size: 64,
            contour_harmonics: 6,
            class_separation: 0.08,
            instance_jitter: 0.02,
            mirror_symmetric: true,
            max_shift: 0.06,
            texture_seed: 0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.train_per_class == 0 || self.train_per_class > MAX_TRAIN_PER_CLASS {
            return bad(format!("train_per_class must be in 1..={MAX_TRAIN_PER_CLASS}"));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        if !(0.0..=0.25).contains(&self.max_shift) {
            return bad(format!("max_shift {} is outside [0, 0.25]", self.max_shift));
        }
        if self.contour_harmonics == 0 {
            return bad("contour_harmonics must be positive".into());
        }
        if !(self.instance_jitter >= 0.0 && self.class_separation > self.instance_jitter) {
            return bad(format!(
                "class_separation {} must exceed instance_jitter {}",
                self.class_separation, self.instance_jitter
            ));
        }
        Ok(())
    }

    /// Half-width of the uniform box class coefficients are drawn from. The
    /// coefficient magnitudes then sum to at most 0.9, keeping r(θ) > 0.
    pub fn coefficient_bound(&self) -> f64 {
        0.9 / self.free_components().iter().filter(|&&f| f).count() as f64
    }

    /// Which interleaved coefficients may be nonzero. Under θ → π − θ the
    /// terms cos(hθ) for even h and sin(hθ) for odd h are unchanged.
    pub fn free_components(&self) -> Vec<bool> {
        (0..2 * self.contour_harmonics)
            .map(|j| {
                let (h, is_sin) = (j / 2 + 1, j % 2 == 1);
                !self.mirror_symmetric || (h % 2 == 0) != is_sin
            })
            .collect()
    }

    pub fn images_per_class(&self) -> usize {
        self.train_per_class + self.test_per_class
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        w.write_record(["path", "label", "split"]).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Rows are numbered from 1 after the header.
    pub fn read(path: &Path) -> Result<Manifest> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Manifest {
                row: 0,
                msg: format!("expected header path,label,split, got {}", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, record) in r.deserialize::<ManifestRow>().enumerate() {
            let row = record.map_err(|e| Error::Manifest {
                row: i + 1,
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(Manifest { rows })
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Manifest {
            row: 0,
            msg: format!("{}: {other:?}", path.display()),
        },
    }
}

/// Instance-level nuisance: placement, size, orientation and exposure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub rotation: f64,
    pub brightness: f64,
}

impl Nuisance {
    pub const NONE: Nuisance = Nuisance {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        rotation: 0.0,
        brightness: 0.0,
    };

    fn sample(size: usize, max_shift: f64, rng: &mut impl Rng) -> Nuisance {
        let shift = max_shift * size as f64;
        Nuisance {
            dx: rng.gen_range(-shift..=shift),
            dy: rng.gen_range(-shift..=shift),
            scale: rng.gen_range(0.94..=1.06),
            rotation: rng.gen_range(-0.06..=0.06),
            brightness: rng.gen_range(-0.06..=0.06),
        }
    }
}

/// Background pattern shared by every image of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    /// 3×S×S additive offsets.
    pub offsets: Tensor,
}

impl Texture {
    pub fn generate(size: usize, seed: u64) -> Result<Texture> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = 9;
        let coarse: Vec<f64> = (0..3 * grid * grid).map(|_| rng.gen_range(-0.12..=0.12)).collect();
        let coarse = Tensor::new(vec![1, 3, grid, grid], coarse)?;
        let mut offsets = bilinear_resize_values(&coarse, size, size)?.reshape(vec![3, size, size])?;
        for v in offsets.data_mut() {
            *v += rng.gen_range(-0.04..=0.04);
        }
        Ok(Texture { offsets })
    }
}

/// r(θ)/r₀ for interleaved coefficients `[a_1, b_1, a_2, b_2, …]`.
pub fn radius_factor(coeffs: &[f64], theta: f64) -> f64 {
    1.0 + coeffs
        .chunks(2)
        .enumerate()
        .map(|(i, ab)| {
            let h = (i + 1) as f64;
            ab[0] * (h * theta).cos() + ab.get(1).copied().unwrap_or(0.0) * (h * theta).sin()
        })
        .sum::<f64>()
}

fn check_radius(coeffs: &[f64]) -> Result<()> {
    for i in 0..RADIUS_PROBES {
        let theta = 2.0 * PI * i as f64 / RADIUS_PROBES as f64;
        let r = radius_factor(coeffs, theta);
        if r <= 0.0 {
            return Err(Error::InvalidArgument(format!("contour radius {r} is non-positive at θ = {theta:.4}")));
        }
    }
    Ok(())
}

const BACKGROUND: [f64; 3] = [0.78, 0.74, 0.62];
const FOREGROUND: [f64; 3] = [0.30, 0.52, 0.24];
const PIXEL_NOISE: f64 = 0.02;

/// Renders a filled contour with the given coefficients as a 3×S×S image
/// in [0, 1]. Coverage of each pixel is the clamped radial distance to the
/// boundary, which gives a one-pixel anti-aliased edge. `rng` supplies the
/// per-pixel sensor noise.
pub fn render_instance(
    coeffs: &[f64],
    nuisance: &Nuisance,
    texture: &Texture,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    check_radius(coeffs)?;
    let [_, size, _]: [usize; 3] = texture.offsets.shape().try_into().expect("texture is 3×S×S");
    let s = size as f64;
    let r0 = 0.3 * s * nuisance.scale;
    let (cx, cy) = (s / 2.0 + nuisance.dx, s / 2.0 + nuisance.dy);
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let rho = px.hypot(py);
            let theta = py.atan2(px) - nuisance.rotation;
            let coverage = (r0 * radius_factor(coeffs, theta) - rho + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                let i = (c * size + y) * size + x;
                let base = coverage * FOREGROUND[c] + (1.0 - coverage) * BACKGROUND[c];
                let noise = PIXEL_NOISE * rng.sample::<f64, _>(StandardNormal);
                out[i] = (base + texture.offsets.data()[i] + nuisance.brightness + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Class coefficient vectors with pairwise Euclidean distance ≥ δ.
pub fn sample_class_params(spec: &DatasetSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bound = spec.coefficient_bound();
    let free = spec.free_components();
    let mut classes: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut attempts = 0;
    while classes.len() < spec.num_classes {
        attempts += 1;
        if attempts > MAX_CLASS_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {} classes at separation {} after {MAX_CLASS_ATTEMPTS} attempts; use a smaller class_separation",
                spec.num_classes, spec.class_separation
            )));
        }
        let candidate: Vec<f64> = free
            .iter()
            .map(|&f| if f { rng.gen_range(-bound..=bound) } else { 0.0 })
            .collect();
        if classes.iter().all(|c| distance(c, &candidate) >= spec.class_separation) {
            classes.push(candidate);
        }
    }
    Ok(classes)
}

/// Class coefficients plus a random offset of norm ≤ `jitter` along the
/// `free` components.
pub fn jitter_params(class: &[f64], free: &[bool], jitter: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dir: Vec<f64> = free
        .iter()
        .map(|&f| if f { rng.sample(StandardNormal) } else { 0.0 })
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let radius = jitter * rng.gen::<f64>();
    class.iter().zip(&dir).map(|(c, d)| c + radius * d / norm).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedInstance {
    pub label: usize,
    pub split: Split,
    pub index: usize,
    pub coeffs: Vec<f64>,
    pub image: Tensor,
}

impl GeneratedInstance {
    pub fn relative_path(&self) -> String {
        format!("{}/c{:03}_{:02}.png", self.split.as_str(), self.label, self.index)
    }
}

/// Every image of the dataset, class-major with train before test. Each
/// instance draws from its own RNG stream, so the result does not depend
/// on generation order.
pub fn generate(spec: &DatasetSpec) -> Result<(Vec<Vec<f64>>, Vec<GeneratedInstance>)> {
    let classes = sample_class_params(spec)?;
    let texture = Texture::generate(spec.image_size, spec.texture_seed)?;
    let per_class = spec.images_per_class();
    let free = spec.free_components();
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for (label, class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((label * per_class + i + 1) as u64);
            let coeffs = jitter_params(class, &free, spec.instance_jitter, &mut rng);
            let nuisance = Nuisance::sample(spec.image_size, spec.max_shift, &mut rng);
            let image = render_instance(&coeffs, &nuisance, &texture, &mut rng)?;
            let (split, index) = if i < spec.train_per_class {
                (Split::Train, i)
            } else {
                (Split::Test, i - spec.train_per_class)
            };
            out.push(GeneratedInstance {
                label,
                split,
                index,
                coeffs,
                image,
            });
        }
    }
    Ok((classes, out))
}

/// Rounds [0,1] values to 8-bit channels.
pub fn to_rgb8(image: &Tensor) -> Result<image::RgbImage> {
    let [c, h, w]: [usize; 3] = image.shape().try_into().map_err(|_| Error::InvalidShape {
        op: "to_rgb8",
        msg: format!("expected 3×H×W, got {:?}", image.shape()),
    })?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "to_rgb8",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let d = image.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(image)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Decodes an 8-bit RGB image to 3×H×W with byte 255 → 1.0.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes the PNG tree and `manifest.csv` under `out`. Returns the manifest.
pub fn gen_dataset(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    let (_, instances) = generate(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest::default();
    for inst in &instances {
        let rel = inst.relative_path();
        save_png(&inst.image, &out.join(&rel))?;
        manifest.rows.push(ManifestRow {
            path: rel,
            label: inst.label,
            split: inst.split,
        });
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitData {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub num_classes: usize,
    pub image_size: usize,
    pub train: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Resolves a dataset argument: a manifest file or a directory holding
/// `manifest.csv`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads every image listed in the manifest, in manifest order. Image
/// paths are relative to the manifest's directory.
pub fn load(path: &Path) -> Result<Dataset> {
    let manifest_file = manifest_path(path);
    let root = manifest_file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = Manifest::read(&manifest_file)?;
    if manifest.rows.is_empty() {
        return Err(Error::Manifest {
            row: 0,
            msg: "manifest has no rows".into(),
        });
    }
    let mut train = SplitData::default();
    let mut test = SplitData::default();
    let mut size = None;
    for (i, row) in manifest.rows.iter().enumerate() {
        let row_err = |msg: String| Error::Manifest { row: i + 1, msg };
        let image = load_png(&root.join(&row.path)).map_err(|e| row_err(e.to_string()))?;
        let [_, h, w]: [usize; 3] = image.shape().try_into().expect("load_png returns 3×H×W");
        if h != w {
            return Err(row_err(format!("{} is {w}×{h}, not square", row.path)));
        }
        match size {
            None => size = Some(h),
            Some(s) if s != h => return Err(row_err(format!("{} is {h} px, expected {s}", row.path))),
            _ => {}
        }
        let dst = match row.split {
            Split::Train => &mut train,
            Split::Test => &mut test,
        };
        dst.images.push(image);
        dst.labels.push(row.label);
    }
    let num_classes = manifest.rows.iter().map(|r| r.label).max().unwrap() + 1;
    let mut seen = vec![false; num_classes];
    for r in &manifest.rows {
        seen[r.label] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Manifest {
            row: 0,
            msg: format!("labels are not contiguous: class {missing} has no rows"),
        });
    }
    Ok(Dataset {
        root,
        num_classes,
        image_size: size.unwrap(),
        train,
        test,
    })
}
