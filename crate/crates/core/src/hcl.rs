//! Holistic cue learning geometry: corner-anchored region selection,
//! multi-granularity patch shuffling, the granularity → depth schedule, and
//! the Mixup baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TopLeft, Corner::TopRight, Corner::BottomLeft, Corner::BottomRight];

    /// Top-left pixel of a `side_h × side_w` rectangle anchored at this
    /// corner of an `h × w` image.
    pub fn origin(self, h: usize, w: usize, side_h: usize, side_w: usize) -> (usize, usize) {
        match self {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, w - side_w),
            Corner::BottomLeft => (h - side_h, 0),
            Corner::BottomRight => (h - side_h, w - side_w),
        }
    }
}

/// The shuffled region of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub corner: Corner,
    pub sigma: f64,
    pub image_h: usize,
    pub image_w: usize,
    pub side_h: usize,
    pub side_w: usize,
}

impl RegionSpec {
    /// (row, col) of the region's top-left pixel.
    pub fn origin(&self) -> (usize, usize) {
        self.corner.origin(self.image_h, self.image_w, self.side_h, self.side_w)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (top, left) = self.origin();
        (top..top + self.side_h).contains(&y) && (left..left + self.side_w).contains(&x)
    }
}

/// floor(√σ·extent), tolerant of representation error in √σ·extent.
pub(crate) fn scaled_side(sigma: f64, extent: usize) -> usize {
    (sigma.sqrt() * extent as f64 + 1e-9).floor() as usize
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} is outside (0, 1]")));
    }
    Ok(())
}

/// Region with sides floor(√σ·H) × floor(√σ·W), each snapped down to a
/// multiple of 2^m, anchored at `corner`.
pub fn region_at(h: usize, w: usize, sigma: f64, m: u32, corner: Corner) -> Result<RegionSpec> {
    check_sigma(sigma)?;
    let unit = 1usize << m;
    let side_h = scaled_side(sigma, h) / unit * unit;
    let side_w = scaled_side(sigma, w) / unit * unit;
    if side_h == 0 || side_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "a {sigma} region of a {h}×{w} image is smaller than {unit} pixels, the finest patch grid"
        )));
    }
    Ok(RegionSpec {
        corner,
        sigma,
        image_h: h,
        image_w: w,
        side_h,
        side_w,
    })
}

/// Region anchored at a uniformly drawn image corner.
pub fn select_region<R: Rng + ?Sized>(h: usize, w: usize, sigma: f64, m: u32, rng: &mut R) -> Result<RegionSpec> {
    check_sigma(sigma)?;
    let corner = Corner::ALL[rng.gen_range(0..4)];
    region_at(h, w, sigma, m, corner)
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op: "shuffle_region",
            msg: format!("expected C×H×W image, got {:?}", image.shape()),
        }),
    }
}

/// Copies patch grids: slot `i` of the output region receives source patch
/// `perm[i]`, patches numbered row-major over the n×n grid.
pub fn apply_permutation(image: &Tensor, region: &RegionSpec, n: usize, perm: &[usize]) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    if (h, w) != (region.image_h, region.image_w) {
        return Err(Error::InvalidArgument(format!(
            "region was drawn for a {}×{} image, got {h}×{w}",
            region.image_h, region.image_w
        )));
    }
    if n == 0 || region.side_h % n != 0 || region.side_w % n != 0 {
        return Err(Error::InvalidArgument(format!(
            "region {}×{} does not split into {n}×{n} equal patches",
            region.side_h, region.side_w
        )));
    }
    if !is_permutation(perm, n * n) {
        return Err(Error::InvalidArgument(format!("not a permutation of 0..{}", n * n)));
    }
    let (ph, pw) = (region.side_h / n, region.side_w / n);
    let (top, left) = region.origin();
    let src = image.data();
    let mut out = image.clone();
    let dst = out.data_mut();
    for (slot, &from) in perm.iter().enumerate() {
        let (dy, dx) = (top + (slot / n) * ph, left + (slot % n) * pw);
        let (sy, sx) = (top + (from / n) * ph, left + (from % n) * pw);
        for ch in 0..c {
            for r in 0..ph {
                let d = (ch * h + dy + r) * w + dx;
                let s = (ch * h + sy + r) * w + sx;
                dst[d..d + pw].copy_from_slice(&src[s..s + pw]);
            }
        }
    }
    Ok(out)
}

pub fn is_permutation(perm: &[usize], len: usize) -> bool {
    if perm.len() != len {
        return false;
    }
    let mut seen = vec![false; len];
    perm.iter().all(|&p| p < len && !std::mem::replace(&mut seen[p], true))
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (slot, &from) in perm.iter().enumerate() {
        inv[from] = slot;
    }
    inv
}

/// Splits the region into n×n patches and reinserts them in a uniformly
/// random order (the identity included). Returns the image and the
/// permutation used.
pub fn shuffle_region<R: Rng + ?Sized>(
    image: &Tensor,
    region: &RegionSpec,
    n: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..n * n).collect();
    perm.shuffle(rng);
    let out = apply_permutation(image, region, n, &perm)?;
    Ok((out, perm))
}

/// One granularity level: shuffle `n = 2^k` patches per side and train the
/// result through stages `1..=last_stage`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub k: u32,
    pub n: usize,
    pub last_stage: usize,
}

/// Maps each granularity k ∈ 1..=m to its truncation depth.
///
/// The finest third, k ∈ [⌈2m/3⌉+1, m], runs all `num_stages`; the middle
/// third k ∈ [⌈m/3⌉+1, ⌈2m/3⌉] stops one stage earlier; the coarsest
/// k ∈ [1, ⌈m/3⌉] two stages earlier. Sorted by ascending k.
pub fn granularity_schedule(m: u32, num_stages: usize) -> Result<Vec<ScheduleEntry>> {
    if m == 0 || num_stages < 3 {
        return Err(Error::InvalidArgument(format!(
            "granularity schedule needs m ≥ 1 and at least 3 stages (m = {m}, stages = {num_stages})"
        )));
    }
    let third = m.div_ceil(3);
    let two_thirds = (2 * m).div_ceil(3);
    let bands = [
        (1, third, num_stages - 2),
        (third + 1, two_thirds, num_stages - 1),
        (two_thirds + 1, m, num_stages),
    ];
    if let Some(&(lo, hi, _)) = bands.iter().find(|(lo, hi, _)| lo > hi) {
        return Err(Error::InvalidArgument(format!(
            "m = {m} leaves the granularity band [{lo}, {hi}] empty (⌈m/3⌉ = {third}, ⌈2m/3⌉ = {two_thirds}); \
             every depth needs at least one granularity, which requires m ≥ 3"
        )));
    }
    let mut out = Vec::with_capacity(m as usize);
    for (lo, hi, stage) in bands {
        for k in lo..=hi {
            out.push(ScheduleEntry {
                k,
                n: 1 << k,
                last_stage: stage,
            });
        }
    }
    Ok(out)
}

/// One shuffled variant of a source image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedEntry {
    pub k: u32,
    pub n: usize,
    pub region: RegionSpec,
    pub permutation: Vec<usize>,
    pub image: Tensor,
    pub last_stage: usize,
}

/// The shuffled variants of one image across every schedule entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSet {
    pub source: String,
    pub entries: Vec<AugmentedEntry>,
}

/// Builds one shuffled image per schedule entry. Unless
/// `independent_regions` is set, all entries share one region.
pub fn augment<R: Rng + ?Sized>(
    source: &str,
    image: &Tensor,
    sigma: f64,
    schedule: &[ScheduleEntry],
    independent_regions: bool,
    rng: &mut R,
) -> Result<AugmentedSet> {
    let (_, h, w) = image_dims(image)?;
    let m = schedule.iter().map(|e| e.k).max().unwrap_or(0);
    let shared = select_region(h, w, sigma, m, rng)?;
    let mut entries = Vec::with_capacity(schedule.len());
    for entry in schedule {
        let region = if independent_regions {
            select_region(h, w, sigma, m, rng)?
        } else {
            shared
        };
        let (shuffled, permutation) = shuffle_region(image, &region, entry.n, rng)?;
        entries.push(AugmentedEntry {
            k: entry.k,
            n: entry.n,
            region,
            permutation,
            image: shuffled,
            last_stage: entry.last_stage,
        });
    }
    Ok(AugmentedSet {
        source: source.to_string(),
        entries,
    })
}

/// λ·a + (1−λ)·b for the images and their one-hot labels.
pub fn mixup(
    image_a: &Tensor,
    image_b: &Tensor,
    label_a: usize,
    label_b: usize,
    num_classes: usize,
    lambda: f64,
) -> Result<(Tensor, Vec<f64>)> {
    if image_a.shape() != image_b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mixup",
            left: image_a.shape().to_vec(),
            right: image_b.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup lambda {lambda} is outside [0, 1]")));
    }
    if label_a >= num_classes || label_b >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "labels {label_a}, {label_b} out of range for {num_classes} classes"
        )));
    }
    let data = image_a
        .data()
        .iter()
        .zip(image_b.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let mut target = vec![0.0; num_classes];
    target[label_a] += lambda;
    target[label_b] += 1.0 - lambda;
    Ok((Tensor::new(image_a.shape().to_vec(), data)?, target))
}
