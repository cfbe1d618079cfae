#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dhcnet::data::{self, DatasetSpec};
use dhcnet::hcl::{self, Corner};
use dhcnet::nn::{self, Rect};
use dhcnet::tensor::Tensor;
use dhcnet::train::{ArchConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bilinear value at continuous plane coordinates (x, y), where pixel i
/// is centred at i + 0.5; samples beyond the outermost centres take the
/// border value.
pub fn bilinear_at(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let fy = (y - 0.5).max(0.0).min((h - 1) as f64);
    let fx = (x - 0.5).max(0.0).min((w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let v = |yy: usize, xx: usize| plane[yy * w + xx];
    v(y0, x0) * (1.0 - ty) * (1.0 - tx) + v(y0, x1) * (1.0 - ty) * tx + v(y1, x0) * ty * (1.0 - tx) + v(y1, x1) * ty * tx
}

/// Direct RoIAlign: every output bin is the mean of spb × spb bilinear
/// samples placed at the centres of a regular sub-grid of the bin.
pub fn roi_brute_force(plane: &[f64], h: usize, w: usize, r: Rect, oh: usize, ow: usize, spb: usize) -> Vec<f64> {
    let (bh, bw) = ((r.y1 - r.y0) / oh as f64, (r.x1 - r.x0) / ow as f64);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for a in 0..spb {
                for b in 0..spb {
                    let y = r.y0 + i as f64 * bh + (a as f64 + 0.5) * bh / spb as f64;
                    let x = r.x0 + j as f64 * bw + (b as f64 + 0.5) * bw / spb as f64;
                    acc += bilinear_at(plane, h, w, x, y);
                }
            }
            out.push(acc / (spb * spb) as f64);
        }
    }
    out
}

/// Compares library RoIAlign with [`roi_brute_force`] on random boxes.
/// Returns the largest absolute difference.
pub fn roi_oracle(boxes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..boxes {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..20), rng.gen_range(2..20));
        let feat = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (xa, xb) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..w as f64));
        let (ya, yb) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..h as f64));
        if (xa - xb).abs() < 1e-3 || (ya - yb).abs() < 1e-3 {
            continue;
        }
        let rect = Rect::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb));
        let (oh, ow, spb) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4));
        let got = nn::roi_align_values(&feat, rect, oh, ow, spb).unwrap();
        for ch in 0..c {
            let plane = &feat.data()[ch * h * w..(ch + 1) * h * w];
            let want = roi_brute_force(plane, h, w, rect, oh, ow, spb);
            for (g, e) in got.data()[ch * oh * ow..(ch + 1) * oh * ow].iter().zip(&want) {
                worst = worst.max((g - e).abs());
            }
        }
    }
    worst
}

fn region_bounds(h: usize, w: usize, sigma: f64, m: u32, corner: Corner) -> (usize, usize, usize, usize) {
    let unit = 1usize << m;
    let side = |e: usize| ((sigma.sqrt() * e as f64 + 1e-9).floor() as usize) / unit * unit;
    let (sh, sw) = (side(h), side(w));
    let (top, left) = match corner {
        Corner::TopLeft => (0, 0),
        Corner::TopRight => (0, w - sw),
        Corner::BottomLeft => (h - sh, 0),
        Corner::BottomRight => (h - sh, w - sw),
    };
    (top, left, sh, sw)
}

/// One random shuffle trial checked against the pixel-level definition.
pub fn shuffle_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(8..48), rng.gen_range(8..48));
    let m = rng.gen_range(1..4u32);
    let sigma = rng.gen_range(0.2..=1.0);
    let corner = Corner::ALL[rng.gen_range(0..4)];
    let (top, left, sh, sw) = region_bounds(h, w, sigma, m, corner);
    if sh == 0 || sw == 0 {
        return Ok(());
    }
    let k = rng.gen_range(1..=m);
    let n = 1usize << k;
    let image = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let region = hcl::region_at(h, w, sigma, m, corner).map_err(|e| e.to_string())?;
    if region.origin() != (top, left) || (region.side_h, region.side_w) != (sh, sw) {
        return Err(format!("region {region:?} != expected ({top},{left},{sh},{sw})"));
    }
    let (out, perm) = hcl::shuffle_region(&image, &region, n, rng).map_err(|e| e.to_string())?;
    let inside = |y: usize, x: usize| (top..top + sh).contains(&y) && (left..left + sw).contains(&x);

    let (src, dst) = (image.data(), out.data());
    let mut region_src = Vec::new();
    let mut region_dst = Vec::new();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if inside(y, x) {
                    region_src.push(src[i].to_bits());
                    region_dst.push(dst[i].to_bits());
                } else if src[i].to_bits() != dst[i].to_bits() {
                    return Err(format!("complement pixel ({ch},{y},{x}) changed"));
                }
            }
        }
    }
    region_src.sort_unstable();
    region_dst.sort_unstable();
    if region_src != region_dst {
        return Err("region pixel multiset changed".into());
    }

    let (ph, pw) = (sh / n, sw / n);
    for (slot, &from) in perm.iter().enumerate() {
        for ch in 0..c {
            for r in 0..ph {
                for q in 0..pw {
                    let d = (ch * h + top + (slot / n) * ph + r) * w + left + (slot % n) * pw + q;
                    let s = (ch * h + top + (from / n) * ph + r) * w + left + (from % n) * pw + q;
                    if dst[d].to_bits() != src[s].to_bits() {
                        return Err(format!("slot {slot} does not hold patch {from}"));
                    }
                }
            }
        }
    }

    let inverse = hcl::invert_permutation(&perm);
    let restored = hcl::apply_permutation(&out, &region, n, &inverse).map_err(|e| e.to_string())?;
    if restored.data().iter().zip(src).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("inverse permutation did not restore the source".into());
    }
    let identity: Vec<usize> = (0..n * n).collect();
    let same = hcl::apply_permutation(&image, &region, n, &identity).map_err(|e| e.to_string())?;
    if same.data().iter().zip(src).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("identity permutation changed the image".into());
    }
    Ok(())
}

pub fn shuffle_oracle(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        shuffle_trial(&mut rng).map_err(|e| format!("trial {t}: {e}"))?;
    }
    Ok(())
}

/// Writes a small dataset and returns its directory.
pub fn small_dataset(dir: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> PathBuf {
    let spec = DatasetSpec {
        num_classes: classes,
        train_per_class: per_class,
        test_per_class: per_class,
        image_size: size,
        seed,
        ..DatasetSpec::default()
    };
    data::gen_dataset(&spec, dir).unwrap();
    dir.to_path_buf()
}

/// A fast configuration for 16-pixel images.
pub fn tiny_config(dataset: &Path, output: &Path) -> TrainConfig {
    TrainConfig {
        dataset: dataset.to_path_buf(),
        output: output.to_path_buf(),
        image_size: 16,
        epochs: 2,
        batch_size: 4,
        backbone: ArchConfig {
            stage_channels: vec![2, 3, 3, 4],
            blocks_per_stage: 1,
        },
        ..TrainConfig::default()
    }
}
