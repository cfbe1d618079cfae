mod common;

use dhcnet::hce;
use dhcnet::hcl;
use dhcnet::nn::{self, Rect};
use dhcnet::tensor::Tensor;

#[test]
fn shuffle_matches_pixel_definition_over_1000_trials() {
    common::shuffle_oracle(1000, 11).unwrap();
}

#[test]
fn roi_align_matches_brute_force_sampler() {
    let worst = common::roi_oracle(100, 5);
    assert!(worst <= 1e-6, "max abs error {worst}");
}

#[test]
fn roi_quadrant_of_ramp_map() {
    // 4×4 map holding 0..15; the top-left 2×2 quadrant averages 0, 1, 4, 5.
    let feat = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let out = nn::roi_align_values(&feat, Rect::new(0.0, 0.0, 2.0, 2.0), 1, 1, 1).unwrap();
    assert!((out.data()[0] - 2.5).abs() < 1e-12);
}

#[test]
fn roi_full_plane_one_sample_reproduces_input() {
    let feat = Tensor::new(vec![2, 5, 7], (0..70).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
    let out = nn::roi_align_values(&feat, Rect::new(0.0, 0.0, 7.0, 5.0), 5, 7, 1).unwrap();
    assert_eq!(out.data(), feat.data());
}

#[test]
fn quarter_views_tile_64px_image() {
    let img = Tensor::new(vec![3, 64, 64], (0..3 * 64 * 64).map(|v| (v as f64 * 0.01).cos()).collect()).unwrap();
    let views = hce::extract_views(&img, 0.25).unwrap();
    let mut covered = vec![0u8; 64 * 64];
    for b in &views.boxes {
        for y in b.y0 as usize..b.y1 as usize {
            for x in b.x0 as usize..b.x1 as usize {
                covered[y * 64 + x] += 1;
            }
        }
    }
    assert!(covered.iter().all(|&c| c == 1));
    let back = hce::reassemble(&views, 64, 64);
    assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn schedule_for_three_granularities() {
    let s = hcl::granularity_schedule(3, 4).unwrap();
    let got: Vec<(u32, usize, usize)> = s.iter().map(|e| (e.k, e.n, e.last_stage)).collect();
    assert_eq!(got, [(1, 2, 2), (2, 4, 3), (3, 8, 4)]);
}

#[test]
fn quadrant_features_tile_the_feature_map() {
    use dhcnet::tensor::Tape;
    let img = Tensor::zeros(vec![3, 64, 64]);
    let views = hce::extract_views(&img, 0.25).unwrap();
    let feat = Tensor::new(vec![5, 8, 8], (0..320).map(|v| (v as f64 * 0.13).sin()).collect()).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(feat.clone());
    let g = hce::global_features(&mut tape, f, &views, 8, 4, 4, 1).unwrap();
    let g = tape.value(g).clone();
    let quad = g.len() / 4;
    let crops = g.data().chunks(quad).map(|c| Tensor::new(vec![5, 4, 4], c.to_vec()).unwrap()).collect();
    let boxes = views.boxes.map(|r| r.scaled(1.0 / 8.0));
    let back = hce::reassemble(&hce::ViewSet { sigma_v: 0.25, boxes, crops, views: g.clone() }, 8, 8);
    assert_eq!(back, feat);
}
