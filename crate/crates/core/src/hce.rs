//! Holistic cognition expansion geometry: four corner views of an image,
//! their backbone features, and the matching RoIAlign samples of the
//! full-image feature map.

use serde::{Deserialize, Serialize};

use crate::backbone::Bound;
use crate::error::{Error, Result};
use crate::hcl::{scaled_side, Corner};
use crate::nn::{self, Rect, Roi};
use crate::tensor::{Tape, Tensor, Var};

/// Smallest view proportion whose four corner views still cover the image.
pub const MIN_VIEW_SIGMA: f64 = 0.25;

/// Whether gradients flow through the local-view features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HceMode {
    #[default]
    Online,
    Frozen,
}

/// View proportion used for a shuffle proportion `sigma`.
pub fn view_sigma(sigma: f64) -> f64 {
    sigma.max(MIN_VIEW_SIGMA)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub sigma_v: f64,
    /// Image-coordinate boxes in [`Corner::ALL`] order.
    pub boxes: [Rect; 4],
    /// Un-resized crops, 3 × side_h × side_w each.
    pub crops: Vec<Tensor>,
    /// Crops resized to the image resolution, stacked: 4×3×H×W.
    pub views: Tensor,
}

/// Corner boxes of side floor(√σ_v·H) × floor(√σ_v·W).
pub fn view_boxes(h: usize, w: usize, sigma_v: f64) -> Result<[Rect; 4]> {
    if !(MIN_VIEW_SIGMA..=1.0).contains(&sigma_v) {
        return Err(Error::InvalidArgument(format!(
            "view proportion {sigma_v} is outside [{MIN_VIEW_SIGMA}, 1]; views would not cover the image"
        )));
    }
    let (sh, sw) = (scaled_side(sigma_v, h), scaled_side(sigma_v, w));
    Ok(Corner::ALL.map(|corner| {
        let (top, left) = corner.origin(h, w, sh, sw);
        Rect::new(left as f64, top as f64, (left + sw) as f64, (top + sh) as f64)
    }))
}

fn crop(image: &Tensor, rect: &Rect) -> Tensor {
    let [c, h, w] = image.shape().try_into().expect("checked by caller");
    let (x0, y0) = (rect.x0 as usize, rect.y0 as usize);
    let (cw, ch) = (rect.width() as usize, rect.height() as usize);
    let mut data = Vec::with_capacity(c * ch * cw);
    for plane in 0..c {
        for y in y0..y0 + ch {
            let row = (plane * h + y) * w;
            data.extend_from_slice(&image.data()[row + x0..row + x0 + cw]);
        }
    }
    Tensor::from_parts(vec![c, ch, cw], data)
}

/// Four corner-anchored crops, each bilinearly resized back to H×W.
pub fn extract_views(image: &Tensor, sigma_v: f64) -> Result<ViewSet> {
    let [c, h, w]: [usize; 3] = image.shape().try_into().map_err(|_| Error::InvalidShape {
        op: "extract_views",
        msg: format!("expected C×H×W image, got {:?}", image.shape()),
    })?;
    let boxes = view_boxes(h, w, sigma_v)?;
    let crops: Vec<Tensor> = boxes.iter().map(|b| crop(image, b)).collect();
    let mut resized = Vec::with_capacity(4);
    for crop in &crops {
        let [_, ch, cw] = crop.shape().try_into().unwrap();
        let batched = crop.reshape(vec![1, c, ch, cw])?;
        resized.push(nn::bilinear_resize_values(&batched, h, w)?.reshape(vec![c, h, w])?);
    }
    Ok(ViewSet {
        sigma_v,
        boxes,
        crops,
        views: Tensor::stack(&resized)?,
    })
}

/// Places the four un-resized crops back at their boxes. With σ_v = 0.25
/// this reproduces the image.
pub fn reassemble(views: &ViewSet, h: usize, w: usize) -> Tensor {
    let c = views.crops[0].shape()[0];
    let mut out = Tensor::zeros(vec![c, h, w]);
    for (rect, crop) in views.boxes.iter().zip(&views.crops) {
        let [_, ch, cw] = crop.shape().try_into().unwrap();
        let (x0, y0) = (rect.x0 as usize, rect.y0 as usize);
        for plane in 0..c {
            for y in 0..ch {
                let d = (plane * h + y0 + y) * w + x0;
                let s = (plane * ch + y) * cw;
                out.data_mut()[d..d + cw].copy_from_slice(&crop.data()[s..s + cw]);
            }
        }
    }
    out
}

/// Backbone features of a stack of views (4N×3×H×W). In frozen mode the
/// result is cut from the tape.
pub fn local_features(bound: &mut Bound<'_>, tape: &mut Tape, views: Var, mode: HceMode) -> Result<Var> {
    let size = bound.model().config().input_size;
    let s = tape.shape(views);
    if s.len() != 4 || s[0] % 4 != 0 || s[2] != size || s[3] != size {
        return Err(Error::InvalidShape {
            op: "local_features",
            msg: format!("expected 4N×3×{size}×{size} views, got {s:?}"),
        });
    }
    let features = bound.forward_full(tape, views)?;
    Ok(match mode {
        HceMode::Online => features,
        HceMode::Frozen => tape.detach(features),
    })
}

/// RoIAlign samples of an N×C×h×w feature map at each image's four view
/// boxes, mapped to feature coordinates by `stride`. Rows are ordered
/// image-major, matching [`local_features`] on the stacked views.
pub fn global_features_batched(
    tape: &mut Tape,
    features: Var,
    boxes: &[[Rect; 4]],
    stride: usize,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 || s[0] != boxes.len() {
        return Err(Error::InvalidShape {
            op: "global_features",
            msg: format!("{} box sets for feature map {s:?}", boxes.len()),
        });
    }
    let scale = 1.0 / stride as f64;
    let rois: Vec<Roi> = boxes
        .iter()
        .enumerate()
        .flat_map(|(batch, set)| set.iter().map(move |r| Roi { batch, rect: r.scaled(scale) }))
        .collect();
    nn::roi_align_batched(tape, features, &rois, out_h, out_w, samples_per_bin)
}

/// Single-image form: `features` is C×h×w, the result 4×C×out_h×out_w.
pub fn global_features(
    tape: &mut Tape,
    features: Var,
    views: &ViewSet,
    stride: usize,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "global_features",
            msg: format!("expected C×h×w features, got {s:?}"),
        });
    }
    let batched = tape.reshape(features, &[1, s[0], s[1], s[2]])?;
    global_features_batched(tape, batched, &[views.boxes], stride, out_h, out_w, samples_per_bin)
}
