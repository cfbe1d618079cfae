//! Training objectives: recognition cross-entropy, the hierarchical
//! ordering regulariser, the view/feature expansion constraint and their
//! weighted sum. All batch reductions are arithmetic means over images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 2.0,
            beta: 1.0,
            gamma: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> LossWeights {
        LossWeights {
            alpha: self.alpha * factor,
            beta: self.beta * factor,
            gamma: self.gamma * factor,
        }
    }
}

/// Penalty applied to each ordered confidence gap `log C_i − log C_j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    /// `max(0, d)`
    #[default]
    Hinge,
    /// `d`, unbounded below.
    Raw,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::InvalidArgument(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Batch mean of `−logprobs[label]`.
pub fn cls_loss(tape: &mut Tape, logprobs: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logprobs).to_vec();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op: "cls_loss",
            msg: format!("expected N×K log-probabilities, got {s:?}"),
        });
    }
    check_labels(labels, s[0], s[1])?;
    let picked = tape.gather_rows(logprobs, labels)?;
    let mean = tape.mean_all(picked);
    Ok(tape.neg(mean))
}

/// Batch mean of `−Σ_k target[k]·logprobs[k]` for soft targets (N×K).
pub fn soft_cls_loss(tape: &mut Tape, logprobs: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(logprobs) != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_cls_loss",
            left: tape.shape(logprobs).to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let n = targets.shape()[0] as f64;
    let t = tape.constant(targets.clone());
    let prod = tape.mul(logprobs, t)?;
    let total = tape.sum_all(prod);
    Ok(tape.mul_scalar(total, -1.0 / n))
}

/// Softmax probability of `label` and its logarithm, the latter taken from
/// log-softmax so it stays finite when the probability underflows.
pub fn confidence(logits: &Tensor, label: usize) -> Result<(f64, f64)> {
    if logits.rank() != 1 {
        return Err(Error::InvalidShape {
            op: "confidence",
            msg: format!("expected a K-vector of logits, got {:?}", logits.shape()),
        });
    }
    check_labels(&[label], 1, logits.len())?;
    let row = logits.reshape(vec![1, logits.len()])?;
    let log_c = nn::log_softmax_values(&row)?.data()[label];
    Ok((log_c.exp(), log_c))
}

/// Σ_{i<j} pen(logC_i − logC_j) over log-confidences ordered by ascending
/// granularity.
pub fn ordering_term(log_confidences: &[f64], mode: OrderingMode) -> f64 {
    let mut total = 0.0;
    for i in 0..log_confidences.len() {
        for j in i + 1..log_confidences.len() {
            let d = log_confidences[i] - log_confidences[j];
            total += match mode {
                OrderingMode::Hinge => d.max(0.0),
                OrderingMode::Raw => d,
            };
        }
    }
    total
}

/// Result of [`hor_loss`].
pub struct HorOutput {
    pub loss: Var,
    /// Batch-mean confidence C(F_k) per granularity, in input order.
    pub confidences: Vec<f64>,
}

fn granularity_terms(
    tape: &mut Tape,
    ordered_logits: &[Var],
    labels: &[usize],
    ordering: Option<OrderingMode>,
) -> Result<HorOutput> {
    if ordered_logits.is_empty() {
        return Err(Error::InvalidArgument("hierarchical loss needs at least one granularity".into()));
    }
    let mut log_conf = Vec::with_capacity(ordered_logits.len());
    let mut confidences = Vec::with_capacity(ordered_logits.len());
    let mut ce_terms = Vec::with_capacity(ordered_logits.len());
    for &logits in ordered_logits {
        let s = tape.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "hor_loss",
                msg: format!("expected N×K logits, got {s:?}"),
            });
        }
        check_labels(labels, s[0], s[1])?;
        let lp = nn::log_softmax(tape, logits)?;
        let lc = tape.gather_rows(lp, labels)?;
        let values = tape.value(lc).data();
        confidences.push(values.iter().map(|v| v.exp()).sum::<f64>() / values.len() as f64);
        ce_terms.push(cls_loss(tape, lp, labels)?);
        log_conf.push(lc);
    }

    let mut loss = ce_terms[0];
    for &t in &ce_terms[1..] {
        loss = tape.add(loss, t)?;
    }
    if let Some(mode) = ordering {
        for i in 0..log_conf.len() {
            for j in i + 1..log_conf.len() {
                let d = tape.sub(log_conf[i], log_conf[j])?;
                let pen = match mode {
                    OrderingMode::Hinge => tape.relu(d),
                    OrderingMode::Raw => d,
                };
                let mean = tape.mean_all(pen);
                loss = tape.add(loss, mean)?;
            }
        }
    }
    Ok(HorOutput { loss, confidences })
}

/// Per-granularity cross-entropy plus the confidence-ordering penalty.
///
/// `ordered_logits[k]` holds N×K logits for the k-th granularity, ordered so
/// truncation depth increases with the index.
pub fn hor_loss(tape: &mut Tape, ordered_logits: &[Var], labels: &[usize], mode: OrderingMode) -> Result<HorOutput> {
    granularity_terms(tape, ordered_logits, labels, Some(mode))
}

/// The cross-entropy part of [`hor_loss`] alone.
pub fn granularity_ce_loss(tape: &mut Tape, ordered_logits: &[Var], labels: &[usize]) -> Result<HorOutput> {
    granularity_terms(tape, ordered_logits, labels, None)
}

/// Σ over views of ‖gap(F_G) − gap(F_L)‖₂, averaged over images.
///
/// Both inputs are 4N×C×h×w with rows grouped four per image.
pub fn exp_loss(tape: &mut Tape, global: Var, local: Var) -> Result<Var> {
    let (sg, sl) = (tape.shape(global).to_vec(), tape.shape(local).to_vec());
    if sg != sl {
        return Err(Error::ShapeMismatch {
            op: "exp_loss",
            left: sg,
            right: sl,
        });
    }
    if sg.len() != 4 || sg[0] == 0 || sg[0] % 4 != 0 {
        return Err(Error::InvalidShape {
            op: "exp_loss",
            msg: format!("expected 4N×C×h×w features, got {sg:?}"),
        });
    }
    let images = (sg[0] / 4) as f64;
    let pg = nn::global_avg_pool(tape, global)?;
    let pl = nn::global_avg_pool(tape, local)?;
    let diff = tape.sub(pg, pl)?;
    let norms = nn::row_l2_norm(tape, diff)?;
    let total = tape.sum_all(norms);
    Ok(tape.mul_scalar(total, 1.0 / images))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub hor: f64,
    pub exp: f64,
    pub total: f64,
    pub confidences: Vec<f64>,
}

/// Component losses of one step. Missing auxiliary terms contribute 0.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub hor: Option<Var>,
    pub exp: Option<Var>,
    pub confidences: Vec<f64>,
}

/// α·cls + β·hor + γ·exp, evaluated left to right.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let value = |tape: &Tape, v: Option<Var>| -> Result<f64> { v.map(|v| tape.value(v).item()).unwrap_or(Ok(0.0)) };
    let cls = tape.value(terms.cls).item()?;
    let hor = value(tape, terms.hor)?;
    let exp = value(tape, terms.exp)?;
    for (which, v) in [("classification", cls), ("hierarchical", hor), ("expansion", exp)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                which,
                value: v,
                cls,
                hor,
                exp,
            });
        }
    }

    let mut total = tape.mul_scalar(terms.cls, weights.alpha);
    if let Some(h) = terms.hor {
        let weighted = tape.mul_scalar(h, weights.beta);
        total = tape.add(total, weighted)?;
    }
    if let Some(e) = terms.exp {
        let weighted = tape.mul_scalar(e, weights.gamma);
        total = tape.add(total, weighted)?;
    }
    let report = LossReport {
        cls,
        hor,
        exp,
        total: tape.value(total).item()?,
        confidences: terms.confidences.clone(),
    };
    Ok((total, report))
}
