//! The recognition network: a plain stride-2 conv/relu pyramid of four
//! stages, each with a linear classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Number of stages.
pub const NUM_STAGES: usize = 4;

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            num_classes: 20,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "expected {NUM_STAGES} stage widths, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 || self.num_classes == 0 {
            return Err(Error::Config("stage widths, blocks_per_stage and num_classes must be positive".into()));
        }
        let stride = 1 << NUM_STAGES;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by the total stride {stride}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Downsampling factor between the input and the final feature map.
    pub fn total_stride(&self) -> usize {
        1 << NUM_STAGES
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    /// Spatial extent after `stage` (1-based).
    pub fn stage_extent(&self, stage: usize) -> usize {
        self.input_size >> stage
    }

    /// Closed-form count of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        let mut in_ch = 3;
        for &c in &self.stage_channels {
            total += c * in_ch * KERNEL * KERNEL + c;
            total += (self.blocks_per_stage - 1) * (c * c * KERNEL * KERNEL + c);
            total += c * self.num_classes + self.num_classes;
            in_ch = c;
        }
        total
    }
}

/// A named learnable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: usize,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagedBackbone {
    config: BackboneConfig,
    params: Vec<Param>,
}

impl StagedBackbone {
    /// Fan-in-scaled uniform initialisation: conv weights `U(±√(6/fan_in))`,
    /// head weights `U(±1/√fan_in)`, biases zero.
    pub fn init(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut uniform = |shape: Vec<usize>, bound: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_parts(shape, data)
        };

        let mut in_ch = 3;
        for (s, &c) in config.stage_channels.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let cin = if b == 0 { in_ch } else { c };
                let fan_in = cin * KERNEL * KERNEL;
                params.push(Param {
                    name: format!("stage{}.conv{}.weight", s + 1, b + 1),
                    value: uniform(vec![c, cin, KERNEL, KERNEL], (6.0 / fan_in as f64).sqrt()),
                });
                params.push(Param {
                    name: format!("stage{}.conv{}.bias", s + 1, b + 1),
                    value: Tensor::zeros(vec![c]),
                });
            }
            in_ch = c;
        }
        for (s, &c) in config.stage_channels.iter().enumerate() {
            params.push(Param {
                name: format!("stage{}.head.weight", s + 1),
                value: uniform(vec![c, config.num_classes], 1.0 / (c as f64).sqrt()),
            });
            params.push(Param {
                name: format!("stage{}.head.bias", s + 1),
                value: Tensor::zeros(vec![config.num_classes]),
            });
        }
        Ok(StagedBackbone {
            config: config.clone(),
            params,
        })
    }

    /// Rebuilds a model from named arrays, checking names and shapes against
    /// a fresh layout for `config`.
    pub fn from_params(config: &BackboneConfig, params: Vec<Param>) -> Result<Self> {
        let template = StagedBackbone::init(config)?;
        if template.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(StagedBackbone {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn conv_slot(&self, stage: usize, block: usize) -> ConvSlot {
        let idx = 2 * ((stage - 1) * self.config.blocks_per_stage + block);
        ConvSlot {
            weight: idx,
            bias: idx + 1,
            stride: if block == 0 { 2 } else { 1 },
        }
    }

    fn head_slot(&self, stage: usize) -> HeadSlot {
        let idx = 2 * (NUM_STAGES * self.config.blocks_per_stage + stage - 1);
        HeadSlot {
            weight: idx,
            bias: idx + 1,
        }
    }

    /// Places every parameter on `tape`. With `trainable = false` they are
    /// recorded as constants and no gradient reaches them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound {
            model: self,
            vars,
            stats: ForwardStats::default(),
        }
    }
}

/// Instrumentation counters. Image counts are per batch row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardStats {
    pub full_forward_images: usize,
    pub truncated_forward_images: usize,
    /// Head evaluations (rows) per stage, index 0 = stage 1.
    pub head_rows: [usize; NUM_STAGES],
}

impl ForwardStats {
    pub fn backbone_images(&self) -> usize {
        self.full_forward_images + self.truncated_forward_images
    }

    pub fn merge(&mut self, other: &ForwardStats) {
        self.full_forward_images += other.full_forward_images;
        self.truncated_forward_images += other.truncated_forward_images;
        for (a, b) in self.head_rows.iter_mut().zip(other.head_rows) {
            *a += b;
        }
    }
}

/// A model whose parameters live on a particular tape.
pub struct Bound<'m> {
    model: &'m StagedBackbone,
    vars: Vec<Var>,
    stats: ForwardStats,
}

impl Bound<'_> {
    pub fn model(&self) -> &StagedBackbone {
        self.model
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn stats(&self) -> ForwardStats {
        self.stats
    }

    /// Routes parameter `index` through `var` instead of its bound leaf.
    pub fn substitute(&mut self, index: usize, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter with index {index}")))?;
        *slot = var;
        Ok(())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        let size = self.model.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::InvalidShape {
                op: "backbone",
                msg: format!("expected N×3×{size}×{size} input, got {s:?}"),
            });
        }
        Ok(s[0])
    }

    /// Runs stages `first..=last` (1-based) on a tensor that is the output of
    /// stage `first - 1` (or the image when `first == 1`).
    pub fn run_stages(&mut self, tape: &mut Tape, mut x: Var, first: usize, last: usize) -> Result<Var> {
        if first == 0 || first > last || last > NUM_STAGES {
            return Err(Error::InvalidArgument(format!(
                "stage range {first}..={last} is not within 1..={NUM_STAGES}"
            )));
        }
        for stage in first..=last {
            for block in 0..self.model.config.blocks_per_stage {
                let slot = self.model.conv_slot(stage, block);
                x = nn::conv2d(tape, x, self.vars[slot.weight], self.vars[slot.bias], slot.stride, 1)?;
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Stages 1..=`last_stage` on an N×3×H×W batch.
    pub fn forward_truncated(&mut self, tape: &mut Tape, x: Var, last_stage: usize) -> Result<Var> {
        if !(1..=NUM_STAGES).contains(&last_stage) {
            return Err(Error::InvalidArgument(format!(
                "last_stage {last_stage} is not within 1..={NUM_STAGES}"
            )));
        }
        let n = self.check_input(tape, x)?;
        if last_stage == NUM_STAGES {
            self.stats.full_forward_images += n;
        } else {
            self.stats.truncated_forward_images += n;
        }
        self.run_stages(tape, x, 1, last_stage)
    }

    pub fn forward_full(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_truncated(tape, x, NUM_STAGES)
    }

    /// Logits of the stage-`stage` head on pooled features.
    pub fn head_logits(&mut self, tape: &mut Tape, stage: usize, feature: Var) -> Result<Var> {
        if !(1..=NUM_STAGES).contains(&stage) {
            return Err(Error::InvalidArgument(format!("stage {stage} is not within 1..={NUM_STAGES}")));
        }
        let width = self.model.config.stage_channels[stage - 1];
        let s = tape.shape(feature);
        if s.len() != 4 || s[1] != width {
            return Err(Error::ShapeMismatch {
                op: "head_logits",
                left: vec![width],
                right: s.to_vec(),
            });
        }
        self.stats.head_rows[stage - 1] += s[0];
        let pooled = nn::global_avg_pool(tape, feature)?;
        let slot = self.model.head_slot(stage);
        nn::linear(tape, pooled, self.vars[slot.weight], self.vars[slot.bias])
    }

    /// Gradient for every parameter, zeros where none reached it.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.model.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            input_size: 32,
            stage_channels: vec![2, 3, 4, 5],
            blocks_per_stage: 2,
            num_classes: 3,
            seed: 11,
        }
    }

    fn image_batch(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * size * size;
        Tensor::new(vec![n, 3, size, size], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = StagedBackbone::init(&small()).unwrap();
        let b = StagedBackbone::init(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 12;
        assert_ne!(a, StagedBackbone::init(&other).unwrap());
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // stage1: 16·3·9+16 + 16·16·9+16, head 16·20+20
        // stage2: 32·16·9+32 + 32·32·9+32, head 32·20+20
        // stage3: 64·32·9+64 + 64·64·9+64, head 64·20+20
        // stage4: 128·64·9+128 + 128·128·9+128, head 128·20+20
        let by_hand = (432 + 16 + 2304 + 16 + 320 + 20)
            + (4608 + 32 + 9216 + 32 + 640 + 20)
            + (18432 + 64 + 36864 + 64 + 1280 + 20)
            + (73728 + 128 + 147456 + 128 + 2560 + 20);
        let config = BackboneConfig::default();
        assert_eq!(config.parameter_count(), by_hand);
        assert_eq!(StagedBackbone::init(&config).unwrap().parameter_count(), by_hand);
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut config = small();
        config.input_size = 40;
        assert!(StagedBackbone::init(&config).is_err());
        config.input_size = 32;
        config.stage_channels.pop();
        assert!(StagedBackbone::init(&config).is_err());
    }

    #[test]
    fn stage_extents_halve() {
        let config = BackboneConfig {
            stage_channels: vec![2, 2, 2, 2],
            ..BackboneConfig::default()
        };
        let model = StagedBackbone::init(&config).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(1, 64, 0));
        let mut bound = model.bind(&mut tape, false);
        let extents: Vec<usize> = (1..=4)
            .map(|s| tape_shape(&mut bound, &mut tape, x, s)[2])
            .collect();
        assert_eq!(extents, vec![32, 16, 8, 4]);
    }

    fn tape_shape(bound: &mut Bound<'_>, tape: &mut Tape, x: Var, stage: usize) -> Vec<usize> {
        let f = bound.forward_truncated(tape, x, stage).unwrap();
        tape.shape(f).to_vec()
    }

    #[test]
    fn truncated_full_and_composed_agree() {
        let model = StagedBackbone::init(&small()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(2, 32, 1));
        let mut bound = model.bind(&mut tape, true);
        let full = bound.forward_full(&mut tape, x).unwrap();
        let trunc = bound.forward_truncated(&mut tape, x, NUM_STAGES).unwrap();
        assert_eq!(tape.value(full), tape.value(trunc));

        let mid = bound.forward_truncated(&mut tape, x, 2).unwrap();
        let rest = bound.run_stages(&mut tape, mid, 3, 4).unwrap();
        assert_eq!(tape.value(rest), tape.value(full));

        let s3 = bound.forward_truncated(&mut tape, x, 3).unwrap();
        assert_eq!(tape.shape(s3)[1], small().stage_channels[2]);

        assert!(bound.forward_truncated(&mut tape, x, 0).is_err());
        assert!(bound.forward_truncated(&mut tape, x, 5).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_confidence() {
        let mut config = small();
        config.num_classes = 80;
        let mut model = StagedBackbone::init(&config).unwrap();
        for p in model.params_mut() {
            if p.name.contains("head") {
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(1, 32, 2));
        let mut bound = model.bind(&mut tape, false);
        let f = bound.forward_full(&mut tape, x).unwrap();
        let logits = bound.head_logits(&mut tape, 4, f).unwrap();
        let lp = nn::log_softmax_values(tape.value(logits)).unwrap();
        for v in lp.data() {
            assert!((v.exp() - 0.0125).abs() < 1e-15);
        }
    }

    #[test]
    fn head_width_mismatch() {
        let model = StagedBackbone::init(&small()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(1, 32, 3));
        let mut bound = model.bind(&mut tape, false);
        let f = bound.forward_truncated(&mut tape, x, 2).unwrap();
        assert!(bound.head_logits(&mut tape, 3, f).is_err());
    }

    #[test]
    fn batch_permutation_equivariance() {
        let model = StagedBackbone::init(&small()).unwrap();
        let batch = image_batch(3, 32, 4);
        let swapped = Tensor::stack(&[
            batch.index_axis0(2).unwrap(),
            batch.index_axis0(0).unwrap(),
            batch.index_axis0(1).unwrap(),
        ])
        .unwrap();
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(x);
            let mut bound = model.bind(&mut tape, false);
            let f = bound.forward_full(&mut tape, x).unwrap();
            let l = bound.head_logits(&mut tape, 4, f).unwrap();
            tape.value(l).clone()
        };
        let a = run(batch);
        let b = run(swapped);
        assert_eq!(b.index_axis0(0).unwrap(), a.index_axis0(2).unwrap());
        assert_eq!(b.index_axis0(1).unwrap(), a.index_axis0(0).unwrap());
        assert_eq!(b.index_axis0(2).unwrap(), a.index_axis0(1).unwrap());
    }

    #[test]
    fn stats_count_rows() {
        let model = StagedBackbone::init(&small()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(2, 32, 5));
        let mut bound = model.bind(&mut tape, false);
        let f = bound.forward_full(&mut tape, x).unwrap();
        bound.head_logits(&mut tape, 4, f).unwrap();
        bound.forward_truncated(&mut tape, x, 2).unwrap();
        let s = bound.stats();
        assert_eq!(s.full_forward_images, 2);
        assert_eq!(s.truncated_forward_images, 2);
        assert_eq!(s.head_rows, [0, 0, 0, 2]);
    }
}
