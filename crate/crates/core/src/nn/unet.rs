use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BlockCache, Conv3d, ConvBlock, ConvGeom};
use super::real::Real;
use super::tensor::{concat_channels, split_channels, upsample, upsample_backward, Tensor};
use super::NnError;

/// Probabilities are clamped away from 0 and 1 by this margin.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Dimensionality {
    pub fn tag(self) -> &'static str {
        match self {
            Dimensionality::TwoD => "2D",
            Dimensionality::ThreeD => "3D",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dimensionality: Dimensionality,
    pub in_channels: usize,
    /// Feature maps at the first level; doubled at every level below.
    pub base_width: usize,
    pub levels: usize,
    /// Spatial input shape; z is 1 for the 2-D network.
    pub input_shape: [usize; 3],
    /// Target trainable parameter count, checked to within 15 %.
    #[serde(default)]
    pub param_budget: Option<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub const DEFAULT_BASE_WIDTH: usize = 23;

    /// Full-size configuration: 128×128 slices (2-D) or 128×128×64 patches (3-D).
    pub fn standard(dimensionality: Dimensionality, in_channels: usize) -> Self {
        let (input_shape, budget) = match dimensionality {
            Dimensionality::TwoD => ([128, 128, 1], 1_400_000),
            Dimensionality::ThreeD => ([128, 128, 64], 4_000_000),
        };
        ModelConfig {
            dimensionality,
            in_channels,
            base_width: Self::DEFAULT_BASE_WIDTH,
            levels: 4,
            input_shape,
            param_budget: Some(budget),
            init_seed: 0,
        }
    }

    fn factor(&self) -> [usize; 3] {
        match self.dimensionality {
            Dimensionality::TwoD => [2, 2, 1],
            Dimensionality::ThreeD => [2, 2, 2],
        }
    }

    fn kernel(&self) -> [usize; 3] {
        match self.dimensionality {
            Dimensionality::TwoD => [3, 3, 1],
            Dimensionality::ThreeD => [3, 3, 3],
        }
    }

    fn same_geom(&self) -> ConvGeom {
        let k = self.kernel();
        ConvGeom { kernel: k, stride: [1; 3], pad: k.map(|v| v / 2) }
    }

    fn down_geom(&self) -> ConvGeom {
        let k = self.kernel();
        ConvGeom { kernel: k, stride: self.factor(), pad: k.map(|v| v / 2) }
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.base_width << l).collect()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.base_width < 4 {
            return bad(format!("base_width {} is below 4", self.base_width));
        }
        if !(1..=6).contains(&self.levels) {
            return bad(format!("levels {} outside 1..=6", self.levels));
        }
        if self.dimensionality == Dimensionality::TwoD && self.input_shape[2] != 1 {
            return bad(format!("2d input must have depth 1, got {:?}", self.input_shape));
        }
        let f = self.factor();
        for a in 0..3 {
            let div = f[a].pow(self.levels as u32 - 1);
            if self.input_shape[a] == 0 || !self.input_shape[a].is_multiple_of(div) {
                return bad(format!("input_shape {:?} not divisible by {div} along axis {a}", self.input_shape));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: ModelConfig,
    /// Encoder blocks per level.
    pub(crate) enc: Vec<Vec<ConvBlock<T>>>,
    /// Decoder blocks for levels `0..levels-1`.
    pub(crate) dec: Vec<Vec<ConvBlock<T>>>,
    pub(crate) head: Conv3d<T>,
}

fn sigmoid<T: Real>(v: T) -> T {
    let s = T::one() / (T::one() + (-v).exp());
    s.max(T::of(PROB_EPS)).min(T::of(1.0 - PROB_EPS))
}

type Stage<T> = Vec<(Tensor<T>, BlockCache<T>)>;

/// Activations kept from a training forward pass.
pub struct ForwardCache<T> {
    input: Tensor<T>,
    enc: Vec<Stage<T>>,
    dec_in: Vec<Tensor<T>>,
    dec: Vec<Stage<T>>,
    prob: Tensor<T>,
}

impl<T> ForwardCache<T> {
    pub fn prob(&self) -> &Tensor<T> {
        &self.prob
    }
}

/// A mutable view of one named parameter (or buffer) and its gradient.
pub struct ParamView<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: &'a mut Vec<T>,
    /// `None` for non-trainable buffers such as running statistics.
    pub grad: Option<&'a mut Vec<T>>,
}

fn block_views<'a, T>(prefix: &str, b: &'a mut ConvBlock<T>, out: &mut Vec<ParamView<'a, T>>) {
    let g = b.conv.geom.kernel;
    let wdims = vec![b.conv.out_c, b.conv.in_c, g[0], g[1], g[2]];
    let c = b.conv.out_c;
    let ConvBlock { conv, bn } = b;
    out.push(ParamView { name: format!("{prefix}.conv.weight"), dims: wdims, value: &mut conv.weight, grad: Some(&mut conv.grad_weight) });
    out.push(ParamView { name: format!("{prefix}.conv.bias"), dims: vec![c], value: &mut conv.bias, grad: Some(&mut conv.grad_bias) });
    out.push(ParamView { name: format!("{prefix}.bn.gamma"), dims: vec![c], value: &mut bn.gamma, grad: Some(&mut bn.grad_gamma) });
    out.push(ParamView { name: format!("{prefix}.bn.beta"), dims: vec![c], value: &mut bn.beta, grad: Some(&mut bn.grad_beta) });
    out.push(ParamView { name: format!("{prefix}.bn.running_mean"), dims: vec![c], value: &mut bn.running_mean, grad: None });
    out.push(ParamView { name: format!("{prefix}.bn.running_var"), dims: vec![c], value: &mut bn.running_var, grad: None });
}

fn run_stage<T: Real>(blocks: &mut [ConvBlock<T>], x: Tensor<T>, train: bool) -> (Tensor<T>, Stage<T>) {
    let mut stage = Vec::new();
    let mut cur = x;
    for b in blocks.iter_mut() {
        let (y, cache) = b.forward(&cur, train);
        if let Some(c) = cache {
            stage.push((y.clone(), c));
        }
        cur = y;
    }
    (cur, stage)
}

/// Backpropagates through a stage; `input` is what its first block consumed.
fn back_stage<T: Real>(
    blocks: &mut [ConvBlock<T>],
    input: &Tensor<T>,
    stage: &Stage<T>,
    dout: Tensor<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let mut d = dout;
    for i in (0..blocks.len()).rev() {
        let x = if i == 0 { input } else { &stage[i - 1].0 };
        let need = i > 0 || need_dx;
        {
            let dx = blocks[i].backward(x, &stage[i].0, &stage[i].1, &d, need)?;
            d = dx
        }
    }
    Some(d)
}

impl<T: Real> UNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let w = config.widths();
        let (same, down) = (config.same_geom(), config.down_geom());
        let mut enc = Vec::new();
        for l in 0..config.levels {
            let level = if l == 0 {
                vec![ConvBlock::new(config.in_channels, w[0], same, &mut rng), ConvBlock::new(w[0], w[0], same, &mut rng)]
            } else {
                vec![
                    ConvBlock::new(w[l - 1], w[l], down, &mut rng),
                    ConvBlock::new(w[l], w[l], same, &mut rng),
                    ConvBlock::new(w[l], w[l], same, &mut rng),
                ]
            };
            enc.push(level);
        }
        let mut dec = Vec::new();
        for l in 0..config.levels - 1 {
            dec.push(vec![ConvBlock::new(w[l + 1] + w[l], w[l], same, &mut rng), ConvBlock::new(w[l], w[l], same, &mut rng)]);
        }
        let head_geom = ConvGeom { kernel: [1; 3], stride: [1; 3], pad: [0; 3] };
        let head = Conv3d::new(w[0], 1, head_geom, &mut rng);
        let net = UNet { config, enc, dec, head };
        if let Some(budget) = net.config.param_budget {
            let count = net.param_count();
            if (count as f64 - budget as f64).abs() > 0.15 * budget as f64 {
                return Err(NnError::BudgetViolation { count, budget });
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the stored config after a checkpoint load; the architecture must not change.
    pub(crate) fn set_config(&mut self, config: ModelConfig) {
        self.config = config;
    }

    /// Trainable parameters (weights, biases, batch-norm scale and shift).
    pub fn param_count(&self) -> usize {
        let blocks: usize = self.enc.iter().chain(&self.dec).flatten().map(|b| b.param_count()).sum();
        blocks + self.head.param_count()
    }

    pub fn params_mut(&mut self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        for (l, level) in self.enc.iter_mut().enumerate() {
            for (i, b) in level.iter_mut().enumerate() {
                block_views(&format!("enc{l}.{i}"), b, &mut out);
            }
        }
        for (l, level) in self.dec.iter_mut().enumerate() {
            for (i, b) in level.iter_mut().enumerate() {
                block_views(&format!("dec{l}.{i}"), b, &mut out);
            }
        }
        let h = &mut self.head;
        let c = h.in_c;
        out.push(ParamView { name: "head.weight".into(), dims: vec![1, c, 1, 1, 1], value: &mut h.weight, grad: Some(&mut h.grad_weight) });
        out.push(ParamView { name: "head.bias".into(), dims: vec![1], value: &mut h.bias, grad: Some(&mut h.grad_bias) });
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            if let Some(g) = p.grad {
                g.fill(T::zero());
            }
        }
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<(), NnError> {
        let c = &self.config;
        let want = [x.batch(), c.in_channels, c.input_shape[0], c.input_shape[1], c.input_shape[2]];
        if x.shape != want || x.batch() == 0 {
            return Err(NnError::ShapeMismatch { expected: want.to_vec(), got: x.shape.to_vec() });
        }
        Ok(())
    }

    fn forward_impl(&mut self, x: &Tensor<T>, train: bool) -> Result<ForwardCache<T>, NnError> {
        self.check_input(x)?;
        let levels = self.config.levels;
        let factor = self.config.factor();
        let mut enc_cache = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for level in self.enc.iter_mut() {
            let (out, stage) = run_stage(level, cur, train);
            enc_cache.push(stage);
            skips.push(out.clone());
            cur = out;
        }
        let mut dec_in = vec![Tensor::zeros([0; 5]); levels.saturating_sub(1)];
        let mut dec_cache: Vec<Stage<T>> = (0..levels.saturating_sub(1)).map(|_| Vec::new()).collect();
        for l in (0..levels - 1).rev() {
            let cat = concat_channels(&upsample(&cur, factor), &skips[l]);
            let (out, stage) = run_stage(&mut self.dec[l], cat.clone(), train);
            if train {
                dec_in[l] = cat;
            }
            dec_cache[l] = stage;
            cur = out;
        }
        let prob = self.head.forward(&cur).map(sigmoid);
        Ok(ForwardCache { input: if train { x.clone() } else { Tensor::zeros([0; 5]) }, enc: enc_cache, dec_in, dec: dec_cache, prob })
    }

    /// Training-mode forward pass (batch statistics; running estimates updated).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<ForwardCache<T>, NnError> {
        self.forward_impl(x, true)
    }

    /// Inference with running batch-norm statistics. Foreground probabilities `[N, 1, X, Y, Z]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let factor = self.config.factor();
        let eval = |blocks: &[ConvBlock<T>], x: Tensor<T>| {
            blocks.iter().fold(x, |cur, b| b.bn.forward_eval(&b.conv.forward(&cur)).map(|v| v.max(T::zero())))
        };
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for level in &self.enc {
            cur = eval(level, cur);
            skips.push(cur.clone());
        }
        for l in (0..self.config.levels - 1).rev() {
            let cat = concat_channels(&upsample(&cur, factor), &skips[l]);
            cur = eval(&self.dec[l], cat);
        }
        Ok(self.head.forward(&cur).map(sigmoid))
    }

    /// Accumulates parameter gradients given `dL/dprob`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dprob: &Tensor<T>) -> Result<(), NnError> {
        if dprob.shape != cache.prob.shape {
            return Err(NnError::ShapeMismatch { expected: cache.prob.shape.to_vec(), got: dprob.shape.to_vec() });
        }
        let levels = self.config.levels;
        let factor = self.config.factor();
        let dlogit = Tensor::from_vec(
            dprob.shape,
            dprob.data.iter().zip(&cache.prob.data).map(|(&g, &p)| g * p * (T::one() - p)).collect(),
        );
        let head_in = if levels > 1 { &cache.dec[0].last().expect("decoder stage").0 } else { &cache.enc[0].last().expect("encoder stage").0 };
        let mut d = self.head.backward(head_in, &dlogit, true).expect("input gradient");
        let mut dskip: Vec<Option<Tensor<T>>> = vec![None; levels];
        for l in 0..levels.saturating_sub(1) {
            let dcat = back_stage(&mut self.dec[l], &cache.dec_in[l], &cache.dec[l], d, true).expect("input gradient");
            let up_c = self.config.widths()[l + 1];
            let (dup, ds) = split_channels(&dcat, up_c);
            dskip[l] = Some(ds);
            d = upsample_backward(&dup, factor);
        }
        // `d` is now the gradient at the bottom of the encoder.
        for l in (0..levels).rev() {
            if let Some(ds) = dskip[l].take() {
                for (a, b) in d.data.iter_mut().zip(&ds.data) {
                    *a += *b;
                }
            }
            let input = if l == 0 { &cache.input } else { &cache.enc[l - 1].last().expect("encoder stage").0 };
            match back_stage(&mut self.enc[l], input, &cache.enc[l], d, l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok(())
    }
}
