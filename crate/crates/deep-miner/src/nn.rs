//! Layers and parameter plumbing: seeded initialization, a parameter store
//! with stable iteration order, batch normalization and the residual
//! convolution blocks the backbone stages are built from.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Forward-pass mode. Train mode uses batch statistics and updates running
/// stats; eval mode is a pure function of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameter tensors with deterministic iteration order. Trainable
/// parameters and buffers (running statistics) live side by side,
/// distinguished by `requires_grad`.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Trainable parameters only, in insertion order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.iter() {
            t.zero_grad();
        }
    }
}

/// Seeded parameter initializer. Conv kernels use the He scheme
/// (variance 2/fan_in), classifier weights variance 1/fan_in, batchnorm
/// gamma=1 / beta=0. Fully deterministic given the seed.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        if std == 0.0 {
            return vec![0.0; n];
        }
        let dist = Normal::new(0.0, std).expect("std must be finite");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    /// He-initialized conv kernel `[out_c, in_c, kh, kw]`.
    pub fn conv_kernel(&mut self, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Tensor {
        let fan_in = (in_c * kh * kw) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = out_c * in_c * kh * kw;
        Tensor::from_parts(vec![out_c, in_c, kh, kw], self.normal(n, std), true)
    }

    /// Classifier weight matrix `[in_dim, out_dim]` with variance 1/fan_in.
    pub fn linear(&mut self, in_dim: usize, out_dim: usize) -> Tensor {
        let std = (1.0 / in_dim as f64).sqrt();
        Tensor::from_parts(
            vec![in_dim, out_dim],
            self.normal(in_dim * out_dim, std),
            true,
        )
    }
}

/// Batch normalization state for `channels` features.
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self::build(channels, true)
    }

    /// BNNeck variant: beta frozen at zero.
    pub fn with_frozen_beta(channels: usize) -> Self {
        Self::build(channels, false)
    }

    fn build(channels: usize, beta_trainable: bool) -> Self {
        BatchNormState {
            gamma: Tensor::from_parts(vec![channels], vec![1.0; channels], true),
            beta: Tensor::from_parts(vec![channels], vec![0.0; channels], beta_trainable),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn deep_clone(&self) -> Self {
        BatchNormState {
            gamma: self.gamma.deep_clone(),
            beta: self.beta.deep_clone(),
            running_mean: self.running_mean.deep_clone(),
            running_var: self.running_var.deep_clone(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    /// (suffix, tensor) pairs for store registration / checkpointing.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }
}

/// Normalizes `[N,C]` or `[N,C,H,W]` input over the batch (and spatial)
/// axes per channel. Train mode normalizes with batch statistics and updates
/// the running stats; eval mode uses the running stats only.
pub fn batchnorm_forward(
    tape: &Tape,
    x: &Tensor,
    state: &BatchNormState,
    mode: Mode,
) -> Result<Tensor> {
    let c = state.channels();
    let (axes, bshape): (Vec<usize>, Vec<usize>) = match *x.shape() {
        [_, xc] if xc == c => (vec![0], vec![1, c]),
        [_, xc, _, _] if xc == c => (vec![0, 2, 3], vec![1, c, 1, 1]),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm over {c} channels got input shape {:?}",
                x.shape()
            )))
        }
    };
    let gamma = tape.reshape(&state.gamma, bshape.clone())?;
    let beta = tape.reshape(&state.beta, bshape.clone())?;

    match mode {
        Mode::Train => {
            let per_channel = x.numel() / c;
            if per_channel < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batchnorm train mode needs >= 2 elements per channel, got {per_channel}"
                )));
            }
            let mu = tape.mean(x, &axes, true)?;
            let centered = tape.sub(x, &mu)?;
            let var = tape.mean(&tape.mul(&centered, &centered)?, &axes, true)?;
            // (var + eps)^(-1/2) composed from primitives
            let inv_std = tape.exp(&tape.scale(
                &tape.log(&tape.add(&var, &Tensor::scalar(state.eps))?)?,
                -0.5,
            )?)?;
            let normalized = tape.mul(&centered, &inv_std)?;

            // running-stat update outside the tape
            let m = state.momentum;
            let batch_mean = mu.to_vec();
            let batch_var = var.to_vec();
            state.running_mean.update_data(|rm| {
                for (r, &b) in rm.iter_mut().zip(&batch_mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
            });
            state.running_var.update_data(|rv| {
                for (r, &b) in rv.iter_mut().zip(&batch_var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            });

            tape.add(&tape.mul(&normalized, &gamma)?, &beta)
        }
        Mode::Eval => {
            let inv_std: Vec<f64> = state
                .running_var
                .data()
                .iter()
                .map(|&v| 1.0 / (v + state.eps).sqrt())
                .collect();
            let inv_std =
                tape.reshape(&Tensor::from_parts(vec![c], inv_std, false), bshape.clone())?;
            let mean = tape.reshape(&state.running_mean.detach(), bshape)?;
            let scale = tape.mul(&gamma, &inv_std)?;
            let shift = tape.sub(&beta, &tape.mul(&mean, &scale)?)?;
            tape.add(&tape.mul(x, &scale)?, &shift)
        }
    }
}

/// A residual block: two 3x3 conv+bn stages with a 1x1 projection skip when
/// the channel count or stride changes; output relu(main + skip).
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub conv1: Tensor,
    pub bn1: BatchNormState,
    pub conv2: Tensor,
    pub bn2: BatchNormState,
    pub skip: Option<Tensor>,
}

impl ConvBlock {
    pub fn new(init: &mut Init, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let skip = if in_channels != out_channels || stride != 1 {
            Some(init.conv_kernel(out_channels, in_channels, 1, 1))
        } else {
            None
        };
        ConvBlock {
            in_channels,
            out_channels,
            stride,
            conv1: init.conv_kernel(out_channels, in_channels, 3, 3),
            bn1: BatchNormState::new(out_channels),
            conv2: init.conv_kernel(out_channels, out_channels, 3, 3),
            bn2: BatchNormState::new(out_channels),
            skip,
        }
    }

    /// (suffix, tensor) pairs for store registration / checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("conv1".into(), &self.conv1)];
        for (s, t) in self.bn1.named_tensors() {
            out.push((format!("bn1.{s}"), t));
        }
        out.push(("conv2".into(), &self.conv2));
        for (s, t) in self.bn2.named_tensors() {
            out.push((format!("bn2.{s}"), t));
        }
        if let Some(skip) = &self.skip {
            out.push(("skip".into(), skip));
        }
        out
    }
}

/// Structurally identical block with value-equal, storage-independent
/// parameters and running stats.
pub fn clone_block(block: &ConvBlock) -> ConvBlock {
    ConvBlock {
        in_channels: block.in_channels,
        out_channels: block.out_channels,
        stride: block.stride,
        conv1: block.conv1.deep_clone(),
        bn1: block.bn1.deep_clone(),
        conv2: block.conv2.deep_clone(),
        bn2: block.bn2.deep_clone(),
        skip: block.skip.as_ref().map(|t| t.deep_clone()),
    }
}

pub fn conv_block_forward(
    tape: &Tape,
    x: &Tensor,
    block: &ConvBlock,
    mode: Mode,
) -> Result<Tensor> {
    if x.rank() != 4 || x.shape()[1] != block.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv block expects [N,{},H,W], got {:?}",
            block.in_channels,
            x.shape()
        )));
    }
    let h = tape.conv2d(x, &block.conv1, block.stride, 1)?;
    let h = batchnorm_forward(tape, &h, &block.bn1, mode)?;
    let h = tape.relu(&h)?;
    let h = tape.conv2d(&h, &block.conv2, 1, 1)?;
    let h = batchnorm_forward(tape, &h, &block.bn2, mode)?;
    let s = match &block.skip {
        Some(kernel) => tape.conv2d(x, kernel, block.stride, 0)?,
        None => x.clone(),
    };
    tape.relu(&tape.add(&h, &s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn rand_vals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        let mut a = Init::new(7);
        let mut b = Init::new(7);
        let ka = a.conv_kernel(4, 3, 3, 3);
        let kb = b.conv_kernel(4, 3, 3, 3);
        assert_eq!(ka.to_vec(), kb.to_vec());

        let mut c = Init::new(8);
        let kc = c.conv_kernel(4, 3, 3, 3);
        assert_ne!(ka.to_vec(), kc.to_vec());
    }

    #[test]
    fn he_variance_within_ten_percent() {
        let mut init = Init::new(42);
        // 11520 samples with fan_in = 9 * 16 = 144
        let k = init.conv_kernel(80, 16, 3, 3);
        let vals = k.to_vec();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let want = 2.0 / 144.0;
        assert!(
            (var - want).abs() / want < 0.10,
            "var {var} vs expected {want}"
        );
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let tape = Tape::no_grad();
        // large input variance so the eps term in 1/sqrt(var+eps) is negligible
        let vals: Vec<f64> = rand_vals(48, 1).iter().map(|v| v * 10.0).collect();
        let x = Tensor::new(vec![4, 3, 2, 2], vals, false).unwrap();
        let bn = BatchNormState::new(3);
        let y = batchnorm_forward(&tape, &x, &bn, Mode::Train).unwrap();
        let yd = y.to_vec();
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for p in 0..4 {
                    vals.push(yd[n * 12 + c * 4 + p]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / 16.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_identity_with_unit_stats() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5], false).unwrap();
        let bn = BatchNormState::new(3);
        let y = batchnorm_forward(&tape, &x, &bn, Mode::Eval).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let tape = Tape::no_grad();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0], false).unwrap();
        let bn = BatchNormState::new(3);
        assert!(matches!(
            batchnorm_forward(&tape, &x, &bn, Mode::Train),
            Err(Error::DegenerateBatch(_))
        ));
        // eval mode is fine with a single sample
        assert!(batchnorm_forward(&tape, &x, &bn, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_train_gradient() {
        let x = Tensor::new(vec![3, 2, 2, 2], rand_vals(24, 5), false).unwrap();
        let weights = Tensor::new(vec![3, 2, 2, 2], rand_vals(24, 6), false).unwrap();
        let err = grad_check(
            |tape, xx| {
                let bn = BatchNormState::new(2);
                let y = batchnorm_forward(tape, xx, &bn, Mode::Train)?;
                tape.sum_all(&tape.mul(&y, &weights)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn conv_block_zero_params_zero_output() {
        let tape = Tape::no_grad();
        let mut init = Init::new(0);
        let block = ConvBlock::new(&mut init, 2, 4, 1);
        block.conv1.update_data(|d| d.fill(0.0));
        block.conv2.update_data(|d| d.fill(0.0));
        if let Some(skip) = &block.skip {
            skip.update_data(|d| d.fill(0.0));
        }
        let x = Tensor::zeros(vec![2, 2, 4, 4]);
        let y = conv_block_forward(&tape, &x, &block, Mode::Eval).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_block_stride_two_shapes() {
        let tape = Tape::no_grad();
        let mut init = Init::new(3);
        let block = ConvBlock::new(&mut init, 16, 32, 2);
        let x = Tensor::new(vec![1, 16, 8, 8], rand_vals(1024, 9), false).unwrap();
        let y = conv_block_forward(&tape, &x, &block, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 32, 4, 4]);
    }

    #[test]
    fn conv_block_channel_mismatch() {
        let tape = Tape::no_grad();
        let mut init = Init::new(4);
        let block = ConvBlock::new(&mut init, 16, 32, 1);
        let x = Tensor::zeros(vec![1, 8, 4, 4]);
        assert!(matches!(
            conv_block_forward(&tape, &x, &block, Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv_block_gradient() {
        let mut init = Init::new(11);
        let block = ConvBlock::new(&mut init, 2, 4, 2);
        let x = Tensor::new(vec![2, 2, 4, 4], rand_vals(64, 13), false).unwrap();
        let weights = Tensor::new(vec![2, 4, 2, 2], rand_vals(32, 14), false).unwrap();
        let err = grad_check(
            |tape, xx| {
                let y = conv_block_forward(tape, xx, &block, Mode::Train)?;
                tape.sum_all(&tape.mul(&y, &weights)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn clone_block_value_equal_then_independent() {
        let tape = Tape::no_grad();
        let mut init = Init::new(21);
        let block = ConvBlock::new(&mut init, 3, 8, 1);
        let clone = clone_block(&block);
        let x = Tensor::new(vec![1, 3, 4, 4], rand_vals(48, 22), false).unwrap();
        let y0 = conv_block_forward(&tape, &x, &block, Mode::Eval).unwrap();
        let y1 = conv_block_forward(&tape, &x, &clone, Mode::Eval).unwrap();
        assert_eq!(y0.to_vec(), y1.to_vec());

        // a step on the clone leaves the original untouched
        let before = block.conv1.to_vec();
        clone
            .conv1
            .update_data(|d| d.iter_mut().for_each(|v| *v += 1.0));
        assert_eq!(block.conv1.to_vec(), before);

        // second-generation clones are mutually independent too
        let clone2 = clone_block(&clone);
        clone2.conv2.update_data(|d| d[0] += 5.0);
        assert_ne!(clone.conv2.to_vec()[0], clone2.conv2.to_vec()[0]);
        assert_eq!(block.conv2.to_vec()[0], clone.conv2.to_vec()[0]);
    }

    #[test]
    fn residual_identity_with_zero_main_path() {
        let tape = Tape::no_grad();
        let mut init = Init::new(31);
        let block = ConvBlock::new(&mut init, 2, 4, 1);
        block.conv2.update_data(|d| d.fill(0.0));
        let x = Tensor::new(vec![1, 2, 3, 3], rand_vals(18, 33), false).unwrap();
        let y = conv_block_forward(&tape, &x, &block, Mode::Eval).unwrap();
        let skip = tape.conv2d(&x, block.skip.as_ref().unwrap(), 1, 0).unwrap();
        let want = tape.relu(&skip).unwrap();
        assert_eq!(y.to_vec(), want.to_vec());
    }
}
