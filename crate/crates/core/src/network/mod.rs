//! The classifier: parameters, forward passes, input gradients and the SGD step.

mod arch;

pub use arch::{ArchitectureSpec, ConvBlockSpec, Reduction, KERNEL, MAX_CHANNELS_FACTOR, PADDING};

use std::path::Path;

use rand::Rng;

use crate::dataio::checkpoint;
use crate::error::{Error, Result};
use crate::volgrad::kernels::{self, BatchMoments, BN_EPSILON, BN_MOMENTUM};
use crate::volgrad::{he_init, sgd_step, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// conv -> batch norm -> leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: ArchitectureSpec,
    blocks: Vec<Vec<ConvUnit<T>>>,
    fc: Vec<FcLayer<T>>,
    mode: Mode,
}

/// Largest batch pushed through one inference tape.
const INFERENCE_CHUNK: usize = 16;

struct Recorded<T> {
    logits: Var,
    params: Vec<Var>,
    moments: Vec<Option<BatchMoments<T>>>,
}

impl<T: Scalar> Network<T> {
    /// He-initialized weights, zero biases, unit batch-norm scale, running stats (0, 1).
    pub fn build<R: Rng + ?Sized>(spec: ArchitectureSpec, rng: &mut R) -> Result<Self> {
        spec.block_extents()?;
        let slope = spec.negative_slope;
        let mut blocks = Vec::with_capacity(spec.conv_blocks.len());
        let mut cin = 1;
        for block in &spec.conv_blocks {
            let mut units = Vec::with_capacity(block.sub_blocks);
            for s in 0..block.sub_blocks {
                let cout = block.out_channels;
                let fan_in = cin * KERNEL * KERNEL * KERNEL;
                let stride =
                    if block.reduction == Reduction::StridedConv && s + 1 == block.sub_blocks { 2 } else { 1 };
                units.push(ConvUnit {
                    weight: he_init(&[cout, cin, KERNEL, KERNEL, KERNEL], fan_in, slope, rng)?,
                    bias: Tensor::zeros(&[cout]),
                    gamma: Tensor::full(&[cout], T::one()),
                    beta: Tensor::zeros(&[cout]),
                    running_mean: Tensor::zeros(&[cout]),
                    running_var: Tensor::full(&[cout], T::one()),
                    stride,
                });
                cin = cout;
            }
            blocks.push(units);
        }
        let mut fc = Vec::with_capacity(spec.n_fc_layers);
        let mut fin = spec.flat_features()?;
        for i in 0..spec.n_fc_layers {
            let fout = if i + 1 == spec.n_fc_layers { spec.n_classes } else { spec.fc_hidden };
            fc.push(FcLayer { weight: he_init(&[fout, fin], fin, slope, rng)?, bias: Tensor::zeros(&[fout]) });
            fin = fout;
        }
        Ok(Self { spec, blocks, fc, mode: Mode::Eval })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn blocks(&self) -> &[Vec<ConvUnit<T>>] {
        &self.blocks
    }

    pub fn fc_layers(&self) -> &[FcLayer<T>] {
        &self.fc
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.numel()).sum()
    }

    /// Every stored tensor under a stable unique name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (b, units) in self.blocks.iter().enumerate() {
            for (s, u) in units.iter().enumerate() {
                let p = format!("blocks.{b}.{s}");
                out.push((format!("{p}.conv.weight"), &u.weight));
                out.push((format!("{p}.conv.bias"), &u.bias));
                out.push((format!("{p}.bn.weight"), &u.gamma));
                out.push((format!("{p}.bn.bias"), &u.beta));
                out.push((format!("{p}.bn.running_mean"), &u.running_mean));
                out.push((format!("{p}.bn.running_var"), &u.running_var));
            }
        }
        for (i, l) in self.fc.iter().enumerate() {
            out.push((format!("fc.{i}.weight"), &l.weight));
            out.push((format!("fc.{i}.bias"), &l.bias));
        }
        out
    }

    /// Rebuilds a network from a spec and named tensors (inverse of [`Self::named_tensors`]).
    pub fn from_named_tensors(spec: ArchitectureSpec, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        // shapes come from a throwaway build; values are replaced below
        let mut rng = crate::seed::rng_from_seed(0);
        let mut net = Self::build(spec, &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> =
            net.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if tensors.len() != expected.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} tensors stored, architecture needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        let mut slots = net.named_tensors_mut();
        for (i, (name, shape)) in expected.iter().enumerate() {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {name}")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointFormat(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            *slots[i] = t;
        }
        Ok(net)
    }

    fn named_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for units in &mut self.blocks {
            for u in units {
                out.push(&mut u.weight);
                out.push(&mut u.bias);
                out.push(&mut u.gamma);
                out.push(&mut u.beta);
                out.push(&mut u.running_mean);
                out.push(&mut u.running_var);
            }
        }
        for l in &mut self.fc {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for u in self.blocks.iter().flatten() {
            out.extend([&u.weight, &u.bias, &u.gamma, &u.beta]);
        }
        for l in &self.fc {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for u in self.blocks.iter_mut().flatten() {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
            out.push(&mut u.gamma);
            out.push(&mut u.beta);
        }
        for l in &mut self.fc {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let [d, h, w] = self.spec.input_shape;
        match batch.shape() {
            [n, 1, bd, bh, bw] if [*bd, *bh, *bw] == [d, h, w] => Ok(*n),
            s => Err(Error::dim("network input", format!("got {s:?}, expected [N, 1, {d}, {h}, {w}]"))),
        }
    }

    fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        train: bool,
        track_params: bool,
        rng: &mut R,
    ) -> Result<Recorded<T>> {
        let slope = self.spec.negative_slope;
        let mut params = Vec::new();
        let mut moments = Vec::new();
        let mut x = input;
        for (block, units) in self.spec.conv_blocks.iter().zip(&self.blocks) {
            for u in units {
                let w = tape.leaf(u.weight.clone(), track_params);
                let b = tape.leaf(u.bias.clone(), track_params);
                let g = tape.leaf(u.gamma.clone(), track_params);
                let be = tape.leaf(u.beta.clone(), track_params);
                params.extend([w, b, g, be]);
                x = tape.conv3d(x, w, b, u.stride, PADDING)?;
                let (y, m) = tape.batchnorm3d(x, g, be, &u.running_mean, &u.running_var, train, BN_EPSILON)?;
                moments.push(m);
                x = tape.leaky_relu(y, slope)?;
            }
            if block.reduction == Reduction::MaxPool {
                x = tape.maxpool3d(x, 2, 2)?;
            }
        }
        let n = tape.value(x).shape()[0];
        let flat = tape.value(x).numel() / n.max(1);
        x = tape.reshape(x, &[n, flat])?;
        x = tape.dropout(x, self.spec.dropout_rate, train, rng)?;
        for (i, l) in self.fc.iter().enumerate() {
            let w = tape.leaf(l.weight.clone(), track_params);
            let b = tape.leaf(l.bias.clone(), track_params);
            params.extend([w, b]);
            x = tape.linear(x, w, b)?;
            if i + 1 < self.fc.len() {
                x = tape.leaky_relu(x, slope)?;
            }
        }
        Ok(Recorded { logits: x, params, moments })
    }

    fn require_eval(&self, what: &'static str) -> Result<()> {
        match self.mode {
            Mode::Eval => Ok(()),
            Mode::Train => Err(Error::NotEvalMode(what)),
        }
    }

    /// Eval-mode logits `[N, 2]`.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_eval("forward")?;
        let n = self.check_batch(batch)?;
        let per = batch.numel() / n.max(1);
        let mut rng = crate::seed::rng_from_seed(0);
        let mut out = Vec::with_capacity(n * self.spec.n_classes);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let m = INFERENCE_CHUNK.min(n - start);
            let mut shape = batch.shape().to_vec();
            shape[0] = m;
            let chunk = Tensor::new(shape, batch.data()[start * per..(start + m) * per].to_vec())?;
            let mut tape = Tape::new();
            let x = tape.leaf(chunk, false);
            let rec = self.record(&mut tape, x, false, false, &mut rng)?;
            out.extend_from_slice(tape.value(rec.logits).data());
        }
        Tensor::new(vec![n, self.spec.n_classes], out)
    }

    /// Eval-mode class probabilities `[N, 2]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::softmax(&self.logits(batch)?)
    }

    /// Highest-probability class per sample; ties go to the lower index.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?))
    }

    /// Gradient of the mean over the batch of `softmax(f(x))[class]` with respect to
    /// every input voxel. Returns (per-sample probabilities of `class`, gradient).
    pub fn class_probability_gradient(&self, batch: &Tensor<T>, class: usize) -> Result<(Vec<T>, Tensor<T>)> {
        self.require_eval("input gradient")?;
        self.check_batch(batch)?;
        let mut rng = crate::seed::rng_from_seed(0);
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), true);
        let rec = self.record(&mut tape, x, false, false, &mut rng)?;
        let probs = tape.softmax(rec.logits)?;
        let k = self.spec.n_classes;
        let p: Vec<T> = tape.value(probs).data().iter().skip(class).step_by(k).copied().collect();
        let target = tape.class_mean(probs, class)?;
        let mut grads = tape.backward(target)?;
        let g = grads.take(x).unwrap_or_else(|| Tensor::zeros(batch.shape()));
        Ok((p, g))
    }

    /// Gradient of the probability of `class` for a single `[1, 1, D, H, W]` volume.
    pub fn input_gradient(&self, volume: &Tensor<T>, class: usize) -> Result<Tensor<T>> {
        if volume.shape().first() != Some(&1) {
            return Err(Error::dim("input_gradient", format!("expected one volume, got {:?}", volume.shape())));
        }
        Ok(self.class_probability_gradient(volume, class)?.1)
    }

    /// Eval-mode mean cross-entropy and probabilities.
    pub fn evaluate(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        let logits = self.logits(batch)?;
        kernels::softmax_cross_entropy(&logits, labels)
    }

    /// One SGD step on a mini-batch in train mode. Returns the batch loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        learning_rate: f64,
        weight_decay: f64,
        rng: &mut R,
    ) -> Result<T> {
        if self.mode != Mode::Train {
            return Err(Error::InvalidArgument("train_step needs train mode".into()));
        }
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let rec = self.record(&mut tape, x, true, true, rng)?;
        let loss = tape.cross_entropy(rec.logits, labels)?;
        let loss_value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        for (param, var) in self.trainable_mut().into_iter().zip(&rec.params) {
            if let Some(g) = grads.take(*var) {
                sgd_step(param, &g, learning_rate, weight_decay)?;
            }
        }
        for (u, m) in self.blocks.iter_mut().flatten().zip(&rec.moments) {
            if let Some(m) = m {
                kernels::update_running_stats(&mut u.running_mean, &mut u.running_var, m, BN_MOMENTUM);
            }
        }
        Ok(loss_value)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_network(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        checkpoint::load_network(path)
    }
}

/// Row-wise argmax with ties to the lower index.
pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn tiny_spec() -> ArchitectureSpec {
        let mut s = ArchitectureSpec::with_blocks([4, 4, 4], 1, 2);
        s.dropout_rate = 0.0;
        s
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::<f64>::new(vec![3, 2], vec![0.9, 0.1, 0.5, 0.5, 0.2, 0.8]).unwrap();
        assert_eq!(argmax_rows(&p), vec![0, 0, 1]);
    }

    #[test]
    fn build_is_deterministic_and_validates() {
        let spec = ArchitectureSpec::with_blocks([121, 145, 121], 6, 8);
        let a = Network::<f32>::build(spec.clone(), &mut rng_from_seed(1)).unwrap();
        let b = Network::<f32>::build(spec, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a, b);
        assert!(a.parameter_count() > 0);
        let bad = ArchitectureSpec::with_blocks([24, 24, 24], 7, 8);
        assert!(matches!(Network::<f32>::build(bad, &mut rng_from_seed(1)), Err(Error::Architecture(_))));
    }

    #[test]
    fn initial_batchnorm_state() {
        let net = Network::<f64>::build(tiny_spec(), &mut rng_from_seed(2)).unwrap();
        let u = &net.blocks()[0][0];
        assert!(u.gamma.data().iter().all(|&v| v == 1.0));
        assert!(u.beta.data().iter().all(|&v| v == 0.0));
        assert!(u.running_mean.data().iter().all(|&v| v == 0.0));
        assert!(u.running_var.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn names_are_unique() {
        let mut spec = ArchitectureSpec::with_blocks([8, 8, 8], 2, 2);
        spec.conv_blocks[1].sub_blocks = 3;
        spec.n_fc_layers = 2;
        let net = Network::<f32>::build(spec, &mut rng_from_seed(3)).unwrap();
        let names: Vec<_> = net.named_tensors().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn forward_rows_sum_to_one_and_batch_permutes() {
        let net = Network::<f64>::build(tiny_spec(), &mut rng_from_seed(4)).unwrap();
        let a = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64 * 0.11).cos());
        let ab = Tensor::stack(&[&a, &b]).unwrap().reshape(&[2, 1, 4, 4, 4]).unwrap();
        let ba = Tensor::stack(&[&b, &a]).unwrap().reshape(&[2, 1, 4, 4, 4]).unwrap();
        let pab = net.forward(&ab).unwrap();
        let pba = net.forward(&ba).unwrap();
        for r in 0..2 {
            let s: f64 = pab.data()[r * 2..r * 2 + 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(&pab.data()[0..2], &pba.data()[2..4]);
        assert_eq!(&pab.data()[2..4], &pba.data()[0..2]);
    }

    #[test]
    fn train_mode_blocks_inference_and_input_gradient() {
        let mut net = Network::<f32>::build(tiny_spec(), &mut rng_from_seed(5)).unwrap();
        net.set_mode(Mode::Train);
        let x = Tensor::zeros(&[1, 1, 4, 4, 4]);
        assert!(matches!(net.input_gradient(&x, 1), Err(Error::NotEvalMode(_))));
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Network::<f32>::build(tiny_spec(), &mut rng_from_seed(6)).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 1, 4, 4, 5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_weights_give_zero_input_gradient() {
        let mut net = Network::<f64>::build(tiny_spec(), &mut rng_from_seed(7)).unwrap();
        for u in net.blocks.iter_mut().flatten() {
            u.weight = Tensor::zeros(u.weight.shape());
        }
        for l in &mut net.fc {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let x = Tensor::from_fn(&[1, 1, 4, 4, 4], |i| i as f64 / 64.0);
        let g = net.input_gradient(&x, 1).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_gradients_cancel() {
        let net = Network::<f64>::build(tiny_spec(), &mut rng_from_seed(8)).unwrap();
        let x = Tensor::from_fn(&[1, 1, 4, 4, 4], |i| (i as f64 * 0.7).sin());
        let g0 = net.input_gradient(&x, 0).unwrap();
        let g1 = net.input_gradient(&x, 1).unwrap();
        for (a, b) in g0.data().iter().zip(g1.data()) {
            assert!((a + b).abs() < 1e-6);
        }
    }
}
