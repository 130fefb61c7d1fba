//! Parameter-carrying layers built on the numerics primitives: linear,
//! strided convolution, layer norm, and a single-channel batch norm.
//! Each layer owns [`DualTensor`] parameters and provides a forward pass
//! plus a hand-written backward that accumulates adjoints in place.

use crate::error::{Error, Result};
use crate::numerics::{
    conv2d, conv2d_backward, layer_norm_backward, layer_norm_with_cache, matmul, transpose2d,
    DualTensor, Element, LayerNormCache, Tensor,
};
use crate::tally;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Walks a parameter tree with stable names (checkpoint order) and over
/// learnable leaves (optimizer order). Buffers such as batch-norm
/// running statistics appear in the tensor walk but not the learnable
/// walk.
pub trait ParamVisit<E: Element> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>));
    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>));
    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>));
    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>));
}

/// Number of learnable scalars in a parameter tree.
pub fn learnable_count<E: Element>(p: &impl ParamVisit<E>) -> usize {
    let mut n = 0;
    p.visit_learnables(&mut |d| n += d.numel());
    n
}

/// Reset every adjoint in a parameter tree to zero.
pub fn zero_grads<E: Element>(p: &mut impl ParamVisit<E>) {
    p.visit_learnables_mut(&mut |d| d.zero_grad());
}

pub fn xavier_uniform<E: Element>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = E::from_f64(rng.random_range(-a..a));
    }
    t
}

/// Affine map `y = x·W + b` over rows of a `[N, D_in]` tensor.
#[derive(Debug, Clone)]
pub struct LinearParams<E: Element> {
    /// `[D_in, D_out]`
    pub weight: DualTensor<E>,
    /// `[D_out]`
    pub bias: DualTensor<E>,
}

impl<E: Element> LinearParams<E> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearParams {
            weight: DualTensor::new(Tensor::zeros(&[d_in, d_out])),
            bias: DualTensor::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            weight: DualTensor::new(xavier_uniform(&[d_in, d_out], d_in, d_out, rng)),
            bias: DualTensor::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 2 || x.shape()[1] != self.d_in() {
            return Err(Error::dim(format!(
                "linear expects [N, {}], got {:?}",
                self.d_in(),
                x.shape()
            )));
        }
        let mut y = matmul(x, &self.weight.value)?;
        let d_out = self.d_out();
        for row in y.data_mut().chunks_mut(d_out) {
            for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                *v = *v + b;
            }
        }
        tally::add((x.shape()[0] * d_out) as u128);
        Ok(y)
    }

    /// Accumulates weight/bias adjoints and returns `dx`.
    pub fn backward(&mut self, x: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
        let xt = transpose2d(x)?;
        let dw = matmul(&xt, dy)?;
        self.weight.grad.accumulate(&dw)?;
        let d_out = self.d_out();
        for row in dy.data().chunks(d_out) {
            for (g, &v) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *g = *g + v;
            }
        }
        let wt = transpose2d(&self.weight.value)?;
        matmul(dy, &wt)
    }
}

impl<E: Element> ParamVisit<E> for LinearParams<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.weight"), &self.weight.value);
        f(format!("{prefix}.bias"), &self.bias.value);
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.weight"), &mut self.weight.value);
        f(format!("{prefix}.bias"), &mut self.bias.value);
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Square-kernel strided convolution applied to each frame of a
/// `[T, C_in, H, W]` stack independently.
#[derive(Debug, Clone)]
pub struct Conv2dParams<E: Element> {
    /// `[C_out, C_in, k, k]`
    pub weight: DualTensor<E>,
    /// `[C_out]`
    pub bias: DualTensor<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Element> Conv2dParams<E> {
    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2dParams {
            weight: DualTensor::new(Tensor::zeros(&[c_out, c_in, k, k])),
            bias: DualTensor::new(Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        Conv2dParams {
            weight: DualTensor::new(xavier_uniform(&[c_out, c_in, k, k], fan_in, fan_out, rng)),
            bias: DualTensor::new(Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward_frames(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::dim(format!(
                "conv frames expect [T,C,H,W], got {:?}",
                x.shape()
            )));
        }
        let t = x.shape()[0];
        let frame_elems: usize = x.shape()[1..].iter().product();
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let frame = Tensor::from_vec(
                &x.shape()[1..],
                x.data()[ti * frame_elems..(ti + 1) * frame_elems].to_vec(),
            )?;
            frames.push(conv2d(
                &frame,
                &self.weight.value,
                &self.bias.value,
                self.stride,
                self.pad,
            )?);
        }
        let out_frame_shape = frames[0].shape().to_vec();
        let mut shape = vec![t];
        shape.extend_from_slice(&out_frame_shape);
        let mut data = Vec::with_capacity(t * frames[0].numel());
        for f in frames {
            data.extend_from_slice(f.data());
        }
        Tensor::from_vec(&shape, data)
    }

    /// Accumulates adjoints and returns `dx` with the input's shape.
    pub fn backward_frames(&mut self, x: &Tensor<E>, dout: &Tensor<E>) -> Result<Tensor<E>> {
        let t = x.shape()[0];
        let in_elems: usize = x.shape()[1..].iter().product();
        let out_elems: usize = dout.shape()[1..].iter().product();
        let mut dx = x.zeros_like();
        for ti in 0..t {
            let frame = Tensor::from_vec(
                &x.shape()[1..],
                x.data()[ti * in_elems..(ti + 1) * in_elems].to_vec(),
            )?;
            let dframe = Tensor::from_vec(
                &dout.shape()[1..],
                dout.data()[ti * out_elems..(ti + 1) * out_elems].to_vec(),
            )?;
            let (dxi, dwi, dbi) =
                conv2d_backward(&frame, &self.weight.value, self.stride, self.pad, &dframe)?;
            self.weight.grad.accumulate(&dwi)?;
            self.bias.grad.accumulate(&dbi)?;
            dx.data_mut()[ti * in_elems..(ti + 1) * in_elems].copy_from_slice(dxi.data());
        }
        Ok(dx)
    }
}

impl<E: Element> ParamVisit<E> for Conv2dParams<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.weight"), &self.weight.value);
        f(format!("{prefix}.bias"), &self.bias.value);
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.weight"), &mut self.weight.value);
        f(format!("{prefix}.bias"), &mut self.bias.value);
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Layer norm over the channel axis with learnable affine.
#[derive(Debug, Clone)]
pub struct LayerNormParams<E: Element> {
    pub gamma: DualTensor<E>,
    pub beta: DualTensor<E>,
    pub eps: f64,
}

impl<E: Element> LayerNormParams<E> {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: DualTensor::new(Tensor::filled(&[d], E::one())),
            beta: DualTensor::new(Tensor::zeros(&[d])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        crate::numerics::layer_norm(x, &self.gamma.value, &self.beta.value, self.eps)
    }

    pub fn forward_with_cache(&self, x: &Tensor<E>) -> Result<(Tensor<E>, LayerNormCache<E>)> {
        layer_norm_with_cache(x, &self.gamma.value, &self.beta.value, self.eps)
    }

    pub fn backward(&mut self, cache: &LayerNormCache<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
        let (dx, dgamma, dbeta) = layer_norm_backward(cache, &self.gamma.value, dy)?;
        self.gamma.grad.accumulate(&dgamma)?;
        self.beta.grad.accumulate(&dbeta)?;
        Ok(dx)
    }
}

impl<E: Element> ParamVisit<E> for LayerNormParams<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.gamma"), &self.gamma.value);
        f(format!("{prefix}.beta"), &self.beta.value);
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma.value);
        f(format!("{prefix}.beta"), &mut self.beta.value);
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Whether normalization layers use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Single-channel batch norm over a flat batch of scalars, as used by
/// the channel-reducing projection in differential attention.
#[derive(Debug, Clone)]
pub struct BatchNormScalar<E: Element> {
    pub gamma: DualTensor<E>,
    pub beta: DualTensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache<E: Element> {
    pub xhat: Tensor<E>,
    pub invstd: E,
    pub mode: Mode,
    /// Batch statistics from the forward pass (train mode), for an
    /// explicit running-stats update step.
    pub batch_mean: E,
    pub batch_var: E,
}

impl<E: Element> BatchNormScalar<E> {
    pub fn identity() -> Self {
        BatchNormScalar {
            gamma: DualTensor::new(Tensor::filled(&[1], E::one())),
            beta: DualTensor::new(Tensor::zeros(&[1])),
            running_mean: Tensor::zeros(&[1]),
            running_var: Tensor::filled(&[1], E::one()),
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        }
    }

    /// Pure forward; running statistics are NOT updated here (see
    /// [`BatchNormScalar::update_running`]).
    pub fn forward(&self, z: &Tensor<E>, mode: Mode) -> Result<(Tensor<E>, BatchNormCache<E>)> {
        let m = z.numel();
        if m == 0 {
            return Err(Error::dim("batch norm over empty batch".to_string()));
        }
        let eps = E::from_f64(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let inv_m = E::from_f64(1.0 / m as f64);
                let mut mean = E::zero();
                for &v in z.data() {
                    mean = mean + v;
                }
                mean = mean * inv_m;
                let mut var = E::zero();
                for &v in z.data() {
                    let c = v - mean;
                    var = var + c * c;
                }
                (mean, var * inv_m)
            }
            Mode::Eval => (self.running_mean.data()[0], self.running_var.data()[0]),
        };
        let invstd = (var + eps).sqrt().recip();
        let g = self.gamma.value.data()[0];
        let b = self.beta.value.data()[0];
        let xhat = z.map(|v| (v - mean) * invstd);
        let y = xhat.map(|h| h * g + b);
        tally::add(4 * m as u128);
        y.ensure_finite("batch_norm")?;
        Ok((
            y,
            BatchNormCache {
                xhat,
                invstd,
                mode,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BatchNormCache<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
        let m = dy.numel();
        let g = self.gamma.value.data()[0];
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for (&d, &h) in dy.data().iter().zip(cache.xhat.data()) {
            sum_dy = sum_dy + d;
            sum_dy_xhat = sum_dy_xhat + d * h;
        }
        self.gamma.grad.data_mut()[0] = self.gamma.grad.data_mut()[0] + sum_dy_xhat;
        self.beta.grad.data_mut()[0] = self.beta.grad.data_mut()[0] + sum_dy;
        let mut dz = dy.zeros_like();
        match cache.mode {
            Mode::Train => {
                let inv_m = E::from_f64(1.0 / m as f64);
                for ((&d, &h), o) in dy
                    .data()
                    .iter()
                    .zip(cache.xhat.data())
                    .zip(dz.data_mut())
                {
                    let dxhat = d * g;
                    *o = cache.invstd * (dxhat - inv_m * g * sum_dy - h * inv_m * g * sum_dy_xhat);
                }
            }
            Mode::Eval => {
                for (&d, o) in dy.data().iter().zip(dz.data_mut()) {
                    *o = d * g * cache.invstd;
                }
            }
        }
        Ok(dz)
    }

    /// Fold the batch statistics of one training forward into the
    /// running statistics (momentum update, unbiased variance).
    pub fn update_running(&mut self, cache: &BatchNormCache<E>, batch_elems: usize) {
        let mom = E::from_f64(self.momentum);
        let keep = E::from_f64(1.0 - self.momentum);
        let unbias = if batch_elems > 1 {
            E::from_f64(batch_elems as f64 / (batch_elems - 1) as f64)
        } else {
            E::one()
        };
        let rm = self.running_mean.data_mut();
        rm[0] = keep * rm[0] + mom * cache.batch_mean;
        let rv = self.running_var.data_mut();
        rv[0] = keep * rv[0] + mom * cache.batch_var * unbias;
    }
}

impl<E: Element> ParamVisit<E> for BatchNormScalar<E> {
    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.gamma"), &self.gamma.value);
        f(format!("{prefix}.beta"), &self.beta.value);
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma.value);
        f(format!("{prefix}.beta"), &mut self.beta.value);
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }

    fn visit_learnables(&self, f: &mut dyn FnMut(&DualTensor<E>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_learnables_mut(&mut self, f: &mut dyn FnMut(&mut DualTensor<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_forward_matches_manual() {
        let mut p = LinearParams::<f64>::zeros(2, 2);
        p.weight.value = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        p.bias.value = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.5, 5.5]);
    }

    #[test]
    fn batch_norm_eval_identity_at_init() {
        let bn = BatchNormScalar::<f64>::identity();
        let z = Tensor::from_vec(&[4], vec![0.3, -0.1, 0.0, 0.7]).unwrap();
        let (y, _) = bn.forward(&z, Mode::Eval).unwrap();
        // running mean 0, var 1 -> y ~ z / sqrt(1 + eps)
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b / (1.0f64 + BATCH_NORM_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = xavier_uniform::<f64>(&[3, 3], 3, 3, &mut r1);
        let b = xavier_uniform::<f64>(&[3, 3], 3, 3, &mut r2);
        assert_eq!(a.data(), b.data());
    }
}
