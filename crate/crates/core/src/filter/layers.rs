//! Minimal differentiable layers with hand-written reverse passes.
//!
//! Activations are channel-major: a `channels x len` block is stored as
//! `channels` contiguous rows of `len` samples.

use rand::Rng;

use crate::error::{NsfError, Result};

/// A trainable tensor and its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Pointwise linear map `y = W x + b` applied at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Param::zeros(&[out, inp]),
            bias: Param::zeros(&[out]),
        }
    }

    pub fn uniform<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(&[out, inp], inp, rng),
            bias: Param::zeros(&[out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[f64], len: usize) -> Vec<f64> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        debug_assert_eq!(x.len(), inp * len);
        let mut y = vec![0.0; out * len];
        for o in 0..out {
            let row = &mut y[o * len..(o + 1) * len];
            row.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for i in 0..inp {
                let w = self.weight.value[o * inp + i];
                if w == 0.0 {
                    continue;
                }
                for (yv, xv) in row.iter_mut().zip(&x[i * len..(i + 1) * len]) {
                    *yv += w * xv;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], len: usize, dy: &[f64]) -> Vec<f64> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let mut dx = vec![0.0; inp * len];
        for o in 0..out {
            let dyo = &dy[o * len..(o + 1) * len];
            self.bias.grad[o] += dyo.iter().sum::<f64>();
            for i in 0..inp {
                let xi = &x[i * len..(i + 1) * len];
                self.weight.grad[o * inp + i] += dyo.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                let w = self.weight.value[o * inp + i];
                for (d, g) in dx[i * len..(i + 1) * len].iter_mut().zip(dyo) {
                    *d += w * g;
                }
            }
        }
        dx
    }

    pub fn macs(&self, len: usize) -> u64 {
        (self.out_dim() * self.in_dim() * len) as u64
    }
}

/// Centered, zero-padded dilated 1-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedConv {
    /// `[out, in, width]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
    pub dilation: usize,
}

impl DilatedConv {
    pub fn uniform<R: Rng>(out: usize, inp: usize, width: usize, dilation: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(&[out, inp, width], inp * width, rng),
            bias: Param::zeros(&[out]),
            dilation,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.weight.shape[0], self.weight.shape[1], self.weight.shape[2])
    }

    /// Offset of tap `k` relative to the output sample.
    fn offset(&self, k: usize, width: usize) -> isize {
        (k as isize - (width / 2) as isize) * self.dilation as isize
    }

    pub fn forward(&self, x: &[f64], len: usize) -> Vec<f64> {
        let (out, inp, width) = self.dims();
        let mut y = vec![0.0; out * len];
        for o in 0..out {
            let row = &mut y[o * len..(o + 1) * len];
            row.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for i in 0..inp {
                let xi = &x[i * len..(i + 1) * len];
                for k in 0..width {
                    let w = self.weight.value[(o * inp + i) * width + k];
                    let (dst, src) = shifted(row, xi, self.offset(k, width));
                    for (yv, xv) in dst.iter_mut().zip(src) {
                        *yv += w * xv;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &[f64], len: usize, dy: &[f64]) -> Vec<f64> {
        let (out, inp, width) = self.dims();
        let mut dx = vec![0.0; inp * len];
        for o in 0..out {
            let dyo = &dy[o * len..(o + 1) * len];
            self.bias.grad[o] += dyo.iter().sum::<f64>();
            for i in 0..inp {
                let xi = &x[i * len..(i + 1) * len];
                for k in 0..width {
                    let idx = (o * inp + i) * width + k;
                    let off = self.offset(k, width);
                    let (g, src) = shifted_ref(dyo, xi, off);
                    self.weight.grad[idx] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    let w = self.weight.value[idx];
                    let (g, dst) = shifted_mut(dyo, &mut dx[i * len..(i + 1) * len], off);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += w * gv;
                    }
                }
            }
        }
        dx
    }

    pub fn macs(&self, len: usize) -> u64 {
        let (out, inp, width) = self.dims();
        (out * inp * width * len) as u64
    }
}

// Aligns y[t] with x[t + off] over the valid range.
fn shifted<'a, 'b>(y: &'a mut [f64], x: &'b [f64], off: isize) -> (&'a mut [f64], &'b [f64]) {
    let len = y.len();
    let shift = off.unsigned_abs().min(len);
    if off >= 0 {
        (&mut y[..len - shift], &x[shift..])
    } else {
        (&mut y[shift..], &x[..len - shift])
    }
}

fn shifted_ref<'a, 'b>(y: &'a [f64], x: &'b [f64], off: isize) -> (&'a [f64], &'b [f64]) {
    let len = y.len();
    let shift = off.unsigned_abs().min(len);
    if off >= 0 {
        (&y[..len - shift], &x[shift..])
    } else {
        (&y[shift..], &x[..len - shift])
    }
}

fn shifted_mut<'a, 'b>(y: &'a [f64], x: &'b mut [f64], off: isize) -> (&'a [f64], &'b mut [f64]) {
    let len = y.len();
    let shift = off.unsigned_abs().min(len);
    if off >= 0 {
        (&y[..len - shift], &mut x[shift..])
    } else {
        (&y[shift..], &mut x[..len - shift])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output of a gated activation plus the two branch activations needed for
/// the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gated {
    pub out: Vec<f64>,
    pub tanh: Vec<f64>,
    pub sigm: Vec<f64>,
}

/// `tanh(z[:C]) * sigmoid(z[C:])` for a `2C x len` pre-activation.
pub fn gated_activation(z: &[f64], channels: usize, len: usize) -> Gated {
    let half = channels * len;
    debug_assert_eq!(z.len(), 2 * half);
    let tanh: Vec<f64> = z[..half].iter().map(|v| v.tanh()).collect();
    let sigm: Vec<f64> = z[half..].iter().map(|&v| sigmoid(v)).collect();
    let out = tanh.iter().zip(&sigm).map(|(a, b)| a * b).collect();
    Gated { out, tanh, sigm }
}

/// Reverse pass of [`gated_activation`]: `dL/dz` from `dL/dout`.
pub fn gated_backward(g: &Gated, dout: &[f64]) -> Vec<f64> {
    let half = g.tanh.len();
    let mut dz = vec![0.0; 2 * half];
    for i in 0..half {
        let (t, s, d) = (g.tanh[i], g.sigm[i], dout[i]);
        dz[i] = d * s * (1.0 - t * t);
        dz[half + i] = d * t * s * (1.0 - s);
    }
    dz
}

/// Gated merge of a `len x 2C` convolution output with `len x 2C` condition
/// features (time-major, as handed over by callers outside the model).
pub fn gated_merge(conv_out: &[f64], cond: &[f64], len: usize) -> Result<Vec<f64>> {
    if conv_out.len() != cond.len() || len == 0 || !conv_out.len().is_multiple_of(len) {
        return Err(NsfError::ShapeMismatch(format!(
            "conv output {} vs condition {} values for {len} steps",
            conv_out.len(),
            cond.len()
        )));
    }
    let width = conv_out.len() / len;
    if !width.is_multiple_of(2) {
        return Err(NsfError::InvalidArgument(format!("gated merge needs an even channel count, got {width}")));
    }
    let c = width / 2;
    let mut out = Vec::with_capacity(len * c);
    for t in 0..len {
        let z = |j: usize| conv_out[t * width + j] + cond[t * width + j];
        out.extend((0..c).map(|j| z(j).tanh() * sigmoid(z(c + j))));
    }
    Ok(out)
}

/// Dilated convolution on a time-major `len x in` signal with an
/// `[out, in, width]` kernel; zero bias.
pub fn dilated_conv_forward(
    x: &[f64],
    len: usize,
    kernel: &[f64],
    shape: [usize; 3],
    dilation: usize,
) -> Result<Vec<f64>> {
    let [out, inp, width] = shape;
    if dilation == 0 {
        return Err(NsfError::InvalidArgument("dilation must be at least 1".into()));
    }
    if kernel.len() != out * inp * width || x.len() != len * inp || width % 2 == 0 {
        return Err(NsfError::ShapeMismatch(format!(
            "kernel {:?} ({} values) against input {} values over {len} steps",
            shape,
            kernel.len(),
            x.len()
        )));
    }
    let conv = DilatedConv {
        weight: Param {
            shape: shape.to_vec(),
            value: kernel.to_vec(),
            grad: vec![0.0; kernel.len()],
        },
        bias: Param::zeros(&[out]),
        dilation,
    };
    let y = conv.forward(&to_channel_major(x, len, inp), len);
    Ok(to_time_major(&y, len, out))
}

pub fn to_channel_major(x: &[f64], len: usize, channels: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for t in 0..len {
        for c in 0..channels {
            y[c * len + t] = x[t * channels + c];
        }
    }
    y
}

pub fn to_time_major(x: &[f64], len: usize, channels: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for c in 0..channels {
        for t in 0..len {
            y[t * channels + c] = x[c * len + t];
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn nested_loop_conv(x: &[f64], len: usize, k: &[f64], [out, inp, width]: [usize; 3], d: usize) -> Vec<f64> {
        let mut y = vec![0.0; len * out];
        for t in 0..len as isize {
            for o in 0..out {
                let mut acc = 0.0;
                for i in 0..inp {
                    for j in 0..width {
                        let src = t + (j as isize - (width / 2) as isize) * d as isize;
                        if src >= 0 && src < len as isize {
                            acc += k[(o * inp + i) * width + j] * x[src as usize * inp + i];
                        }
                    }
                }
                y[t as usize * out + o] = acc;
            }
        }
        y
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_vec(&mut rng, 20 * 2);
        // centre tap identity on 2 channels
        let mut k = vec![0.0; 2 * 2 * 3];
        k[1] = 1.0;
        k[(2 + 1) * 3 + 1] = 1.0;
        let y = dilated_conv_forward(&x, 20, &k, [2, 2, 3], 4).unwrap();
        assert_eq!(y, x);
        let z = dilated_conv_forward(&vec![0.0; 40], 20, &rand_vec(&mut rng, 12), [2, 2, 3], 2).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(dilated_conv_forward(&x, 20, &k, [2, 2, 3], 0).is_err());
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (len, d) in [(17usize, 1usize), (33, 4), (10, 16)] {
            let shape = [5, 3, 3];
            let x = rand_vec(&mut rng, len * 3);
            let k = rand_vec(&mut rng, 45);
            let y = dilated_conv_forward(&x, len, &k, shape, d).unwrap();
            let o = nested_loop_conv(&x, len, &k, shape, d);
            for (a, b) in y.iter().zip(&o) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gated_merge_limits() {
        let z = gated_merge(&[0.0; 8], &[0.0; 8], 2).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let conv = [0.3, 50.0];
        let y = gated_merge(&conv, &[0.0, 0.0], 1).unwrap();
        assert!((y[0] - 0.3f64.tanh()).abs() < 1e-15);
        assert!(gated_merge(&[0.0; 3], &[0.0; 3], 1).is_err());
    }

    fn check_fd(analytic: f64, f_plus: f64, f_minus: f64, h: f64, what: &str) {
        let fd = (f_plus - f_minus) / (2.0 * h);
        let tol = 1e-5 * fd.abs().max(analytic.abs()).max(1e-2);
        assert!((fd - analytic).abs() <= tol, "{what}: analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn conv_and_dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let len = 12;
        let conv = DilatedConv::uniform(4, 2, 3, 2, &mut rng);
        let dense = Dense::uniform(3, 4, &mut rng);
        let x = rand_vec(&mut rng, 2 * len);
        let r = rand_vec(&mut rng, 3 * len);
        let loss = |c: &DilatedConv, d: &Dense, x: &[f64]| -> f64 {
            let h: Vec<f64> = c.forward(x, len).iter().map(|v| v.tanh()).collect();
            d.forward(&h, len).iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (mut c2, mut d2) = (conv.clone(), dense.clone());
        let pre = c2.forward(&x, len);
        let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let dh = d2.backward(&h, len, &r);
        let dpre: Vec<f64> = dh.iter().zip(&h).map(|(g, t)| g * (1.0 - t * t)).collect();
        let dx = c2.backward(&x, len, &dpre);
        let step = 1e-6;
        for i in 0..conv.weight.len() {
            let (mut p, mut m) = (conv.clone(), conv.clone());
            p.weight.value[i] += step;
            m.weight.value[i] -= step;
            check_fd(c2.weight.grad[i], loss(&p, &dense, &x), loss(&m, &dense, &x), step, "conv w");
        }
        for i in 0..dense.weight.len() {
            let (mut p, mut m) = (dense.clone(), dense.clone());
            p.weight.value[i] += step;
            m.weight.value[i] -= step;
            check_fd(d2.weight.grad[i], loss(&conv, &p, &x), loss(&conv, &m, &x), step, "dense w");
        }
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += step;
            m[i] -= step;
            check_fd(dx[i], loss(&conv, &dense, &p), loss(&conv, &dense, &m), step, "input");
        }
    }

    #[test]
    fn gated_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, len) = (3, 7);
        let z = rand_vec(&mut rng, 2 * c * len);
        let r = rand_vec(&mut rng, c * len);
        let loss = |z: &[f64]| -> f64 { gated_activation(z, c, len).out.iter().zip(&r).map(|(a, b)| a * b).sum() };
        let g = gated_activation(&z, c, len);
        let dz = gated_backward(&g, &r);
        let step = 1e-6;
        for i in 0..z.len() {
            let (mut p, mut m) = (z.clone(), z.clone());
            p[i] += step;
            m[i] -= step;
            check_fd(dz[i], loss(&p), loss(&m), step, "gate");
        }
    }
}
