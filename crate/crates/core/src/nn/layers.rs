use alloc::vec;
use alloc::vec::Vec;

use super::{add_channel_bias, channel_sums, matmul, Mat, Module, Param, Real};
use crate::rng::Rng;

/// 2-D convolution with square kernel (1 or 3), zero padding `k / 2` and
/// stride 1 or 2.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights scaled by `gain`, zero bias.
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, gain: f64, rng: &mut Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = cin * kernel * kernel;
        let std = gain * libm_sqrt(2.0 / fan_in as f64);
        Self {
            cin,
            cout,
            kernel,
            stride,
            weight: Param::normal(alloc::format!("{name}.weight"), cout * fan_in, std, rng),
            bias: Param::zeros(alloc::format!("{name}.bias"), cout),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        ((h + 2 * pad - self.kernel) / self.stride + 1, (w + 2 * pad - self.kernel) / self.stride + 1)
    }

    /// Multiply-accumulate count of one forward pass at input size `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (ho, wo) = self.output_size(h, w);
        self.cout * self.cin * self.kernel * self.kernel * ho * wo
    }

    /// Output columns `ox` whose input column `ox·stride + kx - pad` is inside `0..w`.
    fn valid_columns(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        let lo = pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = ((w + pad - kx + self.stride - 1) / self.stride).min(wo);
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let (ho, wo) = self.output_size(h, w);
        if self.kernel == 1 && self.stride == 1 {
            return (x.to_vec(), ho, wo);
        }
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let n = ho * wo;
        let mut cols = vec![T::zero(); self.cin * k * k * n];
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * wo..][..wo];
                        let (lo, hi) = self.valid_columns(kx, w, wo);
                        if self.stride == 1 {
                            let off = (lo as isize + kx as isize - pad) as usize;
                            dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src[(ox * self.stride + kx) - pad as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        if self.kernel == 1 && self.stride == 1 {
            return cols.to_vec();
        }
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let n = ho * wo;
        let mut x = vec![T::zero(); self.cin * h * w];
        for c in 0..self.cin {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * wo..][..wo];
                        let (lo, hi) = self.valid_columns(kx, w, wo);
                        for ox in lo..hi {
                            dst[ox * self.stride + kx - pad as usize] += src[ox];
                        }
                    }
                }
            }
        }
        x
    }

    /// Forward pass on `x[cin, h·w]`; returns `y[cout, ho·wo]`.
    pub fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, ConvCache<T>) {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let (cols, ho, wo) = self.im2col(x, h, w);
        let n = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let mut y = vec![T::zero(); self.cout * n];
        matmul(Mat::new(&self.weight.value, self.cout, kk), Mat::new(&cols, kk, n), T::zero(), &mut y);
        add_channel_bias(&mut y, &self.bias.value, n);
        (y, ConvCache { cols, h, w, ho, wo })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &[T], cache: &ConvCache<T>) -> Vec<T> {
        let n = cache.ho * cache.wo;
        let kk = self.cin * self.kernel * self.kernel;
        matmul(Mat::new(dy, self.cout, n), Mat::new(&cache.cols, kk, n).t(), T::one(), &mut self.weight.grad);
        for (g, s) in self.bias.grad.iter_mut().zip(channel_sums(dy, n)) {
            *g += s;
        }
        let mut dcols = vec![T::zero(); kk * n];
        matmul(Mat::new(&self.weight.value, self.cout, kk).t(), Mat::new(dy, self.cout, n), T::zero(), &mut dcols);
        self.col2im(&dcols, cache.h, cache.w, cache.ho, cache.wo)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Position-wise affine map `y[:, i] = W·x[:, i] + b` over `[cin, n]` inputs.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Dense<T> {
    /// Weights with standard deviation `gain / sqrt(cin)`, zero bias.
    pub fn new(name: &str, cin: usize, cout: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain * libm_sqrt(1.0 / cin as f64);
        Self {
            cin,
            cout,
            weight: Param::normal(alloc::format!("{name}.weight"), cout * cin, std, rng),
            bias: Param::zeros(alloc::format!("{name}.bias"), cout),
        }
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cin * n);
        let mut y = vec![T::zero(); self.cout * n];
        matmul(Mat::new(&self.weight.value, self.cout, self.cin), Mat::new(x, self.cin, n), T::zero(), &mut y);
        add_channel_bias(&mut y, &self.bias.value, n);
        y
    }

    /// `x` is the forward input.
    pub fn backward(&mut self, dy: &[T], x: &[T], n: usize) -> Vec<T> {
        matmul(Mat::new(dy, self.cout, n), Mat::new(x, self.cin, n).t(), T::one(), &mut self.weight.grad);
        for (g, s) in self.bias.grad.iter_mut().zip(channel_sums(dy, n)) {
            *g += s;
        }
        let mut dx = vec![T::zero(); self.cin * n];
        matmul(Mat::new(&self.weight.value, self.cout, self.cin).t(), Mat::new(dy, self.cout, n), T::zero(), &mut dx);
        dx
    }

    pub fn macs(&self, n: usize) -> usize {
        self.cin * self.cout * n
    }
}

impl<T: Real> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Group normalization with per-channel affine; `groups == 1` standardizes
/// each sample over all channels and positions.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug, Clone, Default)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "channels must divide into groups");
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(alloc::format!("{name}.gamma"), channels, T::one()),
            beta: Param::zeros(alloc::format!("{name}.beta"), channels),
        }
    }

    pub fn forward(&self, x: &[T], n: usize) -> (Vec<T>, NormCache<T>) {
        let per_group = self.channels / self.groups * n;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        let count = T::from_f64(per_group as f64);
        for (src, dst) in x.chunks_exact(per_group).zip(xhat.chunks_exact_mut(per_group)) {
            let mean = src.iter().fold(T::zero(), |a, &b| a + b) / count;
            let var = src.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / count;
            let is = T::one() / (var + T::from_f64(self.eps)).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for (c, row) in y.chunks_exact_mut(n).enumerate() {
            let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
            for e in row {
                *e = *e * ga + be;
            }
        }
        (y, NormCache { xhat, inv_std, n })
    }

    pub fn backward(&mut self, dy: &[T], cache: &NormCache<T>) -> Vec<T> {
        let n = cache.n;
        let mut dxhat = vec![T::zero(); dy.len()];
        for c in 0..self.channels {
            let (dyr, xr) = (&dy[c * n..][..n], &cache.xhat[c * n..][..n]);
            let mut gg = T::zero();
            let mut gb = T::zero();
            let ga = self.gamma.value[c];
            for ((d, &g), &xh) in dxhat[c * n..][..n].iter_mut().zip(dyr).zip(xr) {
                gg += g * xh;
                gb += g;
                *d = g * ga;
            }
            self.gamma.grad[c] += gg;
            self.beta.grad[c] += gb;
        }
        let per_group = self.channels / self.groups * n;
        let count = T::from_f64(per_group as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for g in 0..self.groups {
            let range = g * per_group..(g + 1) * per_group;
            let (dxh, xh) = (&dxhat[range.clone()], &cache.xhat[range.clone()]);
            let mean_d = dxh.iter().fold(T::zero(), |a, &b| a + b) / count;
            let mean_dx = dxh.iter().zip(xh).fold(T::zero(), |a, (&d, &x)| a + d * x) / count;
            let is = cache.inv_std[g];
            for ((o, &d), &x) in dx[range].iter_mut().zip(dxh).zip(xh) {
                *o = is * (d - mean_d - x * mean_dx);
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for GroupNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x·σ(x)`, elementwise.
pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of [`silu`] given its input `x`.
pub fn silu_backward<T: Real>(dy: &[T], x: &[T]) -> Vec<T> {
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// 2×2 average pooling of `x[c, h·w]`; `h` and `w` must be even.
pub fn avg_pool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::from_f64(0.25);
    let mut y = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..][..h * w];
        let dst = &mut y[ch * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::from_f64(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &dy[ch * ho * wo..][..ho * wo];
        let dst = &mut dx[ch * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * q;
                let i = 2 * oy * w + 2 * ox;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Space-to-depth by 2: `[c, h, w]` → `[4c, h/2, w/2]`. Output channel
/// `4c + 2dy + dx` holds the pixels at offset `(dy, dx)` of each 2×2 cell.
pub fn pixel_unshuffle<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let oc = 4 * ch + 2 * dy + dx;
                for oy in 0..ho {
                    for ox in 0..wo {
                        y[(oc * ho + oy) * wo + ox] = x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                    }
                }
            }
        }
    }
    y
}

/// Inverse of [`pixel_unshuffle`]; `c`, `h`, `w` describe the full-resolution output.
pub fn pixel_shuffle<T: Real>(y: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut x = vec![T::zero(); y.len()];
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let oc = 4 * ch + 2 * dy + dx;
                for oy in 0..ho {
                    for ox in 0..wo {
                        x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx] = y[(oc * ho + oy) * wo + ox];
                    }
                }
            }
        }
    }
    x
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_and_grad(y: &[f64]) -> (f64, Vec<f64>) {
        // L = Σ y_i² · (1 + i/10): a non-symmetric weighting so every output matters.
        let l = y.iter().enumerate().map(|(i, v)| v * v * (1.0 + i as f64 / 10.0)).sum();
        let g = y.iter().enumerate().map(|(i, v)| 2.0 * v * (1.0 + i as f64 / 10.0)).collect();
        (l, g)
    }

    fn check_input_grad(f: &dyn Fn(&[f64]) -> Vec<f64>, analytic: &[f64], x: &[f64]) {
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += eps;
            xm[i] -= eps;
            let num = (loss_and_grad(&f(&xp)).0 - loss_and_grad(&f(&xm)).0) / (2.0 * eps);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "input {i}: numeric {num} analytic {}", analytic[i]);
        }
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = Rng::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let mut rng = Rng::new(5);
            let mut conv = Conv2d::<f64>::new("c", 2, 3, k, s, 1.0, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let (h, w) = (4, 6);
            let x = rand_vec(2 * h * w, 9);
            let (y, cache) = conv.forward(&x, h, w);
            let (_, dy) = loss_and_grad(&y);
            let dx = conv.backward(&dy, &cache);
            let c2 = conv.clone();
            check_input_grad(&|x| c2.forward(x, h, w).0, &dx, &x);
            // weight gradient, spot check
            let eps = 1e-6;
            for i in (0..conv.weight.len()).step_by(5) {
                let mut cp = c2.clone();
                cp.weight.value[i] += eps;
                let lp = loss_and_grad(&cp.forward(&x, h, w).0).0;
                cp.weight.value[i] -= 2.0 * eps;
                let lm = loss_and_grad(&cp.forward(&x, h, w).0).0;
                let num = (lp - lm) / (2.0 * eps);
                assert!((num - conv.weight.grad[i]).abs() < 1e-5 * num.abs().max(1.0));
            }
        }
    }

    #[test]
    fn norm_and_silu_gradients() {
        let mut norm = GroupNorm::<f64>::new("n", 2, 4);
        norm.gamma.value = vec![1.0, 0.5, -1.5, 2.0];
        let n = 5;
        let x = rand_vec(4 * n, 4);
        let (y, cache) = norm.forward(&x, n);
        let (_, dy) = loss_and_grad(&y);
        let dx = norm.backward(&dy, &cache);
        let n2 = norm.clone();
        check_input_grad(&|x| n2.forward(x, n).0, &dx, &x);

        let (_, dy) = loss_and_grad(&silu(&x));
        check_input_grad(&|x| silu(x), &silu_backward(&dy, &x), &x);
    }

    #[test]
    fn pooling_and_shuffles() {
        let x = rand_vec(2 * 4 * 4, 1);
        let (_, dy) = loss_and_grad(&avg_pool2(&x, 2, 4, 4));
        check_input_grad(&|x| avg_pool2(x, 2, 4, 4), &avg_pool2_backward(&dy, 2, 4, 4), &x);
        let u = pixel_unshuffle(&x, 2, 4, 4);
        assert_eq!(pixel_shuffle(&u, 2, 4, 4), x);
        assert_eq!(u[0], x[0]);
        assert_eq!(u[2 * 2 * 1], x[1]); // channel 1 = offset (0, 1)
    }

    #[test]
    fn dense_gradient() {
        let mut rng = Rng::new(2);
        let mut d = Dense::<f64>::new("d", 3, 2, 1.0, &mut rng);
        let x = rand_vec(3 * 4, 3);
        let y = d.forward(&x, 4);
        let (_, dy) = loss_and_grad(&y);
        let dx = d.backward(&dy, &x, 4);
        let d2 = d.clone();
        check_input_grad(&|x| d2.forward(x, 4), &dx, &x);
    }
}
