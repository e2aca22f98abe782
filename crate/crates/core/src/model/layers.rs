//! Minimal NCHW layers with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense `(batch, channels, height, width)` activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, all row-major, with
/// optional transposition of `a` or `b` as stored.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution, stride 1, "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `(out_channels, in_channels * kernel * kernel)`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub struct ConvCache {
    /// im2col buffers per sample, `(in * k * k, h * w)`; empty for 1x1.
    cols: Vec<f32>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weight = (0..out_channels * fan_in)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let out = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, o) in out.iter_mut().enumerate() {
                            let sx = x as isize + dx;
                            *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx_out: &mut [f32]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                    let dy = ky as isize - pad;
                    let dxs = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, &g) in row[y * w..(y + 1) * w].iter().enumerate() {
                            let sx = x as isize + dxs;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor, keep: bool) -> (Tensor, Option<ConvCache>) {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let hw = x.plane();
        let mut out = Tensor::zeros(x.n, self.out_channels, x.h, x.w);
        let patch = self.patch();
        let one_by_one = self.kernel == 1;
        let mut cols = if one_by_one || !keep {
            Vec::new()
        } else {
            vec![0.0; x.n * patch * hw]
        };
        let mut scratch = if one_by_one { Vec::new() } else { vec![0.0; patch * hw] };
        for i in 0..x.n {
            let o = &mut out.data[i * self.out_channels * hw..(i + 1) * self.out_channels * hw];
            for (co, b) in self.bias.iter().enumerate() {
                o[co * hw..(co + 1) * hw].fill(*b);
            }
            let src: &[f32] = if one_by_one {
                x.sample(i)
            } else {
                let buf: &mut [f32] = if keep {
                    &mut cols[i * patch * hw..(i + 1) * patch * hw]
                } else {
                    &mut scratch
                };
                self.im2col(x.sample(i), x.h, x.w, buf);
                buf
            };
            gemm(self.out_channels, patch, hw, &self.weight, false, src, false, 1.0, o);
        }
        let cache = keep.then(|| ConvCache {
            cols,
            input: one_by_one.then(|| x.clone()),
        });
        (out, cache)
    }

    /// Accumulates parameter gradients into `dw`/`db` and returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &Tensor,
        dw: &mut [f32],
        db: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let hw = dout.plane();
        let patch = self.patch();
        let mut dx = need_input_grad.then(|| Tensor::zeros(dout.n, self.in_channels, dout.h, dout.w));
        let mut dcols = vec![0.0; patch * hw];
        for i in 0..dout.n {
            let g = dout.sample(i);
            for (co, d) in db.iter_mut().enumerate() {
                *d += g[co * hw..(co + 1) * hw].iter().sum::<f32>();
            }
            let cols: &[f32] = match &cache.input {
                Some(input) => input.sample(i),
                None => &cache.cols[i * patch * hw..(i + 1) * patch * hw],
            };
            // dW += dout (co x hw) * cols^T (hw x patch)
            gemm(self.out_channels, hw, patch, g, false, cols, true, 1.0, dw);
            if let Some(dx) = dx.as_mut() {
                let len = dx.sample_len();
                let target = &mut dx.data[i * len..(i + 1) * len];
                if cache.input.is_some() {
                    gemm(patch, self.out_channels, hw, &self.weight, true, g, false, 0.0, target);
                } else {
                    gemm(patch, self.out_channels, hw, &self.weight, true, g, false, 0.0, &mut dcols);
                    self.col2im(&dcols, dout.h, dout.w, target);
                }
            }
        }
        dx
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a rectifier given its output.
pub fn relu_backward_inplace(output: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and argmax offsets.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * x.w + 2 * xx + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_i = idx;
                    }
                }
                let o = nc * oh * ow + y * ow + xx;
                out.data[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(dout: &Tensor, arg: &[u32], in_h: usize, in_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dout.n, dout.c, in_h, in_w);
    let plane_out = dout.plane();
    for nc in 0..dout.n * dout.c {
        let dst = &mut dx.data[nc * in_h * in_w..(nc + 1) * in_h * in_w];
        for j in 0..plane_out {
            let o = nc * plane_out + j;
            dst[arg[o] as usize] += dout.data[o];
        }
    }
    dx
}

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Evaluation-mode normalization with the frozen running estimates.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let hw = x.plane();
        let mut out = x.same_shape();
        for ch in 0..x.c {
            let inv_std = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            for i in 0..x.n {
                let off = (i * x.c + ch) * hw;
                for j in 0..hw {
                    let xh = (x.data[off + j] - self.running_mean[ch]) * inv_std;
                    out.data[off + j] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
        }
        out
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates; evaluation mode uses the frozen running estimates.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> (Tensor, Option<BnCache>) {
        if !training {
            return (self.infer(x), None);
        }
        let hw = x.plane();
        let count = (x.n * hw) as f64;
        let mut out = x.same_shape();
        let mut xhat = training.then(|| x.same_shape());
        let mut inv_stds = vec![0.0; x.c];
        for ch in 0..x.c {
            let (mean, inv_std) = if training {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for i in 0..x.n {
                    for &v in &x.data[(i * x.c + ch) * hw..][..hw] {
                        sum += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let mean = sum / count;
                let var = (sq / count - mean * mean).max(0.0);
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let m = self.momentum;
                self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean as f32;
                self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * unbiased as f32;
                (mean as f32, 1.0 / (var as f32 + self.eps).sqrt())
            } else {
                (
                    self.running_mean[ch],
                    1.0 / (self.running_var[ch] + self.eps).sqrt(),
                )
            };
            inv_stds[ch] = inv_std;
            for i in 0..x.n {
                let off = (i * x.c + ch) * hw;
                for j in 0..hw {
                    let xh = (x.data[off + j] - mean) * inv_std;
                    if let Some(xhat) = xhat.as_mut() {
                        xhat.data[off + j] = xh;
                    }
                    out.data[off + j] = self.gamma[ch] * xh + self.beta[ch];
                }
            }
        }
        let cache = xhat.map(|xhat| BnCache {
            xhat,
            inv_std: inv_stds,
        });
        (out, cache)
    }

    pub fn backward(&self, cache: &BnCache, dout: &Tensor, dgamma: &mut [f32], dbeta: &mut [f32]) -> Tensor {
        let hw = dout.plane();
        let count = (dout.n * hw) as f32;
        let mut dx = dout.same_shape();
        for ch in 0..dout.c {
            let mut sum_g = 0.0f32;
            let mut sum_gx = 0.0f32;
            for i in 0..dout.n {
                let off = (i * dout.c + ch) * hw;
                for j in 0..hw {
                    sum_g += dout.data[off + j];
                    sum_gx += dout.data[off + j] * cache.xhat.data[off + j];
                }
            }
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            let k = self.gamma[ch] * cache.inv_std[ch] / count;
            for i in 0..dout.n {
                let off = (i * dout.c + ch) * hw;
                for j in 0..hw {
                    dx.data[off + j] =
                        k * (count * dout.data[off + j] - sum_g - cache.xhat.data[off + j] * sum_gx);
                }
            }
        }
        dx
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}
