//! Batched forward and gradient kernels over flat row-major buffers.
//!
//! Gradient kernels accumulate into `dw`/`db` and return the input gradient.

use alloc::vec;
use alloc::vec::Vec;

/// Geometry of a stride-1 zero-padded 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    ) -> Option<Self> {
        let h = (in_h + 2 * padding).checked_sub(kernel)? + 1;
        let w = (in_w + 2 * padding).checked_sub(kernel)? + 1;
        Some(Self {
            in_channels,
            out_channels,
            kernel,
            padding,
            in_h,
            in_w,
            out_h: h,
            out_w: w,
        })
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }
}

/// `w` is `[inputs, outputs]`, row-major.
pub fn dense_forward(
    x: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; n * outputs];
    for r in 0..n {
        let xr = &x[r * inputs..(r + 1) * inputs];
        let yr = &mut y[r * outputs..(r + 1) * outputs];
        yr.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate() {
            let wi = &w[i * outputs..(i + 1) * outputs];
            yr.iter_mut().zip(wi).for_each(|(out, c)| *out += xi * c);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * inputs];
    for r in 0..n {
        let xr = &x[r * inputs..(r + 1) * inputs];
        let dyr = &dy[r * outputs..(r + 1) * outputs];
        db.iter_mut().zip(dyr).for_each(|(d, g)| *d += g);
        for i in 0..inputs {
            let wi = &w[i * outputs..(i + 1) * outputs];
            let dwi = &mut dw[i * outputs..(i + 1) * outputs];
            let mut acc = 0.0;
            for o in 0..outputs {
                dwi[o] += dyr[o] * xr[i];
                acc += dyr[o] * wi[o];
            }
            dx[r * inputs + i] = acc;
        }
    }
    dx
}

pub fn conv_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
    let (il, ol) = (g.in_len(), g.out_len());
    let k = g.kernel;
    let mut y = vec![0.0; n * ol];
    for r in 0..n {
        let xr = &x[r * il..(r + 1) * il];
        let yr = &mut y[r * ol..(r + 1) * ol];
        for o in 0..g.out_channels {
            let plane = &mut yr[o * g.out_h * g.out_w..(o + 1) * g.out_h * g.out_w];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..g.in_channels {
                let xc = &xr[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                let wk = &w[(o * g.in_channels + c) * k * k..(o * g.in_channels + c + 1) * k * k];
                for i in 0..g.out_h {
                    for ki in 0..k {
                        let Some(si) = (i + ki).checked_sub(g.padding).filter(|&s| s < g.in_h)
                        else {
                            continue;
                        };
                        let xrow = &xc[si * g.in_w..(si + 1) * g.in_w];
                        for j in 0..g.out_w {
                            let mut acc = 0.0;
                            for kj in 0..k {
                                if let Some(sj) =
                                    (j + kj).checked_sub(g.padding).filter(|&s| s < g.in_w)
                                {
                                    acc += wk[ki * k + kj] * xrow[sj];
                                }
                            }
                            plane[i * g.out_w + j] += acc;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let (il, ol) = (g.in_len(), g.out_len());
    let k = g.kernel;
    let mut dx = vec![0.0; n * il];
    for r in 0..n {
        let xr = &x[r * il..(r + 1) * il];
        let dyr = &dy[r * ol..(r + 1) * ol];
        let dxr = &mut dx[r * il..(r + 1) * il];
        for o in 0..g.out_channels {
            let plane = &dyr[o * g.out_h * g.out_w..(o + 1) * g.out_h * g.out_w];
            db[o] += plane.iter().sum::<f64>();
            for c in 0..g.in_channels {
                let base = (o * g.in_channels + c) * k * k;
                let xc = &xr[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                let dxc = &mut dxr[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
                for i in 0..g.out_h {
                    for ki in 0..k {
                        let Some(si) = (i + ki).checked_sub(g.padding).filter(|&s| s < g.in_h)
                        else {
                            continue;
                        };
                        for j in 0..g.out_w {
                            let d = plane[i * g.out_w + j];
                            if d == 0.0 {
                                continue;
                            }
                            for kj in 0..k {
                                if let Some(sj) =
                                    (j + kj).checked_sub(g.padding).filter(|&s| s < g.in_w)
                                {
                                    let idx = si * g.in_w + sj;
                                    dw[base + ki * k + kj] += d * xc[idx];
                                    dxc[idx] += d * w[base + ki * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

/// Non-overlapping max pooling; returns outputs and the flat input index of
/// each selected maximum (first maximum wins on ties).
pub fn maxpool_forward(
    x: &[f64],
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut y = Vec::with_capacity(n * channels * oh * ow);
    let mut arg = Vec::with_capacity(y.capacity());
    for r in 0..n {
        for c in 0..channels {
            let base = (r * channels + c) * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * size * w + j * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(argmax: &[usize], dy: &[f64], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&idx, &d) in argmax.iter().zip(dy) {
        dx[idx] += d;
    }
    dx
}

pub fn gap_forward(x: &[f64], n: usize, channels: usize, area: usize) -> Vec<f64> {
    let inv = 1.0 / area as f64;
    (0..n * channels)
        .map(|p| x[p * area..(p + 1) * area].iter().sum::<f64>() * inv)
        .collect()
}

pub fn gap_backward(dy: &[f64], area: usize) -> Vec<f64> {
    let inv = 1.0 / area as f64;
    dy.iter()
        .flat_map(|&d| core::iter::repeat_n(d * inv, area))
        .collect()
}

/// Row-wise softmax with cross-entropy against `labels`.
///
/// Returns `(mean loss, probabilities)`. Per-row loss is computed as
/// `logsumexp(z) - z[label]`, which equals `-ln p[label]`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    n: usize,
    classes: usize,
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; n * classes];
    let mut total = 0.0;
    for r in 0..n {
        let z = &logits[r * classes..(r + 1) * classes];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let p = &mut probs[r * classes..(r + 1) * classes];
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = libm::exp(zi - max);
            sum += *pi;
        }
        p.iter_mut().for_each(|v| *v /= sum);
        total += max + libm::log(sum) - z[labels[r]];
    }
    (total / n as f64, probs)
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_cross_entropy_backward(
    probs: &[f64],
    n: usize,
    classes: usize,
    labels: &[usize],
) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let mut d = probs.to_vec();
    for r in 0..n {
        d[r * classes + labels[r]] -= 1.0;
    }
    d.iter_mut().for_each(|v| *v *= inv);
    d
}
