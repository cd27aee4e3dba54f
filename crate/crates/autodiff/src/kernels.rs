//! Raw numeric kernels shared by the forward and backward passes.

/// `a[n,k] · b[k,m]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[n,m] · b[k,m]ᵀ` without materializing the transpose.
pub(crate) fn matmul_transpose_b(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[n,k]ᵀ · g[n,m]`.
pub(crate) fn matmul_transpose_a(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Geometry of a 1-D transposed convolution whose output is exactly
/// `stride * len` long.
///
/// Input position `i` with kernel tap `j` lands on output position
/// `i * stride + j - pad`, where `pad = (kernel - stride) / 2` (zero when the
/// kernel is shorter than the stride). Taps falling outside `[0, stride*len)`
/// are cropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel.saturating_sub(self.stride) / 2
    }

    pub fn out_len(&self) -> usize {
        self.len * self.stride
    }

    #[inline]
    fn target(&self, i: usize, j: usize) -> Option<usize> {
        let pos = (i * self.stride + j).checked_sub(self.pad())?;
        (pos < self.out_len()).then_some(pos)
    }
}

/// x: `[batch, in, len]`, kernel: `[in, out, k]`, bias: `[out]`.
pub(crate) fn conv_transpose_1d(
    geo: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let out_len = geo.out_len();
    let mut y = vec![0.0; geo.batch * geo.out_channels * out_len];
    for b in 0..geo.batch {
        for co in 0..geo.out_channels {
            let base = (b * geo.out_channels + co) * out_len;
            y[base..base + out_len].fill(bias[co]);
        }
        for ci in 0..geo.in_channels {
            let xrow = &x[(b * geo.in_channels + ci) * geo.len..][..geo.len];
            for co in 0..geo.out_channels {
                let w = &kernel[(ci * geo.out_channels + co) * geo.kernel..][..geo.kernel];
                let base = (b * geo.out_channels + co) * out_len;
                for (i, &xv) in xrow.iter().enumerate() {
                    for (j, &wv) in w.iter().enumerate() {
                        if let Some(o) = geo.target(i, j) {
                            y[base + o] += xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Vector-Jacobian products of [`conv_transpose_1d`] for (x, kernel, bias).
pub(crate) fn conv_transpose_1d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_len = geo.out_len();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; geo.out_channels];
    for b in 0..geo.batch {
        for co in 0..geo.out_channels {
            let base = (b * geo.out_channels + co) * out_len;
            gb[co] += gy[base..base + out_len].iter().sum::<f64>();
        }
        for ci in 0..geo.in_channels {
            let xoff = (b * geo.in_channels + ci) * geo.len;
            for co in 0..geo.out_channels {
                let koff = (ci * geo.out_channels + co) * geo.kernel;
                let base = (b * geo.out_channels + co) * out_len;
                for i in 0..geo.len {
                    let xv = x[xoff + i];
                    for j in 0..geo.kernel {
                        if let Some(o) = geo.target(i, j) {
                            let g = gy[base + o];
                            gx[xoff + i] += g * kernel[koff + j];
                            gk[koff + j] += g * xv;
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}
