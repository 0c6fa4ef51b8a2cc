//! 3D convolution via im2col + SGEMM.

use serde::{Deserialize, Serialize};

/// Cubic kernel hyper-parameters. Padding is always "same" for stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
        }
    }

    pub const fn pointwise() -> Self {
        Self::new(1, 1, 1)
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_dim(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.padding() - span) / self.stride + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub cout: usize,
    pub spec: ConvSpec,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl Geometry {
    pub fn new(cin: usize, cout: usize, spec: ConvSpec, input: [usize; 3]) -> Self {
        let output = input.map(|n| spec.out_dim(n));
        Self {
            cin,
            cout,
            spec,
            input,
            output,
        }
    }

    /// Rows of the column matrix.
    pub fn patch(&self) -> usize {
        self.cin * self.spec.kernel.pow(3)
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.spec.kernel == 1 && self.spec.stride == 1
    }
}

/// Output positions `o` in `[lo, hi)` whose input coordinate
/// `o * stride + offset` lands inside `[0, n)`.
fn valid_range(offset: isize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = if (n as isize) <= offset {
        0
    } else {
        ((n as isize - offset + s - 1) / s).min(out as isize)
    };
    let lo = (lo as usize).min(out);
    (lo, (hi.max(0) as usize).max(lo))
}

/// `cols` must arrive zeroed; taps that fall in the padding are skipped.
fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let k = g.spec.kernel;
    let (s, dil, pad) = (g.spec.stride, g.spec.dilation, g.spec.padding() as isize);
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let p = g.out_voxels();
    let mut row = 0;
    for ci in 0..g.cin {
        let chan = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            let off_d = (kd * dil) as isize - pad;
            let (dlo, dhi) = valid_range(off_d, s, d, od);
            for kh in 0..k {
                let off_h = (kh * dil) as isize - pad;
                let (hlo, hhi) = valid_range(off_h, s, h, oh);
                for kw in 0..k {
                    let off_w = (kw * dil) as isize - pad;
                    let (wlo, whi) = valid_range(off_w, s, w, ow);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for z in dlo..dhi {
                        let iz = (z * s) as isize + off_d;
                        for y in hlo..hhi {
                            let iy = (y * s) as isize + off_h;
                            let src_row = (iz as usize * h + iy as usize) * w;
                            let dst_row = (z * oh + y) * ow;
                            if wlo >= whi {
                                continue;
                            }
                            if s == 1 {
                                let ix0 = (wlo as isize + off_w) as usize;
                                dst[dst_row + wlo..dst_row + whi]
                                    .copy_from_slice(&chan[src_row + ix0..src_row + ix0 + whi - wlo]);
                            } else {
                                for xo in wlo..whi {
                                    let ix = ((xo * s) as isize + off_w) as usize;
                                    dst[dst_row + xo] = chan[src_row + ix];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let k = g.spec.kernel;
    let (s, dil, pad) = (g.spec.stride, g.spec.dilation, g.spec.padding() as isize);
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let p = g.out_voxels();
    let mut row = 0;
    for ci in 0..g.cin {
        let chan = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            let off_d = (kd * dil) as isize - pad;
            let (dlo, dhi) = valid_range(off_d, s, d, od);
            for kh in 0..k {
                let off_h = (kh * dil) as isize - pad;
                let (hlo, hhi) = valid_range(off_h, s, h, oh);
                for kw in 0..k {
                    let off_w = (kw * dil) as isize - pad;
                    let (wlo, whi) = valid_range(off_w, s, w, ow);
                    let src = &cols[row * p..(row + 1) * p];
                    for z in dlo..dhi {
                        let iz = (z * s) as isize + off_d;
                        for y in hlo..hhi {
                            let iy = (y * s) as isize + off_h;
                            let dst_row = (iz as usize * h + iy as usize) * w;
                            let src_row = (z * oh + y) * ow;
                            for xo in wlo..whi {
                                let ix = ((xo * s) as isize + off_w) as usize;
                                chan[dst_row + ix] += src[src_row + xo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices sized for the given dims and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &Geometry) -> Vec<f32> {
    let (kk, p) = (g.patch(), g.out_voxels());
    let mut out = vec![0.0; g.cout * p];
    let owned;
    let cols: &[f32] = if g.is_pointwise() {
        x
    } else {
        let mut buf = vec![0.0; kk * p];
        im2col(x, g, &mut buf);
        owned = buf;
        &owned
    };
    gemm(g.cout, kk, p, weight, (kk, 1), cols, (p, 1), 0.0, &mut out);
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            for v in &mut out[co * p..(co + 1) * p] {
                *v += bv;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    g: &Geometry,
    need_input: bool,
) -> ConvGrads {
    let (kk, p) = (g.patch(), g.out_voxels());
    let owned;
    let cols: &[f32] = if g.is_pointwise() {
        x
    } else {
        let mut buf = vec![0.0; kk * p];
        im2col(x, g, &mut buf);
        owned = buf;
        &owned
    };
    let mut dw = vec![0.0; g.cout * kk];
    // dW = dY · colsᵀ
    gemm(g.cout, p, kk, dy, (p, 1), cols, (1, p), 0.0, &mut dw);
    let db = (0..g.cout)
        .map(|co| dy[co * p..(co + 1) * p].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let input = need_input.then(|| {
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, g.cout, p, weight, (1, kk), dy, (p, 1), 0.0, &mut dcols);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; g.cin * g.input.iter().product::<usize>()];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    ConvGrads {
        input,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive(x: &[f32], w: &[f32], g: &Geometry) -> Vec<f32> {
        let k = g.spec.kernel;
        let pad = g.spec.padding() as isize;
        let [d, h, wd] = g.input;
        let [od, oh, ow] = g.output;
        let mut out = vec![0.0f32; g.cout * od * oh * ow];
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..g.cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let iz = (z * g.spec.stride + kd * g.spec.dilation) as isize - pad;
                                        let iy = (y * g.spec.stride + kh * g.spec.dilation) as isize - pad;
                                        let ix = (xo * g.spec.stride + kw * g.spec.dilation) as isize - pad;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xv = x[((ci * d + iz as usize) * h + iy as usize) * wd + ix as usize];
                                        let wv = w[(((co * g.cin + ci) * k + kd) * k + kh) * k + kw];
                                        acc += (xv * wv) as f64;
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + xo] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let v = (i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(40503));
                (v % 1000) as f32 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_for_all_block_geometries() {
        for spec in [
            ConvSpec::new(3, 1, 1),
            ConvSpec::new(3, 2, 1),
            ConvSpec::new(3, 1, 2),
            ConvSpec::new(3, 1, 4),
            ConvSpec::pointwise(),
        ] {
            // the small shapes are narrower than the dilated kernel
            for dims in [[6, 4, 8], [2, 3, 1], [1, 1, 2]] {
                let g = Geometry::new(2, 3, spec, dims);
                let x = pseudo(2 * dims.iter().product::<usize>(), 1);
                let w = pseudo(3 * g.patch(), 2);
                let fast = forward(&x, &w, None, &g);
                let slow = naive(&x, &w, &g);
                assert_eq!(fast.len(), slow.len());
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-4, "{spec:?} {dims:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn stride_two_halves_even_dims() {
        let spec = ConvSpec::new(3, 2, 1);
        assert_eq!(spec.out_dim(32), 16);
        assert_eq!(spec.out_dim(2), 1);
        assert_eq!(ConvSpec::new(3, 1, 4).out_dim(4), 4);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> must equal <x, dx> and <w, dw> for a bias-free linear map.
        for spec in [ConvSpec::new(3, 2, 1), ConvSpec::new(3, 1, 2), ConvSpec::pointwise()] {
            let g = Geometry::new(2, 2, spec, [4, 6, 4]);
            let x = pseudo(2 * 96, 3);
            let w = pseudo(2 * g.patch(), 4);
            let dy = pseudo(2 * g.out_voxels(), 5);
            let y = forward(&x, &w, None, &g);
            let grads = backward(&x, &w, &dy, &g, true);
            let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| (p * q) as f64).sum::<f64>();
            let lhs = dot(&y, &dy);
            assert!((lhs - dot(&x, grads.input.as_ref().unwrap())).abs() < 1e-3);
            assert!((lhs - dot(&w, &grads.weight)).abs() < 1e-3);
        }
    }
}
