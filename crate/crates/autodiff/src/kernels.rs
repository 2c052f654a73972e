//! Dense kernels shared by the graph ops.

/// `c = op(a) · op(b) (+ c when accumulate)` for row-major matrices.
///
/// `op(a)` is `m × k`; when `trans_a` is set, `a` is stored as `k × m`.
/// `op(b)` is `k × n`; when `trans_b` is set, `b` is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and the
    // strides describe row-major layouts inside them.
    unsafe {
        matrixmultiply::dgemm(
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

/// Geometry of a single-image 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.out_h * self.out_w
    }
}

/// Output columns `[lo, hi)` of a row whose input column `oj·stride + k − pad`
/// lies inside `[0, width)`.
fn valid_cols(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = if k >= g.pad { 0 } else { (g.pad - k).div_ceil(g.stride) };
    // Largest oj with oj·stride + k − pad ≤ width − 1.
    let hi = if g.width + g.pad > k {
        ((g.width + g.pad - k - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold `x` (`channels × height × width`) into a
/// `(channels·k·k) × (out_h·out_w)` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw_out = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let start = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    let line = &src[oi * g.out_w + lo..oi * g.out_w + hi];
                    for (d, s) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `full`, the flat index of the broadcast operand
/// whose shape has the same rank with some axes collapsed to 1.
pub(crate) fn broadcast_map(full: &[usize], small: &[usize]) -> Vec<usize> {
    let small_strides = strides(small);
    let eff: Vec<usize> = small
        .iter()
        .zip(&small_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = full.iter().product();
    let mut out = Vec::with_capacity(n);
    let Some((&inner, outer_dims)) = full.split_last() else {
        out.push(0);
        return out;
    };
    let inner_step = eff[full.len() - 1];
    let rows = if inner == 0 { 0 } else { n / inner };
    let mut idx = vec![0usize; outer_dims.len()];
    let mut off = 0usize;
    for _ in 0..rows {
        if inner_step == 0 {
            out.extend(std::iter::repeat_n(off, inner));
        } else {
            out.extend((0..inner).map(|k| off + k * inner_step));
        }
        for ax in (0..outer_dims.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < outer_dims[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
