//! Raw convolution and matrix-multiply loops on flat row-major slices.
//!
//! These are public so the benchmark suite can time the sequential and
//! parallel paths side by side. Work is split into independent output
//! planes; every plane is accumulated in a fixed order, so both [`Exec`]
//! modes produce identical bits.

use crate::par::{self, Exec};

/// Geometry of a (possibly grouped) square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_per_group() * self.k * self.k
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + kk - pad`
/// lands inside `[0, n_in)`.
#[inline]
fn valid_range(kk: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    if n_in + pad < kk + 1 {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - kk) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

/// Cross-correlation: `y[b,o] = sum_{c,ki,kj} w[o,c,ki,kj] * x[b,c, .. ]`.
pub fn conv_forward(exec: Exec, g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let mut y = vec![0.0; g.batch * g.out_ch * plane_out];
    par::for_each_chunk_mut(exec, &mut y, plane_out, |idx, out| {
        let (b, o) = (idx / g.out_ch, idx % g.out_ch);
        let grp = o / og;
        for cl in 0..cg {
            let c = grp * cg + cl;
            let xp = &x[(b * g.in_ch + c) * plane_in..][..plane_in];
            for ki in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(ki, g.pad, g.stride, g.in_h, g.out_h);
                for kj in 0..g.k {
                    let (ox_lo, ox_hi) = valid_range(kj, g.pad, g.stride, g.in_w, g.out_w);
                    let wv = w[((o * cg + cl) * g.k + ki) * g.k + kj];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let xrow = &xp[iy * g.in_w..][..g.in_w];
                        let orow = &mut out[oy * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            let start = ox_lo + kj - g.pad;
                            let n = ox_hi - ox_lo;
                            for (ov, xv) in orow[ox_lo..ox_hi].iter_mut().zip(&xrow[start..start + n]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * xrow[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Gradient of [`conv_forward`] w.r.t. its input; equivalently the forward
/// pass of a transposed convolution with weight layout `[in, out, k, k]`
/// where "in" is `g.out_ch`.
pub fn conv_backward_input(exec: Exec, g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let mut dx = vec![0.0; g.batch * g.in_ch * plane_in];
    par::for_each_chunk_mut(exec, &mut dx, plane_in, |idx, dxp| {
        let (b, c) = (idx / g.in_ch, idx % g.in_ch);
        let grp = c / cg;
        let cl = c % cg;
        for o in grp * og..(grp + 1) * og {
            let dyp = &dy[(b * g.out_ch + o) * plane_out..][..plane_out];
            for ki in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(ki, g.pad, g.stride, g.in_h, g.out_h);
                for kj in 0..g.k {
                    let (ox_lo, ox_hi) = valid_range(kj, g.pad, g.stride, g.in_w, g.out_w);
                    let wv = w[((o * cg + cl) * g.k + ki) * g.k + kj];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let dyrow = &dyp[oy * g.out_w..][..g.out_w];
                        let dxrow = &mut dxp[iy * g.in_w..][..g.in_w];
                        if g.stride == 1 {
                            let start = ox_lo + kj - g.pad;
                            let n = ox_hi - ox_lo;
                            for (dv, gv) in dxrow[start..start + n].iter_mut().zip(&dyrow[ox_lo..ox_hi]) {
                                *dv += wv * gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dxrow[ox * g.stride + kj - g.pad] += wv * dyrow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of [`conv_forward`] w.r.t. its weight.
pub fn conv_backward_weight(exec: Exec, g: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let kk = g.k * g.k;
    let mut dw = vec![0.0; g.weight_len()];
    par::for_each_chunk_mut(exec, &mut dw, kk, |idx, dwk| {
        let (o, cl) = (idx / cg, idx % cg);
        let c = (o / og) * cg + cl;
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(ki, g.pad, g.stride, g.in_h, g.out_h);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(kj, g.pad, g.stride, g.in_w, g.out_w);
                let mut acc = 0.0;
                for b in 0..g.batch {
                    let xp = &x[(b * g.in_ch + c) * plane_in..][..plane_in];
                    let dyp = &dy[(b * g.out_ch + o) * plane_out..][..plane_out];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let xrow = &xp[iy * g.in_w..][..g.in_w];
                        let dyrow = &dyp[oy * g.out_w..][..g.out_w];
                        for ox in ox_lo..ox_hi {
                            acc += dyrow[ox] * xrow[ox * g.stride + kj - g.pad];
                        }
                    }
                }
                dwk[ki * g.k + kj] = acc;
            }
        }
    });
    dw
}

/// `c[batch] = a[batch] (m x k) * b[batch] (k x n)`.
pub fn matmul(exec: Exec, batch: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    if n == 0 {
        return c;
    }
    par::for_each_chunk_mut(exec, &mut c, n, |row, crow| {
        let (bi, i) = (row / m, row % m);
        let arow = &a[(bi * m + i) * k..][..k];
        let bm = &b[bi * k * n..][..k * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bm[kk * n..][..n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `a^T` per batch: `[batch, m, n] -> [batch, n, m]`.
pub fn transpose(batch: usize, m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for bi in 0..batch {
        let src = &a[bi * m * n..][..m * n];
        let dst = &mut t[bi * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for pad in 0..3 {
            for stride in 1..4 {
                for kk in 0..5 {
                    for n_in in 1..7 {
                        let n_out = 8;
                        let (lo, hi) = valid_range(kk, pad, stride, n_in, n_out);
                        for o in 0..n_out {
                            let i = (o * stride + kk) as isize - pad as isize;
                            let inside = i >= 0 && (i as usize) < n_in;
                            assert_eq!(inside, o >= lo && o < hi, "{pad} {stride} {kk} {n_in} {o}");
                        }
                    }
                }
            }
        }
    }
}
