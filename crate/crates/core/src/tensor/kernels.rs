// Dense inner loops shared by forward and backward passes. All kernels accumulate
// into their output buffer.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + n - pad` is in bounds.
    fn col_range(&self, n: usize) -> (usize, usize) {
        let lo = if self.pad > n {
            (self.pad - n).div_ceil(self.stride)
        } else {
            0
        };
        // ix = ox*s + n - pad < w  <=>  ox < (w + pad - n) / s
        let limit = self.w + self.pad;
        let hi = if limit > n {
            ((limit - n - 1) / self.stride + 1).min(self.w_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], wgt: &[f64], out: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    if g.is_pointwise() {
        for b in 0..g.batch {
            gemm(
                g.c_out,
                g.c_in,
                in_plane,
                wgt,
                &x[b * g.c_in * in_plane..(b + 1) * g.c_in * in_plane],
                &mut out[b * g.c_out * out_plane..(b + 1) * g.c_out * out_plane],
            );
        }
        return;
    }
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o = &mut out[(b * g.c_out + co) * out_plane..(b * g.c_out + co + 1) * out_plane];
            for ci in 0..g.c_in {
                let xp = &x[(b * g.c_in + ci) * in_plane..(b * g.c_in + ci + 1) * in_plane];
                for m in 0..g.kh {
                    for n in 0..g.kw {
                        let wv = wgt[((co * g.c_in + ci) * g.kh + m) * g.kw + n];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = g.col_range(n);
                        for oy in 0..g.h_out {
                            let iy = (oy * g.stride + m) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = &xp[iy as usize * g.w..(iy as usize + 1) * g.w];
                            let orow = &mut o[oy * g.w_out..(oy + 1) * g.w_out];
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * g.stride + n - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients given the output gradient `dy`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    wgt: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let in_plane = g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    if g.is_pointwise() {
        if let Some(dx) = dx {
            for b in 0..g.batch {
                gemm_tn(
                    g.c_in,
                    g.c_out,
                    in_plane,
                    wgt,
                    &dy[b * g.c_out * out_plane..(b + 1) * g.c_out * out_plane],
                    &mut dx[b * g.c_in * in_plane..(b + 1) * g.c_in * in_plane],
                );
            }
        }
        if let Some(dw) = dw {
            for b in 0..g.batch {
                gemm_nt(
                    g.c_out,
                    out_plane,
                    g.c_in,
                    &dy[b * g.c_out * out_plane..(b + 1) * g.c_out * out_plane],
                    &x[b * g.c_in * in_plane..(b + 1) * g.c_in * in_plane],
                    dw,
                );
            }
        }
        return;
    }
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let d = &dy[(b * g.c_out + co) * out_plane..(b * g.c_out + co + 1) * out_plane];
            for ci in 0..g.c_in {
                let base = (b * g.c_in + ci) * in_plane;
                for m in 0..g.kh {
                    for n in 0..g.kw {
                        let widx = ((co * g.c_in + ci) * g.kh + m) * g.kw + n;
                        let wv = wgt[widx];
                        let (lo, hi) = g.col_range(n);
                        let mut acc = 0.0;
                        for oy in 0..g.h_out {
                            let iy = (oy * g.stride + m) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row = base + iy as usize * g.w;
                            let drow = &d[oy * g.w_out..(oy + 1) * g.w_out];
                            if let Some(dx) = dx.as_deref_mut() {
                                for ox in lo..hi {
                                    dx[row + ox * g.stride + n - g.pad] += wv * drow[ox];
                                }
                            }
                            if dw.is_some() {
                                let xrow = &x[row..row + g.w];
                                for ox in lo..hi {
                                    acc += drow[ox] * xrow[ox * g.stride + n - g.pad];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}
