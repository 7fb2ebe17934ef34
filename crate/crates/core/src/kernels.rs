//! Dense loops shared by the tape operations. Products are accumulated into
//! `f64` buffers and rounded to the element type once at the end.

use crate::tensor::Real;

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk].as_f64();
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += a_ik * bv.as_f64();
            }
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let a_v = a[kk * m + i].as_f64();
            if a_v == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += a_v * bv.as_f64();
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x.as_f64() * y.as_f64();
            }
            out[i * n + j] += acc;
        }
    }
}

pub(crate) fn round_into<T: Real>(acc: &[f64]) -> Vec<T> {
    acc.iter().map(|&v| T::from_f64(v)).collect()
}

/// Geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unrolled patch matrix (`c·kh·kw`).
    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Output positions per channel (`out_h·out_w`).
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + i) as isize - self.pad as isize;
        let x = (ox * self.stride + j) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Unrolls one sample (`[c,h,w]`) into `cols[r, p]`, `r` over patch entries.
    pub fn im2col<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        let p_total = self.positions();
        for c in 0..self.channels {
            let plane = &sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[r * p_total..(r + 1) * p_total];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, i, j) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Same unrolling, transposed: `cols_t[p, r]`.
    pub fn im2col_t<T: Real>(&self, sample: &[T], cols_t: &mut [T]) {
        let r_total = self.patch();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let p = oy * self.out_w + ox;
                let dst = &mut cols_t[p * r_total..(p + 1) * r_total];
                for c in 0..self.channels {
                    let plane = &sample[c * self.height * self.width..];
                    for i in 0..self.kh {
                        for j in 0..self.kw {
                            let r = (c * self.kh + i) * self.kw + j;
                            dst[r] = match self.source(oy, ox, i, j) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols[r, p]` back onto a `[c,h,w]` buffer.
    pub fn col2im_acc(&self, cols: &[f64], sample: &mut [f64]) {
        let p_total = self.positions();
        for c in 0..self.channels {
            let base = c * self.height * self.width;
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let src = &cols[r * p_total..(r + 1) * p_total];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(oy, ox, i, j) {
                                sample[base + y * self.width + x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
