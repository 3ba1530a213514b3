//! Raw numeric kernels: matrix multiplies and convolution lowering.
//!
//! Parallelism is only ever over independent output rows (or batch items),
//! so results are bitwise identical whether or not rayon splits the work.

use super::Scalar;
use rayon::prelude::*;

/// Work threshold (multiply-accumulates) below which we stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 18;

/// C[m,n] = A[m,k] * B[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, out): (usize, &mut [T])| {
        for v in out.iter_mut() {
            *v = T::zero();
        }
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// C[m,k] = A[m,n] * B[k,n]^T   (i.e. rows of A dotted with rows of B)
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let row = |(i, out): (usize, &mut [T])| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in out.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            *o = s;
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let row = |(i, out): (usize, &mut [T])| {
        for v in out.iter_mut() {
            *v = T::zero();
        }
        for p in 0..m {
            let api = a[p * k + i];
            if api == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Convolution geometry shared by forward and backward.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        c_in: usize,
        c_out: usize,
        h_in: usize,
        w_in: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        assert!(groups >= 1 && c_in % groups == 0 && c_out % groups == 0);
        assert!(
            h_in + 2 * pad >= kernel && w_in + 2 * pad >= kernel,
            "conv input {}x{} smaller than kernel {} after padding {}",
            h_in,
            w_in,
            kernel,
            pad
        );
        let h_out = (h_in + 2 * pad - kernel) / stride + 1;
        let w_out = (w_in + 2 * pad - kernel) / stride + 1;
        ConvGeom {
            batch,
            c_in,
            c_out,
            h_in,
            w_in,
            kernel,
            stride,
            pad,
            groups,
            h_out,
            w_out,
        }
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.h_out * self.w_out
    }
}

/// Expand one group of one sample into columns:
/// out[(cg * k * k) x (h_out * w_out)], zero-padded at the borders.
/// `x` points at the start of the sample's group channels.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let cg = g.c_in / g.groups;
    let k = g.kernel;
    let l = g.h_out * g.w_out;
    debug_assert_eq!(cols.len(), cg * k * k * l);
    debug_assert_eq!(x.len(), cg * g.h_in * g.w_in);
    for c in 0..cg {
        let plane = &x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[(c * k * k + ky * k + kx) * l..][..l];
                let mut idx = 0;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        row[idx] = if iy >= 0
                            && iy < g.h_in as isize
                            && ix >= 0
                            && ix < g.w_in as isize
                        {
                            plane[iy as usize * g.w_in + ix as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into the input layout (adjoint of [`im2col`]).
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let cg = g.c_in / g.groups;
    let k = g.kernel;
    let l = g.h_out * g.w_out;
    debug_assert_eq!(cols.len(), cg * k * k * l);
    debug_assert_eq!(x.len(), cg * g.h_in * g.w_in);
    for c in 0..cg {
        let plane = &mut x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[(c * k * k + ky * k + kx) * l..][..l];
                let mut idx = 0;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        idx += g.w_out;
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w_in as isize {
                            let p = iy as usize * g.w_in + ix as usize;
                            plane[p] = plane[p] + row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Forward convolution. `w` is laid out [c_out, c_in/groups, k, k].
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let cg_in = g.c_in / g.groups;
    let cg_out = g.c_out / g.groups;
    let k = g.kernel;
    let l = g.h_out * g.w_out;
    let in_plane = g.c_in * g.h_in * g.w_in;
    let out_plane = g.c_out * l;
    let mut out = vec![T::zero(); g.out_len()];

    let sample = |(b, out_b): (usize, &mut [T])| {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let mut cols = vec![T::zero(); cg_in * k * k * l];
        for gi in 0..g.groups {
            im2col(&xb[gi * cg_in * g.h_in * g.w_in..][..cg_in * g.h_in * g.w_in], g, &mut cols);
            let wg = &w[gi * cg_out * cg_in * k * k..][..cg_out * cg_in * k * k];
            let og = &mut out_b[gi * cg_out * l..][..cg_out * l];
            mm_nn(wg, &cols, cg_out, cg_in * k * k, l, og);
        }
    };
    let work = g.batch * g.c_out * cg_in * k * k * l;
    if work >= PAR_THRESHOLD && g.batch > 1 {
        out.par_chunks_mut(out_plane).enumerate().for_each(sample);
    } else {
        out.chunks_mut(out_plane).enumerate().for_each(sample);
    }
    out
}

/// Backward convolution: accumulates into `dx` and `dw`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let cg_in = g.c_in / g.groups;
    let cg_out = g.c_out / g.groups;
    let k = g.kernel;
    let kk = cg_in * k * k;
    let l = g.h_out * g.w_out;
    let in_plane = g.c_in * g.h_in * g.w_in;
    let out_plane = g.c_out * l;

    let mut cols = vec![T::zero(); kk * l];
    let mut dcols = vec![T::zero(); kk * l];
    let mut dwg_tmp = vec![T::zero(); cg_out * kk];
    let (mut dx, mut dw) = (dx, dw);
    for b in 0..g.batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let db = &dout[b * out_plane..(b + 1) * out_plane];
        for gi in 0..g.groups {
            let wg = &w[gi * cg_out * kk..][..cg_out * kk];
            let dg = &db[gi * cg_out * l..][..cg_out * l];
            im2col(&xb[gi * cg_in * g.h_in * g.w_in..][..cg_in * g.h_in * g.w_in], g, &mut cols);
            if let Some(dw) = dw.as_deref_mut() {
                // dW_g += dOut_g · cols^T
                mm_nt(dg, &cols, cg_out, l, kk, &mut dwg_tmp);
                let dst = &mut dw[gi * cg_out * kk..][..cg_out * kk];
                for (d, s) in dst.iter_mut().zip(&dwg_tmp) {
                    *d = *d + *s;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dcols = W_g^T · dOut_g, then scatter back
                mm_tn(wg, dg, cg_out, kk, l, &mut dcols);
                let dst = &mut dx[b * in_plane + gi * cg_in * g.h_in * g.w_in..]
                    [..cg_in * g.h_in * g.w_in];
                col2im_add(&dcols, g, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm_nn(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mm_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.2 - 0.7).collect();
        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, m, k, n, &mut c);

        // A via transpose: at[k,m], mm_tn(at) == a*b
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_tn(&at, &b, k, m, n, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        // B via transpose: bt[n,k], mm_nt(a, bt) == a*b
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut c3);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_1x1() {
        // 1x1 conv with identity weight leaves the input unchanged
        let g = ConvGeom::new(1, 3, 3, 4, 4, 1, 1, 0, 1);
        let x: Vec<f64> = (0..3 * 16).map(|i| i as f64 * 0.1).collect();
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, &g);
        assert_eq!(x, y);
    }

    #[test]
    fn conv_output_size_stride2() {
        // floor((56 + 2 - 3)/2) + 1 == 28
        let g = ConvGeom::new(1, 2, 2, 56, 56, 3, 2, 1, 2);
        assert_eq!(g.h_out, 28);
        assert_eq!(g.w_out, 28);
    }

    #[test]
    fn conv_against_direct_loop() {
        let g = ConvGeom::new(2, 3, 4, 5, 5, 3, 2, 1, 1);
        let x: Vec<f64> = (0..g.batch * 3 * 25).map(|i| ((i * 7) % 13) as f64 * 0.3 - 1.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 5) % 11) as f64 * 0.1 - 0.5).collect();
        let y = conv2d_forward(&x, &w, &g);
        for b in 0..g.batch {
            for co in 0..4 {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut s = 0.0;
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        s += x[((b * 3 + ci) * 5 + iy as usize) * 5 + ix as usize]
                                            * w[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = y[((b * 4 + co) * g.h_out + oy) * g.w_out + ox];
                        assert!((got - s).abs() < 1e-10, "mismatch at {b},{co},{oy},{ox}");
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_preserves_channels() {
        let g = ConvGeom::new(1, 4, 4, 6, 6, 3, 1, 1, 4);
        let x = vec![1.0f32; 4 * 36];
        let w = vec![1.0f32; 4 * 9];
        let y = conv2d_forward(&x, &w, &g);
        assert_eq!(y.len(), 4 * 36);
        // interior pixels see all nine taps
        assert!((y[1 * 36 + 7] - 9.0).abs() < 1e-6);
    }
}
