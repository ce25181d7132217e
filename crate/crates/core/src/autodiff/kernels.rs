//! Dense numeric kernels shared by the forward and backward passes.

/// `c = alpha·op(a)·op(b) + beta·c` for row-major operands, where `op`
/// optionally transposes. `op(a)` is `m×k`, `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above against the strides used.
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

/// Geometry of a 1-D convolution over `[B, Cin, T]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Kernel-1 convolutions are a plain matrix product per example.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.kernel
    }

    fn cols_width(&self) -> usize {
        self.batch * self.t_out()
    }
}

/// Unfolds `x` into a `[Cin·K, B·Tout]` column matrix.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let t_out = g.t_out();
    let width = g.cols_width();
    let mut cols = vec![0.0; g.cols_rows() * width];
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + kk) * width..][..width];
            for b in 0..g.batch {
                let src = &x[(b * g.c_in + ci) * g.t_in..][..g.t_in];
                let dst = &mut row[b * t_out..][..t_out];
                for (to, d) in dst.iter_mut().enumerate() {
                    let ti = (to * g.stride + kk) as isize - g.pad as isize;
                    if ti >= 0 && (ti as usize) < g.t_in {
                        *d = src[ti as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(g: &ConvGeom, cols: &[f64], gx: &mut [f64]) {
    let t_out = g.t_out();
    let width = g.cols_width();
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &cols[(ci * g.kernel + kk) * width..][..width];
            for b in 0..g.batch {
                let dst = &mut gx[(b * g.c_in + ci) * g.t_in..][..g.t_in];
                let src = &row[b * t_out..][..t_out];
                for (to, s) in src.iter().enumerate() {
                    let ti = (to * g.stride + kk) as isize - g.pad as isize;
                    if ti >= 0 && (ti as usize) < g.t_in {
                        dst[ti as usize] += s;
                    }
                }
            }
        }
    }
}

/// `[Cout, B·Tout]` to `[B, Cout, Tout]`.
fn unfold_batch(g: &ConvGeom, mat: &[f64], out: &mut [f64]) {
    let t_out = g.t_out();
    let width = g.cols_width();
    for co in 0..g.c_out {
        for b in 0..g.batch {
            out[(b * g.c_out + co) * t_out..][..t_out]
                .copy_from_slice(&mat[co * width + b * t_out..][..t_out]);
        }
    }
}

fn fold_batch(g: &ConvGeom, y: &[f64]) -> Vec<f64> {
    let t_out = g.t_out();
    let width = g.cols_width();
    let mut mat = vec![0.0; g.c_out * width];
    for co in 0..g.c_out {
        for b in 0..g.batch {
            mat[co * width + b * t_out..][..t_out]
                .copy_from_slice(&y[(b * g.c_out + co) * t_out..][..t_out]);
        }
    }
    mat
}

pub fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let t_out = g.t_out();
    let mut out = vec![0.0; g.batch * g.c_out * t_out];
    if g.is_pointwise() {
        for (xb, ob) in x.chunks_exact(g.c_in * g.t_in).zip(out.chunks_exact_mut(g.c_out * t_out)) {
            gemm(g.c_out, g.c_in, t_out, w, false, xb, false, 0.0, ob);
        }
    } else {
        let cols = im2col(g, x);
        let mut mat = vec![0.0; g.c_out * g.cols_width()];
        gemm(g.c_out, g.cols_rows(), g.cols_width(), w, false, &cols, false, 0.0, &mut mat);
        unfold_batch(g, &mat, &mut out);
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (co, bv) in bias.iter().enumerate() {
                out[(b * g.c_out + co) * t_out..][..t_out].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    if g.is_pointwise() {
        return pointwise_backward(g, x, w, gy, need_x, need_w, need_b);
    }
    let gmat = fold_batch(g, gy);
    let gw = need_w.then(|| {
        let cols = im2col(g, x);
        let mut gw = vec![0.0; g.c_out * g.cols_rows()];
        gemm(g.c_out, g.cols_width(), g.cols_rows(), &gmat, false, &cols, true, 0.0, &mut gw);
        gw
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![0.0; g.cols_rows() * g.cols_width()];
        gemm(g.cols_rows(), g.c_out, g.cols_width(), w, true, &gmat, false, 0.0, &mut gcols);
        let mut gx = vec![0.0; g.batch * g.c_in * g.t_in];
        col2im_add(g, &gcols, &mut gx);
        gx
    });
    (gx, gw, need_b.then(|| bias_grad(g, gy)))
}

fn bias_grad(g: &ConvGeom, gy: &[f64]) -> Vec<f64> {
    let t_out = g.t_out();
    let mut gb = vec![0.0; g.c_out];
    for b in 0..g.batch {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += gy[(b * g.c_out + co) * t_out..][..t_out].iter().sum::<f64>();
        }
    }
    gb
}

fn pointwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ci, co, t) = (g.c_in, g.c_out, g.t_in);
    let gw = need_w.then(|| {
        let mut gw = vec![0.0; co * ci];
        for (xb, gb) in x.chunks_exact(ci * t).zip(gy.chunks_exact(co * t)) {
            gemm(co, t, ci, gb, false, xb, true, 1.0, &mut gw);
        }
        gw
    });
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; g.batch * ci * t];
        for (xb, gb) in gx.chunks_exact_mut(ci * t).zip(gy.chunks_exact(co * t)) {
            gemm(ci, co, t, w, true, gb, false, 0.0, xb);
        }
        gx
    });
    (gx, gw, need_b.then(|| bias_grad(g, gy)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        check_direct(ConvGeom { batch: 2, c_in: 3, t_in: 9, c_out: 2, kernel: 3, stride: 2, pad: 1 });
        check_direct(ConvGeom { batch: 3, c_in: 4, t_in: 7, c_out: 5, kernel: 1, stride: 1, pad: 0 });
    }

    #[test]
    fn pointwise_backward_matches_general_path() {
        let g = ConvGeom { batch: 3, c_in: 4, t_in: 7, c_out: 5, kernel: 1, stride: 1, pad: 0 };
        let x: Vec<f64> = (0..g.batch * g.c_in * g.t_in).map(|i| (i as f64 * 0.29).sin()).collect();
        let w: Vec<f64> = (0..g.c_out * g.c_in).map(|i| (i as f64 * 0.7).cos()).collect();
        let gy: Vec<f64> = (0..g.batch * g.c_out * g.t_in).map(|i| (i as f64 * 0.13).cos()).collect();
        let (gx, gw, gb) = pointwise_backward(&g, &x, &w, &gy, true, true, true);
        // Same geometry through im2col: stride 1, no padding, kernel 1.
        let gmat = fold_batch(&g, &gy);
        let cols = im2col(&g, &x);
        let mut gw_ref = vec![0.0; g.c_out * g.c_in];
        gemm(g.c_out, g.cols_width(), g.cols_rows(), &gmat, false, &cols, true, 0.0, &mut gw_ref);
        let mut gcols = vec![0.0; g.cols_rows() * g.cols_width()];
        gemm(g.cols_rows(), g.c_out, g.cols_width(), &w, true, &gmat, false, 0.0, &mut gcols);
        let mut gx_ref = vec![0.0; x.len()];
        col2im_add(&g, &gcols, &mut gx_ref);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&gx.unwrap(), &gx_ref));
        assert!(close(&gw.unwrap(), &gw_ref));
        assert!(close(&gb.unwrap(), &bias_grad(&g, &gy)));
    }

    fn check_direct(g: ConvGeom) {
        let x: Vec<f64> = (0..g.batch * g.c_in * g.t_in).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..g.c_out * g.c_in * g.kernel).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias: Vec<f64> = (0..g.c_out).map(|i| 0.5 - 0.75 * i as f64).collect();
        let y = conv1d_forward(&g, &x, &w, Some(&bias));
        let t_out = g.t_out();
        for b in 0..g.batch {
            for co in 0..g.c_out {
                for to in 0..t_out {
                    let mut acc = bias[co];
                    for ci in 0..g.c_in {
                        for kk in 0..g.kernel {
                            let ti = (to * g.stride + kk) as isize - g.pad as isize;
                            if ti >= 0 && (ti as usize) < g.t_in {
                                acc += w[(co * g.c_in + ci) * g.kernel + kk]
                                    * x[(b * g.c_in + ci) * g.t_in + ti as usize];
                            }
                        }
                    }
                    assert!((y[(b * g.c_out + co) * t_out + to] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
