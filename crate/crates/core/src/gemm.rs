//! Safe wrapper over the strided matrix product.

use crate::{Real, Tensor};

/// A row-major matrix view: element `(r, c)` lives at `data[r * ld + c]`,
/// or at `data[c * ld + r]` when `transposed`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            ld,
            transposed: false,
        }
    }

    /// View of the transpose of a stored `cols × rows` matrix.
    pub fn t(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            ld,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    fn required_len(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        let (rs, cs) = self.strides();
        (self.rows - 1) * rs as usize + (self.cols - 1) * cs as usize + 1
    }
}

/// `C ← α·A·B + β·C` where `C` is `a.rows × b.cols`, row-major with leading
/// dimension `ldc`.
pub(crate) fn gemm<T: Real>(
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "inner dimensions differ");
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() >= a.required_len() && b.data.len() >= b.required_len());
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every accessed element; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// Output columns `t < out_len` for which `t + off` indexes a sequence of `len`.
fn tap_span(off: isize, len: usize, out_len: usize) -> (usize, usize) {
    let a = (-off).max(0) as usize;
    let b = (len as isize - off).min(out_len as isize).max(a as isize) as usize;
    (a, b)
}

/// Unfold `x` (C × L) into `(C·K) × out_len` so that row `c·K + j`, column `t`
/// holds `x[c, t + start + dilation·j]`, or zero outside the sequence.
pub(crate) fn unfold<T: Real>(
    x: &Tensor<T>,
    k: usize,
    dilation: usize,
    start: isize,
    out_len: usize,
) -> Tensor<T> {
    let (ch, len) = (x.dim(0), x.dim(1));
    let mut cols = Tensor::zeros(&[ch * k, out_len]);
    for c in 0..ch {
        for j in 0..k {
            let off = start + (dilation * j) as isize;
            let (a, b) = tap_span(off, len, out_len);
            if a < b {
                let src = &x.row(c)[(a as isize + off) as usize..(b as isize + off) as usize];
                cols.row_mut(c * k + j)[a..b].copy_from_slice(src);
            }
        }
    }
    cols
}

/// Adjoint of [`unfold`]: scatter-add `cols` back into a `ch × len` tensor.
pub(crate) fn fold<T: Real>(
    cols: &Tensor<T>,
    ch: usize,
    len: usize,
    k: usize,
    dilation: usize,
    start: isize,
) -> Tensor<T> {
    let out_len = cols.dim(1);
    let mut gx = Tensor::zeros(&[ch, len]);
    for c in 0..ch {
        for j in 0..k {
            let off = start + (dilation * j) as isize;
            let (a, b) = tap_span(off, len, out_len);
            if a < b {
                let src = &cols.row(c * k + j)[a..b];
                let dst =
                    &mut gx.row_mut(c)[(a as isize + off) as usize..(b as isize + off) as usize];
                for (g, &v) in dst.iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5).collect(); // 3×4
        let mut c = vec![1.0; 8];
        gemm(
            1.0,
            MatRef::new(&a, 2, 3, 3),
            MatRef::new(&b, 3, 4, 4),
            1.0,
            &mut c,
            4,
        );
        for i in 0..2 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], 1.0 + s);
            }
        }
        // Aᵀ·A via the transposed view
        let mut g = vec![0.0; 9];
        gemm(
            1.0,
            MatRef::t(&a, 3, 2, 3),
            MatRef::new(&a, 2, 3, 3),
            0.0,
            &mut g,
            3,
        );
        assert_eq!(g[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(g[5], 1.0 * 2.0 + 4.0 * 5.0);
    }

    #[test]
    fn strided_output_block() {
        let a = [2.0f32];
        let b = [1.0f32, 2.0];
        let mut c = vec![0.0f32; 6];
        gemm(
            1.0,
            MatRef::new(&a, 1, 1, 1),
            MatRef::new(&b, 1, 2, 2),
            0.0,
            &mut c[3..],
            3,
        );
        assert_eq!(c, vec![0.0, 0.0, 0.0, 2.0, 4.0, 0.0]);
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let x =
            Tensor::from_vec(&[2, 7], (0..14).map(|v| f64::from(v) * 0.3 - 1.0).collect()).unwrap();
        let y =
            Tensor::from_vec(&[6, 5], (0..30).map(|v| f64::from(v % 7) - 2.5).collect()).unwrap();
        let lhs: f64 = unfold(&x, 3, 2, -1, 5)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = fold(&y, 2, 7, 3, 2, -1)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
