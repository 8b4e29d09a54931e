//! Small dense linear algebra for the channel-mixing matrices (C ≤ 8 in
//! practice): LU with partial pivoting, determinant, inverse and random
//! orthogonal initialisation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Real, Result, Tensor};

/// Packed LU factorisation `P A = L U` of a square matrix.
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: T,
}

impl<T: Real> Lu<T> {
    pub fn new(a: &Tensor<T>) -> Self {
        let n = a.dim(0);
        assert_eq!(a.shape(), &[n, n], "LU needs a square matrix");
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == T::zero() {
                continue;
            }
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    let u = lu[k * n + j];
                    lu[i * n + j] -= f * u;
                }
            }
        }
        Self { n, lu, perm, sign }
    }

    pub fn det(&self) -> T {
        (0..self.n).fold(self.sign, |d, i| d * self.lu[i * self.n + i])
    }

    /// `ln |det A|`.
    pub fn log_abs_det(&self) -> T {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    pub fn is_singular(&self) -> bool {
        (0..self.n).any(|i| self.lu[i * self.n + i] == T::zero())
    }

    fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= l * xj;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= u * xj;
            }
            x[i] /= self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }

    pub fn inverse(&self) -> Result<Tensor<T>> {
        if self.is_singular() {
            return Err(Error::Inversion("matrix is singular".into()));
        }
        let n = self.n;
        let mut inv = Tensor::zeros(&[n, n]);
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = T::zero());
            col[j] = T::one();
            self.solve_in_place(&mut col);
            for (i, &v) in col.iter().enumerate() {
                inv.data_mut()[i * n + j] = v;
            }
        }
        Ok(inv)
    }
}

pub fn det<T: Real>(a: &Tensor<T>) -> T {
    Lu::new(a).det()
}

pub fn inverse<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    Lu::new(a).inverse()
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.dim(0), a.dim(1));
    let mut t = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            t.data_mut()[j * r + i] = a.data()[i * c + j];
        }
    }
    t
}

/// `out = a · b` for `a: (m × k)`, `b: (k × n)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    assert_eq!(b.dim(0), k, "matmul inner dimensions differ");
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b.data()[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Random orthogonal `n × n` matrix with determinant +1 (Gram-Schmidt on a
/// Gaussian draw, last column flipped if needed).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let d: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (a, b) in tail[0].iter_mut().zip(&head[k]) {
                    *a -= d * b;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if !ok {
            continue;
        }
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = cols[j][i];
            }
        }
        let t = Tensor::from_vec(&[n, n], m.clone()).expect("square");
        if det(&t) < 0.0 {
            for i in 0..n {
                m[i * n + n - 1] = -m[i * n + n - 1];
            }
        }
        return m;
    }
}
