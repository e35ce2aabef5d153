//! Banded LU with partial pivoting (LAPACK `gbtf2`/`gbtrs` layout).
//!
//! Element `(i, j)` of the matrix lives at `ab[(kv + i - j) + j * ldab]`
//! with `kv = kl + ku`; the top `kl` storage rows receive pivoting fill.

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self { n, kl, ku, ldab, ab: vec![0.0; ldab * n] }
    }

    pub fn from_triplets(n: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut kl = 0;
        let mut ku = 0;
        for &(i, j, _) in entries {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let mut m = Self::zeros(n, kl, ku);
        for &(i, j, v) in entries {
            m.add(i, j, v);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        self.kl + self.ku + i - j + j * self.ldab
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(i + self.ku >= j && j + self.kl >= i, "({i}, {j}) outside the band");
        let k = self.idx(i, j);
        self.ab[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i + self.ku >= j && j + self.kl >= i {
            self.ab[self.idx(i, j)]
        } else {
            0.0
        }
    }

    pub fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|j| {
                let lo = j.saturating_sub(self.ku);
                let hi = (j + self.kl).min(self.n - 1);
                (lo..=hi).map(|i| self.get(i, j).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                y[i] += self.get(i, j) * x[j];
            }
        }
        y
    }

    /// Factorizes in place. Fails with the column of the first zero pivot.
    pub fn factor(mut self) -> Result<BandLu, usize> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let kv = kl + ku;
        let ld = self.ldab;
        let mut ipiv = vec![0; n];
        let mut ju = 0;
        let ab = &mut self.ab;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ld;
            let mut jp = 0;
            let mut best = ab[col + kv].abs();
            for p in 1..=km {
                let v = ab[col + kv + p].abs();
                if v > best {
                    best = v;
                    jp = p;
                }
            }
            ipiv[j] = j + jp;
            if best == 0.0 {
                return Err(j);
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = kv + j - c + c * ld;
                    let b = kv + j + jp - c + c * ld;
                    ab.swap(a, b);
                }
            }
            let piv = ab[col + kv];
            for p in 1..=km {
                ab[col + kv + p] /= piv;
            }
            for c in (j + 1)..=ju {
                let t = ab[kv + j - c + c * ld];
                if t != 0.0 {
                    for p in 1..=km {
                        ab[kv + j + p - c + c * ld] -= ab[col + kv + p] * t;
                    }
                }
            }
        }
        Ok(BandLu { m: self, ipiv })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    ipiv: Vec<usize>,
}

impl BandLu {
    #[inline]
    fn at(&self, storage_row: usize, j: usize) -> f64 {
        self.m.ab[storage_row + j * self.m.ldab]
    }

    pub fn solve(&self, b: &mut [f64]) {
        let n = self.m.n;
        let kl = self.m.kl;
        let kv = kl + self.m.ku;
        for j in 0..n.saturating_sub(1) {
            let l = self.ipiv[j];
            if l != j {
                b.swap(l, j);
            }
            let lm = kl.min(n - 1 - j);
            let bj = b[j];
            for p in 1..=lm {
                b[j + p] -= self.at(kv + p, j) * bj;
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.at(kv, j);
            let bj = b[j];
            for i in j.saturating_sub(kv)..j {
                b[i] -= self.at(kv + i - j, j) * bj;
            }
        }
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transposed(&self, b: &mut [f64]) {
        let n = self.m.n;
        let kl = self.m.kl;
        let kv = kl + self.m.ku;
        for j in 0..n {
            let mut acc = b[j];
            for i in j.saturating_sub(kv)..j {
                acc -= self.at(kv + i - j, j) * b[i];
            }
            b[j] = acc / self.at(kv, j);
        }
        for j in (0..n.saturating_sub(1)).rev() {
            let lm = kl.min(n - 1 - j);
            let mut acc = b[j];
            for p in 1..=lm {
                acc -= self.at(kv + p, j) * b[j + p];
            }
            b[j] = acc;
            let l = self.ipiv[j];
            if l != j {
                b.swap(l, j);
            }
        }
    }

    /// Hager's estimate of `‖A⁻¹‖₁`.
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.m.n;
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let mut y = x.clone();
            self.solve(&mut y);
            est = y.iter().map(|v| v.abs()).sum();
            let mut z: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            self.solve_transposed(&mut z);
            let (jmax, zmax) =
                z.iter().enumerate().fold((0, 0.0), |(bj, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bj, bv) });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[jmax] = 1.0;
        }
        est
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn dense(n: usize, t: &[(usize, usize, f64)]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for &(i, j, v) in t {
            m[(i, j)] += v;
        }
        m
    }

    #[test]
    fn zero_diagonal_needs_pivoting() {
        // saddle-point block [[1, 1], [1, 0]] repeated along a chain
        let t = vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 2, 2.0), (2, 1, 2.0), (2, 2, 3.0)];
        let lu = BandMatrix::from_triplets(3, &t).factor().unwrap();
        let mut b = vec![1.0, 2.0, 3.0];
        lu.solve(&mut b);
        let r = dense(3, &t) * nalgebra::DVector::from_vec(b.clone());
        for (got, want) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_detected() {
        let t = vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)];
        assert!(BandMatrix::from_triplets(2, &t).factor().is_err());
    }

    #[test]
    fn condition_estimate_of_diagonal() {
        let t = vec![(0, 0, 1.0), (1, 1, 1e-3), (2, 2, 10.0)];
        let m = BandMatrix::from_triplets(3, &t);
        let norm = m.norm1();
        let lu = m.factor().unwrap();
        assert!((norm * lu.inverse_norm1_estimate() - 1e4).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn matches_dense_solves(
            vals in prop::collection::vec(-1.0f64..1.0, 12 * 5),
            rhs in prop::collection::vec(-1.0f64..1.0, 12),
            kl in 0usize..3, ku in 0usize..3,
        ) {
            let n = 12;
            let mut t = Vec::new();
            for i in 0..n {
                t.push((i, i, 4.0 * vals[i] + if vals[i] >= 0.0 { 0.5 } else { -0.5 }));
                for d in 1..=kl { if i + d < n { t.push((i + d, i, vals[(12 * d + i) % 60])); } }
                for d in 1..=ku { if i + d < n { t.push((i, i + d, vals[(12 * (d + 2) + i) % 60])); } }
            }
            let a = dense(n, &t);
            prop_assume!(a.clone().lu().determinant().abs() > 1e-6);
            let lu = BandMatrix::from_triplets(n, &t).factor().unwrap();
            let b = nalgebra::DVector::from_vec(rhs.clone());
            let want = a.clone().lu().solve(&b).unwrap();
            let want_t = a.transpose().lu().solve(&b).unwrap();
            let mut got = rhs.clone();
            lu.solve(&mut got);
            let mut got_t = rhs.clone();
            lu.solve_transposed(&mut got_t);
            let scale = 1.0 + want.amax().max(want_t.amax());
            for i in 0..n {
                prop_assert!((got[i] - want[i]).abs() < 1e-9 * scale);
                prop_assert!((got_t[i] - want_t[i]).abs() < 1e-9 * scale);
            }
        }
    }
}
