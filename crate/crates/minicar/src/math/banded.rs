//! Banded LU factorization with partial pivoting.
//!
//! Storage follows the LAPACK general-band convention: a matrix with lower
//! bandwidth `kl` and upper bandwidth `ku` is stored column-major in a
//! `(2*kl + ku + 1) x n` array, with `kl` extra superdiagonals reserved for
//! the fill-in produced by row pivoting. Factoring and solving cost
//! `O(n * kl * (kl + ku))`, which keeps horizon-structured KKT systems linear
//! in the horizon length.

/// General banded matrix with in-place LU support.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
    ipiv: Vec<usize>,
    factored: bool,
}

/// The factorization hit an exactly zero pivot; the matrix is singular to
/// working precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingularMatrix {
    pub column: usize,
}

impl std::fmt::Display for SingularMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "zero pivot in band column {}", self.column)
    }
}

impl std::error::Error for SingularMatrix {}

impl BandMatrix {
    /// Zero matrix of size `n` with bandwidths `kl`, `ku`.
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        BandMatrix {
            n,
            kl,
            ku,
            ldab,
            data: vec![0.0; ldab * n],
            ipiv: vec![0; n],
            factored: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku + self.kl >= j && j + self.kl >= i, "({i},{j}) outside band");
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    /// Entry accessor; `(i, j)` must lie inside the stored band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// True when `(i, j)` lies within the logical band `|i - j| <= kl/ku`.
    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        (j <= i + self.ku) && (i <= j + self.kl)
    }

    /// `out = A x` for an unfactored band.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        assert!(!self.factored, "matrix holds LU factors, not A");
        assert_eq!(x.len(), self.n);
        assert_eq!(out.len(), self.n);
        out.fill(0.0);
        for j in 0..self.n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                out[i] += self.data[self.idx(i, j)] * xj;
            }
        }
    }

    /// Replaces equation `k` by `x_k = value`: moves column `k` times `value`
    /// to the right-hand side, zeroes row and column `k`, and puts a one on
    /// the diagonal. Only valid before factorization.
    pub fn eliminate_variable(&mut self, k: usize, value: f64, rhs: &mut [f64]) {
        assert!(!self.factored, "matrix holds LU factors, not A");
        let lo = k.saturating_sub(self.ku);
        let hi = (k + self.kl).min(self.n - 1);
        for i in lo..=hi {
            let idx = self.idx(i, k);
            if i != k {
                rhs[i] -= self.data[idx] * value;
            }
            self.data[idx] = 0.0;
        }
        let lo = k.saturating_sub(self.kl);
        let hi = (k + self.ku).min(self.n - 1);
        for j in lo..=hi {
            let idx = self.idx(k, j);
            self.data[idx] = 0.0;
        }
        let idx = self.idx(k, k);
        self.data[idx] = 1.0;
        rhs[k] = value;
    }

    /// LU factorization with partial pivoting (unblocked, LAPACK `gbtf2`
    /// style). The factors overwrite the band in place.
    pub fn factorize(&mut self) -> Result<(), SingularMatrix> {
        assert!(!self.factored, "already factored");
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku; // width of U's band after fill-in
        for j in 0..n {
            let km = kl.min(n - 1 - j); // active subdiagonal rows
            // pivot search in column j among rows j..=j+km
            let base = j * ldab + kv;
            let mut p = 0;
            let mut best = self.data[base].abs();
            for i in 1..=km {
                let a = self.data[base + i].abs();
                if a > best {
                    best = a;
                    p = i;
                }
            }
            self.ipiv[j] = j + p;
            if best == 0.0 {
                return Err(SingularMatrix { column: j });
            }
            if p != 0 {
                // swap rows j and j+p across columns j..=min(j+kv, n-1)
                let cmax = (j + kv).min(n - 1);
                for c in j..=cmax {
                    let a = c * ldab + (kv + j - c);
                    let b = c * ldab + (kv + j + p - c);
                    self.data.swap(a, b);
                }
            }
            let piv = self.data[base];
            for i in 1..=km {
                self.data[base + i] /= piv;
            }
            let cmax = (j + kv).min(n - 1);
            for c in (j + 1)..=cmax {
                let f = self.data[c * ldab + (kv + j - c)];
                if f != 0.0 {
                    for i in 1..=km {
                        self.data[c * ldab + (kv + j + i - c)] -=
                            f * self.data[base + i];
                    }
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `A x = b` in place using the stored factors.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert!(self.factored, "factorize first");
        assert_eq!(b.len(), self.n);
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku;
        // forward: P and L
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for i in 1..=km {
                    b[j + i] -= self.data[j * ldab + kv + i] * bj;
                }
            }
        }
        // backward: U (bandwidth kl + ku)
        for j in (0..n).rev() {
            b[j] /= self.data[j * ldab + kv];
            let bj = b[j];
            if bj != 0.0 {
                let imin = j.saturating_sub(kv);
                for i in imin..j {
                    b[i] -= self.data[j * ldab + (kv + i - j)] * bj;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, kl: usize, ku: usize, rng: &mut ChaCha8Rng) -> (BandMatrix, DMatrix<f64>) {
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if band.in_band(i, j) {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    band.set(i, j, v);
                    dense[(i, j)] = v;
                }
            }
        }
        // strengthen the diagonal enough to be comfortably nonsingular
        for i in 0..n {
            let bump = if i % 3 == 0 { -2.5 } else { 2.5 };
            band.add(i, i, bump);
            dense[(i, i)] += bump;
        }
        (band, dense)
    }

    #[test]
    fn matches_dense_lu_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, kl, ku) in &[(1usize, 0usize, 0usize), (5, 1, 2), (40, 3, 3), (120, 7, 5)] {
            let (mut band, dense) = random_banded(n, kl, ku, &mut rng);
            let b: DVector<f64> = DVector::from_fn(n, |i, _| (i as f64 * 0.37).sin());
            band.factorize().unwrap();
            let mut x = b.as_slice().to_vec();
            band.solve_in_place(&mut x);
            let xd = dense.clone().lu().solve(&b).unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - xd[i]).abs() < 1e-9 * (1.0 + xd[i].abs()),
                    "n={n} i={i}: {} vs {}",
                    x[i],
                    xd[i]
                );
            }
        }
    }

    #[test]
    fn handles_indefinite_kkt_like_systems() {
        // [H C^T; C 0] saddle-point structure interleaved as it appears in
        // horizon problems: requires pivoting (zero diagonal entries).
        let n = 9; // 3 blocks of (2 vars + 1 multiplier)
        let mut band = BandMatrix::zeros(n, 4, 4);
        let mut dense = DMatrix::zeros(n, n);
        let put = |band: &mut BandMatrix, dense: &mut DMatrix<f64>, i: usize, j: usize, v: f64| {
            band.set(i, j, v);
            dense[(i, j)] = v;
        };
        for blk in 0..3 {
            let o = blk * 3;
            put(&mut band, &mut dense, o, o, 2.0);
            put(&mut band, &mut dense, o + 1, o + 1, 3.0);
            put(&mut band, &mut dense, o, o + 1, 0.5);
            put(&mut band, &mut dense, o + 1, o, 0.5);
            // constraint row couples this block and the next block's first var
            put(&mut band, &mut dense, o + 2, o, 1.0);
            put(&mut band, &mut dense, o, o + 2, 1.0);
            put(&mut band, &mut dense, o + 2, o + 1, -1.0);
            put(&mut band, &mut dense, o + 1, o + 2, -1.0);
            if blk < 2 {
                put(&mut band, &mut dense, o + 2, o + 3, 0.7);
                put(&mut band, &mut dense, o + 3, o + 2, 0.7);
            }
        }
        let b = DVector::from_fn(n, |i, _| 1.0 + i as f64);
        band.factorize().unwrap();
        let mut x = b.as_slice().to_vec();
        band.solve_in_place(&mut x);
        let xd = dense.lu().solve(&b).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-10, "i={i}");
        }
    }

    #[test]
    fn reports_singularity() {
        let mut band = BandMatrix::zeros(3, 1, 1);
        band.set(0, 0, 1.0);
        band.set(1, 1, 0.0);
        band.set(2, 2, 1.0);
        assert!(band.factorize().is_err());
    }
}
