//! Banded LU factorization with partial pivoting, in the classic LAPACK
//! `dgbtrf`/`dgbtrs` layout: `kl` extra superdiagonals are stored for the
//! fill-in produced by row swaps. The scheme Jacobian is block-banded with
//! a handful of diagonals, so this keeps each Newton solve linear in the
//! number of cells.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BandError {
    #[error("matrix is numerically singular at column {0}")]
    Singular(usize),
}

#[derive(Debug, Clone)]
pub struct BandedMatrix {
    dim: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    /// column-major: entry (i, j) lives at `data[j * ldab + kl + ku + i - j]`
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn new(dim: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            dim,
            kl,
            ku,
            ldab,
            data: vec![0.0; dim * ldab],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        j * self.ldab + self.kl + self.ku + i - j
    }

    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.dim && j < self.dim);
        debug_assert!(
            (j as isize - i as isize) <= self.ku as isize
                && (i as isize - j as isize) <= self.kl as isize,
            "entry ({i}, {j}) outside band kl={}, ku={}",
            self.kl,
            self.ku
        );
        let at = self.offset(i, j);
        self.data[at] += value;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if (j as isize - i as isize) > self.ku as isize
            || (i as isize - j as isize) > self.kl as isize
        {
            return 0.0;
        }
        self.data[self.offset(i, j)]
    }

    /// In-place LU factorization with partial pivoting.
    pub fn factor(mut self) -> Result<BandedLu, BandError> {
        let (dim, kl, ku, ldab) = (self.dim, self.kl, self.ku, self.ldab);
        let kv = kl + ku; // superdiagonals in the factored form
        let mut ipiv = vec![0usize; dim];
        for j in 0..dim {
            let km = kl.min(dim - 1 - j);
            // pivot search within column j
            let base = j * ldab + kl + ku;
            let mut jp = 0;
            let mut best = self.data[base].abs();
            for p in 1..=km {
                let a = self.data[base + p].abs();
                if a > best {
                    best = a;
                    jp = p;
                }
            }
            ipiv[j] = j + jp;
            if best == 0.0 {
                return Err(BandError::Singular(j));
            }
            let jend = (j + kv).min(dim - 1);
            if jp != 0 {
                for col in j..=jend {
                    let a = col * ldab + kl + ku + j - col;
                    self.data.swap(a, a + jp);
                }
            }
            if km > 0 {
                let pivot = self.data[base];
                for p in 1..=km {
                    self.data[base + p] /= pivot;
                }
                for col in j + 1..=jend {
                    let up = col * ldab + kl + ku + j - col;
                    let upper = self.data[up];
                    if upper != 0.0 {
                        for p in 1..=km {
                            self.data[up + p] -= self.data[base + p] * upper;
                        }
                    }
                }
            }
        }
        Ok(BandedLu {
            dim,
            kl,
            ku,
            ldab,
            data: self.data,
            ipiv,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BandedLu {
    dim: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    pub fn solve(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.dim);
        let (dim, kl, ku, ldab) = (self.dim, self.kl, self.ku, self.ldab);
        let kv = kl + ku;
        // forward substitution with the stored multipliers
        for j in 0..dim {
            let p = self.ipiv[j];
            if p != j {
                rhs.swap(j, p);
            }
            let km = kl.min(dim - 1 - j);
            let base = j * ldab + kl + ku;
            for q in 1..=km {
                rhs[j + q] -= self.data[base + q] * rhs[j];
            }
        }
        // back substitution on the banded U
        for j in (0..dim).rev() {
            let diag = self.data[j * ldab + kl + ku];
            let x = rhs[j] / diag;
            rhs[j] = x;
            let istart = j.saturating_sub(kv);
            for i in istart..j {
                rhs[i] -= self.data[j * ldab + kl + ku + i - j] * x;
            }
        }
    }
}
