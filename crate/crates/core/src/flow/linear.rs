use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{cast_vec, Real};

/// Smallest allowed `|diag(U)|`.
pub const MIN_DIAG: f64 = 1e-8;

/// Invertible linear map `W = P L U` with a fixed permutation `P`, unit
/// lower-triangular `L` and upper-triangular `U` whose diagonal is
/// `sign * exp(log_diag)`. `log|det W| = sum(log_diag)`.
///
/// `lower` and `upper` store only the strictly triangular entries, packed
/// row by row (lower) and column by column (upper).
#[derive(Debug, Clone, PartialEq)]
pub struct InvertibleLinear<T> {
    /// `y[i] = (L U x)[perm[i]]`
    pub perm: Vec<usize>,
    pub sign: Vec<T>,
    pub log_diag: Vec<T>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

#[inline]
fn li(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

#[inline]
fn ui(i: usize, j: usize) -> usize {
    debug_assert!(i < j);
    j * (j - 1) / 2 + i
}

impl<T: Real> InvertibleLinear<T> {
    pub fn identity(dim: usize) -> Self {
        let tri = dim * dim.saturating_sub(1) / 2;
        Self {
            perm: (0..dim).collect(),
            sign: vec![T::one(); dim],
            log_diag: vec![T::zero(); dim],
            lower: vec![T::zero(); tri],
            upper: vec![T::zero(); tri],
        }
    }

    /// LU factors of a random orthogonal matrix.
    pub fn random_orthogonal<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
        let q = a.qr().q();
        Self::from_matrix(&q)
    }

    /// Factorizes an invertible matrix with partial pivoting.
    pub fn from_matrix(a: &DMatrix<f64>) -> Self {
        let dim = a.nrows();
        let (p, l, u) = a.clone().lu().unpack();
        let mut idx = nalgebra::DVector::<f64>::from_iterator(dim, (0..dim).map(|i| i as f64));
        p.permute_rows(&mut idx);
        // (L U)_i = A_{q_i}  =>  y_{q_i} = v_i
        let mut perm = vec![0; dim];
        for (i, &q) in idx.iter().enumerate() {
            perm[q as usize] = i;
        }
        let mut out = Self::identity(dim);
        out.perm = perm;
        for i in 0..dim {
            let d = u[(i, i)];
            out.sign[i] = T::c(d.signum());
            out.log_diag[i] = T::c(d.abs().max(MIN_DIAG).ln());
            for j in 0..i {
                out.lower[li(i, j)] = T::c(l[(i, j)]);
            }
            for j in i + 1..dim {
                out.upper[ui(i, j)] = T::c(u[(i, j)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    fn diag(&self, i: usize) -> T {
        self.sign[i] * self.log_diag[i].exp()
    }

    fn apply_u(&self, x: &[T], u: &mut [T]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = self.diag(i) * x[i];
            for j in i + 1..n {
                acc = acc + self.upper[ui(i, j)] * x[j];
            }
            u[i] = acc;
        }
    }

    fn apply_l(&self, u: &[T], v: &mut [T]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = u[i];
            for j in 0..i {
                acc = acc + self.lower[li(i, j)] * u[j];
            }
            v[i] = acc;
        }
    }

    pub fn log_det(&self) -> T {
        self.log_diag.iter().copied().sum()
    }

    pub fn forward(&self, x: &[T], y: &mut [T]) -> T {
        let n = self.dim();
        let mut u = vec![T::zero(); n];
        let mut v = vec![T::zero(); n];
        self.apply_u(x, &mut u);
        self.apply_l(&u, &mut v);
        for i in 0..n {
            y[i] = v[self.perm[i]];
        }
        self.log_det()
    }

    pub fn inverse(&self, y: &[T], x: &mut [T]) {
        let n = self.dim();
        let mut v = vec![T::zero(); n];
        for i in 0..n {
            v[self.perm[i]] = y[i];
        }
        // L u = v
        let mut u = vec![T::zero(); n];
        for i in 0..n {
            let mut acc = v[i];
            for j in 0..i {
                acc = acc - self.lower[li(i, j)] * u[j];
            }
            u[i] = acc;
        }
        // U x = u
        for i in (0..n).rev() {
            let mut acc = u[i];
            for j in i + 1..n {
                acc = acc - self.upper[ui(i, j)] * x[j];
            }
            x[i] = acc / self.diag(i);
        }
    }

    pub fn backward(&self, x: &[T], dy: &[T], dlogdet: T, dx: &mut [T], grad: &mut Self) {
        let n = self.dim();
        let mut u = vec![T::zero(); n];
        self.apply_u(x, &mut u);
        let mut dv = vec![T::zero(); n];
        for i in 0..n {
            dv[self.perm[i]] = dy[i];
        }
        let mut du = dv.clone();
        for i in 0..n {
            for j in 0..i {
                let k = li(i, j);
                grad.lower[k] = grad.lower[k] + dv[i] * u[j];
                du[j] = du[j] + self.lower[k] * dv[i];
            }
        }
        for j in 0..n {
            let d = self.diag(j);
            grad.log_diag[j] = grad.log_diag[j] + du[j] * d * x[j] + dlogdet;
            let mut acc = d * du[j];
            for i in 0..j {
                let k = ui(i, j);
                grad.upper[k] = grad.upper[k] + du[i] * x[j];
                acc = acc + self.upper[k] * du[i];
            }
            dx[j] = acc;
        }
    }

    /// Keeps `|diag(U)| >= MIN_DIAG` after an optimizer update.
    pub fn clamp_diagonal(&mut self) {
        let floor = T::c(MIN_DIAG.ln());
        for d in &mut self.log_diag {
            if *d < floor {
                *d = floor;
            }
        }
    }

    /// Dense `W`, row-major.
    pub fn dense(&self) -> Vec<T> {
        let n = self.dim();
        let mut w = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            self.forward(&e, &mut col);
            for i in 0..n {
                w[i * n + j] = col[i];
            }
        }
        w
    }

    /// Trainable parameter blocks. `perm` and `sign` are fixed at init.
    pub fn blocks(&self) -> [(&'static str, &Vec<T>); 3] {
        [("log_diag", &self.log_diag), ("lower", &self.lower), ("upper", &self.upper)]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<T>); 3] {
        [("log_diag", &mut self.log_diag), ("lower", &mut self.lower), ("upper", &mut self.upper)]
    }

    pub fn cast<U: Real>(&self) -> InvertibleLinear<U> {
        InvertibleLinear {
            perm: self.perm.clone(),
            sign: cast_vec(&self.sign),
            log_diag: cast_vec(&self.log_diag),
            lower: cast_vec(&self.lower),
            upper: cast_vec(&self.upper),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factorization_reproduces_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::<f64>::from_fn(6, 6, |_, _| rng.sample(StandardNormal));
        let lin = InvertibleLinear::<f64>::from_matrix(&a);
        let w = lin.dense();
        for i in 0..6 {
            for j in 0..6 {
                assert!((w[i * 6 + j] - a[(i, j)]).abs() < 1e-12);
            }
        }
        let det = a.determinant().abs().ln();
        assert!((lin.log_det() - det).abs() < 1e-10);
    }

    #[test]
    fn inverse_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = InvertibleLinear::<f64>::random_orthogonal(9, &mut rng);
        let mut lin2 = lin.clone();
        for v in lin2.upper.iter_mut().chain(lin2.lower.iter_mut()) {
            *v += rng.random_range(-0.3..0.3);
        }
        let w = DMatrix::from_row_slice(9, 9, &lin2.dense());
        let y: Vec<f64> = (0..9).map(|_| rng.sample(StandardNormal)).collect();
        let solved = w.lu().solve(&nalgebra::DVector::from_vec(y.clone())).unwrap();
        let mut x = vec![0.0; 9];
        lin2.inverse(&y, &mut x);
        for i in 0..9 {
            assert!((x[i] - solved[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_init_has_unit_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = InvertibleLinear::<f64>::random_orthogonal(12, &mut rng);
        assert!(lin.log_det().abs() < 1e-10);
    }

    #[test]
    fn diagonal_clamp() {
        let mut lin = InvertibleLinear::<f64>::identity(3);
        lin.log_diag[1] = -40.0;
        lin.clamp_diagonal();
        assert!(lin.log_diag[1].exp() >= MIN_DIAG * (1.0 - 1e-12));
    }
}
