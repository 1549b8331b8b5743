use rand::Rng;
use rand_distr::StandardNormal;

use super::{cast_vec, matvec, matvec_t_acc, outer_acc, Real};

/// Affine coupling layer.
///
/// The vector is split into `a` (passed through, fed to the network) and
/// `b` (scaled and shifted). Without `swap`, `a` is the first `ceil(D/2)`
/// dimensions; with `swap` the roles of the two halves are exchanged.
///
/// The network is `[x_a; cond] -> tanh -> tanh -> (raw_s, t)` and its last
/// layer starts at zero, so a fresh coupling is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling<T> {
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub swap: bool,
    pub s_max: f64,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: Vec<T>,
}

struct NetTrace<T> {
    input: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    out: Vec<T>,
}

impl<T: Real> Coupling<T> {
    pub fn new<R: Rng>(dim: usize, cond_dim: usize, hidden: usize, swap: bool, s_max: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(dim, cond_dim, hidden, swap, s_max);
        let fan1 = c.na() + cond_dim;
        let s1 = (1.0 / fan1 as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        for v in &mut c.w1 {
            *v = T::c(s1 * rng.sample::<f64, _>(StandardNormal));
        }
        for v in &mut c.w2 {
            *v = T::c(s2 * rng.sample::<f64, _>(StandardNormal));
        }
        c
    }

    pub fn zeros(dim: usize, cond_dim: usize, hidden: usize, swap: bool, s_max: f64) -> Self {
        let split = dim.div_ceil(2);
        let (na, nb) = if swap { (dim - split, split) } else { (split, dim - split) };
        let z = |n: usize| vec![T::zero(); n];
        Self {
            dim,
            cond_dim,
            hidden,
            swap,
            s_max,
            w1: z(hidden * (na + cond_dim)),
            b1: z(hidden),
            w2: z(hidden * hidden),
            b2: z(hidden),
            w3: z(2 * nb * hidden),
            b3: z(2 * nb),
        }
    }

    fn split(&self) -> usize {
        self.dim.div_ceil(2)
    }

    /// Size of the pass-through half.
    pub fn na(&self) -> usize {
        if self.swap {
            self.dim - self.split()
        } else {
            self.split()
        }
    }

    /// Size of the transformed half.
    pub fn nb(&self) -> usize {
        self.dim - self.na()
    }

    fn a_range(&self) -> std::ops::Range<usize> {
        if self.swap {
            self.split()..self.dim
        } else {
            0..self.split()
        }
    }

    fn b_range(&self) -> std::ops::Range<usize> {
        if self.swap {
            0..self.split()
        } else {
            self.split()..self.dim
        }
    }

    fn net(&self, x: &[T], cond: &[T]) -> NetTrace<T> {
        let h = self.hidden;
        let mut input = Vec::with_capacity(self.na() + self.cond_dim);
        input.extend_from_slice(&x[self.a_range()]);
        input.extend_from_slice(cond);
        let mut h1 = vec![T::zero(); h];
        matvec(&self.w1, &input, &mut h1);
        for (v, b) in h1.iter_mut().zip(&self.b1) {
            *v = (*v + *b).tanh();
        }
        let mut h2 = vec![T::zero(); h];
        matvec(&self.w2, &h1, &mut h2);
        for (v, b) in h2.iter_mut().zip(&self.b2) {
            *v = (*v + *b).tanh();
        }
        let mut out = vec![T::zero(); 2 * self.nb()];
        matvec(&self.w3, &h2, &mut out);
        for (v, b) in out.iter_mut().zip(&self.b3) {
            *v = *v + *b;
        }
        NetTrace { input, h1, h2, out }
    }

    fn squash(&self, raw: T) -> T {
        let m = T::c(self.s_max);
        m * (raw / m).tanh()
    }

    pub fn forward(&self, x: &[T], cond: &[T], y: &mut [T]) -> T {
        let wide: Vec<f64> = x.iter().map(|v| v.w()).collect();
        self.forward_wide(&wide, cond, y)
    }

    pub fn inverse(&self, y: &[T], cond: &[T], x: &mut [T]) {
        let mut wide = vec![0.0; y.len()];
        self.inverse_wide(y, cond, &mut wide);
        for (o, v) in x.iter_mut().zip(wide) {
            *o = T::c(v);
        }
    }

    /// Forward map from a double-precision input. The network sees the
    /// pass-through half rounded to `T`, exactly as it appears in `y`.
    pub fn forward_wide(&self, x: &[f64], cond: &[T], y: &mut [T]) -> T {
        for (o, v) in y.iter_mut().zip(x) {
            *o = T::c(*v);
        }
        let trace = self.net(y, cond);
        let nb = self.nb();
        let mut logdet = T::zero();
        for (j, i) in self.b_range().enumerate() {
            let s = self.squash(trace.out[j]);
            y[i] = T::c(x[i] * s.w().exp() + trace.out[nb + j].w());
            logdet = logdet + s;
        }
        logdet
    }

    /// Inverse map into a double-precision output.
    pub fn inverse_wide(&self, y: &[T], cond: &[T], x: &mut [f64]) {
        // the a-half is untouched, so the network sees the same input
        let trace = self.net(y, cond);
        let nb = self.nb();
        for (o, v) in x.iter_mut().zip(y) {
            *o = v.w();
        }
        for (j, i) in self.b_range().enumerate() {
            let s = self.squash(trace.out[j]);
            x[i] = (y[i].w() - trace.out[nb + j].w()) * (-s.w()).exp();
        }
    }

    /// Backpropagates `dy` and `dlogdet` to `dx`, `dcond` (accumulated) and
    /// parameter gradients (accumulated into `grad`).
    pub fn backward(&self, x: &[T], cond: &[T], dy: &[T], dlogdet: T, dx: &mut [T], dcond: &mut [T], grad: &mut Self) {
        let trace = self.net(x, cond);
        let nb = self.nb();
        let h = self.hidden;
        let m = T::c(self.s_max);
        dx.copy_from_slice(dy);
        let mut dout = vec![T::zero(); 2 * nb];
        for (j, i) in self.b_range().enumerate() {
            let th = (trace.out[j] / m).tanh();
            let s = m * th;
            let es = s.exp();
            dx[i] = dy[i] * es;
            let ds = dy[i] * x[i] * es + dlogdet;
            dout[j] = ds * (T::one() - th * th);
            dout[nb + j] = dy[i];
        }
        outer_acc(&mut grad.w3, &dout, &trace.h2);
        for (g, d) in grad.b3.iter_mut().zip(&dout) {
            *g = *g + *d;
        }
        let mut dh2 = vec![T::zero(); h];
        matvec_t_acc(&self.w3, &dout, &mut dh2);
        for (d, v) in dh2.iter_mut().zip(&trace.h2) {
            *d = *d * (T::one() - *v * *v);
        }
        outer_acc(&mut grad.w2, &dh2, &trace.h1);
        for (g, d) in grad.b2.iter_mut().zip(&dh2) {
            *g = *g + *d;
        }
        let mut dh1 = vec![T::zero(); h];
        matvec_t_acc(&self.w2, &dh2, &mut dh1);
        for (d, v) in dh1.iter_mut().zip(&trace.h1) {
            *d = *d * (T::one() - *v * *v);
        }
        outer_acc(&mut grad.w1, &dh1, &trace.input);
        for (g, d) in grad.b1.iter_mut().zip(&dh1) {
            *g = *g + *d;
        }
        let mut din = vec![T::zero(); trace.input.len()];
        matvec_t_acc(&self.w1, &dh1, &mut din);
        let na = self.na();
        for (k, i) in self.a_range().enumerate() {
            dx[i] = dx[i] + din[k];
        }
        for (d, v) in dcond.iter_mut().zip(&din[na..]) {
            *d = *d + *v;
        }
    }

    pub fn blocks(&self) -> [(&'static str, &Vec<T>); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<T>); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    pub fn cast<U: Real>(&self) -> Coupling<U> {
        Coupling {
            dim: self.dim,
            cond_dim: self.cond_dim,
            hidden: self.hidden,
            swap: self.swap,
            s_max: self.s_max,
            w1: cast_vec(&self.w1),
            b1: cast_vec(&self.b1),
            w2: cast_vec(&self.w2),
            b2: cast_vec(&self.b2),
            w3: cast_vec(&self.w3),
            b3: cast_vec(&self.b3),
        }
    }
}
