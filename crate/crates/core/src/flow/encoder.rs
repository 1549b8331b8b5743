use rand::Rng;
use rand_distr::StandardNormal;

use super::{cast_vec, matvec, matvec_t_acc, outer_acc, sigmoid, Real};

/// Single-layer GRU followed by a linear read-out to the conditioning width.
///
/// Gate layout in the stacked weight matrices is `[r; z; n]`:
///
/// ```text
/// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
/// cond = W_o h' + b_o
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningEncoder<T> {
    pub input_dim: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub w_ih: Vec<T>,
    pub w_hh: Vec<T>,
    pub b_ih: Vec<T>,
    pub b_hh: Vec<T>,
    pub w_out: Vec<T>,
    pub b_out: Vec<T>,
}

/// Activations of one recurrent step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct GruCache<T> {
    pub h_prev: Vec<T>,
    pub r: Vec<T>,
    pub z: Vec<T>,
    pub n: Vec<T>,
    /// `W_hn h + b_hn`
    pub hn: Vec<T>,
    pub h: Vec<T>,
}

impl<T: Real> ConditioningEncoder<T> {
    pub fn zeros(input_dim: usize, hidden: usize, cond_dim: usize) -> Self {
        let z = |n: usize| vec![T::zero(); n];
        Self {
            input_dim,
            hidden,
            cond_dim,
            w_ih: z(3 * hidden * input_dim),
            w_hh: z(3 * hidden * hidden),
            b_ih: z(3 * hidden),
            b_hh: z(3 * hidden),
            w_out: z(cond_dim * hidden),
            b_out: z(cond_dim),
        }
    }

    pub fn new<R: Rng>(input_dim: usize, hidden: usize, cond_dim: usize, rng: &mut R) -> Self {
        let mut e = Self::zeros(input_dim, hidden, cond_dim);
        let k = 1.0 / (hidden as f64).sqrt();
        for v in e
            .w_ih
            .iter_mut()
            .chain(e.w_hh.iter_mut())
            .chain(e.b_ih.iter_mut())
            .chain(e.b_hh.iter_mut())
        {
            *v = T::c(rng.random_range(-k..k));
        }
        for v in &mut e.w_out {
            *v = T::c(k * rng.sample::<f64, _>(StandardNormal));
        }
        e
    }

    pub fn initial_state(&self) -> Vec<T> {
        vec![T::zero(); self.hidden]
    }

    fn gru(&self, h_prev: &[T], x: &[T]) -> GruCache<T> {
        let hs = self.hidden;
        let mut gi = vec![T::zero(); 3 * hs];
        let mut gh = vec![T::zero(); 3 * hs];
        matvec(&self.w_ih, x, &mut gi);
        matvec(&self.w_hh, h_prev, &mut gh);
        let mut r = vec![T::zero(); hs];
        let mut z = vec![T::zero(); hs];
        let mut n = vec![T::zero(); hs];
        let mut hn = vec![T::zero(); hs];
        let mut h = vec![T::zero(); hs];
        for i in 0..hs {
            r[i] = sigmoid(gi[i] + self.b_ih[i] + gh[i] + self.b_hh[i]);
            z[i] = sigmoid(gi[hs + i] + self.b_ih[hs + i] + gh[hs + i] + self.b_hh[hs + i]);
            hn[i] = gh[2 * hs + i] + self.b_hh[2 * hs + i];
            n[i] = (gi[2 * hs + i] + self.b_ih[2 * hs + i] + r[i] * hn[i]).tanh();
            h[i] = (T::one() - z[i]) * n[i] + z[i] * h_prev[i];
        }
        GruCache {
            h_prev: h_prev.to_vec(),
            r,
            z,
            n,
            hn,
            h,
        }
    }

    fn readout(&self, h: &[T]) -> Vec<T> {
        let mut cond = vec![T::zero(); self.cond_dim];
        matvec(&self.w_out, h, &mut cond);
        for (c, b) in cond.iter_mut().zip(&self.b_out) {
            *c = *c + *b;
        }
        cond
    }

    /// Advances the state by one frame and returns the conditioning vector.
    pub fn step(&self, state: &mut Vec<T>, x: &[T]) -> Vec<T> {
        let cache = self.gru(state, x);
        *state = cache.h;
        self.readout(state)
    }

    /// Runs a whole sequence from the zero state.
    pub fn run(&self, inputs: &[Vec<T>]) -> (Vec<Vec<T>>, Vec<GruCache<T>>) {
        let mut h = self.initial_state();
        let mut conds = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let c = self.gru(&h, x);
            conds.push(self.readout(&c.h));
            h.clone_from(&c.h);
            caches.push(c);
        }
        (conds, caches)
    }

    /// Backpropagation through time. Parameter gradients are accumulated
    /// into `grad`; gradients w.r.t. the inputs are not needed.
    pub fn backward(&self, inputs: &[Vec<T>], caches: &[GruCache<T>], dconds: &[Vec<T>], grad: &mut Self) {
        let hs = self.hidden;
        let mut dh_next = vec![T::zero(); hs];
        let mut gi = vec![T::zero(); 3 * hs];
        let mut ghh = vec![T::zero(); 3 * hs];
        for t in (0..caches.len()).rev() {
            let c = &caches[t];
            outer_acc(&mut grad.w_out, &dconds[t], &c.h);
            for (g, d) in grad.b_out.iter_mut().zip(&dconds[t]) {
                *g = *g + *d;
            }
            let mut dh = dh_next.clone();
            matvec_t_acc(&self.w_out, &dconds[t], &mut dh);
            let mut dh_prev = vec![T::zero(); hs];
            for i in 0..hs {
                let dn = dh[i] * (T::one() - c.z[i]);
                let dz = dh[i] * (c.h_prev[i] - c.n[i]);
                dh_prev[i] = dh[i] * c.z[i];
                let dan = dn * (T::one() - c.n[i] * c.n[i]);
                let dr = dan * c.hn[i];
                let dar = dr * c.r[i] * (T::one() - c.r[i]);
                let daz = dz * c.z[i] * (T::one() - c.z[i]);
                gi[i] = dar;
                gi[hs + i] = daz;
                gi[2 * hs + i] = dan;
                ghh[i] = dar;
                ghh[hs + i] = daz;
                ghh[2 * hs + i] = dan * c.r[i];
            }
            outer_acc(&mut grad.w_ih, &gi, &inputs[t]);
            outer_acc(&mut grad.w_hh, &ghh, &c.h_prev);
            for i in 0..3 * hs {
                grad.b_ih[i] = grad.b_ih[i] + gi[i];
                grad.b_hh[i] = grad.b_hh[i] + ghh[i];
            }
            matvec_t_acc(&self.w_hh, &ghh, &mut dh_prev);
            dh_next = dh_prev;
        }
    }

    pub fn blocks(&self) -> [(&'static str, &Vec<T>); 6] {
        [
            ("w_ih", &self.w_ih),
            ("w_hh", &self.w_hh),
            ("b_ih", &self.b_ih),
            ("b_hh", &self.b_hh),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<T>); 6] {
        [
            ("w_ih", &mut self.w_ih),
            ("w_hh", &mut self.w_hh),
            ("b_ih", &mut self.b_ih),
            ("b_hh", &mut self.b_hh),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    pub fn cast<U: Real>(&self) -> ConditioningEncoder<U> {
        ConditioningEncoder {
            input_dim: self.input_dim,
            hidden: self.hidden,
            cond_dim: self.cond_dim,
            w_ih: cast_vec(&self.w_ih),
            w_hh: cast_vec(&self.w_hh),
            b_ih: cast_vec(&self.b_ih),
            b_hh: cast_vec(&self.b_hh),
            w_out: cast_vec(&self.w_out),
            b_out: cast_vec(&self.b_out),
        }
    }
}
