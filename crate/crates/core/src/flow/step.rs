use rand::Rng;

use super::{all_finite, ActNorm, Coupling, FlowError, InvertibleLinear, Real};

/// One flow step: actnorm, invertible linear, affine coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep<T> {
    pub actnorm: ActNorm<T>,
    pub linear: InvertibleLinear<T>,
    pub coupling: Coupling<T>,
}

fn check<T: Real>(v: &[T], step: usize, stage: &'static str) -> Result<(), FlowError> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(FlowError::NonFinite { step, stage })
    }
}

impl<T: Real> FlowStep<T> {
    /// Random orthogonal linear map, identity actnorm, zero coupling output.
    pub fn new<R: Rng>(index: usize, dim: usize, cond_dim: usize, hidden: usize, s_max: f64, rng: &mut R) -> Self {
        Self {
            actnorm: ActNorm::identity(dim),
            linear: InvertibleLinear::random_orthogonal(dim, rng),
            coupling: Coupling::new(dim, cond_dim, hidden, index % 2 == 1, s_max, rng),
        }
    }

    /// Exact identity map.
    pub fn identity<R: Rng>(index: usize, dim: usize, cond_dim: usize, hidden: usize, s_max: f64, rng: &mut R) -> Self {
        Self {
            actnorm: ActNorm::identity(dim),
            linear: InvertibleLinear::identity(dim),
            coupling: Coupling::new(dim, cond_dim, hidden, index % 2 == 1, s_max, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.actnorm.dim()
    }

    /// Input to the coupling stage; used by actnorm initialization of later steps.
    pub fn pre_coupling(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let mut x1 = vec![T::zero(); d];
        let mut x2 = vec![T::zero(); d];
        self.actnorm.forward(x, &mut x1);
        self.linear.forward(&x1, &mut x2);
        (x1, x2)
    }

    /// Actnorm and the linear map run in double precision; values are
    /// rounded to `T` only where the coupling network reads them and at the
    /// step output.
    pub fn forward(&self, index: usize, x: &[T], cond: &[T], y: &mut [T]) -> Result<T, FlowError> {
        let d = self.dim();
        let (actnorm, linear) = (self.actnorm.cast::<f64>(), self.linear.cast::<f64>());
        let xw: Vec<f64> = x.iter().map(|v| v.w()).collect();
        let mut x1 = vec![0.0; d];
        let mut x2 = vec![0.0; d];
        let mut ld = T::c(actnorm.forward(&xw, &mut x1));
        check(&x1, index, "actnorm")?;
        ld = ld + T::c(linear.forward(&x1, &mut x2));
        check(&x2, index, "linear")?;
        ld = ld + self.coupling.forward_wide(&x2, cond, y);
        check(y, index, "coupling")?;
        if !ld.is_finite() {
            return Err(FlowError::NonFinite { step: index, stage: "logdet" });
        }
        Ok(ld)
    }

    pub fn inverse(&self, index: usize, y: &[T], cond: &[T], x: &mut [T]) -> Result<(), FlowError> {
        let d = self.dim();
        let (actnorm, linear) = (self.actnorm.cast::<f64>(), self.linear.cast::<f64>());
        let mut x2 = vec![0.0; d];
        let mut x1 = vec![0.0; d];
        let mut xw = vec![0.0; d];
        self.coupling.inverse_wide(y, cond, &mut x2);
        check(&x2, index, "coupling")?;
        linear.inverse(&x2, &mut x1);
        check(&x1, index, "linear")?;
        actnorm.inverse(&x1, &mut xw);
        for (o, v) in x.iter_mut().zip(xw) {
            *o = T::c(v);
        }
        check(x, index, "actnorm")
    }

    /// Reverse-mode pass for one frame. `x` is the step input; `dcond` and
    /// `grad` are accumulated.
    pub fn backward(&self, x: &[T], cond: &[T], dy: &[T], dlogdet: T, dx: &mut [T], dcond: &mut [T], grad: &mut Self) {
        let d = self.dim();
        let (x1, x2) = self.pre_coupling(x);
        let mut dx2 = vec![T::zero(); d];
        self.coupling
            .backward(&x2, cond, dy, dlogdet, &mut dx2, dcond, &mut grad.coupling);
        let mut dx1 = vec![T::zero(); d];
        self.linear.backward(&x1, &dx2, dlogdet, &mut dx1, &mut grad.linear);
        self.actnorm.backward(x, &dx1, dlogdet, dx, &mut grad.actnorm);
    }

    pub fn cast<U: Real>(&self) -> FlowStep<U> {
        FlowStep {
            actnorm: self.actnorm.cast(),
            linear: self.linear.cast(),
            coupling: self.coupling.cast(),
        }
    }
}
