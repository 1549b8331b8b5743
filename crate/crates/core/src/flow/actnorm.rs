use super::{cast_vec, FlowError, Real};

/// Per-dimension affine layer `y = x * exp(log_scale) + bias`.
///
/// The scale is stored as its logarithm so it can never reach zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm<T> {
    pub log_scale: Vec<T>,
    pub bias: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> ActNorm<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            log_scale: vec![T::zero(); dim],
            bias: vec![T::zero(); dim],
            initialized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn scale(&self) -> Vec<T> {
        self.log_scale.iter().map(|s| s.exp()).collect()
    }

    /// Data-dependent initialization: afterwards the batch has zero mean and
    /// unit variance per dimension. Returns the number of dimensions whose
    /// standard deviation had to be clamped.
    pub fn initialize(&mut self, batch: &[Vec<T>]) -> Result<usize, FlowError> {
        if batch.len() < 2 {
            return Err(FlowError::TooFewSamples(batch.len()));
        }
        let n = T::c(batch.len() as f64);
        let mut clamped = 0;
        for d in 0..self.dim() {
            let mean = batch.iter().map(|x| x[d]).sum::<T>() / n;
            let var = batch.iter().map(|x| (x[d] - mean).powi(2)).sum::<T>() / n;
            let mut std = var.sqrt();
            if !(std >= T::c(1e-6)) {
                std = T::c(1e-6);
                clamped += 1;
            }
            self.log_scale[d] = -std.ln();
            self.bias[d] = -mean / std;
        }
        if clamped > 0 {
            log::warn!("actnorm: {clamped} zero-variance dimension(s) clamped to std 1e-6");
        }
        self.initialized = true;
        Ok(clamped)
    }

    pub fn forward(&self, x: &[T], y: &mut [T]) -> T {
        for i in 0..x.len() {
            y[i] = x[i] * self.log_scale[i].exp() + self.bias[i];
        }
        self.log_scale.iter().copied().sum()
    }

    pub fn inverse(&self, y: &[T], x: &mut [T]) {
        for i in 0..y.len() {
            x[i] = (y[i] - self.bias[i]) * (-self.log_scale[i]).exp();
        }
    }

    /// Accumulates parameter gradients into `grad` and writes `dx`.
    pub fn backward(&self, x: &[T], dy: &[T], dlogdet: T, dx: &mut [T], grad: &mut Self) {
        for i in 0..x.len() {
            let s = self.log_scale[i].exp();
            dx[i] = dy[i] * s;
            grad.log_scale[i] = grad.log_scale[i] + dy[i] * x[i] * s + dlogdet;
            grad.bias[i] = grad.bias[i] + dy[i];
        }
    }

    pub fn blocks(&self) -> [(&'static str, &Vec<T>); 2] {
        [("log_scale", &self.log_scale), ("bias", &self.bias)]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<T>); 2] {
        [("log_scale", &mut self.log_scale), ("bias", &mut self.bias)]
    }

    pub fn cast<U: Real>(&self) -> ActNorm<U> {
        ActNorm {
            log_scale: cast_vec(&self.log_scale),
            bias: cast_vec(&self.bias),
            initialized: self.initialized,
        }
    }
}
