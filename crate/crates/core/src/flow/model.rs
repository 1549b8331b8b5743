use rand::Rng;
use rayon::prelude::*;

use super::{all_finite, ConditioningEncoder, FlowConfig, FlowError, FlowStep, Real};

/// A contiguous run of frames from one sequence. The encoder state starts
/// at zero at the first frame and is carried through the chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk<T> {
    /// Standardized target pose per frame.
    pub targets: Vec<Vec<T>>,
    /// Encoder input per frame (see [`FlowConfig::encoder_input_dim`]).
    pub inputs: Vec<Vec<T>>,
}

impl<T> Chunk<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    pub config: FlowConfig,
    pub steps: Vec<FlowStep<T>>,
    pub encoder: ConditioningEncoder<T>,
}

/// `0.5 * ln(2 pi)`
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl<T: Real> FlowModel<T> {
    pub fn new<R: Rng>(config: FlowConfig, rng: &mut R) -> Result<Self, FlowError> {
        Self::build(config, rng, FlowStep::new)
    }

    /// Model whose flow is exactly the identity until trained.
    pub fn identity<R: Rng>(config: FlowConfig, rng: &mut R) -> Result<Self, FlowError> {
        Self::build(config, rng, FlowStep::identity)
    }

    fn build<R: Rng>(
        config: FlowConfig,
        rng: &mut R,
        make: fn(usize, usize, usize, usize, f64, &mut R) -> FlowStep<T>,
    ) -> Result<Self, FlowError> {
        config.validate()?;
        let steps = (0..config.steps)
            .map(|k| make(k, config.pose_dim, config.cond_dim, config.coupling_hidden, config.s_max, rng))
            .collect();
        let encoder = ConditioningEncoder::new(config.encoder_input_dim(), config.hidden_size, config.cond_dim, rng);
        Ok(Self { config, steps, encoder })
    }

    pub fn pose_dim(&self) -> usize {
        self.config.pose_dim
    }

    fn check_dims(&self, x: &[T], cond: &[T]) -> Result<(), FlowError> {
        if x.len() != self.pose_dim() || cond.len() != self.config.cond_dim {
            return Err(FlowError::Dimension(format!(
                "pose {} (expected {}), cond {} (expected {})",
                x.len(),
                self.pose_dim(),
                cond.len(),
                self.config.cond_dim
            )));
        }
        Ok(())
    }

    /// Data to latent. Returns `(z, total_logdet)`.
    pub fn forward(&self, x: &[T], cond: &[T]) -> Result<(Vec<T>, T), FlowError> {
        self.check_dims(x, cond)?;
        let mut cur = x.to_vec();
        let mut next = vec![T::zero(); x.len()];
        let mut logdet = T::zero();
        for (k, step) in self.steps.iter().enumerate() {
            logdet = logdet + step.forward(k, &cur, cond, &mut next)?;
            std::mem::swap(&mut cur, &mut next);
        }
        Ok((cur, logdet))
    }

    /// Latent to data.
    pub fn inverse(&self, z: &[T], cond: &[T]) -> Result<Vec<T>, FlowError> {
        self.check_dims(z, cond)?;
        let mut cur = z.to_vec();
        let mut next = vec![T::zero(); z.len()];
        for (k, step) in self.steps.iter().enumerate().rev() {
            step.inverse(k, &cur, cond, &mut next)?;
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Conditioning vectors for every frame of a chunk.
    pub fn encode(&self, inputs: &[Vec<T>]) -> Result<Vec<Vec<T>>, FlowError> {
        if let Some(x) = inputs.iter().find(|x| x.len() != self.encoder.input_dim) {
            return Err(FlowError::Dimension(format!(
                "encoder input {} (expected {})",
                x.len(),
                self.encoder.input_dim
            )));
        }
        let (conds, _) = self.encoder.run(inputs);
        if conds.iter().any(|c| !all_finite(c)) {
            return Err(FlowError::NonFiniteEncoder);
        }
        Ok(conds)
    }

    /// Negative log-likelihood of one frame in nats.
    pub fn frame_nll(&self, z: &[T], logdet: T) -> T {
        let sq: T = z.iter().map(|v| *v * *v).sum();
        T::c(0.5) * sq + T::c(HALF_LN_2PI * z.len() as f64) - logdet
    }

    fn chunk_nll_sum(&self, chunk: &Chunk<T>) -> Result<T, FlowError> {
        let conds = self.encode(&chunk.inputs)?;
        let mut total = T::zero();
        for (x, c) in chunk.targets.iter().zip(&conds) {
            let (z, ld) = self.forward(x, c)?;
            total = total + self.frame_nll(&z, ld);
        }
        Ok(total)
    }

    /// Mean negative log-likelihood per frame over all chunks.
    pub fn nll(&self, chunks: &[Chunk<T>]) -> Result<T, FlowError> {
        let frames: usize = chunks.iter().map(Chunk::len).sum();
        if frames == 0 {
            return Err(FlowError::Dimension("empty batch".into()));
        }
        let sums = chunks
            .par_iter()
            .map(|c| self.chunk_nll_sum(c))
            .collect::<Result<Vec<_>, _>>()?;
        let total = sums.into_iter().fold(T::zero(), |a, b| a + b);
        let loss = total / T::c(frames as f64);
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(FlowError::NonFiniteLoss)
        }
    }

    /// Gradient accumulator with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, b) in g.blocks_mut() {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
        g
    }

    /// Sum of per-frame nll over the chunk and the gradient of that sum scaled by `scale`.
    fn chunk_gradient(&self, chunk: &Chunk<T>, scale: T) -> Result<(T, Self), FlowError> {
        let d = self.pose_dim();
        let mut grad = self.zeros_like();
        let (conds, caches) = self.encoder.run(&chunk.inputs);
        if conds.iter().any(|c| !all_finite(c)) {
            return Err(FlowError::NonFiniteEncoder);
        }
        let mut dconds = vec![vec![T::zero(); self.config.cond_dim]; chunk.len()];
        let mut total = T::zero();
        let mut trace: Vec<Vec<T>> = Vec::with_capacity(self.steps.len());
        for (t, (x, cond)) in chunk.targets.iter().zip(&conds).enumerate() {
            self.check_dims(x, cond)?;
            trace.clear();
            let mut cur = x.clone();
            let mut next = vec![T::zero(); d];
            let mut logdet = T::zero();
            for (k, step) in self.steps.iter().enumerate() {
                logdet = logdet + step.forward(k, &cur, cond, &mut next)?;
                trace.push(cur.clone());
                std::mem::swap(&mut cur, &mut next);
            }
            total = total + self.frame_nll(&cur, logdet);
            // d nll / d z = z, d nll / d logdet = -1
            let mut dy: Vec<T> = cur.iter().map(|v| *v * scale).collect();
            let dld = -scale;
            let mut dx = vec![T::zero(); d];
            for (k, step) in self.steps.iter().enumerate().rev() {
                step.backward(&trace[k], cond, &dy, dld, &mut dx, &mut dconds[t], &mut grad.steps[k]);
                std::mem::swap(&mut dy, &mut dx);
            }
        }
        self.encoder
            .backward(&chunk.inputs, &caches, &dconds, &mut grad.encoder);
        Ok((total, grad))
    }

    /// Mean nll and its exact gradient with respect to every parameter.
    /// Chunks are processed in parallel and reduced in order, so the result
    /// does not depend on the thread count.
    pub fn gradients(&self, chunks: &[Chunk<T>]) -> Result<(T, Self), FlowError> {
        let frames: usize = chunks.iter().map(Chunk::len).sum();
        if frames == 0 {
            return Err(FlowError::Dimension("empty batch".into()));
        }
        let scale = T::one() / T::c(frames as f64);
        let parts = chunks
            .par_iter()
            .map(|c| self.chunk_gradient(c, scale))
            .collect::<Result<Vec<_>, _>>()?;
        let mut grad = self.zeros_like();
        let mut total = T::zero();
        for (sum, g) in parts {
            total = total + sum;
            for ((_, acc), (_, part)) in grad.blocks_mut().into_iter().zip(g.blocks()) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a = *a + *p;
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(FlowError::NonFiniteLoss);
        }
        for (name, block) in grad.blocks() {
            if !all_finite(block) {
                return Err(FlowError::NonFiniteGradient(name));
            }
        }
        Ok((loss, grad))
    }

    /// Data-dependent actnorm initialization, step by step, on the frames of
    /// `chunks`. Returns the number of clamped dimensions over all steps.
    pub fn init_actnorm(&mut self, chunks: &[Chunk<T>]) -> Result<usize, FlowError> {
        let mut conds = Vec::new();
        let mut acts = Vec::new();
        for c in chunks {
            conds.extend(self.encode(&c.inputs)?);
            acts.extend(c.targets.iter().cloned());
        }
        let mut clamped = 0;
        let d = self.pose_dim();
        for k in 0..self.steps.len() {
            clamped += self.steps[k].actnorm.initialize(&acts)?;
            let step = &self.steps[k];
            let mut next = vec![T::zero(); d];
            for (a, c) in acts.iter_mut().zip(&conds) {
                step.forward(k, a, c, &mut next)?;
                a.copy_from_slice(&next);
            }
        }
        Ok(clamped)
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.steps.iter().all(|s| s.actnorm.initialized)
    }

    /// Named trainable parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for (k, s) in self.steps.iter().enumerate() {
            for (n, b) in s.actnorm.blocks() {
                out.push((format!("step{k}.actnorm.{n}"), b));
            }
            for (n, b) in s.linear.blocks() {
                out.push((format!("step{k}.linear.{n}"), b));
            }
            for (n, b) in s.coupling.blocks() {
                out.push((format!("step{k}.coupling.{n}"), b));
            }
        }
        for (n, b) in self.encoder.blocks() {
            out.push((format!("encoder.{n}"), b));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (k, s) in self.steps.iter_mut().enumerate() {
            for (n, b) in s.actnorm.blocks_mut() {
                out.push((format!("step{k}.actnorm.{n}"), b));
            }
            for (n, b) in s.linear.blocks_mut() {
                out.push((format!("step{k}.linear.{n}"), b));
            }
            for (n, b) in s.coupling.blocks_mut() {
                out.push((format!("step{k}.coupling.{n}"), b));
            }
        }
        for (n, b) in self.encoder.blocks_mut() {
            out.push((format!("encoder.{n}"), b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.blocks().into_iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<(), FlowError> {
        if flat.len() != self.param_count() {
            return Err(FlowError::Dimension(format!(
                "flat parameters {} (expected {})",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for (_, b) in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Re-establishes parameter constraints after an optimizer update.
    pub fn enforce_constraints(&mut self) {
        for s in &mut self.steps {
            s.linear.clamp_diagonal();
        }
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel {
            config: self.config.clone(),
            steps: self.steps.iter().map(FlowStep::cast).collect(),
            encoder: self.encoder.cast(),
        }
    }
}

impl FlowModel<f64> {
    pub fn to_f32(&self) -> FlowModel<f32> {
        self.cast()
    }
}

/// Per-frame encoder input: the `H` history poses, then the speech window.
pub fn encoder_input<T: Real>(history: &[&[T]], context: &[&[T]]) -> Vec<T> {
    let n = history.iter().chain(context).map(|v| v.len()).sum();
    let mut out = Vec::with_capacity(n);
    for v in history.iter().chain(context) {
        out.extend_from_slice(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Model with every parameter perturbed away from its initial value.
    fn random_model(cfg: FlowConfig, seed: u64) -> FlowModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FlowModel::new(cfg, &mut rng).unwrap();
        let mut flat = m.to_flat();
        for v in &mut flat {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        m.load_flat(&flat).unwrap();
        m
    }

    fn random_chunks(m: &FlowModel<f64>, rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Chunk<f64>> {
        (0..n)
            .map(|_| Chunk {
                targets: (0..len).map(|_| randn(rng, m.pose_dim())).collect(),
                inputs: (0..len).map(|_| randn(rng, m.encoder.input_dim)).collect(),
            })
            .collect()
    }

    #[test]
    fn identity_model_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = FlowModel::<f64>::identity(FlowConfig::test_profile(5, 3), &mut rng).unwrap();
        let x = randn(&mut rng, 5);
        let (z, ld) = m.forward(&x, &[0.3; 16]).unwrap();
        assert_eq!(z, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn identity_nll_on_standard_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 6;
        let m = FlowModel::<f64>::identity(FlowConfig::test_profile(d, 2), &mut rng).unwrap();
        let chunks = random_chunks(&m, &mut rng, 20, 100);
        let nll = m.nll(&chunks).unwrap();
        let expected = d as f64 * (HALF_LN_2PI + 0.5);
        assert!((nll - expected).abs() / expected < 0.02, "{nll} vs {expected}");
    }

    #[test]
    fn total_logdet_matches_jacobian() {
        let mut cfg = FlowConfig::test_profile(3, 2);
        cfg.coupling_hidden = 6;
        let m = random_model(cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = randn(&mut rng, 3);
            let c = randn(&mut rng, 16);
            let (_, ld) = m.forward(&x, &c).unwrap();
            let h = 1e-6;
            let mut jac = DMatrix::zeros(3, 3);
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let (zp, _) = m.forward(&xp, &c).unwrap();
                let (zm, _) = m.forward(&xm, &c).unwrap();
                for i in 0..3 {
                    jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * h);
                }
            }
            let fd = jac.determinant().abs().ln();
            assert!((ld - fd).abs() / fd.abs().max(1e-3) < 1e-3, "{ld} vs {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut cfg = FlowConfig::test_profile(4, 2);
        cfg.cond_dim = 3;
        cfg.hidden_size = 3;
        cfg.coupling_hidden = 4;
        let m = random_model(cfg, 4);
        assert!(m.param_count() < 2000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chunks = random_chunks(&m, &mut rng, 2, 4);
        let (_, grad) = m.gradients(&chunks).unwrap();
        let analytic = grad.to_flat();
        let flat = m.to_flat();
        let mut probe = m.clone();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            probe.load_flat(&p).unwrap();
            let up = probe.nll(&chunks).unwrap();
            p[i] -= 2.0 * h;
            probe.load_flat(&p).unwrap();
            let down = probe.nll(&chunks).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let m = random_model(FlowConfig::test_profile(4, 2), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chunks = random_chunks(&m, &mut rng, 3, 5);
        let a = m.gradients(&chunks).unwrap();
        let b = m.gradients(&chunks).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_flat(), b.1.to_flat());
    }

    #[test]
    fn actnorm_init_whitens_first_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = FlowModel::<f64>::new(FlowConfig::test_profile(3, 2), &mut rng).unwrap();
        let chunks: Vec<Chunk<f64>> = (0..4)
            .map(|_| Chunk {
                targets: (0..50)
                    .map(|_| randn(&mut rng, 3).iter().map(|v| 5.0 + 3.0 * v).collect())
                    .collect(),
                inputs: (0..50).map(|_| randn(&mut rng, m.encoder.input_dim)).collect(),
            })
            .collect();
        m.init_actnorm(&chunks).unwrap();
        assert!(m.actnorm_initialized());
        let frames: Vec<&Vec<f64>> = chunks.iter().flat_map(|c| &c.targets).collect();
        let mut mean = [0.0; 3];
        let mut y = [0.0; 3];
        for x in &frames {
            m.steps[0].actnorm.forward(x, &mut y);
            for d in 0..3 {
                mean[d] += y[d] / frames.len() as f64;
            }
        }
        assert!(mean.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = FlowModel::<f64>::new(FlowConfig::test_profile(3, 2), &mut rng).unwrap();
        assert!(matches!(m.forward(&[0.0; 4], &[0.0; 16]), Err(FlowError::Dimension(_))));
    }
}
