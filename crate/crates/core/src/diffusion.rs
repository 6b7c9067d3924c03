//! DDPM schedule, forward noising, the noise-prediction loss and the reverse
//! sampler over flattened hierarchical chunks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{Denoiser, ObsFeature};
use crate::temporal::{unflatten, HierarchicalChunk};

/// Squared-cosine offset from the improved-DDPM schedule.
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Noise schedule with `K` steps. Index `k` runs over `1..=K`; `alpha_bar(0)`
/// is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("diffusion needs at least one step".into()));
        }
        let f = |t: f64| {
            let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas: Vec<f64> = (1..=steps)
            .map(|k| (1.0 - f(k as f64) / f((k - 1) as f64)).clamp(1e-8, MAX_BETA))
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::StepOutOfRange {
                step: k,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta(k)
    }

    /// `prod_{i<=k} (1 - beta_i)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Reverse-update coefficients `(1/sqrt(alpha_k), beta_k/sqrt(1-alpha_bar_k), sigma_k)`
    /// where `sigma_k^2` is the posterior variance (zero at `k = 1`).
    pub fn reverse_coefficients(&self, k: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k - 1);
        let beta = self.beta(k);
        let scale = 1.0 / self.alpha(k).sqrt();
        let gamma = beta / (1.0 - ab).sqrt();
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        (scale, gamma, sigma)
    }
}

/// `sqrt(alpha_bar_k) * a0 + sqrt(1 - alpha_bar_k) * eps`.
pub fn add_noise(a0: &Tensor, k: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check(k)?;
    noise_with_alpha_bar(a0, sched.alpha_bar(k), eps)
}

/// Forward noising at an explicit `alpha_bar`.
pub fn noise_with_alpha_bar(a0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if a0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} vs chunk {:?}",
            eps.shape(),
            a0.shape()
        )));
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = a0.data().iter().zip(eps.data()).map(|(a, e)| s * a + n * e).collect();
    Ok(Tensor::new(a0.shape(), data))
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// A batch `[B, ...]` of clean chunks corrupted at random steps.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub noisy: Tensor,
}

/// Draws `k ~ U{1..K}` and `eps ~ N(0, I)` per sample and noises `a0`.
pub fn noise_batch(a0: &Tensor, sched: &DiffusionSchedule, rng: &mut impl Rng) -> Result<NoisedBatch> {
    if a0.rank() < 2 || a0.dim(0) == 0 {
        return Err(Error::InvalidArgument("loss needs a non-empty batch".into()));
    }
    let b = a0.dim(0);
    let per = a0.len() / b;
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = standard_normal(a0.shape(), rng);
    let mut noisy = Vec::with_capacity(a0.len());
    for (i, &k) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(k);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        noisy.extend(
            a0.data()[range.clone()]
                .iter()
                .zip(&eps.data()[range])
                .map(|(a, e)| s * a + n * e),
        );
    }
    Ok(NoisedBatch {
        steps,
        eps,
        noisy: Tensor::new(a0.shape(), noisy),
    })
}

/// Mean squared error between the injected noise and `predict(noisy, steps)`.
pub fn loss(
    a0: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
    predict: impl FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
) -> Result<f64> {
    let batch = noise_batch(a0, sched, rng)?;
    let pred = predict(&batch.noisy, &batch.steps)?;
    if pred.shape() != batch.eps.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs noise {:?}",
            pred.shape(),
            batch.eps.shape()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(batch.eps.data())
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        / n)
}

/// Anything that predicts the noise in a batch of chunks at a shared step.
pub trait NoiseModel {
    fn predict_noise(&self, noisy: &Tensor, k: usize) -> Result<Tensor>;
}

impl<F> NoiseModel for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_noise(&self, noisy: &Tensor, k: usize) -> Result<Tensor> {
        self(noisy, k)
    }
}

/// The network bound to one encoded history.
pub struct Conditioned<'a> {
    pub net: &'a Denoiser,
    pub obs: &'a ObsFeature,
    pub max_step: usize,
}

impl NoiseModel for Conditioned<'_> {
    fn predict_noise(&self, noisy: &Tensor, k: usize) -> Result<Tensor> {
        self.net.predict_noise_batch(noisy, k, self.max_step, self.obs)
    }
}

/// How the reverse chain keeps samples inside the normalized action range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clipping {
    /// Plain posterior update in noise form; only the final sample is clipped.
    Final,
    /// At every step the implied clean chunk
    /// `(a^k - sqrt(1 - alpha_bar_k) * eps_hat) / sqrt(alpha_bar_k)` is clipped
    /// to `[-1, 1]` before the posterior mean is formed. Identical to `Final`
    /// whenever that estimate is already in range.
    #[default]
    Denoised,
}

/// Runs the reverse chain from `a^K ~ N(0, I)` down to `a^0` and clips the
/// result to `[-1, 1]`. `shape` is the full batch shape.
pub fn sample_tensor(
    model: &impl NoiseModel,
    shape: &[usize],
    sched: &DiffusionSchedule,
    clipping: Clipping,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut a = standard_normal(shape, rng);
    for k in (1..=sched.steps()).rev() {
        let eps_hat = model.predict_noise(&a, k)?;
        if eps_hat.shape() != a.shape() {
            return Err(Error::Shape(format!(
                "noise model returned {:?} for {:?}",
                eps_hat.shape(),
                a.shape()
            )));
        }
        let (scale, gamma, sigma) = sched.reverse_coefficients(k);
        let (ab, ab_prev, beta) = (sched.alpha_bar(k), sched.alpha_bar(k - 1), sched.beta(k));
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ck = sched.alpha(k).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let fresh = if k > 1 { Some(standard_normal(shape, rng)) } else { None };
        for (i, (x, e)) in a.data_mut().iter_mut().zip(eps_hat.data()).enumerate() {
            let mut next = match clipping {
                Clipping::Final => scale * (*x - gamma * e),
                Clipping::Denoised => {
                    let a0 = ((*x - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
                    c0 * a0 + ck * *x
                }
            };
            if let Some(z) = &fresh {
                next += sigma * z.data()[i];
            }
            *x = next;
        }
        if !a.all_finite() {
            return Err(Error::NonFinite(format!("reverse diffusion state at step {k}")));
        }
    }
    for x in a.data_mut() {
        *x = x.clamp(-1.0, 1.0);
    }
    Ok(a)
}

/// Draws one chunk for a normalized history `[M, L_h, obs]`.
pub fn sample(
    net: &Denoiser,
    history: &Tensor,
    sched: &DiffusionSchedule,
    clipping: Clipping,
    rng: &mut impl Rng,
) -> Result<HierarchicalChunk> {
    let obs = net.encode_observations(history)?;
    let cfg = net.config();
    let model = Conditioned {
        net,
        obs: &obs,
        max_step: sched.steps(),
    };
    let out = sample_tensor(&model, &[1, cfg.chunk_tokens(), cfg.action_dim], sched, clipping, rng)?;
    unflatten(&out.reshape(&[cfg.chunk_tokens(), cfg.action_dim]), cfg.num_frequencies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_is_monotone() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=100 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            let (a, g, sg) = s.reverse_coefficients(k);
            assert!(a.is_finite() && g.is_finite() && sg.is_finite());
            assert!(a > 0.0 && g > 0.0);
        }
        assert_eq!(s.reverse_coefficients(1).2, 0.0);
        assert!(s.alpha_bar(100) < 1e-3);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(DiffusionSchedule::cosine(0).is_err());
    }

    #[test]
    fn noising_limits() {
        let a0 = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1 - 0.3);
        let eps = Tensor::from_fn(&[4, 2], |i| (i as f64).cos());
        assert_eq!(noise_with_alpha_bar(&a0, 1.0, &eps).unwrap(), a0);
        assert_eq!(noise_with_alpha_bar(&a0, 0.0, &eps).unwrap(), eps);
        let out = noise_with_alpha_bar(&Tensor::zeros(&[3]), 0.25, &Tensor::full(&[3], 1.0)).unwrap();
        for v in out.data() {
            assert!((v - 0.75f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn add_noise_checks_step_and_shape() {
        let s = DiffusionSchedule::cosine(10).unwrap();
        let a = Tensor::zeros(&[2, 2]);
        assert!(matches!(add_noise(&a, 0, &a, &s), Err(Error::StepOutOfRange { .. })));
        assert!(add_noise(&a, 11, &a, &s).is_err());
        assert!(add_noise(&a, 1, &Tensor::zeros(&[4]), &s).is_err());
    }

    #[test]
    fn oracle_prediction_has_zero_loss() {
        let s = DiffusionSchedule::cosine(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = Tensor::from_fn(&[16, 6, 2], |i| ((i as f64) * 0.3).sin());
        let l = loss(&a0, &s, &mut rng, |noisy, steps| {
            // recover the injected noise from the noising equation
            let per = a0.len() / steps.len();
            let data = noisy
                .data()
                .iter()
                .zip(a0.data())
                .enumerate()
                .map(|(i, (x, a))| {
                    let ab = s.alpha_bar(steps[i / per]);
                    (x - ab.sqrt() * a) / (1.0 - ab).sqrt()
                })
                .collect();
            Ok(Tensor::new(noisy.shape(), data))
        })
        .unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn zero_prediction_has_unit_loss() {
        let s = DiffusionSchedule::cosine(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a0 = Tensor::zeros(&[10_000, 2]);
        let l = loss(&a0, &s, &mut rng, |noisy, _| Ok(Tensor::zeros(noisy.shape()))).unwrap();
        // 2e4 squared normals: sd of the mean is sqrt(2 / 2e4) = 0.01
        assert!((l - 1.0).abs() < 0.04, "{l}");
    }

    #[test]
    fn empty_batch_rejected() {
        let s = DiffusionSchedule::cosine(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a0 = Tensor::zeros(&[0, 2]);
        assert!(loss(&a0, &s, &mut rng, |n, _| Ok(n.clone())).is_err());
    }

    #[test]
    fn one_step_sampler_closed_form() {
        let s = DiffusionSchedule::from_betas(vec![0.3]).unwrap();
        let (scale, gamma, sigma) = s.reverse_coefficients(1);
        assert_eq!(sigma, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let start = standard_normal(&[1, 4, 2], &mut ChaCha8Rng::seed_from_u64(9));
        let identity = |x: &Tensor, _k: usize| Ok(x.clone());
        let out = sample_tensor(&identity, &[1, 4, 2], &s, Clipping::Final, &mut rng).unwrap();
        for (o, a) in out.data().iter().zip(start.data()) {
            let want = (scale * (a - gamma * a)).clamp(-1.0, 1.0);
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_clipped() {
        let s = DiffusionSchedule::cosine(20).unwrap();
        let zero = |x: &Tensor, _k: usize| Ok(Tensor::zeros(x.shape()));
        for clipping in [Clipping::Final, Clipping::Denoised] {
            let a = sample_tensor(&zero, &[3, 5, 2], &s, clipping, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let b = sample_tensor(&zero, &[3, 5, 2], &s, clipping, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn non_finite_state_aborts() {
        let s = DiffusionSchedule::cosine(5).unwrap();
        let bad = |x: &Tensor, _k: usize| Ok(Tensor::full(x.shape(), f64::NAN));
        let err = sample_tensor(&bad, &[1, 2, 2], &s, Clipping::Final, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn clipping_modes_agree_when_estimates_stay_in_range() {
        // eps_hat = (x - sqrt(ab) * c) / sqrt(1 - ab) implies a0_hat = c
        let s = DiffusionSchedule::cosine(12).unwrap();
        let target = 0.4;
        let oracle = |x: &Tensor, k: usize| {
            let ab = s.alpha_bar(k);
            Ok(Tensor::new(
                x.shape(),
                x.data()
                    .iter()
                    .map(|v| (v - ab.sqrt() * target) / (1.0 - ab).sqrt())
                    .collect(),
            ))
        };
        let a = sample_tensor(
            &oracle,
            &[2, 3, 2],
            &s,
            Clipping::Final,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = sample_tensor(
            &oracle,
            &[2, 3, 2],
            &s,
            Clipping::Denoised,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));
        assert!(b.data().iter().all(|v| (v - target).abs() < 1e-9));
    }

    #[test]
    fn denoised_clipping_bounds_a_biased_model() {
        // a model that overstates the clean chunk far outside the range
        let s = DiffusionSchedule::cosine(12).unwrap();
        let biased = |x: &Tensor, k: usize| {
            let ab = s.alpha_bar(k);
            Ok(Tensor::new(
                x.shape(),
                x.data()
                    .iter()
                    .map(|v| (v - ab.sqrt() * 5.0) / (1.0 - ab).sqrt())
                    .collect(),
            ))
        };
        let out = sample_tensor(
            &biased,
            &[1, 4, 1],
            &s,
            Clipping::Denoised,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }
}
