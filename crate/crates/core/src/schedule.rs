//! Non-learned diffusion mathematics: the variance schedule, the forward
//! noising process, the deterministic DDIM update, asynchronous timestep
//! pairing for the two-stream sampler, and spatial noise blending.
//!
//! Timesteps are 1-based: `t ∈ [1, T]` indexes the trained noise levels, and
//! `t = 0` is the clean-data boundary with ᾱ₀ = 1 exactly. Schedule arrays
//! are always f64; per-element tensor math happens in the tensor's own
//! precision with coefficients computed in f64 first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// β, α, ᾱ tables for a fixed horizon `T`. Construct via [`linear_schedule`]
/// or (for tests that need contrived noise levels) [`NoiseSchedule::from_alpha_bar`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Rebuild a schedule from explicit ᾱ values (test injection only; the
    /// β/α tables are derived backwards from the ratios). Values must lie in
    /// (0, 1] and be non-increasing.
    pub fn from_alpha_bar(alpha_bar: &[f64]) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "from_alpha_bar",
                reason: "need at least 2 timesteps".into(),
            });
        }
        let mut prev = 1.0f64;
        for (i, &ab) in alpha_bar.iter().enumerate() {
            if !(ab > 0.0 && ab <= 1.0) {
                return Err(Error::InvalidArgument {
                    op: "from_alpha_bar",
                    reason: format!("alpha_bar[{i}] = {ab} outside (0, 1]"),
                });
            }
            if ab > prev {
                return Err(Error::InvalidArgument {
                    op: "from_alpha_bar",
                    reason: format!("alpha_bar[{i}] = {ab} increases past {prev}"),
                });
            }
            prev = ab;
        }
        let mut alpha = Vec::with_capacity(alpha_bar.len());
        let mut beta = Vec::with_capacity(alpha_bar.len());
        let mut prev = 1.0f64;
        for &ab in alpha_bar {
            let a = ab / prev;
            alpha.push(a);
            beta.push(1.0 - a);
            prev = ab;
        }
        Ok(Self {
            t_max: alpha_bar.len(),
            beta,
            alpha,
            alpha_bar: alpha_bar.to_vec(),
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            let _ = op;
            return Err(Error::TimestepOutOfRange {
                t,
                t_max: self.t_max,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t("beta", t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t("alpha", t)?;
        Ok(self.alpha[t - 1])
    }

    /// ᾱ_t, with the clean-data convention ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t("alpha_bar", t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

/// Linearly interpolated β from `beta_start` to `beta_end` inclusive over
/// `t_max` steps; ᾱ by cumulative product.
pub fn linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::InvalidArgument {
            op: "linear_schedule",
            reason: format!("T = {t_max} < 2"),
        });
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument {
            op: "linear_schedule",
            reason: format!("need 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]"),
        });
    }
    let step = (beta_end - beta_start) / (t_max - 1) as f64;
    let mut beta = Vec::with_capacity(t_max);
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0f64;
    for i in 0..t_max {
        let b = beta_start + step * i as f64;
        prod *= 1.0 - b;
        beta.push(b);
        alpha.push(1.0 - b);
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Serializable description of a schedule; arrays are always regenerated,
/// never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: String,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: "linear".to_string(),
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.kind != "linear" {
            return Err(Error::InvalidArgument {
                op: "ScheduleConfig::build",
                reason: format!("unknown schedule kind {:?}", self.kind),
            });
        }
        linear_schedule(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Forward process: x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    sched.check_t("q_sample", t)?;
    let ab = sched.alpha_bar(t)?;
    let c0 = T::from_f64(ab.sqrt());
    let ce = T::from_f64((1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| c0 * x + ce * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Deterministic (η = 0) DDIM update from level `t` down to `t_prev`:
/// the predicted clean image is re-noised to the lower level with the same
/// predicted noise.
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            lhs: x_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    sched.check_t("ddim_step", t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument {
            op: "ddim_step",
            reason: format!("t_prev = {t_prev} must be below t = {t}"),
        });
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_p = sched.alpha_bar(t_prev)?;
    if ab_t <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "ddim_step",
            reason: format!("alpha_bar({t}) = {ab_t}, cannot divide"),
        });
    }
    // x0_pred = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t, then re-noise to t_prev; folded
    // into two coefficients so the ε̂ ≡ 0 chain telescopes cleanly.
    let scale = (ab_p / ab_t).sqrt();
    let c_x = T::from_f64(scale);
    let c_e = T::from_f64((1.0 - ab_p).sqrt() - scale * (1.0 - ab_t).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| c_x * x + c_e * e)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Evenly spaced descending sampling ladder: `n_steps + 1` levels from
/// `t_max` down to 0 inclusive. Each adjacent pair feeds one [`ddim_step`].
pub fn ddim_timesteps(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 1 || n_steps > t_max {
        return Err(Error::InvalidArgument {
            op: "ddim_timesteps",
            reason: format!("n_steps = {n_steps} outside [1, {t_max}]"),
        });
    }
    let ladder: Vec<usize> = (0..=n_steps)
        .map(|i| (t_max as f64 * (1.0 - i as f64 / n_steps as f64)).round() as usize)
        .collect();
    for w in ladder.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::InvalidArgument {
                op: "ddim_timesteps",
                reason: format!("ladder not strictly decreasing at {} -> {}", w[0], w[1]),
            });
        }
    }
    Ok(ladder)
}

/// Spatial blend of two noise predictions under a binary mask:
/// (1−M)⊙ε_o + M⊙ε_n. The mask may match the full shape or the trailing
/// axes (e.g. an (H,W) mask shared across channels). Soft masks are
/// rejected, not rescaled.
pub fn blend_noise<T: Scalar>(
    eps_o: &Tensor<T>,
    eps_n: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if eps_o.shape() != eps_n.shape() {
        return Err(Error::ShapeMismatch {
            op: "blend_noise",
            lhs: eps_o.shape().to_vec(),
            rhs: eps_n.shape().to_vec(),
        });
    }
    let es = eps_o.shape();
    let ms = mask.shape();
    let trailing_match = ms.len() <= es.len() && ms == &es[es.len() - ms.len()..];
    if !trailing_match || mask.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "blend_noise",
            lhs: es.to_vec(),
            rhs: ms.to_vec(),
        });
    }
    for &m in mask.data() {
        if !(m == T::ZERO || m == T::ONE) {
            return Err(Error::InvalidArgument {
                op: "blend_noise",
                reason: format!("mask value {m} is not binary"),
            });
        }
    }
    let mlen = mask.len();
    let data = eps_o
        .data()
        .iter()
        .zip(eps_n.data())
        .enumerate()
        .map(|(i, (&o, &n))| {
            let m = mask.data()[i % mlen];
            (T::ONE - m) * o + m * n
        })
        .collect();
    Tensor::new(es.to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    Train,
    Sample,
}

/// Timesteps for the two denoising streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepPair {
    pub t1: usize,
    pub t2: usize,
    pub delta_t: usize,
}

/// Train mode draws both levels independently and uniformly from [1, T]
/// (`t` is ignored); sample mode lags the second stream by `delta_t`,
/// clamped at 1. The first generated view uses `delta_t = 0` so both streams
/// see the same level.
pub fn pair_timesteps(
    mode: PairMode,
    t: usize,
    delta_t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TimestepPair> {
    match mode {
        PairMode::Train => {
            let t1 = rng.gen_range(1..=sched.t_max());
            let t2 = rng.gen_range(1..=sched.t_max());
            Ok(TimestepPair { t1, t2, delta_t })
        }
        PairMode::Sample => {
            sched.check_t("pair_timesteps", t)?;
            Ok(TimestepPair {
                t1: t,
                t2: t.saturating_sub(delta_t).max(1),
                delta_t,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn default_sched() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn construction_preconditions() {
        assert!(linear_schedule(1, 1e-4, 2e-2).is_err());
        assert!(linear_schedule(1000, 0.0, 2e-2).is_err());
        assert!(linear_schedule(1000, 2e-2, 2e-2).is_err()); // constant β rejected
        assert!(linear_schedule(1000, 2e-2, 1e-4).is_err());
        assert!(linear_schedule(1000, 1e-4, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_pinned_values() {
        // Pinned against an independent cumulative-product computation.
        let s = default_sched();
        assert_relative_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4, max_relative = 1e-14);
        assert_relative_eq!(
            s.alpha_bar(500).unwrap(),
            7.85872428817782354e-2,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            s.alpha_bar(1000).unwrap(),
            4.03582976537567606e-5,
            max_relative = 1e-12
        );
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_bounded() {
        let s = default_sched();
        let mut prev = s.alpha_bar(0).unwrap();
        assert_eq!(prev, 1.0);
        for t in 1..=1000 {
            let ab = s.alpha_bar(t).unwrap();
            assert!(ab < prev, "alpha_bar not strictly decreasing at t={t}");
            assert!(ab > 0.0);
            prev = ab;
        }
        assert!(s.alpha_bar(1).unwrap() > 0.99);
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
    }

    #[test]
    fn timestep_bounds_are_enforced() {
        let s = default_sched();
        assert!(s.alpha_bar(1001).is_err());
        assert!(s.beta(0).is_err());
        let x = Tensor::from_vec(vec![1.0f64]);
        assert!(q_sample(&x, 0, &x, &s).is_err());
        assert!(q_sample(&x, 1001, &x, &s).is_err());
    }

    #[test]
    fn q_sample_limit_cases_via_injection() {
        // ᾱ = 1 → x_t = x0; ᾱ → 0 → x_t = eps (approached, 0 itself invalid).
        let x0 = Tensor::from_vec(vec![2.0f64, -3.0]);
        let eps = Tensor::from_vec(vec![0.5f64, 0.25]);
        let s_one = NoiseSchedule::from_alpha_bar(&[1.0, 1.0]).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s_one).unwrap();
        assert_eq!(xt.data(), x0.data());

        let s_tiny = NoiseSchedule::from_alpha_bar(&[1e-30, 1e-30]).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s_tiny).unwrap();
        assert_relative_eq!(xt.data()[0], eps.data()[0], max_relative = 1e-12);
        assert_relative_eq!(xt.data()[1], eps.data()[1], max_relative = 1e-12);
    }

    #[test]
    fn q_sample_shape_mismatch_rejected() {
        let s = default_sched();
        let x0 = Tensor::<f32>::zeros(vec![2, 2]);
        let eps = Tensor::<f32>::zeros(vec![4]);
        assert!(q_sample(&x0, 10, &eps, &s).is_err());
    }

    #[test]
    fn ddim_algebraic_identity() {
        // If ε̂ is *constructed* from a known x0, the step must reproduce the
        // forward map at t_prev exactly (up to float association).
        let s = default_sched();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn(vec![8], &mut rng);
        let (t, t_prev) = (700usize, 430usize);
        let eps = Tensor::<f64>::randn(vec![8], &mut rng);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let out = ddim_step(&xt, &eps, t, t_prev, &s).unwrap();
        let expect = q_sample(&x0, t_prev, &eps, &s).unwrap();
        for (o, e) in out.data().iter().zip(expect.data()) {
            assert_relative_eq!(o, e, max_relative = 1e-10);
        }
    }

    #[test]
    fn ddim_final_step_returns_x0_pred() {
        // t_prev = 0 has ᾱ = 1, so the output is exactly the x0 prediction.
        let s = default_sched();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::randn(vec![6], &mut rng);
        let eps = Tensor::<f64>::randn(vec![6], &mut rng);
        let t = 10;
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let out = ddim_step(&xt, &eps, t, 0, &s).unwrap();
        for (o, e) in out.data().iter().zip(x0.data()) {
            assert_relative_eq!(o, e, max_relative = 1e-10);
        }
    }

    #[test]
    fn ddim_preconditions() {
        let s = default_sched();
        let x = Tensor::from_vec(vec![1.0f64]);
        assert!(ddim_step(&x, &x, 5, 5, &s).is_err()); // t_prev not below t
        assert!(ddim_step(&x, &x, 5, 7, &s).is_err());
        assert!(ddim_step(&x, &x, 0, 0, &s).is_err()); // t out of range
        let bad = Tensor::from_vec(vec![1.0f64, 2.0]);
        assert!(ddim_step(&x, &bad, 5, 4, &s).is_err());
    }

    #[test]
    fn ddim_ladder_shape() {
        let ts = ddim_timesteps(1000, 100).unwrap();
        assert_eq!(ts.len(), 101);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[1], 990);
        assert_eq!(ts[100], 0);
        assert!(ddim_timesteps(1000, 0).is_err());
        assert!(ddim_timesteps(10, 11).is_err());
        // n = T degenerates to every step
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn blend_limit_masks() {
        let o = Tensor::from_vec(vec![1.0f64, 2.0, 3.0]);
        let n = Tensor::from_vec(vec![-1.0f64, -2.0, -3.0]);
        let zeros = Tensor::from_vec(vec![0.0f64, 0.0, 0.0]);
        let ones = Tensor::from_vec(vec![1.0f64, 1.0, 1.0]);
        assert_eq!(blend_noise(&o, &n, &zeros).unwrap().data(), o.data());
        assert_eq!(blend_noise(&o, &n, &ones).unwrap().data(), n.data());
        let mixed = Tensor::from_vec(vec![0.0f64, 1.0, 0.0]);
        assert_eq!(blend_noise(&o, &o, &mixed).unwrap().data(), o.data());
    }

    #[test]
    fn blend_rejects_soft_masks() {
        let o = Tensor::from_vec(vec![1.0f64]);
        let m = Tensor::from_vec(vec![0.5f64]);
        assert!(blend_noise(&o, &o, &m).is_err());
    }

    #[test]
    fn blend_idempotent_and_broadcasting() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let o = Tensor::<f64>::randn(vec![3, 2, 2], &mut rng);
        let n = Tensor::<f64>::randn(vec![3, 2, 2], &mut rng);
        // (H,W) mask broadcast across the 3 channels
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let once = blend_noise(&o, &n, &m).unwrap();
        let twice = blend_noise(&once, &n, &m).unwrap();
        assert_eq!(once, twice);
        for c in 0..3 {
            let base = c * 4;
            assert_eq!(once.data()[base], n.data()[base]); // m=1 corner
            assert_eq!(once.data()[base + 1], o.data()[base + 1]); // m=0
        }
    }

    #[test]
    fn pair_modes() {
        let s = default_sched();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let p = pair_timesteps(PairMode::Sample, 500, 200, &s, &mut rng).unwrap();
        assert_eq!((p.t1, p.t2), (500, 300));
        let p = pair_timesteps(PairMode::Sample, 100, 200, &s, &mut rng).unwrap();
        assert_eq!((p.t1, p.t2), (100, 1)); // clamped
        let p = pair_timesteps(PairMode::Sample, 777, 0, &s, &mut rng).unwrap();
        assert_eq!((p.t1, p.t2), (777, 777)); // first-view mode
        for _ in 0..200 {
            let p = pair_timesteps(PairMode::Train, 0, 200, &s, &mut rng).unwrap();
            assert!((1..=1000).contains(&p.t1));
            assert!((1..=1000).contains(&p.t2));
        }
    }

    #[test]
    fn schedule_config_round_trip() {
        let cfg = ScheduleConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ScheduleConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.build().unwrap(), default_sched());
        let bad = ScheduleConfig {
            kind: "cosine".into(),
            ..Default::default()
        };
        assert!(bad.build().is_err());
    }
}
