//! Seeded randomness, the Adam optimizer and the scalar kernels shared by
//! the rest of the crate.
//!
//! All randomness flows through [`RngStream`], a ChaCha8 generator keyed by a
//! `(seed, stream)` pair. Streams are split by id or by name so that every
//! stage of a pipeline (shuffling, label smoothing, weight init, sampling
//! noise, tree bootstraps) draws from its own reproducible sequence.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A reproducible random stream identified by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Derives an independent child stream. The child depends only on this
    /// stream's identity and `id`, never on how many values were drawn.
    pub fn split(&self, id: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(self.stream)), id)
    }

    /// Child stream keyed by a stage name such as `"vae-init"`.
    pub fn split_named(&self, name: &str) -> RngStream {
        self.split(name_to_id(name))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform value in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit id for a stream name (first eight bytes of its SHA-256).
pub fn name_to_id(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Draws one value from `U(a, b)`, in `[a, b)`.
pub fn sample_uniform(rng: &mut RngStream, a: f64, b: f64) -> Result<f64> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("uniform bounds require a < b, got [{a}, {b})")));
    }
    Ok(rng.rng.random_range(a..b))
}

pub fn sample_standard_normal(rng: &mut RngStream, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Domain("cannot draw zero normal samples".into()));
    }
    Ok((0..n).map(|_| rng.normal()).collect())
}

/// Entropy in bits of a Bernoulli variable with success probability `p`,
/// using `0 * log2(0) = 0`.
///
/// Evaluated on the pair `(1 - hi, hi)` with `hi = max(p, 1 - p)`, which makes
/// `binary_entropy(p) == binary_entropy(1.0 - p)` hold bit for bit.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let hi = p.max(1.0 - p);
    let lo = 1.0 - hi;
    Ok(neg_plogp(lo) + neg_plogp(hi))
}

fn neg_plogp(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        -p * p.log2()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adam hyperparameters. Defaults follow the Keras optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Moment estimates and step counter for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// Gradients are validated before anything is written, so a failed step
/// leaves both `params` and `state` untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_reference_points() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        // -0.25 log2 0.25 - 0.75 log2 0.75 = 0.5 + 0.75 * (2 - log2 3)
        let expected = 0.5 + 0.75 * (2.0 - 3f64.log2());
        assert!((binary_entropy(0.25).unwrap() - expected).abs() < 1e-15);
        assert!((binary_entropy(0.25).unwrap() - 0.811_278).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_out_of_range() {
        assert!(matches!(binary_entropy(-0.01), Err(Error::Domain(_))));
        assert!(matches!(binary_entropy(1.01), Err(Error::Domain(_))));
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn entropy_increases_up_to_half() {
        let mut prev = binary_entropy(0.0).unwrap();
        for i in 1..=500 {
            let h = binary_entropy(i as f64 * 1e-3).unwrap();
            assert!(h > prev, "not increasing at {}", i);
            prev = h;
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(
            1,
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
        );
        adam_step(&mut params, &[1.0], &mut state).unwrap();
        assert!((params[0] + 0.1).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut params = vec![0.3, -1.7, 2.5];
        let before = params.clone();
        let mut state = AdamState::new(3, AdamConfig::default());
        for _ in 0..25 {
            adam_step(&mut params, &[0.0; 3], &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step, 25);
        assert!(state.first_moment.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn adam_decays_moments_without_gradient() {
        let mut params = vec![1.0];
        let mut state = AdamState::new(1, AdamConfig::default());
        adam_step(&mut params, &[2.0], &mut state).unwrap();
        let (m0, v0) = (state.first_moment[0], state.second_moment[0]);
        adam_step(&mut params, &[0.0], &mut state).unwrap();
        assert!(state.first_moment[0].abs() < m0.abs());
        assert!(state.second_moment[0] < v0);
    }

    #[test]
    fn adam_symmetric_params_stay_identical() {
        let mut params = vec![0.5, 0.5];
        let mut state = AdamState::new(2, AdamConfig::default());
        for g in [0.3, -1.2, 4.0] {
            adam_step(&mut params, &[g, g], &mut state).unwrap();
        }
        assert_eq!(params[0].to_bits(), params[1].to_bits());
    }

    #[test]
    fn adam_errors() {
        let mut params = vec![0.0, 0.0];
        let mut state = AdamState::new(2, AdamConfig::default());
        assert!(matches!(
            adam_step(&mut params, &[1.0], &mut state),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            adam_step(&mut params, &[1.0, f64::NAN], &mut state),
            Err(Error::NonFiniteGradient { index: 1 })
        ));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn uniform_ranges_and_determinism() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..1000 {
            let u = sample_uniform(&mut rng, 0.0, 1.0).unwrap();
            assert!((0.0..1.0).contains(&u));
            let v = sample_uniform(&mut rng, 0.55, 0.85).unwrap();
            assert!((0.55..0.85).contains(&v));
        }
        let a = sample_uniform(&mut RngStream::new(11, 3), 0.0, 1.0).unwrap();
        let b = sample_uniform(&mut RngStream::new(11, 3), 0.0, 1.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(sample_uniform(&mut rng, 1.0, 1.0).is_err());
        assert!(sample_uniform(&mut rng, 2.0, 1.0).is_err());
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngStream::new(2024, 1);
        let n = 1_000_000;
        let xs = sample_standard_normal(&mut rng, n).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
        assert!(sample_standard_normal(&mut rng, 0).is_err());
    }

    #[test]
    fn normal_is_reproducible() {
        let a = sample_standard_normal(&mut RngStream::new(5, 9), 64).unwrap();
        let b = sample_standard_normal(&mut RngStream::new(5, 9), 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_streams_differ() {
        let root = RngStream::new(99, 0);
        let seqs: Vec<Vec<u64>> = (0..16)
            .map(|id| {
                let mut s = root.split(id);
                (0..8).map(|_| s.next_u64()).collect()
            })
            .collect();
        for i in 0..seqs.len() {
            for j in i + 1..seqs.len() {
                assert_ne!(seqs[i], seqs[j]);
            }
        }
        let mut drawn = root.clone();
        drawn.next_u64();
        assert_eq!(drawn.split(3).next_u64(), root.split(3).next_u64());
        assert_ne!(
            root.split_named("lsr").next_u64(),
            root.split_named("vae-init").next_u64()
        );
    }

    #[test]
    fn known_stream_prefix_is_stable() {
        // Guards against silent generator changes, which would break
        // reproducibility of stored runs.
        let mut s = RngStream::new(42, 7);
        const FROZEN_PREFIX: u64 = 2_370_525_664_269_707_216;
        assert_eq!(s.next_u64(), FROZEN_PREFIX);
        assert_eq!(name_to_id("lsr"), name_to_id("lsr"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entropy_symmetric(p in 0.0f64..=1.0) {
                let a = binary_entropy(p).unwrap();
                let b = binary_entropy(1.0 - p).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
