//! Synthetic power traces.
//!
//! A trace is a key-independent background (a fixed mixture of smooth
//! operation waveforms), plus the modelled consumption of the targeted
//! intermediate at each leak position, plus Wiener-process noise and an
//! optional white Gaussian floor.

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, indexed_seed, rng_from_seed, Rng};
use crate::trace::{
    power_value, DType, Intermediate, LeakageSpec, LeakageSpecError, PowerModel, Trace, TraceMeta,
    TraceSet, TraceSetError,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Scale of the Wiener increments: `e(t) - e(s) ~ N(0, sigma^2 (t - s))`.
    pub sigma: f64,
    /// Standard deviation of the independent white noise floor.
    pub gaussian_sigma: f64,
}

impl NoiseParams {
    pub const NONE: NoiseParams = NoiseParams {
        sigma: 0.0,
        gaussian_sigma: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakPoint {
    pub index: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub offset: f64,
}

fn default_dtype() -> DType {
    DType::F32
}

fn default_background_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_points: usize,
    pub leak_positions: Vec<LeakPoint>,
    pub spec: LeakageSpec,
    pub noise: NoiseParams,
    /// Number of background operation waveforms.
    pub n_ops: usize,
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Peak amplitude of each background waveform.
    #[serde(default = "default_background_scale")]
    pub background_scale: f64,
}

impl Default for SynthConfig {
    /// 100 points, an unmasked S-box output of byte 0 leaking its Hamming
    /// weight at points 25, 50 and 75.
    fn default() -> Self {
        Self {
            n_points: 100,
            leak_positions: [25, 50, 75]
                .iter()
                .map(|&index| LeakPoint {
                    index,
                    amplitude: 1.0,
                    offset: 0.0,
                })
                .collect(),
            spec: LeakageSpec {
                target_byte: 0,
                intermediate: Intermediate::SboxOut,
                power_model: PowerModel::HammingWeight,
            },
            noise: NoiseParams {
                sigma: 0.0,
                gaussian_sigma: 0.5,
            },
            n_ops: 4,
            seed: 0,
            dtype: DType::F32,
            background_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("n_points must be at least 1")]
    NoPoints,
    #[error("leak position {index} out of range for {n_points} points")]
    LeakOutOfRange { index: usize, n_points: usize },
    #[error("leak at {index} has non-finite amplitude or offset")]
    NonFiniteLeak { index: usize },
    #[error("noise.{field} must be finite and nonnegative, got {value}")]
    BadNoise { field: &'static str, value: f64 },
    #[error("background_scale must be finite, got {0}")]
    BadBackground(f64),
    #[error("dataset size must be at least 1")]
    NoTraces,
    #[error("max_offset {max_offset} must be below n_points {n_points}")]
    OffsetTooLarge { max_offset: usize, n_points: usize },
    #[error(transparent)]
    Spec(#[from] LeakageSpecError),
    #[error(transparent)]
    Set(#[from] TraceSetError),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_points == 0 {
            return Err(SynthError::NoPoints);
        }
        self.spec.validate()?;
        for leak in &self.leak_positions {
            if leak.index >= self.n_points {
                return Err(SynthError::LeakOutOfRange {
                    index: leak.index,
                    n_points: self.n_points,
                });
            }
            if !leak.amplitude.is_finite() || !leak.offset.is_finite() {
                return Err(SynthError::NonFiniteLeak { index: leak.index });
            }
        }
        for (field, value) in [
            ("sigma", self.noise.sigma),
            ("gaussian_sigma", self.noise.gaussian_sigma),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(SynthError::BadNoise { field, value });
            }
        }
        if !self.background_scale.is_finite() {
            return Err(SynthError::BadBackground(self.background_scale));
        }
        Ok(())
    }
}

/// `M` samples of a Wiener process started at zero, with `N(0, sigma^2)`
/// increments between consecutive points.
pub fn wiener_noise<R: RngCore + ?Sized>(m: usize, params: &NoiseParams, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(m);
    if m == 0 {
        return out;
    }
    out.push(0.0);
    if params.sigma == 0.0 {
        out.resize(m, 0.0);
        return out;
    }
    let step = Normal::new(0.0, params.sigma).expect("sigma validated");
    let mut level = 0.0;
    for _ in 1..m {
        level += step.sample(rng);
        out.push(level);
    }
    out
}

/// Key-independent background shared by every trace of one configuration.
fn background(cfg: &SynthConfig) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "background"));
    let m = cfg.n_points as f64;
    let waves: Vec<(f64, f64, f64)> = (0..cfg.n_ops)
        .map(|_| {
            let amp = cfg.background_scale * rng.random_range(0.5..1.0);
            let cycles = rng.random_range(0.5..6.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp, cycles, phase)
        })
        .collect();
    (0..cfg.n_points)
        .map(|i| {
            waves
                .iter()
                .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * i as f64 / m + p).sin())
                .sum()
        })
        .collect()
}

/// Generator with the background precomputed for one configuration.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: SynthConfig,
    background: Vec<f64>,
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        let background = background(&cfg);
        Ok(Self { cfg, background })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn trace<R: RngCore + ?Sized>(
        &self,
        plaintext: [u8; 16],
        key: [u8; 16],
        mask: [u8; 16],
        rng: &mut R,
    ) -> Trace {
        let cfg = &self.cfg;
        let label = crate::trace::intermediate_value(&plaintext, &key, &mask, &cfg.spec);
        let power = power_value(label, cfg.spec.power_model);
        let mut samples = self.background.clone();
        for leak in &cfg.leak_positions {
            samples[leak.index] += leak.amplitude * power + leak.offset;
        }
        let wiener = wiener_noise(cfg.n_points, &cfg.noise, rng);
        for (s, w) in samples.iter_mut().zip(&wiener) {
            *s += w;
        }
        if cfg.noise.gaussian_sigma > 0.0 {
            let floor = Normal::new(0.0, cfg.noise.gaussian_sigma).expect("validated");
            for s in samples.iter_mut() {
                *s += floor.sample(rng);
            }
        }
        for s in samples.iter_mut() {
            *s = cfg.dtype.quantize(*s);
        }
        Trace {
            samples,
            meta: TraceMeta {
                plaintext,
                key,
                mask,
                label,
            },
        }
    }
}

pub fn generate_trace<R: RngCore + ?Sized>(
    plaintext: [u8; 16],
    key: [u8; 16],
    mask: [u8; 16],
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Trace, SynthError> {
    Ok(Synthesizer::new(cfg.clone())?.trace(plaintext, key, mask, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    FixedKey([u8; 16]),
    RandomKeys,
}

/// `n` traces with uniform plaintexts (and masks, for masked targets).
///
/// Trace `i` draws everything from its own stream seeded by
/// `indexed_seed(derive_seed(cfg.seed, "traces"), i)`, so the output does not
/// depend on how generation is scheduled.
pub fn generate_dataset(n: usize, cfg: &SynthConfig, key_mode: KeyMode) -> Result<TraceSet, SynthError> {
    if n == 0 {
        return Err(SynthError::NoTraces);
    }
    let synth = Synthesizer::new(cfg.clone())?;
    let masked = cfg.spec.intermediate == Intermediate::MaskedSboxOut;
    let base = derive_seed(cfg.seed, "traces");
    let traces: Vec<Trace> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(indexed_seed(base, i as u64));
            let plaintext: [u8; 16] = rng.random();
            let key = match key_mode {
                KeyMode::FixedKey(k) => k,
                KeyMode::RandomKeys => rng.random(),
            };
            let mask = if masked { rng.random() } else { [0u8; 16] };
            synth.trace(plaintext, key, mask, &mut rng)
        })
        .collect();
    Ok(TraceSet::new(cfg.n_points, cfg.dtype, masked, traces)?)
}

/// Circularly shift each trace right by an independent offset uniform in
/// `[0, max_offset]`. Returns the shifted set and the offsets applied.
pub fn desync_with_offsets(
    set: &TraceSet,
    max_offset: usize,
    rng: &mut Rng,
) -> Result<(TraceSet, Vec<usize>), SynthError> {
    let m = set.n_points();
    if max_offset >= m.max(1) {
        return Err(SynthError::OffsetTooLarge {
            max_offset,
            n_points: m,
        });
    }
    let offsets: Vec<usize> = (0..set.n_traces())
        .map(|_| rng.random_range(0..=max_offset))
        .collect();
    let shifted = set.map_samples(|i, s| {
        let mut out = s.to_vec();
        out.rotate_right(offsets[i]);
        out
    })?;
    Ok((shifted, offsets))
}

pub fn desync(set: &TraceSet, max_offset: usize, rng: &mut Rng) -> Result<TraceSet, SynthError> {
    desync_with_offsets(set, max_offset, rng).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn quiet_cfg() -> SynthConfig {
        SynthConfig {
            n_points: 16,
            leak_positions: vec![LeakPoint {
                index: 7,
                amplitude: 1.0,
                offset: 0.0,
            }],
            noise: NoiseParams::NONE,
            dtype: DType::F64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_sigma_wiener_is_zero() {
        let mut rng = rng_from_seed(1);
        let e = wiener_noise(50, &NoiseParams::NONE, &mut rng);
        assert_eq!(e, vec![0.0; 50]);
    }

    #[test]
    fn wiener_starts_at_zero() {
        let mut rng = rng_from_seed(1);
        let p = NoiseParams {
            sigma: 2.0,
            gaussian_sigma: 0.0,
        };
        assert_eq!(wiener_noise(5, &p, &mut rng)[0], 0.0);
    }

    /// Monte-Carlo: increments over lag d have variance sigma^2 d, and
    /// increments over disjoint intervals are uncorrelated.
    #[test]
    fn wiener_increment_statistics() {
        let sigma = 1.0;
        let p = NoiseParams {
            sigma,
            gaussian_sigma: 0.0,
        };
        let mut rng = rng_from_seed(2024);
        let e = wiener_noise(100_001, &p, &mut rng);
        let steps: Vec<f64> = e.windows(2).map(|w| w[1] - w[0]).collect();
        let var1 = steps.iter().map(|x| x * x).sum::<f64>() / steps.len() as f64;
        assert!((0.98..=1.02).contains(&var1), "one-step variance {var1}");

        let lag4: Vec<f64> = (0..e.len() - 4).step_by(4).map(|s| e[s + 4] - e[s]).collect();
        let var4 = lag4.iter().map(|x| x * x).sum::<f64>() / lag4.len() as f64;
        assert!((var4 / 4.0 - 1.0).abs() < 0.05, "lag-4 variance {var4}");

        let a = &steps[..steps.len() - 1];
        let b = &steps[1..];
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
        assert!((cov / (sa * sb)).abs() < 0.02);
    }

    #[test]
    fn noiseless_leak_is_hamming_weight() {
        let cfg = quiet_cfg();
        let synth = Synthesizer::new(cfg.clone()).unwrap();
        let t = synth.trace([0; 16], [0; 16], [0; 16], &mut rng_from_seed(0));
        assert_eq!(t.samples[7] - synth.background()[7], 4.0);
        assert_eq!(t.meta.label, 0x63);
        for (i, (s, b)) in t.samples.iter().zip(synth.background()).enumerate() {
            if i != 7 {
                assert_eq!(s, b);
            }
        }
    }

    #[test]
    fn noiseless_leak_takes_nine_values() {
        let set = generate_dataset(2000, &quiet_cfg(), KeyMode::RandomKeys).unwrap();
        let mut values: Vec<u64> = set.iter().map(|t| t.samples[7].to_bits()).collect();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), 9);
    }

    #[test]
    fn zero_amplitude_is_key_independent() {
        let mut cfg = quiet_cfg();
        cfg.leak_positions[0].amplitude = 0.0;
        let synth = Synthesizer::new(cfg).unwrap();
        let a = synth.trace([1; 16], [2; 16], [0; 16], &mut rng_from_seed(3));
        let b = synth.trace([1; 16], [0xee; 16], [0; 16], &mut rng_from_seed(3));
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            noise: NoiseParams {
                sigma: 0.1,
                gaussian_sigma: 0.3,
            },
            ..SynthConfig::default()
        };
        let t1 = generate_trace([5; 16], [9; 16], [0; 16], &cfg, &mut rng_from_seed(11)).unwrap();
        let t2 = generate_trace([5; 16], [9; 16], [0; 16], &cfg, &mut rng_from_seed(11)).unwrap();
        assert_eq!(t1, t2);
        let d1 = generate_dataset(50, &cfg, KeyMode::RandomKeys).unwrap();
        let d2 = generate_dataset(50, &cfg, KeyMode::RandomKeys).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn leak_out_of_range_rejected() {
        let mut cfg = quiet_cfg();
        cfg.leak_positions[0].index = 16;
        assert!(matches!(
            generate_trace([0; 16], [0; 16], [0; 16], &cfg, &mut rng_from_seed(0)),
            Err(SynthError::LeakOutOfRange { index: 16, .. })
        ));
    }

    #[test]
    fn fixed_key_mode() {
        let key = [0x42; 16];
        let set = generate_dataset(100, &SynthConfig::default(), KeyMode::FixedKey(key)).unwrap();
        assert!(set.iter().all(|t| t.meta.key == key));
        assert!(set.iter().all(|t| t.meta.mask == [0; 16]));
        assert!(set.labels_match(&SynthConfig::default().spec));
    }

    #[test]
    fn masked_target_draws_masks() {
        let mut cfg = SynthConfig::default();
        cfg.spec.intermediate = Intermediate::MaskedSboxOut;
        let set = generate_dataset(20, &cfg, KeyMode::RandomKeys).unwrap();
        assert!(set.masked());
        assert!(set.iter().any(|t| t.meta.mask != [0; 16]));
        assert!(set.labels_match(&cfg.spec));
    }

    #[test]
    fn label_histogram_is_near_uniform() {
        let n = 10_000usize;
        let set = generate_dataset(n, &SynthConfig::default(), KeyMode::RandomKeys).unwrap();
        let mut counts = [0usize; 256];
        for t in &set {
            counts[t.meta.label as usize] += 1;
        }
        let p = 1.0 / 256.0;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sd);
        }
    }

    #[test]
    fn desync_zero_is_identity() {
        let set = generate_dataset(10, &SynthConfig::default(), KeyMode::RandomKeys).unwrap();
        assert_eq!(desync(&set, 0, &mut rng_from_seed(1)).unwrap(), set);
    }

    #[test]
    fn desync_rejects_large_offset() {
        let set = generate_dataset(2, &SynthConfig::default(), KeyMode::RandomKeys).unwrap();
        assert!(matches!(
            desync(&set, 100, &mut rng_from_seed(1)),
            Err(SynthError::OffsetTooLarge { .. })
        ));
    }

    /// Offsets recovered by circular cross-correlation against the originals
    /// all fall within `[0, max_offset]`, and each trace keeps its samples.
    #[test]
    fn desync_offsets_recoverable() {
        let cfg = SynthConfig {
            noise: NoiseParams {
                sigma: 0.0,
                gaussian_sigma: 1.0,
            },
            dtype: DType::F64,
            ..SynthConfig::default()
        };
        let set = generate_dataset(40, &cfg, KeyMode::RandomKeys).unwrap();
        let (shifted, offsets) = desync_with_offsets(&set, 50, &mut rng_from_seed(9)).unwrap();
        let m = set.n_points();
        for ((orig, moved), &applied) in set.iter().zip(shifted.iter()).zip(&offsets) {
            let best = (0..m)
                .max_by(|&a, &b| {
                    let score = |d: usize| -> f64 {
                        (0..m).map(|i| orig.samples[i] * moved.samples[(i + d) % m]).sum()
                    };
                    score(a).partial_cmp(&score(b)).unwrap()
                })
                .unwrap();
            assert!(best <= 50);
            assert_eq!(best, applied);
            let mut a = orig.samples.clone();
            let mut b = moved.samples.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
            assert_eq!(orig.meta, moved.meta);
        }
    }

    #[test]
    fn config_json_field_names() {
        let cfg = SynthConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        for f in ["n_points", "leak_positions", "spec", "noise", "n_ops", "seed"] {
            assert!(v.get(f).is_some(), "{f}");
        }
        let text = r#"{"n_points": 20, "leak_positions": [{"index": 3, "amplitude": 2.0}],
            "spec": {"target_byte": 2, "intermediate": "sbox_out", "power_model": {"bit_select": 1}},
            "noise": {"sigma": 0.0, "gaussian_sigma": 0.1}, "n_ops": 2, "seed": 5}"#;
        let parsed: SynthConfig = serde_json::from_str(text).unwrap();
        assert_eq!(parsed.spec.power_model, PowerModel::BitSelect(1));
        assert_eq!(parsed.dtype, DType::F32);
        assert_eq!(parsed.leak_positions[0].offset, 0.0);
    }
}
