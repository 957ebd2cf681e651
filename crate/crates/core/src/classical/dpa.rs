use rayon::prelude::*;

use super::{ClassicalError, Ranking};
use crate::trace::{LeakageSpec, PowerModel, TraceSet};

/// Binary selection function `B(C, K)`: one bit of the targeted intermediate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionFn {
    spec: LeakageSpec,
}

impl SelectionFn {
    pub fn new(spec: LeakageSpec) -> Result<Self, ClassicalError> {
        match spec.power_model {
            PowerModel::BitSelect(j) if j < 8 => Ok(Self { spec }),
            _ => Err(ClassicalError::NotBitSelect),
        }
    }

    pub fn spec(&self) -> &LeakageSpec {
        &self.spec
    }

    #[inline]
    pub fn select(&self, meta: &crate::trace::TraceMeta, guess: u8) -> bool {
        self.spec.hypothesis(meta, guess) != 0.0
    }
}

/// Difference of means between traces selected (`B = 1`) and not selected.
pub fn dpa_differential(
    set: &TraceSet,
    sel: &SelectionFn,
    key_guess: u8,
) -> Result<Vec<f64>, ClassicalError> {
    let m = set.n_points();
    let mut sum1 = vec![0.0f64; m];
    let mut sum0 = vec![0.0f64; m];
    let (mut n1, mut n0) = (0usize, 0usize);
    for t in set {
        let (acc, n) = if sel.select(&t.meta, key_guess) {
            (&mut sum1, &mut n1)
        } else {
            (&mut sum0, &mut n0)
        };
        *n += 1;
        for (a, &x) in acc.iter_mut().zip(&t.samples) {
            *a += x;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(ClassicalError::EmptyGroup { guess: key_guess });
    }
    Ok(sum1
        .iter()
        .zip(&sum0)
        .map(|(s1, s0)| s1 / n1 as f64 - s0 / n0 as f64)
        .collect())
}

/// Rank guesses by the peak `|Δ|` of their differential trace. Guesses whose
/// selection leaves a group empty are ranked last.
pub fn dpa_attack(set: &TraceSet, spec: &LeakageSpec) -> Result<Ranking, ClassicalError> {
    let sel = SelectionFn::new(*spec)?;
    if set.n_traces() < 2 {
        return Err(ClassicalError::TooFewTraces {
            needed: 2,
            got: set.n_traces(),
        });
    }
    let stats: Vec<Option<f64>> = (0..=255u8)
        .into_par_iter()
        .map(|g| {
            dpa_differential(set, &sel, g)
                .ok()
                .map(|d| d.iter().fold(0.0f64, |m, x| m.max(x.abs())))
        })
        .collect();
    Ok(Ranking::from_statistics(&stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::synth::{generate_dataset, KeyMode, LeakPoint, NoiseParams, SynthConfig};
    use crate::trace::{DType, Intermediate, Trace, TraceMeta};
    use rand::Rng;

    fn bit0() -> LeakageSpec {
        LeakageSpec::new(0, Intermediate::SboxOut, PowerModel::BitSelect(0)).unwrap()
    }

    fn set_from(rows: Vec<(Vec<f64>, TraceMeta)>) -> TraceSet {
        let m = rows[0].0.len();
        TraceSet::new(
            m,
            DType::F64,
            false,
            rows.into_iter().map(|(samples, meta)| Trace { samples, meta }).collect(),
        )
        .unwrap()
    }

    /// A plaintext byte whose S-box output under key 0 has bit 0 equal to `bit`.
    fn pt_with_bit(bit: u8) -> u8 {
        (0..=255u8).find(|&p| crate::aes::sbox(p) & 1 == bit).unwrap()
    }

    #[test]
    fn two_point_hand_case() {
        let mut m1 = TraceMeta::default();
        m1.plaintext[0] = pt_with_bit(1);
        let mut m0 = TraceMeta::default();
        m0.plaintext[0] = pt_with_bit(0);
        let set = set_from(vec![(vec![1.0], m1), (vec![3.0], m0)]);
        let d = dpa_differential(&set, &SelectionFn::new(bit0()).unwrap(), 0).unwrap();
        assert_eq!(d, vec![-2.0]);
    }

    #[test]
    fn identical_samples_give_zero_differential() {
        let mut rng = rng_from_seed(3);
        let rows = (0..32)
            .map(|_| {
                let mut meta = TraceMeta::default();
                meta.plaintext = rng.random();
                (vec![1.5, -2.0, 7.0], meta)
            })
            .collect();
        let set = set_from(rows);
        let d = dpa_differential(&set, &SelectionFn::new(bit0()).unwrap(), 17).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_group_is_an_error() {
        let mut m = TraceMeta::default();
        m.plaintext[0] = pt_with_bit(1);
        let set = set_from(vec![(vec![0.0], m), (vec![1.0], m)]);
        assert_eq!(
            dpa_differential(&set, &SelectionFn::new(bit0()).unwrap(), 0),
            Err(ClassicalError::EmptyGroup { guess: 0 })
        );
    }

    #[test]
    fn non_bit_model_rejected() {
        let spec = LeakageSpec::new(0, Intermediate::SboxOut, PowerModel::HammingWeight).unwrap();
        assert_eq!(SelectionFn::new(spec), Err(ClassicalError::NotBitSelect));
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = rng_from_seed(64);
        let rows: Vec<(Vec<f64>, TraceMeta)> = (0..64)
            .map(|_| {
                let mut meta = TraceMeta::default();
                meta.plaintext = rng.random();
                ((0..12).map(|_| rng.random_range(-5.0..5.0)).collect(), meta)
            })
            .collect();
        let set = set_from(rows.clone());
        let sel = SelectionFn::new(bit0()).unwrap();
        for guess in [0u8, 1, 0x7f, 0xff] {
            let d = dpa_differential(&set, &sel, guess).unwrap();
            let ones: Vec<&Vec<f64>> = rows
                .iter()
                .filter(|(_, m)| crate::aes::sbox(m.plaintext[0] ^ guess) & 1 == 1)
                .map(|(s, _)| s)
                .collect();
            let zeros: Vec<&Vec<f64>> = rows
                .iter()
                .filter(|(_, m)| crate::aes::sbox(m.plaintext[0] ^ guess) & 1 == 0)
                .map(|(s, _)| s)
                .collect();
            for i in 0..12 {
                let mean = |g: &[&Vec<f64>]| g.iter().map(|s| s[i]).sum::<f64>() / g.len() as f64;
                let expected = mean(&ones) - mean(&zeros);
                assert!((d[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_bit_leak_recovers_key() {
        let cfg = SynthConfig {
            leak_positions: vec![LeakPoint {
                index: 40,
                amplitude: 1.0,
                offset: 0.0,
            }],
            spec: bit0(),
            noise: NoiseParams::NONE,
            ..SynthConfig::default()
        };
        let mut key = [0u8; 16];
        key[0] = 0xa7;
        let set = generate_dataset(512, &cfg, KeyMode::FixedKey(key)).unwrap();
        let ranking = dpa_attack(&set, &bit0()).unwrap();
        assert_eq!(ranking.best(), 0xa7);
    }

    #[test]
    fn equal_traces_rank_in_guess_order() {
        let m = TraceMeta::default();
        let set = set_from(vec![(vec![2.0, 2.0], m), (vec![2.0, 2.0], m)]);
        let r = dpa_attack(&set, &bit0()).unwrap();
        assert_eq!(r.guesses(), (0..=255u8).collect::<Vec<_>>());
    }

    /// Without leakage the true key's rank is spread over the whole range.
    #[test]
    fn no_leak_rank_is_chance() {
        let mut ranks = Vec::new();
        for seed in 0..50u64 {
            let cfg = SynthConfig {
                n_points: 10,
                leak_positions: vec![LeakPoint {
                    index: 4,
                    amplitude: 0.0,
                    offset: 0.0,
                }],
                spec: bit0(),
                noise: NoiseParams {
                    sigma: 0.0,
                    gaussian_sigma: 1.0,
                },
                seed,
                ..SynthConfig::default()
            };
            let mut key = [0u8; 16];
            key[0] = 0x3c;
            let set = generate_dataset(64, &cfg, KeyMode::FixedKey(key)).unwrap();
            ranks.push(dpa_attack(&set, &bit0()).unwrap().position(0x3c) as f64);
        }
        let mean = ranks.iter().sum::<f64>() / ranks.len() as f64;
        // uniform rank: mean 127.5, sd of the mean ~ 73.9 / sqrt(50) ~ 10.5
        assert!((mean - 127.5).abs() < 4.0 * 10.5, "mean rank {mean}");
        assert!(ranks.iter().filter(|&&r| r == 0.0).count() < 5);
    }
}
