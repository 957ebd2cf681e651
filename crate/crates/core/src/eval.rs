//! Key rank, guessing entropy and success rate over per-trace label
//! posteriors.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{indexed_seed, rng_from_seed};
use crate::trace::{LeakageSpec, TraceMeta};

/// Floor applied to probabilities before taking logs.
pub const P_MIN: f64 = 1e-40;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max_traces {max_traces} exceeds the {available} traces available")]
    InsufficientTraces { max_traces: usize, available: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyScores(pub [f64; 256]);

impl KeyScores {
    pub fn zero() -> Self {
        KeyScores([0.0; 256])
    }
}

/// Per-trace score contribution of every key guess:
/// `row[k] = log max(p[label_k], P_MIN)`.
pub fn guess_contributions<P: AsRef<[f64]>>(
    probs: &[P],
    metas: &[TraceMeta],
    spec: &LeakageSpec,
) -> Result<Vec<[f64; 256]>, EvalError> {
    contributions(probs, metas, spec, |p| p.max(P_MIN).ln())
}

/// As [`guess_contributions`] for log-probabilities, floored at `ln P_MIN`.
pub fn guess_contributions_log<P: AsRef<[f64]>>(
    log_probs: &[P],
    metas: &[TraceMeta],
    spec: &LeakageSpec,
) -> Result<Vec<[f64; 256]>, EvalError> {
    let floor = P_MIN.ln();
    contributions(log_probs, metas, spec, |lp| lp.max(floor))
}

fn contributions<P: AsRef<[f64]>>(
    rows: &[P],
    metas: &[TraceMeta],
    spec: &LeakageSpec,
    f: impl Fn(f64) -> f64,
) -> Result<Vec<[f64; 256]>, EvalError> {
    if rows.len() != metas.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} posterior rows for {} traces",
            rows.len(),
            metas.len()
        )));
    }
    rows.iter()
        .zip(metas)
        .map(|(row, meta)| {
            let row = row.as_ref();
            if row.len() != 256 {
                return Err(EvalError::ShapeMismatch(format!(
                    "posterior row has {} classes, expected 256",
                    row.len()
                )));
            }
            let mut out = [0.0f64; 256];
            for (k, o) in out.iter_mut().enumerate() {
                *o = f(row[spec.label_under_guess(meta, k as u8) as usize]);
            }
            Ok(out)
        })
        .collect()
}

/// `score(k) = sum_c log max(probs[c][label_k(c)], P_MIN)`.
pub fn key_scores<P: AsRef<[f64]>>(
    probs: &[P],
    metas: &[TraceMeta],
    spec: &LeakageSpec,
) -> Result<KeyScores, EvalError> {
    let mut s = KeyScores::zero();
    for row in guess_contributions(probs, metas, spec)? {
        for (a, b) in s.0.iter_mut().zip(row.iter()) {
            *a += b;
        }
    }
    Ok(s)
}

/// Number of guesses scoring strictly higher than the true key.
pub fn rank(scores: &KeyScores, true_key: u8) -> usize {
    let t = scores.0[true_key as usize];
    scores.0.iter().filter(|&&s| s > t).count()
}

pub fn guessing_entropy(ranks: &[usize]) -> f64 {
    assert!(!ranks.is_empty());
    ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
}

pub fn success_rate(ranks: &[usize]) -> f64 {
    assert!(!ranks.is_empty());
    ranks.iter().filter(|&&r| r == 0).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub n_traces: usize,
    /// Guessing entropy at `n_traces`.
    pub mean_rank: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub points: Vec<RankPoint>,
    pub n_experiments: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub max_traces: usize,
    pub step: usize,
    pub n_experiments: usize,
    pub seed: u64,
}

/// Ranks of one experiment (rows visited in `order`) at every sampled size.
fn experiment_ranks(contrib: &[[f64; 256]], order: &[usize], true_key: u8, p: &CurveParams) -> Vec<usize> {
    let mut acc = KeyScores::zero();
    let mut out = Vec::with_capacity(p.max_traces / p.step);
    for (n, &c) in order.iter().take(p.max_traces).enumerate() {
        for (a, b) in acc.0.iter_mut().zip(contrib[c].iter()) {
            *a += b;
        }
        if (n + 1) % p.step == 0 {
            out.push(rank(&acc, true_key));
        }
    }
    out
}

/// Mean rank at `n = step, 2 step, ..., max_traces`, each averaged over
/// `n_experiments` random orderings of the attack set. An experiment's size-`n`
/// subset is the first `n` traces of its ordering, so subsets are drawn
/// without replacement. Experiment `e` shuffles with seed
/// `indexed_seed(seed, e)`.
pub fn rank_curve_from_contributions(
    contrib: &[[f64; 256]],
    true_key: u8,
    p: &CurveParams,
) -> Result<RankCurve, EvalError> {
    if p.step == 0 {
        return Err(EvalError::InvalidParameter("step must be at least 1"));
    }
    if p.n_experiments == 0 {
        return Err(EvalError::InvalidParameter("n_experiments must be at least 1"));
    }
    if p.max_traces < p.step {
        return Err(EvalError::InvalidParameter("max_traces must be at least step"));
    }
    if p.max_traces > contrib.len() {
        return Err(EvalError::InsufficientTraces {
            max_traces: p.max_traces,
            available: contrib.len(),
        });
    }
    let per_experiment: Vec<Vec<usize>> = (0..p.n_experiments)
        .into_par_iter()
        .map(|e| {
            let mut rng = rng_from_seed(indexed_seed(p.seed, e as u64));
            let mut order: Vec<usize> = (0..contrib.len()).collect();
            order.shuffle(&mut rng);
            experiment_ranks(contrib, &order, true_key, p)
        })
        .collect();
    let n_points = p.max_traces / p.step;
    let points = (0..n_points)
        .map(|j| {
            let ranks: Vec<usize> = per_experiment.iter().map(|r| r[j]).collect();
            RankPoint {
                n_traces: (j + 1) * p.step,
                mean_rank: guessing_entropy(&ranks),
                success_rate: success_rate(&ranks),
            }
        })
        .collect();
    Ok(RankCurve {
        points,
        n_experiments: p.n_experiments,
        seed: p.seed,
    })
}

pub fn rank_curve<P: AsRef<[f64]>>(
    probs: &[P],
    metas: &[TraceMeta],
    spec: &LeakageSpec,
    true_key: u8,
    p: &CurveParams,
) -> Result<RankCurve, EvalError> {
    let contrib = guess_contributions(probs, metas, spec)?;
    rank_curve_from_contributions(&contrib, true_key, p)
}

/// Smallest sampled `n` from which the mean rank is 0 at every later sample.
pub fn min_traces_to_rank0(curve: &RankCurve) -> Option<usize> {
    let mut found = None;
    for pt in curve.points.iter().rev() {
        if pt.mean_rank == 0.0 {
            found = Some(pt.n_traces);
        } else {
            break;
        }
    }
    found
}

impl RankCurve {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "n_traces,mean_rank,success_rate")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.n_traces, p.mean_rank, p.success_rate)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> CurveSummary {
        let last = self.points.last();
        CurveSummary {
            min_traces_to_rank0: min_traces_to_rank0(self),
            ge_at_max: last.map_or(f64::NAN, |p| p.mean_rank),
            sr_at_max: last.map_or(f64::NAN, |p| p.success_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub min_traces_to_rank0: Option<usize>,
    pub ge_at_max: f64,
    pub sr_at_max: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Intermediate, PowerModel};
    use rand::Rng;

    fn spec() -> LeakageSpec {
        LeakageSpec::new(0, Intermediate::SboxOut, PowerModel::Identity).unwrap()
    }

    fn metas(n: usize, key: u8, seed: u64) -> Vec<TraceMeta> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let mut m = TraceMeta {
                    plaintext: rng.random(),
                    ..TraceMeta::default()
                };
                m.key[0] = key;
                m.label = spec().label_of(&m);
                m
            })
            .collect()
    }

    fn one_hot(metas: &[TraceMeta]) -> Vec<Vec<f64>> {
        metas
            .iter()
            .map(|m| {
                let mut p = vec![0.0; 256];
                p[m.label as usize] = 1.0;
                p
            })
            .collect()
    }

    #[test]
    fn oracle_posterior_scores_true_key_highest() {
        let m = metas(1, 0x4d, 1);
        let s = key_scores(&one_hot(&m), &m, &spec()).unwrap();
        let best = (0..256).max_by(|&a, &b| s.0[a].total_cmp(&s.0[b])).unwrap();
        assert_eq!(best, 0x4d);
        assert!(s.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_posteriors_tie() {
        let m = metas(5, 0, 2);
        let probs = vec![vec![1.0 / 256.0; 256]; 5];
        let s = key_scores(&probs, &m, &spec()).unwrap();
        assert!(s.0.iter().all(|&v| v == s.0[0]));
        assert_eq!(rank(&s, 77), 0);
    }

    #[test]
    fn scores_are_additive() {
        let m = metas(2, 9, 3);
        let mut rng = rng_from_seed(4);
        let probs: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let v: Vec<f64> = (0..256).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let both = key_scores(&probs, &m, &spec()).unwrap();
        let a = key_scores(&probs[..1], &m[..1], &spec()).unwrap();
        let b = key_scores(&probs[1..], &m[1..], &spec()).unwrap();
        for k in 0..256 {
            assert_eq!(both.0[k], a.0[k] + b.0[k]);
        }
    }

    #[test]
    fn shape_mismatch() {
        let m = metas(2, 0, 1);
        assert!(matches!(
            key_scores(&[vec![0.5; 256]], &m, &spec()),
            Err(EvalError::ShapeMismatch(_))
        ));
        assert!(matches!(
            key_scores(&[vec![0.5; 10], vec![0.5; 10]], &m, &spec()),
            Err(EvalError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rank_rules() {
        let mut s = KeyScores([0.0; 256]);
        s.0[3] = 1.0;
        assert_eq!(rank(&s, 3), 0);
        assert_eq!(rank(&KeyScores([2.0; 256]), 200), 0);
        let distinct = KeyScores(std::array::from_fn(|k| k as f64));
        assert_eq!(rank(&distinct, 0), 255);
    }

    #[test]
    fn ge_and_sr() {
        assert_eq!(guessing_entropy(&[0, 2, 4]), 2.0);
        assert_eq!(success_rate(&[0, 0, 0]), 1.0);
        assert_eq!(guessing_entropy(&[5]), 5.0);
        assert_eq!(success_rate(&[5]), 0.0);
    }

    fn curve(points: &[(usize, f64)]) -> RankCurve {
        RankCurve {
            points: points
                .iter()
                .map(|&(n, r)| RankPoint {
                    n_traces: n,
                    mean_rank: r,
                    success_rate: 0.0,
                })
                .collect(),
            n_experiments: 1,
            seed: 0,
        }
    }

    #[test]
    fn min_traces_stability_rule() {
        assert_eq!(min_traces_to_rank0(&curve(&[(100, 3.0), (200, 0.0), (300, 0.0)])), Some(200));
        assert_eq!(min_traces_to_rank0(&curve(&[(100, 0.0), (200, 1.0), (300, 0.0)])), Some(300));
        assert_eq!(min_traces_to_rank0(&curve(&[(100, 2.0), (200, 1.0)])), None);
    }

    #[test]
    fn oracle_and_uniform_curves_are_zero() {
        let m = metas(50, 0x10, 5);
        let p = CurveParams {
            max_traces: 50,
            step: 5,
            n_experiments: 10,
            seed: 1,
        };
        let c = rank_curve(&one_hot(&m), &m, &spec(), 0x10, &p).unwrap();
        assert!(c.points.iter().all(|pt| pt.mean_rank == 0.0 && pt.success_rate == 1.0));
        assert_eq!(min_traces_to_rank0(&c), Some(5));
        let uniform = vec![vec![1.0 / 256.0; 256]; 50];
        let c = rank_curve(&uniform, &m, &spec(), 0x10, &p).unwrap();
        assert!(c.points.iter().all(|pt| pt.mean_rank == 0.0));
        assert_eq!(c.points.len(), 10);
        assert_eq!(c.points[9].n_traces, 50);
    }

    #[test]
    fn insufficient_traces() {
        let m = metas(10, 0, 5);
        let p = CurveParams {
            max_traces: 11,
            step: 1,
            n_experiments: 1,
            seed: 0,
        };
        assert!(matches!(
            rank_curve(&one_hot(&m), &m, &spec(), 0, &p),
            Err(EvalError::InsufficientTraces { .. })
        ));
    }

    /// Posteriors that put 0.9 on the true label with probability 0.9 and on
    /// a random label otherwise; remaining mass spread uniformly.
    #[test]
    fn informative_posteriors_reach_rank_zero() {
        let key = 0xb5;
        let m = metas(4000, key, 6);
        let mut rng = rng_from_seed(7);
        let probs: Vec<Vec<f64>> = m
            .iter()
            .map(|meta| {
                let peak = if rng.random_bool(0.9) {
                    meta.label
                } else {
                    rng.random()
                };
                let mut p = vec![0.1 / 255.0; 256];
                p[peak as usize] = 0.9;
                p
            })
            .collect();
        let p = CurveParams {
            max_traces: 8,
            step: 1,
            n_experiments: 1000,
            seed: 3,
        };
        let c = rank_curve(&probs, &m, &spec(), key, &p).unwrap();
        for w in c.points.windows(2) {
            // Monte-Carlo slack: 1000 experiments resolve mean ranks to ~0.01
            assert!(w[1].mean_rank <= w[0].mean_rank + 0.01, "{:?}", c.points);
        }
        assert!(c.points[3].success_rate >= 0.99, "{:?}", c.points[3]);
    }

    #[test]
    fn random_scores_average_mid_rank() {
        let mut rng = rng_from_seed(2000);
        let ranks: Vec<usize> = (0..2000)
            .map(|_| {
                let s = KeyScores(std::array::from_fn(|_| rng.random::<f64>()));
                rank(&s, 0)
            })
            .collect();
        assert!((guessing_entropy(&ranks) - 127.5).abs() < 3.0);
    }

    #[test]
    fn csv_and_summary() {
        let c = curve(&[(10, 1.0), (20, 0.0)]);
        let mut out = Vec::new();
        c.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "n_traces,mean_rank,success_rate\n10,1,0\n20,0,0\n"
        );
        let s = c.summary();
        assert_eq!(s.min_traces_to_rank0, Some(20));
        assert_eq!(s.ge_at_max, 0.0);
    }
}
