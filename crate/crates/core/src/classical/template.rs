use rayon::prelude::*;

use super::{pearson_columns, ClassicalError, Ranking};
use crate::trace::{LeakageSpec, TraceSet};

/// Gaussian template for one intermediate value.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub mean: Vec<f64>,
    /// Unbiased sample covariance (divisor `n - 1`), row-major `P x P`.
    /// Zero when the label has a single trace.
    pub covariance: Vec<f64>,
    pub count: usize,
    /// Ridge added to the diagonal before inversion.
    pub lambda: f64,
}

/// Cholesky factor and log-determinant of a regularized covariance.
#[derive(Debug, Clone, PartialEq)]
struct Factor {
    lower: Vec<f64>,
    log_det: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub poi: Vec<usize>,
    pub templates: Vec<Template>,
    factors: Vec<Factor>,
}

/// `max(1e-6 * trace(cov) / P, 1e-12)`.
pub fn regularization(cov: &[f64], p: usize) -> f64 {
    let tr: f64 = (0..p).map(|i| cov[i * p + i]).sum();
    (1e-6 * tr / p as f64).max(1e-12)
}

fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

impl Template {
    pub fn regularized(&self) -> Vec<f64> {
        let p = self.mean.len();
        let mut c = self.covariance.clone();
        for i in 0..p {
            c[i * p + i] += self.lambda;
        }
        c
    }
}

impl TemplateSet {
    pub fn from_templates(poi: Vec<usize>, templates: Vec<Template>) -> Result<Self, ClassicalError> {
        assert_eq!(templates.len(), 256);
        let p = poi.len();
        let factors = templates
            .iter()
            .enumerate()
            .map(|(z, t)| {
                let lower = cholesky(&t.regularized(), p)
                    .ok_or(ClassicalError::SingularCovariance { label: z as u8 })?;
                let log_det = 2.0 * (0..p).map(|i| lower[i * p + i].ln()).sum::<f64>();
                Ok(Factor { lower, log_det })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            poi,
            templates,
            factors,
        })
    }

    /// Gaussian log-density of `x` (values at the POIs) under label `z`.
    pub fn log_density(&self, z: u8, x: &[f64]) -> f64 {
        let p = self.poi.len();
        let t = &self.templates[z as usize];
        let f = &self.factors[z as usize];
        // forward substitution: L y = x - mu
        let mut y = vec![0.0f64; p];
        for i in 0..p {
            let mut s = x[i] - t.mean[i];
            for k in 0..i {
                s -= f.lower[i * p + k] * y[k];
            }
            y[i] = s / f.lower[i * p + i];
        }
        let quad: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + f.log_det + quad)
    }

    /// Remap templates so that label `z` of the result is label `perm[z]` of `self`.
    pub fn permuted(&self, perm: impl Fn(u8) -> u8) -> TemplateSet {
        let templates = (0..=255u8).map(|z| self.templates[perm(z) as usize].clone()).collect();
        let factors = (0..=255u8).map(|z| self.factors[perm(z) as usize].clone()).collect();
        TemplateSet {
            poi: self.poi.clone(),
            templates,
            factors,
        }
    }
}

/// Per-label mean and unbiased covariance at the points of interest.
pub fn build_templates(profiling: &TraceSet, poi: &[usize]) -> Result<TemplateSet, ClassicalError> {
    let m = profiling.n_points();
    if let Some(&index) = poi.iter().find(|&&i| i >= m) {
        return Err(ClassicalError::PoiOutOfRange { index, n_points: m });
    }
    let p = poi.len();
    let mut by_label: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 256];
    for t in profiling {
        by_label[t.meta.label as usize].push(poi.iter().map(|&i| t.samples[i]).collect());
    }
    if let Some(z) = by_label.iter().position(|v| v.is_empty()) {
        return Err(ClassicalError::MissingLabel { label: z as u8 });
    }
    let templates = by_label
        .par_iter()
        .map(|rows| {
            let n = rows.len();
            let mut mean = vec![0.0f64; p];
            for r in rows {
                for (a, x) in mean.iter_mut().zip(r) {
                    *a += x;
                }
            }
            for a in mean.iter_mut() {
                *a /= n as f64;
            }
            let mut covariance = vec![0.0f64; p * p];
            if n > 1 {
                for r in rows {
                    for i in 0..p {
                        let di = r[i] - mean[i];
                        for j in 0..p {
                            covariance[i * p + j] += di * (r[j] - mean[j]);
                        }
                    }
                }
                for c in covariance.iter_mut() {
                    *c /= (n - 1) as f64;
                }
            }
            let lambda = regularization(&covariance, p.max(1));
            Template {
                mean,
                covariance,
                count: n,
                lambda,
            }
        })
        .collect();
    TemplateSet::from_templates(poi.to_vec(), templates)
}

/// Log-density of every attack trace under every label: `[n_traces][256]`.
pub fn template_log_likelihoods(
    tpl: &TemplateSet,
    attack: &TraceSet,
) -> Result<Vec<[f64; 256]>, ClassicalError> {
    let needed = tpl.poi.iter().max().map_or(0, |&i| i + 1);
    if attack.n_points() < needed {
        return Err(ClassicalError::ShapeMismatch {
            needed,
            got: attack.n_points(),
        });
    }
    Ok(attack
        .traces()
        .par_iter()
        .map(|t| {
            let x: Vec<f64> = tpl.poi.iter().map(|&i| t.samples[i]).collect();
            let mut row = [0.0f64; 256];
            for (z, r) in row.iter_mut().enumerate() {
                *r = tpl.log_density(z as u8, &x);
            }
            row
        })
        .collect())
}

/// Log-likelihoods normalized per trace into log-posteriors over labels
/// (uniform prior).
pub fn template_log_posteriors(
    tpl: &TemplateSet,
    attack: &TraceSet,
) -> Result<Vec<[f64; 256]>, ClassicalError> {
    let mut rows = template_log_likelihoods(tpl, attack)?;
    for row in rows.iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(rows)
}

/// `score(k) = sum_c log N(x_c; mu_z, Sigma_z)` with `z` the intermediate of
/// trace `c` under guess `k`.
pub fn template_scores(
    tpl: &TemplateSet,
    attack: &TraceSet,
    spec: &LeakageSpec,
) -> Result<[f64; 256], ClassicalError> {
    let ll = template_log_likelihoods(tpl, attack)?;
    let mut scores = [0.0f64; 256];
    for (t, row) in attack.iter().zip(&ll) {
        for (k, s) in scores.iter_mut().enumerate() {
            *s += row[spec.label_under_guess(&t.meta, k as u8) as usize];
        }
    }
    Ok(scores)
}

pub fn template_attack(
    tpl: &TemplateSet,
    attack: &TraceSet,
    spec: &LeakageSpec,
) -> Result<Ranking, ClassicalError> {
    let scores = template_scores(tpl, attack, spec)?;
    let stats: Vec<Option<f64>> = scores.iter().map(|&s| Some(s)).collect();
    Ok(Ranking::from_statistics(&stats))
}

/// The `p` points most correlated (in `|C|`) with the modelled power of each
/// trace's stored label. Returned in ascending index order.
pub fn select_poi(profiling: &TraceSet, spec: &LeakageSpec, p: usize) -> Vec<usize> {
    let hyp: Vec<f64> = profiling
        .iter()
        .map(|t| crate::trace::power_value(t.meta.label, spec.power_model))
        .collect();
    let corr = pearson_columns(profiling, &hyp);
    let mut idx: Vec<usize> = (0..profiling.n_points()).collect();
    idx.sort_by(|&a, &b| {
        let ca = corr[a].map_or(0.0, f64::abs);
        let cb = corr[b].map_or(0.0, f64::abs);
        cb.total_cmp(&ca).then(a.cmp(&b))
    });
    idx.truncate(p);
    idx.sort_unstable();
    idx
}
