use rayon::prelude::*;

use super::{ClassicalError, Ranking};
use crate::trace::{LeakageSpec, TraceSet};

/// Pearson correlation per (key guess, sampling point). `None` marks entries
/// whose samples or hypotheses have zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    n_points: usize,
    values: Vec<Option<f64>>,
}

impl CorrelationMatrix {
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn get(&self, guess: u8, point: usize) -> Option<f64> {
        self.values[guess as usize * self.n_points + point]
    }

    pub fn row(&self, guess: u8) -> &[Option<f64>] {
        let start = guess as usize * self.n_points;
        &self.values[start..start + self.n_points]
    }

    /// Peak `|C|` over the defined entries of a guess's row.
    pub fn peak(&self, guess: u8) -> Option<f64> {
        self.row(guess)
            .iter()
            .flatten()
            .map(|c| c.abs())
            .reduce(f64::max)
    }

    /// One line per guess, `M` comma-separated values; undefined entries empty.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        for g in 0..=255u8 {
            let line: Vec<String> = self
                .row(g)
                .iter()
                .map(|c| c.map(|v| v.to_string()).unwrap_or_default())
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Column means and centered columns-as-rows of the sample matrix.
struct Centered {
    n: usize,
    m: usize,
    /// trace-major centered samples
    data: Vec<f64>,
    /// per-point sum of squared deviations
    ss: Vec<f64>,
}

impl Centered {
    fn new(set: &TraceSet) -> Self {
        let n = set.n_traces();
        let m = set.n_points();
        let mut mean = vec![0.0f64; m];
        for t in set {
            for (a, x) in mean.iter_mut().zip(&t.samples) {
                *a += x;
            }
        }
        for a in mean.iter_mut() {
            *a /= n as f64;
        }
        let mut data = Vec::with_capacity(n * m);
        let mut ss = vec![0.0f64; m];
        for t in set {
            for ((x, mu), s) in t.samples.iter().zip(&mean).zip(ss.iter_mut()) {
                let d = x - mu;
                data.push(d);
                *s += d * d;
            }
        }
        Self { n, m, data, ss }
    }

    fn correlate(&self, hyp: &[f64]) -> Vec<Option<f64>> {
        let hm = hyp.iter().sum::<f64>() / self.n as f64;
        let mut num = vec![0.0f64; self.m];
        let mut sh = 0.0f64;
        for (c, &h) in hyp.iter().enumerate() {
            let d = h - hm;
            sh += d * d;
            let row = &self.data[c * self.m..(c + 1) * self.m];
            for (a, x) in num.iter_mut().zip(row) {
                *a += d * x;
            }
        }
        num.iter()
            .zip(&self.ss)
            .map(|(&nu, &sx)| {
                let den = (sx * sh).sqrt();
                (sx > 0.0 && sh > 0.0 && den > 0.0).then(|| (nu / den).clamp(-1.0, 1.0))
            })
            .collect()
    }
}

/// Correlation of every column of `set` with `hypothesis` (one value per trace).
pub fn pearson_columns(set: &TraceSet, hypothesis: &[f64]) -> Vec<Option<f64>> {
    assert_eq!(hypothesis.len(), set.n_traces());
    Centered::new(set).correlate(hypothesis)
}

pub fn cpa_correlation(set: &TraceSet, spec: &LeakageSpec) -> Result<CorrelationMatrix, ClassicalError> {
    if set.n_traces() < 3 {
        return Err(ClassicalError::TooFewTraces {
            needed: 3,
            got: set.n_traces(),
        });
    }
    let centered = Centered::new(set);
    if centered.ss.iter().all(|&s| s == 0.0) {
        return Err(ClassicalError::AllConstant);
    }
    let rows: Vec<Vec<Option<f64>>> = (0..=255u8)
        .into_par_iter()
        .map(|g| {
            let hyp: Vec<f64> = set.iter().map(|t| spec.hypothesis(&t.meta, g)).collect();
            centered.correlate(&hyp)
        })
        .collect();
    Ok(CorrelationMatrix {
        n_points: set.n_points(),
        values: rows.into_iter().flatten().collect(),
    })
}

/// Rank guesses by peak `|C|` over all sampling points.
pub fn cpa_attack(set: &TraceSet, spec: &LeakageSpec) -> Result<Ranking, ClassicalError> {
    let corr = cpa_correlation(set, spec)?;
    let stats: Vec<Option<f64>> = (0..=255u8).map(|g| corr.peak(g)).collect();
    Ok(Ranking::from_statistics(&stats))
}
