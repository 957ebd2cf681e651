//! Classical first-order attacks: DPA, CPA and Gaussian templates.

mod cpa;
mod dpa;
mod template;

use std::io::{self, Write};

pub use cpa::{cpa_attack, cpa_correlation, pearson_columns, CorrelationMatrix};
pub use dpa::{dpa_attack, dpa_differential, SelectionFn};
pub use template::{
    build_templates, regularization, select_poi, template_attack, template_log_likelihoods,
    template_log_posteriors, template_scores, Template, TemplateSet,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassicalError {
    #[error("selection function puts every trace in one group for guess {guess:#04x}")]
    EmptyGroup { guess: u8 },
    #[error("every sampling point has zero variance")]
    AllConstant,
    #[error("attack needs at least {needed} traces, got {got}")]
    TooFewTraces { needed: usize, got: usize },
    #[error("no profiling trace carries label {label:#04x}")]
    MissingLabel { label: u8 },
    #[error("covariance of label {label:#04x} is not positive definite after regularization")]
    SingularCovariance { label: u8 },
    #[error("DPA needs a bit-select power model")]
    NotBitSelect,
    #[error("point of interest {index} outside trace of {n_points} points")]
    PoiOutOfRange { index: usize, n_points: usize },
    #[error("attack traces have {got} points, templates expect at least {needed}")]
    ShapeMismatch { needed: usize, got: usize },
}

/// Key guesses ordered best-first.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// `(guess, statistic)` in rank order; `None` marks a guess that could
    /// not be scored.
    pub entries: Vec<(u8, Option<f64>)>,
}

impl Ranking {
    /// Order by descending statistic; unscored guesses last; ties by ascending guess.
    pub fn from_statistics(stats: &[Option<f64>]) -> Self {
        assert_eq!(stats.len(), 256);
        let mut entries: Vec<(u8, Option<f64>)> = stats
            .iter()
            .enumerate()
            .map(|(g, &s)| (g as u8, s))
            .collect();
        entries.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.0.cmp(&b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(&b.0),
        });
        Self { entries }
    }

    pub fn best(&self) -> u8 {
        self.entries[0].0
    }

    pub fn position(&self, guess: u8) -> usize {
        self.entries.iter().position(|e| e.0 == guess).unwrap()
    }

    pub fn statistic(&self, guess: u8) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == guess).and_then(|e| e.1)
    }

    pub fn guesses(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// CSV with header `key_guess,statistic,rank`, one row per guess in rank
    /// order. Unscored guesses have an empty statistic.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "key_guess,statistic,rank")?;
        for (rank, (g, s)) in self.entries.iter().enumerate() {
            match s {
                Some(s) => writeln!(w, "{g},{s},{rank}")?,
                None => writeln!(w, "{g},,{rank}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_order_and_ties() {
        let mut stats = vec![Some(0.0); 256];
        stats[9] = Some(2.0);
        stats[4] = Some(2.0);
        stats[0] = None;
        let r = Ranking::from_statistics(&stats);
        assert_eq!(&r.guesses()[..3], &[4, 9, 1]);
        assert_eq!(r.entries[255].0, 0);
        assert_eq!(r.position(9), 1);

        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 257);
        assert_eq!(text.lines().nth(1).unwrap(), "4,2,0");
        assert_eq!(text.lines().last().unwrap(), "0,,255");
    }
}
