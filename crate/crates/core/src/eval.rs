//! Segmentation scores and summaries of posterior samples.

use crate::error::{Error, Result};
use crate::potts::LabelField;

fn check_pair(predicted: &LabelField, truth: &LabelField) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "predicted has {} sites, truth has {}",
            predicted.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Dice overlap for class `j`: `2 |P & T| / (|P| + |T|)`.
///
/// Both sets empty gives 1, exactly one empty gives 0.
pub fn dice(predicted: &LabelField, truth: &LabelField, j: usize) -> Result<f64> {
    check_pair(predicted, truth)?;
    let (mut p, mut t, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in predicted.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (a as usize == j, b as usize == j);
        p += ia as u64;
        t += ib as u64;
        both += (ia && ib) as u64;
    }
    Ok(match (p, t) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (p + t) as f64,
    })
}

/// Fraction of sites whose labels differ.
pub fn misclassification(predicted: &LabelField, truth: &LabelField) -> Result<f64> {
    check_pair(predicted, truth)?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let wrong = predicted
        .labels()
        .iter()
        .zip(truth.labels())
        .filter(|(a, b)| a != b)
        .count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// Scores of one segmentation against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub dice: Vec<f64>,
    pub misclassification: f64,
    /// `k x k` counts, row = true class, column = predicted class
    pub confusion: Vec<u64>,
    pub k: usize,
}

impl ScoreReport {
    pub fn new(predicted: &LabelField, truth: &LabelField) -> Result<Self> {
        check_pair(predicted, truth)?;
        let k = predicted.k().max(truth.k());
        let mut confusion = vec![0u64; k * k];
        for (&p, &t) in predicted.labels().iter().zip(truth.labels()) {
            confusion[t as usize * k + p as usize] += 1;
        }
        let dice = (0..k)
            .map(|j| dice(predicted, truth, j))
            .collect::<Result<_>>()?;
        Ok(Self {
            dice,
            misclassification: misclassification(predicted, truth)?,
            confusion,
            k,
        })
    }

    pub fn confusion(&self, truth: usize, predicted: usize) -> u64 {
        self.confusion[truth * self.k + predicted]
    }

    /// Diagonal mass of the confusion matrix over its total.
    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.confusion.iter().sum();
        let hits: u64 = (0..self.k).map(|j| self.confusion(j, j)).sum();
        if total == 0 {
            1.0
        } else {
            1.0 - (total - hits) as f64 / total as f64
        }
    }
}

/// Shortest interval spanning `ceil(level * N)` sorted samples.
pub fn hpd_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("samples contain NaN".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let m = ((level * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (sorted[0], sorted[m - 1]);
    for lo in 1..=n - m {
        let hi = sorted[lo + m - 1];
        if hi - sorted[lo] < best.1 - best.0 {
            best = (sorted[lo], hi);
        }
    }
    Ok(best)
}

/// Mean and sample standard deviation of `a - b`.
pub fn paired_difference_summary(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} scores paired with {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Data("no pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = if d.len() < 2 {
        0.0
    } else {
        (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, sd))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} values paired with {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Data("need at least two pairs".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain(
            "rank correlation undefined for constant input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
