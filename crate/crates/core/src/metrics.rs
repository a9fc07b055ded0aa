//! Confusion matrices and the overall accuracy, average accuracy and kappa
//! coefficient derived from them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `C×C` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "{} counts for a {classes}×{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Index(format!(
                "pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Adds another matrix's counts (order-independent).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "merging confusion matrices of different sizes",
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    /// Classes with no true samples, excluded from the average accuracy.
    pub absent_classes: Vec<usize>,
}

/// OA = trace/total; AA = mean recall over present classes;
/// κ = (p_o − p_e)/(1 − p_e) with p_e = Σ row_c·col_c / total².
///
/// κ is evaluated as `(n·trace − Σ row·col) / (n² − Σ row·col)` on exact
/// integers so that only the final division rounds. When every sample and
/// every prediction falls in one class, chance agreement is total and κ is
/// defined as 1 if agreement is perfect.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::EmptyInput("confusion matrix has no samples".into()));
    }
    let trace = cm.trace();
    let oa = trace as f64 / n as f64;
    let mut per_class = Vec::with_capacity(cm.classes());
    let mut absent = Vec::new();
    for c in 0..cm.classes() {
        let r = cm.row_sum(c);
        if r == 0 {
            absent.push(c);
            per_class.push(None);
        } else {
            per_class.push(Some(cm.get(c, c) as f64 / r as f64));
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let chance: u128 = (0..cm.classes())
        .map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128)
        .sum();
    let n2 = n as u128 * n as u128;
    let num = n as u128 * trace as u128;
    let kappa = if n2 == chance {
        if trace == n {
            1.0
        } else {
            0.0
        }
    } else {
        (num as f64 - chance as f64) / (n2 - chance) as f64
    };
    Ok(Metrics {
        oa,
        aa,
        kappa,
        per_class,
        absent_classes: absent,
    })
}

/// Row-wise argmax of `B×C` logits; ties resolve to the lower class index.
pub fn argmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 7, 0, 0, 0, 1]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        let single = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 0]).unwrap();
        let m = metrics(&single).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        assert_eq!(m.absent_classes, vec![1]);
    }

    #[test]
    fn chance_level_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![50, 0, 50, 0]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (0.5, 0.5, 0.0));
    }

    #[test]
    fn two_class_reference() {
        // p_e = (50·55 + 50·45) / 100² = 0.5, κ = (0.85 − 0.5)/0.5 = 0.7.
        let cm = ConfusionMatrix::from_counts(2, vec![45, 5, 10, 40]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.oa, 0.85);
        assert!((m.kappa - 0.7).abs() < 1e-15);
        assert!((m.aa - 0.85).abs() < 1e-15);
    }

    #[test]
    fn empty_and_index_errors() {
        assert!(metrics(&ConfusionMatrix::new(3)).is_err());
        assert!(ConfusionMatrix::new(2).add(2, 0).is_err());
    }

    #[test]
    fn argmax_ties_to_lower_index() {
        assert_eq!(
            argmax_rows(&[1.0f64, 3.0, 3.0, 0.0, 0.0, 0.0], 3),
            vec![1, 0]
        );
    }
}
