//! Confusion matrix and the two accuracy figures: weighted accuracy (share of
//! utterances right) and unweighted accuracy (mean per-class recall).

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::arg("confusion matrix must be square"));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::arg(format!(
                "class pair ({truth}, {predicted}) outside 0..{}",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    /// Per-class recall; `None` for classes with no utterances.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| match self.support(k) {
                0 => None,
                n => Some(self.get(k, k) as f64 / n as f64),
            })
            .collect()
    }

    /// Element-wise sum, for pooling folds.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::arg("cannot merge matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn to_csv(&self, labels: &[&str]) -> String {
        let mut s = String::from("true\\pred");
        for k in 0..self.classes {
            let _ = write!(s, ",{}", labels.get(k).copied().unwrap_or("?"));
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(labels.get(t).copied().unwrap_or("?"));
            for p in 0..self.classes {
                let _ = write!(s, ",{}", self.get(t, p));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        m.record(t, p)?;
    }
    Ok(m)
}

pub fn weighted_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    match m.total() {
        0 => Err(Error::UndefinedMetric("weighted accuracy of an empty matrix".into())),
        n => {
            let g = gcd(m.trace() as u128, n as u128);
            Ok((m.trace() as u128 / g) as f64 / (n as u128 / g) as f64)
        }
    }
}

/// Mean recall over classes that have at least one utterance.
///
/// Evaluated as one reduced fraction when the integers allow it, so equal
/// class supports give a result bit-identical to the weighted accuracy.
pub fn unweighted_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    let present: Vec<(u64, u64)> = (0..m.classes())
        .map(|k| (m.get(k, k), m.support(k)))
        .filter(|&(_, s)| s > 0)
        .collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("unweighted accuracy with every class empty".into()));
    }
    if let Some((num, den)) = exact_mean(&present) {
        return Ok(num as f64 / den as f64);
    }
    Ok(present.iter().map(|&(d, s)| d as f64 / s as f64).sum::<f64>() / present.len() as f64)
}

/// `sum(d/s) / n` as a reduced fraction, if it fits in 53-bit integers.
fn exact_mean(fracs: &[(u64, u64)]) -> Option<(u128, u128)> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(d, s) in fracs {
        let (d, s) = (d as u128, s as u128);
        num = num.checked_mul(s)?.checked_add(d.checked_mul(den)?)?;
        den = den.checked_mul(s)?;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den = den.checked_mul(fracs.len() as u128)?;
    let g = gcd(num, den);
    let (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then_some((num, den))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub fold: String,
    pub wa: f64,
    pub ua: f64,
    pub recalls: Vec<Option<f64>>,
}

impl MetricsRow {
    pub fn from_matrix(fold: impl Into<String>, m: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            fold: fold.into(),
            wa: weighted_accuracy(m)?,
            ua: unweighted_accuracy(m)?,
            recalls: m.recalls(),
        })
    }
}

/// Per-fold rows followed by `mean` (average of fold metrics) and `pooled`
/// (metrics of the summed confusion matrix) when there is more than one fold.
pub fn metrics_report(folds: &[(String, ConfusionMatrix)]) -> Result<Vec<MetricsRow>> {
    let mut rows = folds
        .iter()
        .map(|(name, m)| MetricsRow::from_matrix(name.clone(), m))
        .collect::<Result<Vec<_>>>()?;
    if folds.len() > 1 {
        let n = rows.len() as f64;
        let k = folds[0].1.classes();
        let recalls = (0..k)
            .map(|c| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.recalls[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let mean = MetricsRow {
            fold: "mean".into(),
            wa: rows.iter().map(|r| r.wa).sum::<f64>() / n,
            ua: rows.iter().map(|r| r.ua).sum::<f64>() / n,
            recalls,
        };
        let mut pooled = ConfusionMatrix::new(k);
        for (_, m) in folds {
            pooled.merge(m)?;
        }
        rows.push(mean);
        rows.push(MetricsRow::from_matrix("pooled", &pooled)?);
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricsRow], class_names: &[&str]) -> String {
    let mut s = String::from("fold,wa,ua");
    for name in class_names {
        let _ = write!(s, ",recall_{name}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{:.6},{:.6}", r.fold, r.wa, r.ua);
        for rec in &r.recalls {
            match rec {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn matrix(k: usize) -> impl Strategy<Value = ConfusionMatrix> {
        proptest::collection::vec(0u64..20, k * k).prop_map(move |c| {
            ConfusionMatrix::from_rows(&c.chunks(k).map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
        })
    }

    /// Each row is a random split of the same support.
    fn balanced(k: usize) -> impl Strategy<Value = ConfusionMatrix> {
        (1u64..50, proptest::collection::vec(proptest::collection::vec(0u64..100, k), k)).prop_map(
            move |(support, weights)| {
                let rows: Vec<Vec<u64>> = weights
                    .iter()
                    .map(|w| {
                        let total: u64 = w.iter().sum::<u64>().max(1);
                        let mut row: Vec<u64> = w.iter().map(|x| x * support / total).collect();
                        let short = support - row.iter().sum::<u64>();
                        row[0] += short;
                        row
                    })
                    .collect();
                ConfusionMatrix::from_rows(&rows).unwrap()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn equal_support_gives_identical_wa_and_ua(m in (2usize..7).prop_flat_map(balanced)) {
            prop_assert_eq!(weighted_accuracy(&m).unwrap(), unweighted_accuracy(&m).unwrap());
        }

        #[test]
        fn metrics_stay_in_unit_interval(m in (1usize..6).prop_flat_map(matrix)) {
            prop_assume!(m.total() > 0);
            let (wa, ua) = (weighted_accuracy(&m).unwrap(), unweighted_accuracy(&m).unwrap());
            prop_assert!((0.0..=1.0).contains(&wa));
            prop_assert!((0.0..=1.0).contains(&ua));
        }

        #[test]
        fn relabelling_classes_changes_nothing(
            (m, perm) in (2usize..6).prop_flat_map(|k| (matrix(k), Just((0..k).collect::<Vec<_>>()).prop_shuffle()))
        ) {
            prop_assume!(m.total() > 0);
            let k = m.classes();
            let rows: Vec<Vec<u64>> = (0..k).map(|t| (0..k).map(|p| m.get(perm[t], perm[p])).collect()).collect();
            let q = ConfusionMatrix::from_rows(&rows).unwrap();
            prop_assert_eq!(weighted_accuracy(&m).unwrap(), weighted_accuracy(&q).unwrap());
            prop_assert!((unweighted_accuracy(&m).unwrap() - unweighted_accuracy(&q).unwrap()).abs() < 1e-15);
        }
    }
}
