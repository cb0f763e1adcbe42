use super::{Result, TrainError};

/// Number of sentiment classes on the integer scale -3..=3.
pub const CLASSES: usize = 7;

/// Integer class of a score after rounding half away from zero and
/// clamping to `[-bound, bound]`.
pub fn class_index(x: f64, bound: i64) -> i64 {
    (x.round() as i64).clamp(-bound, bound)
}

/// Scalar metrics of one evaluation condition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub mae: f64,
    pub corr: f64,
    /// Negative vs. non-negative over all samples.
    pub acc2_nonneg: f64,
    /// Negative vs. positive over samples with a non-zero label.
    pub acc2_pos: f64,
    pub f1_nonneg: f64,
    pub f1_pos: f64,
    pub acc5: f64,
    pub acc7: f64,
}

impl MetricRow {
    pub const FIELDS: [&'static str; 8] = ["mae", "corr", "acc2_nonneg", "acc2_pos", "f1_nonneg", "f1_pos", "acc5", "acc7"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.mae,
            self.corr,
            self.acc2_nonneg,
            self.acc2_pos,
            self.f1_nonneg,
            self.f1_pos,
            self.acc5,
            self.acc7,
        ]
    }

    fn from_values(v: [f64; 8]) -> Self {
        Self {
            mae: v[0],
            corr: v[1],
            acc2_nonneg: v[2],
            acc2_pos: v[3],
            f1_nonneg: v[4],
            f1_pos: v[5],
            acc5: v[6],
            acc7: v[7],
        }
    }

    /// Field-wise mean; zero for an empty slice.
    pub fn mean<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> MetricRow {
        let mut acc = [0.0; 8];
        let mut n = 0usize;
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        Self::from_values(acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub row: MetricRow,
    /// `confusion[true][predicted]` over classes -3..=3.
    pub confusion: [[usize; CLASSES]; CLASSES],
    pub samples: usize,
    /// Samples with a non-zero label, the support of the neg-vs-pos variant.
    pub nonzero_samples: usize,
    /// Set when predictions or labels have zero variance and `corr` was
    /// defined as 0.
    pub corr_degenerate: bool,
}

fn binary(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_, mut correct, mut n) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, t) in pred.zip(truth) {
        n += 1;
        correct += (p == t) as usize;
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    (acc, f1)
}

/// Regression and discretized classification metrics of `pred` against `y`.
pub fn compute_metrics(pred: &[f64], y: &[f64]) -> Result<Metrics> {
    if pred.len() != y.len() || pred.is_empty() {
        return Err(TrainError::Contract(format!(
            "metrics need equal non-empty lengths, got {} predictions and {} labels",
            pred.len(),
            y.len()
        )));
    }
    let n = y.len() as f64;
    let mae = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;

    let mp = pred.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(y) {
        let (dp, dt) = (p - mp, t - my);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    let corr_degenerate = sxx == 0.0 || syy == 0.0;
    let corr = if corr_degenerate {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    };

    let (acc2_nonneg, f1_nonneg) = binary(pred.iter().map(|&p| p >= 0.0), y.iter().map(|&t| t >= 0.0));
    let nz: Vec<usize> = (0..y.len()).filter(|&i| y[i] != 0.0).collect();
    let (acc2_pos, f1_pos) = binary(nz.iter().map(|&i| pred[i] > 0.0), nz.iter().map(|&i| y[i] > 0.0));

    let hits = |bound| {
        pred.iter()
            .zip(y)
            .filter(|(p, t)| class_index(**p, bound) == class_index(**t, bound))
            .count() as f64
            / n
    };
    let mut confusion = [[0usize; CLASSES]; CLASSES];
    for (p, t) in pred.iter().zip(y) {
        confusion[(class_index(*t, 3) + 3) as usize][(class_index(*p, 3) + 3) as usize] += 1;
    }
    Ok(Metrics {
        row: MetricRow {
            mae,
            corr,
            acc2_nonneg,
            acc2_pos,
            f1_nonneg,
            f1_pos,
            acc5: hits(2),
            acc7: hits(3),
        },
        confusion,
        samples: y.len(),
        nonzero_samples: nz.len(),
        corr_degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [-2.6, -1.0, 0.0, 0.4, 1.7, 3.0];
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!(m.row.mae, 0.0);
        assert!((m.row.corr - 1.0).abs() < 1e-15);
        for v in [m.row.acc2_nonneg, m.row.acc2_pos, m.row.f1_nonneg, m.row.f1_pos, m.row.acc5, m.row.acc7] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_labels_are_excluded_from_neg_vs_pos() {
        let y = [-1.0, 0.0, 1.0];
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!(m.nonzero_samples, 2);
        // a wrong prediction on the zero label leaves the neg-vs-pos score intact
        let m = compute_metrics(&[-1.0, -5.0, 1.0], &y).unwrap();
        assert_eq!(m.row.acc2_pos, 1.0);
        assert!((m.row.acc2_nonneg - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rounding_is_half_away_from_zero_then_clamped() {
        assert_eq!(class_index(0.5, 3), 1);
        assert_eq!(class_index(-0.5, 3), -1);
        assert_eq!(class_index(2.5, 2), 2);
        assert_eq!(class_index(-3.4, 3), -3);
        assert_eq!(class_index(0.49, 3), 0);
    }

    #[test]
    fn constant_predictions_flag_correlation() {
        let m = compute_metrics(&[0.3; 4], &[-1.0, 0.0, 1.0, 2.0]).unwrap();
        assert!(m.corr_degenerate);
        assert_eq!(m.row.corr, 0.0);
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let y = [-3.0, -3.0, 0.2, 1.0, 2.6];
        let p = [-2.0, 3.0, 0.0, 1.4, -0.6];
        let m = compute_metrics(&p, &y).unwrap();
        assert_eq!(m.confusion[0].iter().sum::<usize>(), 2);
        assert_eq!(m.confusion[0][1], 1);
        assert_eq!(m.confusion[0][6], 1);
        assert_eq!(m.confusion[6][2], 1);
        assert_eq!(m.confusion.iter().flatten().sum::<usize>(), 5);
    }

    #[test]
    fn contract_errors() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_row_averages_fields() {
        let a = MetricRow {
            mae: 1.0,
            acc7: 0.5,
            ..Default::default()
        };
        let b = MetricRow {
            mae: 3.0,
            acc7: 0.0,
            ..Default::default()
        };
        let m = MetricRow::mean([&a, &b]);
        assert_eq!((m.mae, m.acc7), (2.0, 0.25));
        assert_eq!(MetricRow::mean([]), MetricRow::default());
    }
}
