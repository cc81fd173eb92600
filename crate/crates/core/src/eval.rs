//! Stratified evaluation of BI-RADS assignments against pathology.
//!
//! Test cases are split into strata by the radiologist's coarse category.
//! Within a stratum, an assigned category counts as a benign prediction when
//! it is benign-consistent ({B2, B3, B4a, B4b}) and as a malignant prediction
//! when it is malignant-consistent ({B4c, B5}). Each pathology row takes
//! itself as the positive class; macro rows are unweighted means of the two.
//! All metrics are percentages at full precision; rounding to two decimals
//! happens only when serialising.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::model::{
    consistent_with_pathology, implied_pathology, BiRads, Consistency, LesionRecord, ModelError,
    Pathology,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Unscored(#[from] ModelError),
    #[error("{assigner} category {category} has no cell in the confusion matrix")]
    OutsideMatrix {
        assigner: Assigner,
        category: BiRads,
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

fn round2<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_percent(*v))
}

/// Two-decimal rounding used by every serialised report.
pub fn round_percent(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl BinaryCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with `positive` as the positive class.
    pub fn from_predictions(
        pairs: impl IntoIterator<Item = (Pathology, Pathology)>,
        positive: Pathology,
    ) -> Self {
        let mut c = BinaryCounts::default();
        for (truth, pred) in pairs {
            match (truth == positive, pred == positive) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }
}

/// Precision, recall and f1 in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ClassMetrics {
    #[serde(serialize_with = "round2")]
    pub precision: f64,
    #[serde(serialize_with = "round2")]
    pub recall: f64,
    #[serde(serialize_with = "round2")]
    pub f1: f64,
}

/// Ratios with a zero denominator are 0.
pub fn binary_metrics(c: &BinaryCounts) -> ClassMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Assigner {
    Radiologist,
    Model,
}

impl std::fmt::Display for Assigner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Assigner::Radiologist => "radiologist",
            Assigner::Model => "model",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StratumMetrics {
    pub benign: ClassMetrics,
    pub malignant: ClassMetrics,
    #[serde(rename = "macro")]
    pub macro_avg: ClassMetrics,
    #[serde(serialize_with = "round2")]
    pub accuracy: f64,
    pub benign_counts: BinaryCounts,
    pub malignant_counts: BinaryCounts,
}

impl StratumMetrics {
    pub fn row(&self, p: Pathology) -> &ClassMetrics {
        match p {
            Pathology::Benign => &self.benign,
            Pathology::Malignant => &self.malignant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StratumStatus {
    Evaluated(StratumMetrics),
    /// Assignments carry no malignancy band (B0, or un-subdivided B4).
    NotEvaluable,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumReport {
    pub stratum: BiRads,
    pub assigner: Assigner,
    pub n: usize,
    pub n_benign: usize,
    pub n_malignant: usize,
    /// Records excluded because their assignment was B0 or B4.
    pub n_indeterminate: usize,
    #[serde(flatten)]
    pub status: StratumStatus,
}

impl StratumReport {
    pub fn metrics(&self) -> Option<&StratumMetrics> {
        match &self.status {
            StratumStatus::Evaluated(m) => Some(m),
            _ => None,
        }
    }
}

/// Scores one assigner's categories for the cases of one stratum.
///
/// `cases` pairs each record's pathology with the category the assigner gave
/// it. B0 and B4 assignments are indeterminate and left out; when nothing
/// remains the report is marked not evaluable.
pub fn stratum_report(
    stratum: BiRads,
    assigner: Assigner,
    cases: &[(Pathology, BiRads)],
) -> Result<StratumReport, EvalError> {
    let n_benign = cases.iter().filter(|c| c.0 == Pathology::Benign).count();
    let mut report = StratumReport {
        stratum,
        assigner,
        n: cases.len(),
        n_benign,
        n_malignant: cases.len() - n_benign,
        n_indeterminate: 0,
        status: StratumStatus::Empty,
    };
    if cases.is_empty() {
        return Ok(report);
    }
    let mut pairs = Vec::with_capacity(cases.len());
    let mut consistent = 0usize;
    for &(truth, assigned) in cases {
        let pred = match assigned {
            BiRads::B0 => None,
            b => implied_pathology(b)?,
        };
        match pred {
            None => report.n_indeterminate += 1,
            Some(pred) => {
                if consistent_with_pathology(assigned, truth)? == Consistency::Consistent {
                    consistent += 1;
                }
                pairs.push((truth, pred));
            }
        }
    }
    if pairs.is_empty() {
        report.status = StratumStatus::NotEvaluable;
        return Ok(report);
    }
    let benign_counts = BinaryCounts::from_predictions(pairs.iter().copied(), Pathology::Benign);
    let malignant_counts =
        BinaryCounts::from_predictions(pairs.iter().copied(), Pathology::Malignant);
    let benign = binary_metrics(&benign_counts);
    let malignant = binary_metrics(&malignant_counts);
    let macro_avg = ClassMetrics {
        precision: (benign.precision + malignant.precision) / 2.0,
        recall: (benign.recall + malignant.recall) / 2.0,
        f1: (benign.f1 + malignant.f1) / 2.0,
    };
    report.status = StratumStatus::Evaluated(StratumMetrics {
        benign,
        malignant,
        macro_avg,
        accuracy: ratio(consistent, pairs.len()),
        benign_counts,
        malignant_counts,
    });
    Ok(report)
}

/// One test case as seen by the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalCase {
    pub case_id: String,
    pub pathology: Pathology,
    pub radiologist: BiRads,
    pub model: BiRads,
}

impl EvalCase {
    pub fn assigned(&self, who: Assigner) -> BiRads {
        match who {
            Assigner::Radiologist => self.radiologist,
            Assigner::Model => self.model,
        }
    }
}

/// Radiologist and model reports for one radiologist stratum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumPair {
    pub stratum: BiRads,
    pub radiologist: StratumReport,
    pub model: StratumReport,
}

/// Reports for every coarse radiologist stratum B0, B2, B3, B4, B5.
pub fn stratified_reports(cases: &[EvalCase]) -> Result<Vec<StratumPair>, EvalError> {
    BiRads::COARSE_SCORED
        .into_iter()
        .map(|s| {
            let members: Vec<&EvalCase> = cases
                .iter()
                .filter(|c| c.radiologist.coarse() == s)
                .collect();
            let pick = |who| -> Vec<(Pathology, BiRads)> {
                members
                    .iter()
                    .map(|c| (c.pathology, c.assigned(who)))
                    .collect()
            };
            Ok(StratumPair {
                stratum: s,
                radiologist: stratum_report(
                    s,
                    Assigner::Radiologist,
                    &pick(Assigner::Radiologist),
                )?,
                model: stratum_report(s, Assigner::Model, &pick(Assigner::Model))?,
            })
        })
        .collect()
}

/// Pathology-consistency accuracy of the radiologist's own label in each
/// auditable stratum (B2, B3, B5) that has records.
pub fn radiologist_consistency(records: &[LesionRecord]) -> Result<Vec<(BiRads, f64)>, EvalError> {
    let mut out = Vec::new();
    for s in [BiRads::B2, BiRads::B3, BiRads::B5] {
        let members: Vec<_> = records
            .iter()
            .filter(|r| r.radiologist_birads == s)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut ok = 0;
        for r in &members {
            if consistent_with_pathology(s, r.pathology)? == Consistency::Consistent {
                ok += 1;
            }
        }
        out.push((s, ratio(ok, members.len())));
    }
    Ok(out)
}

/// Radiologist rows B0, B2, B3, B4, B5.
pub const CONFUSION_ROWS: [BiRads; 5] = BiRads::COARSE_SCORED;
/// Model columns B2, B3, B4, B5.
pub const CONFUSION_COLS: [BiRads; 4] = [BiRads::B2, BiRads::B3, BiRads::B4, BiRads::B5];

/// Coarse radiologist category versus coarse model category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<BiRads>,
    pub cols: Vec<BiRads>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn get(&self, radiologist: BiRads, model: BiRads) -> Option<usize> {
        let r = self.rows.iter().position(|&b| b == radiologist)?;
        let c = self.cols.iter().position(|&b| b == model)?;
        Some(self.counts[r][c])
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, radiologist: BiRads) -> usize {
        self.rows
            .iter()
            .position(|&b| b == radiologist)
            .map_or(0, |r| self.counts[r].iter().sum())
    }
}

pub fn confusion(cases: &[EvalCase]) -> Result<ConfusionMatrix, EvalError> {
    let mut counts = vec![vec![0usize; CONFUSION_COLS.len()]; CONFUSION_ROWS.len()];
    for c in cases {
        let rad = c.radiologist.coarse();
        let model = c.model.coarse();
        let r = CONFUSION_ROWS
            .iter()
            .position(|&b| b == rad)
            .ok_or(EvalError::OutsideMatrix {
                assigner: Assigner::Radiologist,
                category: c.radiologist,
            })?;
        let k =
            CONFUSION_COLS
                .iter()
                .position(|&b| b == model)
                .ok_or(EvalError::OutsideMatrix {
                    assigner: Assigner::Model,
                    category: c.model,
                })?;
        counts[r][k] += 1;
    }
    Ok(ConfusionMatrix {
        rows: CONFUSION_ROWS.to_vec(),
        cols: CONFUSION_COLS.to_vec(),
        counts,
    })
}

/// Histogram of coarse categories per assigner and pathology.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct DistributionTable {
    pub counts: BTreeMap<Assigner, BTreeMap<Pathology, BTreeMap<BiRads, usize>>>,
}

impl DistributionTable {
    pub fn get(&self, who: Assigner, p: Pathology, b: BiRads) -> usize {
        self.counts
            .get(&who)
            .and_then(|m| m.get(&p))
            .and_then(|m| m.get(&b))
            .copied()
            .unwrap_or(0)
    }

    pub fn marginal(&self, who: Assigner, p: Pathology) -> usize {
        self.counts
            .get(&who)
            .and_then(|m| m.get(&p))
            .map_or(0, |m| m.values().sum())
    }
}

/// Every cell of {radiologist, model} x {benign, malignant} x
/// {B0, B2, B3, B4, B5} is present, zero or not.
pub fn distribution(cases: &[EvalCase]) -> DistributionTable {
    let mut t = DistributionTable::default();
    for who in [Assigner::Radiologist, Assigner::Model] {
        let per = t.counts.entry(who).or_default();
        for p in Pathology::BOTH {
            let row = per.entry(p).or_default();
            for b in BiRads::COARSE_SCORED {
                row.insert(b, 0);
            }
        }
    }
    for c in cases {
        for who in [Assigner::Radiologist, Assigner::Model] {
            *t.counts
                .get_mut(&who)
                .unwrap()
                .get_mut(&c.pathology)
                .unwrap()
                .entry(c.assigned(who).coarse())
                .or_insert(0) += 1;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Margin, MorphFeatures, Shape, Split, View};
    use approx::assert_abs_diff_eq;

    fn cases(benign: usize, malignant: usize, assigned: BiRads) -> Vec<(Pathology, BiRads)> {
        let mut v = vec![(Pathology::Benign, assigned); benign];
        v.extend(vec![(Pathology::Malignant, assigned); malignant]);
        v
    }

    fn rounded(m: &ClassMetrics) -> (f64, f64, f64) {
        (
            round_percent(m.precision),
            round_percent(m.recall),
            round_percent(m.f1),
        )
    }

    #[test]
    fn binary_metrics_examples() {
        let m = binary_metrics(&BinaryCounts {
            tp: 3,
            fp: 1,
            tn: 0,
            fn_: 0,
        });
        assert_eq!(rounded(&m), (75.0, 100.0, 85.71));
        let m = binary_metrics(&BinaryCounts {
            tp: 0,
            fp: 0,
            tn: 3,
            fn_: 1,
        });
        assert_eq!(rounded(&m), (0.0, 0.0, 0.0));
        let m = binary_metrics(&BinaryCounts {
            tp: 70,
            fp: 5,
            tn: 0,
            fn_: 0,
        });
        assert_eq!(rounded(&m), (93.33, 100.0, 96.55));
    }

    #[test]
    fn radiologist_b2_row() {
        let r =
            stratum_report(BiRads::B2, Assigner::Radiologist, &cases(3, 1, BiRads::B2)).unwrap();
        let m = r.metrics().unwrap();
        assert_eq!(rounded(&m.benign), (75.0, 100.0, 85.71));
        assert_eq!(rounded(&m.malignant), (0.0, 0.0, 0.0));
        assert_eq!(rounded(&m.macro_avg), (37.5, 50.0, 42.86));
        assert_eq!(round_percent(m.accuracy), 75.0);
    }

    #[test]
    fn radiologist_b3_row() {
        let r =
            stratum_report(BiRads::B3, Assigner::Radiologist, &cases(58, 4, BiRads::B3)).unwrap();
        let m = r.metrics().unwrap();
        assert_eq!(rounded(&m.benign), (93.55, 100.0, 96.67));
        assert_eq!(rounded(&m.macro_avg), (46.77, 50.0, 48.33));
        assert_eq!(round_percent(m.accuracy), 93.55);
    }

    #[test]
    fn radiologist_b5_row() {
        let r =
            stratum_report(BiRads::B5, Assigner::Radiologist, &cases(5, 70, BiRads::B5)).unwrap();
        let m = r.metrics().unwrap();
        assert_eq!(rounded(&m.benign), (0.0, 0.0, 0.0));
        assert_eq!(rounded(&m.malignant), (93.33, 100.0, 96.55));
        assert_eq!(rounded(&m.macro_avg), (46.67, 50.0, 48.28));
        assert_eq!(round_percent(m.accuracy), 93.33);
    }

    /// Model rows rebuilt from counts implied by the published percentages.
    #[test]
    fn model_rows_from_implied_counts() {
        // B2 stratum: 2 benign kept benign, 1 benign called malignant, 1 malignant caught
        let mut c = cases(2, 0, BiRads::B3);
        c.push((Pathology::Benign, BiRads::B5));
        c.push((Pathology::Malignant, BiRads::B5));
        let m = *stratum_report(BiRads::B2, Assigner::Model, &c)
            .unwrap()
            .metrics()
            .unwrap();
        assert_eq!(rounded(&m.benign), (100.0, 66.67, 80.0));
        assert_eq!(rounded(&m.malignant), (50.0, 100.0, 66.67));
        assert_eq!(rounded(&m.macro_avg), (75.0, 83.33, 73.33));
        assert_eq!(round_percent(m.accuracy), 75.0);

        // B4 stratum: 96 benign (72 correct), 69 malignant (41 correct)
        let mut c = cases(72, 0, BiRads::B4a);
        c.extend(cases(24, 0, BiRads::B4c));
        c.extend(cases(0, 41, BiRads::B5));
        c.extend(cases(0, 28, BiRads::B4b));
        let m = *stratum_report(BiRads::B4, Assigner::Model, &c)
            .unwrap()
            .metrics()
            .unwrap();
        assert_eq!(rounded(&m.benign), (72.0, 75.0, 73.47));
        assert_eq!(rounded(&m.malignant), (63.08, 59.42, 61.19));
        assert_eq!(rounded(&m.macro_avg), (67.54, 67.21, 67.33));
        assert_eq!(round_percent(m.accuracy), 68.48);

        // B0 stratum: 26 benign (19 correct), 3 malignant (all caught)
        let mut c = cases(19, 0, BiRads::B2);
        c.extend(cases(7, 3, BiRads::B5));
        let m = *stratum_report(BiRads::B0, Assigner::Model, &c)
            .unwrap()
            .metrics()
            .unwrap();
        assert_eq!(rounded(&m.benign), (100.0, 73.08, 84.44));
        assert_eq!(rounded(&m.malignant), (30.0, 100.0, 46.15));
        assert_eq!(rounded(&m.macro_avg), (65.0, 86.54, 65.3));
        assert_eq!(round_percent(m.accuracy), 75.86);
    }

    #[test]
    fn b4_and_b0_radiologist_not_evaluable() {
        for s in [BiRads::B4, BiRads::B0] {
            let r = stratum_report(s, Assigner::Radiologist, &cases(96, 69, s)).unwrap();
            assert_eq!(r.status, StratumStatus::NotEvaluable);
            assert_eq!(r.n_indeterminate, 165);
        }
        let r = stratum_report(BiRads::B2, Assigner::Model, &[]).unwrap();
        assert_eq!(r.status, StratumStatus::Empty);
        assert!(stratum_report(BiRads::B2, Assigner::Model, &cases(1, 0, BiRads::B6)).is_err());
    }

    #[test]
    fn perfect_assigner() {
        let mut c = cases(4, 0, BiRads::B3);
        c.extend(cases(0, 3, BiRads::B4c));
        let m = *stratum_report(BiRads::B3, Assigner::Model, &c)
            .unwrap()
            .metrics()
            .unwrap();
        assert_eq!(m.accuracy, 100.0);
        assert_eq!(m.macro_avg.f1, 100.0);
    }

    #[test]
    fn accuracy_is_recall_weighted() {
        let mut c = cases(5, 0, BiRads::B2);
        c.extend(cases(2, 0, BiRads::B5));
        c.extend(cases(0, 4, BiRads::B4c));
        c.extend(cases(0, 3, BiRads::B4b));
        let r = stratum_report(BiRads::B3, Assigner::Model, &c).unwrap();
        let m = r.metrics().unwrap();
        let weighted = (m.benign.recall * r.n_benign as f64
            + m.malignant.recall * r.n_malignant as f64)
            / r.n as f64;
        assert_abs_diff_eq!(m.accuracy, weighted, epsilon = 1e-12);
        assert_eq!(m.macro_avg.f1, (m.benign.f1 + m.malignant.f1) / 2.0);
    }

    fn rec(id: &str, b: BiRads, p: Pathology) -> LesionRecord {
        LesionRecord {
            case_id: id.into(),
            features: MorphFeatures::new(
                [Shape::Oval].into(),
                [Margin::Obscured].into(),
                1,
                1,
                View::CC,
            )
            .unwrap(),
            radiologist_birads: b,
            pathology: p,
            split: Split::Test,
        }
    }

    #[test]
    fn radiologist_consistency_examples() {
        let mut recs = Vec::new();
        for i in 0..75 {
            recs.push(rec(
                &format!("b5-{i}"),
                BiRads::B5,
                if i < 5 {
                    Pathology::Benign
                } else {
                    Pathology::Malignant
                },
            ));
        }
        for i in 0..62 {
            recs.push(rec(
                &format!("b3-{i}"),
                BiRads::B3,
                if i < 58 {
                    Pathology::Benign
                } else {
                    Pathology::Malignant
                },
            ));
        }
        recs.push(rec("b4", BiRads::B4, Pathology::Benign));
        let acc = radiologist_consistency(&recs).unwrap();
        assert_eq!(acc.len(), 2);
        assert_eq!((acc[0].0, round_percent(acc[0].1)), (BiRads::B3, 93.55));
        assert_eq!((acc[1].0, round_percent(acc[1].1)), (BiRads::B5, 93.33));
        let ok = vec![
            rec("a", BiRads::B2, Pathology::Benign),
            rec("b", BiRads::B2, Pathology::Benign),
        ];
        assert_eq!(
            radiologist_consistency(&ok).unwrap(),
            vec![(BiRads::B2, 100.0)]
        );
    }

    fn ec(id: usize, p: Pathology, r: BiRads, m: BiRads) -> EvalCase {
        EvalCase {
            case_id: id.to_string(),
            pathology: p,
            radiologist: r,
            model: m,
        }
    }

    #[test]
    fn confusion_identity_and_unit() {
        let cs: Vec<_> = [BiRads::B2, BiRads::B3, BiRads::B4, BiRads::B5, BiRads::B2]
            .into_iter()
            .enumerate()
            .map(|(i, b)| ec(i, Pathology::Benign, b, b))
            .collect();
        let m = confusion(&cs).unwrap();
        for (r, &rb) in m.rows.iter().enumerate() {
            for (c, &cb) in m.cols.iter().enumerate() {
                if rb != cb {
                    assert_eq!(m.counts[r][c], 0);
                }
            }
        }
        assert_eq!(m.get(BiRads::B2, BiRads::B2), Some(2));
        let m = confusion(&[ec(0, Pathology::Malignant, BiRads::B0, BiRads::B5)]).unwrap();
        assert_eq!(m.get(BiRads::B0, BiRads::B5), Some(1));
        assert_eq!(m.total(), 1);
        assert!(confusion(&[ec(0, Pathology::Benign, BiRads::B1, BiRads::B2)]).is_err());
    }

    #[test]
    fn confusion_ten_record_fixture() {
        use BiRads::*;
        let pairs = [
            (B0, B2),
            (B0, B4b),
            (B2, B2),
            (B2, B3),
            (B3, B3),
            (B3, B4a),
            (B4, B4c),
            (B4, B5),
            (B5, B5),
            (B5, B4c),
        ];
        let cs: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(r, m))| ec(i, Pathology::Benign, r, m))
            .collect();
        let m = confusion(&cs).unwrap();
        // hand tabulation: rows B0 B2 B3 B4 B5, cols B2 B3 B4 B5
        let expect = vec![
            vec![1, 0, 1, 0],
            vec![1, 1, 0, 0],
            vec![0, 1, 1, 0],
            vec![0, 0, 1, 1],
            vec![0, 0, 1, 1],
        ];
        assert_eq!(m.counts, expect);
        for r in CONFUSION_ROWS {
            assert_eq!(
                m.row_sum(r),
                cs.iter().filter(|c| c.radiologist.coarse() == r).count()
            );
        }
    }

    #[test]
    fn distribution_examples() {
        let t = distribution(&[]);
        assert!(t
            .counts
            .values()
            .flat_map(|m| m.values())
            .flat_map(|m| m.values())
            .all(|&v| v == 0));
        let t = distribution(&[ec(0, Pathology::Malignant, BiRads::B5, BiRads::B5)]);
        assert_eq!(
            t.get(Assigner::Radiologist, Pathology::Malignant, BiRads::B5),
            1
        );
        assert_eq!(t.get(Assigner::Model, Pathology::Malignant, BiRads::B5), 1);
        assert_eq!(t.marginal(Assigner::Model, Pathology::Benign), 0);
    }

    #[test]
    fn distribution_marginals() {
        use BiRads::*;
        let cs = vec![
            ec(0, Pathology::Benign, B3, B2),
            ec(1, Pathology::Benign, B4, B4a),
            ec(2, Pathology::Malignant, B4, B4c),
            ec(3, Pathology::Malignant, B5, B5),
            ec(4, Pathology::Benign, B0, B4b),
        ];
        let t = distribution(&cs);
        for who in [Assigner::Radiologist, Assigner::Model] {
            assert_eq!(t.marginal(who, Pathology::Benign), 3);
            assert_eq!(t.marginal(who, Pathology::Malignant), 2);
        }
        assert_eq!(t.get(Assigner::Model, Pathology::Benign, B4), 2);
        assert_eq!(t.get(Assigner::Radiologist, Pathology::Benign, B4), 1);
    }

    #[test]
    fn stratified_reports_cover_all_strata() {
        use BiRads::*;
        let cs = vec![
            ec(0, Pathology::Benign, B2, B2),
            ec(1, Pathology::Malignant, B4, B5),
            ec(2, Pathology::Benign, B0, B3),
        ];
        let s = stratified_reports(&cs).unwrap();
        assert_eq!(
            s.iter().map(|p| p.stratum).collect::<Vec<_>>(),
            BiRads::COARSE_SCORED.to_vec()
        );
        assert_eq!(s[0].radiologist.status, StratumStatus::NotEvaluable);
        assert!(s[0].model.metrics().is_some());
        assert_eq!(s[2].model.status, StratumStatus::Empty);
        assert_eq!(s[3].radiologist.status, StratumStatus::NotEvaluable);
    }

    #[test]
    fn serialisation_rounds() {
        let r =
            stratum_report(BiRads::B3, Assigner::Radiologist, &cases(58, 4, BiRads::B3)).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["status"], "evaluated");
        assert_eq!(v["macro"]["f1"], 48.33);
        assert_eq!(v["accuracy"], 93.55);
    }
}
