//! Accuracy, confusion matrices, per-class precision/recall/F1, run
//! aggregation and transition-matrix heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::io::write_file;
use crate::corpus::LabelSet;
use crate::crf::TransitionParams;
use crate::{Error, Result};

fn check_aligned(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::shape("predicted conversations", gold.len(), pred.len()));
    }
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::shape("predicted utterances", g.len(), p.len()));
        }
    }
    Ok(())
}

/// Fraction of utterances predicted correctly, pooled over conversations.
pub fn accuracy(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Validation("no utterances to score".into()));
    }
    let correct = gold
        .iter()
        .flatten()
        .zip(pred.iter().flatten())
        .filter(|(g, p)| g == p)
        .count();
    Ok(correct as f64 / total as f64)
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Counts with rows = gold and columns = predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Array2<u64>,
}

/// Row-normalised confusion matrix. Rows without support stay zero and are
/// flagged in `unsupported`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConfusion {
    pub labels: Vec<String>,
    pub values: Array2<f64>,
    pub unsupported: Vec<bool>,
}

pub const OTHER_LABEL: &str = "other";

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts.diag().sum()
    }

    pub fn normalized(&self) -> NormalizedConfusion {
        let mut values = self.counts.mapv(|c| c as f64);
        let mut unsupported = Vec::with_capacity(values.nrows());
        for mut row in values.rows_mut() {
            let sum: f64 = row.sum();
            unsupported.push(sum == 0.0);
            if sum > 0.0 {
                row /= sum;
            }
        }
        NormalizedConfusion {
            labels: self.labels.clone(),
            values,
            unsupported,
        }
    }

    /// Keeps the rows and columns of `subset`, in that order. With
    /// `keep_other`, predictions outside the subset are collected in an extra
    /// trailing column so the kept rows retain their full support.
    pub fn restrict(&self, subset: &[&str], keep_other: bool) -> Result<ConfusionMatrix> {
        let idx = subset
            .iter()
            .map(|l| {
                self.labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::Validation(format!("unknown label {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cols = idx.len() + usize::from(keep_other);
        let mut counts = Array2::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                counts[[r, c]] = self.counts[[i, j]];
            }
            if keep_other {
                let kept: u64 = idx.iter().map(|&j| self.counts[[i, j]]).sum();
                counts[[r, idx.len()]] = self.counts.row(i).sum() - kept;
            }
        }
        let mut labels: Vec<String> = subset.iter().map(|s| s.to_string()).collect();
        if keep_other {
            labels.push(OTHER_LABEL.into());
        }
        Ok(ConfusionMatrix { labels, counts })
    }
}

pub fn confusion(gold: &[Vec<usize>], pred: &[Vec<usize>], labels: &LabelSet) -> Result<ConfusionMatrix> {
    check_aligned(gold, pred)?;
    let k = labels.len();
    let mut counts = Array2::zeros((k, k));
    for (&g, &p) in gold.iter().flatten().zip(pred.iter().flatten()) {
        if g >= k || p >= k {
            return Err(Error::Validation(format!("label index {} outside the label set", g.max(p))));
        }
        counts[[g, p]] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.labels().to_vec(),
        counts,
    })
}

/// Mean of per-run row-normalised matrices.
pub fn mean_of_normalized(runs: &[ConfusionMatrix]) -> Result<Array2<f64>> {
    let normalized: Vec<Array2<f64>> = runs.iter().map(|c| c.normalized().values).collect();
    Ok(aggregate_runs(&normalized)?.0)
}

/// Row-normalisation of the summed counts.
pub fn normalize_of_summed(runs: &[ConfusionMatrix]) -> Result<NormalizedConfusion> {
    let first = runs.first().ok_or_else(|| Error::Validation("no runs to aggregate".into()))?;
    let mut counts = first.counts.clone();
    for c in &runs[1..] {
        if c.counts.dim() != counts.dim() {
            return Err(Error::shape("confusion matrix size", counts.nrows(), c.counts.nrows()));
        }
        counts += &c.counts;
    }
    Ok(ConfusionMatrix {
        labels: first.labels.clone(),
        counts,
    }
    .normalized())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when the metric's denominator was zero and the value is a 0 by
    /// convention.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

pub fn precision_recall_f1(confusion: &ConfusionMatrix) -> Vec<ClassMetrics> {
    let c = &confusion.counts;
    let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    confusion
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let tp = c[[i, i]];
            let support = c.row(i).sum();
            let (precision, precision_undefined) = ratio(tp, c.column(i).sum());
            let (recall, recall_undefined) = ratio(tp, support);
            let f1_undefined = precision + recall == 0.0;
            let f1 = if f1_undefined { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics {
                label: label.clone(),
                precision,
                recall,
                f1,
                support,
                precision_undefined,
                recall_undefined,
                f1_undefined,
            }
        })
        .collect()
}

/// Micro-averaged recall: per-label true positives and support pooled over
/// all labels.
pub fn micro_recall(confusion: &ConfusionMatrix) -> f64 {
    let metrics = precision_recall_f1(confusion);
    let tp: u64 = (0..metrics.len()).map(|i| confusion.counts[[i, i]]).sum();
    let support: u64 = metrics.iter().map(|m| m.support).sum();
    tp as f64 / support as f64
}

/// Elementwise sample mean and standard deviation of equally shaped tables.
pub fn aggregate_runs(runs: &[Array2<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
    let first = runs.first().ok_or_else(|| Error::Validation("no runs to aggregate".into()))?;
    for r in runs {
        if r.dim() != first.dim() {
            return Err(Error::Shape {
                context: "aggregated run table",
                expected: first.len(),
                actual: r.len(),
            });
        }
    }
    let mut mean = Array2::zeros(first.dim());
    let mut sd = Array2::zeros(first.dim());
    let mut buf = vec![0.0; runs.len()];
    for ((i, j), m) in mean.indexed_iter_mut() {
        for (b, r) in buf.iter_mut().zip(runs) {
            *b = r[[i, j]];
        }
        let (mu, s) = mean_and_sd(&buf);
        *m = mu;
        sd[[i, j]] = s;
    }
    Ok((mean, sd))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `(x - min) / (max - min)` over the whole matrix; a constant matrix maps
    /// to zeros.
    #[default]
    MinmaxGlobal,
    SoftmaxRow,
}

pub fn normalize_matrix(m: &Array2<f64>, how: Normalization) -> Array2<f64> {
    match how {
        Normalization::MinmaxGlobal => {
            let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                m.mapv(|x| (x - lo) / (hi - lo))
            } else {
                Array2::zeros(m.dim())
            }
        }
        Normalization::SoftmaxRow => {
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            out
        }
    }
}

fn heatmap_csv(labels: &[String], values: &Array2<f64>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).expect("in-memory csv");
    for (label, row) in labels.iter().zip(values.rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Greyscale heatmap of values in `[0, 1]`; darker cells hold larger values.
fn heatmap_svg(title: &str, labels: &[String], values: &Array2<f64>) -> String {
    let cell = 28;
    let margin = 60;
    let n = labels.len();
    let size = margin + cell * n + 10;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="10">"#,
        size + 16
    );
    let _ = writeln!(svg, r#"<text x="{margin}" y="12">{}</text>"#, xml_escape(title));
    for (i, label) in labels.iter().enumerate() {
        let pos = margin + i * cell + cell / 2;
        let l = xml_escape(label);
        let _ = writeln!(svg, r#"<text x="{}" y="{pos}" text-anchor="end" dominant-baseline="middle">{l}</text>"#, margin - 4);
        let _ = writeln!(svg, r#"<text x="{pos}" y="{}" text-anchor="middle">{l}</text>"#, margin - 6);
    }
    for ((i, j), &v) in values.indexed_iter() {
        let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},{shade})"><title>{} -> {}: {v}</title></rect>"#,
            margin + j * cell,
            margin + i * cell,
            xml_escape(&labels[i]),
            xml_escape(&labels[j]),
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<name>.csv` and `<name>.svg` for every transition matrix,
/// restricted to `order` (all labels when `None`). Returns the written paths.
pub fn export_transition_heatmap(
    params: &TransitionParams,
    labels: &LabelSet,
    order: Option<&[String]>,
    normalization: Normalization,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let order: Vec<String> = order.map_or_else(|| labels.labels().to_vec(), <[String]>::to_vec);
    let idx = order
        .iter()
        .map(|l| labels.index_of(l).ok_or_else(|| Error::Validation(format!("unknown label {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut written = Vec::new();
    for (name, g) in params.named_matrices() {
        let sub = Array2::from_shape_fn((idx.len(), idx.len()), |(r, c)| g[[idx[r], idx[c]]]);
        let values = normalize_matrix(&sub, normalization);
        let csv_path = out_dir.join(format!("{name}.csv"));
        write_file(&csv_path, heatmap_csv(&order, &values).as_bytes())?;
        let svg_path = out_dir.join(format!("{name}.svg"));
        write_file(&svg_path, heatmap_svg(name, &order, &values).as_bytes())?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}

/// Parses a heatmap CSV back into its labels and values.
pub fn read_heatmap_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, message: String| Error::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let labels: Vec<String> = reader
        .headers()
        .map_err(|e| fail(1, e.to_string()))?
        .iter()
        .skip(1)
        .map(String::from)
        .collect();
    let n = labels.len();
    let mut values = Vec::with_capacity(n * n);
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| fail(r + 2, e.to_string()))?;
        for field in rec.iter().skip(1) {
            values.push(field.parse::<f64>().map_err(|e| fail(r + 2, e.to_string()))?);
        }
    }
    let values = Array2::from_shape_vec((n, n), values).map_err(|_| fail(0, "heatmap is not square".into()))?;
    Ok((labels, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::Variant;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(n: usize) -> LabelSet {
        LabelSet::new((0..n).map(|i| format!("l{i}"))).unwrap()
    }

    fn from_counts(counts: Array2<u64>) -> ConfusionMatrix {
        ConfusionMatrix {
            labels: (0..counts.nrows()).map(|i| format!("l{i}")).collect(),
            counts,
        }
    }

    #[test]
    fn accuracy_examples() {
        let gold = vec![vec![0, 1], vec![2, 0]];
        assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        assert_eq!(accuracy(&gold, &[vec![1, 0], vec![0, 1]]).unwrap(), 0.0);
        assert_eq!(accuracy(&gold, &[vec![0, 1], vec![2, 2]]).unwrap(), 0.75);
        assert!(matches!(accuracy(&gold, &[vec![0, 1], vec![2]]), Err(Error::Shape { .. })));
        assert!(accuracy(&gold, &[vec![0, 1]]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let gold = vec![vec![0, 1, 2, 1]];
        let c = confusion(&gold, &gold, &labels(4)).unwrap();
        assert_eq!(c.counts, Array2::from_diag(&array![1, 2, 1, 0]));
        let n = c.normalized();
        assert_eq!(n.values.diag().to_vec(), vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(n.unsupported, vec![false, false, false, true]);

        let c = confusion(&[vec![0]], &[vec![1]], &labels(2)).unwrap();
        assert_eq!(c.counts, array![[0, 1], [0, 0]]);
        assert!(matches!(confusion(&[vec![0]], &[vec![5]], &labels(2)), Err(Error::Validation(_))));
    }

    #[test]
    fn two_run_average_matches_hand_computation() {
        let a = from_counts(array![[3, 1], [0, 2]]);
        let b = from_counts(array![[1, 1], [1, 3]]);
        let mean = mean_of_normalized(&[a.clone(), b.clone()]).unwrap();
        let expected = array![[(0.75 + 0.5) / 2.0, (0.25 + 0.5) / 2.0], [(0.0 + 0.25) / 2.0, (1.0 + 0.75) / 2.0]];
        assert_eq!(mean, expected);
        let pooled = normalize_of_summed(&[a, b]).unwrap();
        assert_eq!(pooled.values, array![[4.0 / 6.0, 2.0 / 6.0], [1.0 / 6.0, 5.0 / 6.0]]);
    }

    #[test]
    fn restriction_keeps_other_predictions() {
        let c = from_counts(array![[5, 1, 2], [1, 4, 0], [3, 3, 3]]);
        let r = c.restrict(&["l1", "l0"], true).unwrap();
        assert_eq!(r.labels, vec!["l1", "l0", OTHER_LABEL]);
        assert_eq!(r.counts, array![[4, 1, 0], [1, 5, 2]]);
        let n = r.normalized();
        for row in n.values.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(c.restrict(&["l0"], false).unwrap().counts, array![[5]]);
        assert!(c.restrict(&["zz"], true).is_err());
    }

    #[test]
    fn prf_examples() {
        let m = precision_recall_f1(&from_counts(array![[8, 2], [3, 7]]));
        assert!((m[0].precision - 8.0 / 11.0).abs() < 1e-15);
        assert!((m[0].recall - 0.8).abs() < 1e-15);
        assert!((m[0].f1 - 0.761_904_761_904_761_9).abs() < 1e-12);

        let perfect = precision_recall_f1(&from_counts(array![[3, 0], [0, 2]]));
        assert!(perfect.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));

        let never = precision_recall_f1(&from_counts(array![[0, 4], [0, 2]]));
        assert_eq!(never[0].precision, 0.0);
        assert!(never[0].precision_undefined);
        assert_eq!(never[0].recall, 0.0);
        assert!(!never[0].recall_undefined);
    }

    #[test]
    fn aggregation_examples() {
        let (m, s) = aggregate_runs(&[array![[1.0, 2.0]]]).unwrap();
        assert_eq!(m, array![[1.0, 2.0]]);
        assert_eq!(s, array![[0.0, 0.0]]);
        let (m, _) = aggregate_runs(&[array![[77.69]], array![[78.70]]]).unwrap();
        assert!((m[[0, 0]] - (77.69 + 78.70) / 2.0).abs() < 1e-12);
        assert!(matches!(aggregate_runs(&[array![[1.0]], array![[1.0, 2.0]]]), Err(Error::Shape { .. })));
        let (mean, sd) = mean_and_sd(&[0.70, 0.80]);
        assert!((mean - 0.75).abs() < 1e-12 && (sd - 0.070_710_678).abs() < 1e-8);
    }

    #[test]
    fn normalization_conventions() {
        let c = normalize_matrix(&Array2::from_elem((3, 3), 2.5), Normalization::MinmaxGlobal);
        assert!(c.iter().all(|&v| v == 0.0));
        let m = array![[0.0, 3.0], [1.0, -1.0]];
        let n = normalize_matrix(&m, Normalization::MinmaxGlobal);
        assert_eq!(n[[0, 1]], 1.0);
        assert_eq!(n[[1, 1]], 0.0);
        let s = normalize_matrix(&array![[1000.0, 0.0, -5.0], [1.0, 2.0, 3.0]], Normalization::SoftmaxRow);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn heatmap_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let set = labels(3);
        let mut params = TransitionParams::zeros(Variant::SpeakerAware, 3);
        params.matrices_mut()[0].assign(&array![[0.1, -0.3, 2.0], [1.0 / 3.0, 0.0, 0.7], [-1.2, 0.4, 0.5]]);
        params.matrices_mut()[1].assign(&array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.5]]);
        let order = vec!["l2".to_string(), "l0".to_string()];
        for how in [Normalization::MinmaxGlobal, Normalization::SoftmaxRow] {
            let written = export_transition_heatmap(&params, &set, Some(&order), how, dir.path()).unwrap();
            assert_eq!(written.len(), 4);
            let (l, v) = read_heatmap_csv(&dir.path().join("g0.csv")).unwrap();
            assert_eq!(l, order);
            let g0 = params.matrices()[0];
            let sub = array![[g0[[2, 2]], g0[[2, 0]]], [g0[[0, 2]], g0[[0, 0]]]];
            assert_eq!(v, normalize_matrix(&sub, how));
            let svg = std::fs::read_to_string(dir.path().join("g1.svg")).unwrap();
            assert!(svg.starts_with("<svg"));
            if how == Normalization::MinmaxGlobal {
                assert!(svg.contains("rgb(0,0,0)") && svg.contains("rgb(255,255,255)"));
            }
        }
        let bad = vec!["nope".to_string()];
        assert!(matches!(
            export_transition_heatmap(&params, &set, Some(&bad), Normalization::MinmaxGlobal, dir.path()),
            Err(Error::Validation(_))
        ));
    }

    fn sequences() -> impl Strategy<Value = (usize, Vec<Vec<(usize, usize)>>)> {
        (2usize..6).prop_flat_map(|k| {
            (Just(k), prop::collection::vec(prop::collection::vec((0..k, 0..k), 1..8), 1..5))
        })
    }

    proptest! {
        #[test]
        fn metric_identities((k, convs) in sequences()) {
            let gold: Vec<Vec<usize>> = convs.iter().map(|c| c.iter().map(|p| p.0).collect()).collect();
            let pred: Vec<Vec<usize>> = convs.iter().map(|c| c.iter().map(|p| p.1).collect()).collect();
            let acc = accuracy(&gold, &pred).unwrap();
            let c = confusion(&gold, &pred, &labels(k)).unwrap();
            prop_assert_eq!(c.total() as usize, gold.iter().map(Vec::len).sum::<usize>());
            prop_assert_eq!(c.trace() as f64 / c.total() as f64, acc);
            prop_assert_eq!(micro_recall(&c), acc);
            let m = precision_recall_f1(&c);
            let weighted: f64 = m.iter().map(|x| x.recall * x.support as f64).sum::<f64>() / c.total() as f64;
            prop_assert!((weighted - acc).abs() < 1e-12);
            for x in &m {
                if !x.precision_undefined && !x.recall_undefined && x.precision + x.recall > 0.0 {
                    prop_assert!((x.f1 - 2.0 * x.precision * x.recall / (x.precision + x.recall)).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn aggregation_matches_scalar_oracle(runs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 9), 1..6)) {
            let tables: Vec<Array2<f64>> = runs.iter().map(|r| Array2::from_shape_vec((3, 3), r.clone()).unwrap()).collect();
            let (mean, sd) = aggregate_runs(&tables).unwrap();
            let n = runs.len() as f64;
            for cell in 0..9 {
                let xs: Vec<f64> = runs.iter().map(|r| r[cell]).collect();
                let mu = xs.iter().sum::<f64>() / n;
                let var = if runs.len() > 1 { xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0) } else { 0.0 };
                prop_assert!((mean[[cell / 3, cell % 3]] - mu).abs() < 1e-12);
                prop_assert!((sd[[cell / 3, cell % 3]] - var.sqrt()).abs() < 1e-12);
            }
        }

        #[test]
        fn restricted_rows_renormalise((k, convs) in sequences()) {
            let gold: Vec<Vec<usize>> = convs.iter().map(|c| c.iter().map(|p| p.0).collect()).collect();
            let pred: Vec<Vec<usize>> = convs.iter().map(|c| c.iter().map(|p| p.1).collect()).collect();
            let c = confusion(&gold, &pred, &labels(k)).unwrap();
            let subset: Vec<String> = (0..k).step_by(2).map(|i| format!("l{i}")).collect();
            let subset: Vec<&str> = subset.iter().map(String::as_str).collect();
            let n = c.restrict(&subset, true).unwrap().normalized();
            for (row, &flag) in n.values.rows().into_iter().zip(&n.unsupported) {
                if !flag {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
