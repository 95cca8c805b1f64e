//! Binary classification metrics and per-group breakdowns.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Window;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }

    /// `2tp / (2tp + fp + fn)`, defined as 0 when `tp = 0`.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> (f64, Confusion) {
    let c = confusion(scores, labels, threshold);
    (c.f1(), c)
}

/// Indices sorted by descending score.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Tie blocks of (positives, negatives), in descending score order.
fn tie_blocks(scores: &[f64], labels: &[u8]) -> Vec<(u64, u64)> {
    let idx = order_desc(scores);
    let mut blocks: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in idx {
        if prev != Some(scores[i]) {
            blocks.push((0, 0));
            prev = Some(scores[i]);
        }
        let b = blocks.last_mut().expect("block pushed");
        if labels[i] == 1 {
            b.0 += 1;
        } else {
            b.1 += 1;
        }
    }
    blocks
}

/// Mann–Whitney AUC with ties counted one half; `None` for a single class.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // twice the number of correctly ordered pairs, plus ties
    let mut twice = 0u64;
    let mut neg_below = n_neg;
    for (p, n) in tie_blocks(scores, labels) {
        neg_below -= n;
        twice += 2 * p * neg_below + p * n;
    }
    Some(twice as f64 / (2 * n_pos * n_neg) as f64)
}

/// Step-wise average precision with tied scores treated as one block;
/// `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    if n_pos == 0 {
        return None;
    }
    let (mut tp, mut seen, mut ap) = (0u64, 0u64, 0.0);
    for (p, n) in tie_blocks(scores, labels) {
        tp += p;
        seen += p + n;
        if p > 0 {
            ap += (p as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_pos: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub f1: f64,
    pub threshold: f64,
    pub confusion: Confusion,
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let c = confusion(scores, labels, threshold);
    Ok(EvalReport {
        n: c.n(),
        n_pos: c.tp + c.fn_,
        accuracy: c.accuracy(),
        auc: roc_auc(scores, labels),
        ap: average_precision(scores, labels),
        f1: c.f1(),
        threshold,
        confusion: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GroupBy {
    Species,
    Region,
}

impl GroupBy {
    pub fn header(self) -> &'static str {
        match self {
            GroupBy::Species => "Species",
            GroupBy::Region => "Region",
        }
    }

    pub fn key(self, w: &Window) -> String {
        match self {
            GroupBy::Species => w.species.clone(),
            GroupBy::Region => w.endpoint.region(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub group: String,
    pub n: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub f1: f64,
}

impl BreakdownRow {
    fn from_report(group: String, r: &EvalReport) -> Self {
        Self {
            group,
            n: r.n,
            accuracy: r.accuracy,
            auc: r.auc,
            ap: r.ap,
            f1: r.f1,
        }
    }
}

/// Per-group metrics, sorted by descending accuracy then group key.
pub fn breakdown_by_key(keys: &[String], scores: &[f64], labels: &[u8], threshold: f64) -> Result<Vec<BreakdownRow>> {
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((k, &s), &y) in keys.iter().zip(scores).zip(labels) {
        let g = groups.entry(k).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let mut rows = groups
        .into_iter()
        .map(|(k, (s, y))| evaluate(&s, &y, threshold).map(|r| BreakdownRow::from_report(k.to_string(), &r)))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then_with(|| a.group.cmp(&b.group)));
    Ok(rows)
}

pub fn breakdown(windows: &[Window], scores: &[f64], threshold: f64, group_by: GroupBy) -> Result<Vec<BreakdownRow>> {
    let keys: Vec<String> = windows.iter().map(|w| group_by.key(w)).collect();
    let labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    breakdown_by_key(&keys, scores, &labels, threshold)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "n,n_pos,accuracy,auc,ap,f1,threshold,tp,fp,tn,fn";

pub fn write_report_csv<W: Write>(mut w: W, r: &EvalReport) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    writeln!(
        w,
        "{},{},{:.4},{},{},{:.4},{},{},{},{},{}",
        r.n,
        r.n_pos,
        r.accuracy,
        opt(r.auc),
        opt(r.ap),
        r.f1,
        r.threshold,
        r.confusion.tp,
        r.confusion.fp,
        r.confusion.tn,
        r.confusion.fn_
    )
}

/// Breakdown table with columns `<Group>,Accuracy,AUC,AP,F1-score` and a
/// closing `TOTAL` row. Absent metrics are left blank.
pub fn write_breakdown_csv<W: Write>(
    mut w: W,
    group_by: GroupBy,
    rows: &[BreakdownRow],
    total: &EvalReport,
) -> std::io::Result<()> {
    writeln!(w, "{},Accuracy,AUC,AP,F1-score", group_by.header())?;
    let total_row = BreakdownRow::from_report("TOTAL".into(), total);
    for r in rows.iter().chain(std::iter::once(&total_row)) {
        let group = if r.group.contains([',', '"']) {
            format!("\"{}\"", r.group.replace('"', "\"\""))
        } else {
            r.group.clone()
        };
        writeln!(w, "{},{:.4},{},{},{:.4}", group, r.accuracy, opt(r.auc), opt(r.ap), r.f1)?;
    }
    Ok(())
}

/// Horizontal bar chart of per-group accuracy.
pub fn accuracy_svg(title: &str, rows: &[BreakdownRow]) -> String {
    let bar_h = 18.0;
    let left = 160.0;
    let width = 400.0;
    let height = 40.0 + bar_h * rows.len() as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        left + width + 60.0
    );
    s += &format!("<text x=\"4\" y=\"16\" font-size=\"13\">{}</text>\n", xml_escape(title));
    for (i, r) in rows.iter().enumerate() {
        let y = 28.0 + bar_h * i as f64;
        s += &format!(
            "<text x=\"4\" y=\"{:.1}\">{}</text><rect x=\"{left}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#3b7dd8\"/><text x=\"{:.1}\" y=\"{:.1}\">{:.3} (n={})</text>\n",
            y + 12.0,
            xml_escape(&r.group),
            width * r.accuracy,
            bar_h - 4.0,
            left + width * r.accuracy + 4.0,
            y + 12.0,
            r.accuracy,
            r.n
        );
    }
    s += "</svg>\n";
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0]), Some(0.75));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(roc_auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), None);
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_abs_diff_eq!(ap, 0.5 + (2.0 / 3.0) * 0.5, epsilon = 1e-15);
        assert_eq!(average_precision(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]), Some(1.0));
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / 10.0).collect();
        let mut labels = vec![0u8; n];
        labels[n - 1] = 1;
        assert_abs_diff_eq!(average_precision(&scores, &labels).unwrap(), 1.0 / n as f64, epsilon = 1e-15);
        assert_eq!(average_precision(&[0.3], &[0]), None);
    }

    #[test]
    fn f1_examples() {
        let (f1, c) = f1_at(&[0.9, 0.1], &[1, 0], 0.5);
        assert_eq!((f1, c.fp, c.fn_), (1.0, 0, 0));
        let (f1, _) = f1_at(&[0.2, 0.1], &[1, 0], 0.5);
        assert_eq!(f1, 0.0);
        let c = Confusion { tp: 8, fp: 2, tn: 5, fn_: 2 };
        assert_abs_diff_eq!(c.f1(), 0.8, epsilon = 1e-15);
        // threshold is inclusive
        assert_eq!(confusion(&[0.5], &[1], 0.5).tp, 1);
    }

    #[test]
    fn report_invariants() {
        let r = evaluate(&[0.9, 0.6, 0.4, 0.2, 0.7], &[1, 0, 1, 0, 1], 0.5).unwrap();
        assert_eq!(r.confusion.n(), r.n);
        assert_eq!(r.accuracy, (r.confusion.tp + r.confusion.tn) as f64 / r.n as f64);
        assert_eq!(r.n_pos, 3);
        assert!(evaluate(&[], &[], 0.5).is_err());
    }

    #[test]
    fn breakdown_single_group_and_partition() {
        let scores = [0.9, 0.6, 0.4, 0.2, 0.7, 0.1];
        let labels = [1, 0, 1, 0, 1, 0];
        let one = vec!["g".to_string(); 6];
        let rows = breakdown_by_key(&one, &scores, &labels, 0.5).unwrap();
        let total = evaluate(&scores, &labels, 0.5).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].accuracy, rows[0].auc, rows[0].ap, rows[0].f1), (total.accuracy, total.auc, total.ap, total.f1));

        let keys: Vec<String> = ["a", "b", "a", "b", "b", "b"].iter().map(|s| s.to_string()).collect();
        let rows = breakdown_by_key(&keys, &scores, &labels, 0.5).unwrap();
        let weighted: f64 = rows.iter().map(|r| r.accuracy * r.n as f64).sum::<f64>() / 6.0;
        assert_abs_diff_eq!(weighted, total.accuracy, epsilon = 1e-12);
        assert!(rows[0].accuracy >= rows[1].accuracy);

        let neg_only = breakdown_by_key(&["z".to_string(), "z".to_string()], &[0.1, 0.2], &[0, 0], 0.5).unwrap();
        assert_eq!(neg_only[0].accuracy, 1.0);
        assert_eq!((neg_only[0].auc, neg_only[0].ap), (None, None));
    }

    #[test]
    fn breakdown_csv_blanks_absent_metrics() {
        let total = evaluate(&[0.1, 0.2], &[0, 0], 0.5).unwrap();
        let rows = breakdown_by_key(&["Anas crecca".into(), "Anas crecca".into()], &[0.1, 0.2], &[0, 0], 0.5).unwrap();
        let mut buf = Vec::new();
        write_breakdown_csv(&mut buf, GroupBy::Species, &rows, &total).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "Species,Accuracy,AUC,AP,F1-score\nAnas crecca,1.0000,,,0.0000\nTOTAL,1.0000,,,0.0000\n"
        );
        assert!(accuracy_svg("acc", &rows).contains("Anas crecca"));
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..80);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            assert_eq!(roc_auc(&scores, &labels), roc_auc(&mapped, &labels));
            assert_eq!(average_precision(&scores, &labels), average_precision(&mapped, &labels));
        }
    }

    #[test]
    fn shuffled_labels_auc_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        let mut total = 0.0;
        for _ in 0..100 {
            let mut labels: Vec<u8> = (0..500).map(|i| (i % 2) as u8).collect();
            rand::seq::SliceRandom::shuffle(&mut labels[..], &mut rng);
            total += roc_auc(&scores, &labels).unwrap();
        }
        let mean = total / 100.0;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / pairs
    }

    fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
        let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let mut cuts = scores.to_vec();
        cuts.sort_by(|a, b| b.total_cmp(a));
        cuts.dedup();
        let (mut ap, mut prev_recall) = (0.0, 0.0);
        for t in cuts {
            let kept: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = kept.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let recall = tp / n_pos;
            ap += (recall - prev_recall) * (tp / kept.len() as f64);
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..200 {
            let n = rng.random_range(2..=200);
            // coarse grids force ties on some instances
            let levels = if case % 2 == 0 { 10 } else { 1_000_000 };
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            assert_abs_diff_eq!(roc_auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels), epsilon = 1e-12);
            assert_abs_diff_eq!(average_precision(&scores, &labels).unwrap(), brute_ap(&scores, &labels), epsilon = 1e-12);
        }
    }
}
