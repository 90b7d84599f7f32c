//! Detection metrics and evaluation protocols.
//!
//! Scores are oriented so that higher means more anomalous. The
//! in-distribution set is the positive class and is detected at low scores.

use std::io::Write;

use thiserror::Error;

use crate::data::{brightness, concat, DataError, ImageDataset};
use crate::rose::{score_pipeline, RoseError, ScoreConfig, ScoreTable};
use crate::tensor::{Rng, Scalar};
use crate::vae::VaeModel;
use crate::fisher::FisherArtifact;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} scores are empty")]
    Empty(&'static str),
    #[error("{which} score {index} is not finite")]
    NonFinite { which: &'static str, index: usize },
    #[error("source `{label}` has {available} samples, {requested} requested")]
    Undersized { label: String, available: usize, requested: usize },
    #[error("score tables have {0} and {1} layers")]
    LayerMismatch(usize, usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Rose(#[from] RoseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check(in_scores: &[f64], out_scores: &[f64]) -> Result<()> {
    if in_scores.is_empty() {
        return Err(EvalError::Empty("in-distribution"));
    }
    if out_scores.is_empty() {
        return Err(EvalError::Empty("out-of-distribution"));
    }
    for (which, s) in [("in-distribution", in_scores), ("out-of-distribution", out_scores)] {
        if let Some(index) = s.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite { which, index });
        }
    }
    Ok(())
}

/// Probability that a random OOD score exceeds a random in-distribution
/// score, ties counted one half (Mann–Whitney with average ranks).
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check(in_scores, out_scores)?;
    let mut all: Vec<(f64, bool)> = in_scores.iter().map(|&s| (s, false)).chain(out_scores.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of the OOD scores; average ranks of a tie block
    // spanning 1-based ranks i..=j are (i + j) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start;
        while end + 1 < all.len() && all[end + 1].0 == all[start].0 {
            end += 1;
        }
        let twice_rank = (start + 1 + end + 1) as u128;
        let outs = all[start..=end].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_rank * outs;
        start = end + 1;
    }
    let (n_in, n_out) = (in_scores.len() as u128, out_scores.len() as u128);
    let twice_u = twice_rank_sum - n_out * (n_out + 1);
    Ok(twice_u as f64 / (2 * n_in * n_out) as f64)
}

/// Step-wise average precision with the in-distribution set as positives,
/// sweeping the threshold `score ≤ τ` over every distinct score.
pub fn auprc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check(in_scores, out_scores)?;
    let mut all: Vec<(f64, bool)> = in_scores.iter().map(|&s| (s, true)).chain(out_scores.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = in_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos;
        if recall > prev_recall {
            area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
            prev_recall = recall;
        }
    }
    Ok(area)
}

/// Fraction of OOD scores at or below the smallest threshold that keeps at
/// least 80% of in-distribution scores at or below it.
pub fn fpr80(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check(in_scores, out_scores)?;
    let mut sorted = in_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Smallest m with m / n ≥ 4/5.
    let m = (4 * n).div_ceil(5).max(1);
    let tau = sorted[m - 1];
    let below = out_scores.iter().filter(|&&s| s <= tau).count();
    Ok(below as f64 / out_scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub per_layer_auroc: Vec<f64>,
}

pub fn evaluate_scores(in_scores: &[f64], out_scores: &[f64]) -> Result<EvalResult> {
    Ok(EvalResult {
        auroc: auroc(in_scores, out_scores)?,
        auprc: auprc(in_scores, out_scores)?,
        fpr80: fpr80(in_scores, out_scores)?,
        n_in: in_scores.len(),
        n_out: out_scores.len(),
        per_layer_auroc: Vec::new(),
    })
}

/// Which column of a score table to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreColumn {
    Rose,
    Nll,
}

impl ScoreColumn {
    pub fn name(self) -> &'static str {
        match self {
            ScoreColumn::Rose => "rose",
            ScoreColumn::Nll => "nll",
        }
    }

    pub fn of(self, t: &ScoreTable) -> Vec<f64> {
        match self {
            ScoreColumn::Rose => t.rose(),
            ScoreColumn::Nll => t.nll(),
        }
    }
}

/// Metrics of one column plus per-layer AUROCs of the normalised scores.
pub fn evaluate_tables(in_table: &ScoreTable, out_table: &ScoreTable, column: ScoreColumn) -> Result<EvalResult> {
    let (li, lo) = (in_table.num_layers(), out_table.num_layers());
    if li != lo && !in_table.rows.is_empty() && !out_table.rows.is_empty() {
        return Err(EvalError::LayerMismatch(li, lo));
    }
    let mut res = evaluate_scores(&column.of(in_table), &column.of(out_table))?;
    res.per_layer_auroc =
        (0..li).map(|l| auroc(&in_table.hat_column(l), &out_table.hat_column(l))).collect::<Result<_>>()?;
    Ok(res)
}

/// Rows `metric,dataset,value`.
pub fn write_report(mut w: impl Write, entries: &[(String, EvalResult)], per_layer: bool) -> Result<()> {
    writeln!(w, "metric,dataset,value")?;
    for (dataset, r) in entries {
        for (metric, v) in [("auroc", r.auroc), ("auprc", r.auprc), ("fpr80", r.fpr80)] {
            writeln!(w, "{metric},{dataset},{v:.9}")?;
        }
        writeln!(w, "n_in,{dataset},{}", r.n_in)?;
        writeln!(w, "n_out,{dataset},{}", r.n_out)?;
        if per_layer {
            for (l, v) in r.per_layer_auroc.iter().enumerate() {
                writeln!(w, "auroc_layer_{},{dataset},{v:.9}", l + 1)?;
            }
        }
    }
    Ok(())
}

pub const HISTOGRAM_BINS: usize = 50;

/// Counts of both score sets over equal-width bins spanning their joint
/// range; the last bin is closed.
pub fn histogram(in_scores: &[f64], out_scores: &[f64], bins: usize) -> Result<Vec<(f64, f64, usize, usize)>> {
    check(in_scores, out_scores)?;
    let bins = bins.max(1);
    let all = in_scores.iter().chain(out_scores);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let slot = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let mut rows: Vec<(f64, f64, usize, usize)> =
        (0..bins).map(|b| (lo + b as f64 * width, lo + (b + 1) as f64 * width, 0, 0)).collect();
    for &v in in_scores {
        rows[slot(v)].2 += 1;
    }
    for &v in out_scores {
        rows[slot(v)].3 += 1;
    }
    Ok(rows)
}

pub fn write_histogram(mut w: impl Write, rows: &[(f64, f64, usize, usize)]) -> Result<()> {
    writeln!(w, "bin_left,bin_right,count_in,count_out")?;
    for (l, r, a, b) in rows {
        writeln!(w, "{l:.9e},{r:.9e},{a},{b}")?;
    }
    Ok(())
}

/// A mixed OOD set with the source label of every row.
#[derive(Debug, Clone)]
pub struct MixedDataset {
    pub data: ImageDataset,
    pub provenance: Vec<String>,
}

/// Uniformly random `per_dataset_n` samples from each source, concatenated
/// in source order.
pub fn overall_mix(sources: &[ImageDataset], per_dataset_n: usize, seed: u64) -> Result<MixedDataset> {
    let mut rng = Rng::new(seed);
    let mut parts = Vec::with_capacity(sources.len());
    let mut provenance = Vec::new();
    for src in sources {
        if src.len() < per_dataset_n {
            return Err(EvalError::Undersized {
                label: src.label.clone(),
                available: src.len(),
                requested: per_dataset_n,
            });
        }
        let mut idx: Vec<usize> = (0..src.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(per_dataset_n);
        idx.sort_unstable();
        parts.push(src.select(&idx)?);
        provenance.extend(std::iter::repeat_n(src.label.clone(), per_dataset_n));
    }
    Ok(MixedDataset { data: concat(&parts, "overall")?, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Brightness,
    FisherSamples,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Brightness => "brightness",
            SweepAxis::FisherSamples => "fisher_samples",
        }
    }
}

/// AUROCs of several score columns over a parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub columns: Vec<String>,
    /// `[column][grid point]`
    pub aurocs: Vec<Vec<f64>>,
}

impl SweepTable {
    pub fn mean(&self, column: usize) -> f64 {
        let v = &self.aurocs[column];
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Population standard deviation over the grid.
    pub fn std(&self, column: usize) -> f64 {
        let v = &self.aurocs[column];
        let m = self.mean(column);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = vec![self.axis.name().to_string()];
        header.extend(self.columns.iter().map(|c| format!("auroc_{c}")));
        writeln!(w, "{}", header.join(","))?;
        for (g, value) in self.grid.iter().enumerate() {
            let mut line = format!("{value}");
            for col in &self.aurocs {
                line.push_str(&format!(",{:.9}", col[g]));
            }
            writeln!(w, "{line}")?;
        }
        for (label, f) in [("mean", Self::mean as fn(&Self, usize) -> f64), ("std", Self::std)] {
            let mut line = label.to_string();
            for c in 0..self.columns.len() {
                line.push_str(&format!(",{:.9}", f(self, c)));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Runs `pipeline` at every grid point; it returns one AUROC per column.
pub fn robustness_sweep<F>(axis: SweepAxis, grid: &[f64], columns: &[&str], mut pipeline: F) -> Result<SweepTable>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    let mut aurocs = vec![Vec::with_capacity(grid.len()); columns.len()];
    for &g in grid {
        let row = pipeline(g)?;
        assert_eq!(row.len(), columns.len(), "pipeline must return one AUROC per column");
        for (c, v) in row.into_iter().enumerate() {
            aurocs[c].push(v);
        }
    }
    Ok(SweepTable { axis, grid: grid.to_vec(), columns: columns.iter().map(|c| c.to_string()).collect(), aurocs })
}

/// Brightness sweep of an OOD set against fixed in-distribution scores,
/// reporting ROSE and NLL AUROCs.
pub fn brightness_sweep<T: Scalar>(
    model: &VaeModel<T>,
    artifact: &FisherArtifact,
    in_table: &ScoreTable,
    ood: &ImageDataset,
    grid: &[f64],
    cfg: &ScoreConfig,
) -> Result<SweepTable> {
    robustness_sweep(SweepAxis::Brightness, grid, &["rose", "nll"], |f| {
        let shifted = brightness(ood, f)?;
        let table = score_pipeline(model, artifact, &shifted, cfg)?;
        Ok(vec![auroc(&in_table.rose(), &table.rose())?, auroc(&in_table.nll(), &table.nll())?])
    })
}

/// The nine brightness factors 0.2, 0.4, …, 1.8.
pub fn brightness_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 * 0.2).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};
    use proptest::prelude::*;

    fn pair_count(in_s: &[f64], out_s: &[f64]) -> f64 {
        let mut gt = 0u64;
        let mut eq = 0u64;
        for &o in out_s {
            for &i in in_s {
                if o > i {
                    gt += 1;
                } else if o == i {
                    eq += 1;
                }
            }
        }
        (gt as f64 + 0.5 * eq as f64) / (in_s.len() * out_s.len()) as f64
    }

    /// Average precision by explicit threshold enumeration.
    fn sweep_auprc(in_s: &[f64], out_s: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = in_s.iter().chain(out_s).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let mut prev = 0.0;
        let mut area = 0.0;
        for t in thresholds {
            let tp = in_s.iter().filter(|&&s| s <= t).count() as f64;
            let fp = out_s.iter().filter(|&&s| s <= t).count() as f64;
            let recall = tp / in_s.len() as f64;
            if tp > 0.0 {
                area += (recall - prev) * tp / (tp + fp);
            }
            prev = recall;
        }
        area
    }

    fn sweep_fpr80(in_s: &[f64], out_s: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = in_s.iter().chain(out_s).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        for t in thresholds {
            let tpr = in_s.iter().filter(|&&s| s <= t).count() as f64 / in_s.len() as f64;
            if tpr >= 0.8 - 1e-12 {
                return out_s.iter().filter(|&&s| s <= t).count() as f64 / out_s.len() as f64;
            }
        }
        unreachable!()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        let mut rng = Rng::new(1);
        let a: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        assert!((auprc(&a, &b).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn auprc_and_fpr80_match_sweep_oracle() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            // Coarse values force ties.
            let a: Vec<f64> = (0..25).map(|_| (rng.below(20) as f64) / 4.0).collect();
            let b: Vec<f64> = (0..25).map(|_| (rng.below(20) as f64) / 4.0 + 1.0).collect();
            assert!((auprc(&a, &b).unwrap() - sweep_auprc(&a, &b)).abs() < 1e-9);
            assert_eq!(fpr80(&a, &b).unwrap(), sweep_fpr80(&a, &b));
        }
    }

    #[test]
    fn fpr80_examples() {
        assert_eq!(fpr80(&[0.0, 1.0, 2.0], &[5.0, 6.0]).unwrap(), 0.0);
        let mut rng = Rng::new(3);
        let a: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        assert!((fpr80(&a, &a).unwrap() - 0.8).abs() < 1e-3);
    }

    #[test]
    fn report_and_histogram_layout() {
        let r = EvalResult { auroc: 0.5, auprc: 0.25, fpr80: 0.8, n_in: 2, n_out: 3, per_layer_auroc: vec![0.1, 0.9] };
        let mut buf = Vec::new();
        write_report(&mut buf, &[("mnist".into(), r.clone())], true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,dataset,value\nauroc,mnist,0.500000000\n"));
        assert!(text.contains("auroc_layer_2,mnist,0.900000000"));
        let mut buf = Vec::new();
        write_report(&mut buf, &[("mnist".into(), r)], false).unwrap();
        assert!(!String::from_utf8(buf).unwrap().contains("layer"));

        let h = histogram(&[0.0, 0.5], &[1.0, 1.0, 0.99], HISTOGRAM_BINS).unwrap();
        assert_eq!(h.len(), 50);
        assert_eq!(h.iter().map(|r| r.2).sum::<usize>(), 2);
        assert_eq!(h[49].3, 3);
        assert_eq!(h[0].0, 0.0);
    }

    fn dataset(n: usize, level: f32, label: &str) -> ImageDataset {
        ImageDataset::new(Tensor::full(&[n, 1, 2, 2], level), label).unwrap()
    }

    #[test]
    fn overall_mix_counts_and_reproducibility() {
        let srcs = [dataset(10, 0.1, "a"), dataset(7, 0.9, "b")];
        let m = overall_mix(&srcs, 3, 5).unwrap();
        assert_eq!(m.data.len(), 6);
        assert_eq!(m.provenance, ["a", "a", "a", "b", "b", "b"]);
        let again = overall_mix(&srcs, 3, 5).unwrap();
        assert_eq!(m.data.images(), again.data.images());
        assert!(matches!(overall_mix(&srcs, 8, 5), Err(EvalError::Undersized { .. })));
    }

    #[test]
    fn sweep_statistics() {
        let t = robustness_sweep(SweepAxis::Brightness, &[1.0, 2.0], &["x"], |g| Ok(vec![g / 4.0])).unwrap();
        assert_eq!(t.mean(0), 0.375);
        assert_eq!(t.std(0), 0.125);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
        assert_eq!(brightness_grid().len(), 9);
        assert!((brightness_grid()[8] - 1.8).abs() < 1e-12);
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // Half the draws come from a small set so ties are common.
        let value = prop_oneof![prop::sample::select(vec![0.0, 0.5, 1.0, 2.0, 3.5]), -10.0f64..10.0];
        prop::collection::vec(value, 1..100)
    }

    proptest! {
        #[test]
        fn auroc_equals_pair_counting(a in scores(), b in scores()) {
            prop_assert_eq!(auroc(&a, &b).unwrap(), pair_count(&a, &b));
        }

        #[test]
        fn auroc_is_antisymmetric(a in scores(), b in scores()) {
            prop_assert_eq!(auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap(), 1.0);
        }

        #[test]
        fn auroc_ignores_monotone_transforms(a in scores(), b in scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (x / 3.0).exp() * 2.0 + 1.0).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&a, &b).unwrap(), auroc(&f(&a), &f(&b)).unwrap());
        }

        #[test]
        fn fpr80_falls_when_ood_rises(a in scores(), b in scores(), c in 0.001f64..5.0) {
            let shifted: Vec<f64> = b.iter().map(|v| v + c).collect();
            prop_assert!(fpr80(&a, &shifted).unwrap() <= fpr80(&a, &b).unwrap());
        }

        #[test]
        fn metrics_are_probabilities(a in scores(), b in scores()) {
            let r = evaluate_scores(&a, &b).unwrap();
            for v in [r.auroc, r.auprc, r.fpr80] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
