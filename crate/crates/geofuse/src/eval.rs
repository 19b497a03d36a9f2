//! Evaluation metrics and spatial analyses.
//!
//! The primary regression score is the squared Pearson correlation per
//! variable; the coefficient of determination is carried alongside as a
//! secondary column. Spatial analyses turn attention records and embedding
//! stores into distance-binned tables suitable for CSV export.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::dataset::VariableSchema;
use crate::encoders::{cosine_similarity, EmbeddingStore};
use crate::fusion::{AttentionRecord, Modality};
use crate::geo::GeoPoint;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Compensated (Kahan) summation so aggregate means are stable to 1e-12
/// regardless of accumulation order.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

fn kahan_mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = KahanSum::new();
    let mut n = 0usize;
    for v in values {
        sum.add(v);
        n += 1;
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum.value() / n as f64, n)
    }
}

/// Per-variable scores: primary squared-Pearson R², secondary coefficient
/// of determination, and whether the predictor was constant (in which case
/// the R² is pinned to 0 rather than left undefined).
#[derive(Clone, Debug, PartialEq)]
pub struct VariableScore {
    pub name: String,
    pub r2: f64,
    pub cod: f64,
    pub constant_prediction: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub scores: Vec<VariableScore>,
    pub mean_r2: f64,
    pub mean_cod: f64,
    pub per_group_r2: BTreeMap<String, f64>,
    pub n_test: usize,
    pub warnings: Vec<String>,
}

struct ColumnStats {
    r2: f64,
    cod: f64,
    constant: bool,
}

fn column_stats(preds: &Tensor, targets: &Tensor, col: usize) -> Result<ColumnStats> {
    let n = preds.rows();
    let nf = n as f64;
    let (mut sx, mut sy) = (KahanSum::new(), KahanSum::new());
    for r in 0..n {
        sx.add(preds.get(r, col));
        sy.add(targets.get(r, col));
    }
    let (mx, my) = (sx.value() / nf, sy.value() / nf);
    let mut sxx = KahanSum::new();
    let mut syy = KahanSum::new();
    let mut sxy = KahanSum::new();
    let mut sres = KahanSum::new();
    for r in 0..n {
        let dx = preds.get(r, col) - mx;
        let dy = targets.get(r, col) - my;
        sxx.add(dx * dx);
        syy.add(dy * dy);
        sxy.add(dx * dy);
        let e = targets.get(r, col) - preds.get(r, col);
        sres.add(e * e);
    }
    if syy.value() == 0.0 {
        return Err(Error::data(format!(
            "target column {col} has zero variance on the evaluation set"
        )));
    }
    let cod = 1.0 - sres.value() / syy.value();
    if sxx.value() == 0.0 {
        // A constant predictor carries no correlation.
        return Ok(ColumnStats {
            r2: 0.0,
            cod,
            constant: true,
        });
    }
    let r = sxy.value() / (sxx.value().sqrt() * syy.value().sqrt());
    Ok(ColumnStats {
        r2: r * r,
        cod,
        constant: false,
    })
}

/// Squared Pearson correlation between prediction and target columns.
/// Zero prediction variance yields 0 for that variable (flagged in the
/// richer [`evaluate`] path); zero target variance is an input error.
pub fn r2_per_variable(preds: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
    check_eval_shapes(preds, targets)?;
    (0..preds.cols())
        .map(|c| column_stats(preds, targets, c).map(|s| s.r2))
        .collect()
}

/// Coefficient of determination per column (secondary metric).
pub fn cod_per_variable(preds: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
    check_eval_shapes(preds, targets)?;
    (0..preds.cols())
        .map(|c| column_stats(preds, targets, c).map(|s| s.cod))
        .collect()
}

fn check_eval_shapes(preds: &Tensor, targets: &Tensor) -> Result<()> {
    if preds.shape() != targets.shape() {
        return Err(Error::data(format!(
            "prediction shape {:?} != target shape {:?}",
            preds.shape(),
            targets.shape()
        )));
    }
    if preds.rows() < 2 {
        return Err(Error::data("need at least 2 evaluation rows"));
    }
    if preds.cols() == 0 {
        return Err(Error::data("no variables to evaluate"));
    }
    Ok(())
}

/// Score every variable and aggregate into a report with group means.
pub fn evaluate(preds: &Tensor, targets: &Tensor, schema: &VariableSchema) -> Result<EvalReport> {
    check_eval_shapes(preds, targets)?;
    if schema.names.len() != preds.cols() {
        return Err(Error::data(format!(
            "schema has {} variables, predictions have {} columns",
            schema.names.len(),
            preds.cols()
        )));
    }
    let mut scores = Vec::with_capacity(preds.cols());
    for (c, name) in schema.names.iter().enumerate() {
        let s = column_stats(preds, targets, c)?;
        scores.push(VariableScore {
            name: name.clone(),
            r2: s.r2,
            cod: s.cod,
            constant_prediction: s.constant,
        });
    }
    group_report(scores, schema, preds.rows())
}

/// Aggregate per-variable scores into means and per-group means. Variables
/// outside every group still count toward the overall mean; groups whose
/// variables are all absent are omitted with a warning.
pub fn group_report(
    scores: Vec<VariableScore>,
    schema: &VariableSchema,
    n_test: usize,
) -> Result<EvalReport> {
    let by_name: BTreeMap<&str, &VariableScore> =
        scores.iter().map(|s| (s.name.as_str(), s)).collect();
    let (mean_r2, _) = kahan_mean(scores.iter().map(|s| s.r2));
    let (mean_cod, _) = kahan_mean(scores.iter().map(|s| s.cod));
    let mut per_group_r2 = BTreeMap::new();
    let mut warnings = Vec::new();
    for (group, members) in &schema.groups {
        let (mean, count) = kahan_mean(
            members
                .iter()
                .filter_map(|m| by_name.get(m.as_str()).map(|s| s.r2)),
        );
        if count == 0 {
            warnings.push(format!("group '{group}' has no scored variables; omitted"));
        } else {
            per_group_r2.insert(group.clone(), mean);
        }
    }
    Ok(EvalReport {
        scores,
        mean_r2,
        mean_cod,
        per_group_r2,
        n_test,
        warnings,
    })
}

/// One row of a distance-binned table.
#[derive(Clone, Debug, PartialEq)]
pub struct BinRow {
    pub bin_start_m: f64,
    pub modality: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Render bin rows as CSV with the canonical header.
pub fn bins_to_csv(rows: &[BinRow]) -> String {
    let mut out = String::from("bin_start_m,modality,mean,std,count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.bin_start_m, r.modality, r.mean, r.std, r.count
        ));
    }
    out
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("variable,r2,cod,constant_prediction\n");
    for s in &report.scores {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.name, s.r2, s.cod, s.constant_prediction
        ));
    }
    out
}

pub fn groups_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("group,mean_r2\n");
    for (g, v) in &report.per_group_r2 {
        out.push_str(&format!("{g},{v}\n"));
    }
    out
}

/// Attention received per token, aggregated over an evaluation set.
///
/// Each token's raw score is the log of the maximum attention it receives
/// from any query, across all layers and heads. Scores are min-max scaled
/// to [0, 1] over the whole set (a degenerate spread maps to 0.5), then
/// binned by the token's distance to its origin.
pub fn attention_vs_distance(records: &[AttentionRecord], bin_m: f64) -> Result<Vec<BinRow>> {
    if bin_m <= 0.0 || !bin_m.is_finite() {
        return Err(Error::config("bin width must be positive"));
    }
    // (distance, modality, log-max score) per context token.
    let mut entries: Vec<(f64, Modality, f64)> = Vec::new();
    for rec in records {
        let t = rec.tokens.len();
        for layer in &rec.heads {
            for attn in layer {
                if attn.shape() != (t, t) {
                    return Err(Error::data(format!(
                        "attention shape {:?} does not match {t} tokens",
                        attn.shape()
                    )));
                }
            }
        }
        for (col, info) in rec.tokens.iter().enumerate() {
            let Some(modality) = info.modality else {
                continue; // CLS receives attention but has no distance.
            };
            let mut max_recv = f64::NEG_INFINITY;
            for layer in &rec.heads {
                for attn in layer {
                    for q in 0..t {
                        max_recv = max_recv.max(attn.get(q, col));
                    }
                }
            }
            if !max_recv.is_finite() || max_recv <= 0.0 {
                return Err(Error::numeric(format!(
                    "token received non-positive max attention {max_recv}"
                )));
            }
            entries.push((info.distance_m, modality, max_recv.ln()));
        }
    }
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let lo = entries.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
    let hi = entries.iter().map(|e| e.2).fold(f64::NEG_INFINITY, f64::max);
    let scale = |v: f64| {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    };
    let mut bins: BTreeMap<(u64, Modality), Vec<f64>> = BTreeMap::new();
    for (dist, modality, score) in entries {
        let idx = (dist / bin_m).floor() as u64;
        bins.entry((idx, modality)).or_default().push(scale(score));
    }
    Ok(bins
        .into_iter()
        .map(|((idx, modality), values)| make_bin_row(idx as f64 * bin_m, modality.to_string(), &values))
        .collect())
}

fn make_bin_row(bin_start_m: f64, modality: String, values: &[f64]) -> BinRow {
    let (mean, n) = kahan_mean(values.iter().copied());
    let mut var = KahanSum::new();
    for v in values {
        var.add((v - mean) * (v - mean));
    }
    BinRow {
        bin_start_m,
        modality,
        mean,
        std: (var.value() / n as f64).sqrt(),
        count: n,
    }
}

/// Mean pairwise cosine similarity per distance lag, over all same-split
/// pairs within `max_m`. A per-lag pair cap subsamples deterministically.
pub fn similarity_vs_distance(
    store: &EmbeddingStore,
    samples: &[(String, GeoPoint)],
    modality_label: &str,
    lag_m: f64,
    max_m: f64,
    max_pairs_per_lag: Option<usize>,
    seed: u64,
) -> Result<Vec<BinRow>> {
    if lag_m <= 0.0 || max_m <= 0.0 || !lag_m.is_finite() || !max_m.is_finite() {
        return Err(Error::config("lag and max distance must be positive"));
    }
    let mut lag_pairs: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for i in 0..samples.len() {
        for jj in (i + 1)..samples.len() {
            let d = samples[i].1.distance(&samples[jj].1);
            if d > max_m {
                continue;
            }
            let idx = (d / lag_m).floor() as u64;
            lag_pairs.entry(idx).or_default().push((i, jj));
        }
    }
    let mut rows = Vec::new();
    for (idx, mut pairs) in lag_pairs {
        if let Some(cap) = max_pairs_per_lag {
            if pairs.len() > cap {
                let mut rng = stream(seed, "sim-lag", idx);
                pairs.shuffle(&mut rng);
                pairs.truncate(cap);
                pairs.sort_unstable();
            }
        }
        let mut sims = Vec::with_capacity(pairs.len());
        for (i, jj) in pairs {
            let a = store.get(&samples[i].0).ok_or_else(|| {
                Error::data(format!("missing embedding '{}'", samples[i].0))
            })?;
            let b = store.get(&samples[jj].0).ok_or_else(|| {
                Error::data(format!("missing embedding '{}'", samples[jj].0))
            })?;
            sims.push(cosine_similarity(a, b)?);
        }
        if !sims.is_empty() {
            rows.push(make_bin_row(idx as f64 * lag_m, modality_label.to_string(), &sims));
        }
    }
    Ok(rows)
}

/// Distance at which excess similarity over the far-field plateau first
/// drops below `threshold_fraction` of the lag-0 excess. The plateau is
/// the mean of the table's last quarter. Rows must cover one modality and
/// be sorted by bin start (as the builders emit them).
pub fn effective_range(rows: &[BinRow], threshold_fraction: f64) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::data("effective_range needs a non-empty table"));
    }
    if !(0.0..1.0).contains(&threshold_fraction) {
        return Err(Error::config("threshold_fraction must be in [0, 1)"));
    }
    let tail = (rows.len() / 4).max(1);
    let (plateau, _) = kahan_mean(rows.iter().rev().take(tail).map(|r| r.mean));
    let e0 = rows[0].mean - plateau;
    if e0 <= 0.0 {
        return Ok(0.0);
    }
    for r in rows {
        if r.mean - plateau < threshold_fraction * e0 {
            return Ok(r.bin_start_m);
        }
    }
    Ok(rows.last().expect("non-empty").bin_start_m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::AttnTokenInfo;

    fn col(values: &[f64]) -> Tensor {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    #[test]
    fn pearson_r2_matches_hand_computation() {
        let targets = col(&[1.0, 2.0, 3.0, 5.0]);
        let preds = col(&[2.0, 1.0, 4.0, 4.0]);
        let r2 = r2_per_variable(&preds, &targets).unwrap();
        assert!((r2[0] - 0.5597883597883598).abs() < 1e-12);
        let cod = cod_per_variable(&preds, &targets).unwrap();
        assert!((cod[0] - 0.5428571428571429).abs() < 1e-12);
    }

    #[test]
    fn pearson_r2_small_example() {
        let targets = col(&[1.0, 2.0, 3.0]);
        let preds = col(&[1.0, 3.0, 2.0]);
        let r2 = r2_per_variable(&preds, &targets).unwrap();
        assert!((r2[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn r2_is_affine_invariant() {
        let targets = col(&[1.0, 2.0, 3.0, 5.0, 8.0]);
        let exact = r2_per_variable(&targets, &targets).unwrap();
        assert!((exact[0] - 1.0).abs() < 1e-12);

        let scaled = col(&[2.0 * 1.0 + 3.0, 2.0 * 2.0 + 3.0, 2.0 * 3.0 + 3.0, 2.0 * 5.0 + 3.0, 2.0 * 8.0 + 3.0]);
        let r2 = r2_per_variable(&scaled, &targets).unwrap();
        assert!((r2[0] - 1.0).abs() < 1e-12);

        let negated = col(&[-1.0, -2.0, -3.0, -5.0, -8.0]);
        let r2 = r2_per_variable(&negated, &targets).unwrap();
        assert!((r2[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_scores_zero_with_flag() {
        let targets = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let preds = Tensor::from_vec(3, 1, vec![7.0, 7.0, 7.0]);
        let r2 = r2_per_variable(&preds, &targets).unwrap();
        assert_eq!(r2[0], 0.0);

        let mut schema = VariableSchema::new(vec!["v0".to_string()]);
        schema.groups.insert("g".to_string(), vec!["v0".to_string()]);
        let report = evaluate(&preds, &targets, &schema).unwrap();
        assert!(report.scores[0].constant_prediction);
        assert_eq!(report.scores[0].r2, 0.0);
    }

    #[test]
    fn zero_target_variance_is_an_error() {
        let targets = col(&[4.0, 4.0, 4.0]);
        let preds = col(&[1.0, 2.0, 3.0]);
        assert!(r2_per_variable(&preds, &targets).is_err());
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let targets = col(&[1.0]);
        let preds = col(&[1.0]);
        assert!(r2_per_variable(&preds, &targets).is_err());
    }

    #[test]
    fn report_means_are_exact() {
        let mut schema = VariableSchema::new(vec!["a".into(), "b".into(), "c".into()]);
        schema.groups.insert("all".to_string(), vec!["a".into(), "b".into(), "c".into()]);
        schema.groups.insert("empty".to_string(), vec!["zzz".into()]);
        schema.groups.insert("one".to_string(), vec!["b".into()]);
        let scores = vec![
            VariableScore { name: "a".into(), r2: 0.2, cod: 0.1, constant_prediction: false },
            VariableScore { name: "b".into(), r2: 0.4, cod: 0.3, constant_prediction: false },
            VariableScore { name: "c".into(), r2: 0.9, cod: 0.8, constant_prediction: false },
        ];
        let report = group_report(scores, &schema, 10).unwrap();
        let expect = (0.2 + 0.4 + 0.9) / 3.0;
        assert!((report.mean_r2 - expect).abs() < 1e-12);
        assert!((report.per_group_r2["all"] - expect).abs() < 1e-12);
        assert!((report.per_group_r2["one"] - 0.4).abs() < 1e-12);
        assert!(!report.per_group_r2.contains_key("empty"));
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("empty"));
        assert_eq!(report.n_test, 10);
    }

    /// Attention record with one layer, one head, hand-set weights: row 0
    /// carries each scored column's intended maximum, and filler rows stay
    /// strictly below it (excess weight parked on the unscored CLS column).
    fn hand_record(token_dists: &[f64], col_max: &[f64]) -> AttentionRecord {
        let t = token_dists.len() + 1;
        let eps = col_max.iter().copied().fold(f64::INFINITY, f64::min) / 2.0;
        let mut attn = Tensor::zeros(t, t);
        for (c, &v) in col_max.iter().enumerate() {
            attn.set(0, c + 1, v);
        }
        attn.set(0, 0, (1.0 - col_max.iter().sum::<f64>()).max(0.0));
        for r in 1..t {
            attn.set(r, 0, 1.0 - (t - 1) as f64 * eps);
            for c in 1..t {
                attn.set(r, c, eps);
            }
        }
        let mut tokens = vec![AttnTokenInfo { modality: None, neighbor_rank: 0, distance_m: 0.0 }];
        tokens.extend(token_dists.iter().enumerate().map(|(i, &d)| AttnTokenInfo {
            modality: Some(if i % 2 == 0 { Modality::Visual } else { Modality::Text }),
            neighbor_rank: i,
            distance_m: d,
        }));
        AttentionRecord { heads: vec![vec![attn]], tokens }
    }

    #[test]
    fn attention_single_token_bins_with_zero_std() {
        let rec = hand_record(&[50.0], &[0.6]);
        let rows = attention_vs_distance(&[rec], 100.0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].bin_start_m, 0.0);
        assert_eq!(rows[0].count, 1);
        assert_eq!(rows[0].std, 0.0);
        // Single score → degenerate scaling → 0.5.
        assert_eq!(rows[0].mean, 0.5);
    }

    #[test]
    fn attention_scaling_is_log_then_minmax() {
        // Columns receive maxima 0.2, 0.4, 0.2 (uniform rows at 0.25 never
        // exceed these): log-scores ln(0.2), ln(0.4), ln(0.2); min-max puts
        // the extremes at 0 and 1.
        let rec = hand_record(&[10.0, 110.0, 210.0], &[0.2, 0.4, 0.2]);
        let rows = attention_vs_distance(&[rec], 100.0).unwrap();
        let find = |start: f64| rows.iter().find(|r| r.bin_start_m == start).unwrap();
        assert_eq!(find(0.0).mean, 0.0);
        assert_eq!(find(100.0).mean, 1.0);
        assert_eq!(find(200.0).mean, 0.0);
        let total: usize = rows.iter().map(|r| r.count).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn attention_midpoint_score_is_log_ratio() {
        // Maxima 0.2, 0.4, 0.6 at one distance: the middle token's scaled
        // score is (ln0.4 − ln0.2)/(ln0.6 − ln0.2) = ln2/ln3.
        let rec = hand_record(&[10.0, 20.0, 30.0], &[0.2, 0.4, 0.6]);
        let rows = attention_vs_distance(&[rec], 100.0).unwrap();
        let by_mod: BTreeMap<&str, &BinRow> =
            rows.iter().map(|r| (r.modality.as_str(), r)).collect();
        // Tokens alternate visual/text: visual gets 0.2 and 0.6 → scores 0, 1.
        let visual = by_mod["visual"];
        assert_eq!(visual.count, 2);
        assert!((visual.mean - 0.5).abs() < 1e-12);
        let text = by_mod["text"];
        assert_eq!(text.count, 1);
        assert!((text.mean - 0.6309297535714574).abs() < 1e-12);
    }

    #[test]
    fn attention_degenerate_spread_maps_to_half() {
        let rec = hand_record(&[10.0, 20.0], &[0.3, 0.3]);
        let rows = attention_vs_distance(&[rec], 100.0).unwrap();
        for r in &rows {
            assert_eq!(r.mean, 0.5);
        }
    }

    fn unit_store(samples: &[(String, GeoPoint)], value: &[f64]) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(value.len()).unwrap();
        for (key, _) in samples {
            store.insert(key, value).unwrap();
        }
        store
    }

    #[test]
    fn identical_embeddings_give_unit_similarity_at_all_lags() {
        let samples: Vec<(String, GeoPoint)> = (0..5)
            .map(|i| (format!("s{i}"), GeoPoint::new(120.0 * i as f64, 0.0)))
            .collect();
        let store = unit_store(&samples, &[0.5, 0.5, 0.5]);
        let rows =
            similarity_vs_distance(&store, &samples, "visual", 100.0, 1000.0, None, 0).unwrap();
        assert!(!rows.is_empty());
        for r in &rows {
            assert!((r.mean - 1.0).abs() < 1e-12, "{r:?}");
            assert!(r.std < 1e-7);
        }
        // 5 points on a 120 m lattice: all 10 pairs lie within 480 m.
        let total: usize = rows.iter().map(|r| r.count).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn similarity_respects_max_distance_and_cap() {
        let samples: Vec<(String, GeoPoint)> = (0..6)
            .map(|i| (format!("s{i}"), GeoPoint::new(50.0 * i as f64, 0.0)))
            .collect();
        let store = unit_store(&samples, &[1.0, 0.0]);
        let rows =
            similarity_vs_distance(&store, &samples, "visual", 100.0, 120.0, None, 0).unwrap();
        // Pairs at 50 and 100 m only: lag 0 has the five 50 m pairs,
        // lag 1 the four 100 m pairs.
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].count, 5);
        assert_eq!(rows[1].count, 4);

        let capped =
            similarity_vs_distance(&store, &samples, "visual", 100.0, 120.0, Some(2), 7).unwrap();
        assert!(capped.iter().all(|r| r.count == 2));
        let again =
            similarity_vs_distance(&store, &samples, "visual", 100.0, 120.0, Some(2), 7).unwrap();
        assert_eq!(capped, again);
    }

    fn flat_rows(means: &[f64]) -> Vec<BinRow> {
        means
            .iter()
            .enumerate()
            .map(|(i, &m)| BinRow {
                bin_start_m: 100.0 * i as f64,
                modality: "visual".to_string(),
                mean: m,
                std: 0.0,
                count: 10,
            })
            .collect()
    }

    #[test]
    fn effective_range_flat_table_is_zero() {
        let rows = flat_rows(&[0.4; 12]);
        assert_eq!(effective_range(&rows, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn effective_range_step_function() {
        let mut means = vec![1.0; 5];
        means.extend(vec![0.0; 15]);
        let rows = flat_rows(&means);
        assert_eq!(effective_range(&rows, 0.1).unwrap(), 500.0);
    }

    #[test]
    fn effective_range_exponential_decay() {
        // mean(d) = exp(−d/ℓ) with ℓ = 300 m: excess falls below 10% near
        // −ln(0.1)·ℓ ≈ 690 m, within one 100 m lag.
        let l = 300.0;
        let means: Vec<f64> = (0..40).map(|i| (-(100.0 * i as f64) / l).exp()).collect();
        let rows = flat_rows(&means);
        let range = effective_range(&rows, 0.1).unwrap();
        assert!((range - 700.0).abs() <= 100.0, "range {range}");
    }
}
