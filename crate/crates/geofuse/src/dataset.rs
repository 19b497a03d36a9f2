//! Sample ingestion, target standardization, variable filtering, and
//! assembly of spatial context samples.
//!
//! Samples arrive as JSONL (`id`, projected coordinates, embedding
//! references, target vector) plus a `variables.json` naming the target
//! variables and their thematic groups. After loading, targets are filtered
//! (near-constant and near-duplicate variables dropped on train statistics),
//! standardized to zero mean and unit variance on the train split, and each
//! sample is expanded into itself plus its k nearest same-split neighbours.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geo::{BlockSplit, GeoPoint, SpatialIndex};
use crate::{Error, Result};

/// One georeferenced sample: an image embedding reference, its candidate
/// sentence references, and the target vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub location: GeoPoint,
    pub image_ref: String,
    pub sentence_refs: Vec<String>,
    pub targets: Vec<f64>,
}

/// Target variable names, thematic groups, and train-split statistics.
/// `train_mean`/`train_std` are empty until [`standardize_targets`] runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub names: Vec<String>,
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub train_mean: Vec<f64>,
    #[serde(default)]
    pub train_std: Vec<f64>,
}

impl VariableSchema {
    pub fn new(names: Vec<String>) -> Self {
        VariableSchema {
            names,
            groups: BTreeMap::new(),
            train_mean: Vec::new(),
            train_std: Vec::new(),
        }
    }

    /// Map standardized values back to the original scale.
    pub fn destandardize(&self, standardized: &[f64]) -> Vec<f64> {
        standardized
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.train_std[i] + self.train_mean[i])
            .collect()
    }
}

/// Origin sample plus its same-split spatial neighbourhood, by dense index.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSample {
    pub origin: usize,
    pub neighbors: Vec<ContextNeighbor>,
    /// Number of neighbours actually found (≤ requested k).
    pub k_effective: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextNeighbor {
    pub index: usize,
    pub distance_m: f64,
    /// Neighbour location minus origin location, meters (east, north).
    pub offset: (f64, f64),
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    id: String,
    east_m: f64,
    north_m: f64,
    image_ref: String,
    sentence_refs: Vec<String>,
    targets: Vec<f64>,
}

/// Load and validate samples from JSONL, sorted by id so that a sample's
/// position in the returned vector is its dense id everywhere downstream.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples: Vec<Sample> = Vec::new();
    let mut expected_m: Option<usize> = None;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("line {line_no}: {e}")))?;
        let m = parsed.targets.len();
        match expected_m {
            None => expected_m = Some(m),
            Some(expected) if expected != m => {
                return Err(Error::data(format!(
                    "line {line_no}: {m} targets, expected {expected}"
                )));
            }
            _ => {}
        }
        if !parsed.east_m.is_finite() || !parsed.north_m.is_finite() {
            return Err(Error::data(format!("line {line_no}: non-finite coordinate")));
        }
        if parsed.targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("line {line_no}: non-finite target")));
        }
        samples.push(Sample {
            id: parsed.id,
            location: GeoPoint::new(parsed.east_m, parsed.north_m),
            image_ref: parsed.image_ref,
            sentence_refs: parsed.sentence_refs,
            targets: parsed.targets,
        });
    }
    if samples.is_empty() {
        return Err(Error::data("no samples"));
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in samples.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::data(format!("duplicate sample id '{}'", pair[0].id)));
        }
    }
    Ok(samples)
}

/// Write samples in the same JSONL layout `load_samples` reads.
pub fn save_samples(samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let line = SampleLine {
            id: s.id.clone(),
            east_m: s.location.east,
            north_m: s.location.north,
            image_ref: s.image_ref.clone(),
            sentence_refs: s.sentence_refs.clone(),
            targets: s.targets.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_variables(path: &Path) -> Result<VariableSchema> {
    let schema: VariableSchema = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    for (group, members) in &schema.groups {
        for name in members {
            if !schema.names.contains(name) {
                return Err(Error::data(format!(
                    "group '{group}' references unknown variable '{name}'"
                )));
            }
        }
    }
    Ok(schema)
}

pub fn save_variables(schema: &VariableSchema, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, schema)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Per-variable mean and population standard deviation over the train rows.
fn train_stats(samples: &[Sample], train_ids: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if train_ids.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let m = samples[train_ids[0]].targets.len();
    let n = train_ids.len() as f64;
    let mut mean = vec![0.0; m];
    for &id in train_ids {
        for (acc, &v) in mean.iter_mut().zip(&samples[id].targets) {
            *acc += v;
        }
    }
    for acc in &mut mean {
        *acc /= n;
    }
    let mut var = vec![0.0; m];
    for &id in train_ids {
        for (j, &v) in samples[id].targets.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok((mean, std))
}

/// Standardize every sample's targets to zero mean and unit variance using
/// train-split statistics (population std), recording the statistics in the
/// schema for later de-standardization.
pub fn standardize_targets(
    samples: &mut [Sample],
    train_ids: &[usize],
    schema: &mut VariableSchema,
) -> Result<()> {
    let (mean, std) = train_stats(samples, train_ids)?;
    if let Some(j) = std.iter().position(|&s| s == 0.0) {
        return Err(Error::data(format!(
            "variable '{}' is constant on the train split; run variable filtering first",
            schema.names.get(j).map(|s| s.as_str()).unwrap_or("?")
        )));
    }
    for sample in samples.iter_mut() {
        for (j, v) in sample.targets.iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }
    schema.train_mean = mean;
    schema.train_std = std;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RemovalReason {
    /// Train std below the floor (near-constant variable).
    LowStd { std: f64, floor: f64 },
    /// Absolute train correlation with an earlier kept variable above the
    /// ceiling (near-duplicate); the earlier variable is kept.
    HighCorrelation { with: String, corr: f64, ceiling: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariableRemoval {
    pub name: String,
    pub reason: RemovalReason,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterReport {
    pub removals: Vec<VariableRemoval>,
    pub notes: Vec<String>,
}

/// Drop near-constant variables (train std < `std_floor`), then the
/// later-indexed variable of every pair whose absolute train correlation
/// exceeds `corr_ceiling`. Returns the kept names (a subsequence of the
/// input names) and a report of every removal.
pub fn filter_variables(
    samples: &[Sample],
    train_ids: &[usize],
    schema: &VariableSchema,
    std_floor: f64,
    corr_ceiling: f64,
) -> Result<(Vec<String>, FilterReport)> {
    let (mean, std) = train_stats(samples, train_ids)?;
    let m = mean.len();
    if schema.names.len() != m {
        return Err(Error::data(format!(
            "schema names {} variables but targets have {m}",
            schema.names.len()
        )));
    }
    let mut removals = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..m {
        if std[j] < std_floor {
            removals.push(VariableRemoval {
                name: schema.names[j].clone(),
                reason: RemovalReason::LowStd {
                    std: std[j],
                    floor: std_floor,
                },
            });
            continue;
        }
        let mut duplicate_of: Option<(usize, f64)> = None;
        for &i in &kept {
            let corr = train_correlation(samples, train_ids, i, j, &mean, &std);
            if corr.abs() > corr_ceiling {
                duplicate_of = Some((i, corr));
                break;
            }
        }
        match duplicate_of {
            Some((i, corr)) => removals.push(VariableRemoval {
                name: schema.names[j].clone(),
                reason: RemovalReason::HighCorrelation {
                    with: schema.names[i].clone(),
                    corr,
                    ceiling: corr_ceiling,
                },
            }),
            None => kept.push(j),
        }
    }
    if kept.is_empty() {
        return Err(Error::data("variable filtering removed every variable"));
    }
    let kept_names = kept.iter().map(|&j| schema.names[j].clone()).collect();
    let report = FilterReport {
        removals,
        notes: vec![
            "importance-based screening (requires habitat labels) not applied".to_string(),
        ],
    };
    Ok((kept_names, report))
}

fn train_correlation(
    samples: &[Sample],
    train_ids: &[usize],
    i: usize,
    j: usize,
    mean: &[f64],
    std: &[f64],
) -> f64 {
    let mut cov = 0.0;
    for &id in train_ids {
        let t = &samples[id].targets;
        cov += (t[i] - mean[i]) * (t[j] - mean[j]);
    }
    cov /= train_ids.len() as f64;
    cov / (std[i] * std[j])
}

/// Restrict every sample's targets (and the schema) to the kept variables,
/// preserving their original order.
pub fn apply_variable_filter(
    samples: &mut [Sample],
    schema: &mut VariableSchema,
    kept: &[String],
) -> Result<()> {
    let mut keep_idx = Vec::with_capacity(kept.len());
    for name in kept {
        let idx = schema
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::data(format!("unknown variable '{name}' in keep list")))?;
        keep_idx.push(idx);
    }
    for sample in samples.iter_mut() {
        sample.targets = keep_idx.iter().map(|&j| sample.targets[j]).collect();
    }
    schema.names = kept.to_vec();
    for members in schema.groups.values_mut() {
        members.retain(|name| kept.contains(name));
    }
    schema.groups.retain(|_, members| !members.is_empty());
    schema.train_mean.clear();
    schema.train_std.clear();
    Ok(())
}

/// Expand one sample into itself plus its k nearest neighbours, restricted
/// to the origin's split when a block split is given.
pub fn assemble_context(
    samples: &[Sample],
    origin: usize,
    index: &SpatialIndex,
    k: usize,
    split: Option<&BlockSplit>,
) -> Result<ContextSample> {
    let list = match split {
        Some(bs) => {
            let own = bs.split_of(origin).ok_or_else(|| {
                Error::data(format!("sample {origin} missing from split assignment"))
            })?;
            index.query_knn_filtered(origin, k, |id| bs.split_of(id) == Some(own))?
        }
        None => index.query_knn(origin, k)?,
    };
    let origin_loc = samples[origin].location;
    let neighbors: Vec<ContextNeighbor> = list
        .neighbors
        .iter()
        .map(|&(id, d)| {
            let loc = samples[id].location;
            ContextNeighbor {
                index: id,
                distance_m: d,
                offset: (loc.east - origin_loc.east, loc.north - origin_loc.north),
            }
        })
        .collect();
    let k_effective = neighbors.len();
    Ok(ContextSample {
        origin,
        neighbors,
        k_effective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{block_split, build_index};

    fn write_lines(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    fn line(id: &str, east: f64, north: f64, targets: &str) -> String {
        format!(
            r#"{{"id":"{id}","east_m":{east},"north_m":{north},"image_ref":"img:{id}","sentence_refs":["s:{id}:0"],"targets":{targets}}}"#
        )
    }

    #[test]
    fn empty_file_is_an_error() {
        let (_dir, path) = write_lines(&[]);
        let err = load_samples(&path).unwrap_err();
        assert!(err.to_string().contains("no samples"));
    }

    #[test]
    fn two_lines_parse_and_sort_by_id() {
        let l1 = line("b", 1.0, 2.0, "[0.5,1.5]");
        let l2 = line("a", 3.0, 4.0, "[2.5,3.5]");
        let (_dir, path) = write_lines(&[&l1, &l2]);
        let samples = load_samples(&path).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].id, "a");
        assert_eq!(samples[1].id, "b");
        assert_eq!(samples[0].targets, vec![2.5, 3.5]);
    }

    #[test]
    fn inconsistent_target_length_cites_line() {
        let l1 = line("a", 0.0, 0.0, "[1,2]");
        let l2 = line("b", 0.0, 1.0, "[1,2]");
        let l3 = line("c", 1.0, 0.0, "[1]");
        let (_dir, path) = write_lines(&[&l1, &l2, &l3]);
        let err = load_samples(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn malformed_line_cites_line() {
        let l1 = line("a", 0.0, 0.0, "[1]");
        let (_dir, path) = write_lines(&[&l1, "{not json"]);
        let err = load_samples(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let l1 = line("a", 0.0, 0.0, "[1]");
        let l2 = line("a", 1.0, 1.0, "[2]");
        let (_dir, path) = write_lines(&[&l1, &l2]);
        let err = load_samples(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn samples_round_trip_through_jsonl() {
        let l1 = line("a", 0.5, -2.0, "[1.25,3.5]");
        let l2 = line("b", 7.0, 9.0, "[0.0,-1.0]");
        let (dir, path) = write_lines(&[&l1, &l2]);
        let samples = load_samples(&path).unwrap();
        let out = dir.path().join("copy.jsonl");
        save_samples(&samples, &out).unwrap();
        assert_eq!(load_samples(&out).unwrap(), samples);
    }

    fn schema_of(names: &[&str]) -> VariableSchema {
        VariableSchema {
            names: names.iter().map(|s| s.to_string()).collect(),
            groups: BTreeMap::new(),
            train_mean: vec![],
            train_std: vec![],
        }
    }

    fn sample(id: &str, east: f64, north: f64, targets: Vec<f64>) -> Sample {
        Sample {
            id: id.to_string(),
            location: GeoPoint::new(east, north),
            image_ref: format!("img:{id}"),
            sentence_refs: vec![],
            targets,
        }
    }

    #[test]
    fn standardize_one_variable_hand_values() {
        let mut samples = vec![
            sample("a", 0.0, 0.0, vec![1.0]),
            sample("b", 1.0, 0.0, vec![2.0]),
            sample("c", 2.0, 0.0, vec![3.0]),
        ];
        let mut schema = schema_of(&["v"]);
        standardize_targets(&mut samples, &[0, 1, 2], &mut schema).unwrap();
        assert_eq!(schema.train_mean, vec![2.0]);
        assert!((schema.train_std[0] - 0.816496580927726).abs() < 1e-15);
        assert!((samples[0].targets[0] + 1.224744871391589).abs() < 1e-15);
        assert_eq!(samples[1].targets[0], 0.0);
        assert!((samples[2].targets[0] - 1.224744871391589).abs() < 1e-15);
        let sum: f64 = samples.iter().map(|s| s.targets[0]).sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn standardize_is_idempotent_up_to_float_error() {
        let mut samples = vec![
            sample("a", 0.0, 0.0, vec![10.0, -4.0]),
            sample("b", 1.0, 0.0, vec![30.0, 2.0]),
            sample("c", 2.0, 0.0, vec![50.0, 14.0]),
        ];
        let mut schema = schema_of(&["u", "v"]);
        standardize_targets(&mut samples, &[0, 1, 2], &mut schema).unwrap();
        let mut again = schema.clone();
        standardize_targets(&mut samples, &[0, 1, 2], &mut again).unwrap();
        for j in 0..2 {
            assert!(again.train_mean[j].abs() < 1e-12);
            assert!((again.train_std[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn value_at_train_mean_standardizes_to_zero() {
        let mut samples = vec![
            sample("a", 0.0, 0.0, vec![1.0]),
            sample("b", 1.0, 0.0, vec![3.0]),
            sample("t", 9.0, 9.0, vec![2.0]), // held-out sample at the train mean
        ];
        let mut schema = schema_of(&["v"]);
        standardize_targets(&mut samples, &[0, 1], &mut schema).unwrap();
        assert_eq!(samples[2].targets[0], 0.0);
    }

    #[test]
    fn destandardize_round_trips() {
        let originals = vec![vec![3.5, -120.0], vec![0.25, 44.0], vec![-9.0, 8.0]];
        let mut samples: Vec<Sample> = originals
            .iter()
            .enumerate()
            .map(|(i, t)| sample(&format!("s{i}"), i as f64, 0.0, t.clone()))
            .collect();
        let mut schema = schema_of(&["u", "v"]);
        standardize_targets(&mut samples, &[0, 1, 2], &mut schema).unwrap();
        for (s, orig) in samples.iter().zip(&originals) {
            let back = schema.destandardize(&s.targets);
            for (b, o) in back.iter().zip(orig) {
                assert!((b - o).abs() <= 1e-9 * o.abs().max(1.0), "{b} vs {o}");
            }
        }
    }

    #[test]
    fn constant_variable_fails_standardization_with_hint() {
        let mut samples = vec![
            sample("a", 0.0, 0.0, vec![5.0]),
            sample("b", 1.0, 0.0, vec![5.0]),
        ];
        let mut schema = schema_of(&["flat"]);
        let err = standardize_targets(&mut samples, &[0, 1], &mut schema).unwrap_err();
        assert!(err.to_string().contains("filtering"), "{err}");
    }

    #[test]
    fn filtering_removes_constant_and_duplicate_with_reasons() {
        // v0 informative, v1 constant, v2 = 2*v0 + 1 (duplicate), v3 independent.
        let mut samples = Vec::new();
        let values = [1.0, 2.0, 4.0, 8.0, 16.0];
        let other = [3.0, -1.0, 2.0, 0.0, 5.0];
        for i in 0..5 {
            samples.push(sample(
                &format!("s{i}"),
                i as f64,
                0.0,
                vec![values[i], 7.0, 2.0 * values[i] + 1.0, other[i]],
            ));
        }
        let schema = schema_of(&["v0", "flat", "v0_copy", "v3"]);
        let (kept, report) =
            filter_variables(&samples, &[0, 1, 2, 3, 4], &schema, 0.01, 0.98).unwrap();
        assert_eq!(kept, vec!["v0", "v3"]);
        assert_eq!(report.removals.len(), 2);
        assert_eq!(report.removals[0].name, "flat");
        assert!(matches!(report.removals[0].reason, RemovalReason::LowStd { .. }));
        assert_eq!(report.removals[1].name, "v0_copy");
        match &report.removals[1].reason {
            RemovalReason::HighCorrelation { with, corr, .. } => {
                assert_eq!(with, "v0");
                assert!((corr - 1.0).abs() < 1e-12);
            }
            other => panic!("wrong reason {other:?}"),
        }
        assert_eq!(report.notes.len(), 1);
    }

    #[test]
    fn independent_variables_survive_filtering() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "dataset-test", 0);
        let samples: Vec<Sample> = (0..1000)
            .map(|i| {
                sample(
                    &format!("s{i:04}"),
                    i as f64,
                    0.0,
                    vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        let ids: Vec<usize> = (0..1000).collect();
        let schema = schema_of(&["a", "b"]);
        let (kept, report) = filter_variables(&samples, &ids, &schema, 0.01, 0.98).unwrap();
        assert_eq!(kept, vec!["a", "b"]);
        assert!(report.removals.is_empty());
    }

    #[test]
    fn filtering_everything_is_an_error() {
        let samples = vec![sample("a", 0.0, 0.0, vec![1.0]), sample("b", 1.0, 0.0, vec![1.0])];
        let schema = schema_of(&["flat"]);
        assert!(filter_variables(&samples, &[0, 1], &schema, 0.01, 0.98).is_err());
    }

    #[test]
    fn apply_filter_projects_targets_and_groups() {
        let mut samples = vec![sample("a", 0.0, 0.0, vec![1.0, 2.0, 3.0])];
        let mut schema = schema_of(&["x", "y", "z"]);
        schema
            .groups
            .insert("g1".to_string(), vec!["x".to_string(), "y".to_string()]);
        schema.groups.insert("g2".to_string(), vec!["y".to_string()]);
        apply_variable_filter(&mut samples, &mut schema, &["x".to_string(), "z".to_string()])
            .unwrap();
        assert_eq!(samples[0].targets, vec![1.0, 3.0]);
        assert_eq!(schema.names, vec!["x", "z"]);
        assert_eq!(schema.groups.get("g1").unwrap(), &vec!["x".to_string()]);
        assert!(!schema.groups.contains_key("g2"));
    }

    #[test]
    fn context_with_k_zero_has_no_neighbors() {
        let samples = vec![sample("a", 0.0, 0.0, vec![1.0]), sample("b", 5.0, 0.0, vec![2.0])];
        let index = build_index(&[(0, samples[0].location), (1, samples[1].location)]).unwrap();
        let ctx = assemble_context(&samples, 0, &index, 0, None).unwrap();
        assert!(ctx.neighbors.is_empty());
        assert_eq!(ctx.k_effective, 0);
    }

    #[test]
    fn collinear_context_offsets() {
        let samples = vec![
            sample("a", 0.0, 0.0, vec![0.0]),
            sample("b", 10.0, 0.0, vec![0.0]),
            sample("c", 25.0, 0.0, vec![0.0]),
        ];
        let points: Vec<_> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.location))
            .collect();
        let index = build_index(&points).unwrap();
        let ctx = assemble_context(&samples, 0, &index, 3, None).unwrap();
        assert_eq!(ctx.k_effective, 2);
        assert_eq!(ctx.neighbors[0].offset, (10.0, 0.0));
        assert_eq!(ctx.neighbors[1].offset, (25.0, 0.0));
        assert_eq!(ctx.neighbors[0].distance_m, 10.0);
    }

    #[test]
    fn isolated_block_never_crosses_splits() {
        // Two tight clusters far apart: blocks isolate them.
        let mut samples = Vec::new();
        for i in 0..4 {
            samples.push(sample(&format!("l{i}"), i as f64, 0.0, vec![0.0]));
        }
        for i in 0..4 {
            samples.push(sample(&format!("r{i}"), 1000.0 + i as f64, 0.0, vec![0.0]));
        }
        let points: Vec<_> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.location))
            .collect();
        let index = build_index(&points).unwrap();
        // Find a seed where the two blocks land in different splits.
        let bs = (0..20)
            .map(|seed| block_split(&points, 100.0, (0.34, 0.33, 0.33), seed).unwrap())
            .find(|bs| bs.split_of(0) != bs.split_of(4))
            .expect("some seed separates the two blocks");
        let ctx = assemble_context(&samples, 0, &index, 10, Some(&bs)).unwrap();
        assert!(ctx.k_effective < 10);
        let own = bs.split_of(0);
        for n in &ctx.neighbors {
            assert_eq!(bs.split_of(n.index), own);
        }
    }
}
