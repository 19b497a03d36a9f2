//! End-to-end glue: data preparation (split, filter, standardize, sentence
//! selection, context assembly) and single training runs, shared by the CLI
//! and the integration suite so both exercise the same code path.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    apply_variable_filter, assemble_context, filter_variables, load_samples, load_variables,
    standardize_targets, ContextSample, FilterReport, Sample, VariableSchema,
};
use crate::encoders::{load_store, random_select, select_top_j, EmbeddingStore};
use crate::eval::{evaluate, EvalReport};
use crate::fusion::{
    build_tokens, FusionConfig, FusionModel, AttentionRecord, ModalityMode, PoolMode, Token,
};
use crate::geo::{block_split, build_index, BlockSplit, SpatialIndex, Split};
use crate::locenc::{LocEncConfig, LocEncKind, LocEncoder};
use crate::rng::derive_seed;
use crate::train::{train_loop, TrainConfig, TrainOutcome, TrainSample};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    /// The j sentences most cosine-similar to the co-located image.
    TopJ,
    /// Seeded uniform selection.
    Random,
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionPolicy::TopJ => "topj",
            SelectionPolicy::Random => "random",
        })
    }
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topj" => Ok(SelectionPolicy::TopJ),
            "random" => Ok(SelectionPolicy::Random),
            other => Err(Error::config(format!(
                "unknown selection policy '{other}' (expected topj or random)"
            ))),
        }
    }
}

/// Everything decided before model construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub k: usize,
    pub j: usize,
    pub selection: SelectionPolicy,
    pub block_size_m: f64,
    pub fractions: [f64; 3],
    pub std_floor: f64,
    pub corr_ceiling: f64,
    pub seed: u64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            k: 10,
            j: 4,
            selection: SelectionPolicy::TopJ,
            block_size_m: 20_000.0,
            fractions: [0.7, 0.15, 0.15],
            std_floor: 1e-6,
            corr_ceiling: 0.999,
            seed: 0,
        }
    }
}

/// Raw inputs as loaded from disk or produced by the generator.
#[derive(Debug)]
pub struct RawData {
    pub samples: Vec<Sample>,
    pub images: EmbeddingStore,
    pub sentences: EmbeddingStore,
    pub schema: VariableSchema,
}

/// Load the canonical file layout from a directory.
pub fn load_dir(dir: &Path) -> Result<RawData> {
    Ok(RawData {
        samples: load_samples(&dir.join("samples.jsonl"))?,
        images: load_store(&dir.join("images.gfeb"))?,
        sentences: load_store(&dir.join("sentences.gfeb"))?,
        schema: load_variables(&dir.join("variables.json"))?,
    })
}

/// Data after splitting, variable filtering, standardization, sentence
/// selection, and context assembly — ready for token building.
#[derive(Debug)]
pub struct PreparedData {
    pub samples: Vec<Sample>,
    pub schema: VariableSchema,
    pub filter_report: FilterReport,
    pub split: BlockSplit,
    pub index: SpatialIndex,
    /// Same-split context per dense sample index.
    pub contexts: Vec<ContextSample>,
    /// Selected sentence keys per dense sample index.
    pub selections: Vec<Vec<String>>,
    pub images: EmbeddingStore,
    pub sentences: EmbeddingStore,
    pub prep: PrepConfig,
}

pub fn prepare(raw: RawData, prep: PrepConfig) -> Result<PreparedData> {
    let RawData {
        mut samples,
        images,
        sentences,
        mut schema,
    } = raw;
    if samples.is_empty() {
        return Err(Error::data("no samples to prepare"));
    }
    if images.dim() != sentences.dim() {
        return Err(Error::data(format!(
            "image dim {} != sentence dim {}; both modalities must share one space",
            images.dim(),
            sentences.dim()
        )));
    }
    let points: Vec<(usize, crate::geo::GeoPoint)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.location))
        .collect();
    let split = block_split(&points, prep.block_size_m, prep.fractions.into(), prep.seed)?;
    let train_ids: Vec<usize> = (0..samples.len())
        .filter(|&i| split.split_of(i) == Some(Split::Train))
        .collect();
    if train_ids.is_empty() {
        return Err(Error::data("block split produced an empty training split"));
    }
    let (kept, filter_report) = filter_variables(
        &samples,
        &train_ids,
        &schema,
        prep.std_floor,
        prep.corr_ceiling,
    )?;
    apply_variable_filter(&mut samples, &mut schema, &kept)?;
    standardize_targets(&mut samples, &train_ids, &mut schema)?;

    let index = build_index(&points)?;
    let contexts: Vec<ContextSample> = (0..samples.len())
        .map(|i| assemble_context(&samples, i, &index, prep.k, Some(&split)))
        .collect::<Result<Vec<_>>>()?;

    let selections: Vec<Vec<String>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| -> Result<Vec<String>> {
            if prep.j == 0 {
                return Ok(Vec::new());
            }
            let pool: Vec<(String, Vec<f64>)> = s
                .sentence_refs
                .iter()
                .map(|key| {
                    sentences
                        .get(key)
                        .map(|e| (key.clone(), e.to_vec()))
                        .ok_or_else(|| Error::data(format!("missing sentence embedding '{key}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            let seed = derive_seed(prep.seed, "select", i as u64);
            match prep.selection {
                SelectionPolicy::TopJ => {
                    let image = images.get(&s.image_ref).ok_or_else(|| {
                        Error::data(format!("missing image embedding '{}'", s.image_ref))
                    })?;
                    select_top_j(image, &pool, prep.j, seed)
                }
                SelectionPolicy::Random => random_select(&pool, prep.j, seed),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PreparedData {
        samples,
        schema,
        filter_report,
        split,
        index,
        contexts,
        selections,
        images,
        sentences,
        prep,
    })
}

impl PreparedData {
    pub fn split_of(&self, idx: usize) -> Split {
        self.split.split_of(idx).expect("all samples are assigned")
    }

    pub fn ids_in(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.split_of(i) == split)
            .collect()
    }

    /// Token sequence for one origin under a modality mode.
    pub fn tokens_for(
        &self,
        idx: usize,
        locenc: &LocEncoder,
        mode: ModalityMode,
    ) -> Result<Vec<Token>> {
        let ctx = &self.contexts[idx];
        let mut keys = Vec::with_capacity(ctx.neighbors.len() + 1);
        keys.push(self.selections[ctx.origin].clone());
        for n in &ctx.neighbors {
            keys.push(self.selections[n.index].clone());
        }
        build_tokens(
            ctx,
            &self.samples,
            &self.images,
            &self.sentences,
            &keys,
            locenc,
            mode,
        )
    }

    /// Pre-assembled training samples for one split, in dense-index order.
    pub fn split_set(
        &self,
        split: Split,
        locenc: &LocEncoder,
        mode: ModalityMode,
    ) -> Result<Vec<TrainSample>> {
        self.ids_in(split)
            .into_iter()
            .map(|i| {
                Ok(TrainSample {
                    tokens: self.tokens_for(i, locenc, mode)?,
                    target: self.samples[i].targets.clone(),
                })
            })
            .collect()
    }

    /// Axis-aligned bounds of all sample locations (min_e, min_n, max_e, max_n).
    pub fn study_bounds(&self) -> (f64, f64, f64, f64) {
        let mut bounds = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for s in &self.samples {
            bounds.0 = bounds.0.min(s.location.east);
            bounds.1 = bounds.1.min(s.location.north);
            bounds.2 = bounds.2.max(s.location.east);
            bounds.3 = bounds.3.max(s.location.north);
        }
        bounds
    }
}

/// Architecture knobs that are not dictated by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub token_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub pool: PoolMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            token_dim: 64,
            num_layers: 2,
            num_heads: 8,
            ff_dim: 256,
            dropout: 0.0,
            pool: PoolMode::ClsToken,
        }
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// Test-split report from the best-validation model.
    pub report: EvalReport,
}

/// One full training run: build the model, train with best-val tracking,
/// evaluate the best model on the test split.
pub fn run_one(
    prepared: &PreparedData,
    spec: &ModelSpec,
    mut locenc: LocEncConfig,
    mode: ModalityMode,
    tcfg: &TrainConfig,
) -> Result<RunResult> {
    if locenc.kind == LocEncKind::Coordinates && locenc.study_bounds.is_none() {
        locenc.study_bounds = Some(prepared.study_bounds());
    }
    let cfg = FusionConfig {
        feature_dim: prepared.images.dim(),
        token_dim: spec.token_dim,
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        ff_dim: spec.ff_dim,
        dropout: spec.dropout,
        mask_prob: tcfg.mask_prob,
        output_dim: prepared.schema.names.len(),
        sentences_per_location: prepared.prep.j,
        neighbor_count: prepared.prep.k,
        pool: spec.pool,
    };
    let model = FusionModel::new(cfg, locenc.clone(), tcfg.seed)?;
    let encoder = LocEncoder::new(locenc)?;
    let train = prepared.split_set(Split::Train, &encoder, mode)?;
    let val = prepared.split_set(Split::Val, &encoder, mode)?;
    let outcome = train_loop(model, &train, &val, tcfg)?;
    let report = evaluate_on_split(&outcome.best_model, prepared, mode, Split::Test)?;
    Ok(RunResult { outcome, report })
}

/// Evaluate a model on one split with eval semantics (full sequences).
pub fn evaluate_on_split(
    model: &FusionModel,
    prepared: &PreparedData,
    mode: ModalityMode,
    split: Split,
) -> Result<EvalReport> {
    let encoder = LocEncoder::new(model.locenc.clone())?;
    let set = prepared.split_set(split, &encoder, mode)?;
    if set.len() < 2 {
        return Err(Error::data(format!(
            "split {split} has {} samples; need at least 2 to evaluate",
            set.len()
        )));
    }
    let m = model.cfg.output_dim;
    use rayon::prelude::*;
    let preds_rows: Vec<Vec<f64>> = set
        .par_iter()
        .map(|s| model.predict(&s.tokens, false).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    let mut preds = crate::tensor::Tensor::zeros(set.len(), m);
    let mut targets = crate::tensor::Tensor::zeros(set.len(), m);
    for (i, (p, s)) in preds_rows.iter().zip(&set).enumerate() {
        preds.row_mut(i).copy_from_slice(p);
        targets.row_mut(i).copy_from_slice(&s.target);
    }
    evaluate(&preds, &targets, &prepared.schema)
}

/// Attention records for every sample of a split, in dense-index order.
pub fn attention_for_split(
    model: &FusionModel,
    prepared: &PreparedData,
    mode: ModalityMode,
    split: Split,
) -> Result<Vec<AttentionRecord>> {
    let encoder = LocEncoder::new(model.locenc.clone())?;
    use rayon::prelude::*;
    prepared
        .ids_in(split)
        .into_par_iter()
        .map(|i| {
            let tokens = prepared.tokens_for(i, &encoder, mode)?;
            let (_, record) = model.predict(&tokens, true)?;
            Ok(record.expect("capture requested"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_in_memory, SynthConfig};
    use std::collections::BTreeMap;

    fn synth_raw(seed: u64) -> RawData {
        let mut groups = BTreeMap::new();
        groups.insert("field".to_string(), 300.0);
        let cfg = SynthConfig {
            n_samples: 160,
            area_m: 2400.0,
            m_targets: 4,
            group_lengthscales_m: groups,
            d: 8,
            n_fourier: 48,
            image_noise_sigma: 0.15,
            text_noise_sigma: 0.15,
            sentences_per_sample: (3, 4),
            signal_sentence_fraction: 0.5,
            text_pool_radius_m: 150.0,
            seed,
        };
        let data = gen_in_memory(&cfg).unwrap();
        RawData {
            samples: data.samples,
            images: data.images,
            sentences: data.sentences,
            schema: data.schema,
        }
    }

    fn small_prep(seed: u64) -> PrepConfig {
        PrepConfig {
            k: 3,
            j: 2,
            block_size_m: 600.0,
            seed,
            ..PrepConfig::default()
        }
    }

    #[test]
    fn prepare_splits_filters_and_standardizes() {
        let prepared = prepare(synth_raw(1), small_prep(5)).unwrap();
        assert_eq!(prepared.schema.names.len(), 4);
        assert_eq!(prepared.schema.train_mean.len(), 4);
        // Train-split targets are standardized to mean 0, variance 1.
        let train_ids = prepared.ids_in(Split::Train);
        for c in 0..4 {
            let vals: Vec<f64> = train_ids
                .iter()
                .map(|&i| prepared.samples[i].targets[c])
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "column {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "column {c} var {var}");
        }
    }

    #[test]
    fn contexts_never_cross_splits() {
        let prepared = prepare(synth_raw(2), small_prep(6)).unwrap();
        let mut checked = 0usize;
        for (i, ctx) in prepared.contexts.iter().enumerate() {
            let origin_split = prepared.split_of(i);
            for n in &ctx.neighbors {
                assert_eq!(prepared.split_of(n.index), origin_split);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn selections_have_j_keys_from_own_sample() {
        let prepared = prepare(synth_raw(3), small_prep(7)).unwrap();
        for (i, sel) in prepared.selections.iter().enumerate() {
            assert_eq!(sel.len(), 2);
            for key in sel {
                assert!(prepared.samples[i].sentence_refs.contains(key));
            }
        }
    }

    #[test]
    fn topj_and_random_selection_differ_somewhere() {
        let raw_a = synth_raw(4);
        let raw_b = synth_raw(4);
        let top = prepare(raw_a, small_prep(8)).unwrap();
        let rand_prep = PrepConfig {
            selection: SelectionPolicy::Random,
            ..small_prep(8)
        };
        let rnd = prepare(raw_b, rand_prep).unwrap();
        assert!(top.selections != rnd.selections);
    }

    #[test]
    fn token_counts_follow_context_size() {
        let prepared = prepare(synth_raw(5), small_prep(9)).unwrap();
        let enc = LocEncoder::new(LocEncConfig::new(LocEncKind::Rank).with_loc_dim(8)).unwrap();
        for i in 0..prepared.samples.len() {
            let k_eff = prepared.contexts[i].k_effective;
            let both = prepared.tokens_for(i, &enc, ModalityMode::TextAndImages).unwrap();
            assert_eq!(both.len(), (k_eff + 1) * 3); // 1 visual + 2 text per location
            let img = prepared.tokens_for(i, &enc, ModalityMode::ImagesOnly).unwrap();
            assert_eq!(img.len(), k_eff + 1);
        }
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            token_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 32,
            dropout: 0.0,
            pool: PoolMode::ClsToken,
        }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn run_one_produces_report_and_is_deterministic() {
        let loc = LocEncConfig::new(LocEncKind::Distance).with_loc_dim(8);
        let run = || {
            let prepared = prepare(synth_raw(6), small_prep(10)).unwrap();
            run_one(
                &prepared,
                &tiny_spec(),
                loc.clone(),
                ModalityMode::TextAndImages,
                &tiny_train(11),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a.outcome.metrics.len(), 2);
        assert_eq!(a.report.scores.len(), 4);
        assert!(a.report.n_test >= 2);
        let b = run();
        assert_eq!(a.outcome.metrics, b.outcome.metrics);
        assert_eq!(
            a.report.mean_r2.to_bits(),
            b.report.mean_r2.to_bits(),
            "test evaluation must be bit-deterministic"
        );
    }

    #[test]
    fn coordinates_bounds_are_filled_from_data() {
        let prepared = prepare(synth_raw(7), small_prep(12)).unwrap();
        let loc = LocEncConfig::new(LocEncKind::Coordinates).with_loc_dim(8);
        assert!(loc.study_bounds.is_none());
        let result = run_one(
            &prepared,
            &tiny_spec(),
            loc,
            ModalityMode::ImagesOnly,
            &tiny_train(13),
        )
        .unwrap();
        let bounds = result.outcome.model.locenc.study_bounds.unwrap();
        let expect = prepared.study_bounds();
        assert_eq!(bounds, expect);
    }

    #[test]
    fn attention_records_cover_split() {
        let prepared = prepare(synth_raw(8), small_prep(14)).unwrap();
        let loc = LocEncConfig::new(LocEncKind::Polar).with_loc_dim(8);
        let result = run_one(
            &prepared,
            &tiny_spec(),
            loc,
            ModalityMode::TextAndImages,
            &tiny_train(15),
        )
        .unwrap();
        let records = attention_for_split(
            &result.outcome.best_model,
            &prepared,
            ModalityMode::TextAndImages,
            Split::Test,
        )
        .unwrap();
        assert_eq!(records.len(), prepared.ids_in(Split::Test).len());
        for r in &records {
            assert_eq!(r.heads.len(), 1);
            assert_eq!(r.heads[0].len(), 2);
        }
    }
}
