//! Seeded synthetic dataset generator with controllable spatial structure.
//!
//! Target variables are draws from smooth random fields built from random
//! Fourier features, giving each thematic group its own autocorrelation
//! length scale. Image embeddings are a fixed projection of the local field
//! vector plus noise; "signal" sentences share that construction but pool
//! the fields over a disk (text describes areas, not pixels), and
//! distractor sentences are pure noise. The generation is deterministic
//! per sample, so outputs are byte-identical across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_samples, save_variables, Sample, VariableSchema};
use crate::encoders::{save_store, EmbeddingStore};
use crate::geo::GeoPoint;
use crate::rng::{derive_seed, stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Side of the square study area, metres.
    pub area_m: f64,
    pub m_targets: usize,
    /// Thematic group name → field length scale in metres.
    pub group_lengthscales_m: BTreeMap<String, f64>,
    /// Embedding dimension shared by both stores.
    pub d: usize,
    pub n_fourier: usize,
    pub image_noise_sigma: f64,
    pub text_noise_sigma: f64,
    /// Inclusive (min, max) sentence count per sample.
    pub sentences_per_sample: (usize, usize),
    /// Fraction of each sample's sentences that carry signal (rounded).
    pub signal_sentence_fraction: f64,
    /// Disk radius over which signal sentences pool the fields.
    pub text_pool_radius_m: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.m_targets == 0 || self.d == 0 {
            return Err(Error::config("counts and dimensions must be positive"));
        }
        if self.n_fourier < 1 {
            return Err(Error::config("n_fourier must be at least 1"));
        }
        if !(self.area_m > 0.0) {
            return Err(Error::config("area_m must be positive"));
        }
        if self.group_lengthscales_m.is_empty() {
            return Err(Error::config("need at least one thematic group"));
        }
        for (g, l) in &self.group_lengthscales_m {
            if !(l > &0.0) {
                return Err(Error::config(format!("group '{g}' length scale must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.signal_sentence_fraction) {
            return Err(Error::config("signal_sentence_fraction must be in [0, 1]"));
        }
        if self.sentences_per_sample.0 > self.sentences_per_sample.1 {
            return Err(Error::config("sentences_per_sample range is inverted"));
        }
        if self.image_noise_sigma < 0.0
            || self.text_noise_sigma < 0.0
            || self.text_pool_radius_m < 0.0
        {
            return Err(Error::config("sigmas and radii must be non-negative"));
        }
        Ok(())
    }
}

/// A stationary random field from random Fourier features:
/// f(x) = sqrt(2/F) Σ a_f cos(ω_f · x + φ_f), with ω drawn isotropic
/// Gaussian at scale 1/ℓ. Unit variance by construction; correlation
/// between points decays like exp(−d²/2ℓ²).
#[derive(Clone, Debug)]
pub struct RffField {
    amps: Vec<f64>,
    omegas: Vec<(f64, f64)>,
    phases: Vec<f64>,
    norm: f64,
}

pub fn gen_field(seed: u64, lengthscale_m: f64, n_fourier: usize) -> Result<RffField> {
    if !(lengthscale_m > 0.0) {
        return Err(Error::config("length scale must be positive"));
    }
    if n_fourier < 1 {
        return Err(Error::config("n_fourier must be at least 1"));
    }
    let mut rng = stream(seed, "field", 0);
    let mut amps = Vec::with_capacity(n_fourier);
    let mut omegas = Vec::with_capacity(n_fourier);
    let mut phases = Vec::with_capacity(n_fourier);
    for _ in 0..n_fourier {
        let a: f64 = StandardNormal.sample(&mut rng);
        let w1: f64 = StandardNormal.sample(&mut rng);
        let w2: f64 = StandardNormal.sample(&mut rng);
        amps.push(a);
        omegas.push((w1 / lengthscale_m, w2 / lengthscale_m));
        phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
    }
    Ok(RffField {
        amps,
        omegas,
        phases,
        norm: (2.0 / n_fourier as f64).sqrt(),
    })
}

impl RffField {
    pub fn eval(&self, p: GeoPoint) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.amps.len() {
            let (w1, w2) = self.omegas[i];
            sum += self.amps[i] * (w1 * p.east + w2 * p.north + self.phases[i]).cos();
        }
        self.norm * sum
    }
}

/// Everything the generator produces, in memory.
#[derive(Debug)]
pub struct SynthData {
    pub samples: Vec<Sample>,
    pub images: EmbeddingStore,
    pub sentences: EmbeddingStore,
    pub schema: VariableSchema,
    /// Sentence keys that carry signal (the rest are distractors).
    pub signal_keys: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub signal_keys: Vec<String>,
}

/// File paths written by [`gen_dataset`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub samples: PathBuf,
    pub images: PathBuf,
    pub sentences: PathBuf,
    pub variables: PathBuf,
    pub manifest: PathBuf,
}

/// The fixed d×m projection shared by images and signal sentences.
fn projection(seed: u64, d: usize, m: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "projection", 0);
    (0..d)
        .map(|_| (0..m).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn project_normalize(a: &[Vec<f64>], fields: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = a
        .iter()
        .map(|row| row.iter().zip(fields).map(|(w, f)| w * f).sum())
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn unit_noise(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Average field values over a disk: centre plus 8-point rings at half and
/// full radius. Radius 0 degenerates to the centre alone.
fn pooled_fields(fields: &[RffField], center: GeoPoint, radius_m: f64) -> Vec<f64> {
    let mut points = vec![center];
    if radius_m > 0.0 {
        for r in [radius_m / 2.0, radius_m] {
            for a in 0..8 {
                let theta = std::f64::consts::TAU * a as f64 / 8.0;
                points.push(GeoPoint::new(
                    center.east + r * theta.cos(),
                    center.north + r * theta.sin(),
                ));
            }
        }
    }
    fields
        .iter()
        .map(|f| points.iter().map(|&p| f.eval(p)).sum::<f64>() / points.len() as f64)
        .collect()
}

/// Generate the dataset in memory. Deterministic per (config, seed): each
/// sample draws from its own substream, so parallelism cannot reorder
/// randomness.
pub fn gen_in_memory(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let groups: Vec<(&String, &f64)> = cfg.group_lengthscales_m.iter().collect();

    // One field per target variable, cycling through the groups.
    let mut names = Vec::with_capacity(cfg.m_targets);
    let mut schema_groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut fields = Vec::with_capacity(cfg.m_targets);
    for v in 0..cfg.m_targets {
        let (group, lengthscale) = groups[v % groups.len()];
        let name = format!("{group}_v{v:03}");
        schema_groups.entry(group.clone()).or_default().push(name.clone());
        names.push(name);
        fields.push(gen_field(
            derive_seed(cfg.seed, "variable-field", v as u64),
            *lengthscale,
            cfg.n_fourier,
        )?);
    }
    let mut schema = VariableSchema::new(names);
    schema.groups = schema_groups;

    let a = projection(cfg.seed, cfg.d, cfg.m_targets);

    struct Generated {
        sample: Sample,
        image: Vec<f64>,
        sentences: Vec<(String, Vec<f64>, bool)>,
    }

    let generated: Vec<Generated> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, "sample", i as u64);
            let id = format!("s{i:06}");
            let location = GeoPoint::new(
                rng.gen_range(0.0..cfg.area_m),
                rng.gen_range(0.0..cfg.area_m),
            );
            let local: Vec<f64> = fields.iter().map(|f| f.eval(location)).collect();

            let mut image = project_normalize(&a, &local);
            for x in &mut image {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += cfg.image_noise_sigma * n;
            }

            let (lo, hi) = cfg.sentences_per_sample;
            let count = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
            let n_signal = ((count as f64) * cfg.signal_sentence_fraction).round() as usize;
            let pooled = if n_signal > 0 {
                project_normalize(&a, &pooled_fields(&fields, location, cfg.text_pool_radius_m))
            } else {
                Vec::new()
            };
            let mut sentences = Vec::with_capacity(count);
            for s in 0..count {
                let key = format!("{id}:s{s}");
                if s < n_signal {
                    let mut emb = pooled.clone();
                    for x in &mut emb {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        *x += cfg.text_noise_sigma * n;
                    }
                    sentences.push((key, emb, true));
                } else {
                    sentences.push((key, unit_noise(&mut rng, cfg.d), false));
                }
            }

            Generated {
                sample: Sample {
                    id: id.clone(),
                    location,
                    image_ref: format!("{id}:img"),
                    sentence_refs: sentences.iter().map(|(k, _, _)| k.clone()).collect(),
                    targets: local,
                },
                image,
                sentences,
            }
        })
        .collect();

    let mut images = EmbeddingStore::new(cfg.d)?;
    let mut sentences = EmbeddingStore::new(cfg.d)?;
    let mut signal_keys = Vec::new();
    let mut samples = Vec::with_capacity(generated.len());
    for g in generated {
        images.insert(&g.sample.image_ref, &g.image)?;
        for (key, emb, is_signal) in &g.sentences {
            sentences.insert(key, emb)?;
            if *is_signal {
                signal_keys.push(key.clone());
            }
        }
        samples.push(g.sample);
    }
    signal_keys.sort_unstable();
    Ok(SynthData {
        samples,
        images,
        sentences,
        schema,
        signal_keys,
    })
}

/// Generate and write the full artifact set into a directory.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthPaths> {
    let data = gen_in_memory(cfg)?;
    fs::create_dir_all(out_dir)?;
    let paths = SynthPaths {
        samples: out_dir.join("samples.jsonl"),
        images: out_dir.join("images.gfeb"),
        sentences: out_dir.join("sentences.gfeb"),
        variables: out_dir.join("variables.json"),
        manifest: out_dir.join("generator.json"),
    };
    save_samples(&data.samples, &paths.samples)?;
    save_store(&data.images, &paths.images)?;
    save_store(&data.sentences, &paths.sentences)?;
    save_variables(&data.schema, &paths.variables)?;
    let manifest = SynthManifest {
        config: cfg.clone(),
        signal_keys: data.signal_keys.clone(),
    };
    fs::write(&paths.manifest, serde_json::to_string_pretty(&manifest)?)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::cosine_similarity;

    fn small_cfg() -> SynthConfig {
        let mut groups = BTreeMap::new();
        groups.insert("alpine".to_string(), 400.0);
        groups.insert("wetland".to_string(), 900.0);
        SynthConfig {
            n_samples: 60,
            area_m: 4000.0,
            m_targets: 6,
            group_lengthscales_m: groups,
            d: 16,
            n_fourier: 64,
            image_noise_sigma: 0.1,
            text_noise_sigma: 0.1,
            sentences_per_sample: (3, 5),
            signal_sentence_fraction: 0.5,
            text_pool_radius_m: 200.0,
            seed: 31,
        }
    }

    #[test]
    fn field_is_deterministic() {
        let f1 = gen_field(5, 300.0, 64).unwrap();
        let f2 = gen_field(5, 300.0, 64).unwrap();
        for i in 0..20 {
            let p = GeoPoint::new(17.0 * i as f64, 9.0 * i as f64);
            assert_eq!(f1.eval(p).to_bits(), f2.eval(p).to_bits());
        }
        let f3 = gen_field(6, 300.0, 64).unwrap();
        assert_ne!(f1.eval(GeoPoint::new(0.0, 0.0)), f3.eval(GeoPoint::new(0.0, 0.0)));
    }

    #[test]
    fn field_variance_is_near_unity() {
        let field = gen_field(11, 250.0, 256).unwrap();
        let mut rng = stream(12, "variance-points", 0);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = field.eval(GeoPoint::new(
                rng.gen_range(0.0..50_000.0),
                rng.gen_range(0.0..50_000.0),
            ));
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn field_correlation_decays_with_distance() {
        let l = 300.0;
        let n = 4000;
        let mut rng = stream(13, "corr-points", 0);
        let mut corr_at = |dist: f64, field_seed_base: u64| -> f64 {
            let mut num = 0.0;
            let mut den_a = 0.0;
            let mut den_b = 0.0;
            for i in 0..n {
                // Average over independent fields to tighten the estimate.
                let field = gen_field(field_seed_base + (i % 16) as u64, l, 128).unwrap();
                let p = GeoPoint::new(rng.gen_range(0.0..10_000.0), rng.gen_range(0.0..10_000.0));
                let q = GeoPoint::new(p.east + dist, p.north);
                let (a, b) = (field.eval(p), field.eval(q));
                num += a * b;
                den_a += a * a;
                den_b += b * b;
            }
            num / (den_a.sqrt() * den_b.sqrt())
        };
        let near = corr_at(0.3 * l, 100);
        let far = corr_at(3.0 * l, 100);
        assert!(near > far + 0.2, "near {near}, far {far}");
        assert!(near > 0.7, "near-correlation {near}");
        assert!(far < 0.3, "far-correlation {far}");
    }

    #[test]
    fn generation_is_byte_identical() {
        let cfg = small_cfg();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let p1 = gen_dataset(&cfg, dir1.path()).unwrap();
        let p2 = gen_dataset(&cfg, dir2.path()).unwrap();
        for (a, b) in [
            (&p1.samples, &p2.samples),
            (&p1.images, &p2.images),
            (&p1.sentences, &p2.sentences),
            (&p1.variables, &p2.variables),
            (&p1.manifest, &p2.manifest),
        ] {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }

    #[test]
    fn noiseless_signal_sentence_matches_image_direction() {
        let mut cfg = small_cfg();
        cfg.image_noise_sigma = 0.0;
        cfg.text_noise_sigma = 0.0;
        cfg.text_pool_radius_m = 0.0;
        cfg.sentences_per_sample = (2, 2);
        cfg.signal_sentence_fraction = 0.5; // exactly one signal sentence
        let data = gen_in_memory(&cfg).unwrap();
        for sample in data.samples.iter().take(10) {
            let img = data.images.get(&sample.image_ref).unwrap();
            let signal = data.sentences.get(&sample.sentence_refs[0]).unwrap();
            let cos = cosine_similarity(img, signal).unwrap();
            assert!((cos - 1.0).abs() < 1e-9, "cosine {cos}");
        }
    }

    #[test]
    fn distractors_are_uncorrelated_with_images() {
        let mut cfg = small_cfg();
        cfg.n_samples = 120;
        cfg.d = 32;
        cfg.sentences_per_sample = (2, 2);
        cfg.signal_sentence_fraction = 0.0; // all distractors
        let data = gen_in_memory(&cfg).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for sample in &data.samples {
            let img = data.images.get(&sample.image_ref).unwrap();
            for key in &sample.sentence_refs {
                sum += cosine_similarity(img, data.sentences.get(key).unwrap()).unwrap();
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!(mean.abs() < 0.06, "mean distractor cosine {mean}");
    }

    #[test]
    fn signal_sentences_separate_from_distractors() {
        let mut cfg = small_cfg();
        cfg.n_samples = 100;
        cfg.sentences_per_sample = (4, 4);
        cfg.signal_sentence_fraction = 0.5;
        let data = gen_in_memory(&cfg).unwrap();
        let signal: std::collections::HashSet<&str> =
            data.signal_keys.iter().map(|s| s.as_str()).collect();
        let (mut sig_sum, mut sig_n) = (0.0, 0usize);
        let (mut dis_sum, mut dis_n) = (0.0, 0usize);
        for sample in &data.samples {
            let img = data.images.get(&sample.image_ref).unwrap();
            for key in &sample.sentence_refs {
                let cos = cosine_similarity(img, data.sentences.get(key).unwrap()).unwrap();
                if signal.contains(key.as_str()) {
                    sig_sum += cos;
                    sig_n += 1;
                } else {
                    dis_sum += cos;
                    dis_n += 1;
                }
            }
        }
        let sig_mean = sig_sum / sig_n as f64;
        let dis_mean = dis_sum / dis_n as f64;
        assert!(
            sig_mean > dis_mean + 0.3,
            "signal {sig_mean} vs distractor {dis_mean}"
        );
        assert_eq!(sig_n + dis_n, 400);
        assert_eq!(sig_n, 200);
    }

    #[test]
    fn image_similarity_decays_spatially() {
        let mut cfg = small_cfg();
        cfg.n_samples = 250;
        cfg.area_m = 3000.0;
        let mut single = BTreeMap::new();
        single.insert("only".to_string(), 350.0);
        cfg.group_lengthscales_m = single;
        cfg.image_noise_sigma = 0.05;
        let data = gen_in_memory(&cfg).unwrap();
        let keyed: Vec<(String, GeoPoint)> = data
            .samples
            .iter()
            .map(|s| (s.image_ref.clone(), s.location))
            .collect();
        let rows = crate::eval::similarity_vs_distance(
            &data.images,
            &keyed,
            "visual",
            150.0,
            3000.0,
            None,
            0,
        )
        .unwrap();
        let near = rows.iter().find(|r| r.bin_start_m == 0.0).unwrap().mean;
        let far = rows
            .iter()
            .filter(|r| r.bin_start_m >= 3.0 * 350.0)
            .map(|r| r.mean)
            .sum::<f64>()
            / rows.iter().filter(|r| r.bin_start_m >= 3.0 * 350.0).count() as f64;
        assert!(near > far + 0.2, "near {near}, far {far}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg();
        cfg.sentences_per_sample = (5, 3);
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.group_lengthscales_m.insert("bad".to_string(), 0.0);
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.signal_sentence_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }
}
