//! Attention-based fusion of visual and textual context tokens.
//!
//! A context sample becomes a token sequence — one visual token per location
//! plus j text tokens per location, each fused with its location encoding —
//! which a small transformer encoder reads behind a trainable CLS token.
//! The CLS output, layer-normalised and linearly projected, is the
//! prediction for all target variables at the origin.
//!
//! Training-time token masking REMOVES tokens from the sequence (it does not
//! zero them): the point is robustness to missing neighbours, which removal
//! models exactly. The forward pass runs on a [`Tape`] so the same code path
//! serves inference and gradient computation.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ContextSample, Sample};
use crate::encoders::EmbeddingStore;
use crate::locenc::{init_learnable_table, LocEncConfig, LocEncKind, LocEncoder, TokenGeom};
use crate::rng::stream;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        })
    }
}

/// Which token families a run feeds the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityMode {
    /// All visual and all text tokens.
    TextAndImages,
    /// Visual tokens only.
    ImagesOnly,
    /// Text tokens only.
    TextOnly,
    /// All text tokens but only the origin's visual token.
    TextPlusOneImage,
}

impl ModalityMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModalityMode::TextAndImages => "text+images",
            ModalityMode::ImagesOnly => "images",
            ModalityMode::TextOnly => "text",
            ModalityMode::TextPlusOneImage => "text+1image",
        }
    }

    pub fn uses_text(&self) -> bool {
        !matches!(self, ModalityMode::ImagesOnly)
    }

    pub fn uses_images(&self) -> bool {
        !matches!(self, ModalityMode::TextOnly)
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text+images" => Ok(ModalityMode::TextAndImages),
            "images" => Ok(ModalityMode::ImagesOnly),
            "text" => Ok(ModalityMode::TextOnly),
            "text+1image" => Ok(ModalityMode::TextPlusOneImage),
            other => Err(Error::config(format!("unknown modality mode '{other}'"))),
        }
    }
}

/// How the encoder output is pooled before projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Take the CLS row (the default).
    ClsToken,
    /// Mean over all rows, CLS included (alternative pooling reading).
    MeanTokens,
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(PoolMode::ClsToken),
            "mean" => Ok(PoolMode::MeanTokens),
            other => Err(Error::config(format!("unknown pool mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Input embedding dimension d (shared by both modalities).
    pub feature_dim: usize,
    /// Model width h; tokens are fused into this dimension.
    pub token_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Residual-path dropout probability (0 disables).
    pub dropout: f64,
    /// Training-time token removal probability.
    pub mask_prob: f64,
    /// Output variable count m.
    pub output_dim: usize,
    /// Sentences per location j.
    pub sentences_per_location: usize,
    /// Neighbour count k.
    pub neighbor_count: usize,
    pub pool: PoolMode,
}

impl FusionConfig {
    pub fn new(feature_dim: usize, token_dim: usize, output_dim: usize) -> Self {
        FusionConfig {
            feature_dim,
            token_dim,
            num_layers: 2,
            num_heads: 8,
            ff_dim: 4 * token_dim,
            dropout: 0.0,
            mask_prob: 0.3,
            output_dim,
            sentences_per_location: 4,
            neighbor_count: 10,
            pool: PoolMode::ClsToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.token_dim == 0
            || self.ff_dim == 0
            || self.output_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
        {
            return Err(Error::config("fusion dimensions must be positive"));
        }
        if self.token_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "token_dim {} not divisible by num_heads {}",
                self.token_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One pre-fusion context token: a frozen feature vector plus the location
/// encoding that will be fused with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub feature: Vec<f64>,
    /// Present exactly for encoding kinds that produce a vector.
    pub loc: Option<Vec<f64>>,
    pub modality: Modality,
    /// 0 = origin location, 1 = nearest neighbour, ...
    pub neighbor_rank: usize,
    pub distance_m: f64,
}

/// Assemble the token sequence for one context sample: visual tokens for
/// ranks 0..=k, then j text tokens per rank, as the modality mode allows.
/// `sentence_keys` holds the selected sentence keys per location (origin
/// first, then neighbours in rank order) and is ignored by `ImagesOnly`.
pub fn build_tokens(
    ctx: &ContextSample,
    samples: &[Sample],
    images: &EmbeddingStore,
    sentences: &EmbeddingStore,
    sentence_keys: &[Vec<String>],
    locenc: &LocEncoder,
    mode: ModalityMode,
) -> Result<Vec<Token>> {
    let origin = &samples[ctx.origin];
    // Per-location geometry, origin first.
    let mut geoms = Vec::with_capacity(ctx.neighbors.len() + 1);
    geoms.push(TokenGeom {
        rank: 0,
        location: origin.location,
        distance_m: 0.0,
        offset: (0.0, 0.0),
    });
    for (i, n) in ctx.neighbors.iter().enumerate() {
        geoms.push(TokenGeom {
            rank: i + 1,
            location: samples[n.index].location,
            distance_m: n.distance_m,
            offset: n.offset,
        });
    }
    if mode.uses_text() && sentence_keys.len() != geoms.len() {
        return Err(Error::data(format!(
            "expected sentence selections for {} locations, got {}",
            geoms.len(),
            sentence_keys.len()
        )));
    }

    let mut tokens = Vec::new();
    if mode.uses_images() {
        let last_visual_rank = match mode {
            ModalityMode::TextPlusOneImage => 0,
            _ => geoms.len() - 1,
        };
        for geom in geoms.iter().take(last_visual_rank + 1) {
            let sample = location_sample(ctx, samples, geom.rank);
            let feature = images
                .get(&sample.image_ref)
                .ok_or_else(|| {
                    Error::data(format!("missing image embedding '{}'", sample.image_ref))
                })?
                .to_vec();
            tokens.push(Token {
                feature,
                loc: locenc.encode(geom),
                modality: Modality::Visual,
                neighbor_rank: geom.rank,
                distance_m: geom.distance_m,
            });
        }
    }
    if mode.uses_text() {
        for geom in &geoms {
            for key in &sentence_keys[geom.rank] {
                let feature = sentences
                    .get(key)
                    .ok_or_else(|| Error::data(format!("missing sentence embedding '{key}'")))?
                    .to_vec();
                tokens.push(Token {
                    feature,
                    loc: locenc.encode(geom),
                    modality: Modality::Text,
                    neighbor_rank: geom.rank,
                    distance_m: geom.distance_m,
                });
            }
        }
    }
    Ok(tokens)
}

fn location_sample<'a>(ctx: &ContextSample, samples: &'a [Sample], rank: usize) -> &'a Sample {
    if rank == 0 {
        &samples[ctx.origin]
    } else {
        &samples[ctx.neighbors[rank - 1].index]
    }
}

/// Training-time token removal: each token independently dropped with
/// probability `mask_prob`. If everything would drop, the rank-0 token of
/// the highest-priority present modality (visual first) is retained. The
/// CLS token is added later in the forward pass and so is never masked.
/// Eval mode (`training == false`) is the identity.
pub fn mask_tokens(
    tokens: &[Token],
    mask_prob: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Vec<Token> {
    if !training || mask_prob == 0.0 {
        return tokens.to_vec();
    }
    let kept: Vec<Token> = tokens
        .iter()
        .filter(|_| rng.gen::<f64>() >= mask_prob)
        .cloned()
        .collect();
    if !kept.is_empty() {
        return kept;
    }
    let survivor = tokens
        .iter()
        .find(|t| t.modality == Modality::Visual && t.neighbor_rank == 0)
        .or_else(|| {
            tokens
                .iter()
                .find(|t| t.modality == Modality::Text && t.neighbor_rank == 0)
        })
        .or_else(|| tokens.first())
        .expect("mask_tokens on empty sequence");
    vec![survivor.clone()]
}

/// Named parameter tensors with a stable iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// The trainable fusion model: fusion map(s), CLS token, transformer
/// encoder, final layer norm, and output projection.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub locenc: LocEncConfig,
    pub params: ParamSet,
}

/// Every parameter's shape, in the canonical order used by initialization,
/// checkpoints, and the optimizer.
pub fn param_shapes(cfg: &FusionConfig, loc: &LocEncConfig) -> Vec<(String, usize, usize)> {
    let (d, h) = (cfg.feature_dim, cfg.token_dim);
    let mut shapes = Vec::new();
    shapes.push(("cls".to_string(), 1, h));
    let scopes: Vec<String> = if loc.shared_fusion {
        vec!["fuse".to_string()]
    } else {
        vec!["fuse.visual".to_string(), "fuse.text".to_string()]
    };
    for scope in &scopes {
        match loc.kind {
            LocEncKind::None => {
                if d != h {
                    shapes.push((format!("{scope}.w"), d, h));
                    shapes.push((format!("{scope}.b"), 1, h));
                }
            }
            LocEncKind::Learnable => {
                shapes.push((format!("{scope}.table"), cfg.neighbor_count + 1, d));
            }
            LocEncKind::Rank | LocEncKind::Coordinates | LocEncKind::Distance => {
                shapes.push((format!("{scope}.w"), d + loc.loc_dim, h));
                shapes.push((format!("{scope}.b"), 1, h));
            }
            LocEncKind::Polar => {
                shapes.push((format!("{scope}.w1"), d + loc.loc_dim, h));
                shapes.push((format!("{scope}.b1"), 1, h));
                shapes.push((format!("{scope}.w2"), h, h));
                shapes.push((format!("{scope}.b2"), 1, h));
            }
        }
    }
    for l in 0..cfg.num_layers {
        shapes.push((format!("enc.{l}.ln1.gamma"), 1, h));
        shapes.push((format!("enc.{l}.ln1.beta"), 1, h));
        for w in ["wq", "wk", "wv"] {
            shapes.push((format!("enc.{l}.attn.{w}"), h, h));
        }
        for b in ["bq", "bk", "bv"] {
            shapes.push((format!("enc.{l}.attn.{b}"), 1, h));
        }
        shapes.push((format!("enc.{l}.attn.wo"), h, h));
        shapes.push((format!("enc.{l}.attn.bo"), 1, h));
        shapes.push((format!("enc.{l}.ln2.gamma"), 1, h));
        shapes.push((format!("enc.{l}.ln2.beta"), 1, h));
        shapes.push((format!("enc.{l}.ff.w1"), h, cfg.ff_dim));
        shapes.push((format!("enc.{l}.ff.b1"), 1, cfg.ff_dim));
        shapes.push((format!("enc.{l}.ff.w2"), cfg.ff_dim, h));
        shapes.push((format!("enc.{l}.ff.b2"), 1, h));
    }
    shapes.push(("final_ln.gamma".to_string(), 1, h));
    shapes.push(("final_ln.beta".to_string(), 1, h));
    shapes.push(("proj.w".to_string(), h, cfg.output_dim));
    shapes.push(("proj.b".to_string(), 1, cfg.output_dim));
    shapes
}

/// Total trainable scalar count for a configuration.
pub fn count_parameters(cfg: &FusionConfig, loc: &LocEncConfig) -> usize {
    param_shapes(cfg, loc).iter().map(|(_, r, c)| r * c).sum()
}

impl FusionModel {
    /// Build a model with seeded initialization: Glorot-uniform weights,
    /// zero biases, unit layer-norm gains, and the bounded-uniform rank
    /// table for the learnable encoding kind.
    pub fn new(cfg: FusionConfig, locenc: LocEncConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        locenc.validate()?;
        if locenc.kind == LocEncKind::Learnable && cfg.feature_dim != cfg.token_dim {
            return Err(Error::config(
                "learnable location encoding adds table rows to features; token_dim must equal feature_dim",
            ));
        }
        let mut params = ParamSet::new();
        for (i, (name, rows, cols)) in param_shapes(&cfg, &locenc).into_iter().enumerate() {
            let mut rng = stream(seed, "param-init", i as u64);
            let last = name.rsplit('.').next().unwrap_or(&name);
            let tensor = if last == "gamma" {
                Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
            } else if last.starts_with('b') {
                Tensor::zeros(rows, cols)
            } else if last == "table" {
                init_learnable_table(rows, cols, &mut rng)
            } else if last == "cls" {
                let bound = 1.0 / (cols as f64).sqrt();
                Tensor::from_vec(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
            } else {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Tensor::from_vec(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
            };
            params.insert(name, tensor);
        }
        Ok(FusionModel { cfg, locenc, params })
    }

    /// Register every parameter on a tape, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.params.len());
        let mut ordered = Vec::with_capacity(self.params.len());
        for (name, tensor) in self.params.iter() {
            let var = tape.param(tensor.clone());
            vars.insert(name.to_string(), var);
            ordered.push(var);
        }
        BoundParams { vars, ordered }
    }

    /// Forward pass over a token sequence on the given tape. Returns the
    /// `[1, m]` prediction node and, when requested, the attention record.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[Token],
        mut dropout_rng: Option<&mut dyn rand::RngCore>,
        capture: bool,
    ) -> Result<ForwardPass> {
        if tokens.is_empty() {
            return Err(Error::data("forward needs at least one token"));
        }
        self.check_tokens(tokens)?;
        let fused = self.fused_token_matrix(tape, bound, tokens)?;
        tape.value(fused).ensure_finite("fusion map output")?;
        let cls = bound.var("cls");
        let mut x = tape.stack_rows(&[cls, fused]);

        let mut record = capture.then(|| AttentionRecord {
            heads: Vec::with_capacity(self.cfg.num_layers),
            tokens: attention_token_info(tokens),
        });
        for l in 0..self.cfg.num_layers {
            x = self.encoder_layer(tape, bound, x, l, &mut dropout_rng, record.as_mut())?;
            tape.value(x)
                .ensure_finite(&format!("encoder layer {l}"))?;
        }
        let gamma = bound.var("final_ln.gamma");
        let beta = bound.var("final_ln.beta");
        let normed = tape.layer_norm(x, gamma, beta);
        let pooled = match self.cfg.pool {
            PoolMode::ClsToken => tape.select_row(normed, 0),
            PoolMode::MeanTokens => tape.mean_rows(normed),
        };
        let proj = tape.matmul(pooled, bound.var("proj.w"));
        let output = tape.add_row(proj, bound.var("proj.b"));
        tape.value(output).ensure_finite("projection output")?;
        Ok(ForwardPass {
            output,
            attention: record,
        })
    }

    /// Inference convenience: fresh tape, no dropout, eval semantics.
    pub fn predict(
        &self,
        tokens: &[Token],
        capture: bool,
    ) -> Result<(Vec<f64>, Option<AttentionRecord>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let pass = self.forward(&mut tape, &bound, tokens, None, capture)?;
        Ok((tape.value(pass.output).row(0).to_vec(), pass.attention))
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        let expects_loc = self.locenc.kind.has_loc_vector();
        for (i, t) in tokens.iter().enumerate() {
            if t.feature.len() != self.cfg.feature_dim {
                return Err(Error::data(format!(
                    "token {i} feature dim {} != {}",
                    t.feature.len(),
                    self.cfg.feature_dim
                )));
            }
            match (&t.loc, expects_loc) {
                (Some(loc), true) if loc.len() != self.locenc.loc_dim => {
                    return Err(Error::data(format!(
                        "token {i} loc dim {} != {}",
                        loc.len(),
                        self.locenc.loc_dim
                    )));
                }
                (None, true) => {
                    return Err(Error::data(format!("token {i} missing location encoding")));
                }
                (Some(_), false) => {
                    return Err(Error::data(format!(
                        "token {i} carries a location encoding the model does not use"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Fuse all tokens into the `[T, h]` input matrix, honouring the shared
    /// or per-modality fusion map.
    fn fused_token_matrix(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[Token],
    ) -> Result<Var> {
        if self.locenc.shared_fusion || !self.map_has_params() {
            return self.apply_fusion_map(tape, bound, "fuse", tokens);
        }
        // Per-modality maps need the modality blocks contiguous, which the
        // build order guarantees (visual block, then text block).
        let first_text = tokens
            .iter()
            .position(|t| t.modality == Modality::Text)
            .unwrap_or(tokens.len());
        if tokens[first_text..].iter().any(|t| t.modality == Modality::Visual) {
            return Err(Error::data("tokens not grouped by modality"));
        }
        let mut parts = Vec::new();
        if first_text > 0 {
            parts.push(self.apply_fusion_map(tape, bound, "fuse.visual", &tokens[..first_text])?);
        }
        if first_text < tokens.len() {
            parts.push(self.apply_fusion_map(tape, bound, "fuse.text", &tokens[first_text..])?);
        }
        Ok(if parts.len() == 1 {
            parts[0]
        } else {
            tape.stack_rows(&parts)
        })
    }

    fn map_has_params(&self) -> bool {
        !(self.locenc.kind == LocEncKind::None && self.cfg.feature_dim == self.cfg.token_dim)
    }

    fn apply_fusion_map(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        scope: &str,
        tokens: &[Token],
    ) -> Result<Var> {
        match self.locenc.kind {
            LocEncKind::None => {
                let feats = feature_matrix(tokens, self.cfg.feature_dim);
                let x = tape.constant(feats);
                if !self.map_has_params() {
                    return Ok(x);
                }
                let y = tape.matmul(x, bound.var(&format!("{scope}.w")));
                Ok(tape.add_row(y, bound.var(&format!("{scope}.b"))))
            }
            LocEncKind::Learnable => {
                let feats = feature_matrix(tokens, self.cfg.feature_dim);
                let x = tape.constant(feats);
                let ranks: Vec<usize> = tokens.iter().map(|t| t.neighbor_rank).collect();
                if let Some(&bad) = ranks.iter().find(|&&r| r > self.cfg.neighbor_count) {
                    return Err(Error::data(format!(
                        "token rank {bad} outside the learnable table (k = {})",
                        self.cfg.neighbor_count
                    )));
                }
                let rows = tape.gather_rows(bound.var(&format!("{scope}.table")), &ranks);
                Ok(tape.add(x, rows))
            }
            LocEncKind::Rank | LocEncKind::Coordinates | LocEncKind::Distance => {
                let x = tape.constant(feature_loc_matrix(tokens, self.cfg.feature_dim, self.locenc.loc_dim));
                let y = tape.matmul(x, bound.var(&format!("{scope}.w")));
                Ok(tape.add_row(y, bound.var(&format!("{scope}.b"))))
            }
            LocEncKind::Polar => {
                let x = tape.constant(feature_loc_matrix(tokens, self.cfg.feature_dim, self.locenc.loc_dim));
                let h1 = tape.matmul(x, bound.var(&format!("{scope}.w1")));
                let h1 = tape.add_row(h1, bound.var(&format!("{scope}.b1")));
                let h1 = tape.gelu(h1);
                let y = tape.matmul(h1, bound.var(&format!("{scope}.w2")));
                Ok(tape.add_row(y, bound.var(&format!("{scope}.b2"))))
            }
        }
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        layer: usize,
        dropout_rng: &mut Option<&mut dyn rand::RngCore>,
        mut record: Option<&mut AttentionRecord>,
    ) -> Result<Var> {
        let h = self.cfg.token_dim;
        let heads = self.cfg.num_heads;
        let dh = h / heads;
        let p = |s: &str| bound.var(&format!("enc.{layer}.{s}"));

        // Pre-norm attention block with residual.
        let ln1 = tape.layer_norm(x, p("ln1.gamma"), p("ln1.beta"));
        let q = tape.matmul(ln1, p("attn.wq"));
        let q = tape.add_row(q, p("attn.bq"));
        let k = tape.matmul(ln1, p("attn.wk"));
        let k = tape.add_row(k, p("attn.bk"));
        let v = tape.matmul(ln1, p("attn.wv"));
        let v = tape.add_row(v, p("attn.bv"));
        let mut head_outputs = Vec::with_capacity(heads);
        let mut head_attn = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scaled);
            if record.is_some() {
                head_attn.push(tape.value(attn).clone());
            }
            head_outputs.push(tape.matmul(attn, vh));
        }
        if let Some(rec) = record.as_mut() {
            rec.heads.push(head_attn);
        }
        let ctx = tape.concat_cols(&head_outputs);
        let out = tape.matmul(ctx, p("attn.wo"));
        let out = tape.add_row(out, p("attn.bo"));
        let out = self.maybe_dropout(tape, out, dropout_rng);
        let x = tape.add(x, out);

        // Pre-norm feed-forward block with residual.
        let ln2 = tape.layer_norm(x, p("ln2.gamma"), p("ln2.beta"));
        let f1 = tape.matmul(ln2, p("ff.w1"));
        let f1 = tape.add_row(f1, p("ff.b1"));
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(f1, p("ff.w2"));
        let f2 = tape.add_row(f2, p("ff.b2"));
        let f2 = self.maybe_dropout(tape, f2, dropout_rng);
        Ok(tape.add(x, f2))
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout_rng: &mut Option<&mut dyn rand::RngCore>,
    ) -> Var {
        let p = self.cfg.dropout;
        let Some(rng) = dropout_rng.as_mut() else {
            return x;
        };
        if p == 0.0 {
            return x;
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if rand::Rng::gen::<f64>(rng) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        tape.dropout(x, Tensor::from_vec(rows, cols, data))
    }
}

fn feature_matrix(tokens: &[Token], d: usize) -> Tensor {
    let mut out = Tensor::zeros(tokens.len(), d);
    for (i, t) in tokens.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&t.feature);
    }
    out
}

fn feature_loc_matrix(tokens: &[Token], d: usize, loc_dim: usize) -> Tensor {
    let mut out = Tensor::zeros(tokens.len(), d + loc_dim);
    for (i, t) in tokens.iter().enumerate() {
        let row = out.row_mut(i);
        row[..d].copy_from_slice(&t.feature);
        row[d..].copy_from_slice(t.loc.as_ref().expect("checked: loc present"));
    }
    out
}

/// Parameter handles bound to one tape.
pub struct BoundParams {
    vars: HashMap<String, Var>,
    ordered: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    /// Gradient per parameter in canonical order; parameters the loss never
    /// reached (for example a modality map with every token masked away)
    /// yield zero tensors shaped like the parameter.
    pub fn gradients(&self, grads: &Gradients, model: &FusionModel) -> Vec<Tensor> {
        self.ordered
            .iter()
            .zip(model.params.tensors())
            .map(|(&var, tensor)| match grads.get(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tensor.rows(), tensor.cols()),
            })
            .collect()
    }
}

pub struct ForwardPass {
    /// `[1, m]` prediction node.
    pub output: Var,
    pub attention: Option<AttentionRecord>,
}

/// Attention weights captured during one forward pass, plus per-token
/// geometry for downstream aggregation. Row 0 / column 0 is the CLS token.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// `heads[layer][head]` is the `[T+1, T+1]` row-stochastic matrix.
    pub heads: Vec<Vec<Tensor>>,
    pub tokens: Vec<AttnTokenInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnTokenInfo {
    /// `None` marks the CLS slot.
    pub modality: Option<Modality>,
    pub neighbor_rank: usize,
    pub distance_m: f64,
}

fn attention_token_info(tokens: &[Token]) -> Vec<AttnTokenInfo> {
    let mut info = Vec::with_capacity(tokens.len() + 1);
    info.push(AttnTokenInfo {
        modality: None,
        neighbor_rank: 0,
        distance_m: 0.0,
    });
    info.extend(tokens.iter().map(|t| AttnTokenInfo {
        modality: Some(t.modality),
        neighbor_rank: t.neighbor_rank,
        distance_m: t.distance_m,
    }));
    info
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"GFCK";
const CHECKPOINT_VERSION: u16 = 1;
const TENSOR_F32: u8 = 1;
const TENSOR_F64: u8 = 2;

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    fusion: FusionConfig,
    locenc: LocEncConfig,
}

/// A loaded checkpoint: the model plus any extra tensors (optimizer state)
/// that were saved alongside it, in file order.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: FusionModel,
    pub extras: Vec<(String, Tensor)>,
}

/// Save a model and optional extra tensors. Model parameters are stored as
/// f32 in canonical order; extras (optimizer state) as f64 so training can
/// resume bit-exactly. Loading and re-saving reproduces the bytes exactly.
pub fn save_checkpoint(
    model: &FusionModel,
    extras: &[(String, Tensor)],
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let echo = serde_json::to_vec(&ConfigEcho {
        fusion: model.cfg.clone(),
        locenc: model.locenc.clone(),
    })?;
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(&echo)?;
    let total = model.params.len() + extras.len();
    w.write_all(&(total as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        write_tensor(&mut w, name, tensor, TENSOR_F32)?;
    }
    for (name, tensor) in extras {
        write_tensor(&mut w, name, tensor, TENSOR_F64)?;
    }
    w.flush()?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, tensor: &Tensor, dtype: u8) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::data(format!("tensor name too long: '{name}'")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&[dtype])?;
    w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
    w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
    for &v in tensor.data() {
        match dtype {
            TENSOR_F32 => w.write_all(&(v as f32).to_le_bytes())?,
            TENSOR_F64 => w.write_all(&v.to_le_bytes())?,
            _ => unreachable!("unknown dtype"),
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_array::<4>(&mut r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = u16::from_le_bytes(read_array::<2>(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let echo_len = u32::from_le_bytes(read_array::<4>(&mut r)?) as usize;
    let mut echo_buf = vec![0u8; echo_len];
    read_into(&mut r, &mut echo_buf)?;
    let echo: ConfigEcho = serde_json::from_slice(&echo_buf)?;
    let count = u32::from_le_bytes(read_array::<4>(&mut r)?) as usize;

    let mut records: Vec<(String, u8, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array::<2>(&mut r)?) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_into(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format("checkpoint tensor name is not UTF-8"))?;
        let [dtype] = read_array::<1>(&mut r)?;
        let rows = u32::from_le_bytes(read_array::<4>(&mut r)?) as usize;
        let cols = u32::from_le_bytes(read_array::<4>(&mut r)?) as usize;
        let elem = match dtype {
            TENSOR_F32 => 4,
            TENSOR_F64 => 8,
            other => return Err(Error::format(format!("unknown tensor dtype {other}"))),
        };
        let mut buf = vec![0u8; rows * cols * elem];
        read_into(&mut r, &mut buf)?;
        let data: Vec<f64> = match dtype {
            TENSOR_F32 => buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            _ => buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        records.push((name, dtype, Tensor::from_vec(rows, cols, data)));
    }

    let expected = param_shapes(&echo.fusion, &echo.locenc);
    if records.len() < expected.len() {
        return Err(Error::format("checkpoint is missing parameters"));
    }
    let mut params = ParamSet::new();
    for ((name, rows, cols), (got_name, dtype, tensor)) in
        expected.iter().zip(records.iter())
    {
        if got_name != name || *dtype != TENSOR_F32 || tensor.shape() != (*rows, *cols) {
            return Err(Error::format(format!(
                "checkpoint parameter mismatch at '{got_name}' (expected '{name}' {rows}x{cols})"
            )));
        }
        params.insert(name.clone(), tensor.clone());
    }
    let extras = records
        .into_iter()
        .skip(expected.len())
        .map(|(name, _, tensor)| (name, tensor))
        .collect();
    Ok(Checkpoint {
        model: FusionModel {
            cfg: echo.fusion,
            locenc: echo.locenc,
            params,
        },
        extras,
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_into(r, &mut buf)?;
    Ok(buf)
}

fn read_into(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::format("unexpected end of checkpoint file")
        } else {
            e.into()
        }
    })
}
