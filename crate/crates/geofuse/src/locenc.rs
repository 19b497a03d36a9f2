//! Location encodings for context tokens.
//!
//! Six schemes for telling the fusion model where a token sits relative to
//! the origin of its context: nothing at all, the neighbour rank, a
//! trainable per-rank table, absolute coordinates, Euclidean distance, and a
//! polar (distance, angle) expansion. All but `coordinates` depend only on
//! relative geometry, so translating a whole context leaves them unchanged;
//! `coordinates` deliberately does not.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geo::GeoPoint;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Base of the sinusoid frequency ladder, the classic positional-encoding
/// constant. The default distance cap of 10 000 m coincides with one base
/// period at the slowest frequency.
pub const SINUSOID_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocEncKind {
    None,
    Rank,
    Learnable,
    Coordinates,
    Distance,
    Polar,
}

impl LocEncKind {
    pub const ALL: [LocEncKind; 6] = [
        LocEncKind::None,
        LocEncKind::Rank,
        LocEncKind::Learnable,
        LocEncKind::Coordinates,
        LocEncKind::Distance,
        LocEncKind::Polar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LocEncKind::None => "none",
            LocEncKind::Rank => "rank",
            LocEncKind::Learnable => "learnable",
            LocEncKind::Coordinates => "coordinates",
            LocEncKind::Distance => "distance",
            LocEncKind::Polar => "polar",
        }
    }

    /// Whether this kind produces an encoding vector to concatenate; the
    /// learnable kind instead adds a trainable row to the feature, and
    /// `none` produces nothing.
    pub fn has_loc_vector(&self) -> bool {
        matches!(
            self,
            LocEncKind::Rank | LocEncKind::Coordinates | LocEncKind::Distance | LocEncKind::Polar
        )
    }
}

impl fmt::Display for LocEncKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LocEncKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LocEncKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown location encoding '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocEncConfig {
    pub kind: LocEncKind,
    /// Width of the encoding vector (for kinds that produce one).
    pub loc_dim: usize,
    /// Distances are clipped here before encoding.
    pub max_distance_m: f64,
    /// `(min_east, min_north, max_east, max_north)`; required by
    /// `coordinates`, which scales positions into [0,1] against it.
    pub study_bounds: Option<(f64, f64, f64, f64)>,
    /// Number of integer angle frequencies for `polar`; `None` = loc_dim/4.
    pub num_angle_freqs: Option<usize>,
    /// Shortest wavelength of the `coordinates` ladder, as a fraction of
    /// the study extent.
    pub min_rel_wavelength: f64,
    /// Share one fusion map across modalities (separate maps otherwise).
    pub shared_fusion: bool,
}

impl LocEncConfig {
    pub fn new(kind: LocEncKind) -> Self {
        LocEncConfig {
            kind,
            loc_dim: 512,
            max_distance_m: 10_000.0,
            study_bounds: None,
            num_angle_freqs: None,
            min_rel_wavelength: 1e-3,
            shared_fusion: true,
        }
    }

    pub fn with_loc_dim(mut self, loc_dim: usize) -> Self {
        self.loc_dim = loc_dim;
        self
    }

    pub fn with_bounds(mut self, bounds: (f64, f64, f64, f64)) -> Self {
        self.study_bounds = Some(bounds);
        self
    }

    pub fn angle_freqs(&self) -> usize {
        self.num_angle_freqs.unwrap_or(self.loc_dim / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.loc_dim == 0 || self.loc_dim % 2 != 0 {
            return Err(Error::config(format!(
                "loc_dim must be even and positive, got {}",
                self.loc_dim
            )));
        }
        if !(self.max_distance_m > 0.0) {
            return Err(Error::config("max_distance_m must be positive"));
        }
        if self.kind == LocEncKind::Coordinates {
            match self.study_bounds {
                None => return Err(Error::config("coordinates encoding requires study_bounds")),
                Some((e0, n0, e1, n1)) if !(e1 > e0) || !(n1 > n0) => {
                    return Err(Error::config("study_bounds must span a positive extent"));
                }
                _ => {}
            }
            if self.loc_dim % 4 != 0 {
                return Err(Error::config(
                    "coordinates encoding needs loc_dim divisible by 4",
                ));
            }
            if !(self.min_rel_wavelength > 0.0 && self.min_rel_wavelength <= 1.0) {
                return Err(Error::config("min_rel_wavelength must be in (0, 1]"));
            }
        }
        if self.kind == LocEncKind::Polar {
            let naf = self.angle_freqs();
            let dist_dims = self.loc_dim as i64 - 2 * naf as i64;
            if naf == 0 || dist_dims < 2 || dist_dims % 2 != 0 {
                return Err(Error::config(format!(
                    "polar split invalid: loc_dim {} with {naf} angle frequencies",
                    self.loc_dim
                )));
            }
        }
        Ok(())
    }
}

/// Geometry of one context token, as seen from its origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenGeom {
    /// 0 = the origin itself, 1 = nearest neighbour, ...
    pub rank: usize,
    /// Absolute location of the token's sample.
    pub location: GeoPoint,
    pub distance_m: f64,
    /// Token location minus origin location, meters (east, north).
    pub offset: (f64, f64),
}

/// Validated encoder with a counter of out-of-bounds coordinate clamps.
/// Immutable after construction; safe to share across threads.
pub struct LocEncoder {
    cfg: LocEncConfig,
    clamp_warnings: AtomicU64,
}

/// Interleaved sin/cos ladder: `out[2s] = sin(pos / B^(2s/dims))`,
/// `out[2s+1] = cos(pos / B^(2s/dims))` with base B = 10 000.
pub fn sinusoid_1d(pos: f64, dims: usize) -> Vec<f64> {
    assert!(dims % 2 == 0, "sinusoid_1d needs an even width");
    let mut out = Vec::with_capacity(dims);
    for s in 0..dims / 2 {
        let scaled = pos / SINUSOID_BASE.powf(2.0 * s as f64 / dims as f64);
        out.push(scaled.sin());
        out.push(scaled.cos());
    }
    out
}

/// Fresh trainable rank table, entries uniform in ±1/sqrt(dim).
pub fn init_learnable_table(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (dim as f64).sqrt();
    let data = (0..rows * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, dim, data)
}

impl LocEncoder {
    pub fn new(cfg: LocEncConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LocEncoder {
            cfg,
            clamp_warnings: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &LocEncConfig {
        &self.cfg
    }

    pub fn kind(&self) -> LocEncKind {
        self.cfg.kind
    }

    /// Times a coordinate fell outside the study bounds and was clamped.
    pub fn clamp_warning_count(&self) -> u64 {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    /// Encoding vector for one token, or `None` for the kinds that do not
    /// produce one (`none`; `learnable` adds a table row in the fusion map).
    pub fn encode(&self, geom: &TokenGeom) -> Option<Vec<f64>> {
        match self.cfg.kind {
            LocEncKind::None | LocEncKind::Learnable => None,
            LocEncKind::Rank => Some(self.encode_rank(geom.rank)),
            LocEncKind::Coordinates => Some(self.encode_coordinates(&geom.location)),
            LocEncKind::Distance => Some(self.encode_distance(geom.distance_m)),
            LocEncKind::Polar => Some(self.encode_polar(geom.offset.0, geom.offset.1)),
        }
    }

    pub fn encode_rank(&self, rank: usize) -> Vec<f64> {
        sinusoid_1d(rank as f64, self.cfg.loc_dim)
    }

    pub fn encode_distance(&self, d_m: f64) -> Vec<f64> {
        sinusoid_1d(d_m.min(self.cfg.max_distance_m), self.cfg.loc_dim)
    }

    /// Multi-scale sinusoids of the min-max-scaled coordinates: each axis
    /// gets loc_dim/2 entries whose frequencies run geometrically from one
    /// period over the full extent down to `min_rel_wavelength` of it.
    /// Points outside the bounds clamp to [0,1] and bump the warning count.
    pub fn encode_coordinates(&self, p: &GeoPoint) -> Vec<f64> {
        let (e0, n0, e1, n1) = self
            .cfg
            .study_bounds
            .expect("validated: coordinates kind has bounds");
        let ue = (p.east - e0) / (e1 - e0);
        let un = (p.north - n0) / (n1 - n0);
        if !(0.0..=1.0).contains(&ue) || !(0.0..=1.0).contains(&un) {
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
        }
        let mut out = Vec::with_capacity(self.cfg.loc_dim);
        self.coordinate_axis(ue.clamp(0.0, 1.0), &mut out);
        self.coordinate_axis(un.clamp(0.0, 1.0), &mut out);
        out
    }

    fn coordinate_axis(&self, u: f64, out: &mut Vec<f64>) {
        let pairs = self.cfg.loc_dim / 4;
        for s in 0..pairs {
            let omega = if pairs == 1 {
                2.0 * std::f64::consts::PI
            } else {
                2.0 * std::f64::consts::PI
                    * (1.0 / self.cfg.min_rel_wavelength).powf(s as f64 / (pairs - 1) as f64)
            };
            out.push((u * omega).sin());
            out.push((u * omega).cos());
        }
    }

    /// Distance-and-angle encoding of a neighbour offset: the clipped
    /// distance ladder truncated to the leading entries, then integer-
    /// frequency sin/cos of the angle so that the θ-periodicity is exact.
    /// The zero offset (the origin token) takes θ = 0.
    pub fn encode_polar(&self, dx: f64, dy: f64) -> Vec<f64> {
        let naf = self.cfg.angle_freqs();
        let dist_dims = self.cfg.loc_dim - 2 * naf;
        let d = (dx * dx + dy * dy).sqrt();
        let mut out = self.encode_distance(d);
        out.truncate(dist_dims);
        let theta = if dx == 0.0 && dy == 0.0 {
            0.0
        } else {
            let t = dy.atan2(dx);
            if t < 0.0 {
                t + 2.0 * std::f64::consts::PI
            } else {
                t
            }
        };
        for n in 1..=naf {
            out.push((n as f64 * theta).sin());
            out.push((n as f64 * theta).cos());
        }
        out
    }
}
