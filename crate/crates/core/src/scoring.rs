//! Test-time anomaly scores: normalised reconstruction error, deviation
//! score, contrastive dissimilarity to a reference set of normal windows,
//! and their masked sum.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::trainer::{raw_reconstruction_errors, Model, ScoreNormalizer};
use crate::{Error, Heads, Result};

pub const DEFAULT_REFERENCE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub s_rec: f64,
    pub s_dev: f64,
    pub s_con: f64,
    pub s: f64,
}

impl ScoreTriple {
    /// Sums the components selected by `mask`, in the order rec, dev, con.
    pub fn combine(s_rec: f64, s_dev: f64, s_con: f64, mask: Heads) -> Self {
        let mut s = 0.0;
        if mask.rec {
            s += s_rec;
        }
        if mask.dev {
            s += s_dev;
        }
        if mask.con {
            s += s_con;
        }
        ScoreTriple { s_rec, s_dev, s_con, s }
    }

    pub fn with_mask(&self, mask: Heads) -> Self {
        Self::combine(self.s_rec, self.s_dev, self.s_con, mask)
    }
}

/// Normaliser plus the reference projections 𝓟 (unit rows) and the seed
/// they were drawn with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringContext {
    pub normalizer: ScoreNormalizer,
    pub reference: Array2<f64>,
    pub seed: u64,
}

impl ScoringContext {
    pub fn new(normalizer: ScoreNormalizer, reference: Array2<f64>, seed: u64) -> Result<Self> {
        if reference.nrows() == 0 {
            return Err(Error::InvalidArgument("reference set must not be empty".into()));
        }
        for (i, r) in reference.rows().into_iter().enumerate() {
            let n = r.dot(&r).sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!("reference projection {i} has norm {n}")));
            }
        }
        Ok(ScoringContext { normalizer, reference, seed })
    }

    /// Draws `size` distinct normal windows with `seed` and stores their
    /// projections.
    pub fn draw(
        model: &Model,
        normals: &[SampleWindow],
        size: usize,
        seed: u64,
        normalizer: ScoreNormalizer,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("reference set size must be positive".into()));
        }
        if size > normals.len() {
            return Err(Error::InvalidArgument(format!(
                "reference set of {size} requested but only {} normal windows are available",
                normals.len()
            )));
        }
        if let Some(w) = normals.iter().find(|w| !w.is_normal()) {
            return Err(Error::Sample { sample: w.id.clone(), msg: "reference windows must be normal".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut picked = index::sample(&mut rng, normals.len(), size).into_vec();
        picked.sort_unstable();
        let views: Vec<ArrayView2<f32>> = picked.iter().map(|&i| normals[i].values.view()).collect();
        let g = model.projections(&model.encode(&model.stack(&views)?));
        Self::new(normalizer, g.t().mapv(f64::from), seed)
    }

    pub fn size(&self) -> usize {
        self.reference.nrows()
    }
}

/// 1 − mean dot product with the reference set, clamped to [0, 2].
pub fn contrastive_score(g: ArrayView1<f64>, reference: &Array2<f64>) -> Result<f64> {
    if reference.nrows() == 0 {
        return Err(Error::InvalidArgument("reference set must not be empty".into()));
    }
    if reference.ncols() != g.len() {
        return Err(Error::shape(format!("projection of length {}", reference.ncols()), g.len()));
    }
    let mean = reference.dot(&g).mean().unwrap_or(0.0);
    Ok((1.0 - mean).clamp(0.0, 2.0))
}

pub fn score_rec(model: &Model, x: &SampleWindow, normalizer: &ScoreNormalizer) -> Result<f64> {
    let raw = raw_reconstruction_errors(model, std::slice::from_ref(x))?[0];
    Ok(normalizer.normalize(raw))
}

pub fn score_dev(model: &Model, x: &SampleWindow) -> Result<f64> {
    let z = model.extract_features(x.values.view())?;
    Ok(f64::from(model.deviation_score(&z)?))
}

pub fn score_con(model: &Model, x: &SampleWindow, ctx: &ScoringContext) -> Result<f64> {
    let z = model.extract_features(x.values.view())?;
    let g = model.project(&z)?.0.mapv(f64::from);
    contrastive_score(g.view(), &ctx.reference)
}

pub fn score_sample(model: &Model, x: &SampleWindow, ctx: &ScoringContext, mask: Heads) -> Result<ScoreTriple> {
    Ok(score_windows(model, std::slice::from_ref(x), ctx, mask)?.remove(0))
}

/// All three components for every window (batched), summed under `mask`.
pub fn score_windows(
    model: &Model,
    windows: &[SampleWindow],
    ctx: &ScoringContext,
    mask: Heads,
) -> Result<Vec<ScoreTriple>> {
    let raw = raw_reconstruction_errors(model, windows)?;
    let mut out = Vec::with_capacity(windows.len());
    for (chunk, raw) in windows.chunks(256).zip(raw.chunks(256)) {
        let views: Vec<ArrayView2<f32>> = chunk.iter().map(|w| w.values.view()).collect();
        let z = model.encode(&model.stack(&views)?);
        let dev = model.deviation_scores(&z);
        let g = model.projections(&z).mapv(f64::from);
        for (i, r) in raw.iter().enumerate() {
            let s_con = contrastive_score(g.index_axis(Axis(1), i), &ctx.reference)?;
            out.push(ScoreTriple::combine(ctx.normalizer.normalize(*r), f64::from(dev[i]), s_con, mask));
        }
    }
    Ok(out)
}

/// One row of `scores.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub class_tag: String,
    pub y: f64,
    pub s_rec: f64,
    pub s_dev: f64,
    pub s_con: f64,
    pub s: f64,
}

impl ScoredSample {
    pub fn new(w: &SampleWindow, t: ScoreTriple) -> Self {
        ScoredSample {
            sample_id: w.id.clone(),
            class_tag: w.class_tag.clone(),
            y: w.label,
            s_rec: t.s_rec,
            s_dev: t.s_dev,
            s_con: t.s_con,
            s: t.s,
        }
    }

    pub fn triple(&self) -> ScoreTriple {
        ScoreTriple { s_rec: self.s_rec, s_dev: self.s_dev, s_con: self.s_con, s: self.s }
    }
}

pub fn write_scores_csv(path: &Path, rows: &[ScoredSample]) -> Result<()> {
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredSample>> {
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}
