//! Geometry-and-semantics co-supported correspondence sets.
//!
//! For every source token the set holds exactly one entry per view,
//! including the source view itself. Entries come in three kinds:
//! `Geometric` (depth transfer that survived the occlusion mask),
//! `Semantic` (best cosine match of the per-view semantic features, valid
//! only above the threshold beta, retained masked otherwise) and `SelfRef`
//! (the token itself, always valid so every attention group is nonempty).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::batch::MultiViewBatch;
use crate::geometry::{geometric_match, GeometryError};
use crate::grid::{FeatureGrid, GridError};

pub const DEFAULT_BETA: f32 = 0.9;
pub const DEFAULT_PATCH: usize = 8;
pub const DEFAULT_TOL_PX: f64 = 1.0;
pub const DEFAULT_TOL_DEPTH: f64 = 0.05;

/// Additive bias for masked attention entries. Large enough that the
/// post-softmax weight underflows to zero, finite so no NaN can arise.
pub const MASK_INVALID_BIAS: f32 = -1e9;

pub const MVCR_MAGIC: [u8; 4] = *b"MVCR";
pub const MVCR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("correspondence invariant violated: {0}")]
    Invariant(String),
    #[error("bad magic, not an MVCR file")]
    BadMagic,
    #[error("unsupported MVCR version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated or trailing data")]
    Truncated,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrKind {
    Geometric,
    Semantic,
    SelfRef,
}

impl CorrKind {
    fn to_byte(self) -> u8 {
        match self {
            CorrKind::Geometric => 0,
            CorrKind::Semantic => 1,
            CorrKind::SelfRef => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CorrKind::Geometric),
            1 => Some(CorrKind::Semantic),
            2 => Some(CorrKind::SelfRef),
            _ => None,
        }
    }
}

/// One source-token-to-target-view correspondence. Invalid entries still
/// carry the best-guess coordinates (masked semantic candidates), so the
/// attention gather never indexes out of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrEntry {
    pub target_view: usize,
    pub tx: usize,
    pub ty: usize,
    pub valid: bool,
    pub kind: CorrKind,
    pub score: f32,
}

/// Per-source-token groups of N entries over an N-view latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    n_views: usize,
    grid_w: usize,
    grid_h: usize,
    entries: Vec<CorrEntry>,
}

impl CorrespondenceSet {
    pub fn from_entries(
        n_views: usize,
        grid_w: usize,
        grid_h: usize,
        entries: Vec<CorrEntry>,
    ) -> Result<Self, CorrespondenceError> {
        if n_views == 0 {
            return Err(CorrespondenceError::Invariant("zero views".into()));
        }
        let n_tokens = grid_w * grid_h;
        if entries.len() != n_views * n_tokens * n_views {
            return Err(CorrespondenceError::Invariant(format!(
                "expected {} entries, got {}",
                n_views * n_tokens * n_views,
                entries.len()
            )));
        }
        let set = Self {
            n_views,
            grid_w,
            grid_h,
            entries,
        };
        set.check_groups()?;
        Ok(set)
    }

    fn check_groups(&self) -> Result<(), CorrespondenceError> {
        for (s, x, y, group) in self.iter_groups() {
            let mut seen = vec![false; self.n_views];
            let mut has_valid_self = false;
            for e in group {
                if e.target_view >= self.n_views {
                    return Err(CorrespondenceError::Invariant(format!(
                        "target view {} out of range",
                        e.target_view
                    )));
                }
                if seen[e.target_view] {
                    return Err(CorrespondenceError::Invariant(format!(
                        "duplicate entry for source ({s},{x},{y}) target view {}",
                        e.target_view
                    )));
                }
                seen[e.target_view] = true;
                if e.tx >= self.grid_w || e.ty >= self.grid_h {
                    return Err(CorrespondenceError::Invariant(format!(
                        "entry coordinates ({}, {}) outside {}x{} grid",
                        e.tx, e.ty, self.grid_w, self.grid_h
                    )));
                }
                if e.kind == CorrKind::SelfRef {
                    if e.target_view != s || e.tx != x || e.ty != y || !e.valid {
                        return Err(CorrespondenceError::Invariant(format!(
                            "malformed self entry for source ({s},{x},{y})"
                        )));
                    }
                    has_valid_self = true;
                }
                if !e.score.is_finite() {
                    return Err(CorrespondenceError::Invariant("non-finite score".into()));
                }
            }
            if !has_valid_self {
                return Err(CorrespondenceError::Invariant(format!(
                    "source ({s},{x},{y}) has no self entry"
                )));
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_w * self.grid_h
    }

    fn group_index(&self, source_view: usize, x: usize, y: usize) -> usize {
        ((source_view * self.grid_h + y) * self.grid_w + x) * self.n_views
    }

    pub fn group(&self, source_view: usize, x: usize, y: usize) -> &[CorrEntry] {
        let i = self.group_index(source_view, x, y);
        &self.entries[i..i + self.n_views]
    }

    pub fn iter_groups(&self) -> impl Iterator<Item = (usize, usize, usize, &[CorrEntry])> {
        let (w, h, n) = (self.grid_w, self.grid_h, self.n_views);
        self.entries.chunks(n).enumerate().map(move |(gi, group)| {
            let token = gi % (w * h).max(1);
            (gi / (w * h).max(1), token % w.max(1), token / w.max(1), group)
        })
    }

    /// Count of entries satisfying `pred`, over all source tokens.
    pub fn count_entries(&self, pred: impl Fn(&CorrEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).count()
    }
}

/// Additive attention bias aligned entry-for-entry with a correspondence
/// set: 0 where the entry is valid, `MASK_INVALID_BIAS` where it is not.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n_views: usize,
    grid_w: usize,
    grid_h: usize,
    bias: Vec<f32>,
}

impl AttentionMask {
    pub fn from_set(cs: &CorrespondenceSet) -> Self {
        Self {
            n_views: cs.n_views,
            grid_w: cs.grid_w,
            grid_h: cs.grid_h,
            bias: cs
                .entries
                .iter()
                .map(|e| if e.valid { 0.0 } else { MASK_INVALID_BIAS })
                .collect(),
        }
    }

    pub fn group(&self, source_view: usize, x: usize, y: usize) -> &[f32] {
        let i = ((source_view * self.grid_h + y) * self.grid_w + x) * self.n_views;
        &self.bias[i..i + self.n_views]
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
}

/// Center of latent token `t` in image pixel coordinates.
pub fn token_center(t: usize, patch: usize) -> f64 {
    (t as f64 + 0.5) * patch as f64 - 0.5
}

/// Continuous token coordinate of image pixel coordinate `p`.
pub fn pixel_to_token_coord(p: f64, patch: usize) -> f64 {
    (p + 0.5) / patch as f64 - 0.5
}

fn snap_to_token(p: f64, patch: usize, grid_len: usize) -> usize {
    let t = pixel_to_token_coord(p, patch).round();
    t.clamp(0.0, grid_len.saturating_sub(1) as f64) as usize
}

/// Latent grid dimensions for an image, one token per `patch` x `patch`
/// pixel block (partial blocks at the border get their own token).
pub fn latent_grid_dims(width: usize, height: usize, patch: usize) -> (usize, usize) {
    (width.div_ceil(patch), height.div_ceil(patch))
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())) as f32
}

/// Best-similarity token in `target` for the given source token, regardless
/// of threshold. Ties break to the lowest row-major target index.
pub fn semantic_argmax(
    source: &FeatureGrid,
    token: (usize, usize),
    target: &FeatureGrid,
) -> Result<(usize, usize, f32), CorrespondenceError> {
    if source.dim() != target.dim() {
        return Err(CorrespondenceError::ShapeMismatch(format!(
            "feature dims differ: {} vs {}",
            source.dim(),
            target.dim()
        )));
    }
    let query = source.token(token.0, token.1);
    let mut best = (0usize, f32::NEG_INFINITY);
    for idx in 0..target.n_tokens() {
        let score = cosine(query, target.token_flat(idx));
        if score > best.1 {
            best = (idx, score);
        }
    }
    let (idx, score) = best;
    Ok((idx % target.grid_w(), idx / target.grid_w(), score))
}

/// Highest-cosine semantic correspondence, accepted only above `beta`.
/// Zero feature vectors score 0 against everything.
pub fn semantic_match(
    source: &FeatureGrid,
    token: (usize, usize),
    target: &FeatureGrid,
    beta: f32,
) -> Result<Option<(usize, usize, f32)>, CorrespondenceError> {
    let (tx, ty, score) = semantic_argmax(source, token, target)?;
    Ok((score > beta).then_some((tx, ty, score)))
}

/// Builds the full co-supported correspondence set plus its attention mask.
///
/// Per source token and target view: a geometric transfer of the token
/// center is attempted first (`tol_px` in latent tokens, scaled to pixels
/// internally); only where it fails does the semantic search run, and the
/// losing semantic candidates stay in the set masked invalid.
pub fn build_correspondences(
    batch: &MultiViewBatch,
    features: &[FeatureGrid],
    patch: usize,
    beta: f32,
    tol_px: f64,
    tol_depth: f64,
) -> Result<(CorrespondenceSet, AttentionMask), CorrespondenceError> {
    let n = batch.len();
    if features.len() != n {
        return Err(CorrespondenceError::ShapeMismatch(format!(
            "{} feature grids for {} views",
            features.len(),
            n
        )));
    }
    if patch == 0 {
        return Err(CorrespondenceError::ShapeMismatch("patch size 0".into()));
    }
    let (grid_w, grid_h) = latent_grid_dims(batch.width(), batch.height(), patch);
    let dim = features[0].dim();
    for (i, f) in features.iter().enumerate() {
        if f.grid_w() != grid_w || f.grid_h() != grid_h || f.dim() != dim {
            return Err(CorrespondenceError::ShapeMismatch(format!(
                "feature grid {i} is {}x{}x{}, expected {grid_w}x{grid_h}x{dim}",
                f.grid_w(),
                f.grid_h(),
                f.dim()
            )));
        }
    }

    let n_tokens = grid_w * grid_h;
    let tol_px_image = tol_px * patch as f64;
    let mut entries = Vec::with_capacity(n * n_tokens * n);
    for s in 0..n {
        let groups: Vec<Vec<CorrEntry>> = (0..n_tokens)
            .into_par_iter()
            .map(|tidx| {
                let (x, y) = (tidx % grid_w, tidx / grid_w);
                let px = (token_center(x, patch), token_center(y, patch));
                let mut group = Vec::with_capacity(n);
                for i in 0..n {
                    if i == s {
                        group.push(CorrEntry {
                            target_view: i,
                            tx: x,
                            ty: y,
                            valid: true,
                            kind: CorrKind::SelfRef,
                            score: 0.0,
                        });
                        continue;
                    }
                    let gm = geometric_match(px, s, i, batch, tol_px_image, tol_depth)?;
                    if gm.valid {
                        group.push(CorrEntry {
                            target_view: i,
                            tx: snap_to_token(gm.x, patch, grid_w),
                            ty: snap_to_token(gm.y, patch, grid_h),
                            valid: true,
                            kind: CorrKind::Geometric,
                            score: 0.0,
                        });
                    } else {
                        let (tx, ty, score) =
                            semantic_argmax(&features[s], (x, y), &features[i])?;
                        group.push(CorrEntry {
                            target_view: i,
                            tx,
                            ty,
                            valid: score > beta,
                            kind: CorrKind::Semantic,
                            score,
                        });
                    }
                }
                Ok(group)
            })
            .collect::<Result<_, CorrespondenceError>>()?;
        for g in groups {
            entries.extend(g);
        }
    }

    let set = CorrespondenceSet::from_entries(n, grid_w, grid_h, entries)?;
    let mask = AttentionMask::from_set(&set);
    Ok((set, mask))
}

pub fn serialize_correspondences(
    cs: &CorrespondenceSet,
    path: &Path,
) -> Result<(), CorrespondenceError> {
    let fits = |v: usize| u16::try_from(v).is_ok();
    if !fits(cs.n_views) || !fits(cs.grid_w) || !fits(cs.grid_h) {
        return Err(CorrespondenceError::Malformed(
            "dimensions exceed u16 record width".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MVCR_MAGIC)?;
    w.write_all(&MVCR_VERSION.to_le_bytes())?;
    for v in [cs.n_views, cs.grid_w, cs.grid_h] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (s, x, y, group) in cs.iter_groups() {
        for v in [s, x, y] {
            w.write_all(&(v as u16).to_le_bytes())?;
        }
        for e in group {
            for v in [e.target_view, e.tx, e.ty] {
                w.write_all(&(v as u16).to_le_bytes())?;
            }
            w.write_all(&[u8::from(e.valid), e.kind.to_byte()])?;
            w.write_all(&e.score.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn deserialize_correspondences(path: &Path) -> Result<CorrespondenceSet, CorrespondenceError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    fn take<'a>(bytes: &'a [u8], off: &mut usize, n: usize) -> Result<&'a [u8], CorrespondenceError> {
        if *off + n > bytes.len() {
            return Err(CorrespondenceError::Truncated);
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    }
    fn u32_at(bytes: &[u8], off: &mut usize) -> Result<u32, CorrespondenceError> {
        let b = take(bytes, off, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    let u16_from = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]) as usize;

    let mut off = 0usize;
    if take(&bytes, &mut off, 4)? != MVCR_MAGIC {
        return Err(CorrespondenceError::BadMagic);
    }
    let version = u32_at(&bytes, &mut off)?;
    if version != MVCR_VERSION {
        return Err(CorrespondenceError::UnsupportedVersion(version));
    }
    let n_views = u32_at(&bytes, &mut off)? as usize;
    let grid_w = u32_at(&bytes, &mut off)? as usize;
    let grid_h = u32_at(&bytes, &mut off)? as usize;
    if n_views == 0 {
        return Err(CorrespondenceError::Malformed("zero views".into()));
    }

    let n_tokens = grid_w * grid_h;
    let mut entries = Vec::with_capacity(n_views * n_tokens * n_views);
    for s in 0..n_views {
        for y in 0..grid_h {
            for x in 0..grid_w {
                let head = take(&bytes, &mut off, 6)?;
                let (fs, fx, fy) = (
                    u16_from(&head[0..2]),
                    u16_from(&head[2..4]),
                    u16_from(&head[4..6]),
                );
                if (fs, fx, fy) != (s, x, y) {
                    return Err(CorrespondenceError::Malformed(format!(
                        "record order: expected source ({s},{x},{y}), found ({fs},{fx},{fy})"
                    )));
                }
                for _ in 0..n_views {
                    let rec = take(&bytes, &mut off, 12)?;
                    let kind = CorrKind::from_byte(rec[7]).ok_or_else(|| {
                        CorrespondenceError::Malformed(format!("unknown kind byte {}", rec[7]))
                    })?;
                    let valid = match rec[6] {
                        0 => false,
                        1 => true,
                        other => {
                            return Err(CorrespondenceError::Malformed(format!(
                                "bad validity byte {other}"
                            )))
                        }
                    };
                    let score = f32::from_le_bytes([rec[8], rec[9], rec[10], rec[11]]);
                    entries.push(CorrEntry {
                        target_view: u16_from(&rec[0..2]),
                        tx: u16_from(&rec[2..4]),
                        ty: u16_from(&rec[4..6]),
                        valid,
                        kind,
                        score,
                    });
                }
            }
        }
    }
    if off != bytes.len() {
        return Err(CorrespondenceError::Truncated);
    }
    CorrespondenceSet::from_entries(n_views, grid_w, grid_h, entries)
}
