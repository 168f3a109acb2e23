//! Two-stage selective editing: independent per-view edits with feature
//! recording, reference selection, then a joint pass in which every
//! attention layer is replaced by reference attention onto the selected
//! edit's recorded features followed by correspondence-constrained
//! attention across views. Correspondences are applied during both the
//! joint inversion and the joint sampling pass; reference attention only
//! during sampling.

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{
    cca, reference_attention, self_attention, AttentionError, AttentionWeights, RAConfig,
};
use crate::batch::MultiViewBatch;
use crate::correspondence::{
    build_correspondences, cosine, latent_grid_dims, AttentionMask, CorrKind, CorrespondenceError,
    CorrespondenceSet,
};
use crate::diffusion::{
    invert_views, sample_views, AttentionHook, Conditioning, DiffusionError, FeatureRecord,
    NoisePredictor, Recorder, Schedule,
};
use crate::grid::{FeatureGrid, GridError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no reference selected: set reference_index before the joint pass")]
    MissingReference,
    #[error("reference index {index} out of range for {n_views} views")]
    ReferenceOutOfRange { index: usize, n_views: usize },
    #[error("missing per-view records: {0}")]
    MissingRecords(String),
    #[error("missing reference record for step {step} layer {layer}")]
    MissingReferenceRecord { step: usize, layer: usize },
    #[error("selection error: {0}")]
    Selection(String),
    #[error("consistency score undefined: no valid geometric correspondences")]
    UndefinedScore,
    #[error("predictor exposes no feature layers to record")]
    NoFeatureLayers,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// State threaded through one editing run.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub batch: MultiViewBatch,
    pub latents: Vec<FeatureGrid>,
    pub schedule: Schedule,
    pub lambda: f32,
    pub beta: f32,
    pub patch: usize,
    pub tol_px: f64,
    pub tol_depth: f64,
    pub reuse_projections: bool,
    pub reference_index: Option<usize>,
    pub records: Vec<FeatureRecord>,
    pub corr: Option<(CorrespondenceSet, AttentionMask)>,
}

impl EditSession {
    pub fn new(
        batch: MultiViewBatch,
        latents: Vec<FeatureGrid>,
        schedule: Schedule,
        lambda: f32,
        beta: f32,
        patch: usize,
    ) -> Result<Self, PipelineError> {
        if latents.len() != batch.len() {
            return Err(PipelineError::ShapeMismatch(format!(
                "{} latents for {} views",
                latents.len(),
                batch.len()
            )));
        }
        if patch == 0 {
            return Err(PipelineError::ShapeMismatch("patch size 0".into()));
        }
        let (grid_w, grid_h) = latent_grid_dims(batch.width(), batch.height(), patch);
        let dim = latents[0].dim();
        for (i, l) in latents.iter().enumerate() {
            if l.grid_w() != grid_w || l.grid_h() != grid_h || l.dim() != dim {
                return Err(PipelineError::ShapeMismatch(format!(
                    "latent {i} is {}x{}x{}, expected {grid_w}x{grid_h}x{dim}",
                    l.grid_w(),
                    l.grid_h(),
                    l.dim()
                )));
            }
        }
        RAConfig::new(lambda)?;
        if !(0.0..=1.0).contains(&beta) {
            return Err(PipelineError::ShapeMismatch(format!(
                "beta {beta} outside [0, 1]"
            )));
        }
        Ok(Self {
            batch,
            latents,
            schedule,
            lambda,
            beta,
            patch,
            tol_px: crate::correspondence::DEFAULT_TOL_PX,
            tol_depth: crate::correspondence::DEFAULT_TOL_DEPTH,
            reuse_projections: true,
            reference_index: None,
            records: Vec::new(),
            corr: None,
        })
    }

    pub fn n_views(&self) -> usize {
        self.batch.len()
    }

    pub fn set_reference(&mut self, index: usize) -> Result<(), PipelineError> {
        if index >= self.n_views() {
            return Err(PipelineError::ReferenceOutOfRange {
                index,
                n_views: self.n_views(),
            });
        }
        self.reference_index = Some(index);
        Ok(())
    }
}

/// Stage one: every view is inverted from its own latent (unconditioned)
/// and re-sampled with the edit conditioning, independently of the others.
/// Returns the candidate edits and the per-view feature records of the
/// sampling pass, which carry each candidate's editing pattern.
pub fn per_view_edit(
    session: &EditSession,
    pred: &dyn NoisePredictor,
    cond: &Conditioning,
) -> Result<(Vec<FeatureGrid>, Vec<FeatureRecord>), PipelineError> {
    let results: Vec<(FeatureGrid, FeatureRecord)> = session
        .latents
        .par_iter()
        .map(|latent| {
            let one = std::slice::from_ref(latent);
            let mut no_record = crate::diffusion::NoHook;
            let z = invert_views(
                one,
                &session.schedule,
                pred,
                &Conditioning::none(),
                &mut no_record,
            )?;
            let mut recorder = Recorder::new(1);
            let out = sample_views(&z, &session.schedule, pred, cond, &mut recorder)?;
            let record = recorder
                .into_records()
                .pop()
                .expect("recorder built for one view");
            Ok((out.into_iter().next().expect("one view"), record))
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(results.into_iter().unzip())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub view: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub enum SelectionMode {
    Manual(usize),
    Auto(Vec<CandidateScore>),
}

/// Picks the reference edit: manual index pass-through or argmax score,
/// ties broken toward the lowest view index.
pub fn select_reference(
    candidates: &[FeatureGrid],
    mode: &SelectionMode,
) -> Result<usize, PipelineError> {
    let n = candidates.len();
    match mode {
        SelectionMode::Manual(i) => {
            if *i >= n {
                return Err(PipelineError::Selection(format!(
                    "manual index {i} out of range for {n} candidates"
                )));
            }
            Ok(*i)
        }
        SelectionMode::Auto(scores) => {
            let mut by_view = vec![None; n];
            for s in scores {
                if s.view >= n {
                    return Err(PipelineError::Selection(format!(
                        "score for view {} out of range ({n} candidates)",
                        s.view
                    )));
                }
                if !s.score.is_finite() {
                    return Err(PipelineError::Selection(format!(
                        "non-finite score for view {}",
                        s.view
                    )));
                }
                if by_view[s.view].replace(s.score).is_some() {
                    return Err(PipelineError::Selection(format!(
                        "duplicate score for view {}",
                        s.view
                    )));
                }
            }
            let mut best: Option<(usize, f64)> = None;
            for (view, slot) in by_view.iter().enumerate() {
                let score = slot.ok_or_else(|| {
                    PipelineError::Selection(format!("missing score for view {view}"))
                })?;
                if best.map_or(true, |(_, b)| score > b) {
                    best = Some((view, score));
                }
            }
            Ok(best.expect("validated nonempty").0)
        }
    }
}

/// Parses the score file format: one `view_index score` pair per line,
/// blank lines and `#` comments ignored.
pub fn parse_scores(text: &str) -> Result<Vec<CandidateScore>, PipelineError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let bad = || PipelineError::Selection(format!("bad score line {}: {line}", lineno + 1));
        let view = tok.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let score = tok.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        if tok.next().is_some() {
            return Err(bad());
        }
        out.push(CandidateScore { view, score });
    }
    Ok(out)
}

/// Features used for semantic correspondence: the last attention layer's
/// recorded input from a single inversion step over the source latents
/// (step index 0 of the recorder).
pub fn extract_semantic_features(
    latents: &[FeatureGrid],
    schedule: &Schedule,
    pred: &dyn NoisePredictor,
) -> Result<Vec<FeatureGrid>, PipelineError> {
    let layers = pred.n_layers();
    if layers == 0 {
        return Err(PipelineError::NoFeatureLayers);
    }
    let single = schedule.prefix(1)?;
    let mut recorder = Recorder::new(latents.len());
    invert_views(latents, &single, pred, &Conditioning::none(), &mut recorder)?;
    recorder
        .into_records()
        .into_iter()
        .enumerate()
        .map(|(i, mut rec)| {
            rec.remove(0, layers - 1).ok_or_else(|| {
                PipelineError::MissingRecords(format!("no last-layer feature for view {i}"))
            })
        })
        .collect()
}

/// Builds (and caches) the correspondence set for the session if absent.
pub fn ensure_correspondences(
    session: &mut EditSession,
    pred: &dyn NoisePredictor,
) -> Result<(), PipelineError> {
    if session.corr.is_some() {
        return Ok(());
    }
    let feats = extract_semantic_features(&session.latents, &session.schedule, pred)?;
    let (cs, mask) = build_correspondences(
        &session.batch,
        &feats,
        session.patch,
        session.beta,
        session.tol_px,
        session.tol_depth,
    )?;
    session.corr = Some((cs, mask));
    Ok(())
}

/// Attention-layer replacement used in the joint pass: optionally
/// reference attention toward recorded features, always followed by
/// correspondence-constrained attention across views.
struct InjectionHook<'a> {
    corr: &'a CorrespondenceSet,
    mask: &'a AttentionMask,
    reuse_projections: bool,
    reference: Option<(&'a FeatureRecord, RAConfig)>,
}

impl AttentionHook for InjectionHook<'_> {
    fn on_attention(
        &mut self,
        step: usize,
        layer: usize,
        weights: &AttentionWeights,
        inputs: &[FeatureGrid],
    ) -> Result<Option<Vec<FeatureGrid>>, DiffusionError> {
        let z: Vec<FeatureGrid> = match &self.reference {
            Some((record, cfg)) => {
                let f_ref = record.get(step, layer).ok_or_else(|| {
                    DiffusionError::Hook(format!(
                        "missing reference record for step {step} layer {layer}"
                    ))
                })?;
                inputs
                    .iter()
                    .map(|f| reference_attention(f, f_ref, weights, *cfg))
                    .collect::<Result<_, _>>()?
            }
            None => inputs
                .iter()
                .map(|f| self_attention(f, weights))
                .collect::<Result<_, _>>()?,
        };
        Ok(Some(cca(
            &z,
            self.corr,
            self.mask,
            weights,
            self.reuse_projections,
        )?))
    }
}

/// Stage two: joint constrained editing of all views. Requires a selected
/// reference and that view's sampling-pass records from stage one.
pub fn joint_edit(
    session: &mut EditSession,
    pred: &dyn NoisePredictor,
    cond: &Conditioning,
) -> Result<Vec<FeatureGrid>, PipelineError> {
    let n = session.n_views();
    let reference = session.reference_index.ok_or(PipelineError::MissingReference)?;
    if reference >= n {
        return Err(PipelineError::ReferenceOutOfRange {
            index: reference,
            n_views: n,
        });
    }
    if session.records.len() != n {
        return Err(PipelineError::MissingRecords(format!(
            "have {} records for {} views; run per_view_edit first",
            session.records.len(),
            n
        )));
    }
    // Record matching is by exact (step, layer) key; verify totality up
    // front so a gap surfaces as a typed error, not mid-run.
    for step in 0..session.schedule.n_steps() {
        for layer in 0..pred.n_layers() {
            if session.records[reference].get(step, layer).is_none() {
                return Err(PipelineError::MissingReferenceRecord { step, layer });
            }
        }
    }
    ensure_correspondences(session, pred)?;
    let record = &session.records[reference];
    let (cs, mask) = session.corr.as_ref().expect("just ensured");

    let mut invert_hook = InjectionHook {
        corr: cs,
        mask,
        reuse_projections: session.reuse_projections,
        reference: None,
    };
    let z = invert_views(
        &session.latents,
        &session.schedule,
        pred,
        &Conditioning::none(),
        &mut invert_hook,
    )?;

    let ra = RAConfig::new(session.lambda)?;
    let mut sample_hook = InjectionHook {
        corr: cs,
        mask,
        reuse_projections: session.reuse_projections,
        reference: Some((record, ra)),
    };
    Ok(sample_views(
        &z,
        &session.schedule,
        pred,
        cond,
        &mut sample_hook,
    )?)
}

/// Warped-feature consistency: one minus the mean cosine similarity over
/// all valid geometric correspondences. 0 is perfectly consistent, 2 is
/// anti-aligned; lower is better.
pub fn consistency_score(
    grids: &[FeatureGrid],
    cs: &CorrespondenceSet,
) -> Result<f64, PipelineError> {
    if grids.len() != cs.n_views() {
        return Err(PipelineError::ShapeMismatch(format!(
            "{} grids for a {}-view correspondence set",
            grids.len(),
            cs.n_views()
        )));
    }
    for (i, g) in grids.iter().enumerate() {
        if g.grid_w() != cs.grid_w() || g.grid_h() != cs.grid_h() {
            return Err(PipelineError::ShapeMismatch(format!(
                "grid {i} is {}x{}, correspondence set is {}x{}",
                g.grid_w(),
                g.grid_h(),
                cs.grid_w(),
                cs.grid_h()
            )));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (s, x, y, group) in cs.iter_groups() {
        for e in group {
            if e.valid && e.kind == CorrKind::Geometric {
                sum += cosine(grids[s].token(x, y), grids[e.target_view].token(e.tx, e.ty))
                    as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(PipelineError::UndefinedScore);
    }
    Ok(1.0 - sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(seed: u64, w: usize, h: usize, d: usize) -> FeatureGrid {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid::from_fn(w, h, d, |_, _, _| rng.random_range(-1.0..1.0f32)).unwrap()
    }

    #[test]
    fn manual_selection_validates_range() {
        let cands = vec![grid(1, 2, 2, 4); 4];
        assert_eq!(
            select_reference(&cands, &SelectionMode::Manual(2)).unwrap(),
            2
        );
        assert!(select_reference(&cands, &SelectionMode::Manual(4)).is_err());
    }

    #[test]
    fn auto_selection_prefers_lowest_index_on_ties() {
        let cands = vec![grid(1, 2, 2, 4); 3];
        let scores = vec![
            CandidateScore { view: 0, score: 0.1 },
            CandidateScore { view: 1, score: 0.9 },
            CandidateScore { view: 2, score: 0.9 },
        ];
        assert_eq!(
            select_reference(&cands, &SelectionMode::Auto(scores)).unwrap(),
            1
        );
    }

    #[test]
    fn auto_selection_takes_argmax() {
        let cands = vec![grid(1, 2, 2, 4); 3];
        let scores = (0..3)
            .map(|v| CandidateScore {
                view: v,
                score: v as f64,
            })
            .collect();
        assert_eq!(
            select_reference(&cands, &SelectionMode::Auto(scores)).unwrap(),
            2
        );
    }

    #[test]
    fn auto_selection_rejects_missing_and_duplicate_scores() {
        let cands = vec![grid(1, 2, 2, 4); 2];
        let missing = vec![CandidateScore { view: 0, score: 1.0 }];
        assert!(select_reference(&cands, &SelectionMode::Auto(missing)).is_err());
        let dup = vec![
            CandidateScore { view: 0, score: 1.0 },
            CandidateScore { view: 0, score: 2.0 },
        ];
        assert!(select_reference(&cands, &SelectionMode::Auto(dup)).is_err());
    }

    #[test]
    fn score_file_parses_and_rejects_garbage() {
        let scores = parse_scores("# comment\n0 0.5\n1 -2.25\n\n").unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[1].view, 1);
        assert!(parse_scores("0 0.5 extra\n").is_err());
        assert!(parse_scores("zero 0.5\n").is_err());
    }

    #[test]
    fn consistency_score_trivial_values() {
        use crate::correspondence::CorrEntry;
        // Two views, one token each, cross-linked geometrically.
        let entry = |tv: usize, kind: CorrKind| CorrEntry {
            target_view: tv,
            tx: 0,
            ty: 0,
            valid: true,
            kind,
            score: 0.0,
        };
        let cs = CorrespondenceSet::from_entries(
            2,
            1,
            1,
            vec![
                entry(0, CorrKind::SelfRef),
                entry(1, CorrKind::Geometric),
                entry(1, CorrKind::SelfRef),
                entry(0, CorrKind::Geometric),
            ],
        )
        .unwrap();
        let a = FeatureGrid::new(1, 1, 3, vec![0.2, -0.4, 1.0]).unwrap();
        let same = consistency_score(&[a.clone(), a.clone()], &cs).unwrap();
        assert!(same.abs() < 1e-6);
        let neg = a
            .with_data(a.data().iter().map(|v| -v).collect())
            .unwrap();
        let anti = consistency_score(&[a.clone(), neg], &cs).unwrap();
        assert!((anti - 2.0).abs() < 1e-6);
    }

    #[test]
    fn consistency_score_without_geometry_is_undefined() {
        use crate::correspondence::CorrEntry;
        let cs = CorrespondenceSet::from_entries(
            1,
            1,
            1,
            vec![CorrEntry {
                target_view: 0,
                tx: 0,
                ty: 0,
                valid: true,
                kind: CorrKind::SelfRef,
                score: 0.0,
            }],
        )
        .unwrap();
        let g = grid(3, 1, 1, 4);
        assert!(matches!(
            consistency_score(&[g], &cs),
            Err(PipelineError::UndefinedScore)
        ));
    }
}
