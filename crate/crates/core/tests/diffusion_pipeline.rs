//! End-to-end properties of the DDIM engine and the two-stage pipeline:
//! bijectivity with the mixer denoiser, record bookkeeping, degenerate
//! equivalences and the cross-view consistency direction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvcorr_core::correspondence::{CorrEntry, CorrKind, CorrespondenceSet};
use mvcorr_core::diffusion::{
    ddim_invert, ddim_sample, Conditioning, NoHook, NoisePredictor, Recorder, Schedule,
};
use mvcorr_core::grid::FeatureGrid;
use mvcorr_core::pipeline::{
    consistency_score, ensure_correspondences, extract_semantic_features, joint_edit,
    per_view_edit, EditSession, PipelineError,
};
use mvcorr_core::predictors::{MixerPredictor, ZeroPredictor};
use mvcorr_core::synthetic::{generate, SceneKind, SceneSpec};

fn rand_grid(seed: u64, w: usize, h: usize, d: usize) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureGrid::from_fn(w, h, d, |_, _, _| rng.random_range(-1.0..1.0f32)).unwrap()
}

fn mse(a: &FeatureGrid, b: &FeatureGrid) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64
}

#[test]
fn mixer_invert_then_sample_is_a_bijection() {
    let sched = Schedule::new(20).unwrap();
    let pred = MixerPredictor::new(16, 42);
    let cond = Conditioning::seeded(16, 7, 0.2);
    let x0 = rand_grid(1, 16, 16, 16);
    let (z, record) = ddim_invert(&x0, &sched, &pred, &cond).unwrap();
    assert_eq!(record.len(), 20 * pred.n_layers());
    let back = ddim_sample(&z, &sched, &pred, &cond, &mut NoHook).unwrap();
    let err = mse(&back, &x0);
    assert!(err < 1e-4, "round trip MSE {err}");
}

#[test]
fn record_covers_every_step_layer_pair() {
    let sched = Schedule::new(5).unwrap();
    let pred = MixerPredictor::new(8, 3);
    let x0 = rand_grid(2, 6, 6, 8);
    let (_, record) = ddim_invert(&x0, &sched, &pred, &Conditioning::none()).unwrap();
    assert_eq!(record.len(), 5 * 2);
    for step in 0..5 {
        for layer in 0..2 {
            assert!(record.get(step, layer).is_some(), "missing ({step},{layer})");
        }
    }
}

fn scene_session(
    kind: SceneKind,
    n: usize,
    size: usize,
    seed: u64,
    noise: f32,
    steps: usize,
) -> EditSession {
    scene_session_scaled(kind, n, size, seed, noise, steps, 1.0)
}

fn scene_session_scaled(
    kind: SceneKind,
    n: usize,
    size: usize,
    seed: u64,
    noise: f32,
    steps: usize,
    texture_scale: f64,
) -> EditSession {
    let spec = SceneSpec {
        feat_dim: 8,
        texture_scale,
        ..SceneSpec::new(kind, n, size, seed)
    };
    let scene = generate(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(999));
    let latents: Vec<FeatureGrid> = scene
        .features
        .iter()
        .map(|f| {
            let data: Vec<f32> = f
                .data()
                .iter()
                .map(|v| v + rng.random_range(-noise..=noise))
                .collect();
            f.with_data(data).unwrap()
        })
        .collect();
    EditSession::new(
        scene.batch,
        latents,
        Schedule::new(steps).unwrap(),
        0.3,
        0.9,
        spec.patch,
    )
    .unwrap()
}

#[test]
fn zero_predictor_edit_returns_the_inputs() {
    let session = scene_session(SceneKind::Plane, 2, 32, 5, 0.0, 8);
    let (cands, records) = per_view_edit(
        &session,
        &ZeroPredictor,
        &Conditioning::seeded(8, 1, 0.5),
    )
    .unwrap();
    assert_eq!(cands.len(), 2);
    for (c, l) in cands.iter().zip(&session.latents) {
        assert!(mse(c, l) < 1e-4);
    }
    assert!(records.iter().all(|r| r.is_empty()));
}

#[test]
fn identical_views_give_bitwise_identical_candidates() {
    let mut session = scene_session(SceneKind::Plane, 4, 32, 8, 0.0, 6);
    let common = session.latents[0].clone();
    session.latents = vec![common; 4];
    let pred = MixerPredictor::new(8, 11);
    let (cands, _) = per_view_edit(&session, &pred, &Conditioning::seeded(8, 2, 0.2)).unwrap();
    for c in &cands[1..] {
        assert_eq!(c.data(), cands[0].data());
    }
}

fn self_only_corr(n: usize, w: usize, h: usize) -> CorrespondenceSet {
    let mut entries = Vec::new();
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                for i in 0..n {
                    entries.push(CorrEntry {
                        target_view: i,
                        tx: x,
                        ty: y,
                        valid: i == s,
                        kind: if i == s {
                            CorrKind::SelfRef
                        } else {
                            CorrKind::Semantic
                        },
                        score: 0.0,
                    });
                }
            }
        }
    }
    CorrespondenceSet::from_entries(n, w, h, entries).unwrap()
}

#[test]
fn degenerate_joint_edit_equals_per_view_edit() {
    // lambda = 0 disables the reference blend; a self-only correspondence
    // set with identity projections makes the constrained attention a
    // pass-through, so the joint pass must reproduce stage one.
    let mut session = scene_session(SceneKind::Plane, 3, 32, 13, 0.05, 6);
    session.lambda = 0.0;
    session.reuse_projections = false;
    let grid_w = session.latents[0].grid_w();
    let grid_h = session.latents[0].grid_h();
    let cs = self_only_corr(3, grid_w, grid_h);
    let mask = mvcorr_core::correspondence::AttentionMask::from_set(&cs);
    session.corr = Some((cs, mask));

    let pred = MixerPredictor::new(8, 17);
    let cond = Conditioning::seeded(8, 3, 0.2);
    let (cands, records) = per_view_edit(&session, &pred, &cond).unwrap();
    session.records = records;
    session.set_reference(1).unwrap();
    let joint = joint_edit(&mut session, &pred, &cond).unwrap();
    for (j, c) in joint.iter().zip(&cands) {
        let err = mse(j, c);
        assert!(err < 1e-10, "joint differs from per-view: MSE {err}");
    }
}

#[test]
fn joint_edit_requires_reference_and_records() {
    let mut session = scene_session(SceneKind::Plane, 2, 32, 19, 0.0, 4);
    let pred = MixerPredictor::new(8, 23);
    let cond = Conditioning::none();
    assert!(matches!(
        joint_edit(&mut session, &pred, &cond),
        Err(PipelineError::MissingReference)
    ));
    session.set_reference(0).unwrap();
    assert!(matches!(
        joint_edit(&mut session, &pred, &cond),
        Err(PipelineError::MissingRecords(_))
    ));
    let (_, records) = per_view_edit(&session, &pred, &cond).unwrap();
    session.records = records;
    // Punch a hole in the reference record: typed error names the key.
    session.records[0].remove(2, 1).unwrap();
    assert!(matches!(
        joint_edit(&mut session, &pred, &cond),
        Err(PipelineError::MissingReferenceRecord { step: 2, layer: 1 })
    ));
}

#[test]
fn correspondences_do_not_depend_on_the_reference_choice() {
    let pred = MixerPredictor::new(8, 29);
    let build = |reference: usize| {
        let mut session = scene_session(SceneKind::Plane, 3, 32, 23, 0.02, 4);
        let cond = Conditioning::seeded(8, 4, 0.2);
        let (_, records) = per_view_edit(&session, &pred, &cond).unwrap();
        session.records = records;
        session.set_reference(reference).unwrap();
        let _ = joint_edit(&mut session, &pred, &cond).unwrap();
        session.corr.unwrap().0
    };
    assert_eq!(build(0), build(2));
}

#[test]
fn full_pipeline_is_deterministic() {
    let run = || {
        let mut session = scene_session(SceneKind::Plane, 3, 32, 31, 0.05, 6);
        let pred = MixerPredictor::new(8, 37);
        let cond = Conditioning::seeded(8, 5, 0.2);
        let (cands, records) = per_view_edit(&session, &pred, &cond).unwrap();
        session.records = records;
        session.set_reference(0).unwrap();
        let joint = joint_edit(&mut session, &pred, &cond).unwrap();
        (cands, joint)
    };
    let (c1, j1) = run();
    let (c2, j2) = run();
    for (a, b) in c1.iter().zip(&c2).chain(j1.iter().zip(&j2)) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn semantic_feature_extraction_matches_record_shape() {
    let session = scene_session(SceneKind::Plane, 2, 32, 41, 0.0, 6);
    let pred = MixerPredictor::new(8, 43);
    let feats = extract_semantic_features(&session.latents, &session.schedule, &pred).unwrap();
    assert_eq!(feats.len(), 2);
    for (f, l) in feats.iter().zip(&session.latents) {
        assert!(f.same_shape(l));
    }
    assert!(matches!(
        extract_semantic_features(&session.latents, &session.schedule, &ZeroPredictor),
        Err(PipelineError::NoFeatureLayers)
    ));
}

/// Mean per-channel variance across views at corresponding positions,
/// using view 0's fully valid groups as the correspondence classes.
fn cross_view_variance(grids: &[FeatureGrid], cs: &CorrespondenceSet) -> f64 {
    let d = grids[0].dim();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y in 0..cs.grid_h() {
        for x in 0..cs.grid_w() {
            let group = cs.group(0, x, y);
            if !group.iter().all(|e| e.valid) {
                continue;
            }
            for c in 0..d {
                let vals: Vec<f64> = group
                    .iter()
                    .map(|e| grids[e.target_view].token(e.tx, e.ty)[c] as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / vals.len() as f64;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn joint_editing_improves_cross_view_consistency() {
    // Texture smooth at token scale, the way real multi-view renders are:
    // corresponding tokens carry near-equal features, so the measured
    // inconsistency is the per-view editing divergence the joint
    // constraints are meant to suppress.
    let mut session = scene_session_scaled(SceneKind::Plane, 4, 64, 47, 0.05, 20, 0.15);
    session.reuse_projections = false;
    let pred = MixerPredictor::new(8, 53);
    let cond = Conditioning::seeded(8, 6, 1.5);
    let (cands, records) = per_view_edit(&session, &pred, &cond).unwrap();
    session.records = records;
    session.set_reference(0).unwrap();
    let joint = joint_edit(&mut session, &pred, &cond).unwrap();

    let (cs, _) = session.corr.as_ref().unwrap();
    let score_joint = consistency_score(&joint, cs).unwrap();
    let score_ind = consistency_score(&cands, cs).unwrap();
    assert!(
        score_joint < score_ind,
        "joint {score_joint} not below per-view {score_ind}"
    );
    let var_joint = cross_view_variance(&joint, cs);
    let var_ind = cross_view_variance(&cands, cs);
    assert!(
        var_joint <= var_ind,
        "variance grew: {var_joint} vs {var_ind}"
    );
}

#[test]
fn single_view_joint_edit_runs_and_is_finite() {
    let mut session = scene_session(SceneKind::Plane, 1, 32, 59, 0.0, 4);
    let pred = MixerPredictor::new(8, 61);
    let cond = Conditioning::seeded(8, 8, 0.2);
    let (cands, records) = per_view_edit(&session, &pred, &cond).unwrap();
    session.records = records;
    session.set_reference(0).unwrap();
    ensure_correspondences(&mut session, &pred).unwrap();
    let joint = joint_edit(&mut session, &pred, &cond).unwrap();
    assert_eq!(joint.len(), 1);
    assert!(joint[0].data().iter().all(|v| v.is_finite()));
    assert_eq!(cands.len(), 1);
}
