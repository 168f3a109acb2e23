//! `mvcorr verify`: re-derives a generated scene's closed forms and checks
//! the geometry, correspondence and mask invariants against them, one
//! PASS/FAIL line per property.

use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;

use mvcorr_core::correspondence::{
    build_correspondences, token_center, AttentionMask, CorrKind,
};
use mvcorr_core::geometry::{back_project, geometric_match, project};
use mvcorr_core::synthetic::{load_scene, SceneKind};

use crate::CliError;

#[derive(Args)]
pub struct VerifyArgs {
    /// Scene directory produced by `gen`.
    #[arg(long)]
    scene: PathBuf,
    /// Round-trip tolerance in latent tokens.
    #[arg(long, default_value_t = 1.0)]
    tol_px: f64,
    /// Relative depth-consistency tolerance.
    #[arg(long, default_value_t = 0.05)]
    tol_depth: f64,
    /// Semantic similarity threshold for the correspondence build.
    #[arg(long, default_value_t = 0.9)]
    beta: f32,
}

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, details: String) {
        if pass {
            println!("PASS {name}: {details}");
        } else {
            println!("FAIL {name}: {details}");
            self.failures += 1;
        }
    }
}

pub fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let scene = load_scene(&args.scene).context("loading scene")?;
    let n = scene.spec.n_views;
    let size = scene.spec.image_size;
    let mut report = Report { failures: 0 };

    // Depth maps equal the analytic primitive distance, 0 on miss.
    let mut depth_err = 0.0f64;
    let mut depth_bad = 0usize;
    for v in 0..n {
        for y in (0..size).step_by(3) {
            for x in (0..size).step_by(3) {
                let d = scene.batch.depths()[v].pixel(x, y)[0] as f64;
                match scene.oracle.hit(v, (x as f64, y as f64)) {
                    Some(hit) => {
                        if d <= 0.0 {
                            depth_bad += 1;
                        } else {
                            depth_err = depth_err.max((d - hit.depth).abs() / hit.depth);
                        }
                    }
                    None => {
                        if d != 0.0 {
                            depth_bad += 1;
                        }
                    }
                }
            }
        }
    }
    report.check(
        "depth_analytic",
        depth_bad == 0 && depth_err < 1e-6,
        format!("max rel err {depth_err:.2e}, {depth_bad} hit/miss mismatches"),
    );

    // project(back_project(p, z)) returns to p.
    let mut proj_err = 0.0f64;
    for (v, cam) in scene.batch.cameras().iter().enumerate() {
        for i in 0..250 {
            let px = (
                (i * 37 % size) as f64 + 0.25,
                ((i * 61 + v * 17) % size) as f64 + 0.5,
            );
            let depth = 0.5 + (i % 13) as f64 * 0.7;
            let w = back_project(px, depth, cam).map_err(|e| anyhow!(e))?;
            let (x, y, z) = project(&w, cam).map_err(|e| anyhow!(e))?;
            proj_err = proj_err
                .max((x - px.0).abs())
                .max((y - px.1).abs())
                .max((z - depth).abs());
        }
    }
    report.check(
        "projection_round_trip",
        proj_err < 1e-5,
        format!("max err {proj_err:.2e} over {} samples", 250 * n),
    );

    // Oracle transfer symmetry for mutually visible pixels.
    let mut sym_err = 0.0f64;
    let mut sym_count = 0usize;
    if n > 1 {
        for y in (0..size).step_by(7) {
            for x in (0..size).step_by(7) {
                let p = (x as f64, y as f64);
                let Some(fwd) = scene.oracle.transfer(0, p, n - 1) else {
                    continue;
                };
                if !fwd.visible {
                    continue;
                }
                let Some(back) = scene.oracle.transfer(n - 1, (fwd.x, fwd.y), 0) else {
                    continue;
                };
                if back.projected {
                    sym_err = sym_err.max((back.x - p.0).abs()).max((back.y - p.1).abs());
                    sym_count += 1;
                }
            }
        }
    }
    report.check(
        "oracle_symmetry",
        sym_err < 1e-6,
        format!("max err {sym_err:.2e} over {sym_count} mutually visible samples"),
    );

    // Geometric matches at token centers agree with the oracle transfer.
    let patch = scene.spec.patch;
    let grid = size / patch;
    let mut match_total = 0usize;
    let mut match_good = 0usize;
    let tol_px_image = args.tol_px * patch as f64;
    for s in 0..n {
        for a in 0..n {
            if s == a {
                continue;
            }
            for ty in 0..grid {
                for tx in 0..grid {
                    let px = (token_center(tx, patch), token_center(ty, patch));
                    let Some(t) = scene.oracle.transfer(s, px, a) else {
                        continue;
                    };
                    if !t.visible {
                        continue;
                    }
                    let back = scene.oracle.transfer(a, (t.x, t.y), s);
                    if !back.is_some_and(|b| b.visible) {
                        continue;
                    }
                    match_total += 1;
                    let m = geometric_match(px, s, a, &scene.batch, tol_px_image, args.tol_depth)
                        .map_err(|e| anyhow!(e))?;
                    if m.valid
                        && (m.x - t.x).hypot(m.y - t.y) <= 0.5 * patch as f64
                    {
                        match_good += 1;
                    }
                }
            }
        }
    }
    let match_rate = if match_total == 0 {
        1.0
    } else {
        match_good as f64 / match_total as f64
    };
    report.check(
        "geometric_match_oracle",
        match_rate >= 0.99,
        format!("{match_good}/{match_total} matches within half a token of the oracle"),
    );

    // Occlusion masking, for scenes that have an occluder.
    if matches!(
        scene.spec.kind,
        SceneKind::PlaneWithOccluder | SceneKind::MirroredTexture
    ) && n > 1
    {
        let (s, a) = (0usize, n - 1);
        let mut occ = (0usize, 0usize);
        let mut vis = (0usize, 0usize);
        for y in 0..size {
            for x in 0..size {
                let px = (x as f64, y as f64);
                let Some(t) = scene.oracle.transfer(s, px, a) else {
                    continue;
                };
                let blocked = scene.oracle.occluded_in(s, px, a).unwrap_or(false);
                let m = geometric_match(px, s, a, &scene.batch, args.tol_px * patch as f64, args.tol_depth)
                    .map_err(|e| anyhow!(e))?;
                if blocked {
                    occ.0 += 1;
                    if !m.valid {
                        occ.1 += 1;
                    }
                } else if t.visible {
                    vis.0 += 1;
                    if m.valid {
                        vis.1 += 1;
                    }
                }
            }
        }
        let detected = occ.1 as f64 / occ.0.max(1) as f64;
        let false_invalid = 1.0 - vis.1 as f64 / vis.0.max(1) as f64;
        report.check(
            "occlusion_mask",
            detected >= 0.99 && false_invalid < 0.01,
            format!(
                "{:.2}% of {} occluded pixels masked, {:.2}% false-invalid over {} visible",
                detected * 100.0,
                occ.0,
                false_invalid * 100.0,
                vis.0
            ),
        );
    }

    // Correspondence build invariants and determinism.
    let build = || {
        build_correspondences(
            &scene.batch,
            &scene.features,
            patch,
            args.beta,
            args.tol_px,
            args.tol_depth,
        )
    };
    let (cs, mask) = build().map_err(|e| anyhow!(e))?;
    let (cs2, _) = build().map_err(|e| anyhow!(e))?;
    report.check(
        "correspondence_determinism",
        cs == cs2,
        "two builds produce identical sets".into(),
    );

    let mut group_ok = true;
    let mut mask_ok = true;
    for (s, x, y, group) in cs.iter_groups() {
        let mut seen = vec![false; n];
        let mut has_self = false;
        for (e, b) in group.iter().zip(mask.group(s, x, y)) {
            if seen[e.target_view] {
                group_ok = false;
            }
            seen[e.target_view] = true;
            if e.kind == CorrKind::SelfRef {
                has_self = e.valid && e.target_view == s && e.tx == x && e.ty == y;
            }
            if e.valid != (*b == 0.0) {
                mask_ok = false;
            }
        }
        if !(has_self && seen.iter().all(|&s| s)) {
            group_ok = false;
        }
    }
    report.check(
        "correspondence_groups",
        group_ok,
        format!("{} groups with one entry per view and a valid self entry", cs.n_tokens() * n),
    );
    report.check(
        "mask_alignment",
        mask_ok,
        "attention mask bias is 0 exactly on valid entries".into(),
    );
    let _ = AttentionMask::from_set(&cs);

    if report.failures > 0 {
        return Err(CliError::Runtime(anyhow!(
            "{} verification properties failed",
            report.failures
        )));
    }
    println!("all properties passed");
    Ok(())
}
