//! mvcorr: generate oracle scenes, build correspondence sets, run the
//! two-stage constrained editing pipeline, score cross-view consistency
//! and verify a scene against its closed forms.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mvcorr_core::correspondence::{
    build_correspondences, deserialize_correspondences, serialize_correspondences, AttentionMask,
    CorrKind, CorrespondenceSet,
};
use mvcorr_core::diffusion::{Conditioning, Schedule};
use mvcorr_core::grid::FeatureGrid;
use mvcorr_core::mvdt::{read_feature_grid, write_feature_grid};
use mvcorr_core::pipeline::{
    consistency_score, ensure_correspondences, joint_edit, parse_scores, per_view_edit,
    select_reference, EditSession, SelectionMode,
};
use mvcorr_core::predictors::MixerPredictor;
use mvcorr_core::synthetic::{generate, load_scene, write_scene, SceneKind, SceneSpec};

mod verify;

#[derive(Parser)]
#[command(
    name = "mvcorr",
    version,
    about = "Multi-view correspondence and constrained-attention editing toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene directory with exact depth and oracles.
    Gen(GenArgs),
    /// Build the correspondence set for a scene and write an MVCR file.
    Corr(CorrArgs),
    /// Run the two-stage selective editing pipeline on a scene.
    Edit(EditArgs),
    /// Compute the warped-feature consistency score of a set of grids.
    Score(ScoreArgs),
    /// Check a generated scene against its oracle and invariants.
    Verify(verify::VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Plane,
    Sphere,
    PlaneOccluder,
    Mirrored,
}

impl From<KindArg> for SceneKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Plane => SceneKind::Plane,
            KindArg::Sphere => SceneKind::Sphere,
            KindArg::PlaneOccluder => SceneKind::PlaneWithOccluder,
            KindArg::Mirrored => SceneKind::MirroredTexture,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene primitive layout.
    #[arg(long, value_enum, default_value = "plane")]
    kind: KindArg,
    /// Number of views on the camera arc.
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Square image size in pixels (must be divisible by the patch size).
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Seed for the texture field.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera arc span in degrees.
    #[arg(long, default_value_t = 60.0)]
    span: f64,
    /// Feature dimension of the per-view token grids.
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    /// Latent patch size in pixels.
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Texture frequency multiplier (small = smooth at token scale).
    #[arg(long, default_value_t = 1.0)]
    texture_scale: f64,
}

#[derive(Args)]
struct CorrArgs {
    /// Scene directory produced by `gen`.
    #[arg(long)]
    scene: PathBuf,
    /// Output MVCR path (default: <scene>/correspondences.mvcr).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Semantic similarity threshold.
    #[arg(long, default_value_t = 0.9)]
    beta: f32,
    /// Round-trip tolerance in latent tokens.
    #[arg(long, default_value_t = 1.0)]
    tol_px: f64,
    /// Relative depth-consistency tolerance.
    #[arg(long, default_value_t = 0.05)]
    tol_depth: f64,
}

#[derive(Args)]
struct EditArgs {
    /// Scene directory produced by `gen`.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for candidates, edited grids and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Manual reference view index.
    #[arg(long)]
    reference: Option<usize>,
    /// Score file for automatic reference selection (one "view score" per line).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Reference attention blend weight.
    #[arg(long)]
    lambda: Option<f32>,
    /// Semantic similarity threshold.
    #[arg(long)]
    beta: Option<f32>,
    /// Diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for denoiser weights and the edit conditioning.
    #[arg(long)]
    seed: Option<u64>,
    /// Round-trip tolerance in latent tokens.
    #[arg(long)]
    tol_px: Option<f64>,
    /// Relative depth-consistency tolerance.
    #[arg(long)]
    tol_depth: Option<f64>,
    /// Amplitude of the seeded edit conditioning.
    #[arg(long)]
    cond_amp: Option<f32>,
    /// Reuse a prebuilt correspondence file instead of building one.
    #[arg(long)]
    corr: Option<PathBuf>,
    /// Use the bare attention form with identity projections in the
    /// correspondence-constrained step.
    #[arg(long, default_value_t = false)]
    literal_eq4: bool,
    /// Key-value config file; flags take precedence over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Correspondence file to score against.
    #[arg(long)]
    corr: PathBuf,
    /// Directory holding the grids.
    #[arg(long)]
    grids: PathBuf,
    /// File prefix: loads <prefix>_000.mvdt, <prefix>_001.mvdt, ...
    #[arg(long, default_value = "edited")]
    prefix: String,
}

/// Exit code 2 for usage problems that clap cannot see (missing combined
/// options), 1 for runtime failures.
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MVCORR_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("mvcorr: ignoring invalid MVCORR_THREADS={threads}");
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Corr(args) => cmd_corr(args),
        Cmd::Edit(args) => cmd_edit(args),
        Cmd::Score(args) => cmd_score(args),
        Cmd::Verify(args) => verify::cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let spec = SceneSpec {
        patch: args.patch,
        feat_dim: args.feat_dim,
        span_deg: args.span,
        texture_scale: args.texture_scale,
        ..SceneSpec::new(args.kind.into(), args.views, args.size, args.seed)
    };
    let scene = generate(&spec).context("scene generation failed")?;
    write_scene(&scene, &args.out).context("writing scene directory")?;
    println!(
        "wrote {} scene: {} views, {}x{} px, patch {}, feat dim {} -> {}",
        spec.kind,
        spec.n_views,
        spec.image_size,
        spec.image_size,
        spec.patch,
        spec.feat_dim,
        args.out.display()
    );
    Ok(())
}

fn summarize(cs: &CorrespondenceSet) -> String {
    let geo = cs.count_entries(|e| e.kind == CorrKind::Geometric);
    let sem_valid = cs.count_entries(|e| e.kind == CorrKind::Semantic && e.valid);
    let sem_masked = cs.count_entries(|e| e.kind == CorrKind::Semantic && !e.valid);
    let selves = cs.count_entries(|e| e.kind == CorrKind::SelfRef);
    format!(
        "{} source tokens x {} views: {geo} geometric, {sem_valid} semantic, {sem_masked} invalid (masked), {selves} self",
        cs.n_tokens() * cs.n_views(),
        cs.n_views()
    )
}

fn cmd_corr(args: CorrArgs) -> Result<(), CliError> {
    let scene = load_scene(&args.scene).context("loading scene")?;
    let (cs, _mask) = build_correspondences(
        &scene.batch,
        &scene.features,
        scene.spec.patch,
        args.beta,
        args.tol_px,
        args.tol_depth,
    )
    .context("building correspondences")?;
    let out = args
        .out
        .unwrap_or_else(|| args.scene.join("correspondences.mvcr"));
    serialize_correspondences(&cs, &out).context("writing MVCR file")?;
    println!("{}", summarize(&cs));
    println!("wrote {}", out.display());
    Ok(())
}

fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| anyhow!("config line {} is not 'key value'", lineno + 1))?;
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flag > config file > default.
fn resolve<T: std::str::FromStr>(
    flag: Option<T>,
    config: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match config.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| anyhow!("bad config value for {key}: {raw}")),
        None => Ok(default),
    }
}

fn cmd_edit(args: EditArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    let lambda = resolve(args.lambda, &config, "lambda", 0.3)?;
    let beta = resolve(args.beta, &config, "beta", 0.9)?;
    let steps = resolve(args.steps, &config, "steps", 20)?;
    let seed = resolve(args.seed, &config, "seed", 0)?;
    let tol_px = resolve(args.tol_px, &config, "tol_px", 1.0)?;
    let tol_depth = resolve(args.tol_depth, &config, "tol_depth", 0.05)?;
    let cond_amp = resolve(args.cond_amp, &config, "cond_amp", 1.5)?;
    let reference = match (args.reference, config.get("reference")) {
        (Some(i), _) => Some(i),
        (None, Some(raw)) => Some(
            raw.parse()
                .map_err(|_| anyhow!("bad config value for reference: {raw}"))?,
        ),
        (None, None) => None,
    };
    let scores_path = args
        .scores
        .clone()
        .or_else(|| config.get("scores").map(PathBuf::from));

    let mode = match (reference, &scores_path) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--reference and --scores are mutually exclusive".into(),
            ))
        }
        (Some(i), None) => SelectionMode::Manual(i),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading score file {}", p.display()))?;
            SelectionMode::Auto(parse_scores(&text).map_err(|e| anyhow!(e))?)
        }
        (None, None) => {
            return Err(CliError::Usage(
                "reference selection required: pass --reference <index> or --scores <file>".into(),
            ))
        }
    };

    let scene = load_scene(&args.scene).context("loading scene")?;
    let dim = scene.features[0].dim();
    let schedule = Schedule::new(steps).context("building schedule")?;
    let mut session = EditSession::new(
        scene.batch,
        scene.features,
        schedule,
        lambda,
        beta,
        scene.spec.patch,
    )
    .context("building edit session")?;
    session.tol_px = tol_px;
    session.tol_depth = tol_depth;
    session.reuse_projections = !args.literal_eq4;

    if let Some(corr_path) = &args.corr {
        let cs = deserialize_correspondences(corr_path).context("loading correspondence file")?;
        let mask = AttentionMask::from_set(&cs);
        session.corr = Some((cs, mask));
    }

    let pred = MixerPredictor::new(dim, seed);
    let cond = Conditioning::seeded(dim, seed.wrapping_add(1), cond_amp);

    std::fs::create_dir_all(&args.out).context("creating output directory")?;
    let (candidates, records) = per_view_edit(&session, &pred, &cond).map_err(|e| anyhow!(e))?;
    for (i, c) in candidates.iter().enumerate() {
        write_feature_grid(c, &args.out.join(format!("candidate_{i:03}.mvdt")))
            .context("writing candidate")?;
    }
    session.records = records;

    let reference_index = select_reference(&candidates, &mode).map_err(|e| anyhow!(e))?;
    session
        .set_reference(reference_index)
        .map_err(|e| anyhow!(e))?;

    ensure_correspondences(&mut session, &pred).map_err(|e| anyhow!(e))?;
    let edited = joint_edit(&mut session, &pred, &cond).map_err(|e| anyhow!(e))?;
    for (i, g) in edited.iter().enumerate() {
        write_feature_grid(g, &args.out.join(format!("edited_{i:03}.mvdt")))
            .context("writing edited grid")?;
    }
    let (cs, _) = session.corr.as_ref().expect("ensured above");
    serialize_correspondences(cs, &args.out.join("correspondences.mvcr"))
        .context("writing correspondence file")?;

    let score = consistency_score(&edited, cs).map_err(|e| anyhow!(e))?;
    let manifest = format!(
        "seed {seed}\nlambda {lambda}\nbeta {beta}\nsteps {steps}\nreference_index {reference_index}\nscore {score}\n"
    );
    std::fs::write(args.out.join("manifest.txt"), manifest).context("writing manifest")?;
    println!(
        "edited {} views (reference {reference_index}), consistency score {score}",
        candidates.len()
    );
    Ok(())
}

fn load_grid_series(dir: &Path, prefix: &str) -> Result<Vec<FeatureGrid>> {
    let mut grids = Vec::new();
    loop {
        let path = dir.join(format!("{prefix}_{:03}.mvdt", grids.len()));
        if !path.exists() {
            break;
        }
        grids.push(read_feature_grid(&path)?);
    }
    if grids.is_empty() {
        bail!(
            "no {prefix}_###.mvdt files found under {}",
            dir.display()
        );
    }
    Ok(grids)
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let cs = deserialize_correspondences(&args.corr).context("loading correspondence file")?;
    let grids = load_grid_series(&args.grids, &args.prefix)?;
    let score = consistency_score(&grids, &cs).map_err(|e| anyhow!(e))?;
    println!("{score}");
    Ok(())
}
