use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use storyagent_core::checkpoint::{save_base, save_customization};
use storyagent_core::denoiser::{DenoiserWeights, PLACEHOLDER};
use storyagent_core::diffcore::GradCheckOptions;
use storyagent_core::diffusion::{make_schedule, sample_shot, NoiseSchedule, SampleOptions, ShotModel};
use storyagent_core::evaluate::evaluate_customization;
use storyagent_core::imaging::{filmstrip, Image, Mask};
use storyagent_core::lora_be::{customization_gradcheck, fine_tune, Customization};
use storyagent_core::metrics::{subject_fidelity, temporal_consistency, MetricReport};
use storyagent_core::orchestrator::{
    content_hash, design_story, run_pipeline, system_clock, DirStore, PipelineContext, Subject,
};
use storyagent_core::pretrain::pretrain as pretrain_base;
use storyagent_core::storyboard::{
    family_sprite, generate_storyboard, motion_masks, parse_scene, parse_storyboard, Protocol, Sprite, SubjectProfile,
};
use storyagent_service::{Ledger, Registry};

use crate::config::CliConfig;
use crate::CliError;

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

struct Workspace {
    weights: DenoiserWeights,
    sched: NoiseSchedule,
    registry: Registry,
}

impl Workspace {
    fn open(cfg: &CliConfig) -> Result<Self, CliError> {
        let weights = cfg.service_config().base_weights()?;
        let sched = make_schedule(weights.config.timesteps, 1e-4, 0.02)?;
        let store = Arc::new(DirStore::open(cfg.data_dir.join("artifacts"))?);
        let registry = Registry::open(&cfg.data_dir, store, &weights)?;
        Ok(Self { weights, sched, registry })
    }

    fn subject(&self, id: &str) -> Result<Arc<Subject>, CliError> {
        self.registry
            .snapshot()
            .swap_remove(id)
            .ok_or_else(|| CliError::Usage(format!("unknown subject '{id}'")))
    }
}

fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<IndexMap<String, String>, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut hashes = IndexMap::new();
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes)?;
        hashes.insert(name.clone(), content_hash(bytes));
    }
    Ok(hashes)
}

pub fn subject_add(cfg: &CliConfig, id: &str, sprite: Option<&Path>, family: Option<usize>, clips: usize) -> Result<Value, CliError> {
    if clips == 0 {
        return Err(CliError::Usage("--clips must be at least 1".into()));
    }
    let sprite = match (sprite, family) {
        (Some(path), _) => Sprite::decode_png(&std::fs::read(path)?)?,
        (None, Some(index)) => family_sprite(index),
        (None, None) => return Err(CliError::Usage("pass --sprite or --family".into())),
    };
    let ws = Workspace::open(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let profile = SubjectProfile::synthesize(id, sprite, clips, ws.weights.config.frames, &mut rng)?;
    let record = ws.registry.add(profile, None)?;
    Ok(json!({ "command": "subject add", "ok": true, "subject": record }))
}

pub fn subject_list(cfg: &CliConfig) -> Result<Value, CliError> {
    let ws = Workspace::open(cfg)?;
    Ok(json!({ "command": "subject list", "ok": true, "subjects": ws.registry.list() }))
}

pub fn pretrain(mut cfg: CliConfig, out: &Path, steps: Option<usize>) -> Result<Value, CliError> {
    if let Some(s) = steps {
        cfg.pretrain.steps = s;
    }
    let sched = make_schedule(cfg.model.timesteps, 1e-4, 0.02)?;
    let started = Instant::now();
    let mut window = Vec::with_capacity(100);
    let mut last_mean = f64::NAN;
    let weights = pretrain_base(&cfg.model, &cfg.pretrain, &sched, |t| {
        window.push(t.loss);
        if window.len() == 100 || t.step + 1 == cfg.pretrain.steps {
            last_mean = window.iter().sum::<f64>() / window.len() as f64;
            tracing::info!(step = t.step + 1, loss = last_mean, elapsed_s = started.elapsed().as_secs_f64(), "pretrain");
            window.clear();
        }
    })?;
    let bytes = save_base(&weights)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, &bytes)?;
    Ok(json!({
        "command": "pretrain",
        "ok": true,
        "out": out,
        "steps": cfg.pretrain.steps,
        "final_loss": last_mean,
        "checksum": weights.checksum(),
        "file_sha256": content_hash(&bytes),
    }))
}

pub fn finetune(mut cfg: CliConfig, subject: &str, epochs: Option<usize>, lr: Option<f64>, out: Option<&Path>) -> Result<Value, CliError> {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.train.lr = lr;
    }
    cfg.validate()?;
    let ws = Workspace::open(&cfg)?;
    let subj = ws.subject(subject)?;
    let started = Instant::now();
    let (custom, telemetry) = fine_tune(&subj.profile.clips, &ws.weights, &ws.sched, &cfg.train, |t| {
        if t.epoch % 20 == 0 || t.epoch == 1 {
            tracing::info!(epoch = t.epoch, loss = t.loss, ldm = t.ldm, loc = t.loc, elapsed_s = started.elapsed().as_secs_f64(), "finetune");
        }
    })?;
    let bytes = save_customization(&custom)?;
    if let Some(path) = out {
        std::fs::write(path, &bytes)?;
    }
    let record = ws.registry.set_customization(subject, custom)?;
    let last = telemetry.last();
    Ok(json!({
        "command": "finetune",
        "ok": true,
        "subject": subject,
        "epochs": cfg.train.epochs,
        "final_loss": last.map(|t| t.loss),
        "final_loc": last.and_then(|t| t.loc),
        "customization": record.customization,
    }))
}

pub fn storyboard(
    mut cfg: CliConfig,
    subject: &str,
    prompt: Option<&str>,
    script: Option<&Path>,
    shots: Option<usize>,
    out: &Path,
) -> Result<Value, CliError> {
    if let Some(n) = shots {
        cfg.run.shots = n;
    }
    let ws = Workspace::open(&cfg)?;
    let subj = ws.subject(subject)?;
    let (specs, dsl, warning) = match (prompt, script) {
        (_, Some(path)) => {
            let src = std::fs::read_to_string(path)?;
            (parse_storyboard(&src)?, src, None)
        }
        (Some(p), None) => {
            let (script, warning) = design_story(p, subject, cfg.run.shots, cfg.run.seed, &cfg.run.designer)?;
            (script.scenes(), script.to_dsl(), warning)
        }
        (None, None) => return Err(CliError::Usage("pass --prompt or --script".into())),
    };
    if let Some(w) = &warning {
        tracing::warn!("{w}");
    }
    let board = generate_storyboard(&specs, &subj.profile, &Protocol::Fresh)?;
    let mut files = board.artifacts()?;
    files.push(("script.dsl".to_string(), dsl.into_bytes()));
    let hashes = write_files(out, &files)?;
    Ok(json!({
        "command": "storyboard",
        "ok": board.is_complete(),
        "out": out,
        "shots": board.shots.len(),
        "failures": board.failures,
        "designer_warning": warning,
        "files": hashes,
    }))
}

/// Reads `storyboard.json` plus each shot's final still and mask.
fn read_board(dir: &Path) -> Result<Vec<(usize, storyagent_core::storyboard::SceneSpec, Image, Mask)>, CliError> {
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.join("storyboard.json"))?)?;
    let shots = manifest["shots"]
        .as_array()
        .ok_or_else(|| CliError::Usage(format!("{}: storyboard.json has no shots", dir.display())))?;
    let mut out = Vec::with_capacity(shots.len());
    for s in shots {
        let (Some(index), Some(scene)) = (s["index"].as_u64(), s["scene"].as_str()) else {
            return Err(CliError::Usage(format!("{}: malformed shot entry {s}", dir.display())));
        };
        let i = index as usize;
        let image = Image::decode_png(&std::fs::read(dir.join(format!("shot_{i:02}_final.png")))?)?;
        let mask = Mask::decode_pgm(&std::fs::read(dir.join(format!("shot_{i:02}_mask.pgm")))?)?;
        out.push((i, parse_scene(scene)?, image, mask));
    }
    Ok(out)
}

pub fn animate(mut cfg: CliConfig, subject: &str, board: &Path, out: &Path, steps: Option<usize>) -> Result<Value, CliError> {
    if let Some(s) = steps {
        cfg.run.sample_steps = s;
    }
    cfg.validate()?;
    let ws = Workspace::open(&cfg)?;
    let subj = ws.subject(subject)?;
    let shots = read_board(board)?;
    let fallback;
    let custom = match &subj.customization {
        Some(c) => c,
        None => {
            tracing::warn!(subject, "subject has no customization; animating with untrained adapters");
            fallback = Customization::init(&ws.weights, &cfg.train)?;
            &fallback
        }
    };
    let model = ShotModel {
        weights: &ws.weights,
        adapters: Some(&custom.adapters),
        embeds: Some(&custom.embeds),
    };
    let mut files = Vec::new();
    let mut rows = Vec::with_capacity(shots.len());
    for (index, spec, image, mask) in &shots {
        let opts = SampleOptions {
            steps: cfg.run.sample_steps,
            seed: cfg.run.seed.wrapping_add(*index as u64),
            mode: cfg.run.sampler,
        };
        let video: Vec<Image> = sample_shot(model, image, &spec.prompt(PLACEHOLDER), &ws.sched, &opts)?
            .iter()
            .map(Image::quantized)
            .collect();
        let masks = motion_masks(spec, mask, ws.weights.config.frames);
        let mut row = IndexMap::new();
        row.insert("subject_fidelity".to_string(), subject_fidelity(&video, &masks, &subj.profile.sprite)?.value);
        if video.len() >= 2 {
            row.insert("temporal_consistency".to_string(), temporal_consistency(&video)?);
        }
        rows.push(row);
        files.push((format!("shot_{index:02}_video.png"), filmstrip(&video)?.encode_png()?));
        tracing::info!(shot = index, "animated");
    }
    let report = MetricReport::from_shots(rows)?;
    files.push(("metrics.json".to_string(), serde_json::to_vec_pretty(&report)?));
    let hashes = write_files(out, &files)?;
    Ok(json!({
        "command": "animate",
        "ok": true,
        "out": out,
        "shots": shots.len(),
        "trained": subj.customization.is_some(),
        "metrics": report.aggregate,
        "files": hashes,
    }))
}

pub fn pipeline_run(mut cfg: CliConfig, prompt: &str, subject: &str, shots: Option<usize>, steps: Option<usize>) -> Result<Value, CliError> {
    if let Some(n) = shots {
        cfg.run.shots = n;
    }
    if let Some(s) = steps {
        cfg.run.sample_steps = s;
    }
    cfg.validate()?;
    let ws = Workspace::open(&cfg)?;
    let store = DirStore::open(cfg.data_dir.join("artifacts"))?;
    let ledger = Ledger::open(&cfg.data_dir)?;
    let subjects = ws.registry.snapshot();
    let ctx = PipelineContext {
        weights: &ws.weights,
        sched: &ws.sched,
        subjects: &subjects,
        store: &store,
        human: None,
        chooser: None,
        clock: &system_clock,
    };
    let run_id = ledger.allocate_id();
    let mut log_error = None;
    let state = run_pipeline(&run_id, prompt, subject, &cfg.run, &ctx, &mut |event| {
        tracing::info!(run = %run_id, event = %serde_json::to_string(&event.kind).unwrap_or_default());
        if let Err(e) = ledger.append(&run_id, event) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    let artifacts: IndexMap<&str, &str> = state
        .artifacts
        .script
        .iter()
        .chain(&state.artifacts.storyboard)
        .chain(&state.artifacts.videos)
        .map(|a| (a.name.as_str(), a.hash.as_str()))
        .collect();
    Ok(json!({
        "command": "pipeline run",
        "ok": state.failure.is_none(),
        "run_id": state.run_id,
        "phase": state.phase,
        "agents": state.agent_word(),
        "rounds": state.rounds,
        "failure": state.failure,
        "artifacts": artifacts,
    }))
}

pub fn eval(mut cfg: CliConfig, subject: &str, shots: Option<usize>, steps: Option<usize>) -> Result<Value, CliError> {
    if let Some(n) = shots {
        cfg.eval.shots = n;
    }
    if let Some(s) = steps {
        cfg.eval.sample_steps = s;
    }
    let ws = Workspace::open(&cfg)?;
    let subj = ws.subject(subject)?;
    let Some(custom) = &subj.customization else {
        return Err(CliError::Usage(format!("subject '{subject}' has no customization; run finetune first")));
    };
    let report = evaluate_customization(&ws.weights, &ws.sched, &subj.profile, custom, &cfg.eval)?;
    Ok(json!({
        "command": "eval",
        "ok": true,
        "subject": subject,
        "shots": cfg.eval.shots,
        "trained": report.trained.aggregate,
        "untrained": report.untrained.aggregate,
        "fidelity_gain": report.fidelity_gain,
    }))
}

pub fn gradcheck(cfg: &CliConfig, subsample: Option<usize>, eps: f64) -> Result<Value, CliError> {
    let opts = GradCheckOptions {
        eps,
        subsample,
        seed: cfg.model_seed,
    };
    let started = Instant::now();
    let report = customization_gradcheck(&cfg.model, cfg.model_seed, &opts)?;
    Ok(json!({
        "command": "gradcheck",
        "ok": report.max_rel_error <= GRADCHECK_TOLERANCE,
        "max_rel_error": report.max_rel_error,
        "max_abs_error": report.max_abs_error,
        "checked": report.checked,
        "worst": report.worst,
        "eps": eps,
        "tolerance": GRADCHECK_TOLERANCE,
        "elapsed_s": started.elapsed().as_secs_f64(),
    }))
}

pub fn serve(mut cfg: CliConfig, bind: Option<String>) -> Result<Value, CliError> {
    if let Some(b) = bind {
        cfg.service.bind = b;
    }
    cfg.validate()?;
    let service = cfg.service_config();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(storyagent_service::serve(service.clone(), async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    }))?;
    Ok(json!({ "command": "serve", "ok": true, "bind": service.bind }))
}
