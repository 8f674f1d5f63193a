//! End-to-end pipeline execution: design → board → animate, with an observer
//! review after each step and every input and output stored as an artifact.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::designer::{design_story, DesignerBackend, StoryScript};
use super::observer::{HumanReviewer, Observer, ObserverSpec, ReviewMaterial, ReviewRequest};
use super::schedule::{schedule_with, AgentChooser};
use super::state::{ArtifactRef, Event, EventKind, Phase, RunState, Signal, SignalStatus};
use super::store::ArtifactStore;
use crate::denoiser::{DenoiserWeights, PLACEHOLDER};
use crate::diffusion::{sample_shot, NoiseSchedule, SampleOptions, SamplerMode, ShotModel};
use crate::error::{Error, Result};
use crate::imaging::{filmstrip, Image};
use crate::lora_be::{Customization, TrainConfig};
use crate::metrics::{subject_fidelity, temporal_consistency, MetricReport};
use crate::storyboard::{generate_storyboard, motion_masks, Protocol, Storyboard, SubjectProfile};

/// A registered subject: its profile and, once fine-tuned, its customization.
#[derive(Clone, Debug)]
pub struct Subject {
    pub profile: SubjectProfile,
    pub customization: Option<Customization>,
}

/// Where runs look subjects up.
pub trait SubjectLookup: Send + Sync {
    fn subject(&self, id: &str) -> Option<Arc<Subject>>;
}

impl SubjectLookup for HashMap<String, Arc<Subject>> {
    fn subject(&self, id: &str) -> Option<Arc<Subject>> {
        self.get(id).cloned()
    }
}

impl SubjectLookup for IndexMap<String, Arc<Subject>> {
    fn subject(&self, id: &str) -> Option<Arc<Subject>> {
        self.get(id).cloned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub shots: usize,
    pub seed: u64,
    /// Feedback rounds allowed per step.
    pub max_rounds: usize,
    pub designer: DesignerBackend,
    pub observer: ObserverSpec,
    pub sample_steps: usize,
    pub sampler: SamplerMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shots: 4,
            seed: 0,
            max_rounds: 2,
            designer: DesignerBackend::Template,
            observer: ObserverSpec::AlwaysApprove {},
            sample_steps: 50,
            sampler: SamplerMode::Ddim,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::invalid("a run needs at least one shot"));
        }
        if self.sample_steps == 0 {
            return Err(Error::invalid("sample_steps must be positive"));
        }
        Ok(())
    }
}

/// Shared, read-only resources a run executes against.
pub struct PipelineContext<'a> {
    pub weights: &'a DenoiserWeights,
    pub sched: &'a NoiseSchedule,
    pub subjects: &'a dyn SubjectLookup,
    pub store: &'a dyn ArtifactStore,
    pub human: Option<Arc<dyn HumanReviewer>>,
    pub chooser: Option<&'a dyn AgentChooser>,
    /// Milliseconds since the Unix epoch for event timestamps.
    pub clock: &'a (dyn Fn() -> u64 + Sync),
}

/// Wall-clock milliseconds since the Unix epoch.
pub fn system_clock() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Sub-seed for attempt `round` of a step: the base seed for the first
/// attempt, a disjoint stream for each feedback-driven retry.
pub fn attempt_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add((round as u64) << 32)
}

struct Executor<'a, 'c> {
    ctx: &'a PipelineContext<'c>,
    subject: Arc<Subject>,
    cfg: &'a RunConfig,
    observer: Observer,
    state: RunState,
    sink: &'a mut dyn FnMut(&Event),
    script: Option<StoryScript>,
    board: Option<Storyboard>,
    videos: Vec<Vec<Image>>,
}

impl Executor<'_, '_> {
    fn record(&mut self, kind: EventKind) -> Result<()> {
        let at = (self.ctx.clock)();
        let event = self.state.record(kind, at)?.clone();
        (self.sink)(&event);
        Ok(())
    }

    fn signal(&mut self, signal: Signal) -> Result<()> {
        let (_, warning) = schedule_with(self.ctx.chooser, &self.state, &signal);
        if let Some(message) = warning {
            self.record(EventKind::Warning { message })?;
        }
        let at = (self.ctx.clock)();
        self.state.signal(signal, at)?;
        let event = self.state.events.last().expect("signal recorded").clone();
        (self.sink)(&event);
        Ok(())
    }

    fn put_all(&self, files: Vec<(String, Vec<u8>)>) -> Result<Vec<ArtifactRef>> {
        files.iter().map(|(name, bytes)| self.ctx.store.put_named(name, bytes)).collect()
    }

    fn step(&mut self) -> Result<()> {
        let phase = self.state.phase;
        let agent = phase.agent().expect("step on a live phase");
        let status = match phase {
            Phase::Designing => self.design(),
            Phase::Boarding => self.board(),
            Phase::Animating => self.animate(),
            _ => self.review(),
        };
        let status = status.unwrap_or_else(|e| SignalStatus::Failed { error: e.to_string() });
        self.signal(Signal { agent, status })
    }

    fn design(&mut self) -> Result<SignalStatus> {
        let seed = attempt_seed(self.state.seed, self.state.rounds[0]);
        let input = serde_json::json!({
            "prompt": self.state.prompt,
            "subject": self.state.subject_id,
            "shots": self.state.shots,
            "seed": seed,
            "backend": self.cfg.designer,
        });
        let (script, warning) = design_story(&self.state.prompt, &self.state.subject_id, self.state.shots, seed, &self.cfg.designer)?;
        if let Some(message) = warning {
            self.record(EventKind::Warning { message })?;
        }
        let artifacts = self.put_all(vec![
            ("design_input.json".into(), serde_json::to_vec_pretty(&input)?),
            ("script.json".into(), serde_json::to_vec_pretty(&script)?),
            ("script.dsl".into(), script.to_dsl().into_bytes()),
        ])?;
        self.script = Some(script);
        Ok(SignalStatus::Completed { artifacts })
    }

    fn board(&mut self) -> Result<SignalStatus> {
        let script = self.script.as_ref().ok_or_else(|| Error::NotFound("script artifact".into()))?;
        // The storyboard pipeline has no stochastic stage, so a retry after
        // feedback reproduces the same stills; the feedback is still logged.
        let board = generate_storyboard(&script.scenes(), &self.subject.profile, &Protocol::Fresh)?;
        if !board.is_complete() {
            let reasons: Vec<String> = board.failures.iter().map(|f| format!("shot {}: {}", f.index, f.reason)).collect();
            return Err(Error::invalid(format!("storyboard incomplete ({})", reasons.join("; "))));
        }
        let mut files = vec![("board_input.dsl".to_string(), script.to_dsl().into_bytes())];
        files.extend(board.artifacts()?);
        let artifacts = self.put_all(files)?;
        self.board = Some(board);
        Ok(SignalStatus::Completed { artifacts })
    }

    fn animate(&mut self) -> Result<SignalStatus> {
        let board = self.board.as_ref().ok_or_else(|| Error::NotFound("storyboard artifact".into()))?;
        let fallback;
        let custom = match &self.subject.customization {
            Some(c) => c,
            None => {
                fallback = Customization::init(self.ctx.weights, &TrainConfig::default())?;
                &fallback
            }
        };
        let model = ShotModel {
            weights: self.ctx.weights,
            adapters: Some(&custom.adapters),
            embeds: Some(&custom.embeds),
        };
        let round_seed = attempt_seed(self.state.seed, self.state.rounds[2]);
        let frames = self.ctx.weights.config.frames;
        let mut files = vec![(
            "animate_input.json".to_string(),
            serde_json::to_vec_pretty(&serde_json::json!({
                "base_checksum": self.ctx.weights.checksum(),
                "customization": custom.config_hash,
                "trained": self.subject.customization.is_some(),
                "sample_steps": self.cfg.sample_steps,
                "sampler": self.cfg.sampler,
                "seed": round_seed,
            }))?,
        )];
        let mut videos = Vec::with_capacity(board.shots.len());
        let mut rows = Vec::with_capacity(board.shots.len());
        for shot in &board.shots {
            let opts = SampleOptions {
                steps: self.cfg.sample_steps,
                seed: round_seed.wrapping_add(shot.index as u64),
                mode: self.cfg.sampler,
            };
            let prompt = shot.spec.prompt(PLACEHOLDER);
            let video: Vec<Image> = sample_shot(model, &shot.image, &prompt, self.ctx.sched, &opts)?
                .iter()
                .map(Image::quantized)
                .collect();
            let masks = motion_masks(&shot.spec, &shot.mask, frames);
            let mut row = IndexMap::new();
            row.insert("subject_fidelity".to_string(), subject_fidelity(&video, &masks, &self.subject.profile.sprite)?.value);
            if video.len() >= 2 {
                row.insert("temporal_consistency".to_string(), temporal_consistency(&video)?);
            }
            rows.push(row);
            files.push((format!("shot_{:02}_video.png", shot.index), filmstrip(&video)?.encode_png()?));
            videos.push(video);
        }
        let report = MetricReport::from_shots(rows)?;
        files.push(("metrics.json".to_string(), serde_json::to_vec_pretty(&report)?));
        let artifacts = self.put_all(files)?;
        self.videos = videos;
        Ok(SignalStatus::Completed { artifacts })
    }

    fn review(&mut self) -> Result<SignalStatus> {
        let phase = self.state.phase;
        let step = phase.step().expect("review phase");
        let (artifacts, material) = match phase {
            Phase::DesignReview => (
                self.state.artifacts.script.clone(),
                ReviewMaterial::Script(self.script.as_ref().ok_or_else(|| Error::NotFound("script artifact".into()))?),
            ),
            Phase::BoardReview => (
                self.state.artifacts.storyboard.clone(),
                ReviewMaterial::Storyboard(self.board.as_ref().ok_or_else(|| Error::NotFound("storyboard artifact".into()))?),
            ),
            _ => (
                self.state.artifacts.videos.clone(),
                ReviewMaterial::Videos {
                    board: self.board.as_ref().ok_or_else(|| Error::NotFound("storyboard artifact".into()))?,
                    videos: &self.videos,
                    sprite: &self.subject.profile.sprite,
                },
            ),
        };
        for a in &artifacts {
            if !self.ctx.store.contains(&a.hash)? {
                return Err(Error::NotFound(format!("artifact {} ({})", a.name, a.hash)));
            }
        }
        let request = ReviewRequest {
            run_id: self.state.run_id.clone(),
            phase,
            round: self.state.rounds[step],
            max_rounds: self.state.max_rounds,
            artifacts,
            shot_texts: self.script.as_ref().map(|s| s.shots.iter().map(|x| x.description.clone()).collect()).unwrap_or_default(),
        };
        let decision = self.observer.review(request, material)?;
        Ok(SignalStatus::Reviewed { decision })
    }
}

/// Runs the whole workflow and returns the terminal state. Every event is
/// passed to `sink` as soon as it is logged. `Err` is returned only for an
/// invalid configuration; agent failures end the run in `Failed`.
pub fn run_pipeline(
    run_id: &str,
    prompt: &str,
    subject_id: &str,
    cfg: &RunConfig,
    ctx: &PipelineContext<'_>,
    sink: &mut dyn FnMut(&Event),
) -> Result<RunState> {
    cfg.validate()?;
    let state = RunState::start(run_id, prompt, subject_id, cfg.shots, cfg.seed, cfg.max_rounds, (ctx.clock)());
    sink(&state.events[0]);
    let observer = Observer::new(cfg.observer.clone(), ctx.human.clone());
    let (subject, observer) = match (ctx.subjects.subject(subject_id), observer) {
        (Some(s), Ok(o)) => (s, o),
        (subject, observer) => {
            let reason = match (subject, observer) {
                (None, _) => format!("unknown subject '{subject_id}'"),
                (_, Err(e)) => e.to_string(),
                _ => unreachable!(),
            };
            let mut state = state;
            let event = state.record(EventKind::Aborted { reason }, (ctx.clock)())?.clone();
            sink(&event);
            return Ok(state);
        }
    };
    let mut exec = Executor {
        ctx,
        subject,
        cfg,
        observer,
        state,
        sink,
        script: None,
        board: None,
        videos: Vec::new(),
    };
    while !exec.state.phase.is_terminal() {
        exec.step()?;
    }
    Ok(exec.state)
}
