use std::fmt;

use serde::{Deserialize, Serialize};

use super::schedule::{next_agent, Transition};
use crate::error::{Error, Result};

/// The agents the manager schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    StoryDesigner,
    StoryboardGenerator,
    VideoCreator,
    Observer,
}

impl Agent {
    /// One-letter code used in agent-order words: `D`, `B`, `A`, `R`.
    pub fn code(self) -> char {
        match self {
            Agent::StoryDesigner => 'D',
            Agent::StoryboardGenerator => 'B',
            Agent::VideoCreator => 'A',
            Agent::Observer => 'R',
        }
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Agent::StoryDesigner => "story_designer",
            Agent::StoryboardGenerator => "storyboard_generator",
            Agent::VideoCreator => "video_creator",
            Agent::Observer => "observer",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Designing,
    DesignReview,
    Boarding,
    BoardReview,
    Animating,
    AnimateReview,
    Done,
    Failed,
}

impl Phase {
    /// The agent expected to signal in this phase; `None` for terminal phases.
    pub fn agent(self) -> Option<Agent> {
        match self {
            Phase::Designing => Some(Agent::StoryDesigner),
            Phase::Boarding => Some(Agent::StoryboardGenerator),
            Phase::Animating => Some(Agent::VideoCreator),
            Phase::DesignReview | Phase::BoardReview | Phase::AnimateReview => Some(Agent::Observer),
            Phase::Done | Phase::Failed => None,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }

    /// Index of the workflow step (design, board, animate) this phase belongs to.
    pub fn step(self) -> Option<usize> {
        match self {
            Phase::Designing | Phase::DesignReview => Some(0),
            Phase::Boarding | Phase::BoardReview => Some(1),
            Phase::Animating | Phase::AnimateReview => Some(2),
            Phase::Done | Phase::Failed => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "text", rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Feedback(String),
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    #[serde(flatten)]
    pub verdict: Verdict,
    /// `"scorer:<name>"`, `"always_approve"`, `"scripted"` or a human reviewer id.
    pub reviewer: String,
}

impl ReviewDecision {
    pub fn new(verdict: Verdict, reviewer: impl Into<String>) -> Result<Self> {
        if let Verdict::Feedback(text) = &verdict {
            if text.trim().is_empty() {
                return Err(Error::invalid("feedback must carry nonempty text"));
            }
        }
        Ok(Self {
            verdict,
            reviewer: reviewer.into(),
        })
    }
}

/// Content-addressed artifact produced by an agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub hash: String,
    pub media_type: String,
}

/// Outcome reported by the agent that just ran.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SignalStatus {
    Completed { artifacts: Vec<ArtifactRef> },
    Reviewed { decision: ReviewDecision },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub agent: Agent,
    #[serde(flatten)]
    pub status: SignalStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    RunStarted {
        run_id: String,
        prompt: String,
        subject_id: String,
        shots: usize,
        seed: u64,
        max_rounds: usize,
    },
    /// An agent signal and the phase the manager moved to in response.
    Signal { signal: Signal, next_phase: Phase },
    /// Non-fatal diagnostic (e.g. a backend fallback).
    Warning { message: String },
    /// The run aborted outside any agent signal (e.g. missing subject).
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub at_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Artifacts of the current (latest) attempt of each workflow step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub script: Vec<ArtifactRef>,
    pub storyboard: Vec<ArtifactRef>,
    pub videos: Vec<ArtifactRef>,
}

/// Event-sourced state of one pipeline run. It changes only by
/// [`RunState::apply`]; [`RunState::replay`] over the log rebuilds it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub prompt: String,
    pub subject_id: String,
    pub shots: usize,
    pub seed: u64,
    pub max_rounds: usize,
    pub phase: Phase,
    /// Feedback rounds consumed by the design, board and animate steps.
    pub rounds: [usize; 3],
    pub artifacts: RunArtifacts,
    pub events: Vec<Event>,
    /// Set when the run failed.
    pub failure: Option<String>,
}

impl RunState {
    /// State after the `RunStarted` event.
    pub fn start(run_id: &str, prompt: &str, subject_id: &str, shots: usize, seed: u64, max_rounds: usize, at_ms: u64) -> Self {
        let kind = EventKind::RunStarted {
            run_id: run_id.to_string(),
            prompt: prompt.to_string(),
            subject_id: subject_id.to_string(),
            shots,
            seed,
            max_rounds,
        };
        Self::from_first(Event { seq: 0, at_ms, kind }).expect("RunStarted is a valid first event")
    }

    fn from_first(event: Event) -> Result<Self> {
        let EventKind::RunStarted {
            run_id,
            prompt,
            subject_id,
            shots,
            seed,
            max_rounds,
        } = &event.kind
        else {
            return Err(Error::invalid("event log must begin with run_started"));
        };
        if event.seq != 0 {
            return Err(Error::invalid("first event must have sequence number 0"));
        }
        Ok(Self {
            run_id: run_id.clone(),
            prompt: prompt.clone(),
            subject_id: subject_id.clone(),
            shots: *shots,
            seed: *seed,
            max_rounds: *max_rounds,
            phase: Phase::Designing,
            rounds: [0; 3],
            artifacts: RunArtifacts::default(),
            events: vec![event],
            failure: None,
        })
    }

    /// Rebuilds a state from its event log.
    pub fn replay(events: &[Event]) -> Result<Self> {
        let (first, rest) = events
            .split_first()
            .ok_or_else(|| Error::invalid("empty event log"))?;
        let mut state = Self::from_first(first.clone())?;
        for e in rest {
            state.apply(e.clone())?;
        }
        Ok(state)
    }

    /// Appends an event of `kind` at time `at_ms` and applies it.
    pub fn record(&mut self, kind: EventKind, at_ms: u64) -> Result<&Event> {
        let event = Event {
            seq: self.events.len() as u64,
            at_ms,
            kind,
        };
        self.apply(event)?;
        Ok(self.events.last().expect("just appended"))
    }

    /// Records an agent signal; the next phase comes from the manager's rule table.
    pub fn signal(&mut self, signal: Signal, at_ms: u64) -> Result<Transition> {
        let t = next_agent(self, &signal);
        self.record(
            EventKind::Signal {
                signal,
                next_phase: t.phase,
            },
            at_ms,
        )?;
        Ok(t)
    }

    /// Applies one event. Signal events are re-checked against the rule
    /// table, so a tampered log fails to replay.
    pub fn apply(&mut self, event: Event) -> Result<()> {
        if event.seq != self.events.len() as u64 {
            return Err(Error::invalid(format!(
                "event sequence {} where {} was expected",
                event.seq,
                self.events.len()
            )));
        }
        if self.phase.is_terminal() && !matches!(event.kind, EventKind::Warning { .. }) {
            return Err(Error::invalid(format!("event {} after the run ended", event.seq)));
        }
        match &event.kind {
            EventKind::RunStarted { .. } => return Err(Error::invalid("run_started may only open the log")),
            EventKind::Warning { .. } => {}
            EventKind::Aborted { reason } => {
                self.phase = Phase::Failed;
                self.failure = Some(reason.clone());
            }
            EventKind::Signal { signal, next_phase } => {
                let t = next_agent(self, signal);
                if t.phase != *next_phase {
                    return Err(Error::invalid(format!(
                        "logged transition to {next_phase:?} disagrees with the rule table ({:?})",
                        t.phase
                    )));
                }
                if let (Some(step), true) = (self.phase.step(), t.feedback_round) {
                    self.rounds[step] += 1;
                }
                if let SignalStatus::Completed { artifacts } = &signal.status {
                    match self.phase {
                        Phase::Designing => self.artifacts.script = artifacts.clone(),
                        Phase::Boarding => self.artifacts.storyboard = artifacts.clone(),
                        Phase::Animating => self.artifacts.videos = artifacts.clone(),
                        _ => {}
                    }
                }
                if t.phase == Phase::Failed {
                    self.failure = Some(t.diagnostic.clone().unwrap_or_else(|| "agent failure".into()));
                }
                self.phase = t.phase;
            }
        }
        self.events.push(event);
        Ok(())
    }

    /// The sequence of agents that signalled, as a word over `D`, `B`, `A`, `R`.
    pub fn agent_word(&self) -> String {
        self.events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Signal { signal, .. } => Some(signal.agent.code()),
                _ => None,
            })
            .collect()
    }

    /// Phases entered, in order, starting with `Designing`.
    pub fn phase_history(&self) -> Vec<Phase> {
        let mut out = vec![Phase::Designing];
        for e in &self.events {
            if let EventKind::Signal { next_phase, .. } = &e.kind {
                out.push(*next_phase);
            }
        }
        out
    }
}
