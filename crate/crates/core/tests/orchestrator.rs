use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use storyagent_core::denoiser::{DenoiserConfig, DenoiserWeights};
use storyagent_core::diffusion::{default_schedule, NoiseSchedule};
use storyagent_core::orchestrator::*;
use storyagent_core::storyboard::{family_sprite, SubjectProfile};

const ORDER: &str = "^D(RD)*RB(RB)*RA(RA)*R$";

struct Fixture {
    weights: DenoiserWeights,
    sched: NoiseSchedule,
    subjects: HashMap<String, Arc<Subject>>,
}

fn fixture() -> Fixture {
    let weights = DenoiserWeights::init(&DenoiserConfig::tiny(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let profile = SubjectProfile::synthesize("kitty", family_sprite(8), 1, weights.config.frames, &mut rng).unwrap();
    let subjects = HashMap::from([(
        "kitty".to_string(),
        Arc::new(Subject {
            profile,
            customization: None,
        }),
    )]);
    Fixture {
        weights,
        sched: default_schedule(),
        subjects,
    }
}

fn fixed_clock() -> u64 {
    1_700_000_000_000
}

fn run(fx: &Fixture, store: &dyn ArtifactStore, subject: &str, cfg: &RunConfig) -> (RunState, Vec<Event>) {
    let ctx = PipelineContext {
        weights: &fx.weights,
        sched: &fx.sched,
        subjects: &fx.subjects,
        store,
        human: None,
        chooser: None,
        clock: &fixed_clock,
    };
    let mut seen = Vec::new();
    let state = run_pipeline("run-1", "a day at the beach", subject, cfg, &ctx, &mut |e| seen.push(e.clone())).unwrap();
    (state, seen)
}

fn config(observer: ObserverSpec) -> RunConfig {
    RunConfig {
        shots: 2,
        seed: 7,
        observer,
        sample_steps: 4,
        ..RunConfig::default()
    }
}

fn all_hashes(state: &RunState) -> Vec<String> {
    let a = &state.artifacts;
    a.script.iter().chain(&a.storyboard).chain(&a.videos).map(|r| r.hash.clone()).collect()
}

#[test]
fn approving_run_is_done_and_byte_stable() {
    let fx = fixture();
    let store = MemoryStore::new();
    let (a, seen) = run(&fx, &store, "kitty", &config(ObserverSpec::AlwaysApprove {}));
    assert_eq!(a.phase, Phase::Done, "{:?}", a.failure);
    assert_eq!(a.agent_word(), "DRBRAR");
    assert_eq!(seen, a.events);
    let videos: Vec<_> = a.artifacts.videos.iter().filter(|r| r.name.ends_with("_video.png")).collect();
    assert_eq!(videos.len(), 2);
    assert!(all_hashes(&a).iter().all(|h| store.contains(h).unwrap()));

    let dir = tempfile::tempdir().unwrap();
    let disk = DirStore::open(dir.path()).unwrap();
    let (b, _) = run(&fx, &disk, "kitty", &config(ObserverSpec::AlwaysApprove {}));
    assert_eq!(all_hashes(&a), all_hashes(&b));
    assert_eq!(a, b);
    assert_eq!(RunState::replay(&b.events).unwrap(), b);
}

#[test]
fn storyboard_feedback_reenters_boarding() {
    let fx = fixture();
    let observer = ObserverSpec::Scripted {
        verdicts: vec![Verdict::Approve, Verdict::Feedback("the kitty is too small".into())],
    };
    let (state, _) = run(&fx, &MemoryStore::new(), "kitty", &config(observer));
    assert_eq!(state.phase, Phase::Done);
    let boarding = state.phase_history().iter().filter(|p| **p == Phase::Boarding).count();
    assert_eq!(boarding, 2);
    assert_eq!(state.rounds, [0, 1, 0]);
    assert!(Regex::new(ORDER).unwrap().is_match(&state.agent_word()));
    assert_eq!(RunState::replay(&state.events).unwrap(), state);
}

#[test]
fn two_feedbacks_at_max_rounds_two_advance() {
    let fx = fixture();
    let feedback = || Verdict::Feedback("again".into());
    let observer = ObserverSpec::Scripted {
        verdicts: vec![feedback(), feedback()],
    };
    let (state, _) = run(&fx, &MemoryStore::new(), "kitty", &config(observer));
    assert_eq!(state.phase, Phase::Done);
    assert_eq!(state.agent_word(), "DRDRBRAR");
    assert_eq!(state.rounds, [2, 0, 0]);
}

#[test]
fn missing_subject_fails_before_designing() {
    let fx = fixture();
    let (state, _) = run(&fx, &MemoryStore::new(), "nobody", &config(ObserverSpec::AlwaysApprove {}));
    assert_eq!(state.phase, Phase::Failed);
    assert_eq!(state.agent_word(), "");
    assert!(matches!(state.events.last().unwrap().kind, EventKind::Aborted { .. }));
    assert!(state.failure.as_deref().unwrap().contains("nobody"));
    assert_eq!(RunState::replay(&state.events).unwrap(), state);
}

#[test]
fn threshold_feedback_embeds_score_in_the_log() {
    let fx = fixture();
    // Unreachable threshold: every review returns feedback until rounds run out.
    let observer = ObserverSpec::Threshold {
        metric: ScoreMetric::MaskIou,
        tau: 1.5,
    };
    let (state, _) = run(&fx, &MemoryStore::new(), "kitty", &config(observer));
    assert_eq!(state.phase, Phase::Done);
    assert_eq!(state.rounds, [0, 2, 0]);
    let texts: Vec<String> = state
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Signal {
                signal:
                    Signal {
                        status: SignalStatus::Reviewed { decision },
                        ..
                    },
                ..
            } => match &decision.verdict {
                Verdict::Feedback(t) => Some(t.clone()),
                _ => None,
            },
            _ => None,
        })
        .collect();
    assert_eq!(texts.len(), 2);
    assert!(texts.iter().all(|t| t.ends_with("< 1.50")), "{texts:?}");
}

struct PrefersDesigner;
impl AgentChooser for PrefersDesigner {
    fn choose(&self, _: &RunState, _: &Signal, _: &Transition) -> Option<Agent> {
        Some(Agent::StoryDesigner)
    }
}

#[test]
fn chooser_disagreement_is_logged_and_ignored() {
    let fx = fixture();
    let store = MemoryStore::new();
    let ctx = PipelineContext {
        weights: &fx.weights,
        sched: &fx.sched,
        subjects: &fx.subjects,
        store: &store,
        human: None,
        chooser: Some(&PrefersDesigner),
        clock: &fixed_clock,
    };
    let state = run_pipeline("r", "p", "kitty", &config(ObserverSpec::AlwaysApprove {}), &ctx, &mut |_| {}).unwrap();
    assert_eq!(state.agent_word(), "DRBRAR");
    let warnings = state.events.iter().filter(|e| matches!(e.kind, EventKind::Warning { .. })).count();
    // No transition on the approve path leads back to the designer.
    assert_eq!(warnings, 6);
}

#[test]
fn tampered_log_does_not_replay() {
    let fx = fixture();
    let (state, _) = run(&fx, &MemoryStore::new(), "kitty", &config(ObserverSpec::AlwaysApprove {}));
    let mut events = state.events.clone();
    if let EventKind::Signal { next_phase, .. } = &mut events[1].kind {
        *next_phase = Phase::Boarding;
    }
    assert!(RunState::replay(&events).is_err());
    let mut gap = state.events.clone();
    gap.remove(2);
    assert!(RunState::replay(&gap).is_err());
}

fn signal_for(phase: Phase, verdict: Verdict) -> Signal {
    let agent = phase.agent().unwrap();
    let status = if agent == Agent::Observer {
        SignalStatus::Reviewed {
            decision: ReviewDecision::new(verdict, "scripted").unwrap(),
        }
    } else {
        SignalStatus::Completed { artifacts: vec![] }
    };
    Signal { agent, status }
}

fn verdict_strategy() -> impl Strategy<Value = Verdict> {
    prop_oneof![
        Just(Verdict::Approve),
        Just(Verdict::Timeout),
        "[a-z]{1,8}".prop_map(Verdict::Feedback),
    ]
}

proptest! {
    #[test]
    fn any_review_sequence_respects_the_workflow(
        verdicts in prop::collection::vec(verdict_strategy(), 0..24),
        max_rounds in 0usize..4,
    ) {
        let mut state = RunState::start("p", "prompt", "kitty", 1, 0, max_rounds, 0);
        let mut verdicts = verdicts.into_iter();
        let mut guard = 0;
        while !state.phase.is_terminal() {
            let v = if state.phase.agent() == Some(Agent::Observer) {
                verdicts.next().unwrap_or(Verdict::Approve)
            } else {
                Verdict::Approve
            };
            state.signal(signal_for(state.phase, v), guard).unwrap();
            prop_assert!(state.rounds.iter().all(|&r| r <= max_rounds));
            guard += 1;
            prop_assert!(guard < 64);
        }
        prop_assert_eq!(state.phase, Phase::Done);
        prop_assert!(Regex::new(ORDER).unwrap().is_match(&state.agent_word()), "{}", state.agent_word());
        prop_assert_eq!(RunState::replay(&state.events).unwrap(), state);
    }
}

#[test]
fn wrong_agent_or_failure_fails_the_run() {
    let mut state = RunState::start("p", "prompt", "kitty", 1, 0, 2, 0);
    let t = state.signal(signal_for(Phase::Boarding, Verdict::Approve), 1).unwrap();
    assert_eq!(t.phase, Phase::Failed);
    assert!(t.diagnostic.unwrap().contains("storyboard_generator"));
    assert!(state.signal(signal_for(Phase::Designing, Verdict::Approve), 2).is_err());

    let mut state = RunState::start("p", "prompt", "kitty", 1, 0, 2, 0);
    let failed = Signal {
        agent: Agent::StoryDesigner,
        status: SignalStatus::Failed { error: "boom".into() },
    };
    state.signal(failed, 1).unwrap();
    assert_eq!(state.phase, Phase::Failed);
    assert!(matches!(
        &state.events.last().unwrap().kind,
        EventKind::Signal { signal: Signal { status: SignalStatus::Failed { .. }, .. }, .. }
    ));
}

#[test]
fn event_log_json_round_trip() {
    let fx = fixture();
    let (state, _) = run(&fx, &MemoryStore::new(), "kitty", &config(ObserverSpec::Scripted {
        verdicts: vec![Verdict::Feedback("x".into()), Verdict::Timeout],
    }));
    let json = serde_json::to_string(&state.events).unwrap();
    let events: Vec<Event> = serde_json::from_str(&json).unwrap();
    assert_eq!(RunState::replay(&events).unwrap(), state);
}
