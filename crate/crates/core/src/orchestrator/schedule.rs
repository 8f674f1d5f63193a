//! The agent manager's rule table.

use serde::{Deserialize, Serialize};

use super::state::{Agent, Phase, RunState, Signal, SignalStatus, Verdict};

/// Result of scheduling after a signal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub phase: Phase,
    /// Agent to run next; `None` once the run is terminal.
    pub next: Option<Agent>,
    /// Whether the signal consumed a feedback round of the current step.
    pub feedback_round: bool,
    /// Why the run failed, for failure transitions.
    pub diagnostic: Option<String>,
}

impl Transition {
    fn to(phase: Phase) -> Self {
        Self {
            phase,
            next: phase.agent(),
            feedback_round: false,
            diagnostic: None,
        }
    }

    fn fail(msg: String) -> Self {
        Self {
            phase: Phase::Failed,
            next: None,
            feedback_round: false,
            diagnostic: Some(msg),
        }
    }
}

/// Phase entered after the review of `phase` approves (or gives up).
fn after_review(phase: Phase) -> Phase {
    match phase {
        Phase::DesignReview => Phase::Boarding,
        Phase::BoardReview => Phase::Animating,
        _ => Phase::Done,
    }
}

/// Phase re-entered when the review of `phase` asks for another attempt.
fn redo(phase: Phase) -> Phase {
    match phase {
        Phase::DesignReview => Phase::Designing,
        Phase::BoardReview => Phase::Boarding,
        _ => Phase::Animating,
    }
}

fn review_of(phase: Phase) -> Phase {
    match phase {
        Phase::Designing => Phase::DesignReview,
        Phase::Boarding => Phase::BoardReview,
        _ => Phase::AnimateReview,
    }
}

/// Deterministic scheduling rule:
///
/// * a worker agent completing its phase hands over to the observer;
/// * approval (or a review timeout) moves to the next step, `Done` after animation;
/// * feedback re-runs the step while feedback rounds remain (`max_rounds` per
///   step), then advances as if approved;
/// * an agent failure, or a signal from an agent that does not own the
///   current phase, fails the run.
pub fn next_agent(state: &RunState, signal: &Signal) -> Transition {
    let phase = state.phase;
    let Some(expected) = phase.agent() else {
        return Transition::fail(format!("signal from {} after the run ended", signal.agent));
    };
    if signal.agent != expected {
        return Transition::fail(format!(
            "signal from {} while {:?} expects {}",
            signal.agent, phase, expected
        ));
    }
    let observer = expected == Agent::Observer;
    match &signal.status {
        SignalStatus::Failed { error } => Transition::fail(format!("{} failed: {error}", signal.agent)),
        SignalStatus::Completed { .. } if observer => Transition::fail("the observer must answer with a review".into()),
        SignalStatus::Reviewed { .. } if !observer => Transition::fail(format!("{} cannot send a review", signal.agent)),
        SignalStatus::Completed { .. } => Transition::to(review_of(phase)),
        SignalStatus::Reviewed { decision } => match &decision.verdict {
            Verdict::Approve | Verdict::Timeout => Transition::to(after_review(phase)),
            Verdict::Feedback(_) => {
                let step = phase.step().expect("review phases belong to a step");
                let used = state.rounds[step];
                if used >= state.max_rounds {
                    return Transition::to(after_review(phase));
                }
                let exhausted = used + 1 >= state.max_rounds;
                Transition {
                    feedback_round: true,
                    ..Transition::to(if exhausted { after_review(phase) } else { redo(phase) })
                }
            }
        },
    }
}

/// Optional second opinion on which agent runs next (e.g. an LLM). Its choice
/// is only a proposal: the manager keeps the rule-table decision.
pub trait AgentChooser: Send + Sync {
    fn choose(&self, state: &RunState, signal: &Signal, table: &Transition) -> Option<Agent>;
}

/// Rule-table decision plus a warning when a chooser proposed something else.
pub fn schedule_with(chooser: Option<&dyn AgentChooser>, state: &RunState, signal: &Signal) -> (Transition, Option<String>) {
    let table = next_agent(state, signal);
    let warning = chooser.and_then(|c| match c.choose(state, signal, &table) {
        Some(agent) if Some(agent) != table.next => Some(format!(
            "manager chooser proposed {agent}; rule table selects {}",
            table.next.map_or("nothing (terminal)".to_string(), |a| a.to_string())
        )),
        _ => None,
    });
    (table, warning)
}
