//! The human review queue. Runs block in [`HumanReviewer::review`] until a
//! reviewer decides through the API or the deadline passes; only the
//! waiting run is blocked.

use std::collections::HashSet;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use storyagent_core::orchestrator::{system_clock, ArtifactRef, HumanReviewer, Phase, ReviewDecision, ReviewRequest};

use crate::error::{Result, ServiceError};

/// A review waiting for a human decision, as listed by `GET /reviews/pending`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingReview {
    pub review_id: String,
    pub run_id: String,
    pub phase: Phase,
    pub round: usize,
    pub max_rounds: usize,
    pub artifacts: Vec<ArtifactRef>,
    pub shot_texts: Vec<String>,
    /// Milliseconds since the Unix epoch after which the review times out.
    pub deadline_ms: u64,
}

struct Slot {
    view: PendingReview,
    decision: Option<ReviewDecision>,
}

#[derive(Default)]
struct Inner {
    pending: IndexMap<String, Slot>,
    /// Reviews decided, timed out or abandoned; later decisions conflict.
    closed: HashSet<String>,
    shutting_down: bool,
}

#[derive(Default)]
pub struct ReviewQueue {
    inner: Mutex<Inner>,
    changed: Condvar,
}

pub fn review_id(run_id: &str, phase: Phase, round: usize) -> String {
    format!("{run_id}-{phase:?}-{round}")
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Undecided reviews in arrival order.
    pub fn pending(&self) -> Vec<PendingReview> {
        let inner = self.inner.lock().expect("review queue lock");
        inner
            .pending
            .values()
            .filter(|s| s.decision.is_none())
            .map(|s| s.view.clone())
            .collect()
    }

    /// Records a decision. The first decision wins; any later one gets
    /// `Conflict`.
    pub fn decide(&self, id: &str, decision: ReviewDecision) -> Result<()> {
        let mut inner = self.inner.lock().expect("review queue lock");
        if inner.closed.contains(id) {
            return Err(ServiceError::Conflict(format!("review {id} was already decided")));
        }
        let slot = inner
            .pending
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(format!("no pending review {id}")))?;
        slot.decision = Some(decision);
        inner.closed.insert(id.to_string());
        self.changed.notify_all();
        Ok(())
    }

    /// Releases every waiting run with a timeout verdict and refuses new reviews.
    pub fn shutdown(&self) {
        self.inner.lock().expect("review queue lock").shutting_down = true;
        self.changed.notify_all();
    }
}

impl HumanReviewer for ReviewQueue {
    fn review(&self, request: ReviewRequest, timeout: Duration) -> storyagent_core::Result<Option<ReviewDecision>> {
        let id = review_id(&request.run_id, request.phase, request.round);
        let started = Instant::now();
        let mut inner = self.inner.lock().expect("review queue lock");
        if inner.shutting_down {
            return Ok(None);
        }
        let view = PendingReview {
            review_id: id.clone(),
            run_id: request.run_id,
            phase: request.phase,
            round: request.round,
            max_rounds: request.max_rounds,
            artifacts: request.artifacts,
            shot_texts: request.shot_texts,
            deadline_ms: system_clock() + timeout.as_millis() as u64,
        };
        inner.pending.insert(id.clone(), Slot { view, decision: None });
        tracing::info!(review = %id, "waiting for a human review");
        loop {
            let slot = inner.pending.get(&id).expect("only this waiter removes its slot");
            if let Some(decision) = slot.decision.clone() {
                inner.pending.shift_remove(&id);
                return Ok(Some(decision));
            }
            let elapsed = started.elapsed();
            if elapsed >= timeout || inner.shutting_down {
                inner.pending.shift_remove(&id);
                inner.closed.insert(id.clone());
                tracing::warn!(review = %id, "human review timed out");
                return Ok(None);
            }
            inner = self
                .changed
                .wait_timeout(inner, timeout - elapsed)
                .expect("review queue lock")
                .0;
        }
    }
}
