//! Observer backends: what reviews each step's output between phases.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::designer::StoryScript;
use super::state::{ArtifactRef, Phase, ReviewDecision, Verdict};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::metrics::{subject_fidelity, temporal_consistency};
use crate::storyboard::{motion_masks, render_scene, Sprite, Storyboard};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    /// Storyboard: mean IoU of the segmented subject mask against the mask
    /// the scene renderer draws for the planned placement.
    MaskIou,
    /// Videos: mean subject fidelity of the shots.
    SubjectFidelity,
    /// Videos: mean temporal consistency of the shots.
    TemporalConsistency,
}

impl ScoreMetric {
    fn name(self) -> &'static str {
        match self {
            ScoreMetric::MaskIou => "mask_iou",
            ScoreMetric::SubjectFidelity => "subject_fidelity",
            ScoreMetric::TemporalConsistency => "temporal_consistency",
        }
    }
}

/// Observer configuration as accepted by the CLI and the HTTP API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObserverSpec {
    AlwaysApprove {},
    /// Approves iff the metric is at least `tau`. Steps the metric does not
    /// apply to are approved.
    Threshold { metric: ScoreMetric, tau: f64 },
    /// Waits for a human decision; no decision within the timeout yields a
    /// `timeout` verdict, which proceeds like an approval.
    HumanQueue {
        #[serde(default = "default_review_timeout")]
        timeout_secs: u64,
    },
    /// Replays fixed verdicts in review order, then approves.
    Scripted { verdicts: Vec<Verdict> },
}

impl Default for ObserverSpec {
    fn default() -> Self {
        ObserverSpec::AlwaysApprove {}
    }
}

fn default_review_timeout() -> u64 {
    600
}

/// What a human reviewer is shown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub run_id: String,
    pub phase: Phase,
    /// Feedback rounds already used in this step.
    pub round: usize,
    pub max_rounds: usize,
    pub artifacts: Vec<ArtifactRef>,
    pub shot_texts: Vec<String>,
}

/// The review queue a human answers through (the service implements it).
/// `review` blocks the calling run only.
pub trait HumanReviewer: Send + Sync {
    /// The decision, or `None` when `timeout` passed without one.
    fn review(&self, request: ReviewRequest, timeout: Duration) -> Result<Option<ReviewDecision>>;
}

/// The output under review, for scorers.
#[derive(Clone, Copy)]
pub enum ReviewMaterial<'a> {
    Script(&'a StoryScript),
    Storyboard(&'a Storyboard),
    Videos {
        board: &'a Storyboard,
        videos: &'a [Vec<Image>],
        sprite: &'a Sprite,
    },
}

/// Mean mask IoU over all planned shots; failed shots count as 0.
pub fn storyboard_mask_iou(board: &Storyboard) -> f64 {
    let planned = board.shots.len() + board.failures.len();
    if planned == 0 {
        return 0.0;
    }
    let total: f64 = board
        .shots
        .iter()
        .map(|s| s.mask.iou(&render_scene(&s.spec, None).1))
        .sum();
    total / planned as f64
}

fn score(metric: ScoreMetric, material: ReviewMaterial<'_>) -> Result<Option<f64>> {
    match (metric, material) {
        (ScoreMetric::MaskIou, ReviewMaterial::Storyboard(board)) => Ok(Some(storyboard_mask_iou(board))),
        (ScoreMetric::SubjectFidelity | ScoreMetric::TemporalConsistency, ReviewMaterial::Videos { board, videos, sprite }) => {
            if videos.is_empty() || videos.len() != board.shots.len() {
                return Err(Error::invalid("video review needs one video per storyboard shot"));
            }
            let mut total = 0.0;
            for (shot, video) in board.shots.iter().zip(videos) {
                total += if metric == ScoreMetric::SubjectFidelity {
                    subject_fidelity(video, &motion_masks(&shot.spec, &shot.mask, video.len()), sprite)?.value
                } else {
                    temporal_consistency(video)?
                };
            }
            Ok(Some(total / videos.len() as f64))
        }
        _ => Ok(None),
    }
}

pub struct Observer {
    spec: ObserverSpec,
    scripted_next: usize,
    human: Option<Arc<dyn HumanReviewer>>,
}

impl std::fmt::Debug for Observer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Observer")
            .field("spec", &self.spec)
            .field("scripted_next", &self.scripted_next)
            .field("human", &self.human.is_some())
            .finish()
    }
}

impl Observer {
    pub fn new(spec: ObserverSpec, human: Option<Arc<dyn HumanReviewer>>) -> Result<Self> {
        match &spec {
            ObserverSpec::Threshold { tau, .. } if !tau.is_finite() => {
                return Err(Error::invalid("threshold must be finite"));
            }
            ObserverSpec::HumanQueue { .. } if human.is_none() => {
                return Err(Error::invalid("human-queue observer needs a review queue"));
            }
            ObserverSpec::Scripted { verdicts } => {
                for v in verdicts {
                    ReviewDecision::new(v.clone(), "scripted")?;
                }
            }
            _ => {}
        }
        Ok(Self {
            spec,
            scripted_next: 0,
            human,
        })
    }

    pub fn spec(&self) -> &ObserverSpec {
        &self.spec
    }

    /// Reviews one step's output.
    pub fn review(&mut self, request: ReviewRequest, material: ReviewMaterial<'_>) -> Result<ReviewDecision> {
        match &self.spec {
            ObserverSpec::AlwaysApprove {} => ReviewDecision::new(Verdict::Approve, "always_approve"),
            ObserverSpec::Threshold { metric, tau } => {
                let reviewer = format!("scorer:{}", metric.name());
                match score(*metric, material)? {
                    Some(s) if s >= *tau => ReviewDecision::new(Verdict::Approve, reviewer),
                    Some(s) => ReviewDecision::new(Verdict::Feedback(format!("score {s:.2} < {tau:.2}")), reviewer),
                    None => ReviewDecision::new(Verdict::Approve, reviewer),
                }
            }
            ObserverSpec::HumanQueue { timeout_secs } => {
                let queue = self.human.as_ref().expect("checked in Observer::new");
                match queue.review(request, Duration::from_secs(*timeout_secs))? {
                    Some(decision) => ReviewDecision::new(decision.verdict, decision.reviewer),
                    None => ReviewDecision::new(Verdict::Timeout, "human_queue"),
                }
            }
            ObserverSpec::Scripted { verdicts } => {
                let verdict = verdicts.get(self.scripted_next).cloned().unwrap_or(Verdict::Approve);
                self.scripted_next += 1;
                ReviewDecision::new(verdict, "scripted")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Mask;
    use crate::storyboard::{family_sprite, generate_storyboard, parse_scene, Protocol, SubjectProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn request() -> ReviewRequest {
        ReviewRequest {
            run_id: "r".into(),
            phase: Phase::BoardReview,
            round: 0,
            max_rounds: 2,
            artifacts: vec![],
            shot_texts: vec![],
        }
    }

    fn board() -> Storyboard {
        let spec = parse_scene("shot { bg: solid(#204060); subj: <kitty> at (16,16) size 10; act: idle }").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let profile = SubjectProfile::synthesize("kitty", family_sprite(8), 1, 4, &mut rng).unwrap();
        generate_storyboard(&[spec], &profile, &Protocol::Fresh).unwrap()
    }

    #[test]
    fn threshold_embeds_the_score() {
        let mut b = board();
        assert!(storyboard_mask_iou(&b) >= 0.9);
        // Keep two fifths of the subject pixels: IoU = 0.40.
        let truth = render_scene(&b.shots[0].spec, None).1;
        assert_eq!(truth.count() % 5, 0);
        let target = truth.count() * 2 / 5;
        let mut data = vec![false; 32 * 32];
        let mut kept = 0;
        for y in 0..32 {
            for x in 0..32 {
                if truth.get(x, y) && kept < target {
                    data[y * 32 + x] = true;
                    kept += 1;
                }
            }
        }
        b.shots[0].mask = Mask::from_vec(32, 32, data).unwrap();
        let mut obs = Observer::new(
            ObserverSpec::Threshold {
                metric: ScoreMetric::MaskIou,
                tau: 0.9,
            },
            None,
        )
        .unwrap();
        let d = obs.review(request(), ReviewMaterial::Storyboard(&b)).unwrap();
        assert_eq!(d.verdict, Verdict::Feedback("score 0.40 < 0.90".into()));
        assert_eq!(d.reviewer, "scorer:mask_iou");
        let script = StoryScript {
            prompt: "p".into(),
            shots: vec![],
        };
        let d = obs.review(request(), ReviewMaterial::Script(&script)).unwrap();
        assert_eq!(d.verdict, Verdict::Approve);
    }

    #[test]
    fn scripted_then_approve() {
        let mut obs = Observer::new(
            ObserverSpec::Scripted {
                verdicts: vec![Verdict::Feedback("redo".into())],
            },
            None,
        )
        .unwrap();
        let b = board();
        let first = obs.review(request(), ReviewMaterial::Storyboard(&b)).unwrap();
        let second = obs.review(request(), ReviewMaterial::Storyboard(&b)).unwrap();
        assert_eq!(first.verdict, Verdict::Feedback("redo".into()));
        assert_eq!(second.verdict, Verdict::Approve);
        assert!(Observer::new(ObserverSpec::Scripted { verdicts: vec![Verdict::Feedback(" ".into())] }, None).is_err());
        assert!(Observer::new(ObserverSpec::HumanQueue { timeout_secs: 1 }, None).is_err());
    }

    struct Silent;
    impl HumanReviewer for Silent {
        fn review(&self, _: ReviewRequest, _: Duration) -> Result<Option<ReviewDecision>> {
            Ok(None)
        }
    }

    struct Approver;
    impl HumanReviewer for Approver {
        fn review(&self, _: ReviewRequest, _: Duration) -> Result<Option<ReviewDecision>> {
            Ok(Some(ReviewDecision::new(Verdict::Approve, "alice")?))
        }
    }

    #[test]
    fn human_queue_passes_through_or_times_out() {
        let b = board();
        let mut silent = Observer::new(ObserverSpec::HumanQueue { timeout_secs: 0 }, Some(Arc::new(Silent))).unwrap();
        assert_eq!(silent.review(request(), ReviewMaterial::Storyboard(&b)).unwrap().verdict, Verdict::Timeout);
        let mut human = Observer::new(ObserverSpec::HumanQueue { timeout_secs: 0 }, Some(Arc::new(Approver))).unwrap();
        let d = human.review(request(), ReviewMaterial::Storyboard(&b)).unwrap();
        assert_eq!((d.verdict, d.reviewer.as_str()), (Verdict::Approve, "alice"));
    }

    #[test]
    fn spec_json_shape() {
        let spec: ObserverSpec = serde_json::from_str(r#"{"kind":"threshold","metric":"mask_iou","tau":0.9}"#).unwrap();
        assert_eq!(
            spec,
            ObserverSpec::Threshold {
                metric: ScoreMetric::MaskIou,
                tau: 0.9
            }
        );
        let scripted: ObserverSpec =
            serde_json::from_str(r#"{"kind":"scripted","verdicts":[{"verdict":"feedback","text":"again"},{"verdict":"approve"}]}"#).unwrap();
        assert!(matches!(scripted, ObserverSpec::Scripted { ref verdicts } if verdicts.len() == 2));
        assert!(serde_json::from_str::<ObserverSpec>(r#"{"kind":"always_approve","x":1}"#).is_err());
    }
}
