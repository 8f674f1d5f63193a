//! The agent manager, story designer and observer: an event-sourced state
//! machine driving design → storyboard → animation with review rounds.

mod designer;
mod observer;
mod run;
mod schedule;
mod state;
mod store;

pub use designer::{
    design_story, script_from_reply, template_script, ChatBackend, DesignerBackend, ScriptShot, StoryScript, DESIGNER_ROLE_MESSAGE,
    MANAGER_ROLE_MESSAGE,
};
pub use observer::{storyboard_mask_iou, HumanReviewer, Observer, ObserverSpec, ReviewMaterial, ReviewRequest, ScoreMetric};
pub use run::{attempt_seed, run_pipeline, system_clock, PipelineContext, RunConfig, Subject, SubjectLookup};
pub use schedule::{next_agent, schedule_with, AgentChooser, Transition};
pub use state::{
    Agent, ArtifactRef, Event, EventKind, Phase, ReviewDecision, RunArtifacts, RunState, Signal, SignalStatus, Verdict,
};
pub use store::{content_hash, media_type_for, ArtifactStore, DirStore, MemoryStore, MEDIA_JSON, MEDIA_PGM, MEDIA_PNG, MEDIA_TEXT};
