//! Story designer backends: a deterministic template and an optional
//! chat-completion endpoint whose reply must parse as scene DSL.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storyboard::{parse_storyboard, Action, ActionKind, Background, GradientDir, Placement, Rgb8, SceneSpec};

/// Role message sent as the system prompt to an external story designer.
pub const DESIGNER_ROLE_MESSAGE: &str = "You are the Story Designer of a storytelling-video team. \
Given a story prompt, the subject NAME and a shot count N, write exactly N shots for a 32x32 pixel world, one per line, \
each in the scene language:\n\
shot { bg: solid(#rrggbb) | gradient(#rrggbb,#rrggbb,horizontal|vertical) | checker(#rrggbb,#rrggbb,CELL); \
subj: <NAME> at (X,Y) size S; act: idle | move_left | move_right | move_up | move_down | bounce [speed V]; text: \"...\" }\n\
Keep the subject box inside the frame (S between 8 and 16, X and Y between S/2 and 32-S/2), \
use speeds 0-2, and put a one-sentence description of the shot in text. Reply with the shots only.";

/// Role message for an external agent-manager chooser.
pub const MANAGER_ROLE_MESSAGE: &str = "You are the Agent Manager of a storytelling-video team with agents \
story_designer, storyboard_generator, video_creator and observer. The workflow is design, storyboard, animate; \
after each worker the observer reviews, approval moves on, feedback repeats the step until the round limit. \
Given the current phase and the last signal, reply with the single agent name that should run next, or done.";

/// One shot of a script: the free-text description and its structured scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptShot {
    pub description: String,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryScript {
    pub prompt: String,
    pub shots: Vec<ScriptShot>,
}

impl StoryScript {
    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn scenes(&self) -> Vec<SceneSpec> {
        self.shots.iter().map(|s| s.scene.clone()).collect()
    }

    /// The script in scene DSL, one shot per line.
    pub fn to_dsl(&self) -> String {
        self.shots.iter().map(|s| s.scene.to_dsl() + "\n").collect()
    }
}

/// Chat-completion endpoint settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatBackend {
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token (optional).
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_token_env() -> String {
    "STORYAGENT_CHAT_TOKEN".to_string()
}

fn default_timeout() -> u64 {
    30
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignerBackend {
    #[default]
    Template,
    ExternalChat(ChatBackend),
}

impl ChatBackend {
    /// Sends `system` + `user` messages and returns the first choice's content.
    pub fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(self.timeout_secs)))
            .build()
            .into();
        let mut req = agent.post(&self.url);
        if let Ok(token) = std::env::var(&self.token_env) {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::invalid(format!("chat backend request failed: {e}")))?;
        let reply: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::invalid(format!("chat backend reply is not JSON: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::invalid("chat backend reply has no choices[0].message.content"))
    }
}

const BACKGROUNDS: [Background; 6] = [
    Background::Solid { color: Rgb8([0x30, 0x60, 0xa0]) },
    Background::Gradient { from: Rgb8([0xf0, 0xd8, 0x90]), to: Rgb8([0x80, 0xb0, 0xe0]), dir: GradientDir::Vertical },
    Background::Checker { a: Rgb8([0x20, 0x40, 0x20]), b: Rgb8([0x40, 0x70, 0x40]), cell: 4 },
    Background::Solid { color: Rgb8([0xd0, 0xc0, 0x90]) },
    Background::Gradient { from: Rgb8([0x10, 0x20, 0x40]), to: Rgb8([0x40, 0x60, 0x80]), dir: GradientDir::Horizontal },
    Background::Checker { a: Rgb8([0xe0, 0xe0, 0xe0]), b: Rgb8([0xa0, 0xa0, 0xa0]), cell: 8 },
];

/// Deterministic script: a seeded rotation of backgrounds, actions and
/// placements around the prompt.
pub fn template_script(prompt: &str, subject: &str, shots: usize, seed: u64) -> Result<StoryScript> {
    if shots == 0 {
        return Err(Error::invalid("a story needs at least one shot"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bgs = BACKGROUNDS.to_vec();
    bgs.shuffle(&mut rng);
    let mut acts = ActionKind::ALL.to_vec();
    acts.shuffle(&mut rng);
    let mut out = Vec::with_capacity(shots);
    for i in 0..shots {
        let background = bgs[i % bgs.len()];
        let kind = acts[i % acts.len()];
        let speed = if kind == ActionKind::Idle { 0 } else { 1 };
        let size = rng.random_range(10..=14usize);
        let margin = size / 2 + 2;
        let x = rng.random_range(margin..=32 - margin);
        let y = rng.random_range(margin..=32 - margin);
        let mut scene = SceneSpec {
            background,
            subject: Some(Placement {
                subject: subject.to_string(),
                x,
                y,
                size,
            }),
            action: Action { kind, speed },
            text: String::new(),
        };
        scene.check_bounds()?;
        let description = format!("Shot {} of \"{}\": {}.", i + 1, prompt, scene.prompt(subject));
        scene.text = description.clone();
        out.push(ScriptShot { description, scene });
    }
    Ok(StoryScript {
        prompt: prompt.to_string(),
        shots: out,
    })
}

/// Parses an external reply into a script of exactly `shots` scenes.
pub fn script_from_reply(prompt: &str, reply: &str, shots: usize) -> Result<StoryScript> {
    // Models like to wrap code in fences; keep only the shot blocks.
    let body: String = reply.lines().filter(|l| !l.trim_start().starts_with("```")).collect::<Vec<_>>().join("\n");
    let scenes = parse_storyboard(&body)?;
    if scenes.len() != shots {
        return Err(Error::invalid(format!("reply has {} shots, {shots} requested", scenes.len())));
    }
    if let Some(i) = scenes.iter().position(|s| s.subject.is_none()) {
        return Err(Error::invalid(format!("shot {} has no subject", i + 1)));
    }
    Ok(StoryScript {
        prompt: prompt.to_string(),
        shots: scenes
            .into_iter()
            .map(|scene| ScriptShot {
                description: scene.text.clone(),
                scene,
            })
            .collect(),
    })
}

/// Runs the configured designer. Returns the script and, when the external
/// backend failed and the template was used instead, a warning.
pub fn design_story(prompt: &str, subject: &str, shots: usize, seed: u64, backend: &DesignerBackend) -> Result<(StoryScript, Option<String>)> {
    if shots == 0 {
        return Err(Error::invalid("a story needs at least one shot"));
    }
    match backend {
        DesignerBackend::Template => Ok((template_script(prompt, subject, shots, seed)?, None)),
        DesignerBackend::ExternalChat(chat) => {
            let user = format!("Story prompt: {prompt}\nNAME = {subject}\nN = {shots}");
            let attempt = chat
                .complete(DESIGNER_ROLE_MESSAGE, &user)
                .and_then(|reply| script_from_reply(prompt, &reply, shots))
                .map(|mut script| {
                    // The denoiser knows the subject only by its id.
                    for s in &mut script.shots {
                        if let Some(p) = &mut s.scene.subject {
                            p.subject = subject.to_string();
                        }
                    }
                    script
                });
            match attempt {
                Ok(script) => Ok((script, None)),
                Err(e) => Ok((
                    template_script(prompt, subject, shots, seed)?,
                    Some(format!("external story designer unusable ({e}); template script used")),
                )),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storyboard::parse_scene;

    #[test]
    fn template_is_stable_and_parseable() {
        let a = template_script("a day at the beach", "kitty", 4, 7).unwrap();
        let b = template_script("a day at the beach", "kitty", 4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for s in &a.shots {
            assert_eq!(parse_scene(&s.scene.to_dsl()).unwrap(), s.scene);
        }
        assert_eq!(template_script("x", "kitty", 1, 0).unwrap().len(), 1);
        assert!(template_script("x", "kitty", 0, 0).is_err());
    }

    #[test]
    fn reply_parsing_and_fallback() {
        let reply = "```\nshot { bg: solid(#102030); subj: <subject> at (16,16) size 12; act: bounce speed 1; text: \"hop\" }\n```";
        let s = script_from_reply("p", reply, 1).unwrap();
        assert_eq!(s.shots[0].description, "hop");
        assert!(script_from_reply("p", reply, 2).is_err());
        assert!(script_from_reply("p", "Once upon a time", 1).is_err());

        let unreachable = DesignerBackend::ExternalChat(ChatBackend {
            url: "http://127.0.0.1:9/v1/chat/completions".into(),
            model: "m".into(),
            token_env: default_token_env(),
            timeout_secs: 2,
        });
        let (script, warning) = design_story("p", "kitty", 2, 3, &unreachable).unwrap();
        assert_eq!(script, template_script("p", "kitty", 2, 3).unwrap());
        assert!(warning.unwrap().contains("template"));
    }
}
