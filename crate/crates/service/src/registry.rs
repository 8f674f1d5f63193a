//! Persistent subject registry. Sprites, reference frames, masks and
//! customization checkpoints live in the artifact store; `subjects/<id>.json`
//! lists their hashes.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use storyagent_core::checkpoint::{load_customization_for, save_customization};
use storyagent_core::denoiser::DenoiserWeights;
use storyagent_core::imaging::{Image, Mask};
use storyagent_core::lora_be::{Customization, ReferenceClip};
use storyagent_core::orchestrator::{ArtifactStore, DirStore, Subject, MEDIA_PGM, MEDIA_PNG};
use storyagent_core::storyboard::{Sprite, SubjectProfile};

use crate::error::{Result, ServiceError};

const MEDIA_CHECKPOINT: &str = "application/octet-stream";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub prompt: String,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
}

/// A subject as listed by `GET /subjects`; every field but `id` is an artifact hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub sprite: String,
    pub clips: Vec<ClipRecord>,
    pub customization: Option<String>,
}

/// Subject ids: 1–32 characters of `[a-z0-9_-]`.
pub fn valid_subject_id(id: &str) -> bool {
    (1..=32).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub struct Registry {
    dir: PathBuf,
    store: Arc<DirStore>,
    subjects: RwLock<IndexMap<String, (SubjectRecord, Arc<Subject>)>>,
}

fn fetch(store: &DirStore, hash: &str) -> Result<Vec<u8>> {
    store
        .get(hash)?
        .map(|(bytes, _)| bytes)
        .ok_or_else(|| ServiceError::NotFound(format!("artifact {hash}")))
}

impl Registry {
    /// Loads every registered subject under `root/subjects`.
    pub fn open(root: &Path, store: Arc<DirStore>, weights: &DenoiserWeights) -> Result<Self> {
        let dir = root.join("subjects");
        std::fs::create_dir_all(&dir)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut subjects = IndexMap::new();
        for path in paths {
            let record: SubjectRecord = serde_json::from_slice(&std::fs::read(&path)?)?;
            let subject = Self::materialize(&store, &record, weights)?;
            subjects.insert(record.id.clone(), (record, Arc::new(subject)));
        }
        Ok(Self {
            dir,
            store,
            subjects: RwLock::new(subjects),
        })
    }

    fn materialize(store: &DirStore, record: &SubjectRecord, weights: &DenoiserWeights) -> Result<Subject> {
        let sprite = Sprite::decode_png(&fetch(store, &record.sprite)?)?;
        let mut clips = Vec::with_capacity(record.clips.len());
        for c in &record.clips {
            let frames = c
                .frames
                .iter()
                .map(|h| Ok(Image::decode_png(&fetch(store, h)?)?))
                .collect::<Result<Vec<_>>>()?;
            let masks = c
                .masks
                .iter()
                .map(|h| Ok(Mask::decode_pgm(&fetch(store, h)?)?))
                .collect::<Result<Vec<_>>>()?;
            clips.push(ReferenceClip::new(frames, masks, c.prompt.clone())?);
        }
        let customization = match &record.customization {
            Some(h) => Some(load_customization_for(&fetch(store, h)?, weights)?),
            None => None,
        };
        Ok(Subject {
            profile: SubjectProfile::new(record.id.clone(), sprite, clips)?,
            customization,
        })
    }

    /// Registers a new subject. Ids are immutable: re-registering conflicts.
    pub fn add(&self, profile: SubjectProfile, customization: Option<Customization>) -> Result<SubjectRecord> {
        if !valid_subject_id(&profile.id) {
            return Err(ServiceError::BadRequest(format!(
                "subject id '{}' must be 1-32 characters of a-z, 0-9, '_' or '-'",
                profile.id
            )));
        }
        let sprite = self.store.put(&profile.sprite.encode_png()?, MEDIA_PNG)?;
        let mut clips = Vec::with_capacity(profile.clips.len());
        for c in &profile.clips {
            clips.push(ClipRecord {
                prompt: c.prompt.clone(),
                frames: c
                    .frames
                    .iter()
                    .map(|f| Ok(self.store.put(&f.encode_png()?, MEDIA_PNG)?))
                    .collect::<Result<_>>()?,
                masks: c
                    .masks
                    .iter()
                    .map(|m| Ok(self.store.put(&m.encode_pgm(), MEDIA_PGM)?))
                    .collect::<Result<_>>()?,
            });
        }
        let customization_hash = match &customization {
            Some(c) => Some(self.store.put(&save_customization(c)?, MEDIA_CHECKPOINT)?),
            None => None,
        };
        let record = SubjectRecord {
            id: profile.id.clone(),
            sprite,
            clips,
            customization: customization_hash,
        };
        let mut subjects = self.subjects.write().expect("registry lock");
        if subjects.contains_key(&record.id) {
            return Err(ServiceError::Conflict(format!("subject '{}' already exists", record.id)));
        }
        let path = self.dir.join(format!("{}.json", record.id));
        let tmp = self.dir.join(format!(".{}.json.tmp", record.id));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&record)?)?;
        std::fs::rename(&tmp, &path)?;
        subjects.insert(
            record.id.clone(),
            (
                record.clone(),
                Arc::new(Subject {
                    profile,
                    customization,
                }),
            ),
        );
        Ok(record)
    }

    /// Attaches (or replaces) a subject's customization checkpoint.
    pub fn set_customization(&self, id: &str, customization: Customization) -> Result<SubjectRecord> {
        let hash = self.store.put(&save_customization(&customization)?, MEDIA_CHECKPOINT)?;
        let mut subjects = self.subjects.write().expect("registry lock");
        let (record, subject) = subjects
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(format!("subject '{id}'")))?;
        let mut updated = record.clone();
        updated.customization = Some(hash);
        let path = self.dir.join(format!("{id}.json"));
        let tmp = self.dir.join(format!(".{id}.json.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&updated)?)?;
        std::fs::rename(&tmp, &path)?;
        *subject = Arc::new(Subject {
            profile: subject.profile.clone(),
            customization: Some(customization),
        });
        *record = updated.clone();
        Ok(updated)
    }

    pub fn list(&self) -> Vec<SubjectRecord> {
        self.subjects.read().expect("registry lock").values().map(|(r, _)| r.clone()).collect()
    }

    /// Current subjects, for one run.
    pub fn snapshot(&self) -> IndexMap<String, Arc<Subject>> {
        self.subjects
            .read()
            .expect("registry lock")
            .iter()
            .map(|(k, (_, s))| (k.clone(), Arc::clone(s)))
            .collect()
    }
}
