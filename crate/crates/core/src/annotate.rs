//! In-memory state of the annotation service: imported tasks, accepted
//! judgment events, assignment and export.
//!
//! The store is a deterministic function of the tasks and the ordered event
//! log, so replaying a persisted log rebuilds it exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::HumanJudgment;
use crate::rubric::{Rubric, MAX_SCORE, MIN_SCORE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnnotateError {
    #[error("task {task_id}: field {field} must be non-empty")]
    MissingField { task_id: String, field: &'static str },
    #[error("task {0} was already imported with a different payload")]
    ConflictingTask(String),
    #[error("annotator id must be non-empty")]
    EmptyAnnotator,
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {task_id} uses the {expected} rubric, not {found}")]
    RubricMismatch { task_id: String, expected: Rubric, found: Rubric },
    #[error("criterion {criterion}: score {score} is outside 1-5")]
    InvalidScore { criterion: String, score: i64 },
    #[error("criterion {0:?} is not part of the rubric")]
    UnknownCriterion(String),
    #[error("missing criteria: {0:?}")]
    IncompleteRubric(Vec<String>),
    #[error("annotator {annotator_id} already judged task {task_id}")]
    DuplicateJudgment { task_id: String, annotator_id: String },
}

impl AnnotateError {
    /// True for a repeated `(task, annotator)` submission, as opposed to an
    /// invalid one.
    pub fn is_duplicate(&self) -> bool {
        matches!(self, AnnotateError::DuplicateJudgment { .. })
    }
}

/// What the annotator is shown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskPayload {
    Caption { caption_src: String, caption_tgt: String, image_ref: String },
    Image { prompt: String, image_ref: String, system_tag: String },
}

impl TaskPayload {
    pub fn rubric(&self) -> Rubric {
        match self {
            TaskPayload::Caption { .. } => Rubric::Caption,
            TaskPayload::Image { .. } => Rubric::Image,
        }
    }

    pub fn image_ref(&self) -> &str {
        match self {
            TaskPayload::Caption { image_ref, .. } | TaskPayload::Image { image_ref, .. } => image_ref,
        }
    }

    fn fields(&self) -> [(&'static str, &str); 3] {
        match self {
            TaskPayload::Caption { caption_src, caption_tgt, image_ref } => {
                [("caption_src", caption_src), ("caption_tgt", caption_tgt), ("image_ref", image_ref)]
            }
            TaskPayload::Image { prompt, image_ref, system_tag } => {
                [("prompt", prompt), ("image_ref", image_ref), ("system_tag", system_tag)]
            }
        }
    }

    /// Content-derived id for rows imported without one.
    pub fn derived_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.rubric().as_str());
        for (name, value) in self.fields() {
            h.update([0u8]);
            h.update(name);
            h.update([0u8]);
            h.update(value);
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub rubric: Rubric,
    pub payload: TaskPayload,
}

impl AnnotationTask {
    /// Builds a task, checking every payload field is non-empty. A missing
    /// `task_id` is derived from the payload.
    pub fn new(task_id: Option<String>, payload: TaskPayload) -> Result<Self, AnnotateError> {
        let task_id = task_id.filter(|t| !t.trim().is_empty()).unwrap_or_else(|| payload.derived_id());
        for (field, value) in payload.fields() {
            if value.trim().is_empty() {
                return Err(AnnotateError::MissingField { task_id, field });
            }
        }
        Ok(Self { task_id, rubric: payload.rubric(), payload })
    }
}

/// One annotator's six scores for one task. Also the judgment log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentEvent {
    pub task_id: String,
    pub annotator_id: String,
    pub rubric: Rubric,
    pub scores: BTreeMap<String, i64>,
    /// Milliseconds since the Unix epoch, assigned on acceptance.
    pub ts: u64,
}

/// Checks arity and range of a score map against `rubric`.
pub fn validate_scores(rubric: Rubric, scores: &BTreeMap<String, i64>) -> Result<(), AnnotateError> {
    if let Some(c) = scores.keys().find(|c| !rubric.has_criterion(c)) {
        return Err(AnnotateError::UnknownCriterion(c.clone()));
    }
    let missing: Vec<String> = rubric.criteria().filter(|c| !scores.contains_key(*c)).map(String::from).collect();
    if !missing.is_empty() {
        return Err(AnnotateError::IncompleteRubric(missing));
    }
    for (criterion, &score) in scores {
        if !(i64::from(MIN_SCORE)..=i64::from(MAX_SCORE)).contains(&score) {
            return Err(AnnotateError::InvalidScore { criterion: criterion.clone(), score });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct TaskState {
    task: AnnotationTask,
    judged_by: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricProgress {
    pub tasks: usize,
    /// Tasks with at least one judgment.
    pub judged_tasks: usize,
    pub judgments: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub rubrics: BTreeMap<Rubric, RubricProgress>,
    /// Accepted events per annotator.
    pub annotators: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct AnnotationStore {
    tasks: BTreeMap<String, TaskState>,
    events: Vec<JudgmentEvent>,
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(task_id).map(|s| &s.task)
    }

    pub fn events(&self) -> &[JudgmentEvent] {
        &self.events
    }

    /// Registers a task. Returns `false` if an identical task was already
    /// present.
    pub fn add_task(&mut self, task: AnnotationTask) -> Result<bool, AnnotateError> {
        match self.tasks.get(&task.task_id) {
            Some(existing) if existing.task == task => Ok(false),
            Some(_) => Err(AnnotateError::ConflictingTask(task.task_id)),
            None => {
                self.tasks.insert(task.task_id.clone(), TaskState { task, judged_by: BTreeSet::new() });
                Ok(true)
            }
        }
    }

    /// The open task of `rubric` with the fewest judgments that `annotator`
    /// has not judged yet, ties broken by task id.
    pub fn next_task(&self, annotator: &str, rubric: Rubric) -> Result<Option<&AnnotationTask>, AnnotateError> {
        if annotator.trim().is_empty() {
            return Err(AnnotateError::EmptyAnnotator);
        }
        Ok(self
            .tasks
            .values()
            .filter(|s| s.task.rubric == rubric && !s.judged_by.contains(annotator))
            .min_by(|a, b| a.judged_by.len().cmp(&b.judged_by.len()).then_with(|| a.task.task_id.cmp(&b.task.task_id)))
            .map(|s| &s.task))
    }

    /// Whether `submit(event)` would be accepted, without changing the store.
    pub fn check(&self, event: &JudgmentEvent) -> Result<(), AnnotateError> {
        if event.annotator_id.trim().is_empty() {
            return Err(AnnotateError::EmptyAnnotator);
        }
        let state = self.tasks.get(&event.task_id).ok_or_else(|| AnnotateError::UnknownTask(event.task_id.clone()))?;
        if state.task.rubric != event.rubric {
            return Err(AnnotateError::RubricMismatch {
                task_id: event.task_id.clone(),
                expected: state.task.rubric,
                found: event.rubric,
            });
        }
        validate_scores(event.rubric, &event.scores)?;
        if state.judged_by.contains(&event.annotator_id) {
            return Err(AnnotateError::DuplicateJudgment {
                task_id: event.task_id.clone(),
                annotator_id: event.annotator_id.clone(),
            });
        }
        Ok(())
    }

    /// Validates and appends an event.
    pub fn submit(&mut self, event: JudgmentEvent) -> Result<(), AnnotateError> {
        self.check(&event)?;
        if let Some(state) = self.tasks.get_mut(&event.task_id) {
            state.judged_by.insert(event.annotator_id.clone());
        }
        self.events.push(event);
        Ok(())
    }

    /// One judgment per (event, criterion), ordered by timestamp then task id,
    /// criteria in rubric order.
    pub fn export(&self, rubric: Rubric, since: Option<u64>) -> Vec<HumanJudgment> {
        let mut events: Vec<&JudgmentEvent> =
            self.events.iter().filter(|e| e.rubric == rubric && since.map_or(true, |s| e.ts >= s)).collect();
        events.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.task_id.cmp(&b.task_id)));
        let mut out = Vec::with_capacity(events.len() * 6);
        for e in events {
            let system_tag = match self.tasks.get(&e.task_id).map(|s| &s.task.payload) {
                Some(TaskPayload::Image { system_tag, .. }) => Some(system_tag.clone()),
                _ => None,
            };
            for criterion in rubric.criteria() {
                out.push(HumanJudgment {
                    item_id: e.task_id.clone(),
                    annotator_id: e.annotator_id.clone(),
                    rubric,
                    criterion: criterion.into(),
                    score: e.scores[criterion] as u8,
                    ts: e.ts,
                    system_tag: system_tag.clone(),
                });
            }
        }
        out
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress::default();
        for r in Rubric::ALL {
            p.rubrics.insert(r, RubricProgress::default());
        }
        for s in self.tasks.values() {
            let rp = p.rubrics.entry(s.task.rubric).or_default();
            rp.tasks += 1;
            rp.judgments += s.judged_by.len();
            rp.judged_tasks += usize::from(!s.judged_by.is_empty());
        }
        for e in &self.events {
            *p.annotators.entry(e.annotator_id.clone()).or_default() += 1;
        }
        p
    }
}
