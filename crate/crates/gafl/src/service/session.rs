//! The session state machine. A session is the fold of its event log; the
//! same `apply` runs for live requests and for replay after a restart.

use std::collections::BTreeMap;

use gafl_core::finetune::majority_label;
use gafl_core::{Annotation, FinetuneConfig, Label, LossReport, SelectionConfig};
use serde::{Deserialize, Serialize};

use super::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    AwaitingAnnotations,
    Finetuning,
    Ready,
    Failed,
}

impl SessionState {
    /// The only transitions a session may take.
    pub fn can_move_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Created, AwaitingAnnotations) | (AwaitingAnnotations, Finetuning) | (Finetuning, Ready) | (Finetuning, Failed)
        )
    }
}

/// Selection scores of one query-aware candidate, one entry per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub id: String,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub i: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub status: JobStatus,
    pub config: FinetuneConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<LossReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// Creation, including the synchronous selection.
    Created {
        id: String,
        dataset_id: String,
        query_ids: Vec<String>,
        selection_config: SelectionConfig,
        selected_ids: Vec<String>,
        candidates: Vec<CandidateScores>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cloned_from: Option<String>,
    },
    Annotated {
        annotations: Vec<Annotation>,
    },
    FinetuneStarted {
        job_id: String,
        config: FinetuneConfig,
    },
    FinetuneSucceeded {
        job_id: String,
        report: LossReport,
    },
    FinetuneFailed {
        job_id: String,
        error: String,
    },
}

pub const ANONYMOUS: &str = "anonymous";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Session {
    pub id: String,
    pub dataset_id: String,
    pub state: SessionState,
    pub query_ids: Vec<String>,
    pub selection_config: SelectionConfig,
    pub selected_ids: Vec<String>,
    /// `D_ex`, kept for audit and served by the selection endpoint.
    #[serde(skip)]
    pub candidates: Vec<CandidateScores>,
    /// Per clip, the latest vote of each annotator.
    pub votes: BTreeMap<String, BTreeMap<String, Label>>,
    /// Majority label per clip; ties count as negative.
    pub labels: BTreeMap<String, Label>,
    /// Selected clips still without a label, in selection order.
    pub missing: Vec<String>,
    pub jobs: Vec<JobRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloned_from: Option<String>,
}

impl Session {
    /// Starts a session from its `Created` event.
    pub fn from_event(event: &Event) -> ServiceResult<Self> {
        let Event::Created { id, dataset_id, query_ids, selection_config, selected_ids, candidates, cloned_from } = event
        else {
            return Err(ServiceError::internal("session log does not start with a creation event"));
        };
        let mut s = Session {
            id: id.clone(),
            dataset_id: dataset_id.clone(),
            state: SessionState::Created,
            query_ids: query_ids.clone(),
            selection_config: selection_config.clone(),
            selected_ids: selected_ids.clone(),
            candidates: candidates.clone(),
            votes: BTreeMap::new(),
            labels: BTreeMap::new(),
            missing: selected_ids.clone(),
            jobs: Vec::new(),
            cloned_from: cloned_from.clone(),
        };
        s.move_to(SessionState::AwaitingAnnotations)?;
        Ok(s)
    }

    fn move_to(&mut self, next: SessionState) -> ServiceResult<()> {
        if !self.state.can_move_to(next) {
            return Err(ServiceError::internal(format!("illegal transition {:?} -> {next:?}", self.state)));
        }
        self.state = next;
        Ok(())
    }

    pub fn current_job(&self) -> Option<&JobRecord> {
        self.jobs.last()
    }

    /// Checks that `event` is allowed now without changing anything.
    pub fn check(&self, event: &Event) -> ServiceResult<()> {
        match event {
            Event::Created { .. } => Err(ServiceError::internal("session already exists")),
            Event::Annotated { annotations } => {
                match self.state {
                    SessionState::AwaitingAnnotations => {}
                    SessionState::Finetuning => {
                        return Err(ServiceError::conflict("annotations are closed while fine-tuning runs"))
                    }
                    SessionState::Ready | SessionState::Failed => {
                        return Err(ServiceError::conflict(format!(
                            "session {} is {:?}; clone it to annotate again",
                            self.id, self.state
                        )))
                    }
                    SessionState::Created => return Err(ServiceError::conflict("selection has not finished")),
                }
                let unknown: Vec<String> = annotations
                    .iter()
                    .filter(|a| !self.selected_ids.contains(&a.video_id))
                    .map(|a| a.video_id.clone())
                    .collect();
                if !unknown.is_empty() {
                    return Err(ServiceError::invalid("annotations", "only selected clips can be annotated").with_ids(unknown));
                }
                Ok(())
            }
            Event::FinetuneStarted { .. } => match self.state {
                SessionState::AwaitingAnnotations if self.missing.is_empty() => Ok(()),
                SessionState::AwaitingAnnotations => {
                    Err(ServiceError::conflict("some selected clips are unlabeled").with_ids(self.missing.clone()))
                }
                SessionState::Finetuning => Err(ServiceError::conflict("a fine-tune job is already running")),
                _ => Err(ServiceError::conflict(format!(
                    "session {} is {:?}; clone it to fine-tune again",
                    self.id, self.state
                ))),
            },
            Event::FinetuneSucceeded { job_id, .. } | Event::FinetuneFailed { job_id, .. } => {
                let running = self.current_job().is_some_and(|j| &j.job_id == job_id && j.status == JobStatus::Running);
                if self.state == SessionState::Finetuning && running {
                    Ok(())
                } else {
                    Err(ServiceError::conflict(format!("job {job_id} is not running")))
                }
            }
        }
    }

    pub fn apply(&mut self, event: &Event) -> ServiceResult<()> {
        self.check(event)?;
        match event {
            Event::Created { .. } => unreachable!("rejected by check"),
            Event::Annotated { annotations } => {
                for a in annotations {
                    let who = a.annotator.clone().unwrap_or_else(|| ANONYMOUS.into());
                    self.votes.entry(a.video_id.clone()).or_default().insert(who, a.label);
                }
                self.labels = self
                    .votes
                    .iter()
                    .filter_map(|(id, v)| majority_label(v.values().copied()).map(|l| (id.clone(), l)))
                    .collect();
                self.missing = self.selected_ids.iter().filter(|id| !self.labels.contains_key(*id)).cloned().collect();
            }
            Event::FinetuneStarted { job_id, config } => {
                self.move_to(SessionState::Finetuning)?;
                self.jobs.push(JobRecord {
                    job_id: job_id.clone(),
                    status: JobStatus::Running,
                    config: config.clone(),
                    report: None,
                    error: None,
                });
            }
            Event::FinetuneSucceeded { report, .. } => {
                self.move_to(SessionState::Ready)?;
                let job = self.jobs.last_mut().expect("checked");
                job.status = JobStatus::Succeeded;
                job.report = Some(report.clone());
            }
            Event::FinetuneFailed { error, .. } => {
                self.move_to(SessionState::Failed)?;
                let job = self.jobs.last_mut().expect("checked");
                job.status = JobStatus::Failed;
                job.error = Some(error.clone());
            }
        }
        Ok(())
    }

    /// Annotations reproducing the current votes, for cloning.
    pub fn vote_annotations(&self) -> Vec<Annotation> {
        let mut out = Vec::new();
        for (id, votes) in &self.votes {
            for (who, &label) in votes {
                let mut a = Annotation::new(id.clone(), label);
                if who != ANONYMOUS {
                    a.annotator = Some(who.clone());
                }
                out.push(a);
            }
        }
        out
    }
}
