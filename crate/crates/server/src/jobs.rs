//! In-memory job registry: submit, track, poll.

use std::collections::HashMap;
use std::future::Future;
use std::sync::Arc;

use tokio::sync::RwLock;

use obeval_client::api::{ErrorKind, JobState, JobStatus};
use obeval_pipeline::PipelineError;

#[derive(Clone, Default)]
pub struct JobStore {
    jobs: Arc<RwLock<HashMap<String, JobStatus>>>,
}

impl JobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a job, then spawn it; returns the job id.
    pub async fn submit<F>(&self, kind: &str, work: F) -> String
    where
        F: Future<Output = Result<serde_json::Value, PipelineError>> + Send + 'static,
    {
        let id = uuid::Uuid::new_v4().to_string();
        {
            let mut map = self.jobs.write().await;
            map.insert(
                id.clone(),
                JobStatus {
                    id: id.clone(),
                    kind: kind.to_string(),
                    state: JobState::Queued,
                    error: None,
                    error_kind: None,
                    result: None,
                },
            );
        }
        let jobs = Arc::clone(&self.jobs);
        let job_id = id.clone();
        tokio::spawn(async move {
            {
                let mut map = jobs.write().await;
                if let Some(entry) = map.get_mut(&job_id) {
                    entry.state = JobState::Running;
                }
            }
            let outcome = work.await;
            let mut map = jobs.write().await;
            if let Some(entry) = map.get_mut(&job_id) {
                match outcome {
                    Ok(result) => {
                        entry.state = JobState::Done;
                        entry.result = Some(result);
                    }
                    Err(e) => {
                        entry.state = JobState::Failed;
                        entry.error_kind = Some(if e.is_config() {
                            ErrorKind::Config
                        } else {
                            ErrorKind::Evaluation
                        });
                        entry.error = Some(e.to_string());
                    }
                }
            }
        });
        id
    }

    pub async fn get(&self, id: &str) -> Option<JobStatus> {
        self.jobs.read().await.get(id).cloned()
    }
}
