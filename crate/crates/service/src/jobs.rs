//! Job records, their state machine and the append-only journal.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use dfscan_core::{Job, JobState, ProblemDetail};

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error("unknown job {0}")]
    NotFound(String),
    #[error("job {id}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition {
        id: String,
        from: JobState,
        to: JobState,
    },
    #[error("journal: {0}")]
    Journal(#[from] io::Error),
}

/// Append-only JSON-lines log of job snapshots. The last line per job wins
/// on replay.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, job: &Job) -> io::Result<()> {
        let mut line = serde_json::to_vec(job).map_err(io::Error::other)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(&line)?;
        file.flush()
    }

    /// Latest snapshot of every job, in first-submission order. A torn
    /// final line (crash mid-write) is ignored.
    pub fn replay(path: &Path) -> io::Result<Vec<Job>> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut order = Vec::new();
        let mut latest: HashMap<String, Job> = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Job>(&line) {
                Ok(job) => {
                    if !latest.contains_key(&job.job_id) {
                        order.push(job.job_id.clone());
                    }
                    latest.insert(job.job_id.clone(), job);
                }
                Err(e) => {
                    tracing::warn!(line = n + 1, error = %e, "skipping unreadable journal line")
                }
            }
        }
        Ok(order
            .into_iter()
            .filter_map(|id| latest.remove(&id))
            .collect())
    }
}

/// In-memory job table, mirrored to the journal when one is attached.
#[derive(Debug, Default)]
pub struct JobStore {
    jobs: Mutex<HashMap<String, Job>>,
    journal: Option<Journal>,
}

impl JobStore {
    pub fn new(journal: Option<Journal>) -> Self {
        Self {
            jobs: Mutex::new(HashMap::new()),
            journal,
        }
    }

    fn record(&self, job: &Job) -> Result<(), JobError> {
        if let Some(j) = &self.journal {
            j.append(job)?;
        }
        Ok(())
    }

    /// Loads replayed jobs as they are, without journaling them again.
    pub fn restore(&self, jobs: impl IntoIterator<Item = Job>) {
        let mut table = self.jobs.lock().unwrap();
        for job in jobs {
            table.insert(job.job_id.clone(), job);
        }
    }

    pub fn create(&self, url: &str, now: DateTime<Utc>) -> Result<Job, JobError> {
        let job = Job {
            job_id: uuid::Uuid::new_v4().to_string(),
            state: JobState::Queued,
            submitted_at: now,
            url: url.to_string(),
            finished_at: None,
            result_ref: None,
            problem: None,
        };
        self.record(&job)?;
        self.jobs
            .lock()
            .unwrap()
            .insert(job.job_id.clone(), job.clone());
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    /// Moves a job along the state machine; anything other than
    /// queued → processing → completed | failed is refused.
    pub fn transition(
        &self,
        id: &str,
        to: JobState,
        result_ref: Option<String>,
        problem: Option<ProblemDetail>,
    ) -> Result<Job, JobError> {
        let mut table = self.jobs.lock().unwrap();
        let job = table
            .get_mut(id)
            .ok_or_else(|| JobError::NotFound(id.to_string()))?;
        if !job.state.can_transition_to(to) {
            return Err(JobError::IllegalTransition {
                id: id.to_string(),
                from: job.state,
                to,
            });
        }
        let mut next = job.clone();
        next.state = to;
        if to.is_terminal() {
            next.finished_at = Some(Utc::now());
        }
        next.result_ref = result_ref.or(next.result_ref);
        next.problem = problem.or(next.problem);
        // journal first: a job never runs ahead of its persisted state
        if let Some(j) = &self.journal {
            j.append(&next)?;
        }
        *job = next.clone();
        Ok(next)
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
