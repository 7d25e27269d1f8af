//! Capacity-bounded replay buffer with equal per-task shares and video-wise
//! sampling.
//!
//! After finishing task T the buffer rebalances to quotas
//! floor(capacity / T), remainder to the earliest tasks; each task's share is
//! drawn video-wise: as equal as possible per video, with shortfall from
//! short videos redistributed round-robin to videos that still have frames.
//! The buffer stores references plus provenance, never pixels, and can be
//! audited against the history of finished tasks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;

/// Full-scale challenge buffer capacities.
pub const TRACK2_BUFFER_CAPACITY: usize = 3500;
pub const TRACK3_BUFFER_CAPACITY: usize = 5000;

const TAG_UPDATE: u64 = 0x20;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("protocol error: update for task {got} but next expected task is {expected}")]
    Protocol { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Location of a stored sample within the experience stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub experience: usize,
    pub index: usize,
}

/// One buffer entry: the sample reference plus immutable provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub sample: SampleRef,
    /// 1-based index of the task the sample was drawn from.
    pub task_index: usize,
    pub video_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    rng_seed: u64,
    /// Number of update_buffer calls so far. Equals the highest stored
    /// task_index except when a task stored nothing (quota 0 or an empty
    /// experience), where entries alone could not recover the position.
    tasks_finished: usize,
    entries: Vec<Entry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng_seed: u64) -> Self {
        ReplayBuffer {
            capacity,
            rng_seed,
            tasks_finished: 0,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tasks_finished(&self) -> usize {
        self.tasks_finished
    }

    /// Equal per-task quotas for `tasks` stored tasks: floor shares with the
    /// remainder going one-each to the earliest tasks.
    pub fn quotas(capacity: usize, tasks: usize) -> Vec<usize> {
        let base = capacity / tasks;
        let rem = capacity % tasks;
        (0..tasks).map(|t| base + usize::from(t < rem)).collect()
    }

    /// Rebalance after finishing `task_index`: existing tasks are
    /// down-sampled (video-wise) to the new equal quota and the finished
    /// task's share is filled by video-wise sampling of its samples.
    pub fn update_buffer(
        &mut self,
        new_samples: &[(SampleRef, u32)],
        task_index: usize,
    ) -> Result<(), ReplayError> {
        let expected = self.tasks_finished + 1;
        if task_index != expected {
            return Err(ReplayError::Protocol {
                expected,
                got: task_index,
            });
        }
        let quotas = Self::quotas(self.capacity, task_index);
        let mut next = Vec::with_capacity(self.capacity.min(self.entries.len() + new_samples.len()));
        for t in 1..task_index {
            let old: Vec<Entry> = self
                .entries
                .iter()
                .filter(|e| e.task_index == t)
                .cloned()
                .collect();
            let quota = quotas[t - 1];
            if old.len() <= quota {
                next.extend(old);
            } else {
                let mut rng = stream(self.rng_seed, &[TAG_UPDATE, task_index as u64, t as u64]);
                next.extend(video_wise_sample(&old, |e| e.video_id, quota, &mut rng));
            }
        }
        let mut rng = stream(
            self.rng_seed,
            &[TAG_UPDATE, task_index as u64, task_index as u64],
        );
        let fresh: Vec<Entry> = new_samples
            .iter()
            .map(|&(sample, video_id)| Entry {
                sample,
                task_index,
                video_id,
            })
            .collect();
        next.extend(video_wise_sample(
            &fresh,
            |e| e.video_id,
            quotas[task_index - 1],
            &mut rng,
        ));
        self.entries = next;
        self.tasks_finished = task_index;
        Ok(())
    }

    /// Immutable training pool: the current experience's samples followed by
    /// every buffer entry.
    pub fn training_pool(&self, current: &[(SampleRef, u32)], current_task: usize) -> Vec<Entry> {
        let mut pool: Vec<Entry> = current
            .iter()
            .map(|&(sample, video_id)| Entry {
                sample,
                task_index: current_task,
                video_id,
            })
            .collect();
        pool.extend(self.entries.iter().cloned());
        pool
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Check all buffer invariants against the finished-task history.
    pub fn audit(&self, finished: &[TaskMeta]) -> AuditReport {
        let mut violations = Vec::new();
        if self.entries.len() > self.capacity {
            violations.push(Violation::Capacity {
                count: self.entries.len(),
                capacity: self.capacity,
            });
        }
        let last_finished = finished.iter().map(|t| t.task_index).max().unwrap_or(0);
        let meta: BTreeMap<usize, &TaskMeta> =
            finished.iter().map(|t| (t.task_index, t)).collect();
        let mut per_task: BTreeMap<usize, Vec<&Entry>> = BTreeMap::new();
        for e in &self.entries {
            if e.task_index > last_finished || e.task_index == 0 {
                violations.push(Violation::FutureData { entry: e.clone() });
                continue;
            }
            per_task.entry(e.task_index).or_default().push(e);
        }

        let quotas = if last_finished > 0 {
            Self::quotas(self.capacity, last_finished)
        } else {
            Vec::new()
        };
        for &t in per_task.keys() {
            if !meta.contains_key(&t) {
                violations.push(Violation::UnknownTask { task_index: t });
            }
        }
        for (&t, m) in &meta {
            let entries = per_task.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            let quota = quotas.get(t - 1).copied().unwrap_or(0);
            let available: usize = m.video_frames.values().sum();
            // a task may fall short of its quota only by exhausting its pool
            let expected = quota.min(available);
            if entries.len() != expected {
                violations.push(Violation::TaskImbalance {
                    task_index: t,
                    count: entries.len(),
                    quota: expected,
                });
            }

            let mut per_video: BTreeMap<u32, usize> = BTreeMap::new();
            for e in entries {
                match m.video_frames.get(&e.video_id) {
                    None => violations.push(Violation::UnknownVideo { entry: (*e).clone() }),
                    Some(&frames) => {
                        let c = per_video.entry(e.video_id).or_insert(0);
                        *c += 1;
                        if *c > frames {
                            violations.push(Violation::VideoOverdraw {
                                task_index: t,
                                video_id: e.video_id,
                                count: *c,
                                frames,
                            });
                        }
                    }
                }
            }
            // per-video balance: counts differ by at most one, except that a
            // video holding all of its frames may fall further behind
            for (&v, &frames) in &m.video_frames {
                let c = per_video.get(&v).copied().unwrap_or(0);
                let exhausted = c == frames;
                if exhausted {
                    continue;
                }
                for (&w, &cw) in &per_video {
                    if cw >= c + 2 {
                        violations.push(Violation::VideoImbalance {
                            task_index: t,
                            video_low: v,
                            count_low: c,
                            video_high: w,
                            count_high: cw,
                        });
                    }
                }
            }
        }
        AuditReport { violations }
    }
}

/// Per-task history: how many frames each of its videos holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_index: usize,
    pub video_frames: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    Capacity {
        count: usize,
        capacity: usize,
    },
    FutureData {
        entry: Entry,
    },
    UnknownTask {
        task_index: usize,
    },
    UnknownVideo {
        entry: Entry,
    },
    TaskImbalance {
        task_index: usize,
        count: usize,
        quota: usize,
    },
    VideoOverdraw {
        task_index: usize,
        video_id: u32,
        count: usize,
        frames: usize,
    },
    VideoImbalance {
        task_index: usize,
        video_low: u32,
        count_low: usize,
        video_high: u32,
        count_high: usize,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Capacity { count, capacity } => {
                write!(f, "capacity: {count} entries exceed capacity {capacity}")
            }
            Violation::FutureData { entry } => write!(
                f,
                "future data: entry {:?} from task {} not yet finished",
                entry.sample, entry.task_index
            ),
            Violation::UnknownTask { task_index } => {
                write!(f, "unknown task {task_index} in buffer")
            }
            Violation::UnknownVideo { entry } => write!(
                f,
                "unknown video {} for task {}",
                entry.video_id, entry.task_index
            ),
            Violation::TaskImbalance { task_index, count, quota } => write!(
                f,
                "task balance: task {task_index} holds {count}, expected {quota}"
            ),
            Violation::VideoOverdraw { task_index, video_id, count, frames } => write!(
                f,
                "video overdraw: task {task_index} video {video_id} holds {count} of {frames} frames"
            ),
            Violation::VideoImbalance {
                task_index,
                video_low,
                count_low,
                video_high,
                count_high,
            } => write!(
                f,
                "video balance: task {task_index} video {video_high} holds {count_high} while non-exhausted video {video_low} holds {count_low}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for AuditReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            write!(f, "ok")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Select `quota` items spread as evenly as possible across videos. Videos
/// with fewer items than their share contribute everything; the shortfall is
/// redistributed round-robin (ascending video id) to videos with items left.
/// Selection within a video is uniform without replacement. A quota at or
/// above the total returns everything.
pub fn video_wise_sample<T: Clone, R: Rng>(
    samples: &[T],
    video_of: impl Fn(&T) -> u32,
    quota: usize,
    rng: &mut R,
) -> Vec<T> {
    if quota >= samples.len() {
        return samples.to_vec();
    }
    let mut by_video: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_video.entry(video_of(s)).or_default().push(i);
    }
    let videos: Vec<u32> = by_video.keys().copied().collect();
    let n = videos.len();
    // deal one frame per video per round, skipping exhausted videos, until
    // the quota is met; ties in the last partial round favor earlier ids
    let mut share = vec![0usize; n];
    let mut dealt = 0;
    while dealt < quota {
        let mut progressed = false;
        for i in 0..n {
            if dealt == quota {
                break;
            }
            if share[i] < by_video[&videos[i]].len() {
                share[i] += 1;
                dealt += 1;
                progressed = true;
            }
        }
        assert!(progressed, "quota below total but no video can absorb it");
    }
    let mut out = Vec::with_capacity(quota);
    for (v, &s) in videos.iter().zip(&share) {
        let idxs = &by_video[v];
        let picked = rand::seq::index::sample(rng, idxs.len(), s);
        let mut chosen: Vec<usize> = picked.iter().map(|k| idxs[k]).collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| samples[i].clone()));
    }
    out
}
