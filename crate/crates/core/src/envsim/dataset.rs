use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{expert_rollout, PointMassTask, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};

/// One expert episode. `observations` holds one more row than `actions`:
/// the state after the final action is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.actions.len() + 1 {
            return Err(Error::Validation(format!(
                "{} observations for {} actions",
                self.observations.len(),
                self.actions.len()
            )));
        }
        if self.observations.iter().any(|o| o.len() != OBS_DIM)
            || self.actions.iter().any(|a| a.len() != ACTION_DIM)
        {
            return Err(Error::Shape("trajectory row width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Trajectory::len).sum()
    }

    /// Keeps the first `n` episodes of every task, preserving order.
    pub fn take_per_task(&self, n: usize) -> Dataset {
        let mut seen = std::collections::BTreeMap::new();
        let episodes = self
            .episodes
            .iter()
            .filter(|e| {
                let c = seen.entry(e.task).or_insert(0usize);
                *c += 1;
                *c <= n
            })
            .cloned()
            .collect();
        Dataset { episodes }
    }
}

/// Wire format of one dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: usize,
    pub obs: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

/// `n_traj` expert episodes per task; starts are jittered with a stream
/// derived from `(seed, task id, episode index)`.
pub fn generate_dataset(tasks: &[PointMassTask], n_traj: usize, seed: u64) -> Result<Dataset> {
    let mut episodes = Vec::with_capacity(tasks.len() * n_traj);
    for task in tasks {
        for i in 0..n_traj {
            let mut rng = episode_rng(seed, task.id, i);
            let start = task.jittered_start(&mut rng);
            let (traj, result) = expert_rollout(task, start)?;
            if !result.success {
                return Err(Error::Validation(format!(
                    "expert failed task {} from {start:?}",
                    task.id
                )));
            }
            episodes.push(traj);
        }
    }
    Ok(Dataset { episodes })
}

pub(crate) fn episode_rng(seed: u64, task: usize, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 32) | episode as u64);
    rng
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in &dataset.episodes {
        let rec = EpisodeRecord {
            task: e.task,
            obs: e.observations.clone(),
            act: e.actions.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut episodes = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)?;
        let traj = Trajectory {
            task: rec.task,
            observations: rec.obs,
            actions: rec.act,
        };
        traj.validate()?;
        episodes.push(traj);
    }
    Ok(Dataset { episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::TaskSuite;

    #[test]
    fn counts_and_determinism() {
        let suite = TaskSuite::standard();
        let a = generate_dataset(&suite.pretrain, 5, 11).unwrap();
        assert_eq!(a.len(), 40);
        let b = generate_dataset(&suite.pretrain, 5, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&suite.pretrain, 5, 12).unwrap();
        assert_ne!(a, c);
        assert!(a.episodes.iter().all(|e| e.validate().is_ok()));
        assert_eq!(a.take_per_task(2).len(), 16);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let suite = TaskSuite::standard();
        let a = generate_dataset(&suite.heldout, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&a, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"task\":"));
        let first = text.lines().next().unwrap();
        assert!(first.find("\"obs\"").unwrap() < first.find("\"act\"").unwrap());
        assert_eq!(load_dataset(&path).unwrap(), a);
    }
}
