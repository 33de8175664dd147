//! N-way episode sampling.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    /// Support samples per class.
    pub shot: usize,
    /// Query samples per class.
    pub query: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSpec {
    /// Global fine ids, in local-class order.
    pub task_classes: Vec<usize>,
    /// Item indices per task class.
    pub support_idx: Vec<Vec<usize>>,
    pub query_idx: Vec<Vec<usize>>,
    /// Free seed for anything the consumer randomizes.
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn flat_support(&self) -> Vec<usize> {
        self.support_idx.iter().flatten().copied().collect()
    }

    pub fn flat_query(&self) -> Vec<usize> {
        self.query_idx.iter().flatten().copied().collect()
    }

    /// Local class of every flattened query row.
    pub fn query_targets(&self) -> Vec<usize> {
        self.query_idx
            .iter()
            .enumerate()
            .flat_map(|(j, q)| std::iter::repeat_n(j, q.len()))
            .collect()
    }

    pub fn shots(&self) -> Vec<usize> {
        self.support_idx.iter().map(Vec::len).collect()
    }
}

/// Draws `way` classes from `pool`, then disjoint support and query samples
/// from each. Every pool class must hold at least `shot + query` items.
pub fn sample_task(rng: &mut Rng, pool: &[usize], shape: EpisodeShape, data: &Dataset) -> Result<EpisodeSpec> {
    if shape.way == 0 || shape.shot == 0 || shape.query == 0 {
        return Err(Error::Config("episode way, shot and query must all be at least 1".into()));
    }
    if pool.len() < shape.way {
        return Err(Error::Data(format!(
            "{}-way episodes need at least {} classes, the pool has {}",
            shape.way,
            shape.way,
            pool.len()
        )));
    }
    let by_class = data.by_class();
    let need = shape.shot + shape.query;
    for &y in pool {
        let have = by_class.get(y).map_or(0, Vec::len);
        if have < need {
            return Err(Error::Data(format!(
                "class `{}` has {have} samples but an episode needs {need} ({} support + {} query)",
                data.fine_names.get(y).map_or("?", String::as_str),
                shape.shot,
                shape.query
            )));
        }
    }
    let mut classes = pool.to_vec();
    let (chosen, _) = classes.partial_shuffle(rng, shape.way);
    let task_classes = chosen.to_vec();
    let mut support_idx = Vec::with_capacity(shape.way);
    let mut query_idx = Vec::with_capacity(shape.way);
    for &y in &task_classes {
        let mut items = by_class[y].clone();
        let (picked, _) = items.partial_shuffle(rng, need);
        support_idx.push(picked[..shape.shot].to_vec());
        query_idx.push(picked[shape.shot..].to_vec());
    }
    let seed = rand::Rng::random(rng);
    Ok(EpisodeSpec {
        task_classes,
        support_idx,
        query_idx,
        seed,
    })
}
