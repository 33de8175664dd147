//! Episode-based evaluation with a mean and 95% confidence interval.

use super::{sample_task, EpisodeShape, EpisodeSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Anything that labels an episode's queries with local class indices,
/// in [`EpisodeSpec::flat_query`] order.
pub trait EpisodeClassifier: Sync {
    fn classify(&self, data: &Dataset, ep: &EpisodeSpec) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEval {
    pub mean_acc: f64,
    pub ci95: f64,
    /// Per-episode accuracy in episode order.
    pub accuracies: Vec<f64>,
}

/// Mean and `1.96 · std / sqrt(n)` with the population standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

fn run_episode(clf: &dyn EpisodeClassifier, data: &Dataset, pool: &[usize], shape: EpisodeShape, seed_: u64, e: usize) -> Result<f64> {
    let ep = sample_task(&mut seed::stream(seed_, "eval-episodes", e as u64), pool, shape, data)?;
    let pred = clf.classify(data, &ep)?;
    let truth = ep.query_targets();
    if pred.len() != truth.len() {
        return Err(Error::shape("classify", &[pred.len()], &[truth.len()]));
    }
    let ok = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(ok as f64 / truth.len() as f64)
}

/// Runs `n_episodes` seeded episodes over every class present in `data`.
/// Episodes are spread over `workers` threads; the result does not depend
/// on the worker count.
pub fn evaluate_episodes(
    clf: &dyn EpisodeClassifier,
    data: &Dataset,
    shape: EpisodeShape,
    n_episodes: usize,
    seed_: u64,
    workers: usize,
) -> Result<EpisodeEval> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let pool = data.present_classes();
    let workers = workers.clamp(1, n_episodes);
    let mut accs = vec![0.0; n_episodes];
    if workers == 1 {
        for (e, acc) in accs.iter_mut().enumerate() {
            *acc = run_episode(clf, data, &pool, shape, seed_, e)?;
        }
    } else {
        let results: Vec<Vec<(usize, Result<f64>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let pool = &pool;
                    s.spawn(move || {
                        (w..n_episodes)
                            .step_by(workers)
                            .map(|e| (e, run_episode(clf, data, pool, shape, seed_, e)))
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut first_err: Option<(usize, Error)> = None;
        for (e, r) in results.into_iter().flatten() {
            match r {
                Ok(a) => accs[e] = a,
                Err(err) => {
                    if first_err.as_ref().is_none_or(|(fe, _)| e < *fe) {
                        first_err = Some((e, err));
                    }
                }
            }
        }
        if let Some((_, err)) = first_err {
            return Err(err);
        }
    }
    let (mean_acc, ci95) = mean_ci95(&accs);
    Ok(EpisodeEval {
        mean_acc,
        ci95,
        accuracies: accs,
    })
}
