//! Episodic meta-training with per-task memory.

use super::{count_correct, sample_task, EpisodeClassifier, EpisodeSpec, LogLine, Logger, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::{hierarchical_nll_graph, marginal_fine_probs, ClassHierarchy};
use crate::memory::{meta_layout, MemoryMode};
use crate::model::{HeadView, ModelConfig, ModelParams, Setting};
use crate::ndgrad::{Bound, Graph, OptimizerState, Schedule};
use crate::seed;

/// Tape handles for one episode's query batch.
pub struct EpisodeOutput {
    pub loss: crate::ndgrad::Var,
    /// `queries × way` fine logits over the task's classes.
    pub fine: crate::ndgrad::Var,
    /// `queries × |ancestors|` coarse logits.
    pub coarse: crate::ndgrad::Var,
    /// Task-local hierarchy.
    pub hierarchy: ClassHierarchy,
    /// Local class of each query row.
    pub targets: Vec<usize>,
}

/// Encodes support and query, builds task memory from the support features
/// and scores the queries against the task's restricted hierarchy.
pub fn episode_forward(
    g: &mut Graph,
    model: &ModelParams,
    b: &Bound,
    data: &Dataset,
    ep: &EpisodeSpec,
    mode: MemoryMode,
) -> Result<EpisodeOutput> {
    let (local, coarse_cols) = data.hierarchy.restrict(&ep.task_classes)?;
    let sx = g.constant(data.batch(&ep.flat_support()));
    let qx = g.constant(data.batch(&ep.flat_query()));
    let sf = model.encode(g, b, sx)?;
    let qf = model.encode(g, b, qx)?;
    let layout = meta_layout(g, sf, &ep.shots(), mode)?;
    let view = HeadView {
        hierarchy: &local,
        fine_cols: Some(&ep.task_classes),
        coarse_cols: Some(&coarse_cols),
    };
    let fw = model.forward_features(g, b, qf, Some(&layout), &view)?;
    let targets = ep.query_targets();
    let loss = hierarchical_nll_graph(g, fw.fine, fw.coarse, &targets, &local)?;
    Ok(EpisodeOutput {
        loss,
        fine: fw.fine,
        coarse: fw.coarse,
        hierarchy: local,
        targets,
    })
}

fn query_probs(g: &Graph, out: &EpisodeOutput) -> Result<Vec<Vec<f64>>> {
    let (a, c) = (g.value(out.fine), g.value(out.coarse));
    (0..out.targets.len())
        .map(|r| marginal_fine_probs(a.row(r), c.row(r), &out.hierarchy))
        .collect()
}

/// Meta-trains a fresh model on episodes drawn from `data`.
pub fn train_meta(cfg: &TrainConfig, config: ModelConfig, data: &Dataset, log: Logger) -> Result<ModelParams> {
    cfg.validate()?;
    data.ensure_trainable()?;
    if data.is_empty() {
        return Err(Error::Data(format!("empty dataset ({} split)", data.split.name())));
    }
    if config.setting != Setting::Meta {
        return Err(Error::Config("meta-training needs the meta setting".into()));
    }
    if config.num_coarse != data.hierarchy.num_coarse() || config.num_fine != data.hierarchy.num_fine() {
        return Err(Error::Config(format!(
            "model has {} fine / {} coarse classes, data has {} / {}",
            config.num_fine,
            config.num_coarse,
            data.hierarchy.num_fine(),
            data.hierarchy.num_coarse()
        )));
    }
    let heads = config.heads;
    let attention = config.attention;
    let mut model = ModelParams::init(config, &mut seed::stream(cfg.seed, "init", 0))?;
    model.params.set_trainable(|n| {
        if ModelParams::is_attention(n) {
            attention
        } else if n.starts_with("coarse.") {
            heads.coarse_mlp
        } else if n.starts_with("fine.") {
            heads.fine_mlp
        } else {
            true
        }
    });
    let mut opt = OptimizerState::adam(
        cfg.meta_lr,
        cfg.weight_decay,
        Schedule::Halving {
            every: cfg.lr_halve_every,
        },
    );
    let pool = data.present_classes();
    let mut g = Graph::new();
    let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0, 0, 0);
    let mut lr = opt.current_lr();
    for it in 0..cfg.iterations {
        let ep = sample_task(&mut seed::stream(cfg.seed, "episodes", it as u64), &pool, cfg.episode, data)?;
        g.reset();
        let b = model.params.bind(&mut g);
        let out = episode_forward(&mut g, &model, &b, data, &ep, cfg.memory_mode)?;
        g.backward(out.loss)?;
        model.params.collect_grads(&g, &b);
        opt.apply_step(&mut model.params)?;

        loss_sum += g.value(out.loss).data()[0];
        correct += count_correct(&query_probs(&g, &out)?, &out.targets);
        seen += out.targets.len();
        steps += 1;
        let last = it + 1 == cfg.iterations;
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0) || last {
            log(&LogLine {
                iter: it + 1,
                loss: loss_sum / steps as f64,
                acc: correct as f64 / seen as f64,
                lr,
            });
            (loss_sum, correct, seen, steps) = (0.0, 0, 0, 0);
            lr = opt.current_lr();
        }
    }
    model.params.set_trainable(|_| false);
    Ok(model)
}

/// Classifies episode queries by the marginal fine probabilities of a
/// meta-trained model.
pub struct MetaClassifier<'a> {
    pub model: &'a ModelParams,
    pub mode: MemoryMode,
}

impl EpisodeClassifier for MetaClassifier<'_> {
    fn classify(&self, data: &Dataset, ep: &EpisodeSpec) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let b = self.model.params.bind(&mut g);
        let out = episode_forward(&mut g, self.model, &b, data, ep, self.mode)?;
        Ok(query_probs(&g, &out)?.iter().map(|p| crate::ndgrad::kernels::argmax(p)).collect())
    }
}
