//! Supervised path: pretrain the backbone, seed memory, fine-tune the
//! attention transforms while the memory evolves.

use rand::seq::SliceRandom;

use super::{count_correct, LogLine, Logger, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::{hierarchical_nll_graph, marginal_fine_probs};
use crate::memory::MemoryBank;
use crate::model::{HeadView, ModelConfig, ModelParams, Setting, COARSE_HEAD, FINE_HEAD};
use crate::ndgrad::{kernels, Graph, OptimizerState, Schedule, Tensor};
use crate::seed;

const EVAL_CHUNK: usize = 256;

fn check_compatible(config: &ModelConfig, data: &Dataset) -> Result<()> {
    if config.num_fine != data.hierarchy.num_fine() || config.num_coarse != data.hierarchy.num_coarse() {
        return Err(Error::Config(format!(
            "model has {} fine / {} coarse classes, data has {} / {}",
            config.num_fine,
            config.num_coarse,
            data.hierarchy.num_fine(),
            data.hierarchy.num_coarse()
        )));
    }
    if config.encoder.input_dim() != data.input_dim() {
        return Err(Error::Config(format!(
            "encoder expects {} inputs, data has {}",
            config.encoder.input_dim(),
            data.input_dim()
        )));
    }
    Ok(())
}

fn non_empty(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("empty dataset ({} split)", data.split.name())));
    }
    Ok(())
}

fn all_present(data: &Dataset) -> Result<()> {
    let present = data.present_classes();
    if let Some(j) = (0..data.hierarchy.num_fine()).find(|j| !present.contains(j)) {
        return Err(Error::Data(format!(
            "fine class `{}` has no training samples; the supervised setting needs every class (use a supervised split)",
            data.fine_names[j]
        )));
    }
    Ok(())
}

fn batches(n: usize, size: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Trains encoder and both MLP heads on summed fine and coarse cross-entropy.
pub fn pretrain_supervised(cfg: &TrainConfig, config: ModelConfig, data: &Dataset, log: Logger) -> Result<ModelParams> {
    cfg.validate()?;
    data.ensure_trainable()?;
    non_empty(data)?;
    all_present(data)?;
    check_compatible(&config, data)?;
    if config.setting != Setting::Supervised {
        return Err(Error::Config("pretraining needs the supervised setting".into()));
    }
    let mut model = ModelParams::init(config, &mut seed::stream(cfg.seed, "init", 0))?;
    model.params.set_trainable(|n| !ModelParams::is_attention(n));
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let mut opt = OptimizerState::sgd(
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        Schedule::Cosine {
            total: per_epoch * cfg.pretrain_epochs as u64,
        },
    );
    let mut rng = seed::stream(cfg.seed, "data", 0);
    let mut g = Graph::new();
    for _ in 0..cfg.pretrain_epochs {
        let (mut loss_sum, mut correct) = (0.0, 0);
        let lr = opt.current_lr();
        for batch in batches(data.len(), cfg.batch_size, &mut rng) {
            g.reset();
            let fine: Vec<usize> = batch.iter().map(|&i| data.items[i].fine).collect();
            let coarse: Vec<usize> = batch.iter().map(|&i| data.items[i].coarse).collect();
            let b = model.params.bind(&mut g);
            let x = g.constant(data.batch(&batch));
            let f = model.encode(&mut g, &b, x)?;
            let a = model.mlp_logits(&mut g, &b, FINE_HEAD, f)?;
            let c = model.mlp_logits(&mut g, &b, COARSE_HEAD, f)?;
            let la = g.log_softmax_rows(a, None)?;
            let la = g.nll(la, &fine)?;
            let lc = g.log_softmax_rows(c, None)?;
            let lc = g.nll(lc, &coarse)?;
            let loss = g.add(la, lc)?;
            g.backward(loss)?;
            model.params.collect_grads(&g, &b);
            opt.apply_step(&mut model.params)?;

            loss_sum += g.value(loss).data()[0] * batch.len() as f64;
            let (rows, cols) = g.value(a).rows_cols();
            let av = g.value(a).data();
            correct += (0..rows)
                .filter(|&r| kernels::argmax(&av[r * cols..(r + 1) * cols]) == fine[r])
                .count();
        }
        log(&LogLine {
            iter: opt.step_count() as usize,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
            lr,
        });
    }
    model.params.set_trainable(|_| false);
    Ok(model)
}

/// Encodes every item and fills each class's memory with k-means centroids
/// of its features.
pub fn seed_memory(cfg: &TrainConfig, model: &ModelParams, data: &Dataset) -> Result<MemoryBank> {
    data.ensure_trainable()?;
    non_empty(data)?;
    check_compatible(&model.config, data)?;
    all_present(data)?;
    let d = model.feature_dim();
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); data.hierarchy.num_fine()];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let f = model.encode_tensor(&data.batch(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            per_class[data.items[i].fine].push(f.row(r).to_vec());
        }
    }
    let mut bank = MemoryBank::new(per_class.len(), cfg.mem_size, d, model.config.metric, model.config.k)?;
    bank.seed_from_features(&per_class, seed::derive(cfg.seed, "memory-init", 0))?;
    Ok(bank)
}

/// Fine-tunes only the attention transforms on the hierarchical loss and
/// runs the merge / cache / utility updates after every batch and the
/// cache refresh after every epoch.
pub fn finetune_supervised(
    cfg: &TrainConfig,
    mut model: ModelParams,
    mut bank: MemoryBank,
    data: &Dataset,
    log: Logger,
) -> Result<(ModelParams, MemoryBank)> {
    cfg.validate()?;
    data.ensure_trainable()?;
    non_empty(data)?;
    check_compatible(&model.config, data)?;
    if bank.is_empty() {
        return Err(Error::invalid("memory bank is not seeded"));
    }
    if bank.classes() != model.config.num_fine || bank.dim() != model.feature_dim() {
        return Err(Error::shape(
            "finetune_supervised",
            &[bank.classes(), bank.dim()],
            &[model.config.num_fine, model.feature_dim()],
        ));
    }
    let attention = model.config.attention;
    model.params.set_trainable(|n| attention && ModelParams::is_attention(n));
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let mut opt = OptimizerState::sgd(
        cfg.finetune_lr,
        cfg.momentum,
        cfg.weight_decay,
        Schedule::Cosine {
            total: per_epoch * cfg.finetune_epochs as u64,
        },
    );
    let h = data.hierarchy.clone();
    let view = HeadView::global(&h);
    let update_memory = model.config.heads.fine_knn;
    let mut rng = seed::stream(cfg.seed, "finetune", 0);
    let mut g = Graph::new();
    let mut iter = 0;
    for epoch in 0..cfg.finetune_epochs {
        debug_assert!(bank.cache_is_empty());
        let (mut loss_sum, mut correct) = (0.0, 0);
        let lr = opt.current_lr();
        for batch in batches(data.len(), cfg.batch_size, &mut rng) {
            g.reset();
            let targets: Vec<usize> = batch.iter().map(|&i| data.items[i].fine).collect();
            let b = model.params.bind(&mut g);
            let x = g.constant(data.batch(&batch));
            let layout = if model.config.heads.uses_knn() {
                Some(bank.layout(&mut g)?)
            } else {
                None
            };
            let fw = model.forward_full(&mut g, &b, x, layout.as_ref().map(|l| &l.0), &view)?;
            let loss = hierarchical_nll_graph(&mut g, fw.fine, fw.coarse, &targets, &h)?;
            if attention {
                g.backward(loss)?;
                model.params.collect_grads(&g, &b);
                opt.apply_step(&mut model.params)?;
            }
            iter += 1;
            loss_sum += g.value(loss).data()[0] * batch.len() as f64;
            let probs = row_marginals(g.value(fw.fine), g.value(fw.coarse), &h)?;
            correct += count_correct(&probs, &targets);

            if update_memory {
                let (layout, _) = layout.as_ref().expect("fine KNN implies memory");
                let feats = g.value(fw.features);
                let scores = g.value(fw.scores.expect("fine KNN ran"));
                let knn = g.value(fw.fine_knn.expect("fine KNN ran"));
                for (r, &y) in targets.iter().enumerate() {
                    let y_pred = kernels::argmax(knn.row(r));
                    let srow = scores.row(r);
                    let own: Vec<f64> = layout.fine_groups[y].iter().map(|&c| srow[c]).collect();
                    let nearest = kernels::argmax(&own);
                    let hits = kernels::top_k_indices(&own, model.config.k);
                    bank.update_utility(y, &hits, y_pred == y, cfg.mu, cfg.eta)?;
                    bank.update_on_sample(feats.row(r), y, y_pred, nearest, cfg.gamma)?;
                }
            }
        }
        if update_memory {
            bank.end_of_epoch_refresh(cfg.refresh, seed::derive(cfg.seed, "refresh", epoch as u64))?;
        }
        log(&LogLine {
            iter,
            loss: loss_sum / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
            lr,
        });
    }
    model.params.set_trainable(|_| false);
    Ok((model, bank))
}

fn row_marginals(a: &Tensor, b: &Tensor, h: &crate::hierarchy::ClassHierarchy) -> Result<Vec<Vec<f64>>> {
    (0..a.rows_cols().0)
        .map(|r| marginal_fine_probs(a.row(r), b.row(r), h))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedEval {
    pub fine_acc: f64,
    pub coarse_acc: f64,
    pub n: usize,
}

/// Fine accuracy of the marginal-probability argmax, plus coarse accuracy
/// of the coarse head.
pub fn evaluate_supervised(model: &ModelParams, bank: Option<&MemoryBank>, data: &Dataset) -> Result<SupervisedEval> {
    non_empty(data)?;
    check_compatible(&model.config, data)?;
    let h = &data.hierarchy;
    let view = HeadView::global(h);
    let (mut fine_ok, mut coarse_ok) = (0, 0);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut g = Graph::new();
    for chunk in all.chunks(EVAL_CHUNK) {
        g.reset();
        let b = model.params.bind(&mut g);
        let x = g.constant(data.batch(chunk));
        let layout = if model.config.heads.uses_knn() {
            let bank = bank.ok_or_else(|| Error::invalid("a KNN head is active but no memory bank was given"))?;
            Some(bank.layout(&mut g)?.0)
        } else {
            None
        };
        let fw = model.forward_full(&mut g, &b, x, layout.as_ref(), &view)?;
        let probs = row_marginals(g.value(fw.fine), g.value(fw.coarse), h)?;
        let fine: Vec<usize> = chunk.iter().map(|&i| data.items[i].fine).collect();
        fine_ok += count_correct(&probs, &fine);
        let c = g.value(fw.coarse);
        coarse_ok += chunk
            .iter()
            .enumerate()
            .filter(|&(r, &i)| kernels::argmax(c.row(r)) == data.items[i].coarse)
            .count();
    }
    let n = data.len();
    Ok(SupervisedEval {
        fine_acc: fine_ok as f64 / n as f64,
        coarse_acc: coarse_ok as f64 / n as f64,
        n,
    })
}
