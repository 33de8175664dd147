//! Shared oracles and experiment drivers for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use hikfs::data::{gen_synthetic, mcfs_split, Dataset, GenSpec, Item, Layout, SplitMode, SplitSpec, SplitTag};
use hikfs::hierarchy::{hierarchical_nll_graph, ClassHierarchy};
use hikfs::memory::{kmeans, sse, MemoryBank, MemoryMode};
use hikfs::model::{EncoderConfig, HeadView, Heads, Metric, ModelConfig, ModelParams, Setting};
use hikfs::ndgrad::{Graph, ParamSet, Tensor, Var};
use hikfs::seed;
use hikfs::training::{
    episode_forward, evaluate_episodes, evaluate_supervised, finetune_supervised, pretrain_supervised, sample_task,
    seed_memory, train_meta, EpisodeShape, MetaClassifier, TrainConfig,
};
use rand::Rng;

pub type R = seed::Rng;

const H: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative for ordinary gradients,
/// absolute below 1e-3 where finite differences are dominated by rounding.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn uniform(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values with `min <= |v| < max` and random sign, away from ReLU kinks.
pub fn away_from_zero(rng: &mut R, n: usize, min: f64, max: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(min..max);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

pub fn rand_param(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    param(shape, uniform(rng, n, -1.0, 1.0))
}

/// Reduces `v` to a scalar with fixed pseudo-random weights so every output
/// entry contributes a distinct amount to the loss.
pub fn project(g: &mut Graph, v: Var) -> hikfs::Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let wv = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(v, wv)?;
    g.sum(p)
}

/// Largest relative error between the tape gradient and central finite
/// differences over every entry of every input that requires a gradient.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> hikfs::Result<Var>) -> f64 {
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vs).unwrap();
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    let mut ins = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = g.grad(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for (i, &want) in analytic.iter().enumerate() {
            let x = t.data()[i];
            ins[ti].data_mut()[i] = x + H;
            let p = eval(&ins);
            ins[ti].data_mut()[i] = x - H;
            let m = eval(&ins);
            ins[ti].data_mut()[i] = x;
            worst = worst.max(rel_err(want, (p - m) / (2.0 * H)));
        }
    }
    worst
}

/// Same as [`gradcheck`] for a loss over named parameters.
pub fn gradcheck_params(params: &ParamSet, f: &dyn Fn(&mut Graph, &ParamSet, &hikfs::ndgrad::Bound) -> Var) -> f64 {
    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let out = f(&mut g, p, &b);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = f(&mut g, params, &b);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let t = params.get(&name).unwrap();
        if !t.requires_grad {
            continue;
        }
        let analytic = g
            .grad(b.get(&name).unwrap())
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for (i, &want) in analytic.iter().enumerate() {
            let x = t.data()[i];
            p.get_mut(&name).unwrap().data_mut()[i] = x + H;
            let hi = eval(&p);
            p.get_mut(&name).unwrap().data_mut()[i] = x - H;
            let lo = eval(&p);
            p.get_mut(&name).unwrap().data_mut()[i] = x;
            worst = worst.max(rel_err(want, (hi - lo) / (2.0 * H)));
        }
    }
    worst
}

/// A random two-level hierarchy with `1..=max_coarse` coarse classes and
/// `num_coarse..=max_fine` fine classes.
pub fn random_hierarchy(rng: &mut R, max_fine: usize, max_coarse: usize) -> ClassHierarchy {
    let c = rng.random_range(1..=max_coarse.min(max_fine));
    let f = rng.random_range(c..=max_fine);
    let mut parent: Vec<usize> = (0..c).collect();
    parent.extend((c..f).map(|_| rng.random_range(0..c)));
    for i in (1..f).rev() {
        parent.swap(i, rng.random_range(0..=i));
    }
    ClassHierarchy::from_parents(parent, c).unwrap()
}

fn rand_mask(rng: &mut R, rows: usize, cols: usize) -> Arc<Vec<bool>> {
    let mut m: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.6)).collect();
    for r in 0..rows {
        let c = rng.random_range(0..cols);
        m[r * cols + c] = true;
    }
    Arc::new(m)
}

/// Values spaced at least 0.05 apart, shuffled, so top-k picks are stable
/// under the finite-difference step.
fn spaced(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.random_range(0.0..0.05)).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

/// Gradient errors of every differentiable op for one seed.
pub fn op_gradients(seed_: u64) -> Vec<(&'static str, f64)> {
    let mut rng = seed::stream(seed_, "gradcheck", 0);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut check = |name: &'static str, ins: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> hikfs::Result<Var>| {
        out.push((name, gradcheck(&ins, f)));
    };

    let (a, b) = (rand_param(r, &[3, 4]), rand_param(r, &[4, 2]));
    check("matmul", vec![a, b], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y)
    });
    check("transpose", vec![rand_param(r, &[3, 4])], &|g, v| {
        let y = g.transpose(v[0])?;
        project(g, y)
    });
    let (x, y) = (rand_param(r, &[3, 4]), rand_param(r, &[3, 4]));
    check("add", vec![x.clone(), y.clone()], &|g, v| {
        let o = g.add(v[0], v[1])?;
        project(g, o)
    });
    check("sub", vec![x.clone(), y.clone()], &|g, v| {
        let o = g.sub(v[0], v[1])?;
        project(g, o)
    });
    check("mul", vec![x.clone(), y], &|g, v| {
        let o = g.mul(v[0], v[1])?;
        project(g, o)
    });
    check("add_bias", vec![x.clone(), rand_param(r, &[4])], &|g, v| {
        let o = g.add_bias(v[0], v[1])?;
        project(g, o)
    });
    check("scale", vec![x.clone()], &|g, v| {
        let o = g.scale(v[0], -1.7)?;
        project(g, o)
    });
    check("neg", vec![x.clone()], &|g, v| {
        let o = g.neg(v[0])?;
        project(g, o)
    });
    check("relu", vec![param(&[3, 4], away_from_zero(r, 12, 0.05, 1.0))], &|g, v| {
        let o = g.relu(v[0])?;
        project(g, o)
    });
    check("sqrt", vec![param(&[3, 4], uniform(r, 12, 0.3, 2.0))], &|g, v| {
        let o = g.sqrt(v[0])?;
        project(g, o)
    });
    check("reshape", vec![x.clone()], &|g, v| {
        let o = g.reshape(v[0], &[2, 6])?;
        project(g, o)
    });
    check("l2_normalize_rows", vec![x.clone()], &|g, v| {
        let o = g.l2_normalize_rows(v[0])?;
        project(g, o)
    });
    check("sq_dist", vec![rand_param(r, &[3, 4]), rand_param(r, &[5, 4])], &|g, v| {
        let o = g.sq_dist(v[0], v[1])?;
        project(g, o)
    });
    let mask = rand_mask(r, 3, 5);
    let m2 = mask.clone();
    check("softmax_rows", vec![rand_param(r, &[3, 5])], &move |g, v| {
        let o = g.softmax_rows(v[0], Some(m2.clone()))?;
        project(g, o)
    });
    check("log_softmax_rows", vec![rand_param(r, &[3, 5])], &move |g, v| {
        let o = g.log_softmax_rows(v[0], Some(mask.clone()))?;
        project(g, o)
    });
    let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    check("nll", vec![rand_param(r, &[4, 5])], &move |g, v| {
        let l = g.log_softmax_rows(v[0], None)?;
        g.nll(l, &targets)
    });
    check("sum", vec![x.clone()], &|g, v| {
        let o = g.mul(v[0], v[0])?;
        g.sum(o)
    });
    check("mean", vec![x], &|g, v| {
        let o = g.mul(v[0], v[0])?;
        g.mean(o)
    });
    check("gather_cols", vec![rand_param(r, &[3, 5])], &|g, v| {
        let o = g.gather_cols(v[0], &[4, 0, 0, 2])?;
        project(g, o)
    });
    check("top_k_group_sum", vec![param(&[3, 6], spaced(r, 18))], &|g, v| {
        let o = g.top_k_group_sum(v[0], &[vec![0, 1, 2], vec![3, 4], vec![5]], 2)?;
        project(g, o)
    });
    let conv_in = vec![rand_param(r, &[2, 2, 5, 5]), rand_param(r, &[3, 2, 3, 3]), rand_param(r, &[3])];
    check("conv2d_pad1", conv_in.clone(), &|g, v| {
        let o = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        project(g, o)
    });
    check("conv2d_stride2", conv_in, &|g, v| {
        let o = g.conv2d(v[0], v[1], v[2], 2, 0)?;
        project(g, o)
    });
    check("max_pool2d", vec![param(&[1, 2, 4, 5], spaced(r, 40))], &|g, v| {
        let o = g.max_pool2d(v[0])?;
        project(g, o)
    });
    check(
        "group_norm_4d",
        vec![rand_param(r, &[2, 4, 2, 2]), rand_param(r, &[4]), rand_param(r, &[4])],
        &|g, v| {
            let o = g.group_norm(v[0], v[1], v[2], 2)?;
            project(g, o)
        },
    );
    check(
        "group_norm_rows",
        vec![rand_param(r, &[3, 8]), rand_param(r, &[8]), rand_param(r, &[8])],
        &|g, v| {
            let o = g.group_norm(v[0], v[1], v[2], 2)?;
            project(g, o)
        },
    );
    let h = random_hierarchy(r, 6, 3);
    let t: Vec<usize> = (0..4).map(|_| r.random_range(0..h.num_fine())).collect();
    let (nf, nc) = (h.num_fine(), h.num_coarse());
    check(
        "hierarchical_nll",
        vec![rand_param(r, &[4, nf]), rand_param(r, &[4, nc])],
        &move |g, v| hierarchical_nll_graph(g, v[0], v[1], &t, &h),
    );
    out
}

fn randomize(params: &mut ParamSet, rng: &mut R) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    params.set_trainable(|_| true);
}

/// End-to-end gradient of the hierarchical loss through the supervised
/// forward pass (encoder, attention, MLP and KNN heads) w.r.t. every parameter.
pub fn supervised_end_to_end(seed_: u64, metric: Metric) -> f64 {
    let mut rng = seed::stream(seed_, "gradcheck.e2e", 0);
    let h = random_hierarchy(&mut rng, 6, 3);
    let config = ModelConfig {
        setting: Setting::Supervised,
        encoder: EncoderConfig::mlp(5, vec![8]),
        num_fine: h.num_fine(),
        num_coarse: h.num_coarse(),
        heads: Heads::for_setting(Setting::Supervised),
        attention: true,
        metric,
        k: 2,
    };
    let mut model = ModelParams::init(config, &mut rng).unwrap();
    randomize(&mut model.params, &mut rng);
    let mut bank = MemoryBank::new(h.num_fine(), 3, 8, metric, 2).unwrap();
    for j in 0..h.num_fine() {
        let n = rng.random_range(1..=3);
        let slots: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut rng, 8, -1.0, 1.0)).collect();
        bank.set_class_slots(j, &slots).unwrap();
    }
    let x = Tensor::new(vec![4, 5], uniform(&mut rng, 20, -1.0, 1.0)).unwrap();
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..h.num_fine())).collect();
    let cfg = model.config.clone();
    gradcheck_params(&model.params, &|g, p, b| {
        let m = ModelParams {
            config: cfg.clone(),
            params: p.clone(),
        };
        let xv = g.constant(x.clone());
        let (layout, _) = bank.layout(g).unwrap();
        let fw = m.forward_full(g, b, xv, Some(&layout), &HeadView::global(&h)).unwrap();
        hierarchical_nll_graph(g, fw.fine, fw.coarse, &targets, &h).unwrap()
    })
}

/// End-to-end gradient of one meta episode (support and query both flow
/// through the encoder) w.r.t. every parameter.
pub fn meta_end_to_end(seed_: u64, mode: MemoryMode) -> f64 {
    let data = gen_synthetic(&GenSpec {
        num_coarse: 2,
        fine_per_coarse: 3,
        dim: 5,
        per_class: 6,
        seed: seed_,
        ..GenSpec::default()
    })
    .unwrap();
    let mut rng = seed::stream(seed_, "gradcheck.meta", 0);
    let ep = sample_task(
        &mut rng,
        &data.present_classes(),
        EpisodeShape {
            way: 3,
            shot: 2,
            query: 2,
        },
        &data,
    )
    .unwrap();
    let config = ModelConfig {
        setting: Setting::Meta,
        encoder: EncoderConfig::mlp(5, vec![8]),
        num_fine: 6,
        num_coarse: 2,
        heads: Heads::for_setting(Setting::Meta),
        attention: true,
        metric: Metric::NegEuclidean,
        k: 2,
    };
    let mut model = ModelParams::init(config, &mut rng).unwrap();
    randomize(&mut model.params, &mut rng);
    let cfg = model.config.clone();
    gradcheck_params(&model.params, &|g, p, b| {
        let m = ModelParams {
            config: cfg.clone(),
            params: p.clone(),
        };
        episode_forward(g, &m, b, &data, &ep, mode).unwrap().loss
    })
}

/// Independent prototypical-network classifier: class means of the support
/// features and log-softmax of the negative (unsquared) Euclidean distance.
pub fn prototypical_log_probs(support: &[Vec<Vec<f64>>], queries: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let protos: Vec<Vec<f64>> = support
        .iter()
        .map(|s| {
            let mut m = vec![0.0; s[0].len()];
            for v in s {
                for (a, b) in m.iter_mut().zip(v) {
                    *a += b;
                }
            }
            m.iter().map(|a| a / s.len() as f64).collect()
        })
        .collect();
    queries
        .iter()
        .map(|q| {
            let logits: Vec<f64> = protos
                .iter()
                .map(|p| -p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            logits.iter().map(|l| l - lse).collect()
        })
        .collect()
}

/// Largest absolute gap between the model's query log-probabilities (Mem1,
/// negative Euclidean, attention off, one coarse class) and the
/// prototypical oracle over `episodes` random 5-way 5-shot tasks with d=16.
pub fn prototypical_gap(episodes: usize, seed_: u64) -> f64 {
    let data = gen_synthetic(&GenSpec {
        num_coarse: 4,
        fine_per_coarse: 4,
        dim: 16,
        per_class: 12,
        seed: seed_,
        ..GenSpec::default()
    })
    .unwrap()
    .collapse_hierarchy();
    let config = ModelConfig {
        setting: Setting::Meta,
        encoder: EncoderConfig::mlp(16, vec![32, 16]),
        num_fine: data.hierarchy.num_fine(),
        num_coarse: 1,
        heads: Heads::for_setting(Setting::Meta),
        attention: false,
        metric: Metric::NegEuclidean,
        k: 1,
    };
    let model = ModelParams::init(config, &mut seed::stream(seed_, "init", 0)).unwrap();
    let pool = data.present_classes();
    let shape = EpisodeShape {
        way: 5,
        shot: 5,
        query: 5,
    };
    let mut worst: f64 = 0.0;
    for e in 0..episodes {
        let ep = sample_task(&mut seed::stream(seed_, "oracle", e as u64), &pool, shape, &data).unwrap();
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let out = episode_forward(&mut g, &model, &b, &data, &ep, MemoryMode::Mem1).unwrap();
        let (fine, coarse) = (g.value(out.fine).clone(), g.value(out.coarse).clone());

        let feats = |idx: &[usize]| {
            let f = model.encode_tensor(&data.batch(idx)).unwrap();
            (0..idx.len()).map(|r| f.row(r).to_vec()).collect::<Vec<_>>()
        };
        let support: Vec<Vec<Vec<f64>>> = ep.support_idx.iter().map(|s| feats(s)).collect();
        let oracle = prototypical_log_probs(&support, &feats(&ep.flat_query()));
        for (r, want) in oracle.iter().enumerate() {
            let p = hikfs::hierarchy::marginal_fine_probs(fine.row(r), coarse.row(r), &out.hierarchy).unwrap();
            for (a, b) in p.iter().zip(want) {
                worst = worst.max((a.ln() - b).abs());
            }
        }
    }
    worst
}

/// Minimum within-cluster SSE over every assignment of `points` to at most
/// `r` clusters.
pub fn exhaustive_sse(points: &[Vec<f64>], r: usize) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut total = 0.0;
        for c in 0..r {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == c).map(|i| &points[i]).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for p in &members {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v / members.len() as f64;
                }
            }
            total += members
                .iter()
                .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>();
        }
        best = best.min(total);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < r {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

pub struct KmeansReport {
    pub trials: usize,
    pub exact: usize,
    /// `(trial, found / optimum)` for every trial that missed the optimum.
    pub misses: Vec<(usize, f64)>,
}

pub fn kmeans_vs_exhaustive(trials: usize, seed_: u64) -> KmeansReport {
    let mut rng = seed::stream(seed_, "kmeans.oracle", 0);
    let mut misses = Vec::new();
    for t in 0..trials {
        let r = rng.random_range(1..=3);
        let n = rng.random_range(r..=8);
        let points: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut rng, 2, -3.0, 3.0)).collect();
        let centers = kmeans(&points, r, seed::derive(seed_, "kmeans", t as u64), 100).unwrap();
        let found = sse(&points, &centers);
        let opt = exhaustive_sse(&points, r);
        if found > opt + 1e-9 {
            misses.push((t, found / opt));
        }
    }
    KmeansReport {
        trials,
        exact: trials - misses.len(),
        misses,
    }
}

/// A dataset over `h` with `1..=max_per_class` 2-D items per class.
pub fn dataset_for(h: ClassHierarchy, rng: &mut R, max_per_class: usize) -> Dataset {
    let items = (0..h.num_fine())
        .flat_map(|y| {
            let n = rng.random_range(1..=max_per_class);
            let c = h.fine_to_coarse(y).unwrap();
            (0..n)
                .map(|_| Item {
                    input: uniform(rng, 2, -1.0, 1.0),
                    fine: y,
                    coarse: c,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Dataset {
        items,
        fine_names: (0..h.num_fine()).map(|y| format!("f{y}")).collect(),
        coarse_names: (0..h.num_coarse()).map(|z| format!("c{z}")).collect(),
        hierarchy: h,
        layout: Layout::Features(2),
        split: SplitTag::Unsplit,
        provenance: "random".into(),
    }
}

pub fn random_fractions(rng: &mut R) -> [f64; 3] {
    let a = rng.random_range(0.2..0.9);
    let b = rng.random_range(0.0..(1.0 - a));
    [a, b, 1.0 - a - b]
}

fn counts(n: usize, f: &[f64; 3]) -> [usize; 3] {
    let a = ((f[0] * n as f64).round() as usize).min(n);
    let b = ((f[1] * n as f64).round() as usize).min(n - a);
    [a, b, n - a - b]
}

fn item_key(it: &Item) -> (usize, Vec<u64>) {
    (it.fine, it.input.iter().map(|v| v.to_bits()).collect())
}

fn sorted_keys<'a>(items: impl Iterator<Item = &'a Item>) -> Vec<(usize, Vec<u64>)> {
    let mut k: Vec<_> = items.map(item_key).collect();
    k.sort();
    k
}

/// Checks one split request against the constraints. Returns `Ok(true)` when
/// the split succeeded, `Ok(false)` when it failed with the documented error
/// on an infeasible request, and `Err(why)` on any violation.
pub fn check_split(ds: &Dataset, spec: &SplitSpec) -> Result<bool, String> {
    let h = &ds.hierarchy;
    match spec.mode {
        SplitMode::Supervised => {
            let (tr, va, te, _) = mcfs_split(ds, spec).map_err(|e| format!("supervised split failed: {e}"))?;
            let all = sorted_keys(tr.items.iter().chain(&va.items).chain(&te.items));
            if all != sorted_keys(ds.items.iter()) {
                return Err("supervised parts are not a partition of the items".into());
            }
            for (y, idx) in ds.by_class().iter().enumerate() {
                let got = [&tr, &va, &te].map(|p| p.items.iter().filter(|i| i.fine == y).count());
                if got != counts(idx.len(), &spec.fractions) {
                    return Err(format!("class {y}: counts {got:?} are not the stratified allocation"));
                }
            }
            Ok(true)
        }
        SplitMode::Meta => {
            let present = ds.present_classes();
            let target = counts(present.len(), &spec.fractions);
            let required: Vec<usize> = if spec.coarse_in_every_split {
                (0..3).filter(|&s| s == 0 || target[s] > 0).collect()
            } else {
                vec![0]
            };
            let used: Vec<usize> = (0..h.num_coarse())
                .filter(|&z| h.children(z).unwrap().iter().any(|y| present.contains(y)))
                .collect();
            let feasible = used.iter().all(|&z| {
                h.children(z).unwrap().iter().filter(|y| present.contains(y)).count() >= required.len()
            }) && required.iter().all(|&s| used.len() <= target[s]);
            let res = mcfs_split(ds, spec);
            let (tr, va, te, manifest) = match (res, feasible) {
                (Err(e), false) => {
                    let msg = e.to_string();
                    return if msg.contains("fine child") || msg.contains("must be represented") {
                        Ok(false)
                    } else {
                        Err(format!("infeasible request failed with an undocumented error: {msg}"))
                    };
                }
                (Err(e), true) => return Err(format!("feasible request failed: {e}")),
                (Ok(_), false) => return Err("infeasible request succeeded".into()),
                (Ok(parts), true) => parts,
            };
            let parts = [&tr, &va, &te];
            let classes: Vec<Vec<usize>> = parts.iter().map(|p| p.present_classes()).collect();
            for a in 0..3 {
                for b in a + 1..3 {
                    if classes[a].iter().any(|y| classes[b].contains(y)) {
                        return Err(format!("splits {a} and {b} share a fine class"));
                    }
                }
            }
            let mut union: Vec<usize> = classes.concat();
            union.sort_unstable();
            if union != present {
                return Err("meta splits do not cover the present classes".into());
            }
            for s in 0..3 {
                if classes[s].len() != target[s] {
                    return Err(format!("split {s} has {} classes, wanted {}", classes[s].len(), target[s]));
                }
            }
            for &s in &required {
                for &z in &used {
                    if !classes[s].iter().any(|&y| h.fine_to_coarse(y).unwrap() == z) {
                        return Err(format!("coarse class {z} missing from split {s}"));
                    }
                }
            }
            if sorted_keys(tr.items.iter().chain(&va.items).chain(&te.items)) != sorted_keys(ds.items.iter()) {
                return Err("meta parts are not a partition of the items".into());
            }
            if manifest.entries.len() != present.len() {
                return Err("manifest does not list every class".into());
            }
            Ok(true)
        }
    }
}

pub struct SplitReport {
    pub cases: usize,
    pub succeeded: usize,
    pub refused: usize,
    pub violations: Vec<String>,
}

/// Runs `cases` random hierarchies and seeds, each through a supervised and
/// a meta split (with and without the every-split coverage flag).
pub fn split_suite(cases: usize, seed_: u64) -> SplitReport {
    let mut rng = seed::stream(seed_, "split.suite", 0);
    let mut rep = SplitReport {
        cases,
        succeeded: 0,
        refused: 0,
        violations: Vec::new(),
    };
    for c in 0..cases {
        let h = random_hierarchy(&mut rng, 24, 6);
        let ds = dataset_for(h, &mut rng, 6);
        let fractions = random_fractions(&mut rng);
        for (mode, every) in [(SplitMode::Supervised, false), (SplitMode::Meta, false), (SplitMode::Meta, true)] {
            let spec = SplitSpec {
                mode,
                fractions,
                seed: rng.random(),
                coarse_in_every_split: every,
            };
            match check_split(&ds, &spec) {
                Ok(true) => rep.succeeded += 1,
                Ok(false) => rep.refused += 1,
                Err(why) => rep.violations.push(format!("case {c} {mode:?} every={every}: {why}")),
            }
        }
    }
    rep
}

pub fn gen_spec_50(seed_: u64) -> GenSpec {
    GenSpec {
        num_coarse: 10,
        fine_per_coarse: 5,
        dim: 16,
        per_class: 40,
        coarse_sep: 8.0,
        fine_sep: 1.5,
        noise: 0.6,
        jitter: 0,
        seed: seed_,
    }
}

pub struct MetaRun {
    pub mean_acc: f64,
    pub ci95: f64,
}

/// Trains a meta model on `train` and evaluates it with 20-way 5-shot
/// 15-query episodes on `eval`.
pub fn meta_experiment(
    train: &Dataset,
    eval: &Dataset,
    hierarchy: bool,
    mode: MemoryMode,
    iterations: usize,
    episodes: usize,
    seed_: u64,
) -> MetaRun {
    let (tr, ev) = if hierarchy {
        (train.clone(), eval.clone())
    } else {
        (train.collapse_hierarchy(), eval.collapse_hierarchy())
    };
    let cfg = TrainConfig {
        seed: seed_,
        iterations,
        episode: EpisodeShape {
            way: 20,
            shot: 5,
            query: 5,
        },
        memory_mode: mode,
        log_every: 0,
        ..TrainConfig::default()
    };
    let config = ModelConfig {
        setting: Setting::Meta,
        encoder: EncoderConfig::mlp(tr.input_dim(), vec![64, 64]),
        num_fine: tr.hierarchy.num_fine(),
        num_coarse: tr.hierarchy.num_coarse(),
        heads: Heads::for_setting(Setting::Meta),
        attention: true,
        metric: Metric::NegEuclidean,
        k: 1,
    };
    let model = train_meta(&cfg, config, &tr, &mut |_| {}).unwrap();
    let shape = EpisodeShape {
        way: 20,
        shot: 5,
        query: 15,
    };
    let r = evaluate_episodes(&MetaClassifier { model: &model, mode }, &ev, shape, episodes, seed_, 1).unwrap();
    MetaRun {
        mean_acc: r.mean_acc,
        ci95: r.ci95,
    }
}

/// 50-class meta split 30/10/10; evaluation pools val and test.
pub fn meta_data(seed_: u64) -> (Dataset, Dataset) {
    let ds = gen_synthetic(&gen_spec_50(seed_)).unwrap();
    let spec = SplitSpec {
        mode: SplitMode::Meta,
        fractions: [0.6, 0.2, 0.2],
        seed: seed_,
        coarse_in_every_split: false,
    };
    let (tr, va, te, _) = mcfs_split(&ds, &spec).unwrap();
    let ev = Dataset::concat(&va, &te, SplitTag::Test).unwrap();
    (tr, ev)
}

pub struct SupervisedRun {
    pub mlp_only: f64,
    pub full: f64,
    pub frozen_unchanged: bool,
}

/// Pretrains on an 80/20 supervised split, fine-tunes the full model and
/// compares it with the pretrained MLP-only classifier on the test part.
pub fn supervised_experiment(seed_: u64, pretrain_epochs: usize, finetune_epochs: usize) -> SupervisedRun {
    let ds = gen_synthetic(&gen_spec_50(seed_)).unwrap();
    let spec = SplitSpec {
        mode: SplitMode::Supervised,
        fractions: [0.8, 0.0, 0.2],
        seed: seed_,
        coarse_in_every_split: false,
    };
    let (tr, _, te, _) = mcfs_split(&ds, &spec).unwrap();
    let cfg = TrainConfig {
        seed: seed_,
        pretrain_epochs,
        finetune_epochs,
        ..TrainConfig::default()
    };
    let config = ModelConfig {
        setting: Setting::Supervised,
        encoder: EncoderConfig::mlp(16, vec![64, 64]),
        num_fine: tr.hierarchy.num_fine(),
        num_coarse: tr.hierarchy.num_coarse(),
        heads: Heads::for_setting(Setting::Supervised),
        attention: true,
        metric: Metric::DotCosine,
        k: 1,
    };
    let pre = pretrain_supervised(&cfg, config, &tr, &mut |_| {}).unwrap();
    let mut mlp = pre.clone();
    mlp.config.heads.fine_knn = false;
    let mlp_only = evaluate_supervised(&mlp, None, &te).unwrap().fine_acc;
    let bank = seed_memory(&cfg, &pre, &tr).unwrap();
    let (ft, bank) = finetune_supervised(&cfg, pre.clone(), bank, &tr, &mut |_| {}).unwrap();
    let full = evaluate_supervised(&ft, Some(&bank), &te).unwrap().fine_acc;
    let frozen_unchanged = pre
        .params
        .iter()
        .filter(|(n, _)| !ModelParams::is_attention(n))
        .all(|(n, t)| {
            let after = ft.params.get(n).unwrap().data();
            after.len() == t.data().len() && after.iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    SupervisedRun {
        mlp_only,
        full,
        frozen_unchanged,
    }
}

fn plain_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Worst deviations seen for one `(a, b, hierarchy)` draw: the largest
/// `|Σp - 1|` over the conditional, coarse and marginal distributions, and
/// the largest gap between the marginal and an independently computed
/// `Pr(y | parent) · Pr(parent)`.
pub fn probability_gaps(a: &[f64], b: &[f64], h: &ClassHierarchy) -> (f64, f64) {
    use hikfs::hierarchy::{coarse_probs, conditional_fine_probs, marginal_fine_probs};
    let mut sum_err: f64 = 0.0;
    for z in 0..h.num_coarse() {
        let c = conditional_fine_probs(a, z, h).unwrap();
        sum_err = sum_err.max((c.iter().sum::<f64>() - 1.0).abs());
    }
    let pz = coarse_probs(b).unwrap();
    sum_err = sum_err.max((pz.iter().sum::<f64>() - 1.0).abs());
    let m = marginal_fine_probs(a, b, h).unwrap();
    sum_err = sum_err.max((m.iter().sum::<f64>() - 1.0).abs());

    let pz = plain_softmax(b);
    let mut prod_err: f64 = 0.0;
    for (y, &my) in m.iter().enumerate() {
        let z = h.fine_to_coarse(y).unwrap();
        let kids = h.children(z).unwrap();
        let logits: Vec<f64> = kids.iter().map(|&k| a[k]).collect();
        let cond = plain_softmax(&logits)[kids.iter().position(|&k| k == y).unwrap()];
        prod_err = prod_err.max((my - cond * pz[z]).abs());
    }
    (sum_err, prod_err)
}

/// `draws` random draws of logits (scale up to 20) over random hierarchies.
pub fn probability_invariants(draws: usize, seed_: u64) -> (f64, f64) {
    let mut rng = seed::stream(seed_, "probability", 0);
    let (mut s, mut p): (f64, f64) = (0.0, 0.0);
    for _ in 0..draws {
        let h = random_hierarchy(&mut rng, 12, 5);
        let scale = rng.random_range(0.1..20.0);
        let a = uniform(&mut rng, h.num_fine(), -scale, scale);
        let b = uniform(&mut rng, h.num_coarse(), -scale, scale);
        let (ds, dp) = probability_gaps(&a, &b, &h);
        s = s.max(ds);
        p = p.max(dp);
    }
    (s, p)
}

/// One random memory update sequence checked against the life-cycle rules.
/// Returns the number of operations checked or a description of the first
/// violation.
pub fn memory_sequence(seed_: u64) -> Result<usize, String> {
    let mut rng = seed::stream(seed_, "memory.sequence", 0);
    let classes = rng.random_range(1..=4);
    let cap = rng.random_range(1..=5);
    let dim = rng.random_range(1..=4);
    let (gamma, mu, eta) = (0.95, 1.05, 0.95);
    let mut bank = MemoryBank::new(classes, cap, dim, Metric::NegEuclidean, 2).unwrap();
    for j in 0..classes {
        let n = rng.random_range(1..=cap);
        let slots: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut rng, dim, -2.0, 2.0)).collect();
        bank.set_class_slots(j, &slots).unwrap();
    }
    let mut ops = 0;
    let epochs = rng.random_range(1..=3);
    for epoch in 0..epochs {
        if !bank.cache_is_empty() {
            return Err(format!("cache not empty at the start of epoch {epoch}"));
        }
        for _ in 0..rng.random_range(1..=30) {
            ops += 1;
            let before = bank.clone();
            let j = rng.random_range(0..classes);
            let occ = bank.occupancy(j);
            if rng.random_bool(0.5) {
                let f = uniform(&mut rng, dim, -2.0, 2.0);
                let pred = if rng.random_bool(0.5) { j } else { rng.random_range(0..classes) };
                let k = rng.random_range(0..occ);
                bank.update_on_sample(&f, j, pred, k, gamma).unwrap();
                for jj in 0..classes {
                    for kk in 0..bank.occupancy(jj) {
                        let (old, new) = (before.slot(jj, kk), bank.slot(jj, kk));
                        if pred == j && (jj, kk) == (j, k) {
                            for d in 0..dim {
                                let want = gamma * old[d] + (1.0 - gamma) * f[d];
                                if new[d].to_bits() != want.to_bits() {
                                    return Err(format!("merge: {} != γ·old + (1-γ)·f = {want}", new[d]));
                                }
                                let (lo, hi) = (old[d].min(f[d]), old[d].max(f[d]));
                                if new[d] < lo || new[d] > hi {
                                    return Err("merge left the segment between slot and sample".into());
                                }
                            }
                        } else if old != new {
                            return Err(format!("slot ({jj},{kk}) changed by an update to ({j},{k})"));
                        }
                    }
                    let grew = pred != j && jj == j;
                    let want_len = before.cache(jj).len() + usize::from(grew);
                    if bank.cache(jj).len() != want_len {
                        return Err(format!("cache {jj} has {} entries, expected {want_len}", bank.cache(jj).len()));
                    }
                    if grew && bank.cache(jj).last().unwrap() != &f {
                        return Err("cached feature differs from the sample".into());
                    }
                }
                if before.utilities(j) != bank.utilities(j) {
                    return Err("a sample update changed utilities".into());
                }
            } else {
                let mut hits: Vec<usize> = (0..occ).filter(|_| rng.random_bool(0.5)).collect();
                hits.dedup();
                let correct = rng.random_bool(0.5);
                bank.update_utility(j, &hits, correct, mu, eta).unwrap();
                let factor = if correct { mu } else { eta };
                for jj in 0..classes {
                    for kk in 0..cap {
                        let (old, new) = (before.utility(jj, kk), bank.utility(jj, kk));
                        let want = if jj == j && hits.contains(&kk) { old * factor } else { old };
                        if new.to_bits() != want.to_bits() {
                            return Err(format!("utility ({jj},{kk}) is {new}, expected {want}"));
                        }
                        if new.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                            return Err(format!("utility ({jj},{kk}) is not positive: {new}"));
                        }
                    }
                }
            }
        }
        let r = rng.random_range(1..=cap);
        let seed_r = rng.random();
        let before = bank.clone();
        bank.end_of_epoch_refresh(r, seed_r).unwrap();
        if !bank.cache_is_empty() {
            return Err("cache not emptied by the refresh".into());
        }
        for j in 0..classes {
            let cache = before.cache(j);
            let occ = before.occupancy(j);
            let mut order: Vec<usize> = (0..occ).collect();
            order.sort_by(|&a, &b| before.utility(j, a).total_cmp(&before.utility(j, b)).then(a.cmp(&b)));
            let centroids = if cache.is_empty() {
                Vec::new()
            } else {
                kmeans(cache, r, seed::derive(seed_r, "kmeans", j as u64), 100).unwrap()
            };
            if !cache.is_empty() && centroids.len() != r.min(cache.len()) {
                return Err(format!("expected {} centroids, got {}", r.min(cache.len()), centroids.len()));
            }
            let replaced: Vec<usize> = order.iter().copied().take(centroids.len()).collect();
            for k in 0..occ {
                match replaced.iter().position(|&x| x == k) {
                    Some(i) => {
                        if bank.slot(j, k) != centroids[i].as_slice() || bank.utility(j, k) != 1.0 {
                            return Err(format!("slot ({j},{k}) should hold centroid {i} with utility 1"));
                        }
                    }
                    None => {
                        if bank.slot(j, k) != before.slot(j, k) || bank.utility(j, k) != before.utility(j, k) {
                            return Err(format!("slot ({j},{k}) is not among the lowest utilities but changed"));
                        }
                    }
                }
            }
        }
    }
    Ok(ops)
}

pub struct Cli {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the built `hikfs` binary in `dir`.
pub fn hikfs(dir: &std::path::Path, args: &[&str]) -> Cli {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_hikfs"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    Cli {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn hikfs_ok(dir: &std::path::Path, args: &[&str]) -> Cli {
    let r = hikfs(dir, args);
    assert_eq!(r.code, 0, "hikfs {args:?} failed: {}", r.stderr);
    r
}

fn read(dir: &std::path::Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"))
}

/// Generates, splits, trains and evaluates a small meta and a small
/// supervised run, then re-runs each from its echoed config and compares
/// the result records byte for byte, and compares `--workers 4` with the
/// serial evaluation. Returns a description of the first mismatch.
pub fn pipeline_determinism(dir: &std::path::Path) -> Result<(), String> {
    hikfs_ok(dir, &["gen", "--coarse", "4", "--fine-per-coarse", "4", "--per-class", "15", "--seed", "3", "-o", "d.txt"]);
    hikfs_ok(dir, &["split", "d.txt", "--mode", "meta", "--fractions", "0.5,0.25,0.25", "--seed", "3", "-q"]);
    hikfs_ok(dir, &["split", "d.txt", "--mode", "supervised", "--fractions", "0.75,0.25", "--out-dir", "sup", "-q"]);

    let mut checks: Vec<(String, Vec<u8>, Vec<u8>)> = Vec::new();
    // meta
    hikfs_ok(dir, &["train", "--data", "d.train.txt", "-o", "m1", "--setting", "meta", "--iterations", "60", "--way", "4", "--shot", "2", "--query", "3", "--seed", "9", "-q"]);
    hikfs_ok(dir, &["eval", "--run", "m1", "--data", "d.test.txt", "--episodes", "40", "--way", "4", "--shot", "2", "--query", "5", "-q"]);
    hikfs_ok(dir, &["train", "--config", "m1/config.txt", "--set", "out=m2", "-q"]);
    let serial = hikfs_ok(dir, &["eval", "--config", "m1/eval_config.txt", "--run", "m2", "-o", "m2", "-q"]);
    let par = hikfs_ok(dir, &["eval", "--config", "m1/eval_config.txt", "--run", "m2", "-o", "m2p", "--workers", "4", "-q"]);
    checks.push(("meta train record".into(), read(dir, "m1/train_result.json"), read(dir, "m2/train_result.json")));
    checks.push(("meta model".into(), read(dir, "m1/model.ckpt"), read(dir, "m2/model.ckpt")));
    checks.push(("meta eval record".into(), read(dir, "m1/result.json"), read(dir, "m2/result.json")));
    checks.push(("meta workers=4".into(), serial.stdout.into_bytes(), par.stdout.into_bytes()));
    checks.push(("meta workers=4 record".into(), read(dir, "m2/result.json"), read(dir, "m2p/result.json")));

    // supervised
    let sup_train = ["train", "--data", "sup/d.train.txt", "-o", "s1", "--pretrain-epochs", "4", "--finetune-epochs", "2", "--set", "batch_size=32", "--set", "mem_size=4", "--set", "refresh=2", "-q"];
    hikfs_ok(dir, &sup_train);
    hikfs_ok(dir, &["eval", "--run", "s1", "--data", "sup/d.test.txt", "-q"]);
    hikfs_ok(dir, &["train", "--config", "s1/config.txt", "--set", "out=s2", "-q"]);
    hikfs_ok(dir, &["eval", "--config", "s1/eval_config.txt", "--run", "s2", "-o", "s2", "-q"]);
    checks.push(("supervised memory".into(), read(dir, "s1/memory.ckpt"), read(dir, "s2/memory.ckpt")));
    checks.push(("supervised eval record".into(), read(dir, "s1/result.json"), read(dir, "s2/result.json")));

    for (what, a, b) in checks {
        if a != b {
            return Err(format!(
                "{what} differs:\n{}\n{}",
                String::from_utf8_lossy(&a),
                String::from_utf8_lossy(&b)
            ));
        }
    }
    Ok(())
}
