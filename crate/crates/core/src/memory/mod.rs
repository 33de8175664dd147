//! Attention-KNN memory: per-class support slots, utility rates and the miss
//! cache, with the merge / cache / utility / refresh life-cycle used in
//! supervised fine-tuning and the per-task construction used in meta-learning.

mod kmeans;

pub use kmeans::{kmeans, sse, RESTARTS as KMEANS_RESTARTS};

use crate::error::{Error, Result};
use crate::model::{Metric, ModelParams, SlotLayout, ATTN_G, ATTN_H};
use crate::ndgrad::{kernels, Graph, ParamSet, Tensor, Var};
use crate::seed;

/// How a meta-learning task fills its memory from the support set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// One slot per class holding the mean support feature.
    Mem1,
    /// One slot per support feature.
    Mem2,
    /// The mean slot followed by every support feature.
    Mem3,
}

impl MemoryMode {
    pub fn name(self) -> &'static str {
        match self {
            MemoryMode::Mem1 => "mem1",
            MemoryMode::Mem2 => "mem2",
            MemoryMode::Mem3 => "mem3",
        }
    }

    pub fn slots_for(self, shots: usize) -> usize {
        match self {
            MemoryMode::Mem1 => 1,
            MemoryMode::Mem2 => shots,
            MemoryMode::Mem3 => shots + 1,
        }
    }
}

/// Per-class slots `C × m × d`, utilities `C × m`, live counts and miss cache.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    classes: usize,
    capacity: usize,
    dim: usize,
    slots: Vec<f64>,
    utility: Vec<f64>,
    occupancy: Vec<usize>,
    cache: Vec<Vec<Vec<f64>>>,
    pub metric: Metric,
    pub k: usize,
}

/// Something applied to a feature vector before scoring (`g` or `h`).
pub trait FeatureMap {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

pub struct Identity;

impl FeatureMap for Identity {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.to_vec())
    }
}

/// One of a model's attention transforms evaluated off the tape.
pub struct AttentionMap<'a> {
    model: &'a ModelParams,
    prefix: &'static str,
}

impl<'a> AttentionMap<'a> {
    pub fn g(model: &'a ModelParams) -> Self {
        Self { model, prefix: ATTN_G }
    }

    pub fn h(model: &'a ModelParams) -> Self {
        Self { model, prefix: ATTN_H }
    }
}

impl FeatureMap for AttentionMap<'_> {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.model.params.bind(&mut g);
        let x = g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?);
        let y = self.model.transform(&mut g, &b, self.prefix, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

fn score_mapped(gf: &[f64], hs: &[f64], metric: Metric) -> Result<f64> {
    match metric {
        Metric::DotCosine => {
            let (nf, ns) = (kernels::norm(gf), kernels::norm(hs));
            if nf == 0.0 || ns == 0.0 {
                return Err(Error::Degenerate {
                    op: "slot_score",
                    msg: "zero vector has no cosine similarity".into(),
                });
            }
            Ok(kernels::dot(gf, hs) / (nf * ns))
        }
        Metric::NegEuclidean => Ok(-kernels::sq_dist(gf, hs).sqrt()),
    }
}

/// Similarity between a query feature and one memory slot.
pub fn slot_score(f: &[f64], slot: &[f64], g: &dyn FeatureMap, h: &dyn FeatureMap, metric: Metric) -> Result<f64> {
    if f.len() != slot.len() {
        return Err(Error::shape("slot_score", &[f.len()], &[slot.len()]));
    }
    score_mapped(&g.apply(f)?, &h.apply(slot)?, metric)
}

/// Sum of the `k` best slot scores of class `j`.
pub fn class_score(f: &[f64], bank: &MemoryBank, j: usize, g: &dyn FeatureMap, h: &dyn FeatureMap) -> Result<f64> {
    let scores = bank.slot_scores(f, j, g, h)?;
    let top = kernels::top_k_indices(&scores, bank.k);
    Ok(top.iter().fold(0.0, |acc, &i| acc + scores[i]))
}

/// Softmax over every class score.
pub fn knn_probs(f: &[f64], bank: &MemoryBank, g: &dyn FeatureMap, h: &dyn FeatureMap) -> Result<Vec<f64>> {
    let scores = (0..bank.classes)
        .map(|j| class_score(f, bank, j, g, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(kernels::softmax(&scores))
}

impl MemoryBank {
    pub fn new(classes: usize, capacity: usize, dim: usize, metric: Metric, k: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || k == 0 {
            return Err(Error::invalid("memory capacity, dimension and k must be positive"));
        }
        Ok(Self {
            classes,
            capacity,
            dim,
            slots: vec![0.0; classes * capacity * dim],
            utility: vec![1.0; classes * capacity],
            occupancy: vec![0; classes],
            cache: vec![Vec::new(); classes],
            metric,
            k,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn occupancy(&self, j: usize) -> usize {
        self.occupancy[j]
    }

    pub fn slot(&self, j: usize, k: usize) -> &[f64] {
        let o = (j * self.capacity + k) * self.dim;
        &self.slots[o..o + self.dim]
    }

    fn slot_mut(&mut self, j: usize, k: usize) -> &mut [f64] {
        let o = (j * self.capacity + k) * self.dim;
        &mut self.slots[o..o + self.dim]
    }

    pub fn utility(&self, j: usize, k: usize) -> f64 {
        self.utility[j * self.capacity + k]
    }

    pub fn utilities(&self, j: usize) -> &[f64] {
        &self.utility[j * self.capacity..(j + 1) * self.capacity]
    }

    pub fn cache(&self, j: usize) -> &[Vec<f64>] {
        &self.cache[j]
    }

    pub fn cache_is_empty(&self) -> bool {
        self.cache.iter().all(Vec::is_empty)
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.iter().all(|&o| o == 0)
    }

    fn check_class(&self, j: usize) -> Result<()> {
        if j >= self.classes {
            return Err(Error::OutOfRange {
                what: "memory class",
                index: j,
                limit: self.classes,
            });
        }
        Ok(())
    }

    fn check_slot(&self, j: usize, k: usize) -> Result<()> {
        self.check_class(j)?;
        if k >= self.occupancy[j] {
            return Err(Error::OutOfRange {
                what: "memory slot",
                index: k,
                limit: self.occupancy[j],
            });
        }
        Ok(())
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("memory", &[v.len()], &[self.dim]));
        }
        if self.metric == Metric::DotCosine && v.iter().all(|x| *x == 0.0) {
            return Err(Error::Degenerate {
                op: "memory",
                msg: "zero vector cannot be stored under the cosine metric".into(),
            });
        }
        Ok(())
    }

    /// Replaces class `j`'s slots with `values`; utilities reset to 1.
    pub fn set_class_slots(&mut self, j: usize, values: &[Vec<f64>]) -> Result<()> {
        self.check_class(j)?;
        if values.len() > self.capacity {
            return Err(Error::invalid(format!(
                "{} slots exceed the per-class budget {}",
                values.len(),
                self.capacity
            )));
        }
        for v in values {
            self.check_vector(v)?;
        }
        for (k, v) in values.iter().enumerate() {
            self.slot_mut(j, k).copy_from_slice(v);
        }
        for k in values.len()..self.capacity {
            self.slot_mut(j, k).fill(0.0);
        }
        self.utility[j * self.capacity..(j + 1) * self.capacity].fill(1.0);
        self.occupancy[j] = values.len();
        Ok(())
    }

    /// Scores of `f` against every live slot of class `j`.
    pub fn slot_scores(&self, f: &[f64], j: usize, g: &dyn FeatureMap, h: &dyn FeatureMap) -> Result<Vec<f64>> {
        self.check_class(j)?;
        if self.occupancy[j] == 0 {
            return Err(Error::Degenerate {
                op: "class_score",
                msg: format!("class {j} has no live memory slots"),
            });
        }
        let gf = g.apply(f)?;
        (0..self.occupancy[j])
            .map(|k| score_mapped(&gf, &h.apply(self.slot(j, k))?, self.metric))
            .collect()
    }

    /// Convex merge on a correct prediction, cache append otherwise.
    pub fn update_on_sample(&mut self, f: &[f64], y_true: usize, y_pred: usize, nearest: usize, gamma: f64) -> Result<()> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("gamma {gamma} outside (0, 1)")));
        }
        self.check_slot(y_true, nearest)?;
        if f.len() != self.dim {
            return Err(Error::shape("update_on_sample", &[f.len()], &[self.dim]));
        }
        if y_pred == y_true {
            for (s, v) in self.slot_mut(y_true, nearest).iter_mut().zip(f) {
                *s = gamma * *s + (1.0 - gamma) * v;
            }
        } else {
            self.cache[y_true].push(f.to_vec());
        }
        Ok(())
    }

    /// Scales the utilities of the selected slots by `mu` (correct) or `eta`.
    pub fn update_utility(&mut self, j: usize, hits: &[usize], correct: bool, mu: f64, eta: f64) -> Result<()> {
        if !(mu > 1.0 && mu < 2.0) || !(eta > 0.0 && eta < 1.0) {
            return Err(Error::invalid(format!("mu {mu} must be in (1, 2) and eta {eta} in (0, 1)")));
        }
        for &k in hits {
            self.check_slot(j, k)?;
        }
        let factor = if correct { mu } else { eta };
        for &k in hits {
            self.utility[j * self.capacity + k] *= factor;
        }
        Ok(())
    }

    /// Clusters each non-empty cache into at most `r` centroids and writes
    /// them over the lowest-utility live slots of that class.
    pub fn end_of_epoch_refresh(&mut self, r: usize, seed: u64) -> Result<()> {
        if r == 0 || r > self.capacity {
            return Err(Error::invalid(format!("refresh count {r} must be in 1..={}", self.capacity)));
        }
        for j in 0..self.classes {
            if self.cache[j].is_empty() {
                continue;
            }
            let cache = std::mem::take(&mut self.cache[j]);
            let centroids = kmeans(&cache, r, seed::derive(seed, "kmeans", j as u64), 100)?;
            let mut live: Vec<usize> = (0..self.occupancy[j]).collect();
            live.sort_by(|&a, &b| self.utility(j, a).total_cmp(&self.utility(j, b)).then(a.cmp(&b)));
            for (&k, c) in live.iter().zip(&centroids) {
                self.slot_mut(j, k).copy_from_slice(c);
                self.utility[j * self.capacity + k] = 1.0;
            }
        }
        Ok(())
    }

    /// Fills each class's slots with k-means centroids of its features.
    pub fn seed_from_features(&mut self, per_class: &[Vec<Vec<f64>>], seed: u64) -> Result<()> {
        if per_class.len() != self.classes {
            return Err(Error::shape("seed_from_features", &[per_class.len()], &[self.classes]));
        }
        for (j, feats) in per_class.iter().enumerate() {
            if feats.is_empty() {
                return Err(Error::Data(format!("class {j} has no samples to seed memory")));
            }
            let c = kmeans(feats, self.capacity, seed::derive(seed, "memory-init", j as u64), 100)?;
            self.set_class_slots(j, &c)?;
        }
        Ok(())
    }

    /// Places every live slot on the tape as a constant, class by class.
    /// The returned pairs map each slot column back to `(class, slot)`.
    pub fn layout(&self, g: &mut Graph) -> Result<(SlotLayout, Vec<(usize, usize)>)> {
        let mut data = Vec::new();
        let mut groups = Vec::with_capacity(self.classes);
        let mut cols = Vec::new();
        for j in 0..self.classes {
            if self.occupancy[j] == 0 {
                return Err(Error::Degenerate {
                    op: "memory layout",
                    msg: format!("class {j} has no live memory slots"),
                });
            }
            let mut group = Vec::with_capacity(self.occupancy[j]);
            for k in 0..self.occupancy[j] {
                group.push(cols.len());
                cols.push((j, k));
                data.extend_from_slice(self.slot(j, k));
            }
            groups.push(group);
        }
        let slots = g.constant(Tensor::new(vec![cols.len(), self.dim], data)?);
        Ok((
            SlotLayout {
                slots,
                fine_groups: groups,
            },
            cols,
        ))
    }

    // ---- snapshot ----------------------------------------------------------

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        let shape = vec![self.classes, self.capacity, self.dim];
        p.insert("memory.slots", Tensor::new(shape, self.slots.clone()).expect("consistent"));
        p.insert(
            "memory.utility",
            Tensor::new(vec![self.classes, self.capacity], self.utility.clone()).expect("consistent"),
        );
        p.insert(
            "memory.occupancy",
            Tensor::vector(self.occupancy.iter().map(|&o| o as f64).collect()),
        );
        let metric = match self.metric {
            Metric::DotCosine => 0.0,
            Metric::NegEuclidean => 1.0,
        };
        p.insert("memory.metric", Tensor::vector(vec![metric]));
        p.insert("memory.k", Tensor::vector(vec![self.k as f64]));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let slots = p.require("memory.slots")?;
        let s = slots.shape();
        if s.len() != 3 {
            return Err(Error::Checkpoint(format!("memory.slots has shape {s:?}")));
        }
        let metric = match p.require("memory.metric")?.data().first() {
            Some(v) if *v == 0.0 => Metric::DotCosine,
            Some(v) if *v == 1.0 => Metric::NegEuclidean,
            _ => return Err(Error::Checkpoint("unknown memory metric".into())),
        };
        let k = p.require("memory.k")?.data().first().copied().unwrap_or(0.0) as usize;
        let mut bank = MemoryBank::new(s[0], s[1], s[2], metric, k.max(1))?;
        bank.slots = slots.data().to_vec();
        let u = p.require("memory.utility")?;
        if u.shape() != [s[0], s[1]] {
            return Err(Error::Checkpoint(format!("memory.utility has shape {:?}", u.shape())));
        }
        bank.utility = u.data().to_vec();
        let occ = p.require("memory.occupancy")?;
        if occ.len() != s[0] {
            return Err(Error::Checkpoint("memory.occupancy length mismatch".into()));
        }
        bank.occupancy = occ.data().iter().map(|&v| v as usize).collect();
        if bank.occupancy.iter().any(|&o| o > s[1]) {
            return Err(Error::Checkpoint("occupancy exceeds capacity".into()));
        }
        Ok(bank)
    }
}

/// Linear plan turning stacked support features (`n × d`, class by class)
/// into memory slots: `slots = plan · support`. Returns the plan
/// (`slots × n`) and the slot columns of each class.
pub fn meta_plan(shots: &[usize], mode: MemoryMode) -> Result<(Tensor, Vec<Vec<usize>>)> {
    if let Some(j) = shots.iter().position(|&s| s == 0) {
        return Err(Error::Data(format!("task class {j} has no support samples")));
    }
    let n: usize = shots.iter().sum();
    let total: usize = shots.iter().map(|&s| mode.slots_for(s)).sum();
    let mut plan = vec![0.0; total * n];
    let mut groups = Vec::with_capacity(shots.len());
    let mut row = 0;
    let mut start = 0;
    for &s in shots {
        let mut group = Vec::new();
        if matches!(mode, MemoryMode::Mem1 | MemoryMode::Mem3) {
            for i in 0..s {
                plan[row * n + start + i] = 1.0 / s as f64;
            }
            group.push(row);
            row += 1;
        }
        if matches!(mode, MemoryMode::Mem2 | MemoryMode::Mem3) {
            for i in 0..s {
                plan[row * n + start + i] = 1.0;
                group.push(row);
                row += 1;
            }
        }
        groups.push(group);
        start += s;
    }
    Ok((Tensor::new(vec![total, n], plan)?, groups))
}

/// Builds task memory on the tape from stacked support features.
pub fn meta_layout(g: &mut Graph, support: Var, shots: &[usize], mode: MemoryMode) -> Result<SlotLayout> {
    let (plan, fine_groups) = meta_plan(shots, mode)?;
    let p = g.constant(plan);
    let slots = g.matmul(p, support)?;
    Ok(SlotLayout { slots, fine_groups })
}

/// Builds a task memory bank from per-class support features. No update
/// rule ever runs on it.
pub fn build_meta_memory(support: &[Vec<Vec<f64>>], mode: MemoryMode, metric: Metric, k: usize) -> Result<MemoryBank> {
    let shots: Vec<usize> = support.iter().map(Vec::len).collect();
    let dim = support
        .iter()
        .flatten()
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Data("empty support set".into()))?;
    let rows: Vec<Vec<f64>> = support.iter().flatten().cloned().collect();
    let feats = Tensor::from_rows(&rows)?;
    let (plan, groups) = meta_plan(&shots, mode)?;
    let mut g = Graph::new();
    let pv = g.constant(plan);
    let fv = g.constant(feats);
    let slots = g.matmul(pv, fv)?;
    let slots = g.value(slots);
    let capacity = groups.iter().map(Vec::len).max().unwrap_or(1);
    let mut bank = MemoryBank::new(support.len(), capacity, dim, metric, k)?;
    for (j, group) in groups.iter().enumerate() {
        let vals: Vec<Vec<f64>> = group.iter().map(|&r| slots.row(r).to_vec()).collect();
        bank.set_class_slots(j, &vals)?;
    }
    Ok(bank)
}
