//! Two-level class hierarchy and the coarse-to-fine probability factorization.
//!
//! Fine logits `a` (one per fine class) and coarse logits `b` (one per coarse
//! class) combine as
//!
//! ```text
//! Pr(y | z, x) = exp(a_y) / Σ_{y' ∈ Y_z} exp(a_y')
//! Pr(z | x)    = exp(b_z) / Σ_{z'} exp(b_z')
//! Pr(y | x)    = Pr(y | parent(y), x) · Pr(parent(y) | x)
//! ```
//!
//! The last line is the full marginal over coarse classes: the conditional is
//! zero for every coarse class other than the fine class's parent.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ndgrad::{kernels, Graph, Var};

pub type FineId = usize;
pub type CoarseId = usize;

/// Partition of fine classes `0..num_fine` into disjoint coarse classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHierarchy {
    parent: Vec<CoarseId>,
    children: Vec<Vec<FineId>>,
}

impl ClassHierarchy {
    /// Builds a hierarchy from each fine class's parent.
    pub fn from_parents(parent: Vec<CoarseId>, num_coarse: usize) -> Result<Self> {
        let mut children = vec![Vec::new(); num_coarse];
        for (y, &z) in parent.iter().enumerate() {
            if z >= num_coarse {
                return Err(Error::OutOfRange {
                    what: "coarse class",
                    index: z,
                    limit: num_coarse,
                });
            }
            children[z].push(y);
        }
        if let Some(z) = children.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("coarse class {z} has no fine children")));
        }
        Ok(Self { parent, children })
    }

    /// Builds a hierarchy from explicit child sets. The sets must partition
    /// `0..total` where `total` is the sum of their sizes.
    pub fn from_children(children: Vec<Vec<FineId>>) -> Result<Self> {
        let total: usize = children.iter().map(Vec::len).sum();
        let mut parent = vec![usize::MAX; total];
        for (z, ys) in children.iter().enumerate() {
            for &y in ys {
                if y >= total {
                    return Err(Error::OutOfRange {
                        what: "fine class",
                        index: y,
                        limit: total,
                    });
                }
                if parent[y] != usize::MAX {
                    return Err(Error::invalid(format!("fine class {y} appears under two coarse classes")));
                }
                parent[y] = z;
            }
        }
        Self::from_parents(parent, children.len())
    }

    /// Every fine class under a single coarse class.
    pub fn flat(num_fine: usize) -> Self {
        Self {
            parent: vec![0; num_fine],
            children: vec![(0..num_fine).collect()],
        }
    }

    pub fn num_fine(&self) -> usize {
        self.parent.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.children.len()
    }

    pub fn parents(&self) -> &[CoarseId] {
        &self.parent
    }

    pub fn fine_to_coarse(&self, y: FineId) -> Result<CoarseId> {
        self.parent.get(y).copied().ok_or(Error::OutOfRange {
            what: "fine class",
            index: y,
            limit: self.parent.len(),
        })
    }

    pub fn children(&self, z: CoarseId) -> Result<&[FineId]> {
        self.children.get(z).map(Vec::as_slice).ok_or(Error::OutOfRange {
            what: "coarse class",
            index: z,
            limit: self.children.len(),
        })
    }

    /// The same fine classes under one coarse class.
    pub fn collapsed(&self) -> Self {
        Self::flat(self.num_fine())
    }

    /// Restricts to `task` fine classes, renumbered `0..task.len()` in the given
    /// order. Coarse classes are the ancestors of `task`, numbered by first
    /// appearance. Returns the local hierarchy and the global id of each local
    /// coarse class.
    pub fn restrict(&self, task: &[FineId]) -> Result<(ClassHierarchy, Vec<CoarseId>)> {
        let mut local_of: HashMap<CoarseId, usize> = HashMap::new();
        let mut globals = Vec::new();
        let mut parent = Vec::with_capacity(task.len());
        for &y in task {
            let z = self.fine_to_coarse(y)?;
            let lz = *local_of.entry(z).or_insert_with(|| {
                globals.push(z);
                globals.len() - 1
            });
            parent.push(lz);
        }
        Ok((Self::from_parents(parent, globals.len())?, globals))
    }

    /// Row mask over fine classes selecting `Y_z`.
    pub fn sibling_mask(&self, z: CoarseId) -> Vec<bool> {
        self.parent.iter().map(|&p| p == z).collect()
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_len(op: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::shape(op, &[v.len()], &[n]));
    }
    Ok(())
}

/// `Pr(y | z, x)` for every fine class; zero outside `Y_z`.
pub fn conditional_fine_probs(a: &[f64], z: CoarseId, h: &ClassHierarchy) -> Result<Vec<f64>> {
    check_len("conditional_fine_probs", a, h.num_fine())?;
    check_finite("fine logits", a)?;
    h.children(z)?;
    let mask = h.sibling_mask(z);
    let mut out = vec![0.0; a.len()];
    kernels::masked_softmax(a, Some(&mask), &mut out);
    Ok(out)
}

/// `Pr(z | x)` over all coarse classes.
pub fn coarse_probs(b: &[f64]) -> Result<Vec<f64>> {
    if b.is_empty() {
        return Err(Error::invalid("coarse logits are empty"));
    }
    check_finite("coarse logits", b)?;
    Ok(kernels::softmax(b))
}

/// `Pr(y | x)` marginalized over coarse classes.
pub fn marginal_fine_probs(a: &[f64], b: &[f64], h: &ClassHierarchy) -> Result<Vec<f64>> {
    check_len("marginal_fine_probs", a, h.num_fine())?;
    check_len("marginal_fine_probs", b, h.num_coarse())?;
    let pz = coarse_probs(b)?;
    let mut out = vec![0.0; a.len()];
    for (z, &p) in pz.iter().enumerate() {
        let cond = conditional_fine_probs(a, z, h)?;
        for &y in h.children(z)? {
            out[y] = cond[y] * p;
        }
    }
    Ok(out)
}

/// `-log Pr(y | parent(y), x) - log Pr(parent(y) | x)` for one sample.
pub fn hierarchical_nll(a: &[f64], b: &[f64], y: FineId, h: &ClassHierarchy) -> Result<f64> {
    check_len("hierarchical_nll", a, h.num_fine())?;
    check_len("hierarchical_nll", b, h.num_coarse())?;
    check_finite("fine logits", a)?;
    check_finite("coarse logits", b)?;
    let z = h.fine_to_coarse(y)?;
    let mask = h.sibling_mask(z);
    let mut lf = vec![0.0; a.len()];
    kernels::masked_log_softmax(a, Some(&mask), &mut lf);
    let mut lc = vec![0.0; b.len()];
    kernels::masked_log_softmax(b, None, &mut lc);
    Ok(-lf[y] - lc[z])
}

/// Batched, differentiable hierarchical NLL averaged over rows.
///
/// `a` is `n × |Y|`, `b` is `n × |Z|`, `targets` holds the fine label per row.
pub fn hierarchical_nll_graph(
    g: &mut Graph,
    a: Var,
    b: Var,
    targets: &[FineId],
    h: &ClassHierarchy,
) -> Result<Var> {
    let (n, ny) = g.value(a).rows_cols();
    let (nb, nz) = g.value(b).rows_cols();
    if ny != h.num_fine() || nz != h.num_coarse() || n != nb || n != targets.len() {
        return Err(Error::shape("hierarchical_nll", g.shape(a), g.shape(b)));
    }
    let mut mask = Vec::with_capacity(n * ny);
    let mut coarse_targets = Vec::with_capacity(n);
    for &y in targets {
        let z = h.fine_to_coarse(y)?;
        mask.extend(h.sibling_mask(z));
        coarse_targets.push(z);
    }
    let lf = g.log_softmax_rows(a, Some(Arc::new(mask)))?;
    let fine = g.nll(lf, targets)?;
    let lc = g.log_softmax_rows(b, None)?;
    let coarse = g.nll(lc, &coarse_targets)?;
    g.add(fine, coarse)
}

/// Parses `<fine_name>\t<coarse_name>` lines. Dense ids are assigned in first
/// appearance order for both levels.
pub fn parse_hierarchy(text: &str) -> Result<(ClassHierarchy, Vec<String>, Vec<String>)> {
    let mut fine_names: Vec<String> = Vec::new();
    let mut coarse_names: Vec<String> = Vec::new();
    let mut coarse_ids: HashMap<String, usize> = HashMap::new();
    let mut parent = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (f, c) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("hierarchy line {}: expected `<fine>\\t<coarse>`", i + 1)))?;
        if fine_names.iter().any(|n| n == f) {
            return Err(Error::Data(format!("hierarchy line {}: fine class `{f}` listed twice", i + 1)));
        }
        let z = *coarse_ids.entry(c.to_string()).or_insert_with(|| {
            coarse_names.push(c.to_string());
            coarse_names.len() - 1
        });
        fine_names.push(f.to_string());
        parent.push(z);
    }
    let h = ClassHierarchy::from_parents(parent, coarse_names.len())?;
    Ok((h, fine_names, coarse_names))
}
