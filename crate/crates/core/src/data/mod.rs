//! Labelled datasets with a two-level class hierarchy.

mod io;
mod split;
mod synth;

pub use io::{load_dataset, parse_dataset, render_dataset, save_dataset};
pub use split::{mcfs_split, train_val_split, SplitManifest, SplitMode, SplitSpec};
pub use synth::{gen_synthetic, GenSpec};

use crate::error::{Error, Result};
use crate::hierarchy::ClassHierarchy;
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Unsplit,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Unsplit => "unsplit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => SplitTag::Train,
            "val" => SplitTag::Val,
            "test" => SplitTag::Test,
            "unsplit" => SplitTag::Unsplit,
            _ => return None,
        })
    }
}

/// Shape of each item's raw input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Features(usize),
    /// Square single-channel raster with pixel values in `0..=255`.
    Image(usize),
}

impl Layout {
    pub fn input_dim(self) -> usize {
        match self {
            Layout::Features(d) => d,
            Layout::Image(s) => s * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub input: Vec<f64>,
    pub fine: usize,
    pub coarse: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub hierarchy: ClassHierarchy,
    pub fine_names: Vec<String>,
    pub coarse_names: Vec<String>,
    pub layout: Layout,
    pub split: SplitTag,
    pub provenance: String,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\t', ',', '\n', '\r']) {
        return Err(Error::Data(format!("class name `{name}` is empty or contains a separator")));
    }
    Ok(())
}

impl Dataset {
    /// Checks names, input sizes and parent agreement of every item.
    pub fn validate(&self) -> Result<()> {
        let h = &self.hierarchy;
        if self.fine_names.len() != h.num_fine() || self.coarse_names.len() != h.num_coarse() {
            return Err(Error::Data("class names do not match the hierarchy".into()));
        }
        for n in self.fine_names.iter().chain(&self.coarse_names) {
            check_name(n)?;
        }
        let dim = self.layout.input_dim();
        for (i, it) in self.items.iter().enumerate() {
            if it.input.len() != dim {
                return Err(Error::Data(format!("item {i} has {} values, expected {dim}", it.input.len())));
            }
            let parent = h.fine_to_coarse(it.fine)?;
            if parent != it.coarse {
                return Err(Error::Data(format!(
                    "item {i}: coarse label `{}` is not the parent of fine label `{}` (parent `{}`)",
                    self.coarse_names.get(it.coarse).map_or("?", String::as_str),
                    self.fine_names[it.fine],
                    self.coarse_names[parent]
                )));
            }
            if it.input.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("item {i} has a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    /// Item indices per fine class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.hierarchy.num_fine()];
        for (i, it) in self.items.iter().enumerate() {
            out[it.fine].push(i);
        }
        out
    }

    /// Fine classes that have at least one item, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.by_class()
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(y, _)| y)
            .collect()
    }

    /// Stacks the inputs of `idx` into a `len × input_dim` tensor. Image
    /// pixels are scaled to `[0, 1]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let dim = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&self.items[i].input);
        }
        if let Layout::Image(_) = self.layout {
            data.iter_mut().for_each(|v| *v /= 255.0);
        }
        Tensor::new(vec![idx.len(), dim], data).expect("validated dims")
    }

    /// Refuses test data. Called by every training entry point.
    pub fn ensure_trainable(&self) -> Result<()> {
        if self.split == SplitTag::Test {
            return Err(Error::Data(format!(
                "refusing to train on test-tagged data ({})",
                self.provenance
            )));
        }
        Ok(())
    }

    /// Same items with every fine class under a single coarse class.
    pub fn collapse_hierarchy(&self) -> Dataset {
        let mut out = self.clone();
        out.hierarchy = self.hierarchy.collapsed();
        out.coarse_names = vec!["all".to_string()];
        for it in &mut out.items {
            it.coarse = 0;
        }
        out
    }

    /// Keeps the items selected by `keep`, same hierarchy.
    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
            hierarchy: self.hierarchy.clone(),
            fine_names: self.fine_names.clone(),
            coarse_names: self.coarse_names.clone(),
            layout: self.layout,
            split,
            provenance: self.provenance.clone(),
        }
    }

    /// Items of `a` followed by items of `b`. Both must share the hierarchy.
    pub fn concat(a: &Dataset, b: &Dataset, split: SplitTag) -> Result<Dataset> {
        if a.hierarchy != b.hierarchy || a.fine_names != b.fine_names || a.layout != b.layout {
            return Err(Error::Data("cannot concatenate datasets with different class sets".into()));
        }
        let mut out = a.subset(&(0..a.len()).collect::<Vec<_>>(), split);
        out.items.extend(b.items.iter().cloned());
        Ok(out)
    }
}
