//! Train/val/test splitting under the many-class few-shot constraints.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Same fine classes everywhere, samples partitioned per class.
    Supervised,
    /// Fine classes partitioned, every coarse class kept in train.
    Meta,
}

impl SplitMode {
    pub fn name(self) -> &'static str {
        match self {
            SplitMode::Supervised => "supervised",
            SplitMode::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// train / val / test, summing to 1.
    pub fractions: [f64; 3],
    pub seed: u64,
    /// Meta mode: also require every coarse class in each non-empty val/test split.
    pub coarse_in_every_split: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub mode: SplitMode,
    pub seed: u64,
    /// `(fine name, split)`; in supervised mode every class maps to every split.
    pub entries: Vec<(String, SplitTag)>,
}

impl SplitManifest {
    pub fn render(&self) -> String {
        let mut s = format!("# mode={} seed={}\n", self.mode.name(), self.seed);
        for (name, tag) in &self.entries {
            writeln!(s, "{name}\t{}", tag.name()).unwrap();
        }
        s
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {},{},{} must be in [0,1] and sum to 1",
            f[0], f[1], f[2]
        )));
    }
    Ok(())
}

/// Rounded per-split counts of `n` that sum exactly to `n`.
fn allocate(n: usize, f: &[f64; 3]) -> [usize; 3] {
    let a = ((f[0] * n as f64).round() as usize).min(n);
    let b = ((f[1] * n as f64).round() as usize).min(n - a);
    [a, b, n - a - b]
}

pub fn mcfs_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset, SplitManifest)> {
    if ds.split != SplitTag::Unsplit {
        return Err(Error::Data(format!("can only split unsplit data, got `{}`", ds.split.name())));
    }
    check_fractions(&spec.fractions)?;
    match spec.mode {
        SplitMode::Meta => meta_split(ds, spec),
        SplitMode::Supervised => {
            let parts = stratified(ds, &spec.fractions, spec.seed)?;
            let entries = ds
                .fine_names
                .iter()
                .flat_map(|n| {
                    [SplitTag::Train, SplitTag::Val, SplitTag::Test]
                        .into_iter()
                        .map(move |t| (n.clone(), t))
                })
                .collect();
            let manifest = SplitManifest {
                mode: spec.mode,
                seed: spec.seed,
                entries,
            };
            let [a, b, c] = parts;
            Ok((a, b, c, manifest))
        }
    }
}

fn stratified(ds: &Dataset, f: &[f64; 3], seed_: u64) -> Result<[Dataset; 3]> {
    let mut rng = seed::stream(seed_, "split.stratified", 0);
    let mut idx: [Vec<usize>; 3] = Default::default();
    for mut cls in ds.by_class() {
        cls.shuffle(&mut rng);
        let [a, b, _] = allocate(cls.len(), f);
        idx[0].extend_from_slice(&cls[..a]);
        idx[1].extend_from_slice(&cls[a..a + b]);
        idx[2].extend_from_slice(&cls[a + b..]);
    }
    for v in &mut idx {
        v.sort_unstable();
    }
    Ok([
        ds.subset(&idx[0], SplitTag::Train),
        ds.subset(&idx[1], SplitTag::Val),
        ds.subset(&idx[2], SplitTag::Test),
    ])
}

fn meta_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset, SplitManifest)> {
    let h = &ds.hierarchy;
    let present = ds.present_classes();
    let targets = allocate(present.len(), &spec.fractions);
    let mut rng = seed::stream(spec.seed, "split.meta", 0);
    let mut assign: Vec<Option<usize>> = vec![None; h.num_fine()];
    let mut filled = [0usize; 3];

    let required: Vec<usize> = if spec.coarse_in_every_split {
        (0..3).filter(|&s| s == 0 || targets[s] > 0).collect()
    } else {
        vec![0]
    };
    for z in 0..h.num_coarse() {
        let mut kids: Vec<usize> = h.children(z)?.iter().copied().filter(|&y| present.contains(&y)).collect();
        if kids.is_empty() {
            continue;
        }
        if kids.len() < required.len() {
            return Err(Error::Data(format!(
                "coarse class `{}` has {} fine {} but must appear in {} splits; \
                 every coarse class needs a distinct fine child in each split that uses it",
                ds.coarse_names[z],
                kids.len(),
                if kids.len() == 1 { "child" } else { "children" },
                required.len()
            )));
        }
        kids.shuffle(&mut rng);
        for (&s, &y) in required.iter().zip(&kids) {
            assign[y] = Some(s);
            filled[s] += 1;
        }
    }
    for s in 0..3 {
        if filled[s] > targets[s] {
            return Err(Error::Data(format!(
                "{} coarse classes must be represented in the {} split but its fraction only allows {} fine classes",
                filled[s],
                ["train", "val", "test"][s],
                targets[s]
            )));
        }
    }
    let mut rest: Vec<usize> = present.iter().copied().filter(|&y| assign[y].is_none()).collect();
    rest.shuffle(&mut rng);
    let mut rest = rest.into_iter();
    for s in 0..3 {
        while filled[s] < targets[s] {
            let y = rest.next().expect("targets sum to class count");
            assign[y] = Some(s);
            filled[s] += 1;
        }
    }

    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut idx: [Vec<usize>; 3] = Default::default();
    for (i, it) in ds.items.iter().enumerate() {
        idx[assign[it.fine].expect("every present class assigned")].push(i);
    }
    let entries = present
        .iter()
        .map(|&y| (ds.fine_names[y].clone(), tags[assign[y].unwrap()]))
        .collect();
    Ok((
        ds.subset(&idx[0], SplitTag::Train),
        ds.subset(&idx[1], SplitTag::Val),
        ds.subset(&idx[2], SplitTag::Test),
        SplitManifest {
            mode: SplitMode::Meta,
            seed: spec.seed,
            entries,
        },
    ))
}

/// Stratified hold-out of `val_frac` of each class from a training set.
pub fn train_val_split(ds: &Dataset, val_frac: f64, seed_: u64) -> Result<(Dataset, Dataset)> {
    ds.ensure_trainable()?;
    let f = [1.0 - val_frac, val_frac, 0.0];
    check_fractions(&f)?;
    let [a, b, _] = stratified(ds, &f, seed_)?;
    Ok((a, b))
}
