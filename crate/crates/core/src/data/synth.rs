//! Gaussian-cluster generator with a two-level class structure.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Dataset, Item, Layout, SplitTag};
use crate::error::{Error, Result};
use crate::hierarchy::ClassHierarchy;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub num_coarse: usize,
    pub fine_per_coarse: usize,
    pub dim: usize,
    pub per_class: usize,
    pub coarse_sep: f64,
    pub fine_sep: f64,
    pub noise: f64,
    /// Each class draws its size uniformly from `per_class ± jitter`, floored at 2.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_coarse: 4,
            fine_per_coarse: 3,
            dim: 16,
            per_class: 40,
            coarse_sep: 8.0,
            fine_sep: 1.5,
            noise: 0.6,
            jitter: 0,
            seed: 0,
        }
    }
}

fn random_direction(rng: &mut seed::Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

pub fn gen_synthetic(spec: &GenSpec) -> Result<Dataset> {
    if spec.num_coarse == 0 || spec.fine_per_coarse == 0 || spec.dim == 0 {
        return Err(Error::Config("gen: class counts and dim must be positive".into()));
    }
    if spec.per_class < 2 {
        return Err(Error::Config("gen: per_class must be at least 2".into()));
    }
    if !(spec.fine_sep > 0.0 && spec.coarse_sep > spec.fine_sep && spec.coarse_sep.is_finite()) {
        return Err(Error::Config("gen: need coarse_sep > fine_sep > 0".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config("gen: noise must be non-negative".into()));
    }
    let mut rng = seed::stream(spec.seed, "gen", 0);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("gen: {e}")))?;

    let nf = spec.num_coarse * spec.fine_per_coarse;
    let mut children = Vec::with_capacity(spec.num_coarse);
    let mut fine_names = Vec::with_capacity(nf);
    let mut coarse_names = Vec::with_capacity(spec.num_coarse);
    let mut centers = Vec::with_capacity(nf);
    for z in 0..spec.num_coarse {
        coarse_names.push(format!("c{z:02}"));
        let cc = random_direction(&mut rng, spec.dim, spec.coarse_sep);
        let mut kids = Vec::with_capacity(spec.fine_per_coarse);
        for k in 0..spec.fine_per_coarse {
            kids.push(fine_names.len());
            fine_names.push(format!("c{z:02}_f{k:02}"));
            let off = random_direction(&mut rng, spec.dim, spec.fine_sep);
            centers.push(cc.iter().zip(&off).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }
        children.push(kids);
    }
    let hierarchy = ClassHierarchy::from_children(children)?;

    let mut items = Vec::new();
    for (y, c) in centers.iter().enumerate() {
        let count = if spec.jitter == 0 {
            spec.per_class
        } else {
            let lo = spec.per_class.saturating_sub(spec.jitter).max(2);
            rng.random_range(lo..=spec.per_class + spec.jitter)
        };
        let z = hierarchy.parents()[y];
        for _ in 0..count {
            let input = c.iter().map(|m| m + noise.sample(&mut rng)).collect();
            items.push(Item { input, fine: y, coarse: z });
        }
    }
    Ok(Dataset {
        items,
        hierarchy,
        fine_names,
        coarse_names,
        layout: Layout::Features(spec.dim),
        split: SplitTag::Unsplit,
        provenance: format!(
            "synthetic coarse={} fine_per_coarse={} dim={} per_class={} coarse_sep={} fine_sep={} noise={} jitter={} seed={}",
            spec.num_coarse,
            spec.fine_per_coarse,
            spec.dim,
            spec.per_class,
            spec.coarse_sep,
            spec.fine_sep,
            spec.noise,
            spec.jitter,
            spec.seed
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_items_equal_centers() {
        let ds = gen_synthetic(&GenSpec {
            noise: 0.0,
            per_class: 3,
            ..GenSpec::default()
        })
        .unwrap();
        for cls in ds.by_class() {
            assert!(cls.iter().all(|&i| ds.items[i].input == ds.items[cls[0]].input));
        }
    }

    #[test]
    fn counts_and_labels() {
        let ds = gen_synthetic(&GenSpec {
            num_coarse: 2,
            fine_per_coarse: 2,
            per_class: 2,
            ..GenSpec::default()
        })
        .unwrap();
        assert_eq!(ds.len(), 8);
        ds.validate().unwrap();
    }

    #[test]
    fn center_geometry() {
        let spec = GenSpec {
            noise: 0.0,
            per_class: 2,
            ..GenSpec::default()
        };
        let ds = gen_synthetic(&spec).unwrap();
        // siblings sit on a sphere of radius fine_sep around a shared center
        // so their distance is at most 2 * fine_sep
        let by = ds.by_class();
        for z in 0..ds.hierarchy.num_coarse() {
            let kids = ds.hierarchy.children(z).unwrap();
            for &a in kids {
                for &b in kids {
                    let d = crate::ndgrad::kernels::sq_dist(&ds.items[by[a][0]].input, &ds.items[by[b][0]].input).sqrt();
                    assert!(d <= 2.0 * spec.fine_sep + 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = GenSpec::default();
        assert_eq!(gen_synthetic(&s).unwrap(), gen_synthetic(&s).unwrap());
        let t = GenSpec { seed: 1, ..s };
        assert_ne!(gen_synthetic(&s).unwrap().items, gen_synthetic(&t).unwrap().items);
    }

    #[test]
    fn jitter_varies_counts() {
        let ds = gen_synthetic(&GenSpec {
            jitter: 10,
            ..GenSpec::default()
        })
        .unwrap();
        let counts: Vec<usize> = ds.by_class().iter().map(Vec::len).collect();
        assert!(counts.iter().all(|&c| (30..=50).contains(&c)));
        assert!(counts.iter().any(|&c| c != counts[0]));
    }

    #[test]
    fn rejects_bad_spec() {
        for bad in [
            GenSpec { per_class: 1, ..GenSpec::default() },
            GenSpec { fine_sep: 9.0, ..GenSpec::default() },
            GenSpec { fine_sep: 0.0, ..GenSpec::default() },
            GenSpec { num_coarse: 0, ..GenSpec::default() },
        ] {
            assert!(gen_synthetic(&bad).is_err());
        }
    }
}
