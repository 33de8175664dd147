//! Slice-level numeric kernels shared by the tape and by tape-free callers.
//!
//! Every reduction walks indices in ascending order so results are
//! bit-reproducible.

/// Softmax over the entries where `mask` is true; masked entries become 0.
///
/// Masked entries are left out of both the max-shift and the denominator.
/// With `mask == None` every entry participates.
pub fn masked_softmax(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if on(j) && v > max {
            max = v;
        }
    }
    let mut denom = 0.0;
    for (j, &v) in x.iter().enumerate() {
        if on(j) {
            let e = (v - max).exp();
            out[j] = e;
            denom += e;
        } else {
            out[j] = 0.0;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if on(j) {
            *o /= denom;
        }
    }
}

/// Log-softmax over the unmasked entries. Masked entries are written as 0.0
/// and must not be read as log-probabilities.
pub fn masked_log_softmax(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if on(j) && v > max {
            max = v;
        }
    }
    let mut denom = 0.0;
    for (j, &v) in x.iter().enumerate() {
        if on(j) {
            denom += (v - max).exp();
        }
    }
    let log_z = max + denom.ln();
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if on(j) { v - log_z } else { 0.0 };
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    masked_softmax(x, None, &mut out);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| {
        let d = x - y;
        acc + d * d
    })
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Indices of the `k` largest values, highest first; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
