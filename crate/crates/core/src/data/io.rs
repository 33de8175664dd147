//! Text dataset format.
//!
//! ```text
//! hikfs-data v1
//! dims=<d>            (or image=<s>x<s>)
//! split=<tag>         (optional)
//! provenance=<text>   (optional)
//! <fine_name>\t<coarse_name>     one line per fine class
//! <fine_name>,<coarse_name>,<v1>,...,<vd>   one line per item
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Dataset, Item, Layout, SplitTag};
use crate::error::{Error, Result};
use crate::hierarchy::parse_hierarchy;

pub const HEADER: &str = "hikfs-data v1";

pub fn render_dataset(ds: &Dataset) -> String {
    let mut s = String::new();
    s.push_str(HEADER);
    s.push('\n');
    match ds.layout {
        Layout::Features(d) => writeln!(s, "dims={d}").unwrap(),
        Layout::Image(side) => writeln!(s, "image={side}x{side}").unwrap(),
    }
    writeln!(s, "split={}", ds.split.name()).unwrap();
    if !ds.provenance.is_empty() {
        writeln!(s, "provenance={}", ds.provenance).unwrap();
    }
    for (y, name) in ds.fine_names.iter().enumerate() {
        let z = ds.hierarchy.parents()[y];
        writeln!(s, "{name}\t{}", ds.coarse_names[z]).unwrap();
    }
    for it in &ds.items {
        s.push_str(&ds.fine_names[it.fine]);
        s.push(',');
        s.push_str(&ds.coarse_names[it.coarse]);
        for v in &it.input {
            write!(s, ",{v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::write(path, render_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

fn parse_layout(v: &str, key: &str) -> Option<Layout> {
    match key {
        "dims" => v.parse().ok().filter(|d| *d > 0).map(Layout::Features),
        "image" => {
            let (a, b) = v.split_once('x')?;
            let (a, b): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
            (a == b && a > 0).then_some(Layout::Image(a))
        }
        _ => None,
    }
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    match lines.next() {
        None => return Err(Error::Data(format!("{}: empty dataset", path.display()))),
        Some((_, l)) if l.trim().is_empty() && text.trim().is_empty() => {
            return Err(Error::Data(format!("{}: empty dataset", path.display())))
        }
        Some((n, l)) if l != HEADER => return Err(err(n, format!("expected header `{HEADER}`, found `{l}`"))),
        Some(_) => {}
    }
    let (n, l) = lines.next().ok_or_else(|| err(2, "missing `dims=` or `image=` line".into()))?;
    let layout = l
        .split_once('=')
        .and_then(|(k, v)| parse_layout(v, k))
        .ok_or_else(|| err(n, format!("malformed layout line `{l}`")))?;

    let mut split = SplitTag::Unsplit;
    let mut provenance = String::new();
    while let Some(&(n, l)) = lines.peek() {
        if let Some(v) = l.strip_prefix("split=") {
            split = SplitTag::parse(v).ok_or_else(|| err(n, format!("unknown split `{v}`")))?;
        } else if let Some(v) = l.strip_prefix("provenance=") {
            provenance = v.to_string();
        } else {
            break;
        }
        lines.next();
    }

    let mut hier_text = String::new();
    let mut first_item_line = None;
    while let Some(&(n, l)) = lines.peek() {
        if !l.contains('\t') {
            first_item_line = Some(n);
            break;
        }
        hier_text.push_str(l);
        hier_text.push('\n');
        lines.next();
    }
    if hier_text.is_empty() {
        return Err(err(first_item_line.unwrap_or(n + 1), "missing hierarchy block".into()));
    }
    let (hierarchy, fine_names, coarse_names) = parse_hierarchy(&hier_text).map_err(|e| err(n + 1, e.to_string()))?;
    let fine_ids: HashMap<&str, usize> = fine_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let coarse_ids: HashMap<&str, usize> = coarse_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let dim = layout.input_dim();
    let mut items = Vec::new();
    for (n, l) in lines {
        if l.is_empty() {
            continue;
        }
        if l.contains('\t') {
            return Err(err(n, "hierarchy line after the first item".into()));
        }
        let mut parts = l.split(',');
        let fine_name = parts.next().unwrap_or_default();
        let coarse_name = parts.next().ok_or_else(|| err(n, "missing coarse label".into()))?;
        let &fine = fine_ids
            .get(fine_name)
            .ok_or_else(|| err(n, format!("unknown fine class `{fine_name}`")))?;
        let &coarse = coarse_ids
            .get(coarse_name)
            .ok_or_else(|| err(n, format!("unknown coarse class `{coarse_name}`")))?;
        let parent = hierarchy.parents()[fine];
        if parent != coarse {
            return Err(err(
                n,
                format!(
                    "coarse label `{coarse_name}` does not match fine label `{fine_name}` (parent `{}`)",
                    coarse_names[parent]
                ),
            ));
        }
        let input = parts
            .map(|v| v.parse::<f64>().map_err(|_| err(n, format!("bad number `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if input.len() != dim {
            return Err(err(n, format!("expected {dim} values, found {}", input.len())));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(err(n, "non-finite value".into()));
        }
        if matches!(layout, Layout::Image(_)) && input.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(err(n, "pixel value outside 0..=255".into()));
        }
        items.push(Item { input, fine, coarse });
    }
    Ok(Dataset {
        items,
        hierarchy,
        fine_names,
        coarse_names,
        layout,
        split,
        provenance,
    })
}
