//! Wireframe SVG output: exactly one polyline per edge, dashed when either
//! endpoint is invisible, plus a dot per predicted landmark.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{Matrix2xX, Matrix3xX};

/// Edge list as landmark index pairs. Falls back to connecting each
/// landmark with its two nearest 3D neighbors on the mean shape, which
/// gives a connected-enough sketch without any model knowledge.
pub fn load_or_default_edges(
    edges_path: Option<&Path>,
    mean_shape: &Matrix3xX<f64>,
) -> Result<Vec<(usize, usize)>> {
    let p = mean_shape.ncols();
    let pairs: Vec<(usize, usize)> = match edges_path {
        Some(path) => {
            let raw: Vec<(usize, usize)> = crate::records::read_json(path)?;
            for &(a, b) in &raw {
                if a >= p || b >= p {
                    bail!("edge ({a}, {b}) out of range for {p} landmarks");
                }
            }
            raw
        }
        None => {
            let mut found = Vec::new();
            for u in 0..p {
                let mut dists: Vec<(f64, usize)> = (0..p)
                    .filter(|&v| v != u)
                    .map(|v| ((mean_shape.column(u) - mean_shape.column(v)).norm(), v))
                    .collect();
                dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, v) in dists.iter().take(2) {
                    found.push((u.min(v), u.max(v)));
                }
            }
            found
        }
    };
    let mut dedup: Vec<(usize, usize)> =
        pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    dedup.sort_unstable();
    dedup.dedup();
    Ok(dedup)
}

pub fn render(
    predictions: &Matrix2xX<f64>,
    visibility: &[bool],
    edges: &[(usize, usize)],
) -> Result<String> {
    let p = predictions.ncols();
    if visibility.len() != p {
        bail!("visibility mask has {} entries for {p} landmarks", visibility.len());
    }
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in predictions.column_iter() {
        min_x = min_x.min(c.x);
        max_x = max_x.max(c.x);
        min_y = min_y.min(c.y);
        max_y = max_y.max(c.y);
    }
    if p == 0 || !min_x.is_finite() {
        bail!("nothing to draw");
    }
    let pad = 10.0;
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\">",
        min_x - pad,
        min_y - pad,
        (max_x - min_x) + 2.0 * pad,
        (max_y - min_y) + 2.0 * pad
    )?;
    for &(a, b) in edges {
        if a >= p || b >= p {
            bail!("edge ({a}, {b}) out of range for {p} landmarks");
        }
        let hidden = !(visibility[a] && visibility[b]);
        let style = if hidden {
            " stroke-dasharray=\"4 3\" class=\"hidden\""
        } else {
            ""
        };
        writeln!(
            svg,
            "  <polyline points=\"{},{} {},{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{}/>",
            predictions[(0, a)],
            predictions[(1, a)],
            predictions[(0, b)],
            predictions[(1, b)],
            if hidden { "#2b6cb0" } else { "#c53030" },
            style
        )?;
    }
    for (j, c) in predictions.column_iter().enumerate() {
        writeln!(
            svg,
            "  <circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"{}\"/>",
            c.x,
            c.y,
            if visibility[j] { "#c53030" } else { "#2b6cb0" }
        )?;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write(
    path: &Path,
    predictions: &Matrix2xX<f64>,
    visibility: &[bool],
    edges: &[(usize, usize)],
) -> Result<()> {
    let svg = render(predictions, visibility, edges)?;
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
