//! Plain-text PGM (P2) export of attention grids.

use std::fs;
use std::path::{Path, PathBuf};

use crate::aam::{min_max_normalize, AttentionMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write one grid as P2: min-max normalized, scaled to 0..255, one image row
/// per line.
pub fn write_pgm(path: &Path, grid: &Tensor) -> Result<()> {
    if grid.rows() == 0 || grid.cols() == 0 {
        return Err(Error::ShapeMismatch("empty grid".into()));
    }
    if !grid.is_finite() {
        return Err(Error::NonFinite(format!("pgm grid for {}", path.display())));
    }
    let norm = min_max_normalize(grid);
    let mut out = format!("P2\n{} {}\n255\n", grid.cols(), grid.rows());
    for r in 0..grid.rows() {
        let row: Vec<String> = norm
            .row_slice(r)
            .iter()
            .map(|&v| format!("{}", (v * 255.0).round() as u32))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a P2 file back into a [rows x cols] tensor of 0..255 values.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split_whitespace());
    let bad = |msg: &str| Error::ParseError { line: 0, msg: msg.into() };
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut next_int = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| bad(&format!("missing {what}")))?
            .parse()
            .map_err(|_| bad(&format!("bad {what}")))
    };
    let cols = next_int("width")?;
    let rows = next_int("height")?;
    let maxval = next_int("maxval")?;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows * cols {
        t.as_mut_slice()[i] = next_int("pixel")? as f64;
    }
    Ok(t)
}

/// Write `<stem>_head<k>.pgm` per head plus `<stem>_avg.pgm`, reshaping each
/// [1 x N] map to its square grid. Returns the written paths.
pub fn export_attention_maps(dir: &Path, stem: &str, map: &AttentionMap) -> Result<Vec<PathBuf>> {
    let n = map.averaged.cols();
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::ShapeMismatch(format!("{n} patches do not form a square grid")));
    }
    let mut paths = Vec::with_capacity(map.per_head.len() + 1);
    for (k, head) in map.per_head.iter().enumerate() {
        let path = dir.join(format!("{stem}_head{k}.pgm"));
        write_pgm(&path, &head.reshape(&[g, g])?)?;
        paths.push(path);
    }
    let path = dir.join(format!("{stem}_avg.pgm"));
    write_pgm(&path, &map.averaged.reshape(&[g, g])?)?;
    paths.push(path);
    Ok(paths)
}
