//! Plain-text field-series files.
//!
//! ```text
//! #FSV 1
//! #GRID n_lat n_lon lat0 lon0 d_lat d_lon relaxation_width
//! #MASK
//! 0110...          (n_lat rows of 0/1, one char per column)
//! #STEP <label>
//! v,v,v,...        (n_lat rows of n_lon comma-separated values)
//! ```
//!
//! Values are printed with 17 significant digits so a write/read cycle is
//! lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Field, FieldSeries, GridGeometry, GridSpec};

pub const FSV_VERSION: u32 = 1;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_string(series: &FieldSeries) -> String {
    let grid = series.grid();
    let g = grid.geometry();
    let mut out = String::new();
    let _ = writeln!(out, "#FSV {FSV_VERSION}");
    let _ = writeln!(
        out,
        "#GRID {} {} {} {} {} {} {}",
        g.n_lat, g.n_lon, g.lat0, g.lon0, g.d_lat, g.d_lon, g.relaxation_width
    );
    out.push_str("#MASK\n");
    for row in grid.land_mask().chunks(g.n_lon) {
        out.extend(row.iter().map(|&l| if l { '1' } else { '0' }));
        out.push('\n');
    }
    for (field, label) in series.steps().iter().zip(series.labels()) {
        let _ = writeln!(out, "#STEP {label}");
        for row in field.values().chunks(g.n_lon) {
            let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
    }
    out
}

pub fn write(path: impl AsRef<Path>, series: &FieldSeries) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_string(series)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<FieldSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

/// Parses FSV text; `source` names the input in error messages.
pub fn parse(text: &str, source: &str) -> Result<FieldSeries> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let err = |line: usize, msg: String| Error::format(source, line, msg);

    let (n, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let version = first
        .strip_prefix("#FSV ")
        .ok_or_else(|| err(n, "expected '#FSV <version>' header".into()))?;
    if version.trim() != FSV_VERSION.to_string() {
        return Err(err(
            n,
            format!("unsupported FSV version '{}'", version.trim()),
        ));
    }

    let (n, grid_line) = lines
        .next()
        .ok_or_else(|| err(2, "missing #GRID line".into()))?;
    let geometry = parse_grid_line(grid_line).map_err(|m| err(n, m))?;
    geometry.validate().map_err(|e| err(n, e.to_string()))?;

    let (n, mask_line) = lines
        .next()
        .ok_or_else(|| err(3, "missing #MASK line".into()))?;
    if mask_line.trim_end() != "#MASK" {
        return Err(err(n, "expected '#MASK'".into()));
    }
    let mut mask = Vec::with_capacity(geometry.n_cells());
    for _ in 0..geometry.n_lat {
        let (n, row) = lines
            .next()
            .ok_or_else(|| err(n + 1, "truncated mask".into()))?;
        let row = row.trim_end();
        if row.len() != geometry.n_lon {
            return Err(err(
                n,
                format!(
                    "mask row has {} entries, expected {}",
                    row.len(),
                    geometry.n_lon
                ),
            ));
        }
        for ch in row.chars() {
            mask.push(match ch {
                '1' => true,
                '0' => false,
                other => return Err(err(n, format!("invalid mask character '{other}'"))),
            });
        }
    }
    let grid = Arc::new(GridSpec::new(geometry, mask).map_err(|e| err(3, e.to_string()))?);
    let (n_lat, n_lon) = (grid.n_lat(), grid.n_lon());

    let mut steps = Vec::new();
    let mut labels = Vec::new();
    let mut last_line = 3 + n_lat;
    while let Some((n, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let label = line
            .strip_prefix("#STEP ")
            .ok_or_else(|| err(n, "expected '#STEP <label>'".into()))?;
        let mut values = Vec::with_capacity(n_lat * n_lon);
        for _ in 0..n_lat {
            let (n, row) = lines
                .next()
                .ok_or_else(|| err(n + 1, format!("truncated step '{label}'")))?;
            let before = values.len();
            for tok in row.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| err(n, format!("invalid number '{}'", tok.trim())))?;
                values.push(v);
            }
            if values.len() - before != n_lon {
                return Err(err(
                    n,
                    format!("row has {} values, expected {n_lon}", values.len() - before),
                ));
            }
            last_line = n;
        }
        let field = Field::new(grid.clone(), values).map_err(|e| err(n, e.to_string()))?;
        steps.push(field);
        labels.push(label.to_string());
    }
    if steps.is_empty() {
        return Err(err(last_line, "no #STEP blocks".into()));
    }
    FieldSeries::new(grid, steps, labels)
}

fn parse_grid_line(line: &str) -> std::result::Result<GridGeometry, String> {
    let rest = line.strip_prefix("#GRID ").ok_or_else(|| {
        "expected '#GRID n_lat n_lon lat0 lon0 d_lat d_lon relaxation_width'".to_string()
    })?;
    let toks: Vec<&str> = rest.split_whitespace().collect();
    if toks.len() != 7 {
        return Err(format!("#GRID needs 7 values, found {}", toks.len()));
    }
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("invalid integer '{s}' in #GRID"))
    };
    let float = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| format!("invalid number '{s}' in #GRID"))
    };
    Ok(GridGeometry {
        n_lat: int(toks[0])?,
        n_lon: int(toks[1])?,
        lat0: float(toks[2])?,
        lon0: float(toks[3])?,
        d_lat: float(toks[4])?,
        d_lon: float(toks[5])?,
        relaxation_width: int(toks[6])?,
    })
}
