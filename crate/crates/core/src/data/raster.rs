use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Regular north-up elevation raster (ESRI ASCII grid layout: row 0 is the
/// northern edge).
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainGrid {
    pub ncols: usize,
    pub nrows: usize,
    /// Lower-left corner of the lower-left cell, metres.
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl TerrainGrid {
    pub fn new(ncols: usize, nrows: usize, xll: f64, yll: f64, cellsize: f64, nodata: f64, values: Vec<f64>) -> Result<Self> {
        if ncols == 0 || nrows == 0 || !(cellsize > 0.0) {
            return Err(Error::Raster(format!("invalid dimensions {ncols}x{nrows}, cellsize {cellsize}")));
        }
        if values.len() != ncols * nrows {
            return Err(Error::LengthMismatch {
                expected: ncols * nrows,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() && *v != nodata) {
            return Err(Error::Raster("non-finite cell value".into()));
        }
        Ok(Self {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata,
            values,
        })
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || !v.is_finite()
    }

    pub fn x_max(&self) -> f64 {
        self.xll + self.ncols as f64 * self.cellsize
    }

    pub fn y_max(&self) -> f64 {
        self.yll + self.nrows as f64 * self.cellsize
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xll && x <= self.x_max() && y >= self.yll && y <= self.y_max()
    }

    /// Centre of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.y_max() - (row as f64 + 0.5) * self.cellsize,
        )
    }

    /// Mean and standard deviation of the valid cells.
    pub fn valid_stats(&self) -> Option<(f64, f64)> {
        let valid: Vec<f64> = self.values.iter().copied().filter(|v| !self.is_nodata(*v)).collect();
        if valid.is_empty() {
            return None;
        }
        let n = valid.len() as f64;
        let mean = valid.iter().sum::<f64>() / n;
        let var = valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    /// Bilinear blend of the four cell centres surrounding `(x, y)`. Within
    /// half a cell of the outer edge the nearest edge centres are used.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Result<f64> {
        if !self.contains(x, y) {
            return Err(Error::OutOfBounds { x, y });
        }
        let fx = ((x - self.xll) / self.cellsize - 0.5).clamp(0.0, (self.ncols - 1) as f64);
        let fy = ((self.y_max() - y) / self.cellsize - 0.5).clamp(0.0, (self.nrows - 1) as f64);
        let c0 = (fx.floor() as usize).min(self.ncols.saturating_sub(2));
        let r0 = (fy.floor() as usize).min(self.nrows.saturating_sub(2));
        let tx = fx - c0 as f64;
        let ty = fy - r0 as f64;
        let c1 = (c0 + 1).min(self.ncols - 1);
        let r1 = (r0 + 1).min(self.nrows - 1);
        let taps = [
            (c0, r0, (1.0 - tx) * (1.0 - ty)),
            (c1, r0, tx * (1.0 - ty)),
            (c0, r1, (1.0 - tx) * ty),
            (c1, r1, tx * ty),
        ];
        let mut acc = 0.0;
        for (c, r, w) in taps {
            if w == 0.0 {
                continue;
            }
            let v = self.get(c, r);
            if self.is_nodata(v) {
                return Err(Error::NoData { x, y });
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

/// Square elevation image centred on a query point. Row 0 is north.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    /// Metres between samples.
    pub cell: f64,
    pub values: Vec<f64>,
}

impl Patch {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.size + col]
    }
}

/// Samples a `size`×`size` lattice at `cell` spacing centred on the query.
/// Samples outside the raster or on nodata are filled with 0 m.
pub fn extract_patch(grid: &TerrainGrid, center_x: f64, center_y: f64, size: usize, cell: f64) -> Patch {
    let half = (size as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(size * size);
    for row in 0..size {
        let y = center_y + (half - row as f64) * cell;
        for col in 0..size {
            let x = center_x + (col as f64 - half) * cell;
            values.push(grid.bilinear_sample(x, y).unwrap_or(0.0));
        }
    }
    Patch { size, cell, values }
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<TerrainGrid> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ascii_grid(std::io::BufReader::new(f))
}

/// Parses an ESRI ASCII grid: `ncols`, `nrows`, `xllcorner|xllcenter`,
/// `yllcorner|yllcenter`, `cellsize`, optional `NODATA_value`, then
/// whitespace-separated rows from north to south.
pub fn parse_ascii_grid<R: BufRead>(reader: R) -> Result<TerrainGrid> {
    let mut ncols = None;
    let mut nrows = None;
    let mut x = None;
    let mut y = None;
    let mut x_center = false;
    let mut y_center = false;
    let mut cellsize = None;
    let mut nodata = -9999.0;
    let mut values = Vec::new();
    let mut in_header = true;

    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<grid>", e))?;
        let mut tokens = line.split_whitespace().peekable();
        let Some(first) = tokens.peek().copied() else { continue };
        if in_header && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            let key = first.to_ascii_lowercase();
            tokens.next();
            let val = tokens.next().ok_or_else(|| Error::Raster(format!("header `{key}` has no value")))?;
            let num: f64 = val.parse().map_err(|_| Error::Raster(format!("header `{key}` value `{val}`")))?;
            match key.as_str() {
                "ncols" => ncols = Some(num as usize),
                "nrows" => nrows = Some(num as usize),
                "xllcorner" => x = Some(num),
                "yllcorner" => y = Some(num),
                "xllcenter" => {
                    x = Some(num);
                    x_center = true;
                }
                "yllcenter" => {
                    y = Some(num);
                    y_center = true;
                }
                "cellsize" => cellsize = Some(num),
                "nodata_value" => nodata = num,
                other => return Err(Error::Raster(format!("unknown header key `{other}`"))),
            }
            continue;
        }
        in_header = false;
        for t in tokens {
            values.push(t.parse::<f64>().map_err(|_| Error::Raster(format!("bad cell value `{t}`")))?);
        }
    }

    let missing = |k: &str| Error::Raster(format!("missing header `{k}`"));
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
    let mut xll = x.ok_or_else(|| missing("xllcorner"))?;
    let mut yll = y.ok_or_else(|| missing("yllcorner"))?;
    if x_center {
        xll -= cellsize / 2.0;
    }
    if y_center {
        yll -= cellsize / 2.0;
    }
    TerrainGrid::new(ncols, nrows, xll, yll, cellsize, nodata, values)
}

pub fn write_ascii_grid<W: Write>(grid: &TerrainGrid, mut w: W) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "ncols {}", grid.ncols);
    let _ = writeln!(s, "nrows {}", grid.nrows);
    let _ = writeln!(s, "xllcorner {}", grid.xll);
    let _ = writeln!(s, "yllcorner {}", grid.yll);
    let _ = writeln!(s, "cellsize {}", grid.cellsize);
    let _ = writeln!(s, "NODATA_value {}", grid.nodata);
    for row in grid.values.chunks(grid.ncols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    w.write_all(s.as_bytes()).map_err(|e| Error::io("<grid>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(a: f64, b: f64, c: f64) -> TerrainGrid {
        // 200 x 150 cells of 100 m; value is linear in the cell-centre coordinates.
        let (ncols, nrows, cs) = (200, 150, 100.0);
        let mut g = TerrainGrid::new(ncols, nrows, 1000.0, 5000.0, cs, -9999.0, vec![0.0; ncols * nrows]).unwrap();
        for r in 0..nrows {
            for col in 0..ncols {
                let (x, y) = g.cell_center(col, r);
                g.values[r * ncols + col] = a * x + b * y + c;
            }
        }
        g
    }

    #[test]
    fn bilinear_examples() {
        let g = TerrainGrid::new(2, 1, 0.0, 0.0, 10.0, -9999.0, vec![100.0, 200.0]).unwrap();
        assert_eq!(g.bilinear_sample(5.0, 5.0).unwrap(), 100.0);
        assert_eq!(g.bilinear_sample(15.0, 5.0).unwrap(), 200.0);
        assert_eq!(g.bilinear_sample(10.0, 5.0).unwrap(), 150.0);
        let c = TerrainGrid::new(4, 3, 0.0, 0.0, 10.0, -9999.0, vec![42.0; 12]).unwrap();
        for (x, y) in [(0.0, 0.0), (13.3, 27.1), (40.0, 30.0)] {
            assert_eq!(c.bilinear_sample(x, y).unwrap(), 42.0);
        }
        assert!(matches!(c.bilinear_sample(-1.0, 5.0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn nodata_neighbour_is_reported() {
        let g = TerrainGrid::new(2, 1, 0.0, 0.0, 10.0, -9999.0, vec![100.0, -9999.0]).unwrap();
        assert_eq!(g.bilinear_sample(5.0, 5.0).unwrap(), 100.0);
        assert!(matches!(g.bilinear_sample(10.0, 5.0), Err(Error::NoData { .. })));
    }

    #[test]
    fn patch_of_constant_grid() {
        let g = TerrainGrid::new(100, 100, 0.0, 0.0, 500.0, -9999.0, vec![100.0; 10_000]).unwrap();
        let p = extract_patch(&g, 25_000.0, 25_000.0, 32, 500.0);
        assert_eq!(p.values.len(), 1024);
        assert!(p.values.iter().all(|v| *v == 100.0));
    }

    #[test]
    fn patch_far_offshore_is_sea_level() {
        let g = TerrainGrid::new(10, 10, 0.0, 0.0, 500.0, -9999.0, vec![300.0; 100]).unwrap();
        let p = extract_patch(&g, -1e6, -1e6, 32, 500.0);
        assert!(p.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn patch_of_linear_ramp_is_the_ramp() {
        let (a, b, c) = (0.01, -0.02, 250.0);
        let g = ramp(a, b, c);
        let (cx, cy) = (11_000.0, 12_000.0);
        let p = extract_patch(&g, cx, cy, 32, 500.0);
        for row in 0..32 {
            for col in 0..32 {
                let x = cx + (col as f64 - 15.5) * 500.0;
                let y = cy + (15.5 - row as f64) * 500.0;
                let expected = if g.contains(x, y) { a * x + b * y + c } else { 0.0 };
                assert!((p.get(col, row) - expected).abs() < 1e-9, "{col},{row}");
            }
        }
    }

    #[test]
    fn ascii_grid_round_trip_and_center_header() {
        let g = TerrainGrid::new(3, 2, 100.0, 200.0, 50.0, -9999.0, vec![1.0, 2.5, -3.0, -9999.0, 0.0, 1e6]).unwrap();
        let mut buf = Vec::new();
        write_ascii_grid(&g, &mut buf).unwrap();
        let back = parse_ascii_grid(buf.as_slice()).unwrap();
        assert_eq!(back, g);
        let centered = "NCOLS 2\nNROWS 1\nXLLCENTER 25\nYLLCENTER 25\nCELLSIZE 50\n7 8\n";
        let c = parse_ascii_grid(centered.as_bytes()).unwrap();
        assert_eq!((c.xll, c.yll, c.nodata), (0.0, 0.0, -9999.0));
        assert!(parse_ascii_grid("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn patch_translation_consistency(cx in 9_000.0f64..12_000.0, cy in 9_000.0f64..10_000.0, dir in 0usize..4) {
            let g = ramp(0.003, 0.007, 10.0);
            let (dx, dy, dcol, drow): (f64, f64, isize, isize) = [(500.0, 0.0, 1, 0), (-500.0, 0.0, -1, 0), (0.0, 500.0, 0, -1), (0.0, -500.0, 0, 1)][dir];
            let a = extract_patch(&g, cx, cy, 32, 500.0);
            let b = extract_patch(&g, cx + dx, cy + dy, 32, 500.0);
            for row in 2..30isize {
                for col in 2..30isize {
                    let x = cx + (col as f64 - 15.5) * 500.0;
                    let y = cy + (15.5 - row as f64) * 500.0;
                    let (xs, ys) = (x + dx, y + dy);
                    if !g.contains(x, y) || !g.contains(xs, ys) { continue; }
                    let shifted = a.get((col + dcol) as usize, (row + drow) as usize);
                    let moved = b.get(col as usize, row as usize);
                    prop_assert!((shifted - moved).abs() <= 1e-9);
                }
            }
        }
    }
}
