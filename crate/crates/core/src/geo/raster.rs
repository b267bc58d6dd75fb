//! ESRI ASCII grids and area-weighted square averaging.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::fmt_f64;

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Regular grid with row 0 at the north edge.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    ncols: usize,
    nrows: usize,
    xll: f64,
    yll: f64,
    cellsize: f64,
    nodata: f64,
    values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        nodata: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if ncols == 0 || nrows == 0 {
            return Err(Error::Raster("grid must have at least one row and column".into()));
        }
        if !(cellsize > 0.0 && cellsize.is_finite()) {
            return Err(Error::Raster(format!("cellsize must be positive, got {cellsize}")));
        }
        if !xll.is_finite() || !yll.is_finite() || nodata.is_nan() {
            return Err(Error::Raster("grid origin and nodata value must be finite".into()));
        }
        if values.len() != ncols * nrows {
            return Err(Error::LengthMismatch {
                expected: ncols * nrows,
                found: values.len(),
            });
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

    /// Grid with the same geometry filled from `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.ncols, self.nrows, self.xll, self.yll, self.cellsize, self.nodata, values)
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn xll(&self) -> f64 {
        self.xll
    }

    pub fn yll(&self) -> f64 {
        self.yll
    }

    pub fn cellsize(&self) -> f64 {
        self.cellsize
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || v == self.nodata
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + (self.nrows as f64 - row as f64 - 0.5) * self.cellsize,
        )
    }

    /// (xmin, ymin, xmax, ymax)
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.xll,
            self.yll,
            self.xll + self.ncols as f64 * self.cellsize,
            self.yll + self.nrows as f64 * self.cellsize,
        )
    }

    pub fn same_grid(&self, other: &RasterGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
    }

    pub fn read_ascii(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file).map_err(|e| match e {
            Error::Raster(m) => Error::Raster(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let mut header: Vec<(String, f64)> = Vec::new();
        let mut first_data: Option<String> = None;
        for line in lines.by_ref() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let key = parts.next().unwrap_or("");
            if key.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                let value = parts
                    .next()
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Raster(format!("bad header line `{trimmed}`")))?;
                header.push((key.to_ascii_lowercase(), value));
            } else {
                first_data = Some(line);
                break;
            }
        }
        let get = |k: &str| header.iter().find(|(h, _)| h == k).map(|(_, v)| *v);
        let count = |k: &str| -> Result<usize> {
            let v = get(k).ok_or_else(|| Error::Raster(format!("missing header `{k}`")))?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Raster(format!("`{k}` must be a positive integer")));
            }
            Ok(v as usize)
        };
        let ncols = count("ncols")?;
        let nrows = count("nrows")?;
        let cellsize = get("cellsize").ok_or_else(|| Error::Raster("missing header `cellsize`".into()))?;
        let corner = |corner_key: &str, center_key: &str| -> Result<f64> {
            match (get(corner_key), get(center_key)) {
                (Some(v), _) => Ok(v),
                (None, Some(v)) => Ok(v - cellsize / 2.0),
                _ => Err(Error::Raster(format!("missing header `{corner_key}`"))),
            }
        };
        let xll = corner("xllcorner", "xllcenter")?;
        let yll = corner("yllcorner", "yllcenter")?;
        let nodata = get("nodata_value").unwrap_or(DEFAULT_NODATA);
        let mut values = Vec::with_capacity(ncols * nrows);
        let mut push_line = |line: &str| -> Result<()> {
            for tok in line.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::Raster(format!("bad cell value `{tok}`")))?,
                );
            }
            Ok(())
        };
        if let Some(line) = first_data {
            push_line(&line)?;
        }
        for line in lines {
            push_line(&line?)?;
        }
        if values.len() != ncols * nrows {
            return Err(Error::Raster(format!(
                "expected {} cell values, found {}",
                ncols * nrows,
                values.len()
            )));
        }
        Self::new(ncols, nrows, xll, yll, cellsize, nodata, values)
    }

    pub fn write_ascii(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "ncols {}", self.ncols)?;
        writeln!(w, "nrows {}", self.nrows)?;
        writeln!(w, "xllcorner {}", fmt_f64(self.xll))?;
        writeln!(w, "yllcorner {}", fmt_f64(self.yll))?;
        writeln!(w, "cellsize {}", fmt_f64(self.cellsize))?;
        writeln!(w, "NODATA_value {}", fmt_f64(self.nodata))?;
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Pixels intersecting the square and their intersection areas.
pub fn square_overlaps(r: &RasterGrid, center: (f64, f64), side: f64) -> Vec<(usize, usize, f64)> {
    let h = side / 2.0;
    let (x0, x1, y0, y1) = (center.0 - h, center.0 + h, center.1 - h, center.1 + h);
    let (gx0, gy0, gx1, gy1) = r.extent();
    let cs = r.cellsize();
    if x1 <= gx0 || x0 >= gx1 || y1 <= gy0 || y0 >= gy1 {
        return Vec::new();
    }
    let col_lo = ((x0 - gx0) / cs).floor().max(0.0) as usize;
    let col_hi = (((x1 - gx0) / cs).ceil() as usize).min(r.ncols());
    let row_lo = ((gy1 - y1) / cs).floor().max(0.0) as usize;
    let row_hi = (((gy1 - y0) / cs).ceil() as usize).min(r.nrows());
    let mut out = Vec::new();
    for row in row_lo..row_hi {
        let top = gy1 - row as f64 * cs;
        let dy = overlap(top - cs, top, y0, y1);
        if dy == 0.0 {
            continue;
        }
        for col in col_lo..col_hi {
            let left = gx0 + col as f64 * cs;
            let dx = overlap(left, left + cs, x0, x1);
            if dx > 0.0 {
                out.push((row, col, dx * dy));
            }
        }
    }
    out
}

/// Area-weighted mean of the pixels intersecting an axis-aligned square.
pub fn raster_to_square_mean(r: &RasterGrid, center: (f64, f64), side: f64) -> Result<f64> {
    if !(side > 0.0) {
        return Err(Error::Raster(format!("square side must be positive, got {side}")));
    }
    let cells = square_overlaps(r, center, side);
    if cells.is_empty() {
        return Err(Error::Raster(format!(
            "square at ({}, {}) does not intersect the raster",
            center.0, center.1
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, col, area) in cells {
        let v = r.get(row, col);
        if r.is_nodata(v) {
            return Err(Error::Raster(format!(
                "square at ({}, {}) covers nodata pixel (row {row}, col {col})",
                center.0, center.1
            )));
        }
        num += v * area;
        den += area;
    }
    Ok(num / den)
}
