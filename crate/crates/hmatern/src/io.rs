//! Location/value CSV ingestion and emission.
//!
//! Format: one row per point, columns x,y[,z][,value]; comma separator, '.'
//! decimal, UTF-8, LF. A header is optional and detected by a non-numeric
//! first row. Values are written with 17 significant digits so they
//! round-trip through f64 exactly.

use crate::error::{Error, Result};
use crate::geometry::PointSet;
use std::io::{BufRead, Write};
use std::path::Path;

/// Which column carries the observation value.
#[derive(Debug, Clone, Default)]
pub enum ValuesCol {
    /// No value column: all columns are coordinates.
    #[default]
    None,
    /// Use the header name "value" if present, else the last column when the
    /// layout requires one.
    Auto,
    /// Explicit column name (header) or zero-based index.
    Named(String),
}

impl ValuesCol {
    pub fn parse(spec: Option<&str>) -> ValuesCol {
        match spec {
            None => ValuesCol::Auto,
            Some(s) => ValuesCol::Named(s.to_string()),
        }
    }
}

#[derive(Debug)]
pub struct LocationData {
    pub points: PointSet,
    pub values: Option<Vec<f64>>,
}

fn is_numeric_row(fields: &[&str]) -> bool {
    !fields.is_empty() && fields.iter().all(|f| f.trim().parse::<f64>().is_ok())
}

/// Read locations (and optionally values) from CSV text.
pub fn read_locations<R: BufRead>(reader: R, values_col: &ValuesCol) -> Result<LocationData> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut header: Option<Vec<String>> = None;
    let mut ncols = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if rows.is_empty() && header.is_none() && !is_numeric_row(&fields) {
            header = Some(fields.iter().map(|f| f.trim().to_ascii_lowercase()).collect());
            ncols = fields.len();
            continue;
        }
        if ncols == 0 {
            ncols = fields.len();
        }
        if fields.len() != ncols {
            return Err(Error::CsvParse {
                line: lineno + 1,
                message: format!("expected {ncols} columns, got {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in &fields {
            row.push(f.trim().parse::<f64>().map_err(|e| Error::CsvParse {
                line: lineno + 1,
                message: format!("{e}: {f:?}"),
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::CsvParse { line: 0, message: "no data rows".into() });
    }

    // resolve the value column
    let value_idx: Option<usize> = match (&header, values_col) {
        (_, ValuesCol::None) => None,
        (Some(h), ValuesCol::Auto) => h.iter().position(|c| c == "value"),
        (None, ValuesCol::Auto) => {
            // x,y,value or x,y,z,value; bare x,y or x,y,z are coordinates only
            if ncols == 4 {
                Some(3)
            } else {
                None
            }
        }
        (h, ValuesCol::Named(name)) => {
            if let Some(h) = h {
                if let Some(idx) = h.iter().position(|c| c == &name.to_ascii_lowercase()) {
                    Some(idx)
                } else if let Ok(idx) = name.parse::<usize>() {
                    Some(idx)
                } else {
                    return Err(Error::CsvParse {
                        line: 1,
                        message: format!("no column named {name:?} in header"),
                    });
                }
            } else {
                match name.parse::<usize>() {
                    Ok(idx) => Some(idx),
                    Err(_) => {
                        return Err(Error::CsvParse {
                            line: 1,
                            message: format!("--values-col {name:?} must be an index when the file has no header"),
                        })
                    }
                }
            }
        }
    };
    if let Some(idx) = value_idx {
        if idx >= ncols {
            return Err(Error::CsvParse {
                line: 1,
                message: format!("value column index {idx} out of range for {ncols} columns"),
            });
        }
    }

    // coordinate columns: named x,y,z when a header is present, otherwise the
    // non-value columns in file order
    let coord_idx: Vec<usize> = if let Some(h) = &header {
        let mut idx = Vec::new();
        for name in ["x", "y", "z"] {
            if let Some(i) = h.iter().position(|c| c == name) {
                idx.push(i);
            }
        }
        if idx.len() < 2 {
            // fall back to positional, skipping the value column
            (0..ncols).filter(|i| Some(*i) != value_idx).collect()
        } else {
            idx
        }
    } else {
        (0..ncols).filter(|i| Some(*i) != value_idx).collect()
    };
    if coord_idx.len() != 2 && coord_idx.len() != 3 {
        return Err(Error::CsvParse {
            line: 1,
            message: format!("need 2 or 3 coordinate columns, found {}", coord_idx.len()),
        });
    }

    let pts: Vec<Vec<f64>> = rows.iter().map(|r| coord_idx.iter().map(|&i| r[i]).collect()).collect();
    let values = value_idx.map(|i| rows.iter().map(|r| r[i]).collect());
    Ok(LocationData { points: PointSet::new(pts)?, values })
}

pub fn read_locations_path(path: &Path, values_col: &ValuesCol) -> Result<LocationData> {
    let file = std::fs::File::open(path)?;
    read_locations(std::io::BufReader::new(file), values_col)
}

/// 17 significant digits: enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Write locations with an optional value column, headered.
pub fn write_locations<W: Write>(mut w: W, points: &PointSet, values: Option<&[f64]>) -> Result<()> {
    let dim = points.dim();
    let mut header: Vec<&str> = vec!["x", "y"];
    if dim == 3 {
        header.push("z");
    }
    if values.is_some() {
        header.push("value");
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..points.len() {
        let p = points.point(i);
        let mut fields: Vec<String> = (0..dim).map(|k| fmt_f64(p[k])).collect();
        if let Some(v) = values {
            fields.push(fmt_f64(v[i]));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headerless_coords_only() {
        let csv = "0.1,0.2\n0.3,0.4\n";
        let d = read_locations(csv.as_bytes(), &ValuesCol::Auto).unwrap();
        assert_eq!(d.points.len(), 2);
        assert_eq!(d.points.dim(), 2);
        assert!(d.values.is_none());
    }

    #[test]
    fn header_with_value() {
        let csv = "x,y,value\n0.1,0.2,7.5\n0.3,0.4,-1.0\n";
        let d = read_locations(csv.as_bytes(), &ValuesCol::Auto).unwrap();
        assert_eq!(d.points.dim(), 2);
        assert_eq!(d.values.as_deref(), Some(&[7.5, -1.0][..]));
    }

    #[test]
    fn headerless_four_columns_is_xyz_value() {
        let csv = "0.1,0.2,0.3,9.0\n0.4,0.5,0.6,8.0\n";
        let d = read_locations(csv.as_bytes(), &ValuesCol::Auto).unwrap();
        assert_eq!(d.points.dim(), 3);
        assert_eq!(d.values.as_deref(), Some(&[9.0, 8.0][..]));
    }

    #[test]
    fn explicit_value_index_on_headerless_three_columns() {
        let csv = "0.1,0.2,9.0\n0.4,0.5,8.0\n";
        let d = read_locations(csv.as_bytes(), &ValuesCol::Named("2".into())).unwrap();
        assert_eq!(d.points.dim(), 2);
        assert_eq!(d.values.as_deref(), Some(&[9.0, 8.0][..]));
        // without the hint, three headerless columns are coordinates
        let d = read_locations(csv.as_bytes(), &ValuesCol::Auto).unwrap();
        assert_eq!(d.points.dim(), 3);
        assert!(d.values.is_none());
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(read_locations("0.1,0.2\n0.3\n".as_bytes(), &ValuesCol::Auto).is_err());
        assert!(read_locations("a,b\nc,d\n".as_bytes(), &ValuesCol::Auto).is_err());
        assert!(read_locations("".as_bytes(), &ValuesCol::Auto).is_err());
    }

    #[test]
    fn roundtrip_17_digits() {
        let mut ps = crate::geometry::generate_perturbed_mesh(5, 0.4, 3).unwrap();
        crate::geometry::build_cluster_tree(&mut ps, 8).unwrap();
        let vals: Vec<f64> = (0..ps.len()).map(|i| (i as f64 * 0.7).sin() * 1e-3).collect();
        let mut buf = Vec::new();
        write_locations(&mut buf, &ps, Some(&vals)).unwrap();
        let d = read_locations(buf.as_slice(), &ValuesCol::Auto).unwrap();
        for i in 0..ps.len() {
            assert_eq!(d.points.point(i), ps.point(i));
            assert_eq!(d.values.as_ref().unwrap()[i], vals[i]);
        }
    }
}
