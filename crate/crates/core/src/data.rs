//! Domain types and dataset ingestion.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane. Longitude/latitude degrees are treated as planar
/// coordinates; no great-circle geometry anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lon: f64,
    pub lat: f64,
}

impl Location {
    pub fn new(lon: f64, lat: f64) -> Self {
        Location { lon, lat }
    }

    pub fn dist(&self, other: &Location) -> f64 {
        let dx = self.lon - other.lon;
        let dy = self.lat - other.lat;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Observation locations with (optionally log-scale) response values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialDataset {
    pub locations: Vec<Location>,
    pub values: Vec<f64>,
    pub ids: Option<Vec<String>>,
}

impl SpatialDataset {
    /// Build a dataset, enforcing the structural invariants: equal lengths,
    /// nonempty, finite values, no exactly duplicated locations.
    pub fn new(
        locations: Vec<Location>,
        values: Vec<f64>,
        ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::EmptyDataset("no observations".into()));
        }
        if locations.len() != values.len() {
            return Err(Error::EmptyDataset(format!(
                "{} locations but {} values",
                locations.len(),
                values.len()
            )));
        }
        for (i, (loc, v)) in locations.iter().zip(&values).enumerate() {
            if !loc.lon.is_finite() || !loc.lat.is_finite() || !v.is_finite() {
                return Err(Error::NonFinite { row: i });
            }
        }
        check_duplicates(&locations)?;
        Ok(SpatialDataset {
            locations,
            values,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Dataset restricted to the given row indices (order preserved).
    pub fn subset(&self, idx: &[usize]) -> SpatialDataset {
        SpatialDataset {
            locations: idx.iter().map(|&i| self.locations[i]).collect(),
            values: idx.iter().map(|&i| self.values[i]).collect(),
            ids: self
                .ids
                .as_ref()
                .map(|ids| idx.iter().map(|&i| ids[i].clone()).collect()),
        }
    }

    /// Axis-aligned bounding box as ((min_lon, min_lat), (max_lon, max_lat)).
    pub fn bounding_box(&self) -> (Location, Location) {
        bounding_box(&self.locations)
    }
}

pub fn bounding_box(locations: &[Location]) -> (Location, Location) {
    let mut lo = Location::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Location::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for l in locations {
        lo.lon = lo.lon.min(l.lon);
        lo.lat = lo.lat.min(l.lat);
        hi.lon = hi.lon.max(l.lon);
        hi.lat = hi.lat.max(l.lat);
    }
    (lo, hi)
}

fn check_duplicates(locations: &[Location]) -> Result<()> {
    let mut seen: HashMap<(u64, u64), usize> = HashMap::with_capacity(locations.len());
    for (i, loc) in locations.iter().enumerate() {
        let key = (loc.lon.to_bits(), loc.lat.to_bits());
        if let Some(&first) = seen.get(&key) {
            return Err(Error::DuplicateLocation {
                first,
                second: i,
                lon: loc.lon,
                lat: loc.lat,
            });
        }
        seen.insert(key, i);
    }
    Ok(())
}

/// Per-location categorical covariates with missingness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateTable {
    pub locations: Vec<Location>,
    /// One entry per location; inner vector parallels the category columns.
    pub categories: Vec<Vec<Option<String>>>,
    pub column_names: Vec<String>,
}

impl CovariateTable {
    /// Locations where every category is observed.
    pub fn complete_case_locations(&self) -> Vec<Location> {
        self.locations
            .iter()
            .zip(&self.categories)
            .filter(|(_, cats)| cats.iter().all(|c| c.is_some()))
            .map(|(loc, _)| *loc)
            .collect()
    }
}

/// Read an observation CSV with header `lon,lat,<value_column>[,id]`.
///
/// With `log_transform` set, values must be strictly positive and are
/// mapped to the natural-log scale. Row order is preserved.
pub fn load_observations(
    path: impl AsRef<Path>,
    value_column: &str,
    log_transform: bool,
) -> Result<SpatialDataset> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| csv_error(&path_str, e))?;

    let headers = reader
        .headers()
        .map_err(|e| csv_error(&path_str, e))?
        .clone();
    let lon_idx = column_index(&headers, "lon", &path_str)?;
    let lat_idx = column_index(&headers, "lat", &path_str)?;
    let val_idx = column_index(&headers, value_column, &path_str)?;
    let id_idx = headers.iter().position(|h| h == "id");

    let mut locations = Vec::new();
    let mut values = Vec::new();
    let mut ids = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(&path_str, e))?;
        let lon = parse_field(&record, lon_idx, "lon", row, &path_str)?;
        let lat = parse_field(&record, lat_idx, "lat", row, &path_str)?;
        let raw = parse_field(&record, val_idx, value_column, row, &path_str)?;
        let value = if log_transform {
            if raw <= 0.0 {
                return Err(Error::NonPositiveUnderLog { row, value: raw });
            }
            raw.ln()
        } else {
            raw
        };
        locations.push(Location::new(lon, lat));
        values.push(value);
        if let Some(idx) = id_idx {
            ids.push(record.get(idx).unwrap_or("").to_string());
        }
    }

    SpatialDataset::new(locations, values, if id_idx.is_some() { Some(ids) } else { None })
}

/// Read a covariate CSV with header `lon,lat,<cat1>,<cat2>,...`.
/// Empty fields are missing values.
pub fn load_covariates(
    path: impl AsRef<Path>,
    category_columns: &[String],
) -> Result<CovariateTable> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| csv_error(&path_str, e))?;

    let headers = reader
        .headers()
        .map_err(|e| csv_error(&path_str, e))?
        .clone();
    let lon_idx = column_index(&headers, "lon", &path_str)?;
    let lat_idx = column_index(&headers, "lat", &path_str)?;
    let cat_idx: Vec<usize> = category_columns
        .iter()
        .map(|c| column_index(&headers, c, &path_str))
        .collect::<Result<_>>()?;

    let mut locations = Vec::new();
    let mut categories = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(&path_str, e))?;
        let lon = parse_field(&record, lon_idx, "lon", row, &path_str)?;
        let lat = parse_field(&record, lat_idx, "lat", row, &path_str)?;
        let cats: Vec<Option<String>> = cat_idx
            .iter()
            .map(|&i| {
                let field = record.get(i).unwrap_or("").trim();
                if field.is_empty() {
                    None
                } else {
                    Some(field.to_string())
                }
            })
            .collect();
        locations.push(Location::new(lon, lat));
        categories.push(cats);
    }

    let table = CovariateTable {
        locations,
        categories,
        column_names: category_columns.to_vec(),
    };
    if table.complete_case_locations().is_empty() {
        return Err(Error::NoCompleteCases);
    }
    Ok(table)
}

/// Write a dataset back to CSV. Numeric fields carry 17 significant digits
/// so a load/write round trip reproduces every f64 bit-exactly.
pub fn write_observations(
    path: impl AsRef<Path>,
    data: &SpatialDataset,
    value_column: &str,
) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    let mut writer = csv::Writer::from_path(path.as_ref()).map_err(|e| csv_error(&path_str, e))?;
    let has_ids = data.ids.is_some();
    let header: Vec<&str> = if has_ids {
        vec!["lon", "lat", value_column, "id"]
    } else {
        vec!["lon", "lat", value_column]
    };
    writer
        .write_record(&header)
        .map_err(|e| csv_error(&path_str, e))?;
    for i in 0..data.len() {
        let mut rec = vec![
            format_f64(data.locations[i].lon),
            format_f64(data.locations[i].lat),
            format_f64(data.values[i]),
        ];
        if let Some(ids) = &data.ids {
            rec.push(ids[i].clone());
        }
        writer
            .write_record(&rec)
            .map_err(|e| csv_error(&path_str, e))?;
    }
    writer.flush().map_err(|e| Error::Io {
        path: path_str,
        source: e,
    })?;
    Ok(())
}

/// 17 significant digits: enough to round-trip any f64.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_string(),
            column: name.to_string(),
        })
}

fn parse_field(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    row: usize,
    path: &str,
) -> Result<f64> {
    let field = record.get(idx).unwrap_or("");
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_error(record, idx, column, row, path))
}

fn parse_error(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    row: usize,
    path: &str,
) -> Error {
    Error::NonNumeric {
        path: path.to_string(),
        column: column.to_string(),
        row,
        value: record.get(idx).unwrap_or("").to_string(),
    }
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_string(),
        source: e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_applies_log_transform() {
        let f = write_tmp("lon,lat,soc\n-85.0,42.0,100.0\n");
        let d = load_observations(f.path(), "soc", true).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.values[0] - 100.0_f64.ln()).abs() < 1e-12);
        assert!((d.values[0] - 4.605170185988092).abs() < 1e-12);
    }

    #[test]
    fn load_without_transform_keeps_raw() {
        let f = write_tmp("lon,lat,soc\n-85.0,42.0,100.0\n");
        let d = load_observations(f.path(), "soc", false).unwrap();
        assert_eq!(d.values[0], 100.0);
    }

    #[test]
    fn zero_value_under_log_names_row() {
        let f = write_tmp("lon,lat,soc\n-85.0,42.0,3.0\n-84.0,41.0,0.0\n");
        let err = load_observations(f.path(), "soc", true).unwrap_err();
        match err {
            Error::NonPositiveUnderLog { row, value } => {
                assert_eq!(row, 1);
                assert_eq!(value, 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let f = write_tmp("lon,lat,soc\n-85.0,42.0,3.0\n");
        let err = load_observations(f.path(), "carbon", true).unwrap_err();
        assert!(matches!(err, Error::MissingColumn { .. }));
    }

    #[test]
    fn non_numeric_cell_is_reported() {
        let f = write_tmp("lon,lat,soc\n-85.0,42.0,abc\n");
        let err = load_observations(f.path(), "soc", false).unwrap_err();
        match err {
            Error::NonNumeric { row, value, .. } => {
                assert_eq!(row, 0);
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_locations_rejected_with_rows() {
        let f = write_tmp("lon,lat,soc\n-85.0,42.0,1.0\n-84.0,41.0,2.0\n-85.0,42.0,3.0\n");
        let err = load_observations(f.path(), "soc", false).unwrap_err();
        match err {
            Error::DuplicateLocation { first, second, .. } => {
                assert_eq!((first, second), (0, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn covariates_preserve_missingness() {
        let f = write_tmp("lon,lat,landuse,drainage\n-85,42,cropland,WD\n-85,43,,WD\n");
        let cols = vec!["landuse".to_string(), "drainage".to_string()];
        let t = load_covariates(f.path(), &cols).unwrap();
        assert_eq!(t.locations.len(), 2);
        assert_eq!(t.categories[0][0].as_deref(), Some("cropland"));
        assert!(t.categories[1][0].is_none());
        assert_eq!(t.complete_case_locations().len(), 1);
    }

    #[test]
    fn all_missing_covariates_rejected() {
        let f = write_tmp("lon,lat,landuse,drainage\n-85,42,,WD\n-85,43,cropland,\n");
        let cols = vec!["landuse".to_string(), "drainage".to_string()];
        let err = load_covariates(f.path(), &cols).unwrap_err();
        assert!(matches!(err, Error::NoCompleteCases));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = write_tmp("lon,lat,soc\n-85.123456789012345,42.0,97.3\n-84.0,41.5,12.25\n");
        let d = load_observations(f.path(), "soc", true).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_observations(out.path(), &d, "soc").unwrap();
        let d2 = load_observations(out.path(), "soc", false).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.values[i].to_bits(), d2.values[i].to_bits());
            assert_eq!(d.locations[i].lon.to_bits(), d2.locations[i].lon.to_bits());
            assert_eq!(d.locations[i].lat.to_bits(), d2.locations[i].lat.to_bits());
        }
    }

    #[test]
    fn ingestion_is_pure() {
        let f = write_tmp("lon,lat,soc\n-85.0,42.0,100.0\n-84.0,41.0,7.0\n");
        let a = load_observations(f.path(), "soc", true).unwrap();
        let b = load_observations(f.path(), "soc", true).unwrap();
        assert_eq!(a.values, b.values);
    }
}
