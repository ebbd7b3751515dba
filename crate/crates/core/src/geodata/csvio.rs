//! CSV form of a dataset: header `location_id,x,y,f_1,...,f_d,label`, one row
//! per data point. Split files use `location_id,region`.

use super::{DataError, GeoDataset, Location, LocationId, ProblemKind, Region};
use crate::diffengine::Tensor;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        kind => DataError::Csv {
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn check_header(header: &csv::StringRecord) -> Result<usize, DataError> {
    let cols: Vec<&str> = header.iter().collect();
    let bad = |message: String| DataError::Csv { line: 1, message };
    if cols.len() < 5 {
        return Err(bad(format!(
            "header needs location_id, x, y, at least one feature and label; found {cols:?}"
        )));
    }
    for (i, want) in ["location_id", "x", "y"].into_iter().enumerate() {
        if cols[i] != want {
            return Err(bad(format!("column {} should be {want:?}, found {:?}", i + 1, cols[i])));
        }
    }
    if cols[cols.len() - 1] != "label" {
        return Err(bad(format!("last column should be \"label\", found {:?}", cols[cols.len() - 1])));
    }
    let d = cols.len() - 4;
    for (k, name) in cols[3..3 + d].iter().enumerate() {
        if *name != format!("f_{}", k + 1) {
            return Err(bad(format!("unknown column {name:?}, expected \"f_{}\"", k + 1)));
        }
    }
    Ok(d)
}

/// Parses a dataset from CSV text. Locations are ordered by first appearance
/// and samples keep file order.
pub fn read_csv<R: Read>(reader: R, kind: ProblemKind) -> Result<GeoDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let d = check_header(rdr.headers().map_err(csv_error)?)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut locations: Vec<Location> = Vec::new();
    let mut slot: HashMap<LocationId, usize> = HashMap::new();
    let mut seen: HashSet<(LocationId, Vec<u64>)> = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| DataError::Csv { line, message };
        let id: LocationId = record[0]
            .parse()
            .map_err(|_| err(format!("location_id {:?} is not a non-negative integer", &record[0])))?;
        let mut nums = Vec::with_capacity(d + 3);
        for (col, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(format!("column {} value {cell:?} is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(err(format!("column {} value {cell:?} is not finite", col + 1)));
            }
            nums.push(v);
        }
        let (x, y) = (nums[0], nums[1]);
        let row = &nums[2..2 + d];
        let label = nums[2 + d];
        if kind == ProblemKind::Classification && (label < 0.0 || label.fract() != 0.0) {
            return Err(err(format!("class label {label} is not a non-negative integer")));
        }
        if !seen.insert((id, row.iter().map(|v| v.to_bits()).collect())) {
            return Err(err(format!("duplicate point for location {id}")));
        }
        let index = labels.len();
        match slot.get(&id) {
            Some(&pos) => {
                let loc = &mut locations[pos];
                if loc.x != x || loc.y != y {
                    return Err(err(format!(
                        "location {id} coordinates ({x}, {y}) differ from earlier ({}, {})",
                        loc.x, loc.y
                    )));
                }
                loc.samples.push(index);
            }
            None => {
                slot.insert(id, locations.len());
                locations.push(Location {
                    id,
                    x,
                    y,
                    samples: vec![index],
                    region: None,
                });
            }
        }
        features.extend_from_slice(row);
        labels.push(label);
    }
    let n = labels.len();
    GeoDataset::new(Tensor::new(n, d, features), labels, locations, kind)
}

pub fn ingest_csv(path: &Path, kind: ProblemKind) -> Result<GeoDataset, DataError> {
    read_csv(File::open(path)?, kind)
}

/// Writes the dataset in sample order with the same schema [`read_csv`] accepts.
pub fn write_csv<W: Write>(dataset: &GeoDataset, writer: W) -> Result<(), DataError> {
    let d = dataset.feature_dim();
    let mut owner = vec![0usize; dataset.len()];
    for (pos, loc) in dataset.locations().iter().enumerate() {
        for &s in &loc.samples {
            owner[s] = pos;
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["location_id".to_string(), "x".into(), "y".into()];
    header.extend((1..=d).map(|k| format!("f_{k}")));
    header.push("label".into());
    w.write_record(&header).map_err(csv_error)?;
    for (i, &pos) in owner.iter().enumerate() {
        let loc = &dataset.locations()[pos];
        let mut rec = vec![loc.id.to_string(), loc.x.to_string(), loc.y.to_string()];
        rec.extend(dataset.features().row(i).iter().map(f64::to_string));
        rec.push(dataset.labels()[i].to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(dataset: &GeoDataset, path: &Path) -> Result<(), DataError> {
    write_csv(dataset, File::create(path)?)
}

pub fn write_split_csv<W: Write>(dataset: &GeoDataset, writer: W) -> Result<(), DataError> {
    if !dataset.is_split() {
        return Err(DataError::Split("dataset has not been split".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["location_id", "region"]).map_err(csv_error)?;
    for loc in dataset.locations() {
        let region = loc.region.expect("checked above");
        w.write_record([loc.id.to_string(), region.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split_csv<R: Read>(reader: R) -> Result<BTreeMap<LocationId, Region>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(String::from).collect();
    if header != ["location_id", "region"] {
        return Err(DataError::Csv {
            line: 1,
            message: format!("expected header location_id,region, found {header:?}"),
        });
    }
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| DataError::Csv { line, message };
        let id: LocationId = record[0]
            .parse()
            .map_err(|_| err(format!("bad location_id {:?}", &record[0])))?;
        let region: Region = record[1].parse().map_err(|e: DataError| err(e.to_string()))?;
        if out.insert(id, region).is_some() {
            return Err(err(format!("location {id} listed twice")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const VALID: &str = "location_id,x,y,f_1,f_2,label\n\
                         7,0.5,0.25,1.0,2.0,0\n\
                         7,0.5,0.25,3.0,4.0,1\n\
                         2,0.1,0.9,-1.0,0.5,1\n";

    #[test]
    fn three_row_file_gives_three_points() {
        let ds = read_csv(VALID.as_bytes(), ProblemKind::Classification).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.locations().len(), 2);
        assert_eq!(ds.location(7).unwrap().samples, vec![0, 1]);
        assert_eq!(ds.features().row(2), &[-1.0, 0.5]);
    }

    #[test]
    fn non_numeric_feature_names_the_line() {
        let text = VALID.replace("3.0,4.0", "3.0,abc");
        match read_csv(text.as_bytes(), ProblemKind::Classification) {
            Err(DataError::Csv { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"), "{message}");
            }
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_points_are_rejected() {
        let text = format!("{VALID}7,0.5,0.25,1.0,2.0,1\n");
        match read_csv(text.as_bytes(), ProblemKind::Classification) {
            Err(DataError::Csv { line: 5, .. }) => {}
            other => panic!("expected duplicate error on line 5, got {other:?}"),
        }
    }

    #[test]
    fn unknown_columns_are_rejected() {
        let text = VALID.replace("f_2", "elevation");
        assert!(matches!(
            read_csv(text.as_bytes(), ProblemKind::Regression),
            Err(DataError::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn ragged_row_is_rejected_with_its_line() {
        let text = format!("{VALID}3,0.2,0.2,1.0,0\n");
        assert!(matches!(
            read_csv(text.as_bytes(), ProblemKind::Regression),
            Err(DataError::Csv { line: 5, .. })
        ));
    }

    #[test]
    fn inconsistent_coordinates_are_rejected() {
        let text = format!("{VALID}2,0.2,0.9,5.0,5.0,0\n");
        assert!(read_csv(text.as_bytes(), ProblemKind::Regression).is_err());
    }

    #[test]
    fn split_file_round_trips() {
        let ds = read_csv(VALID.as_bytes(), ProblemKind::Regression).unwrap();
        let ds = super::super::split_locations(&ds, 0.5, 1).unwrap();
        let mut buf = Vec::new();
        write_split_csv(&ds, &mut buf).unwrap();
        let regions = read_split_csv(buf.as_slice()).unwrap();
        assert_eq!(regions, ds.regions());
    }
}
