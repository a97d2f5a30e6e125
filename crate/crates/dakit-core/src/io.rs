//! CSV serialization for time series and JSON serialization for Gaussians.
//!
//! Trajectories use the header `j,x0,...,x{d-1}` with rows indexed from 0;
//! observation series use `j,y0,...,y{k-1}` with rows indexed from 1. Floats
//! are written in shortest round-trip form, so a write/read cycle reproduces
//! the input bit for bit.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::CoreError;
use crate::gaussian::Gaussian;
use crate::series::{ObservationSeries, Trajectory};

pub fn write_trajectory_csv<W: Write>(w: W, t: &Trajectory) -> Result<(), CoreError> {
    write_series(w, "x", 0, t.states())
}

pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Trajectory, CoreError> {
    Trajectory::new(read_series(r, "x", 0)?)
}

pub fn write_observations_csv<W: Write>(w: W, o: &ObservationSeries) -> Result<(), CoreError> {
    write_series(w, "y", 1, o.all())
}

pub fn read_observations_csv<R: Read>(r: R) -> Result<ObservationSeries, CoreError> {
    ObservationSeries::new(read_series(r, "y", 1)?)
}

pub fn write_gaussian_json<W: Write>(mut w: W, g: &Gaussian) -> Result<(), CoreError> {
    serde_json::to_writer_pretty(&mut w, g)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_gaussian_json<R: Read>(r: R) -> Result<Gaussian, CoreError> {
    Ok(serde_json::from_reader(r)?)
}

fn write_series<W: Write>(
    w: W,
    prefix: &str,
    first_index: usize,
    rows: &[DVector<f64>],
) -> Result<(), CoreError> {
    let d = rows.first().map_or(0, |v| v.len());
    let mut wtr = csv::Writer::from_writer(w);
    let header: Vec<String> = std::iter::once("j".to_string())
        .chain((0..d).map(|i| format!("{prefix}{i}")))
        .collect();
    wtr.write_record(&header)?;
    for (offset, v) in rows.iter().enumerate() {
        let mut record = Vec::with_capacity(d + 1);
        record.push((first_index + offset).to_string());
        record.extend(v.iter().map(|x| x.to_string()));
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| CoreError::Io(e))?;
    Ok(())
}

fn read_series<R: Read>(
    r: R,
    prefix: &str,
    first_index: usize,
) -> Result<Vec<DVector<f64>>, CoreError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || &headers[0] != "j" {
        return Err(CoreError::Format("first CSV column must be named j".into()));
    }
    let d = headers.len() - 1;
    if d == 0 {
        return Err(CoreError::Format("CSV has no component columns".into()));
    }
    for i in 0..d {
        let expected = format!("{prefix}{i}");
        if &headers[i + 1] != expected.as_str() {
            return Err(CoreError::Format(format!(
                "column {} is named {:?}, expected {expected:?}",
                i + 1,
                &headers[i + 1]
            )));
        }
    }
    let mut rows = Vec::new();
    for (offset, record) in rdr.records().enumerate() {
        let record = record?;
        let expected_index = first_index + offset;
        if record.len() != d + 1 {
            return Err(CoreError::Format(format!(
                "row {expected_index} has {} fields, expected {}",
                record.len(),
                d + 1
            )));
        }
        let j: usize = record[0]
            .parse()
            .map_err(|_| CoreError::Format(format!("row index {:?} is not a count", &record[0])))?;
        if j != expected_index {
            return Err(CoreError::Format(format!(
                "row indices must be contiguous: found {j}, expected {expected_index}"
            )));
        }
        let mut v = DVector::zeros(d);
        for i in 0..d {
            let x: f64 = record[i + 1].parse().map_err(|_| {
                CoreError::Format(format!("row {j}: field {:?} is not a float", &record[i + 1]))
            })?;
            v[i] = x;
        }
        rows.push(v);
    }
    Ok(rows)
}
