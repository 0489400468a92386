//! File formats.
//!
//! Dense matrices are CSV with a header `id,1,2,...,T` and one row per
//! flow or link. Sparse data (routing, masks, truth) are `row,col,value`
//! triplets; time columns in triplets are 1-based, flow and link indices
//! 0-based. Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::traffic::Labels;
use crate::types::{Mask, RoutingMatrix};

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, column: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .parse()
        .map_err(|e: T::Err| parse_err(line, column, format!("'{field}': {e}")))
}

pub fn write_dense<W: Write>(out: W, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend((1..=m.ncols()).map(|t| t.to_string()));
    w.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend(m.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dense matrix; rows must appear in order `0, 1, ...`.
pub fn read_dense<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut r = reader(input);
    let cols = r.headers()?.len().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != cols + 1 {
            return Err(parse_err(line, rec.len(), format!("expected {} fields", cols + 1)));
        }
        let id: usize = parse_field(&rec[0], line, 1)?;
        if id != rows {
            return Err(parse_err(line, 1, format!("row id {id}, expected {rows}")));
        }
        for c in 0..cols {
            let x: f64 = parse_field(&rec[c + 1], line, c + 2)?;
            if !x.is_finite() {
                return Err(parse_err(line, c + 2, "non-finite value"));
            }
            data.push(x);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Plain numeric table with a header row.
pub fn write_rows<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_triplets<W: Write>(out: W, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "value"])?;
    for (r, c, v) in entries {
        w.write_record(&[r.to_string(), c.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets<R: Read>(input: R) -> Result<Vec<(usize, usize, f64)>> {
    let mut r = reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(parse_err(line, rec.len(), "expected 3 fields"));
        }
        out.push((
            parse_field(&rec[0], line, 1)?,
            parse_field(&rec[1], line, 2)?,
            parse_field(&rec[2], line, 3)?,
        ));
    }
    Ok(out)
}

/// Routing as `(link, flow, 1)` triplets.
pub fn write_routing<W: Write>(out: W, routing: &RoutingMatrix) -> Result<()> {
    let entries = routing
        .columns()
        .iter()
        .enumerate()
        .flat_map(|(f, links)| links.iter().map(move |&l| (l, f, 1.0)));
    write_triplets(out, entries)
}

pub fn read_routing<R: Read>(input: R, links: usize, flows: usize) -> Result<RoutingMatrix> {
    let mut columns = vec![Vec::new(); flows];
    for (i, (l, f, v)) in read_triplets(input)?.into_iter().enumerate() {
        if f >= flows || l >= links {
            return Err(parse_err(i + 2, 1, format!("entry ({l}, {f}) outside {links} x {flows}")));
        }
        if v != 0.0 {
            columns[f].push(l);
        }
    }
    for col in &mut columns {
        col.sort_unstable();
    }
    RoutingMatrix::new(links, columns)
}

/// Observed cells as `(link, time, 1)`.
pub fn write_mask<W: Write>(out: W, mask: &Mask) -> Result<()> {
    let (rows, cols) = mask.shape();
    let entries = (0..rows).flat_map(|l| (0..cols).filter(move |&s| mask[(l, s)]).map(move |s| (l, s + 1, 1.0)));
    write_triplets(out, entries)
}

pub fn read_mask<R: Read>(input: R, links: usize, total: usize) -> Result<Mask> {
    let mut mask = Mask::from_element(links, total, false);
    for (i, (l, t, v)) in read_triplets(input)?.into_iter().enumerate() {
        if l >= links || t == 0 || t > total {
            return Err(parse_err(i + 2, 1, format!("cell ({l}, {t}) outside {links} x {total}")));
        }
        mask[(l, t - 1)] = v != 0.0;
    }
    Ok(mask)
}

/// Truth as `(flow, time, 1)`.
pub fn write_labels<W: Write>(out: W, labels: &Labels) -> Result<()> {
    write_triplets(out, labels.iter().map(|&(f, t)| (f, t, 1.0)))
}

pub fn read_labels<R: Read>(input: R) -> Result<Labels> {
    Ok(read_triplets(input)?
        .into_iter()
        .filter(|&(_, _, v)| v != 0.0)
        .map(|(f, t, _)| (f, t))
        .collect())
}

pub fn write_json<W: Write, T: Serialize>(out: W, value: &T) -> Result<()> {
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<R: Read, T: DeserializeOwned>(input: R) -> Result<T> {
    Ok(serde_json::from_reader(input)?)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}
