//! File formats.
//!
//! - labels CSV: `index,community,x1,...,x{k-1}`
//! - covariates CSV: `index,revealed,y1,...,y{k-1}` with an empty `revealed`
//!   field for erased labels
//! - edge list: header `n k layer d`, then one `i j` line per edge with
//!   `i < j`, 0-indexed, sorted
//! - estimates CSV: `node,q1,...,qk,m1,...,m{k-1}`
//!
//! Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::bp::NodeEstimates;
use crate::error::{Error, Result};
use crate::label_model::{CommunityModel, CovariateSample, LabelSample};
use crate::netgen::AdjacencyList;

fn parse_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{what}: {e}"))
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    rec.get(i)
        .ok_or_else(|| Error::Parse(format!("{what}: missing column {i}")))?
        .parse()
        .map_err(|e| parse_err(what, e))
}

pub fn write_labels<W: Write>(w: W, labels: &LabelSample) -> Result<()> {
    let mut out = csv_writer(w);
    let dim = labels.vectors.ncols();
    out.write_record(["index".to_string(), "community".to_string()].into_iter().chain(numbered("x", dim)))?;
    for i in 0..labels.n {
        let xs: Vec<String> = labels.vectors.row(i).iter().map(|v| v.to_string()).collect();
        out.write_record([i.to_string(), labels.assignments[i].to_string()].into_iter().chain(xs))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads communities; coordinates are rebuilt from `model` and checked.
pub fn read_labels<R: Read>(r: R, model: &CommunityModel) -> Result<LabelSample> {
    let mut assignments = Vec::new();
    for (row, rec) in csv_reader(r).records().enumerate() {
        let rec = rec?;
        let index: usize = field(&rec, 0, "labels index")?;
        if index != row {
            return Err(Error::Parse(format!("labels: row {row} has index {index}")));
        }
        let a: usize = field(&rec, 1, "labels community")?;
        if a >= model.k() {
            return Err(Error::Parse(format!("labels: community {a} >= k = {}", model.k())));
        }
        for j in 0..model.dim() {
            if rec.get(2 + j).is_some() {
                let x: f64 = field(&rec, 2 + j, "labels coordinate")?;
                if (x - model.mu()[(a, j)]).abs() > 1e-9 {
                    return Err(Error::Parse(format!("labels: row {row} coordinates do not match community {a}")));
                }
            }
        }
        assignments.push(a);
    }
    LabelSample::from_assignments(model, assignments, 0)
}

pub fn write_covariates<W: Write>(w: W, cov: &CovariateSample) -> Result<()> {
    let mut out = csv_writer(w);
    let dim = cov.gaussian.as_ref().map_or(0, |g| g.ncols());
    out.write_record(["index".to_string(), "revealed".to_string()].into_iter().chain(numbered("y", dim)))?;
    for i in 0..cov.n() {
        let revealed = cov.revealed[i].map_or(String::new(), |a| a.to_string());
        let ys: Vec<String> = cov.gaussian.as_ref().map_or(Vec::new(), |g| g.row(i).iter().map(|v| v.to_string()).collect());
        out.write_record([i.to_string(), revealed].into_iter().chain(ys))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_covariates<R: Read>(r: R) -> Result<CovariateSample> {
    let mut rd = csv_reader(r);
    let dim = rd.headers()?.len().saturating_sub(2);
    let mut revealed = Vec::new();
    let mut ys = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec?;
        let index: usize = field(&rec, 0, "covariates index")?;
        if index != row {
            return Err(Error::Parse(format!("covariates: row {row} has index {index}")));
        }
        revealed.push(match rec.get(1) {
            Some("") | None => None,
            Some(_) => Some(field(&rec, 1, "covariates revealed")?),
        });
        for j in 0..dim {
            ys.push(field::<f64>(&rec, 2 + j, "covariates y")?);
        }
    }
    let n = revealed.len();
    let gaussian = (dim > 0).then(|| DMatrix::from_row_slice(n, dim, &ys));
    Ok(CovariateSample { revealed, gaussian })
}

pub fn write_edge_list<W: Write>(w: W, g: &AdjacencyList) -> Result<()> {
    let mut out = BufWriter::new(w);
    writeln!(out, "{} {} {} {}", g.n, g.k, g.layer, g.d)?;
    let mut edges = g.edges.clone();
    edges.sort_unstable();
    for (i, j) in edges {
        writeln!(out, "{i} {j}")?;
    }
    out.flush()?;
    Ok(())
}

/// `R` is not part of the file and is supplied by the caller.
pub fn read_edge_list<R: Read>(r: R, rmat: DMatrix<f64>) -> Result<AdjacencyList> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().ok_or_else(|| Error::Parse("edge list: empty file".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!("edge list header '{header}' is not 'n k layer d'")));
    }
    let n: usize = parts[0].parse().map_err(|e| parse_err("edge list n", e))?;
    let k: usize = parts[1].parse().map_err(|e| parse_err("edge list k", e))?;
    let layer: usize = parts[2].parse().map_err(|e| parse_err("edge list layer", e))?;
    let d: f64 = parts[3].parse().map_err(|e| parse_err("edge list d", e))?;
    let mut edges = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse(format!("edge list line '{line}' is not 'i j'")));
        };
        let i: usize = a.parse().map_err(|e| parse_err("edge list i", e))?;
        let j: usize = b.parse().map_err(|e| parse_err("edge list j", e))?;
        edges.push((i, j));
    }
    if !edges.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Parse("edge list is not sorted or has duplicates".into()));
    }
    AdjacencyList::from_edges(n, k, layer, d, rmat, edges)
}

pub fn write_estimates<W: Write>(w: W, est: &NodeEstimates) -> Result<()> {
    let mut out = csv_writer(w);
    let (k, dim) = (est.marginals.ncols(), est.means.ncols());
    out.write_record(std::iter::once("node".to_string()).chain(numbered("q", k)).chain(numbered("m", dim)))?;
    for i in 0..est.n() {
        let qs: Vec<String> = est.marginals.row(i).iter().map(|v| v.to_string()).collect();
        let ms: Vec<String> = est.means.row(i).iter().map(|v| v.to_string()).collect();
        out.write_record(std::iter::once(i.to_string()).chain(qs).chain(ms))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads marginals and means; iteration count and convergence are not stored.
pub fn read_estimates<R: Read>(r: R, k: usize) -> Result<NodeEstimates> {
    let mut rd = csv_reader(r);
    let cols = rd.headers()?.len();
    if cols != 1 + k + (k - 1) {
        return Err(Error::Parse(format!("estimates: {cols} columns, expected {}", 2 * k)));
    }
    let (mut q, mut m) = (Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec?;
        for a in 0..k {
            q.push(field::<f64>(&rec, 1 + a, "estimates marginal")?);
        }
        for j in 0..k - 1 {
            m.push(field::<f64>(&rec, 1 + k + j, "estimates mean")?);
        }
    }
    let n = q.len() / k;
    Ok(NodeEstimates {
        marginals: DMatrix::from_row_slice(n, k, &q),
        means: DMatrix::from_row_slice(n, k - 1, &m),
        iterations: 0,
        converged: true,
    })
}

pub fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_model::{sample_covariates, sample_labels, ChannelSpec};
    use crate::netgen::generate_network;
    use crate::potential::Layer;

    #[test]
    fn round_trips() {
        let m = CommunityModel::whiten(&[0.1, 0.3, 0.6]).unwrap();
        let labels = sample_labels(&m, 50, 1).unwrap();
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).unwrap();
        let back = read_labels(buf.as_slice(), &m).unwrap();
        assert_eq!(back.assignments, labels.assignments);
        assert_eq!(back.vectors, labels.vectors);

        let ch = ChannelSpec::new(0.3, DMatrix::identity(2, 2)).unwrap();
        let cov = sample_covariates(&labels, &ch, 2).unwrap();
        let mut buf = Vec::new();
        write_covariates(&mut buf, &cov).unwrap();
        assert_eq!(read_covariates(buf.as_slice()).unwrap(), cov);

        let layer = Layer::isotropic(5.0, 1.0, 2).unwrap();
        let g = generate_network(&labels, &m, &layer, 1, 3).unwrap();
        let mut buf = Vec::new();
        write_edge_list(&mut buf, &g).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("50 3 1 5\n"));
        assert_eq!(read_edge_list(buf.as_slice(), layer.r.clone()).unwrap(), g);

        let est = NodeEstimates::prior(50, &m);
        let mut buf = Vec::new();
        write_estimates(&mut buf, &est).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("node,q1,q2,q3,m1,m2\n"));
        let back = read_estimates(buf.as_slice(), 3).unwrap();
        assert_eq!(back.marginals, est.marginals);
        assert_eq!(back.means, est.means);
    }

    #[test]
    fn rejects_malformed_input() {
        let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
        assert!(read_labels("index,community\n0,2\n".as_bytes(), &m).is_err());
        assert!(read_labels("index,community,x1\n0,0,-1\n".as_bytes(), &m).is_err());
        assert!(read_edge_list("3 2 0\n".as_bytes(), DMatrix::zeros(1, 1)).is_err());
        assert!(read_edge_list("3 2 0 1\n1 2\n0 1\n".as_bytes(), DMatrix::zeros(1, 1)).is_err());
        assert!(read_edge_list("3 2 0 1\n0 5\n".as_bytes(), DMatrix::zeros(1, 1)).is_err());
    }
}
