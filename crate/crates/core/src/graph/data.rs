//! Horizontal partitioning, centering and CSV ingestion.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::numerics::Matrix;

/// One client's private samples (`n_k × d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: u32,
    pub data: Matrix,
}

impl ClientDataset {
    pub fn new(client_id: u32, data: Matrix) -> Self {
        Self { client_id, data }
    }

    pub fn sample_count(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// `S_k = xᵀx / total_n`.
    pub fn scatter(&self, total_n: usize) -> Matrix {
        self.data.gram().scale(1.0 / total_n as f64)
    }

    pub fn centered(&self) -> Self {
        Self {
            client_id: self.client_id,
            data: center(&self.data),
        }
    }
}

/// Splits rows into `k` contiguous blocks whose sizes differ by at most one;
/// the first `n mod k` clients receive the extra row.
pub fn partition(data: &Matrix, k: usize) -> Result<Vec<ClientDataset>> {
    let n = data.rows();
    if k == 0 {
        return Err(Error::Argument("client count must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Argument(format!(
            "cannot split {n} samples across {k} clients"
        )));
    }
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    let mut blocks = Vec::with_capacity(k);
    for client in 0..k {
        let len = base + usize::from(client < extra);
        blocks.push(ClientDataset::new(
            client as u32,
            data.select_rows(start..start + len),
        ));
        start += len;
    }
    Ok(blocks)
}

/// Subtracts column means.
pub fn center(data: &Matrix) -> Matrix {
    let means = data.column_means();
    let mut out = data.clone();
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

/// Variable names plus an `n × d` sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub data: Matrix,
}

pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if names.is_empty() || names.iter().any(String::is_empty) {
        return Err(Error::Argument("CSV header must name every column".into()));
    }
    let d = names.len();
    let mut values = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::Argument(format!(
                "row {} has {} fields, expected {d}",
                line + 1,
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(Error::Argument(format!(
                    "missing value in row {}, column {}",
                    line + 1,
                    names[col]
                )));
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::Argument(format!(
                    "row {}, column {}: '{field}' is not a number",
                    line + 1,
                    names[col]
                ))
            })?;
            values.push(v);
        }
    }
    let n = values.len() / d;
    Ok(Table {
        names,
        data: Matrix::from_vec(n, d, values)?,
    })
}

pub fn load_csv(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file)
}

pub fn write_table<W: Write>(writer: W, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&table.names)?;
    for r in 0..table.data.rows() {
        w.write_record(table.data.row(r).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(Error::Transport)?;
    Ok(())
}

pub fn save_csv(path: &Path, table: &Table) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table(file, table)
}

pub fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("X{i}")).collect()
}

/// Edge list with `source,target` columns of node indices.
pub fn save_edges(path: &Path, graph: &DirectedGraph) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["source", "target"])?;
    for (i, j) in graph.edges() {
        w.write_record([i.to_string(), j.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_edges(path: &Path, node_count: usize) -> Result<DirectedGraph> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut graph = DirectedGraph::empty(node_count);
    for record in rdr.deserialize() {
        let (i, j): (usize, usize) = record?;
        graph.add_edge(i, j)?;
    }
    Ok(graph)
}
