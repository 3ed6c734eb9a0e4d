//! CSV ingestion: per-node tables aligned on an explicit id column.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use partmle::partition::{NodeCell, PartitionLayout};
use partmle::{DataPartition, Error};

use crate::error::{CliError, CliResult};

/// One node's CSV: ids, column names and values (`NaN` where missing).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: DMatrix<f64>,
}

impl NodeTable {
    pub fn missing_cells(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }
}

fn parse_cell(raw: &str) -> Option<Result<f64, std::num::ParseFloatError>> {
    let t = raw.trim();
    if t.is_empty() || t == "NA" {
        return None;
    }
    Some(t.parse())
}

pub fn read_csv(path: &Path, id_column: &str) -> CliResult<NodeTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let id_pos = headers
        .iter()
        .position(|h| h.trim() == id_column)
        .ok_or_else(|| CliError::Input(format!("{}: no id column {id_column:?}", path.display())))?;
    let columns: Vec<String> = headers.iter().enumerate().filter(|&(i, _)| i != id_pos).map(|(_, h)| h.trim().to_string()).collect();
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        for (i, cell) in record.iter().enumerate() {
            if i == id_pos {
                ids.push(cell.trim().to_string());
                continue;
            }
            let v = match parse_cell(cell) {
                None => f64::NAN,
                Some(Ok(v)) if v.is_finite() => v,
                _ => return Err(CliError::Input(format!("{}: row {}: cannot read {cell:?} as a number", path.display(), line + 2))),
            };
            flat.push(v);
        }
    }
    let values = DMatrix::from_row_slice(ids.len(), columns.len(), &flat);
    Ok(NodeTable { ids, columns, values })
}

/// Replace missing cells with the mean of the observed cells of their column.
/// Returns the number of imputed cells.
pub fn impute_marginal(table: &mut NodeTable) -> CliResult<usize> {
    let mut imputed = 0;
    for (j, name) in table.columns.iter().enumerate() {
        let mut col = table.values.column_mut(j);
        let observed: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
        if observed.len() == col.len() {
            continue;
        }
        if observed.is_empty() {
            return Err(Error::MissingData(format!("column {name} has no observed values to impute from")).into());
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        for v in col.iter_mut().filter(|v| v.is_nan()) {
            *v = mean;
            imputed += 1;
        }
    }
    Ok(imputed)
}

/// Global row order: numeric when every id is an integer, lexicographic otherwise.
fn order_ids(ids: BTreeSet<&str>) -> Vec<String> {
    let mut ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().expect("checked above"));
    }
    ids
}

/// Align node tables with `layout` and turn them into partitions. Tables are
/// matched to layout nodes by name.
pub fn ingest(layout: &PartitionLayout, mut tables: HashMap<String, NodeTable>, impute: bool) -> CliResult<Vec<DataPartition>> {
    for name in tables.keys() {
        if layout.node_index(name).is_none() {
            return Err(Error::Layout(format!("data given for unknown node {name}")).into());
        }
    }
    let mut all_ids = BTreeSet::new();
    for (name, t) in &tables {
        let unique: BTreeSet<&str> = t.ids.iter().map(String::as_str).collect();
        if unique.len() != t.ids.len() {
            return Err(Error::Alignment(format!("node {name} repeats an id")).into());
        }
        all_ids.extend(unique);
    }
    let order = order_ids(all_ids);
    if order.len() != layout.n {
        return Err(Error::Alignment(format!("{} distinct ids across nodes, layout expects {} rows", order.len(), layout.n)).into());
    }
    let position: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut out = Vec::with_capacity(layout.k());
    for cell in &layout.nodes {
        let table = tables.remove(&cell.name).ok_or_else(|| CliError::Input(format!("no data for node {}", cell.name)))?;
        out.push(build_partition(layout, cell, table, &position, impute)?);
    }
    Ok(out)
}

/// Partition for a single node of a vertical layout, as a remote daemon sees
/// it: rows ordered by the node's own ids.
pub fn ingest_node(layout: &PartitionLayout, name: &str, table: NodeTable, impute: bool) -> CliResult<DataPartition> {
    let idx = layout.node_index(name).ok_or_else(|| Error::Layout(format!("layout has no node {name}")))?;
    let cell = &layout.nodes[idx];
    if cell.rows.len() != layout.n {
        return Err(Error::Layout(format!("node {name} does not hold every row; remote nodes need a vertical layout")).into());
    }
    let order = order_ids(table.ids.iter().map(String::as_str).collect());
    if order.len() != table.ids.len() {
        return Err(Error::Alignment(format!("node {name} repeats an id")).into());
    }
    let position: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    build_partition(layout, cell, table, &position, impute)
}

fn build_partition(
    layout: &PartitionLayout,
    cell: &NodeCell,
    mut table: NodeTable,
    position: &HashMap<&str, usize>,
    impute: bool,
) -> CliResult<DataPartition> {
    check_columns(layout, cell, &table)?;
    if table.missing_cells() > 0 {
        if !impute {
            let (i, j) = first_missing(&table.values);
            return Err(Error::MissingData(format!(
                "node {}: id {} has no value for {} (enable imputation to fill with the column mean)",
                cell.name, table.ids[i], table.columns[j]
            ))
            .into());
        }
        let n = impute_marginal(&mut table)?;
        log::info!("node {}: imputed {n} missing cells with column means", cell.name);
    }
    let mut rows: Vec<(usize, usize)> = table.ids.iter().enumerate().map(|(i, id)| (position[id.as_str()], i)).collect();
    rows.sort_unstable();
    let row_ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let mut expected = cell.rows.clone();
    expected.sort_unstable();
    if row_ids != expected {
        return Err(Error::Alignment(format!("ids held by node {} do not match its rows in the layout", cell.name)).into());
    }
    let mut cols: Vec<(usize, usize)> = table
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| (layout.var_names.iter().position(|v| v == c).expect("checked"), j))
        .collect();
    cols.sort_unstable();
    let x = DMatrix::from_fn(rows.len(), cols.len(), |i, j| table.values[(rows[i].1, cols[j].1)]);
    Ok(DataPartition::new(x, cols.iter().map(|c| c.0).collect(), row_ids)?)
}

fn check_columns(layout: &PartitionLayout, cell: &NodeCell, table: &NodeTable) -> CliResult<()> {
    let want: BTreeSet<&str> = cell.cols.iter().map(|&c| layout.var_names[c].as_str()).collect();
    let got: BTreeSet<&str> = table.columns.iter().map(String::as_str).collect();
    if want != got || got.len() != table.columns.len() {
        return Err(Error::Layout(format!("node {}: CSV columns {:?} do not match layout columns {:?}", cell.name, table.columns, want)).into());
    }
    Ok(())
}

fn first_missing(m: &DMatrix<f64>) -> (usize, usize) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if m[(i, j)].is_nan() {
                return (i, j);
            }
        }
    }
    unreachable!("caller checked for missing cells")
}
