//! Partition layouts, their decomposition into row bands that are each a
//! pure vertical problem, and the federation that evaluates a layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvn::{log_likelihood_rows, mean_rows, neumaier_sum, DataPartition, ParameterSet};
use crate::primitives::secure_sum;
use crate::protocol::noise::derive_seed;
use crate::protocol::{CentralNode, DataNode, NoiseLedger, Transcript};
use crate::transport::{InProcessBus, TcpFederation, TransportKind, VerticalTransport};

/// One node's cell of the data grid (0-based, sorted, duplicate-free ids).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCell {
    pub name: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Horizontal,
    Vertical,
    Complex,
}

/// How an `n × p` dataset is spread over nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    pub n: usize,
    pub p: usize,
    pub var_names: Vec<String>,
    pub nodes: Vec<NodeCell>,
}

fn normalize(ids: &mut [usize], what: &str, node: &str, bound: usize) -> Result<()> {
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Layout(format!("node {node} lists a {what} twice")));
    }
    if ids.is_empty() {
        return Err(Error::Layout(format!("node {node} holds no {what}s")));
    }
    if let Some(&last) = ids.last().filter(|&&l| l >= bound) {
        return Err(Error::Layout(format!("node {node}: {what} {last} out of range (< {bound})")));
    }
    Ok(())
}

impl PartitionLayout {
    /// Build and validate a layout. Cells must tile the `n × p` grid exactly.
    pub fn new(n: usize, p: usize, var_names: Vec<String>, mut nodes: Vec<NodeCell>) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::Layout(format!("empty dataset {n}x{p}")));
        }
        if var_names.len() != p {
            return Err(Error::Layout(format!("{} variable names for {p} columns", var_names.len())));
        }
        if nodes.is_empty() {
            return Err(Error::Layout("layout has no nodes".into()));
        }
        let mut counts = vec![0u32; n * p];
        for node in &mut nodes {
            normalize(&mut node.rows, "row", &node.name, n)?;
            normalize(&mut node.cols, "column", &node.name, p)?;
            for &r in &node.rows {
                for &c in &node.cols {
                    counts[r * p + c] += 1;
                }
            }
        }
        if let Some(i) = counts.iter().position(|&c| c != 1) {
            let (r, c) = (i / p, i % p);
            let issue = if counts[i] == 0 { "is not held by any node" } else { "is held by more than one node" };
            return Err(Error::Layout(format!("cell (row {r}, column {}) {issue}", var_names[c])));
        }
        Ok(Self { n, p, var_names, nodes })
    }

    /// Every node holds all rows; `col_sets[k]` are node `k`'s columns.
    pub fn vertical(n: usize, col_sets: &[Vec<usize>]) -> Result<Self> {
        let p = col_sets.iter().map(Vec::len).sum();
        let nodes = col_sets
            .iter()
            .enumerate()
            .map(|(k, cols)| NodeCell { name: format!("node{}", k + 1), rows: (0..n).collect(), cols: cols.clone() })
            .collect();
        Self::new(n, p, crate::mvn::default_names(p), nodes)
    }

    /// Every node holds all columns; `row_sets[k]` are node `k`'s rows.
    pub fn horizontal(p: usize, row_sets: &[Vec<usize>]) -> Result<Self> {
        let n = row_sets.iter().map(Vec::len).sum();
        let nodes = row_sets
            .iter()
            .enumerate()
            .map(|(k, rows)| NodeCell { name: format!("node{}", k + 1), rows: rows.clone(), cols: (0..p).collect() })
            .collect();
        Self::new(n, p, crate::mvn::default_names(p), nodes)
    }

    pub fn k(&self) -> usize {
        self.nodes.len()
    }

    pub fn kind(&self) -> LayoutKind {
        if self.nodes.iter().all(|c| c.rows.len() == self.n) {
            LayoutKind::Vertical
        } else if self.nodes.iter().all(|c| c.cols.len() == self.p) {
            LayoutKind::Horizontal
        } else {
            LayoutKind::Complex
        }
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|c| c.name == name)
    }

    /// Parse the JSON layout file format (see [`LayoutFile`]).
    pub fn from_json(text: &str) -> Result<Self> {
        let file: LayoutFile = serde_json::from_str(text)?;
        file.into_layout()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk layout: variable names, row count, and per node 1-based inclusive
/// row ranges (or `"all"`) with the names of the columns it holds.
///
/// ```json
/// {"variables": ["w1", "w2"], "n": 10,
///  "nodes": [{"name": "a", "rows": [[1, 6]], "columns": ["w1"]},
///            {"name": "b", "rows": [[7, 10]], "columns": ["w1"]},
///            {"name": "c", "rows": "all", "columns": ["w2"]}]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub variables: Vec<String>,
    pub n: usize,
    pub nodes: Vec<LayoutFileNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFileNode {
    pub name: String,
    pub rows: RowSpec,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowSpec {
    All(AllRows),
    Ranges(Vec<[usize; 2]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllRows {
    All,
}

impl LayoutFile {
    pub fn into_layout(self) -> Result<PartitionLayout> {
        let index: HashMap<&str, usize> = self.variables.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        if index.len() != self.variables.len() {
            return Err(Error::Layout("duplicate variable names".into()));
        }
        let mut cells = Vec::with_capacity(self.nodes.len());
        let mut names = std::collections::HashSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.as_str()) {
                return Err(Error::Layout(format!("duplicate node name {}", node.name)));
            }
            let rows = match &node.rows {
                RowSpec::All(_) => (0..self.n).collect(),
                RowSpec::Ranges(ranges) => {
                    let mut rows = Vec::new();
                    for &[start, end] in ranges {
                        if start == 0 || start > end || end > self.n {
                            return Err(Error::Layout(format!("node {}: bad row range {start}..={end} for n = {}", node.name, self.n)));
                        }
                        rows.extend(start - 1..end);
                    }
                    rows
                }
            };
            let cols = node
                .columns
                .iter()
                .map(|c| index.get(c.as_str()).copied().ok_or_else(|| Error::Layout(format!("node {}: unknown column {c}", node.name))))
                .collect::<Result<Vec<_>>>()?;
            cells.push(NodeCell { name: node.name.clone(), rows, cols });
        }
        PartitionLayout::new(self.n, self.variables.len(), self.variables, cells)
    }
}

/// A node's columns within one band. `node` indexes [`PartitionLayout::nodes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandMember {
    pub node: usize,
    pub cols: Vec<usize>,
}

/// Rows sharing the same set of owners; members are in chain order
/// (ascending lowest column).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub rows: Vec<usize>,
    pub members: Vec<BandMember>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubroutinePlan {
    pub bands: Vec<Band>,
}

/// Split a layout into row bands, each a pure vertical problem over all
/// columns. Bands are ordered by their lowest row id.
pub fn plan_subroutines(layout: &PartitionLayout) -> Result<SubroutinePlan> {
    let layout = PartitionLayout::new(layout.n, layout.p, layout.var_names.clone(), layout.nodes.clone())?;
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); layout.n];
    for (k, cell) in layout.nodes.iter().enumerate() {
        for &r in &cell.rows {
            owners[r].push(k);
        }
    }
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (r, sig) in owners.into_iter().enumerate() {
        groups.entry(sig).or_default().push(r);
    }
    let mut bands: Vec<Band> = groups
        .into_iter()
        .map(|(sig, rows)| {
            let mut members: Vec<BandMember> = sig.into_iter().map(|k| BandMember { node: k, cols: layout.nodes[k].cols.clone() }).collect();
            members.sort_by_key(|m| m.cols[0]);
            Band { rows, members }
        })
        .collect();
    bands.sort_by_key(|b| b.rows[0]);
    Ok(SubroutinePlan { bands })
}

/// Settings shared by all nodes of a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationOptions {
    pub noise: NoiseLedger,
    pub transport: TransportKind,
    /// Mask magnitude for combining band totals.
    pub sum_mask_scale: f64,
}

impl FederationOptions {
    pub fn new(noise: NoiseLedger) -> Self {
        Self { noise, transport: TransportKind::InProcess, sum_mask_scale: 1e12 }
    }
}

enum BandRunner {
    /// A band owned by a single node: it evaluates its own rows directly.
    Local { x: DMatrix<f64>, cols: Vec<usize> },
    Vertical(Box<dyn VerticalTransport>),
}

/// Per-evaluation detail.
#[derive(Debug, Clone)]
pub struct ComplexOutcome {
    pub ll: f64,
    pub band_totals: Vec<f64>,
    /// Transcripts of the vertical bands (empty for single-node bands).
    pub transcripts: Vec<Transcript>,
}

/// All nodes of a layout, wired up and ready to evaluate parameter sets.
pub struct Federation {
    layout: PartitionLayout,
    plan: SubroutinePlan,
    bands: Vec<BandRunner>,
    options: FederationOptions,
    counter: u64,
}

/// Extract `node`'s band slice: the band's rows (in row-id order) of its columns.
fn band_slice(data: &DataPartition, band_rows: &[usize]) -> Result<DMatrix<f64>> {
    let pos: HashMap<usize, usize> = data.row_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let idx = band_rows
        .iter()
        .map(|r| pos.get(r).copied().ok_or_else(|| Error::Alignment(format!("row {r} missing from node data"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(data.rows.select_rows(&idx))
}

impl Federation {
    /// `data[k]` is the partition held by `layout.nodes[k]`.
    pub fn new(layout: PartitionLayout, data: Vec<DataPartition>, options: FederationOptions) -> Result<Self> {
        if data.len() != layout.k() {
            return Err(Error::Layout(format!("{} data partitions for {} nodes", data.len(), layout.k())));
        }
        for (cell, d) in layout.nodes.iter().zip(&data) {
            let mut rows = d.row_ids.clone();
            rows.sort_unstable();
            let mut cols = d.col_ids.clone();
            cols.sort_unstable();
            if rows != cell.rows || cols != cell.cols {
                return Err(Error::Layout(format!("data held by {} does not match its layout cell", cell.name)));
            }
        }
        let plan = plan_subroutines(&layout)?;
        let mut bands = Vec::with_capacity(plan.bands.len());
        for (b, band) in plan.bands.iter().enumerate() {
            let band_id = b as u32;
            if band.members.len() == 1 {
                let d = &data[band.members[0].node];
                bands.push(BandRunner::Local { x: band_slice(d, &band.rows)?, cols: d.col_ids.clone() });
                continue;
            }
            let k_total = band.members.len() as u32;
            let chain_cols: Vec<Vec<usize>> = band.members.iter().map(|m| data[m.node].col_ids.clone()).collect();
            let central = CentralNode::new(band.rows.len(), layout.p, chain_cols, options.noise, band_id)?;
            let nodes = band
                .members
                .iter()
                .enumerate()
                .map(|(i, m)| DataNode::new(i as u32 + 1, k_total, band_slice(&data[m.node], &band.rows)?, options.noise, band_id))
                .collect::<Result<Vec<_>>>()?;
            let runner: Box<dyn VerticalTransport> = match &options.transport {
                TransportKind::InProcess => Box::new(InProcessBus::new(central, nodes)?),
                TransportKind::Tcp(cfg) => Box::new(TcpFederation::spawn_local(central, nodes, cfg.clone())?),
            };
            bands.push(BandRunner::Vertical(runner));
        }
        Ok(Self { layout, plan, bands, options, counter: 0 })
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn plan(&self) -> &SubroutinePlan {
        &self.plan
    }

    /// Number of evaluations run so far.
    pub fn evaluations(&self) -> u64 {
        self.counter
    }

    /// Evaluate the joint log-likelihood of `params` (global variable order).
    pub fn evaluate(&mut self, params: &ParameterSet) -> Result<f64> {
        Ok(run_complex(self, params)?.ll)
    }
}

/// Evaluate every band and combine the band totals on a summation ring.
pub fn run_complex(fed: &mut Federation, params: &ParameterSet) -> Result<ComplexOutcome> {
    if params.dim() != fed.layout.p {
        return Err(Error::Shape(format!("{} parameters for {} variables", params.dim(), fed.layout.p)));
    }
    let counter = fed.counter;
    fed.counter += 1;
    let mut band_totals = Vec::with_capacity(fed.bands.len());
    let mut transcripts = Vec::new();
    for (b, runner) in fed.bands.iter_mut().enumerate() {
        match runner {
            BandRunner::Local { x, cols } => {
                let local = params.select(cols)?;
                band_totals.push(log_likelihood_rows(x, &mean_rows(&local.mean, x.nrows()), &local.cov)?);
            }
            BandRunner::Vertical(t) => {
                let eval_id = ((b as u64) << 48) | counter;
                let out = t.run_evaluation(eval_id, params)?;
                band_totals.push(out.ll);
                transcripts.push(out.transcript);
            }
        }
    }
    let ll = if band_totals.len() == 1 {
        band_totals[0]
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[fed.options.noise.seed, u64::MAX - 1, counter]));
        let sum = secure_sum(&band_totals, fed.options.sum_mask_scale, &mut rng)?;
        debug_assert!((sum.total - neumaier_sum(band_totals.iter().copied())).abs() < 1e-6);
        sum.total
    };
    Ok(ComplexOutcome { ll, band_totals, transcripts })
}
