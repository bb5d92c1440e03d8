//! Radial feeder data: the plain-text feeder format, validation, and per-unit
//! normalization.
//!
//! A [`FeederModel`] keeps the physical values exactly as they appear in the
//! file (kW, kvar, ohms, amps) and derives every per-unit quantity from them
//! once at construction. The derived arrays are what the solvers read; the
//! physical records are what [`FeederModel::to_feeder_text`] writes back, which
//! keeps `parse(serialize(m)) == m` bit-exact.
//!
//! File layout:
//!
//! ```text
//! [base]
//! kv=4.16          # line-to-line voltage base
//! kva=1000         # power base
//! vsub_pu=1.0      # optional, substation voltage magnitude
//! substation=650   # optional when the root is unambiguous
//! [nodes]
//! id,load_kw,load_kvar,pv_max_kw
//! [edges]
//! from,to,r_ohm,x_ohm,rated_amps
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Thermal rating used for edges whose file row leaves `rated_amps` empty.
pub const DEFAULT_RATED_CURRENT_PU: f64 = 10.0;

pub const DEFAULT_VMIN_PU: f64 = 0.95;
pub const DEFAULT_VMAX_PU: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeederError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate node id `{id}`")]
    DuplicateNode { line: usize, id: String },
    #[error("line {line}: unknown node `{id}`")]
    UnknownNode { line: usize, id: String },
    #[error("line {line}: negative impedance on edge {from}-{to}")]
    NegativeImpedance { line: usize, from: String, to: String },
    #[error("line {line}: {msg}")]
    InvalidValue { line: usize, msg: String },
    #[error("line {line}: non-radial topology ({detail})")]
    NonRadial { line: usize, detail: String },
    #[error("missing substation: {0}")]
    MissingSubstation(String),
    #[error("load multiplier must be positive, got {0}")]
    InvalidMultiplier(f64),
}

impl FeederError {
    /// Source line the error points at, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            FeederError::Syntax { line, .. }
            | FeederError::DuplicateNode { line, .. }
            | FeederError::UnknownNode { line, .. }
            | FeederError::NegativeImpedance { line, .. }
            | FeederError::InvalidValue { line, .. }
            | FeederError::NonRadial { line, .. } => Some(*line),
            FeederError::MissingSubstation(_) | FeederError::InvalidMultiplier(_) => None,
        }
    }
}

/// A bus as written in the feeder file.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: String,
    pub load_kw: f64,
    pub load_kvar: f64,
    pub pv_max_kw: f64,
    pub pv_min_kw: f64,
}

/// A line section, oriented parent → child after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub rated_amps: Option<f64>,
}

/// Voltage and power bases plus the voltage settings of the `[base]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederBase {
    pub kv: f64,
    pub kva: f64,
    pub vsub_pu: f64,
    pub vmin_pu: f64,
    pub vmax_pu: f64,
}

impl FeederBase {
    pub fn new(kv: f64, kva: f64) -> Self {
        FeederBase {
            kv,
            kva,
            vsub_pu: 1.0,
            vmin_pu: DEFAULT_VMIN_PU,
            vmax_pu: DEFAULT_VMAX_PU,
        }
    }

    pub fn impedance_ohm(&self) -> f64 {
        self.kv * self.kv * 1000.0 / self.kva
    }

    pub fn current_amps(&self) -> f64 {
        self.kva / (3f64.sqrt() * self.kv)
    }
}

/// Uniform load multiplier (e.g. 0.3 for the minimum-load case).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadScaling {
    pub multiplier: f64,
}

impl LoadScaling {
    pub fn new(multiplier: f64) -> Self {
        LoadScaling { multiplier }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PerUnit {
    load_p: Vec<f64>,
    load_q: Vec<f64>,
    pv_lower: Vec<f64>,
    pv_upper: Vec<f64>,
    r: Vec<f64>,
    x: Vec<f64>,
    i_rated: Vec<f64>,
    v_sub: f64,
    v_min_sq: f64,
    v_max_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Topology {
    children: Vec<Vec<usize>>,
    parent_edge: Vec<Option<usize>>,
    // parents before children
    order: Vec<usize>,
}

/// Immutable radial feeder in per-unit form.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    base: FeederBase,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    substation: usize,
    pu: PerUnit,
    topo: Topology,
}

/// Unvalidated edge as read from a file or assembled by hand.
#[derive(Debug, Clone)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub rated_amps: Option<f64>,
    pub line: usize,
}

/// Collects nodes and edges, then validates them into a [`FeederModel`].
#[derive(Debug, Clone)]
pub struct FeederBuilder {
    base: FeederBase,
    substation: Option<String>,
    nodes: Vec<(NodeRecord, usize)>,
    edges: Vec<EdgeSpec>,
}

impl FeederBuilder {
    pub fn new(base: FeederBase) -> Self {
        FeederBuilder {
            base,
            substation: None,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Bases chosen so that per-unit and file values coincide up to a factor
    /// of 1000: impedance base 1 Ω, power base 1000 kVA.
    pub fn per_unit() -> Self {
        FeederBuilder::new(FeederBase::new(1.0, 1000.0))
    }

    pub fn substation(mut self, id: &str) -> Self {
        self.substation = Some(id.to_string());
        self
    }

    pub fn vsub_pu(mut self, v: f64) -> Self {
        self.base.vsub_pu = v;
        self
    }

    pub fn voltage_limits(mut self, vmin_pu: f64, vmax_pu: f64) -> Self {
        self.base.vmin_pu = vmin_pu;
        self.base.vmax_pu = vmax_pu;
        self
    }

    pub fn node(mut self, id: &str, load_kw: f64, load_kvar: f64, pv_max_kw: f64) -> Self {
        let line = self.nodes.len() + 1;
        self.nodes.push((
            NodeRecord {
                id: id.to_string(),
                load_kw,
                load_kvar,
                pv_max_kw,
                pv_min_kw: 0.0,
            },
            line,
        ));
        self
    }

    /// Node with per-unit load and PV rating (see [`FeederBuilder::per_unit`]).
    pub fn node_pu(self, id: &str, load_p: f64, load_q: f64, pv_max: f64) -> Self {
        let kva = self.base.kva;
        self.node(id, load_p * kva, load_q * kva, pv_max * kva)
    }

    pub fn edge(mut self, from: &str, to: &str, r_ohm: f64, x_ohm: f64, rated_amps: Option<f64>) -> Self {
        let line = self.edges.len() + 1;
        self.edges.push(EdgeSpec {
            from: from.to_string(),
            to: to.to_string(),
            r_ohm,
            x_ohm,
            rated_amps,
            line,
        });
        self
    }

    /// Edge with per-unit impedance (see [`FeederBuilder::per_unit`]).
    pub fn edge_pu(self, from: &str, to: &str, r: f64, x: f64) -> Self {
        let zb = self.base.impedance_ohm();
        self.edge(from, to, r * zb, x * zb, None)
    }

    pub fn build(self) -> Result<FeederModel, FeederError> {
        let FeederBuilder {
            base,
            substation,
            nodes,
            edges,
        } = self;
        check_base(&base)?;

        let mut index: HashMap<String, usize> = HashMap::with_capacity(nodes.len());
        let mut records = Vec::with_capacity(nodes.len());
        for (node, line) in nodes {
            check_node(&node, line)?;
            if index.insert(node.id.clone(), records.len()).is_some() {
                return Err(FeederError::DuplicateNode { line, id: node.id });
            }
            records.push(node);
        }
        if records.is_empty() {
            return Err(FeederError::MissingSubstation("feeder has no nodes".into()));
        }

        let lookup = |id: &str, line: usize| {
            index.get(id).copied().ok_or_else(|| FeederError::UnknownNode {
                line,
                id: id.to_string(),
            })
        };
        let mut raw = Vec::with_capacity(edges.len());
        for spec in &edges {
            let from = lookup(&spec.from, spec.line)?;
            let to = lookup(&spec.to, spec.line)?;
            check_edge(spec)?;
            if from == to {
                return Err(FeederError::NonRadial {
                    line: spec.line,
                    detail: format!("self-loop at `{}`", spec.from),
                });
            }
            raw.push((from, to));
        }

        // Cycle detection in file order so the error names the closing edge.
        let mut dsu = DisjointSet::new(records.len());
        for (spec, &(a, b)) in edges.iter().zip(&raw) {
            if !dsu.union(a, b) {
                return Err(FeederError::NonRadial {
                    line: spec.line,
                    detail: format!("edge {}-{} closes a cycle", spec.from, spec.to),
                });
            }
        }

        let root = match substation {
            Some(id) => *index
                .get(&id)
                .ok_or_else(|| FeederError::MissingSubstation(format!("substation `{id}` is not a node")))?,
            None => {
                let mut is_child = vec![false; records.len()];
                for &(_, b) in &raw {
                    is_child[b] = true;
                }
                let roots: Vec<usize> = (0..records.len()).filter(|&i| !is_child[i]).collect();
                match roots.as_slice() {
                    [r] => *r,
                    [] => return Err(FeederError::MissingSubstation("no node is free of a parent edge".into())),
                    _ => {
                        return Err(FeederError::MissingSubstation(
                            "several candidate roots; set `substation=` in [base]".into(),
                        ))
                    }
                }
            }
        };

        if raw.len() + 1 != records.len() {
            let line = edges.last().map_or(0, |e| e.line);
            return Err(FeederError::NonRadial {
                line,
                detail: format!(
                    "{} nodes need {} edges, found {}",
                    records.len(),
                    records.len() - 1,
                    raw.len()
                ),
            });
        }

        // Orient every edge away from the substation.
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); records.len()];
        for (e, &(a, b)) in raw.iter().enumerate() {
            adjacency[a].push(e);
            adjacency[b].push(e);
        }
        let mut oriented: Vec<Option<(usize, usize)>> = vec![None; raw.len()];
        let mut seen = vec![false; records.len()];
        let mut queue = std::collections::VecDeque::from([root]);
        seen[root] = true;
        let mut visited = 1;
        while let Some(n) = queue.pop_front() {
            for &e in &adjacency[n] {
                if oriented[e].is_some() {
                    continue;
                }
                let (a, b) = raw[e];
                let other = if a == n { b } else { a };
                oriented[e] = Some((n, other));
                if !seen[other] {
                    seen[other] = true;
                    visited += 1;
                    queue.push_back(other);
                }
            }
        }
        if visited != records.len() {
            let orphan = seen.iter().position(|s| !s).unwrap_or(0);
            return Err(FeederError::NonRadial {
                line: 0,
                detail: format!("node `{}` is not reachable from the substation", records[orphan].id),
            });
        }

        let edge_records: Vec<EdgeRecord> = edges
            .iter()
            .zip(&oriented)
            .map(|(spec, o)| {
                let (from, to) = o.expect("every edge is reached in a connected tree");
                EdgeRecord {
                    from,
                    to,
                    r_ohm: spec.r_ohm,
                    x_ohm: spec.x_ohm,
                    rated_amps: spec.rated_amps,
                }
            })
            .collect();

        Ok(FeederModel::assemble(base, records, edge_records, root))
    }
}

fn check_base(base: &FeederBase) -> Result<(), FeederError> {
    let positive = |v: f64, name: &str| {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(FeederError::InvalidValue {
                line: 0,
                msg: format!("[base] {name} must be positive, got {v}"),
            })
        }
    };
    positive(base.kv, "kv")?;
    positive(base.kva, "kva")?;
    positive(base.vsub_pu, "vsub_pu")?;
    positive(base.vmin_pu, "vmin_pu")?;
    positive(base.vmax_pu, "vmax_pu")?;
    if base.vmin_pu > base.vmax_pu {
        return Err(FeederError::InvalidValue {
            line: 0,
            msg: "[base] vmin_pu exceeds vmax_pu".into(),
        });
    }
    Ok(())
}

fn check_node(node: &NodeRecord, line: usize) -> Result<(), FeederError> {
    let vals = [node.load_kw, node.load_kvar, node.pv_max_kw, node.pv_min_kw];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(FeederError::InvalidValue {
            line,
            msg: format!("node `{}` has a non-finite value", node.id),
        });
    }
    if node.load_kw < 0.0 || node.load_kvar < 0.0 {
        return Err(FeederError::InvalidValue {
            line,
            msg: format!("node `{}` has a negative load", node.id),
        });
    }
    if node.pv_min_kw < 0.0 || node.pv_min_kw > node.pv_max_kw {
        return Err(FeederError::InvalidValue {
            line,
            msg: format!("node `{}` needs 0 <= pv_min_kw <= pv_max_kw", node.id),
        });
    }
    Ok(())
}

fn check_edge(spec: &EdgeSpec) -> Result<(), FeederError> {
    if !spec.r_ohm.is_finite() || !spec.x_ohm.is_finite() {
        return Err(FeederError::InvalidValue {
            line: spec.line,
            msg: "non-finite impedance".into(),
        });
    }
    if spec.r_ohm < 0.0 || spec.x_ohm < 0.0 {
        return Err(FeederError::NegativeImpedance {
            line: spec.line,
            from: spec.from.clone(),
            to: spec.to.clone(),
        });
    }
    if spec.r_ohm == 0.0 && spec.x_ohm == 0.0 {
        return Err(FeederError::InvalidValue {
            line: spec.line,
            msg: format!("edge {}-{} has zero impedance", spec.from, spec.to),
        });
    }
    if let Some(a) = spec.rated_amps {
        if !(a.is_finite() && a > 0.0) {
            return Err(FeederError::InvalidValue {
                line: spec.line,
                msg: format!("edge {}-{} rating must be positive", spec.from, spec.to),
            });
        }
    }
    Ok(())
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Returns false when `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

impl FeederModel {
    fn assemble(base: FeederBase, nodes: Vec<NodeRecord>, edges: Vec<EdgeRecord>, substation: usize) -> Self {
        let zb = base.impedance_ohm();
        let ib = base.current_amps();
        let kva = base.kva;
        let pu = PerUnit {
            load_p: nodes.iter().map(|n| n.load_kw / kva).collect(),
            load_q: nodes.iter().map(|n| n.load_kvar / kva).collect(),
            pv_lower: nodes.iter().map(|n| n.pv_min_kw / kva).collect(),
            pv_upper: nodes.iter().map(|n| n.pv_max_kw / kva).collect(),
            r: edges.iter().map(|e| e.r_ohm / zb).collect(),
            x: edges.iter().map(|e| e.x_ohm / zb).collect(),
            i_rated: edges
                .iter()
                .map(|e| e.rated_amps.map_or(DEFAULT_RATED_CURRENT_PU, |a| a / ib))
                .collect(),
            v_sub: base.vsub_pu * base.vsub_pu,
            v_min_sq: base.vmin_pu * base.vmin_pu,
            v_max_sq: base.vmax_pu * base.vmax_pu,
        };

        let mut children = vec![Vec::new(); nodes.len()];
        let mut parent_edge = vec![None; nodes.len()];
        for (e, edge) in edges.iter().enumerate() {
            children[edge.from].push(e);
            parent_edge[edge.to] = Some(e);
        }
        let mut order = Vec::with_capacity(edges.len());
        let mut queue = std::collections::VecDeque::from([substation]);
        while let Some(n) = queue.pop_front() {
            for &e in &children[n] {
                order.push(e);
                queue.push_back(edges[e].to);
            }
        }

        FeederModel {
            base,
            nodes,
            edges,
            substation,
            pu,
            topo: Topology {
                children,
                parent_edge,
                order,
            },
        }
    }

    pub fn base(&self) -> &FeederBase {
        &self.base
    }

    pub fn base_kva(&self) -> f64 {
        self.base.kva
    }

    pub fn base_kv(&self) -> f64 {
        self.base.kv
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn substation(&self) -> usize {
        self.substation
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node_id(&self, i: usize) -> &str {
        &self.nodes[i].id
    }

    pub fn edge_label(&self, e: usize) -> String {
        let edge = &self.edges[e];
        format!("{}-{}", self.nodes[edge.from].id, self.nodes[edge.to].id)
    }

    pub fn load_p(&self, i: usize) -> f64 {
        self.pu.load_p[i]
    }

    pub fn load_q(&self, i: usize) -> f64 {
        self.pu.load_q[i]
    }

    pub fn pv_lower(&self, i: usize) -> f64 {
        self.pu.pv_lower[i]
    }

    pub fn pv_upper(&self, i: usize) -> f64 {
        self.pu.pv_upper[i]
    }

    /// True when node `i` carries a PV injection the optimizer can move.
    pub fn has_pv(&self, i: usize) -> bool {
        self.pu.pv_upper[i] > self.pu.pv_lower[i]
    }

    pub fn r(&self, e: usize) -> f64 {
        self.pu.r[e]
    }

    pub fn x(&self, e: usize) -> f64 {
        self.pu.x[e]
    }

    pub fn z_sq(&self, e: usize) -> f64 {
        self.pu.r[e] * self.pu.r[e] + self.pu.x[e] * self.pu.x[e]
    }

    pub fn i_rated(&self, e: usize) -> f64 {
        self.pu.i_rated[e]
    }

    pub fn v_sub(&self) -> f64 {
        self.pu.v_sub
    }

    pub fn v_min_sq(&self) -> f64 {
        self.pu.v_min_sq
    }

    pub fn v_max_sq(&self) -> f64 {
        self.pu.v_max_sq
    }

    /// Edges leaving node `i`.
    pub fn children(&self, i: usize) -> &[usize] {
        &self.topo.children[i]
    }

    pub fn parent_edge(&self, i: usize) -> Option<usize> {
        self.topo.parent_edge[i]
    }

    /// Edge indices in breadth-first order from the substation.
    pub fn sweep_order(&self) -> &[usize] {
        &self.topo.order
    }

    pub fn total_load_p(&self) -> f64 {
        self.pu.load_p.iter().sum()
    }

    pub fn to_kw(&self, pu: f64) -> f64 {
        pu * self.base.kva
    }

    /// Copy with every load multiplied by `s.multiplier`.
    pub fn scale_loads(&self, s: LoadScaling) -> Result<FeederModel, FeederError> {
        if !(s.multiplier.is_finite() && s.multiplier > 0.0) {
            return Err(FeederError::InvalidMultiplier(s.multiplier));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeRecord {
                load_kw: n.load_kw * s.multiplier,
                load_kvar: n.load_kvar * s.multiplier,
                ..n.clone()
            })
            .collect();
        Ok(FeederModel::assemble(
            self.base.clone(),
            nodes,
            self.edges.clone(),
            self.substation,
        ))
    }

    /// Writes the model in the feeder file format.
    pub fn to_feeder_text(&self) -> String {
        let mut out = String::new();
        let b = &self.base;
        let _ = writeln!(out, "[base]");
        let _ = writeln!(out, "kv={}", b.kv);
        let _ = writeln!(out, "kva={}", b.kva);
        let _ = writeln!(out, "vsub_pu={}", b.vsub_pu);
        if b.vmin_pu != DEFAULT_VMIN_PU {
            let _ = writeln!(out, "vmin_pu={}", b.vmin_pu);
        }
        if b.vmax_pu != DEFAULT_VMAX_PU {
            let _ = writeln!(out, "vmax_pu={}", b.vmax_pu);
        }
        let _ = writeln!(out, "substation={}", self.nodes[self.substation].id);
        let _ = writeln!(out, "\n[nodes]\nid,load_kw,load_kvar,pv_max_kw");
        for n in &self.nodes {
            let _ = write!(out, "{},{},{},{}", n.id, n.load_kw, n.load_kvar, n.pv_max_kw);
            if n.pv_min_kw != 0.0 {
                let _ = write!(out, ",{}", n.pv_min_kw);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n[edges]\nfrom,to,r_ohm,x_ohm,rated_amps");
        for e in &self.edges {
            let rated = e.rated_amps.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.nodes[e.from].id, self.nodes[e.to].id, e.r_ohm, e.x_ohm, rated
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    Base,
    Nodes,
    Edges,
}

fn parse_number(field: &str, line: usize, what: &str) -> Result<f64, FeederError> {
    field.trim().parse::<f64>().map_err(|_| FeederError::Syntax {
        line,
        msg: format!("{what}: expected a number, found `{}`", field.trim()),
    })
}

/// Parses feeder-file text into a validated model.
pub fn parse_feeder(text: &str) -> Result<FeederModel, FeederError> {
    let mut section = None;
    let mut base = FeederBase::new(f64::NAN, f64::NAN);
    let mut builder_nodes: Vec<(NodeRecord, usize)> = Vec::new();
    let mut edges: Vec<EdgeSpec> = Vec::new();
    let mut substation = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            section = Some(match content {
                "[base]" => Section::Base,
                "[nodes]" => Section::Nodes,
                "[edges]" => Section::Edges,
                other => {
                    return Err(FeederError::Syntax {
                        line,
                        msg: format!("unknown section `{other}`"),
                    })
                }
            });
            continue;
        }
        match section {
            None => {
                return Err(FeederError::Syntax {
                    line,
                    msg: "data before the first section header".into(),
                })
            }
            Some(Section::Base) => {
                let (key, value) = content.split_once('=').ok_or_else(|| FeederError::Syntax {
                    line,
                    msg: "expected `key=value`".into(),
                })?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "kv" => base.kv = parse_number(value, line, "kv")?,
                    "kva" => base.kva = parse_number(value, line, "kva")?,
                    "vsub_pu" => base.vsub_pu = parse_number(value, line, "vsub_pu")?,
                    "vmin_pu" => base.vmin_pu = parse_number(value, line, "vmin_pu")?,
                    "vmax_pu" => base.vmax_pu = parse_number(value, line, "vmax_pu")?,
                    "substation" => substation = Some(value.to_string()),
                    other => {
                        return Err(FeederError::Syntax {
                            line,
                            msg: format!("unknown [base] key `{other}`"),
                        })
                    }
                }
            }
            Some(Section::Nodes) => {
                let fields: Vec<&str> = content.split(',').map(str::trim).collect();
                if fields[0] == "id" {
                    continue;
                }
                if !(3..=5).contains(&fields.len()) {
                    return Err(FeederError::Syntax {
                        line,
                        msg: format!("node row needs 3 to 5 fields, found {}", fields.len()),
                    });
                }
                if fields[0].is_empty() {
                    return Err(FeederError::Syntax {
                        line,
                        msg: "empty node id".into(),
                    });
                }
                let optional = |i: usize, what: &str| -> Result<f64, FeederError> {
                    match fields.get(i) {
                        Some(f) if !f.is_empty() => parse_number(f, line, what),
                        _ => Ok(0.0),
                    }
                };
                builder_nodes.push((
                    NodeRecord {
                        id: fields[0].to_string(),
                        load_kw: parse_number(fields[1], line, "load_kw")?,
                        load_kvar: parse_number(fields[2], line, "load_kvar")?,
                        pv_max_kw: optional(3, "pv_max_kw")?,
                        pv_min_kw: optional(4, "pv_min_kw")?,
                    },
                    line,
                ));
            }
            Some(Section::Edges) => {
                let fields: Vec<&str> = content.split(',').map(str::trim).collect();
                if fields[0] == "from" {
                    continue;
                }
                if !(4..=5).contains(&fields.len()) {
                    return Err(FeederError::Syntax {
                        line,
                        msg: format!("edge row needs 4 or 5 fields, found {}", fields.len()),
                    });
                }
                let rated_amps = match fields.get(4) {
                    Some(f) if !f.is_empty() => Some(parse_number(f, line, "rated_amps")?),
                    _ => None,
                };
                edges.push(EdgeSpec {
                    from: fields[0].to_string(),
                    to: fields[1].to_string(),
                    r_ohm: parse_number(fields[2], line, "r_ohm")?,
                    x_ohm: parse_number(fields[3], line, "x_ohm")?,
                    rated_amps,
                    line,
                });
            }
        }
    }

    if base.kv.is_nan() || base.kva.is_nan() {
        return Err(FeederError::Syntax {
            line: 0,
            msg: "[base] must define kv and kva".into(),
        });
    }

    let builder = FeederBuilder {
        base,
        substation,
        nodes: builder_nodes,
        edges,
    };
    builder.build()
}

/// Feeder files shipped with the crate, by short name.
pub fn bundled_feeder(name: &str) -> Option<&'static str> {
    match name {
        "ieee13" => Some(include_str!("../data/ieee13.feeder")),
        "ieee123" => Some(include_str!("../data/ieee123.feeder")),
        "two_bus" => Some(include_str!("../data/two_bus.feeder")),
        "two_bus_zero_load" => Some(include_str!("../data/two_bus_zero_load.feeder")),
        _ => None,
    }
}

pub const BUNDLED_FEEDERS: &[&str] = &["ieee13", "ieee123", "two_bus", "two_bus_zero_load"];
