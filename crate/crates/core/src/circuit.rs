//! Zero-dimensional lumped-parameter blood-flow circuits.
//!
//! A network is a tree of branches hanging off a single inlet driven by a
//! prescribed periodic flow. Each branch is a chain of vessel segments
//! (series resistance and inertance, shunt compliance at the distal end) with
//! an optional nonlinear stenosis resistor, and every leaf branch ends in a
//! three-element RCR Windkessel.
//!
//! Units are CGS throughout: pressure in dyn/cm², flow in cm³/s, resistance in
//! dyn·s/cm⁵, compliance in cm⁵/dyn, inertance in dyn·s²/cm⁵.

use crate::inflow::FourierInflow;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

/// dyn/cm² per mmHg.
pub const MMHG: f64 = 1333.22;

/// Loss coefficient of the expansion-loss stenosis closure.
pub const STENOSIS_KT: f64 = 1.52;
/// Blood density [g/cm³].
pub const BLOOD_DENSITY: f64 = 1.06;
/// Blood dynamic viscosity [P].
pub const BLOOD_VISCOSITY: f64 = 0.04;

/// Any state beyond this magnitude is treated as a blow-up.
const BLOWUP_GUARD: f64 = 1e12;
/// Largest `dt·λ` accepted for classical RK4 (real-axis limit is ≈2.785).
const RK4_STABILITY: f64 = 2.5;
/// Leading cycles after which the state is shifted onto the steady-state mean.
const MEAN_CORRECTION_CYCLES: usize = 2;
const MAX_EXTRAPOLATIONS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum CircuitError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("time step {dt} exceeds stability estimate {max_dt}")]
    StepTooLarge { dt: f64, max_dt: f64 },
    #[error("bad simulation settings: {0}")]
    BadSettings(String),
    #[error("no periodic state after {cycles} cycles (last relative change {change:.3e})")]
    NonConvergent { cycles: usize, change: f64 },
    #[error("numerical blow-up at t = {t}")]
    NumericalBlowup { t: f64 },
    #[error("empty trace")]
    EmptyTrace,
    #[error("trace export: {0}")]
    Csv(#[from] csv::Error),
    #[error("topology io: {0}")]
    Io(#[from] std::io::Error),
    #[error("topology format: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CircuitError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct VesselElement {
    pub r: f64,
    pub c: f64,
    #[serde(default)]
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StenosisElement {
    pub r_lin: f64,
    pub s_quad: f64,
}

impl StenosisElement {
    /// Expansion-loss closure for a lesion with diameter reduction `severity`
    /// over `length` cm of a vessel with reference lumen area `area0`:
    /// `S = K·ρ/(2·A0²)·(A0/A_s − 1)²` and Poiseuille `R = 8πμℓ/A_s²`, with
    /// `A_s = A0·(1 − severity)²`.
    pub fn from_geometry(area0: f64, severity: f64, length: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&severity) || area0 <= 0.0 || length < 0.0 {
            return Err(CircuitError::InvalidTopology(format!(
                "stenosis needs area0 > 0, length ≥ 0, severity in [0,1), got {area0}, {length}, {severity}"
            )));
        }
        let a_s = area0 * (1.0 - severity).powi(2);
        Ok(Self {
            r_lin: 8.0 * std::f64::consts::PI * BLOOD_VISCOSITY * length / (a_s * a_s),
            s_quad: STENOSIS_KT * BLOOD_DENSITY / (2.0 * area0 * area0) * (area0 / a_s - 1.0).powi(2),
        })
    }
}

/// Pressure drop across a stenosis, `R·q + S·q·|q|`.
pub fn stenosis_dp(q: f64, s: &StenosisElement) -> f64 {
    s.r_lin * q + s.s_quad * q * q.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcrBoundary {
    pub rp: f64,
    pub c: f64,
    pub rd: f64,
    #[serde(default)]
    pub p_ref: f64,
}

impl RcrBoundary {
    pub fn time_constant(&self) -> f64 {
        self.rd * self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StenosisLocation {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl StenosisLocation {
    pub const ALL: [StenosisLocation; 6] = [
        StenosisLocation::A,
        StenosisLocation::B,
        StenosisLocation::C,
        StenosisLocation::D,
        StenosisLocation::E,
        StenosisLocation::F,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for StenosisLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

// ---------------------------------------------------------------------------
// Topology configuration
// ---------------------------------------------------------------------------

/// Where a stenosis tag sits: after segment `segment` of branch `branch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub branch: String,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StenosisSpec {
    Coefficients {
        location: StenosisLocation,
        r_lin: f64,
        s_quad: f64,
    },
    Geometry {
        location: StenosisLocation,
        severity: f64,
        area0: f64,
        #[serde(default = "default_lesion_length")]
        length: f64,
    },
}

fn default_lesion_length() -> f64 {
    1.0
}

impl StenosisSpec {
    pub fn location(&self) -> StenosisLocation {
        match self {
            StenosisSpec::Coefficients { location, .. } | StenosisSpec::Geometry { location, .. } => {
                *location
            }
        }
    }

    pub fn element(&self) -> Result<StenosisElement> {
        match *self {
            StenosisSpec::Coefficients { r_lin, s_quad, .. } => Ok(StenosisElement { r_lin, s_quad }),
            StenosisSpec::Geometry {
                severity,
                area0,
                length,
                ..
            } => StenosisElement::from_geometry(area0, severity, length),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub segments: Vec<VesselElement>,
    #[serde(default)]
    pub outlet: Option<RcrBoundary>,
    #[serde(default)]
    pub side: Option<Side>,
}

/// JSON-facing description of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub branches: Vec<BranchConfig>,
    #[serde(default)]
    pub stations: HashMap<StenosisLocation, Station>,
    #[serde(default)]
    pub stenoses: Vec<StenosisSpec>,
    #[serde(default = "default_inflow_id")]
    pub inflow: String,
}

fn default_inflow_id() -> String {
    "inflow".to_string()
}

impl TopologyConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn branch_mut(&mut self, name: &str) -> Option<&mut BranchConfig> {
        self.branches.iter_mut().find(|b| b.name == name)
    }

    /// Outlet boundaries in branch order.
    pub fn outlets_mut(&mut self) -> impl Iterator<Item = &mut RcrBoundary> {
        self.branches.iter_mut().filter_map(|b| b.outlet.as_mut())
    }
}

// ---------------------------------------------------------------------------
// Validated network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AttachedStenosis {
    pub location: StenosisLocation,
    pub segment: usize,
    pub element: StenosisElement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub name: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub segments: Vec<VesselElement>,
    pub stenosis: Option<AttachedStenosis>,
    pub outlet: Option<RcrBoundary>,
    pub side: Option<Side>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitNetwork {
    branches: Vec<Branch>,
    root: usize,
    /// Branch index of every outlet, in branch order.
    outlets: Vec<usize>,
    inflow_id: String,
}

fn finite_nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

fn finite_pos(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Validates a topology config and attaches stenoses at their stations.
pub fn build_network(cfg: &TopologyConfig) -> Result<CircuitNetwork> {
    let bad = |m: String| Err(CircuitError::InvalidTopology(m));
    if cfg.branches.is_empty() {
        return bad("no branches".into());
    }
    let mut index = HashMap::new();
    for (i, b) in cfg.branches.iter().enumerate() {
        if index.insert(b.name.as_str(), i).is_some() {
            return bad(format!("duplicate branch name {}", b.name));
        }
    }
    let mut branches = Vec::with_capacity(cfg.branches.len());
    let mut roots = Vec::new();
    for (i, b) in cfg.branches.iter().enumerate() {
        let parent = match &b.parent {
            None => {
                roots.push(i);
                None
            }
            Some(p) => match index.get(p.as_str()) {
                Some(&j) => Some(j),
                None => return bad(format!("branch {} has unknown parent {p}", b.name)),
            },
        };
        for (k, s) in b.segments.iter().enumerate() {
            if !(finite_nonneg(s.r) && finite_nonneg(s.c) && finite_nonneg(s.l)) {
                return bad(format!(
                    "segment {k} of {} needs R, C, L ≥ 0, got {:?}",
                    b.name, s
                ));
            }
        }
        if let Some(o) = &b.outlet {
            if !(finite_pos(o.rp) && finite_pos(o.c) && finite_pos(o.rd) && o.p_ref.is_finite()) {
                return bad(format!(
                    "outlet of {} needs Rp, C, Rd > 0, got {:?}",
                    b.name, o
                ));
            }
        }
        branches.push(Branch {
            name: b.name.clone(),
            parent,
            children: Vec::new(),
            segments: b.segments.clone(),
            stenosis: None,
            outlet: b.outlet,
            side: b.side,
        });
    }
    if roots.len() != 1 {
        return bad(format!("need exactly one inlet branch, found {}", roots.len()));
    }
    let root = roots[0];
    for i in 0..branches.len() {
        // every parent chain must reach the root without revisiting a branch
        let mut seen = 0;
        let mut cur = i;
        while let Some(p) = branches[cur].parent {
            cur = p;
            seen += 1;
            if seen > branches.len() {
                return bad(format!("cycle through branch {}", branches[i].name));
            }
        }
        if let Some(p) = branches[i].parent {
            branches[p].children.push(i);
        }
    }
    let mut outlets = Vec::new();
    for (i, b) in branches.iter().enumerate() {
        match (b.children.is_empty(), b.outlet.is_some()) {
            (true, true) => outlets.push(i),
            (true, false) => return bad(format!("leaf branch {} has no outlet BC", b.name)),
            (false, true) => {
                return bad(format!("internal branch {} carries an outlet BC", b.name))
            }
            (false, false) => {}
        }
    }
    for spec in &cfg.stenoses {
        let loc = spec.location();
        let Some(station) = cfg.stations.get(&loc) else {
            return bad(format!("no station defined for stenosis location {loc}"));
        };
        let Some(&bi) = index.get(station.branch.as_str()) else {
            return bad(format!("station {loc} references unknown branch {}", station.branch));
        };
        let element = spec.element()?;
        if !(finite_nonneg(element.r_lin) && finite_nonneg(element.s_quad)) {
            return bad(format!("stenosis at {loc} needs nonnegative coefficients"));
        }
        let branch = &mut branches[bi];
        if station.segment >= branch.segments.len().max(1) {
            return bad(format!("station {loc} segment {} out of range", station.segment));
        }
        if branch.stenosis.is_some() {
            return bad(format!("branch {} already carries a stenosis", branch.name));
        }
        branch.stenosis = Some(AttachedStenosis {
            location: loc,
            segment: station.segment,
            element,
        });
    }
    let net = CircuitNetwork {
        branches,
        root,
        outlets,
        inflow_id: cfg.inflow.clone(),
    };
    // surfaces zero-compliance junctions and short circuits up front
    Compiled::new(&net)?;
    Ok(net)
}

impl CircuitNetwork {
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn n_outlets(&self) -> usize {
        self.outlets.len()
    }

    pub fn inflow_id(&self) -> &str {
        &self.inflow_id
    }

    pub fn outlet_names(&self) -> Vec<String> {
        self.outlets
            .iter()
            .map(|&i| self.branches[i].name.clone())
            .collect()
    }

    pub fn outlet_bcs(&self) -> Vec<RcrBoundary> {
        self.outlets
            .iter()
            .map(|&i| self.branches[i].outlet.unwrap())
            .collect()
    }

    /// Replaces outlet boundary conditions (in outlet order).
    pub fn set_outlet_bcs(&mut self, bcs: &[RcrBoundary]) -> Result<()> {
        if bcs.len() != self.outlets.len() {
            return Err(CircuitError::InvalidTopology(format!(
                "expected {} outlet BCs, got {}",
                self.outlets.len(),
                bcs.len()
            )));
        }
        for bc in bcs {
            if !(finite_pos(bc.rp) && finite_pos(bc.c) && finite_pos(bc.rd)) {
                return Err(CircuitError::InvalidTopology(format!(
                    "outlet needs Rp, C, Rd > 0, got {bc:?}"
                )));
            }
        }
        for (&i, bc) in self.outlets.iter().zip(bcs) {
            self.branches[i].outlet = Some(*bc);
        }
        Ok(())
    }

    /// Outlet index designated as "left" for flow-split reporting.
    pub fn left_outlet(&self) -> usize {
        self.outlets
            .iter()
            .position(|&i| self.branches[i].side == Some(Side::Left))
            .or_else(|| {
                self.outlets
                    .iter()
                    .position(|&i| self.branches[i].name.to_lowercase().contains("left"))
            })
            .unwrap_or(0)
    }

    /// Outlet index on a given side, if tagged.
    pub fn outlet_on_side(&self, side: Side) -> Option<usize> {
        self.outlets
            .iter()
            .position(|&i| self.branches[i].side == Some(side))
    }

    pub fn stenoses(&self) -> impl Iterator<Item = (&Branch, &AttachedStenosis)> {
        self.branches
            .iter()
            .filter_map(|b| b.stenosis.as_ref().map(|s| (b, s)))
    }

    /// Outlet index downstream of the branch carrying a stenosis (first
    /// outlet reached depth-first).
    pub fn outlet_below(&self, branch: usize) -> Option<usize> {
        let mut cur = branch;
        loop {
            if let Some(k) = self.outlets.iter().position(|&o| o == cur) {
                return Some(k);
            }
            cur = *self.branches[cur].children.first()?;
        }
    }
}

// ---------------------------------------------------------------------------
// Compiled state-space form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum From {
    Inlet,
    Node(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum To {
    Node(usize),
    Outlet(usize),
}

#[derive(Debug, Clone, Copy, Default)]
struct Series {
    r: f64,
    l: f64,
    s: f64,
    r_lin_sten: f64,
}

impl Series {
    fn add_vessel(&mut self, v: &VesselElement) {
        self.r += v.r;
        self.l += v.l;
    }

    fn add_stenosis(&mut self, s: &StenosisElement) {
        self.r_lin_sten += s.r_lin;
        self.s += s.s_quad;
    }

    fn resistance(&self) -> f64 {
        self.r + self.r_lin_sten
    }

    fn is_empty(&self) -> bool {
        self.resistance() == 0.0 && self.l == 0.0 && self.s == 0.0
    }
}

#[derive(Debug, Clone)]
struct Edge {
    from: From,
    to: To,
    /// Total linear resistance (vessel + stenosis linear part + Rp for outlets).
    r: f64,
    l: f64,
    s: f64,
    /// Index into the state vector when the edge carries an inductor state.
    state: Option<usize>,
}

#[derive(Debug, Clone)]
struct Compiled {
    caps: Vec<f64>,
    edges: Vec<Edge>,
    /// Outgoing edges per capacitive node.
    node_out: Vec<Vec<usize>>,
    /// Incoming edge per capacitive node.
    node_in: Vec<usize>,
    outlets: Vec<RcrBoundary>,
    outlet_edge: Vec<usize>,
    inlet_edge: usize,
    n_states: usize,
}

impl Compiled {
    fn new(net: &CircuitNetwork) -> Result<Self> {
        let mut c = Compiled {
            caps: Vec::new(),
            edges: Vec::new(),
            node_out: Vec::new(),
            node_in: Vec::new(),
            outlets: Vec::new(),
            outlet_edge: vec![usize::MAX; net.outlets.len()],
            inlet_edge: usize::MAX,
            n_states: 0,
        };
        c.walk(net, net.root, From::Inlet, Series::default())?;
        let inlet_edges: Vec<usize> = c
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.from == From::Inlet)
            .map(|(i, _)| i)
            .collect();
        if inlet_edges.len() != 1 {
            return Err(CircuitError::InvalidTopology(
                "the inlet must feed exactly one series path (add a compliant segment before the first junction)".into(),
            ));
        }
        c.inlet_edge = inlet_edges[0];
        c.outlets = net.outlet_bcs();
        // state layout: node pressures, inductor flows, outlet capacitor pressures
        let mut next = c.caps.len();
        for (i, e) in c.edges.iter_mut().enumerate() {
            if e.l > 0.0 && i != c.inlet_edge {
                e.state = Some(next);
                next += 1;
            }
        }
        c.n_states = next + c.outlets.len();
        for e in &c.edges {
            if e.l == 0.0 && e.r == 0.0 && e.s == 0.0 && e.from != From::Inlet {
                return Err(CircuitError::InvalidTopology(
                    "zero-impedance connection between two compliant nodes".into(),
                ));
            }
        }
        Ok(c)
    }

    fn add_node(&mut self, cap: f64, in_edge: usize) -> usize {
        self.caps.push(cap);
        self.node_out.push(Vec::new());
        self.node_in.push(in_edge);
        self.caps.len() - 1
    }

    fn push_edge(&mut self, from: From, to: To, series: &Series) -> usize {
        self.edges.push(Edge {
            from,
            to,
            r: series.resistance(),
            l: series.l,
            s: series.s,
            state: None,
        });
        let id = self.edges.len() - 1;
        if let From::Node(n) = from {
            self.node_out[n].push(id);
        }
        id
    }

    fn walk(
        &mut self,
        net: &CircuitNetwork,
        bi: usize,
        mut upstream: From,
        mut pending: Series,
    ) -> Result<()> {
        let branch = &net.branches[bi];
        let sten = branch.stenosis.as_ref();
        if branch.segments.is_empty() {
            if let Some(s) = sten {
                pending.add_stenosis(&s.element);
            }
        }
        for (k, seg) in branch.segments.iter().enumerate() {
            pending.add_vessel(seg);
            if let Some(s) = sten.filter(|s| s.segment == k) {
                pending.add_stenosis(&s.element);
            }
            if seg.c > 0.0 {
                let edge = self.edges.len();
                let node = self.add_node(seg.c, edge);
                self.push_edge(upstream, To::Node(node), &pending);
                upstream = From::Node(node);
                pending = Series::default();
            }
        }
        if let Some(bc) = &branch.outlet {
            let k = net.outlets.iter().position(|&o| o == bi).unwrap();
            let mut series = pending;
            series.r += bc.rp;
            let id = self.push_edge(upstream, To::Outlet(k), &series);
            self.outlet_edge[k] = id;
            return Ok(());
        }
        if !pending.is_empty() || (upstream == From::Inlet && branch.children.len() > 1) {
            return Err(CircuitError::InvalidTopology(format!(
                "branch {} ends in a junction without compliance; give its last segment C > 0",
                branch.name
            )));
        }
        for &child in &branch.children {
            self.walk(net, child, upstream, Series::default())?;
        }
        Ok(())
    }

    fn outlet_state(&self, k: usize) -> usize {
        self.n_states - self.outlets.len() + k
    }

    /// Flow through a resistive edge for a given pressure drop:
    /// solves `R q + S q|q| = Δp`.
    fn resistive_flow(r: f64, s: f64, dp: f64) -> f64 {
        if s == 0.0 {
            dp / r
        } else {
            dp.signum() * 2.0 * dp.abs() / (r + (r * r + 4.0 * s * dp.abs()).sqrt())
        }
    }

    fn downstream_pressure(&self, to: To, y: &[f64]) -> f64 {
        match to {
            To::Node(n) => y[n],
            To::Outlet(k) => y[self.outlet_state(k)],
        }
    }

    /// Flows of every edge for state `y` and inflow `q_in`.
    fn edge_flows(&self, y: &[f64], q_in: f64, flows: &mut [f64]) {
        for (i, e) in self.edges.iter().enumerate() {
            flows[i] = if i == self.inlet_edge {
                q_in
            } else if let Some(si) = e.state {
                y[si]
            } else {
                let pu = match e.from {
                    From::Node(n) => y[n],
                    From::Inlet => unreachable!("only the inlet edge starts at the inlet"),
                };
                Self::resistive_flow(e.r, e.s, pu - self.downstream_pressure(e.to, y))
            };
        }
    }

    fn rhs(&self, y: &[f64], q_in: f64, flows: &mut [f64], dy: &mut [f64]) {
        self.edge_flows(y, q_in, flows);
        dy.iter_mut().for_each(|v| *v = 0.0);
        for (i, e) in self.edges.iter().enumerate() {
            let q = flows[i];
            if let From::Node(n) = e.from {
                dy[n] -= q;
            }
            match e.to {
                To::Node(n) => dy[n] += q,
                To::Outlet(k) => dy[self.outlet_state(k)] += q,
            }
            if let Some(si) = e.state {
                let pu = match e.from {
                    From::Node(n) => y[n],
                    From::Inlet => unreachable!(),
                };
                let pv = self.downstream_pressure(e.to, y);
                dy[si] = (pu - pv - e.r * q - e.s * q * q.abs()) / e.l;
            }
        }
        for (n, c) in self.caps.iter().enumerate() {
            dy[n] /= c;
        }
        for (k, bc) in self.outlets.iter().enumerate() {
            let si = self.outlet_state(k);
            dy[si] = (dy[si] - (y[si] - bc.p_ref) / bc.rd) / bc.c;
        }
    }

    /// Inlet pressure (algebraic: the inlet edge carries the prescribed flow).
    fn inlet_pressure(&self, y: &[f64], q_in: f64, dq_in: f64) -> f64 {
        let e = &self.edges[self.inlet_edge];
        self.downstream_pressure(e.to, y) + e.r * q_in + e.s * q_in * q_in.abs() + e.l * dq_in
    }

    fn outlet_pressure(&self, k: usize, y: &[f64], q: f64) -> f64 {
        y[self.outlet_state(k)] + self.outlets[k].rp * q
    }

    /// Upper estimate of the fastest decay rate of the linearized system.
    fn stiffness(&self) -> f64 {
        let mut lam: f64 = 0.0;
        let mut node_g = vec![0.0; self.caps.len()];
        let mut outlet_g: Vec<f64> = self.outlets.iter().map(|o| 1.0 / o.rd).collect();
        for (i, e) in self.edges.iter().enumerate() {
            if i == self.inlet_edge {
                continue;
            }
            if e.state.is_some() {
                lam = lam.max(e.r / e.l);
                let c_min = match (e.from, e.to) {
                    (From::Node(a), To::Node(b)) => self.caps[a].min(self.caps[b]),
                    (From::Node(a), To::Outlet(k)) => self.caps[a].min(self.outlets[k].c),
                    _ => f64::INFINITY,
                };
                lam = lam.max(2.0 / (e.l * c_min).sqrt());
                continue;
            }
            let g = 1.0 / e.r;
            if let From::Node(n) = e.from {
                node_g[n] += g;
            }
            match e.to {
                To::Node(n) => node_g[n] += g,
                To::Outlet(k) => outlet_g[k] += g,
            }
        }
        for (g, c) in node_g.iter().zip(&self.caps) {
            lam = lam.max(2.0 * g / c);
        }
        for (g, o) in outlet_g.iter().zip(&self.outlets) {
            lam = lam.max(2.0 * g / o.c);
        }
        lam
    }

    /// Steady state under constant inflow `q`, by fixed-point iteration on the
    /// secant-linearized resistive tree.
    fn dc_state(&self, q: f64) -> Vec<f64> {
        let n_edges = self.edges.len();
        let mut flows = vec![0.0; n_edges];
        // initial guess: linear resistances only
        let mut r_eff: Vec<f64> = self.edges.iter().map(|e| e.r).collect();
        let mut pressures = vec![0.0; self.caps.len()];
        for _ in 0..100 {
            let thev = self.thevenin(&r_eff);
            self.distribute(q, &r_eff, &thev, &mut flows, &mut pressures);
            let mut change: f64 = 0.0;
            for (i, e) in self.edges.iter().enumerate() {
                let new = e.r + e.s * flows[i].abs();
                change = change.max((new - r_eff[i]).abs() / new.max(1e-300));
                // damped update keeps the iteration monotone for strong stenoses
                r_eff[i] = 0.5 * (r_eff[i] + new);
            }
            if change < 1e-13 {
                break;
            }
        }
        let mut y = vec![0.0; self.n_states];
        y[..self.caps.len()].copy_from_slice(&pressures);
        for (i, e) in self.edges.iter().enumerate() {
            if let Some(si) = e.state {
                y[si] = flows[i];
            }
        }
        for (k, bc) in self.outlets.iter().enumerate() {
            y[self.outlet_state(k)] = bc.p_ref + bc.rd * flows[self.outlet_edge[k]];
        }
        y
    }

    /// Thevenin equivalent `(R, P0)` seen from the start of every edge:
    /// `P_start = P0 + R·q`.
    fn thevenin(&self, r_eff: &[f64]) -> Vec<(f64, f64)> {
        let mut memo = vec![(f64::NAN, f64::NAN); self.edges.len()];
        fn visit(c: &Compiled, r_eff: &[f64], i: usize, memo: &mut [(f64, f64)]) -> (f64, f64) {
            if !memo[i].0.is_nan() {
                return memo[i];
            }
            let (r_down, p_down) = match c.edges[i].to {
                To::Outlet(k) => (c.outlets[k].rd, c.outlets[k].p_ref),
                To::Node(n) => {
                    let (mut g, mut gp) = (0.0, 0.0);
                    for &j in &c.node_out[n] {
                        let (r, p) = visit(c, r_eff, j, memo);
                        g += 1.0 / r;
                        gp += p / r;
                    }
                    (1.0 / g, gp / g)
                }
            };
            memo[i] = (r_down + r_eff[i], p_down);
            memo[i]
        }
        for i in 0..self.edges.len() {
            visit(self, r_eff, i, &mut memo);
        }
        memo
    }

    fn distribute(
        &self,
        q: f64,
        r_eff: &[f64],
        thev: &[(f64, f64)],
        flows: &mut [f64],
        pressures: &mut [f64],
    ) {
        let mut stack = vec![(self.inlet_edge, q)];
        while let Some((i, qi)) = stack.pop() {
            flows[i] = qi;
            if let To::Node(n) = self.edges[i].to {
                let (r, p0) = thev[i];
                let p_start = p0 + r * qi;
                let p_node = p_start - r_eff[i] * qi;
                pressures[n] = p_node;
                for &j in &self.node_out[n] {
                    let (rj, pj) = thev[j];
                    stack.push((j, (p_node - pj) / rj));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub dt: f64,
    pub n_cycles: usize,
    pub periodicity_tol: f64,
    /// Fail with `NonConvergent` instead of returning the last cycle.
    pub strict: bool,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_cycles: 10,
            periodicity_tol: 1e-4,
            strict: false,
        }
    }
}

/// Final-cycle traces on a uniform grid over `[0, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTraces {
    pub t: Vec<f64>,
    pub p_in: Vec<f64>,
    pub q_out: Vec<Vec<f64>>,
    pub p_out: Vec<Vec<f64>>,
    pub outlet_names: Vec<String>,
    pub left_outlet: usize,
    pub period: f64,
    pub cycles: usize,
    pub converged: bool,
}

/// Lumped simulator bound to one network.
#[derive(Debug, Clone)]
pub struct Simulator {
    compiled: Compiled,
    outlet_names: Vec<String>,
    left_outlet: usize,
}

/// Instantaneous outputs at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub p_in: f64,
    pub q_out: Vec<f64>,
    pub p_out: Vec<f64>,
    pub outlet_cap: Vec<f64>,
}

impl Simulator {
    pub fn new(net: &CircuitNetwork) -> Result<Self> {
        Ok(Self {
            compiled: Compiled::new(net)?,
            outlet_names: net.outlet_names(),
            left_outlet: net.left_outlet(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.compiled.n_states
    }

    /// Largest time step the RK4 stability guard accepts.
    pub fn max_stable_dt(&self) -> f64 {
        RK4_STABILITY / self.compiled.stiffness()
    }

    /// State vector at the steady operating point for constant inflow `q`.
    pub fn steady_state(&self, q: f64) -> Vec<f64> {
        self.compiled.dc_state(q)
    }

    fn sample_into(&self, t: f64, y: &[f64], q_in: f64, dq_in: f64, flows: &mut [f64], s: &mut Sample) {
        let c = &self.compiled;
        c.edge_flows(y, q_in, flows);
        s.t = t;
        s.p_in = c.inlet_pressure(y, q_in, dq_in);
        for (k, &e) in c.outlet_edge.iter().enumerate() {
            s.q_out[k] = flows[e];
            s.p_out[k] = c.outlet_pressure(k, y, flows[e]);
            s.outlet_cap[k] = y[c.outlet_state(k)];
        }
    }

    /// Integrates from `y` over `[t0, t0 + n_steps·dt]` with RK4, calling
    /// `record` with the outputs at the start of every step. The inflow
    /// callback returns `(q, dq/dt)`.
    pub fn integrate<F, G>(
        &self,
        y: &mut [f64],
        t0: f64,
        dt: f64,
        n_steps: usize,
        inflow: F,
        record: G,
    ) -> Result<()>
    where
        F: Fn(f64) -> (f64, f64),
        G: FnMut(&Sample),
    {
        self.integrate_inner(y, t0, dt, n_steps, inflow, record, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate_inner<F, G>(
        &self,
        y: &mut [f64],
        t0: f64,
        dt: f64,
        n_steps: usize,
        inflow: F,
        mut record: G,
        mut state_sum: Option<&mut [f64]>,
    ) -> Result<()>
    where
        F: Fn(f64) -> (f64, f64),
        G: FnMut(&Sample),
    {
        let c = &self.compiled;
        let max_dt = self.max_stable_dt();
        if dt > max_dt {
            return Err(CircuitError::StepTooLarge { dt, max_dt });
        }
        let n = y.len();
        let mut flows = vec![0.0; c.edges.len()];
        let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let n_out = c.outlets.len();
        let mut sample = Sample {
            t: t0,
            p_in: 0.0,
            q_out: vec![0.0; n_out],
            p_out: vec![0.0; n_out],
            outlet_cap: vec![0.0; n_out],
        };
        for step in 0..n_steps {
            let t = t0 + step as f64 * dt;
            let (q0, dq0) = inflow(t);
            self.sample_into(t, y, q0, dq0, &mut flows, &mut sample);
            record(&sample);
            if let Some(sum) = state_sum.as_deref_mut() {
                for (a, b) in sum.iter_mut().zip(y.iter()) {
                    *a += b;
                }
            }
            let (qh, _) = inflow(t + 0.5 * dt);
            let (q1, _) = inflow(t + dt);
            c.rhs(y, q0, &mut flows, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            c.rhs(&tmp, qh, &mut flows, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            c.rhs(&tmp, qh, &mut flows, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + dt * k3[i];
            }
            c.rhs(&tmp, q1, &mut flows, &mut k4);
            let mut blown = false;
            for i in 0..n {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                blown |= !y[i].is_finite() || y[i].abs() > BLOWUP_GUARD;
            }
            if blown {
                return Err(CircuitError::NumericalBlowup { t: t + dt });
            }
        }
        Ok(())
    }

    /// Runs cycles until the inlet pressure is periodic; returns the last one.
    pub fn simulate(&self, inflow: &FourierInflow, settings: &SimSettings) -> Result<TimeTraces> {
        let period = inflow.period;
        if !(period.is_finite() && period > 0.0) {
            return Err(CircuitError::BadSettings(format!("period {period}")));
        }
        if !(settings.dt > 0.0 && settings.dt < period / 100.0) {
            return Err(CircuitError::BadSettings(format!(
                "dt must lie in (0, T/100), got {} for T = {period}",
                settings.dt
            )));
        }
        if settings.n_cycles < 2 {
            return Err(CircuitError::BadSettings("n_cycles must be at least 2".into()));
        }
        let n_steps = (period / settings.dt).ceil() as usize;
        let dt = period / n_steps as f64;
        let n_out = self.compiled.outlets.len();
        let y_dc = self.steady_state(inflow.a0);
        let mut y = y_dc.clone();
        let mut state_sum = vec![0.0; y.len()];
        let mut prev: Option<Vec<f64>> = None;
        let mut change = f64::INFINITY;
        // Tabulate the inflow on the half-step grid once; RK4 only evaluates
        // it at multiples of dt/2.
        let half = 0.5 * dt;
        let table: Vec<(f64, f64)> = (0..=2 * n_steps)
            .map(|j| {
                let t = j as f64 * half;
                (inflow.eval(t), inflow.eval_derivative(t))
            })
            .collect();
        let source = |t: f64| table[((t / half).round() as usize).min(2 * n_steps)];
        let mut ends: Vec<Vec<f64>> = Vec::new();
        let mut extrapolated = 0;
        for cycle in 1..=settings.n_cycles {
            let mut tr = TimeTraces {
                t: Vec::with_capacity(n_steps),
                p_in: Vec::with_capacity(n_steps),
                q_out: vec![Vec::with_capacity(n_steps); n_out],
                p_out: vec![Vec::with_capacity(n_steps); n_out],
                outlet_names: self.outlet_names.clone(),
                left_outlet: self.left_outlet,
                period,
                cycles: cycle,
                converged: false,
            };
            state_sum.iter_mut().for_each(|v| *v = 0.0);
            self.integrate_inner(
                &mut y,
                0.0,
                dt,
                n_steps,
                source,
                |s| {
                    tr.t.push(s.t);
                    tr.p_in.push(s.p_in);
                    for k in 0..n_out {
                        tr.q_out[k].push(s.q_out[k]);
                        tr.p_out[k].push(s.p_out[k]);
                    }
                },
                Some(&mut state_sum),
            )?;
            if cycle <= MEAN_CORRECTION_CYCLES {
                // The cycle mean of a periodic orbit sits at the steady state of
                // the mean inflow (exactly so without stenoses); removing the
                // offset cancels most of the slow Windkessel transient.
                for ((v, sum), dc) in y.iter_mut().zip(&state_sum).zip(&y_dc) {
                    *v += dc - sum / n_steps as f64;
                }
            }
            ends.push(y.clone());
            if extrapolated < MAX_EXTRAPOLATIONS {
                if let Some(y_new) = geometric_limit(&ends) {
                    y.copy_from_slice(&y_new);
                    ends.clear();
                    ends.push(y_new);
                    extrapolated += 1;
                }
            }
            if let Some(p) = &prev {
                let scale = tr.p_in.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                change = tr
                    .p_in
                    .iter()
                    .zip(p)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                    / scale;
                if change < settings.periodicity_tol {
                    tr.converged = true;
                    return Ok(tr);
                }
            }
            if cycle == settings.n_cycles {
                if settings.strict {
                    return Err(CircuitError::NonConvergent {
                        cycles: cycle,
                        change,
                    });
                }
                return Ok(tr);
            }
            prev = Some(tr.p_in);
        }
        unreachable!("loop returns on the final cycle")
    }
}

/// Aitken-style limit of the cycle-end states once the last three
/// differences decay by a consistent ratio (a single dominant slow mode).
fn geometric_limit(ends: &[Vec<f64>]) -> Option<Vec<f64>> {
    if ends.len() < 4 {
        return None;
    }
    let k = ends.len();
    let diff = |i: usize| -> Vec<f64> { ends[i].iter().zip(&ends[i - 1]).map(|(a, b)| a - b).collect() };
    let (d1, d2, d3) = (diff(k - 3), diff(k - 2), diff(k - 1));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (n1, n2) = (dot(&d1, &d1), dot(&d2, &d2));
    if n1 <= 0.0 || n2 <= 0.0 {
        return None;
    }
    let r_a = dot(&d2, &d1) / n1;
    let r_b = dot(&d3, &d2) / n2;
    if !(r_b > 0.05 && r_b < 0.95) || (r_a - r_b).abs() > 0.05 * r_b {
        return None;
    }
    let f = r_b / (1.0 - r_b);
    Some(ends[k - 1].iter().zip(&d3).map(|(y, d)| y + f * d).collect())
}

/// One-shot convenience wrapper around [`Simulator::simulate`].
pub fn simulate(
    net: &CircuitNetwork,
    inflow: &FourierInflow,
    settings: &SimSettings,
) -> Result<TimeTraces> {
    Simulator::new(net)?.simulate(inflow, settings)
}

// ---------------------------------------------------------------------------
// Summaries and export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalTargets {
    /// mmHg
    pub p_dia: f64,
    /// mmHg
    pub p_sys: f64,
    /// cm³/s per outlet
    pub q_mean: Vec<f64>,
    /// percent of total outlet flow through the left outlet
    pub flow_split_left: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn summarize(tr: &TimeTraces) -> Result<ClinicalTargets> {
    if tr.p_in.is_empty() || tr.q_out.iter().any(|q| q.is_empty()) {
        return Err(CircuitError::EmptyTrace);
    }
    let p_sys = tr.p_in.iter().copied().fold(f64::NEG_INFINITY, f64::max) / MMHG;
    let p_dia = tr.p_in.iter().copied().fold(f64::INFINITY, f64::min) / MMHG;
    let q_mean: Vec<f64> = tr.q_out.iter().map(|q| mean(q)).collect();
    let total: f64 = q_mean.iter().sum();
    let left = q_mean.get(tr.left_outlet).copied().unwrap_or(0.0);
    Ok(ClinicalTargets {
        p_dia,
        p_sys,
        flow_split_left: 100.0 * left / total,
        q_mean,
    })
}

impl TimeTraces {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "p_in".to_string()];
        for name in &self.outlet_names {
            header.push(format!("q_out_{name}"));
        }
        for name in &self.outlet_names {
            header.push(format!("p_out_{name}"));
        }
        w.write_record(&header)?;
        for i in 0..self.t.len() {
            let mut row = vec![self.t[i].to_string(), self.p_in[i].to_string()];
            row.extend(self.q_out.iter().map(|q| q[i].to_string()));
            row.extend(self.p_out.iter().map(|p| p[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean outlet flow (cm³/s) per outlet.
    pub fn mean_outflows(&self) -> Vec<f64> {
        self.q_out.iter().map(|q| mean(q)).collect()
    }

    /// `Σᵢ (1/T)∫ max(0, −qᵢ)² dt` over the cycle.
    pub fn negative_flow_penalty(&self) -> f64 {
        self.q_out
            .iter()
            .map(|q| mean(&q.iter().map(|v| v.min(0.0).powi(2)).collect::<Vec<_>>()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rcr_only(bc: RcrBoundary) -> TopologyConfig {
        TopologyConfig {
            branches: vec![BranchConfig {
                name: "out".into(),
                parent: None,
                segments: vec![],
                outlet: Some(bc),
                side: None,
            }],
            stations: HashMap::new(),
            stenoses: vec![],
            inflow: "q".into(),
        }
    }

    fn two_branch(left: RcrBoundary, right: RcrBoundary) -> TopologyConfig {
        let seg = VesselElement {
            r: 20.0,
            c: 2e-4,
            l: 0.0,
        };
        TopologyConfig {
            branches: vec![
                BranchConfig {
                    name: "aorta".into(),
                    parent: None,
                    segments: vec![seg],
                    outlet: None,
                    side: None,
                },
                BranchConfig {
                    name: "left".into(),
                    parent: Some("aorta".into()),
                    segments: vec![seg],
                    outlet: Some(left),
                    side: Some(Side::Left),
                },
                BranchConfig {
                    name: "right".into(),
                    parent: Some("aorta".into()),
                    segments: vec![seg],
                    outlet: Some(right),
                    side: Some(Side::Right),
                },
            ],
            stations: HashMap::from([(
                StenosisLocation::B,
                Station {
                    branch: "left".into(),
                    segment: 0,
                },
            )]),
            stenoses: vec![],
            inflow: "q".into(),
        }
    }

    const BC: RcrBoundary = RcrBoundary {
        rp: 100.0,
        c: 1e-4,
        rd: 900.0,
        p_ref: 0.0,
    };

    #[test]
    fn stenosis_drop() {
        let s = StenosisElement {
            r_lin: 10.0,
            s_quad: 2.0,
        };
        assert_eq!(stenosis_dp(0.0, &s), 0.0);
        assert_eq!(stenosis_dp(3.0, &s), 48.0);
        assert_eq!(stenosis_dp(-3.0, &s), -48.0);
    }

    #[test]
    fn single_branch_network() {
        let net = build_network(&rcr_only(BC)).unwrap();
        assert_eq!(net.n_outlets(), 1);
        assert_eq!(net.branches().iter().filter(|b| b.parent.is_none()).count(), 1);
    }

    #[test]
    fn stenosis_attached_at_station() {
        let mut cfg = two_branch(BC, BC);
        cfg.stenoses.push(StenosisSpec::Geometry {
            location: StenosisLocation::B,
            severity: 0.667,
            area0: 0.8,
            length: 1.0,
        });
        let net = build_network(&cfg).unwrap();
        let (branch, s) = net.stenoses().next().unwrap();
        assert_eq!(branch.name, "left");
        assert_eq!(s.location, StenosisLocation::B);
        assert!(s.element.s_quad > 0.0);
        assert_eq!(net.stenoses().count(), 1);
    }

    #[test]
    fn negative_compliance_rejected() {
        let mut cfg = two_branch(BC, BC);
        cfg.branches[1].segments[0].c = -1.0;
        assert!(matches!(
            build_network(&cfg),
            Err(CircuitError::InvalidTopology(_))
        ));
    }

    #[test]
    fn topology_errors() {
        let mut cfg = two_branch(BC, BC);
        cfg.branches[2].outlet = None;
        assert!(build_network(&cfg).is_err());

        let mut cfg = two_branch(BC, BC);
        cfg.branches[0].parent = Some("left".into());
        assert!(build_network(&cfg).is_err());

        let mut cfg = two_branch(BC, BC);
        cfg.branches[1].parent = Some("nowhere".into());
        assert!(build_network(&cfg).is_err());

        // junction without compliance
        let mut cfg = two_branch(BC, BC);
        cfg.branches[0].segments[0].c = 0.0;
        assert!(build_network(&cfg).is_err());

        let mut cfg = two_branch(BC, BC);
        cfg.branches[1].outlet.as_mut().unwrap().rd = 0.0;
        assert!(build_network(&cfg).is_err());

        let mut cfg = two_branch(BC, BC);
        cfg.stenoses.push(StenosisSpec::Coefficients {
            location: StenosisLocation::E,
            r_lin: 1.0,
            s_quad: 1.0,
        });
        assert!(build_network(&cfg).is_err());
    }

    #[test]
    fn topology_json_roundtrip() {
        let mut cfg = two_branch(BC, BC);
        cfg.stenoses.push(StenosisSpec::Coefficients {
            location: StenosisLocation::B,
            r_lin: 3.0,
            s_quad: 4.0,
        });
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TopologyConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn constant_inflow_steady_pressure() {
        let net = build_network(&rcr_only(BC)).unwrap();
        let tr = simulate(&net, &FourierInflow::constant(1.0, 1.0), &SimSettings::default()).unwrap();
        for p in &tr.p_in {
            assert!((p - 1000.0).abs() / 1000.0 < 1e-3);
        }
    }

    #[test]
    fn zero_inflow_decays_to_reference() {
        let bc = RcrBoundary { p_ref: 500.0, ..BC };
        let net = build_network(&two_branch(bc, bc)).unwrap();
        let sim = Simulator::new(&net).unwrap();
        let mut y = sim.steady_state(10.0);
        let mut last = None;
        sim.integrate(&mut y, 0.0, 1e-3, 8000, |_| (0.0, 0.0), |s| last = Some(s.clone()))
            .unwrap();
        let s = last.unwrap();
        assert!((s.p_in - 500.0).abs() < 1e-3 * 500.0);
        for p in s.p_out {
            assert!((p - 500.0).abs() < 1e-3 * 500.0);
        }
    }

    #[test]
    fn symmetric_split() {
        let net = build_network(&two_branch(BC, BC)).unwrap();
        let mut inflow = FourierInflow::constant(1.0, 10.0);
        inflow.a[0] = 4.0;
        inflow.b[1] = -2.0;
        let tr = simulate(&net, &inflow, &SimSettings::default()).unwrap();
        let s = summarize(&tr).unwrap();
        assert!((s.flow_split_left - 50.0).abs() < 0.1);
    }

    #[test]
    fn summary_units_and_split() {
        let tr = TimeTraces {
            t: vec![0.0, 0.5],
            p_in: vec![MMHG, MMHG],
            q_out: vec![vec![4.2, 4.2], vec![5.8, 5.8]],
            p_out: vec![vec![0.0; 2], vec![0.0; 2]],
            outlet_names: vec!["l".into(), "r".into()],
            left_outlet: 0,
            period: 1.0,
            cycles: 2,
            converged: true,
        };
        let s = summarize(&tr).unwrap();
        assert!((s.p_sys - 1.0).abs() < 1e-12 && (s.p_dia - 1.0).abs() < 1e-12);
        assert!((s.flow_split_left - 42.0).abs() < 1e-12);
        let empty = TimeTraces {
            t: vec![],
            p_in: vec![],
            q_out: vec![vec![]],
            ..tr
        };
        assert!(matches!(summarize(&empty), Err(CircuitError::EmptyTrace)));
    }

    #[test]
    fn settings_preconditions() {
        let net = build_network(&rcr_only(BC)).unwrap();
        let q = FourierInflow::constant(1.0, 1.0);
        let bad_dt = SimSettings {
            dt: 0.02,
            ..Default::default()
        };
        assert!(matches!(
            simulate(&net, &q, &bad_dt),
            Err(CircuitError::BadSettings(_))
        ));
        let one_cycle = SimSettings {
            n_cycles: 1,
            ..Default::default()
        };
        assert!(simulate(&net, &q, &one_cycle).is_err());
    }

    #[test]
    fn stability_guard() {
        // τ = Rd·C = 9e-6 s is far below any admissible step
        let bc = RcrBoundary { c: 1e-8, ..BC };
        let net = build_network(&rcr_only(bc)).unwrap();
        let q = FourierInflow::constant(1.0, 1.0);
        assert!(matches!(
            simulate(&net, &q, &SimSettings::default()),
            Err(CircuitError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn strict_mode_reports_nonconvergence() {
        // τ = 9 s decays far too slowly for two cycles from a pulsatile start
        let bc = RcrBoundary { c: 1e-2, ..BC };
        let net = build_network(&rcr_only(bc)).unwrap();
        let mut q = FourierInflow::constant(1.0, 10.0);
        q.b[0] = 8.0;
        let settings = SimSettings {
            n_cycles: 2,
            strict: true,
            ..Default::default()
        };
        assert!(matches!(
            simulate(&net, &q, &settings),
            Err(CircuitError::NonConvergent { .. })
        ));
    }

    #[test]
    fn inductor_network_runs() {
        let mut cfg = two_branch(BC, BC);
        for b in &mut cfg.branches {
            for s in &mut b.segments {
                s.l = 2.0;
            }
        }
        let net = build_network(&cfg).unwrap();
        let mut q = FourierInflow::constant(1.0, 10.0);
        q.a[0] = 5.0;
        let tr = simulate(&net, &q, &SimSettings::default()).unwrap();
        let s = summarize(&tr).unwrap();
        assert!((s.flow_split_left - 50.0).abs() < 0.1);
        let total: f64 = s.q_mean.iter().sum();
        assert!((total - 10.0).abs() / 10.0 < 1e-3);
    }

    #[test]
    fn dc_state_matches_algebra_with_stenosis() {
        let mut cfg = two_branch(BC, BC);
        cfg.stenoses.push(StenosisSpec::Coefficients {
            location: StenosisLocation::B,
            r_lin: 10.0,
            s_quad: 50.0,
        });
        let net = build_network(&cfg).unwrap();
        let sim = Simulator::new(&net).unwrap();
        let q = 30.0;
        let y = sim.steady_state(q);
        // at steady state every derivative vanishes
        let c = &sim.compiled;
        let mut flows = vec![0.0; c.edges.len()];
        let mut dy = vec![0.0; y.len()];
        c.rhs(&y, q, &mut flows, &mut dy);
        for (d, v) in dy.iter().zip(&y) {
            assert!(d.abs() < 1e-6 * (1.0 + v.abs()), "{d}");
        }
        // both outlets see the same junction pressure
        let ql = flows[c.outlet_edge[0]];
        let qr = flows[c.outlet_edge[1]];
        assert!((ql + qr - q).abs() < 1e-9);
        assert!(ql < qr);
    }
}
