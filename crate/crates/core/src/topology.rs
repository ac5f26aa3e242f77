//! LxVxH torus fabrics with asymmetric link classes.
//!
//! Each NPU sits on three rings: the local (intra-package) ring of length L,
//! the vertical ring of length V and the horizontal ring of length H. Every
//! ring is bidirectional, so a node owns up to two outgoing links per
//! dimension. A dimension of length 1 has no links at all.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::units::{self, Cycles};

/// The three torus dimensions, in XYZ routing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dim {
    Local,
    Vertical,
    Horizontal,
}

impl Dim {
    pub const ALL: [Dim; 3] = [Dim::Local, Dim::Vertical, Dim::Horizontal];

    pub fn index(self) -> usize {
        match self {
            Dim::Local => 0,
            Dim::Vertical => 1,
            Dim::Horizontal => 2,
        }
    }
}

/// Direction of travel along a ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dir {
    /// Towards increasing index (wrapping).
    Up,
    /// Towards decreasing index (wrapping).
    Down,
}

impl Dir {
    pub fn flip(self) -> Dir {
        match self {
            Dir::Up => Dir::Down,
            Dir::Down => Dir::Up,
        }
    }
}

/// Coordinates of an NPU in an LxVxH torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub l: usize,
    pub v: usize,
    pub h: usize,
}

impl NodeId {
    pub const fn new(l: usize, v: usize, h: usize) -> Self {
        NodeId { l, v, h }
    }

    pub fn coord(self, dim: Dim) -> usize {
        match dim {
            Dim::Local => self.l,
            Dim::Vertical => self.v,
            Dim::Horizontal => self.h,
        }
    }

    fn with_coord(mut self, dim: Dim, value: usize) -> Self {
        match dim {
            Dim::Local => self.l = value,
            Dim::Vertical => self.v = value,
            Dim::Horizontal => self.h = value,
        }
        self
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.l, self.v, self.h)
    }
}

/// Torus size as (L, V, H).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "H")]
    pub h: usize,
}

impl Dims {
    pub const fn new(l: usize, v: usize, h: usize) -> Self {
        Dims { l, v, h }
    }

    pub fn len(&self, dim: Dim) -> usize {
        match dim {
            Dim::Local => self.l,
            Dim::Vertical => self.v,
            Dim::Horizontal => self.h,
        }
    }

    pub fn node_count(&self) -> usize {
        self.l * self.v * self.h
    }

    pub fn flat(&self, n: NodeId) -> usize {
        n.l + self.l * n.v + self.l * self.v * n.h
    }

    pub fn node(&self, flat: usize) -> NodeId {
        NodeId {
            l: flat % self.l,
            v: (flat / self.l) % self.v,
            h: flat / (self.l * self.v),
        }
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.l < self.l && n.v < self.v && n.h < self.h
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.l, self.v, self.h)
    }
}

impl std::str::FromStr for Dims {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let bad = || ConfigError::invalid("dims", format!("expected LxVxH, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| bad())?;
        }
        Ok(Dims::new(v[0], v[1], v[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    IntraPackage,
    InterVertical,
    InterHorizontal,
}

impl LinkKind {
    pub fn of(dim: Dim) -> LinkKind {
        match dim {
            Dim::Local => LinkKind::IntraPackage,
            Dim::Vertical => LinkKind::InterVertical,
            Dim::Horizontal => LinkKind::InterHorizontal,
        }
    }
}

/// Bandwidth/latency/efficiency of one class of links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkClass {
    /// Raw bandwidth per direction, GB/s.
    pub gbps: f64,
    pub latency_cycles: Cycles,
    pub efficiency: f64,
}

impl LinkClass {
    pub const INTRA_DEFAULT: LinkClass = LinkClass {
        gbps: 200.0,
        latency_cycles: 90,
        efficiency: 0.94,
    };
    pub const INTER_DEFAULT: LinkClass = LinkClass {
        gbps: 25.0,
        latency_cycles: 500,
        efficiency: 0.94,
    };

    pub fn validate(&self, key: &str) -> Result<(), ConfigError> {
        if !(self.gbps > 0.0) || !self.gbps.is_finite() {
            return Err(ConfigError::invalid(format!("{key}.gbps"), "must be > 0"));
        }
        if self.latency_cycles < 1 {
            return Err(ConfigError::invalid(
                format!("{key}.latency_cycles"),
                "must be >= 1",
            ));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(ConfigError::invalid(
                format!("{key}.efficiency"),
                "must be in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Effective payload rate in bytes per mega-cycle.
    pub fn effective_rate(&self) -> u64 {
        units::gbps_to_bytes_per_mcycle(self.gbps * self.efficiency)
    }
}

/// Link parameters per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    #[serde(default = "default_intra")]
    pub intra: LinkClass,
    #[serde(default = "default_inter")]
    pub inter_v: LinkClass,
    #[serde(default = "default_inter")]
    pub inter_h: LinkClass,
}

fn default_intra() -> LinkClass {
    LinkClass::INTRA_DEFAULT
}

fn default_inter() -> LinkClass {
    LinkClass::INTER_DEFAULT
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            intra: LinkClass::INTRA_DEFAULT,
            inter_v: LinkClass::INTER_DEFAULT,
            inter_h: LinkClass::INTER_DEFAULT,
        }
    }
}

impl LinkParams {
    pub fn class(&self, kind: LinkKind) -> &LinkClass {
        match kind {
            LinkKind::IntraPackage => &self.intra,
            LinkKind::InterVertical => &self.inter_v,
            LinkKind::InterHorizontal => &self.inter_h,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.intra.validate("link.intra")?;
        self.inter_v.validate("link.inter_v")?;
        self.inter_h.validate("link.inter_h")
    }
}

pub type LinkId = usize;

/// One directed link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub id: LinkId,
    pub src: NodeId,
    pub dst: NodeId,
    pub dim: Dim,
    pub dir: Dir,
    pub class: LinkClass,
}

impl Link {
    pub fn kind(&self) -> LinkKind {
        LinkKind::of(self.dim)
    }
}

/// One hop of a route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub from: NodeId,
    pub to: NodeId,
    pub dim: Dim,
    pub dir: Dir,
}

#[derive(Debug, Clone)]
pub struct Topology {
    dims: Dims,
    links: Vec<Link>,
    // ports[flat * 6 + dim * 2 + dir] -> outgoing link id
    ports: Vec<Option<LinkId>>,
}

impl Topology {
    /// Wires rings in every dimension of length >= 2.
    pub fn build_torus(dims: Dims, params: &LinkParams) -> Result<Topology, ConfigError> {
        for (key, n) in [("dims.L", dims.l), ("dims.V", dims.v), ("dims.H", dims.h)] {
            if n == 0 {
                return Err(ConfigError::invalid(key, "dimension must be >= 1"));
            }
        }
        params.validate()?;

        let n = dims.node_count();
        let mut links = Vec::with_capacity(n * 6);
        let mut ports = vec![None; n * 6];
        for flat in 0..n {
            let src = dims.node(flat);
            for dim in Dim::ALL {
                let len = dims.len(dim);
                if len < 2 {
                    continue;
                }
                let class = *params.class(LinkKind::of(dim));
                for dir in [Dir::Up, Dir::Down] {
                    let dst = step(dims, src, dim, dir);
                    let id = links.len();
                    links.push(Link {
                        id,
                        src,
                        dst,
                        dim,
                        dir,
                        class,
                    });
                    ports[port_index(flat, dim, dir)] = Some(id);
                }
            }
        }
        Ok(Topology { dims, links, ports })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn node_count(&self) -> usize {
        self.dims.node_count()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    /// Outgoing link of `n` in `dim` towards `dir`, if that dimension is wired.
    pub fn port(&self, n: NodeId, dim: Dim, dir: Dir) -> Option<LinkId> {
        self.ports[port_index(self.dims.flat(n), dim, dir)]
    }

    /// Outgoing links of a node, in (dim, dir) order.
    pub fn ports_of(&self, n: NodeId) -> impl Iterator<Item = LinkId> + '_ {
        let base = self.dims.flat(n) * 6;
        self.ports[base..base + 6].iter().filter_map(|p| *p)
    }

    pub fn neighbor(&self, n: NodeId, dim: Dim, dir: Dir) -> NodeId {
        step(self.dims, n, dim, dir)
    }

    /// Ring through `n` in `dim`, starting at `n` and following `Dir::Up`.
    pub fn ring(&self, n: NodeId, dim: Dim) -> Vec<NodeId> {
        let len = self.dims.len(dim);
        let mut ring = Vec::with_capacity(len);
        let mut cur = n;
        for _ in 0..len {
            ring.push(cur);
            cur = step(self.dims, cur, dim, Dir::Up);
        }
        ring
    }

    /// The local, vertical and horizontal rings of `n`.
    pub fn rings_of(&self, n: NodeId) -> [Vec<NodeId>; 3] {
        [
            self.ring(n, Dim::Local),
            self.ring(n, Dim::Vertical),
            self.ring(n, Dim::Horizontal),
        ]
    }

    /// Dimension-ordered route: local, then vertical, then horizontal.
    ///
    /// Within a dimension the shorter ring direction is taken; ties go
    /// towards increasing index.
    pub fn xyz_route(&self, src: NodeId, dst: NodeId) -> Vec<Hop> {
        let mut hops = Vec::new();
        let mut cur = src;
        for dim in Dim::ALL {
            let len = self.dims.len(dim);
            let from = cur.coord(dim);
            let to = dst.coord(dim);
            if from == to {
                continue;
            }
            let up = (to + len - from) % len;
            let down = len - up;
            let (dir, count) = if up <= down {
                (Dir::Up, up)
            } else {
                (Dir::Down, down)
            };
            for _ in 0..count {
                let next = step(self.dims, cur, dim, dir);
                hops.push(Hop {
                    from: cur,
                    to: next,
                    dim,
                    dir,
                });
                cur = next;
            }
        }
        debug_assert_eq!(cur, dst);
        hops
    }
}

fn port_index(flat: usize, dim: Dim, dir: Dir) -> usize {
    flat * 6 + dim.index() * 2 + if dir == Dir::Up { 0 } else { 1 }
}

fn step(dims: Dims, n: NodeId, dim: Dim, dir: Dir) -> NodeId {
    let len = dims.len(dim);
    let c = n.coord(dim);
    let next = match dir {
        Dir::Up => (c + 1) % len,
        Dir::Down => (c + len - 1) % len,
    };
    n.with_coord(dim, next)
}
