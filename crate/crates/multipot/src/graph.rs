//! Radius-graph construction with neighbor capping and periodic images.
//!
//! Edges are directed; `edge_vec[e]` points from `edge_src[e]` to
//! `edge_dst[e]` including any periodic image shift of the destination copy.
//! The neighbor cap bounds the out-degree of each source node. Capping can
//! break (i,j)/(j,i) symmetry and nothing downstream may assume it survives.
//!
//! Periodic images come from explicit replication of the cell, not minimal
//! image, so cells smaller than twice the cutoff are handled correctly.

use crate::system::{cell_volume, AtomicSystem};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("system {id}: radius graph needs at least 2 atoms without periodic boundaries")]
    TooFewAtoms { id: String },
    #[error("system {id}: degenerate cell, volume {volume:.3e} below 1e-9")]
    DegenerateCell { id: String, volume: f64 },
    #[error("edge {edge} has zero length after position update")]
    ZeroLengthEdge { edge: usize },
    #[error("positions have {got} rows, graph was built over {expected} nodes")]
    NodeCountMismatch { got: usize, expected: usize },
}

/// Directed radius graph over one system. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub n_nodes: usize,
    pub cutoff: f64,
    pub max_neighbors: usize,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// Integer cell shift applied to the destination copy.
    pub shift: Vec<[i32; 3]>,
    /// The same shift in cartesian coordinates (fixed: the cell never moves).
    pub shift_cart: Vec<[f64; 3]>,
    pub edge_vec: Vec<[f64; 3]>,
    pub edge_dist: Vec<f64>,
    pub edge_unit: Vec<[f64; 3]>,
    pub out_degree: Vec<usize>,
}

impl Graph {
    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}

/// Candidate neighbor before capping.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f64,
    dst: usize,
    shift: [i32; 3],
    vec: [f64; 3],
}

/// Total tie order for capping: distance, then destination index, then shift.
fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.dist
        .partial_cmp(&b.dist)
        .expect("finite distances")
        .then(a.dst.cmp(&b.dst))
        .then(a.shift.cmp(&b.shift))
}

const BIN_THRESHOLD: usize = 256;

/// Builds the directed radius graph of a system.
///
/// Every pair (including periodic self-images) with distance in (0, cutoff]
/// becomes a candidate; each source keeps at most `max_neighbors` nearest
/// under a total tie order, so the result is deterministic.
pub fn build_radius_graph(
    system: &AtomicSystem,
    cutoff: f64,
    max_neighbors: usize,
) -> Result<Graph, GraphError> {
    let n = system.n_atoms();
    let periodic = system.is_periodic();
    if !periodic && n < 2 {
        return Err(GraphError::TooFewAtoms {
            id: system.id.clone(),
        });
    }
    if let Some(cell) = &system.cell {
        let vol = cell_volume(cell).abs();
        if vol < 1e-9 {
            return Err(GraphError::DegenerateCell {
                id: system.id.clone(),
                volume: vol,
            });
        }
    }

    // Ghost atoms: every (atom, integer shift) copy that could fall within the
    // cutoff of a real atom. Non-periodic systems have the identity shift only.
    let ghosts = ghost_images(system, cutoff);

    let mut per_src: Vec<Vec<Candidate>> = vec![Vec::new(); n];
    if n <= BIN_THRESHOLD {
        for (src, pos) in system.positions.iter().enumerate() {
            for g in &ghosts {
                if let Some(c) = candidate(pos, g, src, cutoff) {
                    per_src[src].push(c);
                }
            }
        }
    } else {
        let bins = Bins::new(&ghosts, cutoff);
        for (src, pos) in system.positions.iter().enumerate() {
            bins.for_each_nearby(pos, |g| {
                if let Some(c) = candidate(pos, g, src, cutoff) {
                    per_src[src].push(c);
                }
            });
        }
    }

    let cell = system.cell.unwrap_or([[0.0; 3]; 3]);
    let mut graph = Graph {
        n_nodes: n,
        cutoff,
        max_neighbors,
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        shift: Vec::new(),
        shift_cart: Vec::new(),
        edge_vec: Vec::new(),
        edge_dist: Vec::new(),
        edge_unit: Vec::new(),
        out_degree: vec![0; n],
    };
    for (src, mut cands) in per_src.into_iter().enumerate() {
        cands.sort_by(candidate_order);
        cands.truncate(max_neighbors);
        graph.out_degree[src] = cands.len();
        for c in cands {
            graph.edge_src.push(src);
            graph.edge_dst.push(c.dst);
            graph.shift.push(c.shift);
            graph.shift_cart.push(frac_to_cart(&c.shift, &cell));
            graph.edge_vec.push(c.vec);
            graph.edge_dist.push(c.dist);
            graph
                .edge_unit
                .push([c.vec[0] / c.dist, c.vec[1] / c.dist, c.vec[2] / c.dist]);
        }
    }
    Ok(graph)
}

fn candidate(src_pos: &[f64; 3], g: &Ghost, src: usize, cutoff: f64) -> Option<Candidate> {
    if g.atom == src && g.shift == [0, 0, 0] {
        return None; // the atom itself
    }
    let vec = [
        g.pos[0] - src_pos[0],
        g.pos[1] - src_pos[1],
        g.pos[2] - src_pos[2],
    ];
    let dist = (vec[0] * vec[0] + vec[1] * vec[1] + vec[2] * vec[2]).sqrt();
    if dist > 0.0 && dist <= cutoff {
        Some(Candidate {
            dist,
            dst: g.atom,
            shift: g.shift,
            vec,
        })
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy)]
struct Ghost {
    atom: usize,
    shift: [i32; 3],
    pos: [f64; 3],
}

fn frac_to_cart(shift: &[i32; 3], cell: &[[f64; 3]; 3]) -> [f64; 3] {
    let s = [shift[0] as f64, shift[1] as f64, shift[2] as f64];
    [
        s[0] * cell[0][0] + s[1] * cell[1][0] + s[2] * cell[2][0],
        s[0] * cell[0][1] + s[1] * cell[1][1] + s[2] * cell[2][1],
        s[0] * cell[0][2] + s[1] * cell[1][2] + s[2] * cell[2][2],
    ]
}

/// Enumerates atom images whose shift could bring them within the cutoff of
/// any real atom. Shift ranges grow with the fractional spread of the
/// positions, so unwrapped coordinates are handled too. Axes without periodic
/// boundaries never shift.
fn ghost_images(system: &AtomicSystem, cutoff: f64) -> Vec<Ghost> {
    let n = system.n_atoms();
    let Some(cell) = &system.cell else {
        return (0..n)
            .map(|atom| Ghost {
                atom,
                shift: [0, 0, 0],
                pos: system.positions[atom],
            })
            .collect();
    };

    // Perpendicular width of the cell along each lattice direction.
    let vol = cell_volume(cell).abs();
    let widths = [
        vol / cross_norm(&cell[1], &cell[2]),
        vol / cross_norm(&cell[2], &cell[0]),
        vol / cross_norm(&cell[0], &cell[1]),
    ];

    // Fractional extent of the positions per axis.
    let inv = invert_cell(cell);
    let mut fmin = [f64::INFINITY; 3];
    let mut fmax = [f64::NEG_INFINITY; 3];
    for p in &system.positions {
        let f = cart_to_frac(p, &inv);
        for a in 0..3 {
            fmin[a] = fmin[a].min(f[a]);
            fmax[a] = fmax[a].max(f[a]);
        }
    }

    let mut range = [0i32..=0i32, 0..=0, 0..=0];
    for a in 0..3 {
        if system.pbc[a] {
            let margin = cutoff / widths[a];
            let lo = (fmin[a] - fmax[a] - margin).floor() as i32;
            let hi = (fmax[a] - fmin[a] + margin).ceil() as i32;
            range[a] = lo..=hi;
        }
    }

    let mut ghosts = Vec::new();
    for sa in range[0].clone() {
        for sb in range[1].clone() {
            for sc in range[2].clone() {
                let shift = [sa, sb, sc];
                let cart = frac_to_cart(&shift, cell);
                for atom in 0..n {
                    let p = system.positions[atom];
                    ghosts.push(Ghost {
                        atom,
                        shift,
                        pos: [p[0] + cart[0], p[1] + cart[1], p[2] + cart[2]],
                    });
                }
            }
        }
    }
    ghosts
}

fn cross_norm(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

/// Inverse of the row-vector cell matrix, for cartesian → fractional.
fn invert_cell(cell: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = cell_volume(cell);
    let [a, b, c] = cell;
    let cof = |u: &[f64; 3], v: &[f64; 3]| {
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    };
    // Columns of the inverse are the transposed cofactors over the determinant.
    let bc = cof(b, c);
    let ca = cof(c, a);
    let ab = cof(a, b);
    [
        [bc[0] / det, ca[0] / det, ab[0] / det],
        [bc[1] / det, ca[1] / det, ab[1] / det],
        [bc[2] / det, ca[2] / det, ab[2] / det],
    ]
}

fn cart_to_frac(p: &[f64; 3], inv: &[[f64; 3]; 3]) -> [f64; 3] {
    [
        p[0] * inv[0][0] + p[1] * inv[1][0] + p[2] * inv[2][0],
        p[0] * inv[0][1] + p[1] * inv[1][1] + p[2] * inv[2][1],
        p[0] * inv[0][2] + p[1] * inv[1][2] + p[2] * inv[2][2],
    ]
}

/// Spatial bins of ghost atoms, cubic with edge length = cutoff.
struct Bins {
    cell: f64,
    map: std::collections::HashMap<[i64; 3], Vec<usize>>,
    ghosts: Vec<Ghost>,
}

impl Bins {
    fn new(ghosts: &[Ghost], cutoff: f64) -> Self {
        let mut map: std::collections::HashMap<[i64; 3], Vec<usize>> =
            std::collections::HashMap::new();
        for (i, g) in ghosts.iter().enumerate() {
            map.entry(bin_of(&g.pos, cutoff)).or_default().push(i);
        }
        Bins {
            cell: cutoff,
            map,
            ghosts: ghosts.to_vec(),
        }
    }

    fn for_each_nearby(&self, pos: &[f64; 3], mut f: impl FnMut(&Ghost)) {
        let b = bin_of(pos, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [b[0] + dx, b[1] + dy, b[2] + dz];
                    if let Some(ids) = self.map.get(&key) {
                        for &i in ids {
                            f(&self.ghosts[i]);
                        }
                    }
                }
            }
        }
    }
}

fn bin_of(pos: &[f64; 3], cell: f64) -> [i64; 3] {
    [
        (pos[0] / cell).floor() as i64,
        (pos[1] / cell).floor() as i64,
        (pos[2] / cell).floor() as i64,
    ]
}

/// Recomputes distances and unit vectors from new positions while keeping the
/// edge list and image shifts fixed. This is what lets energy gradients be
/// taken with a frozen topology.
pub fn recompute_edge_geometry(graph: &Graph, positions: &[[f64; 3]]) -> Result<Graph, GraphError> {
    if positions.len() != graph.n_nodes {
        return Err(GraphError::NodeCountMismatch {
            got: positions.len(),
            expected: graph.n_nodes,
        });
    }
    let mut out = graph.clone();
    for e in 0..graph.n_edges() {
        let s = positions[graph.edge_src[e]];
        let d = positions[graph.edge_dst[e]];
        let sh = graph.shift_cart[e];
        let vec = [d[0] + sh[0] - s[0], d[1] + sh[1] - s[1], d[2] + sh[2] - s[2]];
        let dist = (vec[0] * vec[0] + vec[1] * vec[1] + vec[2] * vec[2]).sqrt();
        if dist < 1e-12 {
            return Err(GraphError::ZeroLengthEdge { edge: e });
        }
        out.edge_vec[e] = vec;
        out.edge_dist[e] = dist;
        out.edge_unit[e] = [vec[0] / dist, vec[1] / dist, vec[2] / dist];
    }
    Ok(out)
}
