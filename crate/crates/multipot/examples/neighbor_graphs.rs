//! Radius graphs with and without periodic boundaries.
//!
//! A simple cubic crystal keeps exactly six nearest neighbors under full
//! periodicity; the same atoms as an open cluster lose the neighbors that
//! would have come through the walls.
//!
//!     cargo run -p multipot --example neighbor_graphs

use multipot::graph::build_radius_graph;
use multipot::system::AtomicSystem;

fn main() {
    let a = 3.0;
    let n = 3;
    let mut positions = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                positions.push([i as f64 * a, j as f64 * a, k as f64 * a]);
            }
        }
    }
    let numbers = vec![29u32; positions.len()];
    let side = n as f64 * a;
    let cell = [[side, 0.0, 0.0], [0.0, side, 0.0], [0.0, 0.0, side]];

    let crystal = AtomicSystem::new(
        "cu-cube",
        numbers.clone(),
        positions.clone(),
        Some(cell),
        [true; 3],
    )
    .expect("system");
    let cluster = AtomicSystem::new("cu-cluster", numbers, positions, None, [false; 3])
        .expect("system");

    for (label, sys) in [("periodic", &crystal), ("open", &cluster)] {
        let g = build_radius_graph(sys, 3.5, 32).expect("graph");
        let min = g.out_degree.iter().min().unwrap();
        let max = g.out_degree.iter().max().unwrap();
        let mean = g.edge_src.len() as f64 / g.n_nodes as f64;
        println!(
            "{label:>8}: {} atoms, {} edges, degree min {min} mean {mean:.2} max {max}",
            g.n_nodes,
            g.edge_src.len()
        );
        let wrapped = g.shift.iter().filter(|s| **s != [0, 0, 0]).count();
        println!("          {wrapped} edges cross a cell boundary");
    }
}
