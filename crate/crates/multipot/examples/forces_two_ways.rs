//! The two force predictions: a direct equivariant head versus the negative
//! energy gradient. The gradient route is conservative by construction and
//! its forces sum to zero on an isolated system.
//!
//!     cargo run -p multipot --example forces_two_ways

use multipot::graph::build_radius_graph;
use multipot::ingest::{generate_synthetic, DomainSpec};
use multipot::model::{
    encode, init_model, predict_energy, predict_forces_direct, predict_forces_gradient,
    GraphBatch, HeadSet, Mode, ModelConfig, TapedParams, TargetKind,
};
use multipot::system::collate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::Tape;

fn main() {
    let config = ModelConfig {
        atom_embed_dim: 24,
        edge_embed_dim: 24,
        num_blocks: 2,
        rbf_count: 12,
        rbf_cutoff: 5.0,
        max_neighbors: 16,
        dropout_p: 0.0,
        edge_dropout_p: 0.0,
        second_order: true,
    };
    let heads = HeadSet::pretraining(&["demo"]);
    let params = init_model(&config, &heads, 3).expect("init");
    println!("{} parameters in {} tensors", params.numel(), params.len());

    let spec = DomainSpec {
        dataset_id: "demo".into(),
        elements: vec![1, 6],
        count: 1,
        n_min: 6,
        n_max: 6,
        box_side: 6.0,
        epsilon: 1.0,
        sigma: 2.0,
        cutoff: 5.0,
    };
    let ds = generate_synthetic(&spec, 5).expect("generation");
    let sys = &ds.systems[0];
    let graph = build_radius_graph(sys, config.rbf_cutoff, config.max_neighbors).expect("graph");
    let gb = GraphBatch::collate(&[&graph]).expect("collate");
    let batch = collate(vec![sys], vec![0]).expect("batch");

    let tape = Tape::new();
    let tp = TapedParams::new(&tape, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let emb = encode(&batch, &gb, &tp, &config, Mode::Eval, &mut rng).expect("encode");

    let e_head = heads.get("demo", &TargetKind::Energy).expect("head");
    let f_head = heads.get("demo", &TargetKind::DirectForce).expect("head");
    let energy = predict_energy(&emb, &gb, &tp, e_head).expect("energy");
    println!("predicted energy: {:+.4} (normalized units)", energy.data()[0]);

    let direct = predict_forces_direct(&emb, &gb, &tp, f_head).expect("forces");
    let (_, grad) =
        predict_forces_gradient(&batch, &gb, &tp, &config, e_head, Mode::Eval, &mut rng)
            .expect("forces");
    let d = direct.data();
    let g = grad.data();
    println!("\natom   direct head                gradient of energy");
    for i in 0..sys.n_atoms() {
        println!(
            "{i:>4}   ({:+.3}, {:+.3}, {:+.3})   ({:+.3}, {:+.3}, {:+.3})",
            d[3 * i], d[3 * i + 1], d[3 * i + 2],
            g[3 * i], g[3 * i + 1], g[3 * i + 2]
        );
    }
    for c in 0..3 {
        let total: f64 = (0..sys.n_atoms()).map(|i| g[3 * i + c]).sum();
        assert!(total.abs() < 1e-10);
    }
    println!("\ngradient forces sum to zero along every axis");
}
