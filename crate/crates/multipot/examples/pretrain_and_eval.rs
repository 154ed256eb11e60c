//! End-to-end pre-training on two synthetic domains, then evaluation on
//! held-out systems in physical units. Small enough to finish in well under
//! a minute.
//!
//!     cargo run -p multipot --example pretrain_and_eval

use multipot::eval::{default_targets, evaluate};
use multipot::ingest::{generate_synthetic, write_dataset_file, DomainSpec};
use multipot::model::ModelConfig;
use multipot::trainer::{pretrain, DatasetRef, RunConfig};

fn domain(id: &str, count: usize, epsilon: f64, sigma: f64) -> DomainSpec {
    DomainSpec {
        dataset_id: id.into(),
        elements: vec![1, 6],
        count,
        n_min: 3,
        n_max: 7,
        box_side: 6.5,
        epsilon,
        sigma,
        cutoff: 4.5,
    }
}

fn main() {
    let dir = std::env::temp_dir().join(format!("multipot_pretrain_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("tmp dir");

    let mut refs = Vec::new();
    for (id, eps, sigma) in [("soft", 0.6, 2.0), ("stiff", 1.4, 2.3)] {
        let path = dir.join(format!("{id}.jsonl"));
        let ds = generate_synthetic(&domain(id, 400, eps, sigma), 17).expect("generation");
        write_dataset_file(&ds, &path).expect("write");
        refs.push(DatasetRef::new(id, path.to_string_lossy()));
    }

    let model = ModelConfig {
        atom_embed_dim: 24,
        edge_embed_dim: 24,
        num_blocks: 2,
        rbf_count: 12,
        rbf_cutoff: 4.5,
        max_neighbors: 16,
        dropout_p: 0.0,
        edge_dropout_p: 0.0,
        second_order: false,
    };
    let mut config = RunConfig::pretrain_defaults(model, refs, 33);
    config.early_stop.max_epochs = 4;
    let out = dir.join("run");
    let artifacts = pretrain(&config, &out).expect("training");
    println!(
        "stopped after {} epochs ({} steps): {}",
        artifacts.epochs_run, artifacts.steps_run, artifacts.stop
    );
    println!("checkpoint: {}", artifacts.checkpoint_path.display());

    // Fresh systems from the same distributions, scored in eV / eV per A.
    for (id, eps, sigma) in [("soft", 0.6, 2.0), ("stiff", 1.4, 2.3)] {
        let test = generate_synthetic(&domain(id, 60, eps, sigma), 18).expect("generation");
        let targets = default_targets(&artifacts.checkpoint, id);
        let report = evaluate(&artifacts.checkpoint, id, "test", &test.systems, &targets, 32)
            .expect("evaluation");
        for row in &report.rows {
            println!(
                "{id:>6} {}: mae {:.4}, rmse {:.4} over {} values",
                row.target, row.mae, row.rmse, row.count
            );
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}
