//! Export per-system mean embeddings from a trained checkpoint as CSV, the
//! raw material for probing what the backbone has learned.
//!
//!     cargo run -p multipot --example export_embeddings

use multipot::eval::export_embeddings;
use multipot::ingest::{generate_synthetic, write_dataset_file, DomainSpec};
use multipot::model::ModelConfig;
use multipot::trainer::{pretrain, DatasetRef, RunConfig};

fn main() {
    let dir = std::env::temp_dir().join(format!("multipot_embed_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("tmp dir");
    let spec = DomainSpec {
        dataset_id: "demo".into(),
        elements: vec![1, 6, 8],
        count: 300,
        n_min: 3,
        n_max: 7,
        box_side: 6.5,
        epsilon: 1.0,
        sigma: 2.1,
        cutoff: 4.5,
    };
    let path = dir.join("demo.jsonl");
    let ds = generate_synthetic(&spec, 3).expect("generation");
    write_dataset_file(&ds, &path).expect("write");

    let model = ModelConfig {
        atom_embed_dim: 16,
        edge_embed_dim: 16,
        num_blocks: 2,
        rbf_count: 8,
        rbf_cutoff: 4.5,
        max_neighbors: 16,
        dropout_p: 0.0,
        edge_dropout_p: 0.0,
        second_order: false,
    };
    let mut config = RunConfig::pretrain_defaults(
        model,
        vec![DatasetRef::new("demo", path.to_string_lossy())],
        1,
    );
    config.early_stop.max_epochs = 2;
    let artifacts = pretrain(&config, dir.join("run")).expect("training");

    let export =
        export_embeddings(&artifacts.checkpoint, "demo", &ds.systems, 8, 0).expect("export");
    if !export.skipped.is_empty() {
        println!("skipped (no edges at cutoff): {:?}", export.skipped);
    }
    for line in export.csv.lines().take(4) {
        let short: String = line.chars().take(100).collect();
        println!("{short}...");
    }
    println!(
        "({} rows, one per sampled system; columns are node then edge means)",
        export.csv.lines().count() - 1
    );
    std::fs::remove_dir_all(&dir).ok();
}
