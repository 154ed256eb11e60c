//! Head-swap transfer: pre-train on two domains, replace the output heads,
//! and fine-tune on a third domain that was never seen. A from-scratch run
//! with the same budget shows what the pre-trained backbone buys.
//!
//! Runs a deliberately small version of the experiment (about a minute);
//! the integration tests run the full five-seed comparison.
//!
//!     cargo run -p multipot --example transfer_finetune

use multipot::eval::{evaluate, relative_improvement, EvalTarget};
use multipot::ingest::{generate_synthetic, write_dataset_file, DomainSpec};
use multipot::model::ModelConfig;
use multipot::trainer::{finetune, pretrain, DatasetRef, RunConfig};

fn domain(id: &str, count: usize, epsilon: f64, sigma: f64) -> DomainSpec {
    DomainSpec {
        dataset_id: id.into(),
        elements: vec![1, 6],
        count,
        n_min: 3,
        n_max: 8,
        box_side: 7.0,
        epsilon,
        sigma,
        cutoff: 5.0,
    }
}

fn main() {
    let dir = std::env::temp_dir().join(format!("multipot_transfer_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("tmp dir");
    let model = ModelConfig {
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

    let mut sources = Vec::new();
    for (id, eps, sigma) in [("light", 0.5, 2.0), ("heavy", 1.5, 2.4)] {
        let path = dir.join(format!("{id}.jsonl"));
        write_dataset_file(
            &generate_synthetic(&domain(id, 1500, eps, sigma), 71).expect("generation"),
            &path,
        )
        .expect("write");
        sources.push(DatasetRef::new(id, path.to_string_lossy()));
    }
    let target_path = dir.join("target.jsonl");
    write_dataset_file(
        &generate_synthetic(&domain("target", 150, 1.0, 2.2), 72).expect("generation"),
        &target_path,
    )
    .expect("write");
    let held_out = generate_synthetic(&domain("target", 100, 1.0, 2.2), 73).expect("generation");

    let mut pre_cfg = RunConfig::pretrain_defaults(model.clone(), sources, 5);
    pre_cfg.early_stop.max_epochs = 8;
    println!("pre-training on light + heavy ...");
    let pre = pretrain(&pre_cfg, dir.join("pretrain")).expect("pre-training");

    let target_ref = vec![DatasetRef::new("target", target_path.to_string_lossy())];
    let mut ft_cfg = RunConfig::finetune_defaults(
        model.clone(),
        target_ref.clone(),
        Some(pre.checkpoint_path.display().to_string()),
        5,
    );
    ft_cfg.early_stop.max_epochs = 60;
    println!("fine-tuning on target ...");
    let fine = finetune(&ft_cfg, dir.join("finetune")).expect("fine-tuning");

    let mut sc_cfg = RunConfig::scratch_defaults(model, target_ref, 5);
    sc_cfg.early_stop.max_epochs = 60;
    println!("training target from scratch ...");
    let scratch = finetune(&sc_cfg, dir.join("scratch")).expect("baseline");

    let force_mae = |artifacts: &multipot::trainer::RunArtifacts| {
        evaluate(
            &artifacts.checkpoint,
            "target",
            "test",
            &held_out.systems,
            &[EvalTarget::Forces],
            32,
        )
        .expect("evaluation")
        .rows[0]
            .mae
    };
    let fine_mae = force_mae(&fine);
    let scratch_mae = force_mae(&scratch);
    println!("\nforce MAE on 100 held-out systems (eV per A):");
    println!("  from scratch: {scratch_mae:.4}");
    println!("  fine-tuned:   {fine_mae:.4}");
    println!(
        "  improvement:  {:+.1}%",
        relative_improvement(scratch_mae, fine_mae).expect("ratio")
    );
    std::fs::remove_dir_all(&dir).ok();
}
