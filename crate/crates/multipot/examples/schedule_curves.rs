//! Print the learning-rate schedule of each preset as a coarse curve,
//! including the per-layer-group rates the fine-tuning preset uses.
//!
//!     cargo run -p multipot --example schedule_curves

use multipot::optim::{scheduler_preset, RlpState, Schedule};

fn main() {
    let steps_per_epoch = 1000;
    let rlp = RlpState::default();
    for name in ["pretrain-default", "finetune-default", "scratch-baseline"] {
        let config = scheduler_preset(name, 4).expect("preset");
        let sched = Schedule::new(config, steps_per_epoch).expect("schedule");
        let total = sched.warmup_steps() + sched.cosine_steps();
        println!(
            "\n{name}: warmup {} steps, cosine {} steps",
            sched.warmup_steps(),
            sched.cosine_steps()
        );
        let samples = 8u64;
        for k in 0..=samples {
            let step = k * total.max(1) / samples;
            let lr = sched.lr_at(step, "", &rlp);
            let bar = "#".repeat((lr / 3e-6).round() as usize);
            println!("  step {step:>6}: {lr:.3e} {bar}");
        }
    }

    // The fine-tuning preset scales each layer group's warmup and peak rate;
    // every group decays to the same floor.
    let config = scheduler_preset("finetune-default", 4).expect("preset");
    let sched = Schedule::new(config, steps_per_epoch).expect("schedule");
    println!("\nfinetune-default per layer group:");
    for group in ["embedding", "block_1", "block_2", "block_3", "block_4", "heads"] {
        let start = sched.lr_at(0, group, &rlp);
        let peak = sched.lr_at(sched.warmup_steps(), group, &rlp);
        let end = sched.lr_at(sched.warmup_steps() + sched.cosine_steps(), group, &rlp);
        println!("  {group:>9}: {start:.2e} -> {peak:.2e} -> {end:.2e}");
    }
}
