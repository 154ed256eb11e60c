//! How the sampling temperature rebalances datasets of very different sizes.
//!
//! T = 1 samples in proportion to size, so a hundred-million-system corpus
//! drowns a two-million one. Raising T flattens the shares toward uniform.
//!
//!     cargo run -p multipot --example mixture_temperatures

use multipot::sampler::{mixture_probabilities, MixSpec, Sampler};

fn main() {
    let sizes = vec![100_000_000usize, 8_000_000, 2_000_000, 10_000_000];
    println!("dataset sizes: {sizes:?}");
    println!("{:>6}  {:>8} {:>8} {:>8} {:>8}", "T", "d0", "d1", "d2", "d3");
    for t in [1.0, 2.0, 4.0, f64::INFINITY] {
        let spec = MixSpec::new(sizes.clone(), t, 1, 0).expect("spec");
        let p = mixture_probabilities(&spec);
        println!(
            "{:>6}  {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            if t.is_infinite() { "inf".into() } else { format!("{t}") },
            p[0],
            p[1],
            p[2],
            p[3]
        );
    }

    // Draw a few epochs from a small corpus and compare the empirical shares.
    let sizes = vec![1000usize, 80, 20, 100];
    let spec = MixSpec::new(sizes, 2.0, 8, 42).expect("spec");
    let p = mixture_probabilities(&spec);
    let mut sampler = Sampler::new(spec);
    let mut counts = [0usize; 4];
    let draws = 40_000;
    for _ in 0..draws / 8 {
        for (dataset, _index) in sampler.next_batch() {
            counts[dataset] += 1;
        }
    }
    println!("\nempirical shares after {draws} draws at T = 2:");
    for (i, c) in counts.iter().enumerate() {
        println!(
            "  dataset {i}: {:.4} (probability {:.4})",
            *c as f64 / draws as f64,
            p[i]
        );
    }
}
