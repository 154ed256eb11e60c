//! Per-element reference energies: fit the linear composition model, subtract
//! it, and show how much label variance it removes before normalization.
//!
//!     cargo run -p multipot --example reference_energies

use multipot::ingest::{generate_synthetic, DomainSpec};
use multipot::reference::{
    composition_baseline, denormalize_prediction, fit_linear_reference, fit_norm_stats,
    normalize_labels,
};

fn variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

fn main() {
    let spec = DomainSpec {
        dataset_id: "demo".into(),
        elements: vec![1, 6],
        count: 200,
        n_min: 3,
        n_max: 9,
        box_side: 7.0,
        epsilon: 1.0,
        sigma: 2.1,
        cutoff: 5.0,
    };
    let ds = generate_synthetic(&spec, 11).expect("generation");

    let fit = fit_linear_reference(&ds).expect("fit");
    for (z, c) in &fit.coefficients {
        println!("element {z}: baseline {c:+.4} eV per atom");
    }
    println!("fit residual rms: {:.4} eV", fit.residual_rms);

    let raw: Vec<f64> = ds.systems.iter().map(|s| s.energy.unwrap()).collect();
    let referenced: Vec<f64> = ds
        .systems
        .iter()
        .map(|s| s.energy.unwrap() - composition_baseline(s, &fit))
        .collect();
    println!(
        "energy variance: raw {:.3}, referenced {:.3}",
        variance(&raw),
        variance(&referenced)
    );

    // Normalized labels are what training actually sees; the inverse maps
    // predictions back to physical units exactly.
    let stats = fit_norm_stats(&ds, &fit).expect("stats");
    let sys = &ds.systems[0];
    let (e_norm, f_norm) = normalize_labels(sys, &fit, &stats).expect("normalize");
    let (e_back, _) =
        denormalize_prediction(sys, e_norm, f_norm.as_deref(), &fit, &stats).expect("invert");
    println!(
        "system 0: raw {:.4} eV -> normalized {:+.4} -> back {:.4} eV",
        sys.energy.unwrap(),
        e_norm,
        e_back
    );
}
