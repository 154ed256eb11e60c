//! Release gate: one test per capability the library promises, each checked
//! against an independent oracle or closed form at a stated tolerance and
//! ending in a single summary line (visible under `--nocapture`).
//!
//! The checks run on synthetic pair-potential data sized for a single
//! desktop core; the two training tests (`c09`, `c10`) are the slow ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multipot::eval::{evaluate, relative_improvement, EvalTarget};
use multipot::graph::{build_radius_graph, recompute_edge_geometry};
use multipot::ingest::{
    generate_synthetic, load_dataset_file, write_dataset_file, Dataset, DomainSpec, LabelSchema,
};
use multipot::loss::{
    naive_loss, swl_loss, swl_loss_masked, threshold_wrap, BatchShape, ErrorForm, LossMasks,
    LossWeights, ThresholdSpec, CATALYSIS_MARGINS, MOLECULAR_MARGINS,
};
use multipot::model::{
    encode, init_model, predict_energy, predict_forces_direct, predict_forces_gradient,
    GraphBatch, HeadSet, HeadSpec, Mode, ModelConfig, TapedParams, TargetKind,
};
use multipot::optim::{
    early_stop, early_stop_preset, llrd_factors, pcgrad, scheduler_preset, EarlyStopState,
    PhaseLen, RlpState, Schedule, SchedulerConfig, StopReason,
};
use multipot::reference::{
    composition_baseline, denormalize_prediction, fit_linear_reference, fit_norm_stats,
    normalize_labels,
};
use multipot::sampler::{mixture_probabilities, MixSpec, Sampler};
use multipot::system::{collate, AtomicSystem};
use multipot::trainer::{finetune, pretrain, resume, DatasetRef, RunConfig};
use tapegrad::{Tape, Tensor, Value};

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "accept_{tag}_{}_{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn rel_diff(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

fn err_of(x: f64, form: ErrorForm) -> f64 {
    match form {
        ErrorForm::Absolute => x.abs(),
        ErrorForm::Squared => x * x,
    }
}

fn atom_norm(f_pred: &[f64], f_tgt: &[f64], i: usize) -> f64 {
    (0..3)
        .map(|c| (f_pred[i * 3 + c] - f_tgt[i * 3 + c]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Structure-wise reduction as a plain per-system loop: the loss averages
/// each system's per-atom force error before averaging across systems.
#[allow(clippy::too_many_arguments)]
fn oracle_structure_loss(
    e_pred: &[f64],
    f_pred: &[f64],
    e_tgt: &[f64],
    f_tgt: &[f64],
    dataset_idx: &[usize],
    batch_idx: &[usize],
    weights: &[(f64, f64)],
    form: ErrorForm,
) -> f64 {
    let b = dataset_idx.len();
    let mut force_sum = vec![0.0; b];
    let mut atoms = vec![0usize; b];
    for (i, &s) in batch_idx.iter().enumerate() {
        force_sum[s] += err_of(atom_norm(f_pred, f_tgt, i), form);
        atoms[s] += 1;
    }
    let mut total = 0.0;
    for s in 0..b {
        let (le, lf) = weights[dataset_idx[s]];
        total += le * err_of(e_pred[s] - e_tgt[s], form);
        total += lf * force_sum[s] / atoms[s] as f64;
    }
    total / b as f64
}

/// Atom-pooled reduction: the force term averages every atom of the batch
/// together under one shared force multiplier.
#[allow(clippy::too_many_arguments)]
fn oracle_pooled_loss(
    e_pred: &[f64],
    f_pred: &[f64],
    e_tgt: &[f64],
    f_tgt: &[f64],
    dataset_idx: &[usize],
    batch_idx: &[usize],
    energy_weights: &[f64],
    shared_lf: f64,
    form: ErrorForm,
) -> f64 {
    let b = dataset_idx.len();
    let energy: f64 = (0..b)
        .map(|s| energy_weights[dataset_idx[s]] * err_of(e_pred[s] - e_tgt[s], form))
        .sum::<f64>()
        / b as f64;
    let force: f64 = (0..batch_idx.len())
        .map(|i| err_of(atom_norm(f_pred, f_tgt, i), form))
        .sum::<f64>()
        / batch_idx.len() as f64
        * shared_lf;
    energy + force
}

struct LossCase {
    dataset_idx: Vec<usize>,
    batch_idx: Vec<usize>,
    e_pred: Vec<f64>,
    e_tgt: Vec<f64>,
    f_pred: Vec<f64>,
    f_tgt: Vec<f64>,
}

fn random_loss_case(rng: &mut ChaCha8Rng, n_datasets: usize) -> LossCase {
    let b = rng.gen_range(1..=8usize);
    let dataset_idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n_datasets)).collect();
    let mut batch_idx = Vec::new();
    for s in 0..b {
        let atoms = rng.gen_range(1..=40usize);
        batch_idx.extend(std::iter::repeat(s).take(atoms));
    }
    let n = batch_idx.len();
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    };
    LossCase {
        dataset_idx,
        batch_idx,
        e_pred: draw(b),
        e_tgt: draw(b),
        f_pred: draw(n * 3),
        f_tgt: draw(n * 3),
    }
}

fn case_tensors(tape: &Tape, case: &LossCase) -> (Tensor, Tensor, Tensor, Tensor) {
    let b = case.dataset_idx.len();
    let n = case.batch_idx.len();
    (
        tape.constant(Value::new(vec![b], case.e_pred.clone()).unwrap()),
        tape.constant(Value::new(vec![n, 3], case.f_pred.clone()).unwrap()),
        tape.constant(Value::new(vec![b], case.e_tgt.clone()).unwrap()),
        tape.constant(Value::new(vec![n, 3], case.f_tgt.clone()).unwrap()),
    )
}

#[test]
fn c01_loss_reductions_match_a_plain_loop_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4001);
    let mut worst = 0.0f64;
    for case_no in 0..1000 {
        let n_datasets = rng.gen_range(1..=3usize);
        let case = random_loss_case(&mut rng, n_datasets);
        let form = if case_no % 2 == 0 {
            ErrorForm::Absolute
        } else {
            ErrorForm::Squared
        };
        let varied: Vec<(f64, f64)> = (0..n_datasets)
            .map(|_| (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)))
            .collect();
        let shared_lf = rng.gen_range(0.2..3.0);
        let uniform: Vec<(f64, f64)> = varied.iter().map(|&(le, _)| (le, shared_lf)).collect();

        let shape = BatchShape::new(case.dataset_idx.clone(), case.batch_idx.clone()).unwrap();
        let tape = Tape::new();
        let (ep, fp, et, ft) = case_tensors(&tape, &case);

        let got = swl_loss(
            &ep,
            &fp,
            &et,
            &ft,
            &shape,
            &LossWeights::new(varied.clone()).unwrap(),
            form,
        )
        .unwrap()
        .item();
        let want = oracle_structure_loss(
            &case.e_pred,
            &case.f_pred,
            &case.e_tgt,
            &case.f_tgt,
            &case.dataset_idx,
            &case.batch_idx,
            &varied,
            form,
        );
        let r1 = rel_diff(got, want);
        assert!(r1 < 1e-12, "case {case_no}: structure loss {got} vs oracle {want}");

        let got = naive_loss(
            &ep,
            &fp,
            &et,
            &ft,
            &shape,
            &LossWeights::new(uniform.clone()).unwrap(),
            form,
        )
        .unwrap()
        .item();
        let energy_w: Vec<f64> = uniform.iter().map(|&(le, _)| le).collect();
        let want = oracle_pooled_loss(
            &case.e_pred,
            &case.f_pred,
            &case.e_tgt,
            &case.f_tgt,
            &case.dataset_idx,
            &case.batch_idx,
            &energy_w,
            shared_lf,
            form,
        );
        let r2 = rel_diff(got, want);
        assert!(r2 < 1e-12, "case {case_no}: pooled loss {got} vs oracle {want}");
        worst = worst.max(r1).max(r2);
    }
    let dt = started.elapsed().as_secs_f64();
    assert!(dt < 10.0, "oracle sweep took {dt:.1} s, budget is 10 s");
    println!(
        "[c01] loss reductions vs loop oracle: PASS (1000 batches, max rel err {worst:.2e}, {dt:.2} s)"
    );
}

#[test]
fn c02_structure_loss_balances_small_against_large_systems() {
    // One 4-atom and one 40-atom system with the same per-atom force error.
    let counts = [4usize, 40];
    let dataset_idx = vec![0usize, 1];
    let mut batch_idx = Vec::new();
    for (s, &c) in counts.iter().enumerate() {
        batch_idx.extend(std::iter::repeat(s).take(c));
    }
    let n = batch_idx.len();
    let b = 2;
    let e = vec![0.0; b];
    let f_tgt = vec![0.0; n * 3];
    let mut f_err = vec![0.0; n * 3];
    for i in 0..n {
        f_err[i * 3] = 0.3;
    }
    let shape = BatchShape::new(dataset_idx, batch_idx.clone()).unwrap();
    let tape = Tape::new();
    let ep = tape.constant(Value::new(vec![b], e.clone()).unwrap());
    let et = tape.constant(Value::new(vec![b], e).unwrap());
    let fp = tape.constant(Value::new(vec![n, 3], f_err.clone()).unwrap());
    let ft = tape.constant(Value::new(vec![n, 3], f_tgt.clone()).unwrap());

    // Structure-wise: each system's share carries its force multiplier and
    // nothing else, regardless of how many atoms it has.
    let contribution = |weights: &LossWeights, sys: usize| -> f64 {
        let masks = LossMasks {
            energy: vec![0.0; b],
            force: batch_idx
                .iter()
                .map(|&s| if s == sys { 1.0 } else { 0.0 })
                .collect(),
        };
        swl_loss_masked(&ep, &fp, &et, &ft, &shape, weights, ErrorForm::Absolute, &masks)
            .unwrap()
            .item()
    };
    let skewed = LossWeights::new(vec![(1.0, 1.0), (1.0, 2.5)]).unwrap();
    let ratio = contribution(&skewed, 1) / contribution(&skewed, 0);
    assert!(
        rel_diff(ratio, 2.5) < 1e-12,
        "structure-loss contribution ratio {ratio} should equal the weight ratio 2.5"
    );
    let equal = LossWeights::new(vec![(1.0, 1.0), (1.0, 1.0)]).unwrap();
    let even = contribution(&equal, 1) / contribution(&equal, 0);
    assert!(
        rel_diff(even, 1.0) < 1e-12,
        "equal weights should give equal contributions, got ratio {even}"
    );

    // Atom-pooled: the same construction weights systems by atom count.
    let uniform = LossWeights::new(vec![(1.0, 1.0), (1.0, 1.0)]).unwrap();
    let pooled_contribution = |sys: usize| -> f64 {
        let only: Vec<f64> = (0..n * 3)
            .map(|k| if batch_idx[k / 3] == sys { f_err[k] } else { 0.0 })
            .collect();
        let fp = tape.constant(Value::new(vec![n, 3], only).unwrap());
        naive_loss(&ep, &fp, &et, &ft, &shape, &uniform, ErrorForm::Absolute)
            .unwrap()
            .item()
    };
    let pooled_ratio = pooled_contribution(1) / pooled_contribution(0);
    assert!(
        rel_diff(pooled_ratio, 10.0) < 1e-12,
        "atom-pooled contribution ratio {pooled_ratio} should equal the atom ratio 10"
    );
    println!(
        "[c02] system-size balance: PASS (structure ratio {ratio:.12} = weight ratio, pooled ratio {pooled_ratio:.12} = atom ratio)"
    );
}

#[test]
fn c03_temperature_sampling_matches_probabilities() {
    // Corpus with shares 100:8:2:10 (in millions); the sampler streams a
    // thousandfold smaller corpus with bit-identical shares.
    let full: Vec<usize> = vec![100_000_000, 8_000_000, 2_000_000, 10_000_000];
    let small: Vec<usize> = full.iter().map(|s| s / 1000).collect();
    let mut worst = 0.0f64;
    for &t in &[1.0, 2.0, f64::INFINITY] {
        let p_full = mixture_probabilities(&MixSpec::new(full.clone(), t, 100, 7).unwrap());
        let spec = MixSpec::new(small.clone(), t, 100, 7).unwrap();
        let p_small = mixture_probabilities(&spec);
        assert_eq!(p_full, p_small, "shares determine the probabilities");
        let mut sampler = Sampler::new(spec);
        let mut histogram = [0usize; 4];
        for _ in 0..1000 {
            for (d, _) in sampler.next_batch() {
                histogram[d] += 1;
            }
        }
        for (i, &h) in histogram.iter().enumerate() {
            let freq = h as f64 / 1e5;
            let dev = (freq - p_full[i]).abs();
            worst = worst.max(dev);
            assert!(
                dev <= 0.01,
                "T={t}: dataset {i} frequency {freq:.4} vs probability {:.4}",
                p_full[i]
            );
        }
    }
    // Square-root oracle at T = 2 on the full sizes.
    let p = mixture_probabilities(&MixSpec::new(full.clone(), 2.0, 1, 0).unwrap());
    let total: f64 = full.iter().map(|&s| s as f64).sum();
    let w: Vec<f64> = full.iter().map(|&s| (s as f64 / total).sqrt()).collect();
    let z: f64 = w.iter().sum();
    for i in 0..4 {
        assert!(
            (p[i] - w[i] / z).abs() < 1e-12,
            "sqrt oracle mismatch at {i}: {} vs {}",
            p[i],
            w[i] / z
        );
    }
    println!(
        "[c03] temperature sampling: PASS (10^5 draws at T=1,2,inf, worst deviation {worst:.4}, sqrt oracle < 1e-12)"
    );
}

#[test]
fn c04_energy_referencing_recovers_planted_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let planted = BTreeMap::from([(1u32, -13.6), (6u32, -1025.2), (8u32, -432.1)]);
    let mut systems = Vec::new();
    for k in 0..60 {
        let n = rng.gen_range(2..=10usize);
        let numbers: Vec<u32> = (0..n)
            .map(|_| [1u32, 6, 8][rng.gen_range(0..3)])
            .collect();
        let positions: Vec<[f64; 3]> = (0..n).map(|i| [1.2 * i as f64, 0.0, 0.0]).collect();
        let mut sys =
            AtomicSystem::new(format!("planted-{k}"), numbers.clone(), positions, None, [false; 3])
                .unwrap();
        sys.energy = Some(numbers.iter().map(|z| planted[z]).sum());
        systems.push(sys);
    }
    let schema = LabelSchema {
        energy: true,
        forces: false,
        scalars: Vec::new(),
    };
    let ds = Dataset::from_systems("planted", schema, systems);
    let fit = fit_linear_reference(&ds).unwrap();
    let mut worst_coeff = 0.0f64;
    for (z, c) in &planted {
        let got = fit.coefficients[z];
        let dev = (got - c).abs();
        worst_coeff = worst_coeff.max(dev);
        assert!(dev < 1e-8, "element {z}: recovered {got}, planted {c}");
    }

    // On generated corpora, written and read back through the file format:
    // referencing shrinks the energy variance and round-trips exactly.
    let dir = tmpdir("ref");
    let variance = |xs: &[f64]| -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    };
    let mut worst_rt = 0.0f64;
    for (i, (eps, sigma)) in [(0.5, 2.0), (1.0, 2.2), (1.5, 2.4)].iter().enumerate() {
        let spec = DomainSpec {
            dataset_id: format!("var_{i}"),
            elements: vec![1, 6],
            count: 80,
            n_min: 3,
            n_max: 6,
            box_side: 6.0,
            epsilon: *eps,
            sigma: *sigma,
            cutoff: 4.0,
        };
        let path = dir.join(format!("var_{i}.jsonl"));
        write_dataset_file(&generate_synthetic(&spec, 900 + i as u64).unwrap(), &path).unwrap();
        let ds = load_dataset_file(&path).unwrap();
        let fit = fit_linear_reference(&ds).unwrap();
        let raw: Vec<f64> = ds.systems.iter().map(|s| s.energy.unwrap()).collect();
        let referenced: Vec<f64> = ds
            .systems
            .iter()
            .map(|s| s.energy.unwrap() - composition_baseline(s, &fit))
            .collect();
        assert!(
            variance(&referenced) <= variance(&raw),
            "file {i}: referencing must not grow the variance"
        );
        let stats = fit_norm_stats(&ds, &fit).unwrap();
        for sys in &ds.systems {
            let (e_n, f_n) = normalize_labels(sys, &fit, &stats).unwrap();
            let (e_back, f_back) =
                denormalize_prediction(sys, e_n, f_n.as_deref(), &fit, &stats).unwrap();
            let e_raw = sys.energy.unwrap();
            let dev = (e_back - e_raw).abs() / e_raw.abs().max(1.0);
            worst_rt = worst_rt.max(dev);
            assert!(dev < 1e-12, "energy round trip drifted by {dev:.2e}");
            let back = f_back.unwrap();
            for (a, b) in sys.forces.as_ref().unwrap().iter().zip(&back) {
                for c in 0..3 {
                    let dev = (a[c] - b[c]).abs() / a[c].abs().max(1.0);
                    worst_rt = worst_rt.max(dev);
                    assert!(dev < 1e-12, "force round trip drifted by {dev:.2e}");
                }
            }
        }
    }
    fs::remove_dir_all(&dir).unwrap();
    println!(
        "[c04] energy referencing: PASS (coefficients within {worst_coeff:.2e}, variance shrinks, round trip within {worst_rt:.2e})"
    );
}

#[test]
fn c05_gradient_forces_match_central_finite_differences() {
    let started = Instant::now();
    let config = ModelConfig {
        atom_embed_dim: 16,
        edge_embed_dim: 16,
        num_blocks: 2,
        rbf_count: 8,
        rbf_cutoff: 4.0,
        max_neighbors: 16,
        dropout_p: 0.0,
        edge_dropout_p: 0.0,
        second_order: true,
    };
    let spec = DomainSpec {
        dataset_id: "fd".into(),
        elements: vec![1, 6],
        count: 20,
        n_min: 3,
        n_max: 6,
        box_side: 6.0,
        epsilon: 1.0,
        sigma: 2.0,
        cutoff: 4.0,
    };
    let ds = generate_synthetic(&spec, 4005).unwrap();
    let heads = HeadSet::new(vec![HeadSpec::energy("fd")]).unwrap();
    let params = init_model(&config, &heads, 11).unwrap();
    let head = heads.get("fd", &TargetKind::Energy).unwrap();

    let h = 1e-4;
    let mut max_diff = 0.0f64;
    let mut max_fd = 0.0f64;
    let mut max_sum = 0.0f64;
    for sys in &ds.systems {
        let graph = build_radius_graph(sys, config.rbf_cutoff, config.max_neighbors).unwrap();
        let batch = collate(vec![sys], vec![0]).unwrap();
        let forces = {
            let gb = GraphBatch::collate(&[&graph]).unwrap();
            let tape = Tape::new();
            let tp = TapedParams::new(&tape, &params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (_e, f) =
                predict_forces_gradient(&batch, &gb, &tp, &config, head, Mode::Eval, &mut rng)
                    .unwrap();
            f.data().to_vec()
        };
        for c in 0..3 {
            let total: f64 = (0..sys.n_atoms()).map(|i| forces[3 * i + c]).sum();
            max_sum = max_sum.max(total.abs());
        }
        let energy_at = |positions: &[[f64; 3]]| -> f64 {
            let moved = recompute_edge_geometry(&graph, positions).unwrap();
            let gb = GraphBatch::collate(&[&moved]).unwrap();
            let tape = Tape::new();
            let tp = TapedParams::new(&tape, &params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let emb = encode(&batch, &gb, &tp, &config, Mode::Eval, &mut rng).unwrap();
            predict_energy(&emb, &gb, &tp, head).unwrap().data()[0]
        };
        for i in 0..sys.n_atoms() {
            for c in 0..3 {
                let mut plus = sys.positions.clone();
                plus[i][c] += h;
                let mut minus = sys.positions.clone();
                minus[i][c] -= h;
                let fd = -(energy_at(&plus) - energy_at(&minus)) / (2.0 * h);
                max_fd = max_fd.max(fd.abs());
                max_diff = max_diff.max((fd - forces[3 * i + c]).abs());
            }
        }
    }
    let rel = max_diff / max_fd;
    let dt = started.elapsed().as_secs_f64();
    assert!(rel < 1e-4, "max relative gradient error {rel:.3e}");
    assert!(max_sum < 1e-8, "forces of an isolated system must sum to zero, got {max_sum:.3e}");
    assert!(dt < 60.0, "finite differences took {dt:.1} s, budget is 60 s");
    println!(
        "[c05] gradient forces vs finite differences: PASS (20 systems, max rel {rel:.2e}, max |force sum| {max_sum:.2e}, {dt:.1} s)"
    );
}

fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

#[test]
fn c06_energy_invariance_and_force_equivariance() {
    // Open clusters with the cutoff far beyond their diameter, so every
    // transform keeps the complete edge set and only geometry can matter.
    let config = ModelConfig {
        atom_embed_dim: 16,
        edge_embed_dim: 16,
        num_blocks: 2,
        rbf_count: 8,
        rbf_cutoff: 14.0,
        max_neighbors: 16,
        dropout_p: 0.0,
        edge_dropout_p: 0.0,
        second_order: true,
    };
    let heads = HeadSet::pretraining(&["sym"]);
    let params = init_model(&config, &heads, 23).unwrap();
    let e_head = heads.get("sym", &TargetKind::Energy).unwrap();
    let f_head = heads.get("sym", &TargetKind::DirectForce).unwrap();

    let forward = |sys: &AtomicSystem| -> (f64, Vec<f64>, Vec<f64>) {
        let graph = build_radius_graph(sys, config.rbf_cutoff, config.max_neighbors).unwrap();
        let gb = GraphBatch::collate(&[&graph]).unwrap();
        let batch = collate(vec![sys], vec![0]).unwrap();
        let tape = Tape::new();
        let tp = TapedParams::new(&tape, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = encode(&batch, &gb, &tp, &config, Mode::Eval, &mut rng).unwrap();
        let e = predict_energy(&emb, &gb, &tp, e_head).unwrap().data()[0];
        let fd = predict_forces_direct(&emb, &gb, &tp, f_head)
            .unwrap()
            .data()
            .to_vec();
        let (_, fg) =
            predict_forces_gradient(&batch, &gb, &tp, &config, e_head, Mode::Eval, &mut rng)
                .unwrap();
        (e, fd, fg.data().to_vec())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(4006);
    let mut worst_e = 0.0f64;
    let mut worst_f = 0.0f64;
    for trial in 0..8 {
        let n = rng.gen_range(3..=6usize);
        let mut positions: Vec<[f64; 3]> = Vec::new();
        while positions.len() < n {
            let p = [
                rng.gen_range(0.0..3.5),
                rng.gen_range(0.0..3.5),
                rng.gen_range(0.0..3.5),
            ];
            let ok = positions.iter().all(|q| {
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                    >= 0.8
            });
            if ok {
                positions.push(p);
            }
        }
        let numbers: Vec<u32> = (0..n).map(|_| [1u32, 6][rng.gen_range(0..2)]).collect();
        let sys = AtomicSystem::new(
            format!("sym-{trial}"),
            numbers.clone(),
            positions.clone(),
            None,
            [false; 3],
        )
        .unwrap();
        let (e0, fd0, fg0) = forward(&sys);
        let scale = 1.0f64
            .max(e0.abs())
            .max(fd0.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .max(fg0.iter().fold(0.0f64, |m, x| m.max(x.abs())));

        // Translation.
        let t = [1.7, -0.9, 2.3];
        let shifted: Vec<[f64; 3]> = positions
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        let moved = AtomicSystem::new("t", numbers.clone(), shifted, None, [false; 3]).unwrap();
        let (e_t, _, _) = forward(&moved);
        let dev = (e_t - e0).abs() / 1.0f64.max(e0.abs());
        worst_e = worst_e.max(dev);
        assert!(dev < 1e-12, "translation moved the energy by {dev:.2e}");

        // Permutation: reverse the atom order.
        let perm_numbers: Vec<u32> = numbers.iter().rev().copied().collect();
        let perm_positions: Vec<[f64; 3]> = positions.iter().rev().copied().collect();
        let permuted =
            AtomicSystem::new("p", perm_numbers, perm_positions, None, [false; 3]).unwrap();
        let (e_p, _, _) = forward(&permuted);
        let dev = (e_p - e0).abs() / 1.0f64.max(e0.abs());
        worst_e = worst_e.max(dev);
        assert!(dev < 1e-12, "permutation moved the energy by {dev:.2e}");

        // Rotation: energy invariant, both force modes equivariant.
        let r = rotation_matrix(
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            rng.gen_range(0.3..std::f64::consts::TAU),
        );
        let turned: Vec<[f64; 3]> = positions.iter().map(|p| rotate(&r, *p)).collect();
        let spun = AtomicSystem::new("r", numbers.clone(), turned, None, [false; 3]).unwrap();
        let (e_r, fd_r, fg_r) = forward(&spun);
        let dev = (e_r - e0).abs() / 1.0f64.max(e0.abs());
        worst_e = worst_e.max(dev);
        assert!(dev < 1e-10, "rotation moved the energy by {dev:.2e}");
        for i in 0..n {
            let want_d = rotate(&r, [fd0[3 * i], fd0[3 * i + 1], fd0[3 * i + 2]]);
            let want_g = rotate(&r, [fg0[3 * i], fg0[3 * i + 1], fg0[3 * i + 2]]);
            for c in 0..3 {
                let dev_d = (fd_r[3 * i + c] - want_d[c]).abs() / scale;
                let dev_g = (fg_r[3 * i + c] - want_g[c]).abs() / scale;
                worst_f = worst_f.max(dev_d).max(dev_g);
                assert!(dev_d < 1e-10, "direct forces broke equivariance by {dev_d:.2e}");
                assert!(dev_g < 1e-10, "gradient forces broke equivariance by {dev_g:.2e}");
            }
        }
    }
    println!(
        "[c06] symmetry suite: PASS (8 clusters; energy dev <= {worst_e:.2e}, force equivariance dev <= {worst_f:.2e})"
    );
}

fn closed_form_lr(
    cfg: &SchedulerConfig,
    warmup: u64,
    cosine: u64,
    step: u64,
    d: f64,
    rlp_factor: f64,
) -> f64 {
    let floor = cfg.base_lr * cfg.cosine_final_factor;
    if step < warmup {
        let t = step as f64 / warmup as f64;
        return cfg.base_lr * d * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * t);
    }
    let s = step - warmup;
    if s < cosine {
        let t = s as f64 / cosine as f64;
        return floor + (cfg.base_lr * d - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    }
    floor * rlp_factor
}

#[test]
fn c07_learning_rate_schedule_matches_closed_form() {
    let steps_per_epoch = 40;
    let rlp = RlpState::default();
    let mut worst = 0.0f64;
    for name in ["pretrain-default", "finetune-default", "finetune-rmd17"] {
        let cfg = scheduler_preset(name, 4).unwrap();
        let sched = Schedule::new(cfg.clone(), steps_per_epoch).unwrap();
        let (w, c) = (sched.warmup_steps(), sched.cosine_steps());
        let groups = ["", "embedding", "block_1", "block_4", "heads"];
        let span = w + c + 20;
        for k in 0..50u64 {
            let step = k * span / 49;
            for g in groups {
                let d = cfg.llrd_factors.get(g).copied().unwrap_or(1.0);
                let want = closed_form_lr(&cfg, w, c, step, d, rlp.factor);
                let got = sched.lr_at(step, g, &rlp);
                let dev = rel_diff(got, want);
                worst = worst.max(dev);
                assert!(dev <= 1e-15, "{name}, step {step}, group '{g}': {got} vs {want}");
            }
        }
        // Continuity at both phase boundaries.
        for g in groups {
            let d = cfg.llrd_factors.get(g).copied().unwrap_or(1.0);
            let warmup_end = cfg.base_lr * d; // warmup formula at t = 1
            let dev = rel_diff(sched.lr_at(w, g, &rlp), warmup_end);
            assert!(dev <= 1e-15, "{name}: warmup/cosine junction jumps by {dev:.2e}");
            let cosine_end = closed_form_lr(&cfg, w, c, w + c - 1, d, rlp.factor);
            let plateau = sched.lr_at(w + c, g, &rlp);
            // One step before the junction the cosine has nearly closed the
            // gap; the junction itself lands exactly on the floor.
            assert!(
                (cosine_end - plateau).abs() <= plateau * 1e-2 + plateau.abs() * 0.1,
                "{name}: cosine tail {cosine_end} far from plateau {plateau}"
            );
            let junction = closed_form_lr(&cfg, w, c, w + c, d, rlp.factor);
            let dev = rel_diff(plateau, junction);
            assert!(dev <= 1e-15, "{name}: cosine/plateau junction jumps by {dev:.2e}");
        }
    }

    // The fine-tuning preset's 0.625 layer group: start, peak, and floor.
    let factors = llrd_factors(4);
    assert_eq!(factors["block_4"], 0.625);
    let cfg = scheduler_preset("finetune-default", 4).unwrap();
    let sched = Schedule::new(cfg, steps_per_epoch).unwrap();
    let start = sched.lr_at(0, "block_4", &rlp);
    let peak = sched.lr_at(sched.warmup_steps(), "block_4", &rlp);
    let floor = sched.lr_at(sched.warmup_steps() + sched.cosine_steps(), "block_4", &rlp);
    assert!(rel_diff(start, 5.0e-6) <= 1e-15, "warmup start {start} vs 5.0e-6");
    assert!(rel_diff(peak, 5.0e-5) <= 1e-15, "peak {peak} vs 5.0e-5");
    assert!(rel_diff(floor, 8.0e-6) <= 1e-15, "final rate {floor} vs 8.0e-6");
    println!(
        "[c07] learning-rate schedule: PASS (3 presets x 50 steps, max rel dev {worst:.2e}; 0.625 group runs 5.0e-6 -> 5.0e-5 -> 8.0e-6)"
    );
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-task projection oracle: drop a gradient's component along any other
/// task's gradient it conflicts with.
fn project_against(g: &[f64], other: &[f64]) -> Vec<f64> {
    let d = dot(g, other);
    if d >= 0.0 {
        return g.to_vec();
    }
    let n2 = dot(other, other);
    g.iter().zip(other).map(|(a, b)| a - d / n2 * b).collect()
}

#[test]
fn c08_gradient_surgery_hand_case_and_projection_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(4008);
    // Hand case: g1 = (1, 0) projects to (0.5, 0.5); g2 = (-1, 1) to (0, 1).
    let sum = pcgrad(&[vec![1.0, 0.0], vec![-1.0, 1.0]], &mut rng).unwrap();
    assert!((sum[0] - 0.5).abs() < 1e-15 && (sum[1] - 1.5).abs() < 1e-15,
        "hand case combined gradient {sum:?} vs (0.5, 1.5)");

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.gen_range(2..=16usize);
        let g1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p1 = project_against(&g1, &g2);
        let p2 = project_against(&g2, &g1);
        let sum = pcgrad(&[g1.clone(), g2.clone()], &mut rng).unwrap();
        for i in 0..dim {
            assert!(
                (sum[i] - (p1[i] + p2[i])).abs() < 1e-12,
                "combined gradient disagrees with the projection oracle"
            );
        }
        let d12 = dot(&p1, &g2);
        let d21 = dot(&p2, &g1);
        worst = worst.min(d12).min(d21);
        assert!(d12 >= -1e-12 && d21 >= -1e-12, "projected gradients still conflict");
    }
    println!(
        "[c08] gradient surgery: PASS (hand case exact, 1000 pairs, worst projected dot {worst:.2e})"
    );
}

fn lj_file(dir: &std::path::Path, id: &str, count: usize, eps: f64, sigma: f64, seed: u64) -> String {
    let spec = DomainSpec {
        dataset_id: id.to_string(),
        elements: vec![1, 6],
        count,
        n_min: 3,
        n_max: 8,
        box_side: 7.0,
        epsilon: eps,
        sigma,
        cutoff: 5.0,
    };
    let path = dir.join(format!("{id}.jsonl"));
    write_dataset_file(&generate_synthetic(&spec, seed).unwrap(), &path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn c09_pretraining_transfers_to_an_unseen_domain() {
    let started = Instant::now();
    let dir = tmpdir("transfer");
    let model = ModelConfig {
        atom_embed_dim: 48,
        edge_embed_dim: 48,
        num_blocks: 3,
        rbf_count: 16,
        rbf_cutoff: 5.0,
        max_neighbors: 24,
        dropout_p: 0.0,
        edge_dropout_p: 0.0,
        second_order: true,
    };
    // Two source potentials bracket the target one; the target train set is
    // small enough that a fresh model cannot match a pre-trained backbone.
    let dom_a = lj_file(&dir, "dom_a", 5000, 0.5, 2.0, 9001);
    let dom_b = lj_file(&dir, "dom_b", 5000, 1.5, 2.4, 9002);
    let dom_c = lj_file(&dir, "dom_c", 200, 1.0, 2.2, 9003);
    let test_spec = DomainSpec {
        dataset_id: "dom_c".into(),
        elements: vec![1, 6],
        count: 300,
        n_min: 3,
        n_max: 8,
        box_side: 7.0,
        epsilon: 1.0,
        sigma: 2.2,
        cutoff: 5.0,
    };
    let held_out = generate_synthetic(&test_spec, 9004).unwrap();

    let mut pre_cfg = RunConfig::pretrain_defaults(
        model.clone(),
        vec![
            DatasetRef::new("dom_a", &dom_a),
            DatasetRef::new("dom_b", &dom_b),
        ],
        42,
    );
    pre_cfg.mixture.batch_size = 16;
    pre_cfg.scheduler.warmup = PhaseLen::Steps(100);
    pre_cfg.scheduler.cosine = PhaseLen::Epochs(23.0);
    pre_cfg.early_stop.max_epochs = 24;
    let pre = pretrain(&pre_cfg, dir.join("pretrain")).unwrap();

    let force_mae = |artifacts: &multipot::trainer::RunArtifacts| -> f64 {
        evaluate(
            &artifacts.checkpoint,
            "dom_c",
            "test",
            &held_out.systems,
            &[EvalTarget::Forces],
            32,
        )
        .unwrap()
        .rows[0]
            .mae
    };

    let mut improvements = Vec::new();
    let mut wins = 0;
    for seed in 1..=5u64 {
        let mut ft = RunConfig::finetune_defaults(
            model.clone(),
            vec![DatasetRef::new("dom_c", &dom_c)],
            Some(pre.checkpoint_path.display().to_string()),
            seed,
        );
        // Small-molecule force fine-tuning wants the long cosine.
        ft.scheduler = scheduler_preset("finetune-rmd17", model.num_blocks).unwrap();
        ft.early_stop.max_epochs = 150;
        let fine = finetune(&ft, dir.join(format!("fine_{seed}"))).unwrap();

        let mut sc = RunConfig::scratch_defaults(
            model.clone(),
            vec![DatasetRef::new("dom_c", &dom_c)],
            seed,
        );
        sc.early_stop.max_epochs = 150;
        let scratch = finetune(&sc, dir.join(format!("scratch_{seed}"))).unwrap();

        let fine_mae = force_mae(&fine);
        let scratch_mae = force_mae(&scratch);
        if fine_mae < scratch_mae {
            wins += 1;
        }
        let ri = relative_improvement(scratch_mae, fine_mae).unwrap();
        println!(
            "[c09]   seed {seed}: scratch force MAE {scratch_mae:.4}, fine-tuned {fine_mae:.4}, improvement {ri:.1}%"
        );
        improvements.push(ri);
    }
    improvements.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = improvements[2];
    let dt = started.elapsed().as_secs_f64();
    assert!(dt < 1800.0, "transfer run took {dt:.0} s, budget is 30 min");
    assert!(
        wins >= 4,
        "fine-tuning beat scratch in only {wins}/5 seeds ({improvements:?})"
    );
    assert!(
        median > 15.0,
        "median improvement {median:.1}% is below 15% ({improvements:?})"
    );
    fs::remove_dir_all(&dir).unwrap();
    println!(
        "[c09] transfer to an unseen domain: PASS (wins {wins}/5, median force-MAE improvement {median:.1}%, {dt:.0} s)"
    );
}

#[test]
fn c10_fixed_seed_and_resume_are_bit_identical_over_500_steps() {
    let dir = tmpdir("determinism");
    let model = ModelConfig {
        atom_embed_dim: 12,
        edge_embed_dim: 12,
        num_blocks: 2,
        rbf_count: 6,
        rbf_cutoff: 4.0,
        max_neighbors: 12,
        dropout_p: 0.1,
        edge_dropout_p: 0.1,
        second_order: true,
    };
    let dom_a = lj_file(&dir, "det_a", 96, 0.8, 2.0, 7007);
    let dom_b = lj_file(&dir, "det_b", 96, 1.2, 2.2, 7008);
    let mut cfg = RunConfig::pretrain_defaults(
        model,
        vec![
            DatasetRef::new("det_a", &dom_a),
            DatasetRef::new("det_b", &dom_b),
        ],
        31,
    );
    cfg.mixture.batch_size = 4;
    cfg.early_stop.max_epochs = 12;
    cfg.train.checkpoint_every = 250;

    let run1 = pretrain(&cfg, dir.join("run1")).unwrap();
    assert!(run1.steps_run >= 500, "run covered only {} steps", run1.steps_run);
    let run2 = pretrain(&cfg, dir.join("run2")).unwrap();
    let bytes1 = fs::read(&run1.checkpoint_path).unwrap();
    assert_eq!(bytes1, fs::read(&run2.checkpoint_path).unwrap(),
        "two runs from the same seed diverged");
    assert_eq!(
        fs::read(dir.join("run1/metrics.csv")).unwrap(),
        fs::read(dir.join("run2/metrics.csv")).unwrap(),
        "metric logs diverged"
    );

    let resumed = resume(&cfg, dir.join("run1/step_00000250.ckpt"), dir.join("resumed")).unwrap();
    assert_eq!(bytes1, fs::read(&resumed.checkpoint_path).unwrap(),
        "resumed run diverged from the uninterrupted one");
    let steps = run1.steps_run;
    fs::remove_dir_all(&dir).unwrap();
    println!(
        "[c10] determinism and resume: PASS ({steps} steps; rerun and mid-run resume both bit-identical)"
    );
}

#[test]
fn c11_threshold_gating_zeroes_small_errors_and_is_monotone() {
    // Errors strictly inside the preset margins contribute exactly nothing.
    let spec = ThresholdSpec::new(vec![Some(MOLECULAR_MARGINS), Some(CATALYSIS_MARGINS)]).unwrap();
    let dataset_idx = vec![0usize, 1];
    let batch_idx = vec![0, 0, 0, 1, 1, 1];
    let shape = BatchShape::new(dataset_idx, batch_idx).unwrap();
    let weights = LossWeights::new(vec![(1.0, 3.0), (1.0, 3.0)]).unwrap();
    let tape = Tape::new();
    let e_tgt = tape.constant(Value::new(vec![2], vec![0.0, 0.0]).unwrap());
    let e_pred = tape.constant(Value::new(vec![2], vec![0.042, 0.099]).unwrap());
    let f_tgt = tape.constant(Value::new(vec![6, 3], vec![0.0; 18]).unwrap());
    let mut f = vec![0.0; 18];
    for i in 0..3 {
        f[i * 3] = 0.009;
    }
    for i in 3..6 {
        f[i * 3] = 0.029;
    }
    let f_pred = tape.constant(Value::new(vec![6, 3], f).unwrap());
    let gated = threshold_wrap(
        &e_pred, &f_pred, &e_tgt, &f_tgt, &shape, &weights, &spec, ErrorForm::Absolute,
    )
    .unwrap()
    .item();
    assert_eq!(gated, 0.0, "errors inside the margins must vanish");

    // Zero margins reproduce the ungated loss exactly.
    let zero = ThresholdSpec::new(vec![Some((0.0, 0.0)); 2]).unwrap();
    let open = threshold_wrap(
        &e_pred, &f_pred, &e_tgt, &f_tgt, &shape, &weights, &zero, ErrorForm::Absolute,
    )
    .unwrap()
    .item();
    let plain = swl_loss(&e_pred, &f_pred, &e_tgt, &f_tgt, &shape, &weights, ErrorForm::Absolute)
        .unwrap()
        .item();
    assert_eq!(open, plain, "zero margins must be the identity");

    // Growing the margins never grows the loss.
    let mut rng = ChaCha8Rng::seed_from_u64(4011);
    for case in 0..100 {
        let n_datasets = rng.gen_range(1..=3usize);
        let case_data = random_loss_case(&mut rng, n_datasets);
        let shape =
            BatchShape::new(case_data.dataset_idx.clone(), case_data.batch_idx.clone()).unwrap();
        let tape = Tape::new();
        let (ep, fp, et, ft) = case_tensors(&tape, &case_data);
        let weights = LossWeights::uniform(n_datasets);
        let small: Vec<Option<(f64, f64)>> = (0..n_datasets)
            .map(|_| Some((rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5))))
            .collect();
        let grow = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
        let big: Vec<Option<(f64, f64)>> = small
            .iter()
            .map(|m| m.map(|(e, f)| (e * grow.0, f * grow.1)))
            .collect();
        let loss_small = threshold_wrap(
            &ep, &fp, &et, &ft, &shape, &weights,
            &ThresholdSpec::new(small).unwrap(), ErrorForm::Absolute,
        )
        .unwrap()
        .item();
        let loss_big = threshold_wrap(
            &ep, &fp, &et, &ft, &shape, &weights,
            &ThresholdSpec::new(big).unwrap(), ErrorForm::Absolute,
        )
        .unwrap()
        .item();
        assert!(
            loss_big <= loss_small,
            "case {case}: widening margins grew the loss ({loss_small} -> {loss_big})"
        );
    }
    println!(
        "[c11] threshold gating: PASS (inside-margin batch scores 0, zero margins are the identity, monotone on 100 batches)"
    );
}

#[test]
fn c12_early_stopping_fires_each_condition_at_the_exact_epoch() {
    let cfg = early_stop_preset("finetune-default").unwrap();
    assert_eq!((cfg.patience, cfg.max_epochs, cfg.min_lr), (50, 500, 1e-8));

    // Improvement through epoch 10, flat afterwards: the 50-epoch patience
    // runs out exactly at epoch 60.
    let mut state = EarlyStopState::default();
    let mut stopped = None;
    for epoch in 1..=1000u64 {
        let metric = if epoch <= 10 { 1.0 / epoch as f64 } else { 0.1 };
        if let Some(reason) = early_stop(&mut state, metric, epoch, 1e-3, None, &cfg) {
            stopped = Some((reason, epoch));
            break;
        }
    }
    assert_eq!(stopped, Some((StopReason::NoImprovement, 60)));

    // A stream that improves forever stops exactly at the epoch cap.
    let mut state = EarlyStopState::default();
    let mut stopped = None;
    for epoch in 1..=1000u64 {
        if let Some(reason) = early_stop(&mut state, 1.0 / epoch as f64, epoch, 1e-3, None, &cfg) {
            stopped = Some((reason, epoch));
            break;
        }
    }
    assert_eq!(stopped, Some((StopReason::MaxEpochs, 500)));

    // The learning-rate floor fires the first epoch the rate is below it.
    let mut state = EarlyStopState::default();
    let mut stopped = None;
    for epoch in 1..=1000u64 {
        let lr = if epoch < 7 { 1e-3 } else { 9e-9 };
        if let Some(reason) = early_stop(&mut state, 1.0 / epoch as f64, epoch, lr, None, &cfg) {
            stopped = Some((reason, epoch));
            break;
        }
    }
    assert_eq!(stopped, Some((StopReason::LrFloor, 7)));
    println!(
        "[c12] early stopping: PASS (patience stop at epoch 60, cap at 500, rate floor at 7)"
    );
}
