//! Structure-wise versus atom-pooled force loss on a size-skewed batch.
//!
//! The 4-atom system is badly wrong (0.9 eV/A per atom) while the 40-atom
//! system is nearly right (0.1 eV/A per atom). Pooling all atoms lets the
//! large system outvote the small one ten to one, shrinking the visible
//! error; the structure-wise reduction averages within each system first,
//! so the small system's failure stays loud.
//!
//!     cargo run -p multipot --example loss_balancing

use multipot::loss::{
    naive_loss, swl_loss, threshold_wrap, BatchShape, ErrorForm, LossWeights, ThresholdSpec,
    MOLECULAR_MARGINS,
};
use tapegrad::{Tape, Value};

fn main() {
    let counts = [4usize, 40];
    let mut batch_idx = Vec::new();
    for (s, &c) in counts.iter().enumerate() {
        batch_idx.extend(std::iter::repeat(s).take(c));
    }
    let n = batch_idx.len();
    let shape = BatchShape::new(vec![0, 0], batch_idx).expect("shape");

    let tape = Tape::new();
    let e_pred = tape.constant(Value::new(vec![2], vec![0.2, 0.2]).unwrap());
    let e_tgt = tape.constant(Value::new(vec![2], vec![0.0, 0.0]).unwrap());
    // Small system badly wrong, large system nearly right.
    let mut f = vec![0.0; n * 3];
    for i in 0..n {
        f[i * 3] = if i < counts[0] { 0.9 } else { 0.1 };
    }
    let f_pred = tape.constant(Value::new(vec![n, 3], f).unwrap());
    let f_tgt = tape.constant(Value::new(vec![n, 3], vec![0.0; n * 3]).unwrap());

    let weights = LossWeights::new(vec![(1.0, 10.0)]).expect("weights");
    let swl = swl_loss(&e_pred, &f_pred, &e_tgt, &f_tgt, &shape, &weights, ErrorForm::Absolute)
        .expect("loss");
    let pooled =
        naive_loss(&e_pred, &f_pred, &e_tgt, &f_tgt, &shape, &weights, ErrorForm::Absolute)
            .expect("loss");
    println!("structure-wise loss: {:.4}", swl.item());
    println!("atom-pooled loss:    {:.4}", pooled.item());

    // With per-dataset error margins, contributions already below the margin
    // are gated to zero. Here every error clears the molecular margins, so
    // gating changes nothing.
    let spec = ThresholdSpec::new(vec![Some(MOLECULAR_MARGINS)]).expect("margins");
    let gated = threshold_wrap(
        &e_pred, &f_pred, &e_tgt, &f_tgt, &shape, &weights, &spec, ErrorForm::Absolute,
    )
    .expect("loss");
    println!("gated (errors above margin, unchanged): {:.4}", gated.item());

    // Shrink the errors inside the margins and the gated loss vanishes.
    let e_small = tape.constant(Value::new(vec![2], vec![0.01, 0.01]).unwrap());
    let mut f = vec![0.0; n * 3];
    for i in 0..n {
        f[i * 3] = 0.005;
    }
    let f_small = tape.constant(Value::new(vec![n, 3], f).unwrap());
    let gated = threshold_wrap(
        &e_small, &f_small, &e_tgt, &f_tgt, &shape, &weights, &spec, ErrorForm::Absolute,
    )
    .expect("loss");
    println!("gated (errors inside margin):           {:.4}", gated.item());
}
