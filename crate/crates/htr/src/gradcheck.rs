//! Reusable finite-difference verification suite: every differentiable op
//! at seeded random points, plus one micro encoder-decoder composite, all
//! in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::PAD_ID;
use crate::params::ParamStore;
use crate::tensor::conv::{batchnorm2d, conv2d, maxpool2d, BnStats};
use crate::tensor::ops::*;
use crate::tensor::{grad_check, Tape};
use crate::transformer::{Transformer, TransformerConfig};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

/// Threshold shared by the CLI gate and the test suite.
pub const TOLERANCE: f64 = 1e-4;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // sampled away from relu/maxpool kinks
    (0..n).map(|_| rng.gen_range(0.2..1.8)).collect()
}

/// Central-difference check of each op against the tape gradient.
pub fn op_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut out = Vec::new();
    let mut case = |name: &str, err: f64| {
        out.push(CheckResult { name: name.to_string(), max_rel_err: err });
    };
    let r = &mut rng;

    case(
        "add+scale+add_scalar",
        grad_check(
            |_, i| sum_all(add_scalar(add(scale(i[0], 1.3), i[1]).unwrap(), 0.7)),
            &[(rand_vec(r, 6), vec![2, 3]), (rand_vec(r, 6), vec![2, 3])],
            eps,
        ),
    );
    case(
        "mul",
        grad_check(
            |_, i| sum_all(mul(i[0], i[1]).unwrap()),
            &[(rand_vec(r, 4), vec![4]), (rand_vec(r, 4), vec![4])],
            eps,
        ),
    );
    case(
        "matmul",
        grad_check(
            |_, i| sum_all(matmul(i[0], i[1]).unwrap()),
            &[(rand_vec(r, 6), vec![2, 3]), (rand_vec(r, 6), vec![3, 2])],
            eps,
        ),
    );
    case("relu", grad_check(|_, i| sum_all(relu(i[0])), &[(rand_vec(r, 5), vec![5])], eps));
    case(
        "softmax",
        grad_check(
            |_, i| sum_all(mul(softmax(i[0]), i[1]).unwrap()),
            &[(rand_vec(r, 6), vec![2, 3]), (rand_vec(r, 6), vec![2, 3])],
            eps,
        ),
    );
    case(
        "masked_softmax",
        grad_check(
            |_, i| {
                let blocked = [false, true, false, false, false, true];
                sum_all(mul(masked_softmax(i[0], &blocked).unwrap(), i[1]).unwrap())
            },
            &[(rand_vec(r, 6), vec![2, 3]), (rand_vec(r, 6), vec![2, 3])],
            eps,
        ),
    );
    case(
        "layer_norm",
        grad_check(
            |_, i| sum_all(mul(layer_norm(i[0], i[1], i[2], 1e-5).unwrap(), i[3]).unwrap()),
            &[
                (rand_vec(r, 8), vec![2, 4]),
                (rand_vec(r, 4), vec![4]),
                (rand_vec(r, 4), vec![4]),
                (rand_vec(r, 8), vec![2, 4]),
            ],
            eps,
        ),
    );
    case(
        "conv2d",
        grad_check(
            |_, i| sum_all(conv2d(i[0], i[1], Some(i[2]), 1, 1).unwrap()),
            &[
                (rand_vec(r, 32), vec![1, 2, 4, 4]),
                (rand_vec(r, 36), vec![2, 2, 3, 3]),
                (rand_vec(r, 2), vec![2]),
            ],
            eps,
        ),
    );
    case(
        "batchnorm_train",
        grad_check(
            |_, i| {
                let (y, _) =
                    batchnorm2d(i[0], i[1], i[2], &BnStats::identity(2), true, 0.1, 1e-5).unwrap();
                sum_all(mul(y, i[3]).unwrap())
            },
            &[
                (rand_vec(r, 16), vec![2, 2, 2, 2]),
                (rand_vec(r, 2), vec![2]),
                (rand_vec(r, 2), vec![2]),
                (rand_vec(r, 16), vec![2, 2, 2, 2]),
            ],
            eps,
        ),
    );
    case(
        "cross_entropy_masked",
        grad_check(
            |_, i| cross_entropy_masked(i[0], &[1, 0], usize::MAX).unwrap(),
            &[(rand_vec(r, 6), vec![2, 3])],
            eps,
        ),
    );
    case(
        "concat+slice_cols+permute+reshape",
        grad_check(
            |_, i| {
                let c = concat(&[i[0], i[1]], 1).unwrap();
                let s = slice_cols(c, 1, 3).unwrap();
                let p = permute(s, &[1, 0]).unwrap();
                sum_all(reshape(p, &[6]).unwrap())
            },
            &[(rand_vec(r, 4), vec![2, 2]), (rand_vec(r, 4), vec![2, 2])],
            eps,
        ),
    );
    case(
        "embedding+add_row_bias",
        grad_check(
            |_, i| {
                let e = embedding_lookup(i[0], &[1, 0, 1]).unwrap();
                sum_all(add_row_bias(e, i[1]).unwrap())
            },
            &[(rand_vec(r, 4), vec![2, 2]), (rand_vec(r, 2), vec![2])],
            eps,
        ),
    );
    case(
        "maxpool+global_avgpool",
        grad_check(
            |_, i| {
                let p = maxpool2d(i[0], 2, 1, 0).unwrap();
                sum_all(global_avgpool(p).unwrap())
            },
            &[(rand_vec(r, 16), vec![1, 1, 4, 4])],
            eps,
        ),
    );
    case(
        "dropout",
        grad_check(
            |_, i| {
                let mut drng = ChaCha8Rng::seed_from_u64(11);
                sum_all(dropout(i[0], 0.5, &mut drng))
            },
            &[(rand_vec(r, 16), vec![16])],
            eps,
        ),
    );
    out
}

/// Micro encoder-decoder composite (d_model 8, 1+1 layers, 3 memory
/// columns): finite differences over every trainable parameter of the
/// masked cross-entropy loss.
pub fn micro_composite(seed: u64) -> CheckResult {
    let cfg = TransformerConfig {
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        max_target_len: 8,
    };
    let tf = Transformer::new(cfg, 5).expect("micro config is valid");
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tf.register(&mut store, &mut rng);
    let mem_data: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tokens = [crate::codec::SOS_ID, 4, 2];
    let targets = [4usize, 2, 0];

    let loss_of = |store: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let memory = tape.tensor(mem_data.clone(), &[3, 8], false).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let memory = tf.encoder_forward(&b, memory, &[false; 3], false, &mut drng).unwrap();
        let logits = tf.decoder_forward(&b, &tokens, memory, &[false; 3], false, &mut drng).unwrap();
        cross_entropy_masked(logits, &targets, PAD_ID).unwrap().item()
    };

    let analytic: std::collections::HashMap<String, Vec<f64>> = {
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let memory = tape.tensor(mem_data.clone(), &[3, 8], false).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let memory = tf.encoder_forward(&b, memory, &[false; 3], true, &mut drng).unwrap();
        let logits = tf.decoder_forward(&b, &tokens, memory, &[false; 3], true, &mut drng).unwrap();
        let loss = cross_entropy_masked(logits, &targets, PAD_ID).unwrap();
        tape.backward(loss).unwrap();
        store
            .trainable_names()
            .into_iter()
            .map(|n| {
                let g = b.grad(&n).unwrap_or_else(|| vec![0.0; store.get(&n).data.len()]);
                (n, g)
            })
            .collect()
    };

    let eps = 1e-5;
    let mut max_err: f64 = 0.0;
    for name in store.trainable_names() {
        let len = store.get(&name).data.len();
        for i in 0..len {
            let orig = store.get(&name).data[i];
            store.get_mut(&name).data[i] = orig + eps;
            let hi = loss_of(&store);
            store.get_mut(&name).data[i] = orig - eps;
            let lo = loss_of(&store);
            store.get_mut(&name).data[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic[&name][i];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    CheckResult { name: "micro_encoder_decoder".to_string(), max_rel_err: max_err }
}

/// Full suite: per-op checks plus the composite.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut results = op_checks(seed);
    results.push(micro_composite(seed));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_tolerance() {
        for r in run_suite(5) {
            assert!(r.max_rel_err < TOLERANCE, "{}: {}", r.name, r.max_rel_err);
        }
    }
}
