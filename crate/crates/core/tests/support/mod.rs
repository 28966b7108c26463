//! Shared fixtures for integration tests.
#![allow(dead_code)]

use apifill_core::model::{embed, forward, Mat, ModelConfig, Params};
use apifill_core::tokenizer::TokenSeq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab_size: 12,
        max_input_len: 6,
        max_output_len: 5,
        seed: 11,
    }
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient is ~0 compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn fixture() -> (Params<f64>, Vec<(TokenSeq, TokenSeq)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut p = Params::<f64>::init(&gradcheck_config()).unwrap();
    p.randomize(&mut rng, 0.3);
    let data = vec![
        (TokenSeq::new(&[5, 7, 3, 4, 9], 6), TokenSeq::new(&[6, 8, 11, 2], 5)),
        (TokenSeq::new(&[10, 4, 6], 6), TokenSeq::new(&[7, 2], 5)),
    ];
    (p, data)
}

fn total_loss(p: &Params<f64>, data: &[(TokenSeq, TokenSeq)]) -> f64 {
    data.iter().map(|(i, t)| forward(p, i, t, None).unwrap().loss).sum()
}

pub struct ParamCheck {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Every parameter coordinate against a central difference.
pub fn check_parameters() -> ParamCheck {
    let (p, data) = fixture();
    let mut analytic = p.zeros_like();
    for (i, t) in &data {
        let mut tr = forward(&p, i, t, None).unwrap();
        analytic.add_assign(&tr.backward().unwrap().params);
    }
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = ParamCheck {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (ti, name) in names.iter().enumerate() {
        for k in 0..p.tensors()[ti].len() {
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data_mut()[k] += FD_STEP;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= FD_STEP;
            let fd = (total_loss(&plus, &data) - total_loss(&minus, &data)) / (2.0 * FD_STEP);
            let an = analytic.tensors()[ti].data()[k];
            let e = rel_err(an, fd);
            if e > out.worst {
                out.worst = e;
                out.worst_at = format!("{name}[{k}]");
            }
            out.checked += 1;
        }
    }
    out
}

/// Random coordinates of the input embedding gradient, for each example.
pub fn check_embeddings(samples: usize) -> f64 {
    let (p, data) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for (input, target) in &data {
        let emb = embed(&p, input).unwrap();
        let g = forward(&p, input, target, Some(&emb)).unwrap().backward().unwrap().embedding;
        for _ in 0..samples {
            let r = rng.gen_range(0..emb.len);
            let c = rng.gen_range(0..gradcheck_config().hidden);
            let bump = |d: f64| {
                let mut delta = Mat::zeros(emb.rows.rows(), emb.rows.cols());
                delta.set(r, c, d);
                forward(&p, input, target, Some(&emb.perturbed(&delta))).unwrap().loss
            };
            let fd = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.get(r, c), fd));
        }
    }
    worst
}
