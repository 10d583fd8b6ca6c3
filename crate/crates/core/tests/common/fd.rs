//! Central finite differences against tape gradients.
//!
//! Each check builds a scalar from leaf tensors, backpropagates once, then
//! perturbs every (or a seeded sample of) input entries by
//! `±H·max(1, |x|)` and compares. The relative error of one entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`; the floor
//! keeps round-off on near-zero gradients from dominating.

use nfs_core::bilevel::{objective, ObjectiveConfig};
use nfs_core::modality::Modality;
use nfs_core::net::{ForwardMode, GradRequest, ImageBatch, NetConfig, TwoStreamNet};
use nfs_core::objectives::{
    contrastive_loss, id_loss, wrt_triplet, ContrastiveConfig, CrossModalPair, CrossModalPairSet,
};
use nfs_core::tensor::{BnMode, GateLevel, Tape, Tensor, Var};
use nfs_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-6;
pub const FLOOR: f64 = 1e-2;
pub const CASES: u64 = 100;
pub const TOLERANCE: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Dots `out` with a fixed random tensor so every output entry matters.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(normal(&mut rng, &shape, 1.0));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Largest relative error over the checked entries of every input.
/// `sample` limits how many entries per input are perturbed.
pub fn check<F>(inputs: &[Tensor<f64>], sample: Option<usize>, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut entries: Vec<usize> = (0..input.numel()).collect();
        if let Some(k) = sample {
            entries.shuffle(&mut rng);
            entries.truncate(k);
        }
        for j in entries {
            let step = H * input.values()[j].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

fn rng_for(family: u64, case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(family * 1_000_003 + case)
}

pub fn conv_case(case: u64) -> f64 {
    let mut rng = rng_for(1, case);
    let (b, ci, co) = (2, rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=5));
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let inputs = [
        normal(&mut rng, &[b, ci, h, w], 1.0),
        normal(&mut rng, &[co, ci, 3, 3], 0.5),
        normal(&mut rng, &[co], 0.5),
    ];
    check(&inputs, None, case, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
        project(t, y, case)
    })
}

pub fn affine_case(case: u64) -> f64 {
    let mut rng = rng_for(2, case);
    let (b, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let inputs = [
        normal(&mut rng, &[b, i], 1.0),
        normal(&mut rng, &[i, o], 0.5),
        normal(&mut rng, &[o], 0.5),
    ];
    check(&inputs, None, case, |t, v| {
        let y = t.affine(v[0], v[1], v[2])?;
        project(t, y, case)
    })
}

pub fn batch_norm_case(case: u64) -> f64 {
    let mut rng = rng_for(3, case);
    let (b, c) = (rng.random_range(2..=4), rng.random_range(1..=3));
    let spatial = case.is_multiple_of(2);
    let shape: Vec<usize> = if spatial { vec![b, c, 2, 3] } else { vec![b, c] };
    let inputs = [
        normal(&mut rng, &shape, 2.0),
        normal(&mut rng, &[c], 1.0),
        normal(&mut rng, &[c], 1.0),
    ];
    // Alternate between batch statistics and fixed running statistics.
    let train = case % 4 < 2;
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    check(&inputs, None, case, |t, v| {
        let mode = if train { BnMode::Train } else { BnMode::Eval { mean: &mean, var: &var } };
        let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
        project(t, y, case)
    })
}

pub fn pooling_case(case: u64) -> f64 {
    let mut rng = rng_for(4, case);
    let shape = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
    let inputs = [normal(&mut rng, &shape, 1.0)];
    check(&inputs, None, case, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, case)
    })
}

pub fn id_loss_case(case: u64) -> f64 {
    let mut rng = rng_for(5, case);
    let (b, k) = (rng.random_range(1..=6), rng.random_range(2..=6));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let inputs = [normal(&mut rng, &[b, k], 2.0)];
    check(&inputs, None, case, |t, v| id_loss(t, v[0], &labels))
}

/// Labels for `p` identities with `k` rows each, shuffled.
fn grouped_labels(rng: &mut ChaCha8Rng, p: u32, k: usize) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..p).flat_map(|id| std::iter::repeat_n(id, k)).collect();
    labels.shuffle(rng);
    labels
}

pub fn wrt_case(case: u64) -> f64 {
    let mut rng = rng_for(6, case);
    let (p, k, d) = (rng.random_range(2..=3), rng.random_range(2..=3), rng.random_range(2..=5));
    let labels = grouped_labels(&mut rng, p, k);
    let inputs = [normal(&mut rng, &[labels.len(), d], 1.0)];
    check(&inputs, None, case, |t, v| wrt_triplet(t, v[0], &labels))
}

/// Random cross-modality pairs. Every fourth case places the first pair's
/// distance just inside or just outside the margin.
pub fn contrastive_case(case: u64) -> f64 {
    let mut rng = rng_for(7, case);
    let config = ContrastiveConfig::default();
    let (n, d) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let mut emb = normal(&mut rng, &[2 * n, d], config.margin / (d as f64).sqrt());
    let pairs: Vec<CrossModalPair> = (0..n)
        .map(|i| CrossModalPair {
            rgb: i,
            ir: n + i,
            label: rng.random_bool(0.3),
        })
        .collect();
    if case.is_multiple_of(4) {
        let target = config.margin + if case.is_multiple_of(8) { 1e-3 } else { -1e-3 };
        let mut dir = normal(&mut rng, &[d], 1.0).into_values();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x *= target / norm);
        let v = emb.values_mut();
        for k in 0..d {
            v[n * d + k] = v[k] + dir[k];
        }
    }
    let set = CrossModalPairSet { pairs };
    check(&[emb], None, case, |t, v| contrastive_loss(t, v[0], &set, &config))
}

/// The gate-mask op with gates from `ste_gate` in relaxed form: the gate
/// value is sigmoid(P), so the surrogate derivative is the exact one.
pub fn gate_op_case(case: u64) -> f64 {
    let mut rng = rng_for(8, case);
    let (c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let rows: Vec<Modality> = (0..4).map(|i| if i % 2 == 0 { Modality::Rgb } else { Modality::Ir }).collect();
    let level = if case.is_multiple_of(2) { GateLevel::Channel } else { GateLevel::Pixel };
    let gshape: Vec<usize> = match level {
        GateLevel::Channel => vec![c],
        GateLevel::Pixel => vec![c, h, w],
    };
    let inputs = [
        normal(&mut rng, &[rows.len(), c, h, w], 1.0),
        normal(&mut rng, &gshape, 1.0),
        normal(&mut rng, &gshape, 1.0),
    ];
    check(&inputs, None, case, |t, v| {
        let mut gates = [v[1]; 2];
        for (m, &p) in [v[1], v[2]].iter().enumerate() {
            let probs: Vec<f64> = t.value(p).iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
            gates[m] = t.ste_gate(p, probs)?;
        }
        let y = t.gate_mask(v[0], gates, &rows, level)?;
        project(t, y, case)
    })
}

pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        input_height: 8,
        input_width: 4,
        stem_width: 3,
        stage_widths: vec![3, 4],
        searched_stages: vec![1, 2],
        num_identities: 3,
        gate_init: (-1.0, 1.0),
        ..NetConfig::default()
    }
}

/// Whole-network loss in relaxed mode, differentiated with respect to
/// every gate logit through the STE path; 6 sampled logits per case.
pub fn net_gate_case(case: u64) -> f64 {
    let mut rng = rng_for(9, case);
    let config = tiny_net_config();
    let mut net: TwoStreamNet<f64> = TwoStreamNet::init_params(&config, &mut rng).unwrap();
    let ids: Vec<u32> = vec![0, 0, 1, 1, 2, 2];
    let batch = ImageBatch::new(
        Some((normal(&mut rng, &[6, 3, 8, 4], 1.0), ids.clone())),
        Some((normal(&mut rng, &[6, 1, 8, 4], 1.0), ids)),
    )
    .unwrap();
    let objective_cfg = ObjectiveConfig {
        use_contrastive: true,
        contrastive: ContrastiveConfig {
            margin: 3.0,
            lambda_weight: 0.5,
        },
    };
    let loss = |net: &mut TwoStreamNet<f64>, grads: GradRequest| -> f64 {
        let mut pair_rng = ChaCha8Rng::seed_from_u64(case);
        let mut pass = net.forward(&batch, ForwardMode::Relaxed, grads, &mut pair_rng).unwrap();
        let (total, parts) = objective(&mut pass, 3, &objective_cfg, &mut pair_rng).unwrap();
        if grads.gates {
            pass.tape.backward(total).unwrap();
            net.absorb_gradients(&pass).unwrap();
        }
        parts.total
    };
    net.zero_grad();
    loss(&mut net, GradRequest::GATES);

    let cells = net.search_cells().count();
    let mut worst = 0.0f64;
    for _ in 0..6 {
        let ci = rng.random_range(0..cells);
        let j = rng.random_range(0..net.search_cells().nth(ci).unwrap().param().numel());
        let analytic = net.search_cells().nth(ci).unwrap().param().grad()[j];
        let bump = |net: &mut TwoStreamNet<f64>, delta: f64| {
            net.search_cells_mut().nth(ci).unwrap().param_mut().values_mut()[j] += delta;
        };
        bump(&mut net, H);
        let up = loss(&mut net, GradRequest::NONE);
        bump(&mut net, -2.0 * H);
        let down = loss(&mut net, GradRequest::NONE);
        bump(&mut net, H);
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * H)));
    }
    worst
}

pub type Family = (&'static str, fn(u64) -> f64);

pub const FAMILIES: [Family; 9] = [
    ("conv2d", conv_case),
    ("affine", affine_case),
    ("batch_norm", batch_norm_case),
    ("global_avg_pool", pooling_case),
    ("id_loss", id_loss_case),
    ("wrt_triplet", wrt_case),
    ("contrastive", contrastive_case),
    ("gate_mask+ste", gate_op_case),
    ("net_gate_path", net_gate_case),
];

/// Worst relative error of each family over [`CASES`] seeds.
pub fn run_suite() -> Vec<(&'static str, f64)> {
    FAMILIES
        .iter()
        .map(|(name, f)| (*name, (0..CASES).map(f).fold(0.0, f64::max)))
        .collect()
}
