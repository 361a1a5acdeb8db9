//! Central-difference checks of every hand-written backward pass.
//!
//! Loss checks perturb raw (not renormalized) embeddings, so the loss is
//! seen as a plain function of its inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{finite_diff_grad_check, l2_normalize, Embedding};
use crate::encoders::{
    compose_failure_context, EncoderDims, FailurePromptPool, TextTable, VideoEncoderParams,
};
use crate::error::Result;
use crate::losses::{
    bce_loss, cdc_loss, fvlc_loss, vlc_loss, Batch, FailureNegatives, FailureTexts, Grads,
    LossValue,
};
use crate::sim::Task;

/// Finite-difference step.
pub const EPS: f64 = 1e-5;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    l2_normalize(&v).expect("uniform draw is nonzero")
}

/// Seeded batch over tasks 0..3: tasks 0 and 1 carry three failure texts
/// each, task 2 has none.
pub fn random_loss_batch(seed: u64, dim: usize, tau: f64) -> (Batch, FailureTexts) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Batch::new(tau);
    for t in [0usize, 1, 2] {
        b.texts.insert(t, random_unit(&mut rng, dim));
    }
    for t in [0usize, 1, 2, 0] {
        b.human.push(random_unit(&mut rng, dim));
        b.human_tasks.push(t);
    }
    for t in [0usize, 1, 2] {
        b.robot_success.push(random_unit(&mut rng, dim));
        b.robot_success_tasks.push(t);
    }
    for (t, k) in [(0usize, 0usize), (1, 2), (0, 1), (1, 1)] {
        b.robot_failure.push(random_unit(&mut rng, dim));
        b.failure_tasks.push(t);
        b.failure_k.push(k);
    }
    let mut ft = FailureTexts::new();
    for t in [0usize, 1] {
        ft.insert(t, (0..3).map(|_| random_unit(&mut rng, dim)).collect());
    }
    (b, ft)
}

fn flatten(b: &Batch, ft: &FailureTexts) -> Vec<f64> {
    let mut out = Vec::new();
    for v in b.human.iter().chain(&b.robot_success).chain(&b.robot_failure) {
        out.extend_from_slice(v);
    }
    for t in b.texts.values() {
        out.extend_from_slice(t);
    }
    for f in ft.values().flatten() {
        out.extend_from_slice(f);
    }
    out
}

/// Gradients in the order `loss_grad_error` perturbs embeddings.
pub fn flatten_grads(g: &Grads, ft: &FailureTexts, dim: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for v in g.human.iter().chain(&g.robot_success).chain(&g.robot_failure) {
        out.extend_from_slice(v);
    }
    for t in g.texts.values() {
        out.extend_from_slice(t);
    }
    for (task, fs) in ft {
        for k in 0..fs.len() {
            match g.failure_texts.get(task) {
                Some(gs) => out.extend_from_slice(&gs[k]),
                None => out.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
    }
    out
}

fn unflatten(template: &Batch, ft: &FailureTexts, theta: &[f64], dim: usize) -> (Batch, FailureTexts) {
    let mut chunks = theta.chunks(dim).map(|c| Embedding::from_unit(c.to_vec()));
    let mut b = template.clone();
    let mut next = || chunks.next().expect("theta matches the template");
    for v in b
        .human
        .iter_mut()
        .chain(b.robot_success.iter_mut())
        .chain(b.robot_failure.iter_mut())
    {
        *v = next();
    }
    for t in b.texts.values_mut() {
        *t = next();
    }
    let mut f = ft.clone();
    for x in f.values_mut().flatten() {
        *x = next();
    }
    (b, f)
}

/// Worst relative error of a loss's embedding gradients on one batch.
pub fn loss_grad_error<L>(batch: &Batch, ft: &FailureTexts, loss: L) -> Result<f64>
where
    L: Fn(&Batch, &FailureTexts) -> Result<LossValue>,
{
    let dim = batch.texts.values().next().map_or(0, |t| t.dim());
    let out = loss(batch, ft)?;
    let theta = flatten(batch, ft);
    let analytic = flatten_grads(&out.grads, ft, dim);
    let value = |th: &[f64]| {
        let (b, f) = unflatten(batch, ft, th, dim);
        loss(&b, &f).map_or(f64::NAN, |v| v.value)
    };
    finite_diff_grad_check(value, &analytic, &theta, EPS)
}

fn random_target(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn squared_distance(e: &[f64], target: &[f64]) -> f64 {
    e.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Encoder parameter gradient of `|encode(clip) - target|^2` at jittered
/// parameters.
pub fn encoder_grad_error(seed: u64) -> Result<f64> {
    let dims = EncoderDims::default();
    let mut p = VideoEncoderParams::new(dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Non-zero temporal logits and biases exercise every path.
    for x in p.flat_mut().iter_mut() {
        *x += rng.random_range(-0.1..0.1);
    }
    let clip: Vec<Vec<f64>> = (0..dims.frames)
        .map(|_| (0..dims.frame_width).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let target = random_target(&mut rng, dims.embed);
    let (v, cache) = p.forward(&clip)?;
    let gv: Vec<f64> = v.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
    let mut grad = vec![0.0; p.num_params()];
    p.backward(&clip, &v, &cache, &gv, &mut grad);
    let value = |th: &[f64]| {
        VideoEncoderParams::from_flat(dims, th.to_vec())
            .and_then(|q| q.encode(&clip))
            .map_or(f64::NAN, |e| squared_distance(&e, &target))
    };
    finite_diff_grad_check(value, &grad, p.flat(), EPS)
}

/// Prompt-pool gradient of `|compose_failure_context(..) - target|^2` for a
/// seeded task and cluster.
pub fn composition_grad_error(seed: u64) -> Result<f64> {
    let dims = EncoderDims::default();
    let tasks = [Task::OpenDrawer, Task::PushCupRightToLeft, Task::PokeCup];
    let text = TextTable::new(&tasks, dims.embed, seed)?;
    let ids: Vec<usize> = tasks.iter().map(|t| t.id()).collect();
    let mut pool = FailurePromptPool::new(&ids, 3, 2, dims.embed, seed ^ 0xf00)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for x in pool.flat_mut().iter_mut() {
        *x += rng.random_range(-0.2..0.2);
    }
    let id = ids[rng.random_range(0..ids.len())];
    let k = rng.random_range(0..3);
    let target = random_target(&mut rng, dims.embed);
    let (e, cache) = pool.forward(&text, id, k)?;
    let g: Vec<f64> = e.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
    let mut grad = vec![0.0; pool.num_params()];
    pool.backward(id, k, &e, &cache, &g, &mut grad)?;
    let value = |th: &[f64]| {
        let mut q = pool.clone();
        q.set_flat(th.to_vec())
            .and_then(|_| compose_failure_context(&q, &text, id, k))
            .map_or(f64::NAN, |e| squared_distance(&e, &target))
    };
    finite_diff_grad_check(value, &grad, pool.flat(), EPS)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
}

/// Names of the checked backward passes, in suite order.
pub const SUITE: [&str; 7] = [
    "cdc_loss",
    "vlc_loss",
    "vlc_loss_failure_negatives",
    "bce_loss",
    "fvlc_loss",
    "encode_video",
    "compose_failure_context",
];

/// Runs every check once per seed in `0..seeds` at temperature `tau`.
pub fn gradient_suite(seeds: u64, tau: f64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let (b, ft) = random_loss_batch(seed, 8, tau);
        let errs = [
            loss_grad_error(&b, &ft, |b, _| cdc_loss(b))?,
            loss_grad_error(&b, &ft, |b, _| vlc_loss(b, FailureNegatives::None))?,
            loss_grad_error(&b, &ft, |b, ft| vlc_loss(b, FailureNegatives::Available(ft)))?,
            loss_grad_error(&b, &ft, |b, _| bce_loss(b))?,
            loss_grad_error(&b, &ft, fvlc_loss)?,
            encoder_grad_error(seed)?,
            composition_grad_error(seed)?,
        ];
        for (name, max_rel_err) in SUITE.into_iter().zip(errs) {
            out.push(GradCheck {
                name,
                seed,
                max_rel_err,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_temperature() {
        let rows = gradient_suite(3, 0.07).unwrap();
        assert_eq!(rows.len(), 3 * SUITE.len());
        for r in rows {
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let (b, ft) = random_loss_batch(1, 8, 0.5);
        let err = loss_grad_error(&b, &ft, |b, _| {
            let mut v = cdc_loss(b)?;
            v.grads.human[0][0] += 0.01;
            Ok(v)
        })
        .unwrap();
        assert!(err > 1e-3);
    }
}
