//! Training objectives over batches of unit embeddings.
//!
//! Every loss returns its value together with gradients with respect to the
//! embeddings that entered it (videos, task texts, failure texts). Pulling
//! those back through the encoders is the trainer's job. All losses are sums
//! over the batch and use `-log` of the softmax ratio.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{nce_group, Embedding};
use crate::error::{Error, Result};

/// Embeddings of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub human: Vec<Embedding>,
    pub human_tasks: Vec<usize>,
    pub robot_success: Vec<Embedding>,
    pub robot_success_tasks: Vec<usize>,
    pub robot_failure: Vec<Embedding>,
    pub failure_tasks: Vec<usize>,
    /// Assigned cluster per failure sample.
    pub failure_k: Vec<usize>,
    /// Frozen `t_T` for every task that appears in the batch.
    pub texts: BTreeMap<usize, Embedding>,
    pub tau: f64,
    /// Drop the anchor from its own positive set and denominator in CDC.
    pub exclude_self: bool,
}

impl Batch {
    pub fn new(tau: f64) -> Self {
        Batch {
            human: Vec::new(),
            human_tasks: Vec::new(),
            robot_success: Vec::new(),
            robot_success_tasks: Vec::new(),
            robot_failure: Vec::new(),
            failure_tasks: Vec::new(),
            failure_k: Vec::new(),
            texts: BTreeMap::new(),
            tau,
            exclude_self: false,
        }
    }

    fn success_views(&self) -> (Vec<&Embedding>, Vec<usize>) {
        let v = self.human.iter().chain(&self.robot_success).collect();
        let t = self
            .human_tasks
            .iter()
            .chain(&self.robot_success_tasks)
            .copied()
            .collect();
        (v, t)
    }

    fn text(&self, task: usize) -> Result<&Embedding> {
        self.texts.get(&task).ok_or(Error::UnknownTask(task))
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        let pairs = [
            ("human", self.human.len(), self.human_tasks.len()),
            ("robot_success", self.robot_success.len(), self.robot_success_tasks.len()),
            ("robot_failure", self.robot_failure.len(), self.failure_tasks.len()),
            ("failure clusters", self.robot_failure.len(), self.failure_k.len()),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::ShapeMismatch(format!("{name}: {a} embeddings, {b} labels")));
            }
        }
        let dim = self.texts.values().next().map(|t| t.dim());
        let all = self
            .human
            .iter()
            .chain(&self.robot_success)
            .chain(&self.robot_failure)
            .chain(self.texts.values());
        if let Some(d) = dim {
            for e in all {
                if e.dim() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: e.dim(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-task failure-text features `t^f_{T,1..K}`.
pub type FailureTexts = BTreeMap<usize, Vec<Embedding>>;

/// How failure texts enter the video-to-text denominator.
#[derive(Debug, Clone, Copy)]
pub enum FailureNegatives<'a> {
    None,
    /// Every anchor's task must have failure texts.
    Strict(&'a FailureTexts),
    /// Anchors whose task has no failure texts get none.
    Available(&'a FailureTexts),
}

/// Gradients with respect to every embedding a loss reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub human: Vec<Vec<f64>>,
    pub robot_success: Vec<Vec<f64>>,
    pub robot_failure: Vec<Vec<f64>>,
    pub texts: BTreeMap<usize, Vec<f64>>,
    pub failure_texts: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl Grads {
    pub fn zeros(batch: &Batch, failure_texts: Option<&FailureTexts>) -> Self {
        let dim = batch
            .texts
            .values()
            .next()
            .map(|t| t.dim())
            .or_else(|| batch.human.first().map(|e| e.dim()))
            .unwrap_or(0);
        let z = |n: usize| vec![vec![0.0; dim]; n];
        Grads {
            human: z(batch.human.len()),
            robot_success: z(batch.robot_success.len()),
            robot_failure: z(batch.robot_failure.len()),
            texts: batch.texts.keys().map(|&k| (k, vec![0.0; dim])).collect(),
            failure_texts: failure_texts
                .map(|ft| ft.iter().map(|(&k, v)| (k, z(v.len()))).collect())
                .unwrap_or_default(),
        }
    }

    /// Gradient slot of success sample `i` in human-then-robot order.
    fn success_mut(&mut self, i: usize) -> &mut Vec<f64> {
        let h = self.human.len();
        if i < h {
            &mut self.human[i]
        } else {
            &mut self.robot_success[i - h]
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        fn axpy(a: &mut [f64], b: &[f64], s: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        let lists = [
            (&mut self.human, &other.human),
            (&mut self.robot_success, &other.robot_success),
            (&mut self.robot_failure, &other.robot_failure),
        ];
        for (mine, theirs) in lists {
            for (a, b) in mine.iter_mut().zip(theirs) {
                axpy(a, b, scale);
            }
        }
        for (k, g) in &other.texts {
            if let Some(a) = self.texts.get_mut(k) {
                axpy(a, g, scale);
            }
        }
        for (k, gs) in &other.failure_texts {
            let dim = gs.first().map_or(0, Vec::len);
            let mine = self
                .failure_texts
                .entry(*k)
                .or_insert_with(|| vec![vec![0.0; dim]; gs.len()]);
            for (a, b) in mine.iter_mut().zip(gs) {
                axpy(a, b, scale);
            }
        }
    }
}

fn add_to(target: &mut [f64], src: &[f64], scale: f64) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += scale * s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Grads,
}

/// Cross-domain supervised contrastive loss over all success samples.
///
/// Each anchor averages `-log softmax` over the samples sharing its task
/// label, in either domain; the anchor itself counts as a positive and sits in
/// the denominator unless `batch.exclude_self` is set.
pub fn cdc_loss(batch: &Batch) -> Result<LossValue> {
    batch.validate()?;
    if batch.human.is_empty() || batch.robot_success.is_empty() {
        return Err(Error::ShapeMismatch(
            "CDC needs at least one human and one robot success sample".into(),
        ));
    }
    let (vs, labels) = batch.success_views();
    let b = vs.len();
    let mut grads = Grads::zeros(batch, None);
    let mut value = 0.0;
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&j| !(batch.exclude_self && j == i)).collect();
        let positives: Vec<usize> = others
            .iter()
            .enumerate()
            .filter(|&(_, &j)| labels[j] == labels[i])
            .map(|(slot, _)| slot)
            .collect();
        if !(0..b).any(|j| j != i && labels[j] == labels[i]) {
            return Err(Error::EmptyPositiveSet { anchor: i });
        }
        let sims: Vec<f64> = others.iter().map(|&j| vs[i].dot(vs[j])).collect();
        let (loss, ds) = nce_group(&sims, &positives, batch.tau);
        value += loss;
        for (slot, &j) in others.iter().enumerate() {
            let vj = vs[j].as_slice().to_vec();
            let vi = vs[i].as_slice().to_vec();
            add_to(grads.success_mut(i), &vj, ds[slot]);
            add_to(grads.success_mut(j), &vi, ds[slot]);
        }
    }
    Ok(LossValue { value, grads })
}

fn failure_texts_for<'a>(
    negatives: FailureNegatives<'a>,
    task: usize,
) -> Result<Option<&'a Vec<Embedding>>> {
    match negatives {
        FailureNegatives::None => Ok(None),
        FailureNegatives::Strict(ft) => ft
            .get(&task)
            .filter(|v| !v.is_empty())
            .map(Some)
            .ok_or(Error::MissingFailureTexts(task)),
        FailureNegatives::Available(ft) => Ok(ft.get(&task).filter(|v| !v.is_empty())),
    }
}

/// Bidirectional video-language InfoNCE over success samples, optionally
/// with failure-text negatives in the video-to-text direction.
pub fn vlc_loss(batch: &Batch, negatives: FailureNegatives<'_>) -> Result<LossValue> {
    batch.validate()?;
    let (vs, tasks) = batch.success_views();
    let texts: Vec<&Embedding> = tasks.iter().map(|&t| batch.text(t)).collect::<Result<_>>()?;
    let ft_map = match negatives {
        FailureNegatives::None => None,
        FailureNegatives::Strict(m) | FailureNegatives::Available(m) => Some(m),
    };
    let mut grads = Grads::zeros(batch, ft_map);
    let b = vs.len();
    let mut value = 0.0;
    for i in 0..b {
        // video -> text
        let fts = failure_texts_for(negatives, tasks[i])?;
        let mut sims: Vec<f64> = texts.iter().map(|t| vs[i].dot(t)).collect();
        if let Some(fts) = fts {
            sims.extend(fts.iter().map(|f| vs[i].dot(f)));
        }
        let (loss, ds) = nce_group(&sims, &[i], batch.tau);
        value += loss;
        let vi = vs[i].as_slice().to_vec();
        for j in 0..b {
            add_to(grads.success_mut(i), texts[j], ds[j]);
            add_to(grads.texts.get_mut(&tasks[j]).expect("text slot"), &vi, ds[j]);
        }
        if let Some(fts) = fts {
            let slots = grads.failure_texts.get_mut(&tasks[i]).expect("failure slot");
            for (slot, d) in slots.iter_mut().zip(&ds[b..]) {
                add_to(slot, &vi, *d);
            }
            for (k, f) in fts.iter().enumerate() {
                add_to(grads.success_mut(i), f, ds[b + k]);
            }
        }
        // text -> video
        let sims: Vec<f64> = vs.iter().map(|v| texts[i].dot(v)).collect();
        let (loss, ds) = nce_group(&sims, &[i], batch.tau);
        value += loss;
        let ti = texts[i].as_slice().to_vec();
        for j in 0..b {
            let vj = vs[j].as_slice().to_vec();
            add_to(grads.texts.get_mut(&tasks[i]).expect("text slot"), &vj, ds[j]);
            add_to(grads.success_mut(j), &ti, ds[j]);
        }
    }
    Ok(LossValue { value, grads })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy on robot clips with `p = σ(v · t_T)`; successes are
/// labeled 1, failures 0.
pub fn bce_loss(batch: &Batch) -> Result<LossValue> {
    batch.validate()?;
    let mut grads = Grads::zeros(batch, None);
    let mut value = 0.0;
    let groups = [
        (&batch.robot_success, &batch.robot_success_tasks, 1.0),
        (&batch.robot_failure, &batch.failure_tasks, 0.0),
    ];
    for (gi, (vs, tasks, r)) in groups.into_iter().enumerate() {
        for (i, (v, &task)) in vs.iter().zip(tasks).enumerate() {
            let t = batch.text(task)?;
            let s = v.dot(t);
            // -[r log σ(s) + (1-r) log(1-σ(s))] = r softplus(-s) + (1-r) softplus(s)
            value += r * softplus(-s) + (1.0 - r) * softplus(s);
            let ds = crate::encoders::sigmoid(s) - r;
            let slot = if gi == 0 {
                &mut grads.robot_success[i]
            } else {
                &mut grads.robot_failure[i]
            };
            add_to(slot, t, ds);
            add_to(grads.texts.get_mut(&task).expect("text slot"), v, ds);
        }
    }
    Ok(LossValue { value, grads })
}

/// Contrastive loss pulling each failure video toward its assigned failure
/// text and away from its task's success text and the other failure texts.
pub fn fvlc_loss(batch: &Batch, failure_texts: &FailureTexts) -> Result<LossValue> {
    batch.validate()?;
    let mut grads = Grads::zeros(batch, Some(failure_texts));
    let mut value = 0.0;
    for (i, v) in batch.robot_failure.iter().enumerate() {
        let task = batch.failure_tasks[i];
        let fts = failure_texts
            .get(&task)
            .filter(|f| !f.is_empty())
            .ok_or(Error::MissingFailureTexts(task))?;
        let k_star = batch.failure_k[i];
        if k_star >= fts.len() {
            return Err(Error::BadClusterIndex {
                index: k_star,
                k: fts.len(),
            });
        }
        let t = batch.text(task)?;
        let mut sims = vec![v.dot(t)];
        sims.extend(fts.iter().map(|f| v.dot(f)));
        let (loss, ds) = nce_group(&sims, &[1 + k_star], batch.tau);
        value += loss;
        add_to(&mut grads.robot_failure[i], t, ds[0]);
        add_to(grads.texts.get_mut(&task).expect("text slot"), v, ds[0]);
        let slots = grads.failure_texts.get_mut(&task).expect("failure slot");
        for (k, f) in fts.iter().enumerate() {
            add_to(&mut grads.robot_failure[i], f, ds[1 + k]);
            add_to(&mut slots[k], v, ds[1 + k]);
        }
    }
    Ok(LossValue { value, grads })
}

/// How failure clips enter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Failure clips are ignored.
    NoFailure,
    /// Failure clips are negatives of a binary classifier.
    Bce,
    /// Failure clips are matched to clustered failure prompts.
    Fvlc,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::NoFailure, TrainMode::Bce, TrainMode::Fvlc];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::NoFailure => "no_failure",
            TrainMode::Bce => "bce",
            TrainMode::Fvlc => "fvlc",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<TrainMode> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown training mode `{s}`")))
    }
}

/// Weights of the contrastive, video-language and failure terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cdc: f64,
    pub vlc: f64,
    pub failure: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cdc: 1.0,
            vlc: 1.0,
            failure: 1.0,
        }
    }
}

/// Per-term breakdown of a total loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub cdc: f64,
    pub vlc: f64,
    pub failure: f64,
}

pub fn total_loss(
    batch: &Batch,
    failure_texts: &FailureTexts,
    mode: TrainMode,
    weights: LossWeights,
) -> Result<(LossValue, LossParts)> {
    let cdc = cdc_loss(batch)?;
    let negatives = match mode {
        TrainMode::Fvlc => FailureNegatives::Available(failure_texts),
        _ => FailureNegatives::None,
    };
    let vlc = vlc_loss(batch, negatives)?;
    let failure = match mode {
        TrainMode::NoFailure => None,
        TrainMode::Bce => Some(bce_loss(batch)?),
        TrainMode::Fvlc => Some(fvlc_loss(batch, failure_texts)?),
    };
    let ft = (mode == TrainMode::Fvlc).then_some(failure_texts);
    let mut grads = Grads::zeros(batch, ft);
    grads.add_scaled(&cdc.grads, weights.cdc);
    grads.add_scaled(&vlc.grads, weights.vlc);
    let mut parts = LossParts {
        cdc: cdc.value,
        vlc: vlc.value,
        failure: 0.0,
    };
    if let Some(f) = &failure {
        grads.add_scaled(&f.grads, weights.failure);
        parts.failure = f.value;
    }
    let value = weights.cdc * parts.cdc + weights.vlc * parts.vlc + weights.failure * parts.failure;
    Ok((LossValue { value, grads }, parts))
}
