//! Video encoder, frozen task-text table, and the per-task failure prompt pool.
//!
//! Trainable parameters live in flat `Vec<f64>` buffers so optimizers and
//! finite-difference checks can treat them uniformly; the layout of each
//! buffer is documented on its owner.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{header_usize, parse_header};
use crate::embedding::{dot, l2_normalize, norm, normalize_backward, softmax, Embedding};
use crate::error::{Error, Result};
use crate::sim::Task;

pub const DEFAULT_FRAME_WIDTH: usize = 16;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_FRAMES: usize = 4;
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_PROMPT_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub frame_width: usize,
    pub hidden: usize,
    pub frames: usize,
    pub embed: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            frame_width: DEFAULT_FRAME_WIDTH,
            hidden: DEFAULT_HIDDEN,
            frames: DEFAULT_FRAMES,
            embed: DEFAULT_EMBED_DIM,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Per-frame `tanh(W1 x + b1)`, softmax-weighted temporal average, then
/// `W2 m + b2` and normalization.
///
/// Layout of `theta`: `W1` (H×F, row-major), `b1` (H), temporal logits (L),
/// `W2` (D×H), `b2` (D).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoderParams {
    dims: EncoderDims,
    theta: Vec<f64>,
}

struct Offsets {
    b1: usize,
    temporal: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

fn offsets(d: &EncoderDims) -> Offsets {
    let b1 = d.hidden * d.frame_width;
    let temporal = b1 + d.hidden;
    let w2 = temporal + d.frames;
    let b2 = w2 + d.embed * d.hidden;
    Offsets {
        b1,
        temporal,
        w2,
        b2,
        end: b2 + d.embed,
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    hidden: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    pooled: Vec<f64>,
    out_norm: f64,
}

impl VideoEncoderParams {
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = offsets(&dims);
        let mut theta = vec![0.0; o.end];
        let w1 = gaussian(&mut rng, o.b1, 1.0 / (dims.frame_width as f64).sqrt());
        theta[..o.b1].copy_from_slice(&w1);
        let w2 = gaussian(&mut rng, o.b2 - o.w2, 1.0 / (dims.hidden as f64).sqrt());
        theta[o.w2..o.b2].copy_from_slice(&w2);
        VideoEncoderParams { dims, theta }
    }

    pub fn from_flat(dims: EncoderDims, theta: Vec<f64>) -> Result<Self> {
        let expected = offsets(&dims).end;
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: theta.len(),
            });
        }
        if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue(format!("encoder parameter {i}")));
        }
        Ok(VideoEncoderParams { dims, theta })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn flat(&self) -> &[f64] {
        &self.theta
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn check_clip(&self, clip: &[Vec<f64>]) -> Result<()> {
        let d = &self.dims;
        if clip.len() != d.frames {
            return Err(Error::ShapeMismatch(format!(
                "clip has {} frames, encoder expects {}",
                clip.len(),
                d.frames
            )));
        }
        if let Some(f) = clip.iter().find(|f| f.len() != d.frame_width) {
            return Err(Error::ShapeMismatch(format!(
                "frame width {}, encoder expects {}",
                f.len(),
                d.frame_width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, clip: &[Vec<f64>]) -> Result<(Embedding, EncoderCache)> {
        self.check_clip(clip)?;
        let d = &self.dims;
        let o = offsets(d);
        let t = &self.theta;
        let hidden: Vec<Vec<f64>> = clip
            .iter()
            .map(|x| {
                (0..d.hidden)
                    .map(|h| {
                        let row = &t[h * d.frame_width..(h + 1) * d.frame_width];
                        (dot(row, x) + t[o.b1 + h]).tanh()
                    })
                    .collect()
            })
            .collect();
        let alpha = softmax(&t[o.temporal..o.w2]);
        let mut pooled = vec![0.0; d.hidden];
        for (a, h) in alpha.iter().zip(&hidden) {
            for (p, x) in pooled.iter_mut().zip(h) {
                *p += a * x;
            }
        }
        let out: Vec<f64> = (0..d.embed)
            .map(|e| dot(&t[o.w2 + e * d.hidden..o.w2 + (e + 1) * d.hidden], &pooled) + t[o.b2 + e])
            .collect();
        let out_norm = norm(&out);
        let emb = l2_normalize(&out)?;
        Ok((
            emb,
            EncoderCache {
                hidden,
                alpha,
                pooled,
                out_norm,
            },
        ))
    }

    pub fn encode(&self, clip: &[Vec<f64>]) -> Result<Embedding> {
        self.forward(clip).map(|(e, _)| e)
    }

    /// Accumulates into `grad` (same layout as the parameters) the gradient
    /// of a scalar whose gradient with respect to the output embedding is
    /// `grad_out`.
    pub fn backward(
        &self,
        clip: &[Vec<f64>],
        emb: &Embedding,
        cache: &EncoderCache,
        grad_out: &[f64],
        grad: &mut [f64],
    ) {
        let d = &self.dims;
        let o = offsets(d);
        let t = &self.theta;
        let gu = normalize_backward(emb, cache.out_norm, grad_out);
        let mut gm = vec![0.0; d.hidden];
        for (e, g) in gu.iter().enumerate() {
            let row = o.w2 + e * d.hidden;
            for h in 0..d.hidden {
                grad[row + h] += g * cache.pooled[h];
                gm[h] += g * t[row + h];
            }
            grad[o.b2 + e] += g;
        }
        let ga: Vec<f64> = cache.hidden.iter().map(|h| dot(&gm, h)).collect();
        let mean_ga = dot(&cache.alpha, &ga);
        for l in 0..d.frames {
            grad[o.temporal + l] += cache.alpha[l] * (ga[l] - mean_ga);
            let x = &clip[l];
            for h in 0..d.hidden {
                let hv = cache.hidden[l][h];
                let gz = cache.alpha[l] * gm[h] * (1.0 - hv * hv);
                if gz == 0.0 {
                    continue;
                }
                let row = h * d.frame_width;
                for (f, xf) in x.iter().enumerate() {
                    grad[row + f] += gz * xf;
                }
                grad[o.b1 + h] += gz;
            }
        }
    }
}

pub fn encode_video(clip: &[Vec<f64>], params: &VideoEncoderParams) -> Result<Embedding> {
    params.encode(clip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub expression: String,
    pub text_embedding: Embedding,
}

/// Frozen text embeddings, one per task, seeded Gaussian directions made
/// mutually orthogonal by Gram-Schmidt and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    dim: usize,
    specs: BTreeMap<usize, TaskSpec>,
}

impl TextTable {
    pub fn new(tasks: &[Task], dim: usize, seed: u64) -> Result<Self> {
        if tasks.len() > dim {
            return Err(Error::BadConfig(format!(
                "{} tasks cannot have orthogonal texts in {dim} dimensions",
                tasks.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Embedding> = Vec::new();
        let mut specs = BTreeMap::new();
        for &task in tasks {
            let mut v = gaussian(&mut rng, dim, 1.0);
            for b in &basis {
                let p = dot(&v, b);
                for (x, bi) in v.iter_mut().zip(b.iter()) {
                    *x -= p * bi;
                }
            }
            let e = l2_normalize(&v)?;
            basis.push(e.clone());
            if specs
                .insert(
                    task.id(),
                    TaskSpec {
                        task_id: task.id(),
                        expression: task.expression().to_string(),
                        text_embedding: e,
                    },
                )
                .is_some()
            {
                return Err(Error::BadConfig(format!("task {task} registered twice")));
            }
        }
        Ok(TextTable { dim, specs })
    }

    pub fn from_specs(dim: usize, specs: Vec<TaskSpec>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in specs {
            if s.text_embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.text_embedding.dim(),
                });
            }
            map.insert(s.task_id, s);
        }
        Ok(TextTable { dim, specs: map })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self, task_id: usize) -> Result<&TaskSpec> {
        self.specs.get(&task_id).ok_or(Error::UnknownTask(task_id))
    }

    pub fn text_embed(&self, task_id: usize) -> Result<&Embedding> {
        self.spec(task_id).map(|s| &s.text_embedding)
    }

    pub fn specs(&self) -> impl Iterator<Item = &TaskSpec> {
        self.specs.values()
    }
}

/// K learnable prompts per task plus the shared pooling map that turns
/// `[P; y_T]` into a failure-text feature.
///
/// Layout of the flat parameter buffer: pooling map `W_p` (D×D,
/// row-major), then for each task in ascending id order its K prompts, each
/// `prompt_len` rows of width D.
#[derive(Debug, Clone, PartialEq)]
pub struct FailurePromptPool {
    dim: usize,
    k: usize,
    prompt_len: usize,
    tasks: Vec<usize>,
    theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PromptCache {
    pooled: Vec<f64>,
    out_norm: f64,
}

impl FailurePromptPool {
    pub fn new(tasks: &[usize], k: usize, prompt_len: usize, dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || prompt_len == 0 {
            return Err(Error::BadConfig(format!(
                "prompt pool needs K >= 1 and length >= 1, got K = {k}, length = {prompt_len}"
            )));
        }
        let mut ids = tasks.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; dim * dim];
        for i in 0..dim {
            theta[i * dim + i] = 1.0;
        }
        theta.extend(gaussian(
            &mut rng,
            ids.len() * k * prompt_len * dim,
            1.0 / (dim as f64).sqrt(),
        ));
        Ok(FailurePromptPool {
            dim,
            k,
            prompt_len,
            tasks: ids,
            theta,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tasks(&self) -> &[usize] {
        &self.tasks
    }

    pub fn has_task(&self, task_id: usize) -> bool {
        self.tasks.binary_search(&task_id).is_ok()
    }

    pub fn flat(&self) -> &[f64] {
        &self.theta
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_flat(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                found: theta.len(),
            });
        }
        self.theta = theta;
        Ok(())
    }

    /// Index range of prompt `(task_id, k)` inside the flat buffer.
    pub fn prompt_range(&self, task_id: usize, k: usize) -> Result<std::ops::Range<usize>> {
        let slot = self
            .tasks
            .binary_search(&task_id)
            .map_err(|_| Error::UnknownTask(task_id))?;
        if k >= self.k {
            return Err(Error::BadClusterIndex { index: k, k: self.k });
        }
        let size = self.prompt_len * self.dim;
        let start = self.dim * self.dim + (slot * self.k + k) * size;
        Ok(start..start + size)
    }

    pub fn prompt(&self, task_id: usize, k: usize) -> Result<&[f64]> {
        Ok(&self.theta[self.prompt_range(task_id, k)?])
    }

    /// Relabels the prompts of one task: new slot `j` receives old slot
    /// `perm[j]`.
    pub fn permute(&mut self, task_id: usize, perm: &[usize]) -> Result<()> {
        if perm.len() != self.k {
            return Err(Error::SizeMismatch(format!(
                "permutation of length {} for K = {}",
                perm.len(),
                self.k
            )));
        }
        let old: Vec<Vec<f64>> = (0..self.k)
            .map(|k| self.prompt(task_id, k).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        for (j, &src) in perm.iter().enumerate() {
            let r = self.prompt_range(task_id, j)?;
            self.theta[r].copy_from_slice(&old[src]);
        }
        Ok(())
    }

    pub fn forward(
        &self,
        text: &TextTable,
        task_id: usize,
        k: usize,
    ) -> Result<(Embedding, PromptCache)> {
        let range = self.prompt_range(task_id, k)?;
        let y = text.text_embed(task_id)?;
        if y.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: y.dim(),
            });
        }
        let rows = (self.prompt_len + 1) as f64;
        let mut pooled: Vec<f64> = y.iter().map(|v| v / rows).collect();
        for row in self.theta[range].chunks(self.dim) {
            for (p, x) in pooled.iter_mut().zip(row) {
                *p += x / rows;
            }
        }
        let out: Vec<f64> = self.theta[..self.dim * self.dim]
            .chunks(self.dim)
            .map(|w| dot(w, &pooled))
            .collect();
        let out_norm = norm(&out);
        let emb = l2_normalize(&out)?;
        Ok((emb, PromptCache { pooled, out_norm }))
    }

    /// Gradient of a scalar with respect to the pool parameters, given its
    /// gradient `grad_out` with respect to `t^f_{T,k}`.
    pub fn backward(
        &self,
        task_id: usize,
        k: usize,
        emb: &Embedding,
        cache: &PromptCache,
        grad_out: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let range = self.prompt_range(task_id, k)?;
        let d = self.dim;
        let gu = normalize_backward(emb, cache.out_norm, grad_out);
        let mut gm = vec![0.0; d];
        for (i, g) in gu.iter().enumerate() {
            for j in 0..d {
                grad[i * d + j] += g * cache.pooled[j];
                gm[j] += g * self.theta[i * d + j];
            }
        }
        let rows = (self.prompt_len + 1) as f64;
        for (slot, idx) in range.enumerate() {
            grad[idx] += gm[slot % d] / rows;
        }
        Ok(())
    }
}

pub fn compose_failure_context(
    pool: &FailurePromptPool,
    text: &TextTable,
    task_id: usize,
    k: usize,
) -> Result<Embedding> {
    pool.forward(text, task_id, k).map(|(e, _)| e)
}

/// Trainable model state bundled for checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub encoder: VideoEncoderParams,
    pub text: TextTable,
    pub pool: FailurePromptPool,
}

impl RewardModel {
    /// Learned reward `σ(v · t_T)` for one clip.
    pub fn score(&self, clip: &[Vec<f64>], task_id: usize) -> Result<f64> {
        let v = self.encoder.encode(clip)?;
        let t = self.text.text_embed(task_id)?;
        Ok(sigmoid(v.dot(t)))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "reward-checkpoint";

/// Named tensors in a flat text file.
///
/// ```text
/// reward-checkpoint v1 tensors=<N>
/// <name> <d0>x<d1>... : <row-major values>
/// ```
///
/// Values use Rust's shortest round-trip decimal form.
pub fn save_tensors(path: &Path, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} tensors={}", tensors.len())?;
    for (name, shape, values) in tensors {
        let shape: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
        write!(w, "{name} {} :", shape.join("x"))?;
        for v in values {
            write!(w, " {v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| corrupt("empty file".into()))??;
    let fields = parse_header(&header, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, path)?;
    let n = header_usize(&fields, "tensors", path)?;
    let mut out = BTreeMap::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (head, body) = line
            .split_once(" :")
            .ok_or_else(|| corrupt(format!("malformed record `{}`", truncate(&line))))?;
        let (name, shape) = head
            .split_once(' ')
            .ok_or_else(|| corrupt(format!("record without shape `{}`", truncate(&line))))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| corrupt(format!("bad shape for `{name}`")))?;
        let values: Vec<f64> = body
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| corrupt(format!("bad value in `{name}`")))?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(corrupt(format!("`{name}` has wrong element count")));
        }
        out.insert(name.to_string(), (shape, values));
    }
    if out.len() != n {
        return Err(corrupt(format!("header promises {n} tensors, found {}", out.len())));
    }
    Ok(out)
}

fn truncate(s: &str) -> &str {
    &s[..s.len().min(40)]
}

impl RewardModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.encoder.dims();
        let mut tensors = vec![
            (
                "encoder.dims".to_string(),
                vec![4],
                vec![d.frame_width as f64, d.hidden as f64, d.frames as f64, d.embed as f64],
            ),
            ("encoder.theta".to_string(), vec![self.encoder.num_params()], self.encoder.flat().to_vec()),
            (
                "pool.shape".to_string(),
                vec![3],
                vec![self.pool.k as f64, self.pool.prompt_len as f64, self.pool.dim as f64],
            ),
            (
                "pool.tasks".to_string(),
                vec![self.pool.tasks.len()],
                self.pool.tasks.iter().map(|&t| t as f64).collect(),
            ),
            ("pool.theta".to_string(), vec![self.pool.num_params()], self.pool.flat().to_vec()),
        ];
        for s in self.text.specs() {
            tensors.push((
                format!("text.{}", s.task_id),
                vec![self.text.dim()],
                s.text_embedding.to_vec(),
            ));
        }
        save_tensors(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<RewardModel> {
        let mut t = load_tensors(path)?;
        let mut take = |name: &str| {
            t.remove(name).map(|(_, v)| v).ok_or_else(|| Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("missing tensor `{name}`"),
            })
        };
        let dims = take("encoder.dims")?;
        let dims = EncoderDims {
            frame_width: dims[0] as usize,
            hidden: dims[1] as usize,
            frames: dims[2] as usize,
            embed: dims[3] as usize,
        };
        let encoder = VideoEncoderParams::from_flat(dims, take("encoder.theta")?)?;
        let shape = take("pool.shape")?;
        let tasks: Vec<usize> = take("pool.tasks")?.iter().map(|&x| x as usize).collect();
        let mut pool = FailurePromptPool::new(&tasks, shape[0] as usize, shape[1] as usize, shape[2] as usize, 0)?;
        pool.set_flat(take("pool.theta")?)?;
        let mut specs = Vec::new();
        for task in Task::ALL {
            if let Ok(v) = take(&format!("text.{}", task.id())) {
                specs.push(TaskSpec {
                    task_id: task.id(),
                    expression: task.expression().to_string(),
                    text_embedding: Embedding::from_unit(v),
                });
            }
        }
        let text = TextTable::from_specs(dims.embed, specs)?;
        Ok(RewardModel { encoder, text, pool })
    }
}
