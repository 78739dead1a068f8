//! Attention-weighted pooling classifier.
//!
//! A per-feature two-layer perceptron (rectifier hidden layer, softplus
//! output) gives each descriptor a non-negative relevance score α. Scores
//! weight a sum of the descriptors, and a bias-free linear layer maps the
//! pooled vector to class logits trained with cross entropy. Descriptors are
//! inputs only; training updates the scorer and the classifier.
//!
//! Gradients are derived by hand (see `backward`) and checked against
//! central finite differences in the tests.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::ImageFeatures;
use crate::rng::Rng;

pub const DEFAULT_HIDDEN: usize = 32;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScorer {
    /// h × d
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    /// M × d
    pub w: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModel {
    pub scorer: AttentionScorer,
    pub classifier: Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    pub features: Vec<Vec<f64>>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub d_w1: Vec<Vec<f64>>,
    pub d_b1: Vec<f64>,
    pub d_w2: Vec<f64>,
    pub d_b2: f64,
    pub d_w: Vec<Vec<f64>>,
}

/// Intermediates kept by `forward` for `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub features: Vec<Vec<f64>>,
    /// Hidden pre-activations, N × h.
    pub z1: Vec<Vec<f64>>,
    /// Softplus inputs, one per feature.
    pub s: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl AttentionScorer {
    pub fn zeros(d: usize, h: usize) -> Self {
        AttentionScorer {
            w1: vec![vec![0.0; d]; h],
            b1: vec![0.0; h],
            w2: vec![0.0; h],
            b2: 0.0,
        }
    }

    /// Random hidden layer, zero output layer: every feature starts with
    /// the same score ln 2, so any preference between features is learned.
    pub fn random(d: usize, h: usize, rng: &mut Rng) -> Self {
        let s1 = 1.0 / (d as f64).sqrt();
        AttentionScorer {
            w1: (0..h).map(|_| (0..d).map(|_| rng.gaussian(0.0, s1)).collect()).collect(),
            b1: vec![0.0; h],
            w2: vec![0.0; h],
            b2: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.first().map_or(0, Vec::len)
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    fn check(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "feature dimension {} != scorer input dimension {}",
                f.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// (hidden pre-activations, softplus input)
    fn layers(&self, f: &[f64]) -> (Vec<f64>, f64) {
        let z1: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        let s = z1.iter().zip(&self.w2).map(|(z, w)| z.max(0.0) * w).sum::<f64>() + self.b2;
        (z1, s)
    }

    pub fn score(&self, f: &[f64]) -> Result<f64> {
        self.check(f)?;
        Ok(softplus(self.layers(f).1))
    }
}

pub fn score_features(scorer: &AttentionScorer, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    features.iter().map(|f| scorer.score(f)).collect()
}

impl Classifier {
    pub fn zeros(m: usize, d: usize) -> Self {
        Classifier { w: vec![vec![0.0; d]; m] }
    }

    pub fn classes(&self) -> usize {
        self.w.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }
}

fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|y| (y - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = logits.iter().map(|y| (y - lse).exp()).collect();
    (lse, probs)
}

fn check_shapes(model: &AttentionModel, bag: &FeatureBag) -> Result<()> {
    let d = model.scorer.input_dim();
    let s = &model.scorer;
    if d == 0 || s.hidden() == 0 || s.b1.len() != s.hidden() || s.w2.len() != s.hidden() {
        return Err(Error::invalid("malformed attention scorer"));
    }
    if s.w1.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged scorer weights"));
    }
    let c = &model.classifier;
    if c.classes() == 0 || c.w.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("classifier shape does not match scorer"));
    }
    if bag.label >= c.classes() {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            bag.label,
            c.classes()
        )));
    }
    if bag.features.is_empty() {
        return Err(Error::invalid("empty feature bag"));
    }
    bag.features.iter().try_for_each(|f| s.check(f))
}

/// Returns (logits, loss, cache).
pub fn forward(model: &AttentionModel, bag: &FeatureBag) -> Result<(Vec<f64>, f64, ForwardCache)> {
    check_shapes(model, bag)?;
    let d = model.scorer.input_dim();
    let mut z1 = Vec::with_capacity(bag.features.len());
    let mut s = Vec::with_capacity(bag.features.len());
    let mut alpha = Vec::with_capacity(bag.features.len());
    let mut pooled = vec![0.0; d];
    for f in &bag.features {
        let (z, si) = model.scorer.layers(f);
        let a = softplus(si);
        for (p, x) in pooled.iter_mut().zip(f) {
            *p += a * x;
        }
        z1.push(z);
        s.push(si);
        alpha.push(a);
    }
    let logits: Vec<f64> = model
        .classifier
        .w
        .iter()
        .map(|row| row.iter().zip(&pooled).map(|(w, p)| w * p).sum())
        .collect();
    let (lse, probs) = log_softmax_parts(&logits);
    let loss = lse - logits[bag.label];
    let cache = ForwardCache {
        features: bag.features.clone(),
        z1,
        s,
        alpha,
        pooled,
        logits: logits.clone(),
        probs,
    };
    Ok((logits, loss, cache))
}

/// Hand-derived gradients of the cross-entropy loss:
/// `g_y = softmax(y) − onehot`, `dW = g_y ⊗ pooled`, and for each feature
/// `g_α = (Wᵀ g_y)·f`, propagated through softplus (sigmoid) and the
/// rectifier layer.
pub fn backward(model: &AttentionModel, cache: &ForwardCache, label: usize) -> Gradients {
    let s = &model.scorer;
    let (h, d) = (s.hidden(), s.input_dim());
    let mut g_y = cache.probs.clone();
    g_y[label] -= 1.0;
    let d_w: Vec<Vec<f64>> = g_y
        .iter()
        .map(|g| cache.pooled.iter().map(|p| g * p).collect())
        .collect();
    let mut g_pooled = vec![0.0; d];
    for (g, row) in g_y.iter().zip(&model.classifier.w) {
        for (gp, w) in g_pooled.iter_mut().zip(row) {
            *gp += g * w;
        }
    }
    let mut grads = Gradients {
        d_w1: vec![vec![0.0; d]; h],
        d_b1: vec![0.0; h],
        d_w2: vec![0.0; h],
        d_b2: 0.0,
        d_w,
    };
    for ((f, z1), &si) in cache.features.iter().zip(&cache.z1).zip(&cache.s) {
        let g_alpha: f64 = g_pooled.iter().zip(f).map(|(g, x)| g * x).sum();
        let g_s = g_alpha * sigmoid(si);
        grads.d_b2 += g_s;
        for j in 0..h {
            if z1[j] <= 0.0 {
                continue;
            }
            grads.d_w2[j] += g_s * z1[j];
            let g_z = g_s * s.w2[j];
            grads.d_b1[j] += g_z;
            for (dw, x) in grads.d_w1[j].iter_mut().zip(f) {
                *dw += g_z * x;
            }
        }
    }
    grads
}

impl AttentionModel {
    pub fn init(d: usize, h: usize, m: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let scorer = AttentionScorer::random(d, h, &mut rng);
        let w = (0..m)
            .map(|_| (0..d).map(|_| rng.gaussian(0.0, 0.01)).collect())
            .collect();
        AttentionModel {
            scorer,
            classifier: Classifier { w },
        }
    }

    fn apply(&mut self, g: &Gradients, lr: f64) {
        let step = |p: &mut f64, g: f64| *p -= lr * g;
        for (row, grow) in self.scorer.w1.iter_mut().zip(&g.d_w1) {
            row.iter_mut().zip(grow).for_each(|(p, &g)| step(p, g));
        }
        self.scorer.b1.iter_mut().zip(&g.d_b1).for_each(|(p, &g)| step(p, g));
        self.scorer.w2.iter_mut().zip(&g.d_w2).for_each(|(p, &g)| step(p, g));
        step(&mut self.scorer.b2, g.d_b2);
        for (row, grow) in self.classifier.w.iter_mut().zip(&g.d_w) {
            row.iter_mut().zip(grow).for_each(|(p, &g)| step(p, g));
        }
    }

    pub fn predict(&self, bag: &FeatureBag) -> Result<usize> {
        let (logits, _, _) = forward(self, bag)?;
        let mut best = 0;
        for (i, y) in logits.iter().enumerate() {
            if *y > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: DEFAULT_HIDDEN,
            lr: 0.01,
            steps: 500,
            seed: 0,
        }
    }
}

pub fn mean_loss(model: &AttentionModel, bags: &[FeatureBag]) -> Result<f64> {
    let mut total = 0.0;
    for bag in bags {
        total += forward(model, bag)?.1;
    }
    Ok(total / bags.len() as f64)
}

pub fn accuracy(model: &AttentionModel, bags: &[FeatureBag]) -> Result<f64> {
    let mut hits = 0usize;
    for bag in bags {
        hits += usize::from(model.predict(bag)? == bag.label);
    }
    Ok(hits as f64 / bags.len() as f64)
}

/// Plain SGD, one bag per step, bags reshuffled at every pass. The trace
/// holds the mean dataset loss before training and after every pass
/// (a final partial pass included).
pub fn train_attention(bags: &[FeatureBag], config: &TrainConfig) -> Result<(AttentionModel, Vec<f64>)> {
    if config.hidden == 0 {
        return Err(Error::invalid("hidden width must be at least 1"));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::invalid("learning rate must be finite and non-negative"));
    }
    let first = bags.first().ok_or_else(|| Error::invalid("no training bags"))?;
    let d = first
        .features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("empty feature bag"))?;
    let mut labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }
    let m = labels[labels.len() - 1] + 1;
    let mut model = AttentionModel::init(d, config.hidden, m, config.seed);
    for bag in bags {
        check_shapes(&model, bag)?;
    }
    let mut rng = Rng::derive(config.seed, 1);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut trace = vec![mean_loss(&model, bags)?];
    let mut done = 0;
    while done < config.steps {
        rng.shuffle(&mut order);
        for &i in order.iter().take(config.steps - done) {
            let (_, _, cache) = forward(&model, &bags[i])?;
            let g = backward(&model, &cache, bags[i].label);
            model.apply(&g, config.lr);
            done += 1;
        }
        trace.push(mean_loss(&model, bags)?);
    }
    Ok((model, trace))
}

/// Replaces every feature's score with the scorer's α for its descriptor.
pub fn attach_scores(scorer: &AttentionScorer, image: &ImageFeatures) -> Result<ImageFeatures> {
    let mut out = image.clone();
    for f in &mut out.features {
        f.score = scorer.score(f.descriptor.as_slice())?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DATT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Magic `DATT`, u32 version, u64 d, h, M, then f64 blocks: w1 (row-major),
/// b1, w2, b2, W (row-major). Little-endian.
pub fn write_checkpoint<W: Write>(model: &AttentionModel, mut out: W) -> Result<()> {
    let s = &model.scorer;
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for n in [s.input_dim(), s.hidden(), model.classifier.classes()] {
        out.write_all(&(n as u64).to_le_bytes())?;
    }
    let blocks = s
        .w1
        .iter()
        .flatten()
        .chain(&s.b1)
        .chain(&s.w2)
        .chain(std::iter::once(&s.b2))
        .chain(model.classifier.w.iter().flatten());
    for v in blocks {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(field, "truncated checkpoint")
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<AttentionModel> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            field: "checkpoint magic",
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut input, &mut b4, "checkpoint version")?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            field: "checkpoint",
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 3];
    for (dim, name) in dims.iter_mut().zip(["checkpoint d", "checkpoint h", "checkpoint M"]) {
        let mut b8 = [0u8; 8];
        read_exact(&mut input, &mut b8, name)?;
        let v = u64::from_le_bytes(b8);
        if v == 0 || v > 1 << 20 {
            return Err(Error::format(name, format!("dimension {v} out of range")));
        }
        *dim = v as usize;
    }
    let [d, h, m] = dims;
    let total = h * d + h + h + 1 + m * d;
    let mut raw = vec![0u8; total * 8];
    read_exact(&mut input, &mut raw, "checkpoint parameters")?;
    let vals: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("checkpoint parameters", "non-finite value"));
    }
    let (w1, rest) = vals.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, rest) = rest.split_at(h);
    let (b2, w) = rest.split_at(1);
    Ok(AttentionModel {
        scorer: AttentionScorer {
            w1: w1.chunks(d).map(<[f64]>::to_vec).collect(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2[0],
        },
        classifier: Classifier {
            w: w.chunks(d).map(<[f64]>::to_vec).collect(),
        },
    })
}

pub fn save_checkpoint(model: &AttentionModel, path: &Path) -> Result<()> {
    write_checkpoint(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<AttentionModel> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
