//! Learned width predictor for caches beyond the exact solver's reach.
//!
//! A fixed-architecture MLP — 6 input features, one ReLU hidden layer of
//! [`HIDDEN_UNITS`], 4 output classes (one per [`BitWidth`]) — trained by
//! full-batch gradient descent on class-weighted softmax cross-entropy.
//! Everything is f64 and free of platform-dependent math, so training and
//! inference are bit-reproducible for a given seed and dataset.
//!
//! Class imbalance is handled by inverse-frequency weights over the
//! classes present in the training set (absent classes get weight zero),
//! normalized so the weighted example count equals the plain count. That
//! removes any minimum-examples-per-class requirement: skewed label sets
//! train without special casing.
//!
//! Weights serialize to a checksummed `QKVW` container; see `FORMAT.md`.

use std::io::{Read, Write};
use std::path::Path;

use super::AllocError;
use crate::quantizer::BitWidth;
use crate::rng::SplitMix64;

/// Input features per token (see `importance::compute_features`).
pub const INPUT_FEATURES: usize = 6;
/// Hidden-layer width, sized so the network has exactly 510 parameters.
pub const HIDDEN_UNITS: usize = 46;
/// Output classes, one per supported bit width.
pub const OUTPUT_CLASSES: usize = 4;

/// Magic bytes of the weights container.
pub const QKVW_MAGIC: &[u8; 4] = b"QKVW";
/// Current weights container version.
pub const QKVW_VERSION: u16 = 1;
/// Activation descriptor byte: 0 = ReLU (the only defined value).
pub const ACTIVATION_RELU: u8 = 0;

/// Sub-stream ids for weight initialization.
const STREAM_W1: u64 = 1;
const STREAM_W2: u64 = 2;

/// MLP parameters. `w1` is `[HIDDEN_UNITS][INPUT_FEATURES]` row-major,
/// `w2` is `[OUTPUT_CLASSES][HIDDEN_UNITS]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerWeights {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Total trainable parameters of the fixed architecture.
pub const fn param_count() -> usize {
    HIDDEN_UNITS * INPUT_FEATURES + HIDDEN_UNITS + OUTPUT_CLASSES * HIDDEN_UNITS + OUTPUT_CLASSES
}

impl ControllerWeights {
    /// All-zero weights. Inference from these ties every logit, so every
    /// token falls back to the narrowest width.
    pub fn zeros() -> Self {
        Self {
            w1: vec![0.0; HIDDEN_UNITS * INPUT_FEATURES],
            b1: vec![0.0; HIDDEN_UNITS],
            w2: vec![0.0; OUTPUT_CLASSES * HIDDEN_UNITS],
            b2: vec![0.0; OUTPUT_CLASSES],
        }
    }

    /// Deterministic uniform initialization in ±√(6 / (fan_in + fan_out)),
    /// biases zero.
    pub fn init(seed: u64) -> Self {
        let mut w = Self::zeros();
        let a1 = (6.0 / (INPUT_FEATURES + HIDDEN_UNITS) as f64).sqrt();
        let mut rng = SplitMix64::stream(seed, STREAM_W1);
        for v in &mut w.w1 {
            *v = rng.next_range(-a1, a1);
        }
        let a2 = (6.0 / (HIDDEN_UNITS + OUTPUT_CLASSES) as f64).sqrt();
        let mut rng = SplitMix64::stream(seed, STREAM_W2);
        for v in &mut w.w2 {
            *v = rng.next_range(-a2, a2);
        }
        w
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite())
    }

    /// Flatten in the serialization order w1, b1, w2, b2.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(param_count());
        flat.extend_from_slice(&self.w1);
        flat.extend_from_slice(&self.b1);
        flat.extend_from_slice(&self.w2);
        flat.extend_from_slice(&self.b2);
        flat
    }

    /// Rebuild from [`Self::to_flat`] order.
    pub fn from_flat(flat: &[f64]) -> Result<Self, AllocError> {
        if flat.len() != param_count() {
            return Err(AllocError::DimensionMismatch(format!(
                "{} flat parameters, expected {}",
                flat.len(),
                param_count()
            )));
        }
        let mut at = 0;
        let mut take = |count: usize| {
            let part = flat[at..at + count].to_vec();
            at += count;
            part
        };
        Ok(Self {
            w1: take(HIDDEN_UNITS * INPUT_FEATURES),
            b1: take(HIDDEN_UNITS),
            w2: take(OUTPUT_CLASSES * HIDDEN_UNITS),
            b2: take(OUTPUT_CLASSES),
        })
    }

    /// Hidden pre-activations, hidden activations, and logits for one row.
    fn forward_parts(&self, x: &[f64; INPUT_FEATURES]) -> ForwardParts {
        let mut pre = [0.0; HIDDEN_UNITS];
        let mut hidden = [0.0; HIDDEN_UNITS];
        for (j, (p, h)) in pre.iter_mut().zip(hidden.iter_mut()).enumerate() {
            let row = &self.w1[j * INPUT_FEATURES..(j + 1) * INPUT_FEATURES];
            let mut acc = self.b1[j];
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            *p = acc;
            *h = acc.max(0.0);
        }
        let mut logits = [0.0; OUTPUT_CLASSES];
        for (k, l) in logits.iter_mut().enumerate() {
            let row = &self.w2[k * HIDDEN_UNITS..(k + 1) * HIDDEN_UNITS];
            let mut acc = self.b2[k];
            for (w, h) in row.iter().zip(&hidden) {
                acc += w * h;
            }
            *l = acc;
        }
        ForwardParts {
            pre,
            hidden,
            logits,
        }
    }

    /// Class logits for one feature row.
    pub fn logits(&self, x: &[f64; INPUT_FEATURES]) -> [f64; OUTPUT_CLASSES] {
        self.forward_parts(x).logits
    }
}

struct ForwardParts {
    pre: [f64; HIDDEN_UNITS],
    hidden: [f64; HIDDEN_UNITS],
    logits: [f64; OUTPUT_CLASSES],
}

/// Numerically stable softmax.
fn softmax(logits: &[f64; OUTPUT_CLASSES]) -> [f64; OUTPUT_CLASSES] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; OUTPUT_CLASSES];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn argmax_lowest(logits: &[f64; OUTPUT_CLASSES]) -> usize {
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = k;
        }
    }
    best
}

fn validate_rows(rows: &[[f64; INPUT_FEATURES]]) -> Result<(), AllocError> {
    for (i, row) in rows.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(AllocError::InvalidParameter(format!(
                "feature row {i} contains a non-finite value"
            )));
        }
    }
    Ok(())
}

/// Predict a width per feature row. Logit ties resolve to the lower
/// width, so an untrained (all-zero) controller degrades to all-2-bit.
pub fn controller_infer(
    rows: &[[f64; INPUT_FEATURES]],
    weights: &ControllerWeights,
) -> Result<Vec<BitWidth>, AllocError> {
    if !weights.is_finite() {
        return Err(AllocError::NonFiniteModel);
    }
    validate_rows(rows)?;
    Ok(rows
        .iter()
        .map(|row| {
            let class = argmax_lowest(&weights.logits(row));
            BitWidth::from_index(class).expect("class index in range")
        })
        .collect())
}

/// Inverse-frequency class weights over the classes present in `labels`,
/// normalized so the weighted example count equals `labels.len()`.
/// Absent classes get weight zero.
pub fn class_weights(labels: &[BitWidth]) -> [f64; OUTPUT_CLASSES] {
    let mut counts = [0usize; OUTPUT_CLASSES];
    for label in labels {
        counts[label.index()] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let total = labels.len();
    let mut weights = [0.0; OUTPUT_CLASSES];
    for (w, &c) in weights.iter_mut().zip(&counts) {
        if c > 0 {
            *w = total as f64 / (present as f64 * c as f64);
        }
    }
    weights
}

/// Mean class-weighted cross-entropy of `weights` on a dataset. The class
/// weights are recomputed from `labels`, exactly as training uses them.
pub fn controller_loss(
    weights: &ControllerWeights,
    rows: &[[f64; INPUT_FEATURES]],
    labels: &[BitWidth],
) -> Result<f64, AllocError> {
    let (loss, _) = loss_and_grad(weights, rows, labels, &class_weights(labels), false)?;
    Ok(loss)
}

/// Analytic gradient of [`controller_loss`] in [`ControllerWeights::to_flat`]
/// order. Exposed so callers can verify the backward pass against finite
/// differences of the loss.
pub fn controller_gradient(
    weights: &ControllerWeights,
    rows: &[[f64; INPUT_FEATURES]],
    labels: &[BitWidth],
) -> Result<Vec<f64>, AllocError> {
    let (_, grad) = loss_and_grad(weights, rows, labels, &class_weights(labels), true)?;
    Ok(grad)
}

/// Loss and (optionally) its gradient in [`ControllerWeights::to_flat`]
/// order. Shared by training and the loss-only entry point so the two can
/// never drift apart.
fn loss_and_grad(
    weights: &ControllerWeights,
    rows: &[[f64; INPUT_FEATURES]],
    labels: &[BitWidth],
    class_w: &[f64; OUTPUT_CLASSES],
    want_grad: bool,
) -> Result<(f64, Vec<f64>), AllocError> {
    if rows.is_empty() {
        return Err(AllocError::EmptyDataset);
    }
    if rows.len() != labels.len() {
        return Err(AllocError::DimensionMismatch(format!(
            "{} feature rows with {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if !weights.is_finite() {
        return Err(AllocError::NonFiniteModel);
    }
    validate_rows(rows)?;

    let weight_total: f64 = labels.iter().map(|l| class_w[l.index()]).sum();
    if weight_total <= 0.0 {
        return Err(AllocError::InvalidParameter(
            "class weights annihilate every example".into(),
        ));
    }

    let mut loss = 0.0;
    let mut grad = if want_grad {
        vec![0.0; param_count()]
    } else {
        Vec::new()
    };
    let (g_w1, rest) = if want_grad {
        grad.split_at_mut(HIDDEN_UNITS * INPUT_FEATURES)
    } else {
        grad.split_at_mut(0)
    };
    let (g_b1, rest) = rest.split_at_mut(if want_grad { HIDDEN_UNITS } else { 0 });
    let (g_w2, g_b2) = rest.split_at_mut(if want_grad {
        OUTPUT_CLASSES * HIDDEN_UNITS
    } else {
        0
    });

    for (row, label) in rows.iter().zip(labels) {
        let parts = weights.forward_parts(row);
        let probs = softmax(&parts.logits);
        let omega = class_w[label.index()] / weight_total;
        // Clamp avoids -inf loss when a probability underflows to zero;
        // the gradient is unaffected (it uses probs directly).
        loss += omega * -(probs[label.index()].max(f64::MIN_POSITIVE).ln());
        if !want_grad {
            continue;
        }
        // d loss / d logits
        let mut dz = probs;
        dz[label.index()] -= 1.0;
        for d in &mut dz {
            *d *= omega;
        }
        // Output layer.
        for (k, &dzk) in dz.iter().enumerate() {
            g_b2[k] += dzk;
            let row_grad = &mut g_w2[k * HIDDEN_UNITS..(k + 1) * HIDDEN_UNITS];
            for (g, &h) in row_grad.iter_mut().zip(&parts.hidden) {
                *g += dzk * h;
            }
        }
        // Hidden layer (ReLU derivative: 1 where pre-activation > 0).
        for j in 0..HIDDEN_UNITS {
            if parts.pre[j] <= 0.0 {
                continue;
            }
            let mut dh = 0.0;
            for (k, &dzk) in dz.iter().enumerate() {
                dh += dzk * weights.w2[k * HIDDEN_UNITS + j];
            }
            g_b1[j] += dh;
            let row_grad = &mut g_w1[j * INPUT_FEATURES..(j + 1) * INPUT_FEATURES];
            for (g, &x) in row_grad.iter_mut().zip(row) {
                *g += dh * x;
            }
        }
    }
    Ok((loss, grad))
}

/// Training hyperparameters. The defaults are what the CLI uses; they are
/// part of the deterministic surface, so change them deliberately.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            epochs: 600,
            learning_rate: 0.25,
            momentum: 0.9,
        }
    }
}

/// Summary of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    /// Unweighted fraction of training rows the trained controller
    /// classifies correctly.
    pub train_accuracy: f64,
}

/// Train a controller by full-batch gradient descent with momentum.
///
/// Deterministic for a given config and dataset. Class weighting makes
/// skewed label sets trainable without a per-class minimum count.
pub fn controller_train(
    rows: &[[f64; INPUT_FEATURES]],
    labels: &[BitWidth],
    cfg: &TrainConfig,
) -> Result<(ControllerWeights, TrainReport), AllocError> {
    if cfg.epochs == 0 {
        return Err(AllocError::InvalidParameter(
            "training needs at least one epoch".into(),
        ));
    }
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(AllocError::InvalidParameter(format!(
            "learning rate must be a positive finite real, got {}",
            cfg.learning_rate
        )));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(AllocError::InvalidParameter(format!(
            "momentum must lie in [0, 1), got {}",
            cfg.momentum
        )));
    }
    let class_w = class_weights(labels);
    let mut weights = ControllerWeights::init(cfg.seed);
    let mut velocity = vec![0.0; param_count()];
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        let (loss, grad) = loss_and_grad(&weights, rows, labels, &class_w, true)?;
        final_loss = loss;
        let mut flat = weights.to_flat();
        for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(flat.iter_mut()) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *p += *v;
        }
        weights = ControllerWeights::from_flat(&flat)?;
        if !weights.is_finite() {
            return Err(AllocError::NonFiniteModel);
        }
    }
    let predictions = controller_infer(rows, &weights)?;
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let report = TrainReport {
        epochs: cfg.epochs,
        final_loss,
        train_accuracy: correct as f64 / rows.len() as f64,
    };
    Ok((weights, report))
}

const QKVW_BODY_F64S: usize = param_count();
const QKVW_HEADER_LEN: usize = 4 + 2 + 1 + 1 + 12;
const QKVW_TOTAL_LEN: usize = QKVW_HEADER_LEN + 8 * QKVW_BODY_F64S + 4;

/// Serialize controller weights to the `QKVW` container.
pub fn write_weights<W: Write>(weights: &ControllerWeights, mut w: W) -> Result<u64, AllocError> {
    if !weights.is_finite() {
        return Err(AllocError::NonFiniteModel);
    }
    let mut buf = Vec::with_capacity(QKVW_TOTAL_LEN);
    buf.extend_from_slice(QKVW_MAGIC);
    buf.extend_from_slice(&QKVW_VERSION.to_le_bytes());
    buf.push(ACTIVATION_RELU);
    buf.push(0); // reserved
    buf.extend_from_slice(&(INPUT_FEATURES as u32).to_le_bytes());
    buf.extend_from_slice(&(HIDDEN_UNITS as u32).to_le_bytes());
    buf.extend_from_slice(&(OUTPUT_CLASSES as u32).to_le_bytes());
    for v in weights.to_flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(buf.len() as u64)
}

/// Deserialize controller weights, verifying magic, version, checksum,
/// architecture, and finiteness.
pub fn read_weights<R: Read>(mut r: R) -> Result<ControllerWeights, AllocError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < QKVW_HEADER_LEN + 4 {
        return Err(AllocError::Truncated {
            section: "header",
            needed: (QKVW_HEADER_LEN + 4 - bytes.len()) as u64,
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if &magic != QKVW_MAGIC {
        return Err(AllocError::BadMagic {
            found: magic,
            expected: *QKVW_MAGIC,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != QKVW_VERSION {
        return Err(AllocError::UnsupportedVersion(version));
    }
    // Checksum comes right after the envelope checks, before any body
    // parsing, so corruption is reported as corruption.
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(AllocError::CrcMismatch { stored, computed });
    }
    if bytes.len() != QKVW_TOTAL_LEN {
        if bytes.len() < QKVW_TOTAL_LEN {
            return Err(AllocError::Truncated {
                section: "parameters",
                needed: (QKVW_TOTAL_LEN - bytes.len()) as u64,
            });
        }
        return Err(AllocError::Malformed(format!(
            "{} trailing bytes after the parameter block",
            bytes.len() - QKVW_TOTAL_LEN
        )));
    }
    if body[6] != ACTIVATION_RELU {
        return Err(AllocError::Malformed(format!(
            "unknown activation descriptor {}",
            body[6]
        )));
    }
    if body[7] != 0 {
        return Err(AllocError::Malformed("reserved byte is not zero".into()));
    }
    let dim = |at: usize| u32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as usize;
    let (inputs, hidden, outputs) = (dim(8), dim(12), dim(16));
    if (inputs, hidden, outputs) != (INPUT_FEATURES, HIDDEN_UNITS, OUTPUT_CLASSES) {
        return Err(AllocError::Malformed(format!(
            "architecture {inputs}x{hidden}x{outputs} is not the supported \
             {INPUT_FEATURES}x{HIDDEN_UNITS}x{OUTPUT_CLASSES}"
        )));
    }
    let mut flat = Vec::with_capacity(QKVW_BODY_F64S);
    for chunk in body[QKVW_HEADER_LEN..].chunks_exact(8) {
        flat.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let weights = ControllerWeights::from_flat(&flat)?;
    if !weights.is_finite() {
        return Err(AllocError::NonFiniteModel);
    }
    Ok(weights)
}

/// Write weights to a file. Returns the byte count written.
pub fn save_weights<P: AsRef<Path>>(
    weights: &ControllerWeights,
    path: P,
) -> Result<u64, AllocError> {
    let file = std::fs::File::create(path)?;
    let mut file = std::io::BufWriter::new(file);
    let n = write_weights(weights, &mut file)?;
    file.flush()?;
    Ok(n)
}

/// Read weights from a file.
pub fn load_weights<P: AsRef<Path>>(path: P) -> Result<ControllerWeights, AllocError> {
    read_weights(std::io::BufReader::new(std::fs::File::open(path)?))
}
