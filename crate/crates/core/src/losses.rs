//! Loss-term numerics: cross-entropy, Dice, supervised contrastive loss in
//! both pixel-to-pixel and pixel-to-region form, entropy minimization, their
//! weighted combination, and a finite-difference gradient checker.
//!
//! Everything here works on flattened sample lists in `f64`; how samples are
//! drawn from images (the suggested default is 256 anchors per image,
//! uniform over labeled pixels, seeded) is the caller's business — see
//! [`sample_labeled_indices`].

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::pairwise_sum;

/// Values below this are floored before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// N×K row-stochastic class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    n: usize,
    k: usize,
    rows: Vec<f64>,
}

impl PredictionMap {
    /// Rows must sum to 1 within 1e-6 with entries in [0,1].
    pub fn new(n: usize, k: usize, rows: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter(
                "class count must be positive".into(),
            ));
        }
        if rows.len() != n * k {
            return Err(Error::InvalidParameter(format!(
                "expected {} probabilities for {n}x{k}, got {}",
                n * k,
                rows.len()
            )));
        }
        for (i, row) in rows.chunks(k).enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidParameter(format!(
                        "probability {v} at sample {i} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "row {i} sums to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        Ok(Self { n, k, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn prob(&self, sample: usize, class: usize) -> f64 {
        self.rows[sample * self.k + class]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }
}

/// Per-sample supervision: a one-hot class for labeled samples, nothing for
/// unlabeled ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetMap {
    k: usize,
    classes: Vec<Option<u32>>,
}

impl TargetMap {
    pub fn from_classes(k: usize, classes: Vec<Option<u32>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter(
                "class count must be positive".into(),
            ));
        }
        if let Some(bad) = classes.iter().flatten().find(|&&c| c as usize >= k) {
            return Err(Error::InvalidParameter(format!(
                "target class {bad} out of range for K={k}"
            )));
        }
        Ok(Self { k, classes })
    }

    pub fn n(&self) -> usize {
        self.classes.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class(&self, sample: usize) -> Option<u32> {
        self.classes[sample]
    }

    pub fn is_labeled(&self, sample: usize) -> bool {
        self.classes[sample].is_some()
    }

    pub fn labeled_count(&self) -> usize {
        self.classes.iter().filter(|c| c.is_some()).count()
    }

    /// One-hot entry X[sample, class]; 0 on unlabeled rows.
    pub fn one_hot(&self, sample: usize, class: usize) -> f64 {
        match self.classes[sample] {
            Some(c) if c as usize == class => 1.0,
            _ => 0.0,
        }
    }
}

/// M anchors × D dimensions of l2-normalized embeddings with class labels
/// and a softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    m: usize,
    d: usize,
    rows: Vec<f64>,
    classes: Vec<u32>,
    tau: f64,
}

impl EmbeddingSet {
    pub fn new(d: usize, rows: Vec<f64>, classes: Vec<u32>, tau: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter(
                "embedding dimension must be positive".into(),
            ));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be a positive finite scalar, got {tau}"
            )));
        }
        if rows.len() != classes.len() * d {
            return Err(Error::InvalidParameter(format!(
                "expected {} embedding values for {} anchors of dimension {d}, got {}",
                classes.len() * d,
                classes.len(),
                rows.len()
            )));
        }
        for (i, row) in rows.chunks(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidParameter(format!(
                    "embedding {i} has norm {norm}, expected 1 within 1e-5"
                )));
            }
        }
        let m = classes.len();
        Ok(Self {
            m,
            d,
            rows,
            classes,
            tau,
        })
    }

    /// Random unit embeddings, one class label per row as given.
    pub fn random_unit(d: usize, classes: Vec<u32>, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
        let mut rows = Vec::with_capacity(classes.len() * d);
        for _ in 0..classes.len() {
            let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                v[0] = 1.0;
            } else {
                for x in &mut v {
                    *x /= norm;
                }
            }
            rows.extend_from_slice(&v);
        }
        Self::new(d, rows, classes, tau)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn class(&self, anchor: usize) -> u32 {
        self.classes[anchor]
    }

    pub fn row(&self, anchor: usize) -> &[f64] {
        &self.rows[anchor * self.d..(anchor + 1) * self.d]
    }

    fn with_rows(&self, rows: Vec<f64>) -> Self {
        Self {
            m: self.m,
            d: self.d,
            rows,
            classes: self.classes.clone(),
            tau: self.tau,
        }
    }
}

/// Term weights for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_dice: f64,
    pub w_scl: f64,
    pub w_entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_dice: 1.0,
            w_scl: 1.0,
            w_entropy: 0.5,
        }
    }
}

/// Which pool a contrastive anchor is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SclMode {
    PixelToPixel,
    PixelToRegion,
}

/// Per-term values plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub scl: f64,
    pub entropy: f64,
    pub total: f64,
}

fn check_shapes(y_n: usize, y_k: usize, x: &TargetMap) -> Result<()> {
    if y_n != x.n() || y_k != x.k() {
        return Err(Error::DimensionMismatch {
            left: format!("{y_n}x{y_k} predictions"),
            right: format!("{}x{} targets", x.n(), x.k()),
        });
    }
    Ok(())
}

// Raw evaluators operate on the bare probability matrix so the gradient
// checker can probe perturbed (non-stochastic) points.

fn ce_raw(rows: &[f64], k: usize, x: &TargetMap) -> Result<f64> {
    let mut terms = Vec::new();
    for (i, class) in (0..x.n()).map(|i| (i, x.class(i))) {
        if let Some(c) = class {
            let p = rows[i * k + c as usize].max(LOG_FLOOR);
            terms.push(-p.ln());
        }
    }
    if terms.is_empty() {
        return Err(Error::NoLabeledSamples);
    }
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

/// The class whose probability the Dice overlap is computed on: class 1
/// when there are at least two classes, class 0 otherwise.
fn foreground_class(k: usize) -> usize {
    usize::from(k >= 2)
}

fn dice_raw(rows: &[f64], k: usize, x: &TargetMap, eps: f64) -> Result<f64> {
    let fg = foreground_class(k);
    let mut inter = Vec::new();
    let mut sx = Vec::new();
    let mut sy = Vec::new();
    for i in 0..x.n() {
        if x.is_labeled(i) {
            let xf = x.one_hot(i, fg);
            let yf = rows[i * k + fg];
            inter.push(xf * yf);
            sx.push(xf);
            sy.push(yf);
        }
    }
    if sx.is_empty() {
        return Err(Error::NoLabeledSamples);
    }
    let inter = pairwise_sum(&inter);
    let denom = pairwise_sum(&sx) + pairwise_sum(&sy) + eps;
    Ok(1.0 - (2.0 * inter + eps) / denom)
}

fn entropy_raw(rows: &[f64], k: usize, x: &TargetMap) -> f64 {
    let mut terms = Vec::new();
    for i in 0..x.n() {
        if !x.is_labeled(i) {
            let mut h = 0.0;
            for c in 0..k {
                let p = rows[i * k + c];
                h -= p * p.max(LOG_FLOOR).ln();
            }
            terms.push(h);
        }
    }
    if terms.is_empty() {
        return 0.0;
    }
    pairwise_sum(&terms) / terms.len() as f64
}

/// Mean over labeled samples of −log Y at the target class.
pub fn cross_entropy(y: &PredictionMap, x: &TargetMap) -> Result<f64> {
    check_shapes(y.n(), y.k(), x)?;
    ce_raw(&y.rows, y.k(), x)
}

/// Soft Dice loss over the foreground-class probability of the labeled
/// samples, smoothed by `eps`.
pub fn dice_loss(y: &PredictionMap, x: &TargetMap, eps: f64) -> Result<f64> {
    check_shapes(y.n(), y.k(), x)?;
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "dice eps must be a positive finite scalar, got {eps}"
        )));
    }
    dice_raw(&y.rows, y.k(), x, eps)
}

/// Mean Shannon entropy of the unlabeled rows; 0 when there are none.
pub fn entropy_loss(y: &PredictionMap, x: &TargetMap) -> Result<f64> {
    check_shapes(y.n(), y.k(), x)?;
    Ok(entropy_raw(&y.rows, y.k(), x))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// log(Σ exp(logit)) over `positive` followed by `negatives`, stable under
/// large magnitudes.
fn log_sum_exp(first: f64, rest: &[f64]) -> f64 {
    let m = rest.iter().fold(first, |a, &b| a.max(b));
    let sum = (first - m).exp() + rest.iter().map(|&v| (v - m).exp()).sum::<f64>();
    sum.ln() + m
}

struct SclEval {
    loss: f64,
    /// Full Euclidean gradient (M×D) treating every row as free, or empty
    /// when not requested.
    grad: Vec<f64>,
}

fn scl_pixel_to_pixel(emb: &EmbeddingSet, want_grad: bool) -> Result<SclEval> {
    let m = emb.m;
    let d = emb.d;
    let tau = emb.tau;
    let mut valid = Vec::new();
    for a in 0..m {
        let has_pos = (0..m).any(|j| j != a && emb.classes[j] == emb.classes[a]);
        let has_neg = (0..m).any(|j| emb.classes[j] != emb.classes[a]);
        if has_pos && has_neg {
            valid.push(a);
        }
    }
    if valid.is_empty() {
        return Err(Error::NoValidAnchors);
    }
    let mut grad = if want_grad {
        vec![0.0; m * d]
    } else {
        Vec::new()
    };
    let mut anchor_terms = Vec::with_capacity(valid.len());
    for &a in &valid {
        let qa = emb.row(a);
        let positives: Vec<usize> = (0..m)
            .filter(|&j| j != a && emb.classes[j] == emb.classes[a])
            .collect();
        let negatives: Vec<usize> = (0..m)
            .filter(|&j| emb.classes[j] != emb.classes[a])
            .collect();
        let neg_logits: Vec<f64> = negatives
            .iter()
            .map(|&j| dot(qa, emb.row(j)) / tau)
            .collect();
        let mut pos_terms = Vec::with_capacity(positives.len());
        let w_a = 1.0 / (valid.len() as f64 * positives.len() as f64);
        for &p in &positives {
            let pos_logit = dot(qa, emb.row(p)) / tau;
            let lse = log_sum_exp(pos_logit, &neg_logits);
            pos_terms.push(lse - pos_logit);
            if want_grad {
                let sig_p = (pos_logit - lse).exp();
                let c_p = w_a * (sig_p - 1.0) / tau;
                for i in 0..d {
                    grad[a * d + i] += c_p * emb.rows[p * d + i];
                    grad[p * d + i] += c_p * emb.rows[a * d + i];
                }
                for (ni, &n) in negatives.iter().enumerate() {
                    let c_n = w_a * (neg_logits[ni] - lse).exp() / tau;
                    for i in 0..d {
                        grad[a * d + i] += c_n * emb.rows[n * d + i];
                        grad[n * d + i] += c_n * emb.rows[a * d + i];
                    }
                }
            }
        }
        anchor_terms.push(pairwise_sum(&pos_terms) / pos_terms.len() as f64);
    }
    Ok(SclEval {
        loss: pairwise_sum(&anchor_terms) / anchor_terms.len() as f64,
        grad,
    })
}

fn scl_pixel_to_region(emb: &EmbeddingSet, want_grad: bool) -> Result<SclEval> {
    let m = emb.m;
    let d = emb.d;
    let tau = emb.tau;
    let mut class_ids: Vec<u32> = emb.classes.clone();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.len() < 2 {
        return Err(Error::NoValidAnchors);
    }
    // Region embedding per class: re-normalized mean of its members.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_ids.len()];
    let class_slot = |c: u32| class_ids.binary_search(&c).unwrap();
    for a in 0..m {
        members[class_slot(emb.classes[a])].push(a);
    }
    let mut means = vec![vec![0.0f64; d]; class_ids.len()];
    let mut norms = vec![0.0f64; class_ids.len()];
    let mut regions = vec![vec![0.0f64; d]; class_ids.len()];
    for (s, mem) in members.iter().enumerate() {
        for &a in mem {
            for (mean, &row) in means[s].iter_mut().zip(&emb.rows[a * d..(a + 1) * d]) {
                *mean += row;
            }
        }
        for mean in means[s].iter_mut() {
            *mean /= mem.len() as f64;
        }
        let norm = means[s].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "class {} mean embedding collapsed to zero; cannot normalize",
                class_ids[s]
            )));
        }
        norms[s] = norm;
        for i in 0..d {
            regions[s][i] = means[s][i] / norm;
        }
    }
    let mut grad = if want_grad {
        vec![0.0; m * d]
    } else {
        Vec::new()
    };
    let mut region_grad = vec![vec![0.0f64; d]; class_ids.len()];
    let w = 1.0 / m as f64;
    let mut anchor_terms = Vec::with_capacity(m);
    for a in 0..m {
        let qa = emb.row(a);
        let own = class_slot(emb.classes[a]);
        let pos_logit = dot(qa, &regions[own]) / tau;
        let neg_slots: Vec<usize> = (0..class_ids.len()).filter(|&s| s != own).collect();
        let neg_logits: Vec<f64> = neg_slots
            .iter()
            .map(|&s| dot(qa, &regions[s]) / tau)
            .collect();
        let lse = log_sum_exp(pos_logit, &neg_logits);
        anchor_terms.push(lse - pos_logit);
        if want_grad {
            let c_p = w * ((pos_logit - lse).exp() - 1.0) / tau;
            for i in 0..d {
                grad[a * d + i] += c_p * regions[own][i];
                region_grad[own][i] += c_p * qa[i];
            }
            for (ni, &s) in neg_slots.iter().enumerate() {
                let c_n = w * (neg_logits[ni] - lse).exp() / tau;
                for i in 0..d {
                    grad[a * d + i] += c_n * regions[s][i];
                    region_grad[s][i] += c_n * qa[i];
                }
            }
        }
    }
    if want_grad {
        // Chain region gradients through normalize(mean(members)).
        for (s, mem) in members.iter().enumerate() {
            let gr = &region_grad[s];
            let r = &regions[s];
            let gr_dot_r = dot(gr, r);
            let scale = 1.0 / (mem.len() as f64 * norms[s]);
            for &a in mem {
                for i in 0..d {
                    grad[a * d + i] += scale * (gr[i] - gr_dot_r * r[i]);
                }
            }
        }
    }
    Ok(SclEval {
        loss: pairwise_sum(&anchor_terms) / m as f64,
        grad,
    })
}

fn scl_eval(emb: &EmbeddingSet, mode: SclMode, want_grad: bool) -> Result<SclEval> {
    match mode {
        SclMode::PixelToPixel => scl_pixel_to_pixel(emb, want_grad),
        SclMode::PixelToRegion => scl_pixel_to_region(emb, want_grad),
    }
}

/// Supervised contrastive loss, averaged over anchors that have at least
/// one positive and one negative.
pub fn scl_loss(emb: &EmbeddingSet, mode: SclMode) -> Result<f64> {
    scl_eval(emb, mode, false).map(|e| e.loss)
}

/// Weighted combination of the four terms. Pass `emb: None` to skip the
/// contrastive term (it contributes 0).
pub fn combined_loss(
    y: &PredictionMap,
    x: &TargetMap,
    emb: Option<&EmbeddingSet>,
    mode: SclMode,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(y, x)?;
    let dice = dice_loss(y, x, 1e-3)?;
    let scl = match emb {
        Some(e) => scl_loss(e, mode)?,
        None => 0.0,
    };
    let entropy = entropy_loss(y, x)?;
    let total = w.w_ce * ce + w.w_dice * dice + w.w_scl * scl + w.w_entropy * entropy;
    Ok(LossBreakdown {
        ce,
        dice,
        scl,
        entropy,
        total,
    })
}

/// Which loss a gradient check probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    CrossEntropy,
    Dice,
    Entropy,
    SclPixelToPixel,
    SclPixelToRegion,
}

/// The point a gradient check differentiates at.
pub enum GradCheckPoint<'a> {
    Probabilities {
        y: &'a PredictionMap,
        x: &'a TargetMap,
    },
    Embeddings(&'a EmbeddingSet),
}

fn prob_loss_and_grad(
    selector: LossSelector,
    rows: &[f64],
    k: usize,
    x: &TargetMap,
) -> Result<(f64, Vec<f64>)> {
    let n = x.n();
    let mut grad = vec![0.0; n * k];
    let loss = match selector {
        LossSelector::CrossEntropy => {
            let loss = ce_raw(rows, k, x)?;
            let labeled = x.labeled_count() as f64;
            for i in 0..n {
                if let Some(c) = x.class(i) {
                    let idx = i * k + c as usize;
                    if rows[idx] > LOG_FLOOR {
                        grad[idx] = -1.0 / (labeled * rows[idx]);
                    }
                }
            }
            loss
        }
        LossSelector::Dice => {
            let eps = 1e-3;
            let loss = dice_raw(rows, k, x, eps)?;
            let fg = foreground_class(k);
            let mut inter = 0.0;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for i in 0..n {
                if x.is_labeled(i) {
                    let xf = x.one_hot(i, fg);
                    inter += xf * rows[i * k + fg];
                    sx += xf;
                    sy += rows[i * k + fg];
                }
            }
            let denom = sx + sy + eps;
            for i in 0..n {
                if x.is_labeled(i) {
                    let xf = x.one_hot(i, fg);
                    grad[i * k + fg] = -(2.0 * xf * denom - (2.0 * inter + eps)) / (denom * denom);
                }
            }
            loss
        }
        LossSelector::Entropy => {
            let loss = entropy_raw(rows, k, x);
            let unlabeled = (x.n() - x.labeled_count()) as f64;
            if unlabeled > 0.0 {
                for i in 0..n {
                    if !x.is_labeled(i) {
                        for c in 0..k {
                            let p = rows[i * k + c].max(LOG_FLOOR);
                            grad[i * k + c] = -(p.ln() + 1.0) / unlabeled;
                        }
                    }
                }
            }
            loss
        }
        _ => unreachable!("probability selector"),
    };
    Ok((loss, grad))
}

/// Max relative error between the analytic gradient and symmetric finite
/// differences with step `h`. Probability losses are probed on the raw
/// (unnormalized) matrix; embedding losses re-normalize each perturbed row,
/// so the analytic gradient is projected onto the unit sphere's tangent
/// space before comparison.
pub fn grad_check(selector: LossSelector, point: &GradCheckPoint, h: f64) -> Result<f64> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / numeric.abs().max(1e-8);
    match (selector, point) {
        (
            LossSelector::CrossEntropy | LossSelector::Dice | LossSelector::Entropy,
            GradCheckPoint::Probabilities { y, x },
        ) => {
            check_shapes(y.n(), y.k(), x)?;
            let k = y.k();
            let (_, analytic) = prob_loss_and_grad(selector, &y.rows, k, x)?;
            let eval = |rows: &[f64]| -> Result<f64> {
                Ok(match selector {
                    LossSelector::CrossEntropy => ce_raw(rows, k, x)?,
                    LossSelector::Dice => dice_raw(rows, k, x, 1e-3)?,
                    LossSelector::Entropy => entropy_raw(rows, k, x),
                    _ => unreachable!(),
                })
            };
            let mut worst = 0.0f64;
            let mut probe = y.rows.clone();
            for idx in 0..probe.len() {
                let orig = probe[idx];
                probe[idx] = orig + h;
                let up = eval(&probe)?;
                probe[idx] = orig - h;
                let down = eval(&probe)?;
                probe[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                if !numeric.is_finite() || !analytic[idx].is_finite() {
                    return Err(Error::NonFiniteGradient { coord: idx });
                }
                worst = worst.max(rel(analytic[idx], numeric));
            }
            Ok(worst)
        }
        (LossSelector::SclPixelToPixel, GradCheckPoint::Embeddings(emb))
        | (LossSelector::SclPixelToRegion, GradCheckPoint::Embeddings(emb)) => {
            let mode = if selector == LossSelector::SclPixelToPixel {
                SclMode::PixelToPixel
            } else {
                SclMode::PixelToRegion
            };
            let full = scl_eval(emb, mode, true)?;
            let d = emb.d();
            let mut worst = 0.0f64;
            for a in 0..emb.m() {
                let row = emb.row(a);
                let g_row = &full.grad[a * d..(a + 1) * d];
                let g_dot_q = dot(g_row, row);
                for i in 0..d {
                    let tangent = g_row[i] - g_dot_q * row[i];
                    let perturb = |delta: f64| -> Result<f64> {
                        let mut rows = emb.rows.clone();
                        rows[a * d + i] += delta;
                        let norm = rows[a * d..(a + 1) * d]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        for v in &mut rows[a * d..(a + 1) * d] {
                            *v /= norm;
                        }
                        Ok(scl_eval(&emb.with_rows(rows), mode, false)?.loss)
                    };
                    let numeric = (perturb(h)? - perturb(-h)?) / (2.0 * h);
                    let idx = a * d + i;
                    if !numeric.is_finite() || !tangent.is_finite() {
                        return Err(Error::NonFiniteGradient { coord: idx });
                    }
                    worst = worst.max(rel(tangent, numeric));
                }
            }
            Ok(worst)
        }
        _ => Err(Error::InvalidParameter(
            "gradient-check point does not match the selected loss".into(),
        )),
    }
}

/// Random gradient-check fixture: strictly interior probabilities (every
/// entry bounded away from 0 and 1) with a mix of labeled and unlabeled
/// samples covering all classes.
pub fn random_interior_probs(n: usize, k: usize, seed: u64) -> (PredictionMap, TargetMap) {
    assert!(n >= 8 && k >= 2, "fixture needs a few samples and classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n * k);
    for _ in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| 0.2 + 0.8 * rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        rows.extend(raw.iter().map(|v| v / sum));
    }
    let classes: Vec<Option<u32>> = (0..n)
        .map(|i| {
            if i % 4 == 3 {
                None
            } else {
                Some((i % k) as u32)
            }
        })
        .collect();
    let y = PredictionMap::new(n, k, rows).expect("rows are normalized by construction");
    let x = TargetMap::from_classes(k, classes).expect("classes are < k by construction");
    (y, x)
}

/// Uniform seeded draw of `count` labeled sample indices (without
/// replacement when possible). The conventional anchor budget is 256 per
/// image.
pub fn sample_labeled_indices(x: &TargetMap, count: usize, seed: u64) -> Vec<usize> {
    let mut labeled: Vec<usize> = (0..x.n()).filter(|&i| x.is_labeled(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    labeled.truncate(count);
    labeled.sort_unstable();
    labeled
}
