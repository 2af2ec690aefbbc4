//! Linear adaptive fusion of the two unified-query features and the
//! in-batch classification loss, with exact analytic gradients.
//!
//! Forward pass for one triplet:
//!
//! ```text
//! h      = relu(W1 [f_textual ; f_visual] + b1)
//! lambda = sigmoid(W2 h + b2)
//! f_q    = lambda * f_textual + (1 - lambda) * f_visual
//! ```
//!
//! and for a batch of B fused queries against their B targets
//!
//! ```text
//! L = 1/B * sum_i -log( exp(cos(q_i, t_i)/tau) / sum_j exp(cos(q_i, t_j)/tau) )
//! ```

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Embedding;
use crate::error::{Error, Result};

/// The logit is clamped to this magnitude so lambda stays strictly inside
/// (0, 1) in double precision.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Weights of the lambda-producing perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub dim: usize,
    pub hidden: usize,
    /// hidden x 2*dim, row-major; columns [0, dim) see f_textual.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl FusionParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            w1: vec![0.0; hidden * 2 * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Uniform fan-in initialization for the hidden layer and a zero output
    /// layer, so training starts at lambda = 0.5. Weights are drawn as f32 values.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((2 * dim) as f64).sqrt();
        let mut p = Self::zeros(dim, hidden);
        for w in p.w1.iter_mut().chain(p.b1.iter_mut()) {
            *w = rng.random_range(-bound..bound) as f32 as f64;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Shape("fusion dim and hidden must be > 0".into()));
        }
        if self.w1.len() != self.hidden * 2 * self.dim
            || self.b1.len() != self.hidden
            || self.w2.len() != self.hidden
        {
            return Err(Error::Shape(format!(
                "fusion params inconsistent with dim={} hidden={}",
                self.dim, self.hidden
            )));
        }
        if self.slices().iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return Err(Error::NumericDomain("non-finite fusion parameter".into()));
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order: w1, b1, w2, b2.
    pub fn slices(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, std::slice::from_ref(&self.b2)]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }

    pub const NAMES: [&'static str; 4] = ["fusion.w1", "fusion.b1", "fusion.w2", "fusion.b2"];

    pub fn shapes(&self) -> [Vec<usize>; 4] {
        [
            vec![self.hidden, 2 * self.dim],
            vec![self.hidden],
            vec![1, self.hidden],
            vec![1],
        ]
    }

    fn hidden_pre(&self, textual: &[f64], visual: &[f64]) -> Vec<f64> {
        let two_d = 2 * self.dim;
        (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * two_d..(h + 1) * two_d];
                let (rt, rv) = row.split_at(self.dim);
                self.b1[h] + dot(rt, textual) + dot(rv, visual)
            })
            .collect()
    }

    fn logit(&self, pre: &[f64]) -> f64 {
        self.b2 + pre.iter().zip(&self.w2).map(|(p, w)| p.max(0.0) * w).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedQuery {
    pub vector: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1 }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_pair(params: &FusionParams, textual: &[f64], visual: &[f64]) -> Result<()> {
    if textual.len() != params.dim || visual.len() != params.dim {
        return Err(Error::Shape(format!(
            "fusion expects two vectors of length {}, got {} and {}",
            params.dim,
            textual.len(),
            visual.len()
        )));
    }
    Ok(())
}

pub fn lambda_for(params: &FusionParams, textual: &[f64], visual: &[f64]) -> Result<f64> {
    check_pair(params, textual, visual)?;
    let pre = params.hidden_pre(textual, visual);
    Ok(sigmoid(params.logit(&pre).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
}

/// Trade-off weight between the textual and the visual query feature.
pub fn compute_lambda(params: &FusionParams, textual: &Embedding, visual: &Embedding) -> Result<f64> {
    lambda_for(params, &textual.vector, &visual.vector)
}

pub fn fuse_vectors(textual: &[f64], visual: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if textual.len() != visual.len() {
        return Err(Error::Shape(format!(
            "cannot fuse vectors of length {} and {}",
            textual.len(),
            visual.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::NumericDomain(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(textual
        .iter()
        .zip(visual)
        .map(|(t, v)| lambda * t + (1.0 - lambda) * v)
        .collect())
}

pub fn fuse(textual: &Embedding, visual: &Embedding, lambda: f64) -> Result<FusedQuery> {
    Ok(FusedQuery {
        vector: fuse_vectors(&textual.vector, &visual.vector, lambda)?,
        lambda,
    })
}

/// Cosine similarity; zero or non-finite norms are rejected.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::NumericDomain("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

fn unit_rows(rows: &[Vec<f64>], what: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let n = norm(r);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::NumericDomain(format!("{what} row {i} has zero or non-finite norm")));
        }
        units.push(r.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

/// Loss value and its gradients with respect to both sides of the batch.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_queries: Vec<Vec<f64>>,
    pub grad_targets: Vec<Vec<f64>>,
}

pub fn batch_loss_with_grad(queries: &[Vec<f64>], targets: &[Vec<f64>], config: &LossConfig) -> Result<LossGrad> {
    let b = queries.len();
    if b == 0 || targets.len() != b {
        return Err(Error::Shape(format!(
            "loss needs B >= 1 queries and as many targets, got {} and {}",
            b,
            targets.len()
        )));
    }
    if config.tau.is_nan() || config.tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {}", config.tau)));
    }
    let dim = queries[0].len();
    if queries.iter().chain(targets).any(|v| v.len() != dim) {
        return Err(Error::Shape("loss inputs have different lengths".into()));
    }
    let (qu, qn) = unit_rows(queries, "query")?;
    let (tu, tn) = unit_rows(targets, "target")?;
    let cos: Vec<Vec<f64>> = qu
        .iter()
        .map(|q| tu.iter().map(|t| dot(q, t)).collect())
        .collect();

    let mut loss = 0.0;
    // dL/dcos_ij
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        let logits: Vec<f64> = cos[i].iter().map(|c| c / config.tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - logits[i];
        for j in 0..b {
            let p = (logits[j] - lse).exp();
            let delta = if i == j { 1.0 } else { 0.0 };
            g[i][j] = (p - delta) / (b as f64 * config.tau);
        }
    }
    loss /= b as f64;

    let mut grad_queries = vec![vec![0.0; dim]; b];
    let mut grad_targets = vec![vec![0.0; dim]; b];
    for i in 0..b {
        for j in 0..b {
            let gij = g[i][j];
            if gij == 0.0 {
                continue;
            }
            for k in 0..dim {
                grad_queries[i][k] += gij * (tu[j][k] - cos[i][j] * qu[i][k]) / qn[i];
                grad_targets[j][k] += gij * (qu[i][k] - cos[i][j] * tu[j][k]) / tn[j];
            }
        }
    }
    Ok(LossGrad {
        loss,
        grad_queries,
        grad_targets,
    })
}

/// Mean in-batch classification loss over cosine similarities.
pub fn batch_classification_loss(
    queries: &[Embedding],
    targets: &[Embedding],
    config: &LossConfig,
) -> Result<f64> {
    let q: Vec<Vec<f64>> = queries.iter().map(|e| e.vector.clone()).collect();
    let t: Vec<Vec<f64>> = targets.iter().map(|e| e.vector.clone()).collect();
    Ok(batch_loss_with_grad(&q, &t, config)?.loss)
}

/// Output of the composed map lambda -> fuse -> loss and all its gradients.
#[derive(Debug, Clone)]
pub struct ComposedLoss {
    pub loss: f64,
    pub lambdas: Vec<f64>,
    pub fused: Vec<Vec<f64>>,
    pub grad_params: FusionParams,
    pub grad_textual: Vec<Vec<f64>>,
    pub grad_visual: Vec<Vec<f64>>,
    pub grad_targets: Vec<Vec<f64>>,
}

pub fn composed_loss(
    params: &FusionParams,
    textual: &[Vec<f64>],
    visual: &[Vec<f64>],
    targets: &[Vec<f64>],
    config: &LossConfig,
) -> Result<ComposedLoss> {
    let b = textual.len();
    if visual.len() != b || targets.len() != b {
        return Err(Error::Shape("textual, visual and target batches differ in size".into()));
    }
    let d = params.dim;
    let mut pres = Vec::with_capacity(b);
    let mut logits = Vec::with_capacity(b);
    let mut lambdas = Vec::with_capacity(b);
    let mut fused = Vec::with_capacity(b);
    for (t, v) in textual.iter().zip(visual) {
        check_pair(params, t, v)?;
        let pre = params.hidden_pre(t, v);
        let s = params.logit(&pre);
        let lambda = sigmoid(s.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        fused.push(fuse_vectors(t, v, lambda)?);
        pres.push(pre);
        logits.push(s);
        lambdas.push(lambda);
    }
    let lg = batch_loss_with_grad(&fused, targets, config)?;

    let mut gp = FusionParams::zeros(d, params.hidden);
    let mut grad_textual = vec![vec![0.0; d]; b];
    let mut grad_visual = vec![vec![0.0; d]; b];
    for i in 0..b {
        let (t, v, gq) = (&textual[i], &visual[i], &lg.grad_queries[i]);
        let lambda = lambdas[i];
        let mut d_lambda = 0.0;
        for k in 0..d {
            grad_textual[i][k] += lambda * gq[k];
            grad_visual[i][k] += (1.0 - lambda) * gq[k];
            d_lambda += gq[k] * (t[k] - v[k]);
        }
        let ds = if logits[i].abs() > LOGIT_CLAMP {
            0.0
        } else {
            d_lambda * lambda * (1.0 - lambda)
        };
        gp.b2 += ds;
        for h in 0..params.hidden {
            let pre = pres[i][h];
            gp.w2[h] += ds * pre.max(0.0);
            if pre <= 0.0 {
                continue;
            }
            let dh = ds * params.w2[h];
            gp.b1[h] += dh;
            let row = h * 2 * d;
            for k in 0..d {
                gp.w1[row + k] += dh * t[k];
                gp.w1[row + d + k] += dh * v[k];
                grad_textual[i][k] += dh * params.w1[row + k];
                grad_visual[i][k] += dh * params.w1[row + d + k];
            }
        }
    }
    Ok(ComposedLoss {
        loss: lg.loss,
        lambdas,
        fused,
        grad_params: gp,
        grad_textual,
        grad_visual,
        grad_targets: lg.grad_targets,
    })
}

/// Optional L2 normalization applied to encoder outputs before fusion.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::NumericDomain("cannot normalize a zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward of [`l2_normalize`]: `(g - y (y . g)) / |x|`.
pub fn l2_normalize_backward(x: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let y: Vec<f64> = x.iter().map(|v| v / n).collect();
    let yg = dot(&y, grad);
    grad.iter().zip(&y).map(|(g, yk)| (g - yk * yg) / n).collect()
}
