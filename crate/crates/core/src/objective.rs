//! Loss functions of the scale-invariant metric learning model.
//!
//! For a triplet `(u, i, j)` with user vector `b`, positive item `p` and
//! negative item `n` the model works with two statistics:
//!
//! ```text
//! x = (bᵀn - bᵀp) / (2d)                      pairwise ranking term
//! y = 2γ²(bᵀn + pᵀn) - (1 + γ²) bᵀp           scale-invariant margin term
//! ```
//!
//! and minimizes `softplus(x) + λ softplus(y)` summed over triplets. For
//! `±1` codes, `2y + (2 - 6γ²)d` equals the geometric margin argument
//! `‖b - p‖² - γ²‖2n - (b + p)‖²` exactly.

use crate::codes::{BinaryCodeMatrix, CodeRow, EmbeddingMatrix};
use crate::data::{Triplet, TripletBatch, DEFAULT_NEGATIVES};
use crate::error::{Error, Result};

/// Largest admissible margin `γ = tan β` (the angle is at most 60°).
pub const MAX_GAMMA: f64 = 1.7321;

/// Model and optimizer settings shared by both trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Code / embedding dimension `d`.
    pub dim: usize,
    /// Scale-invariant margin `γ = tan β`.
    pub gamma: f64,
    /// Weight of the margin term.
    pub lambda: f64,
    /// Fixed margin of the CML baseline.
    pub cml_margin: f64,
    /// Negatives per positive.
    pub n_neg: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Users per SGD mini-batch.
    pub batch_users: usize,
    /// Random restarts of the flip-descent BQP solver.
    pub bqp_restarts: usize,
    pub seed: u64,
    /// Outer iterations of the discrete optimizer.
    pub max_iters: usize,
    /// Relative bound decrease below which the discrete optimizer stops.
    pub tol: f64,
    /// Clip embedding rows to norm √d after each SGD step.
    pub clip_norm: bool,
    /// Standard deviation of the Gaussian embedding initialization.
    pub init_std: f64,
    /// Redraw negatives at every outer iteration of the discrete optimizer.
    pub resample_negatives: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            dim: 20,
            gamma: 1.0,
            lambda: 1.0,
            cml_margin: 0.5,
            n_neg: DEFAULT_NEGATIVES,
            learning_rate: 0.05,
            epochs: 30,
            batch_users: 16,
            bqp_restarts: 8,
            seed: 0,
            max_iters: 30,
            tol: 1e-4,
            clip_norm: true,
            init_std: 0.1,
            resample_negatives: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= MAX_GAMMA) {
            return bad(format!("gamma {} outside (0, {MAX_GAMMA}]", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if self.cml_margin.is_nan() || self.cml_margin < 0.0 {
            return bad(format!("cml margin {} must be >= 0", self.cml_margin));
        }
        if self.n_neg == 0 {
            return bad("n_neg must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.batch_users == 0 {
            return bad("batch_users must be >= 1".into());
        }
        if self.bqp_restarts == 0 {
            return bad("bqp_restarts must be >= 1".into());
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return bad(format!("tolerance {} must be >= 0", self.tol));
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn same_dims(dims: &[usize]) -> Result<()> {
    match dims.iter().find(|&&d| d != dims[0]) {
        Some(&other) => Err(Error::DimensionMismatch {
            left: dims[0],
            right: other,
        }),
        None => Ok(()),
    }
}

/// `log(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t + (-t).exp().ln_1p()
    } else if t < -30.0 {
        t.exp()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Surrogate of the pairwise ranking indicator.
#[inline]
pub fn pairwise_loss(x: f64) -> f64 {
    softplus(x)
}

/// Smooth upper bound of the margin hinge.
#[inline]
pub fn scale_loss(y: f64) -> f64 {
    softplus(y)
}

/// Rating predicted from codes: `1/2 + bᵀp / (2d)`, i.e. `1 - hamming / d`.
pub fn predicted_rating(user: CodeRow<'_>, item: CodeRow<'_>) -> Result<f64> {
    let ham = crate::codes::hamming_distance(user, item)?;
    Ok(1.0 - f64::from(ham) / user.dim() as f64)
}

/// `‖b - p‖² - γ²‖2n - (b + p)‖²`, from the inner-product expansion.
pub fn scale_hinge_argument(user: &[f64], pos: &[f64], neg: &[f64], gamma: f64) -> Result<f64> {
    same_dims(&[user.len(), pos.len(), neg.len()])?;
    let (bb, pp, nn) = (dot(user, user), dot(pos, pos), dot(neg, neg));
    let (bp, bn, pn) = (dot(user, pos), dot(user, neg), dot(pos, neg));
    let g2 = gamma * gamma;
    let near = bb - 2.0 * bp + pp;
    let far = 4.0 * nn + bb + pp - 4.0 * bn - 4.0 * pn + 2.0 * bp;
    Ok(near - g2 * far)
}

/// `[‖oi′‖² - γ²‖oj‖²]₊` where `o` is the midpoint of user and positive.
pub fn scale_hinge_loss(user: &[f64], pos: &[f64], neg: &[f64], gamma: f64) -> Result<f64> {
    Ok((scale_hinge_argument(user, pos, neg, gamma)? / 4.0).max(0.0))
}

/// The three inner products a triplet's statistics depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletInners {
    /// user · positive
    pub up: f64,
    /// user · negative
    pub un: f64,
    /// positive · negative
    pub pn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletStats {
    pub x: f64,
    pub y: f64,
}

impl TripletInners {
    pub fn from_vectors(user: &[f64], pos: &[f64], neg: &[f64]) -> Self {
        Self {
            up: dot(user, pos),
            un: dot(user, neg),
            pn: dot(pos, neg),
        }
    }

    pub fn from_codes(user: CodeRow<'_>, pos: CodeRow<'_>, neg: CodeRow<'_>) -> Self {
        Self {
            up: user.inner_unchecked(&pos) as f64,
            un: user.inner_unchecked(&neg) as f64,
            pn: pos.inner_unchecked(&neg) as f64,
        }
    }

    #[inline]
    pub fn stats(&self, gamma: f64, dim: usize) -> TripletStats {
        let g2 = gamma * gamma;
        TripletStats {
            x: (self.un - self.up) / (2.0 * dim as f64),
            y: 2.0 * g2 * (self.un + self.pn) - (1.0 + g2) * self.up,
        }
    }
}

/// `(x, y)` of one triplet of real or `±1` vectors.
pub fn triplet_statistics(
    user: &[f64],
    pos: &[f64],
    neg: &[f64],
    gamma: f64,
    dim: usize,
) -> Result<TripletStats> {
    same_dims(&[user.len(), pos.len(), neg.len(), dim])?;
    Ok(TripletInners::from_vectors(user, pos, neg).stats(gamma, dim))
}

/// `(x, y)` of a triplet read from code matrices. Indices are not checked.
#[inline]
pub fn code_triplet_stats(
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    t: Triplet,
    gamma: f64,
) -> TripletStats {
    TripletInners::from_codes(users.row(t.user), items.row(t.pos), items.row(t.neg))
        .stats(gamma, users.dim())
}

pub(crate) fn check_code_batch(
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    batch: &TripletBatch,
) -> Result<()> {
    check_batch_ranges(users.rows(), items.rows(), batch)?;
    same_dims(&[users.dim(), items.dim()])
}

pub(crate) fn check_batch_ranges(
    n_users: usize,
    n_items: usize,
    batch: &TripletBatch,
) -> Result<()> {
    for tuple in batch.tuples() {
        if tuple.user >= n_users {
            return Err(Error::IndexOutOfRange {
                index: tuple.user,
                len: n_users,
            });
        }
        if let Some(&i) = std::iter::once(&tuple.positive)
            .chain(&tuple.negatives)
            .find(|&&i| i >= n_items)
        {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: n_items,
            });
        }
    }
    Ok(())
}

/// `Σ softplus(x) + λ softplus(y)` over every triplet of `batch`.
pub fn dsiml_objective(
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<f64> {
    check_code_batch(users, items, batch)?;
    Ok(batch
        .triplets()
        .map(|t| {
            let s = code_triplet_stats(users, items, t, hp.gamma);
            pairwise_loss(s.x) + hp.lambda * scale_loss(s.y)
        })
        .sum())
}

fn check_embedding_batch(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<()> {
    check_batch_ranges(users.rows(), items.rows(), batch)?;
    same_dims(&[users.dim(), items.dim(), hp.dim])
}

/// The same objective on real vectors (the continuous model).
pub fn siml_objective(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<f64> {
    check_embedding_batch(users, items, batch, hp)?;
    Ok(batch
        .triplets()
        .map(|t| {
            let s =
                TripletInners::from_vectors(users.row(t.user), items.row(t.pos), items.row(t.neg))
                    .stats(hp.gamma, hp.dim);
            pairwise_loss(s.x) + hp.lambda * scale_loss(s.y)
        })
        .sum())
}

/// Adds `scale` times the gradient of one triplet's continuous loss to the
/// three row buffers.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn accumulate_siml_triplet(
    user: &[f64],
    pos: &[f64],
    neg: &[f64],
    hp: &Hyperparams,
    scale: f64,
    g_user: &mut [f64],
    g_pos: &mut [f64],
    g_neg: &mut [f64],
) {
    let s = TripletInners::from_vectors(user, pos, neg).stats(hp.gamma, hp.dim);
    let g2 = hp.gamma * hp.gamma;
    let wx = scale * sigmoid(s.x) / (2.0 * hp.dim as f64);
    let wy = scale * hp.lambda * sigmoid(s.y);
    for k in 0..user.len() {
        let (b, p, n) = (user[k], pos[k], neg[k]);
        g_user[k] += wx * (n - p) + wy * (2.0 * g2 * n - (1.0 + g2) * p);
        g_pos[k] += -wx * b + wy * (2.0 * g2 * n - (1.0 + g2) * b);
        g_neg[k] += wx * b + wy * (2.0 * g2 * (b + p));
    }
}

/// Dense gradients with respect to every user and item row.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: EmbeddingMatrix,
    pub items: EmbeddingMatrix,
}

/// Analytic gradient of [`siml_objective`].
pub fn siml_gradients(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<Gradients> {
    check_embedding_batch(users, items, batch, hp)?;
    let dim = hp.dim;
    let mut gu = EmbeddingMatrix::zeros(users.rows(), dim);
    let mut gi = EmbeddingMatrix::zeros(items.rows(), dim);
    let mut g_user = vec![0.0; dim];
    let mut g_pos = vec![0.0; dim];
    let mut g_neg = vec![0.0; dim];
    for t in batch.triplets() {
        g_user.fill(0.0);
        g_pos.fill(0.0);
        g_neg.fill(0.0);
        accumulate_siml_triplet(
            users.row(t.user),
            items.row(t.pos),
            items.row(t.neg),
            hp,
            1.0,
            &mut g_user,
            &mut g_pos,
            &mut g_neg,
        );
        add_into(gu.row_mut(t.user), &g_user);
        add_into(gi.row_mut(t.pos), &g_pos);
        add_into(gi.row_mut(t.neg), &g_neg);
    }
    Ok(Gradients {
        users: gu,
        items: gi,
    })
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Fixed-margin triplet hinge `[‖b - p‖² - ‖b - n‖² + m]₊`.
pub fn cml_loss(user: &[f64], pos: &[f64], neg: &[f64], margin: f64) -> f64 {
    (squared_distance(user, pos) - squared_distance(user, neg) + margin).max(0.0)
}

/// Sum of [`cml_loss`] over a batch.
pub fn cml_objective(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<f64> {
    check_embedding_batch(users, items, batch, hp)?;
    Ok(batch
        .triplets()
        .map(|t| {
            cml_loss(
                users.row(t.user),
                items.row(t.pos),
                items.row(t.neg),
                hp.cml_margin,
            )
        })
        .sum())
}

/// Adds `scale` times the (sub)gradient of one CML triplet. Returns whether
/// the hinge was active.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn accumulate_cml_triplet(
    user: &[f64],
    pos: &[f64],
    neg: &[f64],
    margin: f64,
    scale: f64,
    g_user: &mut [f64],
    g_pos: &mut [f64],
    g_neg: &mut [f64],
) -> bool {
    if squared_distance(user, pos) - squared_distance(user, neg) + margin <= 0.0 {
        return false;
    }
    for k in 0..user.len() {
        let (b, p, n) = (user[k], pos[k], neg[k]);
        g_user[k] += scale * 2.0 * (n - p);
        g_pos[k] += scale * 2.0 * (p - b);
        g_neg[k] += scale * 2.0 * (b - n);
    }
    true
}
