//! Per-entity binary quadratic subproblems and their solvers.
//!
//! With every other code fixed, each statistic of a triplet is affine in
//! the code being optimized: `t(b) = aᵀb + r`. Substituting into the
//! quadratic bound `ℓ̂(t, ξ) = π(ξ)t² + t/2 + (softplus(ξ) - π(ξ)ξ² - ξ/2)`
//! gives the contribution
//!
//! ```text
//! A += w π(ξ) a aᵀ
//! c += w (2π(ξ) r + 1/2) a
//! constant += w (π(ξ) r² + r/2 + softplus(ξ) - π(ξ)ξ² - ξ/2)
//! ```
//!
//! so `bᵀAb + cᵀb + constant` is exactly the entity's share of the bound
//! for every `b ∈ {±1}^d`.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codes::BinaryCodeMatrix;
use crate::data::TripletBatch;
use crate::error::{Error, Result};
use crate::objective::{check_code_batch, dot, softplus, Hyperparams};
use crate::varbound::{pi, VariationalState};

/// Largest dimension the exhaustive solver accepts.
pub const EXHAUSTIVE_MAX_DIM: usize = 16;

/// Whose code a subproblem optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    User(usize),
    Item(usize),
    Anonymous,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::User(u) => write!(f, "user {u}"),
            Owner::Item(i) => write!(f, "item {i}"),
            Owner::Anonymous => write!(f, "instance"),
        }
    }
}

/// `min bᵀAb + cᵀb` over `b ∈ {±1}^d`, with `A` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct BqpInstance {
    dim: usize,
    a: Vec<f64>,
    c: Vec<f64>,
    constant: f64,
    owner: Owner,
}

impl BqpInstance {
    pub fn new(dim: usize, a: Vec<f64>, c: Vec<f64>, constant: f64, owner: Owner) -> Result<Self> {
        if a.len() != dim * dim || c.len() != dim {
            return Err(Error::DimensionMismatch {
                left: a.len() + c.len(),
                right: dim * dim + dim,
            });
        }
        if a.iter().chain(&c).any(|v| !v.is_finite()) || !constant.is_finite() {
            return Err(Error::InvalidParameter(
                "BQP coefficients must be finite".into(),
            ));
        }
        for r in 0..dim {
            for s in 0..r {
                let (x, y) = (a[r * dim + s], a[s * dim + r]);
                if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                    return Err(Error::InvalidParameter(format!(
                        "A is not symmetric at ({r}, {s})"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            a,
            c,
            constant,
            owner,
        })
    }

    fn zeros(dim: usize, owner: Owner) -> Self {
        Self {
            dim,
            a: vec![0.0; dim * dim],
            c: vec![0.0; dim],
            constant: 0.0,
            owner,
        }
    }

    /// Gaussian symmetric `A` and `c`, for tests and benchmarks.
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut inst = Self::zeros(dim, Owner::Anonymous);
        for r in 0..dim {
            for s in r..dim {
                let v: f64 = StandardNormal.sample(rng);
                inst.a[r * dim + s] = v;
                inst.a[s * dim + r] = v;
            }
            inst.c[r] = StandardNormal.sample(rng);
        }
        inst
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `A`.
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    /// `Q(b) = bᵀAb + cᵀb`.
    pub fn value(&self, b: &[i8]) -> f64 {
        let d = self.dim;
        let mut total = 0.0;
        for r in 0..d {
            let row = &self.a[r * d..(r + 1) * d];
            let ab: f64 = row.iter().zip(b).map(|(x, &s)| x * f64::from(s)).sum();
            total += f64::from(b[r]) * (ab + self.c[r]);
        }
        total
    }

    /// Adds `weight · ℓ̂(aᵀb + r, ξ)` to the instance.
    fn add_bound_term(&mut self, coef: &[f64], offset: f64, xi: f64, weight: f64) {
        if weight == 0.0 {
            return;
        }
        let d = self.dim;
        let curv = pi(xi);
        let wc = weight * curv;
        for r in 0..d {
            let scaled = wc * coef[r];
            for (s, a) in self.a[r * d..(r + 1) * d].iter_mut().enumerate() {
                *a += scaled * coef[s];
            }
        }
        let lin = weight * (2.0 * curv * offset + 0.5);
        for (c, &v) in self.c.iter_mut().zip(coef) {
            *c += lin * v;
        }
        self.constant += weight
            * (curv * offset * offset + 0.5 * offset + softplus(xi) - curv * xi * xi - 0.5 * xi);
    }

    /// Text dump: `d`, then `d` rows of `A`, then `c`, then the constant.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        let join = |vals: &[f64]| {
            vals.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "{}", self.dim);
        for r in 0..self.dim {
            let _ = writeln!(out, "{}", join(&self.a[r * self.dim..(r + 1) * self.dim]));
        }
        let _ = writeln!(out, "{}", join(&self.c));
        let _ = writeln!(out, "{}", self.constant);
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .map(|(n, l)| (n + 1, l))
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    reason: format!("missing {what}"),
                })
        };
        let parse_row = |line_no: usize, line: &str| -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        reason: format!("invalid number {tok:?}"),
                    })
                })
                .collect()
        };
        let (n, line) = next("dimension")?;
        let dim: usize = line.trim().parse().map_err(|_| Error::Parse {
            line: n,
            reason: "invalid dimension".into(),
        })?;
        let mut a = Vec::with_capacity(dim * dim);
        for _ in 0..dim {
            let (n, line) = next("matrix row")?;
            let row = parse_row(n, line)?;
            if row.len() != dim {
                return Err(Error::Parse {
                    line: n,
                    reason: format!("expected {dim} values, got {}", row.len()),
                });
            }
            a.extend(row);
        }
        let (n, line) = next("linear term")?;
        let c = parse_row(n, line)?;
        let (n, line) = next("constant")?;
        let constant = line.trim().parse::<f64>().map_err(|_| Error::Parse {
            line: n,
            reason: "invalid constant".into(),
        })?;
        Self::new(dim, a, c, constant, Owner::Anonymous)
    }
}

fn user_triplets(batch: &TripletBatch, user: usize) -> Vec<usize> {
    batch
        .triplets()
        .enumerate()
        .filter(|(_, t)| t.user == user)
        .map(|(k, _)| k)
        .collect()
}

fn item_triplets(batch: &TripletBatch, item: usize) -> Vec<usize> {
    batch
        .triplets()
        .enumerate()
        .filter(|(_, t)| t.pos == item || t.neg == item)
        .map(|(k, _)| k)
        .collect()
}

/// The subproblem in `b_user`, built from the bound at `state`.
pub fn assemble_user_subproblem(
    user: usize,
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    state: &VariationalState,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<BqpInstance> {
    check_inputs(users, items, state, batch)?;
    users.checked_row(user)?;
    assemble_user_from(
        user,
        &user_triplets(batch, user),
        users,
        items,
        state,
        batch,
        hp,
    )
}

/// The subproblem in `d_item`, covering the item's positive and negative
/// roles.
pub fn assemble_item_subproblem(
    item: usize,
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    state: &VariationalState,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<BqpInstance> {
    check_inputs(users, items, state, batch)?;
    items.checked_row(item)?;
    assemble_item_from(
        item,
        &item_triplets(batch, item),
        users,
        items,
        state,
        batch,
        hp,
    )
}

fn check_inputs(
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    state: &VariationalState,
    batch: &TripletBatch,
) -> Result<()> {
    if state.len() != batch.len() {
        return Err(Error::Misaligned {
            state: state.len(),
            batch: batch.len(),
        });
    }
    check_code_batch(users, items, batch)
}

pub(crate) fn assemble_user_from(
    user: usize,
    triplets: &[usize],
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    state: &VariationalState,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<BqpInstance> {
    let owner = Owner::User(user);
    if triplets.is_empty() {
        return Err(Error::EmptyInstance {
            owner: owner.to_string(),
        });
    }
    let d = users.dim();
    let inv2d = 1.0 / (2.0 * d as f64);
    let g2 = hp.gamma * hp.gamma;
    let mut inst = BqpInstance::zeros(d, owner);
    let mut px = vec![0.0; d];
    let mut qy = vec![0.0; d];
    for &t in triplets {
        let trip = batch.triplet(t);
        let pos = items.row(trip.pos).to_f64();
        let neg = items.row(trip.neg).to_f64();
        for k in 0..d {
            px[k] = (neg[k] - pos[k]) * inv2d;
            qy[k] = 2.0 * g2 * neg[k] - (1.0 + g2) * pos[k];
        }
        let ry = 2.0 * g2 * dot(&pos, &neg);
        inst.add_bound_term(&px, 0.0, state.phi()[t], 1.0);
        inst.add_bound_term(&qy, ry, state.eta()[t], hp.lambda);
    }
    Ok(inst)
}

pub(crate) fn assemble_item_from(
    item: usize,
    triplets: &[usize],
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    state: &VariationalState,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<BqpInstance> {
    let owner = Owner::Item(item);
    if triplets.is_empty() {
        return Err(Error::EmptyInstance {
            owner: owner.to_string(),
        });
    }
    let d = items.dim();
    let inv2d = 1.0 / (2.0 * d as f64);
    let g2 = hp.gamma * hp.gamma;
    let mut inst = BqpInstance::zeros(d, owner);
    let mut px = vec![0.0; d];
    let mut qy = vec![0.0; d];
    for &t in triplets {
        let trip = batch.triplet(t);
        let user = users.row(trip.user).to_f64();
        let (rx, ry) = if trip.pos == item {
            let neg = items.row(trip.neg).to_f64();
            let un = dot(&user, &neg);
            for k in 0..d {
                px[k] = -user[k] * inv2d;
                qy[k] = 2.0 * g2 * neg[k] - (1.0 + g2) * user[k];
            }
            (un * inv2d, 2.0 * g2 * un)
        } else {
            debug_assert_eq!(trip.neg, item);
            let pos = items.row(trip.pos).to_f64();
            let up = dot(&user, &pos);
            for k in 0..d {
                px[k] = user[k] * inv2d;
                qy[k] = 2.0 * g2 * (user[k] + pos[k]);
            }
            (-up * inv2d, -(1.0 + g2) * up)
        };
        inst.add_bound_term(&px, rx, state.phi()[t], 1.0);
        inst.add_bound_term(&qy, ry, state.eta()[t], hp.lambda);
    }
    Ok(inst)
}

/// Lexicographic order on sign vectors with `-1 < +1`.
fn lex_less(a: &[i8], b: &[i8]) -> bool {
    a < b
}

/// Change of `Q` when flipping coordinate `k`, given `h = A b`.
#[inline]
fn flip_delta(inst: &BqpInstance, b: &[i8], h: &[f64], k: usize) -> f64 {
    let d = inst.dim;
    let bk = f64::from(b[k]);
    -4.0 * bk * (h[k] - inst.a[k * d + k] * bk) - 2.0 * inst.c[k] * bk
}

#[inline]
fn apply_flip(inst: &BqpInstance, b: &mut [i8], h: &mut [f64], k: usize) {
    let d = inst.dim;
    let step = -2.0 * f64::from(b[k]);
    for (r, hr) in h.iter_mut().enumerate() {
        *hr += step * inst.a[r * d + k];
    }
    b[k] = -b[k];
}

fn field(inst: &BqpInstance, b: &[i8]) -> Vec<f64> {
    let d = inst.dim;
    (0..d)
        .map(|r| {
            inst.a[r * d..(r + 1) * d]
                .iter()
                .zip(b)
                .map(|(x, &s)| x * f64::from(s))
                .sum()
        })
        .collect()
}

/// Global minimizer by Gray-code enumeration of all `2^d` codes. Values
/// within `1e-12` tie, and ties go to the lexicographically smallest code.
pub fn solve_exhaustive(inst: &BqpInstance) -> Result<(Vec<i8>, f64)> {
    let d = inst.dim;
    if d > EXHAUSTIVE_MAX_DIM {
        return Err(Error::DimensionTooLarge(d));
    }
    let mut b = vec![-1i8; d];
    let mut h = field(inst, &b);
    let mut value = inst.value(&b);
    let mut best = b.clone();
    let mut best_value = value;
    for step in 1u32..(1u32 << d) {
        let k = step.trailing_zeros() as usize;
        value += flip_delta(inst, &b, &h, k);
        apply_flip(inst, &mut b, &mut h, k);
        if step % 256 == 0 {
            // bound incremental drift
            value = inst.value(&b);
        }
        if value < best_value - 1e-12 {
            best.copy_from_slice(&b);
            best_value = value;
        } else if (value - best_value).abs() <= 1e-12 && lex_less(&b, &best) {
            best.copy_from_slice(&b);
        }
    }
    let exact = inst.value(&best);
    Ok((best, exact))
}

/// Best-improvement single-bit descent from `start` to a 1-flip local
/// minimum.
fn descend(inst: &BqpInstance, start: &[i8]) -> Vec<i8> {
    let mut b = start.to_vec();
    let mut h = field(inst, &b);
    loop {
        let (k, delta) = (0..inst.dim)
            .map(|k| (k, flip_delta(inst, &b, &h, k)))
            .fold(
                (usize::MAX, 0.0),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            );
        if k == usize::MAX || delta >= -1e-12 {
            return b;
        }
        apply_flip(inst, &mut b, &mut h, k);
    }
}

/// Flip descent from `warm_start`, then from `restarts - 1` random codes;
/// returns the best local minimum found. The result is never worse than the
/// warm start.
pub fn solve_flip_descent(
    inst: &BqpInstance,
    warm_start: &[i8],
    restarts: usize,
    seed: u64,
) -> Result<(Vec<i8>, f64)> {
    if warm_start.len() != inst.dim {
        return Err(Error::DimensionMismatch {
            left: warm_start.len(),
            right: inst.dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warm_value = inst.value(warm_start);
    let mut best = warm_start.to_vec();
    let mut best_value = warm_value;
    for r in 0..restarts.max(1) {
        let start: Vec<i8> = if r == 0 {
            warm_start.to_vec()
        } else {
            (0..inst.dim)
                .map(|_| if rng.random::<bool>() { 1 } else { -1 })
                .collect()
        };
        let local = descend(inst, &start);
        let value = inst.value(&local);
        if value < best_value {
            best = local;
            best_value = value;
        }
    }
    Ok((best, best_value))
}
