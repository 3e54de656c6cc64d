//! Jaakkola–Jordan quadratic majorizer of `softplus` and the per-triplet
//! variational parameters built on it.
//!
//! For every `ξ`, `ℓ̂(t, ξ) = π(ξ)(t² - ξ²) + (t - ξ)/2 + softplus(ξ)`
//! bounds `softplus(t)` from above and touches it at `ξ = ±t`. The optimal
//! variational parameters are therefore the current statistics themselves,
//! which is all [`VariationalState`] stores.

use rayon::prelude::*;

use crate::codes::BinaryCodeMatrix;
use crate::data::TripletBatch;
use crate::error::{Error, Result};
use crate::objective::{check_code_batch, code_triplet_stats, softplus, Hyperparams};

/// Curvature `π(ξ) = (σ(ξ) - 1/2) / (2ξ)`, with `π(0) = 1/8`.
#[inline]
pub fn pi(xi: f64) -> f64 {
    if xi.abs() < 1e-4 {
        // tanh(ξ/2) / (4ξ) = 1/8 - ξ²/96 + O(ξ⁴)
        0.125 - xi * xi / 96.0
    } else {
        // σ(ξ) - 1/2 = tanh(ξ/2) / 2
        (0.5 * xi).tanh() / (4.0 * xi)
    }
}

/// The quadratic upper bound `ℓ̂(t, ξ) ≥ softplus(t)`.
#[inline]
pub fn jj_bound(t: f64, xi: f64) -> f64 {
    pi(xi) * (t * t - xi * xi) + 0.5 * (t - xi) + softplus(xi)
}

/// Per-triplet cache of the statistics at which the bound was last made
/// tight: `φ = x` and `η = y`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    phi: Vec<f64>,
    eta: Vec<f64>,
}

impl VariationalState {
    /// Zero-initialized caches for `len` triplets.
    pub fn new(len: usize) -> Self {
        Self {
            phi: vec![0.0; len],
            eta: vec![0.0; len],
        }
    }

    /// Caches tight at the given codes.
    pub fn fresh(
        users: &BinaryCodeMatrix,
        items: &BinaryCodeMatrix,
        batch: &TripletBatch,
        hp: &Hyperparams,
    ) -> Result<Self> {
        let mut state = Self::new(batch.len());
        state.refresh(users, items, batch, hp)?;
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// Cached `x` values (the `φ` parameters).
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Cached `y` values (the `η` parameters).
    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn set_phi(&mut self, t: usize, value: f64) {
        self.phi[t] = value;
    }

    pub fn set_eta(&mut self, t: usize, value: f64) {
        self.eta[t] = value;
    }

    fn check(&self, batch: &TripletBatch) -> Result<()> {
        if self.len() != batch.len() {
            return Err(Error::Misaligned {
                state: self.len(),
                batch: batch.len(),
            });
        }
        Ok(())
    }

    /// Sets every `φ` to the current `x`.
    pub fn update_phi(
        &mut self,
        users: &BinaryCodeMatrix,
        items: &BinaryCodeMatrix,
        batch: &TripletBatch,
        hp: &Hyperparams,
    ) -> Result<()> {
        self.check(batch)?;
        check_code_batch(users, items, batch)?;
        self.phi.par_iter_mut().enumerate().for_each(|(t, phi)| {
            *phi = code_triplet_stats(users, items, batch.triplet(t), hp.gamma).x;
        });
        Ok(())
    }

    /// Sets every `η` to the current `y`.
    pub fn update_eta(
        &mut self,
        users: &BinaryCodeMatrix,
        items: &BinaryCodeMatrix,
        batch: &TripletBatch,
        hp: &Hyperparams,
    ) -> Result<()> {
        self.check(batch)?;
        check_code_batch(users, items, batch)?;
        self.eta.par_iter_mut().enumerate().for_each(|(t, eta)| {
            *eta = code_triplet_stats(users, items, batch.triplet(t), hp.gamma).y;
        });
        Ok(())
    }

    /// Both updates; afterwards the bound equals the objective.
    pub fn refresh(
        &mut self,
        users: &BinaryCodeMatrix,
        items: &BinaryCodeMatrix,
        batch: &TripletBatch,
        hp: &Hyperparams,
    ) -> Result<()> {
        self.update_phi(users, items, batch, hp)?;
        self.update_eta(users, items, batch, hp)
    }

    /// Refreshes only the listed triplets. Indices must be valid.
    pub(crate) fn refresh_triplets(
        &mut self,
        users: &BinaryCodeMatrix,
        items: &BinaryCodeMatrix,
        batch: &TripletBatch,
        hp: &Hyperparams,
        triplets: &[usize],
    ) {
        for &t in triplets {
            let s = code_triplet_stats(users, items, batch.triplet(t), hp.gamma);
            self.phi[t] = s.x;
            self.eta[t] = s.y;
        }
    }
}

/// `Σ ℓ̂(x, φ) + λ ℓ̂(y, η)` over the batch; never below the objective.
pub fn bound_objective(
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    state: &VariationalState,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<f64> {
    state.check(batch)?;
    check_code_batch(users, items, batch)?;
    Ok(batch
        .triplets()
        .enumerate()
        .map(|(t, triplet)| {
            let s = code_triplet_stats(users, items, triplet, hp.gamma);
            jj_bound(s.x, state.phi[t]) + hp.lambda * jj_bound(s.y, state.eta[t])
        })
        .sum())
}
