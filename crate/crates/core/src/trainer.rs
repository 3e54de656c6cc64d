//! The continuous trainer (SGD on real embeddings), the fixed-margin
//! baseline, and the discrete alternating optimizer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bqp::{assemble_item_from, assemble_user_from, solve_exhaustive, solve_flip_descent};
use crate::codes::{fnv1a64, sign_quantize, BinaryCodeMatrix, EmbeddingMatrix};
use crate::data::{sample_full_batch, InteractionSet, TripletBatch, TripletIndex};
use crate::error::{Error, Result};
use crate::objective::{
    accumulate_cml_triplet, accumulate_siml_triplet, cml_objective, dsiml_objective,
    siml_objective, Hyperparams,
};
use crate::varbound::{bound_objective, VariationalState};

/// Point in training at which a record was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Before any update.
    Init,
    /// End of an SGD epoch.
    Epoch,
    /// After refreshing every variational parameter ahead of the user phase.
    UserRefresh,
    UserCodes,
    ItemRefresh,
    ItemCodes,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    /// Variational bound; absent for the continuous trainers.
    pub bound: Option<f64>,
    /// Training objective on the monitored batch.
    pub objective: f64,
    pub wall_secs: f64,
}

// Wall time is excluded so that reruns compare equal.
impl PartialEq for IterationRecord {
    fn eq(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.stage == other.stage
            && self.bound.map(f64::to_bits) == other.bound.map(f64::to_bits)
            && self.objective.to_bits() == other.objective.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checksum {
    pub name: String,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    /// Completed epochs or outer iterations.
    pub iterations: usize,
    pub checksums: Vec<Checksum>,
}

impl TrainReport {
    fn push(
        &mut self,
        iteration: usize,
        stage: Stage,
        bound: Option<f64>,
        objective: f64,
        start: Instant,
    ) {
        self.records.push(IterationRecord {
            iteration,
            stage,
            bound,
            objective,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    fn checksum(&mut self, name: &str, bytes: &[u8]) {
        self.checksums.push(Checksum {
            name: name.to_string(),
            fnv1a64: format!("{:016x}", fnv1a64(bytes)),
        });
    }

    /// Bounds recorded by the discrete trainer, in order.
    pub fn bounds(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.bound).collect()
    }

    pub fn final_bound(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.bound)
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }

    /// One JSON object per record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Continuous model output.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub users: EmbeddingMatrix,
    pub items: EmbeddingMatrix,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct Codes {
    pub users: BinaryCodeMatrix,
    pub items: BinaryCodeMatrix,
    pub report: TrainReport,
}

fn check_trainable(data: &InteractionSet, hp: &Hyperparams) -> Result<()> {
    hp.validate()?;
    if data.n_users() == 0 || (0..data.n_users()).all(|u| data.train(u).is_empty()) {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Seed for the batch of epoch / iteration `round`.
fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add((round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn clip_row(row: &mut [f64], max_norm: f64) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        row.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Copy)]
enum Loss {
    Siml,
    Cml,
}

fn monitored_objective(
    loss: Loss,
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    batch: &TripletBatch,
    hp: &Hyperparams,
) -> Result<f64> {
    match loss {
        Loss::Siml => siml_objective(users, items, batch, hp),
        Loss::Cml => cml_objective(users, items, batch, hp),
    }
}

/// Mini-batch SGD shared by the two continuous models. Triplets are grouped
/// by user, `batch_users` users per step, and each step follows the summed
/// gradient of its triplets.
fn train_continuous(
    data: &InteractionSet,
    hp: &Hyperparams,
    loss: Loss,
    init: Option<(EmbeddingMatrix, EmbeddingMatrix)>,
) -> Result<Embeddings> {
    check_trainable(data, hp)?;
    let start = Instant::now();
    let d = hp.dim;
    let (mut users, mut items) = match init {
        Some((u, v)) => {
            if u.rows() != data.n_users() || v.rows() != data.n_items() {
                return Err(Error::DimensionMismatch {
                    left: u.rows() + v.rows(),
                    right: data.n_users() + data.n_items(),
                });
            }
            if u.dim() != d || v.dim() != d {
                return Err(Error::DimensionMismatch {
                    left: u.dim().max(v.dim()),
                    right: d,
                });
            }
            (u, v)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
            let u = EmbeddingMatrix::random_normal(data.n_users(), d, hp.init_std, &mut rng);
            let v = EmbeddingMatrix::random_normal(data.n_items(), d, hp.init_std, &mut rng);
            (u, v)
        }
    };
    let monitor = sample_full_batch(data, hp.n_neg, hp.seed)?;
    let mut report = TrainReport::default();
    report.push(
        0,
        Stage::Init,
        None,
        monitored_objective(loss, &users, &items, &monitor, hp)?,
        start,
    );

    let max_norm = (d as f64).sqrt();
    let mut order: Vec<usize> = (0..data.n_users())
        .filter(|&u| !data.train(u).is_empty())
        .collect();
    let mut g_items = vec![0.0; data.n_items() * d];
    let mut item_touched = vec![false; data.n_items()];
    let mut touched: Vec<usize> = Vec::new();
    let (mut g_user, mut g_pos, mut g_neg) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);

    for epoch in 1..=hp.epochs {
        let seed = round_seed(hp.seed, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let batch = sample_full_batch(data, hp.n_neg, seed)?;
        let by_user = TripletIndex::build(&batch, data.n_users(), data.n_items()).by_user;

        for group in order.chunks(hp.batch_users) {
            let mut user_grads: Vec<(usize, Vec<f64>)> = Vec::with_capacity(group.len());
            for &u in group {
                let mut gu = vec![0.0; d];
                for &t in &by_user[u] {
                    let trip = batch.triplet(t);
                    g_user.fill(0.0);
                    g_pos.fill(0.0);
                    g_neg.fill(0.0);
                    let (ur, pr, nr) = (users.row(u), items.row(trip.pos), items.row(trip.neg));
                    let active = match loss {
                        Loss::Siml => {
                            accumulate_siml_triplet(
                                ur,
                                pr,
                                nr,
                                hp,
                                1.0,
                                &mut g_user,
                                &mut g_pos,
                                &mut g_neg,
                            );
                            true
                        }
                        Loss::Cml => accumulate_cml_triplet(
                            ur,
                            pr,
                            nr,
                            hp.cml_margin,
                            1.0,
                            &mut g_user,
                            &mut g_pos,
                            &mut g_neg,
                        ),
                    };
                    if !active {
                        continue;
                    }
                    gu.iter_mut().zip(&g_user).for_each(|(a, b)| *a += b);
                    for (item, g) in [(trip.pos, &g_pos), (trip.neg, &g_neg)] {
                        if !item_touched[item] {
                            item_touched[item] = true;
                            touched.push(item);
                        }
                        g_items[item * d..(item + 1) * d]
                            .iter_mut()
                            .zip(g.iter())
                            .for_each(|(a, b)| *a += b);
                    }
                }
                user_grads.push((u, gu));
            }
            for (u, gu) in user_grads {
                let row = users.row_mut(u);
                row.iter_mut()
                    .zip(&gu)
                    .for_each(|(v, g)| *v -= hp.learning_rate * g);
                if hp.clip_norm {
                    clip_row(row, max_norm);
                }
            }
            touched.sort_unstable();
            for &item in &touched {
                let g = &mut g_items[item * d..(item + 1) * d];
                let row = items.row_mut(item);
                row.iter_mut()
                    .zip(g.iter())
                    .for_each(|(v, g)| *v -= hp.learning_rate * g);
                g.fill(0.0);
                item_touched[item] = false;
                if hp.clip_norm {
                    clip_row(row, max_norm);
                }
            }
            touched.clear();
        }

        // Non-finite parameters would be rejected by the objective's
        // consumers, so check them directly.
        let value = if users.is_finite() && items.is_finite() {
            monitored_objective(loss, &users, &items, &monitor, hp)?
        } else {
            f64::NAN
        };
        report.push(epoch, Stage::Epoch, None, value, start);
        report.iterations = epoch;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: epoch,
                report: Box::new(report),
            });
        }
    }
    report.converged = true;
    report.checksum("users", &users.to_bytes());
    report.checksum("items", &items.to_bytes());
    Ok(Embeddings {
        users,
        items,
        report,
    })
}

/// Trains real-valued embeddings on the continuous scale-invariant loss.
pub fn train_siml(data: &InteractionSet, hp: &Hyperparams) -> Result<Embeddings> {
    train_continuous(data, hp, Loss::Siml, None)
}

/// As [`train_siml`], starting from the given embeddings.
pub fn train_siml_from(
    data: &InteractionSet,
    hp: &Hyperparams,
    users: EmbeddingMatrix,
    items: EmbeddingMatrix,
) -> Result<Embeddings> {
    train_continuous(data, hp, Loss::Siml, Some((users, items)))
}

/// Fixed-margin Euclidean baseline, trained with the same sampler and
/// budget as [`train_siml`].
pub fn train_cml(data: &InteractionSet, hp: &Hyperparams) -> Result<Embeddings> {
    train_continuous(data, hp, Loss::Cml, None)
}

/// BQP solver used by the discrete trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    /// Exact enumeration; dimensions up to 16 only.
    Exhaustive,
    /// Warm-started flip descent with `Hyperparams::bqp_restarts` trajectories.
    FlipDescent,
}

/// Starting codes for the discrete trainer.
#[derive(Debug, Clone)]
pub enum Init {
    /// Train the continuous model first and take signs.
    Siml,
    /// Signs of the given embeddings.
    Embeddings(EmbeddingMatrix, EmbeddingMatrix),
    Codes(BinaryCodeMatrix, BinaryCodeMatrix),
    /// Uniform random signs drawn from the run seed.
    RandomSigns,
}

#[derive(Debug, Clone)]
pub struct DsimlOptions {
    pub init: Init,
    pub solver: Solver,
    /// Fixed training batch; sampled from the run seed when absent.
    pub batch: Option<TripletBatch>,
}

impl Default for DsimlOptions {
    fn default() -> Self {
        Self {
            init: Init::Siml,
            solver: Solver::FlipDescent,
            batch: None,
        }
    }
}

/// Discrete training output. `batch` is the batch of the final iteration.
#[derive(Debug, Clone)]
pub struct DsimlOutput {
    pub codes: Codes,
    pub batch: TripletBatch,
}

/// Alternating optimization of user and item codes with the given initial
/// embeddings, or with a fresh continuous run when `init` is `None`.
pub fn train_dsiml(
    data: &InteractionSet,
    hp: &Hyperparams,
    init: Option<(&EmbeddingMatrix, &EmbeddingMatrix)>,
) -> Result<Codes> {
    let init = match init {
        Some((u, v)) => Init::Embeddings(u.clone(), v.clone()),
        None => Init::Siml,
    };
    let opts = DsimlOptions {
        init,
        ..DsimlOptions::default()
    };
    train_dsiml_with(data, hp, &opts).map(|out| out.codes)
}

fn mix_seed(seed: u64, iteration: usize, role: u64, id: usize) -> u64 {
    let mut z = seed
        ^ (iteration as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ role.wrapping_mul(0xAEF1_7502_108E_F2D9)
        ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn solve(
    solver: Solver,
    inst: &crate::bqp::BqpInstance,
    warm: &[i8],
    restarts: usize,
    seed: u64,
) -> Result<Vec<i8>> {
    let (b, value) = match solver {
        Solver::Exhaustive => solve_exhaustive(inst)?,
        Solver::FlipDescent => solve_flip_descent(inst, warm, restarts, seed)?,
    };
    // Keep the incumbent unless the move strictly improves it, so that the
    // bound cannot creep up through ties.
    if value < inst.value(warm) {
        Ok(b)
    } else {
        Ok(warm.to_vec())
    }
}

/// The discrete alternating optimizer. Each outer iteration records four
/// stages: a full variational refresh, the user phase, a second full
/// refresh, and the item phase. Users are solved in parallel because their
/// subproblems share no variables; items are solved in id order, each after
/// refreshing its own triplets, since item subproblems are coupled.
pub fn train_dsiml_with(
    data: &InteractionSet,
    hp: &Hyperparams,
    opts: &DsimlOptions,
) -> Result<DsimlOutput> {
    check_trainable(data, hp)?;
    let start = Instant::now();
    let d = hp.dim;
    let (mut users, mut items) = match &opts.init {
        Init::Siml => {
            let emb = train_siml(data, hp)?;
            (sign_quantize(&emb.users), sign_quantize(&emb.items))
        }
        Init::Embeddings(u, v) => (sign_quantize(u), sign_quantize(v)),
        Init::Codes(b, dm) => (b.clone(), dm.clone()),
        Init::RandomSigns => {
            let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
            let b = BinaryCodeMatrix::random(data.n_users(), d, &mut rng);
            let dm = BinaryCodeMatrix::random(data.n_items(), d, &mut rng);
            (b, dm)
        }
    };
    if users.rows() != data.n_users() || items.rows() != data.n_items() {
        return Err(Error::DimensionMismatch {
            left: users.rows() + items.rows(),
            right: data.n_users() + data.n_items(),
        });
    }
    if users.dim() != d || items.dim() != d {
        return Err(Error::DimensionMismatch {
            left: users.dim().max(items.dim()),
            right: d,
        });
    }
    if opts.solver == Solver::Exhaustive && d > crate::bqp::EXHAUSTIVE_MAX_DIM {
        return Err(Error::DimensionTooLarge(d));
    }

    let mut batch = match &opts.batch {
        Some(b) => {
            b.validate(data)?;
            b.clone()
        }
        None => sample_full_batch(data, hp.n_neg, hp.seed)?,
    };
    let mut report = TrainReport::default();
    let mut state = VariationalState::fresh(&users, &items, &batch, hp)?;
    let obj = dsiml_objective(&users, &items, &batch, hp)?;
    report.push(
        0,
        Stage::Init,
        Some(bound_objective(&users, &items, &state, &batch, hp)?),
        obj,
        start,
    );

    let record = |report: &mut TrainReport,
                  it: usize,
                  stage: Stage,
                  users: &BinaryCodeMatrix,
                  items: &BinaryCodeMatrix,
                  state: &VariationalState,
                  batch: &TripletBatch|
     -> Result<f64> {
        let bound = bound_objective(users, items, state, batch, hp)?;
        let obj = dsiml_objective(users, items, batch, hp)?;
        report.push(it, stage, Some(bound), obj, start);
        Ok(bound)
    };

    for it in 1..=hp.max_iters.max(1) {
        if hp.resample_negatives && it > 1 {
            batch = sample_full_batch(data, hp.n_neg, round_seed(hp.seed, it))?;
            state = VariationalState::new(batch.len());
        }
        let index = TripletIndex::build(&batch, data.n_users(), data.n_items());

        state.refresh(&users, &items, &batch, hp)?;
        let before = record(
            &mut report,
            it,
            Stage::UserRefresh,
            &users,
            &items,
            &state,
            &batch,
        )?;

        let updates: Vec<Option<Vec<i8>>> = (0..data.n_users())
            .into_par_iter()
            .map(|u| -> Result<Option<Vec<i8>>> {
                let trips = &index.by_user[u];
                if trips.is_empty() {
                    return Ok(None);
                }
                let inst = assemble_user_from(u, trips, &users, &items, &state, &batch, hp)?;
                let warm = users.row(u).signs();
                let seed = mix_seed(hp.seed, it, 0, u);
                solve(opts.solver, &inst, &warm, hp.bqp_restarts, seed).map(Some)
            })
            .collect::<Result<_>>()?;
        for (u, new) in updates.into_iter().enumerate() {
            if let Some(signs) = new {
                users.set_row(u, &signs)?;
            }
        }
        record(
            &mut report,
            it,
            Stage::UserCodes,
            &users,
            &items,
            &state,
            &batch,
        )?;

        state.refresh(&users, &items, &batch, hp)?;
        record(
            &mut report,
            it,
            Stage::ItemRefresh,
            &users,
            &items,
            &state,
            &batch,
        )?;

        for i in 0..data.n_items() {
            let trips = &index.by_item[i];
            if trips.is_empty() {
                continue;
            }
            state.refresh_triplets(&users, &items, &batch, hp, trips);
            let inst = assemble_item_from(i, trips, &users, &items, &state, &batch, hp)?;
            let warm = items.row(i).signs();
            let signs = solve(
                opts.solver,
                &inst,
                &warm,
                hp.bqp_restarts,
                mix_seed(hp.seed, it, 1, i),
            )?;
            items.set_row(i, &signs)?;
        }
        let after = record(
            &mut report,
            it,
            Stage::ItemCodes,
            &users,
            &items,
            &state,
            &batch,
        )?;
        report.iterations = it;

        if !after.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                report: Box::new(report),
            });
        }
        let decrease = (before - after) / before.abs().max(f64::MIN_POSITIVE);
        if decrease < hp.tol {
            report.converged = true;
            break;
        }
    }
    report.checksum("user_codes", &users.to_bytes());
    report.checksum("item_codes", &items.to_bytes());
    Ok(DsimlOutput {
        codes: Codes {
            users,
            items,
            report,
        },
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> InteractionSet {
        InteractionSet::from_positives(
            8,
            vec![vec![0, 1, 2], vec![1, 2, 3], vec![4, 5], vec![5, 6, 7]],
        )
        .unwrap()
    }

    fn hp(dim: usize) -> Hyperparams {
        Hyperparams {
            dim,
            n_neg: 2,
            epochs: 20,
            batch_users: 2,
            max_iters: 10,
            tol: 0.0,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny();
        let h = Hyperparams { epochs: 0, ..hp(4) };
        let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
        let u = EmbeddingMatrix::random_normal(4, 4, h.init_std, &mut rng);
        let v = EmbeddingMatrix::random_normal(8, 4, h.init_std, &mut rng);
        let out = train_siml(&data, &h).unwrap();
        assert_eq!(out.users, u);
        assert_eq!(out.items, v);
        assert_eq!(out.report.records.len(), 1);
    }

    #[test]
    fn siml_descends_and_is_deterministic() {
        let data =
            InteractionSet::from_positives(6, vec![vec![0, 1], vec![2, 3], vec![4, 5]]).unwrap();
        let h = Hyperparams {
            dim: 4,
            n_neg: 2,
            epochs: 50,
            batch_users: 1,
            learning_rate: 0.2,
            ..Hyperparams::default()
        };
        let a = train_siml(&data, &h).unwrap();
        let b = train_siml(&data, &h).unwrap();
        assert_eq!(a.report, b.report);
        let first = a.report.records[0].objective;
        assert!(a.report.final_objective().unwrap() < first);
    }

    #[test]
    fn exhaustive_trajectory_is_monotone_and_tight() {
        let data = tiny();
        let h = hp(8);
        let opts = DsimlOptions {
            init: Init::RandomSigns,
            solver: Solver::Exhaustive,
            batch: None,
        };
        let out = train_dsiml_with(&data, &h, &opts).unwrap();
        let recs = &out.codes.report.records;
        assert_eq!(out.codes.report.iterations, 10);
        for w in recs.windows(2) {
            assert!(w[1].bound.unwrap() <= w[0].bound.unwrap() + 1e-9);
        }
        for r in recs
            .iter()
            .filter(|r| matches!(r.stage, Stage::UserRefresh | Stage::ItemRefresh))
        {
            assert!((r.bound.unwrap() - r.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn infinite_tolerance_runs_one_iteration() {
        let data = tiny();
        let h = Hyperparams {
            tol: f64::INFINITY,
            ..hp(6)
        };
        let opts = DsimlOptions {
            init: Init::RandomSigns,
            ..DsimlOptions::default()
        };
        let out = train_dsiml_with(&data, &h, &opts).unwrap();
        assert_eq!(out.codes.report.iterations, 1);
        assert!(out.codes.report.converged);
    }

    #[test]
    fn exhaustive_rejects_wide_codes() {
        let data = tiny();
        let opts = DsimlOptions {
            init: Init::RandomSigns,
            solver: Solver::Exhaustive,
            batch: None,
        };
        assert!(matches!(
            train_dsiml_with(&data, &hp(20), &opts),
            Err(Error::DimensionTooLarge(20))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny();
        let h = Hyperparams {
            learning_rate: 1e300,
            clip_norm: false,
            init_std: 1e10,
            ..hp(4)
        };
        match train_siml(&data, &h) {
            Err(Error::Diverged { iteration, report }) => {
                assert_eq!(report.records.last().unwrap().iteration, iteration);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
