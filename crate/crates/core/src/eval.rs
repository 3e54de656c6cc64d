//! Ranking metrics, whole-model evaluation, and the imbalanced synthetic
//! benchmark comparing the scale-invariant and fixed-margin losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::codes::{BinaryCodeMatrix, EmbeddingMatrix};
use crate::data::{split_train_test, InteractionSet};
use crate::error::{Error, Result};
use crate::objective::{dot, squared_distance, Hyperparams};
use crate::retrieval::{hamming_rank, rank_by_score};
use crate::trainer::{train_cml, train_siml};

#[inline]
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Binary-relevance NDCG over the first `k` entries of `ranked`.
/// `positives` must be sorted.
pub fn ndcg_at_k(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| positives.binary_search(i).is_ok())
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=k.min(positives.len())).map(discount).sum();
    dcg / ideal
}

/// Fraction of `positives` (sorted) found in the first `k` of `ranked`.
pub fn hr_at_k(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| positives.binary_search(i).is_ok())
        .count();
    hits as f64 / positives.len() as f64
}

/// Metrics averaged over users with at least one held-out positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingMetrics {
    pub ks: Vec<usize>,
    pub ndcg: Vec<f64>,
    pub hr: Vec<f64>,
    pub users: usize,
}

impl RankingMetrics {
    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.hr[p])
    }

    /// One JSON object per cutoff.
    pub fn json_lines(&self, model: &str, seed: u64) -> Vec<String> {
        self.ks
            .iter()
            .enumerate()
            .map(|(p, &k)| {
                serde_json::json!({
                    "model": model,
                    "k": k,
                    "ndcg": self.ndcg[p],
                    "hr": self.hr[p],
                    "users": self.users,
                    "seed": seed,
                })
                .to_string()
            })
            .collect()
    }
}

/// A trained model and the scoring rule used to rank items.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    /// Hamming distance between codes.
    Codes {
        users: &'a BinaryCodeMatrix,
        items: &'a BinaryCodeMatrix,
    },
    /// Inner product between embeddings.
    InnerProduct {
        users: &'a EmbeddingMatrix,
        items: &'a EmbeddingMatrix,
    },
    /// Euclidean distance between embeddings.
    Euclidean {
        users: &'a EmbeddingMatrix,
        items: &'a EmbeddingMatrix,
    },
}

impl Model<'_> {
    fn shape(&self) -> (usize, usize, usize, usize) {
        match self {
            Model::Codes { users, items } => (users.rows(), items.rows(), users.dim(), items.dim()),
            Model::InnerProduct { users, items } | Model::Euclidean { users, items } => {
                (users.rows(), items.rows(), users.dim(), items.dim())
            }
        }
    }

    /// The `k` best items for `user`, skipping the sorted `excluded` list.
    pub fn rank(&self, user: usize, k: usize, excluded: &[usize]) -> Vec<usize> {
        match self {
            Model::Codes { users, items } => hamming_rank(items, users.row(user), k, excluded)
                .into_iter()
                .map(|(i, _)| i)
                .collect(),
            Model::InnerProduct { users, items } => {
                let u = users.row(user);
                let scores: Vec<f64> = (0..items.rows()).map(|i| dot(u, items.row(i))).collect();
                rank_by_score(&scores, k, excluded)
            }
            Model::Euclidean { users, items } => {
                let u = users.row(user);
                let scores: Vec<f64> = (0..items.rows())
                    .map(|i| -squared_distance(u, items.row(i)))
                    .collect();
                rank_by_score(&scores, k, excluded)
            }
        }
    }
}

/// Ranks all items except each user's train positives and averages the
/// metrics over users with held-out positives.
pub fn evaluate_model(
    model: &Model<'_>,
    data: &InteractionSet,
    ks: &[usize],
) -> Result<RankingMetrics> {
    let (n_users, n_items, du, di) = model.shape();
    if du != di {
        return Err(Error::DimensionMismatch {
            left: du,
            right: di,
        });
    }
    if n_users != data.n_users() || n_items != data.n_items() {
        return Err(Error::DimensionMismatch {
            left: n_users + n_items,
            right: data.n_users() + data.n_items(),
        });
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidParameter("cutoffs must be >= 1".into()));
    }
    let kmax = *ks.iter().max().expect("nonempty");
    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..n_users)
        .into_par_iter()
        .map(|u| {
            let test = data.test(u);
            if test.is_empty() {
                return None;
            }
            let ranked = model.rank(u, kmax, data.train(u));
            Some((
                ks.iter().map(|&k| ndcg_at_k(&ranked, test, k)).collect(),
                ks.iter().map(|&k| hr_at_k(&ranked, test, k)).collect(),
            ))
        })
        .collect();
    let mut ndcg = vec![0.0; ks.len()];
    let mut hr = vec![0.0; ks.len()];
    let mut users = 0;
    for (n, h) in per_user.into_iter().flatten() {
        users += 1;
        ndcg.iter_mut().zip(&n).for_each(|(a, b)| *a += b);
        hr.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
    }
    if users > 0 {
        let inv = 1.0 / users as f64;
        ndcg.iter_mut().chain(hr.iter_mut()).for_each(|v| *v *= inv);
    }
    Ok(RankingMetrics {
        ks: ks.to_vec(),
        ndcg,
        hr,
        users,
    })
}

/// Parameters of the two-cluster generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_major: usize,
    pub n_minor: usize,
    pub spread_major: f64,
    pub spread_minor: f64,
    /// Dimension of the latent space.
    pub latent_dim: usize,
    /// Distance between the two cluster centers.
    pub separation: f64,
    /// A user's positives are the same-cluster items within this distance.
    /// The radius is absolute: scaling it with the spread would make the
    /// interaction graph identical for every spread.
    pub radius: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_major: 400,
            n_minor: 40,
            spread_major: 3.0,
            spread_minor: 0.5,
            latent_dim: 2,
            separation: 12.0,
            radius: 1.0,
            seed: 0,
        }
    }
}

/// Latent points behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGeometry {
    pub latent_dim: usize,
    pub user_points: Vec<Vec<f64>>,
    pub item_points: Vec<Vec<f64>>,
    /// 0 for the major cluster, 1 for the minor one.
    pub user_cluster: Vec<u8>,
    pub item_cluster: Vec<u8>,
}

const SYNTHETIC_ATTEMPTS: usize = 50;

/// Two item clusters of unequal size and spread; see [`SyntheticConfig`].
pub fn generate_imbalanced_synthetic(
    n_users: usize,
    n_major: usize,
    n_minor: usize,
    spread_major: f64,
    spread_minor: f64,
    seed: u64,
) -> Result<(InteractionSet, SyntheticGeometry)> {
    generate_synthetic(&SyntheticConfig {
        n_users,
        n_major,
        n_minor,
        spread_major,
        spread_minor,
        seed,
        ..SyntheticConfig::default()
    })
}

/// As [`generate_imbalanced_synthetic`] with every knob exposed. Equal
/// sizes or spreads are accepted here for control runs.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(InteractionSet, SyntheticGeometry)> {
    if cfg.n_users == 0 || cfg.n_minor == 0 || cfg.n_major < cfg.n_minor || cfg.latent_dim == 0 {
        return Err(Error::InvalidParameter(
            "need n_users >= 1 and n_major >= n_minor >= 1".into(),
        ));
    }
    if !(cfg.spread_minor > 0.0 && cfg.spread_major >= cfg.spread_minor && cfg.radius > 0.0) {
        return Err(Error::InvalidParameter(
            "need spread_major >= spread_minor > 0 and radius > 0".into(),
        ));
    }
    let n_items = cfg.n_major + cfg.n_minor;
    let dim = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut center_minor = vec![0.0; dim];
    center_minor[0] = cfg.separation;
    let centers = [vec![0.0; dim], center_minor];
    let spreads = [cfg.spread_major, cfg.spread_minor];
    let point = |rng: &mut ChaCha8Rng, c: usize| -> Vec<f64> {
        (0..dim)
            .map(|k| {
                let z: f64 = StandardNormal.sample(rng);
                centers[c][k] + spreads[c] * z
            })
            .collect()
    };

    let item_cluster: Vec<u8> = (0..n_items).map(|i| u8::from(i >= cfg.n_major)).collect();
    let item_points: Vec<Vec<f64>> = item_cluster
        .iter()
        .map(|&c| point(&mut rng, c as usize))
        .collect();
    let p_minor = cfg.n_minor as f64 / n_items as f64;
    let radius2 = cfg.radius * cfg.radius;
    let mut user_cluster = Vec::with_capacity(cfg.n_users);
    let mut user_points = Vec::with_capacity(cfg.n_users);
    let mut positives = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let c = usize::from(rng.random::<f64>() < p_minor);
        let mut found = None;
        for _ in 0..SYNTHETIC_ATTEMPTS {
            let p = point(&mut rng, c);
            let pos: Vec<usize> = (0..n_items)
                .filter(|&i| {
                    item_cluster[i] as usize == c
                        && squared_distance(&p, &item_points[i]) <= radius2
                })
                .collect();
            if !pos.is_empty() {
                found = Some((p, pos));
                break;
            }
        }
        let (p, pos) = found.ok_or(Error::DegenerateGeometry {
            attempts: SYNTHETIC_ATTEMPTS,
        })?;
        user_cluster.push(c as u8);
        user_points.push(p);
        positives.push(pos);
    }
    let set = InteractionSet::from_positives(n_items, positives)?;
    Ok((
        set,
        SyntheticGeometry {
            latent_dim: dim,
            user_points,
            item_points,
            user_cluster,
            item_cluster,
        },
    ))
}

/// Paired metrics of the two continuous models on one seed's data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rq4Row {
    pub seed: u64,
    pub setting: String,
    pub siml_ndcg: f64,
    pub siml_hr: f64,
    pub cml_ndcg: f64,
    pub cml_hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rq4Report {
    pub rows: Vec<Rq4Row>,
}

impl Rq4Report {
    fn mean(&self, setting: &str, f: impl Fn(&Rq4Row) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setting == setting)
            .map(f)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn mean_siml_ndcg(&self, setting: &str) -> f64 {
        self.mean(setting, |r| r.siml_ndcg)
    }

    pub fn mean_cml_ndcg(&self, setting: &str) -> f64 {
        self.mean(setting, |r| r.cml_ndcg)
    }
}

pub const RQ4_CUTOFF: usize = 10;

/// Trains both continuous models with the same settings on each seed's
/// dataset and records NDCG@10 and HR@10. `configs` lists the settings by
/// name; each seed overrides the generator seed, the split seed and the
/// training seed.
pub fn run_rq4(
    seeds: &[u64],
    hp: &Hyperparams,
    configs: &[(&str, SyntheticConfig)],
) -> Result<Rq4Report> {
    let mut rows = Vec::new();
    for (name, base) in configs {
        for &seed in seeds {
            let cfg = SyntheticConfig {
                seed,
                ..base.clone()
            };
            let (full, _) = generate_synthetic(&cfg)?;
            let data = split_train_test(&full, 0.8, seed)?;
            let run_hp = Hyperparams { seed, ..hp.clone() };
            let siml = train_siml(&data, &run_hp)?;
            let cml = train_cml(&data, &run_hp)?;
            let ks = [RQ4_CUTOFF];
            let ms = evaluate_model(
                &Model::InnerProduct {
                    users: &siml.users,
                    items: &siml.items,
                },
                &data,
                &ks,
            )?;
            let mc = evaluate_model(
                &Model::Euclidean {
                    users: &cml.users,
                    items: &cml.items,
                },
                &data,
                &ks,
            )?;
            rows.push(Rq4Row {
                seed,
                setting: name.to_string(),
                siml_ndcg: ms.ndcg[0],
                siml_hr: ms.hr[0],
                cml_ndcg: mc.ndcg[0],
                cml_hr: mc.hr[0],
            });
        }
    }
    Ok(Rq4Report { rows })
}

/// The imbalanced setting and its equal-spread control.
pub fn rq4_settings() -> Vec<(&'static str, SyntheticConfig)> {
    let imbalanced = SyntheticConfig::default();
    let balanced = SyntheticConfig {
        spread_minor: imbalanced.spread_major,
        ..imbalanced.clone()
    };
    vec![("imbalanced", imbalanced), ("balanced", balanced)]
}
