//! Implicit-feedback datasets: ingestion, degree filtering, per-user
//! train/test splitting and N-pair triplet sampling.
//!
//! Ids are dense (`0..n_users`, `0..n_items`) and assigned in order of first
//! appearance in the input. Every positive carries a split tag; freshly
//! loaded data is all-train until [`split_train_test`] runs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default number of negatives per positive.
pub const DEFAULT_NEGATIVES: usize = 5;

/// Deduplicated implicit feedback with per-user train and test positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    train: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
}

impl InteractionSet {
    /// Builds a set from explicit per-user train and test lists.
    ///
    /// Lists are sorted and deduplicated; an item present in both lists of a
    /// user stays in train only. Keys default to the decimal ids.
    pub fn from_split(
        n_items: usize,
        mut train: Vec<Vec<usize>>,
        mut test: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if train.len() != test.len() {
            return Err(Error::DimensionMismatch {
                left: train.len(),
                right: test.len(),
            });
        }
        for (tr, te) in train.iter_mut().zip(test.iter_mut()) {
            tr.sort_unstable();
            tr.dedup();
            te.sort_unstable();
            te.dedup();
            te.retain(|i| tr.binary_search(i).is_err());
            if let Some(&bad) = tr.iter().chain(te.iter()).find(|&&i| i >= n_items) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    len: n_items,
                });
            }
        }
        let set = Self {
            user_keys: (0..train.len()).map(|u| u.to_string()).collect(),
            item_keys: (0..n_items).map(|i| i.to_string()).collect(),
            train,
            test,
        };
        set.check_nonempty()?;
        Ok(set)
    }

    /// Builds an all-train set from positive lists.
    pub fn from_positives(n_items: usize, positives: Vec<Vec<usize>>) -> Result<Self> {
        let empty = vec![Vec::new(); positives.len()];
        Self::from_split(n_items, positives, empty)
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.n_users() == 0 || self.n_items() == 0 || self.n_interactions() == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(u) = self.train.iter().position(Vec::is_empty) {
            return Err(Error::InvalidParameter(format!(
                "user {} has no train positives",
                self.user_keys[u]
            )));
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.train.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.train.iter().chain(&self.test).map(Vec::len).sum()
    }

    /// Sorted train positives of `user`.
    pub fn train(&self, user: usize) -> &[usize] {
        &self.train[user]
    }

    /// Sorted test positives of `user`.
    pub fn test(&self, user: usize) -> &[usize] {
        &self.test[user]
    }

    /// All positives of `user` (train and test), sorted.
    pub fn positives(&self, user: usize) -> Vec<usize> {
        let mut all = Vec::with_capacity(self.train[user].len() + self.test[user].len());
        all.extend_from_slice(&self.train[user]);
        all.extend_from_slice(&self.test[user]);
        all.sort_unstable();
        all
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.train[user].binary_search(&item).is_ok()
            || self.test[user].binary_search(&item).is_ok()
    }

    pub fn user_key(&self, user: usize) -> &str {
        &self.user_keys[user]
    }

    pub fn item_key(&self, item: usize) -> &str {
        &self.item_keys[item]
    }

    pub fn user_id(&self, key: &str) -> Option<usize> {
        self.user_keys.iter().position(|k| k == key)
    }

    /// Positive users of each item (train split only), sorted.
    pub fn item_train_users(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_items()];
        for (u, items) in self.train.iter().enumerate() {
            for &i in items {
                out[i].push(u);
            }
        }
        out
    }

    fn user_degrees(&self) -> Vec<usize> {
        (0..self.n_users())
            .map(|u| self.train[u].len() + self.test[u].len())
            .collect()
    }

    fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_items()];
        for i in self.train.iter().chain(&self.test).flatten() {
            deg[*i] += 1;
        }
        deg
    }

    /// Writes train and test positives as `user<sep>item<sep>1` lines.
    pub fn write_split(&self, train_path: &Path, test_path: &Path, sep: char) -> Result<()> {
        self.write_tagged(train_path, sep, &self.train)?;
        self.write_tagged(test_path, sep, &self.test)
    }

    fn write_tagged(&self, path: &Path, sep: char, lists: &[Vec<usize>]) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (u, items) in lists.iter().enumerate() {
            for &i in items {
                writeln!(w, "{}{sep}{}{sep}1", self.user_keys[u], self.item_keys[i])
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Key-to-id assignment in first-appearance order.
#[derive(Default)]
struct KeyMap {
    ids: HashMap<String, usize>,
    keys: Vec<String>,
}

impl KeyMap {
    fn id(&mut self, key: &str) -> usize {
        if let Some(&id) = self.ids.get(key) {
            return id;
        }
        let id = self.keys.len();
        self.ids.insert(key.to_string(), id);
        self.keys.push(key.to_string());
        id
    }
}

struct ParsedLine<'a> {
    user: &'a str,
    item: &'a str,
    rating: Option<f64>,
}

fn parse_line(line: &str, sep: char, line_no: usize) -> Result<Option<ParsedLine<'_>>> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    if trimmed.trim().is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let mut fields = trimmed.split(sep);
    let user = fields.next().map(str::trim).unwrap_or_default();
    let item = fields.next().map(str::trim);
    let (user, item) = match item {
        Some(item) if !user.is_empty() && !item.is_empty() => (user, item),
        _ => {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected at least 2 fields separated by {sep:?}"),
            })
        }
    };
    let rating = match fields.next().map(str::trim) {
        None | Some("") => None,
        Some(raw) => Some(raw.parse::<f64>().map_err(|_| Error::Parse {
            line: line_no,
            reason: format!("invalid rating {raw:?}"),
        })?),
    };
    Ok(Some(ParsedLine { user, item, rating }))
}

fn read_pairs(
    path: &Path,
    sep: char,
    threshold: f64,
    users: &mut KeyMap,
    items: &mut KeyMap,
    mut sink: impl FnMut(usize, usize),
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let Some(parsed) = parse_line(&line, sep, n + 1)? else {
            continue;
        };
        // A missing rating counts as an interaction.
        if parsed.rating.is_some_and(|r| r < threshold) {
            continue;
        }
        let u = users.id(parsed.user);
        let i = items.id(parsed.item);
        sink(u, i);
    }
    Ok(())
}

/// Reads an interaction log. Pairs rated at or above `rating_threshold`
/// become (train-tagged) positives; duplicates collapse.
pub fn load_interactions(path: &Path, sep: char, rating_threshold: f64) -> Result<InteractionSet> {
    let mut users = KeyMap::default();
    let mut items = KeyMap::default();
    let mut train: Vec<Vec<usize>> = Vec::new();
    read_pairs(
        path,
        sep,
        rating_threshold,
        &mut users,
        &mut items,
        |u, i| {
            if u == train.len() {
                train.push(Vec::new());
            }
            train[u].push(i);
        },
    )?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_items = items.keys.len();
    let test = vec![Vec::new(); train.len()];
    let mut set = InteractionSet::from_split(n_items, train, test)?;
    set.user_keys = users.keys;
    set.item_keys = items.keys;
    Ok(set)
}

/// Reads a prepared train/test pair of files with a shared id space
/// (train file first, then test file, first-appearance order).
pub fn load_split(train_path: &Path, test_path: &Path, sep: char) -> Result<InteractionSet> {
    let mut users = KeyMap::default();
    let mut items = KeyMap::default();
    let mut train: Vec<Vec<usize>> = Vec::new();
    let mut test: Vec<Vec<usize>> = Vec::new();
    read_pairs(
        train_path,
        sep,
        f64::NEG_INFINITY,
        &mut users,
        &mut items,
        |u, i| {
            if u == train.len() {
                train.push(Vec::new());
                test.push(Vec::new());
            }
            train[u].push(i);
        },
    )?;
    read_pairs(
        test_path,
        sep,
        f64::NEG_INFINITY,
        &mut users,
        &mut items,
        |u, i| {
            if u == train.len() {
                train.push(Vec::new());
                test.push(Vec::new());
            }
            test[u].push(i);
        },
    )?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut set = InteractionSet::from_split(items.keys.len(), train, test)?;
    set.user_keys = users.keys;
    set.item_keys = items.keys;
    Ok(set)
}

/// Removes users and items with fewer than `min_count` interactions,
/// repeating until nothing changes, then re-densifies ids (relative order is
/// kept).
pub fn filter_min_degree(set: &InteractionSet, min_count: usize) -> Result<InteractionSet> {
    if min_count == 0 {
        return Err(Error::InvalidParameter("min_count must be >= 1".into()));
    }
    let mut keep_user = vec![true; set.n_users()];
    let mut keep_item = vec![true; set.n_items()];
    let mut current = set.clone();
    loop {
        let user_deg = current.user_degrees();
        let item_deg = current.item_degrees();
        let mut changed = false;
        for (u, &deg) in user_deg.iter().enumerate() {
            if keep_user[u] && deg < min_count {
                keep_user[u] = false;
                changed = true;
            }
        }
        for (i, &deg) in item_deg.iter().enumerate() {
            if keep_item[i] && deg < min_count {
                keep_item[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (u, &keep) in keep_user.iter().enumerate() {
            if keep {
                current.train[u].retain(|&i| keep_item[i]);
                current.test[u].retain(|&i| keep_item[i]);
            } else {
                current.train[u].clear();
                current.test[u].clear();
            }
        }
    }

    let mut item_map = vec![usize::MAX; set.n_items()];
    let mut item_keys = Vec::new();
    for (i, _) in keep_item.iter().enumerate().filter(|(_, &k)| k) {
        item_map[i] = item_keys.len();
        item_keys.push(set.item_keys[i].clone());
    }
    let mut user_keys = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in (0..set.n_users()).filter(|&u| keep_user[u]) {
        user_keys.push(set.user_keys[u].clone());
        train.push(current.train[u].iter().map(|&i| item_map[i]).collect());
        test.push(current.test[u].iter().map(|&i| item_map[i]).collect());
    }
    if user_keys.is_empty() || item_keys.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = InteractionSet {
        user_keys,
        item_keys,
        train,
        test,
    };
    rebalance_empty_train(&mut out);
    out.check_nonempty()?;
    Ok(out)
}

/// A user can lose every train positive during filtering while keeping test
/// ones; promote one back so each user stays trainable.
fn rebalance_empty_train(set: &mut InteractionSet) {
    for u in 0..set.n_users() {
        if set.train[u].is_empty() && !set.test[u].is_empty() {
            let item = set.test[u].remove(0);
            set.train[u].push(item);
        }
    }
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

/// Number of held-out positives for a user with `n` positives.
fn test_count(n: usize, train_fraction: f64) -> usize {
    let share = ((1.0 - train_fraction) * n as f64 + 1e-9).floor() as usize;
    share.min(n.saturating_sub(1))
}

/// Randomly splits each user's positives, keeping `train_fraction` for
/// training. Every user keeps at least one train positive.
pub fn split_train_test(
    set: &InteractionSet,
    train_fraction: f64,
    seed: u64,
) -> Result<InteractionSet> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut train = Vec::with_capacity(set.n_users());
    let mut test = Vec::with_capacity(set.n_users());
    for u in 0..set.n_users() {
        let mut all = set.positives(u);
        let mut rng = user_rng(seed, u);
        all.shuffle(&mut rng);
        let n_test = test_count(all.len(), train_fraction);
        let mut held: Vec<usize> = all.drain(..n_test).collect();
        held.sort_unstable();
        all.sort_unstable();
        train.push(all);
        test.push(held);
    }
    Ok(InteractionSet {
        user_keys: set.user_keys.clone(),
        item_keys: set.item_keys.clone(),
        train,
        test,
    })
}

/// A single (user, positive, negative) triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// One N-pair training tuple: a user, a train positive and its negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NPairTuple {
    pub user: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// N-pair tuples; triplet `t` is negative `t % n_neg` of tuple `t / n_neg`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    tuples: Vec<NPairTuple>,
    n_neg: usize,
}

impl TripletBatch {
    pub fn new(tuples: Vec<NPairTuple>, n_neg: usize) -> Result<Self> {
        if let Some(bad) = tuples.iter().find(|t| t.negatives.len() != n_neg) {
            return Err(Error::DimensionMismatch {
                left: bad.negatives.len(),
                right: n_neg,
            });
        }
        Ok(Self { tuples, n_neg })
    }

    pub fn empty(n_neg: usize) -> Self {
        Self {
            tuples: Vec::new(),
            n_neg,
        }
    }

    pub fn tuples(&self) -> &[NPairTuple] {
        &self.tuples
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg
    }

    /// Number of triplets.
    pub fn len(&self) -> usize {
        self.tuples.len() * self.n_neg
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triplet(&self, t: usize) -> Triplet {
        let tuple = &self.tuples[t / self.n_neg];
        Triplet {
            user: tuple.user,
            pos: tuple.positive,
            neg: tuple.negatives[t % self.n_neg],
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.tuples.iter().flat_map(|t| {
            t.negatives.iter().map(move |&neg| Triplet {
                user: t.user,
                pos: t.positive,
                neg,
            })
        })
    }

    /// Checks the sampling invariants against `set`.
    pub fn validate(&self, set: &InteractionSet) -> Result<()> {
        for t in &self.tuples {
            if t.user >= set.n_users() {
                return Err(Error::IndexOutOfRange {
                    index: t.user,
                    len: set.n_users(),
                });
            }
            if set.train(t.user).binary_search(&t.positive).is_err() {
                return Err(Error::InvalidParameter(format!(
                    "item {} is not a train positive of user {}",
                    t.positive, t.user
                )));
            }
            for (k, &j) in t.negatives.iter().enumerate() {
                if j >= set.n_items() || set.is_positive(t.user, j) {
                    return Err(Error::InvalidParameter(format!(
                        "item {j} is not a negative of user {}",
                        t.user
                    )));
                }
                if t.negatives[..k].contains(&j) {
                    return Err(Error::InvalidParameter(format!(
                        "duplicate negative {j} for user {}",
                        t.user
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Triplet ids grouped by the user and by the items they involve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletIndex {
    pub by_user: Vec<Vec<usize>>,
    /// An item's list holds the triplets where it is the positive or the
    /// negative, in ascending triplet order.
    pub by_item: Vec<Vec<usize>>,
}

impl TripletIndex {
    pub fn build(batch: &TripletBatch, n_users: usize, n_items: usize) -> Self {
        let mut by_user = vec![Vec::new(); n_users];
        let mut by_item = vec![Vec::new(); n_items];
        for (t, trip) in batch.triplets().enumerate() {
            by_user[trip.user].push(t);
            by_item[trip.pos].push(t);
            by_item[trip.neg].push(t);
        }
        Self { by_user, by_item }
    }
}

/// Draws `n_neg` distinct negatives, uniformly from the items that are
/// neither train nor test positives of `user`.
fn sample_negatives(
    positives: &[usize],
    n_items: usize,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let available = n_items - positives.len();
    if available >= 4 * n_neg {
        let mut out = Vec::with_capacity(n_neg);
        while out.len() < n_neg {
            let j = rng.random_range(0..n_items);
            if positives.binary_search(&j).is_err() && !out.contains(&j) {
                out.push(j);
            }
        }
        out
    } else {
        let pool: Vec<usize> = (0..n_items)
            .filter(|j| positives.binary_search(j).is_err())
            .collect();
        index::sample(rng, pool.len(), n_neg)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    }
}

/// Builds one tuple per (user, train positive) for the listed users, each
/// with `n_neg` negatives. Each user draws from its own seeded stream, so the
/// result does not depend on the order of `user_ids`.
pub fn sample_npair_batch(
    set: &InteractionSet,
    user_ids: &[usize],
    n_neg: usize,
    seed: u64,
) -> Result<TripletBatch> {
    if n_neg == 0 {
        return Err(Error::InvalidParameter("n_neg must be >= 1".into()));
    }
    let mut tuples = Vec::new();
    for &u in user_ids {
        if u >= set.n_users() {
            return Err(Error::IndexOutOfRange {
                index: u,
                len: set.n_users(),
            });
        }
        let positives = set.positives(u);
        let available = set.n_items() - positives.len();
        if available < n_neg {
            return Err(Error::Sampling {
                user: u,
                available,
                requested: n_neg,
            });
        }
        let mut rng = user_rng(seed, u);
        for &i in set.train(u) {
            tuples.push(NPairTuple {
                user: u,
                positive: i,
                negatives: sample_negatives(&positives, set.n_items(), n_neg, &mut rng),
            });
        }
    }
    TripletBatch::new(tuples, n_neg)
}

/// Samples a batch over every user.
pub fn sample_full_batch(set: &InteractionSet, n_neg: usize, seed: u64) -> Result<TripletBatch> {
    let users: Vec<usize> = (0..set.n_users()).collect();
    sample_npair_batch(set, &users, n_neg, seed)
}
