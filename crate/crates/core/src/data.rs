//! Synthetic datasets and every split used by the pre-training and downstream
//! pipelines.
//!
//! Each sample carries a `sample_id` inherited from the dataset it was generated
//! in, so conservation (disjoint parts, exact coverage) can be checked on any
//! split output.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution as _, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};
use crate::model::Batch;
use crate::rng::{derive_seed, rng_from_seed, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    sample_ids: Vec<usize>,
}

impl LabeledDataset {
    /// Builds a dataset whose sample ids are `0..n`.
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(features, labels, ids, dim)
    }

    pub fn with_ids(
        features: Vec<f64>,
        labels: Vec<usize>,
        sample_ids: Vec<usize>,
        dim: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        check_len(labels.len() * dim, features.len())?;
        check_len(labels.len(), sample_ids.len())?;
        Ok(Self {
            dim,
            features,
            labels,
            sample_ids,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
            sample_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Distinct labels present, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Number of samples per label, indexed by label value.
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &y in &self.labels {
            if y < n_classes {
                counts[y] += 1;
            }
        }
        counts
    }

    pub fn batch(&self) -> Result<Batch<'_>> {
        Batch::new(&self.features, &self.labels, self.dim)
    }

    /// New dataset holding the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut sample_ids = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            sample_ids.push(self.sample_ids[i]);
        }
        LabeledDataset {
            dim: self.dim,
            features,
            labels,
            sample_ids,
        }
    }

    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let dim = parts
            .first()
            .map(|p| p.dim)
            .ok_or_else(|| invalid("cannot concatenate zero datasets"))?;
        let mut out = LabeledDataset::empty(dim);
        for part in parts {
            check_len(dim, part.dim)?;
            out.features.extend_from_slice(&part.features);
            out.labels.extend_from_slice(&part.labels);
            out.sample_ids.extend_from_slice(&part.sample_ids);
        }
        Ok(out)
    }

    /// Relabels every sample through `map` (indexed by old label).
    pub fn remap_labels(&self, map: &[Option<usize>]) -> Result<LabeledDataset> {
        let labels = self
            .labels
            .iter()
            .map(|&y| {
                map.get(y)
                    .copied()
                    .flatten()
                    .ok_or_else(|| invalid(format!("label {y} has no mapping")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            labels,
            ..self.clone()
        })
    }

    /// Writes `f0,..,f{dim-1},label` with one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|d| format!("f{d}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{}", self.labels[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    pub pretrain: LabeledDataset,
    pub downstream: LabeledDataset,
}

/// One client's data with a fixed support/query (or train/test) index split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub data: LabeledDataset,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl ClientShard {
    pub fn support_set(&self) -> LabeledDataset {
        self.data.subset(&self.support)
    }

    pub fn query_set(&self) -> LabeledDataset {
        self.data.subset(&self.query)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientShard>,
    pub server_data: LabeledDataset,
}

/// How samples are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    Iid,
    Dirichlet { alpha: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(invalid("dirichlet alpha must be a positive finite number"))
            }
            _ => Ok(()),
        }
    }
}

impl FederatedDataset {
    /// Server/client split, then client partitioning, then per-client
    /// support/query split. Every client ends up with at least two samples.
    pub fn build(
        pool: &LabeledDataset,
        n_clients: usize,
        distribution: Distribution,
        support_frac: f64,
        server_frac: f64,
        seed: u64,
    ) -> Result<Self> {
        let (client_pool, server_data) =
            server_client_split(pool, server_frac, derive_seed(seed, &[1]))?;
        let parts = partition_clients(
            &client_pool,
            n_clients,
            distribution,
            2,
            derive_seed(seed, &[2]),
        )?;
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(id, part)| {
                support_query_split(part, support_frac, derive_seed(seed, &[3, id as u64]), id)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clients,
            server_data,
        })
    }

    pub fn client_datasets(&self) -> Vec<LabeledDataset> {
        self.clients.iter().map(|c| c.data.clone()).collect()
    }
}

fn shuffled_indices(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Deterministic unit direction for class `c`: the `c`-th basis vector while
/// `c < dim`, otherwise a fixed pseudo-random direction.
pub fn class_direction(c: usize, dim: usize) -> Vec<f64> {
    if c < dim {
        let mut u = vec![0.0; dim];
        u[c] = 1.0;
        return u;
    }
    let mut rng = rng_from_seed(derive_seed(0x5EED_C1A5, &[c as u64, dim as u64]));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Isotropic unit-variance Gaussian mixture; class `c` is centred at
/// `separation * class_direction(c)`. Samples are ordered class by class.
pub fn synth_dataset(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes < 2 || n_per_class == 0 || dim == 0 {
        return Err(invalid(
            "synth_dataset needs n_classes >= 2, n_per_class >= 1, dim >= 1",
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(invalid("separation must be a non-negative finite number"));
    }
    let mut rng = rng_from_seed(seed);
    let n = n_classes * n_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        let centre = class_direction(c, dim);
        for _ in 0..n_per_class {
            for &u in &centre {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(separation * u + noise);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, dim)
}

fn indices_of_classes(ds: &LabeledDataset, classes: &BTreeSet<usize>) -> Vec<usize> {
    (0..ds.len())
        .filter(|&i| classes.contains(&ds.labels[i]))
        .collect()
}

/// Class-disjoint split: a random subset of `n_pretrain_classes` classes goes
/// to pre-training and the rest to the downstream pool.
pub fn split_classes(
    ds: &LabeledDataset,
    n_pretrain_classes: usize,
    seed: u64,
) -> Result<ClassSplit> {
    split_classes_with_overlap(ds, n_pretrain_classes, 0, seed)
}

/// Like [`split_classes`], but `overlap` of the pre-training classes also
/// appear downstream. Samples of an overlapping class are shuffled and halved
/// between the two sides, so sample counts are still conserved.
pub fn split_classes_with_overlap(
    ds: &LabeledDataset,
    n_pretrain_classes: usize,
    overlap: usize,
    seed: u64,
) -> Result<ClassSplit> {
    let classes = ds.class_ids();
    if n_pretrain_classes == 0 || n_pretrain_classes >= classes.len() {
        return Err(invalid(format!(
            "pretrain class count {n_pretrain_classes} must lie in [1, {})",
            classes.len()
        )));
    }
    if overlap > n_pretrain_classes {
        return Err(invalid(format!(
            "overlap {overlap} exceeds pretrain class count {n_pretrain_classes}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut order = classes.clone();
    order.shuffle(&mut rng);
    let pretrain_classes: BTreeSet<usize> = order[..n_pretrain_classes].iter().copied().collect();
    let shared: BTreeSet<usize> = order[..overlap].iter().copied().collect();

    let mut pre_idx = Vec::new();
    let mut down_idx = Vec::new();
    for &c in &classes {
        let members = indices_of_classes(ds, &BTreeSet::from([c]));
        if shared.contains(&c) {
            let mut members = members;
            members.shuffle(&mut rng);
            let half = members.len() / 2;
            pre_idx.extend_from_slice(&members[half..]);
            down_idx.extend_from_slice(&members[..half]);
        } else if pretrain_classes.contains(&c) {
            pre_idx.extend(members);
        } else {
            down_idx.extend(members);
        }
    }
    pre_idx.sort_unstable();
    down_idx.sort_unstable();
    Ok(ClassSplit {
        pretrain: ds.subset(&pre_idx),
        downstream: ds.subset(&down_idx),
    })
}

/// Uniform sample-level split; the server receives `round(server_frac * n)` samples.
pub fn server_client_split(
    ds: &LabeledDataset,
    server_frac: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&server_frac) {
        return Err(invalid(format!(
            "server_frac {server_frac} must lie in [0, 1)"
        )));
    }
    let n_server = (server_frac * ds.len() as f64).round() as usize;
    let mut rng = rng_from_seed(seed);
    let idx = shuffled_indices(ds.len(), &mut rng);
    let mut server: Vec<usize> = idx[..n_server].to_vec();
    let mut clients: Vec<usize> = idx[n_server..].to_vec();
    server.sort_unstable();
    clients.sort_unstable();
    Ok((ds.subset(&clients), ds.subset(&server)))
}

fn dirichlet_proportions(alpha: f64, k: usize, rng: &mut StreamRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: fall back to uniform
        vec![1.0 / k as f64; k]
    }
}

/// Integer counts summing to `n` from real proportions, by largest remainder.
/// Ties go to the lower index.
pub fn largest_remainder(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    // proportions summing above one by rounding can overshoot n
    while assigned > n {
        let k = (0..counts.len())
            .max_by_key(|&k| counts[k])
            .expect("non-empty");
        counts[k] -= 1;
        assigned -= 1;
    }
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Moves samples from the largest client into any client holding fewer than
/// `min_size` samples, one at a time.
fn repair_small_clients(assignment: &mut [Vec<usize>], min_size: usize) -> Result<()> {
    while let Some(small) = assignment.iter().position(|a| a.len() < min_size) {
        let donor = (0..assignment.len())
            .max_by(|&a, &b| {
                assignment[a]
                    .len()
                    .cmp(&assignment[b].len())
                    .then(b.cmp(&a))
            })
            .expect("at least one client");
        if assignment[donor].len() <= min_size {
            return Err(invalid(
                "not enough samples to give every client its minimum",
            ));
        }
        let moved = assignment[donor].pop().expect("donor non-empty");
        assignment[small].push(moved);
    }
    Ok(())
}

fn dirichlet_assignment(
    ds: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    min_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(invalid("n_clients must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha must be a positive finite number"));
    }
    if n_clients * min_size > ds.len() {
        return Err(invalid(format!(
            "{n_clients} clients need at least {} samples, dataset has {}",
            n_clients * min_size,
            ds.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut assignment = vec![Vec::new(); n_clients];
    for c in ds.class_ids() {
        let mut members = indices_of_classes(ds, &BTreeSet::from([c]));
        members.shuffle(&mut rng);
        let props = dirichlet_proportions(alpha, n_clients, &mut rng);
        let counts = largest_remainder(&props, members.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    repair_small_clients(&mut assignment, min_size)?;
    Ok(assignment)
}

/// Per-class Dirichlet(alpha) allocation over `n_clients`. Empty clients are
/// repaired by taking one sample at a time from the largest client.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let assignment = dirichlet_assignment(ds, n_clients, alpha, 1, seed)?;
    Ok(assignment.iter().map(|idx| ds.subset(idx)).collect())
}

/// Client partition under `distribution`, guaranteeing `min_size` samples per client.
pub fn partition_clients(
    ds: &LabeledDataset,
    n_clients: usize,
    distribution: Distribution,
    min_size: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    match distribution {
        Distribution::Iid => {
            if n_clients * min_size > ds.len() {
                return Err(invalid(format!(
                    "{n_clients} clients need at least {} samples, dataset has {}",
                    n_clients * min_size,
                    ds.len()
                )));
            }
            partition_equal(ds, n_clients, seed)
        }
        Distribution::Dirichlet { alpha } => {
            let assignment = dirichlet_assignment(ds, n_clients, alpha, min_size, seed)?;
            Ok(assignment.iter().map(|idx| ds.subset(idx)).collect())
        }
    }
}

/// Random support/query split with `|support| = round(support_frac * n)`,
/// clamped so both sides are non-empty.
pub fn support_query_split(
    data: LabeledDataset,
    support_frac: f64,
    seed: u64,
    client_id: usize,
) -> Result<ClientShard> {
    if !(support_frac > 0.0 && support_frac < 1.0) {
        return Err(invalid(format!(
            "support_frac {support_frac} must lie in (0, 1)"
        )));
    }
    let n = data.len();
    if n < 2 {
        return Err(invalid(format!(
            "client {client_id} has {n} samples; a support/query split needs at least 2"
        )));
    }
    let n_support = ((support_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = rng_from_seed(seed);
    let idx = shuffled_indices(n, &mut rng);
    let mut support = idx[..n_support].to_vec();
    let mut query = idx[n_support..].to_vec();
    support.sort_unstable();
    query.sort_unstable();
    Ok(ClientShard {
        client_id,
        data,
        support,
        query,
    })
}

/// Shuffle, then deal round-robin into `m` parts whose sizes differ by at most one.
pub fn partition_equal(ds: &LabeledDataset, m: usize, seed: u64) -> Result<Vec<LabeledDataset>> {
    if m == 0 || ds.len() < m {
        return Err(invalid(format!(
            "cannot split {} samples into {m} non-empty parts",
            ds.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let idx = shuffled_indices(ds.len(), &mut rng);
    let mut parts = vec![Vec::new(); m];
    for (k, i) in idx.into_iter().enumerate() {
        parts[k % m].push(i);
    }
    Ok(parts.iter().map(|p| ds.subset(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(parts: &[LabeledDataset]) -> Vec<usize> {
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.sample_ids().to_vec()).collect();
        all.sort_unstable();
        all
    }

    fn toy(n_classes: usize, per_class: usize) -> LabeledDataset {
        synth_dataset(n_classes, per_class, 3, 2.0, 11).unwrap()
    }

    #[test]
    fn synth_counts_and_classes() {
        let ds = synth_dataset(8, 120, 4, 1.0, 3).unwrap();
        assert_eq!(ds.len(), 960);
        assert_eq!(ds.class_ids(), (0..8).collect::<Vec<_>>());
        assert_eq!(ds, synth_dataset(8, 120, 4, 1.0, 3).unwrap());
        assert!(synth_dataset(1, 10, 2, 1.0, 0).is_err());
        assert!(synth_dataset(2, 0, 2, 1.0, 0).is_err());
        assert!(synth_dataset(2, 10, 0, 1.0, 0).is_err());
    }

    #[test]
    fn zero_separation_centres_at_origin() {
        let per_class = 400;
        let ds = synth_dataset(3, per_class, 5, 0.0, 7).unwrap();
        for c in 0..3 {
            let mut mean = [0.0; 5];
            for i in (0..ds.len()).filter(|&i| ds.labels()[i] == c) {
                for (m, v) in mean.iter_mut().zip(ds.row(i)) {
                    *m += v / per_class as f64;
                }
            }
            let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
            assert!(
                norm < 3.0 / (per_class as f64).sqrt(),
                "class {c} mean norm {norm}"
            );
        }
    }

    #[test]
    fn class_directions_are_unit() {
        for c in 0..6 {
            let u = class_direction(c, 4);
            assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_split_partitions_classes() {
        let ds = toy(10, 20);
        let split = split_classes(&ds, 8, 1).unwrap();
        let pre: BTreeSet<_> = split.pretrain.class_ids().into_iter().collect();
        let down: BTreeSet<_> = split.downstream.class_ids().into_iter().collect();
        assert_eq!(down.len(), 2);
        assert!(pre.is_disjoint(&down));
        assert_eq!(split.pretrain.len() + split.downstream.len(), ds.len());
        assert_eq!(
            ids(&[split.pretrain, split.downstream]),
            (0..ds.len()).collect::<Vec<_>>()
        );

        let single = split_classes(&ds, 9, 2).unwrap();
        assert_eq!(single.downstream.class_ids().len(), 1);
        assert!(split_classes(&ds, 10, 0).is_err());
        assert!(split_classes(&ds, 0, 0).is_err());
    }

    #[test]
    fn overlap_split_shares_classes_and_conserves() {
        let ds = toy(6, 20);
        let split = split_classes_with_overlap(&ds, 4, 2, 5).unwrap();
        let pre: BTreeSet<_> = split.pretrain.class_ids().into_iter().collect();
        let down: BTreeSet<_> = split.downstream.class_ids().into_iter().collect();
        assert_eq!(pre.intersection(&down).count(), 2);
        assert_eq!(down.len(), 4);
        assert_eq!(
            ids(&[split.pretrain, split.downstream]),
            (0..ds.len()).collect::<Vec<_>>()
        );
        assert!(split_classes_with_overlap(&ds, 2, 3, 0).is_err());
    }

    #[test]
    fn server_split_sizes() {
        let ds = synth_dataset(10, 100, 2, 1.0, 0).unwrap();
        let (clients, server) = server_client_split(&ds, 0.05, 4).unwrap();
        assert_eq!(server.len(), 50);
        assert_eq!(clients.len(), 950);
        assert_eq!(ids(&[clients, server]), (0..1000).collect::<Vec<_>>());
        let (all, none) = server_client_split(&ds, 0.0, 4).unwrap();
        assert!(none.is_empty());
        assert_eq!(all.len(), 1000);
        assert!(server_client_split(&ds, 1.0, 4).is_err());
    }

    #[test]
    fn dirichlet_single_client_gets_everything() {
        let ds = toy(4, 25);
        let parts = dirichlet_partition(&ds, 1, 0.5, 3).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), ds.len());
    }

    #[test]
    fn dirichlet_conserves_and_fills_every_client() {
        let ds = toy(5, 20);
        for seed in 0..10 {
            let parts = dirichlet_partition(&ds, 30, 0.1, seed).unwrap();
            assert!(parts.iter().all(|p| !p.is_empty()));
            assert_eq!(ids(&parts), (0..ds.len()).collect::<Vec<_>>());
        }
        assert!(dirichlet_partition(&ds, 101, 0.5, 0).is_err());
        assert!(dirichlet_partition(&ds, 3, 0.0, 0).is_err());
    }

    #[test]
    fn dirichlet_half_is_heterogeneous() {
        let ds = toy(8, 60);
        let skewed = (0..5).any(|seed| {
            dirichlet_partition(&ds, 10, 0.5, seed)
                .unwrap()
                .iter()
                .any(|p| {
                    let counts = p.class_counts(8);
                    *counts.iter().max().unwrap() as f64 / p.len() as f64 > 0.5
                })
        });
        assert!(skewed);
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[0.34, 0.33, 0.33], 2), vec![1, 1, 0]);
    }

    #[test]
    fn support_query_sizes() {
        let ds = toy(2, 5);
        let shard = support_query_split(ds.clone(), 0.8, 1, 0).unwrap();
        assert_eq!((shard.support.len(), shard.query.len()), (8, 2));
        let mut all: Vec<usize> = shard.support.iter().chain(&shard.query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let pair = ds.subset(&[0, 1]);
        let clamped = support_query_split(pair, 0.99, 1, 0).unwrap();
        assert_eq!((clamped.support.len(), clamped.query.len()), (1, 1));
        assert!(support_query_split(ds.subset(&[0]), 0.8, 1, 0).is_err());
        assert!(support_query_split(ds, 1.0, 1, 0).is_err());
    }

    #[test]
    fn partition_equal_sizes() {
        let ds = synth_dataset(5, 10, 2, 1.0, 0).unwrap();
        let parts = partition_equal(&ds, 20, 9).unwrap();
        let mut sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [vec![2; 10], vec![3; 10]].concat());
        assert_eq!(ids(&parts), (0..50).collect::<Vec<_>>());
        let one = partition_equal(&ds, 1, 9).unwrap();
        assert_eq!(one[0].len(), 50);
        assert!(partition_equal(&ds, 51, 0).is_err());
    }

    #[test]
    fn different_seeds_shuffle_differently() {
        let ds = synth_dataset(4, 50, 2, 1.0, 0).unwrap();
        let a = partition_equal(&ds, 4, 1).unwrap();
        let b = partition_equal(&ds, 4, 2).unwrap();
        assert_ne!(a, b);
        let (_, s1) = server_client_split(&ds, 0.1, 1).unwrap();
        let (_, s2) = server_client_split(&ds, 0.1, 2).unwrap();
        assert_ne!(s1.sample_ids(), s2.sample_ids());
    }

    #[test]
    fn federated_build_covers_pool() {
        let ds = toy(4, 50);
        let fed =
            FederatedDataset::build(&ds, 6, Distribution::Dirichlet { alpha: 0.5 }, 0.8, 0.05, 3)
                .unwrap();
        assert_eq!(fed.clients.len(), 6);
        assert_eq!(fed.server_data.len(), 10);
        let mut parts = fed.client_datasets();
        parts.push(fed.server_data.clone());
        assert_eq!(ids(&parts), (0..ds.len()).collect::<Vec<_>>());
        assert!(fed
            .clients
            .iter()
            .all(|c| !c.support.is_empty() && !c.query.is_empty()));
    }

    #[test]
    fn csv_layout() {
        let ds = LabeledDataset::new(vec![1.5, -2.0], vec![1], 2).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "f0,f1,label\n1.5,-2,1\n");
    }
}
