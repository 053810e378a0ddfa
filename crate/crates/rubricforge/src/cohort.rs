//! Diverse, label-balanced cohort construction: label-stratified k-means in
//! embedding space with per-cluster medoid selection.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Record, RecordKey};
use crate::embeddings::EmbeddingStore;
use crate::par;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("empty input")]
    EmptyInput,
    #[error("stratum for label={0} is empty")]
    SingleClassStratum(bool),
    #[error("no embedding for patient_id={0}")]
    MissingEmbedding(i64),
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

/// Result of one Lloyd run: centroids, per-point assignment, final inertia,
/// and the inertia recorded after every assignment step.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortMember {
    pub patient_id: i64,
    pub prediction_time: String,
    pub label: bool,
    pub cluster: usize,
}

impl CohortMember {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            patient_id: self.patient_id,
            prediction_time: self.prediction_time.clone(),
        }
    }
}

/// Medoid cohort: positives first (by cluster index), then negatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    pub members: Vec<CohortMember>,
    pub k_per_stratum: usize,
}

impl Cohort {
    pub fn positives(&self) -> impl Iterator<Item = &CohortMember> {
        self.members.iter().filter(|m| m.label)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &CohortMember> {
        self.members.iter().filter(|m| !m.label)
    }

    pub fn is_balanced(&self) -> bool {
        self.positives().count() == self.negatives().count()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..points.len());
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; any pick works.
            rng.gen_range(0..points.len())
        } else {
            WeightedIndex::new(d2.iter().map(|&w| w.max(0.0)))
                .map(|dist| dist.sample(rng))
                .unwrap_or(0)
        };
        centroids.push(points[next].clone());
        let added = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, added);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ initialization. Terminates when the
/// maximum centroid displacement drops below `tol` or after `max_iter`
/// iterations. `k` is clamped to the number of distinct points. Empty
/// clusters are reseeded at the point farthest from its assigned centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterAssignment, CohortError> {
    if points.is_empty() {
        return Err(CohortError::EmptyInput);
    }
    if k == 0 || max_iter == 0 || tol <= 0.0 {
        return Err(CohortError::PreconditionViolation(
            "k, max_iter, tol must be positive".into(),
        ));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(CohortError::PreconditionViolation(
            "points have mixed dimensions".into(),
        ));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| *q == p) {
            distinct.push(p);
        }
    }
    let k = k.min(distinct.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assignment = vec![0usize; points.len()];
    let mut inertia_history = Vec::new();
    let mut inertia = f64::INFINITY;

    for _ in 0..max_iter {
        // Assignment step; nearest centroid, ties to the lowest index.
        let assigned: Vec<(usize, f64)> = par::map_slice(points, |p| {
            let mut best = (0usize, f64::INFINITY);
            for (ci, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (ci, d);
                }
            }
            best
        });
        inertia = assigned.iter().map(|&(_, d)| d).sum();
        for (i, &(ci, _)) in assigned.iter().enumerate() {
            assignment[i] = ci;
        }
        inertia_history.push(inertia);

        // Update step.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut new_centroids = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for v in sums[c].iter_mut() {
                    *v /= counts[c] as f64;
                }
                shift = shift.max(sq_dist(&sums[c], &centroids[c]).sqrt());
                new_centroids[c] = std::mem::take(&mut sums[c]);
            } else {
                // Reseed the empty centroid at the worst-served point.
                let far = assigned
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                    .map(|(i, _)| i)
                    .unwrap();
                shift = f64::INFINITY;
                new_centroids[c] = points[far].clone();
            }
        }
        centroids = new_centroids;
        if shift < tol {
            break;
        }
    }

    // Final assignment against the converged centroids.
    let assigned: Vec<(usize, f64)> = par::map_slice(points, |p| {
        let mut best = (0usize, f64::INFINITY);
        for (ci, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (ci, d);
            }
        }
        best
    });
    let final_inertia: f64 = assigned.iter().map(|&(_, d)| d).sum();
    if final_inertia <= inertia {
        inertia = final_inertia;
        for (i, &(ci, _)) in assigned.iter().enumerate() {
            assignment[i] = ci;
        }
        inertia_history.push(inertia);
    }

    Ok(ClusterAssignment {
        centroids,
        assignment,
        inertia,
        inertia_history,
    })
}

fn stratum_medoids(
    members: &[(&Record, Vec<f64>)],
    k: usize,
    seed: u64,
) -> Result<Vec<(RecordKey, usize)>, CohortError> {
    let points: Vec<Vec<f64>> = members.iter().map(|(_, v)| v.clone()).collect();
    let k = k.min(members.len());
    let clustering = kmeans(&points, k, seed, 300, 1e-6)?;
    let n_clusters = clustering.centroids.len();
    let mut medoids = Vec::with_capacity(n_clusters);
    for cluster in 0..n_clusters {
        let mut best: Option<(f64, RecordKey)> = None;
        for (i, (record, vector)) in members.iter().enumerate() {
            if clustering.assignment[i] != cluster {
                continue;
            }
            let d = sq_dist(vector, &clustering.centroids[cluster]);
            let key = record.key();
            let better = match &best {
                None => true,
                Some((bd, bk)) => {
                    d < *bd || (d == *bd && (key.patient_id, &key.prediction_time) < (bk.patient_id, &bk.prediction_time))
                }
            };
            if better {
                best = Some((d, key));
            }
        }
        if let Some((_, key)) = best {
            medoids.push((key, cluster));
        }
    }
    Ok(medoids)
}

/// Clusters each label stratum independently and selects the member closest
/// to each cluster centroid. Strata smaller than `k_per_stratum` are clamped
/// to their size. Output order: positives by cluster index, then negatives.
pub fn select_medoid_cohort(
    records: &[Record],
    store: &EmbeddingStore,
    k_per_stratum: usize,
    seed: u64,
) -> Result<Cohort, CohortError> {
    if records.is_empty() {
        return Err(CohortError::EmptyInput);
    }
    if k_per_stratum == 0 {
        return Err(CohortError::PreconditionViolation(
            "k_per_stratum must be >= 1".into(),
        ));
    }
    let mut strata: [Vec<(&Record, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
    let mut sorted: Vec<&Record> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.patient_id, &a.prediction_time).cmp(&(b.patient_id, &b.prediction_time))
    });
    for r in sorted {
        let v = store
            .get(&r.key())
            .ok_or(CohortError::MissingEmbedding(r.patient_id))?;
        strata[r.label as usize].push((r, v.values.clone()));
    }
    if strata[1].is_empty() {
        return Err(CohortError::SingleClassStratum(true));
    }
    if strata[0].is_empty() {
        return Err(CohortError::SingleClassStratum(false));
    }

    let pos = stratum_medoids(&strata[1], k_per_stratum, seed ^ 0x706f73)?;
    let neg = stratum_medoids(&strata[0], k_per_stratum, seed ^ 0x6e6567)?;

    let mut members = Vec::with_capacity(pos.len() + neg.len());
    for (key, cluster) in pos {
        members.push(CohortMember {
            patient_id: key.patient_id,
            prediction_time: key.prediction_time,
            label: true,
            cluster,
        });
    }
    for (key, cluster) in neg {
        members.push(CohortMember {
            patient_id: key.patient_id,
            prediction_time: key.prediction_time,
            label: false,
            cluster,
        });
    }
    Ok(Cohort {
        members,
        k_per_stratum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Split, TaskCategory, TaskSpec};
    use crate::embeddings::embed_split;
    use crate::gateway::ProviderConfig;
    use rand::Rng;
    use std::collections::BTreeMap;
    use std::collections::BTreeSet;

    #[test]
    fn k1_centroid_is_mean() {
        let points = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let out = kmeans(&points, 1, 0, 300, 1e-9).unwrap();
        assert!((out.centroids[0][0] - 1.0).abs() < 1e-9);
        assert!((out.centroids[0][1] - 1.0).abs() < 1e-9);
        let expected: f64 = points.iter().map(|p| sq_dist(p, &out.centroids[0])).sum();
        assert!((out.inertia - expected).abs() < 1e-9);
    }

    #[test]
    fn two_separated_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..30 {
            points.push(vec![rng.gen::<f64>() * 0.1, rng.gen::<f64>() * 0.1]);
            truth.push(0);
        }
        for _ in 0..30 {
            points.push(vec![10.0 + rng.gen::<f64>() * 0.1, 10.0 + rng.gen::<f64>() * 0.1]);
            truth.push(1);
        }
        let out = kmeans(&points, 2, 3, 300, 1e-9).unwrap();
        let first = out.assignment[0];
        for (a, t) in out.assignment.iter().zip(&truth) {
            let expected = if *t == 0 { first } else { 1 - first };
            assert_eq!(*a, expected);
        }
    }

    #[test]
    fn n_equals_k_zero_inertia() {
        let points = vec![vec![0.0], vec![1.0], vec![2.0], vec![5.0]];
        let out = kmeans(&points, 4, 1, 300, 1e-9).unwrap();
        assert!(out.inertia < 1e-12);
        let set: BTreeSet<usize> = out.assignment.iter().copied().collect();
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn lloyd_inertia_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let points: Vec<Vec<f64>> = (0..80)
                .map(|_| (0..5).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let out = kmeans(&points, 6, trial, 300, 1e-9).unwrap();
            for w in out.inertia_history.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "inertia increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn k_clamped_to_distinct() {
        let points = vec![vec![1.0], vec![1.0], vec![2.0]];
        let out = kmeans(&points, 10, 0, 300, 1e-9).unwrap();
        assert_eq!(out.centroids.len(), 2);
    }

    fn mk_record(pid: i64, label: bool) -> Record {
        Record {
            patient_id: pid,
            prediction_time: "2021-01-01T00:00:00".into(),
            task: "t".into(),
            split: Split::Train,
            label,
            serialization: format!("serialization {pid}"),
        }
    }

    fn store_from_texts(records: &[Record], texts: &BTreeMap<crate::datamodel::RecordKey, String>) -> EmbeddingStore {
        let task = TaskSpec::new("t", "q?", TaskCategory::LabResult);
        embed_split(records, texts, &task, &ProviderConfig::mock("e"), 64).unwrap()
    }

    #[test]
    fn medoid_cohort_k1() {
        let mut records = Vec::new();
        let mut texts = BTreeMap::new();
        for i in 0..6 {
            let r = mk_record(i, i < 3);
            texts.insert(r.key(), format!("text {i} body filler"));
            records.push(r);
        }
        let store = store_from_texts(&records, &texts);
        let cohort = select_medoid_cohort(&records, &store, 1, 0).unwrap();
        assert_eq!(cohort.members.len(), 2);
        assert!(cohort.is_balanced());
    }

    #[test]
    fn clamp_small_stratum() {
        let mut records = Vec::new();
        let mut texts = BTreeMap::new();
        for i in 0..5 {
            let r = mk_record(i, true);
            texts.insert(r.key(), format!("pos {i} alpha beta"));
            records.push(r);
        }
        for i in 5..30 {
            let r = mk_record(i, false);
            texts.insert(r.key(), format!("neg {i} gamma delta"));
            records.push(r);
        }
        let store = store_from_texts(&records, &texts);
        let cohort = select_medoid_cohort(&records, &store, 20, 0).unwrap();
        assert_eq!(cohort.positives().count(), 5);
        assert_eq!(cohort.negatives().count(), 20);
    }

    #[test]
    fn single_class_stratum_error() {
        let mut records = Vec::new();
        let mut texts = BTreeMap::new();
        for i in 0..4 {
            let r = mk_record(i, true);
            texts.insert(r.key(), format!("text {i}"));
            records.push(r);
        }
        let store = store_from_texts(&records, &texts);
        assert!(matches!(
            select_medoid_cohort(&records, &store, 2, 0),
            Err(CohortError::SingleClassStratum(false))
        ));
    }

    #[test]
    fn cohort_deterministic() {
        let mut records = Vec::new();
        let mut texts = BTreeMap::new();
        for i in 0..40 {
            let r = mk_record(i, i % 2 == 0);
            texts.insert(r.key(), format!("body {i} {}", i * 31 % 17));
            records.push(r);
        }
        let store = store_from_texts(&records, &texts);
        let a = select_medoid_cohort(&records, &store, 5, 9).unwrap();
        let b = select_medoid_cohort(&records, &store, 5, 9).unwrap();
        assert_eq!(a.members, b.members);
    }

    #[test]
    fn medoids_are_members_of_their_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let out = kmeans(&points, 5, 1, 300, 1e-9).unwrap();
        for cluster in 0..out.centroids.len() {
            let medoid = (0..points.len())
                .filter(|&i| out.assignment[i] == cluster)
                .min_by(|&a, &b| {
                    sq_dist(&points[a], &out.centroids[cluster])
                        .total_cmp(&sq_dist(&points[b], &out.centroids[cluster]))
                });
            if let Some(m) = medoid {
                assert_eq!(out.assignment[m], cluster);
            }
        }
    }
}
