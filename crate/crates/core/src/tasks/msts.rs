//! Most-similar-trajectory search: query/database construction and
//! dot-product ranking.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{rank_of, retrieval_report, RetrievalReport};
use crate::error::{Error, Result};
use crate::geo::Trajectory;

#[derive(Debug, Clone)]
pub struct MstsSets {
    pub queries: Vec<Trajectory>,
    /// Distractors and the downsampled query variants, shuffled.
    pub database: Vec<Trajectory>,
    /// Database index of each query's variant.
    pub truth: Vec<usize>,
}

/// Drop every interior point independently with probability `drop_ratio`.
pub fn downsample<R: Rng>(traj: &Trajectory, drop_ratio: f64, rng: &mut R) -> Trajectory {
    let n = traj.points.len();
    let points = traj
        .points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i == 0 || i + 1 == n || rng.random::<f64>() >= drop_ratio)
        .map(|(_, p)| *p)
        .collect();
    Trajectory {
        id: traj.id.clone(),
        points,
        label: traj.label,
    }
}

/// Sample `n_query` queries and `n_db` distractors without overlap from
/// the trajectories with at least three points.
pub fn build_msts_sets(corpus: &[Trajectory], n_query: usize, n_db: usize, drop_ratio: f64, seed: u64) -> Result<MstsSets> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::Config(format!("drop ratio must lie in [0, 1), got {drop_ratio}")));
    }
    let eligible: Vec<&Trajectory> = corpus.iter().filter(|t| t.points.len() >= 3).collect();
    if n_query == 0 || eligible.len() < n_query + n_db {
        return Err(Error::InsufficientData(format!(
            "search sets need {} trajectories with at least 3 points ({n_query} queries, {n_db} distractors), corpus has {}",
            n_query + n_db,
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, eligible.len(), n_query + n_db).into_vec();
    let queries: Vec<Trajectory> = picked[..n_query].iter().map(|&i| eligible[i].clone()).collect();
    let mut entries: Vec<(Trajectory, Option<usize>)> =
        picked[n_query..].iter().map(|&i| (eligible[i].clone(), None)).collect();
    for (q, query) in queries.iter().enumerate() {
        entries.push((downsample(query, drop_ratio, &mut rng), Some(q)));
    }
    entries.shuffle(&mut rng);
    let mut truth = vec![0; n_query];
    for (i, (_, q)) in entries.iter().enumerate() {
        if let Some(q) = q {
            truth[*q] = i;
        }
    }
    Ok(MstsSets {
        queries,
        database: entries.into_iter().map(|(t, _)| t).collect(),
        truth,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank of each query's true match among the database by descending dot
/// product.
pub fn msts_ranks(queries: &[Vec<f64>], database: &[Vec<f64>], truth: &[usize]) -> Result<Vec<usize>> {
    if queries.len() != truth.len() {
        return Err(Error::Eval(format!("{} queries but {} ground-truth entries", queries.len(), truth.len())));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= database.len()) {
        return Err(Error::Eval(format!("ground truth {t} outside database of {}", database.len())));
    }
    Ok(queries
        .par_iter()
        .zip(truth)
        .map(|(q, &t)| {
            let scores: Vec<f64> = database.iter().map(|v| dot(q, v)).collect();
            rank_of(&scores, t)
        })
        .collect())
}

pub fn eval_msts(queries: &[Vec<f64>], database: &[Vec<f64>], truth: &[usize]) -> Result<RetrievalReport> {
    retrieval_report(&msts_ranks(queries, database, truth)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GpsPoint;

    fn line(id: usize, n: usize) -> Trajectory {
        let points = (0..n)
            .map(|i| GpsPoint::new(8.6 + 0.001 * i as f64, 41.1 + 0.0001 * id as f64, 1000 + 10 * i as i64))
            .collect();
        Trajectory::new(format!("t{id}"), points, None).unwrap()
    }

    fn corpus(n: usize) -> Vec<Trajectory> {
        (0..n).map(|i| line(i, 5 + i % 7)).collect()
    }

    #[test]
    fn sets_are_disjoint_and_consistent() {
        let c = corpus(60);
        let s = build_msts_sets(&c, 10, 30, 0.3, 4).unwrap();
        assert_eq!(s.database.len(), 40);
        for (q, &t) in s.queries.iter().zip(&s.truth) {
            let v = &s.database[t];
            assert_eq!(v.id, q.id);
            assert_eq!(v.points.first(), q.points.first());
            assert_eq!(v.points.last(), q.points.last());
        }
        let mut ids: Vec<&str> = s.database.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 40, "a query's match appears exactly once");
    }

    #[test]
    fn zero_drop_keeps_queries() {
        let c = corpus(20);
        let s = build_msts_sets(&c, 5, 5, 0.0, 1).unwrap();
        for (q, &t) in s.queries.iter().zip(&s.truth) {
            assert_eq!(&s.database[t], q);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let c = corpus(30);
        let a = build_msts_sets(&c, 5, 10, 0.3, 9).unwrap();
        let b = build_msts_sets(&c, 5, 10, 0.3, 9).unwrap();
        assert_eq!(a.database, b.database);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn interior_retention_matches_binomial() {
        let t = line(0, 1002);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kept = downsample(&t, 0.3, &mut rng).points.len() - 2;
        let (n, p): (f64, f64) = (1000.0, 0.7);
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((kept as f64 - n * p).abs() < 3.0 * sigma, "kept {kept}");
    }

    #[test]
    fn insufficient_corpus_is_rejected() {
        assert!(matches!(
            build_msts_sets(&corpus(10), 5, 6, 0.3, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn identical_match_ranks_first() {
        let q = vec![vec![1.0, 0.0, 0.0]];
        let db = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let r = eval_msts(&q, &db, &[1]).unwrap();
        assert_eq!((r.mr, r.hr1), (1.0, 1.0));
    }

    #[test]
    fn closer_distractor_outranks_match() {
        let q = vec![vec![1.0, 0.0]];
        let db = vec![vec![0.9, 0.0], vec![0.99, 0.0]];
        let r = eval_msts(&q, &db, &[0]).unwrap();
        assert_eq!((r.mr, r.hr1, r.hr5), (2.0, 0.0, 1.0));
    }

    #[test]
    fn missing_truth_is_an_error() {
        assert!(eval_msts(&[vec![1.0]], &[vec![1.0]], &[3]).is_err());
    }
}
