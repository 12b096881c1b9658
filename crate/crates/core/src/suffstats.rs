//! Pooled sufficient statistics via pairwise additive masking, and the
//! centralized solve on the resulting covariance.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{notears_from_scatter, LocalEstimate};
use crate::consensus::AdmmConfig;
use crate::error::{Error, Result};
use crate::numerics::{Cholesky, Matrix};
use crate::rng::{self, stream};

/// Raw per-client sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStatistics {
    pub sum_x: Vec<f64>,
    pub sum_xxt: Matrix,
    pub count: u64,
}

impl LocalStatistics {
    pub fn zeros(d: usize) -> Self {
        Self {
            sum_x: vec![0.0; d],
            sum_xxt: Matrix::zeros(d, d),
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sum_x.len()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if other.dim() != self.dim() {
            return Err(Error::Dimension("statistics disagree on dimension".into()));
        }
        Ok(Self {
            sum_x: self
                .sum_x
                .iter()
                .zip(&other.sum_x)
                .map(|(a, b)| a + b)
                .collect(),
            sum_xxt: self.sum_xxt.add(&other.sum_xxt)?,
            count: self.count + other.count,
        })
    }

    /// Largest absolute entry-wise difference over the float fields.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let x = self
            .sum_x
            .iter()
            .zip(&other.sum_x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let xx = self
            .sum_xxt
            .sub(&other.sum_xxt)
            .map(|m| m.max_abs())
            .unwrap_or(f64::INFINITY);
        x.max(xx)
    }
}

/// `Σ x` and `Σ x xᵀ` over the rows of `data`.
pub fn local_stats(data: &Matrix) -> LocalStatistics {
    let d = data.cols();
    let mut sum_x = vec![0.0; d];
    for i in 0..data.rows() {
        for (s, v) in sum_x.iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    LocalStatistics {
        sum_x,
        sum_xxt: data.gram(),
        count: data.rows() as u64,
    }
}

/// A client's pairwise mask seeds, one per peer. Key agreement is out of
/// scope; seeds come from configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskKeys {
    pub client_id: u32,
    pub peers: BTreeMap<u32, u64>,
}

fn pair_seed(session: u64, a: u32, b: u32) -> u64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mut r = rng::seeded(
        session ^ ((u64::from(lo) << 32) | u64::from(hi)),
        stream::MASKS,
    );
    r.next_u64()
}

impl MaskKeys {
    /// Seeds for `client_id` derived from a shared session seed.
    pub fn from_session(session: u64, client_id: u32, participants: &[u32]) -> Self {
        let peers = participants
            .iter()
            .filter(|&&p| p != client_id)
            .map(|&p| (p, pair_seed(session, client_id, p)))
            .collect();
        Self { client_id, peers }
    }
}

/// Masked statistics as sent to the aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedShare {
    pub client_id: u32,
    pub round: u32,
    pub sum_x: Vec<f64>,
    pub sum_xxt: Matrix,
    /// Count plus wrapping integer masks.
    pub count: u64,
    /// Signed sum of per-pair tags; all checksums add to zero (mod 2⁶⁴)
    /// when every pair agrees on its seed.
    pub checksum: u64,
}

struct PairMask {
    floats: Vec<f64>,
    count: u64,
    tag: u64,
}

fn pair_mask(seed: u64, round: u32, len: usize) -> PairMask {
    let mut r = rng::seeded(
        seed.wrapping_add(u64::from(round).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        stream::MASKS,
    );
    let count = r.next_u64();
    let tag = r.next_u64();
    let floats = (0..len).map(|_| StandardNormal.sample(&mut r)).collect();
    PairMask { floats, count, tag }
}

/// Adds `+r_kj` for peers `j > k` and `−r_kj` for `j < k`.
pub fn mask_share(stats: &LocalStatistics, keys: &MaskKeys, round: u32) -> MaskedShare {
    let d = stats.dim();
    let mut sum_x = stats.sum_x.clone();
    let mut sum_xxt = stats.sum_xxt.clone();
    let mut count = stats.count;
    let mut checksum = 0u64;
    for (&peer, &seed) in &keys.peers {
        let mask = pair_mask(seed, round, d + d * d);
        let sign = if peer > keys.client_id { 1.0 } else { -1.0 };
        for (v, m) in sum_x.iter_mut().zip(&mask.floats[..d]) {
            *v += sign * m;
        }
        for (v, m) in sum_xxt.as_mut_slice().iter_mut().zip(&mask.floats[d..]) {
            *v += sign * m;
        }
        if sign > 0.0 {
            count = count.wrapping_add(mask.count);
            checksum = checksum.wrapping_add(mask.tag);
        } else {
            count = count.wrapping_sub(mask.count);
            checksum = checksum.wrapping_sub(mask.tag);
        }
    }
    MaskedShare {
        client_id: keys.client_id,
        round,
        sum_x,
        sum_xxt,
        count,
        checksum,
    }
}

/// Sums the shares of exactly `participants`. Duplicate deliveries (same
/// client and round) are dropped.
pub fn secure_sum(shares: &[MaskedShare], participants: &[u32]) -> Result<LocalStatistics> {
    let mut seen: BTreeMap<u32, &MaskedShare> = BTreeMap::new();
    let round = shares.first().map(|s| s.round);
    for share in shares {
        if Some(share.round) != round {
            return Err(Error::Protocol(format!(
                "share from client {} is for round {}, expected {}",
                share.client_id,
                share.round,
                round.unwrap_or_default()
            )));
        }
        if !participants.contains(&share.client_id) {
            return Err(Error::Protocol(format!(
                "share from unexpected client {}",
                share.client_id
            )));
        }
        seen.entry(share.client_id).or_insert(share);
    }
    let expected: BTreeSet<u32> = participants.iter().copied().collect();
    let missing: Vec<u32> = expected
        .iter()
        .filter(|id| !seen.contains_key(id))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!(
            "missing shares from clients {missing:?}"
        )));
    }
    let first = seen.values().next().expect("participants non-empty");
    let d = first.sum_x.len();
    let mut total = LocalStatistics::zeros(d);
    let mut checksum = 0u64;
    let mut count = 0u64;
    for share in seen.values() {
        if share.sum_x.len() != d || share.sum_xxt.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "share from client {} has the wrong shape",
                share.client_id
            )));
        }
        for (t, v) in total.sum_x.iter_mut().zip(&share.sum_x) {
            *t += v;
        }
        total.sum_xxt.axpy(1.0, &share.sum_xxt)?;
        count = count.wrapping_add(share.count);
        checksum = checksum.wrapping_add(share.checksum);
    }
    if checksum != 0 {
        return Err(Error::Integrity(
            "mask checksum does not cancel; pairwise seeds are inconsistent".into(),
        ));
    }
    total.count = count;
    Ok(total)
}

/// `Σ = sum_xxt/n − μμᵀ` (symmetrized) and `n`.
pub fn assemble_covariance(agg: &LocalStatistics) -> Result<(Matrix, u64)> {
    if agg.count == 0 {
        return Err(Error::Argument(
            "cannot form a covariance from zero samples".into(),
        ));
    }
    let n = agg.count as f64;
    let d = agg.dim();
    let mu: Vec<f64> = agg.sum_x.iter().map(|s| s / n).collect();
    let raw = Matrix::from_fn(d, d, |i, j| agg.sum_xxt[(i, j)] / n - mu[i] * mu[j]);
    let sigma = Matrix::from_fn(d, d, |i, j| 0.5 * (raw[(i, j)] + raw[(j, i)]));
    Ok((sigma, agg.count))
}

const PSD_TOLERANCE: f64 = 1e-8;

/// Linear NOTEARS on a pooled covariance.
pub fn solve_from_suffstats(sigma: &Matrix, n: u64, config: &AdmmConfig) -> Result<LocalEstimate> {
    if n == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    let scale = sigma.max_abs().max(1.0);
    if !sigma.is_square() || !sigma.is_symmetric(PSD_TOLERANCE * scale) {
        return Err(Error::Argument(
            "covariance must be square and symmetric".into(),
        ));
    }
    let mut shifted = sigma.clone();
    shifted.axpy(PSD_TOLERANCE * scale, &Matrix::identity(sigma.rows()))?;
    if Cholesky::factor(&shifted).is_err() {
        return Err(Error::Argument(
            "covariance is not positive semidefinite".into(),
        ));
    }
    notears_from_scatter(0, sigma, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(sum_x: &[f64]) -> LocalStatistics {
        let d = sum_x.len();
        LocalStatistics {
            sum_x: sum_x.to_vec(),
            sum_xxt: Matrix::from_fn(d, d, |i, j| sum_x[i] * sum_x[j]),
            count: 1,
        }
    }

    #[test]
    fn single_sample_stats() {
        let s = local_stats(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert_eq!(s.sum_x, vec![1.0, 2.0]);
        assert_eq!(
            s.sum_xxt,
            Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap()
        );
        assert_eq!(s.count, 1);
        assert_eq!(local_stats(&Matrix::zeros(0, 3)), LocalStatistics::zeros(3));
    }

    #[test]
    fn two_client_cancellation() {
        let ids = [0, 1];
        let shares: Vec<_> = [stats(&[1.0, 2.0]), stats(&[3.0, 4.0])]
            .iter()
            .zip(ids)
            .map(|(s, id)| mask_share(s, &MaskKeys::from_session(9, id, &ids), 0))
            .collect();
        assert!(shares
            .iter()
            .all(|s| s.sum_x != vec![1.0, 2.0] && s.sum_x != vec![3.0, 4.0]));
        let total = secure_sum(&shares, &ids).unwrap();
        assert!((total.sum_x[0] - 4.0).abs() <= 1e-9 && (total.sum_x[1] - 6.0).abs() <= 1e-9);
        assert_eq!(total.count, 2);
    }

    #[test]
    fn single_client_is_unmasked() {
        let s = stats(&[1.5, -2.0, 0.25]);
        let share = mask_share(&s, &MaskKeys::from_session(1, 4, &[4]), 3);
        assert_eq!(share.sum_x, s.sum_x);
        assert_eq!(share.count, 1);
        assert_eq!(secure_sum(&[share], &[4]).unwrap(), s);
    }

    #[test]
    fn missing_share_names_the_client() {
        let ids = [0, 1, 2];
        let shares: Vec<_> = [0u32, 2]
            .iter()
            .map(|&id| mask_share(&stats(&[1.0]), &MaskKeys::from_session(5, id, &ids), 0))
            .collect();
        match secure_sum(&shares, &ids) {
            Err(Error::Protocol(msg)) => assert!(msg.contains("[1]"), "{msg}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn seed_mismatch_is_detected() {
        let ids = [0, 1, 2];
        let mut keys: Vec<_> = ids
            .iter()
            .map(|&id| MaskKeys::from_session(5, id, &ids))
            .collect();
        *keys[1].peers.get_mut(&2).unwrap() ^= 1;
        let shares: Vec<_> = keys
            .iter()
            .map(|k| mask_share(&stats(&[1.0, 1.0]), k, 0))
            .collect();
        assert!(matches!(
            secure_sum(&shares, &ids),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn duplicates_are_idempotent() {
        let ids = [0, 1];
        let shares: Vec<_> = ids
            .iter()
            .map(|&id| {
                mask_share(
                    &stats(&[f64::from(id)]),
                    &MaskKeys::from_session(2, id, &ids),
                    7,
                )
            })
            .collect();
        let mut doubled = shares.clone();
        doubled.push(shares[0].clone());
        assert_eq!(
            secure_sum(&doubled, &ids).unwrap(),
            secure_sum(&shares, &ids).unwrap()
        );
    }

    #[test]
    fn covariance_examples() {
        let two = local_stats(&Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap());
        let (sigma, n) = assemble_covariance(&two).unwrap();
        assert_eq!(n, 2);
        assert_eq!(
            sigma,
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()
        );
        let one = local_stats(&Matrix::from_rows(&[vec![3.0, -1.0]]).unwrap());
        assert!(assemble_covariance(&one).unwrap().0.max_abs() <= 1e-15);
        assert!(matches!(
            assemble_covariance(&LocalStatistics::zeros(2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn solve_examples() {
        let cfg = AdmmConfig::linear();
        assert_eq!(
            solve_from_suffstats(&Matrix::identity(4), 10, &cfg)
                .unwrap()
                .graph
                .edge_count(),
            0
        );
        assert_eq!(
            solve_from_suffstats(&Matrix::identity(1), 10, &cfg)
                .unwrap()
                .graph
                .edge_count(),
            0
        );
        let indefinite = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            solve_from_suffstats(&indefinite, 5, &cfg),
            Err(Error::Argument(_))
        ));
    }
}
