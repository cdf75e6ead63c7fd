use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView1};

use super::{ScoreLattice, TransitionParams};
use crate::{Error, Result};

/// `log(sum(exp(x)))` with max subtraction.
#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_path(lattice: &ScoreLattice, y: &[usize]) -> Result<()> {
    if y.len() != lattice.len() {
        return Err(Error::shape("label sequence", lattice.len(), y.len()));
    }
    let k = lattice.num_labels();
    if let Some(&index) = y.iter().find(|&&l| l >= k) {
        return Err(Error::Bounds { index, size: k });
    }
    Ok(())
}

pub fn path_score(lattice: &ScoreLattice, y: &[usize]) -> Result<f64> {
    check_path(lattice, y)?;
    let h = lattice.emissions();
    let mut score: f64 = y.iter().enumerate().map(|(t, &l)| h[[t, l]]).sum();
    for t in 0..y.len().saturating_sub(1) {
        score += lattice.step_table(t)[[y[t], y[t + 1]]];
    }
    Ok(score)
}

/// Forward log-messages: `alpha[t][j]` is the log-sum of scores of all
/// prefixes ending in label `j` at step `t`.
fn forward(lattice: &ScoreLattice) -> Array2<f64> {
    let (len, k) = lattice.emissions().dim();
    let h = lattice.emissions();
    let mut alpha = Array2::zeros((len, k));
    alpha.row_mut(0).assign(&h.row(0));
    for t in 1..len {
        let g = lattice.step_table(t - 1);
        for j in 0..k {
            let prev = alpha.row(t - 1);
            alpha[[t, j]] = h[[t, j]] + log_sum_exp((0..k).map(|i| prev[i] + g[[i, j]]));
        }
    }
    alpha
}

/// Backward log-messages: `beta[t][i]` is the log-sum of scores of all
/// suffixes after step `t` given label `i` at `t`.
fn backward(lattice: &ScoreLattice) -> Array2<f64> {
    let (len, k) = lattice.emissions().dim();
    let h = lattice.emissions();
    let mut beta = Array2::zeros((len, k));
    for t in (0..len - 1).rev() {
        let g = lattice.step_table(t);
        for i in 0..k {
            let next = beta.row(t + 1);
            beta[[t, i]] = log_sum_exp((0..k).map(|j| g[[i, j]] + h[[t + 1, j]] + next[j]));
        }
    }
    beta
}

/// Log of the sum of `exp(score)` over all `K^T` paths, in `O(T K^2)`.
pub fn log_partition(lattice: &ScoreLattice) -> f64 {
    let alpha = forward(lattice);
    log_sum_exp(alpha.row(lattice.len() - 1).iter().copied())
}

/// Label marginals under the CRF distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `T x K`; row `t` is the distribution of label `t`.
    pub unary: Array2<f64>,
    /// `T-1` tables of `K x K`; entry `[i][j]` of table `t` is the
    /// probability of labels `(i, j)` at steps `(t, t+1)`.
    pub pairwise: Vec<Array2<f64>>,
    pub log_partition: f64,
    fingerprint: u64,
}

fn fingerprint(lattice: &ScoreLattice) -> u64 {
    let mut hasher = DefaultHasher::new();
    lattice.emissions().dim().hash(&mut hasher);
    for v in lattice.emissions().iter() {
        v.to_bits().hash(&mut hasher);
    }
    lattice.changes().as_slice().hash(&mut hasher);
    for m in lattice.transitions().matrices() {
        for v in m.iter() {
            v.to_bits().hash(&mut hasher);
        }
    }
    hasher.finish()
}

pub fn posterior(lattice: &ScoreLattice) -> Posterior {
    let (len, k) = lattice.emissions().dim();
    let h = lattice.emissions();
    let alpha = forward(lattice);
    let beta = backward(lattice);
    let log_z = log_sum_exp(alpha.row(len - 1).iter().copied());

    let mut unary = &alpha + &beta;
    unary.mapv_inplace(|v| (v - log_z).exp());

    let pairwise = (0..len.saturating_sub(1))
        .map(|t| {
            let g = lattice.step_table(t);
            Array2::from_shape_fn((k, k), |(i, j)| {
                (alpha[[t, i]] + g[[i, j]] + h[[t + 1, j]] + beta[[t + 1, j]] - log_z).exp()
            })
        })
        .collect();

    Posterior {
        unary,
        pairwise,
        log_partition: log_z,
        fingerprint: fingerprint(lattice),
    }
}

/// Negative log-likelihood of the gold path.
pub fn sequence_nll(lattice: &ScoreLattice, y: &[usize]) -> Result<f64> {
    let gold = path_score(lattice, y)?;
    Ok(log_partition(lattice) - gold)
}

/// Gradients of [`sequence_nll`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGradients {
    /// `dNLL/dh`, `T x K`.
    pub emissions: Array2<f64>,
    /// `dNLL/dG` for every matrix of the lattice's variant.
    pub transitions: TransitionParams,
}

pub fn nll_gradients(lattice: &ScoreLattice, y: &[usize], post: &Posterior) -> Result<CrfGradients> {
    check_path(lattice, y)?;
    if post.unary.dim() != lattice.emissions().dim()
        || post.pairwise.len() != lattice.len() - 1
        || post.fingerprint != fingerprint(lattice)
    {
        return Err(Error::InvalidState(
            "posterior was not computed from this lattice".into(),
        ));
    }

    let mut emissions = post.unary.clone();
    for (t, &l) in y.iter().enumerate() {
        emissions[[t, l]] -= 1.0;
    }

    let mut transitions = TransitionParams::zeros(lattice.transitions().variant(), lattice.num_labels());
    for (t, pair) in post.pairwise.iter().enumerate() {
        let z = lattice.changes().get(t);
        let (from, to) = (y[t], y[t + 1]);
        let accumulate = |m: &mut Array2<f64>| {
            *m += pair;
            m[[from, to]] -= 1.0;
        };
        match &mut transitions {
            TransitionParams::Vanilla { g } => accumulate(g),
            TransitionParams::SpeakerAware { g0, g1 } => accumulate(if z == 0 { g0 } else { g1 }),
            TransitionParams::Joint { basis, g0, g1 } => {
                accumulate(basis);
                accumulate(if z == 0 { g0 } else { g1 });
            }
        }
    }
    Ok(CrfGradients {
        emissions,
        transitions,
    })
}

/// Lowest index attaining the maximum.
fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A maximum-score path. Ties go to the lower label index at every
/// decision.
pub fn viterbi_decode(lattice: &ScoreLattice) -> Vec<usize> {
    let (len, k) = lattice.emissions().dim();
    let h = lattice.emissions();
    let mut delta = Array2::zeros((len, k));
    let mut back = vec![vec![0usize; k]; len];
    delta.row_mut(0).assign(&h.row(0));
    for t in 1..len {
        let g = lattice.step_table(t - 1);
        for j in 0..k {
            let mut best = 0;
            let mut best_score = delta[[t - 1, 0]] + g[[0, j]];
            for i in 1..k {
                let s = delta[[t - 1, i]] + g[[i, j]];
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            delta[[t, j]] = h[[t, j]] + best_score;
            back[t][j] = best;
        }
    }
    let mut path = vec![0; len];
    path[len - 1] = argmax(delta.row(len - 1));
    for t in (1..len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Independent per-step argmax of the emission table.
pub fn softmax_decode(emissions: &Array2<f64>) -> Vec<usize> {
    emissions.rows().into_iter().map(argmax).collect()
}
