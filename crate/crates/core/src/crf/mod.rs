//! Linear-chain CRF with speaker-change conditioned transitions.
//!
//! A path `y` through a conversation of length `T` scores
//!
//! ```text
//! score(y) = sum_t h[t][y_t] + sum_{t<T-1} g(y_t, y_{t+1}, z_t)
//! ```
//!
//! where `h` is the emission table and `z_t` is 1 when the speaker changes
//! between utterances `t` and `t+1`. The transition scorer `g` comes in three
//! flavours (see [`Variant`]). There are no start or stop transitions.

mod inference;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SpeakerChangeSeq;
use crate::{Error, Result};

pub use inference::{
    log_partition, nll_gradients, path_score, posterior, sequence_nll, softmax_decode,
    viterbi_decode, CrfGradients, Posterior,
};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One matrix shared by every step.
    Vanilla,
    /// `g0` when the speaker stays, `g1` when it changes.
    SpeakerAware,
    /// A shared `basis` plus the speaker-aware pair.
    Joint,
}

impl Variant {
    pub fn matrix_names(self) -> &'static [&'static str] {
        match self {
            Variant::Vanilla => &["g"],
            Variant::SpeakerAware => &["g0", "g1"],
            Variant::Joint => &["g_basis", "g0", "g1"],
        }
    }
}

/// Dense projection from contextual embeddings to per-label scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams {
    /// `K x d_ctx`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EmissionParams {
    pub fn zeros(num_labels: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((num_labels, dim)),
            bias: Array1::zeros(num_labels),
        }
    }

    /// Weights uniform in `(-1/sqrt(dim), 1/sqrt(dim))`, zero bias.
    pub fn random<R: Rng>(num_labels: usize, dim: usize, rng: &mut R) -> Self {
        let r = 1.0 / (dim as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((num_labels, dim), |_| rng.gen_range(-r..r)),
            bias: Array1::zeros(num_labels),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Emission table `h[t] = W v[t] + b` for contextual embeddings stacked as
/// rows of `vs`.
pub fn emission_scores(vs: ArrayView2<'_, f64>, params: &EmissionParams) -> Result<Array2<f64>> {
    if vs.ncols() != params.dim() {
        return Err(Error::shape("emission input", params.dim(), vs.ncols()));
    }
    Ok(vs.dot(&params.weight.t()) + &params.bias)
}

/// Gradients of the emission projection given `dh = dL/dh`.
pub struct EmissionGradients {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// `dL/dv`, one row per time step.
    pub inputs: Array2<f64>,
}

pub fn emission_backward(
    vs: ArrayView2<'_, f64>,
    params: &EmissionParams,
    dh: ArrayView2<'_, f64>,
) -> Result<EmissionGradients> {
    if dh.nrows() != vs.nrows() {
        return Err(Error::shape("emission gradient rows", vs.nrows(), dh.nrows()));
    }
    if dh.ncols() != params.num_labels() {
        return Err(Error::shape("emission gradient labels", params.num_labels(), dh.ncols()));
    }
    Ok(EmissionGradients {
        weight: dh.t().dot(&vs),
        bias: dh.sum_axis(ndarray::Axis(0)),
        inputs: dh.dot(&params.weight),
    })
}

/// Transition matrices for one of the three variants. Also used to hold
/// their gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionParams {
    Vanilla {
        g: Array2<f64>,
    },
    SpeakerAware {
        g0: Array2<f64>,
        g1: Array2<f64>,
    },
    Joint {
        basis: Array2<f64>,
        g0: Array2<f64>,
        g1: Array2<f64>,
    },
}

impl TransitionParams {
    pub fn zeros(variant: Variant, num_labels: usize) -> Self {
        let z = || Array2::zeros((num_labels, num_labels));
        match variant {
            Variant::Vanilla => TransitionParams::Vanilla { g: z() },
            Variant::SpeakerAware => TransitionParams::SpeakerAware { g0: z(), g1: z() },
            Variant::Joint => TransitionParams::Joint {
                basis: z(),
                g0: z(),
                g1: z(),
            },
        }
    }

    /// Builds parameters from matrices listed in [`Variant::matrix_names`]
    /// order.
    pub fn from_matrices(variant: Variant, mut matrices: Vec<Array2<f64>>) -> Result<Self> {
        let expected = variant.matrix_names().len();
        if matrices.len() != expected {
            return Err(Error::shape("transition matrix count", expected, matrices.len()));
        }
        let k = matrices[0].nrows();
        for m in &matrices {
            if m.nrows() != k || m.ncols() != k {
                return Err(Error::Validation(format!(
                    "transition matrices must all be {k}x{k}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite transition score".into()));
            }
        }
        let mut take = || matrices.remove(0);
        Ok(match variant {
            Variant::Vanilla => TransitionParams::Vanilla { g: take() },
            Variant::SpeakerAware => TransitionParams::SpeakerAware {
                g0: take(),
                g1: take(),
            },
            Variant::Joint => TransitionParams::Joint {
                basis: take(),
                g0: take(),
                g1: take(),
            },
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            TransitionParams::Vanilla { .. } => Variant::Vanilla,
            TransitionParams::SpeakerAware { .. } => Variant::SpeakerAware,
            TransitionParams::Joint { .. } => Variant::Joint,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.matrices()[0].nrows()
    }

    /// Matrices in [`Variant::matrix_names`] order.
    pub fn matrices(&self) -> Vec<&Array2<f64>> {
        match self {
            TransitionParams::Vanilla { g } => vec![g],
            TransitionParams::SpeakerAware { g0, g1 } => vec![g0, g1],
            TransitionParams::Joint { basis, g0, g1 } => vec![basis, g0, g1],
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match self {
            TransitionParams::Vanilla { g } => vec![g],
            TransitionParams::SpeakerAware { g0, g1 } => vec![g0, g1],
            TransitionParams::Joint { basis, g0, g1 } => vec![basis, g0, g1],
        }
    }

    pub fn named_matrices(&self) -> Vec<(&'static str, &Array2<f64>)> {
        self.variant()
            .matrix_names()
            .iter()
            .copied()
            .zip(self.matrices())
            .collect()
    }

    /// Unchecked transition score for labels `i -> j` under speaker change
    /// `z`.
    #[inline]
    pub(crate) fn score_unchecked(&self, i: usize, j: usize, z: u8) -> f64 {
        match self {
            TransitionParams::Vanilla { g } => g[[i, j]],
            TransitionParams::SpeakerAware { g0, g1 } => {
                if z == 0 {
                    g0[[i, j]]
                } else {
                    g1[[i, j]]
                }
            }
            TransitionParams::Joint { basis, g0, g1 } => {
                basis[[i, j]] + if z == 0 { g0[[i, j]] } else { g1[[i, j]] }
            }
        }
    }

    /// The full `K x K` score table in effect for speaker change `z`.
    pub fn effective(&self, z: u8) -> Array2<f64> {
        let k = self.num_labels();
        Array2::from_shape_fn((k, k), |(i, j)| self.score_unchecked(i, j, z))
    }

    /// Re-expresses the parameters under a richer variant without changing
    /// any transition score: a vanilla `G` becomes `g0 = g1 = G`, and
    /// anything becomes joint with the remaining matrices at zero.
    pub fn lift(&self, target: Variant) -> Result<TransitionParams> {
        let k = self.num_labels();
        let zero = || Array2::zeros((k, k));
        Ok(match (self, target) {
            (p, t) if p.variant() == t => p.clone(),
            (TransitionParams::Vanilla { g }, Variant::SpeakerAware) => {
                TransitionParams::SpeakerAware {
                    g0: g.clone(),
                    g1: g.clone(),
                }
            }
            (TransitionParams::Vanilla { g }, Variant::Joint) => TransitionParams::Joint {
                basis: g.clone(),
                g0: zero(),
                g1: zero(),
            },
            (TransitionParams::SpeakerAware { g0, g1 }, Variant::Joint) => {
                TransitionParams::Joint {
                    basis: zero(),
                    g0: g0.clone(),
                    g1: g1.clone(),
                }
            }
            (p, t) => {
                return Err(Error::Config(format!(
                    "cannot express {:?} transitions as {t:?}",
                    p.variant()
                )))
            }
        })
    }

    /// Elementwise mean of two parameter sets of the same variant and size.
    pub fn average(&self, other: &TransitionParams) -> Result<TransitionParams> {
        if self.variant() != other.variant() {
            return Err(Error::Config(format!(
                "cannot average {:?} with {:?} transitions",
                self.variant(),
                other.variant()
            )));
        }
        if self.num_labels() != other.num_labels() {
            return Err(Error::Config(format!(
                "cannot average transitions over {} and {} labels",
                self.num_labels(),
                other.num_labels()
            )));
        }
        let mut out = self.clone();
        for (m, o) in out.matrices_mut().into_iter().zip(other.matrices()) {
            m.zip_mut_with(o, |a, &b| *a = 0.5 * (*a + b));
        }
        Ok(out)
    }
}

/// Checked transition score.
pub fn transition_score(params: &TransitionParams, i: usize, j: usize, z: u8) -> Result<f64> {
    let k = params.num_labels();
    for index in [i, j] {
        if index >= k {
            return Err(Error::Bounds { index, size: k });
        }
    }
    if z > 1 {
        return Err(Error::Validation(format!("speaker change value {z}")));
    }
    Ok(params.score_unchecked(i, j, z))
}

/// Emission table plus transition scorer for one conversation: the object
/// every dynamic program runs over.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLattice {
    emissions: Array2<f64>,
    transitions: TransitionParams,
    changes: SpeakerChangeSeq,
    /// Effective transition tables for `z = 0` and `z = 1`.
    effective: [Array2<f64>; 2],
}

impl ScoreLattice {
    pub fn new(
        emissions: Array2<f64>,
        transitions: TransitionParams,
        changes: SpeakerChangeSeq,
    ) -> Result<Self> {
        let t = emissions.nrows();
        if t == 0 {
            return Err(Error::Validation("a lattice needs at least one step".into()));
        }
        if changes.len() != t - 1 {
            return Err(Error::shape("speaker changes", t - 1, changes.len()));
        }
        if emissions.ncols() != transitions.num_labels() {
            return Err(Error::shape(
                "emission labels",
                transitions.num_labels(),
                emissions.ncols(),
            ));
        }
        let effective = [transitions.effective(0), transitions.effective(1)];
        Ok(Self {
            emissions,
            transitions,
            changes,
            effective,
        })
    }

    pub fn len(&self) -> usize {
        self.emissions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_labels(&self) -> usize {
        self.emissions.ncols()
    }

    pub fn emissions(&self) -> &Array2<f64> {
        &self.emissions
    }

    pub fn transitions(&self) -> &TransitionParams {
        &self.transitions
    }

    pub fn changes(&self) -> &SpeakerChangeSeq {
        &self.changes
    }

    /// Transition table used between steps `t` and `t+1`.
    #[inline]
    pub(crate) fn step_table(&self, t: usize) -> &Array2<f64> {
        &self.effective[self.changes.get(t) as usize]
    }
}

/// Averages two models' lattices over the same conversation: emissions and
/// each transition matrix elementwise.
pub fn ensemble(a: &ScoreLattice, b: &ScoreLattice) -> Result<ScoreLattice> {
    if a.emissions.dim() != b.emissions.dim() {
        return Err(Error::Config(format!(
            "ensemble members disagree on lattice shape: {:?} vs {:?}",
            a.emissions.dim(),
            b.emissions.dim()
        )));
    }
    if a.changes != b.changes {
        return Err(Error::Config(
            "ensemble members disagree on speaker changes".into(),
        ));
    }
    let transitions = a.transitions.average(&b.transitions)?;
    let mut emissions = a.emissions.clone();
    emissions.zip_mut_with(&b.emissions, |x, &y| *x = 0.5 * (*x + y));
    ScoreLattice::new(emissions, transitions, a.changes.clone())
}
