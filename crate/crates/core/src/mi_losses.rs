//! Variational lower bounds on mutual information over an in-batch score
//! matrix, their anchored training losses, and the cross-entropy baseline.
//!
//! Every bound reads a `K × K` matrix `S` with `S[i][j] = T(x_i, y_j)`. The
//! diagonal holds samples of the joint distribution; the `K(K-1)`
//! off-diagonal entries stand in for the product of marginals.
//!
//! | kind    | bound                                                          |
//! |---------|----------------------------------------------------------------|
//! | MINE    | `mean(diag) - log mean(exp(off))`                              |
//! | SMILE   | `mean(diag) - log mean(exp(clamp(off, -tau, tau)))`            |
//! | InfoNCE | `mean_i [S_ii - log (1/K) sum_j exp(S_ij)]`                    |
//! | NWJ     | `mean(diag) - mean(exp(off - 1))`                              |
//! | TUBA    | `1 + mean(diag) - log a - mean(exp(off)) / a`                  |
//! | JS      | `-mean(softplus(-diag)) - mean(softplus(off))`                 |
//! | NWJ-JS  | value of NWJ, gradient of JS                                   |
//!
//! The training loss is `-bound + beta * (log_partition - alpha)^2`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ndmath::{Scalar, Tape, Tensor, Var};

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    CrossEntropy,
    Mine,
    Smile,
    InfoNce,
    Nwj,
    Tuba,
    Js,
    NwjJs,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::CrossEntropy,
        LossKind::Mine,
        LossKind::Smile,
        LossKind::InfoNce,
        LossKind::Nwj,
        LossKind::Tuba,
        LossKind::Js,
        LossKind::NwjJs,
    ];

    /// The seven regularized MI losses.
    pub const MI: [LossKind; 7] = [
        LossKind::Mine,
        LossKind::Smile,
        LossKind::InfoNce,
        LossKind::Nwj,
        LossKind::Tuba,
        LossKind::Js,
        LossKind::NwjJs,
    ];

    pub fn is_mi(self) -> bool {
        self != LossKind::CrossEntropy
    }

    /// Smallest batch the estimator accepts.
    pub fn min_batch(self) -> usize {
        match self {
            LossKind::CrossEntropy | LossKind::InfoNce => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Mine => "mine",
            LossKind::Smile => "smile",
            LossKind::InfoNce => "infonce",
            LossKind::Nwj => "nwj",
            LossKind::Tuba => "tuba",
            LossKind::Js => "js",
            LossKind::NwjJs => "nwjjs",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lowered = s.to_ascii_lowercase();
        let trimmed = lowered.strip_prefix("re").filter(|_| lowered != "re").unwrap_or(&lowered);
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == lowered || k.name() == trimmed)
            .ok_or_else(|| Error::invalid("loss", format!("unknown loss `{s}`")))
    }
}

/// Estimator and regularization settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiLossConfig {
    pub kind: LossKind,
    /// Anchor of the log-partition penalty.
    pub alpha: f64,
    /// Weight of the log-partition penalty; zero disables it.
    pub beta: f64,
    /// SMILE clip magnitude.
    pub tau: f64,
    /// TUBA baseline.
    pub tuba_a: f64,
}

impl MiLossConfig {
    pub fn new(kind: LossKind) -> Self {
        MiLossConfig {
            kind,
            alpha: 0.0,
            beta: 0.1,
            tau: 5.0,
            tuba_a: std::f64::consts::E,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::invalid("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.tuba_a > 0.0) {
            return Err(Error::invalid("tuba_a", format!("must be > 0, got {}", self.tuba_a)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("alpha", "must be finite"));
        }
        Ok(())
    }
}

impl Default for MiLossConfig {
    fn default() -> Self {
        MiLossConfig::new(LossKind::CrossEntropy)
    }
}

/// Square, finite matrix of critic scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    scores: Tensor<T>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn new(scores: Tensor<T>) -> Result<Self> {
        match scores.shape() {
            [r, c] if r == c => {}
            other => return Err(Error::shape("score_matrix", other, &[other.first().copied().unwrap_or(0); 2])),
        }
        if !scores.is_finite() {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(ScoreMatrix { scores })
    }

    /// Matrix with `diag` on the diagonal and `off` elsewhere.
    pub fn constant_blocks(k: usize, diag: T, off: T) -> Result<Self> {
        let t = Tensor::new(
            vec![k, k],
            (0..k * k).map(|i| if i / k == i % k { diag } else { off }).collect(),
        )?;
        ScoreMatrix::new(t)
    }

    pub fn k(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.scores
    }
}

fn diag_indices(k: usize) -> Vec<usize> {
    (0..k).map(|i| i * k + i).collect()
}

fn off_indices(k: usize) -> Vec<usize> {
    (0..k * k).filter(|i| i / k != i % k).collect()
}

fn square_k<T: Scalar>(tape: &Tape<T>, s: Var) -> Result<usize> {
    match tape.value(s).shape() {
        [r, c] if r == c => Ok(*r),
        other => Err(Error::shape("score_matrix", other, &[0, 0])),
    }
}

fn need_k(kind: LossKind, k: usize) -> Result<()> {
    if k < kind.min_batch() {
        return Err(Error::invalid(
            "scores",
            format!("{kind} needs K >= {}, got K = {k}", kind.min_batch()),
        ));
    }
    Ok(())
}

struct Split {
    k: usize,
    diag: Var,
    off: Option<Var>,
}

fn split<T: Scalar>(tape: &mut Tape<T>, s: Var) -> Result<Split> {
    let k = square_k(tape, s)?;
    let diag = tape.index_select(s, &diag_indices(k))?;
    let off = if k >= 2 {
        Some(tape.index_select(s, &off_indices(k))?)
    } else {
        None
    };
    Ok(Split { k, diag, off })
}

fn off_of(parts: &Split) -> Result<Var> {
    parts
        .off
        .ok_or_else(|| Error::invalid("scores", "off-diagonal is empty for K = 1"))
}

fn log_mean_exp<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let n = tape.value(v).numel() as f64;
    let lse = tape.logsumexp(v)?;
    tape.add_scalar(lse, T::from_f64_lossy(-n.ln()))
}

/// Records `kind`'s bound on `s` and returns the scalar estimate.
pub fn bound_on_tape<T: Scalar>(tape: &mut Tape<T>, cfg: &MiLossConfig, s: Var) -> Result<Var> {
    cfg.validate()?;
    let kind = cfg.kind;
    let parts = split(tape, s)?;
    need_k(kind, parts.k)?;
    let diag_mean = tape.mean(parts.diag)?;
    match kind {
        LossKind::CrossEntropy => Err(Error::invalid("loss", "cross-entropy has no MI bound")),
        LossKind::Mine => {
            let off = off_of(&parts)?;
            let lme = log_mean_exp(tape, off)?;
            tape.sub(diag_mean, lme)
        }
        LossKind::Smile => {
            let off = off_of(&parts)?;
            let tau = T::from_f64_lossy(cfg.tau);
            let clipped = tape.clamp(off, -tau, tau)?;
            let lme = log_mean_exp(tape, clipped)?;
            tape.sub(diag_mean, lme)
        }
        LossKind::InfoNce => {
            let lse = tape.logsumexp_rows(s)?;
            let lse_mean = tape.mean(lse)?;
            let d = tape.sub(diag_mean, lse_mean)?;
            tape.add_scalar(d, T::from_f64_lossy((parts.k as f64).ln()))
        }
        LossKind::Nwj => nwj(tape, &parts, diag_mean),
        LossKind::Tuba => {
            let off = off_of(&parts)?;
            let ln_a = cfg.tuba_a.ln();
            let shifted = tape.add_scalar(off, T::from_f64_lossy(-ln_a))?;
            let e = tape.exp(shifted)?;
            let em = tape.mean(e)?;
            let d = tape.sub(diag_mean, em)?;
            tape.add_scalar(d, T::from_f64_lossy(1.0 - ln_a))
        }
        LossKind::Js => js(tape, &parts),
        LossKind::NwjJs => {
            let value = nwj(tape, &parts, diag_mean)?;
            let grad = js(tape, &parts)?;
            tape.with_value(grad, value)
        }
    }
}

fn nwj<T: Scalar>(tape: &mut Tape<T>, parts: &Split, diag_mean: Var) -> Result<Var> {
    let off = off_of(parts)?;
    let shifted = tape.add_scalar(off, -T::one())?;
    let e = tape.exp(shifted)?;
    let em = tape.mean(e)?;
    tape.sub(diag_mean, em)
}

fn js<T: Scalar>(tape: &mut Tape<T>, parts: &Split) -> Result<Var> {
    let off = off_of(parts)?;
    let neg_diag = tape.neg(parts.diag)?;
    let sp_pos = tape.softplus(neg_diag)?;
    let pos = tape.mean(sp_pos)?;
    let sp_neg = tape.softplus(off)?;
    let neg = tape.mean(sp_neg)?;
    let total = tape.add(pos, neg)?;
    tape.neg(total)
}

/// Partition-like term that the penalty anchors at `alpha`.
pub fn log_partition_on_tape<T: Scalar>(tape: &mut Tape<T>, cfg: &MiLossConfig, s: Var) -> Result<Var> {
    let parts = split(tape, s)?;
    let off = off_of(&parts)?;
    match cfg.kind {
        LossKind::CrossEntropy => Err(Error::invalid("loss", "cross-entropy has no partition term")),
        LossKind::Mine | LossKind::Smile | LossKind::InfoNce => log_mean_exp(tape, off),
        LossKind::Nwj | LossKind::NwjJs => {
            let lme = log_mean_exp(tape, off)?;
            tape.add_scalar(lme, -T::one())
        }
        LossKind::Tuba => {
            let lme = log_mean_exp(tape, off)?;
            tape.add_scalar(lme, T::from_f64_lossy(-cfg.tuba_a.ln()))
        }
        LossKind::Js => {
            let sp = tape.softplus(off)?;
            tape.mean(sp)
        }
    }
}

/// `-bound + beta * (log_partition - alpha)^2` for an MI kind.
pub fn regularized_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, cfg: &MiLossConfig, s: Var) -> Result<Var> {
    let bound = bound_on_tape(tape, cfg, s)?;
    let neg = tape.neg(bound)?;
    if cfg.beta == 0.0 {
        return Ok(neg);
    }
    let z = log_partition_on_tape(tape, cfg, s)?;
    let centered = tape.add_scalar(z, T::from_f64_lossy(-cfg.alpha))?;
    let sq = tape.square(centered)?;
    let penalty = tape.scale(sq, T::from_f64_lossy(cfg.beta))?;
    tape.add(neg, penalty)
}

fn eval_bound<T: Scalar>(cfg: MiLossConfig, scores: &ScoreMatrix<T>) -> Result<T> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.tensor().clone());
    let b = bound_on_tape(&mut tape, &cfg, s)?;
    tape.value(b).item()
}

fn with_kind(kind: LossKind) -> MiLossConfig {
    MiLossConfig::new(kind)
}

pub fn dv_bound<T: Scalar>(scores: &ScoreMatrix<T>) -> Result<T> {
    eval_bound(with_kind(LossKind::Mine), scores)
}

pub fn nwj_bound<T: Scalar>(scores: &ScoreMatrix<T>) -> Result<T> {
    eval_bound(with_kind(LossKind::Nwj), scores)
}

pub fn infonce_bound<T: Scalar>(scores: &ScoreMatrix<T>) -> Result<T> {
    eval_bound(with_kind(LossKind::InfoNce), scores)
}

pub fn smile_bound<T: Scalar>(scores: &ScoreMatrix<T>, tau: f64) -> Result<T> {
    eval_bound(MiLossConfig { tau, ..with_kind(LossKind::Smile) }, scores)
}

pub fn tuba_bound<T: Scalar>(scores: &ScoreMatrix<T>, a: f64) -> Result<T> {
    eval_bound(MiLossConfig { tuba_a: a, ..with_kind(LossKind::Tuba) }, scores)
}

pub fn js_bound<T: Scalar>(scores: &ScoreMatrix<T>) -> Result<T> {
    eval_bound(with_kind(LossKind::Js), scores)
}

/// Reported value of the NWJ bound; its gradient is that of the JS bound.
pub fn nwjjs_bound<T: Scalar>(scores: &ScoreMatrix<T>) -> Result<T> {
    eval_bound(with_kind(LossKind::NwjJs), scores)
}

/// Anchored training loss of `kind` with default SMILE/TUBA settings.
pub fn regularize<T: Scalar>(kind: LossKind, scores: &ScoreMatrix<T>, alpha: f64, beta: f64) -> Result<T> {
    let cfg = MiLossConfig { alpha, beta, ..with_kind(kind) };
    mi_loss(&cfg, LossInput::Scores(scores))
}

/// Mean negative log-softmax of the true class.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(l, labels)?;
    tape.value(loss).item()
}

/// What a loss reads: logits for cross-entropy, a score matrix otherwise.
#[derive(Clone, Copy, Debug)]
pub enum LossInput<'a, T> {
    Logits(&'a Tensor<T>, &'a [usize]),
    Scores(&'a ScoreMatrix<T>),
}

/// Training loss selected by `cfg`.
pub fn mi_loss<T: Scalar>(cfg: &MiLossConfig, input: LossInput<'_, T>) -> Result<T> {
    cfg.validate()?;
    match (cfg.kind, input) {
        (LossKind::CrossEntropy, LossInput::Logits(logits, labels)) => ce_loss(logits, labels),
        (kind, LossInput::Scores(scores)) if kind.is_mi() => {
            let mut tape = Tape::new();
            let s = tape.leaf(scores.tensor().clone());
            let loss = regularized_loss_on_tape(&mut tape, cfg, s)?;
            tape.value(loss).item()
        }
        (kind, _) => Err(Error::invalid("loss", format!("input does not match estimator {kind}"))),
    }
}

/// Value and score-gradient of the training loss of an MI kind.
pub fn mi_loss_with_grad<T: Scalar>(cfg: &MiLossConfig, scores: &ScoreMatrix<T>) -> Result<(T, Tensor<T>)> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.tensor().clone());
    let loss = regularized_loss_on_tape(&mut tape, cfg, s)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item()?, grads.wrt(s)))
}
