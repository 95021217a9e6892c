//! SUMO and its baselines, one layer at a time.
//!
//! All per-layer arithmetic happens in a "tall frame": layers with fewer rows
//! than columns are transposed on the way in, so the subspace basis always
//! multiplies from the left and is `max(m, n) × r`. This realizes the
//! right-hand projection for wide layers. The stored moment therefore has
//! shape `r × min(m, n)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::io::MatrixData;
use crate::linalg::{
    self, check_finite, newton_schulz_orthogonalize, orthogonalize_svd, Matrix, NewtonSchulzKind,
    NewtonSchulzVariant,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Orthogonalizer {
    ExactSvd,
    NewtonSchulz(NewtonSchulzVariant),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Projector {
    TruncatedSvd,
    RandomizedSvd {
        oversampling: usize,
        power_iterations: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RefreshCriterion {
    EveryK,
    /// Refresh once ‖QᵀG‖_F drops to the threshold (or at the first step).
    ProjectedGradNormBelow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentConvention {
    /// M ← βM + Ĝ
    Accumulate,
    /// M ← βM + (1 − β)Ĝ
    ConvexCombination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Sumo,
    Muon,
    /// Projected momentum without orthogonalization: W ← W − αη·Q·M.
    LowRankMomentum,
    GradientDescent,
    /// W ← W − αη·G, while the projected moment M ← βM + QᵀG is kept as state
    /// only (it does not move the weights).
    VanillaProjectedMoment,
}

fn parse_usize(field: &str, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse(format!("expected an integer in `{field}`, got `{s}`")))
}

impl fmt::Display for Orthogonalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Orthogonalizer::ExactSvd => write!(f, "exact_svd"),
            Orthogonalizer::NewtonSchulz(v) => {
                let name = match v.kind {
                    NewtonSchulzKind::Classic => "newton_schulz",
                    NewtonSchulzKind::MuonQuintic => "muon_quintic",
                };
                if v.iterations == 5 {
                    write!(f, "{name}5")
                } else {
                    write!(f, "{name}:{}", v.iterations)
                }
            }
        }
    }
}

impl FromStr for Orthogonalizer {
    type Err = Error;

    /// Accepts `exact_svd`, `newton_schulz5`, `newton_schulz:<iters>`,
    /// `muon_quintic5` and `muon_quintic:<iters>`.
    fn from_str(s: &str) -> Result<Self> {
        let ns = |kind, iters: &str| -> Result<Self> {
            let iterations = parse_usize("orthogonalizer", iters)?;
            if iterations == 0 {
                return Err(Error::Parse("newton-schulz iterations must be >= 1".into()));
            }
            Ok(Orthogonalizer::NewtonSchulz(NewtonSchulzVariant { kind, iterations }))
        };
        match s {
            "exact_svd" => Ok(Orthogonalizer::ExactSvd),
            "newton_schulz5" => ns(NewtonSchulzKind::Classic, "5"),
            "muon_quintic5" => ns(NewtonSchulzKind::MuonQuintic, "5"),
            _ => {
                if let Some(i) = s.strip_prefix("newton_schulz:") {
                    ns(NewtonSchulzKind::Classic, i)
                } else if let Some(i) = s.strip_prefix("muon_quintic:") {
                    ns(NewtonSchulzKind::MuonQuintic, i)
                } else {
                    Err(Error::Parse(format!("unknown orthogonalizer `{s}`")))
                }
            }
        }
    }
}

impl fmt::Display for Projector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Projector::TruncatedSvd => write!(f, "truncated_svd"),
            Projector::RandomizedSvd {
                oversampling,
                power_iterations,
            } => write!(f, "randomized_svd:{oversampling}:{power_iterations}"),
        }
    }
}

impl FromStr for Projector {
    type Err = Error;

    /// Accepts `truncated_svd`, `randomized_svd` (oversampling 4, two power
    /// iterations) and `randomized_svd:<oversampling>:<power_iterations>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncated_svd" => Ok(Projector::TruncatedSvd),
            "randomized_svd" => Ok(Projector::RandomizedSvd {
                oversampling: 4,
                power_iterations: 2,
            }),
            _ => {
                let rest = s
                    .strip_prefix("randomized_svd:")
                    .ok_or_else(|| Error::Parse(format!("unknown projector `{s}`")))?;
                let (p, q) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("expected randomized_svd:<p>:<q>, got `{s}`")))?;
                Ok(Projector::RandomizedSvd {
                    oversampling: parse_usize("projector", p)?,
                    power_iterations: parse_usize("projector", q)?,
                })
            }
        }
    }
}

impl fmt::Display for RefreshCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefreshCriterion::EveryK => write!(f, "every_k"),
            RefreshCriterion::ProjectedGradNormBelow(t) => write!(f, "grad_norm_below:{t}"),
        }
    }
}

impl FromStr for RefreshCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "every_k" {
            return Ok(RefreshCriterion::EveryK);
        }
        let t = s
            .strip_prefix("grad_norm_below:")
            .ok_or_else(|| Error::Parse(format!("unknown refresh criterion `{s}`")))?;
        let v: f64 = t
            .parse()
            .map_err(|_| Error::Parse(format!("expected a number in `{s}`")))?;
        Ok(RefreshCriterion::ProjectedGradNormBelow(v))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sumo => "sumo",
            Method::Muon => "muon",
            Method::LowRankMomentum => "low_rank_momentum",
            Method::GradientDescent => "gradient_descent",
            Method::VanillaProjectedMoment => "vanilla_projected_moment",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sumo" => Ok(Method::Sumo),
            "muon" => Ok(Method::Muon),
            "low_rank_momentum" => Ok(Method::LowRankMomentum),
            "gradient_descent" => Ok(Method::GradientDescent),
            "vanilla_projected_moment" => Ok(Method::VanillaProjectedMoment),
            _ => Err(Error::Parse(format!("unknown method `{s}`"))),
        }
    }
}

macro_rules! string_serde {
    ($($t:ty),*) => {$(
        impl TryFrom<String> for $t {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }
        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }
    )*};
}
string_serde!(Orthogonalizer, Projector, RefreshCriterion, Method);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub scale_factor: f64,
    pub moment_decay: f64,
    pub moment_convention: MomentConvention,
    pub weight_decay: f64,
    pub rank: usize,
    pub subspace_update_every: u64,
    pub limiter_gamma: f64,
    pub limiter_enabled: bool,
    pub orthogonalizer: Orthogonalizer,
    pub projector: Projector,
    pub rms_scaling: bool,
    pub refresh_criterion: RefreshCriterion,
    pub seed: u64,
    /// Accepted for interface compatibility; SUMO keeps no second moment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            scale_factor: 1.0,
            moment_decay: 0.9,
            moment_convention: MomentConvention::Accumulate,
            weight_decay: 0.0,
            rank: 8,
            subspace_update_every: 200,
            limiter_gamma: 1.1,
            limiter_enabled: true,
            orthogonalizer: Orthogonalizer::ExactSvd,
            projector: Projector::RandomizedSvd {
                oversampling: 4,
                power_iterations: 2,
            },
            rms_scaling: false,
            refresh_criterion: RefreshCriterion::EveryK,
            seed: 0,
            beta2: None,
        }
    }
}

impl OptimizerConfig {
    /// Checks scalar hyperparameters. Field names in errors are prefixed with `optimizer.`.
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, msg: String| Err(Error::config(format!("optimizer.{f}"), msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor.is_finite()) {
            return bad("scale_factor", format!("must be positive, got {}", self.scale_factor));
        }
        if !(0.0..1.0).contains(&self.moment_decay) {
            return bad("moment_decay", format!("must lie in [0, 1), got {}", self.moment_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if self.rank == 0 {
            return bad("rank", "must be >= 1".into());
        }
        if self.subspace_update_every == 0 {
            return bad("subspace_update_every", "must be >= 1".into());
        }
        if self.limiter_enabled && !(self.limiter_gamma > 1.0 && self.limiter_gamma.is_finite()) {
            return bad("limiter_gamma", format!("must exceed 1 when the limiter is on, got {}", self.limiter_gamma));
        }
        if let Orthogonalizer::NewtonSchulz(v) = self.orthogonalizer {
            if v.iterations == 0 {
                return bad("orthogonalizer", "newton-schulz iterations must be >= 1".into());
            }
        }
        if let RefreshCriterion::ProjectedGradNormBelow(t) = self.refresh_criterion {
            if !(t > 0.0 && t.is_finite()) {
                return bad("refresh_criterion", format!("threshold must be positive, got {t}"));
            }
        }
        if self.beta2.is_some() {
            log::warn!("optimizer.beta2 is ignored: SUMO keeps only a first moment");
        }
        Ok(())
    }

    /// Checks that the rank fits a layer of shape `m × n`.
    pub fn validate_for_shape(&self, m: usize, n: usize) -> Result<()> {
        let k = m.min(n);
        if self.rank > k {
            return Err(Error::config(
                "optimizer.rank",
                format!("rank {} exceeds min(m, n) = {k} for a {m}x{n} layer", self.rank),
            ));
        }
        Ok(())
    }

    fn moment_blend(&self, moment: &Matrix, g: &Matrix) -> Matrix {
        let b = self.moment_decay;
        match self.moment_convention {
            MomentConvention::Accumulate => b * moment + g,
            MomentConvention::ConvexCombination => b * moment + (1.0 - b) * g,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub weight: Matrix,
    /// Tall-frame basis, `max(m, n) × r`.
    pub subspace: Option<Matrix>,
    /// Tall-frame moment; `r × min(m, n)` for projected methods and
    /// `max(m, n) × min(m, n)` for Muon. Absent before the first step.
    pub moment: Option<Matrix>,
    pub previous_update_norm: Option<f64>,
    pub step: u64,
    /// Layer index; selects the layer's RNG stream.
    pub layer: u64,
}

impl LayerState {
    pub fn new(weight: Matrix, layer: u64) -> Self {
        Self {
            weight,
            subspace: None,
            moment: None,
            previous_update_norm: None,
            step: 0,
            layer,
        }
    }

    pub fn is_transposed(&self) -> bool {
        self.weight.nrows() < self.weight.ncols()
    }

    /// Brings a weight-shaped matrix into the tall frame.
    pub fn to_frame(&self, g: &Matrix) -> Matrix {
        if self.is_transposed() {
            g.transpose()
        } else {
            g.clone()
        }
    }

    fn check_gradient(&self, g: &Matrix) -> Result<()> {
        if g.shape() != self.weight.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.weight.shape(),
                got: g.shape(),
            });
        }
        check_finite(g, "gradient")
    }

    /// Applies W ← (1 − ηλ)W − Δ with Δ given in the tall frame.
    fn apply(&mut self, delta_frame: &Matrix, cfg: &OptimizerConfig) -> f64 {
        let delta = if self.is_transposed() {
            delta_frame.transpose()
        } else {
            delta_frame.clone()
        };
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        let next = if decay == 1.0 {
            &self.weight - delta
        } else {
            &self.weight * decay - delta
        };
        let moved = (&next - &self.weight).norm();
        self.weight = next;
        moved
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub grad_norm: f64,
    pub projected_grad_norm: f64,
    /// ‖W_new − W_old‖_F.
    pub update_norm: f64,
    pub limiter_fired: bool,
    pub subspace_refreshed: bool,
    /// ‖OOᵀ − I‖_F of the orthogonalizer output, absent when nothing was orthogonalized.
    pub orthogonalization_error_estimate: Option<f64>,
}

/// Tall-frame quantities from one SUMO step, before RMS scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct SumoIntermediates {
    pub g: Matrix,
    pub q: Matrix,
    pub g_hat: Matrix,
    pub o: Matrix,
}

fn projector_seed(cfg: &OptimizerConfig, state: &LayerState) -> u64 {
    derive_seed(cfg.seed, state.layer, state.step)
}

fn project(g_frame: &Matrix, cfg: &OptimizerConfig, seed: u64) -> Result<Matrix> {
    match cfg.projector {
        Projector::TruncatedSvd => linalg::truncated_svd_projector(g_frame, cfg.rank),
        Projector::RandomizedSvd {
            oversampling,
            power_iterations,
        } => {
            let room = g_frame.ncols().min(g_frame.nrows()).saturating_sub(cfg.rank);
            linalg::randomized_svd_projector(
                g_frame,
                cfg.rank,
                oversampling.min(room),
                power_iterations,
                seed,
            )
        }
    }
}

/// Replaces Q from the projector and carries the moment over with R = Q_newᵀQ_old.
///
/// `g` is weight-shaped. With no previous subspace the moment is reset to zero.
pub fn refresh_subspace(state: &mut LayerState, g: &Matrix, cfg: &OptimizerConfig) -> Result<()> {
    state.check_gradient(g)?;
    let g_frame = state.to_frame(g);
    cfg.validate_for_shape(g_frame.nrows(), g_frame.ncols())?;
    let q_new = project(&g_frame, cfg, projector_seed(cfg, state))?;
    set_subspace(state, q_new, g_frame.ncols());
    Ok(())
}

/// Installs a given tall-frame basis, transforming the moment as in a refresh.
pub fn set_subspace(state: &mut LayerState, q_new: Matrix, moment_cols: usize) {
    let r = q_new.ncols();
    let moment = match (&state.subspace, &state.moment) {
        (Some(q_old), Some(m_old)) if m_old.nrows() == q_old.ncols() => {
            let rot = q_new.transpose() * q_old;
            rot * m_old
        }
        _ => Matrix::zeros(r, moment_cols),
    };
    state.moment = Some(moment);
    state.subspace = Some(q_new);
}

fn needs_refresh(state: &LayerState, g_frame: &Matrix, cfg: &OptimizerConfig) -> bool {
    let Some(q) = &state.subspace else {
        return true;
    };
    match cfg.refresh_criterion {
        RefreshCriterion::EveryK => state.step.is_multiple_of(cfg.subspace_update_every),
        RefreshCriterion::ProjectedGradNormBelow(t) => (q.transpose() * g_frame).norm() <= t,
    }
}

fn orthogonalize_moment(m: &Matrix, orth: Orthogonalizer) -> Result<(Matrix, Option<f64>)> {
    if m.norm() == 0.0 {
        return Ok((Matrix::zeros(m.nrows(), m.ncols()), None));
    }
    let o = match orth {
        Orthogonalizer::ExactSvd => orthogonalize_svd(m)?,
        Orthogonalizer::NewtonSchulz(v) => newton_schulz_orthogonalize(m, v)?,
    };
    let defect = linalg::orthogonality_defect(&o);
    Ok((o, Some(defect)))
}

/// Caps ‖o‖_F at γ·previous_norm. Returns the (possibly rescaled) matrix and whether it fired.
pub fn norm_growth_limit(o: &Matrix, previous_norm: Option<f64>, gamma: f64) -> (Matrix, bool) {
    let Some(prev) = previous_norm else {
        return (o.clone(), false);
    };
    let norm = o.norm();
    let cap = gamma * prev;
    if norm <= cap {
        return (o.clone(), false);
    }
    (o * (cap / norm), true)
}

fn rms_factor(state: &LayerState, cfg: &OptimizerConfig) -> f64 {
    if cfg.rms_scaling {
        let (m, n) = state.weight.shape();
        (m.max(n) as f64).sqrt()
    } else {
        1.0
    }
}

/// Runs the refresh (if due) and the projected-moment update shared by the
/// projected methods. Returns (G, Q, Ĝ, refreshed) in the tall frame.
fn projected_moment_update(
    state: &mut LayerState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<(Matrix, Matrix, Matrix, bool)> {
    state.check_gradient(g)?;
    let g_frame = state.to_frame(g);
    cfg.validate_for_shape(g_frame.nrows(), g_frame.ncols())?;
    let refreshed = needs_refresh(state, &g_frame, cfg);
    if refreshed {
        let q_new = project(&g_frame, cfg, projector_seed(cfg, state))?;
        set_subspace(state, q_new, g_frame.ncols());
    }
    let q = state.subspace.clone().expect("subspace set above");
    let g_hat = q.transpose() * &g_frame;
    let moment = state
        .moment
        .as_ref()
        .filter(|m| m.shape() == g_hat.shape())
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(g_hat.nrows(), g_hat.ncols()));
    state.moment = Some(cfg.moment_blend(&moment, &g_hat));
    Ok((g_frame, q, g_hat, refreshed))
}

pub fn sumo_step_with_intermediates(
    state: &mut LayerState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<(StepReport, SumoIntermediates)> {
    let (g_frame, q, g_hat, refreshed) = projected_moment_update(state, g, cfg)?;
    let moment = state.moment.as_ref().expect("moment set");
    let (mut o, defect) = orthogonalize_moment(moment, cfg.orthogonalizer)?;

    let mut fired = false;
    if defect.is_some() {
        if cfg.limiter_enabled {
            let (limited, f) = norm_growth_limit(&o, state.previous_update_norm, cfg.limiter_gamma);
            o = limited;
            fired = f;
        }
        state.previous_update_norm = Some(o.norm());
    }

    // G − Q(Ĝ − O) split as residual (G − QĜ) plus the orthogonal channel QO.
    let residual = &g_frame - &q * &g_hat;
    let direction = residual + (&q * &o) * rms_factor(state, cfg);
    let delta = direction * (cfg.scale_factor * cfg.learning_rate);
    let update_norm = state.apply(&delta, cfg);
    state.step += 1;

    let report = StepReport {
        grad_norm: g_frame.norm(),
        projected_grad_norm: g_hat.norm(),
        update_norm,
        limiter_fired: fired,
        subspace_refreshed: refreshed,
        orthogonalization_error_estimate: defect,
    };
    Ok((
        report,
        SumoIntermediates {
            g: g_frame,
            q,
            g_hat,
            o,
        },
    ))
}

/// One SUMO step: refresh, project, accumulate, orthogonalize, limit, update.
pub fn sumo_step(state: &mut LayerState, g: &Matrix, cfg: &OptimizerConfig) -> Result<StepReport> {
    sumo_step_with_intermediates(state, g, cfg).map(|(r, _)| r)
}

/// Full-space momentum, orthogonalized, then W ← (1 − ηλ)W − η·O.
pub fn muon_step(state: &mut LayerState, g: &Matrix, cfg: &OptimizerConfig) -> Result<StepReport> {
    state.check_gradient(g)?;
    let g_frame = state.to_frame(g);
    let moment = state
        .moment
        .as_ref()
        .filter(|m| m.shape() == g_frame.shape())
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(g_frame.nrows(), g_frame.ncols()));
    let moment = cfg.moment_blend(&moment, &g_frame);
    let (o, defect) = orthogonalize_moment(&moment, cfg.orthogonalizer)?;
    state.moment = Some(moment);
    let delta = o * (cfg.learning_rate * rms_factor(state, cfg));
    let update_norm = state.apply(&delta, cfg);
    state.step += 1;
    Ok(StepReport {
        grad_norm: g_frame.norm(),
        projected_grad_norm: g_frame.norm(),
        update_norm,
        limiter_fired: false,
        subspace_refreshed: false,
        orthogonalization_error_estimate: defect,
    })
}

/// Projected momentum without orthogonalization or residual channel.
pub fn low_rank_momentum_step(
    state: &mut LayerState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let (g_frame, q, g_hat, refreshed) = projected_moment_update(state, g, cfg)?;
    let moment = state.moment.as_ref().expect("moment set");
    let delta = (&q * moment) * (cfg.scale_factor * cfg.learning_rate);
    let update_norm = state.apply(&delta, cfg);
    state.step += 1;
    Ok(StepReport {
        grad_norm: g_frame.norm(),
        projected_grad_norm: g_hat.norm(),
        update_norm,
        limiter_fired: false,
        subspace_refreshed: refreshed,
        orthogonalization_error_estimate: None,
    })
}

/// Plain descent on the full gradient with SUMO's subspace and projected
/// moment maintained alongside for diagnostics.
pub fn vanilla_projected_moment_step(
    state: &mut LayerState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let (g_frame, _, g_hat, refreshed) = projected_moment_update(state, g, cfg)?;
    let delta = &g_frame * (cfg.scale_factor * cfg.learning_rate);
    let update_norm = state.apply(&delta, cfg);
    state.step += 1;
    Ok(StepReport {
        grad_norm: g_frame.norm(),
        projected_grad_norm: g_hat.norm(),
        update_norm,
        limiter_fired: false,
        subspace_refreshed: refreshed,
        orthogonalization_error_estimate: None,
    })
}

pub fn gradient_descent_step(
    state: &mut LayerState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    state.check_gradient(g)?;
    let g_frame = state.to_frame(g);
    let update_norm = state.apply(&(&g_frame * cfg.learning_rate), cfg);
    state.step += 1;
    Ok(StepReport {
        grad_norm: g_frame.norm(),
        projected_grad_norm: g_frame.norm(),
        update_norm,
        limiter_fired: false,
        subspace_refreshed: false,
        orthogonalization_error_estimate: None,
    })
}

impl Method {
    pub fn step(self, state: &mut LayerState, g: &Matrix, cfg: &OptimizerConfig) -> Result<StepReport> {
        match self {
            Method::Sumo => sumo_step(state, g, cfg),
            Method::Muon => muon_step(state, g, cfg),
            Method::LowRankMomentum => low_rank_momentum_step(state, g, cfg),
            Method::GradientDescent => gradient_descent_step(state, g, cfg),
            Method::VanillaProjectedMoment => vanilla_projected_moment_step(state, g, cfg),
        }
    }

    pub fn uses_rank(self) -> bool {
        matches!(
            self,
            Method::Sumo | Method::LowRankMomentum | Method::VanillaProjectedMoment
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMethod {
    Sumo,
    Adam,
    Shampoo,
    Soap,
    Galore,
}

impl MemoryMethod {
    pub const ALL: [MemoryMethod; 5] = [
        MemoryMethod::Sumo,
        MemoryMethod::Adam,
        MemoryMethod::Shampoo,
        MemoryMethod::Soap,
        MemoryMethod::Galore,
    ];
}

/// Optimizer-state element count for an `m × n` layer. The larger dimension
/// is taken as `m` regardless of argument order.
pub fn optimizer_state_memory(m: u64, n: u64, r: u64, method: MemoryMethod) -> u64 {
    let (m, n) = (m.max(n), m.min(n));
    match method {
        MemoryMethod::Sumo => n * r + m * r,
        MemoryMethod::Adam => 2 * m * n,
        MemoryMethod::Shampoo => m * m + n * n,
        MemoryMethod::Soap => 2 * m * n + 2 * m * m + 2 * n * n,
        MemoryMethod::Galore => 2 * n * r + m * r,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub layer: u64,
    pub step: u64,
    pub weight: MatrixData,
    pub subspace: Option<MatrixData>,
    pub moment: Option<MatrixData>,
    pub previous_update_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: Method,
    pub config: OptimizerConfig,
    pub layers: Vec<LayerCheckpoint>,
}

impl Checkpoint {
    pub fn capture(method: Method, config: &OptimizerConfig, layers: &[LayerState]) -> Self {
        Self {
            method,
            config: config.clone(),
            layers: layers
                .iter()
                .map(|s| LayerCheckpoint {
                    layer: s.layer,
                    step: s.step,
                    weight: MatrixData::from(&s.weight),
                    subspace: s.subspace.as_ref().map(MatrixData::from),
                    moment: s.moment.as_ref().map(MatrixData::from),
                    previous_update_norm: s.previous_update_norm,
                })
                .collect(),
        }
    }

    pub fn restore(&self) -> Result<Vec<LayerState>> {
        self.layers
            .iter()
            .map(|l| {
                Ok(LayerState {
                    weight: l.weight.to_matrix()?,
                    subspace: l.subspace.as_ref().map(MatrixData::to_matrix).transpose()?,
                    moment: l.moment.as_ref().map(MatrixData::to_matrix).transpose()?,
                    previous_update_norm: l.previous_update_norm,
                    step: l.step,
                    layer: l.layer,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, random_orthonormal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_cfg() -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: 0.1,
            limiter_enabled: false,
            projector: Projector::TruncatedSvd,
            rank: 2,
            ..Default::default()
        }
    }

    #[test]
    fn labels_round_trip() {
        for s in [
            "exact_svd",
            "newton_schulz5",
            "newton_schulz:7",
            "muon_quintic5",
            "muon_quintic:3",
        ] {
            assert_eq!(s.parse::<Orthogonalizer>().unwrap().to_string(), s);
        }
        for s in ["truncated_svd", "randomized_svd:4:2", "randomized_svd:0:0"] {
            assert_eq!(s.parse::<Projector>().unwrap().to_string(), s);
        }
        assert_eq!(
            "randomized_svd".parse::<Projector>().unwrap(),
            Projector::RandomizedSvd {
                oversampling: 4,
                power_iterations: 2
            }
        );
        for s in ["every_k", "grad_norm_below:0.5"] {
            assert_eq!(s.parse::<RefreshCriterion>().unwrap().to_string(), s);
        }
        for s in [
            "sumo",
            "muon",
            "low_rank_momentum",
            "gradient_descent",
            "vanilla_projected_moment",
        ] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("newton_schulz:0".parse::<Orthogonalizer>().is_err());
        assert!("svd".parse::<Orthogonalizer>().is_err());
    }

    #[test]
    fn validation_names_fields() {
        let cfg = OptimizerConfig {
            moment_decay: 1.0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "optimizer.moment_decay"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = OptimizerConfig {
            limiter_gamma: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = OptimizerConfig {
            limiter_gamma: 1.0,
            limiter_enabled: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        assert!(OptimizerConfig::default().validate_for_shape(4, 16).is_err());
    }

    #[test]
    fn limiter_cases() {
        let o = Matrix::from_element(1, 4, 1.0); // norm 2
        let (out, fired) = norm_growth_limit(&o, Some(1.0), 1.1);
        assert!(fired);
        assert!((out.norm() - 1.1).abs() < 1e-15);
        let o = Matrix::from_element(1, 1, 1.05);
        let (out, fired) = norm_growth_limit(&o, Some(1.0), 1.1);
        assert!(!fired);
        assert_eq!(out, o);
        let (_, fired) = norm_growth_limit(&o, None, 1.1);
        assert!(!fired);
    }

    #[test]
    fn zero_gradient_pure_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = gaussian_matrix(4, 3, &mut rng);
        let cfg = OptimizerConfig {
            weight_decay: 0.3,
            ..plain_cfg()
        };
        let mut s = LayerState::new(w.clone(), 0);
        sumo_step(&mut s, &Matrix::zeros(4, 3), &cfg).unwrap();
        assert_eq!(s.weight, &w * (1.0 - 0.1 * 0.3));

        let mut s = LayerState::new(w.clone(), 0);
        let report = sumo_step(&mut s, &Matrix::zeros(4, 3), &plain_cfg()).unwrap();
        assert_eq!(s.weight, w);
        assert_eq!(report.orthogonalization_error_estimate, None);
        assert_eq!(s.previous_update_norm, None);
    }

    #[test]
    fn wide_layer_uses_right_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = gaussian_matrix(3, 7, &mut rng);
        let g = gaussian_matrix(3, 7, &mut rng);
        let mut s = LayerState::new(w, 0);
        sumo_step(&mut s, &g, &plain_cfg()).unwrap();
        assert_eq!(s.subspace.as_ref().unwrap().shape(), (7, 2));
        assert_eq!(s.moment.as_ref().unwrap().shape(), (2, 3));
        assert_eq!(s.weight.shape(), (3, 7));
    }

    #[test]
    fn refresh_rotates_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = random_orthonormal(6, 4, &mut rng);
        let q_old = basis.columns(0, 2).into_owned();
        let q_perp = basis.columns(2, 2).into_owned();
        let mut s = LayerState::new(Matrix::zeros(6, 3), 0);
        set_subspace(&mut s, q_old.clone(), 3);
        assert_eq!(s.moment.as_ref().unwrap(), &Matrix::zeros(2, 3));
        let m = gaussian_matrix(2, 3, &mut rng);
        s.moment = Some(m.clone());
        set_subspace(&mut s, q_old, 3);
        assert!((s.moment.as_ref().unwrap() - &m).norm() <= 1e-10);
        set_subspace(&mut s, q_perp, 3);
        assert!(s.moment.as_ref().unwrap().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn muon_diagonal_gradient() {
        let cfg = OptimizerConfig {
            moment_decay: 0.0,
            learning_rate: 0.5,
            ..Default::default()
        };
        let mut s = LayerState::new(Matrix::zeros(2, 2), 0);
        let g = Matrix::from_diagonal(&nalgebra::dvector![5.0, 2.0]);
        muon_step(&mut s, &g, &cfg).unwrap();
        assert!((s.weight + Matrix::identity(2, 2) * 0.5).norm() < 1e-12);
    }

    #[test]
    fn memory_table() {
        assert_eq!(optimizer_state_memory(1024, 512, 8, MemoryMethod::Sumo), 12_288);
        assert_eq!(optimizer_state_memory(2, 2, 1, MemoryMethod::Adam), 8);
        assert_eq!(
            optimizer_state_memory(512, 1024, 8, MemoryMethod::Sumo),
            optimizer_state_memory(1024, 512, 8, MemoryMethod::Sumo)
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = plain_cfg();
        let mut s = LayerState::new(gaussian_matrix(5, 3, &mut rng), 2);
        for _ in 0..3 {
            let g = gaussian_matrix(5, 3, &mut rng);
            sumo_step(&mut s, &g, &cfg).unwrap();
        }
        let ck = Checkpoint::capture(Method::Sumo, &cfg, std::slice::from_ref(&s));
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore().unwrap()[0], s);
    }
}
