//! Consensus ADMM with an acyclicity-constrained global variable.
//!
//! Each client owns a [`LocalModel`] holding its private data and solves the
//! proximal subproblem around the broadcast global parameters. The server
//! owns a [`GlobalModel`] that solves the acyclicity-penalized consensus
//! step and tracks the multipliers. Parameters travel as flat `f64` vectors;
//! nothing else crosses the boundary.
//!
//! Round `t` (starting from `W¹`, `α¹ = 0`, `β_k¹ = 0`):
//!
//! 1. every client computes `B_k^{t+1}` from `W^t` and sends it;
//! 2. the server computes `W^{t+1}`, then
//!    `α ← α + ρ1 h(W^{t+1})`, `β_k ← β_k + ρ2 (B_k^{t+1} − W^{t+1})`,
//!    `ρ1 ← min(γ1 ρ1, ρ_max)`, `ρ2 ← min(γ2 ρ2, ρ_max)`;
//! 3. the server broadcasts `W^{t+1}`; clients apply the same `β_k`/`ρ2`
//!    updates to their own copies.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    pub rho1_init: f64,
    pub rho2_init: f64,
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub max_rounds: usize,
    pub rho_max: f64,
    pub h_tolerance: f64,
    /// Defaults to `1e-4 · d` when unset.
    pub consensus_tolerance: Option<f64>,
    pub threshold_tau: f64,
    /// Inner solver for the server's global step.
    pub global_solver: SolverOptions,
    /// Inner solver for client steps without a closed form.
    pub local_solver: SolverOptions,
    /// Hidden units of the estimation MLP (nonlinear family only).
    pub hidden_units: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self::linear()
    }
}

impl AdmmConfig {
    pub fn linear() -> Self {
        Self {
            rho1_init: 1e-3,
            rho2_init: 1e-3,
            lambda: 0.01,
            gamma1: 1.75,
            gamma2: 1.25,
            max_rounds: 200,
            rho_max: 1e16,
            h_tolerance: 1e-8,
            consensus_tolerance: None,
            threshold_tau: 0.3,
            global_solver: SolverOptions::default()
                .with_max_iterations(100)
                .with_gradient_tolerance(1e-6),
            local_solver: SolverOptions::default()
                .with_max_iterations(100)
                .with_gradient_tolerance(1e-6),
            hidden_units: 10,
        }
    }

    pub fn nonlinear() -> Self {
        Self {
            rho1_init: 0.1,
            rho2_init: 0.1,
            lambda: 1e-3,
            ..Self::linear()
        }
    }

    pub fn consensus_tolerance_for(&self, d: usize) -> f64 {
        self.consensus_tolerance.unwrap_or(1e-4 * d as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho1_init", self.rho1_init),
            ("rho2_init", self.rho2_init),
            ("rho_max", self.rho_max),
            ("h_tolerance", self.h_tolerance),
            ("threshold_tau", self.threshold_tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.gamma1 > 1.0) || !(self.gamma2 > 1.0) {
            return Err(Error::Config("gamma1 and gamma2 must exceed 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if let Some(tol) = self.consensus_tolerance {
            if !(tol > 0.0) {
                return Err(Error::Config("consensus_tolerance must be positive".into()));
            }
        }
        if self.hidden_units == 0 {
            return Err(Error::Config("hidden_units must be at least 1".into()));
        }
        self.global_solver.validate()?;
        self.local_solver.validate()
    }
}

/// Client-side half of the splitting.
pub trait LocalModel: Send {
    fn param_len(&self) -> usize;

    /// `argmin_θ ℓ_k(θ) + ⟨β, θ − global⟩ + (ρ2/2)‖θ − global‖²`.
    fn local_update(&mut self, global: &[f64], beta: &[f64], rho2: f64) -> Result<Vec<f64>>;
}

/// Multiplier and penalty values the global step depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTerms {
    pub alpha: f64,
    pub rho1: f64,
    pub rho2: f64,
}

#[derive(Debug, Clone)]
pub struct GlobalStep {
    pub params: Vec<f64>,
    pub objective: f64,
}

/// Server-side half of the splitting.
pub trait GlobalModel: Send + Sync {
    fn param_len(&self) -> usize;

    fn node_count(&self) -> usize;

    /// `W¹`.
    fn initial_global(&self) -> Vec<f64>;

    /// Weighted adjacency read off the global parameters.
    fn adjacency(&self, global: &[f64]) -> Result<Matrix>;

    fn acyclicity(&self, global: &[f64]) -> Result<f64> {
        crate::numerics::acyclicity(&self.adjacency(global)?)
    }

    /// Minimizes `λ·penalty(W) + α h(W) + (ρ1/2) h(W)² + Σ_k ⟨β_k, B_k − W⟩ + (ρ2/2) Σ_k ‖B_k − W‖²`
    /// starting from `warm`.
    fn global_update(
        &self,
        warm: &[f64],
        locals: &[Vec<f64>],
        betas: &[Vec<f64>],
        terms: GlobalTerms,
    ) -> Result<GlobalStep>;
}

/// Client-aggregated quantities for the consensus terms
/// `Σ_k ⟨β_k, B_k − W⟩ + (ρ2/2) Σ_k ‖B_k − W‖²`.
///
/// The quadratic is kept as `K‖W − B̄‖² + Σ_k ‖B_k − B̄‖²` so that large
/// `ρ2` does not amplify cancellation error.
pub(crate) struct ConsensusSums {
    client_count: usize,
    mean_local: Vec<f64>,
    beta_sum: Vec<f64>,
    beta_dot_locals: f64,
    spread: f64,
}

impl ConsensusSums {
    pub(crate) fn new(locals: &[Vec<f64>], betas: &[Vec<f64>], p: usize) -> Self {
        let k = locals.len().max(1) as f64;
        let mut mean_local = vec![0.0; p];
        let mut beta_sum = vec![0.0; p];
        let mut beta_dot_locals = 0.0;
        for (local, beta) in locals.iter().zip(betas) {
            for idx in 0..p {
                mean_local[idx] += local[idx];
                beta_sum[idx] += beta[idx];
                beta_dot_locals += beta[idx] * local[idx];
            }
        }
        mean_local.iter_mut().for_each(|m| *m /= k);
        let spread = locals
            .iter()
            .map(|l| {
                l.iter()
                    .zip(&mean_local)
                    .map(|(a, m)| (a - m).powi(2))
                    .sum::<f64>()
            })
            .sum();
        Self {
            client_count: locals.len(),
            mean_local,
            beta_sum,
            beta_dot_locals,
            spread,
        }
    }

    /// Returns the consensus terms at `w` and overwrites `grad` with their
    /// gradient.
    pub(crate) fn value_and_grad(&self, w: &[f64], rho2: f64, grad: &mut [f64]) -> f64 {
        let k = self.client_count as f64;
        let mut linear = 0.0;
        let mut dev_sq = 0.0;
        for (idx, g) in grad.iter_mut().enumerate() {
            let dev = w[idx] - self.mean_local[idx];
            linear += self.beta_sum[idx] * w[idx];
            dev_sq += dev * dev;
            *g = rho2 * k * dev - self.beta_sum[idx];
        }
        (self.beta_dot_locals - linear) + 0.5 * rho2 * (k * dev_sq + self.spread)
    }
}

/// Per-client ADMM state: the private model, multiplier copy and `ρ2`.
#[derive(Debug)]
pub struct ConsensusClient<L> {
    pub client_id: u32,
    pub model: L,
    pub beta: Vec<f64>,
    pub rho2: f64,
    pub local: Option<Vec<f64>>,
    gamma2: f64,
    rho_max: f64,
}

impl<L: LocalModel> ConsensusClient<L> {
    pub fn new(client_id: u32, model: L, config: &AdmmConfig) -> Self {
        let p = model.param_len();
        Self {
            client_id,
            model,
            beta: vec![0.0; p],
            rho2: config.rho2_init,
            local: None,
            gamma2: config.gamma2,
            rho_max: config.rho_max,
        }
    }

    /// Applies `β ← β + ρ2 (B − W)` and grows `ρ2`, if a local step has
    /// been taken since the last broadcast.
    pub fn absorb_global(&mut self, global: &[f64]) {
        if let Some(local) = self.local.take() {
            for ((b, l), g) in self.beta.iter_mut().zip(&local).zip(global) {
                *b += self.rho2 * (l - g);
            }
            self.rho2 = (self.gamma2 * self.rho2).min(self.rho_max);
            self.local = Some(local);
        }
    }

    /// Handles a broadcast: dual update for the previous round, then a
    /// fresh local step around `global`.
    pub fn on_broadcast(&mut self, global: &[f64]) -> Result<Vec<f64>> {
        if global.len() != self.model.param_len() {
            return Err(Error::Dimension(format!(
                "client {}: broadcast has {} parameters, expected {}",
                self.client_id,
                global.len(),
                self.model.param_len()
            )));
        }
        self.absorb_global(global);
        let local = self.model.local_update(global, &self.beta, self.rho2)?;
        self.local = Some(local.clone());
        Ok(local)
    }

    /// Handles the final broadcast: dual update only.
    pub fn on_final(&mut self, global: &[f64]) {
        self.absorb_global(global);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub h: f64,
    pub consensus_residual: f64,
    pub objective: f64,
    /// Penalties used during this round.
    pub rho1: f64,
    pub rho2: f64,
    pub wall_ms: f64,
    pub adjacency_norm: f64,
    #[serde(skip)]
    pub global: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub family: ModelFamily,
    pub h_tolerance: f64,
    pub consensus_tolerance: f64,
    pub converged: bool,
    pub records: Vec<RoundRecord>,
}

impl ConvergenceTrace {
    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    /// Global iterates, one per round.
    pub fn globals(&self) -> impl Iterator<Item = &[f64]> {
        self.records.iter().map(|r| r.global.as_slice())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "round",
            "h",
            "consensus_residual",
            "objective",
            "rho1",
            "rho2",
            "wall_ms",
        ];
        if self.family == ModelFamily::Mlp {
            header.push("a_norm");
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.round.to_string(),
                format!("{:e}", r.h),
                format!("{:e}", r.consensus_residual),
                format!("{:e}", r.objective),
                format!("{:e}", r.rho1),
                format!("{:e}", r.rho2),
                format!("{:.3}", r.wall_ms),
            ];
            if self.family == ModelFamily::Mlp {
                row.push(format!("{:e}", r.adjacency_norm));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(Error::Transport)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Server-side ADMM state.
#[derive(Debug)]
pub struct ConsensusServer<G> {
    pub model: G,
    pub global: Vec<f64>,
    pub alpha: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub betas: Vec<Vec<f64>>,
    pub round: usize,
    config: AdmmConfig,
    consensus_tolerance: f64,
    trace: ConvergenceTrace,
    started: Instant,
}

pub struct StepOutcome {
    pub record: RoundRecord,
    pub finished: bool,
}

impl<G: GlobalModel> ConsensusServer<G> {
    pub fn new(
        model: G,
        client_count: usize,
        config: &AdmmConfig,
        family: ModelFamily,
    ) -> Result<Self> {
        config.validate()?;
        if client_count == 0 {
            return Err(Error::Argument("at least one client is required".into()));
        }
        let p = model.param_len();
        let consensus_tolerance = config.consensus_tolerance_for(model.node_count());
        Ok(Self {
            global: model.initial_global(),
            model,
            alpha: 0.0,
            rho1: config.rho1_init,
            rho2: config.rho2_init,
            betas: vec![vec![0.0; p]; client_count],
            round: 0,
            config: config.clone(),
            consensus_tolerance,
            trace: ConvergenceTrace {
                family,
                h_tolerance: config.h_tolerance,
                consensus_tolerance,
                converged: false,
                records: Vec::new(),
            },
            started: Instant::now(),
        })
    }

    pub fn client_count(&self) -> usize {
        self.betas.len()
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.config
    }

    pub fn trace(&self) -> &ConvergenceTrace {
        &self.trace
    }

    pub fn into_parts(self) -> (G, Vec<f64>, ConvergenceTrace) {
        (self.model, self.global, self.trace)
    }

    /// Runs the global step and the multiplier/penalty updates for one
    /// round, given every client's local parameters in client-id order.
    pub fn step(&mut self, locals: &[Vec<f64>]) -> Result<StepOutcome> {
        if locals.len() != self.betas.len() {
            return Err(Error::Argument(format!(
                "expected {} local updates, got {}",
                self.betas.len(),
                locals.len()
            )));
        }
        let p = self.model.param_len();
        if let Some(bad) = locals.iter().position(|l| l.len() != p) {
            return Err(Error::Dimension(format!(
                "client {bad} sent {} parameters, expected {p}",
                locals[bad].len()
            )));
        }
        let round_start = Instant::now();
        let round = self.round + 1;
        let terms = GlobalTerms {
            alpha: self.alpha,
            rho1: self.rho1,
            rho2: self.rho2,
        };
        let step = self
            .model
            .global_update(&self.global, locals, &self.betas, terms)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("round {round}: {msg}")),
                other => other,
            })?;
        let new_global = step.params;
        let adjacency = self.model.adjacency(&new_global)?;
        let h = crate::numerics::acyclicity(&adjacency)?;

        self.alpha += self.rho1 * h;
        let mut residual: f64 = 0.0;
        for (beta, local) in self.betas.iter_mut().zip(locals) {
            let mut sq = 0.0;
            for ((b, l), g) in beta.iter_mut().zip(local).zip(&new_global) {
                let r = l - g;
                *b += self.rho2 * r;
                sq += r * r;
            }
            residual = residual.max(sq.sqrt());
        }
        let record = RoundRecord {
            round,
            h,
            consensus_residual: residual,
            objective: step.objective,
            rho1: self.rho1,
            rho2: self.rho2,
            wall_ms: round_start.elapsed().as_secs_f64() * 1e3,
            adjacency_norm: adjacency.frobenius_norm(),
            global: new_global.clone(),
        };
        self.rho1 = (self.config.gamma1 * self.rho1).min(self.config.rho_max);
        self.rho2 = (self.config.gamma2 * self.rho2).min(self.config.rho_max);
        self.global = new_global;
        self.round = round;

        let converged = h <= self.config.h_tolerance && residual <= self.consensus_tolerance;
        let finished = converged || round >= self.config.max_rounds;
        if finished {
            self.trace.converged = converged;
        }
        self.trace.records.push(record.clone());
        log::debug!(
            "round {round}: h={h:e} residual={residual:e} rho1={:e} rho2={:e}",
            record.rho1,
            record.rho2
        );
        Ok(StepOutcome { record, finished })
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1e3
    }
}

/// Result of a consensus run.
#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub global: Vec<f64>,
    pub adjacency: Matrix,
    pub trace: ConvergenceTrace,
}

/// Runs the full loop in one process, client steps in parallel.
pub fn run_consensus<L, G>(
    clients: &mut [ConsensusClient<L>],
    mut server: ConsensusServer<G>,
) -> Result<ConsensusOutcome>
where
    L: LocalModel,
    G: GlobalModel,
{
    if clients.len() != server.client_count() {
        return Err(Error::Argument(format!(
            "server expects {} clients, got {}",
            server.client_count(),
            clients.len()
        )));
    }
    let mut global = server.global.clone();
    loop {
        let locals = clients
            .par_iter_mut()
            .map(|c| c.on_broadcast(&global))
            .collect::<Result<Vec<_>>>()?;
        let outcome = server.step(&locals)?;
        global = server.global.clone();
        if outcome.finished {
            clients.iter_mut().for_each(|c| c.on_final(&global));
            break;
        }
    }
    let adjacency = server.model.adjacency(&global)?;
    let (_, global, trace) = server.into_parts();
    Ok(ConsensusOutcome {
        global,
        adjacency,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar toy problem: client k minimizes ½(θ − c_k)², no acyclicity.
    struct Quadratic {
        target: f64,
    }

    impl LocalModel for Quadratic {
        fn param_len(&self) -> usize {
            1
        }

        fn local_update(&mut self, global: &[f64], beta: &[f64], rho2: f64) -> Result<Vec<f64>> {
            Ok(vec![
                (self.target - beta[0] + rho2 * global[0]) / (1.0 + rho2),
            ])
        }
    }

    struct Averager;

    impl GlobalModel for Averager {
        fn param_len(&self) -> usize {
            1
        }

        fn node_count(&self) -> usize {
            1
        }

        fn initial_global(&self) -> Vec<f64> {
            vec![0.0]
        }

        fn adjacency(&self, _: &[f64]) -> Result<Matrix> {
            Ok(Matrix::zeros(1, 1))
        }

        fn global_update(
            &self,
            _warm: &[f64],
            locals: &[Vec<f64>],
            betas: &[Vec<f64>],
            terms: GlobalTerms,
        ) -> Result<GlobalStep> {
            let k = locals.len() as f64;
            let w = locals
                .iter()
                .zip(betas)
                .map(|(l, b)| l[0] + b[0] / terms.rho2)
                .sum::<f64>()
                / k;
            Ok(GlobalStep {
                params: vec![w],
                objective: 0.0,
            })
        }
    }

    #[test]
    fn consensus_reaches_the_average() {
        let config = AdmmConfig {
            rho1_init: 1.0,
            rho2_init: 1.0,
            gamma1: 1.01,
            gamma2: 1.01,
            consensus_tolerance: Some(1e-9),
            ..AdmmConfig::linear()
        };
        let mut clients: Vec<_> = [1.0, 2.0, 6.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| ConsensusClient::new(i as u32, Quadratic { target: t }, &config))
            .collect();
        let server = ConsensusServer::new(Averager, 3, &config, ModelFamily::Linear).unwrap();
        let out = run_consensus(&mut clients, server).unwrap();
        assert!((out.global[0] - 3.0).abs() < 1e-6, "{:?}", out.global);
        assert!(out.trace.converged);
        // Multipliers sum to zero at a consensus optimum of this problem.
        let beta_sum: f64 = clients.iter().map(|c| c.beta[0]).sum();
        assert!(beta_sum.abs() < 1e-6);
    }

    #[test]
    fn penalties_grow_geometrically_and_cap() {
        let config = AdmmConfig {
            rho1_init: 1.0,
            rho2_init: 1.0,
            rho_max: 10.0,
            max_rounds: 12,
            consensus_tolerance: Some(1e-300),
            ..AdmmConfig::linear()
        };
        let mut clients = vec![
            ConsensusClient::new(0, Quadratic { target: 1.0 }, &config),
            ConsensusClient::new(1, Quadratic { target: -1.0 }, &config),
        ];
        let server = ConsensusServer::new(Averager, 2, &config, ModelFamily::Linear).unwrap();
        let out = run_consensus(&mut clients, server).unwrap();
        let recs = &out.trace.records;
        assert_eq!(recs.len(), 12);
        for pair in recs.windows(2) {
            assert_eq!(pair[1].rho1, (pair[0].rho1 * 1.75).min(10.0));
            assert_eq!(pair[1].rho2, (pair[0].rho2 * 1.25).min(10.0));
        }
        assert_eq!(recs.last().unwrap().rho1, 10.0);
        // Clients track the same ρ2 schedule as the server.
        assert_eq!(
            clients[0].rho2,
            (recs.last().unwrap().rho2 * 1.25).min(10.0)
        );
    }

    #[test]
    fn config_validation() {
        assert!(AdmmConfig::linear().validate().is_ok());
        assert!(AdmmConfig::nonlinear().validate().is_ok());
        let bad = AdmmConfig {
            gamma1: 1.0,
            ..AdmmConfig::linear()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = AdmmConfig {
            rho2_init: 0.0,
            ..AdmmConfig::linear()
        };
        assert!(bad.validate().is_err());
        assert_eq!(AdmmConfig::linear().consensus_tolerance_for(20), 2e-3);
    }

    #[test]
    fn step_rejects_wrong_client_count() {
        let config = AdmmConfig::linear();
        let mut server = ConsensusServer::new(Averager, 2, &config, ModelFamily::Linear).unwrap();
        assert!(server.step(&[vec![1.0]]).is_err());
        assert!(server.step(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
