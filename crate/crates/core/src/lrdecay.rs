//! LocalUpdateDecay: plateau-triggered joint decay of the client and server
//! learning rates.
//!
//! After every round the aggregated pre-update client loss `ℓ_t` enters a
//! moving window. When the window average fails to beat the best earlier
//! average by `Δ` for `P` eligible rounds in a row, `γ ← αγ` and `η ← βη`,
//! followed by `C` rounds of cooldown. The first `C` rounds are also a
//! cooldown.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::localupdate::{
    diverged, eval_gamma, fmt_f64, inner_loop, metrics_fields, outer_round, round_metrics, with_workers, EtaCache,
    InnerConfig, MinimizerCache, RoundMetrics, RunResult, RunSpec, ScheduleContext, ServerState, CSV_HEADER,
};
use crate::problem::{Client, Population};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_period")]
    pub window: usize,
    #[serde(default = "default_period")]
    pub patience: usize,
    #[serde(default = "default_period")]
    pub cooldown: usize,
}

fn default_delta() -> f64 {
    1e-4
}
fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    0.9
}
fn default_period() -> usize {
    100
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            delta: default_delta(),
            alpha: default_alpha(),
            beta: default_beta(),
            window: default_period(),
            patience: default_period(),
            cooldown: default_period(),
        }
    }
}

impl DecayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "decay.delta must be finite and > 0, got {}",
                self.delta
            )));
        }
        for (name, v) in [("decay.alpha", self.alpha), ("decay.beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.window < 1 {
            return Err(Error::InvalidParameter("decay.window must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidParameter("decay.patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Plateau detector state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayState {
    pub loss_history: VecDeque<f64>,
    /// Best window average so far; `+∞` before the first round.
    pub best_window_avg: f64,
    pub window_avg: f64,
    pub stall_count: usize,
    pub cooldown_remaining: usize,
    pub n_decays: usize,
}

impl DecayState {
    pub fn new(cfg: &DecayConfig) -> Self {
        DecayState {
            loss_history: VecDeque::with_capacity(cfg.window),
            best_window_avg: f64::INFINITY,
            window_avg: f64::NAN,
            stall_count: 0,
            cooldown_remaining: cfg.cooldown,
            n_decays: 0,
        }
    }
}

/// Feeds `ℓ_t` to the detector and reports whether the rates decay now.
pub fn decay_step(state: &mut DecayState, loss: f64, cfg: &DecayConfig) -> bool {
    if state.loss_history.len() == cfg.window {
        state.loss_history.pop_front();
    }
    state.loss_history.push_back(loss);
    let avg = state.loss_history.iter().sum::<f64>() / state.loss_history.len() as f64;
    state.window_avg = avg;
    let mut decayed = false;
    if state.cooldown_remaining > 0 {
        state.cooldown_remaining -= 1;
    } else if avg > state.best_window_avg - cfg.delta {
        state.stall_count += 1;
        if state.stall_count >= cfg.patience {
            decayed = true;
            state.stall_count = 0;
            state.cooldown_remaining = cfg.cooldown;
            state.n_decays += 1;
        }
    } else {
        state.stall_count = 0;
    }
    state.best_window_avg = state.best_window_avg.min(avg);
    decayed
}

/// Exact client loss at `x`, taken before any local step, plus the usual
/// inner-loop output drawn from the same stream.
pub fn inner_loop_with_loss<R: Rng + ?Sized>(
    cl: &Client,
    x: &Vector,
    cfg: &InnerConfig,
    rng: &mut R,
) -> Result<(f64, Vector)> {
    let loss = cl.loss(x)?;
    let q = inner_loop(cl, x, cfg, rng)?;
    Ok((loss, q))
}

/// Detector state recorded after each round.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub window_avg_loss: f64,
    pub best_window_avg: f64,
    pub stall_count: usize,
    pub cooldown_remaining: usize,
    pub n_decays: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRunResult {
    pub run: RunResult,
    pub decay: Vec<DecayRow>,
}

impl DecayRunResult {
    /// Rounds at whose end the rates decayed.
    pub fn decay_rounds(&self) -> Vec<usize> {
        self.run.metrics.iter().filter(|m| m.decayed).map(|m| m.round).collect()
    }
}

/// LocalUpdate with plateau decay. The base schedules of `spec` give
/// `γ_0(t)` and `η_0(t)`; round `t` uses `γ_0(t)·α^n` and `η_0(t)·β^n` where
/// `n` counts the decays before `t`.
pub fn run_decay(pop: &Population, spec: &RunSpec, cfg: &DecayConfig) -> Result<DecayRunResult> {
    spec.validate(pop)?;
    cfg.validate()?;
    with_workers(spec.workers, || run_decay_inner(pop, spec, cfg))?
}

fn run_decay_inner(pop: &Population, spec: &RunSpec, cfg: &DecayConfig) -> Result<DecayRunResult> {
    let params = spec.round_params();
    let ctx = ScheduleContext::from_population(pop, &spec.theta);
    let mut server = ServerState::new(spec.server, spec.mode, pop.dim())?;
    let mut cache = MinimizerCache::new();
    let mut eta_cache = EtaCache::new();
    let mut state = DecayState::new(cfg);
    let mut x = spec.x0.clone();
    let mut metrics: Vec<RoundMetrics> = Vec::with_capacity(spec.rounds);
    let mut rows = Vec::with_capacity(spec.rounds);
    for t in 1..=spec.rounds {
        if diverged(&x) {
            return Ok(DecayRunResult {
                run: RunResult {
                    metrics,
                    final_x: x,
                    diverged_at: Some(t),
                },
                decay: rows,
            });
        }
        let n = state.n_decays as i32;
        let gamma = eval_gamma(&spec.gamma, t, &ctx)? * cfg.alpha.powi(n);
        let eta = eta_cache.eval(&spec.eta, t, gamma, &ctx)? * cfg.beta.powi(n);
        let out = outer_round(pop, &x, gamma, eta, &params, &mut server, t)?;
        let mut m = round_metrics(pop, &spec.theta, &mut cache, t, gamma, eta, &x, &out)?;
        m.decayed = decay_step(&mut state, out.mean_client_loss, cfg);
        metrics.push(m);
        rows.push(DecayRow {
            window_avg_loss: state.window_avg,
            best_window_avg: state.best_window_avg,
            stall_count: state.stall_count,
            cooldown_remaining: state.cooldown_remaining,
            n_decays: state.n_decays,
        });
        x = out.x_next;
    }
    let diverged_at = diverged(&x).then_some(spec.rounds + 1);
    Ok(DecayRunResult {
        run: RunResult {
            metrics,
            final_x: x,
            diverged_at,
        },
        decay: rows,
    })
}

pub const DECAY_CSV_EXTRA: &str = "window_avg_loss,best_window_avg,stall_count,cooldown_remaining,n_decays";

pub fn write_decay_csv<W: Write>(w: &mut W, result: &DecayRunResult) -> Result<()> {
    writeln!(w, "{CSV_HEADER},{DECAY_CSV_EXTRA}")?;
    for (m, d) in result.run.metrics.iter().zip(&result.decay) {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            metrics_fields(m),
            fmt_f64(d.window_avg_loss),
            fmt_f64(d.best_window_avg),
            d.stall_count,
            d.cooldown_remaining,
            d.n_decays
        )?;
    }
    if let Some(t) = result.run.diverged_at {
        writeln!(w, "# diverged at round {t}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localupdate::{run, write_metrics_csv, Schedule};
    use crate::problem::{make_synthetic, make_two_point, QuadraticExample, SyntheticParams};
    use crate::rng::Stream;
    use crate::surrogate::ThetaWeights;

    fn cfg(w: usize, p: usize, c: usize) -> DecayConfig {
        DecayConfig {
            window: w,
            patience: p,
            cooldown: c,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(DecayConfig::default().validate().is_ok());
        assert!(DecayConfig {
            delta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DecayConfig {
            alpha: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DecayConfig {
            beta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(cfg(0, 1, 0).validate().is_err());
        assert!(cfg(1, 0, 0).validate().is_err());
        assert!(cfg(1, 1, 0).validate().is_ok());
        let parsed: DecayConfig = serde_json::from_str(r#"{"window": 5}"#).unwrap();
        assert_eq!(
            parsed,
            DecayConfig {
                window: 5,
                ..Default::default()
            }
        );
    }

    #[test]
    fn improving_losses_never_decay() {
        let c = cfg(3, 1, 0);
        let mut s = DecayState::new(&c);
        for t in 0..200 {
            assert!(!decay_step(&mut s, 100.0 - t as f64 * 0.01, &c));
        }
    }

    #[test]
    fn flat_losses_decay_on_round_two() {
        let c = cfg(1, 1, 0);
        let mut s = DecayState::new(&c);
        assert!(!decay_step(&mut s, 1.0, &c));
        assert!(decay_step(&mut s, 1.0, &c));
        assert_eq!(s.n_decays, 1);
    }

    #[test]
    fn initial_cooldown_blocks_decay() {
        let c = cfg(1, 1, 5);
        let mut s = DecayState::new(&c);
        let fired: Vec<bool> = (0..8).map(|_| decay_step(&mut s, 1.0, &c)).collect();
        assert_eq!(fired, vec![false, false, false, false, false, true, false, false]);
    }

    #[test]
    fn decays_are_spaced_by_cooldown_and_patience() {
        let c = DecayConfig {
            delta: 1e9,
            ..cfg(2, 3, 4)
        };
        let mut s = DecayState::new(&c);
        let rounds: Vec<usize> = (1..=40).filter(|_| decay_step(&mut s, 1.0, &c)).collect();
        // 4 cooldown rounds, then 3 stalled rounds, repeated
        assert_eq!(rounds, vec![7, 14, 21, 28, 35]);
    }

    #[test]
    fn window_average_and_best() {
        let c = cfg(3, 10, 0);
        let mut s = DecayState::new(&c);
        let losses = [5.0, 4.0, 6.0, 1.0, 2.0];
        let mut prev_best = f64::INFINITY;
        for (t, &l) in losses.iter().enumerate() {
            decay_step(&mut s, l, &c);
            let lo = (t + 1).saturating_sub(3);
            let want: f64 = losses[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64;
            assert!((s.window_avg - want).abs() < 1e-12);
            assert!(s.best_window_avg <= prev_best);
            prev_best = s.best_window_avg;
        }
    }

    #[test]
    fn loss_and_output() {
        let pop = make_two_point();
        let th = ThetaWeights::fedavg(2).unwrap();
        for gamma in [0.0, 0.1, 0.4] {
            let c = InnerConfig::new(gamma, th.clone(), 1).unwrap();
            let (l, _) =
                inner_loop_with_loss(pop.client(1), &Vector::from_scalar(1.0), &c, &mut Stream::new(0)).unwrap();
            assert!((l - 0.25).abs() < 1e-15);
        }
        let cl = Client::single(QuadraticExample::scalar(3.0, 0.2)).unwrap();
        let c = InnerConfig::new(0.1, th, 1).unwrap();
        let (l, q) = inner_loop_with_loss(&cl, &Vector::from_scalar(0.2), &c, &mut Stream::new(0)).unwrap();
        assert_eq!((l, q.get(0)), (0.0, 0.0));

        let pop = make_synthetic(&SyntheticParams::default()).unwrap();
        let c = InnerConfig::new(0.1, ThetaWeights::fedavg(3).unwrap(), 2).unwrap();
        let x = Vector::zeros(pop.dim());
        let (_, q1) = inner_loop_with_loss(pop.client(2), &x, &c, &mut Stream::new(4)).unwrap();
        let q2 = inner_loop(pop.client(2), &x, &c, &mut Stream::new(4)).unwrap();
        assert_eq!(q1, q2);
    }

    fn two_point_spec(rounds: usize) -> (Population, RunSpec) {
        let pop = make_two_point();
        let spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2).unwrap(), 0.5, 0.1, rounds);
        (pop, spec)
    }

    #[test]
    fn rates_follow_decay_count() {
        let (pop, spec) = two_point_spec(300);
        let c = cfg(5, 5, 5);
        let r = run_decay(&pop, &spec, &c).unwrap();
        assert!(r.decay.last().unwrap().n_decays > 0);
        let mut n = 0;
        for (m, d) in r.run.metrics.iter().zip(&r.decay) {
            assert_eq!(m.gamma, 0.5 * 0.1f64.powi(n));
            assert_eq!(m.eta, 0.1 * 0.9f64.powi(n));
            n = d.n_decays as i32;
        }
    }

    #[test]
    fn full_participation_window_one_loss_is_true_loss() {
        let pop = Population::new(vec![
            (Client::single(QuadraticExample::scalar(1.0, 0.0)).unwrap(), 0.3),
            (
                Client::new(vec![
                    (QuadraticExample::scalar(2.0, 0.0), 0.5),
                    (QuadraticExample::scalar(2.0, 2.0), 0.5),
                ])
                .unwrap(),
                0.7,
            ),
        ])
        .unwrap();
        let mut spec = RunSpec::simple(&pop, ThetaWeights::fedavg(2).unwrap(), 0.1, 0.1, 30);
        spec.x0 = Vector::from_scalar(3.0);
        let r = run_decay(&pop, &spec, &cfg(1, 2, 0)).unwrap();
        for (m, d) in r.run.metrics.iter().zip(&r.decay) {
            assert!((d.window_avg_loss - m.true_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_trajectory() {
        let pop = make_synthetic(&SyntheticParams {
            n_clients: 6,
            ..Default::default()
        })
        .unwrap();
        let mut spec = RunSpec::simple(&pop, ThetaWeights::fedavg(3).unwrap(), 0.1, 0.1, 120);
        spec.clients_per_round = 3;
        spec.batch_size = 2;
        spec.master_seed = 8;
        let c = DecayConfig {
            delta: 1e-3,
            ..cfg(3, 4, 5)
        };
        let r = run_decay(&pop, &spec, &c).unwrap();
        let rounds = r.decay_rounds();
        assert!(!rounds.is_empty());
        let mut replay = spec.clone();
        replay.gamma = Schedule::StepDecay {
            initial: 0.1,
            factor: c.alpha,
            rounds: rounds.clone(),
        };
        replay.eta = Schedule::StepDecay {
            initial: 0.1,
            factor: c.beta,
            rounds,
        };
        let p = run(&pop, &replay).unwrap();
        assert_eq!(p.final_x, r.run.final_x);
        for (a, b) in p.metrics.iter().zip(&r.run.metrics) {
            assert_eq!((a.gamma, a.eta, a.true_loss), (b.gamma, b.eta, b.true_loss));
        }
    }

    #[test]
    fn decay_beats_fixed_gamma_on_two_point() {
        let (pop, spec) = two_point_spec(2000);
        let fixed = run(&pop, &spec).unwrap();
        let dec = run_decay(&pop, &spec, &cfg(5, 5, 5)).unwrap();
        let x_star = pop.stats().x_star.get(0);
        let d_fixed = (fixed.final_x.get(0) - x_star).abs();
        let d_dec = (dec.run.final_x.get(0) - x_star).abs();
        assert!(d_dec < d_fixed);
        assert!(d_dec < 0.1 * 0.5 / (3.0 * 3.5));
    }

    #[test]
    fn csv_has_extra_columns() {
        let (pop, spec) = two_point_spec(20);
        let r = run_decay(&pop, &spec, &cfg(2, 2, 1)).unwrap();
        let mut buf = Vec::new();
        write_decay_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.ends_with(DECAY_CSV_EXTRA));
        let cols = header.split(',').count();
        assert!(lines.all(|l| l.split(',').count() == cols));
        let mut plain = Vec::new();
        write_metrics_csv(&mut plain, &r.run).unwrap();
        assert!(plain.len() < text.len());
    }
}
