//! Closed-form queueing and speedup estimates, plus a discrete-event
//! M/D/1 simulator used to cross-check the analytic response time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("utilization {0} must be below 1 (offered load saturates the server)")]
    Saturated(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Mean response time (wait + service) of an M/D/1 queue with arrival rate
/// `lambda` and fixed service time `tau`:
/// `lambda * tau^2 / (2 * (1 - lambda * tau)) + tau`.
pub fn md1_response_time(lambda: f64, tau: f64) -> Result<f64, QueueError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(QueueError::Parameter(format!(
            "arrival rate {lambda} must be nonnegative"
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(QueueError::Parameter(format!(
            "service time {tau} must be positive"
        )));
    }
    let rho = lambda * tau;
    if rho >= 1.0 {
        return Err(QueueError::Saturated(rho));
    }
    Ok(lambda * tau * tau / (2.0 * (1.0 - rho)) + tau)
}

/// Amdahl speedup of a workload whose parallelizable fraction is `alpha`
/// when spread over `k` units: `1 / ((1 - alpha) + alpha / k)`.
pub fn amdahl_speedup(alpha: f64, k: f64) -> Result<f64, QueueError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(QueueError::Parameter(format!(
            "parallel fraction {alpha} must lie in [0, 1]"
        )));
    }
    if !(k.is_finite() && k >= 1.0) {
        return Err(QueueError::Parameter(format!(
            "unit count {k} must be at least 1"
        )));
    }
    Ok(1.0 / ((1.0 - alpha) + alpha / k))
}

/// Discrete-event M/D/1 run: Poisson arrivals at rate `lambda`, deterministic
/// service `tau`, FCFS. Returns the mean response time over `arrivals` jobs.
pub fn simulate_md1(
    lambda: f64,
    tau: f64,
    arrivals: usize,
    seed: u64,
) -> Result<f64, QueueError> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(QueueError::Parameter(format!(
            "arrival rate {lambda} must be positive"
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(QueueError::Parameter(format!(
            "service time {tau} must be positive"
        )));
    }
    if arrivals == 0 {
        return Err(QueueError::Parameter("need at least one arrival".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inter = Exp::new(lambda).expect("lambda validated positive");
    let mut clock = 0.0f64;
    let mut last_departure = 0.0f64;
    let mut total_response = 0.0f64;
    for _ in 0..arrivals {
        clock += inter.sample(&mut rng);
        let start = clock.max(last_departure);
        last_departure = start + tau;
        total_response += last_departure - clock;
    }
    Ok(total_response / arrivals as f64)
}
