use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, TensorError, Var};

/// A scalar-valued function that can be recorded on a tape of any precision.
pub trait Differentiable {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, applied in f64.
    pub step: f64,
    /// Coordinates sampled per input; 0 checks every coordinate.
    pub max_coords: usize,
    pub seed: u64,
    /// When set, a coordinate whose one-sided differences disagree by more
    /// than this fraction of the gradient scale has a kink within one step
    /// and is skipped instead of compared.
    pub kink_threshold: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            max_coords: 0,
            seed: 0,
            kink_threshold: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(‖numeric‖∞, ‖analytic‖∞)` over the
    /// checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates dropped by the kink test.
    pub skipped: usize,
    /// `(input, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn eval_f64<F: Differentiable>(f: &F, point: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite {
            op: "grad_check",
            detail: "function value".into(),
        });
    }
    Ok(v)
}

/// Compares the reverse-mode gradient computed in precision `T` with a
/// central finite difference evaluated in f64.
pub fn grad_check<T: Real, F: Differentiable>(
    f: &F,
    point: &[Tensor<f64>],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.cast(), true)).collect();
    let out = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let center = match config.kink_threshold {
        Some(_) => Some(eval_f64(f, point)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs = Vec::new();
    for (ii, input) in point.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ii]);
        let n = input.numel();
        let idx: Vec<usize> = if config.max_coords == 0 || n <= config.max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, config.max_coords).into_vec()
        };
        for j in idx {
            let mut plus = point.to_vec();
            plus[ii].data_mut()[j] += config.step;
            let mut minus = point.to_vec();
            minus[ii].data_mut()[j] -= config.step;
            let (fp, fm) = (eval_f64(f, &plus)?, eval_f64(f, &minus)?);
            let numeric = (fp - fm) / (2.0 * config.step);
            // forward minus backward one-sided slope
            let bend = center.map_or(0.0, |c| ((fp - c) - (c - fm)) / config.step);
            let a = analytic.data()[j].as_f64();
            if !a.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "grad_check",
                    detail: format!("analytic gradient of input {} at {}", ii, j),
                });
            }
            pairs.push((ii, j, a, numeric, bend));
        }
    }
    let scale = pairs
        .iter()
        .fold(1e-12f64, |s, &(_, _, a, n, _)| s.max(a.abs()).max(n.abs()));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for &(ii, j, a, n, bend) in &pairs {
        if config
            .kink_threshold
            .is_some_and(|k| bend.abs() > k * scale)
        {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let e = (a - n).abs() / scale;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((ii, j, a, n));
        }
    }
    Ok(report)
}
