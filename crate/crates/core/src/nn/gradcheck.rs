//! Central finite-difference check of [`Network::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Network, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    /// Probes redrawn because a ReLU or max-pool decision flipped inside `±eps`.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients with `(L(p+eps) − L(p−eps)) / 2eps` at `probes`
/// randomly chosen parameters. Losses use training-mode batch norm; the network
/// must not contain active dropout.
pub fn gradient_check(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[u8],
    probes: usize,
    eps: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let tape = net.forward_train(x, &mut scratch)?;
    let base_pattern = tape.switch_pattern();
    let (_, grads) = net.backward(&tape, labels)?;
    let analytic = grads.flat();
    let total = analytic.len();
    if total == 0 {
        return Err(Error::Config("network has no parameters".into()));
    }

    let mut eval = |net: &mut Network<f64>, index: usize, delta: f64| -> Result<(f64, Vec<u32>)> {
        let old = with_param(net, index, |p| {
            let old = *p;
            *p += delta;
            old
        });
        let tape = net.forward_train(x, &mut scratch)?;
        let loss = tape.loss(labels)?;
        with_param(net, index, |p| *p = old);
        Ok((loss, tape.switch_pattern()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { probes: 0, skipped_kinks: 0, max_rel_error: 0.0, max_abs_error: 0.0 };
    let max_attempts = probes * 20;
    let mut attempts = 0;
    while report.probes < probes {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Numeric(format!(
                "only {} of {probes} probes avoided activation kinks",
                report.probes
            )));
        }
        let index = rng.random_range(0..total);
        let (plus, pat_plus) = eval(net, index, eps)?;
        let (minus, pat_minus) = eval(net, index, -eps)?;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[index];
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, floor));
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.probes += 1;
    }
    Ok(report)
}

fn with_param<R>(net: &mut Network<f64>, mut index: usize, f: impl FnOnce(&mut f64) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    for slice in net.param_slices_mut() {
        if index < slice.len() {
            out = f.take().map(|f| f(&mut slice[index]));
            break;
        }
        index -= slice.len();
    }
    net.refresh_effective();
    out.expect("parameter index in range")
}
