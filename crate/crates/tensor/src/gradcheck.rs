//! Central-difference verification of analytic gradients. Runs at `f64` with
//! batch norm frozen in eval mode; the loss builder must be deterministic.

use crate::error::{Result, TensorError};
use crate::params::ParameterSet;
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::session::{Mode, Session};
use crate::tape::NodeId;

/// Adds uniform noise in `(-scale, scale)` to every trainable parameter.
///
/// Zero-initialised shift parameters park relu pre-activations exactly on
/// the kink (a zeroed conv output stays zero through batch norm), where a
/// central difference straddles two linear pieces and disagrees with any
/// one-sided derivative. Jittering first moves the check to a generic
/// point in parameter space.
pub fn jitter_params<T: Scalar>(ps: &mut ParameterSet<T>, scale: f64, rng: &mut StreamRng) {
    for name in ps.names().map(str::to_string).collect::<Vec<_>>() {
        let param = ps.get_mut(&name).expect("name from this set");
        if !param.trainable {
            continue;
        }
        for v in param.value.data_mut() {
            *v += T::from_f64(rng.uniform_in(-scale, scale));
        }
    }
}

pub struct GradCheckSettings {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Gradient magnitudes below this are not penalised.
    pub abs_tol: f64,
    /// Cap on probed elements per parameter tensor (`None` = all of them).
    pub max_samples_per_param: Option<usize>,
    /// Test hook: scales the analytic gradient of the named parameter so the
    /// comparison must fail.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_samples_per_param: None,
            corrupt: None,
        }
    }
}

/// Outcome for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Analytic and numeric values at the worst element.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    /// One `<name> max_rel_err=<value> PASS|FAIL` line per parameter.
    pub fn lines(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|p| {
                format!(
                    "{} max_rel_err={:e} {}",
                    p.name,
                    p.max_rel_err,
                    if p.pass { "PASS" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Compares analytic gradients of a scalar loss against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every trainable parameter.
pub fn grad_check<F>(
    build: F,
    params: &ParameterSet<f64>,
    settings: &GradCheckSettings,
) -> Result<CheckReport>
where
    F: Fn(&mut Session<f64>, &ParameterSet<f64>) -> Result<NodeId>,
{
    let eval_loss = |ps: &ParameterSet<f64>| -> Result<f64> {
        let mut sess = Session::new(Mode::Eval);
        let loss = build(&mut sess, ps)?;
        let v = sess.tape.value(loss);
        if v.numel() != 1 {
            return Err(TensorError::LossNotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let base_a = eval_loss(params)?;
    let base_b = eval_loss(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(TensorError::NonDeterministicLoss(base_a, base_b));
    }

    let mut sess = Session::new(Mode::Eval);
    let loss = build(&mut sess, params)?;
    sess.backward(loss)?;
    let analytic = sess.bound_grads();

    let mut scratch = params.clone();
    let mut report = Vec::new();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();

    for name in names {
        let numel = params.get(&name)?.value.numel();
        let indices = probe_indices(numel, settings.max_samples_per_param);
        let corrupt_scale = match &settings.corrupt {
            Some((target, scale)) if *target == name => *scale,
            _ => 1.0,
        };
        let mut max_rel = 0.0f64;
        let mut worst = (0.0, 0.0);
        for &i in &indices {
            let orig = scratch.get(&name)?.value.data()[i];
            scratch.get_mut(&name)?.value.data_mut()[i] = orig + settings.step;
            let plus = eval_loss(&scratch)?;
            scratch.get_mut(&name)?.value.data_mut()[i] = orig - settings.step;
            let minus = eval_loss(&scratch)?;
            scratch.get_mut(&name)?.value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * settings.step);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]) * corrupt_scale;
            let denom = a.abs().max(numeric.abs()).max(settings.abs_tol);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = (a, numeric);
            }
        }
        report.push(ParamCheck {
            name,
            max_rel_err: max_rel,
            worst_analytic: worst.0,
            worst_numeric: worst.1,
            checked: indices.len(),
            pass: max_rel <= settings.rel_tol,
        });
    }
    Ok(CheckReport { params: report })
}

/// Evenly spread flat indices; the whole tensor when no cap applies.
fn probe_indices(numel: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < numel => {
            let mut out: Vec<usize> = (0..k).map(|j| j * numel / k).collect();
            out.dedup();
            out
        }
        _ => (0..numel).collect(),
    }
}
