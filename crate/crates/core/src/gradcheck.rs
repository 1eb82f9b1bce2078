//! Central finite differences, kept independent of the tape so they can
//! serve as a gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::vit::{loss_and_grads, loss_with_relu_pattern, ModelWeights, ViTConfig};

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `(f(+h) − f(−h)) / 2h` for a function of a scalar offset.
pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&ParamSet) -> f64, params: &ParamSet, h: f64) -> ParamSet {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            out.get_mut(name).unwrap().data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub h: f64,
    /// Coordinates compared per tensor (all of them for smaller tensors).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Relative error above which a coordinate counts as a failure.
    pub tolerance: f64,
    /// Test hook: perturb the analytic gradient of this parameter.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords_per_tensor: 100,
            seed: 0,
            tolerance: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±h perturbation flips a ReLU input sign.
    pub skipped: usize,
    /// Checked coordinates whose relative error exceeds the tolerance.
    pub over_tolerance: usize,
    pub worst: Option<CoordinateError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: f64,
    pub h: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&CoordinateError> {
        self.tensors
            .iter()
            .filter_map(|t| t.worst.as_ref())
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |w| w.rel_err)
    }

    pub fn over_tolerance(&self) -> usize {
        self.tensors.iter().map(|t| t.over_tolerance).sum()
    }

    /// Size of the central-difference error caused by rounding the loss
    /// alone: `ε·|L| / h`. Gradients much smaller than this are not
    /// resolvable at step `h`.
    pub fn roundoff_scale(&self) -> f64 {
        f64::EPSILON * self.loss.abs() / self.h
    }
}

/// Compares backpropagated gradients of the mean batch cross-entropy with
/// central differences on a random subset of coordinates of every tensor.
/// Coordinates whose perturbation crosses a ReLU kink are replaced by others.
pub fn check_model_gradients(
    model: &ModelWeights,
    images: &[&Tensor],
    labels: &[usize],
    config: &ViTConfig,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let (loss, mut grads) = loss_and_grads(model, images, labels, config)?;
    if let Some(name) = &opts.corrupt {
        let g = grads.get_mut(name).ok_or_else(|| {
            crate::Error::Config(format!("--corrupt-grad: no parameter named {name:?}"))
        })?;
        for v in g.data_mut() {
            *v += 1e-3;
        }
    }
    let (_, base_pattern) = loss_with_relu_pattern(model, images, labels, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = model.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = model.names().map(str::to_string).collect();
    for name in names {
        let n = model.get(&name).map_or(0, Tensor::len);
        let order = sample(&mut rng, n, n);
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            over_tolerance: 0,
            worst: None,
        };
        for index in order.into_iter() {
            if check.checked == opts.coords_per_tensor {
                break;
            }
            let orig = model.get(&name).expect("listed").data()[index];
            let mut eval = |v: f64| -> Result<(f64, Vec<bool>)> {
                work.get_mut(&name).expect("listed").data_mut()[index] = v;
                loss_with_relu_pattern(&work, images, labels, config)
            };
            let (plus, p_pat) = eval(orig + opts.h)?;
            let (minus, m_pat) = eval(orig - opts.h)?;
            work.get_mut(&name).expect("listed").data_mut()[index] = orig;
            if p_pat != base_pattern || m_pat != base_pattern {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let analytic = grads.get(&name).expect("congruent").data()[index];
            let rel_err = relative_error(analytic, numeric);
            check.checked += 1;
            check.over_tolerance += usize::from(rel_err > opts.tolerance);
            if check.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                check.worst = Some(CoordinateError {
                    name: name.clone(),
                    index,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
        tensors.push(check);
    }
    Ok(GradcheckReport {
        loss,
        h: opts.h,
        tensors,
    })
}
