//! Plain SGD with gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// How the clipping threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale all gradients together when their global L2 norm exceeds the threshold.
    #[default]
    GlobalNorm,
    /// Clamp every gradient entry to `[-threshold, threshold]`.
    PerElement,
}

/// One SGD update with global-norm clipping: `w ← w − lr·clip(g)`.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64, clip_norm: f64) -> Result<ParamSet> {
    sgd_step_with(params, grads, lr, clip_norm, ClipMode::GlobalNorm)
}

pub fn sgd_step_with(
    params: &ParamSet,
    grads: &ParamSet,
    lr: f64,
    clip: f64,
    mode: ClipMode,
) -> Result<ParamSet> {
    params.ensure_congruent(grads)?;
    if !(lr > 0.0) || !(clip > 0.0) {
        return Err(Error::Config(format!(
            "lr and clip threshold must be positive (lr={lr}, clip={clip})"
        )));
    }
    let norm = grads.global_norm();
    let scale = (mode == ClipMode::GlobalNorm && norm > clip).then(|| clip / norm);
    let mut out = params.clone();
    for ((_, w), (_, g)) in out.iter_mut().zip(grads.iter()) {
        for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
            let step = match (mode, scale) {
                (ClipMode::GlobalNorm, Some(s)) => gv * s,
                (ClipMode::GlobalNorm, None) => gv,
                (ClipMode::PerElement, _) => gv.clamp(-clip, clip),
            };
            *wv -= lr * step;
        }
    }
    Ok(out)
}
