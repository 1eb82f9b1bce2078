//! Named parameter collections and glob-style name patterns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter path (e.g. `block0.wq`) to tensor.
/// Iteration order is lexicographic by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Like [`get`](Self::get) but reports a missing name as an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Incongruent(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and same per-name shapes.
    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn ensure_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.is_congruent(other) {
            return Ok(());
        }
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(Error::Incongruent(format!("{name} missing on right"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Incongruent(format!(
                        "{name}: {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        Err(Error::Incongruent("extra parameters on right".into()))
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Global L2 norm over every entry of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Squared Frobenius distance restricted to `names`.
    pub fn squared_distance(&self, other: &ParamSet, names: &[&str]) -> Result<f64> {
        let mut total = 0.0;
        for &name in names {
            let a = self.require(name)?;
            let b = other.require(name)?;
            if a.shape() != b.shape() {
                return Err(Error::Incongruent(format!("{name}: shape differs")));
            }
            total += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        Ok(total)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// A set of glob patterns over parameter names. `*` matches any run of
/// characters, including dots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct NamePatterns(pub Vec<String>);

impl NamePatterns {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        Self(patterns.into_iter().map(Into::into).collect())
    }

    pub fn matches(&self, name: &str) -> bool {
        self.0.iter().any(|p| glob_match(p, name))
    }

    /// Names in `params` matched by any pattern, in lexicographic order.
    pub fn resolve<'a>(&self, params: &'a ParamSet) -> Vec<&'a str> {
        params.names().filter(|n| self.matches(n)).collect()
    }

    /// Like [`resolve`](Self::resolve) but an empty result is an error.
    pub fn resolve_nonempty<'a>(&self, params: &'a ParamSet) -> Result<Vec<&'a str>> {
        let names = self.resolve(params);
        if names.is_empty() {
            Err(Error::EmptyMatch(self.0.clone()))
        } else {
            Ok(names)
        }
    }
}

fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}
