//! Named parameter storage and binding onto an autodiff graph.
//!
//! Names are dotted paths; the first segment is the namespace
//! (`trunk`, `prompt`, `fixed`, `dec`, `lora`, `head`, `capl`).

use std::collections::BTreeMap;

use cpc_autograd::{Graph, Mat, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Names starting with any of `prefixes`, in sorted order.
    pub fn names_with_prefix(&self, prefixes: &[&str]) -> Vec<String> {
        self.map.keys().filter(|k| prefixes.iter().any(|p| k.starts_with(p))).cloned().collect()
    }

    /// Number of scalar entries under the given prefixes.
    pub fn count(&self, prefixes: &[&str]) -> usize {
        self.map.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).map(|(_, v)| v.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Copies every entry of `other` into `self`, replacing on collision.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// Sub-store of the entries under `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Places every entry on `graph`; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: impl Fn(&str) -> bool) -> Bound<'g> {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) { graph.param(v.clone()) } else { graph.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// True when every array is finite.
    pub fn all_finite(&self) -> bool {
        self.map.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

impl FromIterator<(String, Mat)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Mat)>>(iter: I) -> Self {
        ParamStore { map: iter.into_iter().collect() }
    }
}

/// Parameters placed on a graph.
#[derive(Clone)]
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    pub fn set(&mut self, name: impl Into<String>, var: Var<'g>) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }

    /// Variables under `prefixes` with their names, sorted by name.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var<'g>)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Current values as a store.
    pub fn snapshot(&self, prefixes: &[&str]) -> ParamStore {
        self.select(prefixes).into_iter().map(|(k, v)| (k, v.value().as_ref().clone())).collect()
    }
}

/// Gaussian matrix with standard deviation `std`.
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Glorot-style uniform initialisation.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}
