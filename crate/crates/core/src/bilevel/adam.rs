//! Adam with decoupled weight decay over a [`ParamStore`].

use ndarray::Zip;

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment buffers. Only names that have received a gradient get an entry,
/// so parameters that are never updated never appear here.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    /// One update of every parameter named in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, hp: &AdamHyper) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), g.mapv(|_| 0.0));
                self.v.insert(name.clone(), g.mapv(|_| 0.0));
            }
            let m = self.m.get_mut(name).expect("moment");
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = hp.beta1 * *m + (1.0 - hp.beta1) * g);
            let v = self.v.get_mut(name).expect("moment");
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g);
            let m = self.m.get(name).expect("moment");
            let v = self.v.get(name).expect("moment");
            Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let step = (m / bc1) / ((v / bc2).sqrt() + hp.eps);
                *p -= hp.lr * (step + hp.weight_decay * *p);
            });
        }
    }

    /// Flattens the buffers into one store under `adam.m.` / `adam.v.`.
    pub fn to_store(&self) -> ParamStore {
        let m = self.m.iter().map(|(k, v)| (format!("adam.m.{k}"), v.clone()));
        let v = self.v.iter().map(|(k, x)| (format!("adam.v.{k}"), x.clone()));
        m.chain(v).collect()
    }

    pub fn from_store(store: &ParamStore, t: u64) -> Self {
        let strip = |prefix: &str| -> ParamStore {
            store
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        AdamState { m: strip("adam.m."), v: strip("adam.v."), t }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpc_autograd::Mat;

    fn hp() -> AdamHyper {
        AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params: ParamStore = [("a".to_string(), Mat::from_elem((1, 3), 1.0))].into_iter().collect();
        let grads: ParamStore =
            [("a".to_string(), Mat::from_shape_vec((1, 3), vec![2.0, -0.5, 0.0]).unwrap())].into_iter().collect();
        let mut s = AdamState::default();
        s.update(&mut params, &grads, &hp());
        let a = params.get("a").unwrap();
        assert!((a[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((a[[0, 1]] - 1.1).abs() < 1e-7);
        assert_eq!(a[[0, 2]], 1.0);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut params: ParamStore = [("a".to_string(), Mat::from_elem((1, 1), 2.0))].into_iter().collect();
        let grads: ParamStore = [("a".to_string(), Mat::zeros((1, 1)))].into_iter().collect();
        let mut s = AdamState::default();
        s.update(&mut params, &grads, &AdamHyper { weight_decay: 0.5, ..hp() });
        assert!((params.get("a").unwrap()[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn untouched_names_stay_out_of_the_buffers() {
        let mut params: ParamStore =
            [("a".to_string(), Mat::zeros((1, 1))), ("b".to_string(), Mat::zeros((1, 1)))].into_iter().collect();
        let grads: ParamStore = [("a".to_string(), Mat::from_elem((1, 1), 1.0))].into_iter().collect();
        let mut s = AdamState::default();
        s.update(&mut params, &grads, &hp());
        assert!(s.m.contains("a") && !s.m.contains("b"));
        assert_eq!(params.get("b").unwrap()[[0, 0]], 0.0);
        let back = AdamState::from_store(&s.to_store(), s.t);
        assert_eq!(back, s);
    }
}
