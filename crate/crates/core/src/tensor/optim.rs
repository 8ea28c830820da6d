use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum; `momentum = 0` is plain SGD.
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::adam(),
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers are created lazily, one per trainable parameter, with the
/// parameter's length.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Option<Vec<T>>>,
    pub second: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, p) in params.iter() {
            if let Some(g) = grads.param(id) {
                if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {} at element {bad}", p.name),
                    });
                }
            }
        }
        let n = params.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.step += 1;
        let t = self.step as f64;
        let lr = self.config.lr;
        let wd = T::lit(self.config.weight_decay);

        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.param(super::ParamId(i)) else {
                continue;
            };
            let len = p.value.len();
            let w = p.value.data_mut();
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::lit(momentum);
                    let lr = T::lit(lr);
                    let v = self.first[i].get_or_insert_with(|| vec![T::zero(); len]);
                    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        let g = g + wd * *w;
                        *v = mu * *v + g;
                        *w = *w - lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    let step = T::lit(lr / c1);
                    let c2 = T::lit(c2);
                    let eps = T::lit(eps);
                    let m = self.first[i].get_or_insert_with(|| vec![T::zero(); len]);
                    let v = self.second[i].get_or_insert_with(|| vec![T::zero(); len]);
                    for (((w, m), v), &g) in w
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        let g = g + wd * *w;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *w = *w - step * *m / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Mode, Tensor};

    fn grads_for(
        store: &ParamStore<f64>,
        f: impl Fn(&mut Graph<f64>) -> crate::tensor::Var,
    ) -> Gradients<f64> {
        let mut g = Graph::new(store, Mode::Train);
        let loss = f(&mut g);
        g.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::full(&[3], 0.7), true);
        let grads = grads_for(&store, |g| {
            let w = g.param(p);
            let z = g.scale(w, 0.0).unwrap();
            g.sum(z).unwrap()
        });
        for kind in [OptimizerKind::adam(), OptimizerKind::sgd_momentum()] {
            let mut s = store.clone();
            let mut opt = OptimizerState::new(OptimizerConfig {
                kind,
                lr: 0.1,
                weight_decay: 0.0,
            });
            opt.step(&mut s, &grads).unwrap();
            assert_eq!(s.value(p).data(), &[0.7; 3]);
            assert_eq!(opt.step, 1);
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::scalar(0.0), true);
        let grads = grads_for(&store, |g| g.param(p));
        let mut opt = OptimizerState::new(OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.0 },
            lr: 0.1,
            weight_decay: 0.0,
        });
        opt.step(&mut store, &grads).unwrap();
        assert!((store.value(p).item() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_decreases_monotonically() {
        // Heavy-ball momentum is only monotone when overdamped: lr * 2 < (1 - sqrt(0.9))^2.
        let cases = [
            (OptimizerKind::adam(), 0.01),
            (OptimizerKind::sgd_momentum(), 0.001),
            (OptimizerKind::Sgd { momentum: 0.0 }, 0.01),
        ];
        for (kind, lr) in cases {
            let mut store = ParamStore::<f64>::new();
            let p = store.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap(), true);
            let mut opt = OptimizerState::new(OptimizerConfig {
                kind,
                lr,
                weight_decay: 0.0,
            });
            let mut last = f64::INFINITY;
            for _ in 0..100 {
                let (loss, grads) = {
                    let mut g = Graph::new(&store, Mode::Train);
                    let w = g.param(p);
                    let sq = g.square(w).unwrap();
                    let l = g.sum(sq).unwrap();
                    (g.value(l).item(), g.backward(l).unwrap())
                };
                assert!(loss < last, "{kind:?}: {loss} !< {last}");
                last = loss;
                opt.step(&mut store, &grads).unwrap();
            }
        }
    }

    #[test]
    fn nan_gradient_aborts_with_param_name() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("head.kernel", Tensor::scalar(1.0), true);
        let mut grads = Gradients::empty(1);
        grads.set_param(p, Tensor::scalar(f64::NAN));
        let mut opt = OptimizerState::new(OptimizerConfig::default());
        let err = opt.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("head.kernel"));
    }
}
