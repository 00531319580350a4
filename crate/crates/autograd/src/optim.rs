use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v <- mu*v + (g + wd*p)`, `p <- p - lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        if self.velocity.len() != store.len() {
            self.velocity = vec![None; store.len()];
        }
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let p = store.get_mut(id);
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                for (dv, pv) in d.data_mut().iter_mut().zip(p.data()) {
                    *dv += self.weight_decay * pv;
                }
            }
            let v = match &mut self.velocity[id.index()] {
                Some(v) => {
                    for (vv, dv) in v.data_mut().iter_mut().zip(d.data()) {
                        *vv = self.momentum * *vv + dv;
                    }
                    v
                }
                slot => slot.insert(d),
            };
            for (pv, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pv -= lr * vv;
            }
        }
    }
}
