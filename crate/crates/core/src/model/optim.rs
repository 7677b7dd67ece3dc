use super::{Gradients, Network};
use crate::error::{Error, Result};

/// Heavy-ball SGD: `v <- momentum * v + g; param <- param - lr * v`.
pub fn sgd_momentum_step(net: &mut Network, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Validation(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    let mut params = net.params_mut();
    if params.len() != grads.layers.len() {
        return Err(Error::Shape("gradients do not cover the network's layers".into()));
    }
    for (layer, glayer) in params.iter_mut().zip(&grads.layers) {
        if layer.len() != glayer.len() {
            return Err(Error::Shape("gradient parameter count differs from the network".into()));
        }
        for (p, g) in layer.iter().zip(glayer) {
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
    }
    for (layer, glayer) in params.iter_mut().zip(&grads.layers) {
        for (p, g) in layer.iter_mut().zip(glayer) {
            for (v, gv) in p.velocity.data_mut().iter_mut().zip(g.data()) {
                *v = momentum * *v + gv;
            }
            let vel = p.velocity.data().to_vec();
            for (w, v) in p.value.data_mut().iter_mut().zip(&vel) {
                *w -= lr * v;
            }
        }
    }
    Ok(())
}
