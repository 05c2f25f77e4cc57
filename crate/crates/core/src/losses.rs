//! Training objectives.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Scalar loss node plus a named breakdown for logging.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub var: Var,
    pub total: f64,
    pub cls: f64,
    pub area: f64,
}

/// Multi-label sigmoid cross-entropy, mean over classes and batch.
pub fn sigmoid_ce<T: Element>(g: &mut Graph<T>, logits: Var, labels: &Tensor<T>) -> Result<LossValue> {
    let var = g.sigmoid_ce(logits, labels)?;
    let v = g.value(var).item().as_f64();
    Ok(LossValue {
        var,
        total: v,
        cls: v,
        area: 0.0,
    })
}

/// Negated, `alpha`-weighted classification loss used to drive offsets
/// away from the most discriminative evidence.
pub fn expansion_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &Tensor<T>,
    alpha: f64,
) -> Result<LossValue> {
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("expansion loss needs alpha > 0, got {alpha}")));
    }
    let ce = sigmoid_ce(g, logits, labels)?;
    let var = g.mul_scalar(ce.var, T::from_f64(-alpha))?;
    Ok(LossValue {
        var,
        total: g.value(var).item().as_f64(),
        cls: ce.cls,
        area: 0.0,
    })
}

/// Mean localization-map mass: `(1/C) sum_c (1/HW) sum P`, averaged over the
/// batch, which is the mean over every entry of `[N,C,h,w]`.
pub fn area_loss<T: Element>(g: &mut Graph<T>, maps: Var) -> Result<LossValue> {
    g.value(maps).dims4()?;
    if g
        .value(maps)
        .data()
        .iter()
        .any(|&v| v < T::zero() || v > T::one())
    {
        return Err(Error::Contract("area loss: map values must lie in [0, 1]".into()));
    }
    let var = g.mean(maps)?;
    let v = g.value(var).item().as_f64();
    Ok(LossValue {
        var,
        total: v,
        cls: 0.0,
        area: v,
    })
}

/// `gamma * sigmoid_ce + mu * area`.
pub fn shrinkage_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &Tensor<T>,
    maps: Var,
    gamma: f64,
    mu: f64,
) -> Result<LossValue> {
    if !(gamma >= 0.0 && mu >= 0.0) {
        return Err(Error::Contract(format!(
            "shrinkage loss weights must be non-negative (gamma={gamma}, mu={mu})"
        )));
    }
    let ce = sigmoid_ce(g, logits, labels)?;
    let area = area_loss(g, maps)?;
    let a = g.mul_scalar(ce.var, T::from_f64(gamma))?;
    let b = g.mul_scalar(area.var, T::from_f64(mu))?;
    let var = g.add(a, b)?;
    Ok(LossValue {
        var,
        total: g.value(var).item().as_f64(),
        cls: ce.cls,
        area: area.area,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn expansion_scales_ce() {
        let mut g = Graph::<f64>::new();
        let z = g.param(t(&[1, 1], vec![0.0])).unwrap();
        let l = expansion_loss(&mut g, z, &t(&[1, 1], vec![1.0]), 0.01).unwrap();
        assert!((l.total + 0.00693147).abs() < 1e-8);
        assert!(expansion_loss(&mut g, z, &t(&[1, 1], vec![1.0]), 0.0).is_err());
        assert!(expansion_loss(&mut g, z, &t(&[1, 1], vec![1.0]), -1.0).is_err());
    }

    #[test]
    fn area_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::full(&[2, 3, 4, 4], 1.0)).unwrap();
        assert_eq!(area_loss(&mut g, ones).unwrap().total, 1.0);
        let half = g
            .constant(Tensor::from_fn(&[1, 2, 2, 2], |i| (i % 2) as f64))
            .unwrap();
        assert_eq!(area_loss(&mut g, half).unwrap().total, 0.5);
        let bad = g.constant(Tensor::full(&[1, 1, 1, 1], 1.5)).unwrap();
        assert!(matches!(area_loss(&mut g, bad), Err(Error::Contract(_))));
    }

    #[test]
    fn shrinkage_degenerate_weights() {
        let mut g = Graph::<f64>::new();
        let z = g.param(t(&[1, 2], vec![0.3, -1.2])).unwrap();
        let y = t(&[1, 2], vec![1.0, 0.0]);
        let maps = g.constant(Tensor::full(&[1, 2, 3, 3], 1.0)).unwrap();
        let ce = sigmoid_ce(&mut g, z, &y).unwrap();
        let s = shrinkage_loss(&mut g, z, &y, maps, 1.0, 0.0).unwrap();
        assert_eq!(s.total, ce.total);
        let s = shrinkage_loss(&mut g, z, &y, maps, 0.0, 1.0).unwrap();
        assert_eq!(s.total, 1.0);
        assert!(shrinkage_loss(&mut g, z, &y, maps, -0.1, 1.0).is_err());
        assert!(shrinkage_loss(&mut g, z, &y, maps, 1.0, -0.1).is_err());
    }
}
