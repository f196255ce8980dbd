//! Product-of-experts fusion of diagonal Gaussians.
//!
//! Precisions add and means combine precision-weighted. The standard-normal
//! prior expert contributes precision 1 at mean 0. Sums run over experts in
//! ascending modality index so the result does not depend on input order.

use crate::autodiff::{Graph, Var};
use crate::distributions::{GaussianParams, GaussianVars, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};

/// Experts tagged with the modality they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSet {
    pub experts: Vec<(usize, GaussianParams)>,
    pub include_prior: bool,
}

impl ExpertSet {
    pub fn with_prior(experts: Vec<(usize, GaussianParams)>) -> Self {
        Self {
            experts,
            include_prior: true,
        }
    }
}

/// One expert on the graph. `mask` is an optional `[B, 1]` 0/1 column; a zero
/// removes the expert from that row's product.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub modality: usize,
    pub params: GaussianVars,
    pub mask: Option<Var>,
}

/// Fuse a batch of experts. `rows`/`dim` size the prior when `experts` is empty.
pub fn poe_fuse_vars(g: &mut Graph, experts: &[ExpertVars], include_prior: bool, rows: usize, dim: usize) -> Result<GaussianVars> {
    if experts.is_empty() && !include_prior {
        return Err(Error::InvalidArgument("product of experts needs at least one expert or the prior".into()));
    }
    for e in experts {
        let s = g.shape(e.params.mean);
        if s != [rows, dim] || g.shape(e.params.log_var) != [rows, dim] {
            return Err(Error::shape("poe_fuse", &[rows, dim], s));
        }
    }
    let mut ordered: Vec<&ExpertVars> = experts.iter().collect();
    ordered.sort_by_key(|e| e.modality);

    // prior: precision 1, mean 0 -> contributes 1 to the precision sum and 0 to the weighted mean
    let mut prec_sum: Option<Var> = include_prior.then(|| g.constant(crate::tensor::Tensor::full(&[rows, dim], 1.0)));
    let mut weighted: Option<Var> = None;
    for e in ordered {
        let neg = g.neg(e.params.log_var);
        let mut prec = g.exp(neg);
        if let Some(m) = e.mask {
            prec = g.mul(prec, m)?;
        }
        let wm = g.mul(e.params.mean, prec)?;
        prec_sum = Some(match prec_sum {
            Some(s) => g.add(s, prec)?,
            None => prec,
        });
        weighted = Some(match weighted {
            Some(s) => g.add(s, wm)?,
            None => wm,
        });
    }
    let prec_sum = prec_sum.expect("nonempty");
    let mean = match weighted {
        Some(w) => g.div(w, prec_sum)?,
        None => g.constant(crate::tensor::Tensor::zeros(&[rows, dim])),
    };
    let log_prec = g.log(prec_sum);
    let log_var = g.neg(log_prec);
    let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(GaussianVars { mean, log_var })
}

/// Fuse a single example's experts.
pub fn poe_fuse(set: &ExpertSet) -> Result<GaussianParams> {
    let dim = match (set.experts.first(), set.include_prior) {
        (Some((_, p)), _) => p.dim(),
        (None, true) => return Err(Error::InvalidArgument("prior-only fusion needs a dimension; use poe_fuse_dim".into())),
        (None, false) => {
            return Err(Error::InvalidArgument("product of experts needs at least one expert or the prior".into()))
        }
    };
    poe_fuse_dim(set, dim)
}

/// [`poe_fuse`] with an explicit latent dimension, allowing the prior-only case.
pub fn poe_fuse_dim(set: &ExpertSet, dim: usize) -> Result<GaussianParams> {
    if let Some((_, bad)) = set.experts.iter().find(|(_, p)| p.dim() != dim) {
        return Err(Error::shape("poe_fuse", &[dim], &[bad.dim()]));
    }
    let mut g = Graph::new();
    let experts = set
        .experts
        .iter()
        .map(|(m, p)| {
            Ok(ExpertVars {
                modality: *m,
                params: GaussianVars::constant(&mut g, std::slice::from_ref(p))?,
                mask: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = poe_fuse_vars(&mut g, &experts, set.include_prior, 1, dim)?;
    Ok(fused.to_params(&g).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gp(m: f64, var: f64) -> GaussianParams {
        GaussianParams::new(vec![m], vec![var.ln()]).unwrap()
    }

    /// Multiply densities pointwise on [-8, 8], renormalize, and read off mean and variance.
    fn grid_moments(experts: &[GaussianParams]) -> (f64, f64) {
        let n = 4001;
        let h = 16.0 / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| -8.0 + i as f64 * h).collect();
        let logp: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let mut l = -0.5 * x * x;
                for e in experts {
                    let v = e.log_var()[0].exp();
                    l += -0.5 * (x - e.mean()[0]).powi(2) / v;
                }
                l
            })
            .collect();
        let mx = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logp.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
        let var = xs.iter().zip(&w).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / z;
        (mean, var)
    }

    #[test]
    fn prior_only_is_prior() {
        let f = poe_fuse_dim(&ExpertSet::with_prior(vec![]), 3).unwrap();
        assert_eq!(f, GaussianParams::standard(3));
        let err = poe_fuse_dim(
            &ExpertSet {
                experts: vec![],
                include_prior: false,
            },
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn two_opposite_experts() {
        let experts = vec![gp(1.0, 1.0), gp(-1.0, 1.0)];
        let f = poe_fuse(&ExpertSet::with_prior(experts.iter().cloned().enumerate().collect())).unwrap();
        let (gm, gv) = grid_moments(&experts);
        assert!(gm.abs() < 1e-9 && (gv - 1.0 / 3.0).abs() < 1e-6);
        assert!(f.mean()[0].abs() < 1e-12);
        assert!((f.log_var()[0] + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_expert_with_prior() {
        let experts = vec![gp(2.0, 1.0)];
        let f = poe_fuse(&ExpertSet::with_prior(vec![(0, experts[0].clone())])).unwrap();
        let (gm, gv) = grid_moments(&experts);
        assert!((gm - 1.0).abs() < 1e-6 && (gv - 0.5).abs() < 1e-6);
        assert!((f.mean()[0] - 1.0).abs() < 1e-12);
        assert!((f.log_var()[0] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_uniform_expert_is_ignorable() {
        let base = vec![(0, gp(1.5, 0.4)), (1, gp(-0.3, 2.0))];
        let a = poe_fuse(&ExpertSet::with_prior(base.clone())).unwrap();
        let mut wide = base;
        wide.push((2, GaussianParams::new(vec![5.0], vec![LOG_VAR_MAX]).unwrap()));
        let b = poe_fuse(&ExpertSet::with_prior(wide)).unwrap();
        assert!((a.mean()[0] - b.mean()[0]).abs() < 1e-3);
    }

    #[test]
    fn mask_removes_expert() {
        let mut g = Graph::new();
        let e0 = GaussianVars::constant(&mut g, &[gp(2.0, 1.0), gp(2.0, 1.0)]).unwrap();
        let mask = g.constant(crate::tensor::Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let f = poe_fuse_vars(
            &mut g,
            &[ExpertVars {
                modality: 0,
                params: e0,
                mask: Some(mask),
            }],
            true,
            2,
            1,
        )
        .unwrap();
        let ps = f.to_params(&g);
        assert!((ps[0].mean()[0] - 1.0).abs() < 1e-12);
        assert_eq!(ps[1], GaussianParams::standard(1));
    }

    fn expert_strategy() -> impl Strategy<Value = (f64, f64)> {
        (-3.0..3.0f64, -2.0..2.0f64)
    }

    proptest! {
        #[test]
        fn order_invariant(es in proptest::collection::vec((expert_strategy(), expert_strategy()), 1..5), rot in 0usize..5) {
            let experts: Vec<(usize, GaussianParams)> = es
                .iter()
                .enumerate()
                .map(|(i, ((m0, l0), (m1, l1)))| (i, GaussianParams::new(vec![*m0, *m1], vec![*l0, *l1]).unwrap()))
                .collect();
            let a = poe_fuse(&ExpertSet::with_prior(experts.clone())).unwrap();
            let mut shuffled = experts;
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let b = poe_fuse(&ExpertSet::with_prior(shuffled)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn precision_dominates(es in proptest::collection::vec(expert_strategy(), 1..4)) {
            let experts: Vec<(usize, GaussianParams)> =
                es.iter().enumerate().map(|(i, (m, l))| (i, GaussianParams::new(vec![*m], vec![*l]).unwrap())).collect();
            let f = poe_fuse(&ExpertSet::with_prior(experts.clone())).unwrap();
            for (_, e) in &experts {
                prop_assert!(f.precision()[0] >= e.precision()[0]);
            }
            prop_assert!(f.precision()[0] >= 1.0);
        }

        #[test]
        fn matches_grid_product(es in proptest::collection::vec(expert_strategy(), 1..4)) {
            let experts: Vec<GaussianParams> = es.iter().map(|(m, l)| GaussianParams::new(vec![*m], vec![*l]).unwrap()).collect();
            let f = poe_fuse(&ExpertSet::with_prior(experts.iter().cloned().enumerate().collect())).unwrap();
            let (gm, gv) = grid_moments(&experts);
            prop_assert!((f.mean()[0] - gm).abs() < 1e-6);
            prop_assert!((f.log_var()[0].exp() - gv).abs() < 1e-6);
        }
    }
}
