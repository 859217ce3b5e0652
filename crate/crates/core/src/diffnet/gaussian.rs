use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn clamp_ls(ls: f64) -> f64 {
    ls.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// Diagonal Gaussian policy head with a state-independent, clamped log-std.
///
/// A `false` entry in `mask` removes that action dimension from log-prob and
/// entropy terms (padded dimensions of a foreign embodiment).
#[derive(Clone, Copy, Debug)]
pub struct GaussianHead;

impl GaussianHead {
    pub fn sample(mean: &[f64], log_std: &[f64], mask: &[bool], rng: &mut impl Rng) -> (Vec<f64>, f64) {
        let action: Vec<f64> = mean
            .iter()
            .zip(log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + clamp_ls(*ls).exp() * z
            })
            .collect();
        let lp = Self::log_prob(mean, log_std, mask, &action);
        (action, lp)
    }

    pub fn log_prob(mean: &[f64], log_std: &[f64], mask: &[bool], action: &[f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..mean.len() {
            if !mask[i] {
                continue;
            }
            let ls = clamp_ls(log_std[i]);
            let z = (action[i] - mean[i]) * (-ls).exp();
            lp += -0.5 * z * z - ls - HALF_LN_2PI;
        }
        lp
    }

    pub fn entropy(log_std: &[f64], mask: &[bool]) -> f64 {
        log_std
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(ls, _)| clamp_ls(*ls) + 0.5 + HALF_LN_2PI)
            .sum()
    }

    fn mask_col(mask: &[bool]) -> Array2<f64> {
        Array2::from_shape_fn((mask.len(), 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 })
    }

    /// Per-row log-density, `n x 1`, of `actions (n x k)` under `mean (n x k)`
    /// and `log_std (1 x k)`.
    pub fn log_prob_graph(g: &mut Graph<'_>, mean: Var, log_std: Var, actions: Var, mask: &[bool]) -> Var {
        let ls = g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        let neg_ls = g.neg(ls);
        let inv_std = g.exp(neg_ls);
        let diff = g.sub(actions, mean);
        let z = g.mul_row(diff, inv_std);
        let z2 = g.square(z);
        let quad = g.scale(z2, -0.5);
        let per_dim = g.add_row(quad, neg_ls);
        let per_dim = g.add_scalar(per_dim, -HALF_LN_2PI);
        let m = g.constant(Self::mask_col(mask));
        g.matmul(per_dim, m)
    }

    /// Entropy of the head, `1 x 1`.
    pub fn entropy_graph(g: &mut Graph<'_>, log_std: Var, mask: &[bool]) -> Var {
        let ls = g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        let m = g.constant(Self::mask_col(mask));
        let s = g.matmul(ls, m);
        let k = mask.iter().filter(|&&b| b).count() as f64;
        g.add_scalar(s, k * (0.5 + HALF_LN_2PI))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::ParamSet;
    use crate::seed::seed_tree;
    use ndarray::array;

    #[test]
    fn log_prob_at_mode_with_unit_std() {
        for k in 1..4 {
            let lp = GaussianHead::log_prob(&vec![0.3; k], &vec![0.0; k], &vec![true; k], &vec![0.3; k]);
            let want = -(k as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
            assert!((lp - want).abs() < 1e-14);
        }
    }

    #[test]
    fn min_clamp_keeps_samples_tight() {
        let mut rng = seed_tree(1, ["tail"]);
        let bound = 6.0 * (-5.0f64).exp();
        for _ in 0..10_000 {
            let (a, _) = GaussianHead::sample(&[0.7, -0.2], &[-5.0, -9.0], &[true, true], &mut rng);
            assert!((a[0] - 0.7).abs() <= bound);
            assert!((a[1] + 0.2).abs() <= bound);
        }
    }

    #[test]
    fn empirical_variance_matches() {
        let mut rng = seed_tree(2, ["var"]);
        let ls = -0.4;
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| GaussianHead::sample(&[1.0], &[ls], &[true], &mut rng).0[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let want = (2.0 * ls).exp();
        assert!((var - want).abs() < 0.05 * want, "var {var} want {want}");
    }

    #[test]
    fn sampled_log_prob_is_exact_density() {
        let mut rng = seed_tree(3, ["lp"]);
        let (a, lp) = GaussianHead::sample(&[0.1, 0.2], &[-1.0, 0.5], &[true, true], &mut rng);
        let mut want = 0.0;
        for (i, (m, ls)) in [(0.1f64, -1.0f64), (0.2, 0.5)].iter().enumerate() {
            let s = ls.exp();
            want += (-(a[i] - m).powi(2) / (2.0 * s * s)).exp().ln() - (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        }
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn graph_matches_scalar_and_respects_mask() {
        let mut p = ParamSet::new();
        p.insert("ls", array![[-0.3, 0.4]]);
        let mean = array![[0.1, -0.5], [1.0, 0.0]];
        let act = array![[0.3, 0.2], [0.2, 1.5]];
        let mask = [true, false];
        let mut g = Graph::new();
        let b = g.bind(&p);
        let mv = g.constant(mean.clone());
        let av = g.constant(act.clone());
        let lp = GaussianHead::log_prob_graph(&mut g, mv, b.var("ls"), av, &mask);
        for r in 0..2 {
            let want = GaussianHead::log_prob(mean.row(r).as_slice().unwrap(), &[-0.3, 0.4], &mask, act.row(r).as_slice().unwrap());
            assert!((g.value(lp)[[r, 0]] - want).abs() < 1e-12);
        }
        let ent = GaussianHead::entropy_graph(&mut g, b.var("ls"), &mask);
        assert!((g.scalar_value(ent) - GaussianHead::entropy(&[-0.3, 0.4], &mask)).abs() < 1e-14);
        let loss = g.sum(lp);
        let grads = g.backward(loss).unwrap().for_params(&b);
        assert_eq!(grads.get("ls").unwrap()[[0, 1]], 0.0);
    }
}
