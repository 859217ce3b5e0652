use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Bound, Graph, Var};
use super::params::ParamSet;
use crate::{Error, Result};

/// Scaled-uniform fan-in initialisation: `U(-sqrt(3/fan_in), sqrt(3/fan_in))`.
pub fn fan_in_uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (3.0 / rows as f64).sqrt() * scale;
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// `out += x W` for a row vector `x`.
fn affine_acc(x: &[f64], w: &Array2<f64>, out: &mut [f64]) {
    for (k, xk) in x.iter().enumerate() {
        if *xk == 0.0 {
            continue;
        }
        for (o, wk) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wk;
        }
    }
}

/// Layer widths `[input, hidden.., output]`; tanh on hidden layers, identity
/// on the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// Multiplier on the output layer's initial weights.
    #[serde(default = "one")]
    pub out_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("an MLP needs at least one hidden layer".into()));
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::from_widths(widths)
    }

    /// A single affine layer (used for output heads).
    pub fn linear(input: usize, output: usize) -> Result<Self> {
        Self::from_widths(vec![input, output])
    }

    fn from_widths(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
        }
        Ok(Self { widths, out_scale: 1.0 })
    }

    pub fn with_out_scale(mut self, s: f64) -> Self {
        self.out_scale = s;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn build(&self, prefix: &str) -> Mlp {
        let layers = (0..self.widths.len() - 1)
            .map(|i| (format!("{prefix}.w{i}"), format!("{prefix}.b{i}")))
            .collect();
        Mlp { spec: self.clone(), layers }
    }
}

/// An [`MlpSpec`] bound to parameter names.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<(String, String)>,
}

impl Mlp {
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let n = self.layers.len();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.spec.widths[i], self.spec.widths[i + 1]);
            let scale = if i + 1 == n { self.spec.out_scale } else { 1.0 };
            params.insert(w, fan_in_uniform(fan_in, fan_out, scale, rng));
            params.insert(b, Array2::zeros((1, fan_out)));
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound<'_>, x: Var) -> Result<Var> {
        let got = g.shape(x).1;
        if got != self.spec.input_dim() {
            return Err(Error::DimMismatch { expected: self.spec.input_dim(), got });
        }
        let n = self.layers.len();
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = g.linear(h, p.var(w), p.var(b));
            if i + 1 < n {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// Single-row forward pass without a graph (acting hot path).
    pub fn eval_vec(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let n = self.layers.len();
        let mut h = x.to_vec();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let w = params.get(w).expect("mlp weight");
            let b = params.get(b).expect("mlp bias");
            let mut out = b.row(0).to_vec();
            affine_acc(&h, w, &mut out);
            if i + 1 < n {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        h
    }

    /// Forward pass outside of any training graph.
    pub fn eval(&self, params: &ParamSet, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let p = g.bind_frozen(params);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCellSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCellSpec {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("GRU dims must be positive".into()));
        }
        Ok(Self { input_dim, hidden_dim })
    }

    pub fn build(&self, prefix: &str) -> GruCell {
        GruCell {
            spec: *self,
            w_i: format!("{prefix}.w_i"),
            w_h: format!("{prefix}.w_h"),
            b_i: format!("{prefix}.b_i"),
            b_h: format!("{prefix}.b_h"),
        }
    }
}

/// GRU cell with fused gate matrices, gates ordered `[reset, update, candidate]`:
///
/// ```text
/// r  = sigmoid(x Wi_r + bi_r + h Wh_r + bh_r)
/// z  = sigmoid(x Wi_z + bi_z + h Wh_z + bh_z)
/// n  = tanh(x Wi_n + bi_n + r * (h Wh_n + bh_n))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub spec: GruCellSpec,
    w_i: String,
    w_h: String,
    b_i: String,
    b_h: String,
}

impl GruCell {
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let (i, h) = (self.spec.input_dim, self.spec.hidden_dim);
        params.insert(&self.w_i, fan_in_uniform(i, 3 * h, 1.0, rng));
        params.insert(&self.w_h, fan_in_uniform(h, 3 * h, 1.0, rng));
        params.insert(&self.b_i, Array2::zeros((1, 3 * h)));
        params.insert(&self.b_h, Array2::zeros((1, 3 * h)));
    }

    pub fn step(&self, g: &mut Graph<'_>, p: &Bound<'_>, x: Var, h: Var) -> Result<Var> {
        let hd = self.spec.hidden_dim;
        if g.shape(x).1 != self.spec.input_dim {
            return Err(Error::DimMismatch { expected: self.spec.input_dim, got: g.shape(x).1 });
        }
        if g.shape(h).1 != hd || g.shape(h).0 != g.shape(x).0 {
            return Err(Error::DimMismatch { expected: hd, got: g.shape(h).1 });
        }
        let gi = g.linear(x, p.var(&self.w_i), p.var(&self.b_i));
        let gh = g.linear(h, p.var(&self.w_h), p.var(&self.b_h));
        let rz_i = g.slice_cols(gi, 0, 2 * hd);
        let rz_h = g.slice_cols(gh, 0, 2 * hd);
        let rz_pre = g.add(rz_i, rz_h);
        let rz = g.sigmoid(rz_pre);
        let r = g.slice_cols(rz, 0, hd);
        let z = g.slice_cols(rz, hd, 2 * hd);
        let n_i = g.slice_cols(gi, 2 * hd, 3 * hd);
        let n_h = g.slice_cols(gh, 2 * hd, 3 * hd);
        let rn = g.mul(r, n_h);
        let n_pre = g.add(n_i, rn);
        let n = g.tanh(n_pre);
        let h_minus_n = g.sub(h, n);
        let zd = g.mul(z, h_minus_n);
        Ok(g.add(n, zd))
    }

    /// Single-row step without a graph (acting hot path).
    pub fn eval_vec(&self, params: &ParamSet, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.spec.hidden_dim;
        let mut gi = params.get(&self.b_i).expect("gru b_i").row(0).to_vec();
        affine_acc(x, params.get(&self.w_i).expect("gru w_i"), &mut gi);
        let mut gh = params.get(&self.b_h).expect("gru b_h").row(0).to_vec();
        affine_acc(h, params.get(&self.w_h).expect("gru w_h"), &mut gh);
        (0..hd)
            .map(|j| {
                let r = super::graph::sigmoid(gi[j] + gh[j]);
                let z = super::graph::sigmoid(gi[hd + j] + gh[hd + j]);
                let n = (gi[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                n + z * (h[j] - n)
            })
            .collect()
    }

    pub fn eval(&self, params: &ParamSet, x: &Array2<f64>, h: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let p = g.bind_frozen(params);
        let xv = g.constant(x.clone());
        let hv = g.constant(h.clone());
        let out = self.step(&mut g, &p, xv, hv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_tree;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
    }

    /// Dense triple-loop oracle for one MLP.
    fn naive_mlp(params: &ParamSet, prefix: &str, layers: usize, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for l in 0..layers {
            let w = params.get(&format!("{prefix}.w{l}")).unwrap();
            let b = params.get(&format!("{prefix}.b{l}")).unwrap();
            let mut out = Array2::zeros((h.nrows(), w.ncols()));
            for r in 0..h.nrows() {
                for c in 0..w.ncols() {
                    let mut acc = b[[0, c]];
                    for k in 0..w.nrows() {
                        acc += h[[r, k]] * w[[k, c]];
                    }
                    out[[r, c]] = if l + 1 < layers { acc.tanh() } else { acc };
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let mlp = MlpSpec::new(3, &[8, 8], 2).unwrap().build("pi");
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        mlp.init(&mut a, &mut seed_tree(5, ["init"]));
        mlp.init(&mut b, &mut seed_tree(5, ["init"]));
        assert!(a.bit_eq(&b));
        for (name, t) in a.iter() {
            if name.contains(".b") {
                assert!(t.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn init_weight_mean_is_centered() {
        let spec = MlpSpec::new(400, &[250], 1).unwrap().build("m");
        let mut p = ParamSet::new();
        spec.init(&mut p, &mut seed_tree(9, ["clt"]));
        let w = p.get("m.w0").unwrap();
        assert_eq!(w.len(), 100_000);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * std / n.sqrt(), "mean {mean} std {std}");
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mlp = MlpSpec::new(3, &[4], 2).unwrap().build("z");
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut seed_tree(0, ["z"]));
        p.scale(0.0);
        let y = mlp.eval(&p, &array![[1.0, -2.0, 3.0]]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_is_identity_activated() {
        let mlp = MlpSpec::linear(1, 1).unwrap().build("l");
        let mut p = ParamSet::new();
        p.insert("l.w0", array![[-2.5]]);
        p.insert("l.b0", array![[0.0]]);
        let y = mlp.eval(&p, &array![[3.0]]).unwrap();
        assert_eq!(y[[0, 0]], -7.5);
    }

    #[test]
    fn mlp_matches_naive_oracle() {
        let mut rng = seed_tree(21, ["mlp-oracle"]);
        let mlp = MlpSpec::new(5, &[7, 6], 3).unwrap().build("o");
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut rng);
        for (_, t) in p.iter_mut() {
            t.mapv_inplace(|x| x + 0.1);
        }
        let x = randn(9, 5, 1.0, &mut rng);
        let got = mlp.eval(&p, &x).unwrap();
        let want = naive_mlp(&p, "o", 3, &x);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_rejects_wrong_input_dim() {
        let mlp = MlpSpec::new(3, &[4], 2).unwrap().build("d");
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut seed_tree(0, ["d"]));
        assert!(matches!(mlp.eval(&p, &Array2::zeros((1, 4))), Err(Error::DimMismatch { .. })));
        assert!(MlpSpec::new(3, &[], 2).is_err());
    }

    fn scalar_gru(params: &ParamSet, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let wi = params.get(&format!("{prefix}.w_i")).unwrap();
        let wh = params.get(&format!("{prefix}.w_h")).unwrap();
        let bi = params.get(&format!("{prefix}.b_i")).unwrap();
        let bh = params.get(&format!("{prefix}.b_h")).unwrap();
        let hd = h.len();
        let gate = |col: usize| -> (f64, f64) {
            let mut a = bi[[0, col]];
            for (k, xk) in x.iter().enumerate() {
                a += xk * wi[[k, col]];
            }
            let mut b = bh[[0, col]];
            for (k, hk) in h.iter().enumerate() {
                b += hk * wh[[k, col]];
            }
            (a, b)
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        (0..hd)
            .map(|j| {
                let (ri, rh) = gate(j);
                let (zi, zh) = gate(hd + j);
                let (ni, nh) = gate(2 * hd + j);
                let r = sig(ri + rh);
                let z = sig(zi + zh);
                let n = (ni + r * nh).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    #[test]
    fn gru_zero_params_keep_zero_hidden() {
        let cell = GruCellSpec::new(3, 4).unwrap().build("g");
        let mut p = ParamSet::new();
        cell.init(&mut p, &mut seed_tree(0, ["g"]));
        p.scale(0.0);
        let h = cell.eval(&p, &array![[1.0, 2.0, -3.0]], &Array2::zeros((1, 4))).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut rng = seed_tree(22, ["gru-oracle"]);
        let cell = GruCellSpec::new(4, 5).unwrap().build("g");
        let mut p = ParamSet::new();
        cell.init(&mut p, &mut rng);
        for (_, t) in p.iter_mut() {
            t.mapv_inplace(|x| x * 1.3 + 0.05);
        }
        let x = randn(3, 4, 1.0, &mut rng);
        let h = randn(3, 5, 0.5, &mut rng).mapv(f64::tanh);
        let got = cell.eval(&p, &x, &h).unwrap();
        for r in 0..3 {
            let want = scalar_gru(&p, "g", x.row(r).as_slice().unwrap(), h.row(r).as_slice().unwrap());
            for (j, w) in want.iter().enumerate() {
                assert!((got[[r, j]] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_hidden_stays_in_open_unit_interval() {
        let mut rng = seed_tree(23, ["gru-fuzz"]);
        let cell = GruCellSpec::new(3, 6).unwrap().build("g");
        let mut p = ParamSet::new();
        cell.init(&mut p, &mut rng);
        let mut h = Array2::zeros((1, 6));
        for _ in 0..10_000 {
            let x = randn(1, 3, 2.0, &mut rng);
            h = cell.eval(&p, &x, &h).unwrap();
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn row_paths_match_graph_paths() {
        let mut rng = seed_tree(24, ["rows"]);
        let mlp = MlpSpec::new(4, &[6], 3).unwrap().build("m");
        let cell = GruCellSpec::new(4, 5).unwrap().build("g");
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut rng);
        cell.init(&mut p, &mut rng);
        let x = randn(1, 4, 1.0, &mut rng);
        let h = randn(1, 5, 0.3, &mut rng);
        let a = mlp.eval(&p, &x).unwrap();
        let b = mlp.eval_vec(&p, x.as_slice().unwrap());
        let c = cell.eval(&p, &x, &h).unwrap();
        let d = cell.eval_vec(&p, x.as_slice().unwrap(), h.as_slice().unwrap());
        for (u, v) in a.iter().zip(&b).chain(c.iter().zip(&d)) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn gru_dimension_checks() {
        let cell = GruCellSpec::new(3, 4).unwrap().build("g");
        let mut p = ParamSet::new();
        cell.init(&mut p, &mut seed_tree(0, ["g"]));
        assert!(cell.eval(&p, &Array2::zeros((1, 2)), &Array2::zeros((1, 4))).is_err());
        assert!(cell.eval(&p, &Array2::zeros((1, 3)), &Array2::zeros((1, 5))).is_err());
    }
}
